//! ARNet: a U-Net of AR-ResBlocks that predicts a detail image which is added
//! to the upsampled multispectral input.
//!
//! Data flow for the standard topology (base width `b`, bands `C`):
//!
//! ```text
//! concat(pan, lrms) -> conv3x3 (1+C -> b) -> block(b) ─────────────┐ skip
//!   -> conv3x3/2 (b -> 2b) -> block(2b) ───────────────┐ skip      │
//!   -> conv3x3/2 (2b -> 4b) -> block(4b)               │           │
//!   -> convT2x2/2 (4b -> 2b) -> concat -> conv1x1 (4b -> 2b) -> block(2b)
//!   -> convT2x2/2 (2b -> b)  -> concat -> conv1x1 (2b -> b)  -> block(b)
//!   -> conv3x3 (b -> C) = detail;  output = lrms + detail
//! ```

mod upsample;

pub use upsample::{upsample, upsample_lrms, upsample_to, RATIO};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arconv::{register_conv, uniform_param, ARConv, ARConvConfig, ARConvOutput, AblationFlags, HWRange, KernelSpec};
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Number of ARConv layers in the standard network.
pub const STANDARD_LAYERS: usize = 10;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    /// Two downsampling levels with a bottleneck block: five blocks, ten layers.
    Standard,
    /// One level, no bottleneck: two blocks, four layers. For fast checks.
    Miniature,
}

impl Topology {
    fn levels(self) -> usize {
        match self {
            Topology::Standard => 2,
            Topology::Miniature => 1,
        }
    }

    fn has_bottleneck(self) -> bool {
        matches!(self, Topology::Standard)
    }

    pub fn blocks(self) -> usize {
        2 * self.levels() + usize::from(self.has_bottleneck())
    }

    pub fn layers(self) -> usize {
        2 * self.blocks()
    }
}

/// Range, coefficient and ablation settings of one ARConv slot.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSettings {
    pub range_h: HWRange,
    pub range_w: HWRange,
    /// Height coefficient; `None` derives it from the range.
    #[serde(default)]
    pub n: Option<f64>,
    #[serde(default)]
    pub m: Option<f64>,
    pub flags: AblationFlags,
}

impl Default for LayerSettings {
    fn default() -> Self {
        LayerSettings {
            range_h: HWRange::default(),
            range_w: HWRange::default(),
            n: None,
            m: None,
            flags: AblationFlags::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ARNetConfig {
    pub bands: usize,
    pub base_channels: usize,
    pub topology: Topology,
    pub extractor_width: usize,
    pub k_max: usize,
    pub fixed_spec: KernelSpec,
    /// One entry per ARConv layer, in forward order.
    pub layers: Vec<LayerSettings>,
    pub seed: u64,
}

impl ARNetConfig {
    pub fn new(bands: usize) -> Self {
        Self::with_topology(bands, Topology::Standard)
    }

    pub fn miniature(bands: usize) -> Self {
        Self::with_topology(bands, Topology::Miniature)
    }

    pub fn with_topology(bands: usize, topology: Topology) -> Self {
        ARNetConfig {
            bands,
            base_channels: 32,
            topology,
            extractor_width: 16,
            k_max: 7,
            fixed_spec: KernelSpec::new(3, 3),
            layers: vec![LayerSettings::default(); topology.layers()],
            seed: 0,
        }
    }

    pub fn set_flags(&mut self, flags: AblationFlags) {
        self.layers.iter_mut().for_each(|l| l.flags = flags);
    }

    pub fn set_range(&mut self, range: HWRange) {
        self.layers.iter_mut().for_each(|l| {
            l.range_h = range;
            l.range_w = range;
        });
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands != 4 && self.bands != 8 {
            return Err(Error::config(format!("bands must be 4 or 8, got {}", self.bands)));
        }
        if self.base_channels == 0 {
            return Err(Error::config("base_channels must be positive"));
        }
        if self.layers.len() != self.topology.layers() {
            return Err(Error::config(format!(
                "{:?} topology has {} ARConv layers, config lists {}",
                self.topology,
                self.topology.layers(),
                self.layers.len()
            )));
        }
        if self.topology == Topology::Standard && self.layers.len() != STANDARD_LAYERS {
            return Err(Error::config("standard topology must have ten ARConv layers"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            self.layer_config(i, 1, 1, l)
                .validate()
                .map_err(|e| Error::config(format!("layer {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    fn layer_config(&self, _index: usize, cin: usize, cout: usize, l: &LayerSettings) -> ARConvConfig {
        let mut c = ARConvConfig::new(cin, cout).with_ranges(l.range_h, l.range_w);
        if let Some(n) = l.n {
            c.n = n;
        }
        if let Some(m) = l.m {
            c.m = m;
        }
        c.k_max = self.k_max;
        c.fixed = self.fixed_spec;
        c.flags = l.flags;
        c.extractor_width = self.extractor_width;
        c
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.topology.levels()
    }
}

#[derive(Copy, Clone, Debug)]
struct Plain {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Plain {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        (cout, cin, k): (usize, usize, usize),
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (w, b) = register_conv(store, name, (cout, cin, k, k), cin * k * k, rng)?;
        Ok(Plain { w, b, stride, pad: k / 2 })
    }

    fn transposed<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let bound = 1.0 / (cin as f64).sqrt();
        let w = uniform_param(store, format!("{name}.weight"), Shape::new(cin, cout, 2, 2), bound, rng)?;
        let b = uniform_param(store, format!("{name}.bias"), Shape::new(1, cout, 1, 1), bound, rng)?;
        Ok(Plain { w, b, stride: 2, pad: 0 })
    }

    fn apply<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, Some(b), (self.stride, self.stride), (self.pad, self.pad))
    }

    fn apply_transposed<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d_transposed(x, w, Some(b), (self.stride, self.stride), (self.pad, self.pad))
    }
}

/// ARConv -> relu -> ARConv -> add input -> relu.
#[derive(Clone, Debug)]
pub struct ARResBlock {
    pub first: ARConv,
    pub second: ARConv,
}

impl ARResBlock {
    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, out: &mut Vec<ARConvOutput>) -> Result<Var> {
        let a = self.first.forward(g, store, x)?;
        let h = g.relu(a.y);
        let b = self.second.forward(g, store, h)?;
        out.push(a);
        out.push(b);
        let s = g.add(b.y, x)?;
        Ok(g.relu(s))
    }
}

#[derive(Clone, Debug)]
struct Level {
    encoder: ARResBlock,
    down: Plain,
    up: Plain,
    fuse: Plain,
    decoder: ARResBlock,
}

pub struct ARNetOutput {
    pub fused: Var,
    pub detail: Var,
    /// Per-layer outputs in forward order.
    pub layers: Vec<ARConvOutput>,
}

/// Network structure plus its parameter store.
#[derive(Clone, Debug)]
pub struct ARNet<T: Real> {
    cfg: ARNetConfig,
    pub params: ParamStore<T>,
    head: Plain,
    levels: Vec<Level>,
    bottleneck: Option<ARResBlock>,
    tail: Plain,
}

impl<T: Real> ARNet<T> {
    pub fn new(cfg: ARNetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let base = cfg.base_channels;
        let mut slot = 0usize;
        let mut block = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, ch: usize| -> Result<ARResBlock> {
            let mut make = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng| -> Result<ARConv> {
                let lc = cfg.layer_config(slot, ch, ch, &cfg.layers[slot]);
                slot += 1;
                ARConv::new(lc, store, &format!("arconv{slot}"), rng)
            };
            let first = make(store, rng)?;
            let second = make(store, rng)?;
            Ok(ARResBlock { first, second })
        };

        let head = Plain::new(&mut store, "head", (base, cfg.bands + 1, 3), 1, &mut rng)?;
        let depth = cfg.topology.levels();
        let mut encoders = Vec::with_capacity(depth);
        let mut downs = Vec::with_capacity(depth);
        for l in 0..depth {
            let ch = base << l;
            encoders.push(block(&mut store, &mut rng, ch)?);
            downs.push(Plain::new(&mut store, &format!("down{l}"), (ch * 2, ch, 3), 2, &mut rng)?);
        }
        let bottleneck = if cfg.topology.has_bottleneck() {
            Some(block(&mut store, &mut rng, base << depth)?)
        } else {
            None
        };
        let mut decoders = Vec::with_capacity(depth);
        for l in (0..depth).rev() {
            let ch = base << l;
            let up = Plain::transposed(&mut store, &format!("up{l}"), ch * 2, ch, &mut rng)?;
            let fuse = Plain::new(&mut store, &format!("fuse{l}"), (ch, ch * 2, 1), 1, &mut rng)?;
            decoders.push((up, fuse, block(&mut store, &mut rng, ch)?));
        }
        decoders.reverse();
        let levels = encoders
            .into_iter()
            .zip(downs)
            .zip(decoders)
            .map(|((encoder, down), (up, fuse, decoder))| Level { encoder, down, up, fuse, decoder })
            .collect();
        let tail = Plain::new(&mut store, "tail", (cfg.bands, base, 3), 1, &mut rng)?;
        Ok(ARNet {
            cfg,
            params: store,
            head,
            levels,
            bottleneck,
            tail,
        })
    }

    pub fn config(&self) -> &ARNetConfig {
        &self.cfg
    }

    /// All ARConv layers in forward order.
    pub fn layers(&self) -> Vec<&ARConv> {
        let mut out = Vec::new();
        for l in &self.levels {
            out.push(&l.encoder.first);
            out.push(&l.encoder.second);
        }
        if let Some(b) = &self.bottleneck {
            out.push(&b.first);
            out.push(&b.second);
        }
        for l in self.levels.iter().rev() {
            out.push(&l.decoder.first);
            out.push(&l.decoder.second);
        }
        out
    }

    fn layers_mut(&mut self) -> Vec<&mut ARConv> {
        let mut enc = Vec::new();
        let mut dec = Vec::new();
        for l in self.levels.iter_mut() {
            enc.push(&mut l.encoder.first);
            enc.push(&mut l.encoder.second);
            dec.push([&mut l.decoder.first, &mut l.decoder.second]);
        }
        if let Some(b) = self.bottleneck.as_mut() {
            enc.push(&mut b.first);
            enc.push(&mut b.second);
        }
        for pair in dec.into_iter().rev() {
            enc.extend(pair);
        }
        enc
    }

    pub fn layer_count(&self) -> usize {
        self.cfg.topology.layers()
    }

    /// Frozen specs of every layer, `None` while exploring.
    pub fn frozen_specs(&self) -> Option<Vec<KernelSpec>> {
        self.layers().iter().map(|l| l.frozen_spec()).collect()
    }

    pub fn freeze(&mut self, specs: &[KernelSpec]) -> Result<()> {
        if specs.len() != self.layer_count() {
            return Err(Error::config(format!(
                "expected {} kernel specs, got {}",
                self.layer_count(),
                specs.len()
            )));
        }
        for (layer, &spec) in self.layers_mut().into_iter().zip(specs) {
            layer.freeze(spec)?;
        }
        Ok(())
    }

    /// The detail branch's final convolution.
    pub fn tail_params(&self) -> (ParamId, ParamId) {
        (self.tail.w, self.tail.b)
    }

    pub fn forward(&self, g: &mut Graph<T>, pan: Var, lrms: Var) -> Result<ARNetOutput> {
        let (ps, ls) = (g.shape(pan), g.shape(lrms));
        if ls.c != self.cfg.bands {
            return Err(Error::ShapeMismatch {
                op: "arnet bands",
                left: ls,
                right: Shape::new(ls.n, self.cfg.bands, ls.h, ls.w),
            });
        }
        if ps != Shape::new(ls.n, 1, ls.h, ls.w) {
            return Err(Error::ShapeMismatch { op: "arnet pan", left: ps, right: ls });
        }
        let mult = self.cfg.size_multiple();
        if ls.h % mult != 0 || ls.w % mult != 0 {
            return Err(Error::config(format!(
                "input {}x{} must be divisible by {mult}",
                ls.h, ls.w
            )));
        }
        let store = &self.params;
        let mut layers = Vec::with_capacity(self.layer_count());
        let x = g.concat_channels(&[pan, lrms])?;
        let x = self.head.apply(g, store, x)?;
        let mut x = g.relu(x);
        let mut skips = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            let e = level.encoder.forward(g, store, x, &mut layers)?;
            skips.push(e);
            let d = level.down.apply(g, store, e)?;
            x = g.relu(d);
        }
        if let Some(b) = &self.bottleneck {
            x = b.forward(g, store, x, &mut layers)?;
        }
        for (level, skip) in self.levels.iter().zip(skips).rev() {
            let u = level.up.apply_transposed(g, store, x)?;
            let c = g.concat_channels(&[u, skip])?;
            let f = level.fuse.apply(g, store, c)?;
            let f = g.relu(f);
            x = level.decoder.forward(g, store, f, &mut layers)?;
        }
        let detail = self.tail.apply(g, store, x)?;
        let fused = g.add(lrms, detail)?;
        Ok(ARNetOutput { fused, detail, layers })
    }

    /// Fused image for concrete inputs, outside any training graph.
    pub fn predict(&self, pan: &Tensor<T>, lrms: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let (p, l) = (g.constant(pan.clone()), g.constant(lrms.clone()));
        let out = self.forward(&mut g, p, l)?;
        Ok(g.value(out.fused).clone())
    }

    /// Same network with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> ARNet<U> {
        ARNet {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            head: self.head,
            levels: self.levels.clone(),
            bottleneck: self.bottleneck.clone(),
            tail: self.tail,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;


    fn small(topology: Topology) -> ARNetConfig {
        let mut c = ARNetConfig::with_topology(4, topology);
        c.base_channels = 4;
        c.extractor_width = 4;
        c
    }

    fn run(net: &ARNet<f64>, n: usize, h: usize) -> (Graph<f64>, ARNetOutput, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pan = Tensor::uniform(Shape::new(n, 1, h, h), 0.0, 1.0, &mut rng);
        let lrms_t = Tensor::uniform(Shape::new(n, 4, h, h), 0.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let p = g.constant(pan);
        let l = g.constant(lrms_t.clone());
        let out = net.forward(&mut g, p, l).unwrap();
        (g, out, lrms_t)
    }

    #[test]
    fn standard_has_ten_layers() {
        let net = ARNet::<f64>::new(small(Topology::Standard)).unwrap();
        assert_eq!(net.layers().len(), 10);
        assert_eq!(Topology::Miniature.layers(), 4);
        let (g, out, _) = run(&net, 2, 16);
        assert_eq!(g.shape(out.fused), Shape::new(2, 4, 16, 16));
        assert_eq!(out.layers.len(), 10);
    }

    #[test]
    fn zero_tail_is_identity_on_lrms() {
        let mut net = ARNet::<f64>::new(small(Topology::Standard)).unwrap();
        let (w, b) = net.tail_params();
        net.params.value_mut(w).fill(0.0);
        net.params.value_mut(b).fill(0.0);
        let (g, out, lrms) = run(&net, 1, 16);
        assert_eq!(g.value(out.fused), &lrms);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut cfg = small(Topology::Miniature);
        cfg.bands = 3;
        assert!(ARNet::<f64>::new(cfg).is_err());
        let mut cfg = small(Topology::Standard);
        cfg.layers.pop();
        assert!(ARNet::<f64>::new(cfg).is_err());

        let net = ARNet::<f64>::new(small(Topology::Standard)).unwrap();
        let mut g = Graph::new();
        let p = g.constant(Tensor::zeros(Shape::new(1, 1, 18, 18)));
        let l = g.constant(Tensor::zeros(Shape::new(1, 4, 18, 18)));
        assert!(net.forward(&mut g, p, l).is_err());
        let l8 = g.constant(Tensor::zeros(Shape::new(1, 8, 16, 16)));
        let p16 = g.constant(Tensor::zeros(Shape::new(1, 1, 16, 16)));
        assert!(net.forward(&mut g, p16, l8).is_err());
    }

    #[test]
    fn freeze_round_trip() {
        let mut net = ARNet::<f32>::new(small(Topology::Miniature)).unwrap();
        assert!(net.frozen_specs().is_none());
        let specs = vec![KernelSpec::new(3, 5), KernelSpec::new(1, 1), KernelSpec::new(7, 7), KernelSpec::new(5, 3)];
        net.freeze(&specs).unwrap();
        let got = net.frozen_specs().unwrap();
        assert!(got.iter().zip(&specs).all(|(a, b)| a.kh == b.kh && a.kw == b.kw && a.frozen));
        assert!(net.freeze(&specs[..2]).is_err());
    }
}
