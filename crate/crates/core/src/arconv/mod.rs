//! Adaptive rectangular convolution.
//!
//! One layer learns a per-pixel kernel height and width, picks an odd number
//! of sampling points per dimension from the mean learned extent, samples the
//! input bilinearly on the resulting rectangle, applies a shared kernel with a
//! strided convolution over the expanded map, and modulates the result with
//! predicted scale and shift maps.

mod sampling;
mod select;

pub use sampling::{bilinear, build_sampling_map, offset_grid, raw_offsets, Cell, SamplingMap};
pub use select::{phi, points_for, select_from_means, select_points};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Largest `span + floor` accepted for a height/width range.
pub const MAX_RANGE: f64 = 63.0;

/// Learnable extent interval `(floor, floor + span)` for one dimension.
///
/// Written as `"1-18"` in configs: floor 1, upper bound 18.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct HWRange {
    pub span: f64,
    pub floor: f64,
}

impl HWRange {
    pub fn new(span: f64, floor: f64) -> Result<Self> {
        if !(span > 0.0 && floor > 0.0) {
            return Err(Error::config(format!(
                "range needs positive span and floor, got span={span} floor={floor}"
            )));
        }
        if span + floor > MAX_RANGE {
            return Err(Error::config(format!(
                "range upper bound {} exceeds {MAX_RANGE}",
                span + floor
            )));
        }
        Ok(HWRange { span, floor })
    }

    pub fn from_bounds(lo: f64, hi: f64) -> Result<Self> {
        HWRange::new(hi - lo, lo)
    }

    pub fn upper(&self) -> f64 {
        self.span + self.floor
    }

    /// Default modulation coefficient: the range top maps to seven points,
    /// never below one point per unit of extent.
    pub fn default_coefficient(&self) -> f64 {
        (self.upper() / 8.0).max(1.0)
    }
}

impl Default for HWRange {
    fn default() -> Self {
        HWRange { span: 17.0, floor: 1.0 }
    }
}

impl fmt::Display for HWRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.floor, self.upper())
    }
}

impl FromStr for HWRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (lo, hi) = s
            .split_once('-')
            .ok_or_else(|| Error::config(format!("range {s:?} is not of the form lo-hi")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::config(format!("range {s:?}: {v:?} is not a number")))
        };
        HWRange::from_bounds(parse(lo)?, parse(hi)?)
    }
}

impl Serialize for HWRange {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for HWRange {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Sampling-point geometry of a layer: odd counts per dimension.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kh: usize,
    pub kw: usize,
    #[serde(default)]
    pub frozen: bool,
}

impl KernelSpec {
    pub fn new(kh: usize, kw: usize) -> Self {
        KernelSpec { kh, kw, frozen: false }
    }

    pub fn frozen(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn points(&self) -> usize {
        self.kh * self.kw
    }

    pub fn validate(&self, k_max: usize) -> Result<()> {
        for k in [self.kh, self.kw] {
            if k == 0 || k % 2 == 0 || k > k_max {
                return Err(Error::config(format!(
                    "kernel spec {}x{} must be odd and within [1, {k_max}]",
                    self.kh, self.kw
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.kh, self.kw)
    }
}

/// Per-pixel learned kernel height and width, each `(N, 1, H, W)`.
#[derive(Clone, Debug)]
pub struct HWField<T> {
    pub h: Tensor<T>,
    pub w: Tensor<T>,
}

/// Component switches for ablation runs.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    /// Learn the height/width field; otherwise use the fixed spec's extents.
    pub hwa: bool,
    /// Choose point counts from the field; otherwise use the fixed spec.
    pub nspa: bool,
    /// Modulate the output with predicted scale and shift maps.
    pub at: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags { hwa: true, nspa: true, at: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ARConvConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub range_h: HWRange,
    pub range_w: HWRange,
    /// Height modulation coefficient (extent units per sampling point).
    pub n: f64,
    /// Width modulation coefficient.
    pub m: f64,
    pub k_max: usize,
    /// Spec used when point-count selection is disabled.
    pub fixed: KernelSpec,
    pub flags: AblationFlags,
    pub extractor_width: usize,
}

impl ARConvConfig {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        let range = HWRange::default();
        ARConvConfig {
            in_channels,
            out_channels,
            range_h: range,
            range_w: range,
            n: range.default_coefficient(),
            m: range.default_coefficient(),
            k_max: 7,
            fixed: KernelSpec::new(3, 3),
            flags: AblationFlags::default(),
            extractor_width: 16,
        }
    }

    pub fn with_ranges(mut self, range_h: HWRange, range_w: HWRange) -> Self {
        self.range_h = range_h;
        self.range_w = range_w;
        self.n = range_h.default_coefficient();
        self.m = range_w.default_coefficient();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.extractor_width == 0 {
            return Err(Error::config("ARConv channel counts must be positive"));
        }
        if self.k_max == 0 || self.k_max % 2 == 0 {
            return Err(Error::config(format!("k_max must be odd, got {}", self.k_max)));
        }
        if !(self.n > 0.0 && self.m > 0.0) {
            return Err(Error::config("modulation coefficients n, m must be positive"));
        }
        HWRange::new(self.range_h.span, self.range_h.floor)?;
        HWRange::new(self.range_w.span, self.range_w.floor)?;
        self.fixed.validate(self.k_max)
    }
}

#[derive(Copy, Clone, Debug)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

/// Result of one layer application.
#[derive(Copy, Clone, Debug)]
pub struct ARConvOutput {
    pub y: Var,
    /// Learned height and width maps, absent when height/width learning is off.
    pub hw: Option<(Var, Var)>,
    pub spec: KernelSpec,
}

/// One adaptive rectangular convolution layer. Parameters live in an
/// external [`ParamStore`]; the layer keeps their ids and its frozen spec.
#[derive(Clone, Debug)]
pub struct ARConv {
    cfg: ARConvConfig,
    ext1: ConvIds,
    ext2: ConvIds,
    head_h: ConvIds,
    head_w: ConvIds,
    kernel: ConvIds,
    mod_m: ConvIds,
    mod_b: ConvIds,
    frozen: Option<KernelSpec>,
}

pub(crate) fn uniform_param<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: String,
    shape: Shape,
    bound: f64,
    rng: &mut R,
) -> Result<ParamId> {
    let t = if bound > 0.0 {
        Tensor::uniform(shape, -bound, bound, rng)
    } else {
        Tensor::zeros(shape)
    };
    store.register(name, t)
}

/// Register weights `(out, in, kh, kw)` and bias with fan-in scaled uniform init.
pub(crate) fn register_conv<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    (out, inp, kh, kw): (usize, usize, usize, usize),
    fan_in: usize,
    rng: &mut R,
) -> Result<(ParamId, ParamId)> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = uniform_param(store, format!("{prefix}.weight"), Shape::new(out, inp, kh, kw), bound, rng)?;
    let b = uniform_param(store, format!("{prefix}.bias"), Shape::new(1, out, 1, 1), bound, rng)?;
    Ok((w, b))
}

impl ARConv {
    pub fn new<T: Real, R: Rng + ?Sized>(
        cfg: ARConvConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let (ci, co, ew, k) = (cfg.in_channels, cfg.out_channels, cfg.extractor_width, cfg.k_max);
        let mut conv = |name: &str, dims: (usize, usize, usize, usize), fan_in: usize| -> Result<ConvIds> {
            let (w, b) = register_conv(store, &format!("{prefix}.{name}"), dims, fan_in, rng)?;
            Ok(ConvIds { w, b })
        };
        let ext1 = conv("extractor.0", (ew, ci, 3, 3), ci * 9)?;
        let ext2 = conv("extractor.1", (ew, ew, 3, 3), ew * 9)?;
        let head_h = conv("head_h", (1, ew, 1, 1), ew)?;
        let head_w = conv("head_w", (1, ew, 1, 1), ew)?;
        let kernel = conv("kernel", (co, ci, k, k), ci * cfg.fixed.points())?;
        let mut modulation = |name: &str| -> Result<ConvIds> {
            let w = uniform_param(store, format!("{prefix}.{name}.weight"), Shape::new(co, ci, 1, 1), 0.01, rng)?;
            let b = uniform_param(store, format!("{prefix}.{name}.bias"), Shape::new(1, co, 1, 1), 0.0, rng)?;
            Ok(ConvIds { w, b })
        };
        let mod_m = modulation("mod_m")?;
        let mod_b = modulation("mod_b")?;
        Ok(ARConv {
            cfg,
            ext1,
            ext2,
            head_h,
            head_w,
            kernel,
            mod_m,
            mod_b,
            frozen: None,
        })
    }

    pub fn config(&self) -> &ARConvConfig {
        &self.cfg
    }

    pub fn flags(&self) -> AblationFlags {
        self.cfg.flags
    }

    pub fn frozen_spec(&self) -> Option<KernelSpec> {
        self.frozen
    }

    pub fn freeze(&mut self, spec: KernelSpec) -> Result<()> {
        spec.validate(self.cfg.k_max)?;
        self.frozen = Some(spec.frozen());
        Ok(())
    }

    pub fn unfreeze(&mut self) {
        self.frozen = None;
    }

    /// Ids of the shared kernel weights `(C_out, C_in, k_max, k_max)` and bias.
    pub fn kernel_params(&self) -> (ParamId, ParamId) {
        (self.kernel.w, self.kernel.b)
    }

    pub fn modulation_params(&self) -> [(ParamId, ParamId); 2] {
        [(self.mod_m.w, self.mod_m.b), (self.mod_b.w, self.mod_b.b)]
    }

    pub fn extractor_params(&self) -> [(ParamId, ParamId); 4] {
        [
            (self.ext1.w, self.ext1.b),
            (self.ext2.w, self.ext2.b),
            (self.head_h.w, self.head_h.b),
            (self.head_w.w, self.head_w.b),
        ]
    }

    fn apply_conv<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, ids: ConvIds, pad: usize) -> Result<Var> {
        let w = g.param(store, ids.w);
        let b = g.param(store, ids.b);
        g.conv2d(x, w, Some(b), (1, 1), (pad, pad))
    }

    fn check_input<T: Real>(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.c != self.cfg.in_channels {
            return Err(Error::ShapeMismatch {
                op: "arconv input",
                left: s,
                right: Shape::new(s.n, self.cfg.in_channels, s.h, s.w),
            });
        }
        Ok(())
    }

    /// Height and width maps scaled into their ranges. `None` when height and
    /// width learning is disabled.
    pub fn learn_hw<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Option<(Var, Var)>> {
        self.check_input(g, x)?;
        if !self.cfg.flags.hwa {
            return Ok(None);
        }
        let f = self.apply_conv(g, store, x, self.ext1, 1)?;
        let f = g.relu(f);
        let f = self.apply_conv(g, store, f, self.ext2, 1)?;
        let f = g.relu(f);
        let mut scaled = |ids: ConvIds, range: HWRange| -> Result<Var> {
            let raw = self.apply_conv(g, store, f, ids, 0)?;
            let s = g.sigmoid(raw);
            Ok(g.affine(s, T::lit(range.span), T::lit(range.floor)))
        };
        let h = scaled(self.head_h, self.cfg.range_h)?;
        let w = scaled(self.head_w, self.cfg.range_w)?;
        Ok(Some((h, w)))
    }

    /// Spec for this forward pass: frozen if set, the fixed spec when either
    /// adaptation is disabled, otherwise selected from the current field.
    pub fn current_spec<T: Real>(&self, g: &Graph<T>, hw: Option<(Var, Var)>) -> Result<KernelSpec> {
        if let Some(spec) = self.frozen {
            return Ok(spec);
        }
        match hw {
            Some((h, w)) if self.cfg.flags.nspa => {
                let mean = |v: Var| g.value(v).mean().to_f64().unwrap_or(f64::NAN);
                select_from_means(mean(h), mean(w), self.cfg.n, self.cfg.m, self.cfg.k_max)
            }
            _ => Ok(self.cfg.fixed),
        }
    }

    /// Scale and shift maps `(M, B)`, each `(N, C_out, H, W)`.
    pub fn affine_maps<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<(Var, Var)> {
        self.check_input(g, x)?;
        let m = self.apply_conv(g, store, x, self.mod_m, 0)?;
        let m = g.add_scalar(m, T::one());
        let b = self.apply_conv(g, store, x, self.mod_b, 0)?;
        Ok((m, b))
    }

    /// Strided kernel over an already built sampling map, then modulation.
    pub fn apply_kernel<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        map: Var,
        spec: KernelSpec,
        x: Var,
    ) -> Result<Var> {
        spec.validate(self.cfg.k_max)?;
        let (xs, ms) = (g.shape(x), g.shape(map));
        if ms != Shape::new(xs.n, xs.c, xs.h * spec.kh, xs.w * spec.kw) {
            return Err(Error::ShapeMismatch { op: "apply_kernel", left: ms, right: xs });
        }
        let k = g.param(store, self.kernel.w);
        let k = g.crop_center(k, spec.kh, spec.kw)?;
        let b = g.param(store, self.kernel.b);
        let y = g.conv2d(map, k, Some(b), (spec.kh, spec.kw), (0, 0))?;
        self.modulate(g, store, y, x)
    }

    /// Same as [`ARConv::apply_kernel`] for samples in column layout
    /// `(N, C_in*kh*kw, H, W)`: the strided kernel becomes a pointwise one.
    pub fn apply_kernel_columns<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        cols: Var,
        spec: KernelSpec,
        x: Var,
    ) -> Result<Var> {
        spec.validate(self.cfg.k_max)?;
        let (xs, cs) = (g.shape(x), g.shape(cols));
        if cs != Shape::new(xs.n, xs.c * spec.points(), xs.h, xs.w) {
            return Err(Error::ShapeMismatch { op: "apply_kernel", left: cs, right: xs });
        }
        let k = g.param(store, self.kernel.w);
        let k = g.crop_center(k, spec.kh, spec.kw)?;
        let ks = g.shape(k);
        let k = g.reshape(k, Shape::new(ks.n, ks.c * ks.h * ks.w, 1, 1))?;
        let b = g.param(store, self.kernel.b);
        let y = g.conv2d(cols, k, Some(b), (1, 1), (0, 0))?;
        self.modulate(g, store, y, x)
    }

    fn modulate<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, y: Var, x: Var) -> Result<Var> {
        if !self.cfg.flags.at {
            return Ok(y);
        }
        let (m, shift) = self.affine_maps(g, store, x)?;
        let y = g.mul(y, m)?;
        g.add(y, shift)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<ARConvOutput> {
        let hw = self.learn_hw(g, store, x)?;
        let spec = self.current_spec(g, hw)?;
        g.note_kink(spec);
        let (h, w) = match hw {
            Some(pair) => pair,
            None => {
                let xs = g.shape(x);
                let field = Shape::new(xs.n, 1, xs.h, xs.w);
                let h = g.constant(Tensor::full(field, T::lit(spec.kh as f64)));
                let w = g.constant(Tensor::full(field, T::lit(spec.kw as f64)));
                (h, w)
            }
        };
        let cols = g.sampling_columns(x, h, w, spec)?;
        let y = self.apply_kernel_columns(g, store, cols, spec, x)?;
        Ok(ARConvOutput { y, hw, spec })
    }

    /// Height/width field of a concrete input, outside any training graph.
    pub fn hw_field<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Option<HWField<T>>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        Ok(self.learn_hw(&mut g, store, xv)?.map(|(h, w)| HWField {
            h: g.value(h).clone(),
            w: g.value(w).clone(),
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{conv2d, ConvKernel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer(ci: usize, co: usize, flags: AblationFlags, seed: u64) -> (ARConv, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = ARConvConfig::new(ci, co);
        cfg.flags = flags;
        let l = ARConv::new(cfg, &mut store, "l", &mut rng).unwrap();
        (l, store)
    }

    #[test]
    fn range_parsing() {
        let r: HWRange = "1-18".parse().unwrap();
        assert_eq!((r.floor, r.span, r.upper()), (1.0, 17.0, 18.0));
        assert_eq!(r.to_string(), "1-18");
        assert!("1-64".parse::<HWRange>().is_err());
        assert!("0-9".parse::<HWRange>().is_err());
        assert!("9".parse::<HWRange>().is_err());
        assert_eq!("1-63".parse::<HWRange>().unwrap().default_coefficient(), 7.875);
        assert_eq!("1-3".parse::<HWRange>().unwrap().default_coefficient(), 1.0);
    }

    #[test]
    fn half_sigmoid_maps_to_range_center() {
        let (l, mut store) = layer(2, 2, AblationFlags::default(), 1);
        // zero head weights make the sigmoid output exactly 0.5
        for (w, b) in [l.extractor_params()[2], l.extractor_params()[3]] {
            store.value_mut(w).fill(0.0);
            store.value_mut(b).fill(0.0);
        }
        let x = Tensor::uniform(Shape::new(1, 2, 6, 6), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let hw = l.hw_field(&store, &x).unwrap().unwrap();
        assert!(hw.h.data().iter().all(|&v| v == 9.5));
        assert!(hw.w.data().iter().all(|&v| v == 9.5));
    }

    #[test]
    fn no_hwa_uses_fixed_extents() {
        let flags = AblationFlags { hwa: false, ..Default::default() };
        let (l, store) = layer(2, 3, flags, 4);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(Shape::new(1, 2, 5, 5)));
        let out = l.forward(&mut g, &store, x).unwrap();
        assert!(out.hw.is_none());
        assert_eq!(out.spec, KernelSpec::new(3, 3));
        assert_eq!(g.shape(out.y), Shape::new(1, 3, 5, 5));
    }

    #[test]
    fn zero_kernel_and_shift_give_zero() {
        let (l, mut store) = layer(3, 2, AblationFlags::default(), 8);
        let (kw, kb) = l.kernel_params();
        store.value_mut(kw).fill(0.0);
        store.value_mut(kb).fill(0.0);
        let [_, (bw, bb)] = l.modulation_params();
        store.value_mut(bw).fill(0.0);
        store.value_mut(bb).fill(0.0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform(Shape::new(2, 3, 7, 7), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let out = l.forward(&mut g, &store, x).unwrap();
        assert!(g.value(out.y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_input_modulation_is_bias_transform() {
        let (l, mut store) = layer(3, 2, AblationFlags::default(), 8);
        let [(mw, mb), (bw, bb)] = l.modulation_params();
        store.value_mut(mb).data_mut().copy_from_slice(&[0.25, -0.5]);
        store.value_mut(bb).data_mut().copy_from_slice(&[0.1, 0.2]);
        let _ = (mw, bw);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(Shape::new(1, 3, 4, 4)));
        let (m, b) = l.affine_maps(&mut g, &store, x).unwrap();
        for c in 0..2 {
            for p in 0..16 {
                assert_eq!(g.value(m).item(0)[c * 16 + p], [1.25, 0.5][c]);
                assert_eq!(g.value(b).item(0)[c * 16 + p], [0.1, 0.2][c]);
            }
        }
    }

    #[test]
    fn frozen_spec_is_used() {
        let (mut l, store) = layer(2, 2, AblationFlags::default(), 3);
        l.freeze(KernelSpec::new(5, 3)).unwrap();
        assert!(l.freeze(KernelSpec::new(4, 3)).is_err());
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(Shape::new(1, 2, 8, 8)));
        let out = l.forward(&mut g, &store, x).unwrap();
        assert_eq!((out.spec.kh, out.spec.kw, out.spec.frozen), (5, 3, true));
    }

    #[test]
    fn plain_convolution_when_everything_is_off() {
        let flags = AblationFlags { hwa: false, nspa: false, at: false };
        let (mut l, store) = layer(3, 4, flags, 12);
        l.freeze(KernelSpec::new(3, 3)).unwrap();
        let xt = Tensor::uniform(Shape::new(2, 3, 9, 9), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let mut g = Graph::new();
        let x = g.constant(xt.clone());
        let out = l.forward(&mut g, &store, x).unwrap();
        let (kw, kb) = l.kernel_params();
        let full = store.value(kw);
        let center = Tensor::from_fn(Shape::new(4, 3, 3, 3), |o, c, i, j| full.at(o, c, i + 2, j + 2));
        let reference = conv2d(&xt, &ConvKernel::new(center, Some(store.value(kb).clone())).with_padding(1, 1)).unwrap();
        assert!(g.value(out.y).max_abs_diff(&reference) < 1e-10);
    }
    #[test]
    fn column_layout_matches_sampling_map() {
        let (l, store) = layer(3, 2, AblationFlags::default(), 21);
        let xt = Tensor::uniform(Shape::new(2, 3, 6, 7), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let spec = KernelSpec::new(5, 3);
        let run = |columns: bool| {
            let mut g = Graph::new();
            let x = g.leaf(xt.clone());
            let (h, w) = l.learn_hw(&mut g, &store, x).unwrap().unwrap();
            let y = if columns {
                let c = g.sampling_columns(x, h, w, spec).unwrap();
                l.apply_kernel_columns(&mut g, &store, c, spec, x).unwrap()
            } else {
                let m = g.sampling_map(x, h, w, spec).unwrap();
                l.apply_kernel(&mut g, &store, m, spec, x).unwrap()
            };
            let t = g.constant(Tensor::zeros(g.shape(y)));
            let loss = g.l1_loss(y, t).unwrap();
            let grads = g.backward(loss).unwrap();
            (g.value(y).clone(), grads.get(x).unwrap().clone())
        };
        let (ya, ga) = run(true);
        let (yb, gb) = run(false);
        assert!(ya.max_abs_diff(&yb) < 1e-12);
        assert!(ga.max_abs_diff(&gb) < 1e-12);
    }
}
