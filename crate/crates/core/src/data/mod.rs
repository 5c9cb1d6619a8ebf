//! Synthetic scenes, reduced-resolution degradation and the on-disk dataset.

mod export;
mod io;
mod wald;

pub use export::{colormap, write_heatmap, write_raw, write_rgb, Stretch, VIRIDIS};
pub use io::{read_dataset, read_manifest, write_dataset, Manifest, FORMAT_NAME, FORMAT_VERSION, SAMPLE_MAGIC};
pub use wald::{decimate, gaussian_blur, gaussian_kernel, synth_pan, wald_degrade, WaldConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// PAN, low-resolution MS and ground truth of one scene, batch dimension 1.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTriple<T> {
    pub pan: Tensor<T>,
    pub lrms_low: Tensor<T>,
    pub gt: Tensor<T>,
}

impl<T: Real> SampleTriple<T> {
    pub fn bands(&self) -> usize {
        self.gt.shape().c
    }

    pub fn size(&self) -> (usize, usize) {
        let s = self.gt.shape();
        (s.h, s.w)
    }

    pub fn cast<U: Real>(&self) -> SampleTriple<U> {
        SampleTriple {
            pan: self.pan.cast(),
            lrms_low: self.lrms_low.cast(),
            gt: self.gt.cast(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.gt.shape();
        let p = self.pan.shape();
        let l = self.lrms_low.shape();
        if g.n != 1 || p != Shape::new(1, 1, g.h, g.w) {
            return Err(Error::ShapeMismatch { op: "sample pan", left: p, right: g });
        }
        if l != Shape::new(1, g.c, g.h / 4, g.w / 4) || g.h % 4 != 0 || g.w % 4 != 0 {
            return Err(Error::ShapeMismatch { op: "sample lrms", left: l, right: g });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Footprint {
    /// Axis-aligned rectangle with top-left corner `(y, x)`.
    Rect { y: usize, x: usize, h: usize, w: usize },
    /// Disk of radius `r` centered on `(cy, cx)`.
    Disk { cy: f64, cx: f64, r: f64 },
}

impl Footprint {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            Footprint::Rect { y: y0, x: x0, h, w } => y >= y0 && y < y0 + h && x >= x0 && x < x0 + w,
            Footprint::Disk { cy, cx, r } => {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                dy * dy + dx * dx <= r * r
            }
        }
    }

    fn inside(&self, size: usize) -> bool {
        match *self {
            Footprint::Rect { y, x, h, w } => h > 0 && w > 0 && y + h <= size && x + w <= size,
            Footprint::Disk { cy, cx, r } => r > 0.0 && cy - r >= 0.0 && cx - r >= 0.0 && cy + r <= (size - 1) as f64 && cx + r <= (size - 1) as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub footprint: Footprint,
    /// One value per band.
    pub reflectance: Vec<f64>,
}

/// Description of a synthetic scene: square canvas, per-band background,
/// objects painted in order, additive Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub size: usize,
    pub bands: usize,
    pub background: Vec<f64>,
    pub objects: Vec<SceneObject>,
    pub noise: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.bands != 4 && self.bands != 8 {
            return Err(Error::config(format!("bands must be 4 or 8, got {}", self.bands)));
        }
        if self.size == 0 {
            return Err(Error::config("scene size must be positive"));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::config("noise must be non-negative"));
        }
        let unit = |v: &[f64]| v.len() == self.bands && v.iter().all(|r| (0.0..=1.0).contains(r));
        if !unit(&self.background) {
            return Err(Error::config("background needs one reflectance in [0, 1] per band"));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !unit(&o.reflectance) {
                return Err(Error::config(format!("object {i}: reflectance needs one value in [0, 1] per band")));
            }
            if !o.footprint.inside(self.size) {
                return Err(Error::config(format!("object {i} extends outside the {}px canvas", self.size)));
            }
        }
        Ok(())
    }

    /// A random inventory with object sizes from a few pixels up to a third of the canvas.
    pub fn random(size: usize, bands: usize, noise: f64, rng: &mut impl Rng) -> Self {
        let spectrum = |rng: &mut dyn rand::RngCore| -> Vec<f64> {
            let level = rng.random_range(0.15..0.85);
            (0..bands).map(|_| (level + rng.random_range(-0.15..0.15f64)).clamp(0.0, 1.0)).collect()
        };
        let background = spectrum(rng);
        let count = rng.random_range(6..=14);
        let largest = (size / 3).max(3);
        let objects = (0..count)
            .map(|_| {
                let extent = |rng: &mut dyn rand::RngCore| -> usize {
                    let t: f64 = rng.random();
                    (2.0 * (largest as f64 / 2.0).powf(t)).round().clamp(2.0, largest as f64) as usize
                };
                let footprint = if rng.random_bool(0.6) {
                    let (h, w) = (extent(rng), extent(rng));
                    Footprint::Rect {
                        y: rng.random_range(0..=size - h),
                        x: rng.random_range(0..=size - w),
                        h,
                        w,
                    }
                } else {
                    let r = extent(rng) as f64 / 2.0;
                    let span = (size - 1) as f64 - 2.0 * r;
                    Footprint::Disk {
                        cy: r + rng.random_range(0.0..=span),
                        cx: r + rng.random_range(0.0..=span),
                        r,
                    }
                };
                SceneObject {
                    footprint,
                    reflectance: spectrum(rng),
                }
            })
            .collect();
        SceneSpec {
            size,
            bands,
            background,
            objects,
            noise,
            seed: rng.random(),
        }
    }
}

/// Rendered ground truth plus how many values had to be clamped into `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Scene {
    pub gt: Tensor<f64>,
    pub clamped: usize,
}

pub fn synth_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (s, c) = (spec.size, spec.bands);
    let mut gt = Tensor::from_fn(Shape::new(1, c, s, s), |_, b, _, _| spec.background[b]);
    for o in &spec.objects {
        for y in 0..s {
            for x in 0..s {
                if o.footprint.contains(y, x) {
                    for (b, &r) in o.reflectance.iter().enumerate() {
                        gt.set(0, b, y, x, r);
                    }
                }
            }
        }
    }
    let mut clamped = 0;
    if spec.noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::config(e.to_string()))?;
        for v in gt.data_mut() {
            let noisy = *v + normal.sample(&mut rng);
            let kept = noisy.clamp(0.0, 1.0);
            clamped += usize::from(kept != noisy);
            *v = kept;
        }
    }
    Ok(Scene { gt, clamped })
}

/// Generation parameters for a whole dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub count: usize,
    pub bands: usize,
    pub size: usize,
    pub noise: f64,
    #[serde(default)]
    pub wald: WaldConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            count: 200,
            bands: 4,
            size: 64,
            noise: 0.01,
            wald: WaldConfig::default(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bands != 4 && self.bands != 8 {
            return Err(Error::config(format!("bands must be 4 or 8, got {}", self.bands)));
        }
        if self.size == 0 || self.size % 4 != 0 {
            return Err(Error::config(format!("size must be a positive multiple of 4, got {}", self.size)));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::config("noise must be non-negative"));
        }
        self.wald.validate()
    }
}

/// Generated samples and the total number of clamped values.
pub struct Generated {
    pub samples: Vec<SampleTriple<f32>>,
    pub clamped: usize,
}

/// Sample `i` is drawn from its own stream of the master seed, so any prefix
/// of a larger dataset is identical to a smaller one.
pub fn generate(cfg: &GenConfig, seed: u64) -> Result<Generated> {
    cfg.validate()?;
    let mut samples = Vec::with_capacity(cfg.count);
    let mut clamped = 0;
    for i in 0..cfg.count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let spec = SceneSpec::random(cfg.size, cfg.bands, cfg.noise, &mut rng);
        let scene = synth_scene(&spec)?;
        clamped += scene.clamped;
        samples.push(wald_degrade(&scene.gt, &cfg.wald)?.cast());
    }
    Ok(Generated { samples, clamped })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blank(objects: Vec<SceneObject>) -> SceneSpec {
        SceneSpec {
            size: 16,
            bands: 4,
            background: vec![0.0; 4],
            objects,
            noise: 0.0,
            seed: 1,
        }
    }

    #[test]
    fn empty_inventory_is_constant() {
        let mut spec = blank(vec![]);
        spec.background = vec![0.1, 0.2, 0.3, 0.4];
        let gt = synth_scene(&spec).unwrap().gt;
        for b in 0..4 {
            let plane = &gt.data()[b * 256..(b + 1) * 256];
            assert!(plane.iter().all(|&v| v == spec.background[b]));
        }
    }

    #[test]
    fn rectangle_area() {
        let spec = blank(vec![SceneObject {
            footprint: Footprint::Rect { y: 2, x: 3, h: 5, w: 7 },
            reflectance: vec![1.0; 4],
        }]);
        let gt = synth_scene(&spec).unwrap().gt;
        for b in 0..4 {
            let s: f64 = gt.data()[b * 256..(b + 1) * 256].iter().sum();
            assert_eq!(s, 35.0);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = blank(vec![SceneObject {
            footprint: Footprint::Rect { y: 10, x: 0, h: 8, w: 2 },
            reflectance: vec![0.5; 4],
        }]);
        assert!(synth_scene(&spec).unwrap_err().is_config());
        spec.objects.clear();
        spec.bands = 3;
        assert!(synth_scene(&spec).is_err());
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let cfg = GenConfig {
            count: 3,
            size: 32,
            ..GenConfig::default()
        };
        let a = generate(&cfg, 9).unwrap().samples;
        let b = generate(&cfg, 9).unwrap().samples;
        assert_eq!(a, b);
        let c = generate(&cfg, 10).unwrap().samples;
        assert_ne!(a, c);
        let prefix = generate(&GenConfig { count: 2, ..cfg }, 9).unwrap().samples;
        assert_eq!(&a[..2], &prefix[..]);
        for s in &a {
            s.validate().unwrap();
            assert!(s.gt.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
