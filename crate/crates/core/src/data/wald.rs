use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

use super::SampleTriple;

/// Blur and PAN synthesis settings for the degradation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaldConfig {
    pub sigma: f64,
    /// PAN band weights; empty means uniform.
    #[serde(default)]
    pub pan_weights: Vec<f64>,
}

impl Default for WaldConfig {
    fn default() -> Self {
        WaldConfig {
            sigma: 1.7,
            pan_weights: Vec::new(),
        }
    }
}

impl WaldConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config(format!("blur sigma must be positive, got {}", self.sigma)));
        }
        if !self.pan_weights.is_empty() {
            let s: f64 = self.pan_weights.iter().sum();
            if self.pan_weights.iter().any(|&w| w < 0.0) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::config("pan weights must be non-negative and sum to 1"));
            }
        }
        Ok(())
    }

    fn weights(&self, bands: usize) -> Result<Vec<f64>> {
        if self.pan_weights.is_empty() {
            return Ok(vec![1.0 / bands as f64; bands]);
        }
        if self.pan_weights.len() != bands {
            return Err(Error::config(format!(
                "{} pan weights for {bands} bands",
                self.pan_weights.len()
            )));
        }
        Ok(self.pan_weights.clone())
    }
}

/// Normalized Gaussian taps truncated at four standard deviations.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Separable Gaussian blur with mirror padding.
pub fn gaussian_blur(x: &Tensor<f64>, sigma: f64) -> Tensor<f64> {
    let s = x.shape();
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut tmp = Tensor::<f64>::zeros(s);
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for xx in 0..s.w {
                    let v = k
                        .iter()
                        .enumerate()
                        .map(|(t, w)| w * x.at(n, c, y, reflect(xx as i64 + t as i64 - r, s.w)))
                        .sum();
                    tmp.set(n, c, y, xx, v);
                }
            }
            for y in 0..s.h {
                for xx in 0..s.w {
                    let v = k
                        .iter()
                        .enumerate()
                        .map(|(t, w)| w * tmp.at(n, c, reflect(y as i64 + t as i64 - r, s.h), xx))
                        .sum();
                    out.set(n, c, y, xx, v);
                }
            }
        }
    }
    out
}

/// Mean over non-overlapping `factor x factor` tiles anchored at the top-left pixel.
pub fn decimate(x: &Tensor<f64>, factor: usize) -> Result<Tensor<f64>> {
    let s = x.shape();
    if factor == 0 || s.h % factor != 0 || s.w % factor != 0 {
        return Err(Error::config(format!(
            "{}x{} is not divisible by {factor}",
            s.h, s.w
        )));
    }
    let area = (factor * factor) as f64;
    Ok(Tensor::from_fn(Shape::new(s.n, s.c, s.h / factor, s.w / factor), |n, c, y, xx| {
        let mut acc = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                acc += x.at(n, c, y * factor + dy, xx * factor + dx);
            }
        }
        acc / area
    }))
}

/// Weighted band mean.
pub fn synth_pan(gt: &Tensor<f64>, cfg: &WaldConfig) -> Result<Tensor<f64>> {
    let s = gt.shape();
    let w = cfg.weights(s.c)?;
    Ok(Tensor::from_fn(Shape::new(s.n, 1, s.h, s.w), |n, _, y, x| {
        (0..s.c).map(|b| w[b] * gt.at(n, b, y, x)).sum()
    }))
}

/// Build the training triple from a `(1, C, H, W)` ground truth.
pub fn wald_degrade(gt: &Tensor<f64>, cfg: &WaldConfig) -> Result<SampleTriple<f64>> {
    cfg.validate()?;
    let s = gt.shape();
    if s.n != 1 || s.h % 4 != 0 || s.w % 4 != 0 {
        return Err(Error::config(format!("ground truth {s} needs one item with sides divisible by 4")));
    }
    let lrms_low = decimate(&gaussian_blur(gt, cfg.sigma), 4)?;
    let pan = synth_pan(gt, cfg)?;
    Ok(SampleTriple {
        pan,
        lrms_low,
        gt: gt.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernel_shape() {
        let k = gaussian_kernel(1.7);
        assert_eq!(k.len(), 15);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k[0], k[14]);
    }

    #[test]
    fn constants_survive() {
        let gt = Tensor::full(Shape::new(1, 4, 16, 16), 0.625);
        let t = wald_degrade(&gt, &WaldConfig::default()).unwrap();
        assert!(t.pan.data().iter().all(|&v| (v - 0.625).abs() < 1e-15));
        assert!(t.lrms_low.data().iter().all(|&v| (v - 0.625).abs() < 1e-14));
        assert_eq!(t.lrms_low.shape(), Shape::new(1, 4, 4, 4));
    }

    #[test]
    fn decimation_phase_by_hand() {
        let x = Tensor::from_fn(Shape::new(1, 1, 8, 8), |_, _, y, x| (y * 8 + x) as f64);
        let d = decimate(&x, 4).unwrap();
        // Top-left tile holds rows 0..4, columns 0..4: mean of y*8+x = 1.5*8 + 1.5.
        assert_eq!(d.data(), &[13.5, 17.5, 45.5, 49.5]);
    }

    #[test]
    fn mean_is_preserved_by_decimation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = Tensor::uniform(Shape::new(1, 4, 32, 32), 0.0, 1.0, &mut rng);
        let blurred = gaussian_blur(&gt, 1.7);
        let low = decimate(&blurred, 4).unwrap();
        assert!((low.mean() - blurred.mean()).abs() < 1e-10);
    }

    #[test]
    fn degradation_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Shape::new(1, 4, 16, 16);
        let a = Tensor::uniform(s, 0.0, 1.0, &mut rng);
        let b = Tensor::uniform(s, 0.0, 1.0, &mut rng);
        let mix = a.zip_map(&b, |p, q| 0.3 * p + 0.7 * q).unwrap();
        let cfg = WaldConfig::default();
        let (ta, tb, tm) = (wald_degrade(&a, &cfg).unwrap(), wald_degrade(&b, &cfg).unwrap(), wald_degrade(&mix, &cfg).unwrap());
        let sup = ta.lrms_low.zip_map(&tb.lrms_low, |p, q| 0.3 * p + 0.7 * q).unwrap();
        assert!(sup.max_abs_diff(&tm.lrms_low) < 1e-10);
        let sup = ta.pan.zip_map(&tb.pan, |p, q| 0.3 * p + 0.7 * q).unwrap();
        assert!(sup.max_abs_diff(&tm.pan) < 1e-10);
    }

    #[test]
    fn band_impulse_reaches_pan_with_its_weight() {
        let mut gt = Tensor::zeros(Shape::new(1, 4, 8, 8));
        gt.set(0, 2, 3, 5, 1.0);
        let cfg = WaldConfig {
            sigma: 1.0,
            pan_weights: vec![0.1, 0.2, 0.3, 0.4],
        };
        let pan = synth_pan(&gt, &cfg).unwrap();
        assert_eq!(pan.at(0, 0, 3, 5), 0.3);
        assert_eq!(pan.sum(), 0.3);
    }

    #[test]
    fn rejects_bad_settings() {
        let gt = Tensor::zeros(Shape::new(1, 4, 10, 12));
        assert!(wald_degrade(&gt, &WaldConfig::default()).unwrap_err().is_config());
        let cfg = WaldConfig {
            sigma: 1.0,
            pan_weights: vec![0.5, 0.6, 0.0, 0.0],
        };
        assert!(cfg.validate().is_err());
    }
}
