//! Reduced-resolution (SAM, ERGAS, band-averaged Q) and no-reference
//! (D_lambda, D_s, HQNR) quality indices. All statistics run in `f64`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

fn planes<T: Real>(x: &Tensor<T>) -> Vec<Vec<f64>> {
    let s = x.shape();
    (0..s.c)
        .map(|c| x.item(0)[c * s.plane()..(c + 1) * s.plane()].iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect())
        .collect()
}

fn single_item(op: &'static str, a: Shape, b: Shape) -> Result<()> {
    if a != b || a.n != 1 {
        return Err(Error::ShapeMismatch { op, left: a, right: b });
    }
    Ok(())
}

/// Spectral angle statistics: mean angle in degrees over pixels where both
/// spectra are nonzero, and how many pixels were skipped.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct SamResult {
    pub degrees: f64,
    pub skipped: usize,
}

pub fn sam_detail<T: Real>(fused: &Tensor<T>, gt: &Tensor<T>) -> Result<SamResult> {
    single_item("sam", fused.shape(), gt.shape())?;
    let (f, g) = (planes(fused), planes(gt));
    let mut total = 0.0;
    let mut valid = 0usize;
    for p in 0..fused.shape().plane() {
        let (mut nf, mut ng) = (0.0f64, 0.0f64);
        for b in 0..f.len() {
            nf += f[b][p] * f[b][p];
            ng += g[b][p] * g[b][p];
        }
        if nf == 0.0 || ng == 0.0 {
            continue;
        }
        let (nf, ng) = (nf.sqrt(), ng.sqrt());
        let (mut diff, mut sum) = (0.0f64, 0.0f64);
        for b in 0..f.len() {
            let (u, v) = (f[b][p] / nf, g[b][p] / ng);
            diff += (u - v) * (u - v);
            sum += (u + v) * (u + v);
        }
        total += 2.0 * diff.sqrt().atan2(sum.sqrt());
        valid += 1;
    }
    if valid == 0 {
        return Err(Error::data("sam: no valid pixels"));
    }
    Ok(SamResult {
        degrees: (total / valid as f64).to_degrees(),
        skipped: fused.shape().plane() - valid,
    })
}

pub fn sam<T: Real>(fused: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    sam_detail(fused, gt).map(|r| r.degrees)
}

pub fn ergas<T: Real>(fused: &Tensor<T>, gt: &Tensor<T>, ratio: f64) -> Result<f64> {
    single_item("ergas", fused.shape(), gt.shape())?;
    let (f, g) = (planes(fused), planes(gt));
    let mut acc = 0.0;
    for (b, (fb, gb)) in f.iter().zip(&g).enumerate() {
        let n = gb.len() as f64;
        let mean = gb.iter().sum::<f64>() / n;
        if mean == 0.0 {
            return Err(Error::data(format!("ergas: band {b} of the reference has zero mean")));
        }
        let mse = fb.iter().zip(gb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        acc += mse / (mean * mean);
    }
    Ok(100.0 / ratio * (acc / f.len() as f64).sqrt())
}

/// Universal image quality index of one block, `None` when the denominator vanishes.
pub fn uiqi(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxx += da * da;
        syy += db * db;
        sxy += da * db;
    }
    let (sxx, syy, sxy) = (sxx / n, syy / n, sxy / n);
    let den = (sxx + syy) * (mx * mx + my * my);
    if den == 0.0 || !den.is_finite() {
        return None;
    }
    Some(4.0 * sxy * (mx * my) / den)
}

/// Mean Q over non-overlapping `window x window` blocks of two planes.
/// Incomplete blocks at the right and bottom edges are not used.
pub fn block_q(x: &[f64], y: &[f64], h: usize, w: usize, window: usize) -> Result<Option<f64>> {
    if window == 0 || h < window || w < window {
        return Err(Error::config(format!("{h}x{w} image is smaller than the {window}px Q window")));
    }
    let mut bx = Vec::with_capacity(window * window);
    let mut by = Vec::with_capacity(window * window);
    let (mut sum, mut count) = (0.0, 0usize);
    for r0 in (0..=h - window).step_by(window) {
        for c0 in (0..=w - window).step_by(window) {
            bx.clear();
            by.clear();
            for r in r0..r0 + window {
                bx.extend_from_slice(&x[r * w + c0..r * w + c0 + window]);
                by.extend_from_slice(&y[r * w + c0..r * w + c0 + window]);
            }
            if let Some(q) = uiqi(&bx, &by) {
                sum += q;
                count += 1;
            }
        }
    }
    Ok((count > 0).then(|| sum / count as f64))
}

/// Band-averaged block Q. Bands whose blocks are all degenerate are skipped.
pub fn q_avg<T: Real>(fused: &Tensor<T>, gt: &Tensor<T>, window: usize) -> Result<f64> {
    single_item("q_avg", fused.shape(), gt.shape())?;
    let s = fused.shape();
    let (f, g) = (planes(fused), planes(gt));
    let mut vals = Vec::with_capacity(s.c);
    for (fb, gb) in f.iter().zip(&g) {
        if let Some(q) = block_q(fb, gb, s.h, s.w, window)? {
            vals.push(q);
        }
    }
    if vals.is_empty() {
        return Err(Error::data("q_avg: every block is constant"));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Block size used at the low-resolution scale so both scales see the same block grid.
fn low_window(window: usize, ratio: usize) -> usize {
    (window / ratio).max(2)
}

/// Spectral distortion: inter-band Q at full resolution against the same
/// pairs at the low-resolution scale.
pub fn d_lambda<T: Real>(fused: &Tensor<T>, lrms_low: &Tensor<T>, window: usize, ratio: usize) -> Result<f64> {
    let (fs, ls) = (fused.shape(), lrms_low.shape());
    if fs.n != 1 || ls != Shape::new(1, fs.c, fs.h / ratio, fs.w / ratio) {
        return Err(Error::ShapeMismatch { op: "d_lambda", left: fs, right: ls });
    }
    if fs.c < 2 {
        return Err(Error::data("d_lambda needs at least two bands"));
    }
    let (f, l) = (planes(fused), planes(lrms_low));
    let lw = low_window(window, ratio);
    let mut acc = 0.0;
    let mut pairs = 0usize;
    for b in 0..fs.c {
        for c in 0..fs.c {
            if b == c {
                continue;
            }
            let qf = block_q(&f[b], &f[c], fs.h, fs.w, window)?;
            let ql = block_q(&l[b], &l[c], ls.h, ls.w, lw)?;
            if let (Some(qf), Some(ql)) = (qf, ql) {
                acc += (qf - ql).abs();
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::data("d_lambda: no informative band pairs"));
    }
    Ok(acc / pairs as f64)
}

/// Spatial distortion: each band's Q against PAN at both scales.
pub fn d_s<T: Real>(
    fused: &Tensor<T>,
    lrms_low: &Tensor<T>,
    pan: &Tensor<T>,
    pan_low: &Tensor<T>,
    window: usize,
    ratio: usize,
) -> Result<f64> {
    let (fs, ls) = (fused.shape(), lrms_low.shape());
    if fs.n != 1 || ls != Shape::new(1, fs.c, fs.h / ratio, fs.w / ratio) {
        return Err(Error::ShapeMismatch { op: "d_s", left: fs, right: ls });
    }
    if pan.shape() != Shape::new(1, 1, fs.h, fs.w) {
        return Err(Error::ShapeMismatch { op: "d_s pan", left: pan.shape(), right: fs });
    }
    if pan_low.shape() != Shape::new(1, 1, ls.h, ls.w) {
        return Err(Error::ShapeMismatch { op: "d_s pan_low", left: pan_low.shape(), right: ls });
    }
    let (f, l) = (planes(fused), planes(lrms_low));
    let (p, pl) = (planes(pan), planes(pan_low));
    let lw = low_window(window, ratio);
    let mut acc = 0.0;
    let mut bands = 0usize;
    for b in 0..fs.c {
        let qf = block_q(&f[b], &p[0], fs.h, fs.w, window)?;
        let ql = block_q(&l[b], &pl[0], ls.h, ls.w, lw)?;
        if let (Some(qf), Some(ql)) = (qf, ql) {
            acc += (qf - ql).abs();
            bands += 1;
        }
    }
    if bands == 0 {
        return Err(Error::data("d_s: no informative bands"));
    }
    Ok(acc / bands as f64)
}

pub fn hqnr(d_lambda: f64, d_s: f64) -> f64 {
    (1.0 - d_lambda) * (1.0 - d_s)
}

/// One row of the quality table.
#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub sam: f64,
    pub ergas: f64,
    pub q_avg: f64,
    pub d_lambda: f64,
    pub d_s: f64,
    pub hqnr: f64,
}

impl MetricSet {
    const NAMES: [&'static str; 6] = ["SAM", "ERGAS", "Q_avg", "D_lambda", "D_s", "HQNR"];

    fn values(&self) -> [f64; 6] {
        [self.sam, self.ergas, self.q_avg, self.d_lambda, self.d_s, self.hqnr]
    }

    fn from_values(v: [f64; 6]) -> Self {
        MetricSet {
            sam: v[0],
            ergas: v[1],
            q_avg: v[2],
            d_lambda: v[3],
            d_s: v[4],
            hqnr: v[5],
        }
    }
}

/// Inputs for scoring one fused image.
pub struct MetricInputs<'a, T> {
    pub fused: &'a Tensor<T>,
    pub gt: &'a Tensor<T>,
    pub lrms_low: &'a Tensor<T>,
    pub pan: &'a Tensor<T>,
    pub pan_low: &'a Tensor<T>,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricConfig {
    pub window: usize,
    pub ratio: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig { window: 32, ratio: 4 }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::config(format!("metric window must be at least 2, got {}", self.window)));
        }
        if self.ratio != 4 {
            return Err(Error::config(format!("resolution ratio must be 4, got {}", self.ratio)));
        }
        Ok(())
    }
}

pub fn score<T: Real>(inp: &MetricInputs<'_, T>, cfg: &MetricConfig) -> Result<MetricSet> {
    let dl = d_lambda(inp.fused, inp.lrms_low, cfg.window, cfg.ratio)?;
    let ds = d_s(inp.fused, inp.lrms_low, inp.pan, inp.pan_low, cfg.window, cfg.ratio)?;
    Ok(MetricSet {
        sam: sam(inp.fused, inp.gt)?,
        ergas: ergas(inp.fused, inp.gt, cfg.ratio as f64)?,
        q_avg: q_avg(inp.fused, inp.gt, cfg.window)?,
        d_lambda: dl,
        d_s: ds,
        hqnr: hqnr(dl, ds),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub per_image: Vec<MetricSet>,
    pub mean: MetricSet,
    pub std: MetricSet,
}

impl MethodReport {
    pub fn new(method: impl Into<String>, per_image: Vec<MetricSet>) -> Self {
        let n = per_image.len().max(1) as f64;
        let mut mean = [0.0; 6];
        for m in &per_image {
            for (acc, v) in mean.iter_mut().zip(m.values()) {
                *acc += v / n;
            }
        }
        let mut var = [0.0; 6];
        for m in &per_image {
            for ((acc, v), mu) in var.iter_mut().zip(m.values()).zip(mean) {
                *acc += (v - mu) * (v - mu) / n;
            }
        }
        MethodReport {
            method: method.into(),
            per_image,
            mean: MetricSet::from_values(mean),
            std: MetricSet::from_values(var.map(f64::sqrt)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub ratio: usize,
    pub window: usize,
    pub methods: Vec<MethodReport>,
}

impl MetricReport {
    pub fn method(&self, name: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == name)
    }

    /// Aligned text table, one row per method, `mean±std` cells.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let width = self.methods.iter().map(|m| m.method.len()).max().unwrap_or(6).max(6);
        let _ = write!(out, "{:<width$}", "Method");
        for name in MetricSet::NAMES {
            let _ = write!(out, "  {name:>17}");
        }
        out.push('\n');
        for m in &self.methods {
            let _ = write!(out, "{:<width$}", m.method);
            for (mu, sd) in m.mean.values().iter().zip(m.std.values()) {
                let _ = write!(out, "  {:>17}", format!("{mu:.4}±{sd:.4}"));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise(shape: Shape, seed: u64) -> Tensor<f64> {
        Tensor::uniform(shape, 0.05, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn identical_images_are_perfect() {
        let x = noise(Shape::new(1, 4, 64, 64), 1);
        assert_eq!(sam(&x, &x).unwrap(), 0.0);
        assert_eq!(ergas(&x, &x, 4.0).unwrap(), 0.0);
        assert_eq!(q_avg(&x, &x, 32).unwrap(), 1.0);
    }

    #[test]
    fn sam_cases() {
        let x = noise(Shape::new(1, 4, 8, 8), 2);
        let y = x.map(|v| 2.0 * v);
        assert!(sam(&y, &x).unwrap() < 1e-6);
        let f = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![1.0, 0.0]).unwrap();
        let g = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![0.0, 1.0]).unwrap();
        assert!((sam(&f, &g).unwrap() - 90.0).abs() < 1e-12);
        let z = Tensor::<f64>::zeros(Shape::new(1, 2, 2, 2));
        assert!(sam(&z, &z).is_err());
        let mut part = Tensor::full(Shape::new(1, 2, 1, 2), 1.0);
        part.set(0, 0, 0, 1, 0.0);
        part.set(0, 1, 0, 1, 0.0);
        let r = sam_detail(&part, &part).unwrap();
        assert_eq!(r.skipped, 1);
    }

    #[test]
    fn ergas_cases() {
        let g = Tensor::full(Shape::new(1, 1, 4, 4), 2.0);
        let f = Tensor::full(Shape::new(1, 1, 4, 4), 2.2);
        assert!((ergas(&f, &g, 4.0).unwrap() - 2.5).abs() < 1e-12);
        let x = noise(Shape::new(1, 4, 8, 8), 3);
        let y = noise(Shape::new(1, 4, 8, 8), 4);
        let a = ergas(&x, &y, 4.0).unwrap();
        let b = ergas(&x.map(|v| 3.5 * v), &y.map(|v| 3.5 * v), 4.0).unwrap();
        assert!((a - b).abs() < 1e-12);
        let mut zero = y.clone();
        zero.item_mut(0)[64..128].fill(0.0);
        let err = ergas(&x, &zero, 4.0).unwrap_err().to_string();
        assert!(err.contains("band 1"), "{err}");
    }

    #[test]
    fn shifted_block_matches_direct_formula() {
        let g = noise(Shape::new(1, 1, 32, 32), 5);
        let f = g.map(|v| v + 0.3);
        let q = q_avg(&f, &g, 32).unwrap();
        let n = 1024.0;
        let mg = g.sum() / n;
        let mf = mg + 0.3;
        let var = g.data().iter().map(|v| (v - mg) * (v - mg)).sum::<f64>() / n;
        let direct = 4.0 * var * mf * mg / ((2.0 * var) * (mf * mf + mg * mg));
        assert!((q - direct).abs() < 1e-12);
        assert!(q < 1.0);
    }

    #[test]
    fn uncorrelated_noise_has_small_q() {
        let f = noise(Shape::new(1, 4, 64, 64), 6);
        let g = noise(Shape::new(1, 4, 64, 64), 7);
        assert!(q_avg(&f, &g, 32).unwrap().abs() < 0.1);
    }

    #[test]
    fn small_images_are_rejected() {
        let x = noise(Shape::new(1, 4, 16, 16), 8);
        assert!(q_avg(&x, &x, 32).unwrap_err().is_config());
    }

    #[test]
    fn hqnr_properties() {
        assert_eq!(hqnr(0.0, 0.0), 1.0);
        assert!((hqnr(0.0146, 0.0279) - 0.9579).abs() < 5e-4);
        assert_eq!(hqnr(0.2, 0.1), hqnr(0.1, 0.2));
        assert!(hqnr(0.3, 0.1) < hqnr(0.2, 0.1));
    }

    #[test]
    fn matched_band_structure_has_no_spectral_distortion() {
        // Every band repeats one plane, so all inter-band Q values are 1 at both scales.
        let base_hi = noise(Shape::new(1, 1, 64, 64), 9);
        let base_lo = noise(Shape::new(1, 1, 16, 16), 10);
        let build = |b: &Tensor<f64>| {
            let s = b.shape();
            Tensor::from_fn(Shape::new(1, 4, s.h, s.w), |_, _, y, x| b.at(0, 0, y, x))
        };
        let (f, l) = (build(&base_hi), build(&base_lo));
        assert_eq!(d_lambda(&f, &l, 32, 4).unwrap(), 0.0);
    }

    #[test]
    fn report_statistics_and_table() {
        let a = MetricSet { sam: 1.0, ergas: 2.0, ..Default::default() };
        let b = MetricSet { sam: 3.0, ergas: 2.0, ..Default::default() };
        let r = MethodReport::new("EXP", vec![a, b]);
        assert_eq!(r.mean.sam, 2.0);
        assert_eq!(r.std.sam, 1.0);
        assert_eq!(r.std.ergas, 0.0);
        let report = MetricReport {
            dataset: "toy".into(),
            ratio: 4,
            window: 32,
            methods: vec![r],
        };
        let t = report.table();
        assert!(t.starts_with("Method"));
        assert!(t.contains("2.0000±1.0000"));
        let json = serde_json::to_string(&report).unwrap();
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}
