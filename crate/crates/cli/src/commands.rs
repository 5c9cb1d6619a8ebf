use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use arconv::arconv::HWRange;
use arconv::arnet::{upsample_lrms, ARNet, RATIO};
use arconv::autodiff::Graph;
use arconv::data::{
    decimate, gaussian_blur, generate, read_dataset, synth_scene, wald_degrade, write_dataset, write_heatmap, write_raw, write_rgb,
    Footprint, SampleTriple, SceneObject, SceneSpec, Stretch,
};
use arconv::gradcheck::{run_suite, GradReport};
use arconv::metrics::{score, MethodReport, MetricInputs, MetricReport, MetricSet};
use arconv::tensor::{Shape, Tensor};
use arconv::training::{load_checkpoint, save_checkpoint, EpochRecord, Trainer, TrainingSet};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const FROZEN_FILE: &str = "frozen_specs.json";
pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const MODEL_ROW: &str = "ARNet";
pub const BASELINE_ROW: &str = "EXP";

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn out_dir(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| CliError::Data(format!("cannot create {}: {e}", out.display())))
}

/// Dataset named by the config, or the seeded synthetic one.
pub fn load_samples(cfg: &RunConfig) -> CliResult<Vec<SampleTriple<f32>>> {
    let samples = match &cfg.data.path {
        Some(dir) => {
            let (manifest, samples) = read_dataset(dir)?;
            if manifest.bands != cfg.data.bands || manifest.height != cfg.data.size || manifest.width != cfg.data.size {
                return Err(CliError::Config(format!(
                    "dataset {} holds {}-band {}x{} samples, config expects {}-band {}px",
                    dir.display(),
                    manifest.bands,
                    manifest.height,
                    manifest.width,
                    cfg.data.bands,
                    cfg.data.size
                )));
            }
            samples
        }
        None => generate(&cfg.data.gen_config(), cfg.seed)?.samples,
    };
    if samples.len() <= cfg.data.holdout {
        return Err(CliError::Config(format!(
            "{} samples cannot leave {} for holdout",
            samples.len(),
            cfg.data.holdout
        )));
    }
    Ok(samples)
}

fn split(cfg: &RunConfig, samples: &[SampleTriple<f32>]) -> usize {
    samples.len() - cfg.data.holdout
}

pub struct GenSummary {
    pub count: usize,
    pub clamped: usize,
}

pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> CliResult<GenSummary> {
    let generated = generate(&cfg.data.gen_config(), cfg.seed)?;
    out_dir(out)?;
    write_dataset(out, &generated.samples)?;
    write_json(&out.join(CONFIG_FILE), cfg)?;
    Ok(GenSummary {
        count: generated.samples.len(),
        clamped: generated.clamped,
    })
}

pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub records: Vec<EpochRecord>,
    pub resumed_from: Option<usize>,
    pub parameters: usize,
}

/// Train into `out`, checkpointing after every epoch. With `resume`, an
/// existing checkpoint made from the same settings is continued.
pub fn cmd_train(cfg: &RunConfig, out: &Path, resume: bool, mut progress: impl FnMut(&EpochRecord)) -> CliResult<TrainSummary> {
    let samples = load_samples(cfg)?;
    let train = TrainingSet::from_samples(&samples[..split(cfg, &samples)])?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let (net_cfg, train_cfg) = (cfg.network_config(), cfg.train_config());
    let mut resumed_from = None;
    let mut trainer = if resume && ckpt.exists() {
        let t = load_checkpoint(&ckpt)?;
        if t.net.config() != &net_cfg || t.cfg != train_cfg {
            return Err(CliError::Config(format!(
                "{} was trained with different settings",
                ckpt.display()
            )));
        }
        resumed_from = Some(t.epoch);
        t
    } else {
        Trainer::new(ARNet::new(net_cfg)?, train_cfg)?
    };
    out_dir(out)?;
    write_json(&out.join(CONFIG_FILE), cfg)?;
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resumed_from.is_some())
        .truncate(resumed_from.is_none())
        .open(out.join(LOG_FILE))?;
    let records = trainer.train(&train, |t, record| {
        let line = serde_json::to_string(record)?;
        writeln!(log, "{line}")?;
        if let Some(frozen) = &record.frozen {
            let body = json!({ "epoch": record.epoch, "specs": frozen });
            fs::write(out.join(FROZEN_FILE), serde_json::to_string_pretty(&body)? + "\n")?;
        }
        let tmp = out.join(format!("{CHECKPOINT_FILE}.tmp"));
        save_checkpoint(&tmp, t)?;
        fs::rename(&tmp, &ckpt)?;
        progress(record);
        Ok(())
    })?;
    if records.is_empty() && !ckpt.exists() {
        save_checkpoint(&ckpt, &trainer)?;
    }
    Ok(TrainSummary {
        checkpoint: ckpt,
        records,
        resumed_from,
        parameters: trainer.net.params.scalar_count(),
    })
}

fn check_bands(cfg: &RunConfig, net: &ARNet<f32>) -> CliResult<()> {
    if net.config().bands != cfg.data.bands {
        return Err(CliError::Config(format!(
            "checkpoint expects {} bands, data has {}",
            net.config().bands,
            cfg.data.bands
        )));
    }
    Ok(())
}

fn residual_image<T: arconv::tensor::Real>(fused: &Tensor<T>, gt: &Tensor<T>) -> CliResult<Tensor<f64>> {
    let (f, g) = (fused.cast::<f64>(), gt.cast::<f64>());
    Ok(f.zip_map(&g, |a, b| (a - b).abs())?)
}

fn rgb_bands(bands: usize) -> [usize; 3] {
    if bands >= 8 {
        [4, 2, 1]
    } else {
        [2, 1, 0]
    }
}

/// Score the model and the interpolation baseline on the held-out split.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> CliResult<MetricReport> {
    let trainer = load_checkpoint(checkpoint)?;
    check_bands(cfg, &trainer.net)?;
    let samples = load_samples(cfg)?;
    let held = &samples[split(cfg, &samples)..];
    let mcfg = cfg.metric_config();
    if mcfg.window > cfg.data.size {
        return Err(CliError::Config(format!("metric window {} exceeds the {}px images", mcfg.window, cfg.data.size)));
    }
    out_dir(out)?;
    let (mut model, mut baseline) = (Vec::new(), Vec::new());
    let stretch = Stretch::Fixed {
        lo: 0.0,
        hi: cfg.metrics.residual_scale,
    };
    let bands = rgb_bands(cfg.data.bands);
    for (i, s) in held.iter().enumerate() {
        let s = s.cast::<f64>();
        let exp = upsample_lrms(&s.lrms_low)?;
        let fused = trainer.net.predict(&s.pan.cast(), &exp.cast())?.cast::<f64>();
        let pan_low = decimate(&gaussian_blur(&s.pan, cfg.data.blur_sigma), RATIO)?;
        for (rows, image) in [(&mut model, &fused), (&mut baseline, &exp)] {
            let inputs = MetricInputs {
                fused: image,
                gt: &s.gt,
                lrms_low: &s.lrms_low,
                pan: &s.pan,
                pan_low: &pan_low,
            };
            rows.push(score(&inputs, &mcfg)?);
        }
        write_rgb(&out.join(format!("fused_{i:03}.png")), &fused, bands, Stretch::Fixed { lo: 0.0, hi: 1.0 })?;
        write_rgb(&out.join(format!("residual_{i:03}.png")), &residual_image(&fused, &s.gt)?, bands, stretch)?;
    }
    let report = MetricReport {
        dataset: match &cfg.data.path {
            Some(p) => p.display().to_string(),
            None => format!("synthetic seed {} ({} held out)", cfg.seed, held.len()),
        },
        ratio: mcfg.ratio,
        window: mcfg.window,
        methods: vec![MethodReport::new(MODEL_ROW, model), MethodReport::new(BASELINE_ROW, baseline)],
    };
    write_json(&out.join(METRICS_FILE), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerField {
    pub layer: usize,
    pub height: usize,
    pub width: usize,
    pub learned: bool,
    pub range_h: HWRange,
    pub range_w: HWRange,
    pub h_mean: f64,
    pub w_mean: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScaleStudy {
    pub large_size: usize,
    pub small_size: usize,
    /// Mean learned height over each object, per layer.
    pub large_h: Vec<f64>,
    pub small_h: Vec<f64>,
    /// Layers where the large object has the larger mean height.
    pub layers_large_ge_small: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct HeatmapReport {
    pub sample: usize,
    pub images: Vec<String>,
    pub layers: Vec<LayerField>,
    pub study: Option<ScaleStudy>,
}

/// Height and width fields of every layer for one input.
fn layer_fields(net: &ARNet<f32>, pan: &Tensor<f32>, lrms: &Tensor<f32>) -> CliResult<Vec<(Tensor<f64>, Tensor<f64>, bool)>> {
    let mut g = Graph::new();
    let (p, l) = (g.constant(pan.clone()), g.constant(lrms.clone()));
    let out = net.forward(&mut g, p, l)?;
    let mut fields = Vec::new();
    for layer in &out.layers {
        fields.push(match layer.hw {
            Some((h, w)) => (g.value(h).cast(), g.value(w).cast(), true),
            None => {
                let s = g.shape(layer.y);
                let field = Shape::new(s.n, 1, s.h, s.w);
                (Tensor::full(field, layer.spec.kh as f64), Tensor::full(field, layer.spec.kw as f64), false)
            }
        });
    }
    Ok(fields)
}

fn masked_mean(plane: &Tensor<f64>, full: usize, fp: &Footprint) -> f64 {
    let s = plane.shape();
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..s.h {
        for x in 0..s.w {
            // center of this cell at full resolution
            let (fy, fx) = ((2 * y + 1) * full / (2 * s.h), (2 * x + 1) * full / (2 * s.w));
            if fp.contains(fy, fx) {
                sum += plane.at(0, 0, y, x);
                n += 1;
            }
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn scale_study(cfg: &RunConfig, net: &ARNet<f32>) -> CliResult<ScaleStudy> {
    let (size, bands) = (cfg.data.size, cfg.data.bands);
    let (big, small) = (cfg.heatmap.large_size, cfg.heatmap.small_size);
    let top = (size - big) / 2;
    let large = Footprint::Rect { y: top, x: 2, h: big, w: big };
    let small_fp = Footprint::Rect {
        y: top + (big - small) / 2,
        x: size - 2 - big / 2 - small / 2,
        h: small,
        w: small,
    };
    let reflectance: Vec<f64> = (0..bands).map(|b| 0.7 - 0.05 * b as f64).collect();
    let spec = SceneSpec {
        size,
        bands,
        background: vec![0.2; bands],
        objects: vec![
            SceneObject {
                footprint: large.clone(),
                reflectance: reflectance.clone(),
            },
            SceneObject {
                footprint: small_fp.clone(),
                reflectance,
            },
        ],
        noise: 0.0,
        seed: cfg.seed,
    };
    let scene = synth_scene(&spec)?;
    let triple = wald_degrade(&scene.gt, &cfg.data.gen_config().wald)?;
    let lrms = upsample_lrms(&triple.lrms_low)?;
    let fields = layer_fields(net, &triple.pan.cast(), &lrms.cast())?;
    let large_h: Vec<f64> = fields.iter().map(|(h, _, _)| masked_mean(h, size, &large)).collect();
    let small_h: Vec<f64> = fields.iter().map(|(h, _, _)| masked_mean(h, size, &small_fp)).collect();
    let layers_large_ge_small = large_h.iter().zip(&small_h).filter(|(a, b)| a >= b).count();
    Ok(ScaleStudy {
        large_size: big,
        small_size: small,
        large_h,
        small_h,
        layers_large_ge_small,
    })
}

/// Two color-mapped images and raw sidecars per layer.
pub fn cmd_heatmap(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> CliResult<HeatmapReport> {
    let trainer = load_checkpoint(checkpoint)?;
    let net = &trainer.net;
    check_bands(cfg, net)?;
    let samples = load_samples(cfg)?;
    let index = cfg.heatmap.sample.unwrap_or(split(cfg, &samples));
    let sample = samples
        .get(index)
        .ok_or_else(|| CliError::Config(format!("sample {index} out of range for {} samples", samples.len())))?;
    let lrms = upsample_lrms(&sample.lrms_low)?;
    let fields = layer_fields(net, &sample.pan, &lrms)?;
    out_dir(out)?;
    let mut report = HeatmapReport {
        sample: index,
        images: Vec::new(),
        layers: Vec::new(),
        study: None,
    };
    let mut violations = Vec::new();
    for (i, ((h, w, learned), layer)) in fields.iter().zip(net.layers()).enumerate() {
        let lc = layer.config();
        let s = h.shape();
        for (name, field, range) in [("h", h, lc.range_h), ("w", w, lc.range_w)] {
            let stem = format!("layer{:02}_{name}", i + 1);
            let (lo, hi) = (range.floor, range.upper());
            if *learned && field.data().iter().any(|&v| !(v >= lo && v <= hi)) {
                violations.push(format!("layer {} {name} leaves {range}", i + 1));
            }
            write_heatmap(&out.join(format!("{stem}.png")), field.item(0), s.h, s.w, lo, hi)?;
            let extra = json!({ "layer": i + 1, "field": name, "range": range, "learned": learned });
            write_raw(&out.join(format!("{stem}.f32")), field, &extra)?;
            report.images.push(format!("{stem}.png"));
        }
        let mean = |t: &Tensor<f64>| t.data().iter().sum::<f64>() / t.numel() as f64;
        report.layers.push(LayerField {
            layer: i + 1,
            height: s.h,
            width: s.w,
            learned: *learned,
            range_h: lc.range_h,
            range_w: lc.range_w,
            h_mean: mean(h),
            w_mean: mean(w),
        });
    }
    if cfg.heatmap.study {
        report.study = Some(scale_study(cfg, net)?);
    }
    write_json(&out.join("heatmaps.json"), &report)?;
    if !violations.is_empty() {
        return Err(CliError::Check(violations.join("; ")));
    }
    Ok(report)
}

/// Finite-difference suite; failing ops are a check failure.
pub fn cmd_gradcheck(cfg: &RunConfig, out: Option<&Path>) -> CliResult<GradReport> {
    let report = run_suite(&cfg.gradcheck)?;
    if let Some(dir) = out {
        out_dir(dir)?;
        write_json(&dir.join("gradcheck.json"), &report)?;
    }
    Ok(report)
}

pub fn metric_row(report: &MetricReport, name: &str) -> Option<MetricSet> {
    report.method(name).map(|m| m.mean.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use arconv::tensor::Shape;

    #[test]
    fn perfect_prediction_has_a_black_residual() {
        let gt = Tensor::from_fn(Shape::new(1, 4, 8, 8), |_, c, y, x| 0.1 * c as f64 + 0.01 * (y * 8 + x) as f64);
        let r = residual_image(&gt, &gt).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0));
        let shifted = gt.map(|v| v + 0.05);
        assert!(residual_image(&shifted, &gt).unwrap().data().iter().all(|&v| (v - 0.05).abs() < 1e-12));
    }
}
