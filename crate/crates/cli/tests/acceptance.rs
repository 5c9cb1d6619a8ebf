//! One line per acceptance criterion; exits non-zero if any fails.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use arconv::arconv::{bilinear, select_points, ARConv, ARConvConfig, AblationFlags, Cell, HWField, HWRange, KernelSpec};
use arconv::autodiff::{Graph, ParamStore};
use arconv::gradcheck::{run_suite, CheckConfig};
use arconv::metrics::{ergas, hqnr, q_avg, sam};
use arconv::tensor::{conv2d, ConvKernel, Shape, Tensor};
use arconv::training::{read_checkpoint, read_meta, write_checkpoint, EpochRecord, Phase};
use arnet_cli::commands::{cmd_eval, cmd_train, metric_row, BASELINE_ROW, CHECKPOINT_FILE, FROZEN_FILE, LOG_FILE, MODEL_ROW};
use arnet_cli::RunConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

type Check = fn(&Path) -> Result<Outcome, String>;

fn reduction_oracle(_: &Path) -> Result<Outcome, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f64>::uniform(Shape::new(2, 3, 16, 16), -1.0, 1.0, &mut rng);
    let mut worst = 0.0f64;
    for (kh, kw) in [(1, 1), (3, 3), (3, 5), (5, 3), (7, 7)] {
        let mut cfg = ARConvConfig::new(3, 4);
        cfg.flags = AblationFlags { hwa: false, nspa: false, at: true };
        cfg.fixed = KernelSpec::new(kh, kw);
        let mut store = ParamStore::new();
        let layer = ARConv::new(cfg, &mut store, "l", &mut rng).map_err(|e| e.to_string())?;
        for (w, b) in layer.modulation_params() {
            store.value_mut(w).fill(0.0);
            store.value_mut(b).fill(0.0);
        }
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = layer.forward(&mut g, &store, xv).map_err(|e| e.to_string())?;
        let (kw_id, kb_id) = layer.kernel_params();
        let full = store.value(kw_id);
        let (top, left) = ((full.shape().h - kh) / 2, (full.shape().w - kw) / 2);
        let k = Tensor::from_fn(Shape::new(4, 3, kh, kw), |o, c, i, j| full.at(o, c, i + top, j + left));
        let reference = conv2d(&x, &ConvKernel::new(k, Some(store.value(kb_id).clone())).with_padding(kh / 2, kw / 2))
            .map_err(|e| e.to_string())?;
        worst = worst.max(g.value(out.y).max_abs_diff(&reference));
    }
    let t = start.elapsed();
    Ok(outcome(
        worst < 1e-10 && t < Duration::from_secs(5),
        format!("max abs diff {worst:.2e} (< 1e-10), {:.2}s (< 5s)", t.as_secs_f64()),
    ))
}

fn gradient_suite(_: &Path) -> Result<Outcome, String> {
    let start = Instant::now();
    let report = run_suite(&CheckConfig::default()).map_err(|e| e.to_string())?;
    let t = start.elapsed();
    let worst = report
        .ops
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .map(|o| format!("{} {:.2e}", o.op, o.max_rel_err))
        .unwrap_or_default();
    let net = report.op("arnet").map(|o| o.max_rel_err).unwrap_or(f64::NAN);
    Ok(outcome(
        report.passed() && t < Duration::from_secs(60),
        format!(
            "{} ops, worst {worst}, miniature net {net:.2e} (< 1e-4), failures {:?}, {:.2}s (< 60s)",
            report.ops.len(),
            report.failures(),
            t.as_secs_f64()
        ),
    ))
}

fn selection_properties(_: &Path) -> Result<Outcome, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad = 0usize;
    let field = Shape::new(1, 1, 4, 4);
    for trial in 0..10_000 {
        let range: HWRange = ["1-3", "1-9", "1-18", "1-36", "1-63"][trial % 5].parse().map_err(|e: arconv::Error| e.to_string())?;
        let coeff = range.default_coefficient();
        let lo = range.floor;
        let draw = |rng: &mut ChaCha8Rng| {
            let s: f64 = rng.random();
            Tensor::from_fn(field, |_, _, _, _| lo + range.span * (s * 0.8 + 0.2 * rng.random::<f64>()))
        };
        let hw = HWField {
            h: draw(&mut rng),
            w: draw(&mut rng),
        };
        let spec = select_points(&hw, coeff, coeff, 7).map_err(|e| e.to_string())?;
        let ok = |k: usize| k % 2 == 1 && (1..=7).contains(&k) && (range.upper() > 3.0 || k <= 3);
        if !ok(spec.kh) || !ok(spec.kw) {
            bad += 1;
        }
    }
    let t = start.elapsed();
    Ok(outcome(
        bad == 0 && t < Duration::from_secs(5),
        format!("{bad} violations in 10000 fields, {:.2}s (< 5s)", t.as_secs_f64()),
    ))
}

fn bilinear_exactness(_: &Path) -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (h, w) = (12usize, 15usize);
    let c: [f64; 4] = std::array::from_fn(|_| rng.random_range(-2.0..2.0));
    let f = |y: f64, x: f64| c[0] + c[1] * y + c[2] * x + c[3] * x * y;
    let plane: Vec<f64> = (0..h * w).map(|i| f((i / w) as f64, (i % w) as f64)).collect();
    let (mut interp, mut unity) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let y = rng.random_range(0.0..(h - 1) as f64);
        let x = rng.random_range(0.0..(w - 1) as f64);
        interp = interp.max((bilinear(&plane, h, w, y, x) - f(y, x)).abs());
        let s: f64 = Cell::locate(y, x).weights().iter().sum();
        unity = unity.max((s - 1.0).abs());
    }
    Ok(outcome(
        interp < 1e-12 && unity < 1e-14,
        format!("field error {interp:.2e} (< 1e-12), weight-sum error {unity:.2e} (< 1e-14)"),
    ))
}

fn small_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.data.count = 24;
    cfg.data.size = 32;
    cfg.data.holdout = 4;
    cfg.network.base_channels = 4;
    cfg.network.extractor_width = 4;
    cfg.training.batch_size = 4;
    cfg.training.epochs = 4;
    cfg.training.explore_epochs = 2;
    cfg.metrics.window = 16;
    cfg.heatmap.large_size = 12;
    cfg.heatmap.small_size = 4;
    cfg
}

/// Settings for the desk-scale training run.
fn smoke_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 7;
    cfg.network.base_channels = 8;
    cfg
}

fn training_smoke(dir: &Path) -> Result<Outcome, String> {
    let cfg = smoke_config();
    cfg.validate().map_err(|e| e.to_string())?;
    let out = dir.join("smoke");
    let start = Instant::now();
    let run = cmd_train(&cfg, &out, false, |_| {}).map_err(|e| e.to_string())?;
    let report = cmd_eval(&cfg, &run.checkpoint, &out.join("eval")).map_err(|e| e.to_string())?;
    let t = start.elapsed();
    let (first, last) = (run.records[0].loss, run.records.last().map_or(f64::NAN, |r| r.loss));
    let drop = 1.0 - last / first;
    let m = metric_row(&report, MODEL_ROW).ok_or("no model row")?;
    let b = metric_row(&report, BASELINE_ROW).ok_or("no baseline row")?;
    let passed = drop >= 0.5 && m.sam < b.sam && m.ergas < b.ergas;
    Ok(outcome(
        passed,
        format!(
            "loss {first:.5} -> {last:.5} ({:.1}% drop, >= 50%), SAM {:.4} vs EXP {:.4}, ERGAS {:.4} vs EXP {:.4}, {:.1} min (target < 15)",
            100.0 * drop,
            m.sam,
            b.sam,
            m.ergas,
            b.ergas,
            t.as_secs_f64() / 60.0
        ),
    ))
}

fn read_log(dir: &Path) -> Result<Vec<EpochRecord>, String> {
    let text = fs::read_to_string(dir.join(LOG_FILE)).map_err(|e| e.to_string())?;
    text.lines().map(|l| serde_json::from_str(l).map_err(|e| e.to_string())).collect()
}

fn freezing_invariant(dir: &Path) -> Result<Outcome, String> {
    let mut cfg = small_config(11);
    cfg.network.range = "1-63".parse().map_err(|e: arconv::Error| e.to_string())?;
    cfg.training.epochs = 6;
    cfg.training.explore_epochs = 3;
    let out = dir.join("freeze");
    let run = cmd_train(&cfg, &out, false, |_| {}).map_err(|e| e.to_string())?;
    let log = read_log(&out)?;
    let explore: Vec<&Vec<String>> = log
        .iter()
        .filter(|r| r.phase == Phase::Explore)
        .flat_map(|r| r.specs.iter())
        .collect();
    let layers = explore.first().map_or(0, |b| b.len());
    let varying = (0..layers)
        .filter(|&l| explore.iter().map(|b| b[l].as_str()).collect::<BTreeSet<_>>().len() > 1)
        .count();
    let frozen: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join(FROZEN_FILE)).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let frozen: Vec<String> = serde_json::from_value(frozen["specs"].clone()).map_err(|e| e.to_string())?;
    let train_batches: Vec<&Vec<String>> = log
        .iter()
        .filter(|r| r.phase == Phase::Train)
        .flat_map(|r| r.specs.iter())
        .collect();
    let constant = !train_batches.is_empty() && train_batches.iter().all(|b| **b == frozen);
    let bytes = fs::read(&run.checkpoint).map_err(|e| e.to_string())?;
    let restored = read_checkpoint(&bytes).map_err(|e| e.to_string())?;
    let restored_specs: Option<Vec<String>> = restored.net.frozen_specs().map(|v| v.iter().map(|s| s.to_string()).collect());
    let round_trip = restored_specs.as_ref() == Some(&frozen) && write_checkpoint(&restored).map_err(|e| e.to_string())? == bytes;
    Ok(outcome(
        varying > 0 && constant && round_trip,
        format!(
            "{varying} of {layers} layers varied across exploratory batches, {} post-freeze batches all {} = frozen: {constant}, checkpoint round trip: {round_trip}",
            train_batches.len(),
            frozen.join(",")
        ),
    ))
}

fn metric_spot_values(_: &Path) -> Result<Outcome, String> {
    let q = hqnr(0.0146, 0.0279);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::<f64>::uniform(Shape::new(1, 4, 32, 32), 0.05, 1.0, &mut rng);
    let err = |e: arconv::Error| e.to_string();
    let (s, e, qa) = (sam(&x, &x).map_err(err)?, ergas(&x, &x, 4.0).map_err(err)?, q_avg(&x, &x, 32).map_err(err)?);
    Ok(outcome(
        (q - 0.9579).abs() <= 5e-4 && s == 0.0 && e == 0.0 && qa == 1.0,
        format!("hqnr {q:.5} (0.9579 ± 5e-4), sam {s}, ergas {e}, q_avg {qa}"),
    ))
}

fn ablation_plumbing(dir: &Path) -> Result<Outcome, String> {
    let mut notes = Vec::new();
    let mut passed = true;
    for flag in ["hwa", "nspa", "at"] {
        let mut cfg = small_config(5);
        match flag {
            "hwa" => cfg.network.ablation.hwa = false,
            "nspa" => cfg.network.ablation.nspa = false,
            _ => cfg.network.ablation.at = false,
        }
        let out = dir.join(format!("no_{flag}"));
        let run = cmd_train(&cfg, &out, false, |_| {}).map_err(|e| e.to_string())?;
        let meta = read_meta(&fs::read(&run.checkpoint).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let recorded = meta.disabled == vec![flag.to_string()];
        let eval = cmd_eval(&cfg, &run.checkpoint, &out.join("eval"));
        let ok = recorded && eval.is_ok();
        passed &= ok;
        notes.push(format!("No-{}: disabled={:?} eval={}", flag.to_uppercase(), meta.disabled, if eval.is_ok() { "ok" } else { "failed" }));
    }
    Ok(outcome(passed, notes.join("; ")))
}

fn determinism(dir: &Path) -> Result<Outcome, String> {
    let cfg = small_config(9);
    let mut images = Vec::new();
    for name in ["det_a", "det_b"] {
        let out = dir.join(name);
        cmd_train(&cfg, &out, false, |_| {}).map_err(|e| e.to_string())?;
        images.push(fs::read(out.join(CHECKPOINT_FILE)).map_err(|e| e.to_string())?);
    }
    let same = images[0] == images[1];
    Ok(outcome(same, format!("two runs, {} bytes each, identical: {same}", images[0].len())))
}

fn main() -> ExitCode {
    let criteria: [(&str, Check); 9] = [
        ("reduction oracle", reduction_oracle),
        ("gradient suite", gradient_suite),
        ("selection properties", selection_properties),
        ("bilinear exactness", bilinear_exactness),
        ("training smoke", training_smoke),
        ("freezing invariant", freezing_invariant),
        ("metric spot values", metric_spot_values),
        ("ablation plumbing", ablation_plumbing),
        ("determinism", determinism),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let tmp = tempfile::tempdir().expect("temporary directory");
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let o = check(tmp.path()).unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        if !o.passed {
            failed += 1;
        }
        println!("criterion {}: {:<21} {}  {}", i + 1, name, if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
