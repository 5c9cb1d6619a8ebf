//! Central finite-difference checks for every differentiable op.
//!
//! Each op is a [`GradCase`] in a registry. A case builds random 64-bit
//! inputs and parameters and records a graph ending in some tensor `y`; the
//! checker differentiates `sum(y * R)` for a fixed random `R` and compares
//! selected entries against central differences. Probes whose perturbed
//! forward passes take a different piecewise branch are retried with the
//! smaller step and screened out if the branch still changes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arconv::{ARConv, ARConvConfig, AblationFlags, HWRange, KernelSpec};
use crate::arnet::{ARNet, ARNetConfig};
use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Random inputs and parameters for one case.
pub struct Probe {
    pub inputs: Vec<Tensor<f64>>,
    pub store: ParamStore<f64>,
}

impl Probe {
    fn inputs(inputs: Vec<Tensor<f64>>) -> Self {
        Probe {
            inputs,
            store: ParamStore::new(),
        }
    }
}

pub trait GradCase {
    /// Name of the op under test, as reported by its backward rule.
    fn op(&self) -> &'static str;

    fn probe(&self, rng: &mut ChaCha8Rng) -> Result<Probe>;

    /// Record the forward pass; `inputs` are leaves for `Probe::inputs`.
    fn forward(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, inputs: &[Var]) -> Result<Var>;

    /// Probe this many random scalars across all parameters instead of a
    /// few entries of each parameter tensor.
    fn param_samples(&self) -> Option<usize> {
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckConfig {
    /// Central-difference steps, tried in order while the branch changes.
    pub steps: Vec<f64>,
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
    /// Entries probed per tensor.
    pub per_tensor: usize,
    pub seed: u64,
    /// Negate the gradient of this op everywhere (harness self-test).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fault: Option<String>,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            steps: vec![1e-5, 1e-6],
            tolerance: 1e-4,
            floor: 1e-8,
            per_tensor: 6,
            seed: 0,
            fault: None,
        }
    }
}

impl CheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() || self.steps.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
            return Err(Error::config("gradcheck steps must be positive"));
        }
        if !(self.tolerance > 0.0) || !(self.floor > 0.0) {
            return Err(Error::config("gradcheck tolerance and floor must be positive"));
        }
        if self.per_tensor == 0 {
            return Err(Error::config("gradcheck per_tensor must be at least 1"));
        }
        if let Some(op) = &self.fault {
            if !registry().iter().any(|c| c.op() == op) {
                return Err(Error::config(format!("unknown op {op:?} for fault injection")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpReport {
    pub op: String,
    pub checked: usize,
    pub screened: usize,
    pub max_rel_err: f64,
    /// Entry with the largest error, e.g. `input 0 [17]` or `param l.kernel.w [3]`.
    pub worst: Option<String>,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub tolerance: f64,
    pub ops: Vec<OpReport>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(|o| o.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.ops.iter().filter(|o| !o.passed).map(|o| o.op.as_str()).collect()
    }

    pub fn op(&self, name: &str) -> Option<&OpReport> {
        self.ops.iter().find(|o| o.op == name)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<18} {:>8} {:>9} {:>12}  status\n", "op", "checked", "screened", "max rel err");
        for o in &self.ops {
            s += &format!(
                "{:<18} {:>8} {:>9} {:>12.3e}  {}\n",
                o.op,
                o.checked,
                o.screened,
                o.max_rel_err,
                if o.passed { "ok" } else { "FAIL" }
            );
        }
        s
    }
}

enum Slot {
    Input(usize),
    Param(crate::autodiff::ParamId),
}

struct Evaluation {
    loss: f64,
    signature: Option<u64>,
}

fn evaluate(case: &dyn GradCase, store: &ParamStore<f64>, inputs: &[Tensor<f64>], weights: &Tensor<f64>) -> Result<Evaluation> {
    let mut g = Graph::new().with_kink_tracking();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let y = case.forward(&mut g, store, &vars)?;
    let loss = g.value(y).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
    Ok(Evaluation {
        loss,
        signature: g.kink_signature(),
    })
}

fn pick(numel: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut all: Vec<usize> = (0..numel).collect();
    if numel > count {
        all.shuffle(rng);
        all.truncate(count);
        all.sort_unstable();
    }
    all
}

/// Check one case and summarize the worst relative error.
pub fn run_case(case: &dyn GradCase, cfg: &CheckConfig) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let probe = case.probe(&mut rng)?;

    let mut g = Graph::new().with_kink_tracking();
    if let Some(op) = &cfg.fault {
        g = g.with_fault(op.clone());
    }
    let vars: Vec<Var> = probe.inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let y = case.forward(&mut g, &probe.store, &vars)?;
    let base_signature = g.kink_signature();
    let weights = Tensor::uniform(g.shape(y), -1.0, 1.0, &mut rng);
    let r = g.constant(weights.clone());
    let yr = g.mul(y, r)?;
    let mean = g.mean_all(yr);
    let loss = g.scale(mean, weights.numel() as f64);
    let grads = g.backward(loss)?;
    let mut analytic = probe.store.clone();
    analytic.zero_grads();
    g.accumulate_param_grads(&grads, &mut analytic);

    let mut slots: Vec<(Slot, usize)> = Vec::new();
    for (i, t) in probe.inputs.iter().enumerate() {
        slots.extend(pick(t.numel(), cfg.per_tensor, &mut rng).into_iter().map(|k| (Slot::Input(i), k)));
    }
    let ids: Vec<_> = probe.store.ids().collect();
    match case.param_samples() {
        Some(count) => {
            let total = probe.store.scalar_count();
            for flat in pick(total, count, &mut rng) {
                let mut rest = flat;
                for &id in &ids {
                    let n = probe.store.value(id).numel();
                    if rest < n {
                        slots.push((Slot::Param(id), rest));
                        break;
                    }
                    rest -= n;
                }
            }
        }
        None => {
            for &id in &ids {
                let n = probe.store.value(id).numel();
                slots.extend(pick(n, cfg.per_tensor, &mut rng).into_iter().map(|k| (Slot::Param(id), k)));
            }
        }
    }

    let mut report = OpReport {
        op: case.op().to_string(),
        checked: 0,
        screened: 0,
        max_rel_err: 0.0,
        worst: None,
        passed: true,
    };
    for (slot, k) in slots {
        let (a, label) = match slot {
            Slot::Input(i) => (grads.get(vars[i]).map_or(0.0, |t| t.data()[k]), format!("input {i} [{k}]")),
            Slot::Param(id) => (analytic.grad(id).data()[k], format!("param {} [{k}]", probe.store.name(id))),
        };
        let mut numeric = None;
        for &h in &cfg.steps {
            let side = |delta: f64| -> Result<Evaluation> {
                let mut inputs = probe.inputs.clone();
                let mut store = probe.store.clone();
                match slot {
                    Slot::Input(i) => inputs[i].data_mut()[k] += delta,
                    Slot::Param(id) => store.value_mut(id).data_mut()[k] += delta,
                }
                evaluate(case, &store, &inputs, &weights)
            };
            let (plus, minus) = (side(h)?, side(-h)?);
            if plus.signature == base_signature && minus.signature == base_signature {
                numeric = Some((plus.loss - minus.loss) / (2.0 * h));
                break;
            }
        }
        let Some(fd) = numeric else {
            report.screened += 1;
            continue;
        };
        report.checked += 1;
        let err = (a - fd).abs() / a.abs().max(fd.abs()).max(cfg.floor);
        if err > report.max_rel_err || err.is_nan() {
            report.max_rel_err = err;
            report.worst = Some(label);
        }
    }
    report.passed = report.checked > 0 && report.max_rel_err < cfg.tolerance;
    Ok(report)
}

/// Run every registered case.
pub fn run_suite(cfg: &CheckConfig) -> Result<GradReport> {
    cfg.validate()?;
    let ops = registry().iter().map(|c| run_case(c.as_ref(), cfg)).collect::<Result<Vec<_>>>()?;
    Ok(GradReport {
        tolerance: cfg.tolerance,
        ops,
    })
}

fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Keeps values at least `gap` away from zero so piecewise ops stay smooth.
fn away_from_zero(shape: Shape, gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = uniform(shape, gap, 1.0, rng);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

struct Binary(&'static str);

impl GradCase for Binary {
    fn op(&self) -> &'static str {
        self.0
    }

    fn probe(&self, rng: &mut ChaCha8Rng) -> Result<Probe> {
        let s = Shape::new(2, 3, 4, 5);
        Ok(Probe::inputs(vec![uniform(s, -1.0, 1.0, rng), uniform(s, -1.0, 1.0, rng)]))
    }

    fn forward(&self, g: &mut Graph<f64>, _: &ParamStore<f64>, x: &[Var]) -> Result<Var> {
        match self.0 {
            "add" => g.add(x[0], x[1]),
            "sub" => g.sub(x[0], x[1]),
            _ => g.mul(x[0], x[1]),
        }
    }
}

struct Unary(&'static str);

impl GradCase for Unary {
    fn op(&self) -> &'static str {
        self.0
    }

    fn probe(&self, rng: &mut ChaCha8Rng) -> Result<Probe> {
        Ok(Probe::inputs(vec![away_from_zero(Shape::new(2, 3, 4, 4), 0.05, rng)]))
    }

    fn forward(&self, g: &mut Graph<f64>, _: &ParamStore<f64>, x: &[Var]) -> Result<Var> {
        Ok(match self.0 {
            "affine" => g.affine(x[0], -1.75, 0.5),
            "relu" => g.relu(x[0]),
            "sigmoid" => {
                let s = g.scale(x[0], 3.0);
                g.sigmoid(s)
            }
            "reduce_mean" => g.reduce_mean(x[0], &[1, 3])?,
            "reshape" => g.reshape(x[0], Shape::new(3, 2, 16, 1))?,
            _ => g.crop_center(x[0], 2, 2)?,
        })
    }
}

struct Concat;

impl GradCase for Concat {
    fn op(&self) -> &'static str {
        "concat"
    }

    fn probe(&self, rng: &mut ChaCha8Rng) -> Result<Probe> {
        Ok(Probe::inputs(vec![
            uniform(Shape::new(2, 1, 3, 4), -1.0, 1.0, rng),
            uniform(Shape::new(2, 3, 3, 4), -1.0, 1.0, rng),
            uniform(Shape::new(2, 2, 3, 4), -1.0, 1.0, rng),
        ]))
    }

    fn forward(&self, g: &mut Graph<f64>, _: &ParamStore<f64>, x: &[Var]) -> Result<Var> {
        g.concat_channels(x)
    }
}

struct Conv {
    transposed: bool,
}

impl GradCase for Conv {
    fn op(&self) -> &'static str {
        if self.transposed {
            "conv2d_transposed"
        } else {
            "conv2d"
        }
    }

    fn probe(&self, rng: &mut ChaCha8Rng) -> Result<Probe> {
        let (x, w) = if self.transposed {
            (Shape::new(2, 3, 3, 3), Shape::new(3, 2, 2, 2))
        } else {
            (Shape::new(2, 3, 6, 6), Shape::new(4, 3, 3, 3))
        };
        let co = if self.transposed { w.c } else { w.n };
        Ok(Probe::inputs(vec![
            uniform(x, -1.0, 1.0, rng),
            uniform(w, -0.5, 0.5, rng),
            uniform(Shape::new(1, co, 1, 1), -0.5, 0.5, rng),
        ]))
    }

    fn forward(&self, g: &mut Graph<f64>, _: &ParamStore<f64>, x: &[Var]) -> Result<Var> {
        if self.transposed {
            g.conv2d_transposed(x[0], x[1], Some(x[2]), (2, 2), (0, 0))
        } else {
            g.conv2d(x[0], x[1], Some(x[2]), (1, 2), (1, 1))
        }
    }
}

struct L1;

impl GradCase for L1 {
    fn op(&self) -> &'static str {
        "l1_loss"
    }

    fn probe(&self, rng: &mut ChaCha8Rng) -> Result<Probe> {
        let s = Shape::new(2, 3, 4, 4);
        Ok(Probe::inputs(vec![uniform(s, -1.0, 1.0, rng), uniform(s, -1.0, 1.0, rng)]))
    }

    fn forward(&self, g: &mut Graph<f64>, _: &ParamStore<f64>, x: &[Var]) -> Result<Var> {
        g.l1_loss(x[0], x[1])
    }
}

/// Bilinear sampling with free extent maps; `layout` goes through the tiled map.
struct Sampling {
    layout: bool,
}

impl GradCase for Sampling {
    fn op(&self) -> &'static str {
        if self.layout {
            "sampling_layout"
        } else {
            "sampling_map"
        }
    }

    fn probe(&self, rng: &mut ChaCha8Rng) -> Result<Probe> {
        let field = Shape::new(2, 1, 6, 6);
        Ok(Probe::inputs(vec![
            uniform(Shape::new(2, 3, 6, 6), -1.0, 1.0, rng),
            uniform(field, 1.0, 7.0, rng),
            uniform(field, 1.0, 7.0, rng),
        ]))
    }

    fn forward(&self, g: &mut Graph<f64>, _: &ParamStore<f64>, x: &[Var]) -> Result<Var> {
        let spec = KernelSpec::new(3, 5);
        if self.layout {
            g.sampling_map(x[0], x[1], x[2], spec)
        } else {
            g.sampling_columns(x[0], x[1], x[2], spec)
        }
    }
}

/// One adaptive layer; `flags` selects which learned parts are present.
struct Layer {
    op: &'static str,
    flags: AblationFlags,
    range: &'static str,
}

impl Layer {
    fn build(&self, store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) -> Result<ARConv> {
        let range: HWRange = self.range.parse()?;
        let mut cfg = ARConvConfig::new(3, 2).with_ranges(range, range);
        cfg.flags = self.flags;
        cfg.extractor_width = 4;
        ARConv::new(cfg, store, "layer", rng)
    }

    fn layer(&self) -> ARConv {
        let mut store = ParamStore::new();
        self.build(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).expect("fixed layer config is valid")
    }
}

impl GradCase for Layer {
    fn op(&self) -> &'static str {
        self.op
    }

    fn probe(&self, rng: &mut ChaCha8Rng) -> Result<Probe> {
        let mut store = ParamStore::new();
        self.build(&mut store, rng)?;
        Ok(Probe {
            inputs: vec![uniform(Shape::new(2, 3, 6, 6), -1.0, 1.0, rng)],
            store,
        })
    }

    fn forward(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, x: &[Var]) -> Result<Var> {
        let layer = self.layer();
        match self.op {
            "learn_hw" => {
                let (h, w) = layer.learn_hw(g, store, x[0])?.ok_or_else(|| Error::config("layer has no extent learner"))?;
                g.concat_channels(&[h, w])
            }
            "modulation" => {
                let (m, b) = layer.affine_maps(g, store, x[0])?;
                g.concat_channels(&[m, b])
            }
            _ => Ok(layer.forward(g, store, x[0])?.y),
        }
    }
}

/// ℓ1 loss through the two-block network, probed on random parameters.
struct Network;

impl Network {
    fn config() -> ARNetConfig {
        let mut cfg = ARNetConfig::miniature(4);
        cfg.base_channels = 4;
        cfg.extractor_width = 4;
        cfg
    }
}

impl GradCase for Network {
    fn op(&self) -> &'static str {
        "arnet"
    }

    fn probe(&self, rng: &mut ChaCha8Rng) -> Result<Probe> {
        let mut cfg = Self::config();
        cfg.seed = rng.random();
        let net = ARNet::<f64>::new(cfg)?;
        let side = 4 * net.config().size_multiple();
        Ok(Probe {
            inputs: vec![
                uniform(Shape::new(1, 1, side, side), 0.0, 1.0, rng),
                uniform(Shape::new(1, 4, side, side), 0.0, 1.0, rng),
                uniform(Shape::new(1, 4, side, side), 0.0, 1.0, rng),
            ],
            store: net.params,
        })
    }

    fn forward(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, x: &[Var]) -> Result<Var> {
        let mut net = ARNet::<f64>::new(Self::config())?;
        net.params = store.clone();
        let out = net.forward(g, x[0], x[1])?;
        g.l1_loss(out.fused, x[2])
    }

    fn param_samples(&self) -> Option<usize> {
        Some(10)
    }
}

/// Every check, in report order.
pub fn registry() -> Vec<Box<dyn GradCase>> {
    let all = AblationFlags::default();
    vec![
        Box::new(Binary("add")),
        Box::new(Binary("sub")),
        Box::new(Binary("mul")),
        Box::new(Unary("affine")),
        Box::new(Unary("relu")),
        Box::new(Unary("sigmoid")),
        Box::new(Unary("reduce_mean")),
        Box::new(Unary("reshape")),
        Box::new(Unary("crop_center")),
        Box::new(Concat),
        Box::new(Conv { transposed: false }),
        Box::new(Conv { transposed: true }),
        Box::new(L1),
        Box::new(Sampling { layout: false }),
        Box::new(Sampling { layout: true }),
        Box::new(Layer { op: "learn_hw", flags: all, range: "1-9" }),
        Box::new(Layer { op: "modulation", flags: all, range: "1-9" }),
        Box::new(Layer { op: "arconv", flags: all, range: "1-9" }),
        Box::new(Layer {
            op: "arconv_fixed",
            flags: AblationFlags { nspa: false, ..all },
            range: "1-18",
        }),
        Box::new(Network),
    ]
}

pub fn find(op: &str) -> Option<Box<dyn GradCase>> {
    registry().into_iter().find(|c| c.op() == op)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes() {
        let report = run_suite(&CheckConfig::default()).unwrap();
        println!("{}", report.table());
        assert!(report.passed(), "failing ops: {:?}", report.failures());
    }
}
