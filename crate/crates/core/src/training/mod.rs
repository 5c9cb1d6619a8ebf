//! Supervised training: l1 loss, Adam, an exploratory phase during which
//! every layer picks its kernel geometry per batch, then frozen geometry.

mod adam;
mod checkpoint;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, read_checkpoint, read_meta, save_checkpoint, write_checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arconv::KernelSpec;
use crate::arnet::{upsample_lrms, ARNet};
use crate::autodiff::Graph;
use crate::data::SampleTriple;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Total epochs, exploration included.
    pub epochs: usize,
    pub explore_epochs: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 60,
            explore_epochs: 10,
            lr0: 0.0006,
            decay_factor: 0.8,
            decay_every: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.explore_epochs >= self.epochs {
            return Err(Error::config(format!(
                "explore_epochs ({}) must be smaller than epochs ({})",
                self.explore_epochs, self.epochs
            )));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::config(format!("decay_factor must lie in (0, 1], got {}", self.decay_factor)));
        }
        if self.decay_every == 0 {
            return Err(Error::config("decay_every must be positive"));
        }
        Ok(())
    }
}

/// Step-decayed learning rate for a 0-based epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay_factor.powi((epoch / cfg.decay_every) as i32)
}

/// Mean absolute error.
pub fn l1<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    pred.ensure_same("l1", gt)?;
    let total: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| (p.to_f64().unwrap_or(f64::NAN) - g.to_f64().unwrap_or(f64::NAN)).abs())
        .sum();
    Ok(total / pred.numel() as f64)
}

/// Network-ready tensors: PAN, upsampled MS and reference per sample.
pub struct TrainingSet<T> {
    pub pan: Vec<Tensor<T>>,
    pub lrms: Vec<Tensor<T>>,
    pub gt: Vec<Tensor<T>>,
}

impl<T: Real> TrainingSet<T> {
    pub fn from_samples(samples: &[SampleTriple<T>]) -> Result<Self> {
        let mut set = TrainingSet {
            pan: Vec::with_capacity(samples.len()),
            lrms: Vec::with_capacity(samples.len()),
            gt: Vec::with_capacity(samples.len()),
        };
        for s in samples {
            s.validate()?;
            set.pan.push(s.pan.clone());
            set.lrms.push(upsample_lrms(&s.lrms_low)?);
            set.gt.push(s.gt.clone());
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt.is_empty()
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let pick = |v: &Vec<Tensor<T>>| Tensor::stack(&idx.iter().map(|&i| &v[i]).collect::<Vec<_>>());
        Ok((pick(&self.pan)?, pick(&self.lrms)?, pick(&self.gt)?))
    }
}

/// Summary of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub lr: f64,
    pub loss: f64,
    pub batches: usize,
    /// Per batch, the geometry every layer used.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub specs: Vec<Vec<String>>,
    /// Geometry adopted at the end of this epoch, if freezing happened here.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frozen: Option<Vec<String>>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Explore,
    Train,
}

/// Per-layer specs of each batch in the last exploratory epoch.
pub type ExplorationLog = Vec<Vec<KernelSpec>>;

/// Adopt the joint per-layer geometry of one uniformly chosen batch.
pub fn freeze_specs<R: Rng + ?Sized>(log: &ExplorationLog, rng: &mut R) -> Result<Vec<KernelSpec>> {
    if log.is_empty() {
        return Err(Error::data("cannot freeze kernel specs from an empty exploration log"));
    }
    let pick = rng.random_range(0..log.len());
    Ok(log[pick].iter().map(|s| s.frozen()).collect())
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn freeze_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    rng
}

/// Result of a single epoch pass.
pub struct EpochStats {
    pub loss: f64,
    pub specs: ExplorationLog,
}

/// One pass over shuffled mini-batches with a fixed learning rate.
/// If the network is frozen, every batch is checked to use the frozen geometry.
pub fn run_epoch<T: Real>(
    net: &mut ARNet<T>,
    adam: &mut Adam<T>,
    set: &TrainingSet<T>,
    batch_size: usize,
    lr: f64,
    rng: &mut impl Rng,
) -> Result<EpochStats> {
    if set.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    if batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(rng);
    let frozen = net.frozen_specs();
    let mut specs = Vec::with_capacity(order.len().div_ceil(batch_size));
    let mut total = 0.0;
    for idx in order.chunks(batch_size) {
        let (pan, lrms, gt) = set.batch(idx)?;
        let mut g = Graph::new();
        let (pan, lrms, gt) = (g.constant(pan), g.constant(lrms), g.constant(gt));
        let out = net.forward(&mut g, pan, lrms)?;
        let used: Vec<KernelSpec> = out.layers.iter().map(|l| l.spec).collect();
        if let Some(f) = &frozen {
            if &used != f {
                return Err(Error::config("kernel geometry changed after freezing"));
            }
        }
        let loss = g.l1_loss(out.fused, gt)?;
        total += g.value(loss).data()[0].to_f64().unwrap_or(f64::NAN) * idx.len() as f64;
        let grads = g.backward(loss)?;
        net.params.zero_grads();
        g.accumulate_param_grads(&grads, &mut net.params);
        adam.update(&mut net.params, lr);
        specs.push(used);
    }
    Ok(EpochStats {
        loss: total / set.len() as f64,
        specs,
    })
}

/// Network, optimizer and schedule position. Epoch numbering is 0-based.
#[derive(Clone, Debug)]
pub struct Trainer<T: Real> {
    pub net: ARNet<T>,
    pub adam: Adam<T>,
    pub cfg: TrainConfig,
    /// Next epoch to run.
    pub epoch: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(net: ARNet<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(&net.params);
        Ok(Trainer { net, adam, cfg, epoch: 0 })
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    pub fn step_epoch(&mut self, set: &TrainingSet<T>) -> Result<EpochRecord> {
        let epoch = self.epoch;
        let exploring = epoch < self.cfg.explore_epochs;
        if !exploring && self.net.frozen_specs().is_none() {
            return Err(Error::config("training past exploration requires frozen kernel specs"));
        }
        let lr = lr_at(epoch, &self.cfg);
        let mut rng = epoch_rng(self.cfg.seed, epoch);
        let stats = run_epoch(&mut self.net, &mut self.adam, set, self.cfg.batch_size, lr, &mut rng)?;
        let mut record = EpochRecord {
            epoch,
            phase: if exploring { Phase::Explore } else { Phase::Train },
            lr,
            loss: stats.loss,
            batches: stats.specs.len(),
            specs: stats.specs.iter().map(|b| b.iter().map(|s| s.to_string()).collect()).collect(),
            frozen: None,
        };
        if exploring && epoch + 1 == self.cfg.explore_epochs {
            let specs = freeze_specs(&stats.specs, &mut freeze_rng(self.cfg.seed))?;
            self.net.freeze(&specs)?;
            record.frozen = Some(specs.iter().map(|s| s.to_string()).collect());
        }
        self.epoch += 1;
        Ok(record)
    }

    /// Run the remaining epochs, handing each record to `sink` as it completes.
    pub fn train(&mut self, set: &TrainingSet<T>, mut sink: impl FnMut(&Self, &EpochRecord) -> Result<()>) -> Result<Vec<EpochRecord>> {
        let mut records = Vec::new();
        while !self.is_done() {
            let r = self.step_epoch(set)?;
            sink(self, &r)?;
            records.push(r);
        }
        Ok(records)
    }

    /// Mean l1 loss of `set` without updating anything.
    pub fn evaluate(&self, set: &TrainingSet<T>) -> Result<f64> {
        let mut total = 0.0;
        for i in 0..set.len() {
            let pred = self.net.predict(&set.pan[i], &set.lrms[i])?;
            total += l1(&pred, &set.gt[i])?;
        }
        Ok(total / set.len().max(1) as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arnet::{ARNetConfig, Topology};
    use crate::data::{generate, GenConfig};

    fn tiny_net(seed: u64) -> ARNet<f32> {
        let mut c = ARNetConfig::with_topology(4, Topology::Miniature);
        c.base_channels = 4;
        c.extractor_width = 4;
        c.seed = seed;
        ARNet::new(c).unwrap()
    }

    fn tiny_set(count: usize) -> TrainingSet<f32> {
        let g = generate(&GenConfig { count, size: 16, ..GenConfig::default() }, 3).unwrap();
        TrainingSet::from_samples(&g.samples).unwrap()
    }

    #[test]
    fn schedule() {
        let mut c = TrainConfig::default();
        c.decay_every = 200;
        assert_eq!(lr_at(0, &c), 0.0006);
        assert!((lr_at(200, &c) - 0.00048).abs() < 1e-15);
        assert_eq!(lr_at(399, &c), lr_at(200, &c));
    }

    #[test]
    fn l1_values() {
        let a = Tensor::<f64>::full(crate::tensor::Shape::new(1, 2, 3, 3), 0.25);
        assert_eq!(l1(&a, &a).unwrap(), 0.0);
        assert_eq!(l1(&a.map(|v| v + 1.0), &a).unwrap(), 1.0);
    }

    #[test]
    fn config_checks() {
        let mut c = TrainConfig::default();
        c.explore_epochs = c.epochs;
        assert!(c.validate().is_err());
        c = TrainConfig { lr0: 0.0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_lr_keeps_loss_constant() {
        let mut net = tiny_net(1);
        let mut adam = Adam::new(&net.params);
        let set = tiny_set(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = run_epoch(&mut net, &mut adam, &set, 4, 0.0, &mut rng).unwrap().loss;
        let b = run_epoch(&mut net, &mut adam, &set, 4, 0.0, &mut rng).unwrap().loss;
        assert_eq!(a, b);
    }

    #[test]
    fn exploration_log_has_a_record_per_batch_and_layer() {
        let mut net = tiny_net(2);
        let mut adam = Adam::new(&net.params);
        let set = tiny_set(5);
        let stats = run_epoch(&mut net, &mut adam, &set, 2, 1e-3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(stats.specs.len(), 3);
        assert!(stats.specs.iter().all(|b| b.len() == 4));
        let empty = TrainingSet::<f32> { pan: vec![], lrms: vec![], gt: vec![] };
        assert!(run_epoch(&mut net, &mut adam, &empty, 2, 1e-3, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn freezing_choices() {
        let uniform = vec![vec![KernelSpec::new(3, 3); 10]; 4];
        let got = freeze_specs(&uniform, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(got.iter().all(|s| s.kh == 3 && s.kw == 3 && s.frozen));
        let varied: ExplorationLog = (0..16).map(|i| vec![KernelSpec::new(1 + 2 * (i % 4), 3); 10]).collect();
        let a = freeze_specs(&varied, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = freeze_specs(&varied, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(freeze_specs(&Vec::new(), &mut ChaCha8Rng::seed_from_u64(5)).is_err());
    }

    #[test]
    fn trainer_freezes_after_exploration() {
        let cfg = TrainConfig {
            batch_size: 2,
            epochs: 3,
            explore_epochs: 1,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(tiny_net(3), cfg).unwrap();
        let set = tiny_set(4);
        let recs = t.train(&set, |_, _| Ok(())).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].phase, Phase::Explore);
        assert_eq!(recs[0].specs.len(), 2);
        assert!(recs[0].frozen.is_some());
        let frozen = recs[0].frozen.clone().unwrap();
        for r in &recs[1..] {
            assert_eq!(r.specs, vec![frozen.clone(); 2]);
        }
        assert!(t.net.frozen_specs().is_some());
        assert!(t.is_done());
    }
}
