//! SGD with momentum, single-size and multi-size schedules, and fc fine-tuning
//! on pooled region features.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{subtract_mean, Sample, DEFAULT_MEAN};
use crate::error::{Error, Result};
use crate::geometry::resize_exact;
use crate::netgraph::{
    head_backward, head_forward_train, read, shared, write, Layer, LayerKind, Mode, NetworkInstance, NetworkSpec, ParameterStore,
    SharedParams,
};
use crate::ops::softmax_cross_entropy;
use crate::tensor::{Real, Shape, Tensor};

/// Per-epoch input side lengths.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SizeSchedule {
    Single(usize),
    /// Cycles through the listed sizes, one full epoch each.
    Alternate(Vec<usize>),
    /// One uniform draw from the inclusive range per epoch.
    Random(usize, usize),
}

impl SizeSchedule {
    pub fn sizes(&self) -> Vec<usize> {
        match self {
            SizeSchedule::Single(s) => vec![*s],
            SizeSchedule::Alternate(v) => v.clone(),
            SizeSchedule::Random(lo, hi) => (*lo..=*hi).collect(),
        }
    }
}

impl fmt::Display for SizeSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SizeSchedule::Single(s) => write!(f, "single:{s}"),
            SizeSchedule::Alternate(v) => {
                let parts: Vec<String> = v.iter().map(|s| s.to_string()).collect();
                write!(f, "alternate:{}", parts.join(","))
            }
            SizeSchedule::Random(lo, hi) => write!(f, "random:{lo}-{hi}"),
        }
    }
}

impl std::str::FromStr for SizeSchedule {
    type Err = Error;

    /// `single:32`, `alternate:32,24` or `random:24-40`; a bare number means single.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("bad size schedule `{s}`"));
        let num = |v: &str| v.trim().parse::<usize>().map_err(|_| bad());
        let (kind, rest) = s.split_once(':').unwrap_or(("single", s));
        let sched = match kind.trim() {
            "single" => SizeSchedule::Single(num(rest)?),
            "alternate" => SizeSchedule::Alternate(rest.split(',').map(num).collect::<Result<_>>()?),
            "random" => {
                let (lo, hi) = rest.split_once('-').ok_or_else(bad)?;
                SizeSchedule::Random(num(lo)?, num(hi)?)
            }
            _ => return Err(bad()),
        };
        let sizes = sched.sizes();
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(bad());
        }
        Ok(sched)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: SizeSchedule,
    /// Square side used for the per-epoch evaluation.
    pub eval_size: usize,
    pub seed: u64,
    pub init_std: f64,
    pub mean: f32,
    pub flip: bool,
    /// Decay when the best accuracy of the last `plateau_epochs` epochs beats the
    /// best before them by less than `plateau_gain` points.
    pub plateau_epochs: usize,
    pub plateau_gain: f64,
    pub max_decays: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            epochs: 30,
            schedule: SizeSchedule::Single(32),
            eval_size: 32,
            seed: 1,
            init_std: 0.01,
            mean: DEFAULT_MEAN,
            flip: true,
            plateau_epochs: 3,
            plateau_gain: 0.2,
            max_decays: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub size: usize,
    pub loss: f64,
    /// Fraction of evaluation samples classified correctly.
    pub accuracy: f64,
    /// Learning rate used during the epoch.
    pub learning_rate: f64,
}

impl EpochReport {
    /// One record of the epoch log.
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} size={} loss={:.6} accuracy={:.4} lr={:.3e}",
            self.epoch, self.size, self.loss, self.accuracy, self.learning_rate
        )
    }
}

/// Classic momentum update `v = momentum * v - lr * g; w += v` on every slot
/// with a gradient, then clears all gradients. Nothing is updated when any
/// gradient is non-finite or a frozen slot carries a non-zero gradient.
pub fn sgd_step<T: Real>(store: &mut ParameterStore<T>, lr: f64, momentum: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
    }
    for slot in store.slots() {
        if let Some(g) = slot.value.grad() {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{}` at index {i}", slot.name)));
            }
            if slot.frozen && g.iter().any(|v| *v != T::zero()) {
                return Err(Error::FrozenParameter(slot.name.clone()));
            }
        }
    }
    let (lr, mu) = (T::from_f64(lr), T::from_f64(momentum));
    for slot in store.slots_mut() {
        if slot.frozen {
            continue;
        }
        let Some(g) = slot.value.grad().map(|g| g.to_vec()) else {
            continue;
        };
        for ((w, v), g) in slot.value.data_mut().iter_mut().zip(slot.momentum.iter_mut()).zip(g) {
            *v = mu * *v - lr * g;
            *w = *w + *v;
        }
    }
    store.zero_grads();
    Ok(())
}

/// Input side for each of `epochs` epochs.
pub fn multi_size_schedule(schedule: &SizeSchedule, epochs: usize, seed: u64) -> Vec<usize> {
    match schedule {
        SizeSchedule::Single(s) => vec![*s; epochs],
        SizeSchedule::Alternate(v) => (0..epochs).map(|e| v[e % v.len()]).collect(),
        SizeSchedule::Random(lo, hi) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51_7e);
            (0..epochs).map(|_| rng.random_range(*lo..=*hi)).collect()
        }
    }
}

/// Warps every image to `size x size` and subtracts the mean.
fn warp_all(samples: &[Sample], size: usize, mean: f32) -> Result<Vec<Tensor<f32>>> {
    use rayon::prelude::*;
    samples
        .par_iter()
        .map(|s| Ok(subtract_mean(&resize_exact(&s.image, size, size)?, mean)))
        .collect()
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^ (z >> 31)
}

/// Top-1 accuracy with every image warped to `size x size`.
pub fn evaluate(spec: Arc<NetworkSpec>, params: &SharedParams, samples: &[Sample], size: usize, mean: f32) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let inst = NetworkInstance::new(spec, (size, size), params.clone())?;
    let inputs = warp_all(samples, size, mean)?;
    let mut correct = 0;
    for (chunk, items) in samples.chunks(64).zip(inputs.chunks(64)) {
        let (logits, _) = inst.forward(&Tensor::stack(items)?, Mode::Eval)?;
        for (i, s) in chunk.iter().enumerate() {
            if argmax(logits.item(i)) == s.label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Runs the configured schedule against `params`. Every scheduled size gets its
/// own instance over the same store; `on_epoch` sees them after each epoch.
pub fn train_with<F>(
    spec: Arc<NetworkSpec>,
    params: &SharedParams,
    train_set: &[Sample],
    eval_set: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<Vec<EpochReport>>
where
    F: FnMut(&EpochReport, &[NetworkInstance]) -> Result<()>,
{
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be >= 1"));
    }
    let classes = spec.num_outputs().ok_or_else(|| Error::invalid("network has no fc output"))?;
    if let Some(s) = train_set.iter().chain(eval_set).find(|s| s.label >= classes) {
        return Err(Error::LabelOutOfRange { label: s.label, classes });
    }
    let sizes = multi_size_schedule(&cfg.schedule, cfg.epochs, cfg.seed);
    let mut instances: BTreeMap<usize, NetworkInstance> = BTreeMap::new();
    for &s in sizes.iter().chain([&cfg.eval_size]) {
        if let std::collections::btree_map::Entry::Vacant(e) = instances.entry(s) {
            e.insert(NetworkInstance::new(spec.clone(), (s, s), params.clone())?);
        }
    }
    let all: Vec<NetworkInstance> = instances.values().cloned().collect();
    let mut warped: BTreeMap<usize, Vec<Tensor<f32>>> = BTreeMap::new();
    let mut lr = cfg.learning_rate;
    let mut decays = 0;
    let mut last_change = 0;
    let mut history: Vec<f64> = Vec::new();
    let mut reports = Vec::with_capacity(cfg.epochs);
    for (epoch, &size) in sizes.iter().enumerate() {
        if let std::collections::btree_map::Entry::Vacant(e) = warped.entry(size) {
            e.insert(warp_all(train_set, size, cfg.mean)?);
        }
        let inputs = &warped[&size];
        let inst = &instances[&size];
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, 1));
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let items: Vec<Tensor<f32>> = chunk
                .iter()
                .map(|&i| {
                    if cfg.flip && rng.random_bool(0.5) {
                        inputs[i].flip_horizontal()
                    } else {
                        inputs[i].clone()
                    }
                })
                .collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set[i].label).collect();
            let batch = Tensor::stack(&items)?;
            let (logits, trace) = inst.forward(
                &batch,
                Mode::Train {
                    seed: mix(cfg.seed, epoch as u64, b as u64 + 2),
                },
            )?;
            let (loss, grad) = softmax_cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {} batch {b}", epoch + 1)));
            }
            loss_sum += loss * chunk.len() as f64;
            inst.backward(&trace, &grad)?;
            sgd_step(&mut write(params), lr, cfg.momentum)?;
        }
        let accuracy = evaluate(spec.clone(), params, eval_set, cfg.eval_size, cfg.mean)?;
        let report = EpochReport {
            epoch: epoch + 1,
            size,
            loss: loss_sum / train_set.len() as f64,
            accuracy,
            learning_rate: lr,
        };
        on_epoch(&report, &all)?;
        reports.push(report);
        history.push(accuracy * 100.0);
        let w = cfg.plateau_epochs.max(1);
        let e = history.len();
        if decays < cfg.max_decays && e >= last_change + w && e > w {
            let recent = history[e - w..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let before = history[..e - w].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if recent - before < cfg.plateau_gain {
                lr /= 10.0;
                decays += 1;
                last_change = e;
            }
        }
    }
    Ok(reports)
}

/// Fresh Gaussian initialisation followed by [`train_with`].
pub fn train(spec: Arc<NetworkSpec>, train_set: &[Sample], eval_set: &[Sample], cfg: &TrainConfig) -> Result<(SharedParams, Vec<EpochReport>)> {
    let params = shared(ParameterStore::init(&spec, cfg.init_std, cfg.seed));
    let reports = train_with(spec, &params, train_set, eval_set, cfg, |_, _| Ok(()))?;
    Ok((params, reports))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub positive_fraction: f64,
    /// Iterations at each learning rate, in order.
    pub stages: Vec<(f64, usize)>,
    pub momentum: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            batch_size: 32,
            positive_fraction: 0.25,
            stages: vec![(1e-4, 300), (1e-5, 100)],
            momentum: 0.9,
            init_std: 0.01,
            seed: 7,
        }
    }
}

/// Draws mini-batches with a fixed share of positives, cycling through
/// shuffled pools of positive and negative indices.
pub struct BatchComposer {
    pos: Vec<usize>,
    neg: Vec<usize>,
    pos_at: usize,
    neg_at: usize,
    n_pos: usize,
    n_neg: usize,
    rng: ChaCha8Rng,
}

impl BatchComposer {
    pub fn new(pos: Vec<usize>, neg: Vec<usize>, batch: usize, fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&fraction) || batch == 0 {
            return Err(Error::invalid("bad batch size or positive fraction"));
        }
        let n_pos = (batch as f64 * fraction).round() as usize;
        let n_neg = batch - n_pos;
        if (n_pos > 0 && pos.is_empty()) || (n_neg > 0 && neg.is_empty()) {
            return Err(Error::invalid("fine-tuning needs both positive and background samples"));
        }
        let mut c = BatchComposer {
            pos,
            neg,
            pos_at: 0,
            neg_at: 0,
            n_pos,
            n_neg,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        c.pos.shuffle(&mut c.rng);
        c.neg.shuffle(&mut c.rng);
        Ok(c)
    }

    fn take(pool: &mut [usize], at: &mut usize, rng: &mut ChaCha8Rng) -> usize {
        if *at == pool.len() {
            pool.shuffle(rng);
            *at = 0;
        }
        *at += 1;
        pool[*at - 1]
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_pos + self.n_neg);
        for _ in 0..self.n_pos {
            out.push(Self::take(&mut self.pos, &mut self.pos_at, &mut self.rng));
        }
        for _ in 0..self.n_neg {
            out.push(Self::take(&mut self.neg, &mut self.neg_at, &mut self.rng));
        }
        out
    }
}

/// Trains only the fc layers on fixed-length pooled features.
///
/// The final fc layer is replaced by a freshly initialised `num_labels`-way
/// layer; labels below `num_labels - 1` are positives, `num_labels - 1` is
/// background. Conv slots are frozen and come back bit-identical.
pub fn finetune_fc(
    spec: &NetworkSpec,
    params: &ParameterStore<f32>,
    data: &[(Vec<f32>, usize)],
    num_labels: usize,
    cfg: &FinetuneConfig,
) -> Result<(NetworkSpec, ParameterStore<f32>, Vec<f64>)> {
    let pooled = spec.pooled_len().ok_or_else(|| Error::invalid("network has no pyramid pooling layer"))?;
    if num_labels < 2 {
        return Err(Error::invalid("fine-tuning needs at least one class plus background"));
    }
    for (f, l) in data {
        if f.len() != pooled {
            return Err(Error::shape("finetune_fc", "feature length", f.len(), pooled));
        }
        if *l >= num_labels {
            return Err(Error::LabelOutOfRange {
                label: *l,
                classes: num_labels,
            });
        }
    }
    let last_fc = spec
        .layers()
        .iter()
        .rposition(|l| matches!(l.kind, LayerKind::Fc { .. }))
        .ok_or_else(|| Error::invalid("network has no fc layer"))?;
    let layers: Vec<Layer> = spec
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| {
            if i == last_fc {
                Layer::new(l.name.clone(), LayerKind::Fc { out: num_labels })
            } else {
                l.clone()
            }
        })
        .collect();
    let new_spec = NetworkSpec::new(spec.name(), spec.input_channels(), layers)?;
    let fresh = &spec.layers()[last_fc].name;
    let mut store = ParameterStore::<f32>::init(&new_spec, cfg.init_std, cfg.seed);
    for slot in store.slots_mut() {
        if slot.name.split('.').next() == Some(fresh.as_str()) {
            continue;
        }
        let old = params
            .get(&slot.name)
            .ok_or_else(|| Error::CheckpointMismatch(format!("missing slot `{}`", slot.name)))?;
        slot.value = old.value.clone();
        slot.value.clear_grad();
    }
    store.set_frozen(|s| s.conv);
    let background = num_labels - 1;
    let pos: Vec<usize> = (0..data.len()).filter(|&i| data[i].1 != background).collect();
    let neg: Vec<usize> = (0..data.len()).filter(|&i| data[i].1 == background).collect();
    let mut composer = BatchComposer::new(pos, neg, cfg.batch_size, cfg.positive_fraction, cfg.seed)?;
    let shared_store = shared(store);
    let mut losses = Vec::new();
    let mut it = 0u64;
    for &(lr, iters) in &cfg.stages {
        for _ in 0..iters {
            let idx = composer.next_batch();
            let mut flat = Vec::with_capacity(idx.len() * pooled);
            for &i in &idx {
                flat.extend_from_slice(&data[i].0);
            }
            let labels: Vec<usize> = idx.iter().map(|&i| data[i].1).collect();
            let x = Tensor::from_vec(Shape::new(idx.len(), pooled, 1, 1), flat)?;
            let (logits, trace) = head_forward_train(&new_spec, &shared_store, &x, Mode::Train { seed: mix(cfg.seed, it, 3) })?;
            let (loss, grad) = softmax_cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("fine-tuning loss at iteration {it}")));
            }
            losses.push(loss);
            head_backward(&new_spec, &shared_store, &trace, &grad)?;
            sgd_step(&mut write(&shared_store), lr, cfg.momentum)?;
            it += 1;
        }
    }
    let mut out = read(&shared_store).clone();
    out.set_frozen(|_| false);
    Ok((new_spec, out, losses))
}
