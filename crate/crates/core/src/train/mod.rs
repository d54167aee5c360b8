//! Optimization and run plumbing: a decoupled-weight-decay Adam optimizer,
//! deterministic training and evaluation loops, decoder-only fine-tuning
//! for posing parts against an assembled context, and binary checkpoints.
//!
//! Every source of randomness in a run (shuffles, noise branches,
//! validation draws) is derived from the single seed in [`TrainConfig`],
//! so rerunning with the same seed reproduces loss curves and checkpoint
//! bytes exactly.

use crate::autodiff::{Tape, Tensor};
use crate::data::{fnv1a64, AssemblySample};
use crate::encoding::{cluster_equivalent, EquivalencePartition, EQUIVALENCE_THRESHOLD};
use crate::error::{Error, Result};
use crate::loss::{branch_seed, mon_loss, supervised_loss, LossBreakdown, SampleLoss};
use crate::metrics::{evaluate_sample, mmd_select, MetricReport};
use crate::model::{
    pose_rows, sample_noise, AssemblyModel, BoundModel, ModelConfig, ParamStore, TokenInputs,
    Trainability,
};
use crate::rng::{derive_seed, rng_from_seed};
use crate::geom::{PartCloud, Pose, Quat};
use ndarray::ArrayD;
use rand::seq::SliceRandom as _;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

/// Checkpoint format version; bumped on any layout change.
pub const CHECKPOINT_VERSION: u32 = 1;

const CKPT_MAGIC: [u8; 4] = *b"PACK";

/// Hyperparameters of one training or fine-tuning run.
///
/// A zero learning rate is accepted (parameters stay fixed, which is
/// useful as a control); negative or non-finite rates are not.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Noise branches per sample; gradients flow through the best branch.
    pub mon_branches: usize,
    /// Root of every random decision in the run.
    pub seed: u64,
    /// Pose draws per shape when validating between epochs. Final
    /// evaluation typically uses a larger draw count.
    pub val_k: usize,
    /// Validate every this many epochs (and always on the final one).
    pub val_every: usize,
    /// Probability of dropping each context part during fine-tuning.
    pub drop_prob: f64,
    /// Optional early stop: end the run once validation part accuracy
    /// reaches this value.
    pub stop_at_val_pa: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.00015,
            weight_decay: 0.0001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            epochs: 200,
            mon_branches: 5,
            seed: 0,
            val_k: 3,
            val_every: 1,
            drop_prob: 0.2,
            stop_at_val_pa: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (what, v) in [
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "{what} must be finite and non-negative, got {v}"
                )));
            }
        }
        for (what, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !v.is_finite() || !(0.0..1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!(
                    "{what} must lie in [0, 1), got {v}"
                )));
            }
        }
        if !self.eps.is_finite() || self.eps <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        for (what, v) in [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("mon_branches", self.mon_branches),
            ("val_k", self.val_k),
            ("val_every", self.val_every),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{what} must be at least 1")));
            }
        }
        if !self.drop_prob.is_finite() || !(0.0..1.0).contains(&self.drop_prob) {
            return Err(Error::InvalidConfig(format!(
                "drop_prob must lie in [0, 1), got {}",
                self.drop_prob
            )));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay. First/second moments are kept per
/// parameter name; parameters absent from a step's gradient list are left
/// completely untouched (no decay), which is what keeps frozen network
/// parts bitwise stable during partial training.
#[derive(Clone, Debug)]
pub struct AdamW {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    moments: HashMap<String, (ArrayD<f64>, ArrayD<f64>)>,
}

impl AdamW {
    pub fn new(config: &TrainConfig) -> AdamW {
        AdamW {
            lr: config.learning_rate,
            weight_decay: config.weight_decay,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over the named gradients. All gradients are validated
    /// (shape and finiteness) before any state changes, so a bad gradient
    /// aborts the step without corrupting parameters or moments.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(String, ArrayD<f64>)]) -> Result<()> {
        for (name, grad) in grads {
            let param = params.get(name)?;
            if grad.shape() != param.shape() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer step",
                    detail: format!(
                        "{name}: gradient {:?} vs parameter {:?}",
                        grad.shape(),
                        param.shape()
                    ),
                });
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient { name: name.clone() });
            }
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (ArrayD::zeros(grad.raw_dim()), ArrayD::zeros(grad.raw_dim())));
            let param = params.get_mut(name)?;
            for ((p, &g), (m, v)) in param
                .iter_mut()
                .zip(grad.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * (g * g);
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *p);
            }
        }
        Ok(())
    }
}

/// One epoch's aggregate losses and validation scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean over training samples of the per-sample (mean over layers)
    /// loss terms.
    pub train_translation: f64,
    pub train_rotation: f64,
    pub train_shape: f64,
    pub train_total: f64,
    pub val_pa: Option<f64>,
    pub val_ca: Option<f64>,
    pub val_scd: Option<f64>,
    pub wall_ms: u64,
}

/// Full history of a run. Appended epoch by epoch; under a fixed seed the
/// loss and validation columns are bit-for-bit reproducible (wall-clock
/// times of course are not).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_pa: Option<f64>,
}

impl RunRecord {
    pub fn loss_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_total).collect()
    }
}

/// What [`train_run`] leaves behind: the history and the parameters that
/// scored the best validation part accuracy (the final parameters when no
/// validation set was given).
pub struct TrainOutcome {
    pub record: RunRecord,
    pub best: AssemblyModel,
}

#[derive(Serialize)]
struct ConfigSnapshot<'a> {
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

fn check_compatible(config: &ModelConfig, samples: &[AssemblySample]) -> Result<()> {
    for s in samples {
        if s.n_parts() > config.max_parts {
            return Err(Error::TooManyParts {
                n_parts: s.n_parts(),
                max_parts: config.max_parts,
            });
        }
    }
    Ok(())
}

fn accumulate(into: &mut LossBreakdown, from: &LossBreakdown) {
    into.translation += from.translation;
    into.rotation += from.rotation;
    into.shape += from.shape;
    into.total += from.total;
}

fn write_config_snapshot(dir: &Path, model: &ModelConfig, train: &TrainConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let snap = ConfigSnapshot { model, train };
    let text = serde_json::to_string_pretty(&snap).expect("config serializes");
    std::fs::write(dir.join("config.json"), text)?;
    // Fresh log for this run; epochs append below.
    std::fs::write(dir.join("train_log.jsonl"), "")?;
    Ok(())
}

fn append_epoch(dir: &Path, record: &EpochRecord) -> Result<()> {
    use std::io::Write as _;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join("train_log.jsonl"))?;
    writeln!(f, "{}", serde_json::to_string(record).expect("record serializes"))?;
    Ok(())
}

/// Gradient arrays for every parameter the tape saw, in parameter-store
/// order. Parameters outside the trainable set simply do not appear.
fn collect_grads(
    bound: &BoundModel<'_, '_>,
    grads: &mut crate::autodiff::GradStore,
) -> Vec<(String, ArrayD<f64>)> {
    bound
        .named_tensors()
        .filter_map(|(name, t)| grads.take(t).map(|g| (name.to_string(), g)))
        .collect()
}

/// One optimizer step over a batch: min-over-noise loss per sample, batch
/// mean, single backward pass. Returns the sum of per-sample loss terms so
/// the caller can average per epoch with equal sample weights.
fn train_step(
    model: &mut AssemblyModel,
    opt: &mut AdamW,
    train: &[AssemblySample],
    batch: &[usize],
    epoch: u64,
    config: &TrainConfig,
) -> Result<Vec<(usize, LossBreakdown)>> {
    let mut stats = Vec::with_capacity(batch.len());
    let named = {
        let tape = Tape::new();
        let bound = model.bind(&tape, Trainability::Full);
        let mut total: Option<Tensor> = None;
        for &i in batch {
            let s = &train[i];
            let seeds: Vec<u64> = (0..config.mon_branches as u64)
                .map(|b| branch_seed(config.seed, epoch, s.id, b))
                .collect();
            let (obj, outcome) = mon_loss(&bound, &s.parts, &s.partition, &s.gt_poses, &seeds)?;
            stats.push((i, outcome.sample.mean));
            total = Some(match total {
                Some(t) => t.add(obj),
                None => obj,
            });
        }
        let loss = total.expect("non-empty batch").scale(1.0 / batch.len() as f64);
        let mut grads = tape.backward(loss)?;
        collect_grads(&bound, &mut grads)
    };
    opt.step(model.params_mut(), &named)?;
    Ok(stats)
}

/// Trains `model` in place. Per epoch: a seeded shuffle, batched
/// min-over-noise updates, then (every `val_every` epochs, if `val` is
/// non-empty) a best-of-`val_k` validation pass whose part accuracy
/// decides the best parameters.
///
/// When `run_dir` is given, the directory receives a `config.json`
/// snapshot, a `train_log.jsonl` line per epoch, and `best.ckpt` /
/// `last.ckpt` checkpoints.
pub fn train_run(
    model: &mut AssemblyModel,
    train: &[AssemblySample],
    val: &[AssemblySample],
    config: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    check_compatible(model.config(), train)?;
    check_compatible(model.config(), val)?;
    if let Some(dir) = run_dir {
        write_config_snapshot(dir, model.config(), config)?;
    }

    let mut opt = AdamW::new(config);
    let val_seed = derive_seed(config.seed, "val", &[]);
    let mut record = RunRecord {
        seed: config.seed,
        epochs: Vec::with_capacity(config.epochs),
        best_epoch: None,
        best_val_pa: None,
    };
    let mut best: Option<AssemblyModel> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut rng = rng_from_seed(derive_seed(config.seed, "shuffle", &[epoch as u64]));
        order.shuffle(&mut rng);
        // Per-sample stats are re-summed in dataset order so the recorded
        // epoch means do not depend on the shuffle.
        let mut per_sample = vec![LossBreakdown::default(); train.len()];
        for batch in order.chunks(config.batch_size) {
            for (i, b) in train_step(model, &mut opt, train, batch, epoch as u64, config)? {
                per_sample[i] = b;
            }
        }
        let mut sums = LossBreakdown::default();
        for b in &per_sample {
            accumulate(&mut sums, b);
        }
        let inv = 1.0 / train.len() as f64;
        let validate_now = !val.is_empty()
            && ((epoch + 1) % config.val_every == 0 || epoch + 1 == config.epochs);
        let report = if validate_now {
            Some(evaluate_run(model, val, config.val_k, val_seed)?)
        } else {
            None
        };
        let rec = EpochRecord {
            epoch,
            train_translation: sums.translation * inv,
            train_rotation: sums.rotation * inv,
            train_shape: sums.shape * inv,
            train_total: sums.total * inv,
            val_pa: report.as_ref().map(|r| r.pa),
            val_ca: report.as_ref().and_then(|r| r.ca),
            val_scd: report.as_ref().map(|r| r.scd),
            wall_ms: started.elapsed().as_millis() as u64,
        };
        if let Some(dir) = run_dir {
            append_epoch(dir, &rec)?;
        }
        if let Some(pa) = rec.val_pa {
            if record.best_val_pa.map_or(true, |b| pa > b) {
                record.best_val_pa = Some(pa);
                record.best_epoch = Some(epoch);
                best = Some(model.clone());
            }
        }
        let reached = config
            .stop_at_val_pa
            .zip(rec.val_pa)
            .map_or(false, |(target, pa)| pa >= target);
        record.epochs.push(rec);
        if reached {
            break;
        }
    }

    let best = best.unwrap_or_else(|| model.clone());
    if let Some(dir) = run_dir {
        save_checkpoint(&dir.join("best.ckpt"), &best)?;
        save_checkpoint(&dir.join("last.ckpt"), model)?;
    }
    Ok(TrainOutcome { record, best })
}

/// Scores a model over a sample set: best-of-`k` pose selection per shape,
/// then the aggregate report. The same call validates during training
/// (small `k`) and evaluates at the end (larger `k`).
pub fn evaluate_run(
    model: &AssemblyModel,
    samples: &[AssemblySample],
    k: usize,
    seed: u64,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::EmptySplit("evaluation".into()));
    }
    check_compatible(model.config(), samples)?;
    let per = samples
        .iter()
        .map(|s| Ok(mmd_select(model, s, k, seed)?.metrics))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::aggregate(per))
}

/// As [`evaluate_run`] with an arbitrary pose source instead of a model;
/// lets tests and oracles feed known poses through the exact reporting
/// path.
pub fn evaluate_run_with(
    samples: &[AssemblySample],
    mut predict: impl FnMut(&AssemblySample) -> Result<Vec<Pose>>,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::EmptySplit("evaluation".into()));
    }
    let per = samples
        .iter()
        .map(|s| evaluate_sample(&predict(s)?, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::aggregate(per))
}

/// Context rows kept and the query part for one fine-tuning draw. Every
/// non-query part survives with probability `1 - drop_prob`; empty
/// contexts are redrawn, matching the dataset's part-drop augmentation.
fn finetune_split(
    sample: &AssemblySample,
    epoch: u64,
    config: &TrainConfig,
) -> (Vec<usize>, usize) {
    let mut rng = rng_from_seed(derive_seed(
        config.seed,
        "inprocess-split",
        &[epoch, sample.id],
    ));
    let query = rng.gen_range(0..sample.n_parts());
    let others: Vec<usize> = (0..sample.n_parts()).filter(|&i| i != query).collect();
    let kept = loop {
        let kept: Vec<usize> = others
            .iter()
            .copied()
            .filter(|_| rng.gen::<f64>() >= config.drop_prob)
            .collect();
        if !kept.is_empty() {
            break kept;
        }
    };
    (kept, query)
}

/// Encodes a pinned context and decodes the single query part (the last
/// row of `parts`), scoring the decoder's per-layer poses against the
/// query's ground truth.
fn decode_query<'t>(
    bound: &BoundModel<'t, '_>,
    parts: &[PartCloud],
    partition: &EquivalencePartition,
    gt: &[Pose],
    noise: ArrayD<f64>,
) -> Result<(Tensor<'t>, SampleLoss)> {
    let cfg = *bound.config();
    let n_ctx = parts.len() - 1;
    let inputs = TokenInputs::from_parts(parts, partition, &cfg, noise)?;
    let ctx_rows: Vec<usize> = (0..n_ctx).collect();
    let context = inputs.select(&ctx_rows);
    let queries = inputs.select(&[n_ctx]);
    let pinned = pose_rows(&gt[..n_ctx]);
    let encoded = bound.encode(&context, Some(&pinned))?;
    let layer_poses = bound.decode(&queries, &encoded.memory)?;
    let query_parts = vec![parts[n_ctx].clone()];
    let query_gt = vec![gt[n_ctx]];
    let query_partition = EquivalencePartition::new(vec![vec![0]], 1)?;
    supervised_loss(
        bound.tape(),
        &layer_poses,
        &query_parts,
        &query_gt,
        &query_partition,
    )
}

/// Min-over-noise loss of one fine-tuning sample: a value-only sweep picks
/// the best noise branch, which is then rerun on the training tape.
fn finetune_sample_loss<'t>(
    bound: &BoundModel<'t, '_>,
    sample: &AssemblySample,
    epoch: u64,
    config: &TrainConfig,
) -> Result<(Tensor<'t>, LossBreakdown)> {
    let cfg = *bound.config();
    let (ctx, query) = finetune_split(sample, epoch, config);
    let ordered: Vec<usize> = ctx.iter().copied().chain([query]).collect();
    let parts: Vec<PartCloud> = ordered.iter().map(|&i| sample.parts[i].clone()).collect();
    let gt: Vec<Pose> = ordered.iter().map(|&i| sample.gt_poses[i]).collect();
    let partition = cluster_equivalent(&parts, EQUIVALENCE_THRESHOLD)?;
    let n = parts.len();
    let seeds: Vec<u64> = (0..config.mon_branches as u64)
        .map(|b| derive_seed(config.seed, "inprocess-noise", &[epoch, sample.id, b]))
        .collect();

    let vtape = Tape::new();
    let vbound = bound.model().bind(&vtape, Trainability::Frozen);
    let mut totals = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let (_, sl) = decode_query(
            &vbound,
            &parts,
            &partition,
            &gt,
            sample_noise(n, cfg.noise_dim, seed),
        )?;
        totals.push(sl.mean.total);
    }
    let best = totals
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("non-empty branches");

    let (obj, sl) = decode_query(
        bound,
        &parts,
        &partition,
        &gt,
        sample_noise(n, cfg.noise_dim, seeds[best]),
    )?;
    debug_assert_eq!(
        sl.mean.total.to_bits(),
        totals[best].to_bits(),
        "winner rerun must reproduce its branch value"
    );
    Ok((obj, sl.mean))
}

fn finetune_step(
    model: &mut AssemblyModel,
    opt: &mut AdamW,
    train: &[AssemblySample],
    batch: &[usize],
    epoch: u64,
    config: &TrainConfig,
) -> Result<Vec<(usize, LossBreakdown)>> {
    let mut stats = Vec::with_capacity(batch.len());
    let named = {
        let tape = Tape::new();
        let bound = model.bind(&tape, Trainability::DecoderOnly);
        let mut total: Option<Tensor> = None;
        for &i in batch {
            let (obj, mean) = finetune_sample_loss(&bound, &train[i], epoch, config)?;
            stats.push((i, mean));
            total = Some(match total {
                Some(t) => t.add(obj),
                None => obj,
            });
        }
        let loss = total.expect("non-empty batch").scale(1.0 / batch.len() as f64);
        let mut grads = tape.backward(loss)?;
        collect_grads(&bound, &mut grads)
    };
    opt.step(model.params_mut(), &named)?;
    Ok(stats)
}

/// Fine-tunes the decoder for posing parts against an already-assembled
/// context. Per sample and epoch, one part becomes the query; the rest,
/// thinned by part-drop, are encoded with their poses pinned to ground
/// truth. Only decoder parameters receive updates — everything on the
/// encoder side is bitwise unchanged afterwards.
pub fn inprocess_finetune(
    model: &mut AssemblyModel,
    train: &[AssemblySample],
    config: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<RunRecord> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySplit("fine-tune train".into()));
    }
    check_compatible(model.config(), train)?;
    if let Some(s) = train.iter().find(|s| s.n_parts() < 2) {
        return Err(Error::InvalidArgument(format!(
            "fine-tuning needs at least two parts per sample; sample {} has {}",
            s.id,
            s.n_parts()
        )));
    }
    if let Some(dir) = run_dir {
        write_config_snapshot(dir, model.config(), config)?;
    }

    let mut opt = AdamW::new(config);
    let mut record = RunRecord {
        seed: config.seed,
        epochs: Vec::with_capacity(config.epochs),
        best_epoch: None,
        best_val_pa: None,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut rng = rng_from_seed(derive_seed(config.seed, "inprocess-shuffle", &[epoch as u64]));
        order.shuffle(&mut rng);
        let mut per_sample = vec![LossBreakdown::default(); train.len()];
        for batch in order.chunks(config.batch_size) {
            for (i, b) in finetune_step(model, &mut opt, train, batch, epoch as u64, config)? {
                per_sample[i] = b;
            }
        }
        let mut sums = LossBreakdown::default();
        for b in &per_sample {
            accumulate(&mut sums, b);
        }
        let inv = 1.0 / train.len() as f64;
        let rec = EpochRecord {
            epoch,
            train_translation: sums.translation * inv,
            train_rotation: sums.rotation * inv,
            train_shape: sums.shape * inv,
            train_total: sums.total * inv,
            val_pa: None,
            val_ca: None,
            val_scd: None,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        if let Some(dir) = run_dir {
            append_epoch(dir, &rec)?;
        }
        record.epochs.push(rec);
    }
    if let Some(dir) = run_dir {
        save_checkpoint(&dir.join("last.ckpt"), model)?;
    }
    Ok(record)
}

// --- Checkpoints -----------------------------------------------------
//
// Layout: magic, version, config JSON (length-prefixed), parameter count,
// then per parameter: name, rank, dims, raw f64 bits; an FNV-1a checksum
// of everything before it closes the file. Parameter order is the store's
// insertion order, so save -> load -> save is byte-identical.

/// Serializes a model to the checkpoint byte format.
pub fn checkpoint_bytes(model: &AssemblyModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CKPT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(model.config()).expect("config serializes");
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(model.params().len() as u64).to_le_bytes());
    for (name, value) in model.params().iter() {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.ndim() as u32).to_le_bytes());
        for &d in value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in value.iter() {
            out.extend_from_slice(&x.to_bits().to_le_bytes());
        }
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::Truncated(format!(
                "checkpoint ends {} bytes short",
                self.at + n - self.buf.len()
            )));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses checkpoint bytes back into a model, validating the checksum,
/// magic, version and parameter shapes.
pub fn read_checkpoint(bytes: &[u8]) -> Result<AssemblyModel> {
    if bytes.len() < CKPT_MAGIC.len() + 12 {
        return Err(Error::Truncated("checkpoint shorter than its header".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a64(body) != stored {
        return Err(Error::ChecksumMismatch { record: 0 });
    }
    let mut r = Reader { buf: body, at: 0 };
    if r.take(4)? != CKPT_MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let cfg_len = r.u64()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)
        .map_err(|e| Error::InvalidConfig(format!("checkpoint config: {e}")))?;
    let count = r.u64()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u64()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Truncated("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_bits(r.u64()?));
        }
        let value = ArrayD::from_shape_vec(ndarray::IxDyn(&dims), data)
            .map_err(|e| Error::Truncated(format!("parameter {name}: {e}")))?;
        params.insert(&name, value);
    }
    if r.at != body.len() {
        return Err(Error::Truncated(format!(
            "{} unread bytes after the last parameter",
            body.len() - r.at
        )));
    }
    AssemblyModel::from_parts(config, params)
}

pub fn save_checkpoint(path: &Path, model: &AssemblyModel) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<AssemblyModel> {
    read_checkpoint(&std::fs::read(path)?)
}

// --- Whole-model gradient verification --------------------------------

/// Central-difference check of the full training graph: encoder losses on
/// a random scene plus the decoder's pinned-context query loss, so every
/// parameter family participates. Checks `elements_per_param` evenly
/// spaced elements of each parameter tensor and returns the worst relative
/// error.
pub fn model_grad_check(
    config: &ModelConfig,
    n_parts: usize,
    n_points: usize,
    elements_per_param: usize,
    seed: u64,
) -> Result<f64> {
    if n_parts < 2 {
        return Err(Error::InvalidArgument(
            "the gradient check needs at least two parts (one becomes the query)".into(),
        ));
    }
    let model = AssemblyModel::init(*config, seed)?;
    let mut rng = rng_from_seed(derive_seed(seed, "gradcheck-scene", &[]));
    // Distinct per-part extents keep the parts in separate equivalence
    // classes, so relabeling can never flip mid-check.
    let parts: Vec<PartCloud> = (0..n_parts)
        .map(|i| {
            let extent = 0.2 + 0.25 * i as f64;
            PartCloud::from_points(
                (0..n_points)
                    .map(|_| std::array::from_fn(|_| rng.gen_range(-extent..extent)))
                    .collect(),
            )
        })
        .collect::<Result<_>>()?;
    let gt: Vec<Pose> = (0..n_parts)
        .map(|_| {
            let axis = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.1..1.0),
            ];
            Pose::new(
                Quat::from_axis_angle(axis, rng.gen_range(-2.0..2.0)),
                std::array::from_fn(|_| rng.gen_range(-0.4..0.4)),
            )
        })
        .collect::<Result<_>>()?;
    let partition = cluster_equivalent(&parts, EQUIVALENCE_THRESHOLD)?;
    let noise = sample_noise(n_parts, config.noise_dim, derive_seed(seed, "gradcheck-noise", &[]));

    let objective = |m: &AssemblyModel, trainability: Trainability| -> Result<(f64, Option<Vec<(String, ArrayD<f64>)>>)> {
        let tape = Tape::new();
        let bound = m.bind(&tape, trainability);
        let inputs = TokenInputs::from_parts(&parts, &partition, config, noise.clone())?;
        let out = bound.encode(&inputs, None)?;
        let (enc_obj, _) = supervised_loss(&tape, &out.layer_poses, &parts, &gt, &partition)?;
        let (dec_obj, _) = decode_query(&bound, &parts, &partition, &gt, noise.clone())?;
        let total = enc_obj.add(dec_obj);
        let value = total.value().sum();
        if trainability == Trainability::Frozen {
            return Ok((value, None));
        }
        let mut grads = tape.backward(total)?;
        Ok((value, Some(collect_grads(&bound, &mut grads))))
    };

    let (_, named) = objective(&model, Trainability::Full)?;
    let named = named.expect("gradients requested");
    let analytic: HashMap<&str, &ArrayD<f64>> =
        named.iter().map(|(n, g)| (n.as_str(), g)).collect();

    let rel_err =
        |a: f64, n: f64| -> f64 { (a - n).abs() / 1.0f64.max(a.abs()).max(n.abs()) };
    let eps = crate::autodiff::GRAD_CHECK_EPS;
    let mut work = model.clone();
    let mut worst = 0.0f64;
    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    for name in &names {
        let len = model.params().get(name)?.len();
        let stride = len.div_ceil(elements_per_param).max(1);
        for ei in (0..len).step_by(stride) {
            let orig = model.params().get(name)?.as_slice().unwrap()[ei];
            work.params_mut().get_mut(name)?.as_slice_mut().unwrap()[ei] = orig + eps;
            let (plus, _) = objective(&work, Trainability::Frozen)?;
            work.params_mut().get_mut(name)?.as_slice_mut().unwrap()[ei] = orig - eps;
            let (minus, _) = objective(&work, Trainability::Frozen)?;
            work.params_mut().get_mut(name)?.as_slice_mut().unwrap()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic
                .get(name.as_str())
                .map_or(0.0, |g| g.as_slice().unwrap()[ei]);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    Ok(worst)
}
