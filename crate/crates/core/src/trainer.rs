//! The RLVR loop: snapshot, rollout, sharded GRPO updates, metrics and checkpoints.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainerState};
use crate::env::Dataset;
use crate::eval::{evaluate, EvalConfig};
use crate::loss::LossConfig;
use crate::policy::{loss_gradients, PolicyParams};
use crate::rng::substream;
use crate::rollout::{build_batch, rollout_step, snapshot_policy, RewardMode, RolloutConfig};
use crate::selection::AccuracyHistory;
use crate::verifier::{format_reward, perturb_label};
use crate::vocab::Vocab;
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    /// Updates applied so far.
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamW {
    pub fn new(num_params: usize) -> Self {
        Self { t: 0, m: vec![0.0; num_params], v: vec![0.0; num_params] }
    }
}

/// One AdamW update. Weight decay scales the parameters by `1 - lr * wd`
/// before the adaptive step.
pub fn optimizer_step(
    params: &mut PolicyParams,
    grads: &PolicyParams,
    lr: f64,
    weight_decay: f64,
    enable_weight_decay: bool,
    state: &mut AdamW,
) -> Result<()> {
    if params.dims() != grads.dims() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::InvalidInput("optimizer shapes do not match the parameters".into()));
    }
    if let Some(i) = grads.as_slice().iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient component {i} is {} at optimizer step {}",
            grads.as_slice()[i],
            state.t + 1
        )));
    }
    state.t += 1;
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let decay = if enable_weight_decay { 1.0 - lr * weight_decay } else { 1.0 };
    for (((p, &g), m), v) in params.as_mut_slice().iter_mut().zip(grads.as_slice()).zip(&mut state.m).zip(&mut state.v) {
        *p *= decay;
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Periodic held-out evaluation during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeldoutSchedule {
    /// Evaluate after every `every` steps (and after the last one).
    pub every: usize,
    pub eval: EvalConfig,
}

impl Default for HeldoutSchedule {
    fn default() -> Self {
        Self { every: 10, eval: EvalConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub mini_batches_per_rollout: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub enable_weight_decay: bool,
    pub loss: LossConfig,
    pub rollout: RolloutConfig,
    pub seed: u64,
    /// Checkpoint cadence in steps; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Fraction of training labels replaced by wrong ones before training.
    pub label_error_rate: f64,
    /// Replacement label for the first training example.
    pub label_override: Option<String>,
    pub heldout: Option<HeldoutSchedule>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            mini_batches_per_rollout: 8,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            enable_weight_decay: true,
            loss: LossConfig::default(),
            rollout: RolloutConfig::default(),
            seed: 0,
            checkpoint_every: 20,
            label_error_rate: 0.0,
            label_override: None,
            heldout: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.rollout.validate()?;
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        let mb = self.mini_batches_per_rollout;
        if mb == 0 || !self.rollout.batch_size.is_multiple_of(mb) {
            return Err(Error::Config(format!(
                "mini_batches_per_rollout ({mb}) must be >= 1 and divide batch_size ({})",
                self.rollout.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(0.0..=1.0).contains(&self.label_error_rate) {
            return Err(Error::Config(format!("label_error_rate must lie in [0, 1], got {}", self.label_error_rate)));
        }
        if let Some(h) = &self.heldout {
            if h.every == 0 || h.eval.k == 0 {
                return Err(Error::Config("held-out schedule needs every >= 1 and k >= 1".into()));
            }
        }
        Ok(())
    }
}

/// Command-line style switches layered onto a [`TrainConfig`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AblationFlags {
    pub no_pg: bool,
    pub no_kl: bool,
    pub no_entropy: bool,
    pub no_wd: bool,
    pub entropy_coef_override: Option<f64>,
    pub format_reward: bool,
    pub label_override: Option<String>,
    pub label_error_rate: Option<f64>,
}

pub fn apply_ablation(config: &TrainConfig, flags: &AblationFlags) -> Result<TrainConfig> {
    let mut c = config.clone();
    if flags.no_entropy && flags.entropy_coef_override.is_some() {
        return Err(Error::Config("--entropy-coef contradicts --no-entropy".into()));
    }
    if flags.no_pg {
        c.loss.enable_pg = false;
    }
    if flags.no_kl {
        c.loss.enable_kl = false;
    }
    if flags.no_entropy {
        c.loss.enable_entropy = false;
    }
    if flags.no_wd {
        c.enable_weight_decay = false;
    }
    if let Some(coef) = flags.entropy_coef_override {
        c.loss.entropy_coef = coef;
        c.loss.enable_entropy = true;
    }
    if flags.format_reward {
        c.rollout.reward_mode = RewardMode::Format;
    }
    if let Some(label) = &flags.label_override {
        c.label_override = Some(label.clone());
    }
    if let Some(p) = flags.label_error_rate {
        c.label_error_rate = p;
    }
    c.validate()?;
    Ok(c)
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// 1-based rollout step.
    pub step: usize,
    pub train_accuracy: f64,
    pub reward_mean: f64,
    /// Loss components averaged over the step's mini-batches, measured
    /// before each update.
    pub pg_loss: f64,
    pub kl_loss: f64,
    pub entropy_loss: f64,
    pub total_loss: f64,
    pub mean_response_length: f64,
    pub boxed_ratio: f64,
    pub heldout_accuracy: Option<f64>,
    pub heldout_pass_n: Option<f64>,
    pub checkpoint: Option<String>,
}

pub fn save_metrics(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in records {
        serde_json::to_writer(&mut f, r).map_err(|e| Error::InvalidInput(e.to_string()))?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Applies the label override and the seeded label corruption once.
pub fn prepare_training_data(config: &TrainConfig, dataset: &Dataset) -> Result<Dataset> {
    let mut d = dataset.clone();
    if config.label_error_rate > 0.0 {
        let mut rng = substream(config.seed, "label-noise", &[]);
        for ex in d.examples_mut() {
            if rand::Rng::gen_bool(&mut rng, config.label_error_rate) {
                ex.label = perturb_label(&ex.label, &mut rng)?;
            }
        }
    }
    if let Some(label) = &config.label_override {
        d.examples_mut()[0].label = label.clone();
    }
    Ok(d)
}

/// Training state that can be stepped, checkpointed and resumed.
pub struct Trainer {
    config: TrainConfig,
    vocab: Vocab,
    data: Dataset,
    params: PolicyParams,
    reference: PolicyParams,
    optimizer: AdamW,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, dataset: &Dataset, initial: &PolicyParams) -> Result<Self> {
        config.validate()?;
        let vocab = Vocab::standard();
        if initial.dims().vocab != vocab.len() {
            return Err(Error::Config(format!(
                "policy vocabulary size {} does not match the toy vocabulary ({})",
                initial.dims().vocab,
                vocab.len()
            )));
        }
        let data = prepare_training_data(&config, dataset)?;
        Ok(Self {
            optimizer: AdamW::new(initial.len()),
            reference: snapshot_policy(initial),
            params: initial.clone(),
            config,
            vocab,
            data,
            step: 0,
        })
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(config: TrainConfig, dataset: &Dataset, checkpoint: &Checkpoint) -> Result<Self> {
        let state = checkpoint
            .state
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no trainer state".into()))?;
        let mut t = Self::new(config, dataset, &checkpoint.params)?;
        t.reference = state.reference.clone();
        t.optimizer = state.optimizer.clone();
        t.step = usize::try_from(state.step).map_err(|_| Error::Checkpoint("step out of range".into()))?;
        if t.step > t.config.steps {
            return Err(Error::Checkpoint(format!(
                "checkpoint is at step {} but the run has only {} steps",
                t.step, t.config.steps
            )));
        }
        Ok(t)
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn reference(&self) -> &PolicyParams {
        &self.reference
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Training data after label override and corruption.
    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.steps
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            state: Some(TrainerState {
                step: self.step as u64,
                optimizer: self.optimizer.clone(),
                reference: self.reference.clone(),
            }),
        }
    }

    /// Runs one rollout step and its mini-batch updates. Group accuracies
    /// are added to `history` under the current step index when given.
    pub fn step(&mut self, history: Option<(&mut AccuracyHistory, usize)>) -> Result<MetricsRecord> {
        let cfg = &self.config;
        let step = self.step as u64;
        let old = snapshot_policy(&self.params);
        let batch = build_batch(&self.data, cfg.rollout.batch_size, &mut substream(cfg.seed, "batch", &[step]));
        let groups = rollout_step(&old, &batch, &cfg.rollout, &self.vocab, cfg.seed, step)?;
        if let Some((h, epoch)) = history {
            h.record_groups(epoch, &groups);
        }

        let mut samples = 0usize;
        let mut reward_sum = 0.0;
        let mut length_sum = 0usize;
        let mut boxed = 0usize;
        for g in &groups {
            for (r, &reward) in g.responses.iter().zip(&g.rewards) {
                samples += 1;
                reward_sum += reward;
                length_sum += r.len();
                if format_reward(&self.vocab.render_response(&r.ids)) == 1.0 {
                    boxed += 1;
                }
            }
        }
        let correct: usize = groups.iter().flat_map(|g| &g.rewards).filter(|&&r| r == 1.0).count();

        let shard = groups.len() / cfg.mini_batches_per_rollout;
        let mut parts_sum = [0.0; 4];
        for chunk in groups.chunks(shard) {
            let (parts, grad) = loss_gradients(&self.params, chunk, &self.reference, &cfg.loss)?;
            parts_sum[0] += parts.pg;
            parts_sum[1] += parts.kl;
            parts_sum[2] += parts.entropy;
            parts_sum[3] += crate::loss::total_loss(&parts, &cfg.loss);
            optimizer_step(
                &mut self.params,
                &grad,
                cfg.learning_rate,
                cfg.weight_decay,
                cfg.enable_weight_decay,
                &mut self.optimizer,
            )?;
        }
        let n_mb = cfg.mini_batches_per_rollout as f64;
        self.step += 1;
        Ok(MetricsRecord {
            step: self.step,
            train_accuracy: correct as f64 / samples as f64,
            reward_mean: reward_sum / samples as f64,
            pg_loss: parts_sum[0] / n_mb,
            kl_loss: parts_sum[1] / n_mb,
            entropy_loss: parts_sum[2] / n_mb,
            total_loss: parts_sum[3] / n_mb,
            mean_response_length: length_sum as f64 / samples as f64,
            boxed_ratio: boxed as f64 / samples as f64,
            heldout_accuracy: None,
            heldout_pass_n: None,
            checkpoint: None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub metrics: Vec<MetricsRecord>,
    pub checkpoints: Vec<PathBuf>,
    /// Held-out pass@1 of the policy before the first update, if scheduled.
    pub initial_heldout: Option<f64>,
    /// Per-example training accuracy, bucketed into dataset epochs.
    pub history: AccuracyHistory,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    pub heldout: Option<&'a Dataset>,
    /// Where checkpoints go; `None` keeps everything in memory.
    pub checkpoint_dir: Option<&'a Path>,
}

/// Trains from `initial` for `config.steps` steps.
pub fn train(config: &TrainConfig, dataset: &Dataset, initial: &PolicyParams, opts: &RunOptions) -> Result<TrainOutcome> {
    let trainer = Trainer::new(config.clone(), dataset, initial)?;
    run_trainer(trainer, opts)
}

/// Dataset epoch that rollout step `step` (0-based) falls in.
pub fn epoch_of_step(step: usize, batch_size: usize, dataset_len: usize) -> usize {
    step * batch_size / dataset_len
}

/// Steps `trainer` to completion, evaluating and checkpointing on schedule.
pub fn run_trainer(mut trainer: Trainer, opts: &RunOptions) -> Result<TrainOutcome> {
    let vocab = Vocab::standard();
    let schedule = trainer.config.heldout.clone();
    let heldout_eval = |p: &PolicyParams| -> Result<Option<(f64, f64)>> {
        match (&schedule, opts.heldout) {
            (Some(s), Some(d)) => {
                let r = evaluate(p, d, &vocab, &s.eval)?;
                Ok(Some((r.overall.pass1_avg_k, r.overall.pass_n)))
            }
            _ => Ok(None),
        }
    };
    let initial_heldout = heldout_eval(&trainer.params)?.map(|(a, _)| a);
    if let Some(dir) = opts.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }

    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    let mut history = AccuracyHistory::new();
    while !trainer.is_done() {
        let epoch = epoch_of_step(trainer.step, trainer.config.rollout.batch_size, trainer.data.len());
        let mut rec = trainer.step(Some((&mut history, epoch)))?;
        let last = trainer.is_done();
        if let Some(s) = &schedule {
            if rec.step % s.every == 0 || last {
                if let Some((acc, pass_n)) = heldout_eval(&trainer.params)? {
                    rec.heldout_accuracy = Some(acc);
                    rec.heldout_pass_n = Some(pass_n);
                }
            }
        }
        let every = trainer.config.checkpoint_every;
        if let Some(dir) = opts.checkpoint_dir {
            if (every > 0 && rec.step % every == 0) || last {
                let name = format!("step-{:05}.ckpt", rec.step);
                let path = dir.join(&name);
                trainer.checkpoint().save(&path)?;
                rec.checkpoint = Some(name);
                checkpoints.push(path);
            }
        }
        metrics.push(rec);
    }
    Ok(TrainOutcome { params: trainer.params, metrics, checkpoints, initial_heldout, history })
}

/// Full-dataset RLVR for `epochs` epochs. Each step draws the whole dataset,
/// so step `e` is epoch `e` of the returned history.
pub fn record_history(config: &TrainConfig, dataset: &Dataset, initial: &PolicyParams, epochs: usize) -> Result<TrainOutcome> {
    let mut cfg = config.clone();
    cfg.rollout.batch_size = dataset.len();
    cfg.steps = epochs;
    cfg.heldout = None;
    train(&cfg, dataset, initial, &RunOptions::default())
}
