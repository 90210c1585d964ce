//! Losses, optimizers, reproducible training, transfer learning and the
//! ablation runner.
//!
//! A training step builds one graph per batch element (the batch dimension
//! stays 1), evaluates them in parallel, then reduces gradients in slot
//! order. The reduction order is fixed, so results are bit-identical for
//! any thread count. All randomness (batch sampling, augmentation draws)
//! derives from the config seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Node;
use crate::config::KvConfig;
use crate::datasynth::{augment, sample_frames, AugmentationSpec, Sample};
use crate::error::{Result, RfpmError};
use crate::flownet::{
    estimate, estimate_pair, flow_to_full_res, init_model_params, load_checkpoint_into,
    EstimatorConfig,
};
use crate::metrics_io::{evaluate, EvalResult};
use crate::params::ParamStore;
use crate::tensor::{avg_pool2x2, Tensor};
use crate::Tape;

/// Robust loss exponent ((EPE^2 + eps^2)^q).
pub const LOSS_EXPONENT: f64 = 0.4;
/// Robust loss epsilon.
pub const LOSS_EPSILON: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam_default() -> Self {
        Self::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Training hyperparameters.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiply the learning rate by `lr_decay_factor` every
    /// `lr_decay_step` iterations; 0 disables decay.
    pub lr_decay_step: usize,
    pub lr_decay_factor: f64,
    /// Per-prediction-level loss weights, coarsest first.
    pub level_weights: Vec<f64>,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub augmentation: AugmentationSpec,
    /// Evaluate the held-out split every this many iterations.
    pub eval_every: usize,
    pub holdout_fraction: f64,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 4,
            lr: 2e-3,
            lr_decay_step: 0,
            lr_decay_factor: 0.5,
            level_weights: vec![0.32, 0.08, 0.02],
            optimizer: OptimizerKind::adam_default(),
            seed: 42,
            augmentation: AugmentationSpec::default(),
            eval_every: 100,
            holdout_fraction: 0.2,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, est: &EstimatorConfig) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(RfpmError::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(RfpmError::Config("batch size must be positive".into()));
        }
        if self.level_weights.len() != est.pred_levels.len() {
            return Err(RfpmError::Config(format!(
                "{} level weights for {} prediction levels",
                self.level_weights.len(),
                est.pred_levels.len()
            )));
        }
        if self.eval_every == 0 {
            return Err(RfpmError::Config("eval_every must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(RfpmError::Config("holdout_fraction must be in [0,1)".into()));
        }
        self.augmentation.validate()
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.iterations = kv.get_or("iters", cfg.iterations)?;
        cfg.batch_size = kv.get_or("batch", cfg.batch_size)?;
        cfg.lr = kv.get_or("lr", cfg.lr)?;
        cfg.lr_decay_step = kv.get_or("lr_decay_step", cfg.lr_decay_step)?;
        cfg.lr_decay_factor = kv.get_or("lr_decay_factor", cfg.lr_decay_factor)?;
        if let Some(w) = kv.get_list::<f64>("level_weights")? {
            cfg.level_weights = w;
        }
        match kv.raw("optimizer") {
            None | Some("adam") => {
                cfg.optimizer = OptimizerKind::Adam {
                    beta1: kv.get_or("adam_beta1", 0.9)?,
                    beta2: kv.get_or("adam_beta2", 0.999)?,
                    eps: kv.get_or("adam_eps", 1e-8)?,
                };
            }
            Some("sgd") => cfg.optimizer = OptimizerKind::Sgd,
            Some(other) => {
                return Err(RfpmError::Config(format!("unknown optimizer '{other}'")))
            }
        }
        cfg.seed = kv.get_or("seed", cfg.seed)?;
        cfg.eval_every = kv.get_or("eval_every", cfg.eval_every)?;
        cfg.holdout_fraction = kv.get_or("holdout_fraction", cfg.holdout_fraction)?;
        cfg.threads = kv.get_or("threads", cfg.threads)?;
        cfg.augmentation.crop = kv.get_or("crop", cfg.augmentation.crop)?;
        cfg.augmentation.flip_prob = kv.get_or("flip_prob", cfg.augmentation.flip_prob)?;
        if let Some(b) = kv.get_list::<f64>("brightness")? {
            if b.len() == 2 {
                cfg.augmentation.brightness = (b[0], b[1]);
            }
        }
        if let Some(c) = kv.get_list::<f64>("contrast")? {
            if c.len() == 2 {
                cfg.augmentation.contrast = (c[0], c[1]);
            }
        }
        cfg.augmentation.noise_sigma = kv.get_or("noise_sigma", cfg.augmentation.noise_sigma)?;
        cfg.augmentation.ada_probability = kv.get_or("ada", cfg.augmentation.ada_probability)?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

/// Downsamples a full-resolution ground-truth flow to pyramid level `level`
/// (2x2 average pooling and magnitude halving per octave).
pub fn downsample_gt(gt: &Tensor, level: usize) -> Result<Tensor> {
    let mut cur = gt.clone();
    for _ in 0..level {
        cur = avg_pool2x2(&cur)?;
        for v in cur.data_mut().iter_mut() {
            *v *= 0.5;
        }
    }
    Ok(cur)
}

/// Multi-scale robust flow loss:
/// `sum_l w_l * mean((EPE_l^2 + eps^2)^q)` against the per-level
/// downsampled ground truth.
pub fn multiscale_loss(
    flows: &[Node],
    gt_full: &Tensor,
    pred_levels: &[usize],
    weights: &[f64],
) -> Result<Node> {
    if flows.len() != weights.len() || flows.len() != pred_levels.len() {
        return Err(RfpmError::Shape(format!(
            "{} flows, {} weights, {} levels",
            flows.len(),
            weights.len(),
            pred_levels.len()
        )));
    }
    let tape = flows[0].tape_handle();
    let mut total: Option<Node> = None;
    for ((flow, &level), &w) in flows.iter().zip(pred_levels).zip(weights) {
        let gt_l = tape.leaf(downsample_gt(gt_full, level)?);
        let diff = flow.sub(&gt_l)?;
        let epe2 = diff.mul(&diff)?.sum_channels()?;
        let robust = epe2.add_scalar(LOSS_EPSILON * LOSS_EPSILON).powf(LOSS_EXPONENT);
        let term = robust.mean_all().scale(w);
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    Ok(total.unwrap())
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

/// First/second moment state for Adam; empty until the first step.
#[derive(Clone, Debug, Default)]
pub struct OptState {
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

/// Applies one optimizer update in place. Parameter names without a
/// gradient entry (frozen or unreached) stay untouched.
pub fn optimizer_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptState,
    kind: OptimizerKind,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(RfpmError::Numeric(format!(
                "non-finite gradient for {name}"
            )));
        }
    }
    state.step += 1;
    match kind {
        OptimizerKind::Sgd => {
            for (name, g) in grads {
                let p = params.get_mut(name)?;
                for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *pv -= lr * gv;
                }
            }
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            let t = state.step as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            for (name, g) in grads {
                let m = state
                    .m
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(g.shape()));
                let v = state
                    .v
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(g.shape()));
                let p = params.get_mut(name)?;
                for i in 0..g.numel() {
                    let gv = g.data()[i];
                    let mv = beta1 * m.data()[i] + (1.0 - beta1) * gv;
                    let vv = beta2 * v.data()[i] + (1.0 - beta2) * gv * gv;
                    m.data_mut()[i] = mv;
                    v.data_mut()[i] = vv;
                    let mhat = mv / bc1;
                    let vhat = vv / bc2;
                    p.data_mut()[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

/// Predicts full-resolution flow for one sample without augmentation.
pub fn predict_flow(
    params: &ParamStore,
    est: &EstimatorConfig,
    sample: &Sample,
) -> Result<Tensor> {
    let tape = Tape::new();
    let nodes = params.leaves(&tape, |_| false);
    let (t1, t2) = sample_frames(sample);
    let flows = estimate_pair(&tape.leaf(t1), &tape.leaf(t2), &nodes, est)?;
    let full = flow_to_full_res(flows.last().unwrap(), est.finest_level())?;
    Ok(full.value())
}

fn combine(results: &[EvalResult]) -> Result<EvalResult> {
    let total: usize = results.iter().map(|r| r.count).sum();
    if total == 0 {
        return Err(RfpmError::Degenerate("evaluation over zero pixels".into()));
    }
    let aepe = results.iter().map(|r| r.aepe * r.count as f64).sum::<f64>() / total as f64;
    let f1 = results.iter().map(|r| r.f1_all * r.count as f64).sum::<f64>() / total as f64;
    Ok(EvalResult {
        aepe,
        f1_all: f1,
        count: total,
    })
}

/// Pixel-weighted metrics of the model over `samples`.
pub fn eval_model(
    params: &ParamStore,
    est: &EstimatorConfig,
    samples: &[Sample],
    threads: usize,
) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(RfpmError::Degenerate("evaluation over zero samples".into()));
    }
    let pool = make_pool(threads)?;
    let per: Result<Vec<EvalResult>> = pool.install(|| {
        samples
            .par_iter()
            .map(|s| {
                let pred = predict_flow(params, est, s)?;
                evaluate(&pred, &s.flow, &s.valid())
            })
            .collect()
    });
    combine(&per?)
}

/// Metrics of always-zero flow, the trivial baseline.
pub fn zero_flow_baseline(samples: &[Sample]) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(RfpmError::Degenerate("evaluation over zero samples".into()));
    }
    let per: Result<Vec<EvalResult>> = samples
        .iter()
        .map(|s| {
            let zero = Tensor::zeros(&[1, 2, s.height(), s.width()]);
            evaluate(&zero, &s.flow, &s.valid())
        })
        .collect();
    combine(&per?)
}

fn make_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| RfpmError::Config(format!("thread pool: {e}")))
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

/// One row of the metric history CSV.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub iteration: usize,
    pub loss: f64,
    pub aepe: f64,
    pub f1_all: f64,
}

/// `iteration,loss,aepe,f1_all` CSV text.
pub fn history_csv(history: &[HistoryRow]) -> String {
    let mut out = String::from("iteration,loss,aepe,f1_all\n");
    for row in history {
        let _ = writeln!(out, "{},{},{},{}", row.iteration, row.loss, row.aepe, row.f1_all);
    }
    out
}

pub struct TrainOutcome {
    pub params: ParamStore,
    pub est: EstimatorConfig,
    /// Held-out metrics sampled every `eval_every` iterations.
    pub history: Vec<HistoryRow>,
    /// Per-iteration training loss.
    pub loss_curve: Vec<f64>,
    pub final_eval: EvalResult,
    /// Held-out metrics restricted to thin-structure scenes (when present).
    pub final_eval_thin: Option<EvalResult>,
    pub zero_flow: EvalResult,
    /// Training aborted on a non-finite loss; `params` is the last good state.
    pub diverged: bool,
}

/// Deterministic train/holdout split: the last `ceil(fraction*n)` samples
/// are held out.
pub fn split_dataset(samples: &[Sample], fraction: f64) -> (&[Sample], &[Sample]) {
    let n_hold = ((samples.len() as f64) * fraction).ceil() as usize;
    let n_hold = n_hold.min(samples.len().saturating_sub(1));
    samples.split_at(samples.len() - n_hold)
}

fn splitmix(seed: u64, i: u64) -> u64 {
    let mut z = seed.wrapping_add(i.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trains a model; `init` overrides the seeded initialization (used by
/// transfer), and parameters whose name starts with any of
/// `freeze_prefixes` receive no updates during the first `freeze_iters`
/// iterations.
pub fn train_with(
    est: &EstimatorConfig,
    cfg: &TrainConfig,
    dataset: &[Sample],
    init: Option<ParamStore>,
    freeze_prefixes: &[String],
    freeze_iters: usize,
) -> Result<TrainOutcome> {
    est.validate()?;
    cfg.validate(est)?;
    if dataset.is_empty() {
        return Err(RfpmError::Degenerate("empty dataset".into()));
    }
    let (train_set, holdout) = split_dataset(dataset, cfg.holdout_fraction);
    if train_set.is_empty() || holdout.is_empty() {
        return Err(RfpmError::Degenerate(
            "dataset too small for the train/holdout split".into(),
        ));
    }
    let mut params = match init {
        Some(p) => p,
        None => init_model_params(est)?,
    };
    let zero_flow = zero_flow_baseline(holdout)?;
    let ncols = est.rfpm.columns.len();
    let pool = make_pool(cfg.threads)?;
    let mut opt_state = OptState::default();
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();
    let mut loss_curve = Vec::with_capacity(cfg.iterations);
    let mut diverged = false;

    for iter in 0..cfg.iterations {
        let frozen_now = iter < freeze_iters && !freeze_prefixes.is_empty();
        let indices: Vec<usize> = (0..cfg.batch_size)
            .map(|_| batch_rng.gen_range(0..train_set.len()))
            .collect();
        let aug_seeds: Vec<u64> = (0..cfg.batch_size)
            .map(|slot| splitmix(cfg.seed ^ 0xDA7A_5EED, (iter * cfg.batch_size + slot) as u64))
            .collect();

        let trainable = |name: &str| {
            !(frozen_now && freeze_prefixes.iter().any(|p| name.starts_with(p.as_str())))
        };
        let results: Result<Vec<(f64, BTreeMap<String, Tensor>)>> = pool.install(|| {
            indices
                .par_iter()
                .zip(&aug_seeds)
                .map(|(&idx, &aug_seed)| {
                    let sample = &train_set[idx];
                    let mut rng = ChaCha8Rng::seed_from_u64(aug_seed);
                    let aug = augment(sample, &cfg.augmentation, ncols, &mut rng)?;
                    let tape = Tape::new();
                    let nodes = params.leaves(&tape, trainable);
                    let frames: Vec<(Node, Node)> = aug
                        .frames
                        .iter()
                        .map(|(a, b)| (tape.leaf(a.clone()), tape.leaf(b.clone())))
                        .collect();
                    let flows = estimate(&frames, &nodes, est)?;
                    let loss = multiscale_loss(
                        &flows,
                        &aug.flow,
                        &est.pred_levels,
                        &cfg.level_weights,
                    )?;
                    loss.backward()?;
                    Ok((loss.value().data()[0], nodes.grads()))
                })
                .collect()
        });
        let results = results?;

        // ordered reduction over batch slots keeps training bit-reproducible
        let mut mean_loss = 0.0;
        let mut grad_acc: BTreeMap<String, Tensor> = BTreeMap::new();
        for (loss, grads) in &results {
            mean_loss += loss;
            for (name, g) in grads {
                match grad_acc.get_mut(name) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        grad_acc.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        mean_loss /= cfg.batch_size as f64;
        let scale = 1.0 / cfg.batch_size as f64;
        for g in grad_acc.values_mut() {
            for v in g.data_mut().iter_mut() {
                *v *= scale;
            }
        }
        loss_curve.push(mean_loss);

        if !mean_loss.is_finite() {
            diverged = true;
            break;
        }

        let lr = if cfg.lr_decay_step > 0 {
            cfg.lr * cfg.lr_decay_factor.powi((iter / cfg.lr_decay_step) as i32)
        } else {
            cfg.lr
        };
        optimizer_step(&mut params, &grad_acc, &mut opt_state, cfg.optimizer, lr)?;

        if (iter + 1) % cfg.eval_every == 0 || iter + 1 == cfg.iterations {
            let ev = eval_model(&params, est, holdout, cfg.threads)?;
            history.push(HistoryRow {
                iteration: iter + 1,
                loss: mean_loss,
                aepe: ev.aepe,
                f1_all: ev.f1_all,
            });
        }
    }

    let final_eval = eval_model(&params, est, holdout, cfg.threads)?;
    let thin: Vec<Sample> = holdout.iter().filter(|s| s.thin).cloned().collect();
    let final_eval_thin = if thin.is_empty() {
        None
    } else {
        Some(eval_model(&params, est, &thin, cfg.threads)?)
    };
    Ok(TrainOutcome {
        params,
        est: est.clone(),
        history,
        loss_curve,
        final_eval,
        final_eval_thin,
        zero_flow,
        diverged,
    })
}

/// From-scratch training with seeded initialization.
pub fn train(est: &EstimatorConfig, cfg: &TrainConfig, dataset: &[Sample]) -> Result<TrainOutcome> {
    train_with(est, cfg, dataset, None, &[], 0)
}

// ---------------------------------------------------------------------------
// transfer learning
// ---------------------------------------------------------------------------

/// Transfer-learning description: extend a trained base checkpoint with
/// fresh columns and fine-tune.
#[derive(Clone, Debug)]
pub struct TransferPlan {
    pub base_checkpoint: std::path::PathBuf,
    /// Target (larger) model; its seed initializes the added parameters.
    pub target_est: EstimatorConfig,
    pub fine_tune: TrainConfig,
    /// Name prefixes frozen for the first `freeze_iters` iterations.
    pub freeze_prefixes: Vec<String>,
    pub freeze_iters: usize,
}

/// Initializes the target model, overwrites the base subset from the
/// checkpoint and fine-tunes. The checkpoint's names must be a strict
/// subset of the target model's.
pub fn transfer(plan: &TransferPlan, dataset: &[Sample]) -> Result<TrainOutcome> {
    let mut params = init_model_params(&plan.target_est)?;
    let loaded = load_checkpoint_into(&mut params, &plan.base_checkpoint)?;
    if loaded >= params.len() {
        return Err(RfpmError::Load(format!(
            "checkpoint covers all {loaded} target parameters; nothing is transferred"
        )));
    }
    train_with(
        &plan.target_est,
        &plan.fine_tune,
        dataset,
        Some(params),
        &plan.freeze_prefixes,
        plan.freeze_iters,
    )
}

/// First history iteration whose held-out AEPE is at or below `target`.
pub fn iterations_to_reach(history: &[HistoryRow], target: f64) -> Option<usize> {
    history
        .iter()
        .find(|row| row.aepe <= target)
        .map(|row| row.iteration)
}

// ---------------------------------------------------------------------------
// ablation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct AblateRow {
    pub name: String,
    pub param_count: usize,
    pub aepe: f64,
    pub f1_all: f64,
    pub aepe_thin: f64,
    pub seeds: usize,
}

/// Trains every named config with identical data and the given seeds
/// (applied to both parameter init and training), averaging final metrics.
pub fn ablate(
    grid: &[(String, EstimatorConfig)],
    shared: &TrainConfig,
    dataset: &[Sample],
    seeds: &[u64],
) -> Result<Vec<AblateRow>> {
    if seeds.is_empty() {
        return Err(RfpmError::Parameter("ablate needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for (name, est) in grid {
        let mut aepe = 0.0;
        let mut f1 = 0.0;
        let mut thin = 0.0;
        let mut param_count = 0;
        for &seed in seeds {
            let mut est_s = est.clone();
            est_s.rfpm.seed = seed;
            let mut cfg = shared.clone();
            cfg.seed = seed;
            let out = train(&est_s, &cfg, dataset)?;
            param_count = out.params.numel();
            aepe += out.final_eval.aepe;
            f1 += out.final_eval.f1_all;
            thin += out.final_eval_thin.map(|e| e.aepe).unwrap_or(f64::NAN);
        }
        let n = seeds.len() as f64;
        rows.push(AblateRow {
            name: name.clone(),
            param_count,
            aepe: aepe / n,
            f1_all: f1 / n,
            aepe_thin: thin / n,
            seeds: seeds.len(),
        });
    }
    Ok(rows)
}

/// Aligned plain-text results table.
pub fn ablate_table(rows: &[AblateRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<24} {:>10} {:>10} {:>10} {:>12} {:>6}",
        "config", "params", "aepe", "f1_all", "aepe_thin", "seeds"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<24} {:>10} {:>10.4} {:>10.4} {:>12.4} {:>6}",
            r.name, r.param_count, r.aepe, r.f1_all, r.aepe_thin, r.seeds
        );
    }
    out
}

/// CSV form of the results table.
pub fn ablate_csv(rows: &[AblateRow]) -> String {
    let mut out = String::from("config,params,aepe,f1_all,aepe_thin,seeds\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.name, r.param_count, r.aepe, r.f1_all, r.aepe_thin, r.seeds
        );
    }
    out
}

/// The standard ablation grids: column counts with and without masks, mask
/// level placements, and downsampler kind strings.
pub fn ablation_grid(axis: &str, seed: u64) -> Result<Vec<(String, EstimatorConfig)>> {
    use crate::pyramid::RfpmConfig;
    let mk = |kinds: &str, masks: &[usize]| -> Result<EstimatorConfig> {
        Ok(EstimatorConfig::new(RfpmConfig::toy(kinds, masks, seed)?))
    };
    let grid = match axis {
        "columns" => vec![
            ("L".to_string(), mk("W", &[])?),
            ("L/M".to_string(), mk("W/R", &[])?),
            ("L/M+mask".to_string(), mk("W/R", &[1, 2])?),
            ("L/M/R".to_string(), mk("W/R/W", &[])?),
            ("L/M/R+mask".to_string(), mk("W/R/W", &[1, 2])?),
        ],
        "mask-levels" => vec![
            ("level1".to_string(), mk("W/R/W", &[1])?),
            ("level2".to_string(), mk("W/R/W", &[2])?),
            ("level3".to_string(), mk("W/R/W", &[3])?),
            ("level1+2".to_string(), mk("W/R/W", &[1, 2])?),
            ("level1+2+3".to_string(), mk("W/R/W", &[1, 2, 3])?),
        ],
        "kinds" => vec![
            ("W/M/M+mask".to_string(), mk("W/M/M", &[1, 2])?),
            ("W/M/R+mask".to_string(), mk("W/M/R", &[1, 2])?),
            ("W/R/R+mask".to_string(), mk("W/R/R", &[1, 2])?),
            ("W/R/W+mask".to_string(), mk("W/R/W", &[1, 2])?),
        ],
        "headline" => vec![
            ("W-baseline".to_string(), mk("W", &[])?),
            ("W/R/W+mask".to_string(), mk("W/R/W", &[1, 2])?),
        ],
        other => {
            return Err(RfpmError::Parameter(format!(
                "unknown ablation axis '{other}' (columns|mask-levels|kinds|headline)"
            )))
        }
    };
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasynth::GenSpec;
    use crate::pyramid::RfpmConfig;

    fn tiny_est(kinds: &str, masks: &[usize], seed: u64) -> EstimatorConfig {
        let mut est = EstimatorConfig::new(
            RfpmConfig::with_channels(kinds, &[6, 8], masks, seed).unwrap(),
        );
        est.pred_levels = vec![2, 1];
        est
    }

    fn tiny_cfg(iterations: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            iterations,
            batch_size: 2,
            lr: 1e-3,
            level_weights: vec![0.32, 0.08],
            seed,
            augmentation: AugmentationSpec::identity(),
            eval_every: 2,
            holdout_fraction: 0.25,
            threads: 1,
            ..TrainConfig::default()
        }
    }

    fn tiny_data(count: usize) -> Vec<Sample> {
        crate::datasynth::gen_dataset(&GenSpec {
            count,
            size: 16,
            seed: 77,
            thin_fraction: 0.5,
            max_speed: 3,
        })
        .unwrap()
    }

    #[test]
    fn loss_minimum_at_ground_truth() {
        let gt = Tensor::rand_uniform(
            &[1, 2, 8, 8],
            2.0,
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        let tape = Tape::new();
        let perfect_l1 = tape.leaf(downsample_gt(&gt, 1).unwrap());
        let loss = multiscale_loss(&[perfect_l1.clone()], &gt, &[1], &[0.5]).unwrap();
        let expect = 0.5 * (LOSS_EPSILON * LOSS_EPSILON).powf(LOSS_EXPONENT);
        assert!((loss.value().data()[0] - expect).abs() < 1e-12);

        // any perturbation increases the loss
        let noisy = perfect_l1.add_scalar(0.3);
        let worse = multiscale_loss(&[noisy], &gt, &[1], &[0.5]).unwrap();
        assert!(worse.value().data()[0] > loss.value().data()[0]);
    }

    #[test]
    fn loss_doubles_with_weights() {
        let gt = Tensor::rand_uniform(
            &[1, 2, 8, 8],
            2.0,
            &mut ChaCha8Rng::seed_from_u64(2),
        );
        let tape = Tape::new();
        let pred = tape.leaf(Tensor::rand_uniform(
            &[1, 2, 4, 4],
            2.0,
            &mut ChaCha8Rng::seed_from_u64(3),
        ));
        let a = multiscale_loss(&[pred.clone()], &gt, &[1], &[0.3]).unwrap();
        let b = multiscale_loss(&[pred], &gt, &[1], &[0.6]).unwrap();
        assert!((2.0 * a.value().data()[0] - b.value().data()[0]).abs() < 1e-12);
    }

    #[test]
    fn loss_grad_check() {
        let gt = Tensor::rand_uniform(
            &[1, 2, 8, 8],
            2.0,
            &mut ChaCha8Rng::seed_from_u64(4),
        );
        let pred2 = Tensor::rand_uniform(&[1, 2, 2, 2], 2.0, &mut ChaCha8Rng::seed_from_u64(5));
        let pred1 = Tensor::rand_uniform(&[1, 2, 4, 4], 2.0, &mut ChaCha8Rng::seed_from_u64(6));
        let err = crate::autodiff::grad_check(
            &|p: &[Node]| multiscale_loss(&p.to_vec(), &gt, &[2, 1], &[0.32, 0.08]),
            &[pred2, pred1],
            1e-5,
            25,
            7,
        )
        .unwrap();
        assert!(err < 1e-4, "loss grad err {err}");
    }

    #[test]
    fn sgd_examples() {
        let mut params = ParamStore::new();
        params.insert("p", Tensor::zeros(&[1])).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::ones(&[1]));
        let mut state = OptState::default();
        optimizer_step(&mut params, &grads, &mut state, OptimizerKind::Sgd, 0.1).unwrap();
        assert!((params.get("p").unwrap().data()[0] + 0.1).abs() < 1e-15);
        optimizer_step(&mut params, &grads, &mut state, OptimizerKind::Sgd, 0.1).unwrap();
        assert!((params.get("p").unwrap().data()[0] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_grad_keeps_params() {
        let mut params = ParamStore::new();
        params.insert("p", Tensor::full(&[2], 1.5)).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::zeros(&[2]));
        let mut state = OptState::default();
        optimizer_step(
            &mut params,
            &grads,
            &mut state,
            OptimizerKind::adam_default(),
            0.5,
        )
        .unwrap();
        assert_eq!(params.get("p").unwrap().data(), &[1.5, 1.5]);
    }

    #[test]
    fn non_finite_gradient_is_numeric_error() {
        let mut params = ParamStore::new();
        params.insert("p", Tensor::zeros(&[1])).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), Tensor::full(&[1], f64::NAN));
        let mut state = OptState::default();
        assert!(matches!(
            optimizer_step(&mut params, &grads, &mut state, OptimizerKind::Sgd, 0.1),
            Err(RfpmError::Numeric(_))
        ));
    }

    #[test]
    fn zero_iterations_keeps_initialization() {
        let est = tiny_est("W", &[], 8);
        let cfg = tiny_cfg(0, 8);
        let data = tiny_data(8);
        let out = train(&est, &cfg, &data).unwrap();
        let reference = init_model_params(&est).unwrap();
        for (name, t) in reference.iter() {
            assert_eq!(out.params.get(name).unwrap(), t, "{name}");
        }
        assert!(out.history.is_empty());
    }

    #[test]
    fn same_seed_same_history() {
        let est = tiny_est("W/R", &[1], 9);
        let cfg = tiny_cfg(4, 9);
        let data = tiny_data(8);
        let a = train(&est, &cfg, &data).unwrap();
        let b = train(&est, &cfg, &data).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.loss_curve, b.loss_curve);
        assert_eq!(history_csv(&a.history), history_csv(&b.history));
        for (name, t) in a.params.iter() {
            assert_eq!(b.params.get(name).unwrap(), t);
        }
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let est = tiny_est("W/R", &[1], 10);
        let data = tiny_data(8);
        let mut cfg1 = tiny_cfg(3, 10);
        cfg1.batch_size = 4;
        let mut cfg2 = cfg1.clone();
        cfg2.threads = 2;
        let a = train(&est, &cfg1, &data).unwrap();
        let b = train(&est, &cfg2, &data).unwrap();
        assert_eq!(a.loss_curve, b.loss_curve);
        for (name, t) in a.params.iter() {
            assert_eq!(b.params.get(name).unwrap(), t);
        }
    }

    #[test]
    fn freezing_keeps_parameters_bit_identical() {
        let est = tiny_est("W/R", &[1], 11);
        let cfg = tiny_cfg(3, 11);
        let data = tiny_data(8);
        let init = init_model_params(&est).unwrap();
        let out = train_with(
            &est,
            &cfg,
            &data,
            Some(init.clone()),
            &["pyr.c0.".to_string()],
            usize::MAX,
        )
        .unwrap();
        for (name, t) in init.iter() {
            if name.starts_with("pyr.c0.") {
                assert_eq!(out.params.get(name).unwrap(), t, "{name} changed");
            }
        }
        // at least one unfrozen parameter moved
        assert!(init
            .iter()
            .any(|(n, t)| !n.starts_with("pyr.c0.") && out.params.get(n).unwrap() != t));
    }

    #[test]
    fn transfer_zero_iterations_keeps_base_bits() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_data(8);
        let base_est = tiny_est("W", &[], 12);
        let base_cfg = tiny_cfg(2, 12);
        let base = train(&base_est, &base_cfg, &data).unwrap();
        let ckpt = dir.path().join("base.ckpt");
        crate::flownet::save_checkpoint(&ckpt, &base.params, &base_est).unwrap();

        let plan = TransferPlan {
            base_checkpoint: ckpt,
            target_est: tiny_est("W/R", &[1], 13),
            fine_tune: tiny_cfg(0, 13),
            freeze_prefixes: vec![],
            freeze_iters: 0,
        };
        let out = transfer(&plan, &data).unwrap();
        for (name, t) in base.params.iter() {
            assert_eq!(out.params.get(name).unwrap(), t, "{name}");
        }
    }

    #[test]
    fn ablate_single_config_row_and_determinism() {
        let data = tiny_data(8);
        let grid = vec![("tiny".to_string(), tiny_est("W", &[], 14))];
        let cfg = tiny_cfg(2, 14);
        let rows1 = ablate(&grid, &cfg, &data, &[1]).unwrap();
        let rows2 = ablate(&grid, &cfg, &data, &[1]).unwrap();
        assert_eq!(rows1.len(), 1);
        assert_eq!(ablate_csv(&rows1), ablate_csv(&rows2));
        assert!(rows1[0].param_count > 0);
    }

    #[test]
    fn ablation_grids_have_expected_shapes() {
        assert_eq!(ablation_grid("columns", 1).unwrap().len(), 5);
        assert_eq!(ablation_grid("mask-levels", 1).unwrap().len(), 5);
        assert_eq!(ablation_grid("kinds", 1).unwrap().len(), 4);
        assert_eq!(ablation_grid("headline", 1).unwrap().len(), 2);
        assert!(ablation_grid("nope", 1).is_err());
    }

    #[test]
    fn history_csv_format() {
        let rows = vec![HistoryRow {
            iteration: 100,
            loss: 0.5,
            aepe: 1.25,
            f1_all: 10.0,
        }];
        assert_eq!(history_csv(&rows), "iteration,loss,aepe,f1_all\n100,0.5,1.25,10\n");
    }
}
