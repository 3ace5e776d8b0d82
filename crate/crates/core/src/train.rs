//! Optimization loop, ablation variants and hyper-parameter sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{assign_environments, EnvironmentAssignment, KMeansParams};
use crate::error::{IflError, Result};
use crate::eval::{evaluate, MetricsReport};
use crate::loss::{
    cf_backward, l2_backward, ssl_backward, total_loss, Batch, BatchProjection, LossBreakdown, LossParts,
    LossWeights, MaskProbe, StepMasks, MIN_TAU,
};
use crate::model::{augment, augment_with_drop_probs, mask_report, MaskRow, ModelConfig, ModelState};
use crate::rng::{derive_seed, stream, Rng, Stream};
use crate::scalar::Scalar;
use crate::schema::{hex16, positives, Dataset, InteractionRecord, Side, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    /// `beta = 0`.
    NoVariance,
    /// Masks frozen at 1, uniform `p = 0.5` feature dropout, no environments.
    NoMask,
    /// `alpha = 0`.
    NoSsl,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoVariance, Variant::NoMask, Variant::NoSsl];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoVariance => "no_variance",
            Variant::NoMask => "no_mask",
            Variant::NoSsl => "no_ssl",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = IflError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| IflError::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Which epoch's parameters a run returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// Highest validation Recall@`eval_k`.
    Best,
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub tau: f64,
    /// Number of environments.
    #[serde(rename = "C")]
    pub n_envs: usize,
    pub sigma_eps: f64,
    pub recluster_every: usize,
    pub fd_step: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub early_stop_patience: usize,
    /// K of the validation Recall@K used for early stopping.
    pub eval_k: usize,
    pub selection: Selection,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            epochs: 200,
            batch_size: 256,
            alpha: 0.1,
            beta: 0.01,
            lambda: 1e-4,
            tau: 0.5,
            n_envs: 2,
            sigma_eps: 0.5,
            recluster_every: 1,
            fd_step: 1e-3,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
            early_stop_patience: 20,
            eval_k: 20,
            selection: Selection::Best,
            variant: Variant::Full,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(IflError::Config(m));
        for (name, v) in [
            ("lr", self.lr),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda", self.lambda),
            ("sigma_eps", self.sigma_eps),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.n_envs < 1 {
            return bad("C must be at least 1".into());
        }
        if !(self.tau >= MIN_TAU) {
            return bad(format!("tau must be at least {MIN_TAU}, got {}", self.tau));
        }
        if !(self.fd_step > 0.0) {
            return bad(format!("fd_step must be positive, got {}", self.fd_step));
        }
        if self.recluster_every < 1 || self.eval_k < 1 {
            return bad("recluster_every and eval_k must be at least 1".into());
        }
        Ok(())
    }

    pub fn with_variant(&self, v: Variant) -> Self {
        Self {
            variant: v,
            ..self.clone()
        }
    }

    fn frozen_mask(&self) -> bool {
        self.variant == Variant::NoMask
    }

    fn uses_envs(&self) -> bool {
        !self.frozen_mask()
    }

    fn alpha(&self) -> f64 {
        if self.variant == Variant::NoSsl {
            0.0
        } else {
            self.alpha
        }
    }

    fn beta(&self) -> f64 {
        match self.variant {
            Variant::NoVariance | Variant::NoMask => 0.0,
            _ => self.beta,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha(),
            beta: self.beta(),
            lambda: self.lambda,
        }
    }
}

/// Hash of everything that determines a run.
pub fn run_fingerprint(d: &Dataset, model: &ModelConfig, cfg: &TrainConfig) -> String {
    let mut h = Sha256::new();
    h.update(d.fingerprint().as_bytes());
    h.update(serde_json::to_string(model).expect("serializable").as_bytes());
    h.update(serde_json::to_string(cfg).expect("serializable").as_bytes());
    hex16(&h.finalize())
}

// ---------------------------------------------------------------------------
// Optimizers

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
struct Optimizer<T> {
    kind: OptimizerKind,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> Optimizer<T> {
    fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    fn apply(&mut self, state: &mut ModelState<T>, grads: &ModelState<T>, lr: T) {
        let mut g = Vec::new();
        grads.for_each_param(|p| g.extend_from_slice(p));
        let delta: Vec<T> = match self.kind {
            OptimizerKind::Sgd => g.iter().map(|x| lr * *x).collect(),
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = vec![T::zero(); g.len()];
                    self.v = vec![T::zero(); g.len()];
                }
                self.t += 1;
                let (b1, b2) = (T::of(ADAM_B1), T::of(ADAM_B2));
                let c1 = T::one() - b1.powi(self.t);
                let c2 = T::one() - b2.powi(self.t);
                g.iter()
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                    .map(|(x, (m, v))| {
                        *m = b1 * *m + (T::one() - b1) * *x;
                        *v = b2 * *v + (T::one() - b2) * *x * *x;
                        lr * (*m / c1) / ((*v / c2).sqrt() + T::of(ADAM_EPS))
                    })
                    .collect()
            }
        };
        let mut at = 0;
        state.for_each_param_mut(|p| {
            for x in p.iter_mut() {
                *x -= delta[at];
                at += 1;
            }
        });
    }
}

// ---------------------------------------------------------------------------
// One step

/// Owns the model, the optimizer state and the per-step random streams.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub state: ModelState<T>,
    noise: Rng,
    augment: Rng,
    opt: Optimizer<T>,
    skip_variance_grad: bool,
}

/// Where a step sits in the run, for diagnostics.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepPos {
    pub epoch: usize,
    pub batch: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(state: ModelState<T>, cfg: &TrainConfig) -> Self {
        Self {
            noise: stream(cfg.seed, Stream::Noise),
            augment: stream(cfg.seed, Stream::Augment),
            opt: Optimizer::new(cfg.optimizer),
            cfg: cfg.clone(),
            state,
            skip_variance_grad: false,
        }
    }

    /// Never add the variance-penalty gradient to gamma, whatever beta is.
    pub fn skip_variance_grad(mut self, skip: bool) -> Self {
        self.skip_variance_grad = skip;
        self
    }

    fn step_masks(&mut self) -> StepMasks<T> {
        if self.cfg.frozen_mask() {
            return StepMasks::ones(&self.state);
        }
        let sigma = self.state.masks.sigma_eps.as_f64();
        let mut draw = |n: usize| -> Vec<T> {
            if sigma == 0.0 {
                return vec![T::zero(); n];
            }
            let normal = Normal::new(0.0, sigma).expect("valid sigma");
            (0..n).map(|_| T::of(normal.sample(&mut self.noise))).collect()
        };
        let nu = draw(self.state.masks.gamma_u.len());
        let ni = draw(self.state.masks.gamma_i.len());
        StepMasks::from_noise(&self.state, &nu, &ni)
    }

    fn keep_vectors(&mut self, side: Side, n: usize) -> Vec<Vec<T>> {
        let gamma = self.state.masks.gamma(side).to_vec();
        if self.cfg.frozen_mask() {
            let drop = vec![0.5; gamma.len()];
            return (0..n)
                .map(|_| augment_with_drop_probs(&drop, &gamma, &mut self.augment))
                .collect();
        }
        (0..n).map(|_| augment(&gamma, &mut self.augment)).collect()
    }

    /// Gradients of the full objective at the current parameters, without updating.
    pub fn gradients(&mut self, batch: &Batch, n_envs: usize, pos: StepPos) -> Result<(ModelState<T>, LossBreakdown)> {
        let b = batch.len();
        if b < 2 {
            return Err(IflError::BatchTooSmall(b));
        }
        let cfg = self.cfg.clone();
        let w = cfg.weights();
        let tau = T::of(cfg.tau);
        let masks = self.step_masks();
        let proj = BatchProjection::new(&self.state, batch);
        let mut grads = self.state.zeros_like();
        let nonfinite = |term: &'static str| IflError::NonFiniteLoss {
            epoch: pos.epoch,
            batch: pos.batch,
            term,
        };

        let l_cf = cf_backward(&self.state, batch, &proj, &masks, tau, T::one(), &mut grads)?.as_f64();
        if !l_cf.is_finite() {
            return Err(nonfinite("l_cf"));
        }

        let mut l_ssl = [0.0; 2];
        if w.alpha > 0.0 {
            for (s, side) in Side::BOTH.into_iter().enumerate() {
                let keep = self.keep_vectors(side, b);
                let l = ssl_backward(
                    &self.state,
                    side,
                    batch.features(side),
                    proj.side(side),
                    &keep,
                    tau,
                    T::of(w.alpha),
                    &mut grads,
                )?
                .as_f64();
                if !l.is_finite() {
                    return Err(nonfinite(["l_ssl_user", "l_ssl_item"][s]));
                }
                l_ssl[s] = l;
            }
        }

        let theta_sq = l2_backward(&self.state, T::of(w.lambda), &mut grads).as_f64();
        if !theta_sq.is_finite() {
            return Err(nonfinite("l_reg"));
        }

        let mut l_env = vec![None; n_envs];
        let mut l_v = 0.0;
        if cfg.uses_envs() {
            let probe = MaskProbe::with_projection(&self.state, proj, &batch.envs, n_envs, tau);
            let mu = self.state.masks.eval_mask(Side::User);
            let mi = self.state.masks.eval_mask(Side::Item);
            let env_grads = probe.env_mask_grads(&mu, &mi)?;
            for g in &env_grads {
                l_env[g.env] = Some(g.loss.as_f64());
            }
            l_v = crate::loss::variance_loss(&env_grads).as_f64();
            if !l_v.is_finite() {
                return Err(nonfinite("l_v"));
            }
            if w.beta > 0.0 && !self.skip_variance_grad {
                let (gu, gi) = probe.variance_loss_gamma_grad(T::of(cfg.fd_step))?;
                let beta = T::of(w.beta);
                for (g, d) in grads.masks.gamma_u.iter_mut().zip(&gu) {
                    *g += beta * *d;
                }
                for (g, d) in grads.masks.gamma_i.iter_mut().zip(&gi) {
                    *g += beta * *d;
                }
            }
        }
        if cfg.frozen_mask() {
            grads.masks.gamma_u.iter_mut().for_each(|g| *g = T::zero());
            grads.masks.gamma_i.iter_mut().for_each(|g| *g = T::zero());
        }

        let parts = LossParts {
            l_cf,
            l_env,
            l_v,
            l_ssl_user: l_ssl[0],
            l_ssl_item: l_ssl[1],
        };
        Ok((grads, total_loss(parts, w, theta_sq)))
    }

    /// One minibatch update, with gates projected onto [0, 1] afterwards.
    /// Returns the loss breakdown at the pre-update parameters.
    pub fn step(&mut self, batch: &Batch, n_envs: usize, pos: StepPos) -> Result<LossBreakdown> {
        let (grads, breakdown) = self.gradients(batch, n_envs, pos)?;
        self.opt.apply(&mut self.state, &grads, T::of(self.cfg.lr));
        // Gates stay in the box where the finite-difference probe can still see them.
        let (lo, hi) = (T::zero(), T::one());
        for g in self.state.masks.gamma_u.iter_mut().chain(self.state.masks.gamma_i.iter_mut()) {
            *g = g.max(lo).min(hi);
        }
        if !self.state.is_finite() {
            return Err(IflError::NonFiniteLoss {
                epoch: pos.epoch,
                batch: pos.batch,
                term: "parameters",
            });
        }
        Ok(breakdown)
    }
}

// ---------------------------------------------------------------------------
// History

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_cf: f64,
    pub l_ssl_user: f64,
    pub l_ssl_item: f64,
    pub l_v: f64,
    pub l_reg: f64,
    pub total: f64,
    /// Mean over the batches in which the environment had at least two members.
    pub l_env: Vec<Option<f64>>,
    pub env_sizes: Vec<usize>,
    pub val_recall: f64,
    pub val_ndcg: f64,
    /// Eval-mode mask per field, user side first.
    pub masks: Vec<f64>,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub k: usize,
    pub n_envs: usize,
    pub mask_fields: Vec<String>,
    /// Validation metrics of the untrained model (epoch 0).
    pub initial_val_recall: f64,
    pub initial_val_ndcg: f64,
    pub epochs: Vec<EpochRecord>,
    /// 0 when no epoch beat the untrained model.
    pub best_epoch: usize,
    pub best_val_recall: f64,
}

fn fmt_f(x: f64) -> String {
    format!("{x:.10e}")
}

impl RunHistory {
    /// CSV with one row per epoch; row 0 holds the untrained validation metrics.
    /// Wall times are left out so that identical runs produce identical files.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,l_cf,l_ssl_user,l_ssl_item,l_v,l_reg,total");
        for c in 0..self.n_envs {
            write!(out, ",l_env_{c}").unwrap();
        }
        write!(out, ",val_recall@{k},val_ndcg@{k}", k = self.k).unwrap();
        for f in &self.mask_fields {
            write!(out, ",mask_{f}").unwrap();
        }
        out.push('\n');
        write!(out, "0,,,,,,").unwrap();
        out.push_str(&",".repeat(self.n_envs));
        write!(out, ",{},{}", fmt_f(self.initial_val_recall), fmt_f(self.initial_val_ndcg)).unwrap();
        out.push_str(&",".repeat(self.mask_fields.len()));
        out.push('\n');
        for r in &self.epochs {
            write!(
                out,
                "{},{},{},{},{},{},{}",
                r.epoch,
                fmt_f(r.l_cf),
                fmt_f(r.l_ssl_user),
                fmt_f(r.l_ssl_item),
                fmt_f(r.l_v),
                fmt_f(r.l_reg),
                fmt_f(r.total)
            )
            .unwrap();
            for e in &r.l_env {
                out.push(',');
                if let Some(v) = e {
                    out.push_str(&fmt_f(*v));
                }
            }
            write!(out, ",{},{}", fmt_f(r.val_recall), fmt_f(r.val_ndcg)).unwrap();
            for m in &r.masks {
                write!(out, ",{}", fmt_f(*m)).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Hash of [`RunHistory::to_csv`].
    pub fn digest(&self) -> String {
        hex16(&Sha256::digest(self.to_csv().as_bytes()))
    }
}

#[derive(Debug, Default)]
struct EpochAccumulator {
    n: usize,
    sums: [f64; 6],
    env_sum: Vec<f64>,
    env_n: Vec<usize>,
}

impl EpochAccumulator {
    fn new(n_envs: usize) -> Self {
        Self {
            env_sum: vec![0.0; n_envs],
            env_n: vec![0; n_envs],
            ..Default::default()
        }
    }

    fn add(&mut self, b: &LossBreakdown) {
        self.n += 1;
        for (s, v) in self
            .sums
            .iter_mut()
            .zip([b.l_cf, b.l_ssl_user, b.l_ssl_item, b.l_v, b.l_reg, b.total])
        {
            *s += v;
        }
        for (c, l) in b.l_env.iter().enumerate() {
            if let Some(l) = l {
                self.env_sum[c] += l;
                self.env_n[c] += 1;
            }
        }
    }

    fn means(&self) -> ([f64; 6], Vec<Option<f64>>) {
        let n = self.n.max(1) as f64;
        let env = self
            .env_sum
            .iter()
            .zip(&self.env_n)
            .map(|(s, k)| (*k > 0).then(|| s / *k as f64))
            .collect();
        (self.sums.map(|s| s / n), env)
    }
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Debug, Clone)]
pub struct TrainOutput<T> {
    /// Parameters of the selected epoch.
    pub state: ModelState<T>,
    pub history: RunHistory,
    pub fingerprint: String,
}

pub fn initial_state<T: Scalar>(d: &Dataset, model: &ModelConfig, cfg: &TrainConfig) -> ModelState<T> {
    let sigma = if cfg.frozen_mask() { 0.0 } else { cfg.sigma_eps };
    let mut state = ModelState::init(&d.schema, model, sigma, &mut stream(cfg.seed, Stream::Init));
    if cfg.frozen_mask() {
        state.masks.gamma_u.iter_mut().for_each(|g| *g = T::one());
        state.masks.gamma_i.iter_mut().for_each(|g| *g = T::one());
    }
    state
}

fn make_batch(d: &Dataset, pos: &[InteractionRecord], members: &[usize], env: &EnvironmentAssignment) -> Batch {
    Batch {
        users: members.iter().map(|j| d.users[pos[*j].user].clone()).collect(),
        items: members.iter().map(|j| d.items[pos[*j].item].clone()).collect(),
        envs: members.iter().map(|j| env.env_of[*j]).collect(),
    }
}

/// Trains on the positive train interactions and returns the parameters
/// chosen by `cfg.selection`.
pub fn train<T: Scalar>(d: &Dataset, model: &ModelConfig, cfg: &TrainConfig) -> Result<TrainOutput<T>> {
    cfg.check()?;
    let pos = positives(d, Split::Train);
    if pos.len() < cfg.batch_size {
        return Err(IflError::InsufficientPositives {
            have: pos.len(),
            need: cfg.batch_size,
        });
    }
    let n_envs = if cfg.uses_envs() { cfg.n_envs } else { 1 };
    let fingerprint = run_fingerprint(d, model, cfg);
    let ks = [cfg.eval_k];
    let mut trainer = Trainer::new(initial_state::<T>(d, model, cfg), cfg);
    let mut shuffle = stream(cfg.seed, Stream::Shuffle);

    let initial = evaluate(&trainer.state, d, Split::Val, &ks)?;
    let mut history = RunHistory {
        k: cfg.eval_k,
        n_envs,
        mask_fields: mask_report(&trainer.state)
            .into_iter()
            .map(|r| format!("{}_{}", r.side, r.field))
            .collect(),
        initial_val_recall: initial.recall(cfg.eval_k).unwrap_or(0.0),
        initial_val_ndcg: initial.ndcg(cfg.eval_k).unwrap_or(0.0),
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_recall: initial.recall(cfg.eval_k).unwrap_or(0.0),
    };
    let mut best = trainer.state.clone();
    let mut stall = 0;
    let mut env = EnvironmentAssignment::single(pos.len());
    let mut order: Vec<usize> = (0..pos.len()).collect();

    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        if n_envs > 1 && (epoch - 1) % cfg.recluster_every == 0 {
            env = assign_environments(
                &trainer.state,
                d,
                &pos,
                n_envs,
                derive_seed(cfg.seed, epoch as u64),
                &KMeansParams::default(),
            )?;
        }
        order.shuffle(&mut shuffle);
        let mut acc = EpochAccumulator::new(n_envs);
        for (bi, members) in order.chunks(cfg.batch_size).enumerate() {
            if members.len() < 2 {
                continue;
            }
            let batch = make_batch(d, &pos, members, &env);
            let b = trainer.step(&batch, n_envs, StepPos { epoch, batch: bi })?;
            acc.add(&b);
        }
        let val = evaluate(&trainer.state, d, Split::Val, &ks)?;
        let ([l_cf, l_ssl_user, l_ssl_item, l_v, l_reg, total], l_env) = acc.means();
        let rec = EpochRecord {
            epoch,
            l_cf,
            l_ssl_user,
            l_ssl_item,
            l_v,
            l_reg,
            total,
            l_env,
            env_sizes: env.sizes(),
            val_recall: val.recall(cfg.eval_k).unwrap_or(0.0),
            val_ndcg: val.ndcg(cfg.eval_k).unwrap_or(0.0),
            masks: mask_report(&trainer.state).iter().map(|r| r.value).collect(),
            wall_secs: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (cf {:.4}, ssl {:.4}/{:.4}, v {:.3e}) val recall@{} {:.4} masks {:?} [{:.2}s]",
            rec.total,
            rec.l_cf,
            rec.l_ssl_user,
            rec.l_ssl_item,
            rec.l_v,
            cfg.eval_k,
            rec.val_recall,
            rec.masks.iter().map(|m| (m * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            rec.wall_secs
        );
        let improved = rec.val_recall > history.best_val_recall;
        history.epochs.push(rec);
        if improved {
            history.best_epoch = epoch;
            history.best_val_recall = history.epochs.last().expect("pushed").val_recall;
            best = trainer.state.clone();
            stall = 0;
        } else {
            stall += 1;
            if cfg.early_stop_patience > 0 && stall >= cfg.early_stop_patience {
                log::info!("early stop after epoch {epoch}; best epoch {}", history.best_epoch);
                break;
            }
        }
    }
    Ok(TrainOutput {
        state: match cfg.selection {
            Selection::Best => best,
            Selection::Last => trainer.state,
        },
        history,
        fingerprint,
    })
}

// ---------------------------------------------------------------------------
// Ablations and sweeps

#[derive(Debug, Clone)]
pub struct RunResult<T> {
    pub state: ModelState<T>,
    pub history: RunHistory,
    pub iid: MetricsReport,
    pub ood: MetricsReport,
}

impl<T: Scalar> RunResult<T> {
    pub fn masks(&self) -> Vec<MaskRow> {
        mask_report(&self.state)
    }
}

/// Trains, then evaluates the selected parameters on both test splits.
pub fn train_and_evaluate<T: Scalar>(d: &Dataset, model: &ModelConfig, cfg: &TrainConfig, ks: &[usize]) -> Result<RunResult<T>> {
    let out = train::<T>(d, model, cfg)?;
    let mut iid = evaluate(&out.state, d, Split::TestIid, ks)?;
    let mut ood = evaluate(&out.state, d, Split::TestOod, ks)?;
    iid.config_hash = out.fingerprint.clone();
    ood.config_hash = out.fingerprint;
    Ok(RunResult {
        state: out.state,
        history: out.history,
        iid,
        ood,
    })
}

/// Every variant with the shared seed of `base`.
pub fn ablate<T: Scalar>(
    d: &Dataset,
    model: &ModelConfig,
    base: &TrainConfig,
    ks: &[usize],
) -> Result<BTreeMap<Variant, RunResult<T>>> {
    Variant::ALL
        .into_iter()
        .map(|v| {
            log::info!("ablation variant {v}");
            Ok((v, train_and_evaluate(d, model, &base.with_variant(v), ks)?))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParam {
    #[serde(rename = "alpha")]
    Alpha,
    #[serde(rename = "beta")]
    Beta,
    #[serde(rename = "tau")]
    Tau,
    #[serde(rename = "C")]
    C,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::Beta => "beta",
            SweepParam::Tau => "tau",
            SweepParam::C => "C",
        }
    }

    pub fn apply(self, cfg: &TrainConfig, value: f64) -> Result<TrainConfig> {
        let mut c = cfg.clone();
        match self {
            SweepParam::Alpha => c.alpha = value,
            SweepParam::Beta => c.beta = value,
            SweepParam::Tau => c.tau = value,
            SweepParam::C => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(IflError::Config(format!("C must be a positive integer, got {value}")));
                }
                c.n_envs = value as usize;
            }
        }
        c.check()?;
        Ok(c)
    }
}

impl std::str::FromStr for SweepParam {
    type Err = IflError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepParam::Alpha),
            "beta" => Ok(SweepParam::Beta),
            "tau" => Ok(SweepParam::Tau),
            "C" => Ok(SweepParam::C),
            _ => Err(IflError::Config(format!("unknown sweep parameter `{s}` (alpha, beta, tau, C)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub iid: MetricsReport,
    pub ood: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub param: SweepParam,
    pub k: usize,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub const METRIC_COLUMNS: [&'static str; 4] = ["iid_recall", "iid_ndcg", "ood_recall", "ood_ndcg"];

    pub fn to_csv(&self) -> String {
        let k = self.k;
        let mut out = format!(
            "{},iid_recall@{k},iid_ndcg@{k},ood_recall@{k},ood_ndcg@{k}\n",
            self.param.as_str()
        );
        for r in &self.rows {
            let cell = |m: Option<f64>| m.map(fmt_f).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{}",
                r.value,
                cell(r.iid.recall(k)),
                cell(r.iid.ndcg(k)),
                cell(r.ood.recall(k)),
                cell(r.ood.ndcg(k))
            )
            .unwrap();
        }
        out
    }
}

/// One run per value of `param`, everything else fixed.
pub fn sweep<T: Scalar>(
    d: &Dataset,
    model: &ModelConfig,
    base: &TrainConfig,
    param: SweepParam,
    values: &[f64],
    ks: &[usize],
) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(IflError::Config("sweep needs at least one value".into()));
    }
    let mut ks = ks.to_vec();
    if !ks.contains(&base.eval_k) {
        ks.push(base.eval_k);
        ks.sort_unstable();
    }
    let rows = values
        .iter()
        .map(|v| {
            log::info!("sweep {} = {v}", param.as_str());
            let cfg = param.apply(base, *v)?;
            let r = train_and_evaluate::<T>(d, model, &cfg, &ks)?;
            Ok(SweepRow {
                value: *v,
                iid: r.iid,
                ood: r.ood,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable {
        param,
        k: base.eval_k,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().check().is_ok());
        let bad = TrainConfig {
            batch_size: 1,
            ..Default::default()
        };
        assert!(bad.check().is_err());
        let bad = TrainConfig {
            tau: 1e-4,
            ..Default::default()
        };
        assert!(bad.check().is_err());
        assert!(SweepParam::C.apply(&TrainConfig::default(), 1.5).is_err());
        assert_eq!(SweepParam::C.apply(&TrainConfig::default(), 4.0).unwrap().n_envs, 4);
    }

    #[test]
    fn variant_weights() {
        let c = TrainConfig::default();
        assert_eq!(c.with_variant(Variant::NoVariance).weights().beta, 0.0);
        assert_eq!(c.with_variant(Variant::NoSsl).weights().alpha, 0.0);
        assert_eq!(c.with_variant(Variant::NoMask).weights().beta, 0.0);
        assert_eq!(c.weights().alpha, 0.1);
        assert_eq!("no_mask".parse::<Variant>().unwrap(), Variant::NoMask);
    }

    #[test]
    fn adam_first_step_is_lr_sign() {
        let schema = crate::schema::FeatureSchema::uniform(1, 1, 2).unwrap();
        let cfg = ModelConfig {
            dim: 2,
            rep_dim: 2,
            ..Default::default()
        };
        let mut s: ModelState<f64> = ModelState::init(&schema, &cfg, 0.5, &mut stream(0, Stream::Init));
        let before = s.clone();
        let mut g = s.zeros_like();
        g.masks.gamma_u[0] = 3.0;
        g.masks.gamma_i[0] = -0.5;
        let mut opt = Optimizer::new(OptimizerKind::Adam);
        opt.apply(&mut s, &g, 0.1);
        assert!((s.masks.gamma_u[0] - (before.masks.gamma_u[0] - 0.1)).abs() < 1e-6);
        assert!((s.masks.gamma_i[0] - (before.masks.gamma_i[0] + 0.1)).abs() < 1e-6);
        assert_eq!(s.embeddings, before.embeddings);
    }
}
