//! Task-by-task training of prompts and output layers, two-stage inference,
//! the key-matching baseline and the component ablation.
//!
//! Per task `t`: fit uninstructed statistics for its classes, create its
//! prompt, then for each epoch optimize the prompt and `ψ` on the
//! within-task objective, `ω` on task identity from uninstructed pseudo
//! representations, and `ψ` on all seen classes from instructed pseudo
//! representations. Finally fit instructed statistics and freeze the prompt.

use std::collections::HashMap;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, PromptInjectionPlan};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::harness::{accuracy_matrix, metrics, ContinualLearner, Example, Metrics, Setting, Task, TaskStream};
use crate::numerics::{adam_step, dot, norm, seeded_rng, AdamState, Tensor};
use crate::objectives::{
    masked_cross_entropy, tap_loss, CrSimilarity, tii_loss, wtp_loss, HeadGrad, LinearHead, WtpParams, DEFAULT_LAMBDA, DEFAULT_TAU,
};
use crate::prompts::PromptPool;
use crate::statistics::{fit_class_stats, sample_pseudo_with, ClassStats, RepKind, Spread, StatsMode, StatsStore};

/// Which hierarchical components are active. All false is the naive
/// architecture: fresh prompts per task, key matching for task identity,
/// and prediction restricted to the chosen task's classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    /// Prompt ensemble with last-prompt initialization.
    pub pe: bool,
    /// Learned task-identity head `ω`.
    pub tii: bool,
    /// Task-adaptive prediction over all seen classes.
    pub tap: bool,
    /// Contrastive regularization against old class means.
    pub cr: bool,
}

impl AblationConfig {
    pub const NAIVE: Self = Self { pe: false, tii: false, tap: false, cr: false };
    pub const FULL: Self = Self { pe: true, tii: true, tap: true, cr: true };

    /// CR only makes sense alongside TAP.
    pub fn normalized(self) -> Self {
        Self { cr: self.cr && self.tap, ..self }
    }

    pub fn label(&self) -> String {
        if *self == Self::NAIVE {
            return "naive".into();
        }
        let mut parts = Vec::new();
        if self.pe {
            parts.push("WTP");
        } else {
            parts.push("prompts");
        }
        if self.tii {
            parts.push("TII");
        }
        if self.tap {
            parts.push("TAP");
        }
        if self.cr {
            parts.push("CR");
        }
        parts.join("+")
    }
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self::FULL
    }
}

/// Rows mirroring the component ablation: naive, WTP, WTP+TII, WTP+TAP,
/// WTP+TII+TAP, and the full method with CR.
pub fn default_grid() -> Vec<AblationConfig> {
    let row = |pe, tii, tap, cr| AblationConfig { pe, tii, tap, cr };
    vec![
        AblationConfig::NAIVE,
        row(true, false, false, false),
        row(true, true, false, false),
        row(true, false, true, false),
        row(true, true, true, false),
        AblationConfig::FULL,
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Weight of old prompts in the ensemble.
    pub alpha: f64,
    pub tau: f64,
    pub lambda: f64,
    /// `None` picks by representation width.
    pub stats_mode: Option<StatsMode>,
    /// Draw CR anchors from instructed statistics instead of using means.
    pub cr_sampled_anchors: bool,
    pub cr_similarity: CrSimilarity,
    /// Set per run rather than from configuration files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch: 32,
            lr: 0.005,
            alpha: 0.1,
            tau: DEFAULT_TAU,
            lambda: DEFAULT_LAMBDA,
            stats_mode: None,
            cr_sampled_anchors: false,
            cr_similarity: CrSimilarity::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be non-negative", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau {} must be positive", self.tau)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda {} must be non-negative", self.lambda)));
        }
        if let Some(StatsMode::MultiCentroid { k_max: 0 }) = self.stats_mode {
            return Err(Error::Config("k_max must be positive".into()));
        }
        Ok(())
    }
}

/// `ω` over tasks and `ψ` over classes, sized at configured maxima.
#[derive(Clone, Debug, PartialEq)]
pub struct Heads {
    pub omega: LinearHead,
    pub psi: LinearHead,
    /// Number of active tasks.
    pub tasks: usize,
    /// Sorted active classes.
    pub classes: Vec<usize>,
}

impl Heads {
    pub fn new(max_tasks: usize, max_classes: usize, dim: usize) -> Self {
        Self { omega: LinearHead::zeros(max_tasks, dim), psi: LinearHead::zeros(max_classes, dim), tasks: 0, classes: Vec::new() }
    }

    /// Most likely active task for an uninstructed representation.
    pub fn task(&self, u: &[f64]) -> usize {
        let active: Vec<usize> = (0..self.tasks).collect();
        self.omega.argmax(u, &active)
    }
}

/// Index of the key with the highest cosine similarity to `q`; zero norms
/// count as similarity 0 and ties go to the lowest index.
pub fn key_match_tii(q: &[f64], keys: &[Vec<f64>]) -> usize {
    let nq = norm(q);
    let sims: Vec<f64> = keys
        .iter()
        .map(|k| {
            let nk = norm(k);
            if nq == 0.0 || nk == 0.0 {
                0.0
            } else {
                dot(q, k) / (nq * nk)
            }
        })
        .collect();
    crate::backbone::argmax(&sims)
}

/// Mean `1 - cos(q, k)` over `qs` and its gradient w.r.t. `k`.
fn key_loss(qs: &[&[f64]], k: &[f64]) -> (f64, Vec<f64>) {
    let nk = norm(k).max(1e-12);
    let mut loss = 0.0;
    let mut g = vec![0.0; k.len()];
    for q in qs {
        let nq = norm(q);
        if nq == 0.0 {
            continue;
        }
        let c = dot(q, k) / (nq * nk);
        loss += 1.0 - c;
        for ((gi, qi), ki) in g.iter_mut().zip(*q).zip(k) {
            *gi -= (qi / (nq * nk) - c * ki / (nk * nk)) / qs.len() as f64;
        }
    }
    (loss / qs.len() as f64, g)
}

/// Linear centered kernel alignment between two `n x D` representation
/// matrices. Returns 0 when either is constant.
pub fn cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.rows() != y.rows() || x.rows() < 2 {
        return Err(Error::Input(format!("cka needs two matrices of at least 2 matching rows, got {} and {}", x.rows(), y.rows())));
    }
    let center = |m: &Tensor| -> Tensor {
        let (n, d) = (m.rows(), m.cols());
        let means: Vec<f64> = (0..d).map(|j| (0..n).map(|i| m.get2(i, j)).sum::<f64>() / n as f64).collect();
        let mut c = m.clone();
        for i in 0..n {
            for (v, mu) in c.row_slice_mut(i).iter_mut().zip(&means) {
                *v -= mu;
            }
        }
        c
    };
    let (xc, yc) = (center(x), center(y));
    let xtx = xc.transpose().matmul(&xc)?.frobenius();
    let yty = yc.transpose().matmul(&yc)?.frobenius();
    if xtx == 0.0 || yty == 0.0 {
        log::warn!("cka on a zero-variance input");
        return Ok(0.0);
    }
    let cross = yc.transpose().matmul(&xc)?.frobenius();
    Ok((cross * cross / (xtx * yty)).clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct EvalCounts {
    pub total: u64,
    pub correct: u64,
    /// `ω` picked the true task.
    pub task_correct: u64,
    /// Key matching picked the true task.
    pub key_correct: u64,
    /// Correct label despite a wrong task pick.
    pub compensated: u64,
}

impl EvalCounts {
    fn add(&mut self, o: &EvalCounts) {
        self.total += o.total;
        self.correct += o.correct;
        self.task_correct += o.task_correct;
        self.key_correct += o.key_correct;
        self.compensated += o.compensated;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub task: usize,
    pub label: usize,
}

/// Per-task training diagnostics.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TaskLog {
    pub wtp_loss: f64,
    pub tii_loss: f64,
    pub tap_loss: f64,
    pub train_within_accuracy: f64,
}

pub struct Learner {
    backbone: Arc<Backbone>,
    plan: PromptInjectionPlan,
    config: TrainConfig,
    ablation: AblationConfig,
    setting: Setting,
    max_tasks: usize,
    pool: PromptPool,
    /// `p_i` used at inference, one per task.
    prompts: Vec<Vec<Tensor>>,
    pub heads: Heads,
    pub stats: StatsStore,
    pub logs: Vec<TaskLog>,
    uninstructed_cache: HashMap<(usize, usize), Vec<f64>>,
    instructed_cache: HashMap<(usize, usize, usize), Vec<f64>>,
    /// Counts from the evaluations since the last learned task.
    pub eval_counts: Vec<EvalCounts>,
}

impl Learner {
    pub fn new(
        backbone: Arc<Backbone>,
        plan: PromptInjectionPlan,
        config: TrainConfig,
        ablation: AblationConfig,
        setting: Setting,
        max_tasks: usize,
        max_classes: usize,
    ) -> Result<Self> {
        config.validate()?;
        if !backbone.is_frozen() {
            return Err(Error::State("backbone must be frozen".into()));
        }
        if let Some(cfg) = backbone.config() {
            plan.validate(cfg)?;
        }
        if max_tasks == 0 || max_classes == 0 {
            return Err(Error::Config("max tasks and classes must be positive".into()));
        }
        let dim = backbone.dim();
        let pool = PromptPool::new(plan.layers.len(), plan.length, dim, config.seed);
        Ok(Self {
            backbone,
            plan,
            ablation: ablation.normalized(),
            setting,
            max_tasks,
            pool,
            prompts: Vec::new(),
            heads: Heads::new(max_tasks, max_classes, dim),
            stats: StatsStore::new(setting == Setting::Dil),
            logs: Vec::new(),
            uninstructed_cache: HashMap::new(),
            instructed_cache: HashMap::new(),
            eval_counts: Vec::new(),
            config,
        })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn ablation(&self) -> AblationConfig {
        self.ablation
    }

    pub fn pool(&self) -> &PromptPool {
        &self.pool
    }

    pub fn tasks_learned(&self) -> usize {
        self.heads.tasks
    }

    pub fn inference_prompt(&self, t: usize) -> Result<&[Tensor]> {
        self.prompts.get(t).map(Vec::as_slice).ok_or(Error::Index { index: t, len: self.prompts.len() })
    }

    fn stats_mode(&self) -> StatsMode {
        self.config.stats_mode.unwrap_or_else(|| StatsMode::default_for_dim(self.backbone.dim()))
    }

    fn uses_prompts(&self) -> bool {
        !self.backbone.is_embedding() && !self.plan.layers.is_empty() && self.plan.length > 0
    }

    fn instructed(&self, x: &Tensor, prompt: &[Tensor]) -> Result<Vec<f64>> {
        if self.uses_prompts() {
            self.backbone.forward_instructed(x, prompt, &self.plan)
        } else {
            self.backbone.forward_uninstructed(x)
        }
    }

    fn stats_seed(&self, t: usize, c: usize, kind: u64) -> u64 {
        self.config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((t as u64) << 40) ^ ((c as u64) << 8) ^ kind
    }

    fn fit_stats(&mut self, kind: RepKind, t: usize, classes: &[usize], examples: &[Example], reps: &[Vec<f64>]) -> Result<()> {
        let mode = self.stats_mode();
        for &c in classes {
            let group: Vec<Vec<f64>> =
                examples.iter().zip(reps).filter(|(e, _)| e.label == c).map(|(_, r)| r.clone()).collect();
            let tag = if kind == RepKind::Uninstructed { 1 } else { 2 };
            let s = fit_class_stats(&group, mode, self.stats_seed(t, c, tag))
                .map_err(|e| Error::Input(format!("task {t} class {c}: {e}")))?;
            self.stats.insert(kind, t, c, s)?;
        }
        Ok(())
    }

    /// Old anchors for the contrastive term: one per instructed class entry of
    /// earlier tasks, either its mean or a fresh draw.
    fn anchors(&self, t: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::new();
        for (&(task, _), s) in self.stats.entries(RepKind::Instructed) {
            if task < t {
                if self.config.cr_sampled_anchors {
                    out.extend(sample_pseudo_with(s, 1, rng)?);
                } else {
                    out.push(s.mean.clone());
                }
            }
        }
        Ok(out)
    }

    /// Class-balanced pseudo batch drawn from stats of tasks `0..=t`.
    fn pseudo_batch(
        &self,
        kind: RepKind,
        t: usize,
        rng: &mut ChaCha8Rng,
        live: Option<&HashMap<usize, Vec<Vec<f64>>>>,
    ) -> Result<(Vec<Vec<f64>>, Vec<usize>, Vec<usize>)> {
        let mut keys: Vec<(usize, usize)> = Vec::new();
        for i in 0..=t {
            for &c in self.stats.classes(i)? {
                keys.push((i, c));
            }
        }
        let per = self.config.batch.div_ceil(keys.len()).max(1);
        let (mut reps, mut classes, mut tasks) = (Vec::new(), Vec::new(), Vec::new());
        for &(i, c) in &keys {
            let draws = match (live, i == t) {
                (Some(l), true) => {
                    let pool = l.get(&c).filter(|v| !v.is_empty()).ok_or_else(|| Error::State(format!("no live vectors for class {c}")))?;
                    (0..per).map(|_| pool.choose(rng).unwrap().clone()).collect()
                }
                _ => {
                    let s = self.stats.get(kind, i, c).ok_or_else(|| Error::State(format!("missing stats for task {i} class {c}")))?;
                    sample_pseudo_with(s, per, rng)?
                }
            };
            for d in draws {
                reps.push(d);
                classes.push(c);
                tasks.push(i);
            }
        }
        Ok((reps, classes, tasks))
    }

    /// Learns task `t` from its training set.
    pub fn train_task(&mut self, t: usize, task: &Task) -> Result<()> {
        if t != self.heads.tasks {
            return Err(Error::State(format!("expected task {}, got {t}", self.heads.tasks)));
        }
        if t >= self.max_tasks {
            return Err(Error::Config(format!("task {t} beyond the configured maximum {}", self.max_tasks)));
        }
        if task.train.is_empty() {
            return Err(Error::Input(format!("task {t} has no training data")));
        }
        if let Some(&c) = task.classes.iter().find(|&&c| c >= self.heads.psi.outputs()) {
            return Err(Error::Config(format!("class {c} beyond the configured maximum")));
        }
        if let Some(e) = task.train.iter().find(|e| task.classes.binary_search(&e.label).is_err()) {
            return Err(Error::Input(format!("training label {} outside task {t}", e.label)));
        }
        self.eval_counts.clear();
        let cfg = self.config.clone();
        let ab = self.ablation;
        let classes = task.classes.clone();
        self.stats.register_task(t, &classes)?;

        let bb = Arc::clone(&self.backbone);
        let u_reps: Vec<Vec<f64>> = task.train.par_iter().map(|e| bb.forward_uninstructed(&e.input)).collect::<Result<_>>()?;
        self.fit_stats(RepKind::Uninstructed, t, &classes, &task.train, &u_reps)?;

        if ab.pe {
            self.pool.create_task_prompt(t)?;
        } else {
            self.pool.create_task_prompt_random(t)?;
        }
        let (base, weight) = if ab.pe {
            (self.pool.ensemble_base(t, cfg.alpha)?, PromptPool::current_weight(t, cfg.alpha))
        } else {
            (self.pool.ensemble_base(t, 0.0)?, 1.0)
        };
        let mut krng = seeded_rng(cfg.seed, 0x4B00 + t as u64);
        let mut key: Vec<f64> = (0..bb.dim()).map(|_| krng.random_range(-0.02..0.02)).collect();

        self.heads.tasks = t + 1;
        self.heads.classes = self.stats.seen_classes(t);
        let seen = self.heads.classes.clone();

        let mut opt_e: Vec<AdamState> = base.iter().map(AdamState::for_tensor).collect();
        let mut opt_psi = (AdamState::for_tensor(&self.heads.psi.w), AdamState::for_tensor(&self.heads.psi.b));
        let mut opt_tap = opt_psi.clone();
        let mut opt_omega = (AdamState::for_tensor(&self.heads.omega.w), AdamState::for_tensor(&self.heads.omega.b));
        let mut opt_key = AdamState::new(key.len());
        let mut shuffle_rng = seeded_rng(cfg.seed, 0x1000 + t as u64);
        let mut tii_rng = seeded_rng(cfg.seed, 0x2000 + t as u64);
        let mut tap_rng = seeded_rng(cfg.seed, 0x3000 + t as u64);
        let mut anchor_rng = seeded_rng(cfg.seed, 0x4000 + t as u64);
        let lambda = if ab.cr { cfg.lambda } else { 0.0 };
        let mut order: Vec<usize> = (0..task.train.len()).collect();
        let mut log = TaskLog::default();
        let apply_head = |head: &mut LinearHead, g: &HeadGrad, st: &mut (AdamState, AdamState)| -> Result<()> {
            adam_step(&mut head.w, &g.w, &mut st.0, cfg.lr)?;
            adam_step(&mut head.b, &g.b, &mut st.1, cfg.lr)
        };

        for _epoch in 0..cfg.epochs {
            order.shuffle(&mut shuffle_rng);
            let mut live: HashMap<usize, Vec<Vec<f64>>> = HashMap::new();
            let (mut wtp_sum, mut right, mut batches) = (0.0, 0usize, 0usize);
            for chunk in order.chunks(cfg.batch) {
                batches += 1;
                let batch: Vec<&Example> = chunk.iter().map(|&i| &task.train[i]).collect();
                let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
                let reps = if self.uses_prompts() {
                    let mut p_t = base.clone();
                    for (p, e) in p_t.iter_mut().zip(self.pool.prompt(t)?) {
                        p.axpy(weight, e);
                    }
                    let anchors = if lambda > 0.0 { self.anchors(t, &mut anchor_rng)? } else { Vec::new() };
                    let params = WtpParams {
                        backbone: &bb,
                        plan: &self.plan,
                        prompt: &p_t,
                        task_classes: &classes,
                        anchors: &anchors,
                        lambda,
                        tau: cfg.tau,
                        similarity: cfg.cr_similarity,
                    };
                    let out = wtp_loss(&batch, &self.heads.psi, &params)?;
                    for ((e, g), st) in self.pool.prompt_mut(t)?.iter_mut().zip(&out.grad_prompt).zip(&mut opt_e) {
                        adam_step(e, &g.scale(weight), st, cfg.lr)?;
                    }
                    apply_head(&mut self.heads.psi, &out.grad_head, &mut opt_psi)?;
                    wtp_sum += out.loss;
                    out.reps
                } else {
                    let reps: Vec<Vec<f64>> = chunk.iter().map(|&i| u_reps[i].clone()).collect();
                    let (loss, g, _) = masked_cross_entropy(&self.heads.psi, &reps, &labels, &classes)?;
                    apply_head(&mut self.heads.psi, &g, &mut opt_psi)?;
                    wtp_sum += loss;
                    reps
                };
                for (r, &y) in reps.iter().zip(&labels) {
                    right += usize::from(self.heads.psi.argmax(r, &classes) == y);
                }
                for (r, y) in reps.into_iter().zip(labels) {
                    live.entry(y).or_default().push(r);
                }
                let qs: Vec<&[f64]> = chunk.iter().map(|&i| u_reps[i].as_slice()).collect();
                let (_, kg) = key_loss(&qs, &key);
                let mut kt = Tensor::vector(std::mem::take(&mut key));
                adam_step(&mut kt, &Tensor::vector(kg), &mut opt_key, cfg.lr)?;
                key = kt.into_data();
            }
            log.wtp_loss = wtp_sum / batches as f64;
            log.train_within_accuracy = right as f64 / task.train.len() as f64;

            if ab.tii {
                let mut sum = 0.0;
                for _ in 0..batches {
                    let (reps, _, tasks) = self.pseudo_batch(RepKind::Uninstructed, t, &mut tii_rng, None)?;
                    let (loss, g) = tii_loss(&self.heads.omega, &reps, &tasks, t + 1)?;
                    apply_head(&mut self.heads.omega, &g, &mut opt_omega)?;
                    sum += loss;
                }
                log.tii_loss = sum / batches as f64;
            }
            if ab.tap {
                let mut sum = 0.0;
                for _ in 0..batches {
                    let (reps, labels, _) = self.pseudo_batch(RepKind::Instructed, t, &mut tap_rng, Some(&live))?;
                    let (loss, g) = tap_loss(&self.heads.psi, &reps, &labels, &seen)?;
                    apply_head(&mut self.heads.psi, &g, &mut opt_tap)?;
                    sum += loss;
                }
                log.tap_loss = sum / batches as f64;
            }
        }

        let mut p_t = base;
        for (p, e) in p_t.iter_mut().zip(self.pool.prompt(t)?) {
            p.axpy(weight, e);
        }
        let i_reps: Vec<Vec<f64>> = {
            let this = &*self;
            task.train.par_iter().map(|e| this.instructed(&e.input, &p_t)).collect::<Result<_>>()?
        };
        self.fit_stats(RepKind::Instructed, t, &classes, &task.train, &i_reps)?;
        self.prompts.push(p_t);
        self.pool.keys.push(key);
        self.pool.freeze_task(t)?;
        self.logs.push(log);
        Ok(())
    }

    fn choose_task(&self, u: &[f64], true_task: Option<usize>) -> usize {
        match (self.setting, true_task) {
            (Setting::Til, Some(t)) => t,
            _ if self.ablation.tii => self.heads.task(u),
            _ => key_match_tii(u, &self.pool.keys),
        }
    }

    fn choose_label(&self, h: &[f64], task: usize) -> Result<usize> {
        if self.ablation.tap && self.setting != Setting::Til {
            Ok(self.heads.psi.argmax(h, &self.heads.classes))
        } else {
            Ok(self.heads.psi.argmax(h, self.stats.classes(task)?))
        }
    }

    /// Two-stage inference: task from the uninstructed representation
    /// (`ω`, or key matching without TII), then the label from the
    /// representation under that task's prompt. In the task-incremental
    /// setting `true_task` replaces the first stage.
    pub fn predict(&self, x: &Tensor, true_task: Option<usize>) -> Result<Prediction> {
        if self.heads.tasks == 0 {
            return Err(Error::State("no task has been learned".into()));
        }
        let u = self.backbone.forward_uninstructed(x)?;
        let task = self.choose_task(&u, true_task);
        let h = self.instructed(x, &self.prompts[task])?;
        Ok(Prediction { task, label: self.choose_label(&h, task)? })
    }

    /// Labels under every learned prompt, for brute-force comparison.
    pub fn predict_all_branches(&self, x: &Tensor) -> Result<(usize, Vec<usize>)> {
        let u = self.backbone.forward_uninstructed(x)?;
        let task = self.choose_task(&u, None);
        let labels = (0..self.heads.tasks)
            .map(|i| self.choose_label(&self.instructed(x, &self.prompts[i])?, i))
            .collect::<Result<_>>()?;
        Ok((task, labels))
    }

    /// Scores `task.test` (task index `t` in the stream), caching
    /// representations by (task, sample, prompt) since prompts are frozen.
    pub fn evaluate(&mut self, t: usize, task: &Task) -> Result<EvalCounts> {
        if self.heads.tasks == 0 {
            return Err(Error::State("no task has been learned".into()));
        }
        let missing_u: Vec<usize> = (0..task.test.len()).filter(|s| !self.uninstructed_cache.contains_key(&(t, *s))).collect();
        let bb = Arc::clone(&self.backbone);
        let computed: Vec<Vec<f64>> =
            missing_u.par_iter().map(|&s| bb.forward_uninstructed(&task.test[s].input)).collect::<Result<_>>()?;
        for (s, r) in missing_u.into_iter().zip(computed) {
            self.uninstructed_cache.insert((t, s), r);
        }
        let true_task = (self.setting == Setting::Til).then_some(t);
        let picks: Vec<usize> = (0..task.test.len()).map(|s| self.choose_task(&self.uninstructed_cache[&(t, s)], true_task)).collect();
        let missing_i: Vec<(usize, usize)> = picks
            .iter()
            .enumerate()
            .filter(|(s, &p)| !self.instructed_cache.contains_key(&(t, *s, p)))
            .map(|(s, &p)| (s, p))
            .collect();
        let computed: Vec<Vec<f64>> = {
            let this = &*self;
            missing_i.par_iter().map(|&(s, p)| this.instructed(&task.test[s].input, &this.prompts[p])).collect::<Result<_>>()?
        };
        for ((s, p), r) in missing_i.into_iter().zip(computed) {
            self.instructed_cache.insert((t, s, p), r);
        }
        let task_of_label = |e: &Example| if self.setting == Setting::Dil { t } else { self.stats.task_of(e.label).unwrap_or(t) };
        let mut counts = EvalCounts::default();
        for (s, e) in task.test.iter().enumerate() {
            let p = picks[s];
            let label = self.choose_label(&self.instructed_cache[&(t, s, p)], p)?;
            let truth = task_of_label(e);
            let ok = label == e.label;
            counts.total += 1;
            counts.correct += u64::from(ok);
            counts.task_correct += u64::from(p == truth);
            counts.compensated += u64::from(ok && p != truth);
            counts.key_correct += u64::from(key_match_tii(&self.uninstructed_cache[&(t, s)], &self.pool.keys) == truth);
        }
        self.eval_counts.push(counts);
        Ok(counts)
    }

    /// Sum of [`eval_counts`](Self::eval_counts) since the last learned task.
    pub fn eval_totals(&self) -> EvalCounts {
        let mut c = EvalCounts::default();
        self.eval_counts.iter().for_each(|x| c.add(x));
        c
    }

    /// Everything needed to restore inference, plus statistics and keys.
    pub fn to_checkpoint(&self, config_echo: &[u8]) -> Checkpoint {
        let mut ck = Checkpoint::new();
        if let Some(w) = self.backbone.weights() {
            for (name, t) in w.named_tensors() {
                ck.insert(name, t.clone());
            }
        }
        for (t, p) in self.prompts.iter().enumerate() {
            for (l, e) in p.iter().enumerate() {
                ck.insert(format!("prompt/{t}/{l}"), e.clone());
            }
        }
        for t in 0..self.pool.len() {
            for (l, e) in self.pool.prompt(t).expect("in range").iter().enumerate() {
                ck.insert(format!("pool/{t}/{l}"), e.clone());
            }
        }
        for (t, k) in self.pool.keys.iter().enumerate() {
            ck.insert(format!("keys/{t}"), Tensor::vector(k.clone()));
        }
        ck.insert("heads/omega/w", self.heads.omega.w.clone());
        ck.insert("heads/omega/b", self.heads.omega.b.clone());
        ck.insert("heads/psi/w", self.heads.psi.w.clone());
        ck.insert("heads/psi/b", self.heads.psi.b.clone());
        for t in 0..self.stats.tasks() {
            let cs = self.stats.classes(t).expect("registered");
            ck.insert(format!("registry/{t}"), Tensor::vector(cs.iter().map(|&c| c as f64).collect()));
        }
        for (kind, tag) in [(RepKind::Uninstructed, "u"), (RepKind::Instructed, "i")] {
            for (&(t, c), s) in self.stats.entries(kind) {
                let key = if self.setting == Setting::Dil { format!("{t}.{c}") } else { c.to_string() };
                for (field, tensor) in s.tensors() {
                    ck.insert(format!("stats/{tag}/{key}/{field}"), tensor);
                }
            }
        }
        ck.insert_bytes("config", config_echo);
        ck
    }

    /// Restores a learner saved with [`to_checkpoint`](Self::to_checkpoint).
    #[allow(clippy::too_many_arguments)]
    pub fn from_checkpoint(
        ck: &Checkpoint,
        backbone: Arc<Backbone>,
        plan: PromptInjectionPlan,
        config: TrainConfig,
        ablation: AblationConfig,
        setting: Setting,
        max_tasks: usize,
        max_classes: usize,
    ) -> Result<Self> {
        let mut l = Self::new(backbone, plan, config, ablation, setting, max_tasks, max_classes)?;
        if let Some(w) = l.backbone.weights() {
            for (name, t) in w.named_tensors() {
                if ck.require(&name)? != t {
                    return Err(Error::State(format!("checkpoint backbone differs at {name}")));
                }
            }
        }
        let mut t = 0;
        while let Some(reg) = ck.get(&format!("registry/{t}")) {
            let classes: Vec<usize> = reg.data().iter().map(|&c| c as usize).collect();
            l.stats.register_task(t, &classes)?;
            let layers = l.plan.layers.len();
            let load = |prefix: &str| -> Result<Vec<Tensor>> {
                (0..layers).map(|i| ck.require(&format!("{prefix}/{t}/{i}")).cloned()).collect()
            };
            l.prompts.push(load("prompt")?);
            let pool_prompt = load("pool")?;
            l.pool.create_task_prompt_random(t)?;
            for (dst, src) in l.pool.prompt_mut(t)?.iter_mut().zip(pool_prompt) {
                *dst = src;
            }
            l.pool.freeze_task(t)?;
            l.pool.keys.push(ck.require(&format!("keys/{t}"))?.data().to_vec());
            for (kind, tag) in [(RepKind::Uninstructed, "u"), (RepKind::Instructed, "i")] {
                for &c in &classes {
                    let key = if setting == Setting::Dil { format!("{t}.{c}") } else { c.to_string() };
                    let get = |f: &str| ck.get(&format!("stats/{tag}/{key}/{f}"));
                    l.stats.insert(kind, t, c, stats_from_tensors(get)?)?;
                }
            }
            t += 1;
        }
        l.heads.omega = LinearHead { w: ck.require("heads/omega/w")?.clone(), b: ck.require("heads/omega/b")?.clone() };
        l.heads.psi = LinearHead { w: ck.require("heads/psi/w")?.clone(), b: ck.require("heads/psi/b")?.clone() };
        l.heads.tasks = t;
        l.heads.classes = if t > 0 { l.stats.seen_classes(t - 1) } else { Vec::new() };
        Ok(l)
    }
}

fn stats_from_tensors<'a>(get: impl Fn(&str) -> Option<&'a Tensor>) -> Result<ClassStats> {
    let missing = |f: &str| Error::Input(format!("checkpoint stats missing {f}"));
    let mean = get("mean").ok_or_else(|| missing("mean"))?.data().to_vec();
    let count = get("n").ok_or_else(|| missing("n"))?.data()[0] as usize;
    if let Some(cov) = get("cov") {
        return ClassStats::gaussian(mean, cov.clone(), count);
    }
    if let Some(var) = get("var") {
        return Ok(ClassStats { mean, spread: Spread::Diag { var: var.data().to_vec() }, count });
    }
    let centroids = get("centroids").ok_or_else(|| missing("centroids"))?;
    let counts = get("counts").ok_or_else(|| missing("counts"))?.data().iter().map(|&c| c as usize).collect();
    let sigma = get("sigma").ok_or_else(|| missing("sigma"))?.data()[0];
    let rows = (0..centroids.rows()).map(|r| centroids.row_slice(r).to_vec()).collect();
    ClassStats::centroid(rows, counts, sigma)
}

impl ContinualLearner for Learner {
    fn learn_task(&mut self, t: usize, task: &Task) -> Result<()> {
        self.train_task(t, task)
    }

    fn count_correct(&mut self, t: usize, task: &Task) -> Result<u64> {
        Ok(self.evaluate(t, task)?.correct)
    }
}

/// Outcome of one run over a stream.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub matrix: crate::harness::AccuracyMatrix,
    pub metrics: Metrics,
    /// Counts over all tasks after the final task.
    pub final_counts: EvalCounts,
}

pub fn run_stream(
    backbone: Arc<Backbone>,
    plan: &PromptInjectionPlan,
    config: &TrainConfig,
    ablation: AblationConfig,
    stream: &TaskStream,
) -> Result<RunOutcome> {
    let mut l = Learner::new(backbone, plan.clone(), config.clone(), ablation, stream.setting, stream.len(), stream.classes)?;
    let matrix = accuracy_matrix(&mut l, stream, |_, _| Ok(()))?;
    let metrics = metrics(&matrix)?;
    Ok(RunOutcome { matrix, metrics, final_counts: l.eval_totals() })
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub ablation: AblationConfig,
    pub seeds: Vec<u64>,
    pub faa: Vec<f64>,
    pub mean_faa: f64,
    pub ffm: Vec<Option<f64>>,
    /// Fraction of final test samples whose task `ω` identified.
    pub tii_accuracy: Vec<f64>,
    pub key_accuracy: Vec<f64>,
}

/// Trains a fresh learner per row and seed. `stream_for` builds the stream
/// for a seed, so data and training randomness vary together.
pub fn run_ablation(
    backbone: Arc<Backbone>,
    plan: &PromptInjectionPlan,
    base: &TrainConfig,
    grid: &[AblationConfig],
    seeds: &[u64],
    stream_for: impl Fn(u64) -> Result<TaskStream> + Sync,
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one row and one seed".into()));
    }
    let streams: Vec<TaskStream> = seeds.iter().map(|&s| stream_for(s)).collect::<Result<_>>()?;
    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|r| (0..seeds.len()).map(move |s| (r, s))).collect();
    let outcomes: Vec<RunOutcome> = jobs
        .par_iter()
        .map(|&(r, s)| {
            let cfg = TrainConfig { seed: seeds[s], ..base.clone() };
            run_stream(Arc::clone(&backbone), plan, &cfg, grid[r], &streams[s])
        })
        .collect::<Result<_>>()?;
    Ok(grid
        .iter()
        .enumerate()
        .map(|(r, ab)| {
            let runs = &outcomes[r * seeds.len()..(r + 1) * seeds.len()];
            let faa: Vec<f64> = runs.iter().map(|o| o.metrics.faa).collect();
            let frac = |f: fn(&EvalCounts) -> u64| runs.iter().map(|o| f(&o.final_counts) as f64 / o.final_counts.total as f64).collect();
            AblationRow {
                label: ab.normalized().label(),
                ablation: ab.normalized(),
                seeds: seeds.to_vec(),
                mean_faa: faa.iter().sum::<f64>() / faa.len() as f64,
                faa,
                ffm: runs.iter().map(|o| o.metrics.ffm).collect(),
                tii_accuracy: frac(|c| c.task_correct),
                key_accuracy: frac(|c| c.key_correct),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::statistics::ClassStats;

    fn ortho(d: usize, seed: u64) -> Tensor {
        // Gram-Schmidt on a seeded random matrix.
        let mut rng = seeded_rng(seed, 9);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        while rows.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            for r in &rows {
                let p = dot(&v, r);
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= p * b);
            }
            let n = norm(&v);
            if n > 1e-6 {
                rows.push(v.iter().map(|a| a / n).collect());
            }
        }
        Tensor::from_rows(&rows).unwrap()
    }

    fn random_matrix(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = seeded_rng(seed, 5);
        Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn cka_examples() {
        let x = random_matrix(50, 6, 1);
        assert!((cka(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let r = ortho(6, 2);
        assert!((cka(&x, &x.matmul(&r).unwrap()).unwrap() - 1.0).abs() < 1e-10);
        let a = random_matrix(500, 16, 3);
        let b = random_matrix(500, 16, 4);
        assert!(cka(&a, &b).unwrap() < 0.1);
        assert_eq!(cka(&Tensor::full(&[5, 2], 1.0), &a.slice_rows(0, 5)).unwrap(), 0.0);
        assert!(cka(&a.slice_rows(0, 1), &b.slice_rows(0, 1)).is_err());
    }

    #[test]
    fn key_matching_examples() {
        let keys = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
        assert_eq!(key_match_tii(&[0.0, 1.0, 0.0], &keys), 1);
        assert_eq!(key_match_tii(&[0.0, 0.0, 1.0], &keys), 0);
        assert_eq!(key_match_tii(&[0.0, 0.0, 0.0], &keys), 0);
        assert_eq!(key_match_tii(&[1.0, 1.0, 0.0], &[vec![0.0; 3], vec![1.0, 0.0, 0.0]]), 1);
    }

    #[test]
    fn key_matching_agrees_with_brute_force() {
        let mut rng = seeded_rng(4, 0);
        let keys: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        for _ in 0..200 {
            let c = rng.random_range(0..5);
            let q: Vec<f64> = keys[c].iter().map(|k| k + 0.3 * rng.random_range(-1.0..1.0)).collect();
            let best = (0..5)
                .max_by(|&a, &b| {
                    let ca = dot(&q, &keys[a]) / (norm(&q) * norm(&keys[a]));
                    let cb = dot(&q, &keys[b]) / (norm(&q) * norm(&keys[b]));
                    ca.partial_cmp(&cb).unwrap().then(b.cmp(&a))
                })
                .unwrap();
            assert_eq!(key_match_tii(&q, &keys), best);
        }
    }

    #[test]
    fn key_loss_gradient() {
        let qs = [vec![0.3, -0.2, 0.9], vec![1.0, 0.5, -0.4]];
        let refs: Vec<&[f64]> = qs.iter().map(Vec::as_slice).collect();
        let k = Tensor::vector(vec![0.2, 0.1, -0.3]);
        let (_, g) = key_loss(&refs, k.data());
        let err = grad_check(|x| key_loss(&refs, x.data()).0, &k, &Tensor::vector(g), 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn ablation_rows() {
        let grid = default_grid();
        assert_eq!(grid.len(), 6);
        assert_eq!(grid[0].label(), "naive");
        assert_eq!(grid[4].label(), "WTP+TII+TAP");
        assert_eq!(grid[5].label(), "WTP+TII+TAP+CR");
        let no_tap = AblationConfig { pe: true, tii: true, tap: false, cr: true }.normalized();
        assert!(!no_tap.cr);
    }

    #[test]
    fn omega_dominant_logit_selects_task() {
        let mut h = Heads::new(4, 4, 2);
        h.tasks = 3;
        h.omega.b = Tensor::vector(vec![0.0, 0.0, 5.0, 9.0]);
        assert_eq!(h.task(&[0.1, 0.2]), 2);
        h.tasks = 1;
        assert_eq!(h.task(&[3.0, -1.0]), 0);
    }

    #[test]
    fn stats_checkpoint_fields_round_trip() {
        let g = fit_class_stats(&[vec![0.0, 1.0], vec![2.0, 0.5], vec![1.0, 1.0]], StatsMode::FullGaussian, 0).unwrap();
        let c = ClassStats::centroid(vec![vec![1.0], vec![3.0]], vec![2, 1], 0.2).unwrap();
        for s in [g, c] {
            let fields: HashMap<&str, Tensor> = s.tensors().into_iter().collect();
            let back = stats_from_tensors(|f| fields.get(f)).unwrap();
            assert_eq!(back, s);
        }
    }
}
