//! Training objectives: contrastive regularization against old class means,
//! within-task prediction, task-identity inference and task-adaptive
//! prediction. Each returns its value with analytic gradients.

use rayon::prelude::*;

use crate::backbone::{Backbone, PromptInjectionPlan};
use crate::error::{shape_err, Error, Result};
use crate::harness::Example;
use serde::{Deserialize, Serialize};

use crate::numerics::{dot, log_sum_exp, norm, softmax_cross_entropy, Tensor};

pub const DEFAULT_TAU: f64 = 0.8;
pub const DEFAULT_LAMBDA: f64 = 0.1;

/// Representations of one minibatch, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct RepresentationBatch {
    pub vectors: Tensor,
    pub labels: Vec<usize>,
    pub task: usize,
}

impl RepresentationBatch {
    pub fn new(rows: &[Vec<f64>], labels: Vec<usize>, task: usize) -> Result<Self> {
        if rows.is_empty() || rows.len() != labels.len() {
            return Err(Error::Input(format!("{} vectors for {} labels", rows.len(), labels.len())));
        }
        Ok(Self { vectors: Tensor::from_rows(rows)?, labels, task })
    }
}

/// A linear output layer `W h + b` with `W: out x D`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearHead {
    pub fn zeros(out: usize, dim: usize) -> Self {
        Self { w: Tensor::zeros(&[out, dim]), b: Tensor::zeros(&[out]) }
    }

    pub fn outputs(&self) -> usize {
        self.w.rows()
    }

    pub fn dim(&self) -> usize {
        self.w.cols()
    }

    pub fn logit(&self, h: &[f64], k: usize) -> f64 {
        dot(self.w.row_slice(k), h) + self.b.data()[k]
    }

    /// Logits of the listed outputs, in list order.
    pub fn logits(&self, h: &[f64], outputs: &[usize]) -> Vec<f64> {
        outputs.iter().map(|&k| self.logit(h, k)).collect()
    }

    /// The listed output with the largest logit; ties go to the earliest.
    pub fn argmax(&self, h: &[f64], outputs: &[usize]) -> usize {
        outputs[crate::backbone::argmax(&self.logits(h, outputs))]
    }

    pub fn zero_grad(&self) -> HeadGrad {
        HeadGrad { w: Tensor::zeros(self.w.shape()), b: Tensor::zeros(self.b.shape()) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrad {
    pub w: Tensor,
    pub b: Tensor,
}

/// Mean cross-entropy over `outputs`-masked logits: value, head gradient,
/// and per-sample gradient w.r.t. each input vector.
pub fn masked_cross_entropy(
    head: &LinearHead,
    reps: &[Vec<f64>],
    labels: &[usize],
    outputs: &[usize],
) -> Result<(f64, HeadGrad, Vec<Vec<f64>>)> {
    if reps.is_empty() || reps.len() != labels.len() {
        return Err(Error::Input(format!("{} vectors for {} labels", reps.len(), labels.len())));
    }
    if outputs.iter().any(|&k| k >= head.outputs()) {
        return Err(shape_err("masked output beyond head size"));
    }
    let n = reps.len() as f64;
    let mut grad = head.zero_grad();
    let mut dreps = Vec::with_capacity(reps.len());
    let mut total = 0.0;
    for (h, &y) in reps.iter().zip(labels) {
        if h.len() != head.dim() {
            return Err(shape_err(format!("vector of dim {} for head of dim {}", h.len(), head.dim())));
        }
        let pos = outputs
            .iter()
            .position(|&k| k == y)
            .ok_or_else(|| Error::Input(format!("label {y} outside the active outputs")))?;
        let (loss, dl) = softmax_cross_entropy(&head.logits(h, outputs), pos)?;
        total += loss;
        let mut dh = vec![0.0; h.len()];
        for (&k, &g) in outputs.iter().zip(&dl) {
            let g = g / n;
            grad.b.data_mut()[k] += g;
            for (gw, hv) in grad.w.row_slice_mut(k).iter_mut().zip(h) {
                *gw += g * hv;
            }
            for (d, wv) in dh.iter_mut().zip(head.w.row_slice(k)) {
                *d += g * wv;
            }
        }
        dreps.push(dh);
    }
    Ok((total / n, grad, dreps))
}

/// Contrastive regularization of batch vectors `H` against old class anchors.
///
/// For each `h`, averages over anchors `μ_c` the log-ratio of `exp(h·μ_c/τ)`
/// to `Σ_{h'∈H} exp(h·h'/τ) + Σ_c exp(h·μ_c/τ)` (with `h' = h` included),
/// and sums over `h`. Zero when there are no anchors.
pub fn cr_loss(h: &Tensor, anchors: &[Vec<f64>], tau: f64) -> Result<(f64, Tensor)> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let (b, d) = (h.rows(), h.cols());
    if anchors.is_empty() || b == 0 {
        return Ok((0.0, Tensor::zeros(h.shape())));
    }
    if anchors.iter().any(|m| m.len() != d) {
        return Err(shape_err("anchor dimension differs from batch"));
    }
    let c = anchors.len();
    let mu = Tensor::from_rows(anchors)?;
    let hh = h.matmul_t(h)?.scale(1.0 / tau);
    let hm = h.matmul_t(&mu)?.scale(1.0 / tau);
    let mut total = 0.0;
    // Softmax weights over the joint denominator, per row.
    let mut w_hh = Tensor::zeros(&[b, b]);
    let mut w_hm = Tensor::zeros(&[b, c]);
    let mut scores = Vec::with_capacity(b + c);
    for i in 0..b {
        scores.clear();
        scores.extend_from_slice(hh.row_slice(i));
        scores.extend_from_slice(hm.row_slice(i));
        let lse = log_sum_exp(&scores);
        total += hm.row_slice(i).iter().sum::<f64>() / c as f64 - lse;
        for (j, s) in hh.row_slice(i).iter().enumerate() {
            w_hh.set2(i, j, (s - lse).exp());
        }
        for (k, s) in hm.row_slice(i).iter().enumerate() {
            w_hm.set2(i, k, (s - lse).exp());
        }
    }
    // dL/dH = 1 μ̄ᵀ/τ − (W_hh + W_hhᵀ) H/τ − W_hm M/τ
    let mean_mu: Vec<f64> = (0..d).map(|j| (0..c).map(|k| mu.get2(k, j)).sum::<f64>() / c as f64).collect();
    let sym = w_hh.add(&w_hh.transpose())?;
    let mut grad = sym.matmul(h)?.add(&w_hm.matmul(&mu)?)?.scale(-1.0 / tau);
    for i in 0..b {
        for (g, m) in grad.row_slice_mut(i).iter_mut().zip(&mean_mu) {
            *g += m / tau;
        }
    }
    Ok((total, grad))
}

/// Similarity inside the contrastive term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrSimilarity {
    /// Raw inner products.
    #[default]
    Dot,
    /// Inner products of unit-normalized vectors; bounded, so the term
    /// cannot outgrow the cross-entropy on wide, layer-normed outputs.
    Cosine,
}

/// [`cr_loss`] on unit-normalized batch vectors and anchors, with the
/// gradient taken w.r.t. the unnormalized batch. Zero vectors stay zero.
pub fn cr_loss_cosine(h: &Tensor, anchors: &[Vec<f64>], tau: f64) -> Result<(f64, Tensor)> {
    let unit = |v: &[f64]| -> (Vec<f64>, f64) {
        let n = norm(v);
        if n == 0.0 {
            (v.to_vec(), 0.0)
        } else {
            (v.iter().map(|x| x / n).collect(), n)
        }
    };
    let (rows, norms): (Vec<Vec<f64>>, Vec<f64>) = (0..h.rows()).map(|i| unit(h.row_slice(i))).unzip();
    let mu: Vec<Vec<f64>> = anchors.iter().map(|m| unit(m).0).collect();
    if rows.is_empty() {
        return cr_loss(h, &mu, tau);
    }
    let (loss, gu) = cr_loss(&Tensor::from_rows(&rows)?, &mu, tau)?;
    let mut grad = Tensor::zeros(h.shape());
    for (i, (u, &n)) in rows.iter().zip(&norms).enumerate() {
        if n == 0.0 {
            continue;
        }
        // (I - u uᵀ) g / |h|
        let g = gu.row_slice(i);
        let along = dot(u, g);
        for ((o, gi), ui) in grad.row_slice_mut(i).iter_mut().zip(g).zip(u) {
            *o = (gi - along * ui) / n;
        }
    }
    Ok((loss, grad))
}

pub struct WtpParams<'a> {
    pub backbone: &'a Backbone,
    pub plan: &'a PromptInjectionPlan,
    /// The prompt `p_t` used for the forward pass.
    pub prompt: &'a [Tensor],
    pub task_classes: &'a [usize],
    pub anchors: &'a [Vec<f64>],
    pub lambda: f64,
    pub tau: f64,
    pub similarity: CrSimilarity,
}

#[derive(Clone, Debug)]
pub struct WtpOutput {
    pub loss: f64,
    pub ce: f64,
    pub cr: f64,
    /// Gradient w.r.t. `p_t`, one tensor per injected layer.
    pub grad_prompt: Vec<Tensor>,
    pub grad_head: HeadGrad,
    /// Instructed representations of the batch (detached).
    pub reps: Vec<Vec<f64>>,
}

/// Within-task prediction: cross-entropy on logits masked to the current
/// task's classes (batch mean) plus `λ` times the contrastive term.
pub fn wtp_loss(batch: &[&Example], head: &LinearHead, p: &WtpParams<'_>) -> Result<WtpOutput> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    if let Some(e) = batch.iter().find(|e| !p.task_classes.contains(&e.label)) {
        return Err(Error::Input(format!("label {} outside the current task", e.label)));
    }
    let passes: Vec<_> = batch
        .par_iter()
        .map(|e| p.backbone.instructed_pass(&e.input, p.prompt, p.plan))
        .collect::<Result<_>>()?;
    let reps: Vec<Vec<f64>> = passes.iter().map(|ps| ps.representation()).collect();
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
    let (ce, grad_head, mut dreps) = masked_cross_entropy(head, &reps, &labels, p.task_classes)?;
    let (cr, dcr) = if p.lambda != 0.0 {
        let h = Tensor::from_rows(&reps)?;
        match p.similarity {
            CrSimilarity::Dot => cr_loss(&h, p.anchors, p.tau)?,
            CrSimilarity::Cosine => cr_loss_cosine(&h, p.anchors, p.tau)?,
        }
    } else {
        (0.0, Tensor::zeros(&[reps.len(), head.dim()]))
    };
    for (i, d) in dreps.iter_mut().enumerate() {
        for (a, g) in d.iter_mut().zip(dcr.row_slice(i)) {
            *a += p.lambda * g;
        }
    }
    let per_sample: Vec<Vec<Tensor>> = passes.par_iter().zip(&dreps).map(|(ps, d)| ps.backward(d)).collect();
    let mut grad_prompt: Vec<Tensor> = p.prompt.iter().map(|t| Tensor::zeros(t.shape())).collect();
    for g in &per_sample {
        for (acc, x) in grad_prompt.iter_mut().zip(g) {
            acc.add_assign(x);
        }
    }
    Ok(WtpOutput { loss: ce + p.lambda * cr, ce, cr, grad_prompt, grad_head, reps })
}

/// Task-identity inference: mean cross-entropy of `ω` over the first `tasks`
/// outputs against the task index of each uninstructed pseudo representation.
pub fn tii_loss(omega: &LinearHead, reps: &[Vec<f64>], task_labels: &[usize], tasks: usize) -> Result<(f64, HeadGrad)> {
    if tasks == 0 || tasks > omega.outputs() {
        return Err(Error::Config(format!("{tasks} active tasks for a head of {}", omega.outputs())));
    }
    if let Some(&bad) = task_labels.iter().find(|&&l| l >= tasks) {
        return Err(Error::Input(format!("task label {bad} with {tasks} active tasks")));
    }
    let outputs: Vec<usize> = (0..tasks).collect();
    let (loss, g, _) = masked_cross_entropy(omega, reps, task_labels, &outputs)?;
    Ok((loss, g))
}

/// Task-adaptive prediction: mean cross-entropy of `ψ` over all seen classes.
pub fn tap_loss(psi: &LinearHead, reps: &[Vec<f64>], labels: &[usize], seen: &[usize]) -> Result<(f64, HeadGrad)> {
    let (loss, g, _) = masked_cross_entropy(psi, reps, labels, seen)?;
    Ok((loss, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, BackboneWeights, PromptMode};
    use crate::numerics::{grad_check, seeded_rng};
    use proptest::prelude::{prop, prop_assert, proptest};
    use rand::Rng;

    fn rand_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = seeded_rng(seed, 3);
        (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    /// Direct evaluation of the contrastive term, written independently of `cr_loss`.
    fn cr_reference(h: &[Vec<f64>], mu: &[Vec<f64>], tau: f64) -> f64 {
        let mut total = 0.0;
        for hi in h {
            let denom: f64 = h.iter().map(|hj| (dot(hi, hj) / tau).exp()).sum::<f64>()
                + mu.iter().map(|m| (dot(hi, m) / tau).exp()).sum::<f64>();
            let avg: f64 = mu.iter().map(|m| ((dot(hi, m) / tau).exp() / denom).ln()).sum::<f64>() / mu.len() as f64;
            total += avg;
        }
        total
    }

    #[test]
    fn cr_without_anchors_is_zero() {
        let h = Tensor::from_rows(&rand_rows(3, 4, 1)).unwrap();
        let (l, g) = cr_loss(&h, &[], 0.8).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, Tensor::zeros(&[3, 4]));
        assert!(matches!(cr_loss(&h, &[], 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn cr_hand_value() {
        let h = Tensor::row(vec![1.0, 0.0]);
        let (l, _) = cr_loss(&h, &[vec![0.0, 1.0]], 1.0).unwrap();
        let expect = (1.0 / (1f64.exp() + 1.0)).ln();
        assert!((l - expect).abs() < 1e-12);
        assert!((l + 1.313262).abs() < 1e-6);
    }

    #[test]
    fn cr_matches_reference_and_grad_check() {
        let rows = rand_rows(5, 6, 2);
        let mu = rand_rows(3, 6, 3);
        let h = Tensor::from_rows(&rows).unwrap();
        let (l, g) = cr_loss(&h, &mu, 0.8).unwrap();
        assert!((l - cr_reference(&rows, &mu, 0.8)).abs() < 1e-12);
        let err = grad_check(|x| cr_loss(x, &mu, 0.8).unwrap().0, &h, &g, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn uniform_heads_give_log_categories() {
        let reps = rand_rows(4, 3, 5);
        let omega = LinearHead::zeros(6, 3);
        let (l, _) = tii_loss(&omega, &reps, &[0, 1, 2, 3], 4).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let (one, _) = tii_loss(&omega, &reps, &[0; 4], 1).unwrap();
        assert_eq!(one, 0.0);
        assert!(matches!(tii_loss(&omega, &reps, &[0, 1, 2, 4], 4), Err(Error::Input(_))));
        let psi = LinearHead::zeros(10, 3);
        let (l, _) = tap_loss(&psi, &reps, &[2, 5, 7, 2], &[2, 5, 7]).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
        let (one, _) = tap_loss(&psi, &reps[..1], &[4], &[4]).unwrap();
        assert_eq!(one, 0.0);
        assert!(matches!(tap_loss(&psi, &reps[..1], &[3], &[2, 5]), Err(Error::Input(_))));
    }

    #[test]
    fn head_gradients_pass_grad_check() {
        let reps = rand_rows(6, 4, 7);
        let labels = [1, 3, 3, 0, 1, 0];
        let mut head = LinearHead::zeros(5, 4);
        head.w = Tensor::from_rows(&rand_rows(5, 4, 8)).unwrap();
        head.b = Tensor::vector(vec![0.1, -0.2, 0.3, 0.0, 0.5]);
        let outputs = [0, 1, 3];
        let (_, g, dreps) = masked_cross_entropy(&head, &reps, &labels, &outputs).unwrap();
        let ew = grad_check(
            |w| masked_cross_entropy(&LinearHead { w: w.clone(), b: head.b.clone() }, &reps, &labels, &outputs).unwrap().0,
            &head.w,
            &g.w,
            1e-6,
        )
        .unwrap();
        assert!(ew < 1e-6, "{ew}");
        let eb = grad_check(
            |b| masked_cross_entropy(&LinearHead { w: head.w.clone(), b: b.clone() }, &reps, &labels, &outputs).unwrap().0,
            &head.b,
            &g.b,
            1e-6,
        )
        .unwrap();
        assert!(eb < 1e-6, "{eb}");
        // Masked-out rows receive no gradient.
        assert!(g.w.row_slice(2).iter().all(|&v| v == 0.0));
        let r0 = Tensor::vector(reps[0].clone());
        let eh = grad_check(
            |x| {
                let mut rs = reps.clone();
                rs[0] = x.data().to_vec();
                masked_cross_entropy(&head, &rs, &labels, &outputs).unwrap().0
            },
            &r0,
            &Tensor::vector(dreps[0].clone()),
            1e-6,
        )
        .unwrap();
        assert!(eh < 1e-6, "{eh}");
    }

    fn wtp_fixture() -> (Backbone, PromptInjectionPlan, Vec<Tensor>, Vec<Example>, LinearHead) {
        let cfg = BackboneConfig { image_size: 8, channels: 1, patch_size: 4, dim: 8, layers: 2, heads: 2, mlp_hidden: 8 };
        let mut bb = Backbone::transformer(BackboneWeights::random(&cfg, 3).unwrap());
        bb.freeze();
        let plan = PromptInjectionPlan { mode: PromptMode::PreT, layers: vec![0, 1], length: 2 };
        let prompts: Vec<Tensor> = (0..2).map(|i| Tensor::from_rows(&rand_rows(2, 8, 10 + i)).unwrap()).collect();
        let examples: Vec<Example> = (0..4)
            .map(|i| Example {
                input: Tensor::new(vec![8, 8, 1], rand_rows(1, 64, 20 + i)[0].clone()).unwrap(),
                label: [4, 5, 4, 5][i as usize],
            })
            .collect();
        let mut head = LinearHead::zeros(6, 8);
        head.w = Tensor::from_rows(&rand_rows(6, 8, 30)).unwrap();
        (bb, plan, prompts, examples, head)
    }

    #[test]
    fn cosine_cr_matches_dot_on_unit_vectors_and_passes_grad_check() {
        let h = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let (l, _) = cr_loss_cosine(&h, &[vec![0.0, 3.0]], 1.0).unwrap();
        assert!((l - (1.0 / (std::f64::consts::E + 1.0)).ln()).abs() < 1e-12);
        let h = Tensor::from_rows(&rand_rows(5, 4, 70)).unwrap();
        let mu = rand_rows(3, 4, 71);
        let scaled = h.scale(7.5);
        assert!((cr_loss_cosine(&h, &mu, 0.8).unwrap().0 - cr_loss_cosine(&scaled, &mu, 0.8).unwrap().0).abs() < 1e-12);
        let (_, g) = cr_loss_cosine(&h, &mu, 0.8).unwrap();
        let err = grad_check(|x| cr_loss_cosine(x, &mu, 0.8).unwrap().0, &h, &g, 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
        let (l0, g0) = cr_loss_cosine(&h, &[], 0.8).unwrap();
        assert_eq!(l0, 0.0);
        assert_eq!(g0.frobenius(), 0.0);
    }

    #[test]
    fn wtp_prompt_gradient_passes_grad_check() {
        check_wtp_gradient(CrSimilarity::Dot);
        check_wtp_gradient(CrSimilarity::Cosine);
    }

    fn check_wtp_gradient(similarity: CrSimilarity) {
        let (bb, plan, prompts, examples, head) = wtp_fixture();
        let batch: Vec<&Example> = examples.iter().collect();
        let anchors = rand_rows(2, 8, 40);
        let classes = [4, 5];
        let params = |pr: &[Tensor]| -> f64 {
            let p = WtpParams {
                backbone: &bb,
                plan: &plan,
                prompt: pr,
                task_classes: &classes,
                anchors: &anchors,
                lambda: 0.1,
                tau: 0.8,
                similarity,
            };
            wtp_loss(&batch, &head, &p).unwrap().loss
        };
        let p = WtpParams {
            backbone: &bb,
            plan: &plan,
            prompt: &prompts,
            task_classes: &classes,
            anchors: &anchors,
            lambda: 0.1,
            tau: 0.8,
            similarity,
        };
        let out = wtp_loss(&batch, &head, &p).unwrap();
        assert!(out.cr != 0.0);
        for slot in 0..2 {
            let err = grad_check(
                |x| {
                    let mut pr = prompts.clone();
                    pr[slot] = x.clone();
                    params(&pr)
                },
                &prompts[slot],
                &out.grad_prompt[slot],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-3, "slot {slot}: {err}");
        }
        let zero = WtpParams { lambda: 0.0, ..p };
        let ce_only = wtp_loss(&batch, &head, &zero).unwrap();
        assert_eq!(ce_only.loss, ce_only.ce);
        let bad = Example { input: examples[0].input.clone(), label: 0 };
        assert!(matches!(wtp_loss(&[&bad], &head, &zero), Err(Error::Input(_))));
    }

    proptest! {
        #[test]
        fn cr_is_permutation_invariant(seed in 0u64..1000, b in 1usize..5, c in 1usize..4) {
            let rows = rand_rows(b, 3, seed);
            let mu = rand_rows(c, 3, seed + 1);
            let (l, _) = cr_loss(&Tensor::from_rows(&rows).unwrap(), &mu, 0.8).unwrap();
            let mut rr = rows.clone();
            rr.reverse();
            let mut mr = mu.clone();
            mr.rotate_left(1);
            let (l2, _) = cr_loss(&Tensor::from_rows(&rr).unwrap(), &mr, 0.8).unwrap();
            prop_assert!((l - l2).abs() < 1e-12);
        }

        #[test]
        fn cr_gradient_matches_finite_differences(
            rows in prop::collection::vec(prop::collection::vec(-1.5f64..1.5, 3), 1..5),
            mu in prop::collection::vec(prop::collection::vec(-1.5f64..1.5, 3), 1..4),
            tau in 0.3f64..2.0,
        ) {
            let h = Tensor::from_rows(&rows).unwrap();
            let (_, g) = cr_loss(&h, &mu, tau).unwrap();
            let err = grad_check(|x| cr_loss(x, &mu, tau).unwrap().0, &h, &g, 1e-5).unwrap();
            prop_assert!(err < 1e-5, "{}", err);
        }
    }
}
