//! A small vision transformer used as the frozen feature extractor `f_θ`,
//! with prompt injection points for prompt tuning and prefix tuning.
//!
//! The representation of an input is the final-layer class token after the
//! closing layer norm, both with and without prompts. In embedding-file mode
//! the transformer is bypassed and stored vectors are passed through.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{shape_err, Error, Result};
use crate::harness::Example;
use crate::numerics::{adam_step, seeded_rng, softmax_cross_entropy, AdamState, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { image_size: 32, channels: 3, patch_size: 4, dim: 64, layers: 4, heads: 4, mlp_hidden: 128 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("dim {} not divisible by heads {}", self.dim, self.heads)));
        }
        if self.channels == 0 || self.layers == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("channels, layers and mlp_hidden must be positive".into()));
        }
        Ok(())
    }

    /// Token count including the class token.
    pub fn tokens(&self) -> usize {
        let side = self.image_size / self.patch_size;
        1 + side * side
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    /// Prompt tuning: the prompt is prepended to queries, keys and values.
    ProT,
    /// Prefix tuning: the prompt is split into key and value prefixes.
    PreT,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptInjectionPlan {
    pub mode: PromptMode,
    /// Zero-based layer indices receiving a prompt.
    pub layers: Vec<usize>,
    pub length: usize,
}

impl Default for PromptInjectionPlan {
    fn default() -> Self {
        Self { mode: PromptMode::PreT, layers: vec![0, 1], length: 20 }
    }
}

impl PromptInjectionPlan {
    pub fn validate(&self, config: &BackboneConfig) -> Result<()> {
        let mut seen = self.layers.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.layers.len() {
            return Err(Error::Config("duplicate prompt layer".into()));
        }
        if let Some(&bad) = self.layers.iter().find(|&&l| l >= config.layers) {
            return Err(Error::Config(format!("prompt layer {bad} >= layer count {}", config.layers)));
        }
        if self.mode == PromptMode::PreT && !self.length.is_multiple_of(2) {
            return Err(Error::Config(format!("prefix length {} must be even", self.length)));
        }
        Ok(())
    }

    /// Position of `layer` within the prompt list, if it is injected.
    pub fn slot(&self, layer: usize) -> Option<usize> {
        self.layers.iter().position(|&l| l == layer)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

const LAYER_FIELDS: [&str; 12] =
    ["ln1_gain", "ln1_bias", "w_q", "w_k", "w_v", "w_o", "ln2_gain", "ln2_bias", "w1", "b1", "w2", "b2"];

impl LayerWeights {
    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// Parameters `θ` of the transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights {
    pub config: BackboneConfig,
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub cls: Tensor,
    pub pos: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
}

fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

impl BackboneWeights {
    pub fn random(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed, 0xB0);
        let d = config.dim;
        let h = config.mlp_hidden;
        let p = config.patch_len();
        let sd = 1.0 / (d as f64).sqrt();
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                ln1_gain: Tensor::full(&[1, d], 1.0),
                ln1_bias: Tensor::zeros(&[1, d]),
                w_q: normal(&mut rng, &[d, d], sd),
                w_k: normal(&mut rng, &[d, d], sd),
                w_v: normal(&mut rng, &[d, d], sd),
                w_o: normal(&mut rng, &[d, d], 0.5 * sd),
                ln2_gain: Tensor::full(&[1, d], 1.0),
                ln2_bias: Tensor::zeros(&[1, d]),
                w1: normal(&mut rng, &[d, h], sd),
                b1: Tensor::zeros(&[1, h]),
                w2: normal(&mut rng, &[h, d], 0.5 / (h as f64).sqrt()),
                b2: Tensor::zeros(&[1, d]),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            patch_w: normal(&mut rng, &[p, d], 1.0 / (p as f64).sqrt()),
            patch_b: Tensor::zeros(&[1, d]),
            cls: normal(&mut rng, &[1, d], 0.5),
            pos: normal(&mut rng, &[config.tokens(), d], 0.1),
            layers,
            final_gain: Tensor::full(&[1, d], 1.0),
            final_bias: Tensor::zeros(&[1, d]),
        })
    }

    /// All tensors in a fixed order, with their checkpoint names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("backbone/patch_w".to_string(), &self.patch_w),
            ("backbone/patch_b".to_string(), &self.patch_b),
            ("backbone/cls".to_string(), &self.cls),
            ("backbone/pos".to_string(), &self.pos),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_FIELDS.iter().zip(layer.tensors()) {
                out.push((format!("backbone/layer{i}/{name}"), t));
            }
        }
        out.push(("backbone/final_gain".to_string(), &self.final_gain));
        out.push(("backbone/final_bias".to_string(), &self.final_bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.patch_w, &mut self.patch_b, &mut self.cls, &mut self.pos];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.final_bias);
        out
    }

    /// Rebuilds weights from named tensors (as produced by [`named_tensors`]).
    ///
    /// [`named_tensors`]: Self::named_tensors
    pub fn from_named(config: &BackboneConfig, lookup: impl Fn(&str) -> Option<Tensor>) -> Result<Self> {
        let mut w = Self::random(config, 0)?;
        let names: Vec<String> = w.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(w.tensors_mut()) {
            let t = lookup(name).ok_or_else(|| Error::Input(format!("missing tensor {name}")))?;
            if t.len() != slot.len() {
                return Err(shape_err(format!("{name}: expected {} values, got {}", slot.len(), t.len())));
            }
            *slot = t.reshape(slot.shape().to_vec())?;
        }
        Ok(w)
    }

    pub fn checksum(&self) -> Checksum {
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            for b in t.le_bytes() {
                h.update([b]);
            }
        }
        Checksum(h.finalize().into())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Checksum(pub [u8; 32]);

impl fmt::Display for Checksum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for Checksum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Checksum({self})")
    }
}

/// SHA-256 over the little-endian bytes of a list of tensors.
pub fn checksum_tensors<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> Checksum {
    let mut h = Sha256::new();
    for t in tensors {
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    Checksum(h.finalize().into())
}

/// Splits an `H x W x C` raster into flattened patches, one per row.
fn patchify(config: &BackboneConfig, image: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(shape_err(format!("image must be HxWxC, got {s:?}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let ps = config.patch_size;
    if h % ps != 0 || w % ps != 0 {
        return Err(shape_err(format!("{h}x{w} image not divisible by patch size {ps}")));
    }
    if c != config.channels || (1 + (h / ps) * (w / ps)) != config.tokens() {
        return Err(shape_err(format!("image {s:?} does not match backbone config")));
    }
    let (ph, pw) = (h / ps, w / ps);
    let plen = ps * ps * c;
    let mut out = Vec::with_capacity(ph * pw * plen);
    let px = image.data();
    for py in 0..ph {
        for pxi in 0..pw {
            for dy in 0..ps {
                let row = py * ps + dy;
                let start = (row * w + pxi * ps) * c;
                out.extend_from_slice(&px[start..start + ps * c]);
            }
        }
    }
    Tensor::matrix(ph * pw, plen, out)
}

/// Tape handles for every backbone tensor, in [`BackboneWeights::named_tensors`] order.
struct WeightVars {
    all: Vec<Var>,
}

impl WeightVars {
    fn load<'w>(tape: &mut Tape<'w>, w: &'w BackboneWeights, trainable: bool) -> Self {
        let all = w
            .named_tensors()
            .into_iter()
            .map(|(_, t)| if trainable { tape.param(t) } else { tape.constant(t) })
            .collect();
        Self { all }
    }
    fn patch_w(&self) -> Var {
        self.all[0]
    }
    fn patch_b(&self) -> Var {
        self.all[1]
    }
    fn cls(&self) -> Var {
        self.all[2]
    }
    fn pos(&self) -> Var {
        self.all[3]
    }
    fn layer(&self, l: usize, field: usize) -> Var {
        self.all[4 + l * LAYER_FIELDS.len() + field]
    }
    fn final_gain(&self) -> Var {
        self.all[self.all.len() - 2]
    }
    fn final_bias(&self) -> Var {
        self.all[self.all.len() - 1]
    }
}

/// Returns `(h_Q, h_K, h_V)` after attaching `prompt` to the layer input `h`.
pub fn attach_prompt(prompt: &Tensor, h: &Tensor, mode: PromptMode) -> Result<(Tensor, Tensor, Tensor)> {
    let mut tape = Tape::new();
    let p = tape.constant(prompt);
    let hv = tape.constant(h);
    let (q, k, v) = attach_on_tape(&mut tape, p, hv, mode)?;
    Ok((tape.value(q).clone(), tape.value(k).clone(), tape.value(v).clone()))
}

fn attach_on_tape(tape: &mut Tape<'_>, p: Var, h: Var, mode: PromptMode) -> Result<(Var, Var, Var)> {
    let lp = tape.value(p).rows();
    let pcols = if tape.value(p).is_empty() { tape.value(h).cols() } else { tape.value(p).cols() };
    if pcols != tape.value(h).cols() {
        return Err(shape_err(format!("prompt dim {pcols} vs token dim {}", tape.value(h).cols())));
    }
    if lp == 0 || tape.value(p).is_empty() {
        return Ok((h, h, h));
    }
    match mode {
        PromptMode::ProT => {
            let cat = tape.concat_rows(&[p, h]);
            Ok((cat, cat, cat))
        }
        PromptMode::PreT => {
            if !lp.is_multiple_of(2) {
                return Err(Error::Config(format!("prefix length {lp} must be even")));
            }
            let half = lp / 2;
            let pk = tape.slice_rows(p, 0, half);
            let pv = tape.slice_rows(p, half, half);
            let k = tape.concat_rows(&[pk, h]);
            let v = tape.concat_rows(&[pv, h]);
            Ok((h, k, v))
        }
    }
}

struct AttnVars {
    w_q: Var,
    w_k: Var,
    w_v: Var,
    w_o: Var,
}

fn msa_on_tape(tape: &mut Tape<'_>, hq: Var, hk: Var, hv: Var, w: &AttnVars, heads: usize) -> Result<Var> {
    let d = tape.value(hq).cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("dim {d} not divisible by {heads} heads")));
    }
    if tape.value(hk).rows() != tape.value(hv).rows() {
        return Err(shape_err("keys and values differ in length"));
    }
    let dh = d / heads;
    let q = tape.matmul(hq, w.w_q);
    let k = tape.matmul(hk, w.w_k);
    let v = tape.matmul(hv, w.w_v);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for i in 0..heads {
        let (qi, ki, vi) = if heads == 1 {
            (q, k, v)
        } else {
            (tape.slice_cols(q, i * dh, dh), tape.slice_cols(k, i * dh, dh), tape.slice_cols(v, i * dh, dh))
        };
        let s = tape.matmul_t(qi, ki);
        let s = tape.scale(s, scale);
        let a = tape.softmax_rows(s);
        outs.push(tape.matmul(a, vi));
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs) };
    Ok(tape.matmul(cat, w.w_o))
}

/// Multi-head self-attention of one layer on explicit query/key/value inputs.
pub fn msa(hq: &Tensor, hk: &Tensor, hv: &Tensor, layer: &LayerWeights, heads: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (q, k, v) = (tape.constant(hq), tape.constant(hk), tape.constant(hv));
    let w = AttnVars {
        w_q: tape.constant(&layer.w_q),
        w_k: tape.constant(&layer.w_k),
        w_v: tape.constant(&layer.w_v),
        w_o: tape.constant(&layer.w_o),
    };
    let out = msa_on_tape(&mut tape, q, k, v, &w, heads)?;
    Ok(tape.value(out).clone())
}

/// Per-head attention weight matrices (`L_q x L_k`), for inspection.
pub fn attention_weights(hq: &Tensor, hk: &Tensor, layer: &LayerWeights, heads: usize) -> Result<Vec<Tensor>> {
    let d = hq.cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("dim {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let q = hq.matmul(&layer.w_q)?;
    let k = hk.matmul(&layer.w_k)?;
    let scale = 1.0 / (dh as f64).sqrt();
    (0..heads)
        .map(|i| {
            let mut s = q.slice_cols(i * dh, dh).matmul_t(&k.slice_cols(i * dh, dh))?.scale(scale);
            for r in 0..s.rows() {
                crate::numerics::softmax_in_place(s.row_slice_mut(r));
            }
            Ok(s)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
enum Kind {
    Transformer(Box<BackboneWeights>),
    Embedding { dim: usize },
}

/// The feature extractor, either a transformer or a pass-through for
/// precomputed embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    kind: Kind,
    frozen: Option<Checksum>,
}

/// A forward pass with prompts whose gradient can be pulled back to them.
pub struct InstructedPass<'w> {
    tape: Tape<'w>,
    rep: Var,
    prompts: Vec<Var>,
}

impl InstructedPass<'_> {
    pub fn representation(&self) -> Vec<f64> {
        self.tape.value(self.rep).data().to_vec()
    }

    /// Gradient w.r.t. each injected prompt given `d loss / d representation`.
    pub fn backward(&self, grad_rep: &[f64]) -> Vec<Tensor> {
        let seed = Tensor::row(grad_rep.to_vec());
        let mut g = self.tape.backward(self.rep, seed);
        self.prompts
            .iter()
            .map(|&p| g.take(p).unwrap_or_else(|| Tensor::zeros(self.tape.value(p).shape())))
            .collect()
    }
}

impl Backbone {
    pub fn transformer(weights: BackboneWeights) -> Self {
        Self { kind: Kind::Transformer(Box::new(weights)), frozen: None }
    }

    /// Pass-through extractor for precomputed `dim`-dimensional vectors.
    pub fn embedding(dim: usize) -> Self {
        let mut b = Self { kind: Kind::Embedding { dim }, frozen: None };
        b.freeze();
        b
    }

    pub fn weights(&self) -> Option<&BackboneWeights> {
        match &self.kind {
            Kind::Transformer(w) => Some(w),
            Kind::Embedding { .. } => None,
        }
    }

    pub fn config(&self) -> Option<&BackboneConfig> {
        self.weights().map(|w| &w.config)
    }

    pub fn is_embedding(&self) -> bool {
        matches!(self.kind, Kind::Embedding { .. })
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            Kind::Transformer(w) => w.config.dim,
            Kind::Embedding { dim } => *dim,
        }
    }

    pub fn checksum(&self) -> Checksum {
        match &self.kind {
            Kind::Transformer(w) => w.checksum(),
            Kind::Embedding { dim } => checksum_tensors([&Tensor::vector(vec![*dim as f64])]),
        }
    }

    pub fn freeze(&mut self) -> Checksum {
        let c = self.checksum();
        self.frozen = Some(c);
        c
    }

    pub fn frozen_checksum(&self) -> Option<Checksum> {
        self.frozen
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.is_some()
    }

    fn require_frozen(&self) -> Result<()> {
        if self.frozen.is_none() {
            return Err(Error::State("backbone must be frozen before extracting features".into()));
        }
        Ok(())
    }

    /// Token sequence `L_h x D`: class token, projected patches, positions.
    pub fn patch_embed(&self, image: &Tensor) -> Result<Tensor> {
        let w = self.weights().ok_or_else(|| Error::UnsupportedMode("patch_embed in embedding mode".into()))?;
        let mut tape = Tape::new();
        let vars = WeightVars::load(&mut tape, w, false);
        let tokens = embed_on_tape(&mut tape, w, &vars, image)?;
        Ok(tape.value(tokens).clone())
    }

    /// `q(x) = f_θ(x)[0]`.
    pub fn forward_uninstructed(&self, x: &Tensor) -> Result<Vec<f64>> {
        self.require_frozen()?;
        match &self.kind {
            Kind::Embedding { dim } => {
                if x.rank() != 1 || x.len() != *dim {
                    return Err(shape_err(format!("expected a {dim}-vector, got {:?}", x.shape())));
                }
                Ok(x.data().to_vec())
            }
            Kind::Transformer(w) => {
                let mut tape = Tape::new();
                let vars = WeightVars::load(&mut tape, w, false);
                let rep = forward_on_tape(&mut tape, w, &vars, x, None)?;
                Ok(tape.value(rep).data().to_vec())
            }
        }
    }

    /// `f_θ(x; p)` with one prompt per layer in `plan.layers`.
    pub fn forward_instructed(&self, x: &Tensor, prompts: &[Tensor], plan: &PromptInjectionPlan) -> Result<Vec<f64>> {
        self.check_prompts(prompts, plan)?;
        let w = self.weights().expect("checked");
        let mut tape = Tape::new();
        let vars = WeightVars::load(&mut tape, w, false);
        let pv: Vec<Var> = prompts.iter().map(|p| tape.constant(p)).collect();
        let rep = forward_on_tape(&mut tape, w, &vars, x, Some((plan, &pv)))?;
        Ok(tape.value(rep).data().to_vec())
    }

    /// Like [`forward_instructed`](Self::forward_instructed) but keeps the tape for back-propagation into the prompts.
    pub fn instructed_pass<'w>(
        &'w self,
        x: &Tensor,
        prompts: &'w [Tensor],
        plan: &PromptInjectionPlan,
    ) -> Result<InstructedPass<'w>> {
        self.check_prompts(prompts, plan)?;
        let w = self.weights().expect("checked");
        let mut tape = Tape::new();
        let vars = WeightVars::load(&mut tape, w, false);
        let pv: Vec<Var> = prompts.iter().map(|p| tape.param(p)).collect();
        let rep = forward_on_tape(&mut tape, w, &vars, x, Some((plan, &pv)))?;
        Ok(InstructedPass { tape, rep, prompts: pv })
    }

    fn check_prompts(&self, prompts: &[Tensor], plan: &PromptInjectionPlan) -> Result<()> {
        self.require_frozen()?;
        let Some(w) = self.weights() else {
            return Err(Error::UnsupportedMode("prompts require the transformer backbone".into()));
        };
        plan.validate(&w.config)?;
        if prompts.len() != plan.layers.len() {
            return Err(shape_err(format!("{} prompts for {} layers", prompts.len(), plan.layers.len())));
        }
        for p in prompts {
            if !p.is_empty() && (p.cols() != w.config.dim || p.rows() != plan.length) {
                return Err(shape_err(format!(
                    "prompt {:?} does not match {}x{}",
                    p.shape(),
                    plan.length,
                    w.config.dim
                )));
            }
        }
        Ok(())
    }
}

fn embed_on_tape<'w>(tape: &mut Tape<'w>, w: &'w BackboneWeights, vars: &WeightVars, image: &Tensor) -> Result<Var> {
    let patches = tape.constant_owned(patchify(&w.config, image)?);
    let proj = tape.matmul(patches, vars.patch_w());
    let proj = tape.add_row(proj, vars.patch_b());
    let seq = tape.concat_rows(&[vars.cls(), proj]);
    Ok(tape.add(seq, vars.pos()))
}

fn forward_on_tape<'w>(
    tape: &mut Tape<'w>,
    w: &'w BackboneWeights,
    vars: &WeightVars,
    image: &Tensor,
    prompts: Option<(&PromptInjectionPlan, &[Var])>,
) -> Result<Var> {
    let mut x = embed_on_tape(tape, w, vars, image)?;
    let mut cls_index = 0;
    let heads = w.config.heads;
    for l in 0..w.config.layers {
        let h = tape.layer_norm(x, vars.layer(l, 0), vars.layer(l, 1));
        let slot = prompts.and_then(|(plan, pv)| plan.slot(l).map(|s| (plan.mode, pv[s])));
        let (hq, hk, hv) = match slot {
            Some((mode, p)) if !tape.value(p).is_empty() => {
                let qkv = attach_on_tape(tape, p, h, mode)?;
                if mode == PromptMode::ProT {
                    cls_index += tape.value(p).rows();
                    x = tape.concat_rows(&[p, x]);
                }
                qkv
            }
            _ => (h, h, h),
        };
        let attn = AttnVars {
            w_q: vars.layer(l, 2),
            w_k: vars.layer(l, 3),
            w_v: vars.layer(l, 4),
            w_o: vars.layer(l, 5),
        };
        let a = msa_on_tape(tape, hq, hk, hv, &attn, heads)?;
        x = tape.add(x, a);
        let h2 = tape.layer_norm(x, vars.layer(l, 6), vars.layer(l, 7));
        let m = tape.matmul(h2, vars.layer(l, 8));
        let m = tape.add_row(m, vars.layer(l, 9));
        let m = tape.gelu(m);
        let m = tape.matmul(m, vars.layer(l, 10));
        let m = tape.add_row(m, vars.layer(l, 11));
        x = tape.add(x, m);
    }
    let cls = tape.slice_rows(x, cls_index, 1);
    Ok(tape.layer_norm(cls, vars.final_gain(), vars.final_bias()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 10, lr: 0.002, batch: 32, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PretrainReport {
    pub final_loss: f64,
    pub train_accuracy: f64,
}

/// Supervised training of a fresh transformer with a throwaway linear head,
/// then freezing. Stands in for large-scale pre-training.
pub fn pretrain_backbone(
    config: &BackboneConfig,
    aux: &[Example],
    opts: &PretrainConfig,
) -> Result<(Backbone, PretrainReport)> {
    if aux.is_empty() {
        return Err(Error::Input("pretraining dataset is empty".into()));
    }
    let classes = aux.iter().map(|e| e.label).max().unwrap() + 1;
    let mut weights = BackboneWeights::random(config, opts.seed)?;
    let d = config.dim;
    let mut head_w = Tensor::zeros(&[classes, d]);
    let mut head_b = Tensor::zeros(&[classes]);
    let mut opt_w: Vec<AdamState> = weights.named_tensors().iter().map(|(_, t)| AdamState::for_tensor(t)).collect();
    let mut opt_hw = AdamState::for_tensor(&head_w);
    let mut opt_hb = AdamState::for_tensor(&head_b);
    let mut order: Vec<usize> = (0..aux.len()).collect();
    let mut rng = seeded_rng(opts.seed, 0xB1);
    let batch = opts.batch.max(1);
    let mut report = PretrainReport { final_loss: f64::NAN, train_accuracy: 0.0 };

    for _epoch in 0..opts.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(batch) {
            let n = chunk.len() as f64;
            let per_sample: Vec<Result<(f64, bool, Vec<Tensor>, Vec<f64>, Vec<f64>)>> = chunk
                .par_iter()
                .map(|&i| {
                    let ex = &aux[i];
                    let mut tape = Tape::new();
                    let vars = WeightVars::load(&mut tape, &weights, true);
                    let rep_var = forward_on_tape(&mut tape, &weights, &vars, &ex.input, None)?;
                    let rep = tape.value(rep_var).data().to_vec();
                    let logits: Vec<f64> = (0..classes)
                        .map(|c| crate::numerics::dot(head_w.row_slice(c), &rep) + head_b.data()[c])
                        .collect();
                    let (loss, dlogits) = softmax_cross_entropy(&logits, ex.label)?;
                    let pred = argmax(&logits);
                    let mut drep = vec![0.0; d];
                    for (c, g) in dlogits.iter().enumerate() {
                        for (dr, wv) in drep.iter_mut().zip(head_w.row_slice(c)) {
                            *dr += g * wv / n;
                        }
                    }
                    let mut grads = tape.backward(rep_var, Tensor::row(drep));
                    let wg = vars
                        .all
                        .iter()
                        .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
                        .collect();
                    Ok((loss, pred == ex.label, wg, dlogits, rep))
                })
                .collect();
            let mut acc_w: Vec<Tensor> = weights.named_tensors().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
            let mut g_hw = Tensor::zeros(head_w.shape());
            let mut g_hb = Tensor::zeros(head_b.shape());
            for r in per_sample {
                let (loss, ok, wg, dlogits, rep) = r?;
                epoch_loss += loss;
                correct += usize::from(ok);
                for (a, g) in acc_w.iter_mut().zip(&wg) {
                    a.add_assign(g);
                }
                for (c, g) in dlogits.iter().enumerate() {
                    for (hw, rv) in g_hw.row_slice_mut(c).iter_mut().zip(&rep) {
                        *hw += g * rv / n;
                    }
                    g_hb.data_mut()[c] += g / n;
                }
            }
            for ((t, g), st) in weights.tensors_mut().into_iter().zip(&acc_w).zip(opt_w.iter_mut()) {
                adam_step(t, g, st, opts.lr)?;
            }
            adam_step(&mut head_w, &g_hw, &mut opt_hw, opts.lr)?;
            adam_step(&mut head_b, &g_hb, &mut opt_hb, opts.lr)?;
        }
        report.final_loss = epoch_loss / aux.len() as f64;
        report.train_accuracy = correct as f64 / aux.len() as f64;
        log::debug!("pretrain loss {:.4} acc {:.3}", report.final_loss, report.train_accuracy);
    }
    let mut backbone = Backbone::transformer(weights);
    backbone.freeze();
    Ok((backbone, report))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::SeedableRng;

    fn small_config() -> BackboneConfig {
        BackboneConfig { image_size: 8, channels: 3, patch_size: 4, dim: 8, layers: 2, heads: 2, mlp_hidden: 16 }
    }

    fn random_image(cfg: &BackboneConfig, seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        normal(&mut rng, &[cfg.image_size, cfg.image_size, cfg.channels], 1.0)
    }

    fn frozen(cfg: &BackboneConfig) -> Backbone {
        let mut b = Backbone::transformer(BackboneWeights::random(cfg, 7).unwrap());
        b.freeze();
        b
    }

    #[test]
    fn patch_embed_shapes_and_errors() {
        let cfg = BackboneConfig::default();
        let b = frozen(&cfg);
        let img = Tensor::zeros(&[32, 32, 3]);
        let tokens = b.patch_embed(&img).unwrap();
        assert_eq!(tokens.shape(), &[65, 64]);
        // Zero image: class row is cls + pos[0]; patch rows are bias + pos.
        let w = b.weights().unwrap();
        let expect_cls = w.cls.add(&w.pos.slice_rows(0, 1)).unwrap();
        assert!(tokens.slice_rows(0, 1).max_abs_diff(&expect_cls) < 1e-15);
        let expect_patch = w.patch_b.add(&w.pos.slice_rows(5, 1)).unwrap();
        assert!(tokens.slice_rows(5, 1).max_abs_diff(&expect_patch) < 1e-15);
        assert!(matches!(b.patch_embed(&Tensor::zeros(&[30, 32, 3])), Err(Error::Shape(_))));
        let again = b.patch_embed(&img).unwrap();
        assert_eq!(tokens, again);
    }

    #[test]
    fn attach_prompt_shapes() {
        let h = Tensor::zeros(&[65, 16]);
        let (q, k, v) = attach_prompt(&Tensor::full(&[5, 16], 1.0), &h, PromptMode::ProT).unwrap();
        assert_eq!((q.rows(), k.rows(), v.rows()), (70, 70, 70));
        let p = Tensor::matrix(20, 16, (0..320).map(f64::from).collect()).unwrap();
        let (q, k, v) = attach_prompt(&p, &h, PromptMode::PreT).unwrap();
        assert_eq!((q.rows(), k.rows(), v.rows()), (65, 75, 75));
        assert_eq!(k.slice_rows(0, 10), p.slice_rows(0, 10));
        assert_eq!(v.slice_rows(0, 10), p.slice_rows(10, 10));
        let (q, k, v) = attach_prompt(&Tensor::zeros(&[0, 16]), &h, PromptMode::PreT).unwrap();
        assert_eq!((&q, &k, &v), (&h, &h, &h));
        assert!(matches!(attach_prompt(&Tensor::zeros(&[3, 16]), &h, PromptMode::PreT), Err(Error::Config(_))));
        assert!(matches!(attach_prompt(&Tensor::zeros(&[2, 8]), &h, PromptMode::ProT), Err(Error::Shape(_))));
    }

    #[test]
    fn msa_output_lengths() {
        let cfg = BackboneConfig::default();
        let w = BackboneWeights::random(&cfg, 1).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let h = normal(&mut rng, &[65, 64], 1.0);
        let pre = normal(&mut rng, &[20, 64], 1.0);
        let (q, k, v) = attach_prompt(&pre, &h, PromptMode::PreT).unwrap();
        assert_eq!(msa(&q, &k, &v, &w.layers[0], 4).unwrap().rows(), 65);
        let pro = normal(&mut rng, &[5, 64], 1.0);
        let (q, k, v) = attach_prompt(&pro, &h, PromptMode::ProT).unwrap();
        assert_eq!(msa(&q, &k, &v, &w.layers[0], 4).unwrap().rows(), 70);
        assert!(matches!(msa(&h, &h, &h, &w.layers[0], 3), Err(Error::Config(_))));
    }

    #[test]
    fn attention_over_single_key_copies_value() {
        let d = 4;
        let id = Tensor::identity(d);
        let layer = LayerWeights {
            ln1_gain: Tensor::full(&[1, d], 1.0),
            ln1_bias: Tensor::zeros(&[1, d]),
            w_q: id.clone(),
            w_k: id.clone(),
            w_v: id.clone(),
            w_o: id.clone(),
            ln2_gain: Tensor::full(&[1, d], 1.0),
            ln2_bias: Tensor::zeros(&[1, d]),
            w1: Tensor::zeros(&[d, 1]),
            b1: Tensor::zeros(&[1, 1]),
            w2: Tensor::zeros(&[1, d]),
            b2: Tensor::zeros(&[1, d]),
        };
        let q = Tensor::matrix(3, d, (0..12).map(|v| v as f64 * 0.3).collect()).unwrap();
        let k = Tensor::row(vec![1.0, -1.0, 0.5, 2.0]);
        let v = Tensor::row(vec![0.25, 0.5, -0.75, 1.0]);
        let out = msa(&q, &k, &v, &layer, 1).unwrap();
        for r in 0..3 {
            assert_eq!(out.row_slice(r), v.data());
        }
    }

    #[test]
    fn instructed_with_empty_prompts_equals_uninstructed() {
        let cfg = small_config();
        let b = frozen(&cfg);
        let img = random_image(&cfg, 3);
        let plan = PromptInjectionPlan { mode: PromptMode::PreT, layers: vec![0, 1], length: 0 };
        let empty = vec![Tensor::zeros(&[0, cfg.dim]); 2];
        let u = b.forward_uninstructed(&img).unwrap();
        let i = b.forward_instructed(&img, &empty, &plan).unwrap();
        assert_eq!(u, i);
        assert_eq!(u.len(), cfg.dim);
        assert_eq!(u, b.forward_uninstructed(&img).unwrap());
    }

    #[test]
    fn unfrozen_and_embedding_mode_errors() {
        let cfg = small_config();
        let b = Backbone::transformer(BackboneWeights::random(&cfg, 1).unwrap());
        assert!(matches!(b.forward_uninstructed(&random_image(&cfg, 0)), Err(Error::State(_))));
        let e = Backbone::embedding(4);
        let v = Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(e.forward_uninstructed(&v).unwrap(), v.data());
        let plan = PromptInjectionPlan::default();
        assert!(matches!(e.forward_instructed(&v, &[], &plan), Err(Error::UnsupportedMode(_))));
    }

    fn prompt_gradient_check(mode: PromptMode, length: usize) {
        let cfg = small_config();
        let b = frozen(&cfg);
        let img = random_image(&cfg, 11);
        let plan = PromptInjectionPlan { mode, layers: vec![0, 1], length };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let prompts: Vec<Tensor> = (0..2).map(|_| normal(&mut rng, &[length, cfg.dim], 0.5)).collect();
        let probe: Vec<f64> = (0..cfg.dim).map(|i| (i as f64 * 0.7).sin()).collect();
        let pass = b.instructed_pass(&img, &prompts, &plan).unwrap();
        let grads = pass.backward(&probe);
        for slot in 0..2 {
            let loss = |p: &Tensor| {
                let mut ps = prompts.clone();
                ps[slot] = p.clone();
                let r = b.forward_instructed(&img, &ps, &plan).unwrap();
                crate::numerics::dot(&r, &probe)
            };
            let err = grad_check(loss, &prompts[slot], &grads[slot], 1e-5).unwrap();
            assert!(err < 1e-4, "{mode:?} slot {slot}: {err}");
        }
    }

    #[test]
    fn prefix_prompt_gradient_matches_finite_differences() {
        prompt_gradient_check(PromptMode::PreT, 4);
    }

    #[test]
    fn prompt_tuning_gradient_matches_finite_differences() {
        prompt_gradient_check(PromptMode::ProT, 3);
    }

    #[test]
    fn plan_validation() {
        let cfg = small_config();
        assert!(PromptInjectionPlan { mode: PromptMode::PreT, layers: vec![0], length: 3 }.validate(&cfg).is_err());
        assert!(PromptInjectionPlan { mode: PromptMode::ProT, layers: vec![0], length: 3 }.validate(&cfg).is_ok());
        assert!(PromptInjectionPlan { mode: PromptMode::ProT, layers: vec![5], length: 3 }.validate(&cfg).is_err());
    }

    #[test]
    fn checkpoint_names_roundtrip_weights() {
        let cfg = small_config();
        let w = BackboneWeights::random(&cfg, 9).unwrap();
        let named: std::collections::HashMap<String, Tensor> =
            w.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let back = BackboneWeights::from_named(&cfg, |n| named.get(n).cloned()).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.checksum(), w.checksum());
    }

    #[test]
    fn pretraining_empty_and_zero_epochs() {
        let cfg = small_config();
        assert!(matches!(pretrain_backbone(&cfg, &[], &PretrainConfig::default()), Err(Error::Input(_))));
        let aux = vec![Example { input: random_image(&cfg, 1), label: 0 }];
        let opts = PretrainConfig { epochs: 0, ..Default::default() };
        let (b, _) = pretrain_backbone(&cfg, &aux, &opts).unwrap();
        assert!(b.is_frozen());
        assert_eq!(b.weights().unwrap(), &BackboneWeights::random(&cfg, opts.seed).unwrap());
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let cfg = small_config();
        let w = BackboneWeights::random(&cfg, 4).unwrap();
        let img = random_image(&cfg, 8);
        let probe: Vec<f64> = (0..cfg.dim).map(|i| (i as f64).cos()).collect();
        let mut tape = Tape::new();
        let vars = WeightVars::load(&mut tape, &w, true);
        let rep = forward_on_tape(&mut tape, &w, &vars, &img, None).unwrap();
        let mut g = tape.backward(rep, Tensor::row(probe.clone()));
        // w_q of the last layer and the patch projection.
        for idx in [0usize, 4 + LAYER_FIELDS.len() + 2] {
            let analytic = g.take(vars.all[idx]).unwrap();
            let loss = |t: &Tensor| {
                let mut w2 = w.clone();
                *w2.tensors_mut()[idx] = t.clone();
                let mut tp = Tape::new();
                let vs = WeightVars::load(&mut tp, &w2, false);
                let r = forward_on_tape(&mut tp, &w2, &vs, &img, None).unwrap();
                crate::numerics::dot(tp.value(r).data(), &probe)
            };
            let point = w.named_tensors()[idx].1.clone();
            let err = grad_check(loss, &point, &analytic, 1e-5).unwrap();
            assert!(err < 1e-4, "tensor {idx}: {err}");
        }
    }
}
