//! The expandable pool of task-specific prompts `e_1..e_T`.
//!
//! Tasks are indexed from zero. A prompt is one `L_p x D` tensor per injected
//! layer. Once frozen, a prompt can no longer be borrowed mutably and its
//! checksum is recorded so later tampering is detectable.

use rand::Rng;

use crate::backbone::{checksum_tensors, Checksum};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{seeded_rng, Tensor};

pub const INIT_BOUND: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct PromptPool {
    layers: usize,
    length: usize,
    dim: usize,
    seed: u64,
    prompts: Vec<Vec<Tensor>>,
    frozen: Vec<Checksum>,
    /// Per-task keys for the key-matching baseline.
    pub keys: Vec<Vec<f64>>,
}

impl PromptPool {
    pub fn new(layers: usize, length: usize, dim: usize, seed: u64) -> Self {
        Self { layers, length, dim, seed, prompts: Vec::new(), frozen: Vec::new(), keys: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen.len()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.layers, self.length, self.dim)
    }

    fn random_prompt(&self, t: usize) -> Vec<Tensor> {
        let mut rng = seeded_rng(self.seed, 0x5000 + t as u64);
        (0..self.layers)
            .map(|_| {
                let data = (0..self.length * self.dim).map(|_| rng.random_range(-INIT_BOUND..=INIT_BOUND)).collect();
                Tensor::matrix(self.length, self.dim, data).expect("shape")
            })
            .collect()
    }

    fn check_next(&self, t: usize) -> Result<()> {
        if t != self.prompts.len() {
            return Err(Error::State(format!("expected prompt for task {}, got {t}", self.prompts.len())));
        }
        if self.frozen.len() != t {
            return Err(Error::State(format!("task {} must be frozen before creating task {t}", self.frozen.len())));
        }
        Ok(())
    }

    /// Adds `e_t`: a small random prompt for the first task, a copy of
    /// `e_{t-1}` afterwards.
    pub fn create_task_prompt(&mut self, t: usize) -> Result<()> {
        self.check_next(t)?;
        let e = if t == 0 { self.random_prompt(0) } else { self.prompts[t - 1].clone() };
        self.prompts.push(e);
        Ok(())
    }

    /// Adds `e_t` with a fresh random initialization regardless of `t`.
    pub fn create_task_prompt_random(&mut self, t: usize) -> Result<()> {
        self.check_next(t)?;
        let e = self.random_prompt(t);
        self.prompts.push(e);
        Ok(())
    }

    pub fn prompt(&self, t: usize) -> Result<&[Tensor]> {
        self.prompts.get(t).map(Vec::as_slice).ok_or(Error::Index { index: t, len: self.prompts.len() })
    }

    /// Mutable access to the trainable prompt; fails once frozen.
    pub fn prompt_mut(&mut self, t: usize) -> Result<&mut [Tensor]> {
        if t < self.frozen.len() {
            return Err(Error::State(format!("prompt {t} is frozen")));
        }
        let len = self.prompts.len();
        self.prompts.get_mut(t).map(Vec::as_mut_slice).ok_or(Error::Index { index: t, len })
    }

    /// `α Σ_{i<t} e_i`, constant while `e_t` trains.
    pub fn ensemble_base(&self, t: usize, alpha: f64) -> Result<Vec<Tensor>> {
        check_alpha(alpha)?;
        if t >= self.prompts.len() {
            return Err(Error::Index { index: t, len: self.prompts.len() });
        }
        let mut base: Vec<Tensor> = (0..self.layers).map(|_| Tensor::zeros(&[self.length, self.dim])).collect();
        if t == 0 {
            return Ok(base);
        }
        for e in &self.prompts[..t] {
            for (b, el) in base.iter_mut().zip(e) {
                b.axpy(alpha, el);
            }
        }
        Ok(base)
    }

    /// Weight of `e_t` in `p_t`.
    pub fn current_weight(t: usize, alpha: f64) -> f64 {
        if t == 0 {
            1.0
        } else {
            1.0 - alpha
        }
    }

    /// `p_t = α Σ_{i<t} e_i + (1-α) e_t`, or `e_0` for the first task.
    pub fn ensemble_prompt(&self, t: usize, alpha: f64) -> Result<Vec<Tensor>> {
        let mut base = self.ensemble_base(t, alpha)?;
        let w = Self::current_weight(t, alpha);
        for (b, e) in base.iter_mut().zip(&self.prompts[t]) {
            b.axpy(w, e);
        }
        Ok(base)
    }

    /// Records the checksum of `e_t`; idempotent.
    pub fn freeze_task(&mut self, t: usize) -> Result<Checksum> {
        if t < self.frozen.len() {
            return Ok(self.frozen[t]);
        }
        if t != self.frozen.len() || t >= self.prompts.len() {
            return Err(Error::State(format!("cannot freeze task {t} with {} frozen", self.frozen.len())));
        }
        let c = checksum_tensors(&self.prompts[t]);
        self.frozen.push(c);
        Ok(c)
    }

    pub fn checksum(&self, t: usize) -> Result<Checksum> {
        Ok(checksum_tensors(self.prompt(t)?))
    }

    pub fn frozen_checksum(&self, t: usize) -> Option<Checksum> {
        self.frozen.get(t).copied()
    }

    /// Confirms every frozen prompt still matches its recorded checksum.
    pub fn verify_frozen(&self) -> Result<()> {
        for (t, c) in self.frozen.iter().enumerate() {
            if checksum_tensors(&self.prompts[t]) != *c {
                return Err(Error::State(format!("frozen prompt {t} was modified")));
            }
        }
        Ok(())
    }

    /// Rebuilds a pool from stored prompts, all frozen.
    pub fn from_frozen(prompts: Vec<Vec<Tensor>>, length: usize, dim: usize, seed: u64) -> Result<Self> {
        let layers = prompts.first().map_or(0, Vec::len);
        for p in &prompts {
            if p.len() != layers || p.iter().any(|e| e.shape() != [length, dim]) {
                return Err(shape_err("inconsistent stored prompt shapes"));
            }
        }
        let frozen = prompts.iter().map(checksum_tensors).collect();
        Ok(Self { layers, length, dim, seed, prompts, frozen, keys: Vec::new() })
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("ensemble weight {alpha} outside [0, 1]")));
    }
    Ok(())
}
