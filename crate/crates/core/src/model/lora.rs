//! Low-rank adapters on frozen block matrices.
//!
//! For a target `W: [in, out]` (the model computes `x · W`), an adapter holds
//! `A: [r, in]` and `B: [out, r]` and contributes `(alpha / r) · x · Aᵀ · Bᵀ`,
//! i.e. the effective weight is `W + (alpha / r) · (B · A)ᵀ`. `B` starts at
//! zero, so attaching an adapter does not change the model's outputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use super::{ParamGroup, TransformerLM};
use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

/// Every attention and MLP matrix of every block.
pub const DEFAULT_LORA_TARGETS: &str = r"^layer\.\d+\.(wq|wk|wv|wo|w_gate|w_up|w_down)$";

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `(alpha / r) · (B · A)ᵀ`, shaped like the target `[in, out]`.
    pub fn delta(&self) -> Tensor {
        let (r, input) = (self.a.shape()[0], self.a.shape()[1]);
        let out = self.b.shape()[0];
        let ba = kernels::matmul(self.b.data(), self.a.data(), out, r, input);
        let s = self.scale();
        let data = kernels::transpose(&ba, out, input).into_iter().map(|x| x * s).collect();
        Tensor::new(&[input, out], data).expect("delta shape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeStatus {
    Merged(usize),
    /// No adapters were attached; the model is unchanged.
    NothingToMerge,
}

impl TransformerLM {
    /// Attaches a rank-`rank` adapter to every 2-D parameter whose canonical
    /// name matches `pattern` (a regular expression). Afterwards only the
    /// adapters and the adaptor front-end are trainable. Returns the number of
    /// adapted matrices.
    pub fn attach_lora(&mut self, pattern: &str, rank: usize, alpha: f64, seed: u64) -> Result<usize> {
        if !self.adapters.is_empty() {
            return Err(Error::Contract("adapters already attached; merge first".into()));
        }
        if rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::Config(format!("LoRA alpha must be positive, got {alpha}")));
        }
        let re = Regex::new(pattern).map_err(|e| Error::Config(format!("bad target pattern: {e}")))?;
        let targets: Vec<usize> = (0..self.names.len())
            .filter(|&i| self.params[i].ndim() == 2 && re.is_match(&self.names[i]))
            .collect();
        if targets.is_empty() {
            return Err(Error::Config(format!("LoRA pattern `{pattern}` matches no weight matrix")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for &i in &targets {
            let (input, out) = (self.params[i].shape()[0], self.params[i].shape()[1]);
            self.adapters.push(LoraAdapter {
                target: self.names[i].clone(),
                a: Tensor::randn(&[rank, input], 1.0 / (input as f64).sqrt(), &mut rng),
                b: Tensor::zeros(&[out, rank]),
                rank,
                alpha,
            });
        }
        for (i, name) in self.names.iter().enumerate() {
            self.trainable[i] = ParamGroup::of(name) == Some(ParamGroup::Adaptor);
        }
        Ok(targets.len())
    }

    /// Folds every adapter into its target and removes it; all parameters
    /// become trainable again.
    pub fn merge_lora(&mut self) -> MergeStatus {
        if self.adapters.is_empty() {
            log::warn!("merge_lora called with no adapters attached");
            return MergeStatus::NothingToMerge;
        }
        let adapters = std::mem::take(&mut self.adapters);
        for ad in &adapters {
            let delta = ad.delta();
            let w = &mut self.params[self.index[&ad.target]];
            w.data_mut().iter_mut().zip(delta.data()).for_each(|(x, d)| *x += d);
        }
        self.trainable.iter_mut().for_each(|t| *t = true);
        MergeStatus::Merged(adapters.len())
    }

    /// Copy with adapters folded in; `self` is untouched.
    pub fn merged(&self) -> Self {
        let mut m = self.clone();
        if !m.adapters.is_empty() {
            m.merge_lora();
        }
        m
    }

    pub(crate) fn set_adapters(&mut self, adapters: Vec<LoraAdapter>) -> Result<()> {
        for ad in &adapters {
            let Some(i) = self.param_index(&ad.target) else {
                return Err(Error::Integrity(format!("adapter target `{}` not in registry", ad.target)));
            };
            let s = self.params[i].shape();
            if ad.a.shape() != [ad.rank, s[0]] || ad.b.shape() != [s[1], ad.rank] {
                return Err(Error::Integrity(format!("adapter for `{}` has wrong shape", ad.target)));
            }
        }
        if !adapters.is_empty() {
            for (i, name) in self.names.iter().enumerate() {
                self.trainable[i] = ParamGroup::of(name) == Some(ParamGroup::Adaptor);
            }
        }
        self.adapters = adapters;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ModalBatch;
    use crate::model::{ModelConfig, BLOCK_MATRICES};

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 48,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 24,
            max_seq: 10,
            feature_dim: 8,
            seed: 1,
        }
    }

    fn batch() -> ModalBatch {
        ModalBatch::text(&[vec![1, 4, 20, 3], vec![1, 5, 30, 3]], &[vec![22, 2], vec![31, 2]]).unwrap()
    }

    #[test]
    fn attach_is_identity_and_merge_is_bitwise_noop() {
        let mut m = TransformerLM::new(&cfg()).unwrap();
        let before = m.logits(&batch()).unwrap();
        let base = m.clone();
        let n = m.attach_lora(DEFAULT_LORA_TARGETS, 4, 8.0, 0).unwrap();
        assert_eq!(n, 2 * BLOCK_MATRICES.len());
        assert_eq!(m.logits(&batch()).unwrap(), before);
        assert_eq!(m.merge_lora(), MergeStatus::Merged(n));
        assert!(m.same_weights(&base));
        assert_eq!(m.merge_lora(), MergeStatus::NothingToMerge);
    }

    #[test]
    fn scale_is_alpha_over_rank() {
        let mut m = TransformerLM::new(&cfg()).unwrap();
        m.attach_lora(DEFAULT_LORA_TARGETS, 16, 32.0, 0).unwrap();
        assert_eq!(m.adapters()[0].scale(), 2.0);
    }

    #[test]
    fn trainable_count_is_adapters_plus_adaptor() {
        let c = cfg();
        let mut m = TransformerLM::new(&c).unwrap();
        let r = 3;
        m.attach_lora(DEFAULT_LORA_TARGETS, r, 6.0, 0).unwrap();
        let (d, f) = (c.d_model, c.d_ff);
        let per_layer = 4 * r * (d + d) + 2 * r * (d + f) + r * (f + d);
        let adaptor = c.feature_dim * d + d * d;
        assert_eq!(m.num_trainable(), c.n_layers * per_layer + adaptor);
    }

    #[test]
    fn unmatched_pattern_is_config_error() {
        let mut m = TransformerLM::new(&cfg()).unwrap();
        assert!(matches!(m.attach_lora(r"^nothing$", 2, 4.0, 0), Err(Error::Config(_))));
        // norms are 1-D and never adapted
        assert!(matches!(m.attach_lora(r"norm", 2, 4.0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn merge_preserves_outputs_after_nonzero_update() {
        let mut m = TransformerLM::new(&cfg()).unwrap();
        m.attach_lora(DEFAULT_LORA_TARGETS, 4, 8.0, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for ad in &mut m.adapters {
            ad.b = Tensor::randn(ad.b.shape(), 0.1, &mut rng);
        }
        let adapted = m.logits(&batch()).unwrap();
        m.merge_lora();
        let merged = m.logits(&batch()).unwrap();
        assert!(adapted.max_abs_diff(&merged).unwrap() <= 1e-10);
    }
}
