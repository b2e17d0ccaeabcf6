//! The tape forward against a loop-by-loop reference written from the
//! architecture description alone: pre-RMSNorm blocks, causal multi-head
//! attention, SwiGLU MLP, learned positions, and a SiLU adaptor for features.

use parashift::data::{ModalBatch, PromptInput};
use parashift::model::{ModelConfig, TransformerLM, DEFAULT_LORA_TARGETS};
use proptest::prelude::*;

const TOL: f64 = 1e-10;

struct Reference<'a> {
    m: &'a TransformerLM,
}

impl Reference<'_> {
    fn w(&self, name: &str) -> (&[f64], usize, usize) {
        let merged = self.m.param(name).unwrap();
        (merged.data(), merged.shape()[0], merged.shape().get(1).copied().unwrap_or(1))
    }

    /// `x · W` for one row vector.
    fn linear(&self, x: &[f64], name: &str) -> Vec<f64> {
        let (w, rows, cols) = self.w(name);
        assert_eq!(x.len(), rows);
        (0..cols).map(|j| (0..rows).map(|i| x[i] * w[i * cols + j]).sum()).collect()
    }

    fn rmsnorm(&self, x: &[f64], gain: &str) -> Vec<f64> {
        let (g, _, _) = self.w(gain);
        let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let r = 1.0 / (ms + 1e-10).sqrt();
        x.iter().zip(g).map(|(v, g)| v * r * g).collect()
    }

    fn silu(x: f64) -> f64 {
        x / (1.0 + (-x).exp())
    }

    /// Logits `[t][vocab]` of one sequence given its input vectors.
    fn sequence(&self, mut xs: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
        let cfg = self.m.config();
        let (d, h) = (cfg.d_model, cfg.n_heads);
        let dh = d / h;
        let (pos, _, _) = self.w("position");
        for (t, x) in xs.iter_mut().enumerate() {
            for (k, v) in x.iter_mut().enumerate() {
                *v += pos[t * d + k];
            }
        }
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("layer.{l}.{s}");
            let normed: Vec<Vec<f64>> = xs.iter().map(|x| self.rmsnorm(x, &p("attn_norm"))).collect();
            let q: Vec<Vec<f64>> = normed.iter().map(|x| self.linear(x, &p("wq"))).collect();
            let k: Vec<Vec<f64>> = normed.iter().map(|x| self.linear(x, &p("wk"))).collect();
            let v: Vec<Vec<f64>> = normed.iter().map(|x| self.linear(x, &p("wv"))).collect();
            let mut ctx = vec![vec![0.0; d]; xs.len()];
            for head in 0..h {
                let r = head * dh..(head + 1) * dh;
                for i in 0..xs.len() {
                    let scores: Vec<f64> = (0..=i)
                        .map(|j| {
                            q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for (j, w) in e.iter().enumerate() {
                        for c in r.clone() {
                            ctx[i][c] += w / z * v[j][c];
                        }
                    }
                }
            }
            for (x, c) in xs.iter_mut().zip(&ctx) {
                let o = self.linear(c, &p("wo"));
                x.iter_mut().zip(o).for_each(|(a, b)| *a += b);
                let n = self.rmsnorm(x, &p("mlp_norm"));
                let gate = self.linear(&n, &p("w_gate"));
                let up = self.linear(&n, &p("w_up"));
                let act: Vec<f64> = gate.iter().zip(&up).map(|(g, u)| Self::silu(*g) * u).collect();
                let down = self.linear(&act, &p("w_down"));
                x.iter_mut().zip(down).for_each(|(a, b)| *a += b);
            }
        }
        xs.iter()
            .map(|x| self.linear(&self.rmsnorm(x, "final_norm"), "lm_head"))
            .collect()
    }

    fn logits(&self, batch: &ModalBatch) -> Vec<f64> {
        let cfg = self.m.config();
        let d = cfg.d_model;
        let (emb, _, _) = self.w("embedding");
        let embed = |t: usize| emb[t * d..(t + 1) * d].to_vec();
        let (p, s) = (batch.prompt_len(), batch.response_len());
        let mut out = Vec::new();
        for row in 0..batch.batch_size() {
            let mut xs: Vec<Vec<f64>> = match batch.prompt() {
                PromptInput::Tokens(ids) => ids[row * p..(row + 1) * p].iter().map(|&t| embed(t)).collect(),
                PromptInput::Features { data, dim } => (0..p)
                    .map(|i| {
                        let f = &data[(row * p + i) * dim..(row * p + i + 1) * dim];
                        let hidden: Vec<f64> = self.linear(f, "adaptor.0").into_iter().map(Self::silu).collect();
                        self.linear(&hidden, "adaptor.1")
                    })
                    .collect(),
            };
            xs.extend(batch.response()[row * s..(row + 1) * s].iter().map(|&t| embed(t)));
            out.extend(self.sequence(xs).into_iter().flatten());
        }
        out
    }
}

fn config(heads: usize, dh: usize, layers: usize, ff: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: 24,
        d_model: heads * dh,
        n_layers: layers,
        n_heads: heads,
        d_ff: ff,
        max_seq: 10,
        feature_dim: 3,
        seed,
    }
}

fn batch(cfg: &ModelConfig, speech: bool, seed: u64) -> ModalBatch {
    let (b, p, s) = (2, 4, 3);
    let tok = |i: usize| ((i as u64 * 7 + seed * 13) % cfg.vocab_size as u64) as usize;
    let prompt = if speech {
        PromptInput::Features {
            data: (0..b * p * cfg.feature_dim).map(|i| ((i as f64 + seed as f64) * 0.37).sin()).collect(),
            dim: cfg.feature_dim,
        }
    } else {
        PromptInput::Tokens((0..b * p).map(tok).collect())
    };
    ModalBatch::new(b, p, prompt, (100..100 + b * s).map(tok).collect(), s).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn tape_forward_matches_reference(
        heads in 1usize..=3, dh in 1usize..=4, layers in 1usize..=3, ff in 1usize..=8,
        seed in 0u64..1000, speech: bool,
    ) {
        let cfg = config(heads, dh, layers, ff, seed);
        let model = TransformerLM::new(&cfg).unwrap();
        let b = batch(&cfg, speech, seed);
        let got = model.logits(&b).unwrap();
        let want = Reference { m: &model }.logits(&b);
        prop_assert!(max_diff(got.data(), &want) <= TOL);
    }
}

#[test]
fn adapters_forward_like_their_merged_weights() {
    let cfg = config(2, 3, 2, 5, 9);
    let mut model = TransformerLM::new(&cfg).unwrap();
    model.attach_lora(DEFAULT_LORA_TARGETS, 2, 4.0, 1).unwrap();
    for (i, ad) in model.adapters_mut().iter_mut().enumerate() {
        ad.b.data_mut().iter_mut().enumerate().for_each(|(j, x)| *x = ((i * 31 + j) as f64 * 0.1).cos() * 0.2);
    }
    let merged = model.merged();
    let b = batch(&cfg, false, 3);
    let got = model.logits(&b).unwrap();
    let want = Reference { m: &merged }.logits(&b);
    assert!(max_diff(got.data(), &want) <= TOL);
}
