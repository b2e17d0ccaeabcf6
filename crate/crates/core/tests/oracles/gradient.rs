//! Reverse-mode gradients against central finite differences.
//!
//! Every primitive is checked through a scalar probe `L = Σ op(x) ⊙ R` with a
//! fixed random `R`, so no gradient is trivially all-ones. Relative error is
//! `|analytic − numeric| / max(|analytic|, |numeric|, FLOOR)`.

use parashift::data::{ModalBatch, PromptInput};
use parashift::model::{GradMode, ModelConfig, TransformerLM, DEFAULT_LORA_TARGETS};
use parashift::{Graph, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const MODEL_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const FLOOR: f64 = 1e-3;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Builds `op` on fresh leaves and returns `Σ op(inputs) ⊙ R`.
type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

fn probe_loss(inputs: &[Tensor], build: &Build, weight_seed: u64) -> (Graph, Vec<Var>, Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let y = build(&mut g, &vars).unwrap();
    let r = Tensor::randn(g.shape(y), 1.0, &mut rng(weight_seed));
    let r = g.constant(r);
    let weighted = g.mul(y, r).unwrap();
    let l = g.sum(weighted);
    (g, vars, l)
}

/// Worst relative error over every element of every input of one primitive.
pub fn primitive_error(inputs: Vec<Tensor>, build: &Build) -> f64 {
    let (mut g, vars, l) = probe_loss(&inputs, build, 99);
    g.backward(l).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();
    let eval = |inputs: &[Tensor]| {
        let (g, _, l) = probe_loss(inputs, build, 99);
        g.value(l).data()[0]
    };
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= H;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(analytic[k][i], numeric));
        }
    }
    worst
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// `(name, worst relative error)` for every differentiable graph primitive.
pub fn primitive_errors() -> Vec<(&'static str, f64)> {
    let cases: Vec<(&'static str, Vec<Tensor>, Box<Build>)> = vec![
        ("matmul", vec![randn(&[3, 4], 1), randn(&[4, 2], 2)], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("bmm", vec![randn(&[2, 3, 4], 3), randn(&[2, 4, 5], 4)], Box::new(|g, v| g.bmm(v[0], v[1], false))),
        ("bmm_trans_b", vec![randn(&[2, 3, 4], 5), randn(&[2, 5, 4], 6)], Box::new(|g, v| g.bmm(v[0], v[1], true))),
        ("add", vec![randn(&[3, 4], 7), randn(&[3, 4], 8)], Box::new(|g, v| g.add(v[0], v[1]))),
        ("add_broadcast", vec![randn(&[2, 3, 4], 9), randn(&[4], 10)], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![randn(&[5], 11), randn(&[5], 12)], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul", vec![randn(&[3, 4], 13), randn(&[3, 4], 14)], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("mul_broadcast", vec![randn(&[2, 3, 4], 15), randn(&[4], 16)], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("scale", vec![randn(&[6], 17)], Box::new(|g, v| Ok(g.scale(v[0], -2.5)))),
        ("silu", vec![randn(&[3, 5], 18)], Box::new(|g, v| Ok(g.silu(v[0])))),
        ("sum", vec![randn(&[4, 2], 19)], Box::new(|g, v| Ok(g.sum(v[0])))),
        ("softmax", vec![randn(&[3, 5], 20)], Box::new(|g, v| Ok(g.softmax(v[0])))),
        ("rmsnorm", vec![randn(&[4, 6], 21)], Box::new(|g, v| Ok(g.rmsnorm(v[0], 1e-10)))),
        ("transpose", vec![randn(&[3, 5], 22)], Box::new(|g, v| g.transpose(v[0]))),
        ("reshape", vec![randn(&[2, 6], 23)], Box::new(|g, v| g.reshape(v[0], &[3, 4]))),
        ("swap_axes12", vec![randn(&[2, 3, 4, 2], 24)], Box::new(|g, v| g.swap_axes12(v[0]))),
        (
            "concat_seq",
            vec![randn(&[2, 3, 4], 25), randn(&[2, 2, 4], 26)],
            Box::new(|g, v| g.concat_seq(v[0], v[1])),
        ),
        ("embedding", vec![randn(&[6, 3], 27)], Box::new(|g, v| g.embedding(v[0], &[4, 0, 4, 2, 5]))),
        (
            "causal_mask+softmax",
            vec![randn(&[2, 4, 4], 28)],
            Box::new(|g, v| {
                let m = g.causal_mask(v[0])?;
                Ok(g.softmax(m))
            }),
        ),
        (
            "cross_entropy",
            vec![randn(&[2, 3, 5], 29)],
            Box::new(|g, v| g.cross_entropy(v[0], &[1, 4, 0, 2, 2, 3], &[true, false, true, true, false, true])),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, build)| (name, primitive_error(inputs, &*build)))
        .collect()
}

/// Random small model config; `d_model` is a multiple of `n_heads`.
pub fn random_config(r: &mut ChaCha8Rng, seed: u64) -> ModelConfig {
    let n_heads = r.gen_range(1..=2);
    ModelConfig {
        vocab_size: r.gen_range(20..=40),
        d_model: n_heads * r.gen_range(2..=5),
        n_layers: r.gen_range(1..=3),
        n_heads,
        d_ff: r.gen_range(4..=12),
        max_seq: 8,
        feature_dim: r.gen_range(2..=5),
        seed,
    }
}

pub fn random_batch(r: &mut ChaCha8Rng, cfg: &ModelConfig, speech: bool) -> ModalBatch {
    let (b, p, s) = (2, r.gen_range(2..=4), r.gen_range(1..=3));
    let prompt = if speech {
        PromptInput::Features {
            data: (0..b * p * cfg.feature_dim).map(|_| r.gen_range(-1.0..1.0)).collect(),
            dim: cfg.feature_dim,
        }
    } else {
        PromptInput::Tokens((0..b * p).map(|_| r.gen_range(0..cfg.vocab_size)).collect())
    };
    let response = (0..b * s).map(|_| r.gen_range(0..cfg.vocab_size)).collect();
    ModalBatch::new(b, p, prompt, response, s).unwrap()
}

/// Compares the gradient of up to `per_tensor` random elements of every
/// base parameter with central differences of the loss.
pub fn model_error(model: &mut TransformerLM, batch: &ModalBatch, r: &mut ChaCha8Rng, per_tensor: usize) -> f64 {
    model.zero_grad();
    model.accumulate_gradients(batch, GradMode::Trainable).unwrap();
    let mut worst: f64 = 0.0;
    let n = model.params().len();
    for p in 0..n {
        let Some(grad) = model.params()[p].grad().map(<[f64]>::to_vec) else {
            continue;
        };
        for _ in 0..per_tensor {
            let i = r.gen_range(0..grad.len());
            let orig = model.params()[p].data()[i];
            model.params_mut()[p].data_mut()[i] = orig + H;
            let up = model.loss(batch).unwrap();
            model.params_mut()[p].data_mut()[i] = orig - H;
            let down = model.loss(batch).unwrap();
            model.params_mut()[p].data_mut()[i] = orig;
            worst = worst.max(rel_err(grad[i], (up - down) / (2.0 * H)));
        }
    }
    worst
}

/// Worst error of each of `n` random configurations, alternating text and
/// speech batches.
pub fn random_model_errors(n: u64) -> Vec<f64> {
    let mut r = rng(2024);
    (0..n)
        .map(|seed| {
            let cfg = random_config(&mut r, seed);
            let mut model = TransformerLM::new(&cfg).unwrap();
            let batch = random_batch(&mut r, &cfg, seed % 2 == 1);
            model_error(&mut model, &batch, &mut r, 4)
        })
        .collect()
}

fn adapter_tensor(m: &mut TransformerLM, k: usize, which: usize) -> &mut Tensor {
    let ad = &mut m.adapters_mut()[k];
    if which == 0 {
        &mut ad.a
    } else {
        &mut ad.b
    }
}

/// Worst error over sampled elements of every adapter's `A` and `B`.
pub fn lora_adapter_error() -> f64 {
    let mut r = rng(7);
    let cfg = random_config(&mut r, 3);
    let mut model = TransformerLM::new(&cfg).unwrap();
    model.attach_lora(DEFAULT_LORA_TARGETS, 2, 4.0, 5).unwrap();
    // B starts at zero, which hides A's gradient; move it off zero first
    for ad in model.adapters_mut() {
        ad.b = Tensor::randn(ad.b.shape(), 0.3, &mut r);
    }
    let batch = random_batch(&mut r, &cfg, false);
    model.zero_grad();
    model.accumulate_gradients(&batch, GradMode::Trainable).unwrap();
    let mut worst: f64 = 0.0;
    for k in 0..model.adapters().len() {
        for which in 0..2 {
            let grad = adapter_tensor(&mut model, k, which).grad().unwrap().to_vec();
            for _ in 0..3 {
                let i = r.gen_range(0..grad.len());
                let mut loss_at = |x: f64| {
                    let orig = adapter_tensor(&mut model, k, which).data()[i];
                    adapter_tensor(&mut model, k, which).data_mut()[i] = orig + x;
                    let l = model.loss(&batch).unwrap();
                    adapter_tensor(&mut model, k, which).data_mut()[i] = orig;
                    l
                };
                let numeric = (loss_at(H) - loss_at(-H)) / (2.0 * H);
                worst = worst.max(rel_err(grad[i], numeric));
            }
        }
    }
    worst
}
