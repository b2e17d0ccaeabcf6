//! Paired dual-modality toy corpora.
//!
//! Every example exists twice: as a token prompt and as a sequence of
//! continuous feature vectors encoding the same tokens (a fixed random
//! codebook row per token plus Gaussian jitter). Both renditions share the
//! same token response, so text and speech evaluations ask identical
//! questions.

mod batch;
mod records;

pub use batch::{batches, ModalBatch, PromptInput};
pub(crate) use batch::batches_of;
pub use records::{read_records, write_records, Record};

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::TransformerLM;
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const KV_MARK: usize = 4;
pub const COPY_MARK: usize = 5;
pub const QA_MARK: usize = 6;
/// First relation token of the toy-qa task; relations occupy `7..16`.
pub const RELATION_BASE: usize = 7;
pub const MAX_RELATIONS: usize = 9;
/// First free-content token id.
pub const CONTENT_BASE: usize = 16;

/// One prompt in `EVAL_SPLIT_MODULUS` (by content hash) belongs to the
/// evaluation pool; the rest to the training pool.
const EVAL_SPLIT_MODULUS: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Modality {
    Text,
    Speech,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Text => "text",
            Modality::Speech => "speech",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Modality::Text),
            "speech" => Ok(Modality::Speech),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// `[BOS, KV, fillers.., key, SEP] -> [value, EOS]` over a fixed key table.
    KvRetrieval,
    /// `[BOS, COPY, x1..xn, SEP] -> [x1..xn, EOS]`.
    Copy,
    /// `[BOS, QA, fillers.., entity, relation, SEP] -> [answer, EOS]`.
    ToyQa,
}

impl TaskKind {
    fn salt(self) -> u64 {
        match self {
            TaskKind::KvRetrieval => 0x6b76,
            TaskKind::Copy => 0x636f,
            TaskKind::ToyQa => 0x7161,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::KvRetrieval => "kv-retrieval",
            TaskKind::Copy => "copy",
            TaskKind::ToyQa => "toy-qa",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kv-retrieval" => Ok(TaskKind::KvRetrieval),
            "copy" => Ok(TaskKind::Copy),
            "toy-qa" => Ok(TaskKind::ToyQa),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// The shared "world" behind every task: vocabulary, fact tables and the
/// speech codebook. Corpora generated from the same world agree on facts and
/// on the feature rendition of each token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

impl World {
    pub fn content_count(&self) -> usize {
        self.vocab_size.saturating_sub(CONTENT_BASE)
    }

    fn rng(&self, salt: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt)
    }

    /// Keys of the kv-retrieval table, in a seed-dependent fixed order.
    /// Smaller `n_keys` always yields a prefix of a larger one.
    pub fn kv_keys(&self, n_keys: usize) -> Vec<usize> {
        let mut keys: Vec<usize> = (CONTENT_BASE..self.vocab_size).collect();
        keys.shuffle(&mut self.rng(1));
        keys.truncate(n_keys);
        keys
    }

    /// Value bound to a kv key (any content token).
    pub fn kv_value(&self, key: usize) -> usize {
        let values = self.value_table(2);
        values[key - CONTENT_BASE]
    }

    /// Answer of the toy-qa fact `(entity, relation)`.
    pub fn qa_answer(&self, entity: usize, relation: usize) -> usize {
        let table = self.value_table(3 + relation as u64);
        table[entity - CONTENT_BASE]
    }

    fn value_table(&self, salt: u64) -> Vec<usize> {
        let mut rng = self.rng(salt);
        let n = self.content_count();
        (0..n).map(|_| CONTENT_BASE + rng.gen_range(0..n)).collect()
    }

    /// Fixed `[vocab, feature_dim]` codebook with standard-normal entries.
    pub fn codebook(&self) -> Tensor {
        Tensor::randn(&[self.vocab_size, self.feature_dim], 1.0, &mut self.rng(0xc0de))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub n_train: usize,
    pub n_eval: usize,
    /// Prompt length in tokens, special tokens included.
    #[serde(default = "default_prompt_len")]
    pub prompt_len: usize,
    /// kv keys, or toy-qa entities. Ignored by copy.
    #[serde(default = "default_n_keys")]
    pub n_keys: usize,
    /// Leading fraction of the key/entity list this corpus draws from.
    #[serde(default = "default_fraction")]
    pub key_fraction: f64,
    /// Relations per toy-qa entity.
    #[serde(default = "default_relations")]
    pub n_relations: usize,
    /// Std of the Gaussian jitter added to every feature vector.
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_prompt_len() -> usize {
    6
}

fn default_n_keys() -> usize {
    64
}
fn default_fraction() -> f64 {
    1.0
}
fn default_relations() -> usize {
    4
}
fn default_noise() -> f64 {
    0.1
}

impl TaskSpec {
    pub fn new(kind: TaskKind, n_train: usize, n_eval: usize, seed: u64) -> Self {
        Self {
            kind,
            n_train,
            n_eval,
            prompt_len: default_prompt_len(),
            n_keys: default_n_keys(),
            key_fraction: 1.0,
            n_relations: default_relations(),
            noise_std: default_noise(),
            seed,
        }
    }

    pub fn response_len(&self) -> usize {
        match self.kind {
            TaskKind::Copy => self.prompt_len - 3 + 1,
            TaskKind::KvRetrieval | TaskKind::ToyQa => 2,
        }
    }

    fn active_keys(&self) -> usize {
        ((self.n_keys as f64 * self.key_fraction).ceil() as usize).clamp(1, self.n_keys)
    }

    pub fn validate(&self, world: &World) -> Result<()> {
        let content = world.content_count();
        if world.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be at least 1".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if !(self.key_fraction > 0.0 && self.key_fraction <= 1.0) {
            return Err(Error::Config(format!("key_fraction must be in (0,1], got {}", self.key_fraction)));
        }
        match self.kind {
            TaskKind::KvRetrieval | TaskKind::ToyQa => {
                let min_prompt = if self.kind == TaskKind::KvRetrieval { 4 } else { 5 };
                if self.prompt_len < min_prompt {
                    return Err(Error::Config(format!(
                        "{} needs prompt_len >= {min_prompt}, got {}",
                        self.kind, self.prompt_len
                    )));
                }
                if self.n_keys == 0 || self.n_keys > content {
                    return Err(Error::Config(format!(
                        "vocab of {} leaves {content} content tokens, too few for {} keys",
                        world.vocab_size, self.n_keys
                    )));
                }
                if self.kind == TaskKind::ToyQa && !(1..=MAX_RELATIONS).contains(&self.n_relations) {
                    return Err(Error::Config(format!(
                        "toy-qa supports 1..={MAX_RELATIONS} relations, got {}",
                        self.n_relations
                    )));
                }
            }
            TaskKind::Copy => {
                if self.prompt_len < 4 {
                    return Err(Error::Config("copy needs prompt_len >= 4".into()));
                }
                if content < 2 {
                    return Err(Error::Config(format!(
                        "vocab of {} has no room for copy content",
                        world.vocab_size
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// Content hash of `(task, prompt)`; shared by both renditions.
    pub id: u64,
    pub task: TaskKind,
    pub prompt: Vec<usize>,
    pub response: Vec<usize>,
    /// `prompt.len() × feature_dim` speech rendition of `prompt`.
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

impl Corpus {
    /// Every `ratio`-th training example (at least one), for importance probes.
    pub fn probe_subset(examples: &[Example], ratio: f64) -> Vec<Example> {
        if examples.is_empty() {
            return Vec::new();
        }
        let step = (1.0 / ratio).round().max(1.0) as usize;
        examples.iter().step_by(step).cloned().collect()
    }
}

pub fn content_hash(task: TaskKind, prompt: &[usize]) -> u64 {
    let mut h = Sha256::new();
    h.update(task.salt().to_le_bytes());
    for &t in prompt {
        h.update((t as u32).to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn in_eval_pool(id: u64) -> bool {
    id % EVAL_SPLIT_MODULUS == 0
}

fn sample_example(world: &World, spec: &TaskSpec, keys: &[usize], rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let content = world.content_count();
    let token = |rng: &mut ChaCha8Rng| CONTENT_BASE + rng.gen_range(0..content);
    match spec.kind {
        TaskKind::KvRetrieval => {
            let mut prompt = vec![BOS, KV_MARK];
            for _ in 0..spec.prompt_len - 4 {
                prompt.push(token(rng));
            }
            let key = keys[rng.gen_range(0..keys.len())];
            prompt.extend([key, SEP]);
            (prompt, vec![world.kv_value(key), EOS])
        }
        TaskKind::ToyQa => {
            let mut prompt = vec![BOS, QA_MARK];
            for _ in 0..spec.prompt_len - 5 {
                prompt.push(token(rng));
            }
            let entity = keys[rng.gen_range(0..keys.len())];
            let relation = rng.gen_range(0..spec.n_relations);
            prompt.extend([entity, RELATION_BASE + relation, SEP]);
            (prompt, vec![world.qa_answer(entity, relation), EOS])
        }
        TaskKind::Copy => {
            let body: Vec<usize> = (0..spec.prompt_len - 3).map(|_| token(rng)).collect();
            let mut prompt = vec![BOS, COPY_MARK];
            prompt.extend(&body);
            prompt.push(SEP);
            let mut response = body;
            response.push(EOS);
            (prompt, response)
        }
    }
}

/// Speech rendition of a token prompt: codebook lookup plus jitter seeded by
/// `(jitter_seed, id)`.
pub fn render_features(codebook: &Tensor, prompt: &[usize], noise_std: f64, jitter_seed: u64, id: u64) -> Vec<f64> {
    let dim = codebook.shape()[1];
    let mut rng = ChaCha8Rng::seed_from_u64(jitter_seed ^ id.rotate_left(17));
    let mut out = Vec::with_capacity(prompt.len() * dim);
    for &t in prompt {
        for &c in &codebook.data()[t * dim..(t + 1) * dim] {
            let z: f64 = StandardNormal.sample(&mut rng);
            out.push(c + noise_std * z);
        }
    }
    out
}

/// Deterministically generates disjoint train and eval sets for one task.
pub fn generate_corpus(world: &World, spec: &TaskSpec) -> Result<Corpus> {
    spec.validate(world)?;
    let keys = match spec.kind {
        TaskKind::Copy => Vec::new(),
        _ => {
            let mut k = world.kv_keys(spec.n_keys);
            if spec.kind == TaskKind::ToyQa {
                // entities come from the tail of the same permutation so they
                // rarely coincide with kv keys
                let mut all = world.kv_keys(world.content_count());
                all.reverse();
                all.truncate(spec.n_keys);
                k = all;
            }
            k.truncate(spec.active_keys());
            k
        }
    };
    let codebook = world.codebook();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ spec.kind.salt().rotate_left(32));
    let mut seen = HashSet::new();
    let (mut train, mut eval) = (Vec::with_capacity(spec.n_train), Vec::with_capacity(spec.n_eval));
    let budget = 1000 * (spec.n_train + spec.n_eval).max(1);
    let mut attempts = 0;
    while train.len() < spec.n_train || eval.len() < spec.n_eval {
        attempts += 1;
        if attempts > budget {
            return Err(Error::Config(format!(
                "{} task space too small for {} train + {} eval distinct prompts",
                spec.kind, spec.n_train, spec.n_eval
            )));
        }
        let (prompt, response) = sample_example(world, spec, &keys, &mut rng);
        let id = content_hash(spec.kind, &prompt);
        let target = if in_eval_pool(id) { &mut eval } else { &mut train };
        let cap = if in_eval_pool(id) { spec.n_eval } else { spec.n_train };
        if target.len() >= cap || !seen.insert(id) {
            continue;
        }
        let features = render_features(&codebook, &prompt, spec.noise_std, spec.seed, id);
        target.push(Example {
            id,
            task: spec.kind,
            prompt,
            response,
            features,
        });
    }
    Ok(Corpus { train, eval })
}

/// Exact-match accuracy of greedy answers against the gold responses.
pub fn answer_accuracy(model: &TransformerLM, examples: &[Example], modality: Modality) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Degenerate("accuracy over an empty eval set".into()));
    }
    let mut correct = 0usize;
    for batch in batches(examples, 64, modality, model.config().feature_dim)? {
        let outputs = model.generate_greedy(&batch.prompt_only(), batch.response_len(), EOS)?;
        for (row, out) in outputs.iter().enumerate() {
            if out.as_slice() == batch.response_row(row) {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> World {
        World {
            vocab_size: 128,
            feature_dim: 16,
            seed: 7,
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let spec = TaskSpec::new(TaskKind::KvRetrieval, 200, 40, 3);
        let a = generate_corpus(&world(), &spec).unwrap();
        let b = generate_corpus(&world(), &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn train_and_eval_are_disjoint() {
        for kind in [TaskKind::KvRetrieval, TaskKind::Copy, TaskKind::ToyQa] {
            let spec = TaskSpec::new(kind, 300, 60, 11);
            let c = generate_corpus(&world(), &spec).unwrap();
            assert_eq!(c.train.len(), 300);
            assert_eq!(c.eval.len(), 60);
            let train_ids: HashSet<u64> = c.train.iter().map(|e| e.id).collect();
            assert!(c.eval.iter().all(|e| !train_ids.contains(&e.id)));
            assert!(c.eval.iter().all(|e| e.id % EVAL_SPLIT_MODULUS == 0));
        }
    }

    #[test]
    fn zero_noise_renditions_are_identical() {
        let w = world();
        let cb = w.codebook();
        let prompt = [BOS, KV_MARK, 40, 50, SEP];
        let a = render_features(&cb, &prompt, 0.0, 1, 99);
        let b = render_features(&cb, &prompt, 0.0, 2, 12345);
        assert_eq!(a, b);
        let c = render_features(&cb, &prompt, 0.1, 1, 99);
        assert_ne!(a, c);
    }

    #[test]
    fn responses_follow_the_fact_tables() {
        let w = world();
        let spec = TaskSpec::new(TaskKind::KvRetrieval, 50, 10, 0);
        let c = generate_corpus(&w, &spec).unwrap();
        for e in c.train.iter().chain(&c.eval) {
            let key = e.prompt[e.prompt.len() - 2];
            assert_eq!(e.response, vec![w.kv_value(key), EOS]);
            assert_eq!(e.features.len(), e.prompt.len() * w.feature_dim);
        }
        let qa = generate_corpus(&w, &TaskSpec::new(TaskKind::ToyQa, 50, 10, 0)).unwrap();
        for e in &qa.train {
            let n = e.prompt.len();
            assert_eq!(e.response[0], w.qa_answer(e.prompt[n - 3], e.prompt[n - 2] - RELATION_BASE));
        }
        let copy = generate_corpus(&w, &TaskSpec::new(TaskKind::Copy, 20, 5, 0)).unwrap();
        for e in &copy.train {
            assert_eq!(&e.response[..3], &e.prompt[2..5]);
            assert_eq!(e.response[3], EOS);
        }
    }

    #[test]
    fn key_fraction_restricts_keys() {
        let w = world();
        let mut spec = TaskSpec::new(TaskKind::KvRetrieval, 300, 30, 5);
        spec.n_keys = 40;
        spec.key_fraction = 0.25;
        let c = generate_corpus(&w, &spec).unwrap();
        let allowed: HashSet<usize> = w.kv_keys(10).into_iter().collect();
        assert!(c.train.iter().all(|e| allowed.contains(&e.prompt[e.prompt.len() - 2])));
    }

    #[test]
    fn vocab_too_small_is_config_error() {
        let w = World {
            vocab_size: 20,
            feature_dim: 4,
            seed: 0,
        };
        let spec = TaskSpec::new(TaskKind::KvRetrieval, 10, 2, 0);
        assert!(matches!(generate_corpus(&w, &spec), Err(Error::Config(_))));
    }

    #[test]
    fn probe_subset_takes_every_nth() {
        let c = generate_corpus(&world(), &TaskSpec::new(TaskKind::Copy, 90, 0, 1)).unwrap();
        let p = Corpus::probe_subset(&c.train, 1.0 / 30.0);
        assert_eq!(p.len(), 3);
        assert_eq!(p[1], c.train[30]);
    }
}
