use super::{Example, Modality, TaskKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum PromptInput {
    /// `[batch, prompt_len]` token ids.
    Tokens(Vec<usize>),
    /// `[batch, prompt_len, dim]` feature vectors.
    Features { data: Vec<f64>, dim: usize },
}

/// A rectangular batch: every row has the same prompt and response length.
/// The model sees `prompt ++ response`; the loss covers exactly the positions
/// that predict response tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalBatch {
    batch: usize,
    prompt_len: usize,
    prompt: PromptInput,
    response: Vec<usize>,
    response_len: usize,
}

impl ModalBatch {
    pub fn new(batch: usize, prompt_len: usize, prompt: PromptInput, response: Vec<usize>, response_len: usize) -> Result<Self> {
        if batch == 0 || prompt_len == 0 {
            return Err(Error::Degenerate("empty batch".into()));
        }
        let prompt_ok = match &prompt {
            PromptInput::Tokens(t) => t.len() == batch * prompt_len,
            PromptInput::Features { data, dim } => *dim > 0 && data.len() == batch * prompt_len * dim,
        };
        if !prompt_ok || response.len() != batch * response_len {
            return Err(Error::Contract(format!(
                "batch of {batch} rows does not match prompt/response buffers"
            )));
        }
        Ok(Self {
            batch,
            prompt_len,
            prompt,
            response,
            response_len,
        })
    }

    /// Text batch from explicit rows.
    pub fn text(prompts: &[Vec<usize>], responses: &[Vec<usize>]) -> Result<Self> {
        let (batch, prompt_len, response_len) = rect(prompts, responses)?;
        Self::new(
            batch,
            prompt_len,
            PromptInput::Tokens(prompts.concat()),
            responses.concat(),
            response_len,
        )
    }

    pub fn from_examples(examples: &[&Example], modality: Modality, feature_dim: usize) -> Result<Self> {
        let prompts: Vec<Vec<usize>> = examples.iter().map(|e| e.prompt.clone()).collect();
        let responses: Vec<Vec<usize>> = examples.iter().map(|e| e.response.clone()).collect();
        let (batch, prompt_len, response_len) = rect(&prompts, &responses)?;
        let prompt = match modality {
            Modality::Text => PromptInput::Tokens(prompts.concat()),
            Modality::Speech => {
                let mut data = Vec::with_capacity(batch * prompt_len * feature_dim);
                for e in examples {
                    if e.features.len() != prompt_len * feature_dim {
                        return Err(Error::Contract(format!(
                            "example {:016x} has {} feature values, expected {}",
                            e.id,
                            e.features.len(),
                            prompt_len * feature_dim
                        )));
                    }
                    data.extend_from_slice(&e.features);
                }
                PromptInput::Features { data, dim: feature_dim }
            }
        };
        Self::new(batch, prompt_len, prompt, responses.concat(), response_len)
    }

    pub fn modality(&self) -> Modality {
        match self.prompt {
            PromptInput::Tokens(_) => Modality::Text,
            PromptInput::Features { .. } => Modality::Speech,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn response_len(&self) -> usize {
        self.response_len
    }

    pub fn seq_len(&self) -> usize {
        self.prompt_len + self.response_len
    }

    pub fn prompt(&self) -> &PromptInput {
        &self.prompt
    }

    pub fn response(&self) -> &[usize] {
        &self.response
    }

    pub fn response_row(&self, row: usize) -> &[usize] {
        &self.response[row * self.response_len..(row + 1) * self.response_len]
    }

    /// Next-token targets and loss mask, one entry per `(row, position)`.
    pub fn targets_and_mask(&self) -> (Vec<usize>, Vec<bool>) {
        let t = self.seq_len();
        let mut targets = vec![0; self.batch * t];
        let mut mask = vec![false; self.batch * t];
        for b in 0..self.batch {
            for j in 0..self.response_len {
                let pos = b * t + self.prompt_len - 1 + j;
                targets[pos] = self.response[b * self.response_len + j];
                mask[pos] = true;
            }
        }
        (targets, mask)
    }

    pub fn prompt_only(&self) -> Self {
        Self {
            response: Vec::new(),
            response_len: 0,
            ..self.clone()
        }
    }

    /// Same prompts with a replacement response block.
    pub fn with_response(&self, response: Vec<usize>, response_len: usize) -> Result<Self> {
        Self::new(self.batch, self.prompt_len, self.prompt.clone(), response, response_len)
    }
}

fn rect(prompts: &[Vec<usize>], responses: &[Vec<usize>]) -> Result<(usize, usize, usize)> {
    if prompts.is_empty() || prompts.len() != responses.len() {
        return Err(Error::Degenerate("batch needs matching, nonempty prompt/response rows".into()));
    }
    let (p, r) = (prompts[0].len(), responses[0].len());
    if prompts.iter().any(|x| x.len() != p) || responses.iter().any(|x| x.len() != r) {
        return Err(Error::Contract("ragged batch rows".into()));
    }
    Ok((prompts.len(), p, r))
}

/// Groups examples into rectangular batches of at most `batch_size` rows,
/// keeping the input order within each `(task, prompt_len, response_len)` group.
pub fn batches(examples: &[Example], batch_size: usize, modality: Modality, feature_dim: usize) -> Result<Vec<ModalBatch>> {
    let refs: Vec<&Example> = examples.iter().collect();
    batches_of(&refs, batch_size, modality, feature_dim)
}

pub(crate) fn batches_of(
    examples: &[&Example],
    batch_size: usize,
    modality: Modality,
    feature_dim: usize,
) -> Result<Vec<ModalBatch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut groups: Vec<((TaskKind, usize, usize), Vec<&Example>)> = Vec::new();
    for &e in examples {
        let key = (e.task, e.prompt.len(), e.response.len());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(e),
            None => groups.push((key, vec![e])),
        }
    }
    let mut out = Vec::new();
    for (_, group) in groups {
        for chunk in group.chunks(batch_size) {
            out.push(ModalBatch::from_examples(chunk, modality, feature_dim)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_covers_exactly_the_response() {
        let b = ModalBatch::text(&[vec![1, 4, 20, 3], vec![1, 4, 21, 3]], &[vec![30, 2], vec![31, 2]]).unwrap();
        let (targets, mask) = b.targets_and_mask();
        assert_eq!(mask.iter().filter(|&&m| m).count(), 4);
        assert_eq!(&targets[3..5], &[30, 2]);
        assert_eq!(&mask[..6], &[false, false, false, true, true, false]);
        assert_eq!(&targets[9..11], &[31, 2]);
    }

    #[test]
    fn ragged_rows_are_rejected() {
        assert!(ModalBatch::text(&[vec![1, 2], vec![1]], &[vec![2], vec![2]]).is_err());
        assert!(ModalBatch::text(&[], &[]).is_err());
    }
}
