// Line-delimited corpus dump, one rendition per line, tab separated:
//
//   id(16 hex)  modality  task  prompt-ids  response-ids  features
//
// Integer arrays are comma separated. Features are comma separated fixed
// decimals with 9 fractional digits, or `-` for text lines.

use std::io::{BufRead, Write};

use super::{Example, Modality, TaskKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub id: u64,
    pub modality: Modality,
    pub task: TaskKind,
    pub prompt: Vec<usize>,
    pub response: Vec<usize>,
    pub features: Option<Vec<f64>>,
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Writes both renditions of every example.
pub fn write_records<W: Write>(examples: &[Example], out: &mut W) -> Result<()> {
    for e in examples {
        let ids = join(&e.prompt);
        let resp = join(&e.response);
        writeln!(out, "{:016x}\ttext\t{}\t{ids}\t{resp}\t-", e.id, e.task)?;
        let feats = e.features.iter().map(|f| format!("{f:.9}")).collect::<Vec<_>>().join(",");
        writeln!(out, "{:016x}\tspeech\t{}\t{ids}\t{resp}\t{feats}", e.id, e.task)?;
    }
    Ok(())
}

fn parse_ints(field: &str, line: usize) -> Result<Vec<usize>> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(',')
        .map(|s| {
            s.parse()
                .map_err(|_| Error::Integrity(format!("line {line}: bad integer `{s}`")))
        })
        .collect()
}

pub fn read_records<R: BufRead>(input: R) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::Integrity(format!("line {}: expected 6 fields, got {}", n + 1, fields.len())));
        }
        let id = u64::from_str_radix(fields[0], 16)
            .map_err(|_| Error::Integrity(format!("line {}: bad id", n + 1)))?;
        let modality: Modality = fields[1].parse()?;
        let task: TaskKind = fields[2].parse()?;
        let features = match fields[5] {
            "-" => None,
            f => Some(
                f.split(',')
                    .map(|s| {
                        s.parse()
                            .map_err(|_| Error::Integrity(format!("line {}: bad float `{s}`", n + 1)))
                    })
                    .collect::<Result<Vec<f64>>>()?,
            ),
        };
        out.push(Record {
            id,
            modality,
            task,
            prompt: parse_ints(fields[3], n + 1)?,
            response: parse_ints(fields[4], n + 1)?,
            features,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, TaskSpec, World};

    #[test]
    fn dump_and_reload() {
        let w = World {
            vocab_size: 64,
            feature_dim: 3,
            seed: 1,
        };
        let c = generate_corpus(&w, &TaskSpec::new(TaskKind::Copy, 5, 0, 2)).unwrap();
        let mut buf = Vec::new();
        write_records(&c.train, &mut buf).unwrap();
        let recs = read_records(buf.as_slice()).unwrap();
        assert_eq!(recs.len(), 10);
        for (pair, e) in recs.chunks(2).zip(&c.train) {
            assert_eq!(pair[0].id, e.id);
            assert_eq!(pair[0].modality, Modality::Text);
            assert_eq!(pair[1].modality, Modality::Speech);
            assert_eq!(pair[0].prompt, e.prompt);
            assert_eq!(pair[1].response, e.response);
            let f = pair[1].features.as_ref().unwrap();
            for (a, b) in f.iter().zip(&e.features) {
                assert!((a - b).abs() <= 5e-10);
            }
        }
    }

    #[test]
    fn malformed_line_is_integrity_error() {
        let r = read_records("abc\ttext\tcopy\n".as_bytes());
        assert!(matches!(r, Err(Error::Integrity(_))));
    }
}
