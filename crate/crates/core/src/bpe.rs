//! Byte-level byte-pair encoding.
//!
//! Ids `0..256` are the raw bytes; each learned merge appends one id. Merges
//! are chosen greedily by pair frequency, counting every adjacent occurrence;
//! ties go to the pair whose byte expansions compare lexicographically
//! smallest (then to the smaller id tuple). Encoding applies merges in
//! training order with a left-to-right scan, so a byte string always
//! round-trips exactly and never grows.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use thiserror::Error;

pub const BYTE_VOCAB: usize = 256;

#[derive(Debug, Error)]
pub enum BpeError {
    #[error("target vocab size {got} is below the byte vocabulary (256)")]
    TargetTooSmall { got: usize },
    #[error("token id {id} out of range for vocab of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("vocab file line {line}: {detail}")]
    Format { line: usize, detail: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A trained byte-pair vocabulary: the merge list in training order plus the
/// byte expansion of every id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeVocab {
    merges: Vec<(u32, u32)>,
    expansion: Vec<Vec<u8>>,
}

impl BpeVocab {
    /// The identity vocabulary: bytes only, no merges.
    pub fn bytes_only() -> Self {
        Self {
            merges: Vec::new(),
            expansion: (0..BYTE_VOCAB).map(|b| vec![b as u8]).collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.expansion.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// Greedy pair-merge training toward `target` ids. Stops early if the
    /// corpus runs out of adjacent pairs.
    pub fn train<I, S>(corpus: I, target: usize) -> Result<Self, BpeError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        if target < BYTE_VOCAB {
            return Err(BpeError::TargetTooSmall { got: target });
        }
        let mut vocab = Self::bytes_only();
        let mut seqs: Vec<Vec<u32>> = corpus
            .into_iter()
            .map(|s| s.as_ref().iter().map(|&b| b as u32).collect())
            .collect();
        while vocab.size() < target {
            let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
            for seq in &seqs {
                for w in seq.windows(2) {
                    *counts.entry((w[0], w[1])).or_insert(0) += 1;
                }
            }
            let Some(best) = counts
                .iter()
                .map(|(&pair, &count)| (pair, count))
                .min_by(|a, b| {
                    b.1.cmp(&a.1).then_with(|| {
                        let ka = (&vocab.expansion[a.0 .0 as usize], &vocab.expansion[a.0 .1 as usize]);
                        let kb = (&vocab.expansion[b.0 .0 as usize], &vocab.expansion[b.0 .1 as usize]);
                        ka.cmp(&kb).then_with(|| a.0.cmp(&b.0))
                    })
                })
                .map(|(pair, _)| pair)
            else {
                break;
            };
            let new_id = vocab.size() as u32;
            let mut exp = vocab.expansion[best.0 as usize].clone();
            exp.extend_from_slice(&vocab.expansion[best.1 as usize]);
            vocab.expansion.push(exp);
            vocab.merges.push(best);
            for seq in &mut seqs {
                merge_in_place(seq, best, new_id);
            }
        }
        Ok(vocab)
    }

    /// Tokenize a byte string: start from raw bytes, apply every merge in
    /// training order. Output length never exceeds input length.
    pub fn encode(&self, bytes: &[u8]) -> Vec<u32> {
        let mut seq: Vec<u32> = bytes.iter().map(|&b| b as u32).collect();
        for (i, &pair) in self.merges.iter().enumerate() {
            merge_in_place(&mut seq, pair, (BYTE_VOCAB + i) as u32);
        }
        seq
    }

    pub fn encode_str(&self, text: &str) -> Vec<u32> {
        self.encode(text.as_bytes())
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<u8>, BpeError> {
        let mut out = Vec::new();
        for &id in ids {
            let exp = self
                .expansion
                .get(id as usize)
                .ok_or(BpeError::IdOutOfRange {
                    id,
                    size: self.size(),
                })?;
            out.extend_from_slice(exp);
        }
        Ok(out)
    }

    /// Text form: header `BPE v1 size=<T>`, one `<idA> <idB> -> <idNew>` line
    /// per merge in training order.
    pub fn to_writer<W: Write>(&self, mut w: W) -> Result<(), BpeError> {
        writeln!(w, "BPE v1 size={}", self.size())?;
        for (i, &(a, b)) in self.merges.iter().enumerate() {
            writeln!(w, "{} {} -> {}", a, b, BYTE_VOCAB + i)?;
        }
        Ok(())
    }

    pub fn from_reader<R: BufRead>(r: R) -> Result<Self, BpeError> {
        let mut lines = r.lines();
        let header = lines.next().ok_or(BpeError::Format {
            line: 1,
            detail: "empty file".into(),
        })??;
        let size: usize = header
            .strip_prefix("BPE v1 size=")
            .and_then(|s| s.trim().parse().ok())
            .ok_or(BpeError::Format {
                line: 1,
                detail: format!("bad header {header:?}"),
            })?;
        if size < BYTE_VOCAB {
            return Err(BpeError::TargetTooSmall { got: size });
        }
        let mut vocab = Self::bytes_only();
        for (idx, line) in lines.enumerate() {
            let line_no = idx + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = || BpeError::Format {
                line: line_no,
                detail: format!("expected `<idA> <idB> -> <idNew>`, got {line:?}"),
            };
            let mut parts = line.split_whitespace();
            let a: u32 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let b: u32 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            if parts.next() != Some("->") {
                return Err(bad());
            }
            let new: u32 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            if parts.next().is_some() {
                return Err(bad());
            }
            let expect = vocab.size() as u32;
            if new != expect {
                return Err(BpeError::Format {
                    line: line_no,
                    detail: format!("merge ids must be sequential: expected {expect}, got {new}"),
                });
            }
            if a >= expect || b >= expect {
                return Err(BpeError::Format {
                    line: line_no,
                    detail: format!("merge ({a}, {b}) references an id >= {expect}"),
                });
            }
            let mut exp = vocab.expansion[a as usize].clone();
            exp.extend_from_slice(&vocab.expansion[b as usize]);
            vocab.expansion.push(exp);
            vocab.merges.push((a, b));
        }
        if vocab.size() != size {
            return Err(BpeError::Format {
                line: 1,
                detail: format!(
                    "header says size={size} but file defines {} ids",
                    vocab.size()
                ),
            });
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<(), BpeError> {
        let mut buf = Vec::new();
        self.to_writer(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BpeError> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(std::io::BufReader::new(file))
    }
}

/// One left-to-right greedy pass replacing `pair` with `new_id`.
fn merge_in_place(seq: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    let mut read = 0;
    let mut write = 0;
    while read < seq.len() {
        if read + 1 < seq.len() && seq[read] == pair.0 && seq[read + 1] == pair.1 {
            seq[write] = new_id;
            read += 2;
        } else {
            seq[write] = seq[read];
            read += 1;
        }
        write += 1;
    }
    seq.truncate(write);
}
