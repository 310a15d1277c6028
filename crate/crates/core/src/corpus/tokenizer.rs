use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{QAItem, TokenCount};
use crate::error::{Error, Result};
use crate::model::LmExample;

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const SEP: usize = 258;
pub const FIRST_MERGE: usize = 259;

/// Byte-level BPE. Ids `0..256` are raw bytes, then the three specials, then
/// one id per learned merge in the order they were learned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Stored", into = "Stored")]
pub struct Tokenizer {
    merges: Vec<(usize, usize)>,
    ranks: HashMap<(usize, usize), usize>,
    pieces: Vec<Vec<u8>>,
}

#[derive(Serialize, Deserialize)]
struct Stored {
    merges: Vec<(usize, usize)>,
}

impl From<Stored> for Tokenizer {
    fn from(s: Stored) -> Self {
        Tokenizer::from_merges(s.merges)
    }
}

impl From<Tokenizer> for Stored {
    fn from(t: Tokenizer) -> Self {
        Stored { merges: t.merges }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Letter,
    Digit,
    Space,
    Newline,
    Other,
}

fn class(c: char) -> Class {
    if c.is_alphabetic() {
        Class::Letter
    } else if c.is_numeric() {
        Class::Digit
    } else if c == ' ' {
        Class::Space
    } else if c.is_whitespace() {
        Class::Newline
    } else {
        Class::Other
    }
}

/// Splits text into merge domains: letter runs and punctuation runs, each
/// with at most one leading space, single digits, and whitespace runs.
fn pre_tokenize(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let start = chars[i].0;
        let mut j = i;
        let mut cls = class(chars[i].1);
        if cls == Class::Space && j + 1 < chars.len() {
            let next = class(chars[j + 1].1);
            if matches!(next, Class::Letter | Class::Digit | Class::Other) {
                j += 1;
                cls = next;
            }
        }
        j += 1;
        match cls {
            Class::Letter | Class::Other => {
                while j < chars.len() && class(chars[j].1) == cls {
                    j += 1;
                }
            }
            Class::Digit => {}
            Class::Space | Class::Newline => {
                while j < chars.len() && matches!(class(chars[j].1), Class::Space | Class::Newline) {
                    j += 1;
                }
                // leave a final space to lead the following word
                if j < chars.len() && j - i > 1 && chars[j - 1].1 == ' ' {
                    j -= 1;
                }
            }
        }
        let end = chars.get(j).map_or(text.len(), |c| c.0);
        out.push(&text[start..end]);
        i = j;
    }
    out
}

/// Byte chunks of arbitrary input: valid UTF-8 goes through the
/// pre-tokenizer, each invalid byte stands alone.
fn byte_chunks(bytes: &[u8]) -> Vec<&[u8]> {
    let mut out = Vec::new();
    for chunk in bytes.utf8_chunks() {
        for piece in pre_tokenize(chunk.valid()) {
            out.push(piece.as_bytes());
        }
        for b in chunk.invalid().chunks(1) {
            out.push(b);
        }
    }
    out
}

fn merge_pair(seq: &[usize], pair: (usize, usize), id: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && (seq[i], seq[i + 1]) == pair {
            out.push(id);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    out
}

impl Tokenizer {
    /// The pure byte tokenizer.
    pub fn bytes_only() -> Self {
        Tokenizer::from_merges(Vec::new())
    }

    pub fn from_merges(merges: Vec<(usize, usize)>) -> Self {
        let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        pieces.extend([Vec::new(), Vec::new(), Vec::new()]);
        let mut ranks = HashMap::new();
        for (r, &(a, b)) in merges.iter().enumerate() {
            let mut p = pieces[a].clone();
            p.extend_from_slice(&pieces[b]);
            pieces.push(p);
            ranks.insert((a, b), r);
        }
        Tokenizer { merges, ranks, pieces }
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn merges(&self) -> &[(usize, usize)] {
        &self.merges
    }

    fn encode_chunk(&self, chunk: &[u8], out: &mut Vec<usize>) {
        let mut seq: Vec<usize> = chunk.iter().map(|&b| b as usize).collect();
        while seq.len() > 1 {
            let best = seq.windows(2).filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&r| (r, (w[0], w[1])))).min();
            match best {
                Some((r, pair)) => seq = merge_pair(&seq, pair, FIRST_MERGE + r),
                None => break,
            }
        }
        out.extend(seq);
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<usize> {
        let mut out = Vec::new();
        for chunk in byte_chunks(bytes) {
            self.encode_chunk(chunk, &mut out);
        }
        out
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        self.encode_bytes(text.as_bytes())
    }

    /// Bytes of the given ids; special tokens contribute nothing.
    pub fn decode_bytes(&self, ids: &[usize]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let piece = self.pieces.get(id).ok_or(Error::TokenOutOfRange { id, vocab: self.pieces.len() })?;
            out.extend_from_slice(piece);
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("tokenizer serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::invalid(format!("tokenizer json: {e}")))
    }

    /// Lowercase hex SHA-256 of the JSON form.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_json().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl Tokenizer {
    /// `[BOS] question [SEP]`, the prompt a model completes.
    pub fn prompt_tokens(&self, question: &str) -> Vec<usize> {
        let mut out = vec![BOS];
        out.extend(self.encode(question));
        out.push(SEP);
        out
    }

    /// `[BOS] question [SEP] completion [EOS]` with the loss on the
    /// completion and the closing EOS only.
    pub fn encode_example(&self, item: &QAItem, max_seq_len: usize) -> Result<LmExample> {
        let mut tokens = self.prompt_tokens(&item.question);
        let sep = tokens.len() - 1;
        tokens.extend(self.encode(&item.completion()));
        tokens.push(EOS);
        // the final token is only ever a target
        if tokens.len() - 1 > max_seq_len {
            return Err(Error::SequenceTooLong { len: tokens.len() - 1, max: max_seq_len });
        }
        let loss_mask = (0..tokens.len() - 1).map(|t| t >= sep).collect();
        Ok(LmExample { tokens, loss_mask })
    }
}

impl TokenCount for Tokenizer {
    fn count_tokens(&self, text: &str) -> usize {
        self.encode(text).len()
    }
}

/// Greedy BPE: repeatedly merge the most frequent adjacent pair (ties to the
/// smallest pair) until the vocabulary reaches `target_vocab` or no pair
/// occurs twice.
pub fn train_tokenizer<S: AsRef<str>>(corpus: &[S], target_vocab: usize) -> Result<Tokenizer> {
    if target_vocab < FIRST_MERGE {
        return Err(Error::invalid(format!(
            "target vocabulary {target_vocab} is below the {FIRST_MERGE} byte and special ids"
        )));
    }
    if corpus.is_empty() {
        return Err(Error::invalid("tokenizer corpus is empty"));
    }
    let mut freq: HashMap<&[u8], u64> = HashMap::new();
    for text in corpus {
        for chunk in byte_chunks(text.as_ref().as_bytes()) {
            *freq.entry(chunk).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<usize>, u64)> =
        freq.into_iter().map(|(c, n)| (c.iter().map(|&b| b as usize).collect(), n)).collect();
    words.sort();

    let mut merges = Vec::new();
    while FIRST_MERGE + merges.len() < target_vocab {
        let mut counts: HashMap<(usize, usize), u64> = HashMap::new();
        for (w, n) in &words {
            for p in w.windows(2) {
                *counts.entry((p[0], p[1])).or_default() += n;
            }
        }
        let Some((pair, count)) = counts.into_iter().max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0))) else {
            break;
        };
        if count < 2 {
            break;
        }
        let id = FIRST_MERGE + merges.len();
        merges.push(pair);
        for (w, _) in words.iter_mut() {
            if w.len() > 1 {
                *w = merge_pair(w, pair, id);
            }
        }
    }
    Ok(Tokenizer::from_merges(merges))
}
