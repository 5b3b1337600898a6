//! Tokenization, vocabulary management and the caption sequence type.
//!
//! Text is lowercase and whitespace-separable by construction (the synthetic
//! grammar emits pre-normalized strings), so tokenization is a plain split.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const PAD: usize = 3;

/// Surface forms of the reserved tokens, in id order.
pub const RESERVED: [&str; 4] = ["<bos>", "<eos>", "<unk>", "<pad>"];

/// Maximum caption length including BOS and EOS.
pub const MAX_LEN: usize = 16;

/// Fixed token/id mapping. Ids are dense `0..len()` with the four reserved
/// tokens at ids 0–3; immutable after construction.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from a tokenized corpus. Tokens whose corpus
    /// frequency reaches `min_count` get ids after the reserved block,
    /// ordered by descending frequency with lexicographic tie-breaks.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Vocab> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if min_count < 1 {
            return Err(Error::config("min_count must be >= 1"));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for line in corpus {
            for tok in line.as_ref().split_whitespace() {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(tok, n)| n >= min_count && !RESERVED.contains(&tok))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(kept.into_iter().map(|(tok, _)| tok.to_string()));
        Ok(Vocab::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Vocab {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    /// Serializes as a JSON array of tokens in id order (reserved first).
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.tokens).expect("vocab tokens serialize")
    }

    pub fn from_json(json: &str) -> Result<Vocab> {
        let tokens: Vec<String> = serde_json::from_str(json)?;
        if tokens.len() < RESERVED.len() || tokens[..4] != RESERVED.map(String::from) {
            return Err(Error::config("vocab json must start with the reserved tokens"));
        }
        Ok(Vocab::from_tokens(tokens))
    }
}

/// A token-id sequence starting with BOS and ending with EOS, optionally
/// carrying the per-step log-probabilities recorded by a decoder (one per
/// id after BOS).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    pub ids: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub logprobs: Option<Vec<f64>>,
}

impl Caption {
    pub fn new(ids: Vec<usize>) -> Caption {
        Caption { ids, logprobs: None }
    }

    /// Interior ids, i.e. everything between BOS and EOS.
    pub fn body(&self) -> &[usize] {
        &self.ids[1..self.ids.len() - 1]
    }

    pub fn total_logprob(&self) -> Option<f64> {
        self.logprobs.as_ref().map(|lp| lp.iter().sum())
    }

    /// Checks the structural invariants: BOS/EOS framing, no reserved ids in
    /// the interior (UNK is allowed), length cap, and logprob alignment.
    pub fn is_valid(&self, max_len: usize) -> bool {
        let n = self.ids.len();
        if n < 2 || n > max_len {
            return false;
        }
        if self.ids[0] != BOS || self.ids[n - 1] != EOS {
            return false;
        }
        if self.ids[1..n - 1]
            .iter()
            .any(|&id| id == BOS || id == EOS || id == PAD)
        {
            return false;
        }
        match &self.logprobs {
            Some(lp) => lp.len() == n - 1,
            None => true,
        }
    }
}

/// Maps text to `[BOS] + ids + [EOS]`, sending unknown tokens to UNK.
/// Returns the caption and whether it was truncated to fit `max_len`.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> (Caption, bool) {
    let mut ids = vec![BOS];
    let mut truncated = false;
    for tok in text.split_whitespace() {
        if ids.len() == max_len - 1 {
            truncated = true;
            break;
        }
        ids.push(vocab.id(tok).unwrap_or(UNK));
    }
    ids.push(EOS);
    (Caption::new(ids), truncated)
}

/// Space-joined surface tokens with the reserved ones dropped.
pub fn detokenize(caption: &Caption, vocab: &Vocab) -> Result<String> {
    let mut out = String::new();
    for &id in &caption.ids {
        let tok = vocab.token(id).ok_or(Error::IdOutOfRange {
            id,
            size: vocab.len(),
        })?;
        if id < RESERVED.len() {
            continue;
        }
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(tok);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_vocab() -> Vocab {
        Vocab::build(&["a red cube", "a red ball"], 1).unwrap()
    }

    #[test]
    fn build_vocab_counts() {
        let v = toy_vocab();
        // 4 reserved + {a, red, cube, ball}
        assert_eq!(v.len(), 8);
        // frequency order: a(2), red(2), then ball/cube lexicographic
        assert_eq!(v.token(4), Some("a"));
        assert_eq!(v.token(5), Some("red"));
        assert_eq!(v.token(6), Some("ball"));
        assert_eq!(v.token(7), Some("cube"));
    }

    #[test]
    fn build_vocab_min_count_threshold() {
        let v = Vocab::build(&["a red cube", "a red ball"], 2).unwrap();
        assert_eq!(v.len(), 6); // reserved + {a, red}
        assert_eq!(v.id("cube"), None);
        let (cap, _) = tokenize("a red cube", &v, MAX_LEN);
        assert_eq!(cap.ids, vec![BOS, v.id("a").unwrap(), v.id("red").unwrap(), UNK, EOS]);
    }

    #[test]
    fn build_vocab_empty_corpus_errors() {
        let corpus: Vec<String> = vec![];
        assert!(matches!(Vocab::build(&corpus, 1), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn build_vocab_deterministic() {
        let corpus: Vec<String> = (0..50)
            .flat_map(|i| {
                vec![
                    format!("a tok{} cube", i % 7),
                    format!("two tok{} balls", i % 5),
                ]
            })
            .collect();
        let a = Vocab::build(&corpus, 1).unwrap();
        let b = Vocab::build(&corpus, 1).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn tokenize_basic_and_empty() {
        let v = toy_vocab();
        let (cap, trunc) = tokenize("a red cube", &v, MAX_LEN);
        assert!(!trunc);
        assert_eq!(cap.ids.len(), 5);
        assert_eq!(cap.ids[0], BOS);
        assert_eq!(*cap.ids.last().unwrap(), EOS);

        let (empty, _) = tokenize("", &v, MAX_LEN);
        assert_eq!(empty.ids, vec![BOS, EOS]);
    }

    #[test]
    fn tokenize_unknown_maps_to_unk() {
        let v = toy_vocab();
        let (cap, _) = tokenize("a zzz cube", &v, MAX_LEN);
        assert_eq!(cap.ids[2], UNK);
        assert_eq!(detokenize(&cap, &v).unwrap(), "a cube");
    }

    #[test]
    fn tokenize_truncates_at_max_len() {
        let v = toy_vocab();
        let long = "a ".repeat(40);
        let (cap, trunc) = tokenize(&long, &v, MAX_LEN);
        assert!(trunc);
        assert_eq!(cap.ids.len(), MAX_LEN);
        assert!(cap.is_valid(MAX_LEN));
    }

    #[test]
    fn detokenize_round_trip_and_errors() {
        let v = toy_vocab();
        let (cap, _) = tokenize("a red ball", &v, MAX_LEN);
        assert_eq!(detokenize(&cap, &v).unwrap(), "a red ball");

        let bad = Caption::new(vec![BOS, 999, EOS]);
        assert!(matches!(
            detokenize(&bad, &v),
            Err(Error::IdOutOfRange { id: 999, .. })
        ));

        let empty = Caption::new(vec![BOS, EOS]);
        assert_eq!(detokenize(&empty, &v).unwrap(), "");
    }

    #[test]
    fn vocab_json_round_trip() {
        let v = toy_vocab();
        let back = Vocab::from_json(&v.to_json()).unwrap();
        assert_eq!(back.len(), v.len());
        assert_eq!(back.id("cube"), v.id("cube"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn tokenize_output_is_valid_caption(words in proptest::collection::vec("[a-z]{1,6}", 0..20)) {
                let v = toy_vocab();
                let text = words.join(" ");
                let (cap, _) = tokenize(&text, &v, MAX_LEN);
                prop_assert!(cap.is_valid(MAX_LEN));
            }

            #[test]
            fn round_trip_in_vocab(n in 1usize..8) {
                let v = toy_vocab();
                let toks = ["a", "red", "cube", "ball"];
                let text = (0..n).map(|i| toks[i % 4]).collect::<Vec<_>>().join(" ");
                let (cap, trunc) = tokenize(&text, &v, MAX_LEN);
                prop_assert!(!trunc);
                prop_assert_eq!(detokenize(&cap, &v).unwrap(), text);
            }
        }
    }
}
