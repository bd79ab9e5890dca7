//! Bidirectional mapping between strings and token-id sequences, plus
//! padding-aware token-budget bucketing.
//!
//! Vocabularies are loaded from a text file (one token per line, specials
//! first) so the token tables stay configuration, not code. Tokenization is
//! greedy longest-match, which keeps "Cl", "Br", and "@@" single tokens.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use thiserror::Error;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const PAD: &str = "<pad>";

pub const SMILES_VOCAB: &str = include_str!("../data/smiles_vocab.txt");
pub const INCHI_VOCAB: &str = include_str!("../data/inchi_vocab.txt");

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("unknown symbol at byte {offset}")]
    UnknownSymbol { offset: usize },
    #[error("token id {0} is out of range")]
    BadId(u32),
    #[error("bad vocabulary: {0}")]
    BadVocabulary(String),
    #[error("sequence pair {index} needs {len} tokens, budget is {budget}")]
    SequenceTooLong {
        index: usize,
        len: usize,
        budget: usize,
    },
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    /// payload tokens ordered longest-first for greedy matching
    match_order: Vec<u32>,
    bos: u32,
    eos: u32,
    pad: u32,
}

impl Vocabulary {
    pub fn from_lines(text: &str) -> Result<Vocabulary, TokenizerError> {
        let tokens: Vec<String> = text
            .lines()
            .map(|l| l.to_string())
            .filter(|l| !l.is_empty())
            .collect();
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(TokenizerError::BadVocabulary(format!(
                    "duplicate token {t:?}"
                )));
            }
        }
        let special = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| TokenizerError::BadVocabulary(format!("missing {name}")))
        };
        let bos = special(BOS)?;
        let eos = special(EOS)?;
        let pad = special(PAD)?;
        let mut match_order: Vec<u32> = (0..tokens.len() as u32)
            .filter(|&i| i != bos && i != eos && i != pad)
            .collect();
        match_order.sort_by(|&a, &b| {
            tokens[b as usize]
                .len()
                .cmp(&tokens[a as usize].len())
                .then(tokens[a as usize].cmp(&tokens[b as usize]))
        });
        Ok(Vocabulary {
            tokens,
            index,
            match_order,
            bos,
            eos,
            pad,
        })
    }

    pub fn from_file(path: &Path) -> Result<Vocabulary, TokenizerError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TokenizerError::BadVocabulary(e.to_string()))?;
        Vocabulary::from_lines(&text)
    }

    pub fn smiles_default() -> Vocabulary {
        Vocabulary::from_lines(SMILES_VOCAB).expect("embedded vocabulary is well formed")
    }

    pub fn inchi_default() -> Vocabulary {
        Vocabulary::from_lines(INCHI_VOCAB).expect("embedded vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos(&self) -> u32 {
        self.bos
    }

    pub fn eos(&self) -> u32 {
        self.eos
    }

    pub fn pad(&self) -> u32 {
        self.pad
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn is_special(&self, id: u32) -> bool {
        id == self.bos || id == self.eos || id == self.pad
    }

    /// Payload token ids (everything except the three specials).
    pub fn payload_ids(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.tokens.len() as u32).filter(|&i| !self.is_special(i))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqKind {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub kind: SeqKind,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

impl fmt::Display for TokenSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.ids)
    }
}

/// Greedy longest-match segmentation. Targets get BOS/EOS wrapped around
/// the payload; sources carry the bare payload.
pub fn tokenize(s: &str, vocab: &Vocabulary, kind: SeqKind) -> Result<TokenSequence, TokenizerError> {
    let mut ids = Vec::new();
    if kind == SeqKind::Target {
        ids.push(vocab.bos);
    }
    let bytes = s.as_bytes();
    let mut pos = 0;
    'outer: while pos < bytes.len() {
        for &tid in &vocab.match_order {
            let tok = vocab.tokens[tid as usize].as_bytes();
            if bytes[pos..].starts_with(tok) {
                ids.push(tid);
                pos += tok.len();
                continue 'outer;
            }
        }
        return Err(TokenizerError::UnknownSymbol { offset: pos });
    }
    if kind == SeqKind::Target {
        ids.push(vocab.eos);
    }
    Ok(TokenSequence { ids, kind })
}

/// Concatenated token strings with specials stripped. Inverse of `tokenize`
/// on vocabulary-coverable strings.
pub fn detokenize(t: &TokenSequence, vocab: &Vocabulary) -> Result<String, TokenizerError> {
    detokenize_ids(&t.ids, vocab)
}

/// `detokenize` over a bare id slice (e.g. greedy-decoder output).
pub fn detokenize_ids(ids: &[u32], vocab: &Vocabulary) -> Result<String, TokenizerError> {
    let mut out = String::new();
    for &id in ids {
        if vocab.is_special(id) {
            continue;
        }
        let tok = vocab.token(id).ok_or(TokenizerError::BadId(id))?;
        out.push_str(tok);
    }
    Ok(out)
}

/// One batch of corpus indices; padding happens at tensor-build time.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Batch {
    pub indices: Vec<usize>,
}

/// Width of the length ranges used to group sequences before packing.
pub const BUCKET_WIDTH: usize = 8;

/// Group (source, target) pairs by length range and pack each range into
/// batches whose padded source+target token count stays within the budget.
/// Every example appears in exactly one batch.
pub fn bucket_batches(
    corpus: &[(TokenSequence, TokenSequence)],
    token_budget: usize,
) -> Result<Vec<Batch>, TokenizerError> {
    let pair_len = |(s, t): &(TokenSequence, TokenSequence)| s.len() + t.len();
    let mut buckets: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, pair) in corpus.iter().enumerate() {
        let len = pair_len(pair);
        if len > token_budget {
            return Err(TokenizerError::SequenceTooLong {
                index: i,
                len,
                budget: token_budget,
            });
        }
        buckets.entry(len / BUCKET_WIDTH).or_default().push(i);
    }
    let mut ranges: Vec<usize> = buckets.keys().copied().collect();
    ranges.sort_unstable();
    let mut batches = Vec::new();
    for range in ranges {
        let members = &buckets[&range];
        let mut current: Vec<usize> = Vec::new();
        let mut max_src = 0usize;
        let mut max_tgt = 0usize;
        for &i in members {
            let s = corpus[i].0.len();
            let t = corpus[i].1.len();
            let new_src = max_src.max(s);
            let new_tgt = max_tgt.max(t);
            if !current.is_empty() && (current.len() + 1) * (new_src + new_tgt) > token_budget {
                batches.push(Batch {
                    indices: std::mem::take(&mut current),
                });
                max_src = 0;
                max_tgt = 0;
            }
            max_src = max_src.max(s);
            max_tgt = max_tgt.max(t);
            current.push(i);
        }
        if !current.is_empty() {
            batches.push(Batch { indices: current });
        }
    }
    Ok(batches)
}

/// Padded source+target token count of a batch (what the budget constrains).
pub fn batch_token_count(batch: &Batch, corpus: &[(TokenSequence, TokenSequence)]) -> usize {
    let max_src = batch.indices.iter().map(|&i| corpus[i].0.len()).max().unwrap_or(0);
    let max_tgt = batch.indices.iter().map(|&i| corpus[i].1.len()).max().unwrap_or(0);
    batch.indices.len() * (max_src + max_tgt)
}

/// JSON-lines batch manifest: one batch descriptor per line, indices only.
pub fn write_manifest<W: std::io::Write>(batches: &[Batch], mut w: W) -> std::io::Result<()> {
    for b in batches {
        serde_json::to_writer(&mut w, b)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_manifest<R: std::io::BufRead>(r: R) -> std::io::Result<Vec<Batch>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(std::io::Error::other)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(ids: &[u32], kind: SeqKind) -> TokenSequence {
        TokenSequence {
            ids: ids.to_vec(),
            kind,
        }
    }

    #[test]
    fn multi_char_tokens() {
        let v = Vocabulary::smiles_default();
        let t = tokenize("ClCCBr", &v, SeqKind::Source).unwrap();
        let toks: Vec<&str> = t.ids.iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(toks, vec!["Cl", "C", "C", "Br"]);
    }

    #[test]
    fn at_at_is_one_token() {
        let v = Vocabulary::smiles_default();
        let t = tokenize("[C@@H]", &v, SeqKind::Source).unwrap();
        let toks: Vec<&str> = t.ids.iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(toks, vec!["[", "C", "@@", "H", "]"]);
    }

    #[test]
    fn hand_segmented_count() {
        let v = Vocabulary::smiles_default();
        let t = tokenize("N[C@H](C)O", &v, SeqKind::Source).unwrap();
        assert_eq!(t.len(), 10);
        let at = v.id("@").unwrap();
        assert_eq!(t.ids.iter().filter(|&&i| i == at).count(), 1);
    }

    #[test]
    fn target_gets_bos_eos() {
        let v = Vocabulary::smiles_default();
        let t = tokenize("C", &v, SeqKind::Target).unwrap();
        assert_eq!(t.ids[0], v.bos());
        assert_eq!(*t.ids.last().unwrap(), v.eos());
    }

    #[test]
    fn detokenize_inverts() {
        let v = Vocabulary::smiles_default();
        for s in ["CCO", "N[C@@H](C)C(=O)O", "c1ccccc1", "F/C=C\\F", "C%12CC%12"] {
            let t = tokenize(s, &v, SeqKind::Target).unwrap();
            assert_eq!(detokenize(&t, &v).unwrap(), s);
        }
        // PAD suffix does not change the payload
        let mut t = tokenize("CCO", &v, SeqKind::Target).unwrap();
        t.ids.push(v.pad());
        assert_eq!(detokenize(&t, &v).unwrap(), "CCO");
        let empty = seq(&[v.bos(), v.eos()], SeqKind::Target);
        assert_eq!(detokenize(&empty, &v).unwrap(), "");
    }

    #[test]
    fn unknown_symbol_offset() {
        let v = Vocabulary::smiles_default();
        let e = tokenize("CC~C", &v, SeqKind::Source).unwrap_err();
        assert_eq!(e, TokenizerError::UnknownSymbol { offset: 2 });
    }

    #[test]
    fn bucketing_respects_budget_and_coverage() {
        let v = Vocabulary::smiles_default();
        let mk = |s: &str| {
            (
                tokenize(s, &v, SeqKind::Source).unwrap(),
                tokenize(s, &v, SeqKind::Target).unwrap(),
            )
        };
        let corpus: Vec<_> = ["C", "CC", "CCC", "CCCC", "CCCCO", "CCCCCC", "c1ccccc1", "CCO"]
            .iter()
            .map(|s| mk(s))
            .collect();
        let budget = 40;
        let batches = bucket_batches(&corpus, budget).unwrap();
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..corpus.len()).collect::<Vec<_>>());
        for b in &batches {
            assert!(batch_token_count(b, &corpus) <= budget);
        }
    }

    #[test]
    fn one_sequence_budget_exact() {
        let v = Vocabulary::smiles_default();
        let pair = (
            tokenize("CCO", &v, SeqKind::Source).unwrap(),
            tokenize("CCO", &v, SeqKind::Target).unwrap(),
        );
        let len = pair.0.len() + pair.1.len();
        let batches = bucket_batches(&[pair.clone()], len).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].indices, vec![0]);
        assert!(bucket_batches(&[pair], len - 1).is_err());
    }

    #[test]
    fn equal_length_packing_arithmetic() {
        let v = Vocabulary::smiles_default();
        let pairs: Vec<_> = (0..10)
            .map(|_| {
                (
                    tokenize("CCCC", &v, SeqKind::Source).unwrap(),
                    tokenize("CCCC", &v, SeqKind::Target).unwrap(),
                )
            })
            .collect();
        let pair_len = pairs[0].0.len() + pairs[0].1.len();
        let batches = bucket_batches(&pairs, 5 * pair_len).unwrap();
        assert_eq!(batches.len(), 2);
        assert!(batches.iter().all(|b| b.indices.len() == 5));
    }

    #[test]
    fn manifest_round_trip() {
        let batches = vec![
            Batch {
                indices: vec![0, 2, 4],
            },
            Batch {
                indices: vec![1, 3],
            },
        ];
        let mut buf = Vec::new();
        write_manifest(&batches, &mut buf).unwrap();
        let back = read_manifest(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back, batches);
    }

    #[test]
    fn inchi_vocabulary_covers_inchi_text() {
        let v = Vocabulary::inchi_default();
        let s = "InChI=1S/C2H6O/c1-2-3/h3H,2H2,1H3";
        let t = tokenize(s, &v, SeqKind::Source).unwrap();
        assert_eq!(detokenize(&t, &v).unwrap(), s);
    }
}
