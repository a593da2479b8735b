//! Byte-level BPE: training, encoding, decoding and the bytes-per-token
//! compression benchmark.
//!
//! Ids `0..256` are raw bytes, merge `r` produces id `256 + r`, and special
//! tokens follow the merges. Specials are never produced by [`TokenizerModel::encode`]
//! and never accepted by [`TokenizerModel::decode`].

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TOKENIZER_FORMAT_VERSION: u32 = 1;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const IMG_START: &str = "<img_start>";
pub const IMG_END: &str = "<img_end>";
pub const AUDIO_START: &str = "<audio_start>";
pub const AUDIO_END: &str = "<audio_end>";
pub const ROLE_SYSTEM: &str = "<|system|>";
pub const ROLE_USER: &str = "<|user|>";
pub const ROLE_ASSISTANT: &str = "<|assistant|>";
pub const TURN_END: &str = "<|end|>";

/// The reserved tokens the sequencer and chat template rely on.
pub const DEFAULT_SPECIALS: [&str; 11] = [
    PAD,
    BOS,
    EOS,
    IMG_START,
    IMG_END,
    AUDIO_START,
    AUDIO_END,
    ROLE_SYSTEM,
    ROLE_USER,
    ROLE_ASSISTANT,
    TURN_END,
];

pub fn default_specials() -> Vec<String> {
    DEFAULT_SPECIALS.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerModel {
    merges: Vec<(u32, u32)>,
    specials: Vec<String>,
    ranks: HashMap<(u32, u32), u32>,
    pieces: Vec<Vec<u8>>,
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    version: u32,
    specials: Vec<String>,
    merges: Vec<(u32, u32)>,
    vocab_size: usize,
}

impl TokenizerModel {
    /// Pure byte tokenizer: no merges.
    pub fn byte_level(specials: Vec<String>) -> Self {
        Self::from_parts(Vec::new(), specials).expect("no merges to validate")
    }

    pub fn from_parts(merges: Vec<(u32, u32)>, specials: Vec<String>) -> Result<Self> {
        let mut pieces: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &(l, r)) in merges.iter().enumerate() {
            let defined = 256 + rank as u32;
            if l >= defined || r >= defined {
                return Err(Error::config(format!(
                    "merge {rank} ({l}, {r}) references an id not defined before it"
                )));
            }
            if ranks.insert((l, r), rank as u32).is_some() {
                return Err(Error::config(format!("duplicate merge ({l}, {r})")));
            }
            let mut piece = pieces[l as usize].clone();
            piece.extend_from_slice(&pieces[r as usize]);
            pieces.push(piece);
        }
        let mut seen = std::collections::HashSet::new();
        for s in &specials {
            if !seen.insert(s) {
                return Err(Error::config(format!("duplicate special token {s}")));
            }
        }
        Ok(TokenizerModel {
            merges,
            specials,
            ranks,
            pieces,
        })
    }

    pub fn vocab_size(&self) -> usize {
        256 + self.merges.len() + self.specials.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn specials(&self) -> &[String] {
        &self.specials
    }

    pub fn special_id(&self, name: &str) -> Option<u32> {
        self.specials
            .iter()
            .position(|s| s == name)
            .map(|i| (256 + self.merges.len() + i) as u32)
    }

    pub fn is_special(&self, id: u32) -> bool {
        let first = 256 + self.merges.len();
        (id as usize) >= first && (id as usize) < self.vocab_size()
    }

    /// Bytes spelled by a non-special id.
    pub fn piece(&self, id: u32) -> Option<&[u8]> {
        self.pieces.get(id as usize).map(Vec::as_slice)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        self.encode_bytes(text.as_bytes())
    }

    /// Applies merges lowest-rank first, leftmost first within a rank.
    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<u32> {
        const NONE: usize = usize::MAX;
        let n = bytes.len();
        if n < 2 || self.merges.is_empty() {
            return bytes.iter().map(|&b| b as u32).collect();
        }
        let mut ids: Vec<u32> = bytes.iter().map(|&b| b as u32).collect();
        let mut next: Vec<usize> = (1..=n).map(|i| if i == n { NONE } else { i }).collect();
        let mut prev: Vec<usize> = (0..n).map(|i| if i == 0 { NONE } else { i - 1 }).collect();
        let mut alive = vec![true; n];
        let mut heap = BinaryHeap::new();
        for i in 0..n - 1 {
            if let Some(&rank) = self.ranks.get(&(ids[i], ids[i + 1])) {
                heap.push(Reverse((rank, i)));
            }
        }
        while let Some(Reverse((rank, pos))) = heap.pop() {
            if !alive[pos] || next[pos] == NONE {
                continue;
            }
            let right = next[pos];
            if self.ranks.get(&(ids[pos], ids[right])) != Some(&rank) {
                continue;
            }
            ids[pos] = 256 + rank;
            alive[right] = false;
            next[pos] = next[right];
            if next[pos] != NONE {
                prev[next[pos]] = pos;
            }
            if prev[pos] != NONE {
                if let Some(&r) = self.ranks.get(&(ids[prev[pos]], ids[pos])) {
                    heap.push(Reverse((r, prev[pos])));
                }
            }
            if next[pos] != NONE {
                if let Some(&r) = self.ranks.get(&(ids[pos], ids[next[pos]])) {
                    heap.push(Reverse((r, pos)));
                }
            }
        }
        let mut out = Vec::new();
        let mut i = 0;
        while i != NONE {
            out.push(ids[i]);
            i = next[i];
        }
        out
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            match self.pieces.get(id as usize) {
                Some(p) => out.extend_from_slice(p),
                None => return Err(Error::UnknownToken { id }),
            }
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        String::from_utf8(bytes).map_err(|e| Error::input(format!("decoded bytes are not UTF-8: {e}")))
    }

    /// Like [`decode`](Self::decode) but renders specials by name and
    /// replaces invalid UTF-8. For display only.
    pub fn render(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        let mut pending = Vec::new();
        for &id in ids {
            if let Some(p) = self.pieces.get(id as usize) {
                pending.extend_from_slice(p);
                continue;
            }
            out.push_str(&String::from_utf8_lossy(&pending));
            pending.clear();
            let first = 256 + self.merges.len();
            match self.specials.get((id as usize).wrapping_sub(first)) {
                Some(name) => out.push_str(name),
                None => {
                    let _ = write!(out, "<unk:{id}>");
                }
            }
        }
        out.push_str(&String::from_utf8_lossy(&pending));
        out
    }

    pub fn to_json(&self) -> String {
        let file = TokenizerFile {
            version: TOKENIZER_FORMAT_VERSION,
            specials: self.specials.clone(),
            merges: self.merges.clone(),
            vocab_size: self.vocab_size(),
        };
        let mut s = serde_json::to_string(&file).expect("tokenizer serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TokenizerFile = serde_json::from_str(text)?;
        if file.version != TOKENIZER_FORMAT_VERSION {
            return Err(Error::config(format!(
                "unsupported tokenizer version {}",
                file.version
            )));
        }
        let model = Self::from_parts(file.merges, file.specials)?;
        if model.vocab_size() != file.vocab_size {
            return Err(Error::config(format!(
                "vocab_size {} does not match 256 + merges + specials = {}",
                file.vocab_size,
                model.vocab_size()
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Greedy byte-pair training. Pairs never span document boundaries.
///
/// The most frequent adjacent pair is merged until the vocabulary reaches
/// `target_vocab` or no pair occurs at least twice. Equal counts resolve to
/// the lexicographically smallest `(left, right)`.
pub fn train_bpe<D: AsRef<[u8]>>(
    corpus: &[D],
    target_vocab: usize,
    specials: Vec<String>,
) -> Result<TokenizerModel> {
    let floor = 256 + specials.len();
    if target_vocab < floor {
        return Err(Error::config(format!(
            "target vocab {target_vocab} is below 256 bytes + {} specials",
            specials.len()
        )));
    }
    if corpus.iter().all(|d| d.as_ref().is_empty()) {
        return Err(Error::input("training corpus is empty"));
    }
    let budget = target_vocab - floor;
    let mut docs: Vec<Vec<u32>> = corpus
        .iter()
        .map(|d| d.as_ref().iter().map(|&b| b as u32).collect())
        .collect();
    let mut merges = Vec::with_capacity(budget);

    while merges.len() < budget {
        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        for doc in &docs {
            for w in doc.windows(2) {
                *counts.entry((w[0], w[1])).or_insert(0) += 1;
            }
        }
        let best = counts
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some((pair, count)) = best else { break };
        if count < 2 {
            break;
        }
        let new_id = 256 + merges.len() as u32;
        for doc in docs.iter_mut() {
            apply_merge(doc, pair, new_id);
        }
        merges.push(pair);
    }
    TokenizerModel::from_parts(merges, specials)
}

fn apply_merge(doc: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    let mut out = Vec::with_capacity(doc.len());
    let mut i = 0;
    while i < doc.len() {
        if i + 1 < doc.len() && doc[i] == pair.0 && doc[i + 1] == pair.1 {
            out.push(new_id);
            i += 2;
        } else {
            out.push(doc[i]);
            i += 1;
        }
    }
    *doc = out;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainRate {
    pub domain: String,
    pub corpus_bytes: u64,
    pub token_count: u64,
}

impl DomainRate {
    pub fn rate(&self) -> f64 {
        self.corpus_bytes as f64 / self.token_count as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainError {
    pub domain: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub vocab_size: usize,
    pub entries: Vec<DomainRate>,
    pub errors: Vec<DomainError>,
    /// Set when some domain was excluded from the average.
    pub warning: bool,
}

impl CompressionReport {
    /// Unweighted mean of the per-domain rates.
    pub fn average(&self) -> Option<f64> {
        if self.entries.is_empty() {
            return None;
        }
        Some(self.entries.iter().map(DomainRate::rate).sum::<f64>() / self.entries.len() as f64)
    }

    /// Domains as rows, bytes/token as the column, then an `Average` row.
    pub fn render_table(&self) -> String {
        let width = self
            .entries
            .iter()
            .map(|e| e.domain.len())
            .chain(self.errors.iter().map(|e| e.domain.len()))
            .chain(std::iter::once("Average".len()))
            .max()
            .unwrap_or(7);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>12}  {:>10}  {:>8}", "Domain", "Bytes", "Tokens", "Rate");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{:<width$}  {:>12}  {:>10}  {:>8.2}",
                e.domain,
                e.corpus_bytes,
                e.token_count,
                e.rate()
            );
        }
        for e in &self.errors {
            let _ = writeln!(out, "{:<width$}  {:>12}  {:>10}  {:>8}", e.domain, "-", "-", "error");
        }
        match self.average() {
            Some(avg) => {
                let _ = writeln!(out, "{:<width$}  {:>12}  {:>10}  {:>8.2}", "Average", "", "", avg);
            }
            None => {
                let _ = writeln!(out, "{:<width$}  {:>12}  {:>10}  {:>8}", "Average", "", "", "n/a");
            }
        }
        if self.warning {
            let _ = writeln!(out, "warning: {} domain(s) excluded from the average", self.errors.len());
        }
        out
    }
}

/// Bytes per token for each named corpus.
pub fn compression_rate<N: AsRef<str>, D: AsRef<[u8]>>(
    model: &TokenizerModel,
    corpora: &[(N, D)],
) -> CompressionReport {
    let mut entries = Vec::new();
    let mut errors = Vec::new();
    for (name, data) in corpora {
        let data = data.as_ref();
        if data.is_empty() {
            errors.push(DomainError {
                domain: name.as_ref().to_string(),
                message: "empty corpus".into(),
            });
            continue;
        }
        entries.push(DomainRate {
            domain: name.as_ref().to_string(),
            corpus_bytes: data.len() as u64,
            token_count: model.encode_bytes(data).len() as u64,
        });
    }
    CompressionReport {
        vocab_size: model.vocab_size(),
        warning: !errors.is_empty(),
        entries,
        errors,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn byte_model() -> TokenizerModel {
        TokenizerModel::byte_level(Vec::new())
    }

    #[test]
    fn abab_merges_ab_first() {
        let m = train_bpe(&["abababab"], 259, vec![]).unwrap();
        assert_eq!(m.merges()[0], (b'a' as u32, b'b' as u32));
        // 'ab'x4 -> ('ab','ab') x3 -> one pair left, below threshold
        assert_eq!(m.merges().len(), 2);
        assert_eq!(m.vocab_size(), 256 + 2);
    }

    #[test]
    fn zero_budget_is_pure_bytes() {
        let specials = default_specials();
        let m = train_bpe(&["hello hello"], 256 + specials.len(), specials.clone()).unwrap();
        assert!(m.merges().is_empty());
        assert_eq!(m.vocab_size(), 256 + specials.len());
    }

    #[test]
    fn unique_bytes_stop_early() {
        let m = train_bpe(&["abcdefg"], 300, vec![]).unwrap();
        assert!(m.merges().is_empty());
    }

    #[test]
    fn budget_below_floor_is_rejected() {
        let err = train_bpe(&["abc"], 257, vec!["<a>".into(), "<b>".into()]).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
        assert!(train_bpe(&[""], 300, vec![]).is_err());
    }

    #[test]
    fn encode_examples() {
        assert_eq!(byte_model().encode("hi"), vec![0x68, 0x69]);
        let m = TokenizerModel::from_parts(vec![(b'a' as u32, b'b' as u32)], vec![]).unwrap();
        assert_eq!(m.encode("ab"), vec![256]);
        assert_eq!(m.encode("xaby"), vec![b'x' as u32, 256, b'y' as u32]);
        assert!(m.encode("").is_empty());
    }

    #[test]
    fn overlapping_runs_merge_leftmost() {
        let m = TokenizerModel::from_parts(vec![(97, 97)], vec![]).unwrap();
        assert_eq!(m.encode("aaa"), vec![256, 97]);
        assert_eq!(m.encode("aaaa"), vec![256, 256]);
    }

    #[test]
    fn decode_examples() {
        let m = train_bpe(&["你好你好你好 hello hello"], 300, default_specials()).unwrap();
        assert_eq!(m.decode(&m.encode("你好")).unwrap(), "你好");
        assert_eq!(m.decode(&[]).unwrap(), "");
        let v = m.vocab_size() as u32;
        assert!(matches!(m.decode(&[v]), Err(Error::UnknownToken { id }) if id == v));
        let eos = m.special_id(EOS).unwrap();
        assert!(m.decode(&[eos]).is_err());
        assert_eq!(m.render(&[104, eos]), "h<eos>");
    }

    #[test]
    fn invalid_merge_table_rejected() {
        assert!(TokenizerModel::from_parts(vec![(256, 97)], vec![]).is_err());
        assert!(TokenizerModel::from_parts(vec![(97, 98), (97, 98)], vec![]).is_err());
    }

    #[test]
    fn json_round_trip_is_byte_exact() {
        let m = train_bpe(&["the cat sat on the mat, the end"], 270, default_specials()).unwrap();
        let text = m.to_json();
        let back = TokenizerModel::from_json(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json(), text);
        let tampered = text.replace(&format!("\"vocab_size\":{}", m.vocab_size()), "\"vocab_size\":3");
        assert!(TokenizerModel::from_json(&tampered).is_err());
    }

    #[test]
    fn rate_examples() {
        let r = DomainRate {
            domain: "Average-like".into(),
            corpus_bytes: 386,
            token_count: 100,
        };
        assert_eq!(format!("{:.2}", r.rate()), "3.86");

        let report = compression_rate(&byte_model(), &[("en", b"plain ascii".as_slice()), ("empty", b"")]);
        assert_eq!(report.entries[0].rate(), 1.0);
        assert_eq!(report.average(), Some(1.0));
        assert!(report.warning);
        assert_eq!(report.errors[0].domain, "empty");
        let table = report.render_table();
        assert!(table.contains("Average"));
        assert!(table.contains("1.00"));
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = ["low lower lowest", "new newer newest", "wide wider widest"];
        let a = train_bpe(&corpus, 290, vec![]).unwrap();
        let b = train_bpe(&corpus, 290, vec![]).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    proptest! {
        #[test]
        fn round_trip(s in "\\PC*") {
            let m = train_bpe(&["the quick brown fox 你好世界 🦀🦀 jumps"], 300, vec![]).unwrap();
            prop_assert_eq!(m.decode(&m.encode(&s)).unwrap(), s);
        }

        #[test]
        fn adding_merges_never_adds_tokens(s in "[abc ]{0,60}", k in 0usize..20) {
            let full = train_bpe(&["abc abc aab bca cab abcabc  ab ba"], 300, vec![]).unwrap();
            let k = k.min(full.merges().len());
            let fewer = TokenizerModel::from_parts(full.merges()[..k].to_vec(), vec![]).unwrap();
            prop_assert!(full.encode(&s).len() <= fewer.encode(&s).len());
        }
    }
}
