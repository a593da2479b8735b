//! Corpus preparation: normalisation, exact and MinHash/LSH deduplication,
//! rule-based quality filtering, language tagging and intra-repository
//! topological ordering of code files.

use std::collections::{BTreeSet, HashMap, HashSet};

use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lang: Option<String>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Document {
            id: id.into(),
            text: text.into(),
            source: String::new(),
            lang: None,
        }
    }
}

/// Reads one JSON document per line, skipping blank lines.
pub fn read_jsonl(text: &str) -> Result<Vec<Document>> {
    let docs: Vec<Document> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<_, _>>()?;
    let mut ids = HashSet::new();
    for d in &docs {
        if !ids.insert(d.id.as_str()) {
            return Err(Error::input(format!("duplicate document id `{}`", d.id)));
        }
    }
    Ok(docs)
}

pub fn write_jsonl(docs: &[Document]) -> String {
    let mut out = String::new();
    for d in docs {
        out.push_str(&serde_json::to_string(d).expect("document serializes"));
        out.push('\n');
    }
    out
}

/// NFC, lower-cased, whitespace runs collapsed to one space, trimmed.
pub fn normalize(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    let lowered = nfc.to_lowercase();
    lowered.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicateGroup {
    pub kept: String,
    pub ids: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExactDedupReport {
    pub input: usize,
    pub kept: usize,
    pub groups: Vec<DuplicateGroup>,
}

/// Keeps the first document of every normalised-text equivalence class.
pub fn exact_dedup(docs: &[Document]) -> (Vec<Document>, ExactDedupReport) {
    let mut first: HashMap<String, usize> = HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut kept = Vec::new();
    for (i, d) in docs.iter().enumerate() {
        match first.entry(normalize(&d.text)) {
            std::collections::hash_map::Entry::Occupied(e) => groups[*e.get()].push(i),
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(groups.len());
                groups.push(vec![i]);
                kept.push(d.clone());
            }
        }
    }
    let report = ExactDedupReport {
        input: docs.len(),
        kept: kept.len(),
        groups: groups
            .into_iter()
            .filter(|g| g.len() > 1)
            .map(|g| DuplicateGroup {
                kept: docs[g[0]].id.clone(),
                ids: g.into_iter().map(|i| docs[i].id.clone()).collect(),
            })
            .collect(),
    };
    (kept, report)
}

pub const DEFAULT_SHINGLE_WIDTH: usize = 5;

/// Word shingles of the normalised text. Texts shorter than `width` words
/// yield a single shingle of all their words.
pub fn shingles(text: &str, width: usize) -> BTreeSet<String> {
    let norm = normalize(text);
    let words: Vec<&str> = norm.split(' ').collect();
    let width = width.max(1);
    if words.len() <= width {
        return std::iter::once(words.join(" ")).collect();
    }
    words.windows(width).map(|w| w.join(" ")).collect()
}

/// Exact Jaccard similarity of two sets.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinHashSignature {
    pub k: usize,
    pub shingle_width: usize,
    pub values: Vec<u64>,
}

impl MinHashSignature {
    /// Fraction of positions where the two signatures agree.
    pub fn agreement(&self, other: &MinHashSignature) -> f64 {
        assert_eq!(self.k, other.k, "signatures of different length");
        let same = self.values.iter().zip(&other.values).filter(|(a, b)| a == b).count();
        same as f64 / self.k as f64
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `k` seeded multiply-add mixers over one base hash per shingle.
#[derive(Debug, Clone)]
pub struct MinHasher {
    k: usize,
    shingle_width: usize,
    params: Vec<(u64, u64)>,
}

impl MinHasher {
    pub fn new(k: usize, shingle_width: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("minhash needs k >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = (0..k).map(|_| (rng.random::<u64>() | 1, rng.random::<u64>())).collect();
        Ok(MinHasher {
            k,
            shingle_width,
            params,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn signature_of_set(&self, set: &BTreeSet<String>) -> MinHashSignature {
        let mut values = vec![u64::MAX; self.k];
        for s in set {
            let base = mix64(fnv1a(s.as_bytes()));
            for (v, &(a, b)) in values.iter_mut().zip(&self.params) {
                let h = mix64(a.wrapping_mul(base).wrapping_add(b));
                if h < *v {
                    *v = h;
                }
            }
        }
        MinHashSignature {
            k: self.k,
            shingle_width: self.shingle_width,
            values,
        }
    }

    pub fn signature(&self, text: &str) -> MinHashSignature {
        self.signature_of_set(&shingles(text, self.shingle_width))
    }
}

pub fn minhash(doc: &Document, k: usize, shingle_width: usize, seed: u64) -> Result<MinHashSignature> {
    Ok(MinHasher::new(k, shingle_width, seed)?.signature(&doc.text))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LshConfig {
    pub k: usize,
    pub bands: usize,
    pub rows: usize,
    pub jaccard_threshold: f64,
    pub shingle_width: usize,
    pub seed: u64,
}

impl Default for LshConfig {
    fn default() -> Self {
        LshConfig {
            k: 128,
            bands: 16,
            rows: 8,
            jaccard_threshold: 0.8,
            shingle_width: DEFAULT_SHINGLE_WIDTH,
            seed: 0,
        }
    }
}

impl LshConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bands * self.rows != self.k {
            return Err(Error::config(format!(
                "bands ({}) x rows ({}) must equal k ({})",
                self.bands, self.rows, self.k
            )));
        }
        if !(0.0..=1.0).contains(&self.jaccard_threshold) {
            return Err(Error::config("jaccard threshold must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Probability that a pair with similarity `s` shares at least one band.
    pub fn detection_probability(&self, s: f64) -> f64 {
        1.0 - (1.0 - s.powi(self.rows as i32)).powi(self.bands as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePair {
    pub a: String,
    pub b: String,
    pub jaccard: f64,
    pub merged: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LshReport {
    pub input: usize,
    pub kept: usize,
    pub candidates: Vec<CandidatePair>,
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Band-bucket candidate generation, exact-Jaccard verification, and
/// union-find clustering that keeps the first-seen member of each cluster.
pub fn lsh_dedup(docs: &[Document], config: &LshConfig) -> Result<(Vec<Document>, LshReport)> {
    config.validate()?;
    let hasher = MinHasher::new(config.k, config.shingle_width, config.seed)?;
    let sets: Vec<BTreeSet<String>> = docs.iter().map(|d| shingles(&d.text, config.shingle_width)).collect();
    let sigs: Vec<MinHashSignature> = sets.iter().map(|s| hasher.signature_of_set(s)).collect();

    let mut pairs: BTreeSet<(usize, usize)> = BTreeSet::new();
    for band in 0..config.bands {
        let mut buckets: HashMap<&[u64], Vec<usize>> = HashMap::new();
        for (i, sig) in sigs.iter().enumerate() {
            let key = &sig.values[band * config.rows..(band + 1) * config.rows];
            buckets.entry(key).or_default().push(i);
        }
        for members in buckets.values() {
            for (x, &i) in members.iter().enumerate() {
                for &j in &members[x + 1..] {
                    pairs.insert((i.min(j), i.max(j)));
                }
            }
        }
    }

    let mut parent: Vec<usize> = (0..docs.len()).collect();
    let mut candidates = Vec::with_capacity(pairs.len());
    for (i, j) in pairs {
        let jac = jaccard(&sets[i], &sets[j]);
        let merged = jac >= config.jaccard_threshold;
        if merged {
            let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
            // the smaller index is the first-seen representative
            let (lo, hi) = (ri.min(rj), ri.max(rj));
            parent[hi] = lo;
        }
        candidates.push(CandidatePair {
            a: docs[i].id.clone(),
            b: docs[j].id.clone(),
            jaccard: jac,
            merged,
        });
    }
    let kept: Vec<Document> = (0..docs.len())
        .filter(|&i| find(&mut parent, i) == i)
        .map(|i| docs[i].clone())
        .collect();
    let report = LshReport {
        input: docs.len(),
        kept: kept.len(),
        candidates,
    };
    Ok((kept, report))
}

/// Declarative per-document rules. Unset rules are not applied.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QualityRules {
    pub min_chars: Option<usize>,
    pub max_chars: Option<usize>,
    /// Upper bound on the share of characters that are neither alphanumeric
    /// nor whitespace.
    pub max_symbol_ratio: Option<f64>,
    pub min_alpha_ratio: Option<f64>,
    #[serde(default)]
    pub banned_substrings: Vec<String>,
}

/// Model-based scorer slot; no implementation ships with the crate.
pub trait QualityScorer {
    fn score(&self, doc: &Document) -> f64;
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub kept: usize,
    pub rejected_by_rule: std::collections::BTreeMap<String, usize>,
}

fn symbol_ratio(text: &str) -> f64 {
    let total = text.chars().count();
    if total == 0 {
        return 0.0;
    }
    let symbols = text.chars().filter(|c| !c.is_alphanumeric() && !c.is_whitespace()).count();
    symbols as f64 / total as f64
}

fn alpha_ratio(text: &str) -> f64 {
    let total = text.chars().count();
    if total == 0 {
        return 0.0;
    }
    text.chars().filter(|c| c.is_alphabetic()).count() as f64 / total as f64
}

impl QualityRules {
    /// Name of the first rule the document fails.
    pub fn first_failure(&self, doc: &Document) -> Option<&'static str> {
        let chars = doc.text.chars().count();
        if self.min_chars.is_some_and(|m| chars < m) {
            return Some("min_chars");
        }
        if self.max_chars.is_some_and(|m| chars > m) {
            return Some("max_chars");
        }
        if self.max_symbol_ratio.is_some_and(|m| symbol_ratio(&doc.text) > m) {
            return Some("max_symbol_ratio");
        }
        if self.min_alpha_ratio.is_some_and(|m| alpha_ratio(&doc.text) < m) {
            return Some("min_alpha_ratio");
        }
        if self.banned_substrings.iter().any(|b| doc.text.contains(b.as_str())) {
            return Some("banned_substring");
        }
        None
    }
}

pub fn quality_filter(
    docs: &[Document],
    rules: &QualityRules,
    scorer: Option<(&dyn QualityScorer, f64)>,
) -> (Vec<Document>, FilterReport) {
    let mut report = FilterReport {
        input: docs.len(),
        ..Default::default()
    };
    let mut kept = Vec::new();
    for d in docs {
        let failure = rules.first_failure(d).or_else(|| {
            scorer.and_then(|(s, min)| (s.score(d) < min).then_some("scorer"))
        });
        match failure {
            Some(rule) => *report.rejected_by_rule.entry(rule.to_string()).or_insert(0) += 1,
            None => kept.push(d.clone()),
        }
    }
    report.kept = kept.len();
    (kept, report)
}

pub trait LanguageIdentifier {
    fn identify(&self, text: &str) -> Option<String>;
}

/// Tags text by its dominant script: Han → `zh`, Latin → `en`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptRatioIdentifier;

fn is_han(c: char) -> bool {
    matches!(c as u32, 0x4E00..=0x9FFF | 0x3400..=0x4DBF | 0xF900..=0xFAFF | 0x20000..=0x2A6DF)
}

impl LanguageIdentifier for ScriptRatioIdentifier {
    fn identify(&self, text: &str) -> Option<String> {
        let letters: Vec<char> = text.chars().filter(|c| c.is_alphabetic()).collect();
        if letters.is_empty() {
            return None;
        }
        let han = letters.iter().filter(|c| is_han(**c)).count();
        let latin = letters.iter().filter(|c| c.is_ascii_alphabetic()).count();
        if han * 2 >= letters.len() {
            Some("zh".into())
        } else if latin * 2 >= letters.len() {
            Some("en".into())
        } else {
            None
        }
    }
}

pub fn tag_languages(docs: &mut [Document], ident: &dyn LanguageIdentifier) {
    for d in docs {
        d.lang = ident.identify(&d.text);
    }
}

/// Files of one repository and their `(importer, imported)` edges.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeRepoGraph {
    pub nodes: Vec<String>,
    pub edges: Vec<(String, String)>,
}

impl CodeRepoGraph {
    pub fn validate(&self) -> Result<()> {
        let names: HashSet<&str> = self.nodes.iter().map(String::as_str).collect();
        if names.len() != self.nodes.len() {
            return Err(Error::input("duplicate file in repository graph"));
        }
        for (a, b) in &self.edges {
            for n in [a, b] {
                if !names.contains(n.as_str()) {
                    return Err(Error::input(format!("edge references unknown file `{n}`")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopoOrder {
    pub order: Vec<String>,
    /// Each dependency cycle, members in input order.
    pub cycles: Vec<Vec<String>>,
}

/// Orders files so that every imported file precedes its importers.
///
/// Strongly connected components are emitted as a unit, members in input
/// order, and reported in `cycles`. Among ready components the one holding
/// the earliest input file goes first.
pub fn topo_sort_repo(graph: &CodeRepoGraph) -> Result<TopoOrder> {
    graph.validate()?;
    let index: HashMap<&str, usize> = graph.nodes.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut g: DiGraph<usize, ()> = DiGraph::new();
    let handles: Vec<_> = (0..graph.nodes.len()).map(|i| g.add_node(i)).collect();
    for (importer, imported) in &graph.edges {
        // imported -> importer: an edge points at what must come later
        g.add_edge(handles[index[imported.as_str()]], handles[index[importer.as_str()]], ());
    }

    let mut comps: Vec<Vec<usize>> = tarjan_scc(&g)
        .into_iter()
        .map(|c| {
            let mut m: Vec<usize> = c.into_iter().map(|h| g[h]).collect();
            m.sort_unstable();
            m
        })
        .collect();
    comps.sort_by_key(|c| c[0]);
    let mut comp_of = vec![0; graph.nodes.len()];
    for (ci, c) in comps.iter().enumerate() {
        for &m in c {
            comp_of[m] = ci;
        }
    }
    let mut indegree = vec![0usize; comps.len()];
    let mut succ: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); comps.len()];
    for e in g.edge_indices() {
        let (s, t) = g.edge_endpoints(e).expect("edge exists");
        let (cs, ct) = (comp_of[g[s]], comp_of[g[t]]);
        if cs != ct && succ[cs].insert(ct) {
            indegree[ct] += 1;
        }
    }
    // comps are sorted by first member, so the index doubles as priority
    let mut ready: BTreeSet<usize> = (0..comps.len()).filter(|&c| indegree[c] == 0).collect();
    let mut order = Vec::with_capacity(graph.nodes.len());
    let mut cycles = Vec::new();
    while let Some(c) = ready.pop_first() {
        let self_loop = comps[c].len() == 1
            && graph
                .edges
                .iter()
                .any(|(a, b)| a == b && index[a.as_str()] == comps[c][0]);
        if comps[c].len() > 1 || self_loop {
            cycles.push(comps[c].iter().map(|&i| graph.nodes[i].clone()).collect());
        }
        order.extend(comps[c].iter().map(|&i| graph.nodes[i].clone()));
        for &n in &succ[c] {
            indegree[n] -= 1;
            if indegree[n] == 0 {
                ready.insert(n);
            }
        }
    }
    Ok(TopoOrder { order, cycles })
}
