//! Search-augmented answering as an explicit state machine: decide whether
//! to search, extract and summarise each source independently, then
//! compose an answer.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lm::{self, LmInput};
use crate::model::OmniModel;
use crate::tokenizer;

pub const TRANSCRIPT_SCHEMA_VERSION: u32 = 1;

/// Produces a completion for a prompt.
pub trait LlmBackend {
    fn complete(&mut self, prompt: &str) -> Result<String>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchResult {
    pub url: String,
    pub title: String,
    pub snippet: String,
}

pub trait SearchClient {
    fn search(&self, query: &str) -> Result<Vec<SearchResult>>;
}

/// Replays canned completions in order; fails once exhausted.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    replies: VecDeque<String>,
}

impl ScriptedBackend {
    pub fn new<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        ScriptedBackend {
            replies: replies.into_iter().map(Into::into).collect(),
        }
    }

    pub fn remaining(&self) -> usize {
        self.replies.len()
    }
}

impl LlmBackend for ScriptedBackend {
    fn complete(&mut self, _prompt: &str) -> Result<String> {
        self.replies
            .pop_front()
            .ok_or_else(|| Error::Search("scripted backend has no replies left".into()))
    }
}

/// Deterministic heuristic backend: searches for questions, extracts the
/// snippet sentence that shares the most words with the query, and
/// answers by quoting summaries.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleBackend;

fn field<'a>(prompt: &'a str, name: &str) -> Option<&'a str> {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix(name).map(str::trim))
}

fn words(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| w.len() > 2)
        .map(str::to_lowercase)
        .collect()
}

/// Splits at `.`, `!` or `?` followed by whitespace or the end of text.
fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        let at_break = chars.peek().is_none_or(|(_, n)| n.is_whitespace());
        if matches!(c, '.' | '!' | '?') && at_break {
            out.push(&text[start..i + c.len_utf8()]);
            start = i + c.len_utf8();
        }
    }
    out.push(&text[start..]);
    out.into_iter().map(str::trim).filter(|s| !s.is_empty()).collect()
}

impl LlmBackend for RuleBackend {
    fn complete(&mut self, prompt: &str) -> Result<String> {
        let query = field(prompt, "Question:").unwrap_or_default();
        if prompt.starts_with(DECIDE_HEADER) || prompt.starts_with(REPAIR_HEADER) {
            let wants_search = query.ends_with('?');
            return Ok(if wants_search {
                serde_json::json!({"action": "search", "query": query.trim_end_matches('?')}).to_string()
            } else {
                r#"{"action":"answer"}"#.to_string()
            });
        }
        if prompt.starts_with(EXTRACT_HEADER) {
            let snippet = field(prompt, "Snippet:").unwrap_or_default();
            let q = words(query);
            let best = sentences(snippet)
                .into_iter()
                .max_by_key(|s| words(s).iter().filter(|w| q.contains(w)).count());
            return Ok(best.unwrap_or("NONE").to_string());
        }
        if prompt.starts_with(SUMMARIZE_HEADER) {
            let extract = field(prompt, "Extract:").unwrap_or_default();
            return Ok(format!("Source says: {extract}"));
        }
        let notes: Vec<&str> = prompt
            .lines()
            .filter_map(|l| l.strip_prefix("- ").map(str::trim))
            .collect();
        Ok(if notes.is_empty() {
            format!("I can answer without searching: {query}")
        } else {
            format!("Based on {} sources: {}", notes.len(), notes.join(" "))
        })
    }
}

/// Greedy continuation from a language model; byte-level output is decoded
/// lossily.
pub struct ToyLmBackend<'a> {
    pub model: &'a OmniModel,
    pub max_new: usize,
}

impl LlmBackend for ToyLmBackend<'_> {
    fn complete(&mut self, prompt: &str) -> Result<String> {
        let tok = &self.model.tokenizer;
        let cfg = &self.model.config.lm;
        let mut ids = tok.encode(prompt);
        let room = cfg.max_context.saturating_sub(self.max_new).max(1);
        if ids.len() > room {
            ids.drain(..ids.len() - room);
        }
        let eos = tok.special_id(tokenizer::EOS);
        let new = lm::generate(cfg, &self.model.lm, LmInput::Ids(&ids), self.max_new, eos)?;
        let text: Vec<u32> = new.into_iter().filter(|&i| !tok.is_special(i)).collect();
        Ok(String::from_utf8_lossy(&tok.decode_bytes(&text)?).into_owned())
    }
}

pub fn query_key(query: &str) -> String {
    Sha256::digest(query.trim().to_lowercase().as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Deserialize)]
struct FixtureFile {
    entries: Vec<FixtureEntry>,
}

#[derive(Deserialize)]
struct FixtureEntry {
    key: String,
    results: Vec<SearchResult>,
}

/// Offline client over fixtures keyed by the SHA-256 of the normalised
/// query.
#[derive(Debug, Clone)]
pub struct MockSearchClient {
    fixtures: HashMap<String, Vec<SearchResult>>,
}

const FIXTURES: &str = include_str!("../fixtures/search.json");

impl MockSearchClient {
    pub fn new() -> Self {
        let file: FixtureFile = serde_json::from_str(FIXTURES).expect("embedded search fixtures parse");
        MockSearchClient {
            fixtures: file.entries.into_iter().map(|e| (e.key, e.results)).collect(),
        }
    }
}

impl Default for MockSearchClient {
    fn default() -> Self {
        Self::new()
    }
}

impl SearchClient for MockSearchClient {
    fn search(&self, query: &str) -> Result<Vec<SearchResult>> {
        Ok(mock_search_with(self, query))
    }
}

fn mock_search_with(client: &MockSearchClient, query: &str) -> Vec<SearchResult> {
    client.fixtures.get(&query_key(query)).cloned().unwrap_or_default()
}

/// Fixture results for `query`; unknown queries give no results.
pub fn mock_search(query: &str) -> Vec<SearchResult> {
    mock_search_with(&MockSearchClient::new(), query)
}

/// GET `{endpoint}?q=<query>` returning a JSON list of
/// `{url, title, snippet}`.
pub struct HttpSearchClient {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl HttpSearchClient {
    pub fn new(endpoint: impl Into<String>) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(20))
            .build()
            .map_err(|e| Error::Search(e.to_string()))?;
        Ok(HttpSearchClient {
            endpoint: endpoint.into(),
            client,
        })
    }
}

impl SearchClient for HttpSearchClient {
    fn search(&self, query: &str) -> Result<Vec<SearchResult>> {
        self.client
            .get(&self.endpoint)
            .query(&[("q", query)])
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json())
            .map_err(|e| Error::Search(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionMode {
    DirectAnswer,
    Search,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchDecision {
    pub mode: DecisionMode,
    pub query_rewrite: Option<String>,
    /// Both attempts failed to parse; fell back to answering directly.
    pub parse_failure: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateKind {
    Decide,
    Search,
    Extract,
    Summarize,
    Answer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub prompt: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateRecord {
    pub state: StateKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<usize>,
    pub exchanges: Vec<Exchange>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSummary {
    pub source: usize,
    pub url: String,
    pub snippet: String,
    pub extract: String,
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineTranscript {
    pub schema_version: u32,
    pub query: String,
    pub k: usize,
    pub decision: SearchDecision,
    pub states: Vec<StateRecord>,
    pub sources: Vec<SourceSummary>,
    /// Search or every extraction failed; the answer ignores sources.
    pub degraded: bool,
    pub answer: String,
}

impl PipelineTranscript {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("transcript serialises") + "\n"
    }

    pub fn kinds(&self) -> Vec<StateKind> {
        self.states.iter().map(|s| s.state).collect()
    }

    /// `Decide (Search Extract* Summarize*)? Answer`, with at least one
    /// extract and one summary unless degraded, and one summary per
    /// surviving source.
    pub fn is_legal(&self) -> bool {
        let k = self.kinds();
        let (Some(StateKind::Decide), Some(StateKind::Answer)) = (k.first(), k.last()) else {
            return false;
        };
        let mid = &k[1..k.len() - 1];
        if mid.is_empty() {
            return self.decision.mode == DecisionMode::DirectAnswer || self.degraded;
        }
        if mid[0] != StateKind::Search || self.decision.mode != DecisionMode::Search {
            return false;
        }
        let rest = &mid[1..];
        let extracts = rest.iter().take_while(|s| **s == StateKind::Extract).count();
        let summaries = rest[extracts..].iter().take_while(|s| **s == StateKind::Summarize).count();
        if extracts + summaries != rest.len() || summaries != self.sources.len() {
            return false;
        }
        self.degraded || (extracts > 0 && summaries > 0)
    }
}

const DECIDE_HEADER: &str = "You may call one tool before answering.";
const REPAIR_HEADER: &str = "Your previous reply did not match the tool-call schema.";
const EXTRACT_HEADER: &str = "Extract the part of this search result that helps answer the question.";
const SUMMARIZE_HEADER: &str = "Summarize this extract in one sentence.";
const ANSWER_HEADER: &str = "Answer the question.";
const CALL_SCHEMA: &str = r#"Tool: web_search(query: string)
Reply with JSON only, either {"action":"search","query":"<search terms>"} or {"action":"answer"}."#;

fn decide_prompt(query: &str) -> String {
    format!("{DECIDE_HEADER}\n{CALL_SCHEMA}\nQuestion: {query}\n")
}

fn repair_prompt(query: &str, bad: &str) -> String {
    format!("{REPAIR_HEADER}\nPrevious reply: {bad}\n{CALL_SCHEMA}\nQuestion: {query}\n")
}

fn extract_prompt(query: &str, r: &SearchResult) -> String {
    format!(
        "{EXTRACT_HEADER}\nReply NONE if nothing is relevant.\nQuestion: {query}\nTitle: {}\nSnippet: {}\n",
        r.title, r.snippet
    )
}

fn summarize_prompt(query: &str, extract: &str) -> String {
    format!("{SUMMARIZE_HEADER}\nQuestion: {query}\nExtract: {extract}\n")
}

fn answer_prompt(query: &str, sources: &[SourceSummary]) -> String {
    let mut p = format!("{ANSWER_HEADER}\nQuestion: {query}\n");
    if !sources.is_empty() {
        p.push_str("Notes:\n");
        for s in sources {
            p.push_str(&format!("- [{}] {}\n", s.url, s.summary));
        }
    }
    p
}

#[derive(Deserialize)]
struct ToolCall {
    action: String,
    #[serde(default)]
    query: Option<String>,
}

fn parse_decision(reply: &str) -> Option<SearchDecision> {
    let start = reply.find('{')?;
    let end = reply.rfind('}')?;
    let call: ToolCall = serde_json::from_str(reply.get(start..=end)?).ok()?;
    match call.action.as_str() {
        "answer" => Some(SearchDecision {
            mode: DecisionMode::DirectAnswer,
            query_rewrite: None,
            parse_failure: false,
        }),
        "search" => {
            let q = call.query.map(|q| q.trim().to_string()).filter(|q| !q.is_empty())?;
            Some(SearchDecision {
                mode: DecisionMode::Search,
                query_rewrite: Some(q),
                parse_failure: false,
            })
        }
        _ => None,
    }
}

fn call(backend: &mut dyn LlmBackend, step: &str, prompt: String) -> Result<Exchange> {
    let output = backend.complete(&prompt).map_err(|e| Error::Backend {
        step: step.to_string(),
        message: e.to_string(),
    })?;
    Ok(Exchange { prompt, output })
}

fn decide_logged(query: &str, backend: &mut dyn LlmBackend) -> Result<(SearchDecision, StateRecord)> {
    let first = call(backend, "decide", decide_prompt(query))?;
    let mut record = StateRecord {
        state: StateKind::Decide,
        source: None,
        exchanges: vec![first],
        note: None,
    };
    if let Some(d) = parse_decision(&record.exchanges[0].output) {
        return Ok((d, record));
    }
    let retry = call(backend, "decide", repair_prompt(query, &record.exchanges[0].output))?;
    let parsed = parse_decision(&retry.output);
    record.exchanges.push(retry);
    Ok(match parsed {
        Some(d) => (d, record),
        None => {
            record.note = Some("unparseable tool call after retry; answering directly".into());
            (
                SearchDecision {
                    mode: DecisionMode::DirectAnswer,
                    query_rewrite: None,
                    parse_failure: true,
                },
                record,
            )
        }
    })
}

/// Asks the backend whether to search; one repair retry, then direct answer.
pub fn decide(query: &str, backend: &mut dyn LlmBackend) -> Result<SearchDecision> {
    if query.trim().is_empty() {
        return Err(Error::input("query must be non-empty"));
    }
    Ok(decide_logged(query, backend)?.0)
}

fn is_none_reply(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t.eq_ignore_ascii_case("none")
}

/// Runs the full state machine and returns the answer with its transcript.
pub fn run_pipeline(
    query: &str,
    backend: &mut dyn LlmBackend,
    client: &dyn SearchClient,
    k: usize,
) -> Result<(String, PipelineTranscript)> {
    if k == 0 {
        return Err(Error::input("k must be at least 1"));
    }
    if query.trim().is_empty() {
        return Err(Error::input("query must be non-empty"));
    }
    let (decision, decide_record) = decide_logged(query, backend)?;
    let mut states = vec![decide_record];
    let mut sources = Vec::new();
    let mut degraded = false;

    if let (DecisionMode::Search, Some(rewrite)) = (decision.mode, decision.query_rewrite.as_deref()) {
        let mut search_record = StateRecord {
            state: StateKind::Search,
            source: None,
            exchanges: Vec::new(),
            note: None,
        };
        match client.search(rewrite) {
            Err(e) => {
                search_record.note = Some(format!("search failed: {e}"));
                states.push(search_record);
                degraded = true;
            }
            Ok(results) => {
                let results: Vec<SearchResult> = results.into_iter().take(k).collect();
                search_record.note = Some(format!("{} results for {rewrite:?}", results.len()));
                states.push(search_record);
                let mut extracted = Vec::new();
                for (i, r) in results.iter().enumerate() {
                    let mut rec = StateRecord {
                        state: StateKind::Extract,
                        source: Some(i),
                        exchanges: Vec::new(),
                        note: None,
                    };
                    match call(backend, "extract", extract_prompt(query, r)) {
                        Ok(ex) => {
                            if is_none_reply(&ex.output) {
                                rec.note = Some("nothing relevant; source dropped".into());
                            } else {
                                extracted.push((i, r, ex.output.trim().to_string()));
                            }
                            rec.exchanges.push(ex);
                        }
                        Err(e) => rec.note = Some(format!("extraction failed: {e}; source dropped")),
                    }
                    states.push(rec);
                }
                for (i, r, extract) in extracted {
                    let ex = call(backend, "summarize", summarize_prompt(query, &extract))?;
                    let summary = if ex.output.trim().is_empty() {
                        extract.clone()
                    } else {
                        ex.output.trim().to_string()
                    };
                    states.push(StateRecord {
                        state: StateKind::Summarize,
                        source: Some(i),
                        exchanges: vec![ex],
                        note: None,
                    });
                    sources.push(SourceSummary {
                        source: i,
                        url: r.url.clone(),
                        snippet: r.snippet.clone(),
                        extract,
                        summary,
                    });
                }
                degraded = sources.is_empty();
            }
        }
    }

    let ex = call(backend, "answer", answer_prompt(query, &sources))?;
    let answer = ex.output.trim().to_string();
    states.push(StateRecord {
        state: StateKind::Answer,
        source: None,
        exchanges: vec![ex],
        note: degraded.then(|| "degraded to a direct answer".to_string()),
    });
    let transcript = PipelineTranscript {
        schema_version: TRANSCRIPT_SCHEMA_VERSION,
        query: query.to_string(),
        k,
        decision,
        states,
        sources,
        degraded,
        answer: answer.clone(),
    };
    Ok((answer, transcript))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct FailingClient;

    impl SearchClient for FailingClient {
        fn search(&self, _: &str) -> Result<Vec<SearchResult>> {
            Err(Error::Search("offline".into()))
        }
    }

    #[test]
    fn decision_parsing() {
        let mut b = ScriptedBackend::new([r#"{"action":"answer"}"#]);
        assert_eq!(decide("hi", &mut b).unwrap().mode, DecisionMode::DirectAnswer);
        assert_eq!(sentences("About 2.1 million. Yes! tail"), ["About 2.1 million.", "Yes!", "tail"]);
        let mut b = ScriptedBackend::new([r#"{"action":"search","query":"q2"}"#]);
        let d = decide("hi", &mut b).unwrap();
        assert_eq!((d.mode, d.query_rewrite.as_deref()), (DecisionMode::Search, Some("q2")));
        let mut b = ScriptedBackend::new(["garbage", "more garbage"]);
        let d = decide("hi", &mut b).unwrap();
        assert_eq!(d.mode, DecisionMode::DirectAnswer);
        assert!(d.parse_failure);
        let mut b = ScriptedBackend::new(["oops", r#"{"action":"search","query":"fixed"}"#]);
        let d = decide("hi", &mut b).unwrap();
        assert!(!d.parse_failure && d.query_rewrite.as_deref() == Some("fixed"));
        let mut b = ScriptedBackend::new([r#"{"action":"search","query":""}"#, "x"]);
        assert!(decide("hi", &mut b).unwrap().parse_failure);
        assert!(matches!(
            decide("hi", &mut ScriptedBackend::default()),
            Err(Error::Backend { .. })
        ));
    }

    #[test]
    fn mock_fixtures() {
        assert_eq!(mock_search("What is the capital of France").len(), 3);
        assert_eq!(mock_search("What is the capital of France"), mock_search("What is the capital of France"));
        assert!(mock_search("no such fixture").is_empty());
        let raw: serde_json::Value = serde_json::from_str(FIXTURES).unwrap();
        for e in raw["entries"].as_array().unwrap() {
            assert_eq!(e["key"].as_str().unwrap(), query_key(e["query"].as_str().unwrap()));
        }
    }

    #[test]
    fn direct_answer_has_two_states() {
        let mut b = ScriptedBackend::new([r#"{"action":"answer"}"#, "42"]);
        let (a, t) = run_pipeline("what is six times seven", &mut b, &MockSearchClient::new(), 3).unwrap();
        assert_eq!(a, "42");
        assert_eq!(t.kinds(), vec![StateKind::Decide, StateKind::Answer]);
        assert!(t.is_legal());
    }

    #[test]
    fn failing_search_degrades() {
        let mut b = ScriptedBackend::new([r#"{"action":"search","query":"x"}"#, "fallback"]);
        let (_, t) = run_pipeline("q", &mut b, &FailingClient, 2).unwrap();
        assert!(t.degraded && t.is_legal());
        assert_eq!(t.kinds(), vec![StateKind::Decide, StateKind::Search, StateKind::Answer]);
    }

    #[test]
    fn all_extractions_failing_degrades() {
        let mut b = ScriptedBackend::new([
            r#"{"action":"search","query":"what is the capital of France"}"#,
            "NONE",
            "none",
            "",
            "direct",
        ]);
        let (a, t) = run_pipeline("capital?", &mut b, &MockSearchClient::new(), 3).unwrap();
        assert_eq!(a, "direct");
        assert!(t.degraded && t.sources.is_empty() && t.is_legal());
        assert!(!t.states.last().unwrap().exchanges[0].prompt.contains("Notes:"));
    }

    #[test]
    fn rule_backend_runs_full_search() {
        let (a, t) = run_pipeline("What is the capital of France?", &mut RuleBackend, &MockSearchClient::new(), 3).unwrap();
        assert_eq!(
            t.kinds(),
            vec![
                StateKind::Decide,
                StateKind::Search,
                StateKind::Extract,
                StateKind::Extract,
                StateKind::Extract,
                StateKind::Summarize,
                StateKind::Summarize,
                StateKind::Summarize,
                StateKind::Answer
            ]
        );
        assert!(a.starts_with("Based on 3 sources"));
        assert!(t.is_legal());
    }

    #[test]
    fn k_limits_sources_and_zero_is_rejected() {
        let (_, t) = run_pipeline("What is the capital of France?", &mut RuleBackend, &MockSearchClient::new(), 1).unwrap();
        assert_eq!(t.sources.len(), 1);
        assert!(run_pipeline("q", &mut RuleBackend, &MockSearchClient::new(), 0).is_err());
    }
}
