//! File formats: JSONL queries, TREC-style run files, similarity tables and
//! flat `key = value` configs.
//!
//! Query lines look like
//!
//! ```text
//! {"query_id": "q1", "question": "...", "reference": "...",
//!  "candidates": [{"id": 1, "text": "...", "score": 0.7, "features": [..]}],
//!  "similarities": [0.7, ...]}
//! ```
//!
//! `reference`, `score`, `features` and `similarities` are optional. A
//! top-level `similarities` array is indexed by candidate id and overrides any
//! per-candidate `score`.
//!
//! Run lines are `qid Q0 candidate_id rank score tag`. The score is the
//! cumulative log-probability of the ranked prefix ending at that rank, so it
//! never increases with rank and re-sorting by it is stable.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::{validate_corpus, Candidate, QueryRecord};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryLine {
    query_id: String,
    question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reference: Option<String>,
    candidates: Vec<CandidateLine>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    similarities: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CandidateLine {
    id: usize,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<f64>>,
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::ParseAt {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn record_from_line(q: QueryLine) -> std::result::Result<QueryRecord, String> {
    let n = q.candidates.len();
    if let Some(s) = &q.similarities {
        if s.len() != n {
            return Err(format!(
                "similarities has {} entries but there are {} candidates",
                s.len(),
                n
            ));
        }
    }
    let candidates = q
        .candidates
        .into_iter()
        .map(|c| {
            let sim = match &q.similarities {
                Some(s) if (1..=n).contains(&c.id) => Some(s[c.id - 1]),
                _ => c.score,
            };
            Candidate {
                id: c.id,
                text: c.text,
                features: c.features,
                gold_similarity: sim,
            }
        })
        .collect();
    Ok(QueryRecord {
        query_id: q.query_id,
        question: q.question,
        reference: q.reference,
        candidates,
    })
}

/// Parses JSONL queries from a string. `path` is only used in error messages.
pub fn parse_queries(text: &str, path: &Path) -> Result<Vec<QueryRecord>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let q: QueryLine =
            serde_json::from_str(line).map_err(|e| parse_error(path, lineno, e.to_string()))?;
        let record = record_from_line(q).map_err(|m| parse_error(path, lineno, m))?;
        record.validate().map_err(|e| match e {
            Error::BadCandidateIds { .. } => e,
            other => parse_error(path, lineno, other.to_string()),
        })?;
        if !seen.insert(record.query_id.clone()) {
            return Err(Error::DuplicateQueryId(record.query_id));
        }
        out.push(record);
    }
    Ok(out)
}

pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<QueryRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_queries(&text, path)
}

/// Renders queries as JSONL. Similarities go into per-candidate `score`.
pub fn queries_to_jsonl(records: &[QueryRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        let line = QueryLine {
            query_id: r.query_id.clone(),
            question: r.question.clone(),
            reference: r.reference.clone(),
            candidates: r
                .candidates
                .iter()
                .map(|c| CandidateLine {
                    id: c.id,
                    text: c.text.clone(),
                    score: c.gold_similarity,
                    features: c.features.clone(),
                })
                .collect(),
            similarities: None,
        };
        out.push_str(&serde_json::to_string(&line).map_err(|e| Error::Parse(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_queries(records: &[QueryRecord], path: impl AsRef<Path>) -> Result<()> {
    validate_corpus(records)?;
    write_string(path, &queries_to_jsonl(records)?)
}

pub(crate) fn write_string(path: impl AsRef<Path>, contents: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// One line of a run file.
#[derive(Debug, Clone, PartialEq)]
pub struct RunEntry {
    pub query_id: String,
    pub candidate_id: usize,
    pub rank: usize,
    pub score: f64,
    pub tag: String,
}

/// Checks that each query's entries are contiguous, ranked `1..K` in order
/// with distinct candidates, and scored non-increasingly.
pub fn validate_run(entries: &[RunEntry]) -> Result<()> {
    let violation = |msg: String| Err(Error::InvariantViolation(msg));
    let mut finished = HashSet::new();
    let mut i = 0;
    while i < entries.len() {
        let qid = &entries[i].query_id;
        if !finished.insert(qid.as_str()) {
            return violation(format!("query {qid} appears in two separate blocks"));
        }
        let mut cands = HashSet::new();
        let mut expected = 1;
        let mut prev = f64::INFINITY;
        while i < entries.len() && &entries[i].query_id == qid {
            let e = &entries[i];
            if e.rank != expected {
                return violation(format!(
                    "query {qid}: expected rank {expected}, found {}",
                    e.rank
                ));
            }
            if e.candidate_id == 0 || !cands.insert(e.candidate_id) {
                return violation(format!(
                    "query {qid}: candidate {} is invalid or repeated",
                    e.candidate_id
                ));
            }
            if e.score.is_nan() || e.score > prev {
                return violation(format!(
                    "query {qid}: score {} at rank {} exceeds the previous rank",
                    e.score, e.rank
                ));
            }
            if e.tag.is_empty() || e.tag.chars().any(char::is_whitespace) {
                return violation(format!("query {qid}: tag must be one non-empty word"));
            }
            if qid.is_empty() || qid.chars().any(char::is_whitespace) {
                return violation("query ids in run files cannot contain whitespace".into());
            }
            prev = e.score;
            expected += 1;
            i += 1;
        }
    }
    Ok(())
}

pub fn run_to_string(entries: &[RunEntry]) -> Result<String> {
    validate_run(entries)?;
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!(
            "{} Q0 {} {} {} {}\n",
            e.query_id, e.candidate_id, e.rank, e.score, e.tag
        ));
    }
    Ok(out)
}

pub fn write_run(entries: &[RunEntry], path: impl AsRef<Path>) -> Result<()> {
    let s = run_to_string(entries)?;
    let path = path.as_ref();
    let file =
        fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    w.write_all(s.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn parse_run(text: &str, path: &Path) -> Result<Vec<RunEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(parse_error(
                path,
                lineno,
                format!("expected 6 fields, found {}", f.len()),
            ));
        }
        if f[1] != "Q0" {
            return Err(parse_error(
                path,
                lineno,
                format!("second field must be Q0, found {}", f[1]),
            ));
        }
        let num = |s: &str, what: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| parse_error(path, lineno, format!("{what} '{s}' is not an integer")))
        };
        out.push(RunEntry {
            query_id: f[0].to_string(),
            candidate_id: num(f[2], "candidate id")?,
            rank: num(f[3], "rank")?,
            score: f[4].parse().map_err(|_| {
                parse_error(path, lineno, format!("score '{}' is not a number", f[4]))
            })?,
            tag: f[5].to_string(),
        });
    }
    validate_run(&out)?;
    Ok(out)
}

pub fn read_run(path: impl AsRef<Path>) -> Result<Vec<RunEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_run(&text, path)
}

/// Groups run entries by query, keeping file order, as ranked candidate ids.
pub fn run_orders(entries: &[RunEntry]) -> BTreeMap<String, Vec<usize>> {
    let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for e in entries {
        out.entry(e.query_id.clone())
            .or_default()
            .push(e.candidate_id);
    }
    out
}

/// Reads a tab-separated `query_id  candidate_id  scorer  score` table and
/// stores the scores as candidate similarities. Every candidate of every
/// query must receive exactly one score.
pub fn apply_similarity_table(records: &mut [QueryRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file =
        fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut table: HashMap<(String, usize), f64> = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(parse_error(path, lineno, "expected 4 tab-separated fields"));
        }
        let id: usize = f[1]
            .trim()
            .parse()
            .map_err(|_| parse_error(path, lineno, "candidate id is not an integer"))?;
        let score: f64 = f[3]
            .trim()
            .parse()
            .map_err(|_| parse_error(path, lineno, "score is not a number"))?;
        if table.insert((f[0].trim().to_string(), id), score).is_some() {
            return Err(parse_error(
                path,
                lineno,
                "duplicate (query, candidate) pair",
            ));
        }
    }
    for r in records.iter_mut() {
        for c in r.candidates.iter_mut() {
            let s = table.remove(&(r.query_id.clone(), c.id)).ok_or_else(|| {
                Error::MissingPrecomputed {
                    query_id: r.query_id.clone(),
                    candidate: c.id,
                }
            })?;
            c.gold_similarity = Some(s);
        }
        r.validate()?;
    }
    Ok(())
}

/// Parsed `key = value` lines. `#` starts a comment line.
pub fn parse_config(text: &str, path: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| parse_error(path, i + 1, "expected key = value"))?;
        let key = k.trim().replace('-', "_");
        if key.is_empty() {
            return Err(parse_error(path, i + 1, "empty key"));
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(parse_error(path, i + 1, format!("key '{key}' set twice")));
        }
    }
    Ok(out)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_config(&text, path)
}

/// Path of the vocabulary file stored next to a checkpoint.
pub fn vocab_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".vocab");
    PathBuf::from(s)
}
