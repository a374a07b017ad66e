//! Queries and their candidate answers.

use std::collections::HashSet;

use crate::error::{Error, Result};

/// One generated answer for a query. Ids are 1-based and dense within a record.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: usize,
    pub text: String,
    pub features: Option<Vec<f64>>,
    /// Similarity to the reference answer, when supplied from outside.
    pub gold_similarity: Option<f64>,
}

impl Candidate {
    pub fn new(id: usize, text: impl Into<String>) -> Self {
        Candidate {
            id,
            text: text.into(),
            features: None,
            gold_similarity: None,
        }
    }

    pub fn with_similarity(mut self, sim: f64) -> Self {
        self.gold_similarity = Some(sim);
        self
    }

    pub fn with_features(mut self, features: Vec<f64>) -> Self {
        self.features = Some(features);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryRecord {
    pub query_id: String,
    pub question: String,
    pub reference: Option<String>,
    pub candidates: Vec<Candidate>,
}

impl QueryRecord {
    pub fn n(&self) -> usize {
        self.candidates.len()
    }

    /// Looks up a candidate by its id (not by position).
    pub fn candidate(&self, id: usize) -> Option<&Candidate> {
        self.candidates.iter().find(|c| c.id == id)
    }

    /// Checks the record invariants: at least one candidate, ids exactly
    /// `1..=N` in some order, no blank candidate text, similarities in `[0, 1]`.
    pub fn validate(&self) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::InvalidRecord(format!(
                "query {} has no candidates",
                self.query_id
            )));
        }
        let n = self.candidates.len();
        let ids: Vec<usize> = self.candidates.iter().map(|c| c.id).collect();
        let unique: HashSet<usize> = ids.iter().copied().collect();
        if unique.len() != n || ids.iter().any(|&id| id == 0 || id > n) {
            return Err(Error::BadCandidateIds {
                query_id: self.query_id.clone(),
                ids,
            });
        }
        for c in &self.candidates {
            if c.text.trim().is_empty() {
                return Err(Error::InvalidRecord(format!(
                    "query {} candidate {} has empty text",
                    self.query_id, c.id
                )));
            }
            if let Some(s) = c.gold_similarity {
                if !(0.0..=1.0).contains(&s) {
                    return Err(Error::InvalidRecord(format!(
                        "query {} candidate {} similarity {} outside [0, 1]",
                        self.query_id, c.id, s
                    )));
                }
            }
            if let Some(f) = &c.features {
                if f.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidRecord(format!(
                        "query {} candidate {} has non-finite features",
                        self.query_id, c.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Validates every record and checks query ids are unique across the corpus.
pub fn validate_corpus(corpus: &[QueryRecord]) -> Result<()> {
    let mut seen = HashSet::new();
    for r in corpus {
        r.validate()?;
        if !seen.insert(r.query_id.as_str()) {
            return Err(Error::DuplicateQueryId(r.query_id.clone()));
        }
    }
    Ok(())
}
