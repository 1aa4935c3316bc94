//! Wire formats shared by the respondent engine and the collection server.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::poll::{flatten, Poll};

/// `{"responses": {"<subtree_id>": ["<answer_id>", ...]}}`, one key per
/// top-level subtree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmissionDocument {
    pub responses: BTreeMap<String, Vec<String>>,
}

impl SubmissionDocument {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("submission serialization is infallible")
    }
}

/// One line of the response log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub respondent_tag: String,
    pub received_at: u64,
    pub responses: BTreeMap<String, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize)]
#[serde(tag = "code", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SubmissionError {
    #[error("malformed submission: {message}")]
    Malformed { message: String },
    #[error("submission has no response for subtree `{subtree}`")]
    MissingSubtree { subtree: String },
    #[error("submission names unknown subtree `{subtree}`")]
    UnknownSubtree { subtree: String },
    #[error("`{path}` is not a leaf of subtree `{subtree}`")]
    UnknownLeaf { subtree: String, path: String },
}

/// Path → leaf index lookup for every subtree of a poll.
#[derive(Debug, Clone)]
pub struct LeafIndex {
    subtrees: Vec<(String, HashMap<Vec<String>, usize>)>,
}

impl LeafIndex {
    pub fn new(poll: &Poll) -> Self {
        let subtrees = poll
            .questions
            .iter()
            .map(|q| {
                let paths = flatten(q)
                    .into_iter()
                    .enumerate()
                    .map(|(i, leaf)| (leaf.path, i))
                    .collect();
                (q.id.clone(), paths)
            })
            .collect();
        LeafIndex { subtrees }
    }

    pub fn subtree_position(&self, subtree: &str) -> Option<usize> {
        self.subtrees.iter().position(|(id, _)| id == subtree)
    }

    pub fn leaf(&self, subtree: &str, path: &[String]) -> Option<usize> {
        self.subtrees
            .iter()
            .find(|(id, _)| id == subtree)
            .and_then(|(_, paths)| paths.get(path).copied())
    }

    /// Checks the one-path-per-subtree shape and that every path is a leaf.
    pub fn check(&self, responses: &BTreeMap<String, Vec<String>>) -> Result<(), SubmissionError> {
        for (id, paths) in &self.subtrees {
            let path = responses
                .get(id)
                .ok_or_else(|| SubmissionError::MissingSubtree { subtree: id.clone() })?;
            if !paths.contains_key(path) {
                return Err(SubmissionError::UnknownLeaf {
                    subtree: id.clone(),
                    path: path.join("/"),
                });
            }
        }
        if let Some(extra) = responses.keys().find(|k| self.subtree_position(k).is_none()) {
            return Err(SubmissionError::UnknownSubtree { subtree: extra.clone() });
        }
        Ok(())
    }
}

pub fn parse_submission(body: &[u8], index: &LeafIndex) -> Result<SubmissionDocument, SubmissionError> {
    let doc: SubmissionDocument = serde_json::from_slice(body).map_err(|e| SubmissionError::Malformed {
        message: e.to_string(),
    })?;
    index.check(&doc.responses)?;
    Ok(doc)
}
