//! Labeled claim/evidence corpora: synthetic generators, JSONL persistence,
//! merging, fold splitting and the claim–label bias measure.

mod generate;
mod io;
mod mi;
mod split;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use generate::{
    generate_biased_original, generate_single_label_challenge, generate_symmetric_counterfactual, GeneratorConfig,
    VocabLayout,
};
pub use io::{read_jsonl, write_jsonl, JsonlHeader};
pub use mi::{claim_label_mutual_information, cue_label};
pub use split::{kfold, merge};

pub const SUPPORTS: usize = 0;
pub const REFUTES: usize = 1;
pub const NEI: usize = 2;

/// Label names in class-index order.
pub const LABEL_NAMES: [&str; 3] = ["SUPPORTS", "REFUTES", "NEI"];

pub fn label_index(name: &str) -> Result<usize> {
    LABEL_NAMES
        .iter()
        .position(|l| *l == name)
        .ok_or_else(|| Error::UnknownLabel(name.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub claim: Vec<usize>,
    pub evidence: Vec<usize>,
    pub label: usize,
}

/// Bidirectional token table. Ids are assigned in insertion order.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        Self::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self::new();
        for t in tokens {
            v.intern(t);
        }
        v
    }

    pub fn intern(&mut self, token: impl Into<String>) -> usize {
        let token = token.into();
        if let Some(&id) = self.index.get(&token) {
            return id;
        }
        let id = self.tokens.len();
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}

impl Eq for Vocab {}

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub seed: u64,
    /// Generation rules shared by every dataset derived from the same corpus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<GeneratorConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl Provenance {
    pub fn external(name: &str) -> Self {
        Self {
            generator: name.to_string(),
            seed: 0,
            config: None,
            notes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub instances: Vec<Instance>,
    pub vocab: Vocab,
    pub num_classes: usize,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(vocab: Vocab, num_classes: usize, provenance: Provenance) -> Self {
        Self {
            instances: Vec::new(),
            vocab,
            num_classes,
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Checks token ranges, non-empty token lists, label range and id uniqueness.
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for inst in &self.instances {
            if inst.claim.is_empty() || inst.evidence.is_empty() {
                return Err(Error::EmptyTokens("instance"));
            }
            if inst.label >= self.num_classes {
                return Err(Error::IndexOutOfRange {
                    op: "label",
                    index: inst.label,
                    bound: self.num_classes,
                });
            }
            if let Some(&t) = inst
                .claim
                .iter()
                .chain(&inst.evidence)
                .find(|&&t| t >= self.vocab.len())
            {
                return Err(Error::IndexOutOfRange {
                    op: "token",
                    index: t,
                    bound: self.vocab.len(),
                });
            }
            if !seen.insert(inst.id.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate instance id {:?}", inst.id)));
            }
        }
        Ok(())
    }

    /// Copy holding the instances at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            instances: indices.iter().map(|&i| self.instances[i].clone()).collect(),
            vocab: self.vocab.clone(),
            num_classes: self.num_classes,
            provenance: self.provenance.clone(),
        }
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for inst in &self.instances {
            h[inst.label] += 1;
        }
        h
    }

    pub fn labels(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.label).collect()
    }
}
