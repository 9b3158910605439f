use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::entry::{TokenSeq, CLS, COL, SEP, VAL};

pub const UNK: &str = "[UNK]";
pub const UNK_ID: u32 = 0;
pub const CLS_ID: u32 = 1;
pub const SEP_ID: u32 = 2;

/// Token ↔ id table. Ids 0‥4 are `[UNK] [CLS] [SEP] [COL] [VAL]`; the rest
/// follow first-seen order of the corpus it was built from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab::from([UNK, CLS, SEP, COL, VAL].iter().map(|s| s.to_string()).collect::<Vec<_>>())
    }
}

impl Vocab {
    pub fn build<'a>(seqs: impl IntoIterator<Item = &'a TokenSeq>) -> Self {
        let mut v = Vocab::default();
        for s in seqs {
            for t in s.texts() {
                v.insert(t);
            }
        }
        v
    }

    pub fn insert(&mut self, tok: &str) -> u32 {
        if let Some(&id) = self.index.get(tok) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(tok.to_string());
        self.index.insert(tok.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, tok: &str) -> u32 {
        self.index.get(tok).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, seq: &TokenSeq) -> Vec<u32> {
        seq.texts().map(|t| self.id(t)).collect()
    }
}
