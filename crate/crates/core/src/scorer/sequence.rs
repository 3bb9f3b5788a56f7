//! Joint query–path token sequences:
//! `[CLS] [SEP] [QSP] <query> [SEP] [PSP] <path>`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CLS, EOP, PSP, QSP, SEP};
use crate::similarity::fnv1a;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpecialTokens {
    pub pad: usize,
    pub cls: usize,
    pub sep: usize,
    pub qsp: usize,
    pub psp: usize,
    pub eop: usize,
}

impl Default for SpecialTokens {
    fn default() -> Self {
        SpecialTokens {
            pad: 0,
            cls: 1,
            sep: 2,
            qsp: 3,
            psp: 4,
            eop: 5,
        }
    }
}

impl SpecialTokens {
    pub fn all(&self) -> [usize; 6] {
        [self.pad, self.cls, self.sep, self.qsp, self.psp, self.eop]
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = self.all().to_vec();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != 6 {
            return Err(Error::invalid("special token ids must be distinct"));
        }
        Ok(())
    }

    fn first_word_id(&self) -> usize {
        self.all().iter().max().copied().unwrap_or(0) + 1
    }
}

/// Word-level tokenizer over a hashed vocabulary. Words split on
/// non-alphanumeric characters; the reserved markers map to their own ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub special: SpecialTokens,
    pub buckets: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub id: usize,
    pub special: bool,
}

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        self.special.first_word_id() + self.buckets
    }

    fn word_id(&self, w: &str) -> usize {
        self.special.first_word_id() + (fnv1a(w.as_bytes()) % self.buckets as u64) as usize
    }

    fn marker(&self, s: &str) -> Option<usize> {
        match s {
            CLS => Some(self.special.cls),
            SEP => Some(self.special.sep),
            QSP => Some(self.special.qsp),
            PSP => Some(self.special.psp),
            EOP => Some(self.special.eop),
            _ => None,
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<Token> {
        let mut out = Vec::new();
        for chunk in text.split_whitespace() {
            if let Some(id) = self.marker(chunk) {
                out.push(Token { id, special: true });
                continue;
            }
            let before = out.len();
            for w in chunk
                .split(|c: char| !c.is_alphanumeric())
                .filter(|w| !w.is_empty())
            {
                out.push(Token {
                    id: self.word_id(&w.to_lowercase()),
                    special: false,
                });
            }
            if out.len() == before {
                out.push(Token {
                    id: self.word_id(chunk),
                    special: false,
                });
            }
        }
        out
    }
}

/// Token ids plus the positions the cross-attention blocks read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputSequence {
    pub ids: Vec<usize>,
    pub qsp: usize,
    pub psp: usize,
    /// Positions of query word tokens.
    pub query_positions: Vec<usize>,
    /// Positions of non-marker path tokens.
    pub path_positions: Vec<usize>,
}

impl Tokenizer {
    /// Builds the joint sequence. When it exceeds `max_len`, path word tokens
    /// are dropped from the tail first, then query tokens; markers are kept
    /// and each span keeps at least one token.
    pub fn build_input_sequence(
        &self,
        query: &str,
        path: &str,
        max_len: usize,
    ) -> Result<InputSequence> {
        let mut q = self.tokenize(query);
        let mut p = self.tokenize(path);
        if q.is_empty() || p.is_empty() {
            return Err(Error::invalid("query and path must both contain tokens"));
        }
        let fixed = 5;
        let words = |ts: &[Token]| ts.iter().filter(|t| !t.special).count();
        while fixed + q.len() + p.len() > max_len && words(&p) > 1 {
            let last = p.iter().rposition(|t| !t.special).expect("path has a word");
            p.remove(last);
        }
        while fixed + q.len() + p.len() > max_len && q.len() > 1 {
            q.pop();
        }
        if fixed + q.len() + p.len() > max_len {
            return Err(Error::invalid(format!(
                "sequence cannot fit in {max_len} positions"
            )));
        }
        if words(&p) == 0 {
            return Err(Error::invalid("path has no word tokens"));
        }

        let s = &self.special;
        let mut ids = vec![s.cls, s.sep, s.qsp];
        let qsp = 2;
        let mut query_positions = Vec::with_capacity(q.len());
        for t in &q {
            query_positions.push(ids.len());
            ids.push(t.id);
        }
        ids.push(s.sep);
        let psp = ids.len();
        ids.push(s.psp);
        let mut path_positions = Vec::with_capacity(p.len());
        for t in &p {
            if !t.special {
                path_positions.push(ids.len());
            }
            ids.push(t.id);
        }
        Ok(InputSequence {
            ids,
            qsp,
            psp,
            query_positions,
            path_positions,
        })
    }
}
