use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const SEP: TokenId = 2;
pub const SEC_REASON: TokenId = 3;
pub const SEC_SELFCHECK: TokenId = 4;
pub const SEC_CONCLUDE: TokenId = 5;
pub const RECOMMEND: TokenId = 6;
pub const NOT_RECOMMEND: TokenId = 7;
const FIRST_ATTR: TokenId = 8;

/// Token inventory: eight structural/decision tokens followed by one
/// attribute token per `(dimension, bucket)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub dims: usize,
    pub buckets: usize,
}

impl Vocab {
    pub fn new(dims: usize, buckets: usize) -> Result<Self> {
        ensure!(dims >= 1, "vocab needs at least one attribute dimension");
        ensure!(buckets >= 2, "vocab needs at least two buckets");
        Ok(Vocab { dims, buckets })
    }

    pub fn size(&self) -> usize {
        FIRST_ATTR as usize + self.dims * self.buckets
    }

    pub fn attr(&self, dim: usize, bucket: usize) -> Result<TokenId> {
        ensure!(dim < self.dims, "attribute dimension {dim} >= {}", self.dims);
        ensure!(
            bucket < self.buckets,
            "attribute bucket {bucket} >= {} on dimension {dim}",
            self.buckets
        );
        Ok(FIRST_ATTR + (dim * self.buckets + bucket) as TokenId)
    }

    /// `(dim, bucket)` for an attribute token.
    pub fn attr_parts(&self, tok: TokenId) -> Option<(usize, usize)> {
        let i = tok.checked_sub(FIRST_ATTR)? as usize;
        (i < self.dims * self.buckets).then(|| (i / self.buckets, i % self.buckets))
    }

    pub fn is_decision(tok: TokenId) -> bool {
        tok == RECOMMEND || tok == NOT_RECOMMEND
    }

    pub fn contains(&self, tok: TokenId) -> bool {
        (tok as usize) < self.size()
    }

    pub fn name(&self, tok: TokenId) -> String {
        match tok {
            BOS => "BOS".into(),
            EOS => "EOS".into(),
            SEP => "SEP".into(),
            SEC_REASON => "#REASON".into(),
            SEC_SELFCHECK => "#SELFCHECK".into(),
            SEC_CONCLUDE => "#CONCLUDE".into(),
            RECOMMEND => "RECOMMEND".into(),
            NOT_RECOMMEND => "NOT_RECOMMEND".into(),
            t => match self.attr_parts(t) {
                Some((d, b)) => format!("A{d}:{b}"),
                None => format!("<{t}>"),
            },
        }
    }
}
