//! Token sequences: the unit of conditioning flowing between pipeline
//! stages.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Where a token sequence sits in the pipeline. Transitions happen only
/// through documented operations: `align` turns image tokens into aligned
/// ones, fusion produces fused ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Text,
    Image,
    Aligned,
    Fused,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Image => "image",
            Modality::Aligned => "aligned",
            Modality::Fused => "fused",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Modality::Text),
            "image" => Ok(Modality::Image),
            "aligned" => Ok(Modality::Aligned),
            "fused" => Ok(Modality::Fused),
            other => Err(Error::invalid(format!("unknown modality {other:?}"))),
        }
    }
}

/// A `(count × width)` stack of embedding tokens with a modality tag.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSeq<S: Scalar = f32> {
    pub tokens: Tensor<S>,
    pub modality: Modality,
    /// How a fused sequence was produced (strategy and strength), for
    /// provenance in downstream artifacts.
    pub provenance: Option<String>,
}

impl<S: Scalar> TokenSeq<S> {
    pub fn new(tokens: Tensor<S>, modality: Modality) -> Result<Self> {
        if tokens.rank() != 2 || tokens.shape()[0] == 0 {
            return Err(Error::shape(
                "token_seq",
                format!("expected [count >= 1, width], got {:?}", tokens.shape()),
            ));
        }
        Ok(TokenSeq {
            tokens,
            modality,
            provenance: None,
        })
    }

    pub fn with_provenance(mut self, provenance: impl Into<String>) -> Self {
        self.provenance = Some(provenance.into());
        self
    }

    pub fn count(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Tape-side handle to a token sequence: a node plus its modality tag.
#[derive(Debug, Clone, Copy)]
pub struct TokenRef {
    pub id: NodeId,
    pub modality: Modality,
}

impl TokenRef {
    pub fn width<S: Scalar>(&self, tape: &Tape<S>) -> usize {
        *tape.shape(self.id).last().expect("token node has a width")
    }

    pub fn count<S: Scalar>(&self, tape: &Tape<S>) -> usize {
        tape.shape(self.id)[0]
    }
}

impl<S: Scalar> Tape<S> {
    /// Inserts a token sequence as an untracked leaf.
    pub fn tokens_const(&mut self, seq: &TokenSeq<S>) -> TokenRef {
        TokenRef {
            id: self.constant(&seq.tokens),
            modality: seq.modality,
        }
    }

    /// Inserts a token sequence as a tracked leaf.
    pub fn tokens_var(&mut self, seq: &TokenSeq<S>) -> TokenRef {
        TokenRef {
            id: self.var(&seq.tokens),
            modality: seq.modality,
        }
    }

    /// Reads a token node back into a value with the given modality.
    pub fn tokens_value(&self, r: TokenRef) -> TokenSeq<S> {
        TokenSeq {
            tokens: self.to_tensor(r.id),
            modality: r.modality,
            provenance: None,
        }
    }
}
