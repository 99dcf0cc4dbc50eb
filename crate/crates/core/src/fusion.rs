//! Fusion strategies: merging text tokens with aligned image tokens into
//! the conditioning sequence handed to the denoiser.
//!
//! All three strategies are differentiable tape operations; at `alpha = 0`
//! the blend-based strategies pass the text tokens through bit-identically.

use crate::error::{Error, Result};
use crate::scalar::{s, Scalar};
use crate::tape::Tape;
use crate::tokens::{Modality, TokenRef, TokenSeq};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionStrategy {
    Naive,
    Concat,
    CrossAttn,
}

impl FusionStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionStrategy::Naive => "naive",
            FusionStrategy::Concat => "concat",
            FusionStrategy::CrossAttn => "xattn",
        }
    }

    pub fn parse(v: &str) -> Result<Self> {
        match v {
            "naive" => Ok(FusionStrategy::Naive),
            "concat" => Ok(FusionStrategy::Concat),
            "xattn" => Ok(FusionStrategy::CrossAttn),
            other => Err(Error::invalid(format!("unknown fusion strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusionConfig {
    pub strategy: FusionStrategy,
    /// Image-signal strength in [0, 1].
    pub alpha: f64,
    /// Norm rescale (γ); meaningful for cross-attention fusion only.
    pub rescale: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            strategy: FusionStrategy::Concat,
            alpha: 0.3,
            rescale: true,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!(
                "fusion alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        Ok(())
    }
}

fn check_inputs<S: Scalar>(tape: &Tape<S>, text: TokenRef, aligned: TokenRef, op: &'static str) -> Result<()> {
    if text.modality != Modality::Text {
        return Err(Error::invalid(format!(
            "{op} expects text tokens, got {}",
            text.modality.as_str()
        )));
    }
    if aligned.modality != Modality::Aligned {
        return Err(Error::invalid(format!(
            "{op} expects aligned image tokens, got {}",
            aligned.modality.as_str()
        )));
    }
    let (dt, da) = (text.width(tape), aligned.width(tape));
    if dt != da {
        return Err(Error::shape(op, format!("widths {dt} vs {da}")));
    }
    Ok(())
}

/// Blends the row-mean of the aligned tokens into every text token:
/// `out_i = (1-α)·T_i + α·mean(Î)`.
pub fn fuse_naive_tape<S: Scalar>(
    tape: &mut Tape<S>,
    text: TokenRef,
    aligned: TokenRef,
    alpha: f64,
) -> Result<TokenRef> {
    check_inputs(tape, text, aligned, "fuse_naive")?;
    if alpha == 0.0 {
        // exact identity; the image branch contributes nothing
        return Ok(TokenRef {
            id: text.id,
            modality: Modality::Fused,
        });
    }
    let a = s::<S>(alpha);
    let global = tape.mean_rows(aligned.id)?;
    let scaled_text = tape.scale(text.id, S::one() - a)?;
    let scaled_global = tape.scale(global, a)?;
    let out = tape.add_bias(scaled_text, scaled_global)?;
    Ok(TokenRef {
        id: out,
        modality: Modality::Fused,
    })
}

/// Appends the aligned tokens after the text tokens, values untouched.
pub fn fuse_concat_tape<S: Scalar>(
    tape: &mut Tape<S>,
    text: TokenRef,
    aligned: TokenRef,
) -> Result<TokenRef> {
    check_inputs(tape, text, aligned, "fuse_concat")?;
    if aligned.count(tape) < 1 {
        return Err(Error::invalid("fuse_concat needs at least one image token"));
    }
    let out = tape.concat_rows(text.id, aligned.id)?;
    Ok(TokenRef {
        id: out,
        modality: Modality::Fused,
    })
}

/// Text queries attend over the aligned tokens; the attended result is
/// optionally norm-rescaled (γ) and blended back:
/// `out = (1-α)·T + α·γ·Attn(Q=T, K=Î, V=Î)`.
pub fn fuse_xattn_tape<S: Scalar>(
    tape: &mut Tape<S>,
    text: TokenRef,
    aligned: TokenRef,
    alpha: f64,
    rescale: bool,
) -> Result<TokenRef> {
    check_inputs(tape, text, aligned, "fuse_xattn")?;
    if alpha == 0.0 {
        return Ok(TokenRef {
            id: text.id,
            modality: Modality::Fused,
        });
    }
    let a = s::<S>(alpha);
    let mut fused = tape.sdp_attention(text.id, aligned.id, aligned.id)?;
    if rescale {
        // γ keeps the attended result's Frobenius norm comparable to T's.
        let nt = tape.frob_norm(text.id)?;
        let nf = tape.frob_norm(fused)?;
        let nf = tape.max_const(nf, s(1e-8))?;
        let gamma = tape.div_elem(nt, nf)?;
        fused = tape.mul_by(fused, gamma)?;
    }
    let scaled_text = tape.scale(text.id, S::one() - a)?;
    let scaled_fused = tape.scale(fused, a)?;
    let out = tape.add(scaled_text, scaled_fused)?;
    Ok(TokenRef {
        id: out,
        modality: Modality::Fused,
    })
}

/// Dispatches on the configured strategy.
pub fn fuse_tape<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &FusionConfig,
    text: TokenRef,
    aligned: TokenRef,
) -> Result<TokenRef> {
    cfg.validate()?;
    match cfg.strategy {
        FusionStrategy::Naive => fuse_naive_tape(tape, text, aligned, cfg.alpha),
        FusionStrategy::Concat => fuse_concat_tape(tape, text, aligned),
        FusionStrategy::CrossAttn => fuse_xattn_tape(tape, text, aligned, cfg.alpha, cfg.rescale),
    }
}

/// Value-level fusion. The result records its strategy and strength.
pub fn fuse<S: Scalar>(
    cfg: &FusionConfig,
    text: &TokenSeq<S>,
    aligned: &TokenSeq<S>,
) -> Result<TokenSeq<S>> {
    let mut tape = Tape::new();
    let t = tape.tokens_const(text);
    let a = tape.tokens_const(aligned);
    let out = fuse_tape(&mut tape, cfg, t, a)?;
    Ok(tape
        .tokens_value(out)
        .with_provenance(format!("{} alpha={}", cfg.strategy.as_str(), cfg.alpha)))
}
