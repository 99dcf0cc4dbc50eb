//! Test-time refinement: joint gradient optimization of the initial noise
//! and the fused conditioning sequence against a reference image, measured
//! in the shared projected embedding space.
//!
//! The optimization differentiates through a reduced DDIM unroll (the full
//! sampler would work too, just slower); the final generation always re-runs
//! the full sampler on the optimized inputs. Plain gradient descent with
//! global-norm clipping keeps the trace reproducible.

use crate::diffusion::{ddim_sample, ddim_sample_tape, DdimSchedule, Denoiser, LatentCodec};
use crate::encoders::DualEncoder;
use crate::error::{Error, Result};
use crate::optim::clip_global_norm;
use crate::scalar::{s, Scalar};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::tokens::{TokenRef, TokenSeq};

#[derive(Debug, Clone)]
pub struct PnoConfig {
    /// Optimization steps; the intended operating range is 10-50.
    pub steps: usize,
    pub lr: f64,
    pub lambda_reg: f64,
    pub grad_clip: f64,
    /// Differentiable-sampler depth used during optimization.
    pub unroll_steps: usize,
}

impl Default for PnoConfig {
    fn default() -> Self {
        PnoConfig {
            steps: 50,
            lr: 1e-2,
            lambda_reg: 0.1,
            grad_clip: 1.0,
            unroll_steps: 5,
        }
    }
}

impl PnoConfig {
    pub fn validate(&self, t_steps: usize) -> Result<()> {
        if self.steps < 1 || self.steps > 50 {
            return Err(Error::invalid(format!(
                "pno steps {} outside 1..=50",
                self.steps
            )));
        }
        if self.lr < 0.0 {
            return Err(Error::invalid("pno lr must be >= 0"));
        }
        if self.lambda_reg < 0.0 {
            return Err(Error::invalid("pno lambda_reg must be >= 0"));
        }
        if self.grad_clip <= 0.0 {
            return Err(Error::invalid("pno grad_clip must be > 0"));
        }
        if self.unroll_steps < 1 || self.unroll_steps > t_steps {
            return Err(Error::invalid(format!(
                "pno unroll_steps {} outside 1..={t_steps}",
                self.unroll_steps
            )));
        }
        Ok(())
    }
}

/// Result of one optimization run.
#[derive(Debug, Clone)]
pub struct PnoState<S: Scalar = f32> {
    pub x_t: Tensor<S>,
    pub t_final: TokenSeq<S>,
    /// Reference embedding; fixed for the whole run.
    pub guide_emb: Tensor<S>,
    pub loss_trace: Vec<f64>,
    /// Post-clip global gradient norms, one per step.
    pub grad_norms: Vec<f64>,
    /// Guide similarity of the full-sampler generation before optimization.
    pub pre_cos: f64,
    /// Same measurement after optimization.
    pub post_cos: f64,
    /// Full-sampler latent from the optimized inputs.
    pub final_latent: Tensor<S>,
}

/// Moment penalty keeping the optimized noise near a standard Gaussian:
/// `(mean(x))² + (var(x) − 1)²` with population variance.
pub fn loss_reg_tape<S: Scalar>(tape: &mut Tape<S>, x: NodeId) -> Result<NodeId> {
    let n = tape.data(x).len();
    let mean = tape.mean_all(x)?;
    let ones = tape.constant_from(vec![n], vec![S::one(); n]);
    let mean_vec = tape.mul_by(ones, mean)?;
    let flat = tape.reshape(x, vec![n])?;
    let centered = tape.sub(flat, mean_vec)?;
    let sq = tape.hadamard(centered, centered)?;
    let var = tape.mean_all(sq)?;
    let mean_sq = tape.hadamard(mean, mean)?;
    let var_dev = tape.add_scalar(var, -S::one())?;
    let var_sq = tape.hadamard(var_dev, var_dev)?;
    tape.add(mean_sq, var_sq)
}

pub fn loss_reg<S: Scalar>(x: &Tensor<S>) -> Result<S> {
    let mut tape = Tape::new();
    let xn = tape.constant(x);
    let l = loss_reg_tape(&mut tape, xn)?;
    Ok(tape.value(l))
}

/// Builds the full objective on `tape`:
/// `λ_reg·L_reg(x_T) − cos(embed(decode(sample(x_T, T_final))), guide)`.
///
/// Returns `(loss, cos)` node ids.
#[allow(clippy::too_many_arguments)]
pub fn loss_pno_tape<S: Scalar>(
    tape: &mut Tape<S>,
    den: &Denoiser<S>,
    sched: &DdimSchedule<S>,
    codec: &LatentCodec<S>,
    enc: &DualEncoder<S>,
    x_t: NodeId,
    t_final: TokenRef,
    guide_emb: NodeId,
    lambda_reg: f64,
    unroll_steps: usize,
) -> Result<(NodeId, NodeId)> {
    let den_nodes = den.bind(tape, false);
    let img_nodes = enc.bind_image(tape, false);

    let x0 = ddim_sample_tape(tape, den, &den_nodes, sched, x_t, t_final, unroll_steps)?;
    let img = codec.decode_tape(tape, x0)?;
    let stages = enc.image_forward_stages(tape, &img_nodes, img)?;
    let emb = enc.project_tape(tape, stages.tokens, img_nodes.proj)?;
    let cos = tape.cosine_sim(emb, guide_emb)?;

    let reg = loss_reg_tape(tape, x_t)?;
    let reg_term = tape.scale(reg, s(lambda_reg))?;
    let neg_cos = tape.neg(cos)?;
    let loss = tape.add(reg_term, neg_cos)?;
    Ok((loss, cos))
}

/// Guide similarity of a full-sampler generation from the given inputs.
pub fn guide_similarity<S: Scalar>(
    den: &Denoiser<S>,
    sched: &DdimSchedule<S>,
    codec: &LatentCodec<S>,
    enc: &DualEncoder<S>,
    x_t: &Tensor<S>,
    cond: &TokenSeq<S>,
    guide_emb: &Tensor<S>,
) -> Result<(f64, Tensor<S>)> {
    let latent = ddim_sample(den, sched, x_t, cond, sched.t_steps)?;
    let image = codec.decode(&latent)?;
    let emb = enc.image_embedding(&image)?;
    let cos: f64 = emb
        .data()
        .iter()
        .zip(guide_emb.data())
        .map(|(&a, &b)| (a * b).to_f64_c())
        .sum();
    Ok((cos, latent))
}

/// Joint gradient descent on `(x_T, T_final)`. Everything else — denoiser,
/// encoders, codec, guide embedding — is frozen.
#[allow(clippy::too_many_arguments)]
pub fn pno_optimize<S: Scalar>(
    den: &Denoiser<S>,
    sched: &DdimSchedule<S>,
    codec: &LatentCodec<S>,
    enc: &DualEncoder<S>,
    x_t_init: &Tensor<S>,
    t_final_init: &TokenSeq<S>,
    guide_image: &Tensor<S>,
    cfg: &PnoConfig,
) -> Result<PnoState<S>> {
    cfg.validate(sched.t_steps)?;
    if t_final_init.width() != den.cond_dim {
        return Err(Error::shape(
            "pno_optimize",
            format!("conditioning width {} vs {}", t_final_init.width(), den.cond_dim),
        ));
    }
    let guide_emb = enc.image_embedding(guide_image)?;

    let mut x_t = x_t_init.clone();
    let mut t_final = t_final_init.clone();
    let (pre_cos, _) = guide_similarity(den, sched, codec, enc, &x_t, &t_final, &guide_emb)?;

    let mut loss_trace = Vec::with_capacity(cfg.steps);
    let mut grad_norms = Vec::with_capacity(cfg.steps);
    let mut initial_loss = None;

    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let x_id = tape.var(&x_t);
        let t_id = TokenRef {
            id: tape.var(&t_final.tokens),
            modality: t_final.modality,
        };
        let g_id = tape.constant(&guide_emb);
        let (loss, _) = loss_pno_tape(
            &mut tape,
            den,
            sched,
            codec,
            enc,
            x_id,
            t_id,
            g_id,
            cfg.lambda_reg,
            cfg.unroll_steps,
        )?;
        let loss_val = tape.value(loss).to_f64_c();
        if !loss_val.is_finite() {
            return Err(Error::OptimDiverged {
                step,
                loss: loss_val,
                initial: initial_loss.unwrap_or(loss_val),
                trace: loss_trace.clone(),
            });
        }
        let init = *initial_loss.get_or_insert(loss_val);
        if loss_val > 10.0 * init.abs() + 1e-6 {
            return Err(Error::OptimDiverged {
                step,
                loss: loss_val,
                initial: init,
                trace: loss_trace.clone(),
            });
        }
        loss_trace.push(loss_val);

        tape.backward(loss)?;
        let mut grads = vec![
            tape.grad_tensor(x_id).data().to_vec(),
            tape.grad_tensor(t_id.id).data().to_vec(),
        ];
        let norm = clip_global_norm(&mut grads, s::<S>(cfg.grad_clip));
        grad_norms.push(norm.to_f64_c());

        let lr = s::<S>(cfg.lr);
        for (p, g) in x_t.data_mut().iter_mut().zip(&grads[0]) {
            *p -= lr * *g;
        }
        for (p, g) in t_final.tokens.data_mut().iter_mut().zip(&grads[1]) {
            *p -= lr * *g;
        }
        if !x_t.all_finite() || !t_final.tokens.all_finite() {
            return Err(Error::OptimDiverged {
                step,
                loss: loss_val,
                initial: init,
                trace: loss_trace.clone(),
            });
        }
    }

    let (post_cos, final_latent) =
        guide_similarity(den, sched, codec, enc, &x_t, &t_final, &guide_emb)?;
    Ok(PnoState {
        x_t,
        t_final,
        guide_emb,
        loss_trace,
        grad_norms,
        pre_cos,
        post_cos,
        final_latent,
    })
}

/// Loss trace as line-delimited text (`step loss grad_norm`).
pub fn write_pno_trace(
    path: impl AsRef<std::path::Path>,
    state: &PnoState<impl Scalar>,
) -> std::io::Result<()> {
    let mut out = String::new();
    for (i, (l, g)) in state.loss_trace.iter().zip(&state.grad_norms).enumerate() {
        out.push_str(&format!("step {i} loss {l:.6} grad_norm {g:.6}\n"));
    }
    out.push_str(&format!(
        "pre_cos {:.6}\npost_cos {:.6}\n",
        state.pre_cos, state.post_cos
    ));
    std::fs::write(path, out)
}
