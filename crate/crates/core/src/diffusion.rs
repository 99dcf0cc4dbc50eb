//! Toy conditional latent diffusion: a fixed linear latent codec, a small
//! cross-attention denoiser, and a deterministic DDIM sampler that is
//! differentiable end to end when run on a tape.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::{sample_caption, Dataset, Vocab};
use crate::encoders::{patch_indices, unpatch_indices, DualEncoder};
use crate::error::{Error, Result};
use crate::io;
use crate::optim::{Adam, EpochStats, TrainTrace};
use crate::scalar::{s, Scalar};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::tokens::{TokenRef, TokenSeq};

// ── DDIM schedule ───────────────────────────────────────────────────

/// Cosine cumulative-noise schedule with deterministic (η = 0) sampling.
#[derive(Debug, Clone)]
pub struct DdimSchedule<S: Scalar = f32> {
    pub t_steps: usize,
    /// ᾱ_t for t = 0..=t_steps; ᾱ_0 = 1, strictly decreasing.
    pub alpha_bar: Vec<S>,
}

impl<S: Scalar> DdimSchedule<S> {
    pub fn cosine(t_steps: usize) -> Self {
        let sconst = 0.008f64;
        let f = |t: f64| {
            let x = (t / t_steps as f64 + sconst) / (1.0 + sconst) * std::f64::consts::FRAC_PI_2;
            x.cos().powi(2)
        };
        let f0 = f(0.0);
        let alpha_bar = (0..=t_steps)
            .map(|t| {
                let v = (f(t as f64) / f0).clamp(1e-5, 1.0);
                s::<S>(v)
            })
            .collect();
        DdimSchedule { t_steps, alpha_bar }
    }

    pub fn is_monotone_decreasing(&self) -> bool {
        self.alpha_bar.windows(2).all(|w| w[0] > w[1])
    }

    /// Descending `(t, t_prev)` pairs visiting `steps` evenly spaced
    /// timesteps from `t_steps` down to 0.
    pub fn timestep_pairs(&self, steps: usize) -> Result<Vec<(usize, usize)>> {
        if steps < 1 || steps > self.t_steps {
            return Err(Error::invalid(format!(
                "steps {steps} outside 1..={}",
                self.t_steps
            )));
        }
        let at = |k: usize| ((self.t_steps * k) as f64 / steps as f64).round() as usize;
        let mut out = Vec::with_capacity(steps);
        for k in (1..=steps).rev() {
            out.push((at(k), at(k - 1)));
        }
        Ok(out)
    }
}

// ── Latent codec ────────────────────────────────────────────────────

/// Fixed (seeded, frozen) linear map between images and flattened 4×4×4
/// latents. Each 8×8 patch is projected onto a 4-vector basis whose first
/// three components are the per-channel means, so the round trip keeps the
/// color layout of the image; the fourth component is a seeded random
/// direction orthonormal to the first three.
#[derive(Debug, Clone)]
pub struct LatentCodec<S: Scalar = f32> {
    /// `[patch_dim, channels]` orthonormal columns.
    pub basis: Tensor<S>,
    pub image_size: usize,
    pub patch: usize,
    pub channels: usize,
    pub seed: u64,
    /// Latent scale applied after projection.
    pub scale: S,
}

pub const LATENT_SCALE: f64 = 0.8;

impl<S: Scalar> LatentCodec<S> {
    pub fn new(image_size: usize, patch: usize, seed: u64) -> Self {
        let channels = 4usize;
        let pd = patch * patch * 3;
        let per = patch * patch;
        let mut cols = vec![vec![0.0f64; pd]; channels];
        // per-channel DC vectors (planar patch layout: R block, G block, B block)
        for c in 0..3 {
            for k in 0..per {
                cols[c][c * per + k] = 1.0 / (per as f64).sqrt();
            }
        }
        // seeded random direction, orthonormalized against the DC vectors
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<f64> = (0..pd).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for col in cols.iter().take(3) {
            let dot: f64 = v.iter().zip(col).map(|(a, b)| a * b).sum();
            for (vk, ck) in v.iter_mut().zip(col) {
                *vk -= dot * ck;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut v {
            *x /= norm;
        }
        cols[3] = v;

        let mut data = vec![S::zero(); pd * channels];
        for (ci, col) in cols.iter().enumerate() {
            for k in 0..pd {
                data[k * channels + ci] = s(col[k]);
            }
        }
        LatentCodec {
            basis: Tensor::from_vec(vec![pd, channels], data).expect("finite basis"),
            image_size,
            patch,
            channels,
            seed,
            scale: s(LATENT_SCALE),
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn latent_dim(&self) -> usize {
        self.grid() * self.grid() * self.channels
    }

    /// Image `[H, W, 3]` → latent `[L]`: per-patch projection of the
    /// centered pixels, then scaling.
    pub fn encode(&self, image: &Tensor<S>) -> Result<Tensor<S>> {
        let expect = [self.image_size, self.image_size, 3];
        if image.shape() != expect {
            return Err(Error::shape(
                "latent_encode",
                format!("expected {:?}, got {:?}", expect, image.shape()),
            ));
        }
        let mut tape = Tape::new();
        let flat = tape.constant_from(vec![image.numel()], image.data().to_vec());
        let z = self.encode_tape(&mut tape, flat)?;
        Ok(tape.to_tensor(z))
    }

    pub fn encode_tape(&self, tape: &mut Tape<S>, img_flat: NodeId) -> Result<NodeId> {
        let m = self.grid() * self.grid();
        let pd = self.patch * self.patch * 3;
        let idx = patch_indices(self.image_size, self.patch);
        let patches = tape.permute_gather(img_flat, &idx, vec![m, pd])?;
        let centered = tape.add_scalar(patches, -s::<S>(0.5))?;
        let basis = tape.constant(&self.basis);
        let z = tape.matmul(centered, basis)?;
        let z = tape.scale(z, self.scale)?;
        tape.reshape(z, vec![self.latent_dim()])
    }

    /// Latent `[L]` → image `[H*W*3]` node, clamped to [0, 1].
    pub fn decode_tape(&self, tape: &mut Tape<S>, z: NodeId) -> Result<NodeId> {
        let l = self.latent_dim();
        if tape.data(z).len() != l {
            return Err(Error::shape(
                "latent_decode",
                format!("expected [{l}], got {:?}", tape.shape(z)),
            ));
        }
        let m = self.grid() * self.grid();
        let pd = self.patch * self.patch * 3;
        let zmat = tape.reshape(z, vec![m, self.channels])?;
        let unscaled = tape.scale(zmat, S::one() / self.scale)?;
        let basis_t = {
            let mut tb = vec![S::zero(); self.channels * pd];
            for r in 0..pd {
                for c in 0..self.channels {
                    tb[c * pd + r] = self.basis.data()[r * self.channels + c];
                }
            }
            tape.constant_from(vec![self.channels, pd], tb)
        };
        let patches = tape.matmul(unscaled, basis_t)?;
        let shifted = tape.add_scalar(patches, s::<S>(0.5))?;
        let flat_patches = tape.reshape(shifted, vec![m * pd])?;
        let inv = unpatch_indices(self.image_size, self.patch);
        let img = tape.permute_gather(flat_patches, &inv, vec![self.image_size * self.image_size * 3])?;
        tape.clamp01(img)
    }

    /// Value-level decode to an `[H, W, 3]` image.
    pub fn decode(&self, z: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let zn = tape.constant(z);
        let img = self.decode_tape(&mut tape, zn)?;
        tape.to_tensor(img)
            .reshaped(vec![self.image_size, self.image_size, 3])
    }
}

// ── Denoiser ────────────────────────────────────────────────────────

/// One residual denoiser block: linear → ReLU → cross-attention over the
/// conditioning tokens → linear, added back to the stream.
#[derive(Debug, Clone)]
pub struct DenoiserBlock<S: Scalar> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
    pub wo: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

pub struct DenoiserBlockNodes {
    w1: NodeId,
    b1: NodeId,
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
    w2: NodeId,
    b2: NodeId,
}

impl<S: Scalar> DenoiserBlock<S> {
    fn init(h: usize, cond_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let sh = 1.0 / (h as f64).sqrt();
        let sc = 1.0 / (cond_dim as f64).sqrt();
        DenoiserBlock {
            w1: Tensor::randn_scaled(vec![h, h], sh, rng),
            b1: Tensor::zeros(vec![h]),
            wq: Tensor::randn_scaled(vec![h, h], sh, rng),
            wk: Tensor::randn_scaled(vec![cond_dim, h], sc, rng),
            wv: Tensor::randn_scaled(vec![cond_dim, h], sc, rng),
            wo: Tensor::randn_scaled(vec![h, h], sh, rng),
            // small output init keeps the initial prediction near zero
            w2: Tensor::randn_scaled(vec![h, h], 0.1 * sh, rng),
            b2: Tensor::zeros(vec![h]),
        }
    }

    fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> DenoiserBlockNodes {
        let mut put = |t: &Tensor<S>| {
            if trainable {
                tape.var(t)
            } else {
                tape.constant(t)
            }
        };
        DenoiserBlockNodes {
            w1: put(&self.w1),
            b1: put(&self.b1),
            wq: put(&self.wq),
            wk: put(&self.wk),
            wv: put(&self.wv),
            wo: put(&self.wo),
            w2: put(&self.w2),
            b2: put(&self.b2),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape<S>,
        n: &DenoiserBlockNodes,
        h: NodeId,
        cond: NodeId,
    ) -> Result<NodeId> {
        let u = tape.matmul(h, n.w1)?;
        let u = tape.add_bias(u, n.b1)?;
        let u = tape.relu(u)?;
        let q = tape.matmul(u, n.wq)?;
        let k = tape.matmul(cond, n.wk)?;
        let v = tape.matmul(cond, n.wv)?;
        let at = tape.sdp_attention(q, k, v)?;
        let at = tape.matmul(at, n.wo)?;
        let z = tape.add(u, at)?;
        let out = tape.matmul(z, n.w2)?;
        let out = tape.add_bias(out, n.b2)?;
        tape.add(h, out)
    }

    fn params(&self) -> Vec<(&'static str, &Tensor<S>)> {
        vec![
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    fn node_ids(n: &DenoiserBlockNodes) -> Vec<NodeId> {
        vec![n.w1, n.b1, n.wq, n.wk, n.wv, n.wo, n.w2, n.b2]
    }
}

/// ε-prediction denoiser over flattened latents with text-space
/// conditioning. Frozen outside [`train_denoiser`].
#[derive(Debug, Clone)]
pub struct Denoiser<S: Scalar = f32> {
    /// Learned timestep embeddings `[t_steps + 1, latent_dim]`.
    pub temb: Tensor<S>,
    pub blocks: Vec<DenoiserBlock<S>>,
    pub head_w: Tensor<S>,
    pub head_b: Tensor<S>,
    pub latent_dim: usize,
    pub cond_dim: usize,
    pub t_steps: usize,
    pub seed: u64,
}

pub struct DenoiserNodes {
    temb: NodeId,
    blocks: Vec<DenoiserBlockNodes>,
    head_w: NodeId,
    head_b: NodeId,
}

impl<S: Scalar> Denoiser<S> {
    pub fn init(latent_dim: usize, cond_dim: usize, t_steps: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = (0..2)
            .map(|_| DenoiserBlock::init(latent_dim, cond_dim, &mut rng))
            .collect();
        Denoiser {
            temb: Tensor::randn_scaled(vec![t_steps + 1, latent_dim], 0.2, &mut rng),
            blocks,
            head_w: Tensor::randn_scaled(vec![latent_dim, latent_dim], 0.1 / (latent_dim as f64).sqrt(), &mut rng),
            head_b: Tensor::zeros(vec![latent_dim]),
            latent_dim,
            cond_dim,
            t_steps,
            seed,
        }
    }

    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> DenoiserNodes {
        let temb = if trainable {
            tape.var(&self.temb)
        } else {
            tape.constant(&self.temb)
        };
        let blocks = self.blocks.iter().map(|b| b.bind(tape, trainable)).collect();
        let head_w = if trainable {
            tape.var(&self.head_w)
        } else {
            tape.constant(&self.head_w)
        };
        let head_b = if trainable {
            tape.var(&self.head_b)
        } else {
            tape.constant(&self.head_b)
        };
        DenoiserNodes {
            temb,
            blocks,
            head_w,
            head_b,
        }
    }

    /// Predicted noise ε̂ for latent `x` (as `[1, L]`) at timestep `t`.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        n: &DenoiserNodes,
        x: NodeId,
        t: usize,
        cond: TokenRef,
    ) -> Result<NodeId> {
        if t > self.t_steps {
            return Err(Error::invalid(format!("timestep {t} > {}", self.t_steps)));
        }
        if cond.width(tape) != self.cond_dim {
            return Err(Error::shape(
                "denoiser",
                format!("cond width {} vs {}", cond.width(tape), self.cond_dim),
            ));
        }
        let te = tape.gather_rows(n.temb, &[t])?;
        let mut h = tape.add(x, te)?;
        for (block, bn) in self.blocks.iter().zip(&n.blocks) {
            h = block.forward(tape, bn, h, cond.id)?;
        }
        let e = tape.matmul(h, n.head_w)?;
        tape.add_bias(e, n.head_b)
    }

    pub fn params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> = vec![("temb".into(), &self.temb)];
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, t) in b.params() {
                out.push((format!("block{i}_{n}"), t));
            }
        }
        out.push(("head_w".into(), &self.head_w));
        out.push(("head_b".into(), &self.head_b));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out: Vec<&mut Tensor<S>> = vec![&mut self.temb];
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn node_ids(n: &DenoiserNodes) -> Vec<NodeId> {
        let mut out = vec![n.temb];
        for b in &n.blocks {
            out.extend(DenoiserBlock::<S>::node_ids(b));
        }
        out.push(n.head_w);
        out.push(n.head_b);
        out
    }

    pub fn weights_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, t) in self.params() {
            h.update(name.as_bytes());
            for &v in t.data() {
                h.update(v.to_f32_c().to_le_bytes());
            }
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, dir: impl AsRef<std::path::Path>, extra: &[(String, String)]) -> Result<()> {
        let dir = dir.as_ref();
        let named = self.params();
        let pairs: Vec<(&str, &Tensor<S>)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        io::save_tensor_dir(dir, &pairs)?;
        let mut man = vec![
            ("latent_dim".to_string(), self.latent_dim.to_string()),
            ("cond_dim".to_string(), self.cond_dim.to_string()),
            ("t_steps".to_string(), self.t_steps.to_string()),
            ("seed".to_string(), self.seed.to_string()),
        ];
        man.extend_from_slice(extra);
        io::write_manifest(dir.join("manifest.txt"), &man)
    }

    pub fn load(dir: impl AsRef<std::path::Path>) -> Result<Denoiser<S>> {
        let dir = dir.as_ref();
        let man = io::read_manifest(dir.join("manifest.txt"))?;
        let get = |k: &str| -> Result<usize> {
            io::manifest_get(&man, k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Malformed {
                    path: dir.join("manifest.txt").display().to_string(),
                    details: format!("missing/invalid {k}"),
                })
        };
        let mut den = Denoiser::init(
            get("latent_dim")?,
            get("cond_dim")?,
            get("t_steps")?,
            get("seed")? as u64,
        );
        {
            let names: Vec<String> = den.params().iter().map(|(n, _)| n.clone()).collect();
            let mut loads = Vec::with_capacity(names.len());
            for name in &names {
                loads.push(io::load_tensor::<S>(dir, name)?);
            }
            for (p, t) in den.params_mut().into_iter().zip(loads) {
                *p = t;
            }
        }
        Ok(den)
    }
}

// ── DDIM sampling ───────────────────────────────────────────────────

/// Deterministic DDIM unroll on an existing tape. Differentiable through
/// both `x_t` and the conditioning when they are tracked.
pub fn ddim_sample_tape<S: Scalar>(
    tape: &mut Tape<S>,
    den: &Denoiser<S>,
    nodes: &DenoiserNodes,
    sched: &DdimSchedule<S>,
    x_t: NodeId,
    cond: TokenRef,
    steps: usize,
) -> Result<NodeId> {
    let l = den.latent_dim;
    let mut x = if tape.shape(x_t) == [l] {
        tape.reshape(x_t, vec![1, l])?
    } else {
        x_t
    };
    if tape.shape(x) != [1, l] {
        return Err(Error::shape(
            "ddim_sample",
            format!("latent {:?} vs [{l}]", tape.shape(x)),
        ));
    }
    for (t, t_prev) in sched.timestep_pairs(steps)? {
        let eps = den.forward(tape, nodes, x, t, cond)?;
        let ab_t = sched.alpha_bar[t];
        let ab_p = sched.alpha_bar[t_prev];
        // x̂_0 = (x_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t
        let noise_part = tape.scale(eps, (S::one() - ab_t).sqrt())?;
        let signal = tape.sub(x, noise_part)?;
        let x0_hat = tape.scale(signal, S::one() / ab_t.sqrt())?;
        // x_{t-1} = √ᾱ_{t-1}·x̂_0 + √(1−ᾱ_{t-1})·ε̂
        let a = tape.scale(x0_hat, ab_p.sqrt())?;
        let b = tape.scale(eps, (S::one() - ab_p).sqrt())?;
        x = tape.add(a, b)?;
    }
    tape.reshape(x, vec![l])
}

/// Pure-function sampling: same `(x_T, cond, steps)` always produces the
/// same latent.
pub fn ddim_sample<S: Scalar>(
    den: &Denoiser<S>,
    sched: &DdimSchedule<S>,
    x_t: &Tensor<S>,
    cond: &TokenSeq<S>,
    steps: usize,
) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let nodes = den.bind(&mut tape, false);
    let x = tape.constant(x_t);
    let c = tape.tokens_const(cond);
    let out = ddim_sample_tape(&mut tape, den, &nodes, sched, x, c, steps)?;
    Ok(tape.to_tensor(out))
}

/// Seeded standard-normal initial latent.
pub fn sample_initial_noise<S: Scalar>(latent_dim: usize, seed: u64) -> Tensor<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(vec![latent_dim], &mut rng)
}

// ── Denoiser training ───────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct DenoiserTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        DenoiserTrainConfig {
            epochs: 8,
            batch_size: 16,
            lr: 2e-3,
            seed: 303,
        }
    }
}

/// Standard ε-prediction objective with text-token conditioning; the
/// returned weights are frozen by every later stage.
pub fn train_denoiser<S: Scalar>(
    den: &mut Denoiser<S>,
    enc: &DualEncoder<S>,
    codec: &LatentCodec<S>,
    sched: &DdimSchedule<S>,
    data: &Dataset<S>,
    vocab: &Vocab,
    cfg: &DenoiserTrainConfig,
) -> Result<TrainTrace> {
    // Frozen encoders and codec: encode once.
    let latents: Vec<Tensor<S>> = data
        .samples
        .iter()
        .map(|sm| codec.encode(&sm.image))
        .collect::<Result<_>>()?;
    let captions: Vec<Vec<TokenSeq<S>>> = data
        .samples
        .iter()
        .map(|sm| {
            sm.captions
                .iter()
                .map(|c| enc.encode_caption(vocab, c))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let sizes: Vec<usize> = den.params().iter().map(|(_, t)| t.numel()).collect();
    let mut opt = Adam::new(cfg.lr, &sizes);
    let mut trace = Vec::new();

    for epoch in 0..cfg.epochs {
        let epoch_seed = cfg.seed.wrapping_mul(0xd1f3).wrapping_add(epoch as u64);
        let mut order = data.split.train.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
        order.shuffle(&mut rng);

        let mut train_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (loss, grads) = epsilon_batch(
                den, sched, data, &latents, &captions, chunk, epoch_seed, &mut rng, true,
            )?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "denoiser loss non-finite at epoch {epoch}"
                )));
            }
            let mut params = den.params_mut();
            let mut refs: Vec<&mut Tensor<S>> = params.iter_mut().map(|p| &mut **p).collect();
            opt.step(&mut refs, &grads);
            train_loss += loss;
            batches += 1;
        }

        let mut val_rng = ChaCha8Rng::seed_from_u64(0xe7a1);
        let mut val_loss = 0.0;
        let mut val_batches = 0usize;
        for chunk in data.split.val.chunks(cfg.batch_size) {
            let (l, _) = epsilon_batch(
                den, sched, data, &latents, &captions, chunk, 0xe7a1, &mut val_rng, false,
            )?;
            val_loss += l;
            val_batches += 1;
        }
        let val_loss = val_loss / val_batches.max(1) as f64;
        trace.push(EpochStats {
            epoch,
            train_loss: if batches > 0 { train_loss / batches as f64 } else { 0.0 },
            val_loss,
            extra: Vec::new(),
        });
    }
    Ok(trace)
}

/// Validation ε-MSE with a fixed noise draw; also the per-epoch metric.
pub fn epsilon_val_mse<S: Scalar>(
    den: &Denoiser<S>,
    enc: &DualEncoder<S>,
    codec: &LatentCodec<S>,
    sched: &DdimSchedule<S>,
    data: &Dataset<S>,
    vocab: &Vocab,
    indices: &[usize],
) -> Result<f64> {
    let latents: Vec<Tensor<S>> = indices
        .iter()
        .map(|&i| codec.encode(&data.samples[i].image))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0xe7a1);
    let mut total = 0.0;
    for (k, &i) in indices.iter().enumerate() {
        let sm = &data.samples[i];
        let cond = enc.encode_caption(vocab, &sm.captions[0])?;
        let t = rng.random_range(1..=sched.t_steps);
        let eps: Vec<S> = (0..den.latent_dim)
            .map(|_| s::<S>(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let mut tape = Tape::new();
        let nodes = den.bind(&mut tape, false);
        let loss = noised_mse(
            &mut tape, den, &nodes, sched, &latents[k], &eps, t, &cond,
        )?;
        total += tape.value(loss).to_f64_c();
    }
    Ok(total / indices.len().max(1) as f64)
}

#[allow(clippy::too_many_arguments)]
fn epsilon_batch<S: Scalar>(
    den: &Denoiser<S>,
    sched: &DdimSchedule<S>,
    data: &Dataset<S>,
    latents: &[Tensor<S>],
    captions: &[Vec<TokenSeq<S>>],
    chunk: &[usize],
    epoch_seed: u64,
    rng: &mut ChaCha8Rng,
    with_grads: bool,
) -> Result<(f64, Vec<Vec<S>>)> {
    let mut tape = Tape::new();
    let nodes = den.bind(&mut tape, with_grads);
    let mut losses = Vec::with_capacity(chunk.len());
    for &i in chunk {
        let sm = &data.samples[i];
        let cap = sample_caption(sm, epoch_seed);
        let which = sm.captions.iter().position(|c| c == cap).expect("own caption");
        let cond = &captions[i][which];
        let t = rng.random_range(1..=sched.t_steps);
        let eps: Vec<S> = (0..den.latent_dim)
            .map(|_| s::<S>(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        losses.push(noised_mse(
            &mut tape, den, &nodes, sched, &latents[i], &eps, t, cond,
        )?);
    }
    let mut acc = losses[0];
    for &l in &losses[1..] {
        acc = tape.concat_rows(acc, l)?;
    }
    let flat = tape.reshape(acc, vec![losses.len()])?;
    let loss = tape.mean_all(flat)?;
    let loss_val = tape.value(loss).to_f64_c();
    let grads = if with_grads {
        tape.backward(loss)?;
        Denoiser::<S>::node_ids(&nodes)
            .iter()
            .map(|&id| tape.grad_tensor(id).data().to_vec())
            .collect()
    } else {
        Vec::new()
    };
    Ok((loss_val, grads))
}

#[allow(clippy::too_many_arguments)]
fn noised_mse<S: Scalar>(
    tape: &mut Tape<S>,
    den: &Denoiser<S>,
    nodes: &DenoiserNodes,
    sched: &DdimSchedule<S>,
    latent: &Tensor<S>,
    eps: &[S],
    t: usize,
    cond: &TokenSeq<S>,
) -> Result<NodeId> {
    let l = den.latent_dim;
    let ab = sched.alpha_bar[t];
    let x_t: Vec<S> = latent
        .data()
        .iter()
        .zip(eps)
        .map(|(&z, &e)| ab.sqrt() * z + (S::one() - ab).sqrt() * e)
        .collect();
    let x = tape.constant_from(vec![1, l], x_t);
    let cond_ref = tape.tokens_const(cond);
    let pred = den.forward(tape, nodes, x, t, cond_ref)?;
    let target = tape.constant_from(vec![1, l], eps.to_vec());
    tape.mse(pred, target)
}
