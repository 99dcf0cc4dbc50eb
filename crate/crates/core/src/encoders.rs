//! Frozen toy dual encoder: text and image towers that emit pre-projection
//! tokens plus a linear projection into a shared, unit-norm embedding space.
//!
//! The towers are pretrained contrastively on the synthetic dataset and then
//! frozen: the projected spaces end up aligned while the pre-projection
//! token spaces stay mismatched, which is exactly the structure the aligner
//! is trained to bridge.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{sample_caption, Dataset, Vocab, IMAGE_SIZE, PAD_ID};
use crate::error::{Error, Result};
use crate::io;
use crate::optim::{Adam, EpochStats, TrainTrace};
use crate::scalar::{s, Scalar};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::tokens::{Modality, TokenSeq};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderConfig {
    pub d_text: usize,
    pub d_image: usize,
    pub d_proj: usize,
    pub n_max: usize,
    pub image_size: usize,
    pub patch: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn defaults(vocab_size: usize, seed: u64) -> Self {
        EncoderConfig {
            d_text: 64,
            d_image: 48,
            d_proj: 32,
            n_max: 16,
            image_size: IMAGE_SIZE,
            patch: 8,
            vocab_size,
            seed,
        }
    }

    /// Patches per image side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    /// Patch token count m.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Flattened patch width (planar RGB).
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }
}

/// One pre-LN residual block: self-attention then feed-forward.
#[derive(Debug, Clone)]
pub struct Block<S: Scalar> {
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
    pub wo: Tensor<S>,
    pub ln1_g: Tensor<S>,
    pub ln1_b: Tensor<S>,
    pub ln2_g: Tensor<S>,
    pub ln2_b: Tensor<S>,
    pub ff1_w: Tensor<S>,
    pub ff1_b: Tensor<S>,
    pub ff2_w: Tensor<S>,
    pub ff2_b: Tensor<S>,
}

pub struct BlockNodes {
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
    ln1_g: NodeId,
    ln1_b: NodeId,
    ln2_g: NodeId,
    ln2_b: NodeId,
    ff1_w: NodeId,
    ff1_b: NodeId,
    ff2_w: NodeId,
    ff2_b: NodeId,
}

const LN_EPS: f64 = 1e-5;

impl<S: Scalar> Block<S> {
    fn init(d: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        Block {
            wq: Tensor::randn_scaled(vec![d, d], std, rng),
            wk: Tensor::randn_scaled(vec![d, d], std, rng),
            wv: Tensor::randn_scaled(vec![d, d], std, rng),
            wo: Tensor::randn_scaled(vec![d, d], std, rng),
            ln1_g: Tensor::full(vec![d], S::one()),
            ln1_b: Tensor::zeros(vec![d]),
            ln2_g: Tensor::full(vec![d], S::one()),
            ln2_b: Tensor::zeros(vec![d]),
            ff1_w: Tensor::randn_scaled(vec![d, 2 * d], std, rng),
            ff1_b: Tensor::zeros(vec![2 * d]),
            ff2_w: Tensor::randn_scaled(vec![2 * d, d], 1.0 / (2.0 * d as f64).sqrt(), rng),
            ff2_b: Tensor::zeros(vec![d]),
        }
    }

    fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> BlockNodes {
        let mut put = |t: &Tensor<S>| {
            if trainable {
                tape.var(t)
            } else {
                tape.constant(t)
            }
        };
        BlockNodes {
            wq: put(&self.wq),
            wk: put(&self.wk),
            wv: put(&self.wv),
            wo: put(&self.wo),
            ln1_g: put(&self.ln1_g),
            ln1_b: put(&self.ln1_b),
            ln2_g: put(&self.ln2_g),
            ln2_b: put(&self.ln2_b),
            ff1_w: put(&self.ff1_w),
            ff1_b: put(&self.ff1_b),
            ff2_w: put(&self.ff2_w),
            ff2_b: put(&self.ff2_b),
        }
    }

    /// Returns `(post_attention, output)`; the intermediate is one of the
    /// perceptual-metric feature stages.
    fn forward(&self, tape: &mut Tape<S>, n: &BlockNodes, x: NodeId) -> Result<(NodeId, NodeId)> {
        let eps = s::<S>(LN_EPS);
        let h = tape.layer_norm(x, n.ln1_g, n.ln1_b, eps)?;
        let q = tape.matmul(h, n.wq)?;
        let k = tape.matmul(h, n.wk)?;
        let v = tape.matmul(h, n.wv)?;
        let a = tape.sdp_attention(q, k, v)?;
        let o = tape.matmul(a, n.wo)?;
        let x1 = tape.add(x, o)?;

        let h2 = tape.layer_norm(x1, n.ln2_g, n.ln2_b, eps)?;
        let f1 = tape.matmul(h2, n.ff1_w)?;
        let f1 = tape.add_bias(f1, n.ff1_b)?;
        let f1 = tape.relu(f1)?;
        let f2 = tape.matmul(f1, n.ff2_w)?;
        let f2 = tape.add_bias(f2, n.ff2_b)?;
        let out = tape.add(x1, f2)?;
        Ok((x1, out))
    }

    fn params(&self) -> Vec<(&'static str, &Tensor<S>)> {
        vec![
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("ff1_w", &self.ff1_w),
            ("ff1_b", &self.ff1_b),
            ("ff2_w", &self.ff2_w),
            ("ff2_b", &self.ff2_b),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.ff1_w,
            &mut self.ff1_b,
            &mut self.ff2_w,
            &mut self.ff2_b,
        ]
    }

    fn block_node_ids(n: &BlockNodes) -> Vec<NodeId> {
        vec![
            n.wq, n.wk, n.wv, n.wo, n.ln1_g, n.ln1_b, n.ln2_g, n.ln2_b, n.ff1_w, n.ff1_b,
            n.ff2_w, n.ff2_b,
        ]
    }
}

/// Fixed sinusoidal positional encodings.
fn positional<S: Scalar>(count: usize, d: usize) -> Tensor<S> {
    let mut data = vec![S::zero(); count * d];
    for p in 0..count {
        for j in 0..d {
            let rate = 10_000f64.powf((2 * (j / 2)) as f64 / d as f64);
            let angle = p as f64 / rate;
            let v = if j % 2 == 0 { angle.sin() } else { angle.cos() };
            data[p * d + j] = s(v);
        }
    }
    Tensor::from_vec(vec![count, d], data).expect("positional encodings are finite")
}

/// Flat-image index for each (patch, planar-RGB within patch) position.
/// Shared by the image tower and the latent codec.
pub fn patch_indices(image_size: usize, patch: usize) -> Vec<usize> {
    let grid = image_size / patch;
    let mut idx = Vec::with_capacity(grid * grid * patch * patch * 3);
    for py in 0..grid {
        for px in 0..grid {
            for c in 0..3 {
                for y in 0..patch {
                    for x in 0..patch {
                        let gy = py * patch + y;
                        let gx = px * patch + x;
                        idx.push((gy * image_size + gx) * 3 + c);
                    }
                }
            }
        }
    }
    idx
}

/// Inverse of [`patch_indices`]: flat-patch index for each image position.
pub fn unpatch_indices(image_size: usize, patch: usize) -> Vec<usize> {
    let fwd = patch_indices(image_size, patch);
    let mut inv = vec![0usize; fwd.len()];
    for (patch_pos, &img_pos) in fwd.iter().enumerate() {
        inv[img_pos] = patch_pos;
    }
    inv
}

#[derive(Debug, Clone)]
pub struct TextEncoder<S: Scalar> {
    pub embed: Tensor<S>,
    pub block: Block<S>,
    pub proj: Tensor<S>,
}

#[derive(Debug, Clone)]
pub struct ImageEncoder<S: Scalar> {
    pub patch_w: Tensor<S>,
    pub patch_b: Tensor<S>,
    pub block: Block<S>,
    pub proj: Tensor<S>,
}

pub struct TextNodes {
    embed: NodeId,
    block: BlockNodes,
    pub proj: NodeId,
    pos: NodeId,
}

pub struct ImageNodes {
    patch_w: NodeId,
    patch_b: NodeId,
    block: BlockNodes,
    pub proj: NodeId,
    pos: NodeId,
}

/// The three feature stages the perceptual metric reads.
pub struct ImageStages {
    pub embedded: NodeId,
    pub post_attn: NodeId,
    pub tokens: NodeId,
}

/// Both towers plus the shared configuration.
#[derive(Debug, Clone)]
pub struct DualEncoder<S: Scalar = f32> {
    pub cfg: EncoderConfig,
    pub text: TextEncoder<S>,
    pub image: ImageEncoder<S>,
}

impl<S: Scalar> DualEncoder<S> {
    /// Seeded init; identical seeds reproduce identical weights.
    pub fn init(cfg: EncoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let text = TextEncoder {
            embed: Tensor::randn_scaled(vec![cfg.vocab_size, cfg.d_text], 0.5, &mut rng),
            block: Block::init(cfg.d_text, &mut rng),
            proj: Tensor::randn_scaled(
                vec![cfg.d_text, cfg.d_proj],
                1.0 / (cfg.d_text as f64).sqrt(),
                &mut rng,
            ),
        };
        let image = ImageEncoder {
            patch_w: Tensor::randn_scaled(
                vec![cfg.patch_dim(), cfg.d_image],
                1.0 / (cfg.patch_dim() as f64).sqrt(),
                &mut rng,
            ),
            patch_b: Tensor::zeros(vec![cfg.d_image]),
            block: Block::init(cfg.d_image, &mut rng),
            proj: Tensor::randn_scaled(
                vec![cfg.d_image, cfg.d_proj],
                1.0 / (cfg.d_image as f64).sqrt(),
                &mut rng,
            ),
        };
        DualEncoder { cfg, text, image }
    }

    // ── Tape-side binding and forwards ──────────────────────────────

    pub fn bind_text(&self, tape: &mut Tape<S>, trainable: bool) -> TextNodes {
        let embed = if trainable {
            tape.var(&self.text.embed)
        } else {
            tape.constant(&self.text.embed)
        };
        let block = self.text.block.bind(tape, trainable);
        let proj = if trainable {
            tape.var(&self.text.proj)
        } else {
            tape.constant(&self.text.proj)
        };
        let pos = tape.constant(&positional(self.cfg.n_max, self.cfg.d_text));
        TextNodes {
            embed,
            block,
            proj,
            pos,
        }
    }

    pub fn bind_image(&self, tape: &mut Tape<S>, trainable: bool) -> ImageNodes {
        let put = |tape: &mut Tape<S>, t: &Tensor<S>| {
            if trainable {
                tape.var(t)
            } else {
                tape.constant(t)
            }
        };
        let patch_w = put(tape, &self.image.patch_w);
        let patch_b = put(tape, &self.image.patch_b);
        let block = self.image.block.bind(tape, trainable);
        let proj = put(tape, &self.image.proj);
        let pos = tape.constant(&positional(self.cfg.num_patches(), self.cfg.d_image));
        ImageNodes {
            patch_w,
            patch_b,
            block,
            proj,
            pos,
        }
    }

    /// Pads/truncates ids to `n_max` and validates them against the vocab
    /// size.
    pub fn prepare_ids(&self, ids: &[usize]) -> Result<Vec<usize>> {
        if ids.is_empty() {
            return Err(Error::invalid("empty caption"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(Error::UnknownToken(format!("id {bad}")));
        }
        let mut out = ids.to_vec();
        out.truncate(self.cfg.n_max);
        while out.len() < self.cfg.n_max {
            out.push(PAD_ID);
        }
        Ok(out)
    }

    pub fn text_forward(&self, tape: &mut Tape<S>, n: &TextNodes, ids: &[usize]) -> Result<NodeId> {
        let padded = self.prepare_ids(ids)?;
        let e = tape.gather_rows(n.embed, &padded)?;
        let x = tape.add(e, n.pos)?;
        let (_, out) = self.text.block.forward(tape, &n.block, x)?;
        Ok(out)
    }

    /// Image tower on an already-flattened `[H*W*3]` node; used both for
    /// encoding dataset images and for differentiating through decoded
    /// generations.
    pub fn image_forward_stages(
        &self,
        tape: &mut Tape<S>,
        n: &ImageNodes,
        img_flat: NodeId,
    ) -> Result<ImageStages> {
        let m = self.cfg.num_patches();
        let pd = self.cfg.patch_dim();
        let idx = patch_indices(self.cfg.image_size, self.cfg.patch);
        let patches = tape.permute_gather(img_flat, &idx, vec![m, pd])?;
        let e = tape.matmul(patches, n.patch_w)?;
        let e = tape.add_bias(e, n.patch_b)?;
        let embedded = tape.add(e, n.pos)?;
        let (post_attn, tokens) = self.image.block.forward(tape, &n.block, embedded)?;
        Ok(ImageStages {
            embedded,
            post_attn,
            tokens,
        })
    }

    /// Mean-pool, project with the modality's matrix, L2-normalize.
    pub fn project_tape(
        &self,
        tape: &mut Tape<S>,
        tokens: NodeId,
        proj: NodeId,
    ) -> Result<NodeId> {
        let mu = tape.mean_rows(tokens)?;
        let d = tape.shape(mu)[0];
        let mu = tape.reshape(mu, vec![1, d])?;
        let p = tape.matmul(mu, proj)?;
        let sq: S = p_norm_sq(tape, p);
        if sq.sqrt() < s::<S>(1e-8) {
            return Err(Error::ZeroNorm { op: "project_clip" });
        }
        tape.normalize_rows(p)
    }

    // ── Value-level API ─────────────────────────────────────────────

    /// Deterministic text tokens for a prepared id sequence.
    pub fn encode_text(&self, ids: &[usize]) -> Result<TokenSeq<S>> {
        let mut tape = Tape::new();
        let n = self.bind_text(&mut tape, false);
        let out = self.text_forward(&mut tape, &n, ids)?;
        TokenSeq::new(tape.to_tensor(out), Modality::Text)
    }

    pub fn encode_caption(&self, vocab: &Vocab, caption: &str) -> Result<TokenSeq<S>> {
        self.encode_text(&vocab.encode(caption)?)
    }

    /// Deterministic image tokens; validates resolution and value range.
    pub fn encode_image(&self, image: &Tensor<S>) -> Result<TokenSeq<S>> {
        let expect = [self.cfg.image_size, self.cfg.image_size, 3];
        if image.shape() != expect {
            return Err(Error::shape(
                "encode_image",
                format!("expected {:?}, got {:?}", expect, image.shape()),
            ));
        }
        if image
            .data()
            .iter()
            .any(|&v| v < S::zero() || v > S::one())
        {
            return Err(Error::invalid("image values outside [0, 1]"));
        }
        let mut tape = Tape::new();
        let n = self.bind_image(&mut tape, false);
        let flat = tape.constant_from(vec![image.numel()], image.data().to_vec());
        let stages = self.image_forward_stages(&mut tape, &n, flat)?;
        TokenSeq::new(tape.to_tensor(stages.tokens), Modality::Image)
    }

    /// Projected unit embedding for any token sequence. Aligned and fused
    /// tokens live in text space and use the text projection.
    pub fn project_clip(&self, seq: &TokenSeq<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let proj = match seq.modality {
            Modality::Image => tape.constant(&self.image.proj),
            _ => tape.constant(&self.text.proj),
        };
        let tokens = tape.constant(&seq.tokens);
        let out = self.project_tape(&mut tape, tokens, proj)?;
        tape.to_tensor(out).reshaped(vec![self.cfg.d_proj])
    }

    /// Convenience: projected unit embedding of an image.
    pub fn image_embedding(&self, image: &Tensor<S>) -> Result<Tensor<S>> {
        let tokens = self.encode_image(image)?;
        self.project_clip(&tokens)
    }

    // ── Parameter plumbing ──────────────────────────────────────────

    pub fn params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> = vec![("text_embed".into(), &self.text.embed)];
        for (n, t) in self.text.block.params() {
            out.push((format!("text_{n}"), t));
        }
        out.push(("text_proj".into(), &self.text.proj));
        out.push(("image_patch_w".into(), &self.image.patch_w));
        out.push(("image_patch_b".into(), &self.image.patch_b));
        for (n, t) in self.image.block.params() {
            out.push((format!("image_{n}"), t));
        }
        out.push(("image_proj".into(), &self.image.proj));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out: Vec<&mut Tensor<S>> = vec![&mut self.text.embed];
        out.extend(self.text.block.params_mut());
        out.push(&mut self.text.proj);
        out.push(&mut self.image.patch_w);
        out.push(&mut self.image.patch_b);
        out.extend(self.image.block.params_mut());
        out.push(&mut self.image.proj);
        out
    }

    fn node_ids(tn: &TextNodes, im: &ImageNodes) -> Vec<NodeId> {
        let mut out = vec![tn.embed];
        out.extend(Block::<S>::block_node_ids(&tn.block));
        out.push(tn.proj);
        out.push(im.patch_w);
        out.push(im.patch_b);
        out.extend(Block::<S>::block_node_ids(&im.block));
        out.push(im.proj);
        out
    }

    /// Hex digest over all weights; used to assert freezing.
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

    // ── Persistence ─────────────────────────────────────────────────

    pub fn save(&self, dir: impl AsRef<std::path::Path>, extra: &[(String, String)]) -> Result<()> {
        let dir = dir.as_ref();
        let named = self.params();
        let pairs: Vec<(&str, &Tensor<S>)> =
            named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        io::save_tensor_dir(dir, &pairs)?;
        let mut man = vec![
            ("seed".to_string(), self.cfg.seed.to_string()),
            ("d_text".to_string(), self.cfg.d_text.to_string()),
            ("d_image".to_string(), self.cfg.d_image.to_string()),
            ("d_proj".to_string(), self.cfg.d_proj.to_string()),
            ("n_max".to_string(), self.cfg.n_max.to_string()),
            ("image_size".to_string(), self.cfg.image_size.to_string()),
            ("patch".to_string(), self.cfg.patch.to_string()),
            ("vocab_size".to_string(), self.cfg.vocab_size.to_string()),
        ];
        man.extend_from_slice(extra);
        io::write_manifest(dir.join("manifest.txt"), &man)
    }

    pub fn load(dir: impl AsRef<std::path::Path>) -> Result<DualEncoder<S>> {
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
        let cfg = EncoderConfig {
            d_text: get("d_text")?,
            d_image: get("d_image")?,
            d_proj: get("d_proj")?,
            n_max: get("n_max")?,
            image_size: get("image_size")?,
            patch: get("patch")?,
            vocab_size: get("vocab_size")?,
            seed: get("seed")? as u64,
        };
        let mut enc = DualEncoder::init(cfg);
        {
            let names: Vec<String> = enc.params().iter().map(|(n, _)| n.clone()).collect();
            let mut loads = Vec::with_capacity(names.len());
            for name in &names {
                loads.push(io::load_tensor::<S>(dir, name)?);
            }
            for (p, t) in enc.params_mut().into_iter().zip(loads) {
                *p = t;
            }
        }
        Ok(enc)
    }
}

fn p_norm_sq<S: Scalar>(tape: &Tape<S>, id: NodeId) -> S {
    tape.data(id)
        .iter()
        .map(|&v| v * v)
        .fold(S::zero(), |a, b| a + b)
}

// ── Contrastive pretraining ─────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fixed InfoNCE temperature for the encoder towers.
    pub temperature: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 6,
            batch_size: 32,
            lr: 1e-3,
            seed: 101,
            temperature: 0.07,
        }
    }
}

/// Symmetric in-batch InfoNCE over projected embeddings; trains both towers
/// end to end, then the caller freezes the result.
pub fn pretrain_contrastive<S: Scalar>(
    enc: &mut DualEncoder<S>,
    data: &Dataset<S>,
    vocab: &Vocab,
    cfg: &PretrainConfig,
) -> Result<TrainTrace> {
    let sizes: Vec<usize> = enc.params().iter().map(|(_, t)| t.numel()).collect();
    let mut opt = Adam::new(cfg.lr, &sizes);
    let mut trace = Vec::new();

    for epoch in 0..cfg.epochs {
        let epoch_seed = cfg.seed.wrapping_mul(0x100_0003).wrapping_add(epoch as u64);
        let mut order = data.split.train.clone();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(epoch_seed);
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let (loss, grads) = batch_loss(enc, data, vocab, chunk, epoch_seed, cfg, true)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "encoder pretraining loss non-finite at epoch {epoch}"
                )));
            }
            let mut params = enc.params_mut();
            let mut refs: Vec<&mut Tensor<S>> = params.iter_mut().map(|p| &mut **p).collect();
            opt.step(&mut refs, &grads);
            epoch_loss += loss;
            batches += 1;
        }

        let val_loss = eval_loss(enc, data, vocab, &data.split.val, epoch_seed, cfg)?;
        trace.push(EpochStats {
            epoch,
            train_loss: if batches > 0 { epoch_loss / batches as f64 } else { 0.0 },
            val_loss,
            extra: Vec::new(),
        });
    }
    Ok(trace)
}

fn batch_loss<S: Scalar>(
    enc: &DualEncoder<S>,
    data: &Dataset<S>,
    vocab: &Vocab,
    batch: &[usize],
    epoch_seed: u64,
    cfg: &PretrainConfig,
    with_grads: bool,
) -> Result<(f64, Vec<Vec<S>>)> {
    let mut tape = Tape::new();
    let tn = enc.bind_text(&mut tape, with_grads);
    let im = enc.bind_image(&mut tape, with_grads);

    let mut img_rows = Vec::with_capacity(batch.len());
    let mut txt_rows = Vec::with_capacity(batch.len());
    for &i in batch {
        let sample = &data.samples[i];
        let caption = sample_caption(sample, epoch_seed);
        let ids = vocab.encode(caption)?;
        let t_tokens = enc.text_forward(&mut tape, &tn, &ids)?;
        let t_emb = enc.project_tape(&mut tape, t_tokens, tn.proj)?;
        txt_rows.push(t_emb);

        let flat = tape.constant_from(vec![sample.image.numel()], sample.image.data().to_vec());
        let stages = enc.image_forward_stages(&mut tape, &im, flat)?;
        let i_emb = enc.project_tape(&mut tape, stages.tokens, im.proj)?;
        img_rows.push(i_emb);
    }
    let timg = stack_rows(&mut tape, &img_rows)?;
    let ttxt = stack_rows(&mut tape, &txt_rows)?;

    // image -> text direction
    let ttxt_t = tape.transpose(ttxt)?;
    let sim = tape.matmul(timg, ttxt_t)?;
    let logits = tape.scale(sim, s::<S>(1.0 / cfg.temperature))?;
    let l_i2t = cross_entropy_diag(&mut tape, logits)?;
    // text -> image direction
    let logits_t = tape.transpose(logits)?;
    let l_t2i = cross_entropy_diag(&mut tape, logits_t)?;
    let total = tape.add(l_i2t, l_t2i)?;
    let loss = tape.scale(total, s::<S>(0.5))?;

    let loss_val = tape.value(loss).to_f64_c();
    let grads = if with_grads {
        tape.backward(loss)?;
        DualEncoder::<S>::node_ids(&tn, &im)
            .iter()
            .map(|&id| tape.grad_tensor(id).data().to_vec())
            .collect()
    } else {
        Vec::new()
    };
    Ok((loss_val, grads))
}

fn eval_loss<S: Scalar>(
    enc: &DualEncoder<S>,
    data: &Dataset<S>,
    vocab: &Vocab,
    indices: &[usize],
    epoch_seed: u64,
    cfg: &PretrainConfig,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for chunk in indices.chunks(cfg.batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let (loss, _) = batch_loss(enc, data, vocab, chunk, epoch_seed, cfg, false)?;
        total += loss;
        n += 1;
    }
    Ok(if n > 0 { total / n as f64 } else { 0.0 })
}

/// Mean cross-entropy of the diagonal under a row softmax.
fn cross_entropy_diag<S: Scalar>(tape: &mut Tape<S>, logits: NodeId) -> Result<NodeId> {
    let logp = tape.log_softmax_rows(logits)?;
    let d = tape.diag(logp)?;
    let m = tape.mean_all(d)?;
    tape.neg(m)
}

fn stack_rows<S: Scalar>(tape: &mut Tape<S>, rows: &[NodeId]) -> Result<NodeId> {
    let mut acc = rows[0];
    for &r in &rows[1..] {
        acc = tape.concat_rows(acc, r)?;
    }
    Ok(acc)
}

/// Top-1 in-batch retrieval accuracy (image query, text gallery), averaged
/// over batches. Uses the first caption of each sample.
pub fn retrieval_accuracy<S: Scalar>(
    enc: &DualEncoder<S>,
    data: &Dataset<S>,
    vocab: &Vocab,
    indices: &[usize],
    batch_size: usize,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for chunk in indices.chunks(batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let mut img_embs = Vec::new();
        let mut txt_embs = Vec::new();
        for &i in chunk {
            let sample = &data.samples[i];
            img_embs.push(enc.image_embedding(&sample.image)?);
            let tokens = enc.encode_caption(vocab, &sample.captions[0])?;
            txt_embs.push(enc.project_clip(&tokens)?);
        }
        for (qi, q) in img_embs.iter().enumerate() {
            let mut best = 0usize;
            let mut best_sim = f64::NEG_INFINITY;
            for (ti, t) in txt_embs.iter().enumerate() {
                let sim: f64 = q
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&a, &b)| (a * b).to_f64_c())
                    .sum();
                if sim > best_sim {
                    best_sim = sim;
                    best = ti;
                }
            }
            if best == qi {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_dataset;

    fn small_encoder() -> (DualEncoder<f32>, Vocab) {
        let vocab = Vocab::closed();
        let enc = DualEncoder::init(EncoderConfig::defaults(vocab.len(), 42));
        (enc, vocab)
    }

    #[test]
    fn init_is_seeded_and_reproducible() {
        let (a, _) = small_encoder();
        let (b, _) = small_encoder();
        assert_eq!(a.weights_hash(), b.weights_hash());
    }

    #[test]
    fn encode_text_is_deterministic_and_padded() {
        let (enc, vocab) = small_encoder();
        let ids = vocab.encode("a red circle on a plain background").unwrap();
        let a = enc.encode_text(&ids).unwrap();
        let b = enc.encode_text(&ids).unwrap();
        assert!(a.tokens.bit_eq(&b.tokens));
        assert_eq!(a.count(), enc.cfg.n_max);
        assert_eq!(a.width(), enc.cfg.d_text);
        assert_eq!(a.modality, Modality::Text);
    }

    #[test]
    fn different_captions_differ() {
        let (enc, vocab) = small_encoder();
        let a = enc.encode_caption(&vocab, "a red circle on a plain background").unwrap();
        let b = enc.encode_caption(&vocab, "a blue square on a plain background").unwrap();
        assert!(a.tokens.max_abs_diff(&b.tokens) > 1e-6);
    }

    #[test]
    fn long_caption_truncates_to_n_max() {
        let (enc, vocab) = small_encoder();
        let long: Vec<usize> = std::iter::repeat_n(vocab.id("circle").unwrap(), 30).collect();
        let t = enc.encode_text(&long).unwrap();
        assert_eq!(t.count(), enc.cfg.n_max);
    }

    #[test]
    fn unknown_token_id_rejected() {
        let (enc, _) = small_encoder();
        assert!(matches!(
            enc.encode_text(&[9999]),
            Err(Error::UnknownToken(_))
        ));
    }

    #[test]
    fn encode_image_shape_and_determinism() {
        let (enc, _) = small_encoder();
        let img = Tensor::zeros(vec![32, 32, 3]);
        let a = enc.encode_image(&img).unwrap();
        let b = enc.encode_image(&img).unwrap();
        assert!(a.tokens.bit_eq(&b.tokens));
        assert_eq!(a.count(), 16); // (32/8)^2
        assert_eq!(a.width(), enc.cfg.d_image);
    }

    #[test]
    fn encode_image_flip_sensitivity() {
        let (enc, _) = small_encoder();
        let data: Dataset<f32> = generate_dataset(5, 10).unwrap();
        let img = &data.samples[0].image;
        let mut flipped = vec![0.0f32; img.numel()];
        for y in 0..32 {
            for x in 0..32 {
                for c in 0..3 {
                    flipped[(y * 32 + (31 - x)) * 3 + c] = img.data()[(y * 32 + x) * 3 + c];
                }
            }
        }
        let flipped = Tensor::from_vec(vec![32, 32, 3], flipped).unwrap();
        let a = enc.encode_image(img).unwrap();
        let b = enc.encode_image(&flipped).unwrap();
        assert!(a.tokens.max_abs_diff(&b.tokens) > 1e-6);
    }

    #[test]
    fn encode_image_validates_inputs() {
        let (enc, _) = small_encoder();
        assert!(enc.encode_image(&Tensor::zeros(vec![16, 16, 3])).is_err());
        let bad = Tensor::from_vec(vec![32, 32, 3], vec![1.5f32; 32 * 32 * 3]).unwrap();
        assert!(enc.encode_image(&bad).is_err());
    }

    #[test]
    fn projection_is_unit_norm_and_deterministic() {
        let (enc, vocab) = small_encoder();
        let t = enc.encode_caption(&vocab, "a triangle that is green").unwrap();
        let e = enc.project_clip(&t).unwrap();
        let norm: f32 = e.data().iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert!(e.bit_eq(&enc.project_clip(&t).unwrap()));
    }

    #[test]
    fn save_load_roundtrip_bitexact() {
        let (enc, _) = small_encoder();
        let dir = std::env::temp_dir().join(format!("enc-test-{}", std::process::id()));
        enc.save(&dir, &[]).unwrap();
        let back: DualEncoder<f32> = DualEncoder::load(&dir).unwrap();
        assert_eq!(enc.weights_hash(), back.weights_hash());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn zero_epoch_pretraining_is_identity() {
        let (mut enc, vocab) = small_encoder();
        let before = enc.weights_hash();
        let data: Dataset<f32> = generate_dataset(5, 20).unwrap();
        let cfg = PretrainConfig {
            epochs: 0,
            ..Default::default()
        };
        pretrain_contrastive(&mut enc, &data, &vocab, &cfg).unwrap();
        assert_eq!(enc.weights_hash(), before);
    }
}
