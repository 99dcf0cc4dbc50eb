//! Token aligner: a two-layer MLP (with LayerNorm and ReLU) mapping image
//! tokens onto the text-token manifold, trained with an InfoNCE term over
//! mean embeddings plus a cross-attention reconstruction term.
//!
//! This is the only trained component of the guided-generation pipeline
//! proper; encoders and the denoiser stay frozen while it learns.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{sample_caption, Dataset, Vocab};
use crate::encoders::DualEncoder;
use crate::error::{Error, Result};
use crate::io;
use crate::optim::{Adam, EpochStats, TrainTrace};
use crate::scalar::{s, Scalar};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::tokens::{Modality, TokenSeq, TokenRef};

const LN_EPS: f64 = 1e-5;
/// CLIP-conventional starting temperature.
const TAU_INIT: f64 = 0.07;

#[derive(Debug, Clone)]
pub struct Aligner<S: Scalar = f32> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub ln_g: Tensor<S>,
    pub ln_b: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
    /// τ = exp(log_tau); the log parameterization keeps τ > 0 under
    /// arbitrary gradient updates.
    pub log_tau: Tensor<S>,
    pub d_image: usize,
    pub d_hidden: usize,
    pub d_text: usize,
    pub seed: u64,
}

pub struct AlignerNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub ln_g: NodeId,
    pub ln_b: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub log_tau: NodeId,
}

impl<S: Scalar> Aligner<S> {
    /// Hidden width is 2×d_text.
    pub fn init(d_image: usize, d_text: usize, seed: u64) -> Self {
        let d_hidden = 2 * d_text;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Aligner {
            w1: Tensor::randn_scaled(vec![d_image, d_hidden], 1.0 / (d_image as f64).sqrt(), &mut rng),
            b1: Tensor::zeros(vec![d_hidden]),
            ln_g: Tensor::full(vec![d_hidden], S::one()),
            ln_b: Tensor::zeros(vec![d_hidden]),
            w2: Tensor::randn_scaled(vec![d_hidden, d_text], 1.0 / (d_hidden as f64).sqrt(), &mut rng),
            b2: Tensor::zeros(vec![d_text]),
            log_tau: Tensor::scalar(s(TAU_INIT.ln())),
            d_image,
            d_hidden,
            d_text,
            seed,
        }
    }

    pub fn tau(&self) -> S {
        self.log_tau.item().exp()
    }

    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> AlignerNodes {
        let mut put = |t: &Tensor<S>| {
            if trainable {
                tape.var(t)
            } else {
                tape.constant(t)
            }
        };
        AlignerNodes {
            w1: put(&self.w1),
            b1: put(&self.b1),
            ln_g: put(&self.ln_g),
            ln_b: put(&self.ln_b),
            w2: put(&self.w2),
            b2: put(&self.b2),
            log_tau: put(&self.log_tau),
        }
    }

    /// Per-token layer1 → LayerNorm → ReLU → layer2; count preserved.
    pub fn align_tape(
        &self,
        tape: &mut Tape<S>,
        n: &AlignerNodes,
        tokens: TokenRef,
    ) -> Result<TokenRef> {
        if tokens.modality != Modality::Image {
            return Err(Error::invalid(format!(
                "align expects image tokens, got {}",
                tokens.modality.as_str()
            )));
        }
        if tokens.width(tape) != self.d_image {
            return Err(Error::shape(
                "align",
                format!("token width {} vs d_image {}", tokens.width(tape), self.d_image),
            ));
        }
        let h = tape.matmul(tokens.id, n.w1)?;
        let h = tape.add_bias(h, n.b1)?;
        let h = tape.layer_norm(h, n.ln_g, n.ln_b, s(LN_EPS))?;
        let h = tape.relu(h)?;
        let out = tape.matmul(h, n.w2)?;
        let out = tape.add_bias(out, n.b2)?;
        Ok(TokenRef {
            id: out,
            modality: Modality::Aligned,
        })
    }

    /// Value-level alignment of an image token sequence.
    pub fn align(&self, seq: &TokenSeq<S>) -> Result<TokenSeq<S>> {
        let mut tape = Tape::new();
        let n = self.bind(&mut tape, false);
        let t = tape.tokens_const(seq);
        let out = self.align_tape(&mut tape, &n, t)?;
        Ok(tape.tokens_value(out))
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor<S>)> {
        vec![
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("ln_g", &self.ln_g),
            ("ln_b", &self.ln_b),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("log_tau", &self.log_tau),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        vec![
            &mut self.w1,
            &mut self.b1,
            &mut self.ln_g,
            &mut self.ln_b,
            &mut self.w2,
            &mut self.b2,
            &mut self.log_tau,
        ]
    }

    pub fn node_ids(n: &AlignerNodes) -> Vec<NodeId> {
        vec![n.w1, n.b1, n.ln_g, n.ln_b, n.w2, n.b2, n.log_tau]
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
        io::save_tensor_dir(dir, &self.params())?;
        let mut man = vec![
            ("d_image".to_string(), self.d_image.to_string()),
            ("d_hidden".to_string(), self.d_hidden.to_string()),
            ("d_text".to_string(), self.d_text.to_string()),
            ("seed".to_string(), self.seed.to_string()),
            ("tau".to_string(), format!("{}", self.tau().to_f64_c())),
        ];
        man.extend_from_slice(extra);
        io::write_manifest(dir.join("manifest.txt"), &man)
    }

    pub fn load(dir: impl AsRef<std::path::Path>) -> Result<Aligner<S>> {
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
        let mut a = Aligner::init(get("d_image")?, get("d_text")?, get("seed")? as u64);
        a.w1 = io::load_tensor(dir, "w1")?;
        a.b1 = io::load_tensor(dir, "b1")?;
        a.ln_g = io::load_tensor(dir, "ln_g")?;
        a.ln_b = io::load_tensor(dir, "ln_b")?;
        a.w2 = io::load_tensor(dir, "w2")?;
        a.b2 = io::load_tensor(dir, "b2")?;
        a.log_tau = io::load_tensor(dir, "log_tau")?;
        Ok(a)
    }
}

// ── Losses ──────────────────────────────────────────────────────────

/// In-batch InfoNCE over cosine similarities of mean embeddings, one
/// direction (each aligned-image mean matched against all text means).
pub fn loss_infonce_tape<S: Scalar>(
    tape: &mut Tape<S>,
    mu_img: NodeId,
    mu_txt: NodeId,
    tau: NodeId,
) -> Result<NodeId> {
    let b = tape.shape(mu_img)[0];
    if b < 2 {
        return Err(Error::invalid("InfoNCE needs a batch of at least 2"));
    }
    if tape.shape(mu_img) != tape.shape(mu_txt) {
        return Err(Error::shape(
            "loss_infonce",
            format!("{:?} vs {:?}", tape.shape(mu_img), tape.shape(mu_txt)),
        ));
    }
    let ni = tape.normalize_rows(mu_img)?;
    let nt = tape.normalize_rows(mu_txt)?;
    let ntt = tape.transpose(nt)?;
    let cos = tape.matmul(ni, ntt)?;
    let logits = tape.div_by(cos, tau)?;
    let logp = tape.log_softmax_rows(logits)?;
    let d = tape.diag(logp)?;
    let m = tape.mean_all(d)?;
    tape.neg(m)
}

/// Value-level InfoNCE for a fixed temperature.
pub fn loss_infonce<S: Scalar>(mu_img: &Tensor<S>, mu_txt: &Tensor<S>, tau: f64) -> Result<S> {
    let mut tape = Tape::new();
    let a = tape.constant(mu_img);
    let b = tape.constant(mu_txt);
    let t = tape.scalar_const(s(tau));
    let l = loss_infonce_tape(&mut tape, a, b, t)?;
    Ok(tape.value(l))
}

/// Cross-attention reconstruction: text tokens re-expressed from aligned
/// image tokens, compared to the original text over the common row prefix.
pub fn loss_attn_recon_tape<S: Scalar>(
    tape: &mut Tape<S>,
    aligned: TokenRef,
    text: TokenRef,
) -> Result<NodeId> {
    let (m, dm) = (aligned.count(tape), aligned.width(tape));
    let (n, dn) = (text.count(tape), text.width(tape));
    if dm != dn {
        return Err(Error::shape(
            "loss_attn_recon",
            format!("widths {dm} vs {dn}"),
        ));
    }
    let t_recon = tape.sdp_attention(aligned.id, text.id, text.id)?;
    let k = m.min(n);
    let recon_k = tape.slice_rows(t_recon, 0, k)?;
    let text_k = tape.slice_rows(text.id, 0, k)?;
    tape.mse(recon_k, text_k)
}

pub fn loss_attn_recon<S: Scalar>(aligned: &TokenSeq<S>, text: &TokenSeq<S>) -> Result<S> {
    let mut tape = Tape::new();
    let a = tape.tokens_const(aligned);
    let t = tape.tokens_const(text);
    let l = loss_attn_recon_tape(&mut tape, a, t)?;
    Ok(tape.value(l))
}

/// Which terms of the joint objective to train with (the ablation switch).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    InfoNce,
    Attn,
    Both,
}

impl LossMode {
    pub fn parse(sv: &str) -> Result<Self> {
        match sv {
            "infonce" => Ok(LossMode::InfoNce),
            "attn" => Ok(LossMode::Attn),
            "both" => Ok(LossMode::Both),
            other => Err(Error::invalid(format!("unknown loss mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AlignTrainConfig {
    pub lambda_infonce: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub mode: LossMode,
}

impl Default for AlignTrainConfig {
    fn default() -> Self {
        AlignTrainConfig {
            lambda_infonce: 0.2,
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            seed: 202,
            mode: LossMode::Both,
        }
    }
}

impl AlignTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_infonce < 0.0 {
            return Err(Error::invalid("lambda_infonce must be >= 0"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("aligner batch size must be >= 2"));
        }
        Ok(())
    }
}

/// Joint loss over one batch: `(total, infonce_term, attn_term)`.
///
/// The total honors the ablation mode; the component terms are always
/// computed for logging.
pub fn loss_align_batch_tape<S: Scalar>(
    tape: &mut Tape<S>,
    aligner: &Aligner<S>,
    nodes: &AlignerNodes,
    image_tokens: &[TokenRef],
    text_tokens: &[TokenRef],
    lambda: f64,
    mode: LossMode,
) -> Result<(NodeId, NodeId, NodeId)> {
    debug_assert_eq!(image_tokens.len(), text_tokens.len());
    let mut mu_img_rows = Vec::with_capacity(image_tokens.len());
    let mut mu_txt_rows = Vec::with_capacity(text_tokens.len());
    let mut attn_losses = Vec::with_capacity(image_tokens.len());
    for (&img, &txt) in image_tokens.iter().zip(text_tokens) {
        let aligned = aligner.align_tape(tape, nodes, img)?;
        let mu_i = tape.mean_rows(aligned.id)?;
        let d = tape.shape(mu_i)[0];
        mu_img_rows.push(tape.reshape(mu_i, vec![1, d])?);
        let mu_t = tape.mean_rows(txt.id)?;
        mu_txt_rows.push(tape.reshape(mu_t, vec![1, d])?);
        attn_losses.push(loss_attn_recon_tape(tape, aligned, txt)?);
    }
    let mu_img = stack(tape, &mu_img_rows)?;
    let mu_txt = stack(tape, &mu_txt_rows)?;
    let tau = tape.exp(nodes.log_tau)?;
    let infonce = loss_infonce_tape(tape, mu_img, mu_txt, tau)?;
    let attn = mean_of(tape, &attn_losses)?;

    let total = match mode {
        LossMode::Both => {
            let li = tape.scale(infonce, s(lambda))?;
            tape.add(li, attn)?
        }
        LossMode::InfoNce => infonce,
        LossMode::Attn => attn,
    };
    Ok((total, infonce, attn))
}

fn stack<S: Scalar>(tape: &mut Tape<S>, rows: &[NodeId]) -> Result<NodeId> {
    let mut acc = rows[0];
    for &r in &rows[1..] {
        acc = tape.concat_rows(acc, r)?;
    }
    Ok(acc)
}

fn mean_of<S: Scalar>(tape: &mut Tape<S>, scalars: &[NodeId]) -> Result<NodeId> {
    let stacked = stack(tape, scalars)?;
    let flat = tape.reshape(stacked, vec![scalars.len()])?;
    tape.mean_all(flat)
}

/// Pre-encoded training corpus: frozen-encoder outputs computed once.
pub struct EncodedCorpus<S: Scalar> {
    pub image_tokens: Vec<TokenSeq<S>>,
    /// One text encoding per caption variant.
    pub caption_tokens: Vec<Vec<TokenSeq<S>>>,
}

pub fn pre_encode<S: Scalar>(
    enc: &DualEncoder<S>,
    data: &Dataset<S>,
    vocab: &Vocab,
) -> Result<EncodedCorpus<S>> {
    let mut image_tokens = Vec::with_capacity(data.samples.len());
    let mut caption_tokens = Vec::with_capacity(data.samples.len());
    for sample in &data.samples {
        image_tokens.push(enc.encode_image(&sample.image)?);
        let mut caps = Vec::with_capacity(sample.captions.len());
        for c in &sample.captions {
            caps.push(enc.encode_caption(vocab, c)?);
        }
        caption_tokens.push(caps);
    }
    Ok(EncodedCorpus {
        image_tokens,
        caption_tokens,
    })
}

/// Mini-batch training of the aligner against frozen encoders.
pub fn train_aligner<S: Scalar>(
    aligner: &mut Aligner<S>,
    enc: &DualEncoder<S>,
    data: &Dataset<S>,
    vocab: &Vocab,
    cfg: &AlignTrainConfig,
) -> Result<TrainTrace> {
    cfg.validate()?;
    let encoded = pre_encode(enc, data, vocab)?;
    let sizes: Vec<usize> = aligner.params().iter().map(|(_, t)| t.numel()).collect();
    let mut opt = Adam::new(cfg.lr, &sizes);
    let mut trace = Vec::new();

    for epoch in 0..cfg.epochs {
        let epoch_seed = cfg.seed.wrapping_mul(0x51_7cc1).wrapping_add(epoch as u64);
        let mut order = data.split.train.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
        order.shuffle(&mut rng);

        let mut train_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut tape = Tape::new();
            let nodes = aligner.bind(&mut tape, true);
            let (imgs, txts) = gather_batch(&mut tape, &encoded, data, chunk, epoch_seed);
            let (total, _, _) = loss_align_batch_tape(
                &mut tape,
                aligner,
                &nodes,
                &imgs,
                &txts,
                cfg.lambda_infonce,
                cfg.mode,
            )?;
            let loss = tape.value(total).to_f64_c();
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "aligner loss non-finite at epoch {epoch}"
                )));
            }
            tape.backward(total)?;
            let grads: Vec<Vec<S>> = Aligner::<S>::node_ids(&nodes)
                .iter()
                .map(|&id| tape.grad_tensor(id).data().to_vec())
                .collect();
            let mut params = aligner.params_mut();
            let mut refs: Vec<&mut Tensor<S>> = params.iter_mut().map(|p| &mut **p).collect();
            opt.step(&mut refs, &grads);
            train_loss += loss;
            batches += 1;
        }

        let (val, val_inf, val_attn) =
            eval_align_loss(aligner, &encoded, data, &data.split.val, cfg, epoch_seed)?;
        trace.push(EpochStats {
            epoch,
            train_loss: if batches > 0 { train_loss / batches as f64 } else { 0.0 },
            val_loss: val,
            extra: vec![
                ("infonce".to_string(), val_inf),
                ("attn".to_string(), val_attn),
            ],
        });
    }
    Ok(trace)
}

fn gather_batch<S: Scalar>(
    tape: &mut Tape<S>,
    encoded: &EncodedCorpus<S>,
    data: &Dataset<S>,
    chunk: &[usize],
    epoch_seed: u64,
) -> (Vec<TokenRef>, Vec<TokenRef>) {
    let mut imgs = Vec::with_capacity(chunk.len());
    let mut txts = Vec::with_capacity(chunk.len());
    for &i in chunk {
        imgs.push(tape.tokens_const(&encoded.image_tokens[i]));
        let cap = sample_caption(&data.samples[i], epoch_seed);
        let which = data.samples[i]
            .captions
            .iter()
            .position(|c| c == cap)
            .expect("sampled caption comes from the sample");
        txts.push(tape.tokens_const(&encoded.caption_tokens[i][which]));
    }
    (imgs, txts)
}

/// Validation losses `(total_at_default_mode, infonce, attn)`.
pub fn eval_align_loss<S: Scalar>(
    aligner: &Aligner<S>,
    encoded: &EncodedCorpus<S>,
    data: &Dataset<S>,
    indices: &[usize],
    cfg: &AlignTrainConfig,
    epoch_seed: u64,
) -> Result<(f64, f64, f64)> {
    let mut tot = 0.0;
    let mut inf = 0.0;
    let mut attn = 0.0;
    let mut n = 0usize;
    for chunk in indices.chunks(cfg.batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let mut tape = Tape::new();
        let nodes = aligner.bind(&mut tape, false);
        let (imgs, txts) = gather_batch(&mut tape, encoded, data, chunk, epoch_seed);
        let (t, i, a) = loss_align_batch_tape(
            &mut tape,
            aligner,
            &nodes,
            &imgs,
            &txts,
            cfg.lambda_infonce,
            cfg.mode,
        )?;
        tot += tape.value(t).to_f64_c();
        inf += tape.value(i).to_f64_c();
        attn += tape.value(a).to_f64_c();
        n += 1;
    }
    let n = n.max(1) as f64;
    Ok((tot / n, inf / n, attn / n))
}

// ── Modality-mismatch diagnostic ────────────────────────────────────

/// Closed-form KL between diagonal Gaussians moment-matched to two token
/// pools: `KL(N(μ_a, σ²_a) ‖ N(μ_b, σ²_b))`. Variances are regularized by
/// +1e-6, so zero-variance coordinates are well-defined.
pub fn kl_proxy<S: Scalar>(tokens: &Tensor<S>, corpus: &Tensor<S>) -> Result<f64> {
    if tokens.cols() != corpus.cols() {
        return Err(Error::shape(
            "kl_proxy",
            format!("widths {} vs {}", tokens.cols(), corpus.cols()),
        ));
    }
    let d = tokens.cols();
    let (mu_a, var_a) = column_moments(tokens);
    let (mu_b, var_b) = column_moments(corpus);
    let mut kl = 0.0;
    for j in 0..d {
        let (sa, sb) = (var_a[j] + 1e-6, var_b[j] + 1e-6);
        let dm = mu_a[j] - mu_b[j];
        kl += 0.5 * ((sb / sa).ln() + (sa + dm * dm) / sb - 1.0);
    }
    Ok(kl)
}

/// [`kl_proxy`] over token sequences: one aligned sequence against a pooled
/// text corpus.
pub fn kl_proxy_tokens<S: Scalar>(
    aligned: &crate::tokens::TokenSeq<S>,
    corpus: &[crate::tokens::TokenSeq<S>],
) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::invalid("kl_proxy needs a non-empty corpus"));
    }
    let d = corpus[0].width();
    let mut rows = Vec::new();
    for seq in corpus {
        if seq.width() != d {
            return Err(Error::shape("kl_proxy", "corpus width mismatch".to_string()));
        }
        rows.extend_from_slice(seq.tokens.data());
    }
    let pooled = Tensor::from_vec(vec![rows.len() / d, d], rows)?;
    kl_proxy(&aligned.tokens, &pooled)
}

fn column_moments<S: Scalar>(t: &Tensor<S>) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (t.rows(), t.cols());
    let mut mu = vec![0.0f64; d];
    for i in 0..n {
        for (j, m) in mu.iter_mut().enumerate() {
            *m += t.data()[i * d + j].to_f64_c();
        }
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    let mut var = vec![0.0f64; d];
    for i in 0..n {
        for j in 0..d {
            let dv = t.data()[i * d + j].to_f64_c() - mu[j];
            var[j] += dv * dv;
        }
    }
    for v in &mut var {
        *v /= n as f64;
    }
    (mu, var)
}

/// Widens tokens by appending zero columns; the unaligned baseline the KL
/// diagnostic compares against.
pub fn zero_pad_tokens<S: Scalar>(tokens: &Tensor<S>, width: usize) -> Result<Tensor<S>> {
    let (n, d) = (tokens.rows(), tokens.cols());
    if width < d {
        return Err(Error::invalid(format!("cannot pad width {d} down to {width}")));
    }
    let mut data = vec![S::zero(); n * width];
    for i in 0..n {
        data[i * width..i * width + d].copy_from_slice(&tokens.data()[i * d..(i + 1) * d]);
    }
    Tensor::from_vec(vec![n, width], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn align_preserves_count_and_maps_width() {
        let a = Aligner::<f32>::init(48, 64, 1);
        let tokens = TokenSeq::new(
            Tensor::randn(vec![16, 48], &mut ChaCha8Rng::seed_from_u64(2)),
            Modality::Image,
        )
        .unwrap();
        let out = a.align(&tokens).unwrap();
        assert_eq!(out.count(), 16);
        assert_eq!(out.width(), 64);
        assert_eq!(out.modality, Modality::Aligned);
    }

    #[test]
    fn zero_layer2_gives_zero_output() {
        let mut a = Aligner::<f32>::init(48, 64, 1);
        a.w2 = Tensor::zeros(vec![a.d_hidden, a.d_text]);
        a.b2 = Tensor::zeros(vec![a.d_text]);
        let tokens = TokenSeq::new(
            Tensor::randn(vec![4, 48], &mut ChaCha8Rng::seed_from_u64(3)),
            Modality::Image,
        )
        .unwrap();
        let out = a.align(&tokens).unwrap();
        assert!(out.tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn align_rejects_wrong_modality() {
        let a = Aligner::<f32>::init(48, 64, 1);
        let tokens = TokenSeq::new(Tensor::zeros(vec![4, 48]), Modality::Text).unwrap();
        assert!(a.align(&tokens).is_err());
    }

    #[test]
    fn infonce_identical_means_is_log_b() {
        // all μ identical -> uniform logits -> loss = log B
        for b in [2usize, 4, 8] {
            let row: Vec<f32> = (0..6).map(|i| (i as f32) * 0.3 + 0.1).collect();
            let mut data = Vec::new();
            for _ in 0..b {
                data.extend_from_slice(&row);
            }
            let mu = Tensor::from_vec(vec![b, 6], data).unwrap();
            let l = loss_infonce(&mu, &mu, 0.07).unwrap();
            assert!(
                (l - (b as f32).ln()).abs() < 1e-5,
                "B={b}: {l} vs {}",
                (b as f32).ln()
            );
        }
    }

    #[test]
    fn infonce_perfect_separation_small_tau() {
        // orthogonal pairs, tiny temperature -> loss -> 0
        let mu = Tensor::from_vec(vec![2, 2], vec![1.0f32, 0.0, 0.0, 1.0]).unwrap();
        let l = loss_infonce(&mu, &mu, 0.005).unwrap();
        assert!(l < 1e-6, "loss {l}");
    }

    #[test]
    fn infonce_rejects_batch_of_one() {
        let mu = Tensor::from_vec(vec![1, 4], vec![1.0f32, 0.0, 0.0, 0.0]).unwrap();
        assert!(loss_infonce(&mu, &mu, 0.07).is_err());
    }

    #[test]
    fn attn_recon_single_text_token_is_exact() {
        // n = 1: attention output always equals the single text token.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let aligned: TokenSeq<f64> =
            TokenSeq::new(Tensor::randn(vec![3, 8], &mut rng), Modality::Aligned).unwrap();
        let text = TokenSeq::new(Tensor::randn(vec![1, 8], &mut rng), Modality::Text).unwrap();
        let l = loss_attn_recon(&aligned, &text).unwrap();
        assert!(l.abs() < 1e-10, "loss {l}");
    }

    #[test]
    fn attn_recon_self_is_small_but_nonzero() {
        // aligned = text with matching count: attention mixes rows, so the
        // reconstruction is close but not exact
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let t = Tensor::<f64>::randn(vec![5, 8], &mut rng);
        let text = TokenSeq::new(t.clone(), Modality::Text).unwrap();
        let self_aligned = TokenSeq::new(t, Modality::Aligned).unwrap();
        let l = loss_attn_recon(&self_aligned, &text).unwrap();
        assert!(l > 1e-6, "mixing should leave residual error, got {l}");
        // and well below the scale of the tokens themselves
        assert!(l < 1.0, "residual unexpectedly large: {l}");
    }

    #[test]
    fn joint_loss_is_linear_in_lambda() {
        let aligner = Aligner::<f64>::init(6, 8, 31);
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let img = Tensor::<f64>::randn(vec![4, 6], &mut rng);
        let txt = Tensor::<f64>::randn(vec![5, 8], &mut rng);
        let eval = |lambda: f64, mode: LossMode| -> (f64, f64, f64) {
            let mut tape = Tape::new();
            let nodes = aligner.bind(&mut tape, false);
            let ir = TokenRef {
                id: tape.constant(&img),
                modality: Modality::Image,
            };
            let tr = TokenRef {
                id: tape.constant(&txt),
                modality: Modality::Text,
            };
            let (total, inf, attn) =
                loss_align_batch_tape(&mut tape, &aligner, &nodes, &[ir, ir], &[tr, tr], lambda, mode)
                    .unwrap();
            (
                tape.value(total).to_f64_c(),
                tape.value(inf).to_f64_c(),
                tape.value(attn).to_f64_c(),
            )
        };
        // lambda = 0 in the joint mode reduces to the reconstruction term
        let (t0, _, a0) = eval(0.0, LossMode::Both);
        assert!((t0 - a0).abs() < 1e-12);
        // known component values combine as lambda*a + b
        let (t, inf, attn) = eval(0.2, LossMode::Both);
        assert!((t - (0.2 * inf + attn)).abs() < 1e-9, "{t} vs {}", 0.2 * inf + attn);
        // linearity in lambda at fixed parameters
        let (t5, inf5, attn5) = eval(0.5, LossMode::Both);
        assert!((inf - inf5).abs() < 1e-12 && (attn - attn5).abs() < 1e-12);
        assert!(((t5 - t) - 0.3 * inf).abs() < 1e-9);
    }

    #[test]
    fn kl_proxy_identical_is_zero() {
        let t = Tensor::<f32>::randn(vec![20, 6], &mut ChaCha8Rng::seed_from_u64(5));
        let kl = kl_proxy(&t, &t).unwrap();
        assert!(kl.abs() < 1e-9, "kl {kl}");
    }

    #[test]
    fn kl_proxy_mean_shift_closed_form() {
        // unit variances, one coordinate shifted by delta -> KL = delta²/2
        let n = 4000usize;
        let d = 3usize;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let base = Tensor::<f64>::randn(vec![n, d], &mut rng);
        let delta = 0.8f64;
        let mut shifted = base.data().to_vec();
        for i in 0..n {
            shifted[i * d] += delta;
        }
        let shifted = Tensor::from_vec(vec![n, d], shifted).unwrap();
        let kl = kl_proxy(&shifted, &base).unwrap();
        // sample moments wobble, so allow a loose band around δ²/2
        assert!((kl - delta * delta / 2.0).abs() < 0.02, "kl {kl}");
    }

    #[test]
    fn tau_stays_positive_after_updates() {
        let mut a = Aligner::<f32>::init(8, 8, 7);
        // simulate aggressive updates on log_tau
        a.log_tau = Tensor::scalar(-9.0);
        assert!(a.tau() > 0.0);
        a.log_tau = Tensor::scalar(4.0);
        assert!(a.tau() > 0.0);
    }
}
