//! Run configuration: one explicit key per hyperparameter, loadable from a
//! `key = value` file with CLI flags taking precedence. Unknown keys are
//! rejected so a typo cannot silently fall back to a default.

use std::path::Path;

use anyhow::{bail, Context, Result};
use refdiff_core::aligner::LossMode;
use refdiff_core::fusion::FusionStrategy;
use refdiff_core::pno::PnoConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset_seed: u64,
    pub dataset_size: usize,

    pub d_text: usize,
    pub d_image: usize,
    pub d_proj: usize,
    pub n_max: usize,
    pub image_size: usize,
    pub patch: usize,

    pub enc_epochs: usize,
    pub enc_batch: usize,
    pub enc_lr: f64,
    pub enc_seed: u64,

    pub den_epochs: usize,
    pub den_batch: usize,
    pub den_lr: f64,
    pub den_seed: u64,
    pub ddim_steps: usize,

    pub align_epochs: usize,
    pub align_batch: usize,
    pub align_lr: f64,
    pub align_seed: u64,
    pub lambda_infonce: f64,

    pub alpha: f64,
    pub fusion: FusionStrategy,
    pub rescale: bool,

    pub pno_steps: usize,
    pub pno_lr: f64,
    pub pno_lambda_reg: f64,
    pub pno_grad_clip: f64,
    pub pno_unroll: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset_seed: 17,
            dataset_size: 2000,
            d_text: 64,
            d_image: 48,
            d_proj: 32,
            n_max: 16,
            image_size: 32,
            patch: 8,
            enc_epochs: 6,
            enc_batch: 32,
            enc_lr: 1e-3,
            enc_seed: 101,
            den_epochs: 8,
            den_batch: 16,
            den_lr: 2e-3,
            den_seed: 303,
            ddim_steps: 50,
            align_epochs: 10,
            align_batch: 32,
            align_lr: 1e-3,
            align_seed: 202,
            lambda_infonce: 0.2,
            alpha: 0.3,
            fusion: FusionStrategy::Concat,
            rescale: true,
            pno_steps: 50,
            pno_lr: 1e-2,
            pno_lambda_reg: 0.1,
            pno_grad_clip: 1.0,
            pno_unroll: 5,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let entries = refdiff_core::io::read_manifest(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        for (k, v) in entries {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        macro_rules! parse {
            () => {
                value.parse().with_context(|| format!("config key {key} = {value:?}"))?
            };
        }
        match key {
            "seed" => self.seed = parse!(),
            "dataset_seed" => self.dataset_seed = parse!(),
            "dataset_size" => self.dataset_size = parse!(),
            "d_text" => self.d_text = parse!(),
            "d_image" => self.d_image = parse!(),
            "d_proj" => self.d_proj = parse!(),
            "n_max" => self.n_max = parse!(),
            "image_size" => self.image_size = parse!(),
            "patch" => self.patch = parse!(),
            "enc_epochs" => self.enc_epochs = parse!(),
            "enc_batch" => self.enc_batch = parse!(),
            "enc_lr" => self.enc_lr = parse!(),
            "enc_seed" => self.enc_seed = parse!(),
            "den_epochs" => self.den_epochs = parse!(),
            "den_batch" => self.den_batch = parse!(),
            "den_lr" => self.den_lr = parse!(),
            "den_seed" => self.den_seed = parse!(),
            "ddim_steps" => self.ddim_steps = parse!(),
            "align_epochs" => self.align_epochs = parse!(),
            "align_batch" => self.align_batch = parse!(),
            "align_lr" => self.align_lr = parse!(),
            "align_seed" => self.align_seed = parse!(),
            "lambda_infonce" => self.lambda_infonce = parse!(),
            "alpha" => self.alpha = parse!(),
            "fusion" => self.fusion = FusionStrategy::parse(value).map_err(anyhow::Error::new)?,
            "rescale" => self.rescale = parse!(),
            "pno_steps" => self.pno_steps = parse!(),
            "pno_lr" => self.pno_lr = parse!(),
            "pno_lambda_reg" => self.pno_lambda_reg = parse!(),
            "pno_grad_clip" => self.pno_grad_clip = parse!(),
            "pno_unroll" => self.pno_unroll = parse!(),
            other => bail!("unknown config key {other:?}"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset_size < 10 {
            bail!("dataset_size must be >= 10");
        }
        if !self.image_size.is_multiple_of(self.patch) {
            bail!("image_size must be a multiple of patch");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            bail!("alpha must lie in [0, 1]");
        }
        if self.ddim_steps < 1 {
            bail!("ddim_steps must be >= 1");
        }
        if self.pno_unroll < 1 || self.pno_unroll > self.ddim_steps {
            bail!("pno_unroll must lie in 1..=ddim_steps");
        }
        Ok(())
    }

    /// Canonical dump: fixed key order, one `key = value` per line.
    pub fn dump(&self) -> Vec<(String, String)> {
        let b = |v: bool| v.to_string();
        vec![
            ("seed".into(), self.seed.to_string()),
            ("dataset_seed".into(), self.dataset_seed.to_string()),
            ("dataset_size".into(), self.dataset_size.to_string()),
            ("d_text".into(), self.d_text.to_string()),
            ("d_image".into(), self.d_image.to_string()),
            ("d_proj".into(), self.d_proj.to_string()),
            ("n_max".into(), self.n_max.to_string()),
            ("image_size".into(), self.image_size.to_string()),
            ("patch".into(), self.patch.to_string()),
            ("enc_epochs".into(), self.enc_epochs.to_string()),
            ("enc_batch".into(), self.enc_batch.to_string()),
            ("enc_lr".into(), self.enc_lr.to_string()),
            ("enc_seed".into(), self.enc_seed.to_string()),
            ("den_epochs".into(), self.den_epochs.to_string()),
            ("den_batch".into(), self.den_batch.to_string()),
            ("den_lr".into(), self.den_lr.to_string()),
            ("den_seed".into(), self.den_seed.to_string()),
            ("ddim_steps".into(), self.ddim_steps.to_string()),
            ("align_epochs".into(), self.align_epochs.to_string()),
            ("align_batch".into(), self.align_batch.to_string()),
            ("align_lr".into(), self.align_lr.to_string()),
            ("align_seed".into(), self.align_seed.to_string()),
            ("lambda_infonce".into(), self.lambda_infonce.to_string()),
            ("alpha".into(), self.alpha.to_string()),
            ("fusion".into(), self.fusion.as_str().to_string()),
            ("rescale".into(), b(self.rescale)),
            ("pno_steps".into(), self.pno_steps.to_string()),
            ("pno_lr".into(), self.pno_lr.to_string()),
            ("pno_lambda_reg".into(), self.pno_lambda_reg.to_string()),
            ("pno_grad_clip".into(), self.pno_grad_clip.to_string()),
            ("pno_unroll".into(), self.pno_unroll.to_string()),
        ]
    }

    /// Short digest of the canonical dump; embedded in every artifact.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (k, v) in self.dump() {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn pno_config(&self) -> PnoConfig {
        PnoConfig {
            steps: self.pno_steps,
            lr: self.pno_lr,
            lambda_reg: self.pno_lambda_reg,
            grad_clip: self.pno_grad_clip,
            unroll_steps: self.pno_unroll,
        }
    }

    pub fn align_config(&self, mode: LossMode) -> refdiff_core::aligner::AlignTrainConfig {
        refdiff_core::aligner::AlignTrainConfig {
            lambda_infonce: self.lambda_infonce,
            epochs: self.align_epochs,
            batch_size: self.align_batch,
            lr: self.align_lr,
            seed: self.align_seed,
            mode,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("not_a_key", "1").is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.alpha = 0.5;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn validation_catches_bad_alpha() {
        let cfg = RunConfig {
            alpha: 1.2,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
