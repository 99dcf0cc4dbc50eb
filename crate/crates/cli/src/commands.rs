//! Command implementations. Every command is deterministic given its
//! arguments, seeds, and input files; every artifact embeds the config
//! hash that produced it.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Result};
use rayon::prelude::*;

use refdiff_core::aligner::{self, Aligner, LossMode};
use refdiff_core::dataset::{self, Dataset, Vocab};
use refdiff_core::diffusion::{
    ddim_sample, sample_initial_noise, train_denoiser, DdimSchedule, Denoiser, DenoiserTrainConfig,
    LatentCodec,
};
use refdiff_core::encoders::{pretrain_contrastive, retrieval_accuracy, DualEncoder, EncoderConfig, PretrainConfig};
use refdiff_core::fusion::{fuse, FusionConfig, FusionStrategy};
use refdiff_core::io;
use refdiff_core::metrics::{evaluate_run, EvalItem, MetricReport};
use refdiff_core::optim::write_trace;
use refdiff_core::pno::{pno_optimize, write_pno_trace, PnoState};
use refdiff_core::tensor::Tensor;
use refdiff_core::tokens::TokenSeq;

use crate::config::RunConfig;

/// Wraps failures with the exit-code class they map to.
#[derive(Debug)]
pub enum CmdError {
    /// Malformed invocation (bad flag values): exit 1.
    Usage(anyhow::Error),
    /// Bad inputs, missing files, contract violations: exit 2.
    Validation(anyhow::Error),
    /// NaN/divergence/failed checks: exit 3.
    Numerical(anyhow::Error),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Usage(_) => 1,
            CmdError::Validation(_) => 2,
            CmdError::Numerical(_) => 3,
        }
    }

    pub fn message(&self) -> String {
        match self {
            CmdError::Usage(e) | CmdError::Validation(e) | CmdError::Numerical(e) => {
                format!("{e:#}")
            }
        }
    }
}

pub type CmdResult<T> = std::result::Result<T, CmdError>;

fn validation<T>(r: Result<T>) -> CmdResult<T> {
    r.map_err(CmdError::Validation)
}

/// Classifies a core error: numerical contract violations exit 3,
/// everything else is a validation failure.
fn classify(e: refdiff_core::Error) -> CmdError {
    use refdiff_core::Error as E;
    match e {
        E::NonFinite { .. } | E::Diverged(_) | E::OptimDiverged { .. } | E::NonScalarRoot(_) => {
            CmdError::Numerical(anyhow::Error::new(e))
        }
        other => CmdError::Validation(anyhow::Error::new(other)),
    }
}

fn core<T>(r: refdiff_core::Result<T>) -> CmdResult<T> {
    r.map_err(classify)
}

// ── gen-data ────────────────────────────────────────────────────────

pub fn gen_data(cfg: &RunConfig, out: &Path) -> CmdResult<()> {
    validation(cfg.validate())?;
    let data: Dataset<f32> = core(dataset::generate_dataset(cfg.dataset_seed, cfg.dataset_size))?;
    core(data.save(out))?;
    core(io::write_manifest(
        out.join("config_hash.txt"),
        &[("config_hash".to_string(), cfg.hash())],
    ))?;
    println!(
        "wrote {} samples (train {} / val {} / test {}) to {}",
        data.samples.len(),
        data.split.train.len(),
        data.split.val.len(),
        data.split.test.len(),
        out.display()
    );
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainTarget {
    Encoders,
    Denoiser,
    Aligner,
}

pub struct TrainArgs<'a> {
    pub target: TrainTarget,
    pub data_dir: &'a Path,
    pub encoders_dir: Option<&'a Path>,
    pub out: &'a Path,
    pub loss: LossMode,
}

fn load_dataset(dir: &Path) -> CmdResult<Dataset<f32>> {
    if !dir.join("images.vtf").exists() {
        return Err(CmdError::Validation(anyhow!(
            "no dataset at {} (expected images.vtf; run `gen-data` first)",
            dir.display()
        )));
    }
    core(Dataset::load(dir))
}

fn load_encoders(dir: &Path) -> CmdResult<DualEncoder<f32>> {
    if !dir.join("manifest.txt").exists() {
        return Err(CmdError::Validation(anyhow!(
            "no encoder checkpoint at {} (run `train encoders` first)",
            dir.display()
        )));
    }
    core(DualEncoder::load(dir))
}

pub fn train(cfg: &RunConfig, args: &TrainArgs) -> CmdResult<()> {
    validation(cfg.validate())?;
    let data = load_dataset(args.data_dir)?;
    let vocab = Vocab::closed();
    let hash = cfg.hash();

    match args.target {
        TrainTarget::Encoders => {
            let mut enc = DualEncoder::init(EncoderConfig {
                d_text: cfg.d_text,
                d_image: cfg.d_image,
                d_proj: cfg.d_proj,
                n_max: cfg.n_max,
                image_size: cfg.image_size,
                patch: cfg.patch,
                vocab_size: vocab.len(),
                seed: cfg.enc_seed,
            });
            let pcfg = PretrainConfig {
                epochs: cfg.enc_epochs,
                batch_size: cfg.enc_batch,
                lr: cfg.enc_lr,
                seed: cfg.enc_seed,
                temperature: 0.07,
            };
            let trace = core(pretrain_contrastive(&mut enc, &data, &vocab, &pcfg))?;
            let acc = core(retrieval_accuracy(&enc, &data, &vocab, &data.split.val, 32))?;
            core(enc.save(
                args.out,
                &[
                    ("epochs".into(), cfg.enc_epochs.to_string()),
                    ("lr".into(), cfg.enc_lr.to_string()),
                    ("val_retrieval".into(), format!("{acc:.4}")),
                    ("config_hash".into(), hash),
                ],
            ))?;
            validation(write_trace(args.out.join("trace.txt"), &trace).map_err(Into::into))?;
            for e in &trace {
                println!("epoch {} train {:.4} val {:.4}", e.epoch, e.train_loss, e.val_loss);
            }
            println!("val retrieval accuracy {acc:.4} (chance {:.4})", 1.0 / 32.0);
        }
        TrainTarget::Denoiser => {
            let enc_dir = args
                .encoders_dir
                .ok_or_else(|| CmdError::Validation(anyhow!("--encoders is required to train the denoiser")))?;
            let enc = load_encoders(enc_dir)?;
            let codec = LatentCodec::new(cfg.image_size, cfg.patch, codec_seed(cfg));
            let sched = DdimSchedule::cosine(cfg.ddim_steps);
            let mut den = Denoiser::init(codec.latent_dim(), cfg.d_text, cfg.ddim_steps, cfg.den_seed);
            let dcfg = DenoiserTrainConfig {
                epochs: cfg.den_epochs,
                batch_size: cfg.den_batch,
                lr: cfg.den_lr,
                seed: cfg.den_seed,
            };
            let trace = core(train_denoiser(&mut den, &enc, &codec, &sched, &data, &vocab, &dcfg))?;
            core(den.save(
                args.out,
                &[
                    ("image_size".into(), cfg.image_size.to_string()),
                    ("patch".into(), cfg.patch.to_string()),
                    ("codec_seed".into(), codec_seed(cfg).to_string()),
                    ("epochs".into(), cfg.den_epochs.to_string()),
                    ("config_hash".into(), hash),
                ],
            ))?;
            validation(write_trace(args.out.join("trace.txt"), &trace).map_err(Into::into))?;
            for e in &trace {
                println!("epoch {} train {:.4} val {:.4}", e.epoch, e.train_loss, e.val_loss);
            }
        }
        TrainTarget::Aligner => {
            let enc_dir = args
                .encoders_dir
                .ok_or_else(|| CmdError::Validation(anyhow!("--encoders is required to train the aligner")))?;
            let enc = load_encoders(enc_dir)?;
            let mut al = Aligner::init(cfg.d_image, cfg.d_text, cfg.align_seed);
            let acfg = cfg.align_config(args.loss);
            let trace = core(aligner::train_aligner(&mut al, &enc, &data, &vocab, &acfg))?;
            core(al.save(
                args.out,
                &[
                    ("lambda_infonce".into(), cfg.lambda_infonce.to_string()),
                    ("epochs".into(), cfg.align_epochs.to_string()),
                    (
                        "loss_mode".into(),
                        match args.loss {
                            LossMode::Both => "both",
                            LossMode::InfoNce => "infonce",
                            LossMode::Attn => "attn",
                        }
                        .to_string(),
                    ),
                    ("dataset_hash".into(), data.content_hash()),
                    ("config_hash".into(), hash),
                ],
            ))?;
            validation(write_trace(args.out.join("trace.txt"), &trace).map_err(Into::into))?;
            for e in &trace {
                let extras: String = e
                    .extra
                    .iter()
                    .map(|(k, v)| format!(" {k} {v:.4}"))
                    .collect();
                println!("epoch {} train {:.4} val {:.4}{extras}", e.epoch, e.train_loss, e.val_loss);
            }
        }
    }
    Ok(())
}

fn codec_seed(cfg: &RunConfig) -> u64 {
    cfg.den_seed ^ 0xC0DEC
}

// ── generate ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenMode {
    Text,
    Fusion(FusionStrategy),
}

impl GenMode {
    pub fn parse(v: &str) -> Result<Self> {
        Ok(match v {
            "text" => GenMode::Text,
            other => GenMode::Fusion(FusionStrategy::parse(other)?),
        })
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            GenMode::Text => "text",
            GenMode::Fusion(f) => f.as_str(),
        }
    }
}

/// Everything the generation stages need, loaded once.
pub struct Pipeline {
    pub cfg: RunConfig,
    pub vocab: Vocab,
    pub enc: DualEncoder<f32>,
    pub den: Denoiser<f32>,
    pub aligner: Option<Aligner<f32>>,
    pub codec: LatentCodec<f32>,
    pub sched: DdimSchedule<f32>,
}

impl Pipeline {
    pub fn load(
        cfg: &RunConfig,
        encoders_dir: &Path,
        denoiser_dir: &Path,
        aligner_dir: Option<&Path>,
    ) -> CmdResult<Self> {
        let enc = load_encoders(encoders_dir)?;
        if !denoiser_dir.join("manifest.txt").exists() {
            return Err(CmdError::Validation(anyhow!(
                "no denoiser checkpoint at {} (run `train denoiser` first)",
                denoiser_dir.display()
            )));
        }
        let den: Denoiser<f32> = core(Denoiser::load(denoiser_dir))?;
        let man = core(io::read_manifest(denoiser_dir.join("manifest.txt")))?;
        let geti = |k: &str| -> CmdResult<u64> {
            io::manifest_get(&man, k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| CmdError::Validation(anyhow!("denoiser manifest missing {k}")))
        };
        let codec = LatentCodec::new(geti("image_size")? as usize, geti("patch")? as usize, geti("codec_seed")?);
        let sched = DdimSchedule::cosine(den.t_steps);
        let aligner = match aligner_dir {
            Some(dir) => {
                if !dir.join("manifest.txt").exists() {
                    return Err(CmdError::Validation(anyhow!(
                        "no aligner checkpoint at {} (run `train aligner` first)",
                        dir.display()
                    )));
                }
                Some(core(Aligner::load(dir))?)
            }
            None => None,
        };
        Ok(Pipeline {
            cfg: cfg.clone(),
            vocab: Vocab::closed(),
            enc,
            den,
            aligner,
            codec,
            sched,
        })
    }

    /// Builds the conditioning sequence for one generation.
    pub fn conditioning(
        &self,
        prompt: &str,
        reference: Option<&Tensor<f32>>,
        mode: GenMode,
        alpha: f64,
    ) -> CmdResult<TokenSeq<f32>> {
        let ids = core(self.vocab.encode(prompt))?;
        let text = core(self.enc.encode_text(&ids))?;
        match mode {
            GenMode::Text => Ok(text),
            GenMode::Fusion(strategy) => {
                let reference = reference.ok_or_else(|| {
                    CmdError::Validation(anyhow!("mode {} needs --reference", strategy.as_str()))
                })?;
                let al = self.aligner.as_ref().ok_or_else(|| {
                    CmdError::Validation(anyhow!("mode {} needs --aligner", strategy.as_str()))
                })?;
                let img_tokens = core(self.enc.encode_image(reference))?;
                let aligned = core(al.align(&img_tokens))?;
                let fcfg = FusionConfig {
                    strategy,
                    alpha,
                    rescale: self.cfg.rescale,
                };
                core(fuse(&fcfg, &text, &aligned))
            }
        }
    }

    /// One deterministic generation, optionally refined at test time.
    pub fn generate(&self, spec: &GenSpec) -> CmdResult<GenOutput> {
        let cond = self.conditioning(&spec.prompt, spec.reference.as_ref(), spec.mode, spec.alpha)?;
        let x_t = sample_initial_noise::<f32>(self.codec.latent_dim(), spec.seed);

        let (latent, pno_state) = if spec.pno {
            let guide = spec.reference.as_ref().ok_or_else(|| {
                CmdError::Validation(anyhow!("test-time refinement needs --reference as the guide"))
            })?;
            let state = core(pno_optimize(
                &self.den,
                &self.sched,
                &self.codec,
                &self.enc,
                &x_t,
                &cond,
                guide,
                &self.cfg.pno_config(),
            ))?;
            (state.final_latent.clone(), Some(state))
        } else {
            let latent = core(ddim_sample(&self.den, &self.sched, &x_t, &cond, self.sched.t_steps))?;
            (latent, None)
        };
        let image = core(self.codec.decode(&latent))?;
        Ok(GenOutput {
            image,
            latent,
            pno: pno_state,
        })
    }
}

#[derive(Debug, Clone)]
pub struct GenSpec {
    pub prompt: String,
    pub reference: Option<Tensor<f32>>,
    pub mode: GenMode,
    pub alpha: f64,
    pub pno: bool,
    pub seed: u64,
}

pub struct GenOutput {
    pub image: Tensor<f32>,
    pub latent: Tensor<f32>,
    pub pno: Option<PnoState<f32>>,
}

/// Writes one generation (image, optional reference copy, manifest, traces)
/// under `dir` with the given file stem.
pub fn write_generation(
    dir: &Path,
    stem: &str,
    spec: &GenSpec,
    out: &GenOutput,
    config_hash: &str,
) -> CmdResult<()> {
    validation(std::fs::create_dir_all(dir).map_err(Into::into))?;
    let img_name = format!("{stem}.ppm");
    core(io::write_ppm(dir.join(&img_name), &out.image))?;
    core(io::write_vtf(dir.join(format!("{stem}.latent.vtf")), &out.latent))?;

    let mut entries = vec![
        ("name".to_string(), stem.to_string()),
        ("image".to_string(), img_name),
        ("mode".to_string(), spec.mode.as_str().to_string()),
        ("alpha".to_string(), spec.alpha.to_string()),
        ("seed".to_string(), spec.seed.to_string()),
        ("prompt".to_string(), spec.prompt.clone()),
        ("config_hash".to_string(), config_hash.to_string()),
        ("pno".to_string(), spec.pno.to_string()),
    ];
    if let Some(reference) = &spec.reference {
        let ref_name = format!("{stem}.ref.ppm");
        core(io::write_ppm(dir.join(&ref_name), reference))?;
        entries.push(("reference".to_string(), ref_name));
    } else {
        entries.push(("reference".to_string(), "none".to_string()));
    }
    if let Some(state) = &out.pno {
        validation(write_pno_trace(dir.join(format!("{stem}.pno.txt")), state).map_err(Into::into))?;
        core(io::write_vtf(dir.join(format!("{stem}.x_t.vtf")), &state.x_t))?;
        core(io::write_vtf(
            dir.join(format!("{stem}.t_final.vtf")),
            &state.t_final.tokens,
        ))?;
        entries.push(("pre_cos".to_string(), format!("{:.6}", state.pre_cos)));
        entries.push(("post_cos".to_string(), format!("{:.6}", state.post_cos)));
    }
    core(io::write_manifest(dir.join(format!("{stem}.manifest.txt")), &entries))?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn generate_cmd(
    cfg: &RunConfig,
    prompt: &str,
    reference: Option<&Path>,
    mode: GenMode,
    pno: bool,
    seed: u64,
    out: &Path,
    encoders_dir: &Path,
    denoiser_dir: &Path,
    aligner_dir: Option<&Path>,
) -> CmdResult<()> {
    validation(cfg.validate())?;
    let pipe = Pipeline::load(cfg, encoders_dir, denoiser_dir, aligner_dir)?;
    let reference = match reference {
        Some(p) => Some(core(io::read_ppm::<f32>(p))?),
        None => None,
    };
    let spec = GenSpec {
        prompt: prompt.to_string(),
        reference,
        mode,
        alpha: cfg.alpha,
        pno,
        seed,
    };
    let result = pipe.generate(&spec)?;
    write_generation(out, "image", &spec, &result, &cfg.hash())?;
    if let Some(state) = &result.pno {
        println!(
            "guide similarity {:.4} -> {:.4} over {} refinement steps",
            state.pre_cos,
            state.post_cos,
            state.loss_trace.len()
        );
    }
    println!("wrote {}", out.join("image.ppm").display());
    Ok(())
}

// ── evaluate ────────────────────────────────────────────────────────

/// Scans a run directory for generation manifests and computes per-mode
/// metric means.
pub fn evaluate_cmd(
    run_dir: &Path,
    encoders_dir: &Path,
    out_file: &Path,
    force: bool,
) -> CmdResult<()> {
    let enc = load_encoders(encoders_dir)?;
    let vocab = Vocab::closed();

    let mut manifests: Vec<PathBuf> = Vec::new();
    let rd = validation(std::fs::read_dir(run_dir).map_err(|e| {
        anyhow!("cannot read run dir {}: {e}", run_dir.display())
    }))?;
    for entry in rd.flatten() {
        let p = entry.path();
        if p.file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.ends_with(".manifest.txt"))
        {
            manifests.push(p);
        }
    }
    manifests.sort();
    if manifests.is_empty() {
        return Err(CmdError::Validation(anyhow!(
            "no generation manifests in {}",
            run_dir.display()
        )));
    }

    let mut hashes: Vec<String> = Vec::new();
    // (name, mode, image, prompt ids, reference)
    type ScanItem = (String, String, Tensor<f32>, Vec<usize>, Option<Tensor<f32>>);
    let mut items: Vec<ScanItem> = Vec::new();
    for mp in &manifests {
        let man = core(io::read_manifest(mp))?;
        let get = |k: &str| -> CmdResult<String> {
            io::manifest_get(&man, k)
                .map(str::to_string)
                .ok_or_else(|| CmdError::Validation(anyhow!("{} missing key {k}", mp.display())))
        };
        let name = get("name")?;
        let mode = get("mode")?;
        let hash = get("config_hash")?;
        if !hashes.contains(&hash) {
            hashes.push(hash);
        }
        let image = core(io::read_ppm::<f32>(run_dir.join(get("image")?)))?;
        let ids = core(vocab.encode(&get("prompt")?))?;
        let reference = match get("reference")?.as_str() {
            "none" => None,
            rf => Some(core(io::read_ppm::<f32>(run_dir.join(rf)))?),
        };
        items.push((name, mode, image, ids, reference));
    }
    if hashes.len() > 1 && !force {
        return Err(CmdError::Validation(anyhow!(
            "run dir mixes config hashes {hashes:?}; pass --force to evaluate anyway"
        )));
    }

    let mut modes: Vec<String> = items.iter().map(|(_, m, ..)| m.clone()).collect();
    modes.sort();
    modes.dedup();

    let mut report = String::new();
    report.push_str(&format!("config_hash = {}\n", hashes.join("+")));
    let mut mode_reports: Vec<(String, MetricReport)> = Vec::new();
    for mode in &modes {
        let triples: Vec<EvalItem<f32>> = items
            .iter()
            .filter(|(_, m, _, _, r)| m == mode && r.is_some())
            .map(|(n, _, img, ids, r)| (n.clone(), img.clone(), ids.clone(), r.clone().unwrap()))
            .collect();
        if triples.is_empty() {
            continue;
        }
        let rep = core(evaluate_run(&enc, &triples, hashes.join("+")))?;
        report.push_str(&format!(
            "mode {mode} samples {} mean_clip {:.6} mean_lpips {:.6}\n",
            rep.per_sample.len(),
            rep.clip_mean,
            rep.lpips_mean
        ));
        mode_reports.push((mode.clone(), rep));
    }
    report.push('\n');
    for (mode, rep) in &mode_reports {
        for m in &rep.per_sample {
            report.push_str(&format!(
                "sample {mode} {} clip {:.6} lpips {:.6}\n",
                m.name, m.clip, m.lpips
            ));
        }
    }
    validation(std::fs::write(out_file, &report).map_err(Into::into))?;
    print!("{report}");
    Ok(())
}

// ── selfcheck ───────────────────────────────────────────────────────

pub fn selfcheck_cmd() -> CmdResult<()> {
    let start = Instant::now();
    let outcomes = core(refdiff_core::selfcheck::run_all())?;
    let mut failures = 0usize;
    for c in &outcomes {
        println!(
            "{} {} - {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
        if !c.passed {
            failures += 1;
        }
    }
    let elapsed = start.elapsed();
    println!(
        "{} checks, {} failed, {:.1}s",
        outcomes.len(),
        failures,
        elapsed.as_secs_f64()
    );
    if failures > 0 {
        return Err(CmdError::Numerical(anyhow!("{failures} self-checks failed")));
    }
    Ok(())
}

// ── reproduce ───────────────────────────────────────────────────────

pub struct ReproduceArgs {
    pub out: PathBuf,
    pub pairs: usize,
    pub gen_seeds: usize,
}

/// End-to-end chain: data, three trainers, the four-mode generation grid,
/// evaluation, and the final comparison table.
pub fn reproduce_cmd(cfg: &RunConfig, args: &ReproduceArgs) -> CmdResult<()> {
    validation(cfg.validate())?;
    let out = &args.out;
    validation(std::fs::create_dir_all(out).map_err(Into::into))?;
    core(io::write_manifest(out.join("config.txt"), &cfg.dump()))?;

    println!("[1/6] dataset");
    gen_data(cfg, &out.join("data"))?;
    println!("[2/6] encoders");
    train(
        cfg,
        &TrainArgs {
            target: TrainTarget::Encoders,
            data_dir: &out.join("data"),
            encoders_dir: None,
            out: &out.join("encoders"),
            loss: LossMode::Both,
        },
    )?;
    println!("[3/6] denoiser");
    train(
        cfg,
        &TrainArgs {
            target: TrainTarget::Denoiser,
            data_dir: &out.join("data"),
            encoders_dir: Some(&out.join("encoders")),
            out: &out.join("denoiser"),
            loss: LossMode::Both,
        },
    )?;
    println!("[4/6] aligner");
    train(
        cfg,
        &TrainArgs {
            target: TrainTarget::Aligner,
            data_dir: &out.join("data"),
            encoders_dir: Some(&out.join("encoders")),
            out: &out.join("aligner"),
            loss: LossMode::Both,
        },
    )?;

    println!("[5/6] generation grid");
    let data = load_dataset(&out.join("data"))?;
    let pipe = Pipeline::load(
        cfg,
        &out.join("encoders"),
        &out.join("denoiser"),
        Some(&out.join("aligner")),
    )?;
    let run_dir = out.join("runs").join("main");
    let pairs = eval_pairs(&data, args.pairs);
    let modes = [
        GenMode::Text,
        GenMode::Fusion(FusionStrategy::Naive),
        GenMode::Fusion(FusionStrategy::Concat),
        GenMode::Fusion(FusionStrategy::CrossAttn),
    ];
    let mut specs: Vec<(String, GenSpec)> = Vec::new();
    for (pi, (prompt_idx, ref_idx)) in pairs.iter().enumerate() {
        let prompt = data.samples[*prompt_idx].captions[0].clone();
        let reference = data.samples[*ref_idx].image.clone();
        for gs in 0..args.gen_seeds {
            let seed = cfg
                .seed
                .wrapping_mul(0x9e37)
                .wrapping_add((pi * 1009 + gs) as u64);
            for mode in modes {
                let stem = format!("{}_{pi:03}_{gs}", mode.as_str());
                specs.push((
                    stem,
                    GenSpec {
                        prompt: prompt.clone(),
                        reference: Some(reference.clone()),
                        mode,
                        alpha: cfg.alpha,
                        pno: false,
                        seed,
                    },
                ));
            }
        }
    }
    // independent generations fan out; outputs are written in index order
    let results: Vec<CmdResult<(String, GenSpec, GenOutput)>> = specs
        .into_par_iter()
        .map(|(stem, spec)| pipe.generate(&spec).map(|r| (stem, spec, r)))
        .collect();
    let hash = cfg.hash();
    for r in results {
        let (stem, spec, genout) = r?;
        write_generation(&run_dir, &stem, &spec, &genout, &hash)?;
    }

    println!("[6/6] evaluation");
    evaluate_cmd(&run_dir, &out.join("encoders"), &out.join("report.txt"), false)?;
    println!("report at {}", out.join("report.txt").display());
    Ok(())
}

/// Deterministic (prompt, reference) pairs over the test split, reference
/// always a different sample.
pub fn eval_pairs(data: &Dataset<f32>, pairs: usize) -> Vec<(usize, usize)> {
    let test = &data.split.test;
    let n = test.len();
    (0..pairs.min(n))
        .map(|i| (test[i], test[(i + n / 2) % n]))
        .collect()
}
