//! Single entry-point command-line tool: train, synth, prompt-synth, eval,
//! gradcheck, inspect-weighting, predict-duration and ablation presets.

use crate::conditioning::{self, ToyTextEncoder, TranscriptEncoding};
use crate::diffusion::{loss_weight, symmetric_weight, v_weighting_reference, WeightingConfig, WeightingKind};
use crate::sampler::{synthesize, synthesize_prompted, SamplerConfig, SamplerKind, SynthesisSetup};
use crate::seq::LatentSequence;
use crate::tensor::Tensor;
use crate::toy::{self, transcript_error_rate, Corpus, CorpusSpec, ToyCodec, ToyUtterance};
use crate::training::{metrics_to_csv, TrainConfig, TrainState, Trainer};
use crate::uat::{UATConfig, UatModel};
use crate::{Error, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Whole-run configuration tree mirrored by the TOML config file.
#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: UATConfig,
    pub corpus: CorpusSpec,
}

pub fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::User(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Error::User(format!("config error: {e}")))
        }
    }
}

/// Content hash tying outputs to the code version and exact configuration.
pub fn manifest_hash(cfg: &RunConfig) -> String {
    let mut h = Sha256::new();
    h.update(env!("CARGO_PKG_VERSION").as_bytes());
    h.update(serde_json::to_vec(cfg).unwrap_or_default());
    crate::params::hex_string(&h.finalize()[..16])
}

/// Every artifact directory carries the manifest that produced it.
pub fn write_manifest(dir: &Path, cfg: &RunConfig, outputs: &[String]) -> Result<()> {
    let manifest = serde_json::json!({
        "tool": "sesd",
        "version": env!("CARGO_PKG_VERSION"),
        "content_hash": manifest_hash(cfg),
        "config": serde_json::to_value(cfg).map_err(|e| Error::Internal(e.to_string()))?,
        "outputs": outputs,
    });
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Internal(e.to_string()))?,
    )?;
    Ok(())
}

/// Renders the corpus, caching it under a directory keyed by the corpus
/// spec hash.
pub fn cached_corpus(cache_root: &Path, spec: &CorpusSpec) -> Result<Corpus> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(spec).map_err(|e| Error::Internal(e.to_string()))?);
    let key = crate::params::hex_string(&h.finalize()[..8]);
    let dir = cache_root.join(format!("corpus-{key}"));
    if dir.join("manifest.txt").exists() {
        return toy::read_corpus(&dir);
    }
    let corpus = toy::generate_corpus(spec)?;
    std::fs::create_dir_all(&dir)?;
    toy::write_corpus(&dir, &corpus)?;
    Ok(corpus)
}

fn env_seed() -> Option<u64> {
    std::env::var("SESD_SEED").ok().and_then(|s| s.parse().ok())
}

#[derive(Parser, Debug)]
#[command(
    name = "sesd",
    about = "Latent-diffusion text-to-speech sandbox with an exact oracle codec",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct SamplerArgs {
    /// Sampler kind
    #[arg(long, value_parser = parse_sampler, default_value = "ddpm")]
    sampler: SamplerKind,
    /// Reverse-process steps
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Classifier-free guidance weight
    #[arg(long, default_value_t = 5.0)]
    guidance: f64,
    /// Sampling seed (falls back to SESD_SEED, then 0)
    #[arg(long)]
    seed: Option<u64>,
}

impl SamplerArgs {
    fn config(&self) -> SamplerConfig {
        SamplerConfig {
            kind: self.sampler,
            steps: self.steps,
            guidance_w: self.guidance,
            seed: self.seed.or_else(env_seed).unwrap_or(0),
        }
    }
}

fn parse_sampler(s: &str) -> std::result::Result<SamplerKind, String> {
    match s {
        "ddpm" => Ok(SamplerKind::Ddpm),
        "ddim" => Ok(SamplerKind::Ddim),
        other => Err(format!("unknown sampler {other:?} (expected ddpm or ddim)")),
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on the synthetic corpus
    Train {
        /// TOML config file; defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the number of training steps
        #[arg(long)]
        steps: Option<usize>,
        /// Override the batch size
        #[arg(long)]
        batch_size: Option<usize>,
        /// Override the training seed (falls back to SESD_SEED)
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (0 = all cores)
        #[arg(long)]
        threads: Option<usize>,
        /// Output directory
        #[arg(long, default_value = "runs/train")]
        out_dir: PathBuf,
    },
    /// Synthesize latents from a transcript
    Synth {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        transcript: String,
        /// Frame count; sampled from the duration model when omitted
        #[arg(long)]
        duration: Option<usize>,
        /// Text encoder: `toy` or `external:<dir>`
        #[arg(long, default_value = "toy")]
        text_encoder: String,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long, default_value = "runs/synth")]
        out_dir: PathBuf,
    },
    /// Speaker-prompted synthesis continuing a clean prompt
    PromptSynth {
        #[arg(long)]
        ckpt: PathBuf,
        /// Transcript of the continuation
        #[arg(long)]
        transcript: String,
        /// SESD-EMB-1 file holding the prompt latents
        #[arg(long)]
        prompt_latents: PathBuf,
        /// Transcript matching the prompt latents
        #[arg(long)]
        prompt_transcript: String,
        #[arg(long)]
        duration: Option<usize>,
        #[arg(long, default_value = "toy")]
        text_encoder: String,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long, default_value = "runs/prompt-synth")]
        out_dir: PathBuf,
    },
    /// Evaluate a checkpoint on the held-out split with the oracle decoder
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// `text` or `prompted`
        #[arg(long, default_value = "text")]
        mode: String,
        /// Cap on evaluated utterances (0 = all)
        #[arg(long, default_value_t = 0)]
        limit: usize,
        #[command(flatten)]
        sampler: SamplerArgs,
        /// CSV output path (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient verification of every layer and the tiny
    /// full network
    Gradcheck,
    /// Emit the loss weighting curves over a log-SNR grid as CSV
    InspectWeighting {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample utterance durations for a transcript
    PredictDuration {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        transcript: String,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train matched-seed ablation variants and emit a comparison CSV
    Ablate {
        /// One of: no-position-keys, v-weighting, symmetric-weighting,
        /// no-registers
        #[arg(long)]
        preset: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Ablation-regime training steps
        #[arg(long, default_value_t = 4000)]
        steps: usize,
        /// Utterances used for the TER comparison
        #[arg(long, default_value_t = 64)]
        eval_limit: usize,
        #[arg(long, default_value = "runs/ablate")]
        out_dir: PathBuf,
    },
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help/version requests are successes; everything else is a
            // user error (exit 1 by contract)
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, steps, batch_size, seed, threads, out_dir } => {
            let mut cfg = load_run_config(config.as_deref())?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            if let Some(s) = seed.or_else(env_seed) {
                cfg.train.seed = s;
            }
            if let Some(t) = threads {
                cfg.train.threads = t;
            }
            cmd_train(&cfg, &out_dir).map(|_| ())
        }
        Command::Synth { ckpt, transcript, duration, text_encoder, sampler, out_dir } => {
            cmd_synth(&ckpt, &transcript, duration, &text_encoder, &sampler.config(), &out_dir)
        }
        Command::PromptSynth {
            ckpt,
            transcript,
            prompt_latents,
            prompt_transcript,
            duration,
            text_encoder,
            sampler,
            out_dir,
        } => cmd_prompt_synth(
            &ckpt,
            &transcript,
            &prompt_latents,
            &prompt_transcript,
            duration,
            &text_encoder,
            &sampler.config(),
            &out_dir,
        ),
        Command::Eval { ckpt, mode, limit, sampler, out } => {
            let report = cmd_eval(&ckpt, &mode, limit, &sampler.config())?;
            let csv = report.to_csv();
            match out {
                Some(p) => std::fs::write(p, csv)?,
                None => print!("{csv}"),
            }
            Ok(())
        }
        Command::Gradcheck => cmd_gradcheck(),
        Command::InspectWeighting { out } => {
            let csv = weighting_csv();
            match out {
                Some(p) => std::fs::write(p, csv)?,
                None => print!("{csv}"),
            }
            Ok(())
        }
        Command::PredictDuration { config, transcript, n, seed } => {
            let cfg = load_run_config(config.as_deref())?;
            let samples = cmd_predict_duration(&cfg, &transcript, n, seed.or_else(env_seed).unwrap_or(0))?;
            for s in samples {
                println!("{s}");
            }
            Ok(())
        }
        Command::Ablate { preset, config, steps, eval_limit, out_dir } => {
            let cfg = load_run_config(config.as_deref())?;
            let rows = cmd_ablate(&cfg, &preset, steps, eval_limit, &out_dir)?;
            print!("{}", ablation_csv(&rows));
            Ok(())
        }
    }
}

/// Trains a model and writes checkpoint, metrics CSV and run manifest into
/// `out_dir`. Returns the checkpoint path.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir)?;
    let corpus = cached_corpus(out_dir, &cfg.corpus)?;
    let encoder = ToyTextEncoder::new(cfg.model.d_text, 256, cfg.corpus.codec.seed);
    let mut state = TrainState::new(cfg.train.clone(), cfg.model.clone())?;
    state.extra_meta = serde_json::json!({ "run_config": serde_json::to_value(cfg).map_err(|e| Error::Internal(e.to_string()))? });
    let mut trainer = Trainer::new(state, corpus.train.clone(), &encoder)?;
    let mut metrics = Vec::new();
    let total = cfg.train.steps;
    trainer.run(total, &mut metrics)?;
    let ckpt = out_dir.join("model.ckpt");
    trainer.state.save(&ckpt)?;
    std::fs::write(out_dir.join("metrics.csv"), metrics_to_csv(&metrics))?;
    write_manifest(
        out_dir,
        cfg,
        &["model.ckpt".into(), "metrics.csv".into()],
    )?;
    Ok(ckpt)
}

/// Loads a checkpoint and rebuilds everything evaluation needs.
pub struct LoadedModel {
    pub state: TrainState,
    pub run_config: RunConfig,
}

pub fn load_model(ckpt: &Path) -> Result<LoadedModel> {
    let state = TrainState::load(ckpt)?;
    let run_config: RunConfig = serde_json::from_value(
        state.extra_meta.get("run_config").cloned().unwrap_or(serde_json::Value::Null),
    )
    .unwrap_or_default();
    Ok(LoadedModel { state, run_config })
}

fn build_encoding(
    text_encoder: &str,
    d_text: usize,
    codec_seed: u64,
    transcript: &str,
) -> Result<TranscriptEncoding> {
    if text_encoder == "toy" {
        return ToyTextEncoder::new(d_text, 256, codec_seed).encode(transcript);
    }
    if let Some(dir) = text_encoder.strip_prefix("external:") {
        let file = Path::new(dir).join(conditioning::external_embedding_filename(transcript));
        return conditioning::load_external(&file, transcript);
    }
    Err(Error::User(format!(
        "unknown text encoder {text_encoder:?} (expected `toy` or `external:<dir>`)"
    )))
}

fn write_generation(
    out_dir: &Path,
    latents: &LatentSequence,
    transcript: &str,
    cfg: &SamplerConfig,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    conditioning::write_embedding(&out_dir.join("gen.emb"), &latents.frames)?;
    let mut meta = std::fs::File::create(out_dir.join("gen.txt"))?;
    writeln!(meta, "transcript: {transcript}")?;
    writeln!(meta, "seed: {}", cfg.seed)?;
    writeln!(meta, "steps: {}", cfg.steps)?;
    writeln!(meta, "guidance_w: {}", cfg.guidance_w)?;
    writeln!(
        meta,
        "sampler: {}",
        match cfg.kind {
            SamplerKind::Ddpm => "ddpm",
            SamplerKind::Ddim => "ddim",
        }
    )?;
    Ok(())
}

pub fn cmd_synth(
    ckpt: &Path,
    transcript: &str,
    duration: Option<usize>,
    text_encoder: &str,
    sampler_cfg: &SamplerConfig,
    out_dir: &Path,
) -> Result<()> {
    let loaded = load_model(ckpt)?;
    let state = &loaded.state;
    let ema = state.ema_store();
    let model = UatModel { cfg: &state.uat_cfg, store: &ema };
    let setup = SynthesisSetup {
        model: &model,
        schedule: &state.schedule,
        latent_dim: state.uat_cfg.latent_dim,
        max_frames: state.uat_cfg.max_frames,
        frame_multiple: state.uat_cfg.downsample_factor(),
    };
    let enc = build_encoding(text_encoder, state.uat_cfg.d_text, loaded.run_config.corpus.codec.seed, transcript)?;
    let frames = match duration {
        Some(f) => f,
        None => {
            let corpus = cached_corpus(out_dir, &loaded.run_config.corpus)?;
            let dm = crate::duration::fit(
                &corpus.train,
                state.uat_cfg.max_frames,
                loaded.run_config.corpus.codec.duration_lo,
            )?;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(sampler_cfg.seed);
            dm.sample(transcript, &mut rng)?
        }
    };
    let latents = synthesize(&setup, &enc, frames, sampler_cfg)?;
    write_generation(out_dir, &latents, transcript, sampler_cfg)?;
    write_manifest(out_dir, &loaded.run_config, &["gen.emb".into(), "gen.txt".into()])?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_prompt_synth(
    ckpt: &Path,
    transcript: &str,
    prompt_latents: &Path,
    prompt_transcript: &str,
    duration: Option<usize>,
    text_encoder: &str,
    sampler_cfg: &SamplerConfig,
    out_dir: &Path,
) -> Result<()> {
    let loaded = load_model(ckpt)?;
    let state = &loaded.state;
    let ema = state.ema_store();
    let model = UatModel { cfg: &state.uat_cfg, store: &ema };
    let setup = SynthesisSetup {
        model: &model,
        schedule: &state.schedule,
        latent_dim: state.uat_cfg.latent_dim,
        max_frames: state.uat_cfg.max_frames,
        frame_multiple: state.uat_cfg.downsample_factor(),
    };
    let prompt_frames = conditioning::read_embedding(prompt_latents)?;
    let prompt = LatentSequence::clean(prompt_frames)?;
    let joint = format!("{prompt_transcript}{transcript}");
    let enc = build_encoding(text_encoder, state.uat_cfg.d_text, loaded.run_config.corpus.codec.seed, &joint)?;
    let target_frames = match duration {
        Some(f) => f,
        None => {
            let corpus = cached_corpus(out_dir, &loaded.run_config.corpus)?;
            let dm = crate::duration::fit(
                &corpus.train,
                state.uat_cfg.max_frames,
                loaded.run_config.corpus.codec.duration_lo,
            )?;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(sampler_cfg.seed);
            dm.sample(transcript, &mut rng)?
        }
    };
    let total = (prompt.num_frames() + target_frames).min(state.uat_cfg.max_frames);
    let latents = synthesize_prompted(&setup, &enc, &prompt, total, sampler_cfg)?;
    write_generation(out_dir, &latents, &joint, sampler_cfg)?;
    write_manifest(out_dir, &loaded.run_config, &["gen.emb".into(), "gen.txt".into()])?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub id: String,
    pub ter: f64,
    pub speaker_sim: Option<f64>,
    pub mismatch_sim: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub mode: String,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn mean_ter(&self) -> f64 {
        if self.rows.is_empty() {
            return f64::NAN;
        }
        self.rows.iter().map(|r| r.ter).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_speaker_sim(&self) -> Option<f64> {
        let sims: Vec<f64> = self.rows.iter().filter_map(|r| r.speaker_sim).collect();
        if sims.is_empty() {
            None
        } else {
            Some(sims.iter().sum::<f64>() / sims.len() as f64)
        }
    }

    pub fn mean_mismatch_sim(&self) -> Option<f64> {
        let sims: Vec<f64> = self.rows.iter().filter_map(|r| r.mismatch_sim).collect();
        if sims.is_empty() {
            None
        } else {
            Some(sims.iter().sum::<f64>() / sims.len() as f64)
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        if self.mode == "prompted" {
            out.push_str("id,ter,speaker_sim,mismatch_sim\n");
            for r in &self.rows {
                out.push_str(&format!(
                    "{},{:.6},{:.6},{:.6}\n",
                    r.id,
                    r.ter,
                    r.speaker_sim.unwrap_or(f64::NAN),
                    r.mismatch_sim.unwrap_or(f64::NAN)
                ));
            }
            out.push_str(&format!(
                "summary,{:.6},{:.6},{:.6}\n",
                self.mean_ter(),
                self.mean_speaker_sim().unwrap_or(f64::NAN),
                self.mean_mismatch_sim().unwrap_or(f64::NAN)
            ));
        } else {
            out.push_str("id,ter\n");
            for r in &self.rows {
                out.push_str(&format!("{},{:.6}\n", r.id, r.ter));
            }
            out.push_str(&format!("summary,{:.6}\n", self.mean_ter()));
        }
        out
    }
}

/// Longest symbol-boundary prefix of an utterance within a frame budget
/// (at least one symbol). Returns (transcript prefix, frame count).
pub fn prompt_prefix(u: &ToyUtterance, budget: usize) -> (String, usize) {
    let chars: Vec<char> = u.transcript.chars().collect();
    let mut frames = 0usize;
    let mut taken = 0usize;
    for (i, d) in u.durations.iter().enumerate() {
        if taken > 0 && frames + d > budget {
            break;
        }
        frames += d;
        taken = i + 1;
        if frames >= budget {
            break;
        }
    }
    (chars[..taken].iter().collect(), frames)
}

/// Evaluates a trained state on the held-out split; used both by the CLI
/// and the acceptance suite.
pub fn evaluate(
    state: &TrainState,
    corpus: &Corpus,
    mode: &str,
    limit: usize,
    sampler_cfg: &SamplerConfig,
) -> Result<EvalReport> {
    let codec = ToyCodec::build(corpus.spec.codec.clone())?;
    let encoder = ToyTextEncoder::new(state.uat_cfg.d_text, 256, corpus.spec.codec.seed);
    let dm = crate::duration::fit(&corpus.train, state.uat_cfg.max_frames, corpus.spec.codec.duration_lo)?;
    let ema = state.ema_store();
    let model = UatModel { cfg: &state.uat_cfg, store: &ema };
    let setup = SynthesisSetup {
        model: &model,
        schedule: &state.schedule,
        latent_dim: state.uat_cfg.latent_dim,
        max_frames: state.uat_cfg.max_frames,
        frame_multiple: state.uat_cfg.downsample_factor(),
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
        .build()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;

    match mode {
        "text" => {
            let subset: Vec<&ToyUtterance> = corpus
                .eval
                .iter()
                .take(if limit == 0 { usize::MAX } else { limit })
                .collect();
            let rows: Vec<Result<EvalRow>> = pool.install(|| {
                use rayon::prelude::*;
                subset
                    .par_iter()
                    .map(|u| {
                        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(crate::params::name_seed(
                            sampler_cfg.seed,
                            &u.id,
                        ));
                        let frames = dm.sample(&u.transcript, &mut rng)?;
                        let enc = encoder.encode(&u.transcript)?;
                        let mut cfg = *sampler_cfg;
                        cfg.seed = crate::params::name_seed(sampler_cfg.seed, &format!("synth.{}", u.id));
                        let gen = synthesize(&setup, &enc, frames, &cfg)?;
                        let hyp = codec.oracle_decode(&gen.frames)?;
                        Ok(EvalRow {
                            id: u.id.clone(),
                            ter: transcript_error_rate(&u.transcript, &hyp),
                            speaker_sim: None,
                            mismatch_sim: None,
                        })
                    })
                    .collect()
            });
            Ok(EvalReport { mode: mode.into(), rows: rows.into_iter().collect::<Result<_>>()? })
        }
        "prompted" => {
            // held-in speakers only, prompts from another utterance of the
            // same speaker
            let held_in: Vec<&ToyUtterance> = corpus
                .eval
                .iter()
                .filter(|u| u.speaker_id < corpus.spec.train_speakers)
                .collect();
            let mut pairs = Vec::new();
            for (i, target) in held_in.iter().enumerate() {
                if let Some(prompt_src) = held_in
                    .iter()
                    .cycle()
                    .skip(i + 1)
                    .take(held_in.len())
                    .find(|p| p.speaker_id == target.speaker_id && p.id != target.id)
                {
                    // a control utterance from a different speaker
                    let control = held_in.iter().find(|c| c.speaker_id != target.speaker_id);
                    pairs.push((*target, *prompt_src, control.copied()));
                }
                if limit > 0 && pairs.len() >= limit {
                    break;
                }
            }
            let rows: Vec<Result<EvalRow>> = pool.install(|| {
                use rayon::prelude::*;
                pairs
                    .par_iter()
                    .map(|(target, prompt_src, control)| {
                        let (prompt_text, prompt_frames) = prompt_prefix(prompt_src, 16);
                        let prompt = prompt_src.latents.prefix(prompt_frames)?;
                        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(crate::params::name_seed(
                            sampler_cfg.seed,
                            &target.id,
                        ));
                        let want = dm.sample(&target.transcript, &mut rng)?;
                        let max_total = state.uat_cfg.max_frames;
                        let target_frames = want.min(max_total - prompt_frames);
                        let joint = format!("{prompt_text}{}", target.transcript);
                        let enc = encoder.encode(&joint)?;
                        let mut cfg = *sampler_cfg;
                        cfg.seed =
                            crate::params::name_seed(sampler_cfg.seed, &format!("prompt.{}", target.id));
                        let gen = synthesize_prompted(
                            &setup,
                            &enc,
                            &prompt,
                            prompt_frames + target_frames,
                            &cfg,
                        )?;
                        // prompt frames must come back bitwise
                        for f in 0..prompt_frames {
                            if gen.frames.row(f) != prompt.frames.row(f) {
                                return Err(Error::Internal(format!(
                                    "prompt frame {f} not preserved for {}",
                                    target.id
                                )));
                            }
                        }
                        let continuation = gen.suffix(prompt_frames)?;
                        let hyp = codec.oracle_decode(&continuation.frames)?;
                        let sim = codec.oracle_speaker_similarity(&continuation, &prompt)?;
                        let mismatch = control
                            .map(|c| codec.oracle_speaker_similarity(&continuation, &c.latents))
                            .transpose()?;
                        Ok(EvalRow {
                            id: target.id.clone(),
                            ter: transcript_error_rate(&target.transcript, &hyp),
                            speaker_sim: Some(sim),
                            mismatch_sim: mismatch,
                        })
                    })
                    .collect()
            });
            Ok(EvalReport { mode: mode.into(), rows: rows.into_iter().collect::<Result<_>>()? })
        }
        other => Err(Error::User(format!("unknown eval mode {other:?} (expected text or prompted)"))),
    }
}

pub fn cmd_eval(ckpt: &Path, mode: &str, limit: usize, sampler_cfg: &SamplerConfig) -> Result<EvalReport> {
    let loaded = load_model(ckpt)?;
    let cache = ckpt.parent().unwrap_or(Path::new("."));
    let corpus = cached_corpus(cache, &loaded.run_config.corpus)?;
    evaluate(&loaded.state, &corpus, mode, limit, sampler_cfg)
}

pub fn weighting_csv() -> String {
    let cfg = WeightingConfig::default();
    let mut out = String::from("lambda,weight,config_name\n");
    let mut lam = -12.0f64;
    while lam <= 8.0 + 1e-9 {
        let rows = [
            (loss_weight(&cfg, lam).unwrap(), "asymmetric"),
            (symmetric_weight(&cfg, lam).unwrap(), "symmetric"),
            (v_weighting_reference(lam).unwrap(), "v-weighting"),
        ];
        for (w, name) in rows {
            out.push_str(&format!("{lam:.2},{w:.10},{name}\n"));
        }
        lam += 0.05;
    }
    out
}

pub fn cmd_predict_duration(cfg: &RunConfig, transcript: &str, n: usize, seed: u64) -> Result<Vec<usize>> {
    let dir = std::env::temp_dir().join("sesd-duration-cache");
    std::fs::create_dir_all(&dir)?;
    let corpus = cached_corpus(&dir, &cfg.corpus)?;
    let dm = crate::duration::fit(&corpus.train, cfg.model.max_frames, cfg.corpus.codec.duration_lo)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| dm.sample(transcript, &mut rng)).collect()
}

/// Finite-difference verification battery: representative layer stacks
/// plus the tiny full network. Returns `(name, max_rel_err, tolerance)`.
pub fn gradcheck_battery() -> Result<Vec<(String, f64, f64)>> {
    use crate::params::{Init, ParamSpec, ParameterStore};
    use crate::tape::grad_check;
    use crate::tensor::Dtype;

    let mut out: Vec<(String, f64, f64)> = Vec::new();
    let store = ParameterStore::from_specs(
        &[
            ParamSpec::new("w", &[6, 4], Init::TruncNormal { std: 0.5 }, true),
            ParamSpec::new("b", &[4], Init::TruncNormal { std: 0.5 }, false),
            ParamSpec::new("x", &[3, 6], Init::TruncNormal { std: 0.5 }, true),
            ParamSpec::new("g", &[4], Init::TruncNormal { std: 0.5 }, false),
            ParamSpec::new("gb", &[4], Init::TruncNormal { std: 0.5 }, false),
            ParamSpec::new("cw", &[3, 4, 4], Init::TruncNormal { std: 0.5 }, true),
            ParamSpec::new("cb", &[4], Init::TruncNormal { std: 0.5 }, false),
            ParamSpec::new("emb", &[5, 4], Init::TruncNormal { std: 0.5 }, false),
        ],
        99,
        Dtype::Double,
    )?;
    let tol = 1e-4;
    out.push((
        "linear+gelu".into(),
        grad_check(&store, 48, 1, |tape, s| {
            let x = tape.param(s, "x")?;
            let w = tape.param(s, "w")?;
            let b = tape.param(s, "b")?;
            let y = tape.linear(x, w, b);
            let a = tape.gelu(y);
            let sq = tape.mul(a, a);
            Ok(tape.sum_all(sq))
        })?
        .max_rel_err(),
        tol,
    ));
    out.push((
        "layernorm".into(),
        grad_check(&store, 48, 2, |tape, s| {
            let x = tape.param(s, "x")?;
            let w = tape.param(s, "w")?;
            let b = tape.param(s, "b")?;
            let y = tape.linear(x, w, b);
            let g = tape.param(s, "g")?;
            let gb = tape.param(s, "gb")?;
            let n = tape.layer_norm(y, g, gb);
            let sq = tape.mul(n, n);
            Ok(tape.sum_all(sq))
        })?
        .max_rel_err(),
        tol,
    ));
    out.push((
        "conv1d+resample".into(),
        grad_check(&store, 48, 3, |tape, s| {
            let x = tape.param(s, "x")?;
            let w = tape.param(s, "w")?;
            let b = tape.param(s, "b")?;
            let h = tape.linear(x, w, b);
            let cw = tape.param(s, "cw")?;
            let cb = tape.param(s, "cb")?;
            let c = tape.conv1d(h, cw, cb, 1, 1);
            let up = tape.upsample_nearest2(c);
            let down = tape.conv1d(up, cw, cb, 2, 1);
            let sq = tape.mul(down, down);
            Ok(tape.sum_all(sq))
        })?
        .max_rel_err(),
        tol,
    ));
    out.push((
        "softmax-attention".into(),
        grad_check(&store, 48, 4, |tape, s| {
            let x = tape.param(s, "x")?;
            let w = tape.param(s, "w")?;
            let b = tape.param(s, "b")?;
            let h = tape.linear(x, w, b);
            let qh = tape.split_heads(h, 2);
            let logits = tape.matmul_bt(qh, qh);
            let probs = tape.softmax_masked(logits, Some(&[0.0, 0.0, crate::tape::MASK_NEG]));
            let ctx = tape.matmul(probs, qh);
            let m = tape.merge_heads(ctx);
            let sq = tape.mul(m, m);
            Ok(tape.sum_all(sq))
        })?
        .max_rel_err(),
        tol,
    ));
    out.push((
        "embedding+dpb-bias".into(),
        grad_check(&store, 48, 5, |tape, s| {
            let emb = tape.param(s, "emb")?;
            let rows = tape.embed(emb, &[0, 2, 4, 1]);
            let off = tape.slice_rows(rows, 0, 3); // [3, 4] offsets-ish
            let g = tape.param(s, "g")?;
            let bias = tape.assemble_attn_bias(off, g, 2, 1);
            let sq = tape.mul(bias, bias);
            Ok(tape.sum_all(sq))
        })?
        .max_rel_err(),
        tol,
    ));

    // full tiny network
    let cfg = UATConfig::tiny();
    let tiny_store = crate::uat::init_store(&cfg, 11, Dtype::Double)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
    let z = Tensor::randn(&[8, cfg.latent_dim], &mut rng, Dtype::Double);
    let enc = ToyTextEncoder::new(cfg.d_text, 256, 5).encode("abc")?;
    let target = Tensor::randn(&[8, cfg.latent_dim], &mut rng, Dtype::Double);
    let report = crate::tape::grad_check(&tiny_store, 3, 17, move |tape, s| {
        let req = crate::uat::DenoiseRequest {
            z: &z,
            alpha_t: 0.37,
            enc: &enc,
            valid: &[true; 8],
            corrupt: &[true; 8],
        };
        let v_hat = crate::uat::build_denoise(tape, s, &cfg, &req)?;
        Ok(tape.weighted_sq_sum(v_hat, &target, &[1.0; 8]))
    })?;
    out.push(("tiny full U-AT".into(), report.max_rel_err(), tol));
    Ok(out)
}

fn cmd_gradcheck() -> Result<()> {
    let mut failures = 0usize;
    for (name, err, tol) in gradcheck_battery()? {
        let ok = err <= tol;
        println!("{}: max rel err {:.3e} (tol {:.0e}) {}", name, err, tol, if ok { "PASS" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(Error::Internal(format!("{failures} gradient checks failed")));
    }
    Ok(())
}

pub struct AblationRow {
    pub preset: String,
    pub variant: String,
    pub steps: usize,
    pub ter: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("preset,variant,steps,ter\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{:.6}\n", r.preset, r.variant, r.steps, r.ter));
    }
    out
}

/// Applies an ablation preset to a run configuration. The training regime
/// drops dropout and weight decay for every ablation run.
pub fn apply_ablation_regime(cfg: &RunConfig, preset: Option<&str>, steps: usize) -> Result<RunConfig> {
    let mut out = cfg.clone();
    out.train.steps = steps;
    out.train.warmup = (steps / 20).max(1).min(1000);
    out.train.weight_decay = 0.0;
    out.model.dropout_p = 0.0;
    match preset {
        None => {}
        Some("no-position-keys") => out.model.position_keys = false,
        Some("v-weighting") => out.train.weighting = WeightingKind::VReference,
        Some("symmetric-weighting") => out.train.weighting = WeightingKind::Symmetric,
        Some("no-registers") => out.model.num_registers = 0,
        Some(other) => {
            return Err(Error::User(format!(
                "unknown ablation preset {other:?} (expected no-position-keys, v-weighting, symmetric-weighting or no-registers)"
            )))
        }
    }
    Ok(out)
}

/// Trains the full model and one ablated variant under the matched ablation
/// regime and evaluates both. The full-model run is cached by config hash.
pub fn cmd_ablate(
    cfg: &RunConfig,
    preset: &str,
    steps: usize,
    eval_limit: usize,
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    std::fs::create_dir_all(out_dir)?;
    let sampler_cfg = SamplerConfig { kind: SamplerKind::Ddpm, steps: 50, guidance_w: 5.0, seed: 17 };

    let run_one = |variant: Option<&str>| -> Result<f64> {
        let vcfg = apply_ablation_regime(cfg, variant, steps)?;
        let tag = variant.unwrap_or("full");
        let dir = out_dir.join(format!("{tag}-{}", manifest_hash(&vcfg)));
        let ckpt_path = dir.join("model.ckpt");
        let state = if ckpt_path.exists() {
            TrainState::load(&ckpt_path)?
        } else {
            let ckpt = cmd_train(&vcfg, &dir)?;
            TrainState::load(&ckpt)?
        };
        let corpus = cached_corpus(&dir, &vcfg.corpus)?;
        let report = evaluate(&state, &corpus, "text", eval_limit, &sampler_cfg)?;
        Ok(report.mean_ter())
    };

    let full_ter = run_one(None)?;
    let ablated_ter = run_one(Some(preset))?;
    let rows = vec![
        AblationRow { preset: preset.into(), variant: "full".into(), steps, ter: full_ter },
        AblationRow { preset: preset.into(), variant: preset.into(), steps, ter: ablated_ter },
    ];
    let csv = ablation_csv(&rows);
    std::fs::write(out_dir.join(format!("comparison-{preset}.csv")), &csv)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "[train]\nfoo = 3\n").unwrap();
        match load_run_config(Some(&path)) {
            Err(Error::User(msg)) => assert!(msg.contains("foo"), "message must name the key: {msg}"),
            other => panic!("expected user error, got {other:?}"),
        }
        let path2 = dir.path().join("ok.toml");
        std::fs::write(&path2, "[train]\nsteps = 12\nwarmup = 2\n[model]\nunet_dim = 32\n").unwrap();
        let cfg = load_run_config(Some(&path2)).unwrap();
        assert_eq!(cfg.train.steps, 12);
        assert_eq!(cfg.model.unet_dim, 32);
        assert_eq!(cfg.model.latent_dim, UATConfig::desk().latent_dim);
    }

    #[test]
    fn weighting_csv_has_golden_rows() {
        let csv = weighting_csv();
        assert!(csv.starts_with("lambda,weight,config_name\n"));
        assert!(csv.contains("-1.00,1.0000000000,asymmetric"));
        assert!(csv.contains(",v-weighting\n"));
        // grid covers [-12, 8] at 0.05: 401 points x 3 configs + header
        assert_eq!(csv.lines().count(), 401 * 3 + 1);
    }

    #[test]
    fn prompt_prefix_respects_symbol_boundaries() {
        let u = ToyUtterance {
            id: "x".into(),
            transcript: "abcd".into(),
            speaker_id: 0,
            durations: vec![5, 6, 4, 3],
            latents: LatentSequence::clean(Tensor::zeros(&[18, 2], crate::tensor::Dtype::Double)).unwrap(),
        };
        let (text, frames) = prompt_prefix(&u, 16);
        assert_eq!(text, "abc");
        assert_eq!(frames, 15);
        // tiny budget still yields one symbol
        let (text, frames) = prompt_prefix(&u, 2);
        assert_eq!(text, "a");
        assert_eq!(frames, 5);
    }

    #[test]
    fn ablation_presets_modify_the_right_knobs() {
        let base = RunConfig::default();
        let a = apply_ablation_regime(&base, Some("no-position-keys"), 100).unwrap();
        assert!(!a.model.position_keys);
        assert_eq!(a.model.dropout_p, 0.0);
        assert_eq!(a.train.weight_decay, 0.0);
        let b = apply_ablation_regime(&base, Some("v-weighting"), 100).unwrap();
        assert_eq!(b.train.weighting, WeightingKind::VReference);
        let c = apply_ablation_regime(&base, Some("no-registers"), 100).unwrap();
        assert_eq!(c.model.num_registers, 0);
        assert!(apply_ablation_regime(&base, Some("bogus"), 100).is_err());
    }

    #[test]
    fn manifest_hash_tracks_config() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.train.seed += 1;
        assert_ne!(manifest_hash(&a), manifest_hash(&b));
        assert_eq!(manifest_hash(&a), manifest_hash(&RunConfig::default()));
    }
}
