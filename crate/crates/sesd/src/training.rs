//! The training loop: timestep sampling (uniform or adaptive importance
//! sampling over log-SNR bins), multi-task inpainting batch construction,
//! text dropout, weighted v-loss with masking, AdamW, EMA and checkpointing.

use crate::checkpoint::{self, CheckpointData};
use crate::conditioning::{ToyTextEncoder, TranscriptEncoding};
use crate::diffusion::{NoiseSchedule, WeightingConfig, WeightingKind};
use crate::params::ParameterStore;
use crate::tape::Tape;
use crate::tensor::{Dtype, Tensor};
use crate::toy::ToyUtterance;
use crate::uat::{build_denoise, DenoiseRequest, UATConfig};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use std::collections::BTreeMap;
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TSamplerKind {
    Uniform,
    Adaptive,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub peak_lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub ema_momentum: f64,
    pub p_inpaint: f64,
    pub p_text_drop: f64,
    pub prompt_beta_mode: f64,
    pub prompt_beta_concentration: f64,
    pub t_sampler: TSamplerKind,
    pub weighting: WeightingKind,
    pub seed: u64,
    pub threads: usize,
    pub precision: Dtype,
    pub metrics_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            steps: 20_000,
            peak_lr: 2e-4,
            warmup: 1000,
            weight_decay: 2e-4,
            ema_momentum: 0.9999,
            p_inpaint: 0.5,
            p_text_drop: 0.1,
            prompt_beta_mode: 0.01,
            prompt_beta_concentration: 5.0,
            t_sampler: TSamplerKind::Adaptive,
            weighting: WeightingKind::Asymmetric,
            seed: 1234,
            threads: 0,
            precision: Dtype::Single,
            metrics_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_inpaint", self.p_inpaint),
            ("p_text_drop", self.p_text_drop),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::User(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::User("batch_size and steps must be positive".into()));
        }
        if self.warmup >= self.steps {
            return Err(Error::User("warmup must be shorter than the run".into()));
        }
        Ok(())
    }
}

/// Mode/concentration parameterization of the Beta distribution:
/// `alpha = mode*(k-2)+1`, `beta = (1-mode)*(k-2)+1`.
pub fn beta_params(mode: f64, concentration: f64) -> (f64, f64) {
    (mode * (concentration - 2.0) + 1.0, (1.0 - mode) * (concentration - 2.0) + 1.0)
}

/// Learning rate at `step`: linear warmup to `peak`, then cosine decay to
/// zero at `total`.
pub fn learning_rate(step: usize, peak: f64, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        peak * step as f64 / warmup as f64
    } else {
        let progress = (step - warmup) as f64 / (total - warmup) as f64;
        peak * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
    }
}

/// One EMA update: `ema <- m * ema + (1 - m) * value`.
pub fn ema_update(ema: &mut Tensor, value: &Tensor, momentum: f64) {
    for (e, v) in ema.data_mut().iter_mut().zip(value.data()) {
        *e = momentum * *e + (1.0 - momentum) * v;
    }
}

/// Binned importance sampler over log-SNR with a uniform mixing floor and an
/// unbiasedness correction applied to the loss.
#[derive(Clone, Debug)]
pub struct AdaptiveTSampler {
    pub bins: usize,
    pub floor: f64,
    pub decay: f64,
    pub ema: Vec<f64>,
    lambda_lo: f64,
    lambda_hi: f64,
    t_edges: Vec<f64>, // t value at each lambda bin edge (decreasing in lambda)
    span: f64,
}

impl AdaptiveTSampler {
    pub fn new(schedule: &NoiseSchedule, bins: usize, floor: f64, decay: f64) -> Self {
        let lambda_lo = schedule.log_snr(schedule.t_max).unwrap();
        let lambda_hi = schedule.log_snr(schedule.t_min).unwrap();
        let t_edges: Vec<f64> = (0..=bins)
            .map(|b| {
                let lam = lambda_lo + (lambda_hi - lambda_lo) * b as f64 / bins as f64;
                t_of_log_snr(schedule, lam)
            })
            .collect();
        AdaptiveTSampler {
            bins,
            floor,
            decay,
            ema: vec![1.0; bins],
            lambda_lo,
            lambda_hi,
            t_edges,
            span: schedule.t_max - schedule.t_min,
        }
    }

    /// Current bin probabilities: proportional to the loss EMA with a
    /// uniform mixing floor, so no bin starves.
    pub fn probabilities(&self) -> Vec<f64> {
        let total: f64 = self.ema.iter().sum();
        self.ema
            .iter()
            .map(|e| (1.0 - self.floor) * e / total + self.floor / self.bins as f64)
            .collect()
    }

    /// Draws `(t, importance_correction, bin)`; the correction makes
    /// `E[correction * f(t)]` equal the uniform-t expectation of `f`.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> (f64, f64, usize) {
        let probs = self.probabilities();
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut bin = self.bins - 1;
        for (b, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                bin = b;
                break;
            }
        }
        // lambda bin [b, b+1] maps to the t interval [t_edges[b+1], t_edges[b]]
        let t_hi = self.t_edges[bin];
        let t_lo = self.t_edges[bin + 1];
        let width = t_hi - t_lo;
        let t = t_lo + width * rng.gen::<f64>();
        let correction = width / (probs[bin] * self.span);
        (t, correction, bin)
    }

    pub fn bin_of_log_snr(&self, lambda: f64) -> usize {
        let rel = (lambda - self.lambda_lo) / (self.lambda_hi - self.lambda_lo);
        ((rel * self.bins as f64) as isize).clamp(0, self.bins as isize - 1) as usize
    }

    pub fn update(&mut self, bin: usize, observed_weighted_loss: f64) {
        self.ema[bin] = self.decay * self.ema[bin] + (1.0 - self.decay) * observed_weighted_loss;
    }

    pub fn entropy(&self) -> f64 {
        self.probabilities().iter().map(|p| if *p > 0.0 { -p * p.ln() } else { 0.0 }).sum()
    }
}

/// Inverts the scaled cosine log-SNR: `t = (2/pi) atan(s * e^{-lambda/2})`.
pub fn t_of_log_snr(schedule: &NoiseSchedule, lambda: f64) -> f64 {
    let t = (2.0 / std::f64::consts::PI) * (schedule.scale_factor * (-lambda / 2.0).exp()).atan();
    schedule.clamp_t(t)
}

/// One training example, fully sampled ahead of the parallel section.
#[derive(Clone, Debug)]
pub struct BatchItem {
    pub utt_index: usize,
    pub z: Tensor,
    pub t: f64,
    pub alpha: f64,
    pub weight: f64,
    pub correction: f64,
    pub bin: usize,
    pub enc: TranscriptEncoding,
    pub valid: Vec<bool>,
    pub corrupt: Vec<bool>,
    pub target_v: Tensor,
    pub loss_rows: Vec<f64>,
    pub dropout_seed: u64,
    pub prompt_len: usize,
}

pub struct Batch {
    pub items: Vec<BatchItem>,
    /// Total number of unmasked frame-elements across the batch.
    pub total_count: usize,
    pub empty_mask_events: usize,
}

/// Per-utterance contribution assembly: the batch loss is
/// `sum_u corr_u * w_u * sq_sum_u / total_count`, the masked mean of
/// `w * ||v_hat - v||^2` when corrections are 1.
pub fn combine_loss(parts: &[(f64, f64, f64)], total_count: usize) -> f64 {
    if total_count == 0 {
        return 0.0;
    }
    parts.iter().map(|(sq, w, corr)| corr * w * sq).sum::<f64>() / total_count as f64
}

/// Everything the trainer owns.
pub struct TrainState {
    pub train_cfg: TrainConfig,
    pub uat_cfg: UATConfig,
    pub schedule: NoiseSchedule,
    pub weighting_cfg: WeightingConfig,
    pub params: ParameterStore,
    pub ema: BTreeMap<String, Tensor>,
    pub opt_m: BTreeMap<String, Tensor>,
    pub opt_v: BTreeMap<String, Tensor>,
    pub step: usize,
    pub sampler: AdaptiveTSampler,
    pub rng: ChaCha8Rng,
    pub empty_mask_events: u64,
    /// Opaque caller metadata carried through checkpoints (e.g. the full
    /// run configuration).
    pub extra_meta: serde_json::Value,
}

impl TrainState {
    pub fn new(train_cfg: TrainConfig, uat_cfg: UATConfig) -> Result<Self> {
        train_cfg.validate()?;
        let schedule = NoiseSchedule::default();
        let params = crate::uat::init_store(&uat_cfg, train_cfg.seed, train_cfg.precision)?;
        let mut ema = BTreeMap::new();
        let mut opt_m = BTreeMap::new();
        let mut opt_v = BTreeMap::new();
        for (name, p) in params.iter() {
            ema.insert(name.clone(), p.value.clone().to_dtype(Dtype::Double));
            opt_m.insert(name.clone(), Tensor::zeros(p.value.shape(), Dtype::Double));
            opt_v.insert(name.clone(), Tensor::zeros(p.value.shape(), Dtype::Double));
        }
        let sampler = AdaptiveTSampler::new(&schedule, 32, 0.1, 0.99);
        let rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
        Ok(TrainState {
            train_cfg,
            uat_cfg,
            schedule,
            weighting_cfg: WeightingConfig::default(),
            params,
            ema,
            opt_m,
            opt_v,
            step: 0,
            sampler,
            rng,
            empty_mask_events: 0,
            extra_meta: serde_json::Value::Null,
        })
    }

    /// EMA parameters as a store, for evaluation and sampling.
    pub fn ema_store(&self) -> ParameterStore {
        let mut store = ParameterStore::new();
        for (name, t) in &self.ema {
            let decay = self.params.get(name).map(|p| p.decay).unwrap_or(false);
            store.register(name, t.clone(), decay).expect("unique names");
        }
        store
    }

    /// Root-mean-square distance between current and EMA parameters.
    pub fn ema_gap(&self) -> f64 {
        let mut sq = 0.0;
        let mut n = 0usize;
        for (name, p) in self.params.iter() {
            let e = &self.ema[name];
            for (a, b) in p.value.data().iter().zip(e.data()) {
                let d = a - b;
                sq += d * d;
            }
            n += p.value.len();
        }
        (sq / n.max(1) as f64).sqrt()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut tensors = Vec::new();
        for (name, p) in self.params.iter() {
            tensors.push((format!("model.{name}"), p.value.clone()));
        }
        for (name, t) in &self.ema {
            tensors.push((format!("ema.{name}"), t.clone()));
        }
        for (name, t) in &self.opt_m {
            tensors.push((format!("opt.m.{name}"), t.clone()));
        }
        for (name, t) in &self.opt_v {
            tensors.push((format!("opt.v.{name}"), t.clone()));
        }
        tensors.push((
            "sampler.bin_ema".to_string(),
            Tensor::new(vec![self.sampler.ema.len()], self.sampler.ema.clone(), Dtype::Double)?,
        ));
        let meta = serde_json::json!({
            "extra": self.extra_meta,
            "step": self.step,
            "empty_mask_events": self.empty_mask_events,
            "rng": {
                "seed": crate::params::hex_string(&self.rng.get_seed()),
                "stream": self.rng.get_stream(),
                "word_pos": self.rng.get_word_pos().to_string(),
            },
            "train_cfg": serde_json::to_value(&self.train_cfg)
                .map_err(|e| Error::Internal(e.to_string()))?,
            "uat_cfg": serde_json::to_value(&self.uat_cfg)
                .map_err(|e| Error::Internal(e.to_string()))?,
            "schedule": serde_json::to_value(self.schedule)
                .map_err(|e| Error::Internal(e.to_string()))?,
            "weighting_cfg": serde_json::to_value(self.weighting_cfg)
                .map_err(|e| Error::Internal(e.to_string()))?,
        });
        checkpoint::save(path, &CheckpointData { meta, tensors })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let data = checkpoint::load(path)?;
        let meta = &data.meta;
        let train_cfg: TrainConfig = serde_json::from_value(meta["train_cfg"].clone())
            .map_err(|e| Error::Format(format!("checkpoint train_cfg: {e}")))?;
        let uat_cfg: UATConfig = serde_json::from_value(meta["uat_cfg"].clone())
            .map_err(|e| Error::Format(format!("checkpoint uat_cfg: {e}")))?;
        let schedule: NoiseSchedule = serde_json::from_value(meta["schedule"].clone())
            .map_err(|e| Error::Format(format!("checkpoint schedule: {e}")))?;
        let weighting_cfg: WeightingConfig = serde_json::from_value(meta["weighting_cfg"].clone())
            .map_err(|e| Error::Format(format!("checkpoint weighting: {e}")))?;
        let mut state = TrainState::new(train_cfg, uat_cfg)?;
        state.schedule = schedule;
        state.weighting_cfg = weighting_cfg;
        state.step = meta["step"].as_u64().ok_or_else(|| Error::Format("missing step".into()))? as usize;
        state.empty_mask_events = meta["empty_mask_events"].as_u64().unwrap_or(0);
        state.extra_meta = meta.get("extra").cloned().unwrap_or(serde_json::Value::Null);

        let mut by_name: BTreeMap<String, Tensor> = data.tensors.into_iter().collect();
        for name in state.params.names() {
            let v = by_name
                .remove(&format!("model.{name}"))
                .ok_or_else(|| Error::Format(format!("checkpoint missing model.{name}")))?;
            state.params.get_mut(&name)?.value = v;
            state.ema.insert(
                name.clone(),
                by_name
                    .remove(&format!("ema.{name}"))
                    .ok_or_else(|| Error::Format(format!("checkpoint missing ema.{name}")))?,
            );
            state.opt_m.insert(
                name.clone(),
                by_name
                    .remove(&format!("opt.m.{name}"))
                    .ok_or_else(|| Error::Format(format!("checkpoint missing opt.m.{name}")))?,
            );
            state.opt_v.insert(
                name.clone(),
                by_name
                    .remove(&format!("opt.v.{name}"))
                    .ok_or_else(|| Error::Format(format!("checkpoint missing opt.v.{name}")))?,
            );
        }
        if let Some(bin_ema) = by_name.remove("sampler.bin_ema") {
            state.sampler.ema = bin_ema.data().to_vec();
        }
        let rng_meta = &meta["rng"];
        let seed_hex = rng_meta["seed"].as_str().ok_or_else(|| Error::Format("missing rng seed".into()))?;
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16)
                .map_err(|_| Error::Format("bad rng seed hex".into()))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(rng_meta["stream"].as_u64().unwrap_or(0));
        let word_pos: u128 = rng_meta["word_pos"]
            .as_str()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("bad rng word_pos".into()))?;
        rng.set_word_pos(word_pos);
        state.rng = rng;
        Ok(state)
    }
}

pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub ema_gap: f64,
    pub bin_entropy: f64,
}

/// Trainer: corpus plus cached frozen text encodings plus the mutable state.
pub struct Trainer {
    pub state: TrainState,
    corpus: Arc<Vec<ToyUtterance>>,
    encodings: Arc<Vec<TranscriptEncoding>>,
    pool: rayon::ThreadPool,
}

impl Trainer {
    pub fn new(state: TrainState, corpus: Vec<ToyUtterance>, encoder: &ToyTextEncoder) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::User("training corpus is empty".into()));
        }
        let encodings: Vec<TranscriptEncoding> =
            corpus.iter().map(|u| encoder.encode(&u.transcript)).collect::<Result<_>>()?;
        let threads = if state.train_cfg.threads == 0 {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        } else {
            state.train_cfg.threads
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
        Ok(Trainer { state, corpus: Arc::new(corpus), encodings: Arc::new(encodings), pool })
    }

    /// Samples one batch. All randomness is drawn here, single-threaded, in
    /// a fixed per-utterance order, so training is reproducible regardless
    /// of worker threading.
    pub fn build_batch(&mut self) -> Result<Batch> {
        let cfg = &self.state.train_cfg;
        let d = self.state.uat_cfg.latent_dim;
        let (beta_a, beta_b) = beta_params(cfg.prompt_beta_mode, cfg.prompt_beta_concentration);
        let beta = Beta::new(beta_a, beta_b).map_err(|e| Error::Internal(format!("beta: {e}")))?;
        let mut items = Vec::with_capacity(cfg.batch_size);
        let mut max_frames = 0usize;
        struct Draw {
            utt: usize,
            t: f64,
            corr: f64,
            bin: usize,
            eps: Tensor,
            prompt_len: usize,
            dropped: bool,
            dropout_seed: u64,
        }
        let mut draws = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let utt = self.state.rng.gen_range(0..self.corpus.len());
            let frames = self.corpus[utt].latents.num_frames();
            max_frames = max_frames.max(frames);
            let (t, corr, bin) = match cfg.t_sampler {
                TSamplerKind::Adaptive => self.state.sampler.sample(&mut self.state.rng),
                TSamplerKind::Uniform => {
                    let t = self
                        .state
                        .rng
                        .gen_range(self.state.schedule.t_min..self.state.schedule.t_max);
                    let lam = self.state.schedule.log_snr(t)?;
                    (t, 1.0, self.state.sampler.bin_of_log_snr(lam))
                }
            };
            let eps = Tensor::randn(&[frames, d], &mut self.state.rng, Dtype::Double);
            let inpaint = self.state.rng.gen::<f64>() < cfg.p_inpaint;
            let prompt_len = if inpaint {
                let prop: f64 = beta.sample(&mut self.state.rng);
                (prop * frames as f64).ceil() as usize
            } else {
                0
            };
            let dropped = self.state.rng.gen::<f64>() < cfg.p_text_drop;
            let dropout_seed = self.state.rng.gen::<u64>();
            draws.push(Draw { utt, t, corr, bin, eps, prompt_len, dropped, dropout_seed });
        }
        let padded = crate::seq::round_up_to(max_frames, self.state.uat_cfg.downsample_factor());
        let mut total_count = 0usize;
        let mut empty_mask_events = 0usize;
        for draw in draws {
            let u = &self.corpus[draw.utt];
            let frames = u.latents.num_frames();
            let (alpha, sigma, log_snr) = self.state.schedule.alpha_sigma(draw.t)?;
            let weight = cfg.weighting.weight(&self.state.weighting_cfg, log_snr)?;
            let mut z = vec![0.0; padded * d];
            let mut target = vec![0.0; padded * d];
            let mut valid = vec![false; padded];
            let mut corrupt = vec![false; padded];
            let mut loss_rows = vec![0.0; padded];
            for f in 0..frames {
                valid[f] = true;
                let x_row = u.latents.frames.row(f);
                let e_row = draw.eps.row(f);
                let clean_prompt = f < draw.prompt_len;
                corrupt[f] = !clean_prompt;
                for c in 0..d {
                    let idx = f * d + c;
                    if clean_prompt {
                        z[idx] = x_row[c];
                    } else {
                        z[idx] = alpha * x_row[c] + sigma * e_row[c];
                        target[idx] = alpha * e_row[c] - sigma * x_row[c];
                    }
                }
                if !clean_prompt {
                    loss_rows[f] = 1.0;
                    total_count += d;
                }
            }
            if draw.prompt_len >= frames {
                empty_mask_events += 1;
            }
            let mut enc = self.encodings[draw.utt].clone();
            enc.dropped = draw.dropped;
            items.push(BatchItem {
                utt_index: draw.utt,
                z: Tensor::new(vec![padded, d], z, cfg.precision)?,
                t: draw.t,
                alpha,
                weight,
                correction: draw.corr,
                bin: draw.bin,
                enc,
                valid,
                corrupt,
                target_v: Tensor::new(vec![padded, d], target, Dtype::Double)?,
                loss_rows,
                dropout_seed: draw.dropout_seed,
                prompt_len: draw.prompt_len,
            })
        }
        self.state.empty_mask_events += empty_mask_events as u64;
        Ok(Batch { items, total_count, empty_mask_events })
    }

    /// Forward/backward over a batch plus the optimizer, EMA and adaptive
    /// sampler updates. Per-utterance graphs are independent, so they run in
    /// parallel; gradients are reduced in utterance order, which keeps the
    /// result bitwise identical to a single-threaded run.
    pub fn step(&mut self, batch: &Batch) -> Result<f64> {
        let uat_cfg = self.state.uat_cfg.clone();
        let precision = self.state.train_cfg.precision;
        let params = &self.state.params;
        let results: Vec<Result<(f64, f64, crate::tape::Gradients)>> = self.pool.install(|| {
            use rayon::prelude::*;
            batch
                .items
                .par_iter()
                .map(|item| {
                    let mut tape = Tape::for_training(precision, item.dropout_seed);
                    let req = DenoiseRequest {
                        z: &item.z,
                        alpha_t: item.alpha,
                        enc: &item.enc,
                        valid: &item.valid,
                        corrupt: &item.corrupt,
                    };
                    let v_hat = build_denoise(&mut tape, params, &uat_cfg, &req)?;
                    let sq = tape.weighted_sq_sum(v_hat, &item.target_v, &item.loss_rows);
                    let grads = tape.backward(sq)?;
                    let unmasked: f64 = item.loss_rows.iter().sum::<f64>() * item.z.dim(1) as f64;
                    let mean_sq = if unmasked > 0.0 { tape.value(sq).item() / unmasked } else { 0.0 };
                    Ok((tape.value(sq).item(), mean_sq, grads))
                })
                .collect()
        });

        self.state.params.zero_grads();
        let mut parts = Vec::with_capacity(batch.items.len());
        let mut observed = Vec::with_capacity(batch.items.len());
        for (item, res) in batch.items.iter().zip(results) {
            let (sq_sum, mean_sq, grads) = res?;
            parts.push((sq_sum, item.weight, item.correction));
            observed.push((item.bin, item.weight * mean_sq, item.loss_rows.iter().any(|&r| r > 0.0)));
            if batch.total_count > 0 {
                let scale = item.weight * item.correction / batch.total_count as f64;
                grads.accumulate_scaled_into(&mut self.state.params, scale)?;
            }
        }
        let loss = combine_loss(&parts, batch.total_count);
        if !loss.is_finite() {
            return Err(Error::Internal(format!(
                "non-finite loss at step {} (training seed {})",
                self.state.step, self.state.train_cfg.seed
            )));
        }

        let lr = learning_rate(
            self.state.step,
            self.state.train_cfg.peak_lr,
            self.state.train_cfg.warmup,
            self.state.train_cfg.steps,
        );
        adamw_step(
            &mut self.state.params,
            &mut self.state.opt_m,
            &mut self.state.opt_v,
            self.state.step + 1,
            lr,
            self.state.train_cfg.weight_decay,
        );
        for (name, p) in self.state.params.iter() {
            ema_update(
                self.state.ema.get_mut(name).expect("ema entry"),
                &p.value,
                self.state.train_cfg.ema_momentum,
            );
        }
        for (bin, obs, has_mask) in observed {
            if has_mask {
                self.state.sampler.update(bin, obs);
            }
        }
        self.state.step += 1;
        Ok(loss)
    }

    /// Runs `steps` training steps, recording metrics every
    /// `metrics_every` steps.
    pub fn run(&mut self, steps: usize, metrics: &mut Vec<MetricsRow>) -> Result<()> {
        for _ in 0..steps {
            let batch = self.build_batch()?;
            let loss = self.step(&batch)?;
            let done = self.state.step;
            if done % self.state.train_cfg.metrics_every == 0 || done == 1 {
                metrics.push(MetricsRow {
                    step: done,
                    loss,
                    lr: learning_rate(
                        done - 1,
                        self.state.train_cfg.peak_lr,
                        self.state.train_cfg.warmup,
                        self.state.train_cfg.steps,
                    ),
                    ema_gap: self.state.ema_gap(),
                    bin_entropy: self.state.sampler.entropy(),
                });
            }
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam with bias correction
/// (`beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`).
pub fn adamw_step(
    params: &mut ParameterStore,
    opt_m: &mut BTreeMap<String, Tensor>,
    opt_v: &mut BTreeMap<String, Tensor>,
    t: usize,
    lr: f64,
    weight_decay: f64,
) {
    let beta1: f64 = 0.9;
    let beta2: f64 = 0.999;
    let eps = 1e-8;
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for (name, p) in params.iter_mut() {
        let m = opt_m.get_mut(name).expect("moment m").data_mut();
        let v = opt_v.get_mut(name).expect("moment v").data_mut();
        let crate::params::Parameter { value, grad, decay } = p;
        let decay = *decay;
        let dtype = value.dtype();
        let g = grad.data();
        let w = value.data_mut();
        for i in 0..g.len() {
            let gi = g[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let mut wi = w[i];
            wi -= lr * m_hat / (v_hat.sqrt() + eps);
            if decay {
                wi -= lr * weight_decay * wi;
            }
            w[i] = dtype.round(wi);
        }
    }
}

/// Writes metric rows as CSV (`step,loss,lr,ema_gap,bin_entropy`).
pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("step,loss,lr,ema_gap,bin_entropy\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.10e},{:.10e},{:.10e},{:.6}\n",
            r.step, r.loss, r.lr, r.ema_gap, r.bin_entropy
        ));
    }
    out
}
