//! Seeded synthetic latent-audio world: a transcript-to-latent renderer with
//! an exact oracle decoder and oracle evaluation metrics.
//!
//! Each symbol owns a unit motif vector in the first half of the latent
//! space; speakers own orthonormal vectors in the second half. Rendering
//! emits each symbol's motif for a sampled duration, adds the speaker vector
//! to every frame and jitters the motif subspace. Decoding is
//! nearest-motif-by-cosine followed by run collapsing, which makes transcript
//! recovery exact on clean renders and robust under generation noise.

use crate::params::name_seed;
use crate::seq::LatentSequence;
use crate::tensor::{Dtype, Tensor};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub const DEFAULT_VOCAB: &str = "abcdefghijklmno_";

/// Minimum run length the oracle decoder accepts; single-frame glitches are
/// discarded as noise.
pub const MIN_RUN: usize = 2;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyCodecSpec {
    pub vocab: String,
    pub latent_dim: usize,
    pub max_frames: usize,
    pub duration_lo: usize,
    pub duration_hi: usize,
    pub jitter_sigma: f64,
    pub num_speakers: usize,
    pub seed: u64,
}

impl Default for ToyCodecSpec {
    fn default() -> Self {
        ToyCodecSpec {
            vocab: DEFAULT_VOCAB.to_string(),
            latent_dim: 32,
            max_frames: 64,
            duration_lo: 2,
            duration_hi: 6,
            jitter_sigma: 0.05,
            num_speakers: 8,
            seed: 1,
        }
    }
}

/// The constructed codec: motif and speaker tables derived from the spec.
#[derive(Clone, Debug)]
pub struct ToyCodec {
    pub spec: ToyCodecSpec,
    motifs: Vec<Vec<f64>>,   // per symbol, unit vectors in the motif subspace
    speakers: Vec<Vec<f64>>, // orthonormal vectors in the speaker subspace
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyUtterance {
    pub id: String,
    pub transcript: String,
    pub speaker_id: usize,
    pub durations: Vec<usize>,
    pub latents: LatentSequence,
}

impl ToyCodec {
    pub fn build(spec: ToyCodecSpec) -> Result<Self> {
        if spec.latent_dim % 2 != 0 {
            return Err(Error::User("latent_dim must be even".into()));
        }
        let half = spec.latent_dim / 2;
        if spec.num_speakers > half {
            return Err(Error::User(format!(
                "{} speakers exceed speaker-subspace dimension {half}",
                spec.num_speakers
            )));
        }
        if spec.duration_lo < MIN_RUN || spec.duration_lo > spec.duration_hi {
            return Err(Error::User("bad duration range".into()));
        }
        // motifs: rejection-sample unit vectors until pairwise |cos| <= 0.5
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(spec.seed, "toy.motifs"));
        let mut motifs: Vec<Vec<f64>> = Vec::new();
        while motifs.len() < spec.vocab.chars().count() {
            let mut v: Vec<f64> = (0..half).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 1e-6 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= n);
            if motifs.iter().all(|m| cos_slices(m, &v).abs() <= 0.5) {
                motifs.push(v);
            }
        }
        // speakers: Gram-Schmidt orthonormal basis of random draws
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(spec.seed, "toy.speakers"));
        let mut speakers: Vec<Vec<f64>> = Vec::new();
        while speakers.len() < spec.num_speakers {
            let mut v: Vec<f64> = (0..half).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            for s in &speakers {
                let proj = dot_slices(s, &v);
                for (vi, si) in v.iter_mut().zip(s) {
                    *vi -= proj * si;
                }
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 1e-6 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= n);
            speakers.push(v);
        }
        Ok(ToyCodec { spec, motifs, speakers })
    }

    pub fn motif_dim(&self) -> usize {
        self.spec.latent_dim / 2
    }

    pub fn symbol_index(&self, ch: char) -> Result<usize> {
        self.spec
            .vocab
            .chars()
            .position(|c| c == ch)
            .ok_or_else(|| Error::User(format!("symbol {ch:?} not in vocabulary")))
    }

    pub fn motif(&self, idx: usize) -> &[f64] {
        &self.motifs[idx]
    }

    pub fn speaker(&self, id: usize) -> &[f64] {
        &self.speakers[id]
    }

    /// Renders a transcript with explicit per-symbol durations (no jitter
    /// when `jitter_rng` is `None`).
    pub fn render_with_durations(
        &self,
        transcript: &str,
        speaker_id: usize,
        durations: &[usize],
        mut jitter_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ToyUtterance> {
        if speaker_id >= self.spec.num_speakers {
            return Err(Error::User(format!("speaker {speaker_id} out of range")));
        }
        let syms: Vec<usize> =
            transcript.chars().map(|c| self.symbol_index(c)).collect::<Result<_>>()?;
        if syms.len() != durations.len() {
            return Err(Error::Shape("durations do not match transcript length".into()));
        }
        let total: usize = durations.iter().sum();
        if total > self.spec.max_frames {
            return Err(Error::User(format!(
                "utterance of {total} frames overflows max_frames {}",
                self.spec.max_frames
            )));
        }
        let d = self.spec.latent_dim;
        let half = d / 2;
        let spk = &self.speakers[speaker_id];
        let mut data = Vec::with_capacity(total * d);
        for (&sym, &dur) in syms.iter().zip(durations) {
            for _ in 0..dur {
                let motif = &self.motifs[sym];
                for i in 0..half {
                    let jitter = match jitter_rng.as_deref_mut() {
                        Some(rng) if self.spec.jitter_sigma > 0.0 => {
                            self.spec.jitter_sigma * rng.sample::<f64, _>(StandardNormal)
                        }
                        _ => 0.0,
                    };
                    data.push(motif[i] + jitter);
                }
                data.extend_from_slice(spk);
            }
        }
        let latents = LatentSequence::clean(Tensor::new(vec![total, d], data, Dtype::Single)?)?;
        Ok(ToyUtterance {
            id: String::new(),
            transcript: transcript.to_string(),
            speaker_id,
            durations: durations.to_vec(),
            latents,
        })
    }

    /// Renders with durations sampled uniformly from the spec range.
    pub fn render(&self, transcript: &str, speaker_id: usize, rng: &mut ChaCha8Rng) -> Result<ToyUtterance> {
        let n = transcript.chars().count();
        let durations: Vec<usize> =
            (0..n).map(|_| rng.gen_range(self.spec.duration_lo..=self.spec.duration_hi)).collect();
        self.render_with_durations(transcript, speaker_id, &durations, Some(rng))
    }

    /// Exact decoder: nearest motif by cosine per frame, runs shorter than
    /// [`MIN_RUN`] discarded, near-zero frames treated as silence.
    pub fn oracle_decode(&self, latents: &Tensor) -> Result<String> {
        if latents.rank() != 2 || latents.dim(1) != self.spec.latent_dim {
            return Err(Error::Shape(format!(
                "latents {:?} do not match codec dim {}",
                latents.shape(),
                self.spec.latent_dim
            )));
        }
        let half = self.motif_dim();
        let frames = latents.dim(0);
        let mut labels: Vec<Option<usize>> = Vec::with_capacity(frames);
        for t in 0..frames {
            let row = &latents.row(t)[..half];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-9 {
                labels.push(None);
                continue;
            }
            let mut best = 0usize;
            let mut best_cos = f64::NEG_INFINITY;
            for (i, m) in self.motifs.iter().enumerate() {
                let c = dot_slices(m, row) / norm;
                if c > best_cos {
                    best_cos = c;
                    best = i;
                }
            }
            labels.push(Some(best));
        }
        let vocab: Vec<char> = self.spec.vocab.chars().collect();
        let mut out = String::new();
        let mut run_sym: Option<usize> = None;
        let mut run_len = 0usize;
        for label in labels.iter().chain(std::iter::once(&None)) {
            if *label == run_sym {
                run_len += 1;
                continue;
            }
            if let Some(sym) = run_sym {
                if run_len >= MIN_RUN {
                    out.push(vocab[sym]);
                }
            }
            run_sym = *label;
            run_len = 1;
        }
        Ok(out)
    }

    /// Cosine between the mean speaker-subspace projections of two latent
    /// sequences (valid frames only); defined as 0 for zero-norm projections.
    pub fn oracle_speaker_similarity(&self, a: &LatentSequence, b: &LatentSequence) -> Result<f64> {
        let ma = self.mean_speaker_projection(a)?;
        let mb = self.mean_speaker_projection(b)?;
        let na = ma.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = mb.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na < 1e-12 || nb < 1e-12 {
            return Ok(0.0);
        }
        Ok(dot_slices(&ma, &mb) / (na * nb))
    }

    fn mean_speaker_projection(&self, seq: &LatentSequence) -> Result<Vec<f64>> {
        if seq.latent_dim() != self.spec.latent_dim {
            return Err(Error::Shape("latent dim mismatch".into()));
        }
        let half = self.motif_dim();
        let mut acc = vec![0.0; half];
        let mut count = 0usize;
        for t in 0..seq.num_frames() {
            if !seq.valid[t] {
                continue;
            }
            for (a, v) in acc.iter_mut().zip(&seq.frames.row(t)[half..]) {
                *a += v;
            }
            count += 1;
        }
        if count > 0 {
            acc.iter_mut().for_each(|a| *a /= count as f64);
        }
        Ok(acc)
    }
}

fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cos_slices(a: &[f64], b: &[f64]) -> f64 {
    let na = dot_slices(a, a).sqrt();
    let nb = dot_slices(b, b).sqrt();
    dot_slices(a, b) / (na * nb)
}

/// Symbol-level Levenshtein distance divided by `max(1, |reference|)`.
pub fn transcript_error_rate(reference: &str, hypothesis: &str) -> f64 {
    let r: Vec<char> = reference.chars().collect();
    let h: Vec<char> = hypothesis.chars().collect();
    let mut prev: Vec<usize> = (0..=h.len()).collect();
    let mut cur = vec![0usize; h.len() + 1];
    for i in 1..=r.len() {
        cur[0] = i;
        for j in 1..=h.len() {
            let sub = prev[j - 1] + usize::from(r[i - 1] != h[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[h.len()] as f64 / r.len().max(1) as f64
}

/// Corpus layout: train/eval splits with held-out transcripts, six held-in
/// speakers for training and two reserved for prompting experiments.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub codec: ToyCodecSpec,
    pub train_size: usize,
    pub eval_size: usize,
    pub min_symbols: usize,
    pub max_symbols: usize,
    pub train_speakers: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            codec: ToyCodecSpec::default(),
            train_size: 4096,
            eval_size: 256,
            min_symbols: 3,
            max_symbols: 12,
            train_speakers: 6,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub train: Vec<ToyUtterance>,
    pub eval: Vec<ToyUtterance>,
}

fn sample_transcript(rng: &mut ChaCha8Rng, vocab: &[char], min: usize, max: usize) -> String {
    let len = rng.gen_range(min..=max);
    let mut out = String::with_capacity(len);
    let mut last: Option<char> = None;
    while out.chars().count() < len {
        let c = vocab[rng.gen_range(0..vocab.len())];
        // consecutive duplicates are not representable by a run-collapsing
        // decoder, so transcripts avoid them
        if Some(c) == last {
            continue;
        }
        out.push(c);
        last = Some(c);
    }
    out
}

/// Deterministic corpus generation; per-utterance RNG streams are derived
/// from the corpus seed and the utterance id, so the corpus is bitwise
/// reproducible and parallelizable by index.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    let codec = ToyCodec::build(spec.codec.clone())?;
    let vocab: Vec<char> = spec.codec.vocab.chars().collect();
    let mut train_transcripts = std::collections::HashSet::new();
    let make = |split: &str, index: usize, speakers: std::ops::Range<usize>, taken: Option<&std::collections::HashSet<String>>| -> Result<ToyUtterance> {
        let id = format!("{split}.{index:05}");
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(spec.seed, &id));
        loop {
            let transcript = sample_transcript(&mut rng, &vocab, spec.min_symbols, spec.max_symbols);
            if let Some(t) = taken {
                if t.contains(&transcript) {
                    continue;
                }
            }
            let speaker = rng.gen_range(speakers.clone());
            match codec.render(&transcript, speaker, &mut rng) {
                Ok(mut u) => {
                    u.id = id;
                    return Ok(u);
                }
                Err(Error::User(_)) => continue, // frame budget overflow: redraw
                Err(e) => return Err(e),
            }
        }
    };
    let mut train = Vec::with_capacity(spec.train_size);
    for i in 0..spec.train_size {
        let u = make("train", i, 0..spec.train_speakers, None)?;
        train_transcripts.insert(u.transcript.clone());
        train.push(u);
    }
    let mut eval = Vec::with_capacity(spec.eval_size);
    for i in 0..spec.eval_size {
        eval.push(make("eval", i, 0..spec.codec.num_speakers, Some(&train_transcripts))?);
    }
    Ok(Corpus { spec: spec.clone(), train, eval })
}

/// Persists a corpus as a text manifest plus one SESD-EMB-1 blob per
/// utterance.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    std::fs::create_dir_all(dir.join("latents"))?;
    let mut manifest = std::fs::File::create(dir.join("manifest.txt"))?;
    for u in corpus.train.iter().chain(&corpus.eval) {
        let durs: Vec<String> = u.durations.iter().map(|d| d.to_string()).collect();
        writeln!(manifest, "{}\t{}\t{}\t{}", u.id, u.speaker_id, u.transcript, durs.join(","))?;
        crate::conditioning::write_embedding(
            &dir.join("latents").join(format!("{}.emb", u.id)),
            &u.latents.frames,
        )?;
    }
    let spec_json = serde_json::to_string_pretty(&corpus.spec)
        .map_err(|e| Error::Internal(format!("corpus spec serialization: {e}")))?;
    std::fs::write(dir.join("corpus.json"), spec_json)?;
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let spec: CorpusSpec = serde_json::from_str(
        &std::fs::read_to_string(dir.join("corpus.json"))
            .map_err(|e| Error::User(format!("cannot read corpus spec: {e}")))?,
    )
    .map_err(|e| Error::Format(format!("corpus spec parse: {e}")))?;
    let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
    let mut by_split: BTreeMap<&str, Vec<ToyUtterance>> = BTreeMap::new();
    for line in manifest.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 4 {
            return Err(Error::Format(format!("bad manifest line: {line}")));
        }
        let id = parts[0].to_string();
        let speaker_id: usize =
            parts[1].parse().map_err(|_| Error::Format(format!("bad speaker in {line}")))?;
        let transcript = parts[2].to_string();
        let durations: Vec<usize> = parts[3]
            .split(',')
            .map(|d| d.parse().map_err(|_| Error::Format(format!("bad durations in {line}"))))
            .collect::<Result<_>>()?;
        let frames =
            crate::conditioning::read_embedding(&dir.join("latents").join(format!("{id}.emb")))?
                .to_dtype(Dtype::Single);
        let latents = LatentSequence::clean(frames)?;
        let split = if id.starts_with("train.") { "train" } else { "eval" };
        by_split.entry(split).or_default().push(ToyUtterance {
            id,
            transcript,
            speaker_id,
            durations,
            latents,
        });
    }
    Ok(Corpus {
        spec,
        train: by_split.remove("train").unwrap_or_default(),
        eval: by_split.remove("eval").unwrap_or_default(),
    })
}
