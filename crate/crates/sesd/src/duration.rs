//! Stochastic utterance-duration prediction from transcripts.
//!
//! A statistics-based sampler behind a stable interface: per-symbol frame
//! statistics are estimated on the training split, and sampling draws from a
//! Gaussian sum model with tempered variance. Downstream synthesis is
//! agnostic to where durations come from.

use crate::toy::ToyUtterance;
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;

/// Fraction of the model standard deviation used when sampling. A raw
/// posterior draw doubles the squared error of the mean predictor; tempering
/// the tails (the role nucleus sampling plays for an autoregressive
/// predictor) keeps sampled durations useful.
pub const SAMPLING_TEMPER: f64 = 0.6;

#[derive(Clone, Debug, PartialEq)]
pub struct DurationModel {
    per_symbol: BTreeMap<char, (f64, f64)>, // mean, variance
    pub residual_var: f64,
    pub max_frames: usize,
    pub min_per_symbol: usize,
}

/// Estimates per-symbol means/variances and the utterance-level residual
/// variance of `actual - sum_of_means` from the training split only.
pub fn fit(corpus: &[ToyUtterance], max_frames: usize, min_per_symbol: usize) -> Result<DurationModel> {
    if corpus.is_empty() {
        return Err(Error::User("cannot fit a duration model on an empty corpus".into()));
    }
    let mut acc: BTreeMap<char, (f64, f64, usize)> = BTreeMap::new();
    for u in corpus {
        for (ch, &d) in u.transcript.chars().zip(&u.durations) {
            let e = acc.entry(ch).or_insert((0.0, 0.0, 0));
            e.0 += d as f64;
            e.1 += (d * d) as f64;
            e.2 += 1;
        }
    }
    let per_symbol: BTreeMap<char, (f64, f64)> = acc
        .into_iter()
        .map(|(ch, (s, sq, n))| {
            let mean = s / n as f64;
            let var = (sq / n as f64 - mean * mean).max(0.0);
            (ch, (mean, var))
        })
        .collect();
    let mut res_sq = 0.0;
    for u in corpus {
        let predicted: f64 =
            u.transcript.chars().map(|ch| per_symbol[&ch].0).sum();
        let actual: f64 = u.durations.iter().sum::<usize>() as f64;
        let r = actual - predicted;
        res_sq += r * r;
    }
    Ok(DurationModel {
        per_symbol,
        residual_var: res_sq / corpus.len() as f64,
        max_frames,
        min_per_symbol,
    })
}

impl DurationModel {
    /// Sum of per-symbol means and variances for a transcript.
    pub fn moments(&self, transcript: &str) -> Result<(f64, f64)> {
        let mut mean = 0.0;
        let mut var = self.residual_var;
        for ch in transcript.chars() {
            let (m, v) = self
                .per_symbol
                .get(&ch)
                .ok_or_else(|| Error::User(format!("symbol {ch:?} unknown to duration model")))?;
            mean += m;
            var += v;
        }
        Ok((mean, var))
    }

    /// Deterministic mean prediction, rounded and clamped.
    pub fn predict_mean(&self, transcript: &str) -> Result<usize> {
        let (mean, _) = self.moments(transcript)?;
        Ok(self.clamp(transcript, mean))
    }

    /// Draws `round(Normal(sum of means, tempered sum of variances))`,
    /// clamped to `[len * min_per_symbol, max_frames]`.
    pub fn sample(&self, transcript: &str, rng: &mut ChaCha8Rng) -> Result<usize> {
        let (mean, var) = self.moments(transcript)?;
        let draw = mean + SAMPLING_TEMPER * var.sqrt() * rng.sample::<f64, _>(StandardNormal);
        Ok(self.clamp(transcript, draw))
    }

    fn clamp(&self, transcript: &str, value: f64) -> usize {
        let lo = transcript.chars().count() * self.min_per_symbol;
        let hi = self.max_frames;
        (value.round() as i64).clamp(lo as i64, hi as i64) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seq::LatentSequence;
    use crate::tensor::{Dtype, Tensor};
    use rand::SeedableRng;

    fn utterance(transcript: &str, durations: Vec<usize>) -> ToyUtterance {
        let total: usize = durations.iter().sum();
        ToyUtterance {
            id: String::new(),
            transcript: transcript.into(),
            speaker_id: 0,
            durations,
            latents: LatentSequence::clean(Tensor::zeros(&[total, 2], Dtype::Double)).unwrap(),
        }
    }

    #[test]
    fn constant_corpus_is_degenerate() {
        let corpus = vec![
            utterance("ab", vec![4, 4]),
            utterance("ba", vec![4, 4]),
            utterance("aba", vec![4, 4, 4]),
        ];
        let m = fit(&corpus, 64, 2).unwrap();
        assert_eq!(m.moments("ab").unwrap(), (8.0, 0.0));
        assert_eq!(m.residual_var, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(m.sample("aba", &mut rng).unwrap(), 12);
        }
        assert!(fit(&[], 64, 2).is_err());
        assert!(m.sample("xyz", &mut rng).is_err());
    }

    #[test]
    fn uniform_durations_recover_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut corpus = Vec::new();
        use rand::Rng;
        for _ in 0..4096 {
            let len = rng.gen_range(3..=12);
            let t: String = (0..len).map(|i| if i % 2 == 0 { 'a' } else { 'b' }).collect();
            let d: Vec<usize> = (0..len).map(|_| rng.gen_range(2..=6)).collect();
            corpus.push(utterance(&t, d));
        }
        let m = fit(&corpus, 64, 2).unwrap();
        let (mean_a, var_a) = m.moments("a").unwrap();
        assert!((mean_a - m.residual_var.max(0.0) * 0.0 - 4.0).abs() < 0.1, "mean {mean_a}");
        // U{2..6} variance is 2
        assert!((var_a - m.residual_var - 2.0).abs() < 0.2);
        // deterministic given corpus bytes
        let m2 = fit(&corpus, 64, 2).unwrap();
        assert_eq!(m, m2);
    }

    #[test]
    fn sampled_mean_converges() {
        let mut corpus = Vec::new();
        for d in [(3, 5), (4, 4), (5, 3), (2, 6), (6, 2)] {
            corpus.push(utterance("ab", vec![d.0, d.1]));
        }
        let m = fit(&corpus, 640, 0).unwrap();
        let (mean, var) = m.moments("ab").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000usize;
        let mut acc = 0.0;
        for _ in 0..n {
            acc += m.sample("ab", &mut rng).unwrap() as f64;
        }
        let emp = acc / n as f64;
        // rounding to integers adds at most ~0.3 of bias-free jitter
        let se = SAMPLING_TEMPER * var.sqrt() / (n as f64).sqrt();
        assert!((emp - mean).abs() < 3.0 * se + 0.5, "empirical {emp} vs {mean}");
    }

    #[test]
    fn clamping_contract() {
        let corpus = vec![utterance("ab", vec![2, 2])];
        let m = fit(&corpus, 64, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let long = "abababababab"; // 12 symbols
        for _ in 0..200 {
            let d = m.sample(long, &mut rng).unwrap();
            assert!(d >= 24, "clamp floor violated: {d}");
            assert!(d <= 64);
        }
    }

    #[test]
    fn held_out_rmse_close_to_mean_predictor() {
        let spec = crate::toy::CorpusSpec {
            train_size: 1024,
            eval_size: 256,
            ..Default::default()
        };
        let corpus = crate::toy::generate_corpus(&spec).unwrap();
        let m = fit(&corpus.train, spec.codec.max_frames, spec.codec.duration_lo).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut sq_mean = 0.0;
        let mut sq_sampled = 0.0;
        let mut n = 0.0;
        for u in &corpus.eval {
            let truth: usize = u.durations.iter().sum();
            let mean_pred = m.predict_mean(&u.transcript).unwrap();
            for _ in 0..8 {
                let s = m.sample(&u.transcript, &mut rng).unwrap();
                sq_sampled += (s as f64 - truth as f64).powi(2);
                sq_mean += (mean_pred as f64 - truth as f64).powi(2);
                n += 1.0;
            }
        }
        let rmse_sampled = (sq_sampled / n).sqrt();
        let rmse_mean = (sq_mean / n).sqrt();
        assert!(
            rmse_sampled <= 1.3 * rmse_mean,
            "sampled RMSE {rmse_sampled} vs mean RMSE {rmse_mean}"
        );
    }
}
