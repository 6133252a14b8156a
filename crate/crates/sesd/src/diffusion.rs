//! Closed-form diffusion quantities: the scaled cosine noise schedule,
//! forward corruption, v-parameterization algebra and loss weightings.
//!
//! Everything here is pure double-precision math, independent of the network
//! precision, so golden-value tests are exact.

use crate::tensor::Tensor;
use crate::{Error, Result};
use std::f64::consts::PI;

/// Maps diffusion time `t in [0,1]` to `alpha_t`, `sigma_t` and the log-SNR
/// `lambda_t` of the scaled cosine schedule.
///
/// The scaled schedule shifts the log-SNR of the standard cosine schedule by
/// `2 ln(scale_factor)`:
///
/// `lambda(t) = -2 ln(tan(pi t / 2)) + 2 ln(s)`,  `alpha^2 = logistic(lambda)`.
///
/// The endpoints are singular, so evaluation clamps `t` into
/// `[t_min, t_max]`.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct NoiseSchedule {
    pub scale_factor: f64,
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule { scale_factor: 0.5, t_min: 1e-4, t_max: 1.0 - 1e-4 }
    }
}

impl NoiseSchedule {
    pub fn new(scale_factor: f64, t_min: f64, t_max: f64) -> Result<Self> {
        if !(scale_factor > 0.0 && scale_factor.is_finite()) {
            return Err(Error::User(format!("scale_factor must be positive, got {scale_factor}")));
        }
        if !(0.0 <= t_min && t_min < t_max && t_max <= 1.0) {
            return Err(Error::User(format!("bad schedule clamp range [{t_min}, {t_max}]")));
        }
        Ok(NoiseSchedule { scale_factor, t_min, t_max })
    }

    pub fn clamp_t(&self, t: f64) -> f64 {
        t.clamp(self.t_min, self.t_max)
    }

    /// Log-SNR at time `t`. Rejects non-finite input.
    pub fn log_snr(&self, t: f64) -> Result<f64> {
        if !t.is_finite() {
            return Err(Error::User(format!("non-finite diffusion time {t}")));
        }
        let tc = self.clamp_t(t);
        Ok(-2.0 * (PI * tc / 2.0).tan().ln() + 2.0 * self.scale_factor.ln())
    }

    /// `(alpha, sigma, log_snr)` at time `t`, with `alpha^2 = logistic(log_snr)`
    /// and `sigma = sqrt(1 - alpha^2)`.
    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64, f64)> {
        if !t.is_finite() {
            return Err(Error::User(format!("non-finite diffusion time {t}")));
        }
        let tc = self.clamp_t(t);
        // e^{-lambda} = (tan(pi t/2) / s)^2, evaluated directly for accuracy
        let u = (PI * tc / 2.0).tan() / self.scale_factor;
        let alpha_sq = 1.0 / (1.0 + u * u);
        let alpha = alpha_sq.sqrt();
        let sigma = (1.0 - alpha_sq).sqrt();
        let log_snr = -2.0 * (PI * tc / 2.0).tan().ln() + 2.0 * self.scale_factor.ln();
        Ok((alpha, sigma, log_snr))
    }
}

/// Spec-shaped accessor: `(alpha, sigma, log_snr)` at `t`.
pub fn schedule_alpha(schedule: &NoiseSchedule, t: f64) -> Result<(f64, f64, f64)> {
    schedule.alpha_sigma(t)
}

/// `z_t = alpha x + sigma eps` for explicit coefficients.
pub fn corrupt_with(alpha: f64, sigma: f64, x: &Tensor, eps: &Tensor) -> Result<Tensor> {
    x.lincomb(alpha, eps, sigma)
}

/// Forward corruption `z_t = alpha_t x + sigma_t eps`.
pub fn forward_corrupt(x: &Tensor, eps: &Tensor, schedule: &NoiseSchedule, t: f64) -> Result<Tensor> {
    let (alpha, sigma, _) = schedule.alpha_sigma(t)?;
    corrupt_with(alpha, sigma, x, eps)
}

/// `v = alpha eps - sigma x` for explicit coefficients.
pub fn velocity_with(alpha: f64, sigma: f64, x: &Tensor, eps: &Tensor) -> Result<Tensor> {
    eps.lincomb(alpha, x, -sigma)
}

/// Velocity target `v = alpha_t eps - sigma_t x`.
pub fn velocity_target(x: &Tensor, eps: &Tensor, schedule: &NoiseSchedule, t: f64) -> Result<Tensor> {
    let (alpha, sigma, _) = schedule.alpha_sigma(t)?;
    velocity_with(alpha, sigma, x, eps)
}

/// Inverts the velocity parameterization:
/// `x_hat = alpha z - sigma v_hat`, `eps_hat = sigma z + alpha v_hat`.
pub fn reconstruct_from_v(
    z_t: &Tensor,
    v_hat: &Tensor,
    schedule: &NoiseSchedule,
    t: f64,
) -> Result<(Tensor, Tensor)> {
    let (alpha, sigma, _) = schedule.alpha_sigma(t)?;
    reconstruct_with(alpha, sigma, z_t, v_hat)
}

pub fn reconstruct_with(alpha: f64, sigma: f64, z_t: &Tensor, v_hat: &Tensor) -> Result<(Tensor, Tensor)> {
    let x_hat = z_t.lincomb(alpha, v_hat, -sigma)?;
    let eps_hat = z_t.lincomb(sigma, v_hat, alpha)?;
    Ok((x_hat, eps_hat))
}

/// One forward-process draw with its velocity target.
#[derive(Clone, Debug)]
pub struct DiffusionSample {
    pub x: Tensor,
    pub eps: Tensor,
    pub t: f64,
    pub z_t: Tensor,
    pub v: Tensor,
}

impl DiffusionSample {
    pub fn draw(x: Tensor, eps: Tensor, schedule: &NoiseSchedule, t: f64) -> Result<Self> {
        let z_t = forward_corrupt(&x, &eps, schedule, t)?;
        let v = velocity_target(&x, &eps, schedule, t)?;
        Ok(DiffusionSample { x, eps, t, z_t, v })
    }
}

/// Parameters of the asymmetric Cauchy/Normal loss weighting and of the
/// mirrored-Normal symmetric baseline.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct WeightingConfig {
    pub mu: f64,
    pub cauchy_gamma: f64,
    pub normal_sigma: f64,
}

impl Default for WeightingConfig {
    fn default() -> Self {
        WeightingConfig { mu: -1.0, cauchy_gamma: 4.8, normal_sigma: 2.4 }
    }
}

/// Asymmetric diffusion loss weighting: a heavy-tailed Cauchy profile below
/// `mu` and a Normal profile above, each normalized so `w(mu) = 1`.
pub fn loss_weight(cfg: &WeightingConfig, log_snr: f64) -> Result<f64> {
    if !log_snr.is_finite() {
        return Err(Error::User(format!("non-finite log-SNR {log_snr}")));
    }
    let d = log_snr - cfg.mu;
    Ok(if d < 0.0 {
        let r = d / cfg.cauchy_gamma;
        1.0 / (1.0 + r * r)
    } else {
        (-d * d / (2.0 * cfg.normal_sigma * cfg.normal_sigma)).exp()
    })
}

/// Implicit weight of the plain (unweighted) v-prediction objective in this
/// crate's weighting convention.
///
/// The training loss is `w(lambda) * ||v_hat - v||^2`, so the standard
/// v-objective corresponds to the constant weight 1 at every noise level.
pub fn v_weighting_reference(log_snr: f64) -> Result<f64> {
    if !log_snr.is_finite() {
        return Err(Error::User(format!("non-finite log-SNR {log_snr}")));
    }
    Ok(1.0)
}

/// Symmetric baseline: the Normal branch mirrored about `mu`.
pub fn symmetric_weight(cfg: &WeightingConfig, log_snr: f64) -> Result<f64> {
    if !log_snr.is_finite() {
        return Err(Error::User(format!("non-finite log-SNR {log_snr}")));
    }
    let d = log_snr - cfg.mu;
    Ok((-d * d / (2.0 * cfg.normal_sigma * cfg.normal_sigma)).exp())
}

/// Which weighting curve the trainer applies to the v-space MSE.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightingKind {
    Asymmetric,
    Symmetric,
    VReference,
}

impl WeightingKind {
    pub fn weight(&self, cfg: &WeightingConfig, log_snr: f64) -> Result<f64> {
        match self {
            WeightingKind::Asymmetric => loss_weight(cfg, log_snr),
            WeightingKind::Symmetric => symmetric_weight(cfg, log_snr),
            WeightingKind::VReference => v_weighting_reference(log_snr),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            WeightingKind::Asymmetric => "asymmetric",
            WeightingKind::Symmetric => "symmetric",
            WeightingKind::VReference => "v-weighting",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Dtype;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sched_05() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    #[test]
    fn midpoint_of_scaled_schedule() {
        // tan(pi/4) = 1, so lambda = 2 ln 0.5 and alpha^2 = logistic(ln 1/4) = 1/5
        let (alpha, sigma, lam) = sched_05().alpha_sigma(0.5).unwrap();
        assert_relative_eq!(lam, 2.0 * 0.5f64.ln(), epsilon = 1e-12);
        assert!((alpha * alpha - 0.2).abs() < 1e-12);
        assert_relative_eq!(alpha, 0.2f64.sqrt(), epsilon = 1e-12);
        assert!((alpha * alpha + sigma * sigma - 1.0).abs() < 1e-12);
    }

    #[test]
    fn midpoint_of_unscaled_schedule() {
        let s = NoiseSchedule::new(1.0, 1e-4, 1.0 - 1e-4).unwrap();
        let (alpha, _, lam) = s.alpha_sigma(0.5).unwrap();
        assert!(lam.abs() < 1e-12);
        assert!((alpha * alpha - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_endpoint() {
        let s = sched_05();
        let (alpha, sigma, _) = s.alpha_sigma(0.0).unwrap(); // clamps to t_min
        assert!(alpha > 0.999_999);
        assert!(sigma < 2e-3);
        let (alpha_hi, sigma_hi, _) = s.alpha_sigma(1.0).unwrap();
        assert!(alpha_hi < 2e-3);
        assert!(sigma_hi > 0.999_999);
    }

    #[test]
    fn rejects_non_finite_time() {
        let s = sched_05();
        assert!(s.alpha_sigma(f64::NAN).is_err());
        assert!(s.log_snr(f64::INFINITY).is_err());
    }

    #[test]
    fn alpha_and_snr_strictly_decrease() {
        let s = sched_05();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let a: f64 = rng.gen_range(s.t_min..s.t_max);
            let b: f64 = rng.gen_range(s.t_min..s.t_max);
            let (t1, t2) = if a < b { (a, b) } else { (b, a) };
            if t1 == t2 {
                continue;
            }
            let (alpha1, _, lam1) = s.alpha_sigma(t1).unwrap();
            let (alpha2, _, lam2) = s.alpha_sigma(t2).unwrap();
            assert!(alpha1 > alpha2, "alpha not decreasing at t1={t1} t2={t2}");
            assert!(lam1 > lam2, "log-SNR not decreasing at t1={t1} t2={t2}");
        }
    }

    #[test]
    fn shift_law_against_unit_scale() {
        let s_half = sched_05();
        let s_one = NoiseSchedule::new(1.0, 1e-4, 1.0 - 1e-4).unwrap();
        let shift = 2.0 * 0.5f64.ln();
        for i in 0..1000 {
            let t = s_half.t_min + (s_half.t_max - s_half.t_min) * (i as f64 / 999.0);
            let l_half = s_half.log_snr(t).unwrap();
            let l_one = s_one.log_snr(t).unwrap();
            assert!(
                (l_half - l_one - shift).abs() <= 1e-10,
                "shift law violated at t={t}: {}",
                l_half - l_one - shift
            );
        }
    }

    #[test]
    fn forward_corrupt_hand_values() {
        // alpha = 0.6 => sigma = 0.8; z = 0.6*2 - 0.8*1 = 0.4
        let x = Tensor::new(vec![1], vec![2.0], Dtype::Double).unwrap();
        let eps = Tensor::new(vec![1], vec![-1.0], Dtype::Double).unwrap();
        let z = corrupt_with(0.6, 0.8, &x, &eps).unwrap();
        assert_relative_eq!(z.item(), 0.4, epsilon = 1e-15);
        let v = velocity_with(0.6, 0.8, &x, &eps).unwrap();
        assert_relative_eq!(v.item(), -2.2, epsilon = 1e-15);
        let (x_hat, eps_hat) = reconstruct_with(0.6, 0.8, &z, &v).unwrap();
        assert_relative_eq!(x_hat.item(), 2.0, epsilon = 1e-12);
        assert_relative_eq!(eps_hat.item(), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn forward_corrupt_degenerate_cases() {
        let s = sched_05();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[4, 3], &mut rng, Dtype::Double);
        let eps = Tensor::randn(&[4, 3], &mut rng, Dtype::Double);
        // zero-noise end: z ~= x
        let z = forward_corrupt(&x, &eps, &s, 0.0).unwrap();
        let diff = z.sub(&x).unwrap();
        assert!(diff.max_abs() < 1e-2);
        // zero signal: z = sigma * eps
        let zeros = Tensor::zeros(&[4, 3], Dtype::Double);
        let (_, sigma, _) = s.alpha_sigma(0.3).unwrap();
        let z = forward_corrupt(&zeros, &eps, &s, 0.3).unwrap();
        let want = eps.scale(sigma);
        assert!(z.sub(&want).unwrap().max_abs() < 1e-15);
        // eps = 0: v = -sigma x
        let v = velocity_target(&x, &zeros, &s, 0.3).unwrap();
        let want = x.scale(-sigma);
        assert!(v.sub(&want).unwrap().max_abs() < 1e-15);
        // shape mismatch
        let bad = Tensor::zeros(&[4, 2], Dtype::Double);
        assert!(forward_corrupt(&x, &bad, &s, 0.3).is_err());
    }

    #[test]
    fn v_algebra_round_trip() {
        let s = sched_05();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let x = Tensor::randn(&[2, 5], &mut rng, Dtype::Double);
            let eps = Tensor::randn(&[2, 5], &mut rng, Dtype::Double);
            let t: f64 = rng.gen_range(s.t_min..s.t_max);
            let sample = DiffusionSample::draw(x.clone(), eps.clone(), &s, t).unwrap();
            let (x_hat, eps_hat) = reconstruct_from_v(&sample.z_t, &sample.v, &s, t).unwrap();
            let scale = x.max_abs().max(eps.max_abs()).max(1.0);
            assert!(x_hat.sub(&x).unwrap().max_abs() / scale < 1e-8);
            assert!(eps_hat.sub(&eps).unwrap().max_abs() / scale < 1e-8);
        }
    }

    #[test]
    fn weighting_golden_values() {
        let cfg = WeightingConfig::default();
        assert_eq!(loss_weight(&cfg, -1.0).unwrap(), 1.0);
        // ((-5.8+1)/4.8)^2 = 1 => w = 1/2
        assert_relative_eq!(loss_weight(&cfg, -5.8).unwrap(), 0.5, epsilon = 1e-9);
        // ((1.4+1)/2.4)^2 / 2 = 1/2 => w = e^{-1/2}
        assert_relative_eq!(loss_weight(&cfg, 1.4).unwrap(), (-0.5f64).exp(), epsilon = 1e-9);
        // high-noise emphasis: heavy Cauchy tail vs thin Normal tail
        let w_lo = loss_weight(&cfg, -11.0).unwrap();
        let w_hi = loss_weight(&cfg, 9.0).unwrap();
        assert_relative_eq!(w_lo, 1.0 / (1.0 + (10.0f64 / 4.8).powi(2)), epsilon = 1e-12);
        assert_relative_eq!(w_hi, (-100.0f64 / (2.0 * 2.4 * 2.4)).exp(), epsilon = 1e-12);
        assert!(w_lo > 100.0 * w_hi);
    }

    #[test]
    fn weighting_continuity_and_bound() {
        let cfg = WeightingConfig::default();
        let lo = loss_weight(&cfg, cfg.mu - 1e-9).unwrap();
        let hi = loss_weight(&cfg, cfg.mu + 1e-9).unwrap();
        assert!((lo - hi).abs() <= 1e-6);
        assert_eq!(loss_weight(&cfg, cfg.mu).unwrap(), 1.0);
        for i in 0..=4000 {
            let lam = -12.0 + i as f64 * 0.005;
            let w = loss_weight(&cfg, lam).unwrap();
            assert!(w > 0.0);
            if lam != cfg.mu {
                assert!(w < 1.0, "w({lam}) = {w} not below 1");
            }
        }
        assert!(loss_weight(&cfg, f64::NAN).is_err());
    }

    #[test]
    fn baseline_weightings() {
        let cfg = WeightingConfig::default();
        for i in 0..=400 {
            let lam = -12.0 + i as f64 * 0.05;
            assert_eq!(v_weighting_reference(lam).unwrap(), 1.0);
            let w = symmetric_weight(&cfg, lam).unwrap();
            assert!(w > 0.0 && w <= 1.0);
        }
        // mirrored about mu
        for d in [0.3, 1.0, 2.5, 6.0] {
            let a = symmetric_weight(&cfg, cfg.mu + d).unwrap();
            let b = symmetric_weight(&cfg, cfg.mu - d).unwrap();
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        // unimodal: strictly increasing below mu, decreasing above
        let mut prev = symmetric_weight(&cfg, -12.0).unwrap();
        let mut lam = -12.0 + 0.05;
        while lam < cfg.mu {
            let w = symmetric_weight(&cfg, lam).unwrap();
            assert!(w > prev);
            prev = w;
            lam += 0.05;
        }
        let mut prev = symmetric_weight(&cfg, cfg.mu).unwrap();
        let mut lam = cfg.mu + 0.05;
        while lam < 8.0 {
            let w = symmetric_weight(&cfg, lam).unwrap();
            assert!(w < prev);
            prev = w;
            lam += 0.05;
        }
    }
}
