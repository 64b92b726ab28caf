//! Probability primitives: diagonal Gaussians for the latent levels,
//! Bernoulli and 256-way categorical likelihoods for pixels.
//!
//! Everything returns one value per batch element (shape [N]), summed over
//! the remaining axes, so objective code can weight or average as it likes.

use alloc::format;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Variance log-range guard. exp(12) ~ 1.6e5, exp(-12) ~ 6e-6; realistic
/// optima sit far inside, so the clamp only tames early-training blowups.
pub const LOGVAR_LIMIT: f64 = 12.0;

/// Mean and log-variance of a factorized Gaussian, any common shape.
/// Construction clamps logvar into [-12, 12]; gradients still flow on the
/// boundary, so a clamped head keeps learning.
#[derive(Clone)]
pub struct DiagGaussianParams {
    mu: Tensor,
    logvar: Tensor,
}

impl DiagGaussianParams {
    pub fn new(mu: Tensor, logvar: Tensor) -> Result<DiagGaussianParams> {
        if mu.shape() != logvar.shape() {
            return Err(Error::InvalidShape(format!(
                "mu {:?} vs logvar {:?}",
                mu.shape(),
                logvar.shape()
            )));
        }
        if logvar.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN log-variance".into()));
        }
        Ok(DiagGaussianParams { mu, logvar: logvar.clamp(-LOGVAR_LIMIT, LOGVAR_LIMIT) })
    }

    pub fn mu(&self) -> &Tensor {
        &self.mu
    }

    pub fn logvar(&self) -> &Tensor {
        &self.logvar
    }

    pub fn shape(&self) -> &[usize] {
        self.mu.shape()
    }
}

/// Reparameterized draw: mu + exp(logvar/2) * noise. The noise comes from
/// the caller so sampling stays deterministic under a fixed stream.
pub fn gaussian_sample(params: &DiagGaussianParams, noise: &Tensor) -> Result<Tensor> {
    if noise.shape() != params.shape() {
        return Err(Error::InvalidShape(format!(
            "noise {:?} vs params {:?}",
            noise.shape(),
            params.shape()
        )));
    }
    params.mu.add(&params.logvar.scale(0.5).exp().mul(noise)?)
}

/// Log-density of `z`, summed over non-batch axes: [N].
pub fn gaussian_log_prob(z: &Tensor, params: &DiagGaussianParams) -> Result<Tensor> {
    if z.shape() != params.shape() {
        return Err(Error::InvalidShape(format!(
            "z {:?} vs params {:?}",
            z.shape(),
            params.shape()
        )));
    }
    let half_log_2pi = 0.5 * libm::log(2.0 * core::f64::consts::PI);
    let d = z.sub(&params.mu)?;
    let quad = d.square().mul(&params.logvar.neg().exp())?.scale(0.5);
    let per_dim = params
        .logvar
        .scale(-0.5)
        .add_scalar(-half_log_2pi)
        .sub(&quad)?;
    Ok(per_dim.sum_per_batch())
}

/// Closed-form KL(q || p) between diagonal Gaussians, summed over non-batch
/// axes: [N]. Written with exp(lq - lp) so q == p collapses to exactly zero.
pub fn gaussian_kl(q: &DiagGaussianParams, p: &DiagGaussianParams) -> Result<Tensor> {
    if q.shape() != p.shape() {
        return Err(Error::InvalidShape(format!("q {:?} vs p {:?}", q.shape(), p.shape())));
    }
    let dl = q.logvar.sub(&p.logvar)?;
    let var_ratio = dl.exp();
    let mean_term = q.mu.sub(&p.mu)?.square().mul(&p.logvar.neg().exp())?;
    let per_dim = var_ratio.add(&mean_term)?.add_scalar(-1.0).sub(&dl)?.scale(0.5);
    Ok(per_dim.sum_per_batch())
}

/// Negative log-likelihood of binary targets under Bernoulli(sigmoid(logit)),
/// summed over non-batch axes: [N]. Stable form softplus(l) - t*l.
pub fn bernoulli_nll(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    if logits.shape() != targets.shape() {
        return Err(Error::InvalidShape(format!(
            "logits {:?} vs targets {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    if targets.data().iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::Contract("Bernoulli targets must be exactly 0 or 1".into()));
    }
    let per_pixel = logits.softplus().sub(&targets.detach().mul(logits)?)?;
    Ok(per_pixel.sum_per_batch())
}

/// Negative log-likelihood of 8-bit targets under a per-pixel 256-way
/// softmax. logits [N,256,H,W], targets [N,1,H,W] with integer values in
/// 0..=255; returns [N].
pub fn categorical_nll(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 4 || s[1] != 256 {
        return Err(Error::InvalidShape(format!("expected [N,256,H,W] logits, got {s:?}")));
    }
    let lse = logits.logsumexp_channels()?;
    let picked = match logits.gather_channels(targets) {
        Ok(t) => t,
        Err(Error::Contract(m)) => return Err(Error::Contract(format!("pixel target {m}"))),
        Err(e) => return Err(e),
    };
    Ok(lse.sub(&picked)?.sum_per_batch())
}

/// Per-pixel log-probabilities of every class: log softmax over channels.
pub fn categorical_log_probs(logits: &Tensor) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 4 {
        return Err(Error::InvalidShape(format!("expected [N,K,H,W] logits, got {s:?}")));
    }
    let lse = logits.logsumexp_channels()?.broadcast_channels(s[1])?;
    logits.sub(&lse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, Stream};
    use crate::tensor::finite_difference_check;
    use proptest::prelude::*;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut s = Stream::new(seed, domain::PROBE, 99);
        Tensor::from_vec(shape, s.normal_vec(shape.iter().product())).unwrap()
    }

    fn params(mu: Tensor, logvar: Tensor) -> DiagGaussianParams {
        DiagGaussianParams::new(mu, logvar).unwrap()
    }

    #[test]
    fn standard_params_pass_noise_through() {
        let n = randn(&[2, 3], 1);
        let p = params(Tensor::zeros(&[2, 3]).unwrap(), Tensor::zeros(&[2, 3]).unwrap());
        let z = gaussian_sample(&p, &n).unwrap();
        assert_eq!(z.data(), n.data());
    }

    #[test]
    fn floored_variance_collapses_to_the_mean() {
        let mu = Tensor::from_vec(&[1, 2], vec![3.0, -1.5]).unwrap();
        let p = params(mu.clone(), Tensor::full(&[1, 2], -40.0).unwrap());
        let z = gaussian_sample(&p, &randn(&[1, 2], 2)).unwrap();
        for (zv, mv) in z.data().iter().zip(mu.data()) {
            assert!((zv - mv).abs() < 0.01, "logvar floor leaked: {zv} vs {mv}");
        }
    }

    #[test]
    fn sample_moments_match_parameters() {
        // Monte-Carlo oracle: mean and std of 1e5 draws within 3 SE.
        let n = 100_000;
        let (mu, sigma) = (0.7, 1.6);
        let logvar = 2.0 * libm::log(sigma);
        let p = params(Tensor::full(&[n, 1], mu).unwrap(), Tensor::full(&[n, 1], logvar).unwrap());
        let noise = randn(&[n, 1], 3);
        let z = gaussian_sample(&p, &noise).unwrap();
        let mean = z.data().iter().sum::<f64>() / n as f64;
        let var = z.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
        let se_mean = sigma / (n as f64).sqrt();
        let se_std = sigma / (2.0 * n as f64).sqrt();
        assert!((mean - mu).abs() < 3.0 * se_mean, "mean {mean}");
        assert!((var.sqrt() - sigma).abs() < 3.0 * se_std, "std {}", var.sqrt());
    }

    #[test]
    fn log_prob_at_reference_points() {
        let p = params(Tensor::zeros(&[1, 1]).unwrap(), Tensor::zeros(&[1, 1]).unwrap());
        let at = |v: f64| {
            gaussian_log_prob(&Tensor::from_vec(&[1, 1], vec![v]).unwrap(), &p).unwrap().item()
        };
        let half_log_2pi = 0.5 * libm::log(2.0 * core::f64::consts::PI);
        assert!((at(0.0) + half_log_2pi).abs() < 1e-15);
        assert!((at(1.0) + half_log_2pi + 0.5).abs() < 1e-15);
    }

    #[test]
    fn log_prob_integrates_to_one() {
        // Simpson quadrature over mu +- 12 sigma on a random 1-dim Gaussian.
        let (mu, logvar) = (0.35, -0.8);
        let sigma = libm::exp(0.5 * logvar);
        let p = params(Tensor::full(&[1, 1], mu).unwrap(), Tensor::full(&[1, 1], logvar).unwrap());
        let (a, b, m) = (mu - 12.0 * sigma, mu + 12.0 * sigma, 4096usize);
        let h = (b - a) / m as f64;
        let f = |z: f64| {
            libm::exp(gaussian_log_prob(&Tensor::from_vec(&[1, 1], vec![z]).unwrap(), &p).unwrap().item())
        };
        let mut acc = f(a) + f(b);
        for i in 1..m {
            acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        let integral = acc * h / 3.0;
        assert!((integral - 1.0).abs() < 1e-6, "integral {integral}");
    }

    #[test]
    fn kl_of_identical_params_is_exactly_zero() {
        let mu = randn(&[3, 4], 4);
        let lv = randn(&[3, 4], 5);
        let q = params(mu.clone(), lv.clone());
        let p = params(mu, lv);
        for v in gaussian_kl(&q, &p).unwrap().data() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn kl_against_unit_gaussian_is_half_mu_squared() {
        let mu = 1.3;
        let q = params(Tensor::full(&[1, 1], mu).unwrap(), Tensor::zeros(&[1, 1]).unwrap());
        let p = params(Tensor::zeros(&[1, 1]).unwrap(), Tensor::zeros(&[1, 1]).unwrap());
        let kl = gaussian_kl(&q, &p).unwrap().item();
        assert!((kl - mu * mu / 2.0).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_monte_carlo_estimate() {
        // E_q[log q - log p] over 1e6 scalar draws, 3 SE tolerance.
        let q = params(Tensor::from_vec(&[1, 1], vec![0.4]).unwrap(), Tensor::from_vec(&[1, 1], vec![0.6]).unwrap());
        let p = params(Tensor::from_vec(&[1, 1], vec![-0.2]).unwrap(), Tensor::from_vec(&[1, 1], vec![-0.3]).unwrap());
        let n = 1_000_000usize;
        let mut s = Stream::new(7, domain::PROBE, 3);
        let (mut acc, mut acc2) = (0.0, 0.0);
        for _ in 0..n {
            let z = gaussian_sample(&q, &Tensor::from_vec(&[1, 1], vec![s.normal()]).unwrap()).unwrap();
            let d = gaussian_log_prob(&z, &q).unwrap().item() - gaussian_log_prob(&z, &p).unwrap().item();
            acc += d;
            acc2 += d * d;
        }
        let mc = acc / n as f64;
        let se = ((acc2 / n as f64 - mc * mc) / n as f64).sqrt();
        let closed = gaussian_kl(&q, &p).unwrap().item();
        assert!((closed - mc).abs() < 3.0 * se, "closed {closed}, mc {mc}, se {se}");
    }

    #[test]
    fn bernoulli_reference_values() {
        let ln2 = core::f64::consts::LN_2;
        let z = Tensor::zeros(&[1, 4]).unwrap();
        let t = Tensor::from_vec(&[1, 4], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let nll = bernoulli_nll(&z, &t).unwrap().item();
        assert!((nll - 4.0 * ln2).abs() < 1e-15, "d pixels at logit 0 give d ln 2");

        let sat = bernoulli_nll(
            &Tensor::full(&[1, 1], 20.0).unwrap(),
            &Tensor::full(&[1, 1], 1.0).unwrap(),
        )
        .unwrap()
        .item();
        assert!(sat > 0.0 && sat < 1e-8, "saturated nll {sat}");

        let bad = Tensor::from_vec(&[1, 1], vec![0.5]).unwrap();
        assert!(matches!(
            bernoulli_nll(&Tensor::zeros(&[1, 1]).unwrap(), &bad),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn categorical_reference_values() {
        let zeros = Tensor::zeros(&[1, 256, 2, 2]).unwrap();
        let t = Tensor::from_vec(&[1, 1, 2, 2], vec![0.0, 17.0, 255.0, 128.0]).unwrap();
        let nll = categorical_nll(&zeros, &t).unwrap().item();
        assert!((nll - 4.0 * libm::log(256.0)).abs() < 1e-12);

        let mut hot = vec![0.0; 256];
        hot[42] = 30.0;
        let hot = Tensor::from_vec(&[1, 256, 1, 1], hot).unwrap();
        let t42 = Tensor::from_vec(&[1, 1, 1, 1], vec![42.0]).unwrap();
        // Residual mass is 255 e^-30, about 2.4e-11.
        let sat = categorical_nll(&hot, &t42).unwrap().item();
        assert!(sat >= 0.0 && sat < 1e-9, "saturated nll {sat}");

        let out_of_range = Tensor::from_vec(&[1, 1, 1, 1], vec![256.0]).unwrap();
        assert!(matches!(categorical_nll(&hot, &out_of_range), Err(Error::Contract(_))));
    }

    #[test]
    fn categorical_matches_direct_softmax() {
        let logits = randn(&[2, 256, 3, 3], 8);
        let mut tv = Vec::new();
        let mut s = Stream::new(9, domain::PROBE, 4);
        for _ in 0..18 {
            tv.push(s.below(256) as f64);
        }
        let targets = Tensor::from_vec(&[2, 1, 3, 3], tv.clone()).unwrap();
        let nll = categorical_nll(&logits, &targets).unwrap();
        // Direct oracle: normalize probabilities per pixel, then -log.
        let mut want = [0.0f64; 2];
        for i in 0..2 {
            for pidx in 0..9 {
                let mut probs = [0.0f64; 256];
                let mut norm = 0.0;
                for c in 0..256 {
                    probs[c] = libm::exp(logits.data()[(i * 256 + c) * 9 + pidx]);
                    norm += probs[c];
                }
                want[i] -= libm::log(probs[tv[i * 9 + pidx] as usize] / norm);
            }
        }
        for i in 0..2 {
            assert!((nll.data()[i] - want[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn categorical_log_probs_normalize() {
        let logits = randn(&[1, 256, 2, 2], 10).scale(3.0);
        let lp = categorical_log_probs(&logits).unwrap();
        for pidx in 0..4 {
            let total: f64 = (0..256).map(|c| libm::exp(lp.data()[c * 4 + pidx])).sum();
            assert!((total - 1.0).abs() < 1e-10, "pixel {pidx} sums to {total}");
        }
    }

    #[test]
    fn all_heads_pass_finite_difference_checks() {
        let mu = randn(&[2, 3], 11).scale(0.5);
        let lv = randn(&[2, 3], 12).scale(0.3);
        let noise = randn(&[2, 3], 13);
        let z = randn(&[2, 3], 14);

        let e = finite_difference_check(
            |m| Ok(gaussian_sample(&DiagGaussianParams::new(m.clone(), lv.clone())?, &noise)?.square().sum_all()),
            &mu,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-4, "sample/mu fd {e}");
        let e = finite_difference_check(
            |l| Ok(gaussian_sample(&DiagGaussianParams::new(mu.clone(), l.clone())?, &noise)?.square().sum_all()),
            &lv,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-4, "sample/logvar fd {e}");
        let e = finite_difference_check(
            |z| Ok(gaussian_log_prob(z, &DiagGaussianParams::new(mu.clone(), lv.clone())?)?.sum_all()),
            &z,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-4, "logprob/z fd {e}");
        let e = finite_difference_check(
            |l| Ok(gaussian_log_prob(&z, &DiagGaussianParams::new(mu.clone(), l.clone())?)?.sum_all()),
            &lv,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-4, "logprob/logvar fd {e}");

        let (pmu, plv) = (randn(&[2, 3], 15).scale(0.5), randn(&[2, 3], 16).scale(0.3));
        let e = finite_difference_check(
            |m| {
                Ok(gaussian_kl(
                    &DiagGaussianParams::new(m.clone(), lv.clone())?,
                    &DiagGaussianParams::new(pmu.clone(), plv.clone())?,
                )?
                .sum_all())
            },
            &mu,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-4, "kl/qmu fd {e}");
        let e = finite_difference_check(
            |l| {
                Ok(gaussian_kl(
                    &DiagGaussianParams::new(mu.clone(), lv.clone())?,
                    &DiagGaussianParams::new(pmu.clone(), l.clone())?,
                )?
                .sum_all())
            },
            &plv,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-4, "kl/plogvar fd {e}");

        let targets = Tensor::from_vec(&[2, 3], vec![0.0, 1.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let logits = randn(&[2, 3], 17);
        let e = finite_difference_check(
            |l| Ok(bernoulli_nll(l, &targets)?.sum_all()),
            &logits,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-4, "bernoulli fd {e}");

        let clogits = randn(&[1, 256, 2, 2], 18);
        let ct = Tensor::from_vec(&[1, 1, 2, 2], vec![3.0, 250.0, 77.0, 0.0]).unwrap();
        let e = finite_difference_check(
            |l| Ok(categorical_nll(l, &ct)?.sum_all()),
            &clogits,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-4, "categorical fd {e}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn kl_is_nonnegative_and_detects_difference(
            mq in -3.0f64..3.0, mp in -3.0f64..3.0,
            lq in -2.0f64..2.0, lp in -2.0f64..2.0,
        ) {
            let q = params(Tensor::full(&[1, 1], mq).unwrap(), Tensor::full(&[1, 1], lq).unwrap());
            let p = params(Tensor::full(&[1, 1], mp).unwrap(), Tensor::full(&[1, 1], lp).unwrap());
            let kl = gaussian_kl(&q, &p).unwrap().item();
            prop_assert!(kl >= -1e-12, "negative KL {kl}");
            if (mq - mp).abs() > 0.5 || (lq - lp).abs() > 0.5 {
                prop_assert!(kl > 1e-4, "KL {kl} too small for clearly distinct params");
            }
        }
    }
}
