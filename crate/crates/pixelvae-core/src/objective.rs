//! Training and evaluation objectives: the per-level ELBO decomposition
//! and importance-sampled marginal NLL. All values are in nats per image.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::dist::{
    bernoulli_nll, categorical_nll, gaussian_kl, gaussian_log_prob, gaussian_sample,
    DiagGaussianParams,
};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, OutputFamily};
use crate::rng::{domain, Stream};
use crate::tensor::Tensor;

/// One evaluation of the bound. `total` is built from the other fields by
/// the same additions, in level order, so the identity
/// `total == reconstruction_nll + sum(kl_per_level)` holds exactly.
pub struct ElboBreakdown {
    /// Batch-mean negative log-likelihood of the pixels given z1.
    pub reconstruction_nll: Tensor,
    /// Batch-mean KL of each posterior level against its prior, bottom-up.
    pub kl_per_level: Vec<Tensor>,
    pub total: Tensor,
}

impl ElboBreakdown {
    pub fn reconstruction(&self) -> f64 {
        self.reconstruction_nll.item()
    }

    pub fn kl(&self, level: usize) -> f64 {
        self.kl_per_level[level].item()
    }

    pub fn total_value(&self) -> f64 {
        self.total.item()
    }
}

/// Output-family NLL of `logits` against the image batch, per image: [N].
pub fn reconstruction_nll_per_image(
    config: &ModelConfig,
    logits: &Tensor,
    x: &Tensor,
) -> Result<Tensor> {
    match config.output {
        OutputFamily::Bernoulli => bernoulli_nll(logits, x),
        OutputFamily::Softmax256 => categorical_nll(logits, &byte_targets(x)?),
    }
}

/// Recover byte indices from intensities stored as k/255. Rejects inputs
/// that were never byte-valued.
pub fn byte_targets(x: &Tensor) -> Result<Tensor> {
    let data: Vec<f64> = x
        .data()
        .iter()
        .map(|&v| {
            let b = libm::round(v * 255.0);
            if !(0.0..=255.0).contains(&b) || libm::fabs(v * 255.0 - b) > 1e-6 {
                return Err(Error::Contract(format!(
                    "intensity {v} is not a byte value over 255"
                )));
            }
            Ok(b)
        })
        .collect::<Result<_>>()?;
    Tensor::from_vec(x.shape(), data)
}

/// Unit-normal noise tensors matching the model's latent shapes, drawn in
/// level order from `stream`.
pub fn draw_level_noise(config: &ModelConfig, n: usize, stream: &mut Stream) -> Result<Vec<Tensor>> {
    config
        .levels
        .iter()
        .map(|l| Tensor::from_vec(&l.z_shape(n), stream.normal_vec(n * l.dim())))
        .collect()
}

/// Single-sample reparameterized bound. Posteriors come from `encode`;
/// each level's KL is the closed-form Gaussian KL against its prior,
/// evaluated at the sampled level above (the top level against the unit
/// Gaussian). Fully differentiable with respect to the model parameters.
pub fn elbo(model: &Model, x: &Tensor, noise: &[Tensor]) -> Result<ElboBreakdown> {
    let q = model.encode(x)?;
    if noise.len() != q.len() {
        return Err(Error::InvalidShape(format!(
            "{} noise tensors for {} latent levels",
            noise.len(),
            q.len()
        )));
    }
    let n = x.shape()[0];
    let z: Vec<Tensor> = q
        .iter()
        .zip(noise)
        .map(|(qi, ni)| gaussian_sample(qi, ni))
        .collect::<Result<_>>()?;
    let logits = model.decode_pixel_logits(x, z.first())?;
    let reconstruction_nll = reconstruction_nll_per_image(&model.config, &logits, x)?.mean_all();
    let mut kl_per_level = Vec::new();
    match q.len() {
        0 => {}
        1 => kl_per_level.push(gaussian_kl(&q[0], &model.top_prior(n)?)?.mean_all()),
        2 => {
            let prior1 = model.latent_prior_params(&z[1], &z[0])?;
            kl_per_level.push(gaussian_kl(&q[0], &prior1)?.mean_all());
            kl_per_level.push(gaussian_kl(&q[1], &model.top_prior(n)?)?.mean_all());
        }
        more => {
            return Err(Error::Contract(format!("unsupported latent depth {more}")));
        }
    }
    let mut total = reconstruction_nll.clone();
    for kl in &kl_per_level {
        total = total.add(kl)?;
    }
    Ok(ElboBreakdown { reconstruction_nll, kl_per_level, total })
}

/// Reconstruction plus `beta` times every KL term. `beta == 1` returns the
/// exact `total`; smaller values are the warm-up loss, never the reported
/// bound.
pub fn weighted_loss(breakdown: &ElboBreakdown, beta: f64) -> Result<Tensor> {
    if beta == 1.0 {
        return Ok(breakdown.total.clone());
    }
    let mut t = breakdown.reconstruction_nll.clone();
    for kl in &breakdown.kl_per_level {
        t = t.add(&kl.scale(beta))?;
    }
    Ok(t)
}

/// Importance-sampled marginal NLL per image, `-[logsumexp_k log w_k - log K]`
/// with `w_k = p(x|z1) p(z) / q(z|x)` over K joint posterior samples.
///
/// The noise for datapoint `d` (at global index `first_index + d`) and
/// sample `s` comes from its own stream, so sharding a dataset across
/// calls or threads cannot change any estimate.
pub fn importance_nll(
    model: &Model,
    x: &Tensor,
    k: usize,
    seed: u64,
    first_index: u64,
) -> Result<Vec<f64>> {
    importance_nll_chunked(model, x, k, seed, first_index, 64)
}

/// As [`importance_nll`], evaluating `chunk` samples per forward pass to
/// bound memory. The chunk size never changes the result.
pub fn importance_nll_chunked(
    model: &Model,
    x: &Tensor,
    k: usize,
    seed: u64,
    first_index: u64,
    chunk: usize,
) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Contract("importance sampling needs K >= 1".into()));
    }
    if chunk == 0 {
        return Err(Error::Contract("chunk size must be positive".into()));
    }
    let m = model.detached();
    let n = x.shape()[0];
    if m.config.levels.is_empty() {
        // No latents: every sample carries the same exact weight p(x).
        let logits = m.decode_pixel_logits(x, None)?;
        return Ok(reconstruction_nll_per_image(&m.config, &logits, x)?.data().to_vec());
    }
    let q = m.encode(x)?;
    let levels = &m.config.levels;
    let mut logw = vec![vec![0.0f64; k]; n];
    let mut start = 0;
    while start < k {
        let cs = chunk.min(k - start);
        let rows = cs * n;
        let x_rep = tile_batch(x, cs)?;
        let q_rep: Vec<DiagGaussianParams> = q
            .iter()
            .map(|p| {
                DiagGaussianParams::new(tile_batch(p.mu(), cs)?, tile_batch(p.logvar(), cs)?)
            })
            .collect::<Result<_>>()?;
        let mut noise_data: Vec<Vec<f64>> =
            levels.iter().map(|l| Vec::with_capacity(rows * l.dim())).collect();
        for s in 0..cs {
            for d in 0..n {
                let index = (first_index + d as u64) * k as u64 + (start + s) as u64;
                let mut st = Stream::new(seed, domain::IMPORTANCE, index);
                for (li, l) in levels.iter().enumerate() {
                    noise_data[li].extend(st.normal_vec(l.dim()));
                }
            }
        }
        let z: Vec<Tensor> = levels
            .iter()
            .zip(noise_data)
            .zip(&q_rep)
            .map(|((l, nd), qi)| gaussian_sample(qi, &Tensor::from_vec(&l.z_shape(rows), nd)?))
            .collect::<Result<_>>()?;

        let logits = m.decode_pixel_logits(&x_rep, z.first())?;
        let mut lw = reconstruction_nll_per_image(&m.config, &logits, &x_rep)?.neg();
        match levels.len() {
            1 => {
                lw = lw.add(&gaussian_log_prob(&z[0], &m.top_prior(rows)?)?)?;
            }
            _ => {
                let prior1 = m.latent_prior_params(&z[1], &z[0])?;
                lw = lw
                    .add(&gaussian_log_prob(&z[0], &prior1)?)?
                    .add(&gaussian_log_prob(&z[1], &m.top_prior(rows)?)?)?;
            }
        }
        for (zi, qi) in z.iter().zip(&q_rep) {
            lw = lw.sub(&gaussian_log_prob(zi, qi)?)?;
        }
        for s in 0..cs {
            for d in 0..n {
                logw[d][start + s] = lw.data()[s * n + d];
            }
        }
        start += cs;
    }
    let log_k = libm::log(k as f64);
    Ok(logw.iter().map(|ws| -(logsumexp(ws) - log_k)).collect())
}

/// Repeat the whole batch `times` times along the batch axis.
fn tile_batch(t: &Tensor, times: usize) -> Result<Tensor> {
    let mut shape = t.shape().to_vec();
    shape[0] *= times;
    Tensor::from_vec(&shape, t.data().repeat(times))
}

fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + libm::log(v.iter().map(|&x| libm::exp(x - m)).sum::<f64>())
}
