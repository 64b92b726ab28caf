//! Adam with optional whole-gradient norm clipping.
//!
//! `adam_step` advances every model parameter in place.  With `t` the step
//! count after incrementing, each coordinate follows the bias-corrected rule
//!
//! ```text
//! m ← β₁ m + (1 − β₁) g        m̂ = m / (1 − β₁ᵗ)
//! v ← β₂ v + (1 − β₂) g²       v̂ = v / (1 − β₂ᵗ)
//! w ← w − lr · m̂ / (√v̂ + ε)
//! ```
//!
//! where `g` is the clipped gradient.  Clipping rescales the gradient of all
//! parameters jointly so its Euclidean norm does not exceed `clip_norm`; the
//! moments therefore see the clipped values.  A parameter that the gradient
//! map does not mention contributed nothing to the loss this step and is
//! treated as having a zero gradient — its moments still decay.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::GradientMap;

/// Step-size and moment hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Joint gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(beta.is_finite() && (0.0..1.0).contains(&beta)) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {beta}")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if let Some(limit) = self.clip_norm {
            if !(limit.is_finite() && limit > 0.0) {
                return Err(Error::Config(format!("clip norm must be positive, got {limit}")));
            }
        }
        Ok(())
    }
}

/// Moment buffers keyed by parameter name.
///
/// A buffer appears the first time its parameter is stepped and afterwards
/// always matches the parameter's length.  `step` counts completed calls to
/// [`adam_step`] and drives the bias correction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> AdamState {
        AdamState::default()
    }
}

/// One Adam update over every parameter of `model`.
///
/// Fails with [`Error::Training`] naming the offending parameter if any
/// gradient entry is non-finite; the model and state are untouched in that
/// case.  Restored moment buffers whose length disagrees with the model are a
/// contract violation.
pub fn adam_step(
    model: &mut Model,
    grads: &GradientMap,
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    hyper.validate()?;

    // Gather and vet all gradients before touching any buffer so a failure
    // cannot leave the step half-applied.
    let mut gathered: Vec<(String, Option<Vec<f64>>)> = Vec::new();
    let mut sq_norm = 0.0;
    for (name, param) in model.params() {
        let grad = match grads.wrt(param) {
            Some(g) => {
                for &value in g.data() {
                    if !value.is_finite() {
                        return Err(Error::Training(format!(
                            "non-finite gradient for parameter '{name}'"
                        )));
                    }
                    sq_norm += value * value;
                }
                Some(g.data().to_vec())
            }
            None => None,
        };
        gathered.push((name.clone(), grad));
    }

    let norm = libm::sqrt(sq_norm);
    let scale = match hyper.clip_norm {
        Some(limit) if norm > limit => limit / norm,
        _ => 1.0,
    };

    state.step += 1;
    let m_correction = 1.0 - pow_int(hyper.beta1, state.step);
    let v_correction = 1.0 - pow_int(hyper.beta2, state.step);

    for (name, grad) in gathered {
        let current = model.params()[&name].data().to_vec();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; current.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; current.len()]);
        if m.len() != current.len() || v.len() != current.len() {
            return Err(Error::Contract(format!(
                "moment buffers for '{name}' hold {} values, parameter has {}",
                m.len(),
                current.len()
            )));
        }
        let mut next = Vec::with_capacity(current.len());
        for i in 0..current.len() {
            let g = scale * grad.as_ref().map_or(0.0, |g| g[i]);
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
            let m_hat = m[i] / m_correction;
            let v_hat = v[i] / v_correction;
            next.push(current[i] - hyper.learning_rate * m_hat / (libm::sqrt(v_hat) + hyper.eps));
        }
        model.replace_param(&name, next)?;
    }
    Ok(())
}

/// Exact-arithmetic β^t by binary exponentiation; the bias correction must be
/// the same pure function of (β, t) everywhere so a resumed run replays the
/// original bit for bit.
fn pow_int(base: f64, mut exponent: u64) -> f64 {
    let mut acc = 1.0;
    let mut factor = base;
    while exponent > 0 {
        if exponent & 1 == 1 {
            acc *= factor;
        }
        factor *= factor;
        exponent >>= 1;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig, OutputFamily, Variant};
    use crate::tensor::Tensor;
    use alloc::string::ToString;
    use alloc::vec;
    use alloc::vec::Vec;

    /// Smallest trainable model: a learned logit map and nothing else.
    fn bias_only_model(height: usize, width: usize) -> Model {
        let config = ModelConfig {
            image_channels: 1,
            image_height: height,
            image_width: width,
            levels: vec![],
            pixel_layers: 0,
            prior_layers: 0,
            hidden: 1,
            variant: Variant::PixelcnnOnly,
            output: OutputFamily::Bernoulli,
        };
        build_model(config, 11).unwrap()
    }

    fn bias(model: &Model) -> Vec<f64> {
        model.params()["dec.bias"].data().to_vec()
    }

    fn logits(model: &Model) -> Tensor {
        let x = Tensor::zeros(&[1, 1, model.config.image_height, model.config.image_width])
            .unwrap();
        model.decode_pixel_logits(&x, None).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_fresh_moments_untouched() {
        let mut model = bias_only_model(2, 2);
        let before = bias(&model);
        let grads = logits(&model).scale(0.0).sum_all().backward().unwrap();
        let mut state = AdamState::new();
        adam_step(&mut model, &grads, &mut state, &AdamHyper::default()).unwrap();
        assert_eq!(bias(&model), before);
        assert_eq!(state.step, 1);
        assert!(state.m["dec.bias"].iter().all(|&m| m == 0.0));
        assert!(state.v["dec.bias"].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gradient_decays_existing_moments_by_beta() {
        let hyper = AdamHyper::default();
        let mut model = bias_only_model(2, 2);
        let mut state = AdamState::new();
        let grads = logits(&model).scale(2.5).sum_all().backward().unwrap();
        adam_step(&mut model, &grads, &mut state, &hyper).unwrap();
        let (m1, v1) = (state.m["dec.bias"].clone(), state.v["dec.bias"].clone());

        let grads = logits(&model).scale(0.0).sum_all().backward().unwrap();
        adam_step(&mut model, &grads, &mut state, &hyper).unwrap();
        for i in 0..m1.len() {
            assert_eq!(state.m["dec.bias"][i], hyper.beta1 * m1[i]);
            assert_eq!(state.v["dec.bias"][i], hyper.beta2 * v1[i]);
        }
    }

    #[test]
    fn first_step_from_zero_state_moves_by_learning_rate_against_the_gradient() {
        // Bias correction makes the first update lr·g/(|g| + ε) ≈ lr·sign(g).
        let hyper = AdamHyper::default();
        for grad_value in [2.5, -2.5] {
            let mut model = bias_only_model(2, 2);
            let before = bias(&model);
            let grads = logits(&model).scale(grad_value).sum_all().backward().unwrap();
            let mut state = AdamState::new();
            adam_step(&mut model, &grads, &mut state, &hyper).unwrap();
            for (after, before) in bias(&model).iter().zip(&before) {
                let moved = after - before;
                let want = -hyper.learning_rate * grad_value.signum();
                assert!(
                    (moved - want).abs() < hyper.learning_rate * 1e-7,
                    "moved {moved}, want {want}"
                );
            }
        }
    }

    #[test]
    fn quadratic_bowl_matches_a_scalar_recurrence_and_converges() {
        // Minimize (w − 3)² from w = 0 with lr = 0.1.  A plain-f64 replica of
        // the update rule must agree to rounding at every step.
        let hyper = AdamHyper {
            learning_rate: 0.1,
            clip_norm: None,
            ..AdamHyper::default()
        };
        let mut model = bias_only_model(1, 1);
        assert_eq!(bias(&model), vec![0.0]);
        let mut state = AdamState::new();
        let target = Tensor::from_vec(&[1, 1, 1, 1], vec![3.0]).unwrap();

        let (mut w, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=200u32 {
            let loss = logits(&model).sub(&target).unwrap().square().sum_all();
            let grads = loss.backward().unwrap();
            adam_step(&mut model, &grads, &mut state, &hyper).unwrap();

            let g = 2.0 * (w - 3.0);
            m = hyper.beta1 * m + (1.0 - hyper.beta1) * g;
            v = hyper.beta2 * v + (1.0 - hyper.beta2) * g * g;
            let m_hat = m / (1.0 - pow_int(hyper.beta1, u64::from(t)));
            let v_hat = v / (1.0 - pow_int(hyper.beta2, u64::from(t)));
            w -= hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.eps);

            assert!(
                (bias(&model)[0] - w).abs() <= 1e-12,
                "step {t}: model {} vs recurrence {w}",
                bias(&model)[0]
            );
        }
        assert!((w - 3.0).abs() < 0.05, "recurrence ended at {w}");
        assert!((bias(&model)[0] - 3.0).abs() < 0.05, "model ended at {}", bias(&model)[0]);
    }

    #[test]
    fn clipping_rescales_the_joint_gradient_norm() {
        // Four entries of 13 have norm 26; clipping at 5 rescales each to 2.5,
        // which must then step exactly like an unclipped gradient of 2.5.
        let hyper = AdamHyper::default();
        let mut clipped = bias_only_model(2, 2);
        let grads = logits(&clipped).scale(13.0).sum_all().backward().unwrap();
        adam_step(&mut clipped, &grads, &mut AdamState::new(), &hyper).unwrap();

        let mut reference = bias_only_model(2, 2);
        let grads = logits(&reference).scale(2.5).sum_all().backward().unwrap();
        adam_step(&mut reference, &grads, &mut AdamState::new(), &hyper).unwrap();

        assert_eq!(bias(&clipped), bias(&reference));
    }

    #[test]
    fn clipping_disabled_stores_raw_gradient_moments() {
        // One step with constant gradient 13: unclipped moments hold
        // (1 − β₁)·13, while the default cap of 5 over a norm of 26 leaves
        // (1 − β₁)·2.5 behind.
        let mut unclipped = bias_only_model(2, 2);
        let grads = logits(&unclipped).scale(13.0).sum_all().backward().unwrap();
        let mut raw_state = AdamState::new();
        let no_clip = AdamHyper { clip_norm: None, ..AdamHyper::default() };
        adam_step(&mut unclipped, &grads, &mut raw_state, &no_clip).unwrap();

        let mut clipped = bias_only_model(2, 2);
        let grads = logits(&clipped).scale(13.0).sum_all().backward().unwrap();
        let mut clipped_state = AdamState::new();
        adam_step(&mut clipped, &grads, &mut clipped_state, &AdamHyper::default()).unwrap();

        for &m in raw_state.m["dec.bias"].iter() {
            assert!((m - 0.1 * 13.0).abs() < 1e-12, "raw moment {m}");
        }
        for &m in clipped_state.m["dec.bias"].iter() {
            assert!((m - 0.1 * 2.5).abs() < 1e-12, "clipped moment {m}");
        }
    }

    #[test]
    fn non_finite_gradient_fails_naming_the_parameter_and_changes_nothing() {
        let mut model = bias_only_model(1, 1);
        model.replace_param("dec.bias", vec![800.0]).unwrap();
        let grads = logits(&model).exp().sum_all().backward().unwrap();
        let mut state = AdamState::new();
        let err = adam_step(&mut model, &grads, &mut state, &AdamHyper::default()).unwrap_err();
        match err {
            Error::Training(message) => assert!(message.contains("dec.bias"), "{message}"),
            other => panic!("want Training, got {other:?}"),
        }
        assert_eq!(bias(&model), vec![800.0]);
        assert_eq!(state.step, 0);
        assert!(state.m.is_empty());
    }

    #[test]
    fn hyper_validation_rejects_bad_rates() {
        for hyper in [
            AdamHyper { learning_rate: 0.0, ..AdamHyper::default() },
            AdamHyper { learning_rate: -1e-3, ..AdamHyper::default() },
            AdamHyper { beta1: 1.0, ..AdamHyper::default() },
            AdamHyper { beta2: -0.1, ..AdamHyper::default() },
            AdamHyper { eps: 0.0, ..AdamHyper::default() },
            AdamHyper { clip_norm: Some(0.0), ..AdamHyper::default() },
        ] {
            let mut model = bias_only_model(1, 1);
            let grads = logits(&model).sum_all().backward().unwrap();
            let err =
                adam_step(&mut model, &grads, &mut AdamState::new(), &hyper).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{:?}", err.to_string());
        }
    }
}
