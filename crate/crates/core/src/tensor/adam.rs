//! Adam optimizer with standard bias correction.

use super::element::Element;
use super::TensorError;

/// Adam hyperparameters. Stored in f64 and converted at update time so the
/// same values drive both precisions identically.
#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for a fixed list of parameters, plus the
/// shared step counter. Parameter order is fixed at construction and every
/// [`adam_step`] call must present the same parameters in the same order.
#[derive(Clone, Debug)]
pub struct OptimizerState<E> {
    pub m: Vec<Vec<E>>,
    pub v: Vec<Vec<E>>,
    pub step: u64,
    pub hyper: AdamHyper,
}

impl<E: Element> OptimizerState<E> {
    pub fn new(param_lengths: impl IntoIterator<Item = usize>, hyper: AdamHyper) -> Self {
        let m: Vec<Vec<E>> = param_lengths
            .into_iter()
            .map(|len| vec![E::zero(); len])
            .collect();
        let v = m.clone();
        OptimizerState {
            m,
            v,
            step: 0,
            hyper,
        }
    }
}

/// One parameter's view for an optimizer step. A `None` gradient means the
/// backward pass never reached the parameter and is treated as all zeros.
pub struct AdamEntry<'a, E> {
    pub name: &'a str,
    pub param: &'a mut [E],
    pub grad: Option<&'a [E]>,
}

/// Apply one bias-corrected Adam update to every entry.
///
/// Any non-finite gradient value aborts the whole step (no parameter or
/// moment is touched) and reports the offending parameter by name.
pub fn adam_step<E: Element>(
    state: &mut OptimizerState<E>,
    mut entries: Vec<AdamEntry<'_, E>>,
) -> Result<(), TensorError> {
    assert_eq!(
        entries.len(),
        state.m.len(),
        "optimizer state tracks {} parameters, got {}",
        state.m.len(),
        entries.len()
    );
    for entry in &entries {
        if let Some(grad) = entry.grad {
            assert_eq!(
                grad.len(),
                entry.param.len(),
                "gradient length mismatch for parameter '{}'",
                entry.name
            );
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(TensorError::NonFiniteGradient {
                    name: entry.name.to_string(),
                });
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let hyper = state.hyper;
    let beta1 = E::from_f64(hyper.beta1);
    let beta2 = E::from_f64(hyper.beta2);
    let one_m_beta1 = E::from_f64(1.0 - hyper.beta1);
    let one_m_beta2 = E::from_f64(1.0 - hyper.beta2);
    let inv_bc1 = E::from_f64(1.0 / (1.0 - hyper.beta1.powi(t)));
    let inv_bc2 = E::from_f64(1.0 / (1.0 - hyper.beta2.powi(t)));
    let lr = E::from_f64(hyper.lr);
    let eps = E::from_f64(hyper.eps);

    for (i, entry) in entries.iter_mut().enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        assert_eq!(
            m.len(),
            entry.param.len(),
            "optimizer slot {i} sized for a different parameter than '{}'",
            entry.name
        );
        for (j, p) in entry.param.iter_mut().enumerate() {
            let g = entry.grad.map_or(E::zero(), |grad| grad[j]);
            m[j] = beta1 * m[j] + one_m_beta1 * g;
            v[j] = beta2 * v[j] + one_m_beta2 * g * g;
            let m_hat = m[j] * inv_bc1;
            let v_hat = v[j] * inv_bc2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_fresh_parameters_unchanged() {
        let mut state: OptimizerState<f64> = OptimizerState::new([2], AdamHyper::default());
        let mut p = vec![1.5, -0.5];
        adam_step(
            &mut state,
            vec![AdamEntry {
                name: "w",
                param: &mut p,
                grad: Some(&[0.0, 0.0]),
            }],
        )
        .unwrap();
        assert_eq!(p, vec![1.5, -0.5]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn missing_gradient_acts_like_zero() {
        let mut state: OptimizerState<f64> = OptimizerState::new([1], AdamHyper::default());
        let mut p = vec![3.0];
        adam_step(
            &mut state,
            vec![AdamEntry {
                name: "w",
                param: &mut p,
                grad: None,
            }],
        )
        .unwrap();
        assert_eq!(p, vec![3.0]);
    }

    #[test]
    fn first_step_with_unit_gradient_moves_by_learning_rate() {
        let mut state: OptimizerState<f64> = OptimizerState::new([1], AdamHyper::default());
        let mut p = vec![0.0];
        adam_step(
            &mut state,
            vec![AdamEntry {
                name: "w",
                param: &mut p,
                grad: Some(&[1.0]),
            }],
        )
        .unwrap();
        // m_hat = 1, v_hat = 1, so the update is -lr / (1 + eps).
        assert!((p[0] + 0.001).abs() < 1e-9, "got {}", p[0]);
    }

    #[test]
    fn identical_runs_are_bitwise_equal() {
        let run = || {
            let mut state: OptimizerState<f32> = OptimizerState::new([3], AdamHyper::default());
            let mut p = vec![0.5_f32, -1.0, 2.0];
            for step in 0..50 {
                let g = [0.3 + step as f32 * 0.01, -0.2, 0.05];
                adam_step(
                    &mut state,
                    vec![AdamEntry {
                        name: "w",
                        param: &mut p,
                        grad: Some(&g),
                    }],
                )
                .unwrap();
            }
            p
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn non_finite_gradient_aborts_naming_the_parameter() {
        let mut state: OptimizerState<f64> = OptimizerState::new([1, 1], AdamHyper::default());
        let mut p0 = vec![1.0];
        let mut p1 = vec![2.0];
        let err = adam_step(
            &mut state,
            vec![
                AdamEntry {
                    name: "conv1.weight",
                    param: &mut p0,
                    grad: Some(&[0.1]),
                },
                AdamEntry {
                    name: "conv2.weight",
                    param: &mut p1,
                    grad: Some(&[f64::NAN]),
                },
            ],
        )
        .unwrap_err();
        match err {
            TensorError::NonFiniteGradient { name } => assert_eq!(name, "conv2.weight"),
            other => panic!("unexpected error {other:?}"),
        }
        // Nothing was applied, not even to the healthy parameter.
        assert_eq!(p0, vec![1.0]);
        assert_eq!(p1, vec![2.0]);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn descends_a_quadratic_to_its_minimum() {
        let hyper = AdamHyper {
            lr: 0.01,
            ..AdamHyper::default()
        };
        let mut state: OptimizerState<f64> = OptimizerState::new([1], hyper);
        let mut p = vec![0.0];
        for _ in 0..3000 {
            let g = [2.0 * (p[0] - 3.0)];
            adam_step(
                &mut state,
                vec![AdamEntry {
                    name: "w",
                    param: &mut p,
                    grad: Some(&g),
                }],
            )
            .unwrap();
        }
        assert!((p[0] - 3.0).abs() < 0.05, "got {}", p[0]);
    }
}
