use super::{Array, Tensor};
use crate::error::{Error, Result};

/// One functional gradient-descent step, `p - lr * g` for every pair.
///
/// The results are new graph nodes, so a loss evaluated at them can still be
/// differentiated with respect to the original `params`.
pub fn sgd_update(params: &[Tensor], grads: &[Tensor], lr: f64) -> Result<Vec<Tensor>> {
    if params.len() != grads.len() {
        return Err(Error::Alignment {
            expected: params.len(),
            got: grads.len(),
        });
    }
    params
        .iter()
        .zip(grads)
        .map(|(p, g)| p.sub(&g.mul_scalar(lr)))
        .collect()
}

/// Bias-corrected Adam moments for a list of parameter arrays.
#[derive(Clone, Debug)]
pub struct AdamState {
    first: Vec<Array>,
    second: Vec<Array>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &[Array]) -> Self {
        let zeros = |p: &Array| Array::zeros(p.shape());
        AdamState {
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update in place. Not part of any graph.
    pub fn step(&mut self, params: &mut [Array], grads: &[Array], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::Alignment {
                expected: self.first.len(),
                got: if params.len() != self.first.len() {
                    params.len()
                } else {
                    grads.len()
                },
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    lhs: m.shape().to_vec(),
                    rhs: if p.shape() != m.shape() { p.shape() } else { g.shape() }.to_vec(),
                });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward, Graph};

    #[test]
    fn sgd_on_shifted_square() {
        // L = (θ - 1)^2 at θ = 0, α = 0.1 -> 0.2
        let g = Graph::new();
        let theta = g.scalar(0.0);
        let one = g.constant(Array::scalar(1.0));
        let d = theta.sub(&one).unwrap();
        let loss = d.mul(&d).unwrap();
        let grads = backward(&loss, std::slice::from_ref(&theta), false).unwrap();
        let next = sgd_update(&[theta], &grads, 0.1).unwrap();
        assert!((next[0].item() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_rate_keeps_values() {
        let g = Graph::new();
        let p = g.leaf(Array::new(vec![3], vec![1.0, -2.0, 3.5]).unwrap());
        let gr = g.constant(Array::new(vec![3], vec![7.0, 8.0, 9.0]).unwrap());
        let next = sgd_update(std::slice::from_ref(&p), &[gr], 0.0).unwrap();
        assert_eq!(next[0].value().data(), p.value().data());
    }

    #[test]
    fn sgd_alignment_error() {
        let g = Graph::new();
        let p = g.scalar(1.0);
        assert!(matches!(
            sgd_update(&[p.clone(), p], &[], 0.1),
            Err(Error::Alignment { expected: 2, got: 0 })
        ));
    }

    #[test]
    fn sgd_leaves_inputs_untouched() {
        let g = Graph::new();
        let before = Array::new(vec![2], vec![0.123456789, -9.87654321]).unwrap();
        let p = g.leaf(before.clone());
        let gr = g.constant(Array::new(vec![2], vec![1.0, 1.0]).unwrap());
        let _ = sgd_update(std::slice::from_ref(&p), &[gr], 0.5).unwrap();
        let after = p.value();
        for (a, b) in after.data().iter().zip(before.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn adam_first_step() {
        let mut params = vec![Array::scalar(0.0)];
        let mut state = AdamState::new(&params);
        state.step(&mut params, &[Array::scalar(2.0)], 1e-3).unwrap();
        // m̂ = 2, v̂ = 4 -> Δ = -1e-3 * 2 / (2 + 1e-8)
        let expected = -1e-3 * 2.0 / (2.0 + 1e-8);
        assert!((params[0].item() - expected).abs() < 1e-18);
        assert!((params[0].item() + 9.99999e-4).abs() < 1e-9);
        assert_eq!(state.steps(), 1);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut params = vec![Array::scalar(0.75)];
        let mut state = AdamState::new(&params);
        state.step(&mut params, &[Array::scalar(0.0)], 1e-3).unwrap();
        assert_eq!(params[0].item(), 0.75);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut params = vec![Array::zeros(&[2])];
        let mut state = AdamState::new(&params);
        assert!(state.step(&mut params, &[Array::zeros(&[3])], 1e-3).is_err());
    }

    #[test]
    fn adam_shrinks_quadratic() {
        // Scalar simulation of ½θ² (gradient θ) from θ = 1.
        let mut params = vec![Array::scalar(1.0)];
        let mut state = AdamState::new(&params);
        let mut trace = vec![1.0];
        for _ in 0..100 {
            let g = params[0].clone();
            state.step(&mut params, &[g], 5e-3).unwrap();
            trace.push(params[0].item().abs());
        }
        for w in trace[5..].windows(2) {
            assert!(w[1] < w[0], "{} then {}", w[0], w[1]);
        }
    }
}
