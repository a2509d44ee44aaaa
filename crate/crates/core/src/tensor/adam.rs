use super::{Float, Matrix, ParamGrads, ParamStore};

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub m: Vec<Matrix<F>>,
    pub v: Vec<Matrix<F>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<F: Float> AdamState<F> {
    pub fn new(params: &ParamStore<F>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || {
            params
                .values()
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect::<Vec<_>>()
        };
        Self { m: zeros(), v: zeros(), step: 0, beta1, beta2, eps }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient are
/// treated as having a zero gradient.
pub fn adam_step<F: Float>(
    params: &mut ParamStore<F>,
    grads: &ParamGrads<F>,
    state: &mut AdamState<F>,
    lr: f64,
) {
    state.step += 1;
    let t = state.step as i32;
    let b1 = F::from_f64(state.beta1);
    let b2 = F::from_f64(state.beta2);
    let one = F::one();
    let c1 = F::from_f64(1.0 - state.beta1.powi(t));
    let c2 = F::from_f64(1.0 - state.beta2.powi(t));
    let lr = F::from_f64(lr);
    let eps = F::from_f64(state.eps);
    for (i, p) in params.values_mut().iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = p.data_mut();
        match grads.get(i) {
            Some(g) => {
                for (((p, m), v), &g) in p.iter_mut().zip(m).zip(v).zip(g.data()) {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
            None => {
                for ((p, m), v) in p.iter_mut().zip(m).zip(v) {
                    *m = b1 * *m;
                    *v = b2 * *v;
                    if *m != F::zero() {
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Matrix::scalar(x));
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = store(0.7);
        let mut st = AdamState::new(&p, 0.9, 0.999, 1e-8);
        let mut g = ParamGrads::zeros_like(&p);
        g.set(0, Matrix::scalar(0.0));
        adam_step(&mut p, &g, &mut st, 1e-3);
        assert_eq!(p.get_index(0).item(), 0.7);
        adam_step(&mut p, &ParamGrads::empty(1), &mut st, 1e-3);
        assert_eq!(p.get_index(0).item(), 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = store(0.0);
        let mut st = AdamState::new(&p, 0.9, 0.999, 1e-8);
        let mut g = ParamGrads::empty(1);
        g.set(0, Matrix::scalar(1.0));
        adam_step(&mut p, &g, &mut st, 1e-3);
        // mhat = vhat = 1, so the step is lr / (1 + eps).
        assert!((p.get_index(0).item() + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn identical_inputs_identical_updates() {
        let mut a = store(0.3);
        let mut b = store(0.3);
        let mut sa = AdamState::new(&a, 0.9, 0.999, 1e-8);
        let mut sb = AdamState::new(&b, 0.9, 0.999, 1e-8);
        for k in 0..5 {
            let mut g = ParamGrads::empty(1);
            g.set(0, Matrix::scalar(0.1 * k as f64 - 0.2));
            adam_step(&mut a, &g, &mut sa, 1e-2);
            adam_step(&mut b, &g, &mut sb, 1e-2);
        }
        assert_eq!(a.get_index(0).item().to_bits(), b.get_index(0).item().to_bits());
    }
}
