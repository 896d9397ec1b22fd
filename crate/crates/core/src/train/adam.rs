use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamStore};
use crate::tensor::Scalar;

/// One bias-corrected Adam update of a single buffer at step `t ≥ 1`.
#[allow(clippy::too_many_arguments)]
pub fn adam_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
) {
    let (b1, b2) = (T::cst(beta1), T::cst(beta2));
    let (c1, c2) = (T::cst(1.0 - beta1), T::cst(1.0 - beta2));
    let bc1 = T::cst(1.0 - beta1.powi(t as i32));
    let bc2 = T::cst(1.0 - beta2.powi(t as i32));
    let (lr, eps) = (T::cst(lr), T::cst(eps));
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + c1 * g;
        v[i] = b2 * v[i] + c2 * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] = param[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Adam with per-parameter first/second moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T = f64> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Steps taken so far.
    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, index: usize) -> (&[T], &[T]) {
        (&self.m[index], &self.v[index])
    }

    pub(crate) fn restore(&mut self, t: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) -> Result<()> {
        let fits = |a: &[Vec<T>], b: &[Vec<T>]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len());
        if !fits(&m, &self.m) || !fits(&v, &self.v) {
            return Err(Error::Checkpoint("optimizer moments do not match the parameters".into()));
        }
        self.t = t;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// Applies one update to every parameter that has a gradient. Frozen
    /// parameters carry no gradient and are left untouched. If any gradient
    /// is non-finite nothing is changed and the offending parameter is
    /// named in the error.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64) -> Result<()> {
        for id in params.ids() {
            if let Some(g) = grads.get(id) {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient(params.name(id).to_string()));
                }
            }
        }
        self.t += 1;
        for id in params.ids() {
            let Some(g) = grads.get(id) else { continue };
            if !params.get(id).requires_grad() {
                continue;
            }
            let i = id.index();
            adam_update(
                params.get_mut(id).data_mut(),
                g,
                &mut self.m[i],
                &mut self.v[i],
                lr,
                self.beta1,
                self.beta2,
                self.eps,
                self.t,
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Plain scalar Adam written out longhand.
    fn scalar_adam(mut p: f64, grads: &[f64], lr: f64) -> Vec<f64> {
        let (mut m, mut v) = (0.0, 0.0);
        let mut out = Vec::new();
        for (i, g) in grads.iter().enumerate() {
            let t = (i + 1) as i32;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            p -= lr * m_hat / (v_hat.sqrt() + 1e-8);
            out.push(p);
        }
        out
    }

    fn single(value: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", crate::Tensor::new(vec![1], vec![value]).unwrap()).unwrap();
        s
    }

    fn grads_of(g: f64) -> ParamGrads<f64> {
        let mut grads = ParamGrads::empty(1);
        grads.set(0, vec![g]);
        grads
    }

    #[test]
    fn ten_steps_match_scalar_oracle() {
        let seq = [0.3, -1.2, 0.05, 2.0, 0.0, -0.7, 1.1, 0.4, -0.02, 0.9];
        let expected = scalar_adam(0.5, &seq, 1e-2);
        let mut store = single(0.5);
        let mut adam = Adam::new(&store);
        for (g, want) in seq.iter().zip(expected) {
            adam.step(&mut store, &grads_of(*g), 1e-2).unwrap();
            let got = store.get(store.id("w").unwrap()).data()[0];
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        for g in [3.0, -0.25] {
            let mut store = single(1.0);
            let mut adam = Adam::new(&store);
            adam.step(&mut store, &grads_of(g), 1e-3).unwrap();
            let p = store.get(store.id("w").unwrap()).data()[0];
            assert!((p - (1.0 - 1e-3 * f64::signum(g))).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_gradient_keeps_fresh_params_and_decays_moments() {
        let mut store = single(1.0);
        let mut adam = Adam::new(&store);
        adam.step(&mut store, &grads_of(0.0), 1e-3).unwrap();
        assert_eq!(store.get(store.id("w").unwrap()).data()[0], 1.0);

        adam.step(&mut store, &grads_of(2.0), 1e-3).unwrap();
        let (m, v) = (adam.moments(0).0[0], adam.moments(0).1[0]);
        adam.step(&mut store, &grads_of(0.0), 1e-3).unwrap();
        assert!((adam.moments(0).0[0] - 0.9 * m).abs() < 1e-15);
        assert!((adam.moments(0).1[0] - 0.999 * v).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_without_changes() {
        let mut store = single(1.0);
        let mut adam = Adam::new(&store);
        let before = (store.clone(), adam.clone());
        match adam.step(&mut store, &grads_of(f64::NAN), 1e-3) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "w"),
            other => panic!("expected non-finite gradient error, got {other:?}"),
        }
        assert_eq!((store, adam), before);
    }
}
