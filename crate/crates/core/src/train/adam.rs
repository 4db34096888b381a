use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments, one array per parameter in storage order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update in place.
///
/// `grads[i]` is the gradient of the `i`-th parameter in storage order.
pub fn adam_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients and {} moment arrays for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        match g {
            None => {
                return Err(Error::Contract(format!(
                    "no gradient for parameter `{name}`"
                )))
            }
            Some(g) if g.shape() != p.shape() => {
                return Err(Error::dim("adam_step", g.shape(), p.shape()))
            }
            _ => {}
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::one() - T::lit(cfg.beta1.powi(t));
    let c2 = T::one() - T::lit(cfg.beta2.powi(t));
    let (lr, eps) = (T::lit(cfg.lr), T::lit(cfg.eps));
    for (i, (_, p)) in params.iter_mut().enumerate() {
        let g = grads[i].as_ref().unwrap().data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (T::one() - b1) * g[j];
            v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *w = *w - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use crate::train::l1_loss;

    fn single(v: f64) -> ModelParams<f64> {
        ModelParams::from_entries(vec![("w".into(), Tensor::from_f64([1], &[v]).unwrap())]).unwrap()
    }

    #[test]
    fn zero_grad_keeps_params() {
        let mut p = single(2.0);
        let mut s = AdamState::new(&p);
        adam_step(
            &mut p,
            &[Some(Tensor::zeros([1]))],
            &mut s,
            &AdamConfig::default(),
        )
        .unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn unit_grad_moves_by_lr() {
        let mut p = single(2.0);
        let mut s = AdamState::new(&p);
        let cfg = AdamConfig::default();
        adam_step(&mut p, &[Some(Tensor::full([1], 1.0))], &mut s, &cfg).unwrap();
        let moved = 2.0 - p.get("w").unwrap().data()[0];
        assert!((moved - 1e-3).abs() < 1e-8, "{moved}");
    }

    #[test]
    fn missing_grad_names_parameter() {
        let mut p = single(0.0);
        let mut s = AdamState::new(&p);
        let e = adam_step(&mut p, &[None], &mut s, &AdamConfig::default()).unwrap_err();
        assert!(e.to_string().contains("`w`"));
    }

    fn fit_linear() -> (f64, ModelParams<f64>) {
        // y = x·W* with W* = [[1.5], [-2.0]]; minimise mean squared error.
        let xs: Vec<f64> = (0..40).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        let x = Tensor::from_f64([20, 2], &xs).unwrap();
        let y: Vec<f64> = (0..20)
            .map(|r| 1.5 * xs[2 * r] - 2.0 * xs[2 * r + 1])
            .collect();
        let y = Tensor::from_f64([20, 1], &y).unwrap();
        let mut p = ModelParams::from_entries(vec![("w".into(), Tensor::zeros([2, 1]))]).unwrap();
        let mut s = AdamState::new(&p);
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        let mut loss = f64::INFINITY;
        for _ in 0..2000 {
            let mut tape = Tape::new();
            let w = tape.param(p.get("w").unwrap().clone());
            let xv = tape.constant(x.clone());
            let yv = tape.constant(y.clone());
            let pred = tape.matmul(xv, w).unwrap();
            let d = tape.sub(pred, yv).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let l = tape.mean(sq);
            tape.backward(l).unwrap();
            loss = tape.value(l).item();
            adam_step(&mut p, &[tape.grad(w)], &mut s, &cfg).unwrap();
        }
        (loss, p)
    }

    #[test]
    fn converges_on_linear_fit_and_is_deterministic() {
        let (loss, p) = fit_linear();
        assert!(loss < 1e-3, "{loss}");
        let (loss2, p2) = fit_linear();
        assert_eq!(loss.to_bits(), loss2.to_bits());
        assert_eq!(p, p2);
    }

    #[test]
    fn l1_is_usable_as_objective() {
        let mut p = single(5.0);
        let mut s = AdamState::new(&p);
        let cfg = AdamConfig {
            lr: 0.05,
            ..Default::default()
        };
        for _ in 0..500 {
            let mut tape = Tape::new();
            let w = tape.param(p.get("w").unwrap().clone());
            let target = tape.constant(Tensor::from_f64([1], &[1.0]).unwrap());
            let l = l1_loss(&mut tape, w, target).unwrap();
            tape.backward(l).unwrap();
            adam_step(&mut p, &[tape.grad(w)], &mut s, &cfg).unwrap();
        }
        assert!((p.get("w").unwrap().data()[0] - 1.0).abs() < 0.1);
    }
}
