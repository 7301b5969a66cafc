//! Momentum SGD with coupled weight decay, and Adam with decoupled weight decay.

use crate::error::{Error, Result};
use crate::model::Tensors;

fn check_shapes_and_finite(params: &impl Tensors, grads: &impl Tensors) -> Result<()> {
    let p = params.tensors();
    let g = grads.tensors();
    if p.len() != g.len() || p.iter().zip(&g).any(|(a, b)| a.1.len() != b.1.len()) {
        return Err(Error::Input(
            "gradient shapes do not mirror the parameters".into(),
        ));
    }
    for (name, t) in &g {
        if let Some((i, v)) = t.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient {v} in {name}[{i}]"
            )));
        }
    }
    Ok(())
}

/// Per-parameter momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<Vec<f64>>,
    pub iteration: usize,
}

impl SgdState {
    pub fn new(params: &impl Tensors) -> Self {
        SgdState {
            velocity: params
                .tensors()
                .iter()
                .map(|(_, t)| vec![0.0; t.len()])
                .collect(),
            iteration: 0,
        }
    }
}

/// `g = grad + wd * theta; v = momentum * v + g; theta -= lr * v`.
pub fn sgd_step<P: Tensors>(
    params: &mut P,
    grads: &P,
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    check_shapes_and_finite(params, grads)?;
    let g = grads.tensors();
    for ((theta, (_, grad)), v) in params
        .tensors_mut()
        .into_iter()
        .zip(g)
        .zip(&mut state.velocity)
    {
        for ((p, gi), vi) in theta.iter_mut().zip(grad).zip(v.iter_mut()) {
            let step = gi + weight_decay * *p;
            *vi = momentum * *vi + step;
            *p -= lr * *vi;
        }
    }
    state.iteration += 1;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub iteration: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWState {
    pub fn new(params: &impl Tensors) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|(_, t)| vec![0.0; t.len()])
            .collect();
        AdamWState {
            m: zeros.clone(),
            v: zeros,
            iteration: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam step with weight decay applied directly to the parameters.
pub fn adamw_step<P: Tensors>(
    params: &mut P,
    grads: &P,
    state: &mut AdamWState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    check_shapes_and_finite(params, grads)?;
    state.iteration += 1;
    let t = state.iteration as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let g = grads.tensors();
    for (((theta, (_, grad)), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(g)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for (((p, gi), mi), vi) in theta
            .iter_mut()
            .zip(grad)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *p -= lr * weight_decay * *p;
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            *p -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone, Debug, PartialEq)]
    struct Flat(Vec<f64>);

    impl Tensors for Flat {
        fn tensors(&self) -> Vec<(String, &[f64])> {
            vec![("w".into(), &self.0)]
        }
        fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn plain_gradient_descent() {
        let mut p = Flat(vec![1.0, -2.0]);
        let mut s = SgdState::new(&p);
        sgd_step(&mut p, &Flat(vec![0.5, 1.0]), &mut s, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p.0, vec![1.0 - 0.05, -2.0 - 0.1]);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut p = Flat(vec![1.0, -2.0]);
        let mut s = SgdState::new(&p);
        sgd_step(&mut p, &Flat(vec![0.5, 1.0]), &mut s, 0.0, 0.9, 1e-4).unwrap();
        assert_eq!(p.0, vec![1.0, -2.0]);
    }

    #[test]
    fn momentum_is_a_geometric_series() {
        let mut p = Flat(vec![0.0]);
        let mut s = SgdState::new(&p);
        let (g, mu) = (0.3, 0.9);
        for n in 1..=20 {
            sgd_step(&mut p, &Flat(vec![g]), &mut s, 0.0, mu, 0.0).unwrap();
            let expected = g * (1.0 - mu.powi(n)) / (1.0 - mu);
            assert!((s.velocity[0][0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_decay_is_coupled() {
        let mut p = Flat(vec![2.0]);
        let mut s = SgdState::new(&p);
        sgd_step(&mut p, &Flat(vec![0.0]), &mut s, 0.5, 0.0, 0.1).unwrap();
        assert!((p.0[0] - (2.0 - 0.5 * 0.2)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let mut p = Flat(vec![0.0, 0.0]);
        let mut s = SgdState::new(&p);
        let err = sgd_step(&mut p, &Flat(vec![0.0, f64::NAN]), &mut s, 0.1, 0.9, 0.0).unwrap_err();
        assert!(matches!(err, Error::Training(ref m) if m.contains("w[1]")));
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = Flat(vec![1.0, 1.0]);
        let mut s = AdamWState::new(&p);
        adamw_step(&mut p, &Flat(vec![3.0, -0.01]), &mut s, 0.01, 0.0).unwrap();
        assert!((p.0[0] - 0.99).abs() < 1e-9);
        assert!((p.0[1] - 1.01).abs() < 1e-6);
        let mut q = Flat(vec![1.0]);
        let mut s = AdamWState::new(&q);
        adamw_step(&mut q, &Flat(vec![0.0]), &mut s, 0.1, 0.5).unwrap();
        assert!((q.0[0] - 0.95).abs() < 1e-15);
    }
}
