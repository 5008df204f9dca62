use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{contract_err, dim_err, numeric_err, Result};

/// Update rule and its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, epsilon: f64 },
}

impl OptimizerKind {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        OptimizerKind::Sgd { lr, momentum }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerKind::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerKind::Sgd { lr, .. } | OptimizerKind::Adam { lr, .. } => lr,
        }
    }
}

/// Optimizer with per-parameter state, bound to a fixed parameter list.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step_count: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            first: Vec::new(),
            second: Vec::new(),
            step_count: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Velocity (SGD) or first moment (Adam) of parameter `i`.
    pub fn first_moment(&self, i: usize) -> Option<&[f64]> {
        self.first.get(i).map(Vec::as_slice)
    }

    /// Applies one update using each parameter's accumulated gradient.
    /// Parameters that do not require grad are skipped.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second = self.first.clone();
            }
        }
        if self.first.len() != params.len() {
            return Err(dim_err!(
                "optimizer holds state for {} parameters, got {}",
                self.first.len(),
                params.len()
            ));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        for (i, p) in params.iter_mut().enumerate() {
            if !p.requires_grad() {
                continue;
            }
            let g = match p.grad() {
                Some(g) => g.to_vec(),
                None => return Err(contract_err!("parameter {i} has no gradient")),
            };
            if g.len() != self.first[i].len() {
                return Err(dim_err!(
                    "gradient of length {} for optimizer buffer of length {}",
                    g.len(),
                    self.first[i].len()
                ));
            }
            match self.kind {
                OptimizerKind::Sgd { lr, momentum } => {
                    let v = &mut self.first[i];
                    for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
                        *vv = momentum * *vv + gv;
                        *pv -= lr * *vv;
                    }
                }
                OptimizerKind::Adam { lr, beta1, beta2, epsilon } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (j, pv) in p.data_mut().iter_mut().enumerate() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                        let mh = m[j] / c1;
                        let vh = v[j] / c2;
                        *pv -= lr * mh / (vh.sqrt() + epsilon);
                    }
                }
            }
            if !p.all_finite() {
                return Err(numeric_err!("parameter {i} became non-finite at step {t}"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: &[f64]) -> Tensor {
        Tensor::new(&[v.len()], v.to_vec()).unwrap().with_grad()
    }

    #[test]
    fn sgd_without_momentum_is_plain_descent() {
        let mut p = param(&[1.0, -2.0]);
        p.accumulate_grad(&[0.5, 1.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.1, 0.0));
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.05, -2.0 - 0.1]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn momentum_velocity_unrolls() {
        let g = [0.3, -1.2];
        let mut p = param(&[0.0, 0.0]);
        let mut opt = Optimizer::new(OptimizerKind::sgd(0.001, 0.99));
        for _ in 0..2 {
            p.zero_grad();
            p.accumulate_grad(&g).unwrap();
            opt.step(&mut [&mut p]).unwrap();
        }
        let v = opt.first_moment(0).unwrap();
        for (vi, gi) in v.iter().zip(g) {
            assert!((vi - 1.99 * gi).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = param(&[1.0, 1.0, 1.0]);
        p.accumulate_grad(&[3.0, -0.01, 250.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::adam(0.01));
        opt.step(&mut [&mut p]).unwrap();
        let expect = [0.99, 1.01, 0.99];
        for (a, b) in p.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn missing_grad_and_shape_mismatch() {
        let mut p = param(&[1.0]);
        let mut opt = Optimizer::new(OptimizerKind::adam(0.1));
        assert!(matches!(opt.step(&mut [&mut p]), Err(crate::Error::Contract(_))));
        let mut q = param(&[1.0, 2.0]);
        q.accumulate_grad(&[1.0, 1.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::adam(0.1));
        p.accumulate_grad(&[1.0]).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert!(matches!(opt.step(&mut [&mut p, &mut q]), Err(crate::Error::Dimension(_))));
    }
}
