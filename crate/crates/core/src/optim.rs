//! ADAM for Euclidean weights, Riemannian ADAM for points on the ball, and
//! the plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{ensure_finite, kernels, Curvature, PoincarePoint};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(len: usize, hyper: AdamHyper) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            hyper,
        }
    }

    fn check(&self, param_len: usize, grad: &[f64]) -> Result<()> {
        if param_len != grad.len() || self.m.len() != grad.len() {
            return Err(Error::Shape(format!(
                "optimizer: parameter {}, gradient {}, state {}",
                param_len,
                grad.len(),
                self.m.len()
            )));
        }
        ensure_finite(grad, "gradient")
    }

    /// Advances the moments with `grad` and returns the bias-corrected
    /// update direction `m̂ / (sqrt(v̂) + ε)` scaled by `-lr`.
    fn direction(&mut self, grad: &[f64]) -> Vec<f64> {
        self.t += 1;
        let AdamHyper { lr, beta1, beta2, eps } = self.hyper;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let mut step = vec![0.0; grad.len()];
        for i in 0..grad.len() {
            let g = grad[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            step[i] = -lr * m_hat / (v_hat.sqrt() + eps);
        }
        step
    }
}

/// One bias-corrected ADAM update of `param` in place.
pub fn adam_step(param: &mut [f64], grad: &[f64], state: &mut AdamState) -> Result<()> {
    state.check(param.len(), grad)?;
    let step = state.direction(grad);
    for (p, s) in param.iter_mut().zip(step) {
        *p += s;
    }
    Ok(())
}

/// Scale converting a Euclidean gradient at a point with `c|x|^2 = cx2`
/// into the Riemannian gradient.
pub fn riemannian_scale(cx2: f64) -> f64 {
    (1.0 - cx2) * (1.0 - cx2) / 4.0
}

/// Riemannian ADAM on a set of ball points stored as the rows of `points`.
///
/// Each row is moved along the exponential map at its current position and
/// clipped back into the ball. Moments live in the origin frame and are not
/// transported between iterates.
pub fn riemannian_adam_step_rows(
    points: &mut Tensor,
    egrad: &Tensor,
    curvature: Curvature,
    state: &mut AdamState,
) -> Result<()> {
    if points.shape() != egrad.shape() {
        return Err(Error::Shape(format!(
            "riemannian step: points {:?}, gradient {:?}",
            points.shape(),
            egrad.shape()
        )));
    }
    state.check(points.len(), egrad.data())?;
    let c = curvature.value();
    let cols = points.cols();
    let mut rgrad = egrad.data().to_vec();
    for (row, g) in points.data().chunks(cols).zip(rgrad.chunks_mut(cols)) {
        let cx2 = c * kernels::norm_sq(row);
        if cx2 >= 1.0 {
            return Err(Error::OutsideBall(cx2));
        }
        let s = riemannian_scale(cx2);
        g.iter_mut().for_each(|v| *v *= s);
    }
    let step = state.direction(&rgrad);
    let mut moved = vec![0.0; cols];
    for (row, u) in points.data_mut().chunks_mut(cols).zip(step.chunks(cols)) {
        kernels::exp_map(row, u, c, &mut moved);
        kernels::project_in_place(&mut moved, c);
        row.copy_from_slice(&moved);
    }
    Ok(())
}

/// Riemannian ADAM for a single point.
pub fn riemannian_adam_step(param: &PoincarePoint, egrad: &[f64], state: &mut AdamState) -> Result<PoincarePoint> {
    let curvature = param.curvature();
    let mut t = Tensor::matrix(1, param.dim(), param.coords().to_vec())?;
    let g = Tensor::matrix(1, egrad.len(), egrad.to_vec()).map_err(|_| Error::Shape("gradient length".into()))?;
    riemannian_adam_step_rows(&mut t, &g, curvature, state)?;
    PoincarePoint::new(t.into_data(), curvature)
}

/// Halves the learning rate after `patience` epochs without improvement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub best: f64,
    pub bad_epochs: usize,
    pub patience: usize,
    pub factor: f64,
}

impl PlateauSchedule {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            best: f64::INFINITY,
            bad_epochs: 0,
            patience: 10,
            factor: 0.5,
        }
    }

    /// Records a validation loss; returns true when the rate was reduced.
    pub fn step(&mut self, val_loss: f64) -> Result<bool> {
        if !val_loss.is_finite() {
            return Err(Error::NonFinite("validation loss".into()));
        }
        if val_loss < self.best {
            self.best = val_loss;
            self.bad_epochs = 0;
            return Ok(false);
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.lr *= self.factor;
            self.bad_epochs = 0;
            return Ok(true);
        }
        Ok(false)
    }
}
