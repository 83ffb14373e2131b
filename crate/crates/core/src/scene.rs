//! The optimized object: a particle set rendered through orthonormal
//! "cameras", with the chain rule and a first-order optimizer.
//!
//! Rendering is linear, `x = R p`, so the Jacobian is `R` and parameter
//! gradients are `R^T` times the pixel-space residual.

use crate::error::{Error, Result};
use crate::guidance::GuidanceEstimate;
use crate::linalg::{check_dim, Matrix};
use crate::scalar::Scalar;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone)]
pub struct SceneParams<S> {
    particles: Vec<Vec<S>>,
    dim: usize,
}

impl<S: Scalar> SceneParams<S> {
    pub fn new(particles: Vec<Vec<S>>) -> Result<Self> {
        if particles.is_empty() {
            return Err(Error::Config("scene needs at least one particle".into()));
        }
        let dim = particles[0].len();
        for p in &particles {
            check_dim(p, dim)?;
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("particle coordinates must be finite".into()));
            }
        }
        Ok(SceneParams { particles, dim })
    }

    /// Gaussian cloud of `count` particles around `center`.
    pub fn cloud<R: Rng + ?Sized>(
        center: &[S],
        spread: S,
        count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if count == 0 {
            return Err(Error::Config("scene needs at least one particle".into()));
        }
        let particles = (0..count)
            .map(|_| {
                center
                    .iter()
                    .map(|c| *c + spread * S::std_normal(rng))
                    .collect()
            })
            .collect();
        SceneParams::new(particles)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn particle(&self, idx: usize) -> Result<&[S]> {
        self.particles
            .get(idx)
            .map(|p| p.as_slice())
            .ok_or(Error::ParticleOutOfRange {
                index: idx,
                count: self.particles.len(),
            })
    }

    pub fn particles(&self) -> &[Vec<S>] {
        &self.particles
    }
}

/// Orthonormal view transform.
#[derive(Debug, Clone)]
pub struct Camera<S> {
    pub id: u64,
    rotation: Matrix<S>,
}

impl<S: Scalar> Camera<S> {
    pub fn identity(dim: usize) -> Self {
        Camera {
            id: 0,
            rotation: Matrix::identity(dim),
        }
    }

    pub fn from_matrix(id: u64, rotation: Matrix<S>) -> Result<Self> {
        rotation.check_orthonormal(S::from_f64_c(1e-10))?;
        Ok(Camera { id, rotation })
    }

    pub fn random<R: Rng + ?Sized>(id: u64, dim: usize, rng: &mut R) -> Self {
        Camera {
            id,
            rotation: Matrix::random_orthonormal(dim, rng),
        }
    }

    pub fn rotation(&self) -> &Matrix<S> {
        &self.rotation
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "method")]
pub enum OptimMethod<S> {
    Sgd,
    Adam { beta1: S, beta2: S, eps: S },
}

impl<S: Scalar> OptimMethod<S> {
    pub fn adam_default() -> Self {
        OptimMethod::Adam {
            beta1: S::from_f64_c(0.9),
            beta2: S::from_f64_c(0.99),
            eps: S::from_f64_c(1e-8),
        }
    }
}

/// Per-particle optimizer state.
#[derive(Debug, Clone)]
pub struct OptimState<S> {
    pub method: OptimMethod<S>,
    learning_rate: S,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    steps: Vec<usize>,
}

impl<S: Scalar> OptimState<S> {
    pub fn new(method: OptimMethod<S>, learning_rate: S, particles: usize, dim: usize) -> Result<Self> {
        if learning_rate <= S::zero() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(OptimState {
            method,
            learning_rate,
            m: vec![vec![S::zero(); dim]; particles],
            v: vec![vec![S::zero(); dim]; particles],
            steps: vec![0; particles],
        })
    }

    pub fn learning_rate(&self) -> S {
        self.learning_rate
    }

    /// Replaces the step size (used by decaying schedules).
    pub fn set_learning_rate(&mut self, lr: S) -> Result<()> {
        if lr <= S::zero() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        self.learning_rate = lr;
        Ok(())
    }
}

/// Renders one particle through the camera: `R p`.
pub fn render<S: Scalar>(theta: &SceneParams<S>, idx: usize, cam: &Camera<S>) -> Result<Vec<S>> {
    cam.rotation().mul_vec(theta.particle(idx)?)
}

/// Pulls the pixel-space residual back through the renderer and applies one
/// optimizer step to the particle.
pub fn apply_guidance<S: Scalar>(
    theta: &mut SceneParams<S>,
    idx: usize,
    cam: &Camera<S>,
    g_est: &GuidanceEstimate<S>,
    opt: &mut OptimState<S>,
) -> Result<()> {
    let grad = cam.rotation().tr_mul_vec(&g_est.pixel_gradient)?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { particle: idx });
    }
    let count = theta.particles.len();
    let p = theta
        .particles
        .get_mut(idx)
        .ok_or(Error::ParticleOutOfRange { index: idx, count })?;
    check_dim(&grad, p.len())?;
    let lr = opt.learning_rate;
    match opt.method {
        OptimMethod::Sgd => {
            for (w, g) in p.iter_mut().zip(&grad) {
                *w -= lr * *g;
            }
        }
        OptimMethod::Adam { beta1, beta2, eps } => {
            opt.steps[idx] += 1;
            let step = S::from_usize(opt.steps[idx]).unwrap();
            let m = &mut opt.m[idx];
            let v = &mut opt.v[idx];
            let one = S::one();
            for d in 0..p.len() {
                m[d] = beta1 * m[d] + (one - beta1) * grad[d];
                v[d] = beta2 * v[d] + (one - beta2) * grad[d] * grad[d];
                let m_hat = m[d] / (one - beta1.powf(step));
                let v_hat = v[d] / (one - beta2.powf(step));
                p[d] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    Ok(())
}
