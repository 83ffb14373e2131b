//! Gaussian-mixture stand-in for the pretrained guidance model.
//!
//! A mixture with isotropic per-component covariance stays a mixture under
//! the forward process: component `k` at time `t` is
//! `N(sqrt(alpha_bar_t) mu_k, (alpha_bar_t c_k^2 + 1 - alpha_bar_t) I)`.
//! Scores, densities and ideal noise predictions are therefore exact, and
//! prompts are subsets of components playing the role of text conditioning.

use crate::error::{Error, Result};
use crate::linalg::{check_dim, Matrix};
use crate::scalar::Scalar;
use crate::schedule::{NoiseSchedule, Timestep};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Component<S> {
    pub weight: S,
    pub mean: Vec<S>,
    pub cov_scale: S,
}

#[derive(Debug, Clone)]
pub struct MixtureTarget<S> {
    dim: usize,
    components: Vec<Component<S>>,
}

/// Conditioning: a subset of component indices, or `None` for the full
/// mixture, plus the classifier-free guidance scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt<S> {
    selected: Option<Vec<usize>>,
    pub cfg_scale: S,
}

impl<S: Scalar> Prompt<S> {
    pub fn unconditional() -> Self {
        Prompt {
            selected: None,
            cfg_scale: S::one(),
        }
    }

    pub fn select(indices: impl Into<Vec<usize>>, cfg_scale: S) -> Result<Self> {
        let mut idx: Vec<usize> = indices.into();
        idx.sort_unstable();
        idx.dedup();
        if idx.is_empty() {
            return Err(Error::EmptyConditional);
        }
        if cfg_scale < S::zero() {
            return Err(Error::Config("cfg_scale must be >= 0".into()));
        }
        Ok(Prompt {
            selected: Some(idx),
            cfg_scale,
        })
    }

    pub fn selected(&self) -> Option<&[usize]> {
        self.selected.as_deref()
    }

    pub fn is_unconditional(&self) -> bool {
        self.selected.is_none()
    }

    /// Same selection with guidance scale 1 (used where mixing is not wanted).
    pub fn plain(&self) -> Prompt<S> {
        Prompt {
            selected: self.selected.clone(),
            cfg_scale: S::one(),
        }
    }
}

impl<S: Scalar> MixtureTarget<S> {
    pub fn new(dim: usize, components: Vec<Component<S>>) -> Result<Self> {
        if dim == 0 || components.is_empty() {
            return Err(Error::Config("mixture needs dim >= 1 and >= 1 component".into()));
        }
        let mut total = S::zero();
        for c in &components {
            if c.weight <= S::zero() {
                return Err(Error::Config("component weights must be positive".into()));
            }
            if c.cov_scale <= S::zero() {
                return Err(Error::Config("cov_scale must be positive".into()));
            }
            check_dim(&c.mean, dim)?;
            total += c.weight;
        }
        if (total - S::one()).abs() > S::from_f64_c(1e-12) {
            return Err(Error::Config(format!(
                "component weights must sum to 1, got {total}"
            )));
        }
        Ok(MixtureTarget { dim, components })
    }

    /// Standard normal in `dim` dimensions.
    pub fn standard_normal(dim: usize) -> Self {
        MixtureTarget {
            dim,
            components: vec![Component {
                weight: S::one(),
                mean: vec![S::zero(); dim],
                cov_scale: S::one(),
            }],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component<S>] {
        &self.components
    }

    fn selected_indices<'a>(&self, prompt: &'a Prompt<S>) -> Result<Vec<usize>> {
        match prompt.selected() {
            None => Ok((0..self.components.len()).collect()),
            Some(idx) => {
                for &i in idx {
                    if i >= self.components.len() {
                        return Err(Error::InvalidComponent {
                            index: i,
                            count: self.components.len(),
                        });
                    }
                }
                if idx.is_empty() {
                    return Err(Error::EmptyConditional);
                }
                Ok(idx.to_vec())
            }
        }
    }

    /// Mixture score at noise level `level2 = gamma^2` in the unscaled
    /// variable `y = x / sqrt(alpha_bar)`: component k is
    /// `N(mu_k, (c_k^2 + level2) I)`. Everything else derives from this.
    fn score_at_level(&self, y: &[S], level2: S, indices: &[usize]) -> Result<Vec<S>> {
        check_dim(y, self.dim)?;
        let logits = self.log_resp(y, level2, indices);
        let max = logits
            .iter()
            .fold(S::neg_infinity(), |a, &(_, lg)| a.max(lg));
        let mut weights: Vec<S> = logits.iter().map(|&(_, lg)| (lg - max).exp()).collect();
        let total: S = weights.iter().copied().sum();
        for w in weights.iter_mut() {
            *w /= total;
        }
        let mut score = vec![S::zero(); self.dim];
        for (&(k, _), r) in logits.iter().zip(&weights) {
            let c = &self.components[k];
            let v = c.cov_scale * c.cov_scale + level2;
            for (d, s) in score.iter_mut().enumerate() {
                *s += *r * (c.mean[d] - y[d]) / v;
            }
        }
        Ok(score)
    }

    /// Per-component joint log densities `log w_k + log N(y; mu_k, (c^2+l2)I)`.
    fn log_resp(&self, y: &[S], level2: S, indices: &[usize]) -> Vec<(usize, S)> {
        let half = S::from_f64_c(0.5);
        let two_pi = S::from_f64_c(std::f64::consts::TAU);
        let dim_s = S::from_usize(self.dim).unwrap();
        indices
            .iter()
            .map(|&k| {
                let c = &self.components[k];
                let v = c.cov_scale * c.cov_scale + level2;
                let mut d2 = S::zero();
                for (a, b) in y.iter().zip(&c.mean) {
                    d2 += (*a - *b) * (*a - *b);
                }
                let lg = c.weight.ln() - half * dim_s * (two_pi * v).ln() - d2 / (v + v);
                (k, lg)
            })
            .collect()
    }

    /// `grad_x log p_tau(x | prompt)` at a real-valued time.
    pub fn perturbed_score_at(
        &self,
        x: &[S],
        tau: S,
        prompt: &Prompt<S>,
        sched: &NoiseSchedule<S>,
    ) -> Result<Vec<S>> {
        let indices = self.selected_indices(prompt)?;
        let a = sched.alpha_bar_at(tau);
        let sqrt_a = a.sqrt();
        let level2 = (S::one() - a) / a;
        let y: Vec<S> = x.iter().map(|v| *v / sqrt_a).collect();
        let score_y = self.score_at_level(&y, level2, &indices)?;
        Ok(score_y.iter().map(|s| *s / sqrt_a).collect())
    }

    /// `grad_x log p_t(x | prompt)` at a grid timestep.
    pub fn perturbed_score(
        &self,
        x: &[S],
        t: Timestep,
        prompt: &Prompt<S>,
        sched: &NoiseSchedule<S>,
    ) -> Result<Vec<S>> {
        self.perturbed_score_at(x, S::from_usize(t.get()).unwrap(), prompt, sched)
    }

    /// `log p_tau(x | prompt)` with selected weights renormalized.
    pub fn log_density_at(
        &self,
        x: &[S],
        tau: S,
        prompt: &Prompt<S>,
        sched: &NoiseSchedule<S>,
    ) -> Result<S> {
        check_dim(x, self.dim)?;
        let indices = self.selected_indices(prompt)?;
        let a = sched.alpha_bar_at(tau);
        let sqrt_a = a.sqrt();
        let level2 = (S::one() - a) / a;
        let y: Vec<S> = x.iter().map(|v| *v / sqrt_a).collect();
        let logits = self.log_resp(&y, level2, &indices);
        let max = logits
            .iter()
            .fold(S::neg_infinity(), |acc, &(_, lg)| acc.max(lg));
        let sum: S = logits.iter().map(|&(_, lg)| (lg - max).exp()).sum();
        let total_w: S = indices.iter().map(|&k| self.components[k].weight).sum();
        // change of variables y = x / sqrt(a): log p_x = log p_y - d/2 log a
        let half = S::from_f64_c(0.5);
        let dim_s = S::from_usize(self.dim).unwrap();
        Ok(max + sum.ln() - total_w.ln() - half * dim_s * a.ln())
    }

    /// Ideal noise prediction `eps* = -sigma_t * score`. At t = 0 this is the
    /// zero vector (sigma_0 = 0).
    pub fn eps_star(
        &self,
        x_t: &[S],
        t: Timestep,
        prompt: &Prompt<S>,
        sched: &NoiseSchedule<S>,
    ) -> Result<Vec<S>> {
        let score = self.perturbed_score(x_t, t, prompt, sched)?;
        let sig = sched.sigma(t);
        Ok(score.iter().map(|s| -sig * *s).collect())
    }

    /// Classifier-free mixing: `eps_u + scale * (eps_c - eps_u)` with the
    /// conditional prediction from the prompt-restricted mixture and the
    /// unconditional one from the full mixture.
    pub fn cfg_eps(
        &self,
        x_t: &[S],
        t: Timestep,
        prompt: &Prompt<S>,
        sched: &NoiseSchedule<S>,
    ) -> Result<Vec<S>> {
        if prompt.is_unconditional() {
            return Err(Error::EmptyConditional);
        }
        let eps_c = self.eps_star(x_t, t, prompt, sched)?;
        let eps_u = self.eps_star(x_t, t, &Prompt::unconditional(), sched)?;
        let s = prompt.cfg_scale;
        Ok(eps_u
            .iter()
            .zip(&eps_c)
            .map(|(u, c)| *u + s * (*c - *u))
            .collect())
    }

    /// Rotates every component mean by an orthonormal `R`.
    pub fn pushforward(&self, r: &Matrix<S>) -> Result<MixtureTarget<S>> {
        r.check_orthonormal(S::from_f64_c(1e-10))?;
        if r.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: r.dim(),
            });
        }
        let components = self
            .components
            .iter()
            .map(|c| {
                Ok(Component {
                    weight: c.weight,
                    mean: r.mul_vec(&c.mean)?,
                    cov_scale: c.cov_scale,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MixtureTarget {
            dim: self.dim,
            components,
        })
    }

    /// Draws one clean sample from the prompt-restricted mixture.
    pub fn sample_prompt<R: Rng + ?Sized>(&self, prompt: &Prompt<S>, rng: &mut R) -> Result<Vec<S>> {
        let indices = self.selected_indices(prompt)?;
        let total: S = indices.iter().map(|&k| self.components[k].weight).sum();
        let mut u = S::from_f64_c(rng.gen::<f64>()) * total;
        let mut pick = indices[indices.len() - 1];
        for &k in &indices {
            let w = self.components[k].weight;
            if u < w {
                pick = k;
                break;
            }
            u -= w;
        }
        let c = &self.components[pick];
        Ok(c
            .mean
            .iter()
            .map(|m| *m + c.cov_scale * S::std_normal(rng))
            .collect())
    }

    /// Draws one clean sample from the full mixture.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<S> {
        self.sample_prompt(&Prompt::unconditional(), rng)
            .expect("unconditional sampling cannot fail")
    }

    /// Means of the prompt-selected components.
    pub fn selected_means(&self, prompt: &Prompt<S>) -> Result<Vec<&[S]>> {
        Ok(self
            .selected_indices(prompt)?
            .iter()
            .map(|&k| self.components[k].mean.as_slice())
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::distance;
    use crate::schedule::{build_schedule, ScheduleKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sched() -> NoiseSchedule<f64> {
        build_schedule(ScheduleKind::Linear, 1000, 1e-4, 0.02).unwrap()
    }

    fn bimodal() -> MixtureTarget<f64> {
        MixtureTarget::new(
            2,
            vec![
                Component {
                    weight: 0.5,
                    mean: vec![-3.0, 0.0],
                    cov_scale: 0.5,
                },
                Component {
                    weight: 0.5,
                    mean: vec![3.0, 0.0],
                    cov_scale: 0.5,
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn standard_normal_score_is_negative_x() {
        let s = sched();
        let target = MixtureTarget::<f64>::standard_normal(2);
        let un = Prompt::unconditional();
        for t in [0usize, 100, 500, 1000] {
            let x = vec![0.7, -1.9];
            let score = target.perturbed_score(&x, Timestep(t), &un, &s).unwrap();
            assert!((score[0] + x[0]).abs() < 1e-12);
            assert!((score[1] + x[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_score_at_zero_time() {
        let s = sched();
        let target = MixtureTarget::new(
            2,
            vec![Component {
                weight: 1.0,
                mean: vec![1.0, -2.0],
                cov_scale: 0.7,
            }],
        )
        .unwrap();
        let x = vec![0.4, 0.2];
        let score = target
            .perturbed_score(&x, Timestep(0), &Prompt::unconditional(), &s)
            .unwrap();
        for d in 0..2 {
            let expect = (target.components()[0].mean[d] - x[d]) / (0.7f64 * 0.7);
            assert!((score[d] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_point_has_zero_score() {
        let s = sched();
        let score = bimodal()
            .perturbed_score(&[0.0, 0.0], Timestep(0), &Prompt::unconditional(), &s)
            .unwrap();
        assert!(score[0].abs() < 1e-12 && score[1].abs() < 1e-12);
    }

    #[test]
    fn score_matches_finite_differences() {
        // independent oracle: central differences of log_density_at
        let s = sched();
        let target = bimodal();
        let prompts = [
            Prompt::unconditional(),
            Prompt::select(vec![1], 7.5).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-5;
        for trial in 0..40 {
            let prompt = &prompts[trial % 2];
            let t = 1 + (trial * 97) % 1000;
            let x = vec![4.0 * f64::std_normal(&mut rng), 4.0 * f64::std_normal(&mut rng)];
            let score = target
                .perturbed_score(&x, Timestep(t), prompt, &s)
                .unwrap();
            for d in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[d] += h;
                xm[d] -= h;
                let fp = target.log_density_at(&xp, t as f64, prompt, &s).unwrap();
                let fm = target.log_density_at(&xm, t as f64, prompt, &s).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                let denom = score[d].abs().max(1e-3);
                assert!(
                    (score[d] - fd).abs() / denom < 1e-6,
                    "t={t} d={d}: {} vs {}",
                    score[d],
                    fd
                );
            }
        }
    }

    #[test]
    fn eps_star_standard_normal_and_limits() {
        let s = sched();
        let target = MixtureTarget::<f64>::standard_normal(2);
        let un = Prompt::unconditional();
        let x = vec![1.2, -0.4];
        for t in [100usize, 600, 1000] {
            let e = target.eps_star(&x, Timestep(t), &un, &s).unwrap();
            let sg = s.sigma(Timestep(t));
            assert!((e[0] - sg * x[0]).abs() < 1e-12);
            assert!((e[1] - sg * x[1]).abs() < 1e-12);
        }
        // sigma_0 = 0 makes the prediction vanish
        let e0 = target.eps_star(&x, Timestep(0), &un, &s).unwrap();
        assert_eq!(e0, vec![0.0, 0.0]);
    }

    #[test]
    fn posterior_mean_duality() {
        // x0_hat from eps* equals (x + sigma^2 score)/sqrt(alpha_bar)
        let s = sched();
        let target = bimodal();
        let un = Prompt::unconditional();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for t in [50usize, 350, 800] {
            let x = vec![3.0 * f64::std_normal(&mut rng), f64::std_normal(&mut rng)];
            let eps = target.eps_star(&x, Timestep(t), &un, &s).unwrap();
            let x0_hat = s.predict_origin(&x, Timestep(t), &eps).unwrap();
            let score = target.perturbed_score(&x, Timestep(t), &un, &s).unwrap();
            let sg = s.sigma(Timestep(t));
            let sa = s.sqrt_alpha_bar(Timestep(t));
            for d in 0..2 {
                let alt = (x[d] + sg * sg * score[d]) / sa;
                assert!((x0_hat[d] - alt).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn cfg_algebra() {
        let s = sched();
        let target = bimodal();
        let x = vec![0.9, -0.2];
        let t = Timestep(400);
        let cond = Prompt::select(vec![1], 1.0).unwrap();
        let eps_c = target.eps_star(&x, t, &cond, &s).unwrap();
        let eps_u = target
            .eps_star(&x, t, &Prompt::unconditional(), &s)
            .unwrap();
        // scale 1 -> conditional
        let mix1 = target.cfg_eps(&x, t, &cond, &s).unwrap();
        assert!(distance(&mix1, &eps_c) < 1e-14);
        // scale 0 -> unconditional
        let zero = Prompt::select(vec![1], 0.0).unwrap();
        let mix0 = target.cfg_eps(&x, t, &zero, &s).unwrap();
        assert!(distance(&mix0, &eps_u) < 1e-14);
        // scale 7.5 on synthetic predictions
        let got = eps_u
            .iter()
            .zip(&eps_c)
            .map(|(u, c)| u + 7.5 * (c - u))
            .collect::<Vec<_>>();
        let mix75 = target
            .cfg_eps(&x, t, &Prompt::select(vec![1], 7.5).unwrap(), &s)
            .unwrap();
        assert!(distance(&mix75, &got) < 1e-12);
    }

    #[test]
    fn cfg_collapse_when_all_selected() {
        let s = sched();
        let target = bimodal();
        let x = vec![1.4, 0.3];
        let t = Timestep(250);
        let all_1 = Prompt::select(vec![0, 1], 1.0).unwrap();
        let all_75 = Prompt::select(vec![0, 1], 7.5).unwrap();
        let a = target.cfg_eps(&x, t, &all_1, &s).unwrap();
        let b = target.cfg_eps(&x, t, &all_75, &s).unwrap();
        assert!(distance(&a, &b) < 1e-12);
    }

    #[test]
    fn cfg_requires_selection() {
        let s = sched();
        let target = bimodal();
        assert!(matches!(
            target.cfg_eps(&[0.0, 0.0], Timestep(10), &Prompt::unconditional(), &s),
            Err(Error::EmptyConditional)
        ));
    }

    #[test]
    fn pushforward_rotation() {
        let s = sched();
        let target = bimodal();
        let rot = Matrix::from_rows(&[vec![0.0, -1.0], vec![1.0, 0.0]]).unwrap();
        let moved = target.pushforward(&rot).unwrap();
        assert!(distance(&moved.components()[1].mean, &[0.0, 3.0]) < 1e-12);
        // identity leaves everything alone
        let same = target.pushforward(&Matrix::identity(2)).unwrap();
        assert!(distance(&same.components()[0].mean, &target.components()[0].mean) < 1e-15);
        // pdf invariance at random points
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let r = Matrix::random_orthonormal(2, &mut rng);
        let pushed = target.pushforward(&r).unwrap();
        let un = Prompt::unconditional();
        for _ in 0..100 {
            let x = vec![4.0 * f64::std_normal(&mut rng), 4.0 * f64::std_normal(&mut rng)];
            let rx = r.mul_vec(&x).unwrap();
            let a = target.log_density_at(&x, 300.0, &un, &s).unwrap();
            let b = pushed.log_density_at(&rx, 300.0, &un, &s).unwrap();
            assert!((a - b).abs() < 1e-10);
        }
        // non-orthonormal rejected
        let bad = Matrix::from_rows(&[vec![1.0, 0.1], vec![0.0, 1.0]]).unwrap();
        assert!(target.pushforward(&bad).is_err());
    }

    #[test]
    fn invalid_mixtures_rejected() {
        assert!(MixtureTarget::new(
            2,
            vec![Component {
                weight: 0.9,
                mean: vec![0.0, 0.0],
                cov_scale: 1.0
            }]
        )
        .is_err());
        assert!(MixtureTarget::new(
            2,
            vec![Component {
                weight: 1.0,
                mean: vec![0.0, 0.0],
                cov_scale: 0.0
            }]
        )
        .is_err());
        let target = bimodal();
        let s = sched();
        let bad = Prompt::select(vec![5], 1.0).unwrap();
        assert!(target
            .perturbed_score(&[0.0, 0.0], Timestep(3), &bad, &s)
            .is_err());
    }
}
