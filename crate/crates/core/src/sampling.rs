//! Seeded sampling of admissible perturbations.
//!
//! Each perturbed row is drawn independently from its own `ε`-ball. A
//! quarter of the draws sit on the sphere, a quarter on extreme points
//! (signed axis vectors for L1, sphere points for L2, corners for L∞), and
//! the rest uniformly inside the ball. L1 directions use the
//! exponential-with-random-sign construction normalized to unit L1 norm; the
//! interior radius factor is `u^(1/m)` with `m` the row width.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::bounds::{PNorm, PerturbationSpec};
use crate::matrix::Matrix;

pub struct BallSampler<'a> {
    spec: &'a PerturbationSpec,
    rng: ChaCha8Rng,
}

impl<'a> BallSampler<'a> {
    pub fn new(spec: &'a PerturbationSpec, seed: u64) -> Self {
        BallSampler { spec, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Flattened perturbation `δ` of length `|D|·m`.
    pub fn sample_delta(&mut self) -> Vec<f64> {
        let m = self.spec.width();
        let eps = self.spec.epsilon;
        let mut out = Vec::with_capacity(self.spec.dim());
        for _ in 0..self.spec.positions.len() {
            let mode = self.rng.gen_range(0..4u8);
            let mut dir = self.direction(m);
            let radius = match mode {
                0 => eps,
                1 => {
                    dir = self.extreme_point(m);
                    eps
                }
                _ => eps * self.rng.gen::<f64>().powf(1.0 / m as f64),
            };
            out.extend(dir.into_iter().map(|d| d * radius));
        }
        out
    }

    /// Flattened perturbed entries `x0_D + δ`.
    pub fn sample_point(&mut self) -> Vec<f64> {
        let delta = self.sample_delta();
        self.spec.center().iter().zip(delta).map(|(c, d)| c + d).collect()
    }

    /// Full perturbed input matrix.
    pub fn sample_input(&mut self) -> Matrix<f64> {
        let delta = self.sample_delta();
        self.spec.apply(&delta)
    }

    /// Unit-norm direction, uniform on the sphere of the spec's norm.
    fn direction(&mut self, m: usize) -> Vec<f64> {
        match self.spec.norm {
            PNorm::L1 => {
                let v: Vec<f64> = (0..m)
                    .map(|_| {
                        let e: f64 = Exp1.sample(&mut self.rng);
                        if self.rng.gen::<bool>() {
                            e
                        } else {
                            -e
                        }
                    })
                    .collect();
                normalize(v, PNorm::L1)
            }
            PNorm::L2 => {
                let v: Vec<f64> = (0..m).map(|_| StandardNormal.sample(&mut self.rng)).collect();
                normalize(v, PNorm::L2)
            }
            PNorm::Linf => {
                // Uniform on the cube surface: one coordinate pinned to ±1.
                let mut v: Vec<f64> = (0..m).map(|_| self.rng.gen_range(-1.0..=1.0)).collect();
                let k = self.rng.gen_range(0..m);
                v[k] = if self.rng.gen::<bool>() { 1.0 } else { -1.0 };
                v
            }
        }
    }

    fn extreme_point(&mut self, m: usize) -> Vec<f64> {
        match self.spec.norm {
            PNorm::L1 => {
                let mut v = vec![0.0; m];
                let k = self.rng.gen_range(0..m);
                v[k] = if self.rng.gen::<bool>() { 1.0 } else { -1.0 };
                v
            }
            PNorm::L2 => self.direction(m),
            PNorm::Linf => (0..m).map(|_| if self.rng.gen::<bool>() { 1.0 } else { -1.0 }).collect(),
        }
    }
}

fn normalize(v: Vec<f64>, norm: PNorm) -> Vec<f64> {
    let n = norm.norm(&v);
    if n > 0.0 {
        v.into_iter().map(|x| x / n).collect()
    } else {
        v
    }
}
