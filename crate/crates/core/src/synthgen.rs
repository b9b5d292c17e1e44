//! Synthetic source/target data with controllable domain shift.
//!
//! Class `k` is the uniform ball of radius `class_radius` around
//! `center_separation · e_k`. The target domain translates each class by a
//! fixed random direction of length `shift_rho` and perturbs the uniform
//! priors by `±shift_eta` in an alternating pattern.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::Dataset;
use crate::error::{ActError, Result};
use crate::linalg::norm2;

const SOURCE_STREAM: u64 = 1;
const SHIFT_STREAM: u64 = 2;
const TARGET_STREAM: u64 = 3;
const TEST_STREAM: u64 = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub d: usize,
    pub k: usize,
    pub n_s: usize,
    pub n_t: usize,
    pub n_test: usize,
    pub class_radius: f64,
    pub center_separation: f64,
    pub shift_rho: f64,
    pub shift_eta: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            d: 20,
            k: 4,
            n_s: 2000,
            n_t: 40,
            n_test: 400,
            class_radius: 0.3,
            center_separation: 1.0,
            shift_rho: 0.05,
            shift_eta: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ActError::InvalidArgument(msg));
        if self.k < 2 {
            return bad(format!("need at least 2 classes, got {}", self.k));
        }
        if self.k > self.d {
            return bad(format!("{} classes need {} orthogonal axes but d = {}", self.k, self.k, self.d));
        }
        if !(self.class_radius >= 0.0 && self.class_radius.is_finite()) {
            return bad(format!("class radius {} must be >= 0", self.class_radius));
        }
        if !(self.center_separation > 2.0 * self.class_radius && self.center_separation.is_finite()) {
            return bad(format!(
                "center separation {} must exceed twice the class radius {}",
                self.center_separation, self.class_radius
            ));
        }
        if !(self.shift_rho >= 0.0 && self.shift_rho.is_finite()) {
            return bad(format!("shift rho {} must be >= 0", self.shift_rho));
        }
        if !(self.shift_eta >= 0.0 && self.shift_eta.is_finite()) {
            return bad(format!("shift eta {} must be >= 0", self.shift_eta));
        }
        self.target_priors().map(|_| ())
    }

    pub fn source_priors(&self) -> Vec<f64> {
        vec![1.0 / self.k as f64; self.k]
    }

    /// `1/K + η` on even classes, `1/K − η` on odd ones; with odd `K` the last
    /// class keeps `1/K` so the total stays 1.
    pub fn target_priors(&self) -> Result<Vec<f64>> {
        let base = 1.0 / self.k as f64;
        let priors: Vec<f64> = (0..self.k)
            .map(|k| {
                if self.k % 2 == 1 && k == self.k - 1 {
                    base
                } else if k % 2 == 0 {
                    base + self.shift_eta
                } else {
                    base - self.shift_eta
                }
            })
            .collect();
        if priors.iter().any(|&p| p <= 0.0) {
            return Err(ActError::InvalidArgument(format!(
                "shift eta {} leaves a non-positive target prior",
                self.shift_eta
            )));
        }
        let total: f64 = priors.iter().sum();
        Ok(priors.into_iter().map(|p| p / total).collect())
    }

    pub fn center(&self, class: usize) -> Vec<f64> {
        let mut c = vec![0.0; self.d];
        c[class] = self.center_separation;
        c
    }

    /// Per-class translation vectors of length `shift_rho`.
    pub fn shifts(&self) -> Vec<Vec<f64>> {
        let mut rng = stream(self.seed, SHIFT_STREAM);
        (0..self.k)
            .map(|_| unit_vector(&mut rng, self.d).into_iter().map(|x| x * self.shift_rho).collect())
            .collect()
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn unit_vector<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm2(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn categorical<R: Rng>(rng: &mut R, priors: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in priors.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    priors.len() - 1
}

/// Uniform point in the ball of radius `r` around `center`.
fn ball_sample<R: Rng>(rng: &mut R, center: &[f64], r: f64) -> Vec<f64> {
    let dir = unit_vector(rng, center.len());
    let u: f64 = rng.random();
    let radius = r * u.powf(1.0 / center.len() as f64);
    center.iter().zip(dir).map(|(c, x)| c + radius * x).collect()
}

fn sample_domain(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng, n: usize, priors: &[f64], shifts: Option<&[Vec<f64>]>) -> Result<Dataset> {
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let k = categorical(rng, priors);
        let mut center = cfg.center(k);
        if let Some(shifts) = shifts {
            center.iter_mut().zip(&shifts[k]).for_each(|(c, s)| *c += s);
        }
        points.push(ball_sample(rng, &center, cfg.class_radius));
        labels.push(k);
    }
    Dataset::new(cfg.d, cfg.k, points, Some(labels))
}

/// `n_s` source samples with uniform priors. Labels are kept for diagnostics.
pub fn generate_source(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, SOURCE_STREAM);
    sample_domain(cfg, &mut rng, cfg.n_s, &cfg.source_priors(), None)
}

/// The `n_t` labeled target samples and an independent `n_test` test set.
pub fn generate_target(cfg: &SyntheticConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let priors = cfg.target_priors()?;
    let shifts = cfg.shifts();
    let mut rng = stream(cfg.seed, TARGET_STREAM);
    let target = sample_domain(cfg, &mut rng, cfg.n_t, &priors, Some(&shifts))?;
    let mut rng = stream(cfg.seed, TEST_STREAM);
    let test = sample_domain(cfg, &mut rng, cfg.n_test, &priors, Some(&shifts))?;
    Ok((target, test))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::distance;

    fn small() -> SyntheticConfig {
        SyntheticConfig { d: 6, k: 3, n_s: 300, n_t: 30, n_test: 60, seed: 11, ..SyntheticConfig::default() }
    }

    #[test]
    fn zero_radius_gives_centers() {
        let cfg = SyntheticConfig { class_radius: 0.0, ..small() };
        let ds = generate_source(&cfg).unwrap();
        for (p, &y) in ds.points.iter().zip(ds.labels.as_ref().unwrap()) {
            assert_eq!(p, &cfg.center(y));
        }
    }

    #[test]
    fn same_seed_same_data() {
        assert_eq!(generate_source(&small()).unwrap(), generate_source(&small()).unwrap());
        assert_eq!(generate_target(&small()).unwrap(), generate_target(&small()).unwrap());
        let other = SyntheticConfig { seed: 12, ..small() };
        assert_ne!(generate_source(&small()).unwrap(), generate_source(&other).unwrap());
    }

    #[test]
    fn samples_stay_in_their_ball() {
        let cfg = small();
        let ds = generate_source(&cfg).unwrap();
        for (p, &y) in ds.points.iter().zip(ds.labels.as_ref().unwrap()) {
            assert!(distance(p, &cfg.center(y)) <= cfg.class_radius + 1e-12);
        }
    }

    #[test]
    fn point_mass_translation_has_length_rho() {
        let cfg = SyntheticConfig { class_radius: 0.0, shift_rho: 0.5, ..small() };
        let (target, _) = generate_target(&cfg).unwrap();
        for (p, &y) in target.points.iter().zip(target.labels.as_ref().unwrap()) {
            assert!((distance(p, &cfg.center(y)) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn priors() {
        let cfg = SyntheticConfig { k: 4, d: 4, shift_eta: 0.05, ..small() };
        let p = cfg.target_priors().unwrap();
        let expected = [0.3, 0.2, 0.3, 0.2];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let odd = SyntheticConfig { k: 3, shift_eta: 0.1, ..small() }.target_priors().unwrap();
        assert!((odd.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(SyntheticConfig { shift_eta: 0.5, ..small() }.validate().is_err());
    }

    #[test]
    fn invalid_configs() {
        assert!(SyntheticConfig { k: 1, ..small() }.validate().is_err());
        assert!(SyntheticConfig { k: 7, ..small() }.validate().is_err());
        assert!(SyntheticConfig { class_radius: 0.5, ..small() }.validate().is_err());
        assert!(SyntheticConfig { shift_rho: -1.0, ..small() }.validate().is_err());
    }

    #[test]
    fn class_counts_are_multinomial() {
        let cfg = SyntheticConfig { d: 4, k: 4, n_s: 1000, ..small() };
        let counts = generate_source(&cfg).unwrap().class_counts().unwrap();
        let (mean, sd) = (250.0, (1000.0f64 * 0.25 * 0.75).sqrt());
        for c in counts {
            assert!((c as f64 - mean).abs() <= 3.0 * sd, "{c}");
        }
    }

    #[test]
    fn classes_are_disjoint() {
        let cfg = small();
        let ds = generate_source(&cfg).unwrap();
        let labels = ds.labels.as_ref().unwrap();
        for i in 0..ds.len() {
            for j in 0..ds.len() {
                if labels[i] != labels[j] {
                    assert!(distance(&ds.points[i], &ds.points[j]) > 0.0);
                }
            }
        }
    }
}
