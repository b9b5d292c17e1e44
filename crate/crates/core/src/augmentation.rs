//! Finite augmentation families with known Lipschitz constants.
//!
//! Each transform is a deterministic vector map fixed at construction; the
//! randomness of augmentation is only in *which* transform is drawn. The
//! transforms are:
//!
//! * additive noise: `x ↦ x + o` for a fixed offset `o ~ U[−s, s]^d`
//! * coordinate mask: zeroes a fixed subset of coordinates
//! * smooth-scale: `x ↦ x + γ·S x` with `S` the circular 3-point moving
//!   average, so `‖I + γS‖₂ ≤ 1 + γ` (attained on constant vectors)

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ActError, Result};
use crate::linalg::{distance, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    Noise,
    Mask,
    Smooth,
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransformKind::Noise => "noise",
            TransformKind::Mask => "mask",
            TransformKind::Smooth => "smooth",
        })
    }
}

impl FromStr for TransformKind {
    type Err = ActError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(Self::Noise),
            "mask" => Ok(Self::Mask),
            "smooth" => Ok(Self::Smooth),
            other => Err(ActError::InvalidArgument(format!(
                "unknown augmentation kind `{other}` (expected noise, mask or smooth)"
            ))),
        }
    }
}

/// One `(kind, parameter, seed)` entry of an experiment's augmentation list.
///
/// The parameter is the noise half-width, the masked fraction of
/// coordinates, or the smoothing weight γ. Written as `kind:param:seed`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformSpec {
    pub kind: TransformKind,
    pub param: f64,
    pub seed: u64,
}

impl FromStr for TransformSpec {
    type Err = ActError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let [kind, param, seed] = parts[..] else {
            return Err(ActError::InvalidArgument(format!(
                "augmentation `{s}` is not of the form kind:param:seed"
            )));
        };
        let param: f64 = param
            .parse()
            .map_err(|_| ActError::InvalidArgument(format!("bad augmentation parameter `{param}`")))?;
        let seed: u64 = seed
            .parse()
            .map_err(|_| ActError::InvalidArgument(format!("bad augmentation seed `{seed}`")))?;
        Ok(Self { kind: kind.parse()?, param, seed })
    }
}

impl fmt::Display for TransformSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.kind, self.param, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Transform {
    Noise { offset: Vec<f64> },
    /// Sorted, deduplicated coordinate indices set to zero.
    Mask { coords: Vec<usize> },
    Smooth { gamma: f64 },
}

impl Transform {
    pub fn noise(offset: Vec<f64>) -> Result<Self> {
        if offset.iter().any(|x| !x.is_finite()) {
            return Err(ActError::NonFinite("noise offset".into()));
        }
        Ok(Transform::Noise { offset })
    }

    pub fn mask(mut coords: Vec<usize>) -> Self {
        coords.sort_unstable();
        coords.dedup();
        Transform::Mask { coords }
    }

    pub fn smooth(gamma: f64) -> Result<Self> {
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(ActError::InvalidArgument(format!("smoothing weight {gamma} must be >= 0")));
        }
        Ok(Transform::Smooth { gamma })
    }

    /// Builds the transform a [`TransformSpec`] describes for inputs of dimension `d`.
    pub fn from_spec(spec: &TransformSpec, d: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        match spec.kind {
            TransformKind::Noise => {
                if !(spec.param >= 0.0 && spec.param.is_finite()) {
                    return Err(ActError::InvalidArgument(format!(
                        "noise scale {} must be >= 0",
                        spec.param
                    )));
                }
                let s = spec.param;
                Transform::noise((0..d).map(|_| rng.random_range(-s..=s)).collect())
            }
            TransformKind::Mask => {
                if !(0.0..=1.0).contains(&spec.param) {
                    return Err(ActError::InvalidArgument(format!(
                        "mask fraction {} outside [0, 1]",
                        spec.param
                    )));
                }
                let count = (spec.param * d as f64).round() as usize;
                let mut idx: Vec<usize> = (0..d).collect();
                idx.shuffle(&mut rng);
                idx.truncate(count);
                Ok(Transform::mask(idx))
            }
            TransformKind::Smooth => Transform::smooth(spec.param),
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match self {
            Transform::Noise { .. } | Transform::Mask { .. } => 1.0,
            Transform::Smooth { gamma } => 1.0 + gamma,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Transform::Noise { offset } => {
                assert_eq!(offset.len(), x.len(), "noise offset has wrong dimension");
                x.iter().zip(offset).map(|(a, b)| a + b).collect()
            }
            Transform::Mask { coords } => {
                let mut out = x.to_vec();
                for &c in coords {
                    if let Some(v) = out.get_mut(c) {
                        *v = 0.0;
                    }
                }
                out
            }
            Transform::Smooth { gamma } => {
                let d = x.len();
                (0..d)
                    .map(|i| {
                        let prev = x[(i + d - 1) % d];
                        let next = x[(i + 1) % d];
                        x[i] + gamma * (prev + x[i] + next) / 3.0
                    })
                    .collect()
            }
        }
    }
}

/// The family `{A_γ : γ ∈ [m]}`, drawn uniformly.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationSet {
    transforms: Vec<Transform>,
    lipschitz_m: f64,
}

impl AugmentationSet {
    pub fn new(transforms: Vec<Transform>) -> Result<Self> {
        if transforms.is_empty() {
            return Err(ActError::InvalidArgument("augmentation set needs at least one transform".into()));
        }
        let lipschitz_m = transforms.iter().map(Transform::lipschitz).fold(0.0, f64::max);
        Ok(Self { transforms, lipschitz_m })
    }

    pub fn from_specs(specs: &[TransformSpec], d: usize) -> Result<Self> {
        let transforms = specs.iter().map(|s| Transform::from_spec(s, d)).collect::<Result<_>>()?;
        Self::new(transforms)
    }

    /// The single identity transform.
    pub fn identity() -> Self {
        Self::new(vec![Transform::Smooth { gamma: 0.0 }]).expect("non-empty")
    }

    pub fn len(&self) -> usize {
        self.transforms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    pub fn transforms(&self) -> &[Transform] {
        &self.transforms
    }

    /// Max of the per-transform constants.
    pub fn lipschitz_constant(&self) -> f64 {
        self.lipschitz_m
    }

    /// Applies transform `gamma` (0-based).
    pub fn apply(&self, gamma: usize, x: &[f64]) -> Result<Vec<f64>> {
        let t = self.transforms.get(gamma).ok_or_else(|| {
            ActError::InvalidArgument(format!(
                "augmentation index {gamma} out of range for m = {}",
                self.transforms.len()
            ))
        })?;
        Ok(t.apply(x))
    }

    /// All `m` views of `x`, in transform order.
    pub fn views(&self, x: &[f64]) -> Vec<Vec<f64>> {
        self.transforms.iter().map(|t| t.apply(x)).collect()
    }

    /// Two transform indices drawn independently and uniformly.
    pub fn sample_indices<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let m = self.transforms.len();
        (rng.random_range(0..m), rng.random_range(0..m))
    }

    pub fn sample_pair<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let (a, b) = self.sample_indices(rng);
        (self.transforms[a].apply(x), self.transforms[b].apply(x))
    }

    /// Augmented pairs for the given sample indices, drawn in order.
    pub fn pair_batch<R: Rng + ?Sized>(
        &self,
        samples: &[Vec<f64>],
        indices: &[usize],
        rng: &mut R,
    ) -> Result<PairBatch> {
        let pairs = indices.iter().map(|&i| self.sample_pair(&samples[i], rng)).collect();
        PairBatch::new(pairs, indices.to_vec())
    }
}

/// `n` augmented pairs `(x₁⁽ⁱ⁾, x₂⁽ⁱ⁾)`, stored as two `n × d` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub view1: Matrix,
    pub view2: Matrix,
    pub source_indices: Vec<usize>,
}

impl PairBatch {
    pub fn new(pairs: Vec<(Vec<f64>, Vec<f64>)>, source_indices: Vec<usize>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(ActError::InvalidArgument("pair batch is empty".into()));
        }
        let (a, b): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let view1 = Matrix::from_rows(&a)?;
        let view2 = Matrix::from_rows(&b)?;
        if view1.cols() != view2.cols() {
            return Err(ActError::Shape("views have different dimensions".into()));
        }
        Ok(Self { view1, view2, source_indices })
    }

    pub fn len(&self) -> usize {
        self.view1.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.view1.cols()
    }
}

/// Empirical `(σ, δ)` of an augmentation family on labeled samples.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationQuality {
    pub sigma: f64,
    pub delta: f64,
    pub per_class_delta: Vec<f64>,
}

/// `min_{γ,β} ‖A_γ(x) − A_β(y)‖₂` from precomputed views.
fn min_view_distance(vx: &[Vec<f64>], vy: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for a in vx {
        for b in vy {
            best = best.min(distance(a, b));
        }
    }
    best
}

/// Estimates `δ` per class as the largest over same-class sample pairs of the
/// smallest distance between their augmented views. With `trim_quantile = q`
/// the `⌊q·n_k⌋` samples of each class with the largest worst-case distance
/// are dropped first, and `σ` is the smallest retained fraction.
pub fn estimate_quality(
    samples: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    aug: &AugmentationSet,
    trim_quantile: f64,
) -> Result<AugmentationQuality> {
    if samples.len() != labels.len() {
        return Err(ActError::Shape("samples and labels differ in length".into()));
    }
    if !(0.0..1.0).contains(&trim_quantile) {
        return Err(ActError::InvalidArgument(format!("trim quantile {trim_quantile} outside [0, 1)")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class
            .get_mut(y)
            .ok_or_else(|| ActError::InvalidArgument(format!("label {} exceeds K = {num_classes}", y + 1)))?
            .push(i);
    }
    let views: Vec<Vec<Vec<f64>>> = samples.iter().map(|x| aug.views(x)).collect();

    let mut per_class_delta = Vec::with_capacity(num_classes);
    let mut sigma = 1.0f64;
    for (k, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            return Err(ActError::EmptyClass(k));
        }
        let n = members.len();
        let mut dist = vec![0.0; n * n];
        for a in 0..n {
            for b in (a + 1)..n {
                let v = min_view_distance(&views[members[a]], &views[members[b]]);
                dist[a * n + b] = v;
                dist[b * n + a] = v;
            }
        }
        let drop = (trim_quantile * n as f64).floor() as usize;
        let mut keep: Vec<usize> = (0..n).collect();
        if drop > 0 {
            let score = |a: usize| (0..n).map(|b| dist[a * n + b]).fold(0.0, f64::max);
            keep.sort_by(|&a, &b| score(a).total_cmp(&score(b)).then(a.cmp(&b)));
            keep.truncate(n - drop);
        }
        let mut delta = 0.0f64;
        for &a in &keep {
            for &b in &keep {
                delta = delta.max(dist[a * n + b]);
            }
        }
        sigma = sigma.min(keep.len() as f64 / n as f64);
        per_class_delta.push(delta);
    }
    let delta = per_class_delta.iter().copied().fold(0.0, f64::max);
    Ok(AugmentationQuality { sigma, delta, per_class_delta })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mixed_set(d: usize) -> AugmentationSet {
        let specs: Vec<TransformSpec> = ["noise:0.1:1", "mask:0.25:2", "smooth:0.2:0"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect();
        AugmentationSet::from_specs(&specs, d).unwrap()
    }

    #[test]
    fn smooth_with_zero_gamma_is_identity() {
        let t = Transform::smooth(0.0).unwrap();
        assert_eq!(t.apply(&[0.3, -1.0, 2.5]), vec![0.3, -1.0, 2.5]);
    }

    #[test]
    fn mask_zeroes_listed_coordinates() {
        let t = Transform::mask(vec![2]);
        assert_eq!(t.apply(&[1.0, 2.0, 3.0]), vec![1.0, 2.0, 0.0]);
    }

    #[test]
    fn noise_is_a_fixed_offset() {
        let set = mixed_set(4);
        let x = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(set.apply(0, &x).unwrap(), set.apply(0, &x).unwrap());
        assert!(set.apply(3, &x).is_err());
    }

    #[test]
    fn lipschitz_constants() {
        let mask = AugmentationSet::new(vec![Transform::mask(vec![0])]).unwrap();
        assert_eq!(mask.lipschitz_constant(), 1.0);
        let smooth = AugmentationSet::new(vec![Transform::smooth(0.2).unwrap()]).unwrap();
        assert_eq!(smooth.lipschitz_constant(), 1.2);
        assert_eq!(mixed_set(5).lipschitz_constant(), 1.2);
    }

    #[test]
    fn single_transform_gives_identical_views() {
        let set = AugmentationSet::new(vec![Transform::smooth(0.5).unwrap()]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = [1.0, 2.0, 3.0];
        let (a, b) = set.sample_pair(&x, &mut rng);
        assert_eq!(a, b);
        assert_eq!(a, set.apply(0, &x).unwrap());
    }

    #[test]
    fn sample_pair_is_reproducible() {
        let set = mixed_set(3);
        let x = [0.5, 0.5, 0.5];
        let mut r1 = ChaCha8Rng::seed_from_u64(42);
        let mut r2 = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            assert_eq!(set.sample_pair(&x, &mut r1), set.sample_pair(&x, &mut r2));
        }
    }

    #[test]
    fn spec_parsing() {
        let s: TransformSpec = "mask:0.5:7".parse().unwrap();
        assert_eq!(s, TransformSpec { kind: TransformKind::Mask, param: 0.5, seed: 7 });
        assert_eq!(s.to_string(), "mask:0.5:7");
        assert!("blur:1:2".parse::<TransformSpec>().is_err());
        assert!("noise:1".parse::<TransformSpec>().is_err());
        assert!(Transform::from_spec(&"mask:1.5:0".parse().unwrap(), 4).is_err());
    }

    #[test]
    fn mask_spec_masks_requested_fraction() {
        let t = Transform::from_spec(&"mask:0.25:3".parse().unwrap(), 20).unwrap();
        let Transform::Mask { coords } = t else { panic!() };
        assert_eq!(coords.len(), 5);
    }

    #[test]
    fn quality_with_identity_is_intra_class_diameter() {
        let samples = vec![vec![0.0, 0.0], vec![3.0, 4.0], vec![10.0, 0.0], vec![10.0, 1.0]];
        let labels = vec![0, 0, 1, 1];
        let q = estimate_quality(&samples, &labels, 2, &AugmentationSet::identity(), 0.0).unwrap();
        assert_eq!(q.sigma, 1.0);
        assert_eq!(q.per_class_delta, vec![5.0, 1.0]);
        assert_eq!(q.delta, 5.0);
    }

    #[test]
    fn quality_of_identical_samples_is_zero() {
        let samples = vec![vec![1.0, 2.0]; 3];
        let q = estimate_quality(&samples, &[0, 0, 0], 1, &mixed_set(2), 0.0).unwrap();
        assert_eq!(q.delta, 0.0);
    }

    #[test]
    fn quality_errors() {
        let samples = vec![vec![1.0], vec![2.0]];
        assert!(matches!(
            estimate_quality(&samples, &[0, 0], 2, &AugmentationSet::identity(), 0.0),
            Err(ActError::EmptyClass(1))
        ));
        assert!(estimate_quality(&samples, &[0], 1, &AugmentationSet::identity(), 0.0).is_err());
    }

    #[test]
    fn trimming_drops_outliers_and_lowers_sigma() {
        let samples = vec![vec![0.0], vec![0.1], vec![0.2], vec![5.0]];
        let labels = vec![0; 4];
        let full = estimate_quality(&samples, &labels, 1, &AugmentationSet::identity(), 0.0).unwrap();
        let trimmed = estimate_quality(&samples, &labels, 1, &AugmentationSet::identity(), 0.25).unwrap();
        assert_eq!(full.delta, 5.0);
        assert!((trimmed.delta - 0.2).abs() < 1e-15);
        assert_eq!(trimmed.sigma, 0.75);
    }
}
