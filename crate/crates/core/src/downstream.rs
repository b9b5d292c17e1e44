//! Few-shot evaluation on the target domain: the class-template probe and
//! k-nearest neighbours over frozen representations.

use std::fmt;
use std::io::Write;

use rand::Rng;

use crate::augmentation::AugmentationSet;
use crate::dataset::Dataset;
use crate::encoder::{EncoderParams, Representation};
use crate::error::{ActError, Result};
use crate::linalg::{fixed_dot, Matrix};

/// Row `k` of `weights` is the mean representation of class `k`'s augmented
/// views.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub weights: Matrix,
    pub class_counts: Vec<usize>,
}

/// Draws one augmented pair per sample, in sample order, and averages both
/// views' representations per class.
pub fn fit_linear_probe<R: Rng + ?Sized>(
    f: &EncoderParams,
    target: &Dataset,
    aug: &AugmentationSet,
    rng: &mut R,
    project: bool,
) -> Result<ProbeModel> {
    let labels = target.require_labels()?;
    let k = target.num_classes;
    let d_star = f.output_dim();
    let mut sums = vec![vec![0.0; d_star]; k];
    let mut counts = vec![0usize; k];
    for (x, &y) in target.points.iter().zip(labels) {
        let (z1, z2) = aug.sample_pair(x, rng);
        let (r1, r2) = (f.forward(&z1, project), f.forward(&z2, project));
        for ((s, a), b) in sums[y].iter_mut().zip(&r1).zip(&r2) {
            *s += a + b;
        }
        counts[y] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(ActError::EmptyClass(empty));
    }
    let mut weights = Matrix::zeros(k, d_star);
    for (c, (s, &n)) in sums.iter().zip(&counts).enumerate() {
        for (j, v) in s.iter().enumerate() {
            weights.set(c, j, v / (2.0 * n as f64));
        }
    }
    Ok(ProbeModel { weights, class_counts: counts })
}

/// Index of the first maximum.
fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// `argmax_k (Ŵ r)_k` for a representation `r`.
pub fn predict_representation(probe: &ProbeModel, r: &[f64]) -> usize {
    let w = &probe.weights;
    let scores: Vec<f64> = (0..w.rows()).map(|k| fixed_dot(w.row(k), r)).collect();
    argmax(&scores)
}

pub fn predict_probe(probe: &ProbeModel, f: &EncoderParams, z: &[f64], project: bool) -> usize {
    predict_representation(probe, &f.forward(z, project))
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    fixed_dot(&diff, &diff)
}

/// Majority vote among the `k` nearest training representations. Distance
/// ties go to the smaller training index; vote ties go to the tied class with
/// the closest member.
pub fn knn_predict(train: &[Representation], labels: &[usize], query: &[f64], k: usize) -> Result<usize> {
    if train.is_empty() {
        return Err(ActError::InvalidArgument("k-NN training set is empty".into()));
    }
    if train.len() != labels.len() {
        return Err(ActError::Shape(format!("{} representations with {} labels", train.len(), labels.len())));
    }
    if k == 0 || k > train.len() {
        return Err(ActError::InvalidArgument(format!(
            "k = {k} must be in 1..={} (training set size)",
            train.len()
        )));
    }
    let mut order: Vec<(f64, usize)> =
        train.iter().enumerate().map(|(i, r)| (squared_distance(r, query), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let neighbours = &order[..k];

    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut votes = vec![0usize; num_classes];
    for &(_, i) in neighbours {
        votes[labels[i]] += 1;
    }
    let top = *votes.iter().max().expect("k >= 1");
    let winner = neighbours
        .iter()
        .map(|&(_, i)| labels[i])
        .find(|&y| votes[y] == top)
        .expect("a top-voted class has a neighbour");
    Ok(winner)
}

/// Fraction of positions where prediction and truth differ.
pub fn error_rate(predictions: &[usize], truth: &[usize]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(ActError::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    if predictions.is_empty() {
        return Err(ActError::InvalidArgument("no predictions to score".into()));
    }
    let wrong = predictions.iter().zip(truth).filter(|(p, t)| p != t).count();
    Ok(wrong as f64 / predictions.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    Probe,
    Knn,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Probe => "probe",
            Protocol::Knn => "knn",
        })
    }
}

/// One row of the evaluation report.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub protocol: Protocol,
    /// Neighbour count; `None` for the probe.
    pub k: Option<usize>,
    pub n_per_class: Vec<usize>,
    pub error: f64,
}

pub const EVAL_CSV_HEADER: &str = "protocol,k,n_per_class,error,accuracy";

pub fn write_eval_csv<W: Write>(rows: &[EvalRow], mut w: W) -> Result<()> {
    writeln!(w, "{EVAL_CSV_HEADER}")?;
    for r in rows {
        let counts: Vec<String> = r.n_per_class.iter().map(usize::to_string).collect();
        let k = r.k.map(|k| k.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{:?},{:?}", r.protocol, k, counts.join(";"), r.error, 1.0 - r.error)?;
    }
    Ok(())
}

/// Probe and k-NN test error of `f`, fitted on the labeled target samples and
/// scored on un-augmented test points.
pub fn evaluate<R: Rng + ?Sized>(
    f: &EncoderParams,
    target: &Dataset,
    test: &Dataset,
    aug: &AugmentationSet,
    knn_k: usize,
    rng: &mut R,
) -> Result<Vec<EvalRow>> {
    let probe = fit_linear_probe(f, target, aug, rng, true)?;
    let truth = test.require_labels()?;
    let test_reps = f.encode_all(&test.points, true);
    let probe_pred: Vec<usize> = test_reps.iter().map(|r| predict_representation(&probe, r)).collect();

    let train_reps = f.encode_all(&target.points, true);
    let train_labels = target.require_labels()?;
    let knn_pred = test_reps
        .iter()
        .map(|r| knn_predict(&train_reps, train_labels, r, knn_k))
        .collect::<Result<Vec<_>>>()?;

    Ok(vec![
        EvalRow {
            protocol: Protocol::Probe,
            k: None,
            n_per_class: probe.class_counts.clone(),
            error: error_rate(&probe_pred, truth)?,
        },
        EvalRow {
            protocol: Protocol::Knn,
            k: Some(knn_k),
            n_per_class: probe.class_counts,
            error: error_rate(&knn_pred, truth)?,
        },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmentation::Transform;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_encoder(d: usize) -> EncoderParams {
        let mut f = EncoderParams::init(d, d, d, 1, 0).unwrap();
        f.hidden[0].weight = Matrix::identity(d);
        f.hidden[0].bias = vec![0.0; d];
        f.output = Matrix::identity(d);
        f
    }

    #[test]
    fn one_sample_per_class_gives_its_representation() {
        let f = EncoderParams::init(3, 2, 8, 2, 1).unwrap();
        let pts = vec![vec![0.1, 0.2, 0.3], vec![-0.5, 0.4, 0.9], vec![1.0, -1.0, 0.0]];
        let ds = Dataset::new(3, 3, pts.clone(), Some(vec![0, 1, 2])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let probe = fit_linear_probe(&f, &ds, &AugmentationSet::identity(), &mut rng, true).unwrap();
        for (k, p) in pts.iter().enumerate() {
            assert_eq!(probe.weights.row(k), f.forward(p, true).as_slice());
        }
        assert_eq!(probe.class_counts, vec![1, 1, 1]);
    }

    #[test]
    fn constant_encoder_rows_are_constant() {
        let mut f = EncoderParams::init(2, 2, 2, 1, 0).unwrap();
        f.hidden[0].weight = Matrix::zeros(2, 2);
        f.hidden[0].bias = vec![1.0, 0.0];
        f.output = Matrix::from_rows(&[vec![0.6, 0.0], vec![0.8, 0.0]]).unwrap();
        let ds = Dataset::new(2, 2, vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]], Some(vec![0, 1, 1])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let probe = fit_linear_probe(&f, &ds, &AugmentationSet::identity(), &mut rng, true).unwrap();
        for k in 0..2 {
            assert_eq!(probe.weights.row(k), &[0.6, 0.8]);
        }
    }

    #[test]
    fn empty_class_is_an_error() {
        let f = identity_encoder(2);
        let ds = Dataset::new(2, 3, vec![vec![1.0, 0.0], vec![0.0, 1.0]], Some(vec![0, 2])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = fit_linear_probe(&f, &ds, &AugmentationSet::identity(), &mut rng, true).unwrap_err();
        assert!(matches!(err, ActError::EmptyClass(1)));
        assert_eq!(err.to_string(), "class 2 has no samples");
    }

    #[test]
    fn probe_matches_loop_oracle_on_the_same_stream() {
        let f = EncoderParams::init(3, 2, 8, 2, 4).unwrap();
        let aug = AugmentationSet::new(vec![Transform::mask(vec![0]), Transform::smooth(0.3).unwrap()]).unwrap();
        let mut data_rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec<f64>> = (0..12).map(|_| (0..3).map(|_| data_rng.random_range(-1.0..1.0)).collect()).collect();
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let ds = Dataset::new(3, 3, pts.clone(), Some(labels.clone())).unwrap();
        let probe = fit_linear_probe(&f, &ds, &aug, &mut ChaCha8Rng::seed_from_u64(6), true).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut oracle = vec![vec![0.0; 2]; 3];
        for (x, &y) in pts.iter().zip(&labels) {
            let (a, b) = aug.sample_indices(&mut rng);
            let ra = f.forward(&aug.apply(a, x).unwrap(), true);
            let rb = f.forward(&aug.apply(b, x).unwrap(), true);
            for j in 0..2 {
                oracle[y][j] += (ra[j] + rb[j]) / 8.0;
            }
        }
        for k in 0..3 {
            for j in 0..2 {
                assert!((probe.weights.get(k, j) - oracle[k][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prediction_rules() {
        let probe = ProbeModel { weights: Matrix::identity(3), class_counts: vec![1; 3] };
        assert_eq!(predict_representation(&probe, &[0.0, 1.0, 0.0]), 1);
        let zero = ProbeModel { weights: Matrix::zeros(3, 3), class_counts: vec![1; 3] };
        assert_eq!(predict_representation(&zero, &[0.3, 0.1, 0.2]), 0);
    }

    #[test]
    fn knn_rules() {
        let train = vec![vec![0.0], vec![1.0], vec![2.0], vec![10.0]];
        let labels = vec![0, 0, 0, 1];
        assert_eq!(knn_predict(&train, &labels, &[10.0], 1).unwrap(), 1);
        assert_eq!(knn_predict(&train, &labels, &[10.0], 4).unwrap(), 0);
        assert!(knn_predict(&train, &labels, &[0.0], 5).is_err());
        assert!(knn_predict(&[], &[], &[0.0], 1).is_err());
        // one vote each: the class with the closer neighbour wins
        let train = vec![vec![0.0], vec![3.0]];
        assert_eq!(knn_predict(&train, &[1, 0], &[1.0], 2).unwrap(), 1);
        assert_eq!(knn_predict(&train, &[1, 0], &[2.0], 2).unwrap(), 0);
        // equidistant: the smaller index is nearer
        assert_eq!(knn_predict(&train, &[1, 0], &[1.5], 1).unwrap(), 1);
    }

    #[test]
    fn error_rate_counts() {
        assert_eq!(error_rate(&[0, 1, 2], &[0, 1, 2]).unwrap(), 0.0);
        assert_eq!(error_rate(&[1, 1], &[0, 0]).unwrap(), 1.0);
        let truth = vec![0; 12];
        let mut pred = truth.clone();
        pred[..3].fill(1);
        assert_eq!(error_rate(&pred, &truth).unwrap(), 0.25);
        assert!(error_rate(&[0], &[0, 1]).is_err());
        assert!(error_rate(&[], &[]).is_err());
    }

    #[test]
    fn eval_csv_layout() {
        let rows = vec![
            EvalRow { protocol: Protocol::Probe, k: None, n_per_class: vec![3, 2], error: 0.25 },
            EvalRow { protocol: Protocol::Knn, k: Some(5), n_per_class: vec![3, 2], error: 0.5 },
        ];
        let mut buf = Vec::new();
        write_eval_csv(&rows, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "protocol,k,n_per_class,error,accuracy\nprobe,,3;2,0.25,0.75\nknn,5,3;2,0.5,0.5\n"
        );
    }
}
