//! Certificate quantities on finite data.
//!
//! Expectations over the augmentation family are exact averages over its `m`
//! transforms; expectations over a domain are empirical means over a sample.
//! Representations are the encoder's projected outputs and correlations are
//! raw (not standardized).

use std::fmt::Write as _;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augmentation::{estimate_quality, AugmentationSet};
use crate::dataset::Dataset;
use crate::downstream::{fit_linear_probe, ProbeModel};
use crate::encoder::{EncoderParams, Representation};
use crate::error::{ActError, Result};
use crate::linalg::{distance, fixed_dot, fixed_sum, Matrix};

/// Largest distance between the representations of two views of `x`.
pub fn view_spread(f: &EncoderParams, aug: &AugmentationSet, x: &[f64]) -> f64 {
    let reps = f.encode_all(&aug.views(x), true);
    let mut spread = 0.0f64;
    for (i, a) in reps.iter().enumerate() {
        for b in &reps[i + 1..] {
            spread = spread.max(distance(a, b));
        }
    }
    spread
}

/// Fraction of samples whose augmented views spread by more than `epsilon`.
pub fn estimate_r(f: &EncoderParams, samples: &[Vec<f64>], aug: &AugmentationSet, epsilon: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(ActError::InvalidArgument("no samples to estimate R on".into()));
    }
    if !(epsilon > 0.0) {
        return Err(ActError::InvalidArgument(format!("epsilon {epsilon} must be positive")));
    }
    let over = samples.iter().filter(|x| view_spread(f, aug, x) > epsilon).count();
    Ok(over as f64 / samples.len() as f64)
}

/// Representations of all views, one inner vector per sample.
fn view_representations(f: &EncoderParams, aug: &AugmentationSet, samples: &[Vec<f64>]) -> Vec<Vec<Representation>> {
    samples.iter().map(|x| f.encode_all(&aug.views(x), true)).collect()
}

fn mean_rep(reps: &[Representation]) -> Vec<f64> {
    let d = reps[0].len();
    (0..d)
        .map(|j| fixed_sum(&reps.iter().map(|r| r[j]).collect::<Vec<_>>()) / reps.len() as f64)
        .collect()
}

/// Row `k` is the mean over class-`k` samples of the mean over all views.
pub fn class_centers(
    f: &EncoderParams,
    samples: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    aug: &AugmentationSet,
) -> Result<Matrix> {
    if samples.len() != labels.len() {
        return Err(ActError::Shape("samples and labels differ in length".into()));
    }
    let mut members: Vec<Vec<Vec<f64>>> = vec![Vec::new(); num_classes];
    for (x, &y) in samples.iter().zip(labels) {
        let views = f.encode_all(&aug.views(x), true);
        members
            .get_mut(y)
            .ok_or_else(|| ActError::InvalidArgument(format!("label {} exceeds K = {num_classes}", y + 1)))?
            .push(mean_rep(&views));
    }
    let mut centers = Matrix::zeros(num_classes, f.output_dim());
    for (k, m) in members.iter().enumerate() {
        if m.is_empty() {
            return Err(ActError::EmptyClass(k));
        }
        centers.row_mut(k).copy_from_slice(&mean_rep(m));
    }
    Ok(centers)
}

/// `max_{i≠j} |μ(i)ᵀμ(j)|`.
pub fn max_center_alignment(centers: &Matrix) -> Result<f64> {
    if centers.rows() < 2 {
        return Err(ActError::InvalidArgument("center alignment needs at least 2 classes".into()));
    }
    let mut best = 0.0f64;
    for i in 0..centers.rows() {
        for j in i + 1..centers.rows() {
            best = best.max(fixed_dot(centers.row(i), centers.row(j)).abs());
        }
    }
    Ok(best)
}

/// Scalar inputs of the downstream certificate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertificateInputs {
    pub sigma_t: f64,
    pub delta_t: f64,
    pub epsilon: f64,
    pub r_t: f64,
    pub p_t_min: f64,
    pub kappa: f64,
    pub b1: f64,
    pub b2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Certificate {
    pub theta: f64,
    pub gamma_min: f64,
    pub delta_mu_hat: f64,
    /// `2 − 2Γ_min` was negative and its square root was taken at 0.
    pub clamped: bool,
    /// A factor of `Γ_min + 1` is non-positive, or `Γ_min > 1`: `Θ` certifies
    /// nothing even when it comes out positive.
    pub vacuous: bool,
}

/// `Γ_min = (σ_t − R_t/min p_t)(1 + (B1/B2)² − κδ_t/B2 − 2ε/B2) − 1`,
/// `Δ = 1 − min_k‖μ̂(k)‖²/B2²`, and
/// `Θ = Γ_min − √(2 − 2Γ_min) − Δ/2 − 2 max_k‖μ̂(k) − μ(k)‖/B2`,
/// with `μ̂` the probe rows and `μ` the target centers.
pub fn theta_certificate(inputs: &CertificateInputs, probe: &ProbeModel, centers_t: &Matrix) -> Result<Certificate> {
    let CertificateInputs { sigma_t, delta_t, epsilon, r_t, p_t_min, kappa, b1, b2 } = *inputs;
    if !(p_t_min > 0.0) {
        return Err(ActError::InvalidArgument(format!("min target prior {p_t_min} must be positive")));
    }
    let w = &probe.weights;
    if w.shape() != centers_t.shape() || w.rows() == 0 {
        return Err(ActError::Shape("probe rows and target centers differ in shape".into()));
    }
    let mass = sigma_t - r_t / p_t_min;
    let overlap = 1.0 + (b1 / b2).powi(2) - kappa * delta_t / b2 - 2.0 * epsilon / b2;
    let gamma_min = mass * overlap - 1.0;
    let min_sq = (0..w.rows()).map(|k| fixed_dot(w.row(k), w.row(k))).fold(f64::INFINITY, f64::min);
    let delta_mu_hat = 1.0 - min_sq / (b2 * b2);
    let max_dev = (0..w.rows()).map(|k| distance(w.row(k), centers_t.row(k))).fold(0.0, f64::max);
    let radicand = 2.0 - 2.0 * gamma_min;
    let clamped = radicand < 0.0;
    let theta = gamma_min - radicand.max(0.0).sqrt() - delta_mu_hat / 2.0 - 2.0 * max_dev / b2;
    let vacuous = mass <= 0.0 || overlap <= 0.0 || clamped;
    Ok(Certificate { theta, gamma_min, delta_mu_hat, clamped, vacuous })
}

/// Inputs of the `φ` statistic beyond `ε` and `R_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiParams {
    pub sigma_s: f64,
    pub delta_s: f64,
    pub kappa: f64,
    pub b2: f64,
    /// Source class priors.
    pub priors: Vec<f64>,
}

/// `4B2²[(1 − σ + (κδ + 2ε)/(2B2))² + (1 − σ) + K R (3 − 2σ + (κδ + 2ε)/B2)
/// + R² Σ_k 1/p(k)] + B2 (ε² + 4B2² R)^{1/2}`.
pub fn phi(p: &PhiParams, epsilon: f64, r_s: f64) -> f64 {
    let k = p.priors.len() as f64;
    let spread = p.kappa * p.delta_s + 2.0 * epsilon;
    let inv_priors: f64 = p.priors.iter().map(|q| 1.0 / q).sum();
    let bracket = (1.0 - p.sigma_s + spread / (2.0 * p.b2)).powi(2)
        + (1.0 - p.sigma_s)
        + k * r_s * (3.0 - 2.0 * p.sigma_s + spread / p.b2)
        + r_s * r_s * inv_priors;
    4.0 * p.b2 * p.b2 * bracket + p.b2 * (epsilon * epsilon + 4.0 * p.b2 * p.b2 * r_s).sqrt()
}

/// `E_x E_{γ,β} ‖f(A_γ x) − f(A_β x)‖²` over all `m²` ordered view pairs.
pub fn exact_alignment(f: &EncoderParams, samples: &[Vec<f64>], aug: &AugmentationSet) -> Result<f64> {
    if samples.is_empty() {
        return Err(ActError::InvalidArgument("no samples".into()));
    }
    let m2 = (aug.len() * aug.len()) as f64;
    let per_sample: Vec<f64> = view_representations(f, aug, samples)
        .iter()
        .map(|reps| {
            let terms: Vec<f64> = reps
                .iter()
                .flat_map(|a| reps.iter().map(move |b| distance(a, b).powi(2)))
                .collect();
            fixed_sum(&terms) / m2
        })
        .collect();
    Ok(fixed_sum(&per_sample) / samples.len() as f64)
}

/// `E_x E_{γ,β} f(A_γ x) f(A_β x)ᵀ`.
pub fn exact_cross_correlation(f: &EncoderParams, samples: &[Vec<f64>], aug: &AugmentationSet) -> Result<Matrix> {
    if samples.is_empty() {
        return Err(ActError::InvalidArgument("no samples".into()));
    }
    let means: Vec<Vec<f64>> = view_representations(f, aug, samples).iter().map(|r| mean_rep(r)).collect();
    let m = Matrix::from_rows(&means)?;
    Ok(m.transpose().matmul(&m)?.scale(1.0 / samples.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentBoundRow {
    pub epsilon: f64,
    pub r_s: f64,
    /// `R_s²`
    pub lhs: f64,
    /// `(m⁴/ε²) L_align`
    pub rhs: f64,
    pub slack: f64,
    pub phi: f64,
}

impl AlignmentBoundRow {
    pub fn holds(&self) -> bool {
        self.slack >= -1e-9
    }
}

pub const ALIGNMENT_CSV_HEADER: &str = "epsilon,r_s,lhs,rhs,slack,phi,holds";

pub fn write_alignment_csv<W: Write>(rows: &[AlignmentBoundRow], mut w: W) -> Result<()> {
    writeln!(w, "{ALIGNMENT_CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{:?},{:?},{:?},{:?},{:?},{:?},{}", r.epsilon, r.r_s, r.lhs, r.rhs, r.slack, r.phi, u8::from(r.holds()))?;
    }
    Ok(())
}

/// Checks `R_s(ε)² ≤ (m⁴/ε²) L_align` at every grid point and reports `φ`.
pub fn verify_alignment_bound(
    f: &EncoderParams,
    samples: &[Vec<f64>],
    aug: &AugmentationSet,
    epsilon_grid: &[f64],
    phi_params: &PhiParams,
) -> Result<Vec<AlignmentBoundRow>> {
    let l_align = exact_alignment(f, samples, aug)?;
    let spreads: Vec<f64> = samples.iter().map(|x| view_spread(f, aug, x)).collect();
    let m4 = (aug.len() as f64).powi(4);
    epsilon_grid
        .iter()
        .map(|&eps| {
            if !(eps > 0.0) {
                return Err(ActError::InvalidArgument(format!("epsilon {eps} must be positive")));
            }
            let r_s = spreads.iter().filter(|&&s| s > eps).count() as f64 / samples.len() as f64;
            let (lhs, rhs) = (r_s * r_s, m4 / (eps * eps) * l_align);
            Ok(AlignmentBoundRow { epsilon: eps, r_s, lhs, rhs, slack: rhs - lhs, phi: phi(phi_params, eps, r_s) })
        })
        .collect()
}

/// `count` points geometrically spaced from `lo` to `hi`.
pub fn geometric_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let ratio = (hi / lo).ln() / (count - 1) as f64;
    (0..count)
        .map(|i| if i + 1 == count { hi } else { lo * (ratio * i as f64).exp() })
        .collect()
}

/// Hard cap on the assignment size.
pub const WASSERSTEIN_MAX_POINTS: usize = 512;

/// Minimum-cost perfect matching on a square cost matrix (shortest augmenting
/// paths with potentials). Returns `assignment[row] = column`.
pub fn min_cost_assignment(cost: &Matrix) -> Vec<usize> {
    let n = cost.rows();
    debug_assert_eq!(n, cost.cols());
    // 1-based internally; column 0 is the virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if row_of[j] > 0 {
            assignment[row_of[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Exact 1-Wasserstein distance between two equal-size empirical measures
/// under the Euclidean cost.
pub fn wasserstein1(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(ActError::Shape(format!("point sets of size {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(ActError::InvalidArgument("empty point sets".into()));
    }
    if a.len() > WASSERSTEIN_MAX_POINTS {
        return Err(ActError::InvalidArgument(format!(
            "{} points exceeds the cap of {WASSERSTEIN_MAX_POINTS}",
            a.len()
        )));
    }
    let n = a.len();
    let mut cost = Matrix::zeros(n, n);
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            cost.set(i, j, distance(x, y));
        }
    }
    let assignment = min_cost_assignment(&cost);
    let matched: Vec<f64> = assignment.iter().enumerate().map(|(i, &j)| cost.get(i, j)).collect();
    Ok(fixed_sum(&matched) / n as f64)
}

/// Draws `n` distinct points of `pool` in a seeded random order.
fn subsample<R: Rng>(pool: &[Vec<f64>], n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(rng);
    idx.truncate(n);
    idx.into_iter().map(|i| pool[i].clone()).collect()
}

/// `max_k |p_s(k) − p_t(k)|` of the empirical label frequencies.
pub fn prior_gap(source_labels: &[usize], target_labels: &[usize], num_classes: usize) -> Result<f64> {
    let freq = |labels: &[usize]| -> Result<Vec<f64>> {
        if labels.is_empty() {
            return Err(ActError::InvalidArgument("no labels".into()));
        }
        let mut c = vec![0.0; num_classes];
        for &y in labels {
            *c.get_mut(y)
                .ok_or_else(|| ActError::InvalidArgument(format!("label {} exceeds K = {num_classes}", y + 1)))? += 1.0;
        }
        Ok(c.into_iter().map(|x| x / labels.len() as f64).collect())
    };
    let (ps, pt) = (freq(source_labels)?, freq(target_labels)?);
    Ok(ps.iter().zip(&pt).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
}

/// Knobs of [`diagnose`].
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnoseOptions {
    pub epsilon: f64,
    pub epsilon_grid: Vec<f64>,
    pub lambda: f64,
    /// Per-class trimming quantile for `(σ, δ)`.
    pub trim_quantile: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsReport {
    pub epsilon: f64,
    pub n_source: usize,
    pub n_target_labeled: usize,
    pub n_target_eval: usize,
    pub r_s: f64,
    pub r_t: f64,
    pub centers_s: Matrix,
    pub centers_t: Matrix,
    pub max_center_alignment: f64,
    pub sigma_s: f64,
    pub delta_s: f64,
    pub sigma_t: f64,
    pub delta_t: f64,
    pub kappa: f64,
    pub p_t_min: f64,
    pub theta: f64,
    pub gamma_min: f64,
    pub delta_mu_hat: f64,
    pub theta_clamped: bool,
    pub theta_vacuous: bool,
    pub l_align: f64,
    pub l_div: f64,
    pub phi: f64,
    pub alignment_bound_ok: bool,
    pub wasserstein_per_class: Vec<f64>,
    pub wasserstein_sample_sizes: Vec<usize>,
    /// Source-vs-source distance per class at the same sample sizes.
    pub wasserstein_baseline: Vec<f64>,
    pub wasserstein_noise_threshold: f64,
    pub prior_gap_eta: f64,
}

fn join(v: impl IntoIterator<Item = String>, sep: &str) -> String {
    v.into_iter().collect::<Vec<_>>().join(sep)
}

fn floats(v: &[f64]) -> String {
    join(v.iter().map(|x| format!("{x:?}")), ",")
}

fn matrix_text(m: &Matrix) -> String {
    join((0..m.rows()).map(|r| floats(m.row(r))), ";")
}

impl DiagnosticsReport {
    /// `key = value` lines; vectors comma-separated, matrix rows separated by `;`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("epsilon", format!("{:?}", self.epsilon));
        kv("n_source", self.n_source.to_string());
        kv("n_target_labeled", self.n_target_labeled.to_string());
        kv("n_target_eval", self.n_target_eval.to_string());
        kv("R_s", format!("{:?}", self.r_s));
        kv("R_t", format!("{:?}", self.r_t));
        kv("centers_s", matrix_text(&self.centers_s));
        kv("centers_t", matrix_text(&self.centers_t));
        kv("max_center_alignment", format!("{:?}", self.max_center_alignment));
        kv("sigma_s", format!("{:?}", self.sigma_s));
        kv("delta_s", format!("{:?}", self.delta_s));
        kv("sigma_t", format!("{:?}", self.sigma_t));
        kv("delta_t", format!("{:?}", self.delta_t));
        kv("kappa", format!("{:?}", self.kappa));
        kv("p_t_min", format!("{:?}", self.p_t_min));
        kv("theta", format!("{:?}", self.theta));
        kv("gamma_min", format!("{:?}", self.gamma_min));
        kv("delta_mu_hat", format!("{:?}", self.delta_mu_hat));
        kv("theta_clamped", self.theta_clamped.to_string());
        kv("theta_vacuous", self.theta_vacuous.to_string());
        kv("l_align", format!("{:?}", self.l_align));
        kv("l_div", format!("{:?}", self.l_div));
        kv("phi", format!("{:?}", self.phi));
        kv("alignment_bound_ok", self.alignment_bound_ok.to_string());
        kv("wasserstein_per_class", floats(&self.wasserstein_per_class));
        kv("wasserstein_sample_sizes", join(self.wasserstein_sample_sizes.iter().map(usize::to_string), ","));
        kv("wasserstein_baseline", floats(&self.wasserstein_baseline));
        kv("wasserstein_noise_threshold", format!("{:?}", self.wasserstein_noise_threshold));
        kv("prior_gap_eta", format!("{:?}", self.prior_gap_eta));
        s
    }
}

/// Parses the `key = value` layout of [`DiagnosticsReport::to_text`] into
/// pairs, in file order.
pub fn parse_report(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

fn by_class<'a>(ds: &'a Dataset) -> Result<Vec<Vec<&'a Vec<f64>>>> {
    let mut out = vec![Vec::new(); ds.num_classes];
    for (x, &y) in ds.points.iter().zip(ds.require_labels()?) {
        out[y].push(x);
    }
    Ok(out)
}

/// Full report for encoder `f`. `source` is the (labelled) pretraining set,
/// `target` the few-shot labelled set the probe is fitted on, and `eval` a
/// held-out target sample standing in for the target population.
pub fn diagnose(
    f: &EncoderParams,
    source: &Dataset,
    target: &Dataset,
    eval: &Dataset,
    aug: &AugmentationSet,
    opts: &DiagnoseOptions,
) -> Result<(DiagnosticsReport, Vec<AlignmentBoundRow>)> {
    let k = source.num_classes;
    if target.num_classes != k || eval.num_classes != k {
        return Err(ActError::InvalidArgument("datasets disagree on the class count".into()));
    }
    let src_labels = source.require_labels()?;
    let eval_labels = eval.require_labels()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let r_s = estimate_r(f, &source.points, aug, opts.epsilon)?;
    let r_t = estimate_r(f, &eval.points, aug, opts.epsilon)?;
    let centers_s = class_centers(f, &source.points, src_labels, k, aug)?;
    let centers_t = class_centers(f, &eval.points, eval_labels, k, aug)?;
    let quality_s = estimate_quality(&source.points, src_labels, k, aug, opts.trim_quantile)?;
    let quality_t = estimate_quality(&eval.points, eval_labels, k, aug, opts.trim_quantile)?;

    let priors_s: Vec<f64> = source.class_counts()?.iter().map(|&c| c as f64 / source.len() as f64).collect();
    let p_t_min = eval.class_counts()?.iter().map(|&c| c as f64 / eval.len() as f64).fold(f64::INFINITY, f64::min);
    let kappa = f.kappa();

    let probe = fit_linear_probe(f, target, aug, &mut rng, true)?;
    let cert = theta_certificate(
        &CertificateInputs {
            sigma_t: quality_t.sigma,
            delta_t: quality_t.delta,
            epsilon: opts.epsilon,
            r_t,
            p_t_min,
            kappa,
            b1: f.b1,
            b2: f.b2,
        },
        &probe,
        &centers_t,
    )?;

    let l_align = exact_alignment(f, &source.points, aug)?;
    let gap = exact_cross_correlation(f, &source.points, aug)?.sub(&Matrix::identity(f.output_dim()))?;
    let l_div = opts.lambda * gap.frobenius_inner(&gap)?;
    let phi_params = PhiParams { sigma_s: quality_s.sigma, delta_s: quality_s.delta, kappa, b2: f.b2, priors: priors_s };
    let rows = verify_alignment_bound(f, &source.points, aug, &opts.epsilon_grid, &phi_params)?;
    let main = verify_alignment_bound(f, &source.points, aug, &[opts.epsilon], &phi_params)?[0];

    let src_classes = by_class(source)?;
    let mut tgt_classes = by_class(target)?;
    for (c, pts) in by_class(eval)?.into_iter().enumerate() {
        tgt_classes[c].extend(pts);
    }
    let (mut w, mut sizes, mut baseline) = (Vec::new(), Vec::new(), Vec::new());
    for (s, t) in src_classes.iter().zip(&tgt_classes) {
        let s: Vec<Vec<f64>> = s.iter().map(|x| (*x).clone()).collect();
        let t: Vec<Vec<f64>> = t.iter().map(|x| (*x).clone()).collect();
        let n = t.len().min(s.len() / 2).min(WASSERSTEIN_MAX_POINTS);
        if n == 0 {
            w.push(f64::NAN);
            baseline.push(f64::NAN);
            sizes.push(0);
            continue;
        }
        let halves = subsample(&s, 2 * n, &mut rng);
        let (a, b) = halves.split_at(n);
        w.push(wasserstein1(a, &subsample(&t, n, &mut rng))?);
        baseline.push(wasserstein1(a, b)?);
        sizes.push(n);
    }
    let threshold = 1.2 * baseline.iter().copied().filter(|x| x.is_finite()).fold(0.0, f64::max);

    let target_labels: Vec<usize> = target.require_labels()?.iter().chain(eval_labels).copied().collect();
    let report = DiagnosticsReport {
        epsilon: opts.epsilon,
        n_source: source.len(),
        n_target_labeled: target.len(),
        n_target_eval: eval.len(),
        r_s,
        r_t,
        max_center_alignment: max_center_alignment(&centers_t)?,
        centers_s,
        centers_t,
        sigma_s: quality_s.sigma,
        delta_s: quality_s.delta,
        sigma_t: quality_t.sigma,
        delta_t: quality_t.delta,
        kappa,
        p_t_min,
        theta: cert.theta,
        gamma_min: cert.gamma_min,
        delta_mu_hat: cert.delta_mu_hat,
        theta_clamped: cert.clamped,
        theta_vacuous: cert.vacuous,
        l_align,
        l_div,
        phi: main.phi,
        alignment_bound_ok: main.holds(),
        wasserstein_per_class: w,
        wasserstein_sample_sizes: sizes,
        wasserstein_baseline: baseline,
        wasserstein_noise_threshold: threshold,
        prior_gap_eta: prior_gap(src_labels, &target_labels, k)?,
    };
    Ok((report, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmentation::Transform;
    use itertools::Itertools;

    fn constant_encoder(d: usize, d_star: usize) -> EncoderParams {
        let mut f = EncoderParams::init(d, d_star, d.max(d_star), 1, 0).unwrap();
        f.hidden[0].weight = Matrix::zeros(f.width(), d);
        f.hidden[0].bias = vec![1.0; f.width()];
        let mut out = Matrix::zeros(d_star, f.width());
        out.set(0, 0, 1.0);
        f.output = out;
        f
    }

    fn three_views() -> AugmentationSet {
        AugmentationSet::new(vec![
            Transform::smooth(0.0).unwrap(),
            Transform::mask(vec![1]),
            Transform::noise(vec![0.3, -0.2, 0.1]).unwrap(),
        ])
        .unwrap()
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn single_view_never_spreads() {
        let f = EncoderParams::init(3, 2, 8, 2, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts = random_points(&mut rng, 10, 3);
        assert_eq!(estimate_r(&f, &pts, &AugmentationSet::identity(), 1e-6).unwrap(), 0.0);
        assert_eq!(estimate_r(&f, &pts, &three_views(), 2.0 * f.b2 + 1e-9).unwrap(), 0.0);
        assert!(estimate_r(&f, &[], &three_views(), 1.0).is_err());
        assert!(estimate_r(&f, &pts, &three_views(), 0.0).is_err());
    }

    #[test]
    fn estimate_r_matches_double_loop() {
        let f = EncoderParams::init(3, 2, 8, 2, 1).unwrap();
        let aug = three_views();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_points(&mut rng, 8, 3);
        let spreads: Vec<f64> = pts
            .iter()
            .map(|x| {
                let mut s = 0.0f64;
                for g in 0..3 {
                    for b in 0..3 {
                        let a = f.forward(&aug.apply(g, x).unwrap(), true);
                        let c = f.forward(&aug.apply(b, x).unwrap(), true);
                        s = s.max(a.iter().zip(&c).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt());
                    }
                }
                s
            })
            .collect();
        let mut sorted = spreads.clone();
        sorted.sort_by(f64::total_cmp);
        let eps = (sorted[3] + sorted[4]) / 2.0;
        let expected = spreads.iter().filter(|&&s| s > eps).count() as f64 / 8.0;
        assert_eq!(estimate_r(&f, &pts, &aug, eps).unwrap(), expected);
        assert_eq!(expected, 0.5);
    }

    #[test]
    fn centers_of_constant_and_identity_cases() {
        let f = constant_encoder(3, 2);
        let pts = vec![vec![0.0, 1.0, 2.0], vec![3.0, 1.0, 0.0], vec![1.0, 1.0, 1.0]];
        let c = class_centers(&f, &pts, &[0, 1, 1], 2, &three_views()).unwrap();
        assert_eq!(c, Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap());
        assert!(matches!(class_centers(&f, &pts, &[0, 0, 0], 2, &three_views()), Err(ActError::EmptyClass(1))));

        let g = EncoderParams::init(3, 2, 8, 2, 3).unwrap();
        let c = class_centers(&g, &pts[..2], &[1, 0], 2, &AugmentationSet::identity()).unwrap();
        assert_eq!(c.row(0), g.forward(&pts[1], true).as_slice());
        assert_eq!(c.row(1), g.forward(&pts[0], true).as_slice());
    }

    #[test]
    fn centers_match_loop_oracle() {
        let f = EncoderParams::init(3, 2, 8, 2, 4).unwrap();
        let aug = AugmentationSet::new(vec![Transform::mask(vec![0]), Transform::smooth(0.5).unwrap()]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts = random_points(&mut rng, 6, 3);
        let labels = [0, 1, 0, 1, 1, 0];
        let c = class_centers(&f, &pts, &labels, 2, &aug).unwrap();
        for k in 0..2 {
            let mut acc = [0.0; 2];
            for (x, _) in pts.iter().zip(&labels).filter(|(_, &y)| y == k) {
                for g in 0..2 {
                    let r = f.forward(&aug.apply(g, x).unwrap(), true);
                    acc[0] += r[0] / 6.0;
                    acc[1] += r[1] / 6.0;
                }
            }
            assert!((c.get(k, 0) - acc[0]).abs() < 1e-12 && (c.get(k, 1) - acc[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn center_alignment_cases() {
        assert_eq!(max_center_alignment(&Matrix::identity(3)).unwrap(), 0.0);
        let anti = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(max_center_alignment(&anti).unwrap(), 1.0);
        assert!(max_center_alignment(&Matrix::identity(1)).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = random_points(&mut rng, 4, 3)
            .into_iter()
            .map(|r| {
                let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                r.into_iter().map(|x| x / n).collect()
            })
            .collect();
        let brute = (0..4)
            .tuple_combinations()
            .map(|(i, j)| rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum::<f64>().abs())
            .fold(0.0, f64::max);
        let got = max_center_alignment(&Matrix::from_rows(&rows).unwrap()).unwrap();
        assert!((got - brute).abs() < 1e-15);
    }

    fn unit_probe() -> (ProbeModel, Matrix) {
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        (ProbeModel { weights: w.clone(), class_counts: vec![1, 1] }, w)
    }

    #[test]
    fn certificate_without_slack_is_one() {
        let (probe, centers) = unit_probe();
        let inputs = CertificateInputs { sigma_t: 1.0, delta_t: 0.0, epsilon: 0.0, r_t: 0.0, p_t_min: 0.5, kappa: 3.0, b1: 1.0, b2: 1.0 };
        let c = theta_certificate(&inputs, &probe, &centers).unwrap();
        assert_eq!((c.theta, c.gamma_min, c.delta_mu_hat, c.clamped, c.vacuous), (1.0, 1.0, 0.0, false, false));

        let worst = CertificateInputs { r_t: 0.5, ..inputs };
        let c = theta_certificate(&worst, &probe, &centers).unwrap();
        assert_eq!(c.gamma_min, -1.0);
        assert!(c.vacuous);
        assert!(theta_certificate(&CertificateInputs { p_t_min: 0.0, ..inputs }, &probe, &centers).is_err());
    }

    #[test]
    fn two_negative_factors_are_flagged_vacuous() {
        let (probe, centers) = unit_probe();
        let inputs = CertificateInputs { sigma_t: 1.0, delta_t: 0.5, epsilon: 0.1, r_t: 0.9, p_t_min: 0.3, kappa: 12.0, b1: 1.0, b2: 1.0 };
        let c = theta_certificate(&inputs, &probe, &centers).unwrap();
        assert!(c.gamma_min > 1.0 && c.vacuous);
    }

    #[test]
    fn certificate_clamps_the_square_root() {
        let (probe, centers) = unit_probe();
        let inputs = CertificateInputs { sigma_t: 1.0, delta_t: 0.0, epsilon: 0.0, r_t: 0.0, p_t_min: 0.5, kappa: 1.0, b1: 2.0, b2: 1.0 };
        let c = theta_certificate(&inputs, &probe, &centers).unwrap();
        assert!(c.clamped);
        assert_eq!(c.gamma_min, 4.0);
        assert!(c.theta.is_finite());
    }

    #[test]
    fn phi_vanishes_in_the_ideal_case() {
        let p = PhiParams { sigma_s: 1.0, delta_s: 0.0, kappa: 5.0, b2: 1.0, priors: vec![0.5, 0.5] };
        assert_eq!(phi(&p, 0.0, 0.0), 0.0);
        // R_s = 0: 4B2²(ε/B2)² + B2·ε
        assert!((phi(&p, 0.1, 0.0) - (4.0 * 0.01 + 0.1)).abs() < 1e-15);
    }

    #[test]
    fn alignment_bound_holds_for_random_and_collapsed_encoders() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pts = random_points(&mut rng, 30, 3);
        let p = PhiParams { sigma_s: 1.0, delta_s: 0.1, kappa: 2.0, b2: 1.0, priors: vec![1.0] };
        let grid = geometric_grid(1e-3, 2.0, 10);
        for f in [EncoderParams::init(3, 2, 8, 2, 6).unwrap(), constant_encoder(3, 2)] {
            let rows = verify_alignment_bound(&f, &pts, &three_views(), &grid, &p).unwrap();
            assert_eq!(rows.len(), 10);
            assert!(rows.iter().all(AlignmentBoundRow::holds));
        }
        let rows = verify_alignment_bound(&constant_encoder(3, 2), &pts, &three_views(), &grid, &p).unwrap();
        assert!(rows.iter().all(|r| r.r_s == 0.0 && r.rhs == 0.0));
    }

    #[test]
    fn geometric_grid_endpoints() {
        let g = geometric_grid(0.01, 1.0, 3);
        assert!((g[1] - 0.1).abs() < 1e-15 && (g[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn wasserstein_trivial_cases() {
        let a = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 3.0]];
        let mut b = a.clone();
        b.reverse();
        assert_eq!(wasserstein1(&a, &b).unwrap(), 0.0);
        assert_eq!(wasserstein1(&[vec![0.0, 0.0]], &[vec![3.0, 4.0]]).unwrap(), 5.0);
        assert!(wasserstein1(&a, &b[..2]).is_err());
        let big = vec![vec![0.0]; WASSERSTEIN_MAX_POINTS + 1];
        assert!(wasserstein1(&big, &big).is_err());
    }

    #[test]
    fn wasserstein_matches_permutation_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let a = random_points(&mut rng, 5, 2);
            let b = random_points(&mut rng, 5, 2);
            let brute = (0..5)
                .permutations(5)
                .map(|p| p.iter().enumerate().map(|(i, &j)| distance(&a[i], &b[j])).sum::<f64>() / 5.0)
                .fold(f64::INFINITY, f64::min);
            assert!((wasserstein1(&a, &b).unwrap() - brute).abs() < 1e-9);
        }
    }

    #[test]
    fn prior_gap_cases() {
        assert_eq!(prior_gap(&[0, 1, 1], &[1, 0, 1], 2).unwrap(), 0.0);
        assert_eq!(prior_gap(&[0, 0], &[1, 1, 1], 2).unwrap(), 1.0);
        assert!(prior_gap(&[0, 2], &[0], 2).is_err());
    }

    #[test]
    fn report_text_round_trips_keys() {
        let (probe, centers) = unit_probe();
        let report = DiagnosticsReport {
            epsilon: 0.1,
            n_source: 10,
            n_target_labeled: 4,
            n_target_eval: 6,
            r_s: 0.0,
            r_t: 0.5,
            centers_s: centers.clone(),
            centers_t: probe.weights,
            max_center_alignment: 0.0,
            sigma_s: 1.0,
            delta_s: 0.2,
            sigma_t: 1.0,
            delta_t: 0.3,
            kappa: 2.0,
            p_t_min: 0.5,
            theta: -1.5,
            gamma_min: 0.2,
            delta_mu_hat: 0.0,
            theta_clamped: false,
            theta_vacuous: false,
            l_align: 0.01,
            l_div: 2.0,
            phi: 3.0,
            alignment_bound_ok: true,
            wasserstein_per_class: vec![0.1, 0.2],
            wasserstein_sample_sizes: vec![3, 3],
            wasserstein_baseline: vec![0.1, 0.1],
            wasserstein_noise_threshold: 0.12,
            prior_gap_eta: 0.05,
        };
        let kv = parse_report(&report.to_text());
        assert_eq!(kv[0], ("epsilon".to_string(), "0.1".to_string()));
        let get = |k: &str| kv.iter().find(|(key, _)| key == k).unwrap().1.clone();
        assert_eq!(get("centers_s"), "1.0,0.0;0.0,1.0");
        assert_eq!(get("alignment_bound_ok"), "true");
        assert_eq!(get("wasserstein_sample_sizes"), "3,3");
    }
}
