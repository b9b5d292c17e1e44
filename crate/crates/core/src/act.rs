//! The adversarial contrastive objective and its training loop.
//!
//! For an encoder `f` and `n` augmented pairs the empirical risk is
//!
//! ```text
//! L(f, G) = (1/n) Σᵢ ‖f(x₁ⁱ) − f(x₂ⁱ)‖² + λ ⟨Ĉ − I, G⟩_F,   Ĉ = (1/n) Σᵢ f(x₁ⁱ) f(x₂ⁱ)ᵀ
//! ```
//!
//! and the maximizer over `‖G‖_F ≤ ‖Ĉ − I‖_F` is `Ĝ = Ĉ − I`, which turns the
//! sup into `L_align + λ‖Ĉ − I‖²_F`. With `standardize` the representations of
//! each view are column-standardized across the batch before forming `Ĉ`.
//! Representations are always projected into the encoder's norm shell.

use std::io::Write;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augmentation::{AugmentationSet, PairBatch};
use crate::autodiff::{NodeId, Tape};
use crate::encoder::EncoderParams;
use crate::error::{ActError, Result};
use crate::linalg::{fixed_dot, fixed_sum, Matrix};

/// The inner maximizer `Ĝ = Ĉ − I` and its norm.
#[derive(Debug, Clone, PartialEq)]
pub struct GramGap {
    pub g: Matrix,
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub l_align: f64,
    pub l_div: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.l_align + self.l_div
    }
}

/// Column-wise `(x − mean)/std` with the unbiased standard deviation.
pub fn standardize_columns(x: &Matrix) -> Result<Matrix> {
    if x.rows() < 2 {
        return Err(ActError::InvalidArgument("standardization needs at least 2 rows".into()));
    }
    let n = x.rows() as f64;
    let mut out_t = x.transpose();
    for c in 0..out_t.rows() {
        let col = out_t.row_mut(c);
        let mean = fixed_sum(col) / n;
        col.iter_mut().for_each(|e| *e -= mean);
        let std = (fixed_dot(col, col) / (n - 1.0)).sqrt();
        if !(std > 1e-12) {
            return Err(ActError::ZeroVariance { dimension: c });
        }
        col.iter_mut().for_each(|e| *e /= std);
    }
    Ok(out_t.transpose())
}

/// Projected representations of both views.
pub fn representations(f: &EncoderParams, batch: &PairBatch) -> (Matrix, Matrix) {
    (f.forward_batch(&batch.view1, true), f.forward_batch(&batch.view2, true))
}

fn correlation_of(z1: &Matrix, z2: &Matrix, standardize: bool) -> Result<Matrix> {
    let n = z1.rows() as f64;
    let (a, b) = if standardize {
        (standardize_columns(z1)?, standardize_columns(z2)?)
    } else {
        (z1.clone(), z2.clone())
    };
    Ok(a.transpose().matmul_transposed(&b.transpose()).scale(1.0 / n))
}

fn alignment_of(z1: &Matrix, z2: &Matrix) -> f64 {
    let diff = z1.sub(z2).expect("views share a shape");
    fixed_dot(diff.data(), diff.data()) * (1.0 / z1.rows() as f64)
}

/// `Ĉ`, raw or from standardized representations.
pub fn cross_correlation(f: &EncoderParams, batch: &PairBatch, standardize: bool) -> Result<Matrix> {
    let (z1, z2) = representations(f, batch);
    correlation_of(&z1, &z2, standardize)
}

pub fn inner_solution(f: &EncoderParams, batch: &PairBatch, standardize: bool) -> Result<GramGap> {
    let c = cross_correlation(f, batch, standardize)?;
    let g = c.sub(&Matrix::identity(c.rows()))?;
    let radius = g.frobenius_norm();
    Ok(GramGap { g, radius })
}

/// `L(f, G)` for an arbitrary `G`.
pub fn empirical_loss(
    f: &EncoderParams,
    g: &Matrix,
    batch: &PairBatch,
    lambda: f64,
    standardize: bool,
) -> Result<f64> {
    let (z1, z2) = representations(f, batch);
    let c = correlation_of(&z1, &z2, standardize)?;
    if g.shape() != c.shape() {
        return Err(ActError::Shape(format!(
            "G is {}x{}, expected {}x{}",
            g.rows(),
            g.cols(),
            c.rows(),
            c.cols()
        )));
    }
    let gap = c.sub(&Matrix::identity(c.rows()))?;
    Ok(alignment_of(&z1, &z2) + gap.frobenius_inner(g)? * lambda)
}

/// `(L_align, λ‖Ĉ − I‖²_F)`, whose sum is the supremum of [`empirical_loss`].
pub fn loss_decomposition(
    f: &EncoderParams,
    batch: &PairBatch,
    lambda: f64,
    standardize: bool,
) -> Result<LossParts> {
    let (z1, z2) = representations(f, batch);
    let gap = correlation_of(&z1, &z2, standardize)?.sub(&Matrix::identity(f.output_dim()))?;
    Ok(LossParts {
        l_align: alignment_of(&z1, &z2),
        l_div: gap.frobenius_inner(&gap)? * lambda,
    })
}

/// Value of the objective at one evaluation of [`Objective`].
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveValue {
    pub loss: f64,
    pub l_align: f64,
    /// `λ⟨Ĉ − I, G⟩`.
    pub l_div: f64,
    /// `Ĉ − I` for the batch.
    pub gap: Matrix,
}

/// The objective recorded on a tape for a fixed batch size.
///
/// Leaves are, in order: both views, the encoder parameters, the identity,
/// and (with an external `G`) the matrix `G`. Without an external `G` the
/// tape uses a detached copy of `Ĉ − I`, so the value is the sup-loss and the
/// gradient treats `Ĝ` as constant.
#[derive(Debug, Clone)]
pub struct Objective {
    tape: Tape,
    align: NodeId,
    gap: NodeId,
    div: NodeId,
    param_count: usize,
    external_g: bool,
    d_star: usize,
}

impl Objective {
    pub fn new(
        f: &EncoderParams,
        batch_size: usize,
        lambda: f64,
        standardize: bool,
        external_g: bool,
    ) -> Result<Self> {
        let (d, d_star) = (f.input_dim(), f.output_dim());
        let inv_n = 1.0 / batch_size as f64;
        let mut tape = Tape::new();
        let x1 = tape.constant(batch_size, d);
        let x2 = tape.constant(batch_size, d);
        let params = f.declare_parameters(&mut tape);
        let eye = tape.constant(d_star, d_star);
        let g_leaf = external_g.then(|| tape.constant(d_star, d_star));

        let z1 = f.record_forward(&mut tape, &params, x1, true)?;
        let z2 = f.record_forward(&mut tape, &params, x2, true)?;
        let diff = tape.sub(z1, z2)?;
        let sq = tape.sum_squares(diff)?;
        let align = tape.scale(sq, inv_n)?;

        let (s1, s2) = if standardize {
            (tape.standardize_cols(z1)?, tape.standardize_cols(z2)?)
        } else {
            (z1, z2)
        };
        let s1t = tape.transpose(s1)?;
        let prod = tape.matmul(s1t, s2)?;
        let c = tape.scale(prod, inv_n)?;
        let gap = tape.sub(c, eye)?;
        let g = match g_leaf {
            Some(g) => g,
            None => tape.detach(gap)?,
        };
        let inner = tape.frobenius_inner(gap, g)?;
        let div = tape.scale(inner, lambda)?;
        let loss = tape.add(align, div)?;
        tape.set_output(loss)?;
        Ok(Self { tape, align, gap, div, param_count: params.len(), external_g, d_star })
    }

    /// Leaf slots holding the encoder parameters.
    pub fn param_slots(&self) -> Range<usize> {
        2..2 + self.param_count
    }

    pub fn tape_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }

    /// Leaf values for one evaluation.
    pub fn inputs(&self, f: &EncoderParams, batch: &PairBatch, g: Option<&Matrix>) -> Result<Vec<Matrix>> {
        let mut inputs = Vec::with_capacity(self.param_count + 4);
        inputs.push(batch.view1.clone());
        inputs.push(batch.view2.clone());
        inputs.extend(f.to_leaves());
        inputs.push(Matrix::identity(self.d_star));
        match (self.external_g, g) {
            (true, Some(g)) => inputs.push(g.clone()),
            (false, None) => {}
            (true, None) => {
                return Err(ActError::InvalidArgument("objective expects an external G".into()))
            }
            (false, Some(_)) => {
                return Err(ActError::InvalidArgument("objective computes its own G".into()))
            }
        }
        Ok(inputs)
    }

    pub fn evaluate(&mut self, f: &EncoderParams, batch: &PairBatch, g: Option<&Matrix>) -> Result<ObjectiveValue> {
        let inputs = self.inputs(f, batch, g)?;
        let loss = self.tape.evaluate(&inputs)?;
        let read = |id| self.tape.value(id).expect("evaluated").clone();
        Ok(ObjectiveValue {
            loss,
            l_align: read(self.align).get(0, 0),
            l_div: read(self.div).get(0, 0),
            gap: read(self.gap),
        })
    }

    /// Value and parameter gradients, in [`EncoderParams::to_leaves`] order.
    pub fn gradient(
        &mut self,
        f: &EncoderParams,
        batch: &PairBatch,
        g: Option<&Matrix>,
    ) -> Result<(ObjectiveValue, Vec<Matrix>)> {
        let value = self.evaluate(f, batch, g)?;
        let mut grads = self.tape.backward()?;
        grads.truncate(2 + self.param_count);
        grads.drain(..2);
        Ok((value, grads))
    }
}

/// When `Ĝ` is recomputed during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InnerUpdate {
    /// From each minibatch, detached.
    PerBatch,
    /// Once per epoch from a fixed set of augmented pairs over all samples.
    FullData,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub standardize: bool,
    pub inner_update: InnerUpdate,
    pub weight_decay: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Rescale the output layer after every step so that `κ ≤ kappa_budget`.
    pub constrain_kappa: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 5.0,
            learning_rate: 2.5e-4,
            epochs: 200,
            batch_size: 128,
            standardize: true,
            inner_update: InnerUpdate::PerBatch,
            weight_decay: 1e-6,
            seed: 0,
            optimizer: Optimizer::adam(),
            constrain_kappa: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ActError::InvalidArgument(msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda {} must be finite and >= 0", self.lambda));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay {} must be >= 0", self.weight_decay));
        }
        if self.batch_size == 0 || (self.standardize && self.batch_size < 2) {
            return bad(format!("batch size {} too small", self.batch_size));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean over the epoch's minibatches of `l_align + l_div`.
    pub loss: f64,
    pub l_align: f64,
    pub l_div: f64,
    /// Mean `‖Ĉ − I‖_F` over minibatches.
    pub gap_fro: f64,
    /// `κ(θ)` after the epoch.
    pub kappa: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
}

impl TrainTrace {
    pub const CSV_HEADER: &'static str = "epoch,loss,l_align,l_div,gap_fro,kappa";

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::CSV_HEADER)?;
        for r in &self.records {
            writeln!(w, "{},{:?},{:?},{:?},{:?},{:?}", r.epoch, r.loss, r.l_align, r.l_div, r.gap_fro, r.kappa)?;
        }
        Ok(())
    }
}

struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

fn apply_step(
    leaves: &mut [Matrix],
    grads: &[Matrix],
    cfg: &TrainConfig,
    adam: &mut Option<AdamState>,
) {
    for (i, (p, g)) in leaves.iter_mut().zip(grads).enumerate() {
        let lr = cfg.learning_rate;
        let wd = cfg.weight_decay;
        match (cfg.optimizer, adam.as_mut()) {
            (Optimizer::Adam { beta1, beta2, eps }, Some(st)) => {
                let (bc1, bc2) = (1.0 - beta1.powi(st.t), 1.0 - beta2.powi(st.t));
                let (m, v) = (st.m[i].data_mut(), st.v[i].data_mut());
                for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                    let gj = gj + wd * *w;
                    m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                    v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                    *w -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                }
            }
            _ => {
                for (w, &gj) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * (gj + wd * *w);
                }
            }
        }
    }
}

/// [`train_with`] without a per-epoch callback.
pub fn train(
    samples: &[Vec<f64>],
    aug: &AugmentationSet,
    cfg: &TrainConfig,
    init: &EncoderParams,
) -> Result<(EncoderParams, TrainTrace)> {
    train_with(samples, aug, cfg, init, |_, _| Ok(()))
}

/// Alternating training: each step takes `Ĝ` as a constant and descends on
/// the parameters. Minibatches come from a seeded shuffle; a final partial
/// batch is dropped. `on_epoch` sees the parameters after every epoch.
pub fn train_with<F>(
    samples: &[Vec<f64>],
    aug: &AugmentationSet,
    cfg: &TrainConfig,
    init: &EncoderParams,
    mut on_epoch: F,
) -> Result<(EncoderParams, TrainTrace)>
where
    F: FnMut(&EncoderParams, &EpochRecord) -> Result<()>,
{
    cfg.validate()?;
    let mut trace = TrainTrace::default();
    if cfg.epochs == 0 {
        return Ok((init.clone(), trace));
    }
    let n = samples.len();
    if n < cfg.batch_size {
        return Err(ActError::InvalidArgument(format!(
            "{n} samples is fewer than the batch size {}",
            cfg.batch_size
        )));
    }
    if let Some(bad) = samples.iter().position(|x| x.len() != init.input_dim()) {
        return Err(ActError::Shape(format!(
            "sample {bad} has dimension {}, encoder expects {}",
            samples[bad].len(),
            init.input_dim()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let full_data = cfg.inner_update == InnerUpdate::FullData;
    let fixed_pairs = if full_data {
        let all: Vec<usize> = (0..n).collect();
        Some(aug.pair_batch(samples, &all, &mut rng)?)
    } else {
        None
    };
    let mut objective = Objective::new(init, cfg.batch_size, cfg.lambda, cfg.standardize, full_data)?;
    let mut params = init.clone();
    let mut leaves = params.to_leaves();
    let mut adam = matches!(cfg.optimizer, Optimizer::Adam { .. }).then(|| AdamState {
        m: leaves.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect(),
        v: leaves.iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect(),
        t: 0,
    });
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 1..=cfg.epochs {
        let g_epoch = match &fixed_pairs {
            Some(pairs) => Some(inner_solution(&params, pairs, cfg.standardize)?.g),
            None => None,
        };
        order.shuffle(&mut rng);
        let (mut sum_align, mut sum_div, mut sum_gap) = (Vec::new(), Vec::new(), Vec::new());
        for chunk in order.chunks_exact(cfg.batch_size) {
            let batch = match &fixed_pairs {
                Some(pairs) => select_pairs(pairs, chunk)?,
                None => aug.pair_batch(samples, chunk, &mut rng)?,
            };
            let step = objective.gradient(&params, &batch, g_epoch.as_ref());
            let (value, grads) = match step {
                Ok(ok) => ok,
                Err(ActError::NonFinite(_)) => {
                    return Err(diverged(epoch, &sum_align, &sum_div, &sum_gap, &params));
                }
                Err(e) => return Err(e),
            };
            sum_align.push(value.l_align);
            sum_div.push(value.l_div);
            sum_gap.push(value.gap.frobenius_norm());
            if let Some(st) = adam.as_mut() {
                st.t += 1;
            }
            apply_step(&mut leaves, &grads, cfg, &mut adam);
            if leaves.iter().any(|m| !m.is_finite()) {
                return Err(diverged(epoch, &sum_align, &sum_div, &sum_gap, &params));
            }
            params = params.with_leaves(&leaves)?;
            if cfg.constrain_kappa {
                params = params.project_kappa();
                leaves = params.to_leaves();
            }
        }
        let record = epoch_record(epoch, &sum_align, &sum_div, &sum_gap, &params);
        on_epoch(&params, &record)?;
        trace.records.push(record);
    }
    Ok((params, trace))
}

fn select_pairs(pairs: &PairBatch, rows: &[usize]) -> Result<PairBatch> {
    let pick = |m: &Matrix| rows.iter().map(|&r| m.row(r).to_vec()).collect::<Vec<_>>();
    let (a, b) = (pick(&pairs.view1), pick(&pairs.view2));
    PairBatch::new(a.into_iter().zip(b).collect(), rows.iter().map(|&r| pairs.source_indices[r]).collect())
}

fn epoch_record(epoch: usize, align: &[f64], div: &[f64], gap: &[f64], params: &EncoderParams) -> EpochRecord {
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { fixed_sum(v) / v.len() as f64 };
    let (l_align, l_div) = (mean(align), mean(div));
    EpochRecord { epoch, loss: l_align + l_div, l_align, l_div, gap_fro: mean(gap), kappa: params.kappa() }
}

fn diverged(epoch: usize, align: &[f64], div: &[f64], gap: &[f64], params: &EncoderParams) -> ActError {
    let mut record = epoch_record(epoch, align, div, gap, params);
    record.loss = f64::NAN;
    ActError::Diverged { epoch, record }
}
