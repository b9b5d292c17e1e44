//! Norm-constrained ReLU encoders.
//!
//! An encoder is `x ↦ A_L σ(A_{L-1} σ(⋯ σ(A_0 x + b_0) ⋯) + b_{L-1})` with
//! `L` hidden layers of width `W`, optionally followed by a radial projection
//! of the output into the shell `B1 ≤ ‖f(x)‖₂ ≤ B2` (the unit sphere by
//! default). The product-of-norms quantity [`EncoderParams::kappa`] bounds the
//! Lipschitz constant of the unprojected network with respect to `‖·‖_∞`.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Tape};
use crate::error::{ActError, Result};
use crate::linalg::{fixed_dot, project_into_shell, Matrix};

pub type Representation = Vec<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer {
    /// `N_{l+1} × N_l`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub hidden: Vec<HiddenLayer>,
    /// `d* × W`, no bias.
    pub output: Matrix,
    pub kappa_budget: f64,
    pub b1: f64,
    pub b2: f64,
}

impl EncoderParams {
    /// Uniform `[−1/√fan_in, 1/√fan_in]` initialization from a seeded ChaCha8
    /// stream. Weights and biases of each layer are drawn in row-major order,
    /// layer by layer.
    pub fn init(d: usize, d_star: usize, width: usize, depth: usize, seed: u64) -> Result<Self> {
        if d == 0 || d_star == 0 {
            return Err(ActError::InvalidArgument(format!(
                "input and output dims must be positive (d={d}, d*={d_star})"
            )));
        }
        if depth < 1 {
            return Err(ActError::InvalidArgument("depth must be at least 1".into()));
        }
        if width < d.max(d_star) {
            return Err(ActError::InvalidArgument(format!(
                "width {width} is smaller than max(d={d}, d*={d_star})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |count: usize, fan_in: usize| -> Vec<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..count).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        let mut hidden = Vec::with_capacity(depth);
        let mut fan_in = d;
        for _ in 0..depth {
            let weight = Matrix::new(width, fan_in, uniform(width * fan_in, fan_in))?;
            let bias = uniform(width, fan_in);
            hidden.push(HiddenLayer { weight, bias });
            fan_in = width;
        }
        let output = Matrix::new(d_star, width, uniform(d_star * width, width))?;
        Ok(Self { hidden, output, kappa_budget: f64::INFINITY, b1: 1.0, b2: 1.0 })
    }

    pub fn with_norm_bounds(mut self, b1: f64, b2: f64) -> Result<Self> {
        if !(b1 >= 0.0 && b2 > 0.0 && b1 <= b2 && b2.is_finite()) {
            return Err(ActError::InvalidArgument(format!(
                "norm bounds need 0 <= B1 <= B2, B2 > 0 (got {b1}, {b2})"
            )));
        }
        self.b1 = b1;
        self.b2 = b2;
        Ok(self)
    }

    pub fn with_kappa_budget(mut self, budget: f64) -> Result<Self> {
        if !(budget > 0.0) {
            return Err(ActError::InvalidArgument(format!("kappa budget {budget} must be positive")));
        }
        self.kappa_budget = budget;
        Ok(self)
    }

    pub fn input_dim(&self) -> usize {
        self.hidden[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.output.rows()
    }

    pub fn depth(&self) -> usize {
        self.hidden.len()
    }

    pub fn width(&self) -> usize {
        self.hidden.iter().map(|l| l.weight.rows()).max().unwrap_or(0)
    }

    /// Evaluates one input. With `project` the output is mapped into the
    /// norm shell.
    pub fn forward(&self, x: &[f64], project: bool) -> Representation {
        assert_eq!(x.len(), self.input_dim(), "input has wrong dimension");
        let mut h = x.to_vec();
        for layer in &self.hidden {
            h = (0..layer.weight.rows())
                .map(|j| {
                    let v = fixed_dot(&h, layer.weight.row(j)) + layer.bias[j];
                    if v > 0.0 {
                        v
                    } else {
                        0.0
                    }
                })
                .collect();
        }
        let mut out: Vec<f64> =
            (0..self.output.rows()).map(|j| fixed_dot(&h, self.output.row(j))).collect();
        if project {
            project_into_shell(&mut out, self.b1, self.b2);
        }
        out
    }

    /// Row-wise forward over an `n × d` batch.
    pub fn forward_batch(&self, xs: &Matrix, project: bool) -> Matrix {
        assert_eq!(xs.cols(), self.input_dim(), "input has wrong dimension");
        let mut h = xs.clone();
        for layer in &self.hidden {
            h = h.matmul_transposed(&layer.weight);
            for r in 0..h.rows() {
                for (v, b) in h.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v += b;
                    if *v <= 0.0 {
                        *v = 0.0;
                    }
                }
            }
        }
        let mut out = h.matmul_transposed(&self.output);
        if project {
            for r in 0..out.rows() {
                project_into_shell(out.row_mut(r), self.b1, self.b2);
            }
        }
        out
    }

    pub fn encode_all(&self, xs: &[Vec<f64>], project: bool) -> Vec<Representation> {
        if xs.is_empty() {
            return Vec::new();
        }
        let batch = Matrix::from_rows(xs).expect("encoder inputs must be finite and rectangular");
        let out = self.forward_batch(&batch, project);
        (0..out.rows()).map(|r| out.row(r).to_vec()).collect()
    }

    /// `‖A_L‖_∞ · ∏_l max{‖(A_l, b_l)‖_∞, 1}` with `‖·‖_∞` the max row 1-norm.
    pub fn kappa(&self) -> f64 {
        let mut k = self.output.inf_norm();
        for layer in &self.hidden {
            let augmented = (0..layer.weight.rows())
                .map(|r| {
                    layer.weight.row(r).iter().map(|x| x.abs()).sum::<f64>() + layer.bias[r].abs()
                })
                .fold(0.0, f64::max);
            k *= augmented.max(1.0);
        }
        k
    }

    /// Rescales the output layer so that `kappa() ≤ kappa_budget`. ReLU is
    /// positively homogeneous, so this is a uniform rescaling of the
    /// unprojected output.
    pub fn project_kappa(&self) -> Self {
        let mut out = self.clone();
        let k = self.kappa();
        if k > self.kappa_budget {
            out.output = out.output.scale(self.kappa_budget / k);
            // Rounding can leave κ an ulp above the budget.
            while out.kappa() > self.kappa_budget {
                out.output = out.output.scale(1.0 - f64::EPSILON);
            }
        }
        out
    }

    /// Parameter matrices in tape order: `A_0, b_0, …, A_{L-1}, b_{L-1}, A_L`,
    /// biases as `1 × N` rows.
    pub fn to_leaves(&self) -> Vec<Matrix> {
        let mut out = Vec::with_capacity(2 * self.hidden.len() + 1);
        for layer in &self.hidden {
            out.push(layer.weight.clone());
            out.push(Matrix::from_raw(1, layer.bias.len(), layer.bias.clone()));
        }
        out.push(self.output.clone());
        out
    }

    /// Inverse of [`to_leaves`](Self::to_leaves), keeping this encoder's
    /// bounds and budget.
    pub fn with_leaves(&self, leaves: &[Matrix]) -> Result<Self> {
        if leaves.len() != 2 * self.hidden.len() + 1 {
            return Err(ActError::Shape(format!(
                "{} parameter matrices for a depth-{} encoder",
                leaves.len(),
                self.hidden.len()
            )));
        }
        let mut out = self.clone();
        for (l, layer) in out.hidden.iter_mut().enumerate() {
            let (w, b) = (&leaves[2 * l], &leaves[2 * l + 1]);
            if w.shape() != layer.weight.shape() || b.cols() != layer.bias.len() || b.rows() != 1 {
                return Err(ActError::Shape(format!("layer {l} parameter shape changed")));
            }
            layer.weight = Matrix::new(w.rows(), w.cols(), w.data().to_vec())?;
            layer.bias = b.data().to_vec();
            if layer.bias.iter().any(|x| !x.is_finite()) {
                return Err(ActError::NonFinite(format!("layer {l} bias")));
            }
        }
        let last = leaves.last().expect("non-empty");
        if last.shape() != out.output.shape() {
            return Err(ActError::Shape("output layer shape changed".into()));
        }
        out.output = Matrix::new(last.rows(), last.cols(), last.data().to_vec())?;
        Ok(out)
    }

    /// Declares one parameter leaf per matrix of [`to_leaves`](Self::to_leaves).
    pub fn declare_parameters(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.to_leaves().iter().map(|m| tape.parameter(m.rows(), m.cols())).collect()
    }

    /// Records the forward pass of an `n × d` batch node on `tape`.
    pub fn record_forward(
        &self,
        tape: &mut Tape,
        params: &[NodeId],
        input: NodeId,
        project: bool,
    ) -> Result<NodeId> {
        let mut h = input;
        for l in 0..self.hidden.len() {
            let pre = tape.matmul_bt(h, params[2 * l])?;
            let pre = tape.add_row(pre, params[2 * l + 1])?;
            h = tape.relu(pre)?;
        }
        let mut out = tape.matmul_bt(h, params[2 * self.hidden.len()])?;
        if project {
            out = tape.project_rows(out, self.b1, self.b2)?;
        }
        Ok(out)
    }

    /// Writes the checkpoint format: a text header followed by little-endian
    /// `f64` layer data in the order `A_0, b_0, …, A_L`.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "ACT-ENCODER 1")?;
        writeln!(w, "input_dim {}", self.input_dim())?;
        writeln!(w, "output_dim {}", self.output_dim())?;
        writeln!(w, "depth {}", self.depth())?;
        writeln!(w, "width {}", self.width())?;
        writeln!(w, "kappa_budget {:?}", self.kappa_budget)?;
        writeln!(w, "b1 {:?}", self.b1)?;
        writeln!(w, "b2 {:?}", self.b2)?;
        writeln!(w, "data")?;
        for m in self.to_leaves() {
            for x in m.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = String::new();
        let mut next_line = |r: &mut R| -> Result<String> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(ActError::Format("checkpoint header truncated".into()));
            }
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next_line(&mut r)? != "ACT-ENCODER 1" {
            return Err(ActError::Format("not an encoder checkpoint".into()));
        }
        let mut field = |r: &mut R, key: &str| -> Result<String> {
            let l = next_line(r)?;
            match l.split_once(' ') {
                Some((k, v)) if k == key => Ok(v.to_string()),
                _ => Err(ActError::Format(format!("expected `{key}`, found `{l}`"))),
            }
        };
        let parse_usize = |s: String, key: &str| {
            s.parse::<usize>().map_err(|_| ActError::Format(format!("bad {key}: {s}")))
        };
        let parse_f64 = |s: String, key: &str| {
            s.parse::<f64>().map_err(|_| ActError::Format(format!("bad {key}: {s}")))
        };
        let d = parse_usize(field(&mut r, "input_dim")?, "input_dim")?;
        let d_star = parse_usize(field(&mut r, "output_dim")?, "output_dim")?;
        let depth = parse_usize(field(&mut r, "depth")?, "depth")?;
        let width = parse_usize(field(&mut r, "width")?, "width")?;
        let kappa_budget = parse_f64(field(&mut r, "kappa_budget")?, "kappa_budget")?;
        let b1 = parse_f64(field(&mut r, "b1")?, "b1")?;
        let b2 = parse_f64(field(&mut r, "b2")?, "b2")?;
        let mut marker = String::new();
        r.read_line(&mut marker)?;
        if marker != "data\n" {
            return Err(ActError::Format("missing data marker".into()));
        }
        if depth == 0 || d == 0 || d_star == 0 || width == 0 {
            return Err(ActError::Format("degenerate encoder dimensions".into()));
        }

        let mut read_matrix = |rows: usize, cols: usize| -> Result<Matrix> {
            let mut buf = vec![0u8; rows * cols * 8];
            r.read_exact(&mut buf)
                .map_err(|_| ActError::Format("checkpoint data truncated".into()))?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            Matrix::new(rows, cols, data)
        };
        let mut hidden = Vec::with_capacity(depth);
        let mut fan_in = d;
        for _ in 0..depth {
            let weight = read_matrix(width, fan_in)?;
            let bias = read_matrix(1, width)?.into_data();
            hidden.push(HiddenLayer { weight, bias });
            fan_in = width;
        }
        let output = read_matrix(d_star, width)?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(ActError::Format(format!("{} trailing bytes", rest.len())));
        }
        let params = Self { hidden, output, kappa_budget: f64::INFINITY, b1: 1.0, b2: 1.0 };
        let params = params.with_norm_bounds(b1, b2)?;
        params.with_kappa_budget(kappa_budget).map_err(|e| ActError::Format(e.to_string()))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_checkpoint(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(f))
    }
}
