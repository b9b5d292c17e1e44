//! Flat `key = value` experiment configuration.
//!
//! One assignment per line; `#` starts a comment; blank lines are ignored.
//! Every key except `seed` has a default. Unknown and repeated keys are
//! rejected with the offending line number.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::act::{InnerUpdate, Optimizer, TrainConfig};
use crate::augmentation::{AugmentationSet, TransformSpec};
use crate::diagnostics::{geometric_grid, DiagnoseOptions};
use crate::encoder::EncoderParams;
use crate::error::{ActError, Result};
use crate::synthgen::SyntheticConfig;

/// Every accepted key, in the order [`ExperimentConfig::to_text`] writes them.
pub const KEYS: &[&str] = &[
    "seed",
    "d",
    "num_classes",
    "n_source",
    "n_target",
    "n_test",
    "class_radius",
    "center_separation",
    "shift_rho",
    "shift_eta",
    "d_star",
    "width",
    "depth",
    "b1",
    "b2",
    "kappa_budget",
    "constrain_kappa",
    "lambda",
    "learning_rate",
    "epochs",
    "batch_size",
    "standardize",
    "inner_update",
    "weight_decay",
    "optimizer",
    "augmentations",
    "knn_k",
    "epsilon",
    "epsilon_min",
    "epsilon_max",
    "epsilon_points",
    "trim_quantile",
    "out_dir",
];

const EVAL_STREAM: u64 = 5;

pub const DEFAULT_AUGMENTATIONS: &str = "noise:0.05:1, mask:0.1:2, smooth:0.2:3";

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub d_star: usize,
    pub width: usize,
    pub depth: usize,
    pub b1: f64,
    pub b2: f64,
    pub kappa_budget: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { d_star: 8, width: 64, depth: 2, b1: 1.0, b2: 1.0, kappa_budget: f64::INFINITY }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsConfig {
    pub epsilon: f64,
    pub epsilon_min: f64,
    pub epsilon_max: f64,
    pub epsilon_points: usize,
    pub trim_quantile: f64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self { epsilon: 0.1, epsilon_min: 0.01, epsilon_max: 2.0, epsilon_points: 10, trim_quantile: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub synthetic: SyntheticConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub augmentations: Vec<TransformSpec>,
    pub knn_k: usize,
    pub diagnostics: DiagnosticsConfig,
    pub out_dir: PathBuf,
    /// Line of each key that was set explicitly, for error messages.
    lines: HashMap<String, usize>,
}

fn config_err(line: usize, msg: impl Into<String>) -> ActError {
    ActError::Config { line, msg: msg.into() }
}

fn parse_value<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| config_err(line, format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(config_err(line, format!("`{key}` must be true or false, got `{value}`"))),
    }
}

fn parse_specs(value: &str, line: usize) -> Result<Vec<TransformSpec>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e: ActError| config_err(line, format!("`augmentations`: {e}"))))
        .collect()
}

impl ExperimentConfig {
    /// Defaults for everything but the seed.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            synthetic: SyntheticConfig { seed, ..SyntheticConfig::default() },
            encoder: EncoderConfig::default(),
            train: TrainConfig { seed, ..TrainConfig::default() },
            augmentations: parse_specs(DEFAULT_AUGMENTATIONS, 0).expect("default augmentations parse"),
            knn_k: 5,
            diagnostics: DiagnosticsConfig::default(),
            out_dir: PathBuf::from("out"),
            lines: HashMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(0, format!("cannot read {}: {e}", path.display())))?;
        text.parse()
    }

    fn line_of(&self, key: &str) -> usize {
        self.lines.get(key).copied().unwrap_or(0)
    }

    /// Of several keys jointly responsible for an error, the one set last.
    fn latest<'a>(&self, keys: &[&'a str]) -> &'a str {
        keys.iter().copied().max_by_key(|k| self.line_of(k)).unwrap_or(keys[0])
    }

    fn set(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let f = |v: &str| parse_value::<f64>(key, v, line);
        let u = |v: &str| parse_value::<usize>(key, v, line);
        match key {
            "seed" => {
                let seed = parse_value(key, value, line)?;
                self.seed = seed;
                self.synthetic.seed = seed;
                self.train.seed = seed;
            }
            "d" => self.synthetic.d = u(value)?,
            "num_classes" => self.synthetic.k = u(value)?,
            "n_source" => self.synthetic.n_s = u(value)?,
            "n_target" => self.synthetic.n_t = u(value)?,
            "n_test" => self.synthetic.n_test = u(value)?,
            "class_radius" => self.synthetic.class_radius = f(value)?,
            "center_separation" => self.synthetic.center_separation = f(value)?,
            "shift_rho" => self.synthetic.shift_rho = f(value)?,
            "shift_eta" => self.synthetic.shift_eta = f(value)?,
            "d_star" => self.encoder.d_star = u(value)?,
            "width" => self.encoder.width = u(value)?,
            "depth" => self.encoder.depth = u(value)?,
            "b1" => self.encoder.b1 = f(value)?,
            "b2" => self.encoder.b2 = f(value)?,
            "kappa_budget" => self.encoder.kappa_budget = f(value)?,
            "constrain_kappa" => self.train.constrain_kappa = parse_bool(key, value, line)?,
            "lambda" => self.train.lambda = f(value)?,
            "learning_rate" => self.train.learning_rate = f(value)?,
            "epochs" => self.train.epochs = u(value)?,
            "batch_size" => self.train.batch_size = u(value)?,
            "standardize" => self.train.standardize = parse_bool(key, value, line)?,
            "inner_update" => {
                self.train.inner_update = match value {
                    "per_batch" => InnerUpdate::PerBatch,
                    "full_data" => InnerUpdate::FullData,
                    _ => return Err(config_err(line, format!("`inner_update` must be per_batch or full_data, got `{value}`"))),
                }
            }
            "weight_decay" => self.train.weight_decay = f(value)?,
            "optimizer" => {
                self.train.optimizer = match value {
                    "sgd" => Optimizer::Sgd,
                    "adam" => Optimizer::adam(),
                    _ => return Err(config_err(line, format!("`optimizer` must be sgd or adam, got `{value}`"))),
                }
            }
            "augmentations" => self.augmentations = parse_specs(value, line)?,
            "knn_k" => self.knn_k = u(value)?,
            "epsilon" => self.diagnostics.epsilon = f(value)?,
            "epsilon_min" => self.diagnostics.epsilon_min = f(value)?,
            "epsilon_max" => self.diagnostics.epsilon_max = f(value)?,
            "epsilon_points" => self.diagnostics.epsilon_points = u(value)?,
            "trim_quantile" => self.diagnostics.trim_quantile = f(value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(config_err(line, format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Cross-field checks. Errors point at the line of the key involved, or
    /// line 0 when that key took its default.
    pub fn validate(&self) -> Result<()> {
        let at = |key: &str, e: ActError| {
            let msg = match e {
                ActError::InvalidArgument(m) => m,
                other => other.to_string(),
            };
            config_err(self.line_of(key), format!("`{key}`: {msg}"))
        };
        let s = &self.synthetic;
        let synth_key = if s.k < 2 || s.k > s.d {
            self.latest(&["num_classes", "d"])
        } else if s.center_separation <= 2.0 * s.class_radius || !s.class_radius.is_finite() {
            self.latest(&["center_separation", "class_radius"])
        } else if !(s.shift_rho >= 0.0 && s.shift_rho.is_finite()) {
            "shift_rho"
        } else {
            "shift_eta"
        };
        s.validate().map_err(|e| at(synth_key, e))?;
        for (key, n) in [("n_source", s.n_s), ("n_target", s.n_t), ("n_test", s.n_test)] {
            if n == 0 {
                return Err(at(key, ActError::InvalidArgument("must be positive".into())));
            }
        }

        let e = &self.encoder;
        let encoder_key = if e.d_star == 0 { "d_star" } else if e.depth == 0 { "depth" } else { "width" };
        self.init_encoder().map_err(|err| {
            let key = if err.to_string().contains("norm bounds") {
                self.latest(&["b1", "b2"])
            } else if err.to_string().contains("kappa budget") {
                "kappa_budget"
            } else {
                encoder_key
            };
            at(key, err)
        })?;

        let t = &self.train;
        let train_key = if !(t.lambda >= 0.0 && t.lambda.is_finite()) {
            "lambda"
        } else if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            "learning_rate"
        } else if !(t.weight_decay >= 0.0 && t.weight_decay.is_finite()) {
            "weight_decay"
        } else {
            "batch_size"
        };
        t.validate().map_err(|err| at(train_key, err))?;
        if t.epochs > 0 && t.batch_size > s.n_s {
            return Err(at(
                "batch_size",
                ActError::InvalidArgument(format!("batch size {} exceeds n_source = {}", t.batch_size, s.n_s)),
            ));
        }

        if self.augmentations.is_empty() {
            return Err(at("augmentations", ActError::InvalidArgument("at least one transform is required".into())));
        }
        self.augmentation_set().map_err(|err| at("augmentations", err))?;

        if self.knn_k == 0 {
            return Err(at("knn_k", ActError::InvalidArgument("must be at least 1".into())));
        }
        let d = &self.diagnostics;
        if !(d.epsilon > 0.0 && d.epsilon.is_finite()) {
            return Err(at("epsilon", ActError::InvalidArgument(format!("{} must be positive", d.epsilon))));
        }
        if !(d.epsilon_min > 0.0 && d.epsilon_min <= d.epsilon_max && d.epsilon_max.is_finite()) {
            return Err(at(
                "epsilon_min",
                ActError::InvalidArgument(format!("need 0 < epsilon_min <= epsilon_max, got {} and {}", d.epsilon_min, d.epsilon_max)),
            ));
        }
        if d.epsilon_points == 0 {
            return Err(at("epsilon_points", ActError::InvalidArgument("must be at least 1".into())));
        }
        if !(0.0..0.5).contains(&d.trim_quantile) {
            return Err(at("trim_quantile", ActError::InvalidArgument(format!("{} must lie in [0, 0.5)", d.trim_quantile))));
        }
        Ok(())
    }

    pub fn augmentation_set(&self) -> Result<AugmentationSet> {
        AugmentationSet::from_specs(&self.augmentations, self.synthetic.d)
    }

    /// Freshly initialised encoder for this experiment.
    pub fn init_encoder(&self) -> Result<EncoderParams> {
        let e = &self.encoder;
        EncoderParams::init(self.synthetic.d, e.d_star, e.width, e.depth, self.seed)?
            .with_norm_bounds(e.b1, e.b2)?
            .with_kappa_budget(e.kappa_budget)
    }

    /// Random stream for probe fitting during evaluation.
    pub fn evaluation_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(EVAL_STREAM);
        rng
    }

    pub fn diagnose_options(&self) -> DiagnoseOptions {
        let d = &self.diagnostics;
        DiagnoseOptions {
            epsilon: d.epsilon,
            epsilon_grid: geometric_grid(d.epsilon_min, d.epsilon_max, d.epsilon_points),
            lambda: self.train.lambda,
            trim_quantile: d.trim_quantile,
            seed: self.seed,
        }
    }

    /// Canonical text form listing every key. Parsing it gives back `self`
    /// up to line bookkeeping.
    pub fn to_text(&self) -> String {
        let s = &self.synthetic;
        let e = &self.encoder;
        let t = &self.train;
        let d = &self.diagnostics;
        let specs: Vec<String> = self.augmentations.iter().map(ToString::to_string).collect();
        let values: Vec<String> = vec![
            self.seed.to_string(),
            s.d.to_string(),
            s.k.to_string(),
            s.n_s.to_string(),
            s.n_t.to_string(),
            s.n_test.to_string(),
            format!("{:?}", s.class_radius),
            format!("{:?}", s.center_separation),
            format!("{:?}", s.shift_rho),
            format!("{:?}", s.shift_eta),
            e.d_star.to_string(),
            e.width.to_string(),
            e.depth.to_string(),
            format!("{:?}", e.b1),
            format!("{:?}", e.b2),
            format!("{:?}", e.kappa_budget),
            t.constrain_kappa.to_string(),
            format!("{:?}", t.lambda),
            format!("{:?}", t.learning_rate),
            t.epochs.to_string(),
            t.batch_size.to_string(),
            t.standardize.to_string(),
            match t.inner_update {
                InnerUpdate::PerBatch => "per_batch",
                InnerUpdate::FullData => "full_data",
            }
            .to_string(),
            format!("{:?}", t.weight_decay),
            match t.optimizer {
                Optimizer::Sgd => "sgd",
                Optimizer::Adam { .. } => "adam",
            }
            .to_string(),
            specs.join(", "),
            self.knn_k.to_string(),
            format!("{:?}", d.epsilon),
            format!("{:?}", d.epsilon_min),
            format!("{:?}", d.epsilon_max),
            d.epsilon_points.to_string(),
            format!("{:?}", d.trim_quantile),
            self.out_dir.display().to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

impl FromStr for ExperimentConfig {
    type Err = ActError;

    /// Parses and validates.
    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = Self::with_seed(0);
        let mut seen: HashMap<String, usize> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| config_err(line, format!("expected `key = value`, got `{content}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(config_err(line, "empty key"));
            }
            if !KEYS.contains(&key) {
                return Err(config_err(line, format!("unknown key `{key}`")));
            }
            if let Some(first) = seen.insert(key.to_string(), line) {
                return Err(config_err(line, format!("`{key}` already set on line {first}")));
            }
            cfg.set(key, value, line)?;
        }
        if !seen.contains_key("seed") {
            return Err(config_err(0, "missing required key `seed`"));
        }
        cfg.lines = seen;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_of(err: ActError) -> (usize, String) {
        match err {
            ActError::Config { line, msg } => (line, msg),
            other => panic!("expected a config error, got {other}"),
        }
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg: ExperimentConfig = "seed = 3\n".parse().unwrap();
        let expected = ExperimentConfig::with_seed(3);
        assert_eq!(cfg.synthetic, expected.synthetic);
        assert_eq!(cfg.train, expected.train);
        assert_eq!(cfg.train.seed, 3);
        assert_eq!(cfg.synthetic.seed, 3);
        assert_eq!(cfg.knn_k, 5);
        assert_eq!(cfg.augmentations.len(), 3);
    }

    #[test]
    fn canonical_text_round_trips() {
        let text = "seed = 9\nlambda = 0.0\noptimizer = sgd\ninner_update = full_data\nkappa_budget = 40\nout_dir = /tmp/x y\n";
        let cfg: ExperimentConfig = text.parse().unwrap();
        let again: ExperimentConfig = cfg.to_text().parse().unwrap();
        assert_eq!(again.to_text(), cfg.to_text());
        assert_eq!(again.train, cfg.train);
        assert_eq!(again.out_dir, PathBuf::from("/tmp/x y"));
        assert_eq!(again.encoder.kappa_budget, 40.0);
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg: ExperimentConfig = "# experiment\n\nseed = 1  # trailing\n  epochs=3\n".parse().unwrap();
        assert_eq!(cfg.train.epochs, 3);
    }

    #[test]
    fn missing_seed_is_named() {
        let (line, msg) = line_of("epochs = 3\n".parse::<ExperimentConfig>().unwrap_err());
        assert_eq!(line, 0);
        assert!(msg.contains("seed"), "{msg}");
    }

    #[test]
    fn unknown_and_repeated_keys() {
        let (line, msg) = line_of("seed = 1\n\nlamda = 3\n".parse::<ExperimentConfig>().unwrap_err());
        assert_eq!(line, 3);
        assert!(msg.contains("lamda"));
        let (line, _) = line_of("seed = 1\nseed = 2\n".parse::<ExperimentConfig>().unwrap_err());
        assert_eq!(line, 2);
    }

    #[test]
    fn bad_values_point_at_their_line() {
        let cases = [
            ("seed = 1\nepochs = ten\n", 2),
            ("seed = 1\nstandardize = yes\n", 2),
            ("seed = 1\noptimizer = rmsprop\n", 2),
            ("seed = 1\naugmentations = blur:1:1\n", 2),
            ("seed = -1\n", 1),
            ("seed = 1\nno equals sign\n", 2),
            ("seed = 1\n\n\nlearning_rate = 0\n", 4),
            ("seed = 1\nclass_radius = 0.6\n", 2),
            ("seed = 1\ncenter_separation = 0.5\n", 2),
            ("seed = 1\nbatch_size = 5000\n", 2),
            ("seed = 1\nwidth = 4\n", 2),
            ("seed = 1\nknn_k = 0\n", 2),
            ("seed = 1\nb1 = 2\n", 2),
            ("seed = 1\nepsilon_min = 3\n", 2),
        ];
        for (text, expected) in cases {
            let (line, msg) = line_of(text.parse::<ExperimentConfig>().unwrap_err());
            assert_eq!(line, expected, "{text:?}: {msg}");
        }
    }

    #[test]
    fn derived_objects() {
        let cfg: ExperimentConfig = "seed = 4\nd_star = 5\nepsilon_points = 4\n".parse().unwrap();
        let f = cfg.init_encoder().unwrap();
        assert_eq!((f.input_dim(), f.output_dim(), f.depth(), f.width()), (20, 5, 2, 64));
        assert_eq!(f, EncoderParams::init(20, 5, 64, 2, 4).unwrap());
        let opts = cfg.diagnose_options();
        assert_eq!(opts.epsilon_grid.len(), 4);
        assert_eq!(opts.lambda, 5.0);
        assert_eq!(cfg.augmentation_set().unwrap().len(), 3);
    }
}
