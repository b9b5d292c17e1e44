use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use act_core::config::ExperimentConfig;
use act_core::diagnostics::parse_report;
use act_core::encoder::EncoderParams;
use tempfile::TempDir;

const SMALL: &str = "\
seed = 3
d = 6
num_classes = 3
n_source = 120
n_target = 12
n_test = 30
d_star = 4
width = 16
epochs = 4
batch_size = 32
learning_rate = 0.001
";

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.conf"), config).unwrap();
        Self { dir }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn act(&self, command: &str, extra: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_act"))
            .arg(command)
            .arg("--config")
            .arg(self.dir.path().join("run.conf"))
            .arg("--out")
            .arg(self.out())
            .args(extra)
            .output()
            .unwrap()
    }

    fn ok(&self, command: &str) {
        let out = self.act(command, &[]);
        assert_eq!(out.status.code(), Some(0), "{command}: {}", String::from_utf8_lossy(&out.stderr));
    }

    fn report(&self) -> Vec<(String, String)> {
        parse_report(&fs::read_to_string(self.out().join("diagnostics.txt")).unwrap())
    }
}

fn code(out: &Output) -> Option<i32> {
    out.status.code()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn field<'a>(report: &'a [(String, String)], key: &str) -> &'a str {
    &report.iter().find(|(k, _)| k == key).unwrap_or_else(|| panic!("no {key} in report")).1
}

fn is_empty_dir(p: &Path) -> bool {
    !p.exists() || fs::read_dir(p).unwrap().next().is_none()
}

#[test]
fn missing_seed_is_a_config_error_that_writes_nothing() {
    let ws = Workspace::new(&SMALL.replace("seed = 3\n", ""));
    for command in ["generate", "pretrain", "evaluate", "diagnose"] {
        let out = ws.act(command, &[]);
        assert_eq!(code(&out), Some(2), "{command}");
        assert!(stderr(&out).contains("seed"), "{}", stderr(&out));
    }
    assert!(is_empty_dir(&ws.out()));
}

#[test]
fn bad_values_report_their_line() {
    let ws = Workspace::new(&format!("{SMALL}knn_k = -3\n"));
    let out = ws.act("generate", &[]);
    assert_eq!(code(&out), Some(2));
    assert!(stderr(&out).contains("line 12"), "{}", stderr(&out));
    assert!(is_empty_dir(&ws.out()));
}

#[test]
fn missing_config_flag_is_a_config_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_act")).arg("generate").output().unwrap();
    assert_eq!(code(&out), Some(2));
}

#[test]
fn generate_is_byte_reproducible() {
    let ws = Workspace::new(SMALL);
    ws.ok("generate");
    let files = ["source.actd", "target.actd", "test.actd"];
    let first: Vec<Vec<u8>> = files.iter().map(|f| fs::read(ws.out().join(f)).unwrap()).collect();
    ws.ok("generate");
    for (f, bytes) in files.iter().zip(&first) {
        assert_eq!(&fs::read(ws.out().join(f)).unwrap(), bytes, "{f}");
    }
}

#[test]
fn zero_epochs_checkpoints_the_initial_encoder() {
    let ws = Workspace::new(&SMALL.replace("epochs = 4", "epochs = 0"));
    ws.ok("generate");
    ws.ok("pretrain");
    let saved = EncoderParams::load(&ws.out().join("encoder.ckpt")).unwrap();
    let cfg: ExperimentConfig = fs::read_to_string(ws.dir.path().join("run.conf")).unwrap().parse().unwrap();
    assert_eq!(saved, cfg.init_encoder().unwrap());
    let trace = fs::read_to_string(ws.out().join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1);
}

#[test]
fn full_pipeline_writes_one_trace_row_per_epoch() {
    let ws = Workspace::new(SMALL);
    for command in ["generate", "pretrain", "evaluate", "diagnose"] {
        let out = ws.act(command, &[]);
        assert!(code(&out) == Some(0), "{command}: {}", stderr(&out));
    }
    let trace = fs::read_to_string(ws.out().join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 4);
    let eval = fs::read_to_string(ws.out().join("eval.csv")).unwrap();
    assert!(eval.lines().count() >= 2);
    assert!(ws.out().join("alignment_bound.csv").exists());
}

#[test]
fn checkpoint_flag_redirects_the_encoder() {
    let ws = Workspace::new(SMALL);
    ws.ok("generate");
    let ckpt = ws.dir.path().join("elsewhere/f.ckpt");
    let ckpt_arg = ckpt.to_str().unwrap();
    assert_eq!(code(&ws.act("pretrain", &["--checkpoint", ckpt_arg])), Some(0));
    assert!(ckpt.exists());
    assert!(!ws.out().join("encoder.ckpt").exists());
    assert_eq!(code(&ws.act("evaluate", &["--checkpoint", ckpt_arg])), Some(0));
}

#[test]
fn too_many_neighbours_is_a_data_error() {
    let ws = Workspace::new(&format!("{SMALL}knn_k = 13\n"));
    ws.ok("generate");
    ws.ok("pretrain");
    let out = ws.act("evaluate", &[]);
    assert_eq!(code(&out), Some(4), "{}", stderr(&out));
    assert!(!ws.out().join("eval.csv").exists());
}

#[test]
fn empty_target_class_is_a_data_error() {
    let ws = Workspace::new(SMALL);
    ws.ok("generate");
    ws.ok("pretrain");
    // Relabel every target sample to class 1, leaving classes 2 and 3 empty.
    let path = ws.out().join("target.actd");
    let mut ds = act_core::dataset::Dataset::load(&path).unwrap();
    ds.labels = Some(vec![0; ds.len()]);
    ds.save(&path).unwrap();
    let out = ws.act("evaluate", &[]);
    assert_eq!(code(&out), Some(4), "{}", stderr(&out));
}

#[test]
fn missing_inputs_are_data_errors() {
    let ws = Workspace::new(SMALL);
    assert_eq!(code(&ws.act("pretrain", &[])), Some(4));
    ws.ok("generate");
    assert_eq!(code(&ws.act("evaluate", &[])), Some(4));
}

#[test]
fn divergent_training_is_a_numeric_error() {
    let ws = Workspace::new(&format!("{}optimizer = sgd\n", SMALL.replace("0.001", "1e300")));
    ws.ok("generate");
    let out = ws.act("pretrain", &[]);
    assert_eq!(code(&out), Some(3), "{}", stderr(&out));
}

#[test]
fn collapsed_encoder_has_no_view_spread() {
    let ws = Workspace::new(SMALL);
    ws.ok("generate");
    let cfg: ExperimentConfig = SMALL.parse().unwrap();
    let mut f = cfg.init_encoder().unwrap();
    f.output = f.output.scale(0.0);
    fs::create_dir_all(ws.out()).unwrap();
    f.save(&ws.out().join("encoder.ckpt")).unwrap();
    let out = ws.act("diagnose", &[]);
    assert!(code(&out) == Some(0), "{}", stderr(&out));
    let report = ws.report();
    assert_eq!(field(&report, "R_s"), "0.0");
    assert_eq!(field(&report, "R_t"), "0.0");
}

#[test]
fn unshifted_target_stays_within_the_sampling_noise() {
    let ws = Workspace::new(&format!("{SMALL}shift_rho = 0.0\n"));
    ws.ok("generate");
    ws.ok("pretrain");
    let out = ws.act("diagnose", &[]);
    assert!(code(&out) == Some(0), "{}", stderr(&out));
    let report = ws.report();
    let threshold: f64 = field(&report, "wasserstein_noise_threshold").parse().unwrap();
    let worst = field(&report, "wasserstein_per_class")
        .split(',')
        .map(|v| v.parse::<f64>().unwrap())
        .fold(0.0, f64::max);
    assert!(worst <= threshold, "max per-class W1 {worst} above noise threshold {threshold}");
}

#[test]
fn default_config_file_matches_the_built_in_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.conf");
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg.to_text(), ExperimentConfig::with_seed(0).to_text());
}

#[test]
fn default_training_reduces_the_loss() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.conf");
    let ws = Workspace::new(&fs::read_to_string(path).unwrap());
    ws.ok("generate");
    ws.ok("pretrain");
    let trace = fs::read_to_string(ws.out().join("trace.csv")).unwrap();
    let losses: Vec<f64> = trace.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(losses.len(), 200);
    let ratio = losses[losses.len() - 1] / losses[0];
    assert!(ratio < 0.2, "final/initial loss {ratio}");
}
