//! Run configuration: one JSON document per run.
//!
//! Top-level keys use the names of the published hyperparameter listings
//! (`n_layers`, `T`, `batchSize`, `lrQ`, …) so a listing can be pasted in
//! as is. Everything else lives in namespaced sections: `run`, `kernel`,
//! `neural`, `eval`, `source`, `target`, `color_transfer`.

use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use anyhow::{bail, Context, Result};
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use usd_core::data::{GaussianSpec, ShapeKind, ShapeSpec};
use usd_core::descent::ReactionMode;
use usd_core::neural_critic::{Activation, Dropout};
use usd_core::Gamma;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    Kernel,
    Neural,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Weighted,
    BirthDeath,
    None,
}

impl From<Mode> for ReactionMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Weighted => ReactionMode::Weighted,
            Mode::BirthDeath => ReactionMode::BirthDeath,
            Mode::None => ReactionMode::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub engine: Engine,
    pub mode: Mode,
    /// 0 = unbalanced, 1 = balanced.
    pub gamma: u8,
    pub data_seed: u64,
    pub descent_seed: u64,
    /// Snapshot period in steps; 0 disables snapshots.
    pub snapshot_every: usize,
    pub output_dir: PathBuf,
    /// Birth-death only: running-mix mean instead of post-advection mean.
    pub sequential_birth_death_mean: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            engine: Engine::Kernel,
            mode: Mode::Weighted,
            gamma: 1,
            data_seed: 0,
            descent_seed: 1,
            snapshot_every: 0,
            output_dir: PathBuf::from("usd-out"),
            sequential_birth_death_mean: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelSection {
    /// Ridge `λ` of the critic solve.
    pub lambda: f64,
    pub n_features: usize,
    /// Gaussian bandwidth; `√d` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
}

impl Default for KernelSection {
    fn default() -> Self {
        Self {
            lambda: 1e-3,
            n_features: 128,
            bandwidth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeuralSection {
    pub activation: String,
    pub zero_init: bool,
    /// Clear optimizer moments before every critic update after the first.
    pub reset_optimizer: bool,
    /// Train-time dropout probability after the second hidden layer.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    /// Warm-start checkpoint.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for NeuralSection {
    fn default() -> Self {
        Self {
            activation: "tanh".into(),
            zero_init: false,
            reset_optimizer: true,
            dropout: None,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_features: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_features: usd_core::mmd::EVAL_FEATURES,
            bandwidth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorTransferSection {
    pub source: PathBuf,
    pub target: PathBuf,
    #[serde(default = "default_recolored")]
    pub output: PathBuf,
}

fn default_recolored() -> PathBuf {
    PathBuf::from("recolored.png")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub n_layers: Vec<usize>,
    pub n_points_src: usize,
    pub n_points_target: usize,
    #[serde(rename = "T")]
    pub t: usize,
    /// Accepted for compatibility with the listings; must name Adam with
    /// amsgrad, which is the only optimizer.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<String>,
    #[serde(rename = "batchSize")]
    pub batch_size: usize,
    pub n_c_startup: usize,
    pub n_c: usize,
    pub wdecay: f64,
    #[serde(rename = "lrD")]
    pub lr_d: f64,
    /// Particle step `ε` for both engines.
    #[serde(rename = "lrQ")]
    pub lr_q: f64,
    pub tau: f64,
    pub alpha: f64,
    pub lambda_aug_init: f64,
    pub rho: f64,
    /// Present in one listing (batch norm); rejected by validation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub normalization: Option<String>,

    pub run: RunSection,
    pub kernel: KernelSection,
    pub neural: NeuralSection,
    pub eval: EvalSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<ShapeSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<ShapeSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub color_transfer: Option<ColorTransferSection>,
}

impl Default for RunConfig {
    /// The synthetic-experiment listing.
    fn default() -> Self {
        Self {
            n_layers: vec![64, 1024, 64],
            n_points_src: 4000,
            n_points_target: 4000,
            t: 800,
            optimizer: None,
            batch_size: 512,
            n_c_startup: 200,
            n_c: 20,
            wdecay: 1e-5,
            lr_d: 1e-4,
            lr_q: 1e-4,
            tau: 1e-3,
            alpha: 0.6,
            lambda_aug_init: 1e-5,
            rho: 1e-6,
            normalization: None,
            run: RunSection::default(),
            kernel: KernelSection::default(),
            neural: NeuralSection::default(),
            eval: EvalSection::default(),
            source: None,
            target: None,
            color_transfer: None,
        }
    }
}

static COMMENT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r##"^((?:[^"#]|"(?:[^"\\]|\\.)*")*)#.*$"##).unwrap());
static BARE_CALL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"^(\s*"[^"]+"\s*:\s*)([A-Za-z_][\w.]*\(.*\))(\s*,?)\s*$"#).unwrap());
static TRAILING_COMMA: LazyLock<Regex> = LazyLock::new(|| Regex::new(r",(\s*[}\]])").unwrap());

/// Turns a listing in Python dict style into JSON: drops `#` comments,
/// quotes bare constructor calls such as `Adam(amsgrad=True)`, adds commas
/// missing between entries and removes trailing ones. Plain JSON passes
/// through unchanged.
pub fn relaxed_to_json(text: &str) -> String {
    let lines: Vec<String> = text
        .lines()
        .map(|l| COMMENT.replace(l, "$1").into_owned())
        .map(|l| BARE_CALL.replace(&l, "$1\"$2\"$3").into_owned())
        .map(|l| l.trim_end().to_string())
        .collect();
    let mut out = String::with_capacity(text.len());
    for (i, line) in lines.iter().enumerate() {
        out.push_str(line);
        let next = lines[i + 1..].iter().find(|l| !l.trim().is_empty());
        let ends_value = line
            .trim_end()
            .chars()
            .last()
            .is_some_and(|c| c.is_ascii_alphanumeric() || matches!(c, '"' | ']' | '}'));
        if ends_value && next.is_some_and(|n| n.trim_start().starts_with('"')) {
            out.push(',');
        }
        out.push('\n');
    }
    TRAILING_COMMA.replace_all(&out, "$1").into_owned()
}

impl RunConfig {
    /// Parses a configuration document. Shape specs may omit `n`, which
    /// then comes from `n_points_src` / `n_points_target`.
    pub fn from_text(text: &str) -> Result<Self> {
        let json = relaxed_to_json(text);
        let mut value: Value = serde_json::from_str(&json).context("configuration is not valid JSON")?;
        let obj = value.as_object_mut().context("configuration must be a JSON object")?;
        let defaults = RunConfig::default();
        for (shape, count_key, default_count) in [
            ("source", "n_points_src", defaults.n_points_src),
            ("target", "n_points_target", defaults.n_points_target),
        ] {
            let count = obj.get(count_key).cloned().unwrap_or(Value::from(default_count));
            if let Some(Value::Object(spec)) = obj.get_mut(shape) {
                spec.entry("n").or_insert(count);
            }
        }
        let cfg: RunConfig = serde_json::from_value(value).context("invalid configuration")?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::from_text(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn gamma(&self) -> Result<Gamma> {
        Gamma::from_flag(self.run.gamma).context("run.gamma must be 0 or 1")
    }

    pub fn activation(&self) -> Result<Activation> {
        Ok(Activation::from_name(&self.neural.activation)?)
    }

    pub fn dropout(&self) -> Option<Dropout> {
        // the listing's dropout sits after the second hidden layer
        self.neural.dropout.map(|p| Dropout { layer: 1, p })
    }

    /// Source shape, defaulting to a standard 2-D Gaussian.
    pub fn source_shape(&self) -> ShapeSpec {
        self.source.clone().unwrap_or_else(|| {
            ShapeSpec::new(
                ShapeKind::Gaussian(GaussianSpec {
                    mean: vec![0.0, 0.0],
                    cov_diag: vec![1.0, 1.0],
                }),
                self.n_points_src,
            )
        })
    }

    /// Target shape, defaulting to four Gaussians on the corners of a square.
    pub fn target_shape(&self) -> ShapeSpec {
        self.target.clone().unwrap_or_else(|| {
            let components = [[2.0, 2.0], [-2.0, 2.0], [-2.0, -2.0], [2.0, -2.0]]
                .iter()
                .map(|m| GaussianSpec {
                    mean: m.to_vec(),
                    cov_diag: vec![0.25, 0.25],
                })
                .collect();
            ShapeSpec::new(
                ShapeKind::Mog {
                    components,
                    weights: vec![0.25; 4],
                },
                self.n_points_target,
            )
        })
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(opt) = &self.optimizer {
            let lower = opt.to_lowercase();
            if !(lower.contains("adam") && lower.contains("amsgrad")) {
                bail!("unsupported optimizer {opt:?}: only Adam with amsgrad is available");
            }
        }
        if let Some(norm) = &self.normalization {
            bail!("normalization {norm:?} is not supported");
        }
        self.gamma()?;
        self.activation()?;
        let positive = |name: &str, v: f64| -> Result<()> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                bail!("{name} must be > 0, got {v}")
            }
        };
        let nonnegative = |name: &str, v: f64| -> Result<()> {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                bail!("{name} must be >= 0, got {v}")
            }
        };
        positive("lrQ", self.lr_q)?;
        positive("lrD", self.lr_d)?;
        nonnegative("tau", self.tau)?;
        nonnegative("alpha", self.alpha)?;
        nonnegative("wdecay", self.wdecay)?;
        nonnegative("rho", self.rho)?;
        if !self.lambda_aug_init.is_finite() {
            bail!("lambda_aug_init must be finite");
        }
        positive("kernel.lambda", self.kernel.lambda)?;
        if self.kernel.n_features == 0 || self.eval.n_features == 0 {
            bail!("feature counts must be >= 1");
        }
        for (name, bw) in [("kernel.bandwidth", self.kernel.bandwidth), ("eval.bandwidth", self.eval.bandwidth)] {
            if let Some(b) = bw {
                positive(name, b)?;
            }
        }
        if self.n_layers.contains(&0) {
            bail!("n_layers entries must be >= 1");
        }
        if let Some(p) = self.neural.dropout {
            if !(0.0..1.0).contains(&p) {
                bail!("neural.dropout must be in [0, 1), got {p}");
            }
        }
        if self.run.mode == Mode::BirthDeath && !(self.alpha > 0.0 && self.tau > 0.0) {
            bail!("birth_death mode needs alpha > 0 and tau > 0");
        }
        self.source_shape().validate().context("source shape")?;
        self.target_shape().validate().context("target shape")?;
        Ok(())
    }
}
