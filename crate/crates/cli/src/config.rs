//! Experiment configuration: one TOML file fully describes a run.
//!
//! Unknown keys anywhere in the file are rejected, and missing required
//! keys are reported with the offending key and source location, so a
//! typo never silently changes an experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use kvlab_core::attention::AttnConfig;
use kvlab_core::model::corpus::CorpusSpec;
use kvlab_core::model::train::TrainConfig;
use kvlab_core::model::ModelConfig;

use crate::Failure;

/// Report rendering choices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    #[default]
    Table,
    Tsv,
}

fn default_eval_seq_len() -> usize {
    32
}

fn default_eval_tokens() -> usize {
    2048
}

/// Held-out evaluation: a fresh stream of the same language, generated
/// from the corpus spec with `stream + 1`, so it never overlaps the
/// training stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Predictions per evaluation window.
    #[serde(default = "default_eval_seq_len")]
    pub seq_len: usize,
    /// Held-out stream length in tokens.
    #[serde(default = "default_eval_tokens")]
    pub tokens: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { seq_len: default_eval_seq_len(), tokens: default_eval_tokens() }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Where logs, checkpoints and reports are written.
    pub dir: Option<PathBuf>,
    pub format: ReportFormat,
}

fn default_true() -> bool {
    true
}

/// One method row in a comparison run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub label: String,
    pub attn: AttnConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    /// Balance every method's FFN width so totals match the first
    /// method's parameter count.
    #[serde(default = "default_true")]
    pub balance_params: bool,
    pub methods: Vec<MethodSpec>,
}

/// Everything a run needs; serializable, so a run is reproducible from
/// the file alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub corpus: CorpusSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub compare: Option<CompareConfig>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), Failure> {
        self.model.validate().map_err(|e| Failure::usage(format!("[model] {e}")))?;
        self.corpus.validate().map_err(|e| Failure::usage(format!("[corpus] {e}")))?;
        self.train.validate().map_err(|e| Failure::usage(format!("[train] {e}")))?;
        if self.eval.seq_len == 0 {
            return Err(Failure::usage("[eval] seq_len must be positive"));
        }
        if self.eval.tokens < self.eval.seq_len + 1 {
            return Err(Failure::usage(format!(
                "[eval] tokens ({}) must cover at least one window of seq_len + 1 ({})",
                self.eval.tokens,
                self.eval.seq_len + 1
            )));
        }
        if self.corpus.vocab_size != self.model.vocab_size {
            return Err(Failure::usage(format!(
                "[corpus] vocab_size {} must match [model] vocab_size {}",
                self.corpus.vocab_size, self.model.vocab_size
            )));
        }
        if self.corpus.length < self.train.seq_len + 1 {
            return Err(Failure::usage(format!(
                "[corpus] length {} is shorter than one training window of {}",
                self.corpus.length,
                self.train.seq_len + 1
            )));
        }
        if let Some(compare) = &self.compare {
            if compare.methods.is_empty() {
                return Err(Failure::usage("[compare] methods list is empty"));
            }
            for m in &compare.methods {
                m.attn
                    .validate()
                    .map_err(|e| Failure::usage(format!("[compare] method '{}': {e}", m.label)))?;
            }
            let mut labels: Vec<&str> = compare.methods.iter().map(|m| m.label.as_str()).collect();
            labels.sort_unstable();
            labels.dedup();
            if labels.len() != compare.methods.len() {
                return Err(Failure::usage("[compare] method labels must be unique"));
            }
        }
        Ok(())
    }

    /// The held-out evaluation stream: same language (same seed), next
    /// stream id, so it shares structure with training but no tokens.
    pub fn holdout_spec(&self) -> CorpusSpec {
        CorpusSpec {
            stream: self.corpus.stream.wrapping_add(1),
            length: self.eval.tokens,
            ..self.corpus.clone()
        }
    }
}

/// Read and fully validate a config file. TOML errors carry the source
/// span, so missing or unknown keys name themselves and their location.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::usage(format!("cannot read config {}: {e}", path.display())))?;
    let cfg: ExperimentConfig = toml::from_str(&text)
        .map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}
