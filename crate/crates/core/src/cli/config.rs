//! JSON run configuration for `mor train` and `mor router-report`.
//!
//! Every key is optional; unknown keys are rejected. Schema errors carry the
//! offending key path.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapters::RouterKind;
use crate::bench::{
    make_teacher, Optimizer, StudentMethod, TeacherDims, TeacherSpec, TrainConfig, DEFAULT_ALPHA, DEFAULT_BATCH,
    DEFAULT_DROPOUT, DEFAULT_LOG_EVERY, DEFAULT_LR, DEFAULT_RANK,
};
use crate::error::{MorError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterChoice {
    Learnable,
    MeanPool,
    Balanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerChoice {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: StudentMethod,
    pub d_in: usize,
    pub d_out: usize,
    /// Leading input coordinates holding the one-hot task tag.
    pub tag_width: usize,
    pub tasks: usize,
    /// Rank of both teacher and student.
    pub r: usize,
    /// Ignored for LoRA students.
    pub n_experts: usize,
    pub alpha: f64,
    pub router: RouterChoice,
    pub aux_coefficient: f64,
    pub optimizer: OptimizerChoice,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: usize,
    pub batch: usize,
    pub dropout: f64,
    pub log_every: usize,
    pub eval_rows: usize,
    pub teacher_seed: u64,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            method: StudentMethod::Mor,
            d_in: 32,
            d_out: 24,
            tag_width: 4,
            tasks: 4,
            r: DEFAULT_RANK,
            n_experts: 4,
            alpha: DEFAULT_ALPHA,
            router: RouterChoice::Learnable,
            aux_coefficient: 0.0,
            optimizer: OptimizerChoice::Adam,
            lr: DEFAULT_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 20_000,
            batch: DEFAULT_BATCH,
            dropout: DEFAULT_DROPOUT,
            log_every: DEFAULT_LOG_EVERY,
            eval_rows: 64,
            teacher_seed: 0,
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn schema(path: &str, message: impl Into<String>) -> MorError {
    MorError::Config {
        path: path.into(),
        message: message.into(),
    }
}

impl RunConfig {
    /// Range checks that serde cannot express.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_in", self.d_in),
            ("d_out", self.d_out),
            ("tasks", self.tasks),
            ("r", self.r),
            ("n_experts", self.n_experts),
            ("batch", self.batch),
            ("log_every", self.log_every),
            ("eval_rows", self.eval_rows),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(schema(key, "must be >= 1"));
            }
        }
        if self.r > self.d_in.min(self.d_out) {
            return Err(schema("r", format!("must be <= min(d_in, d_out) = {}", self.d_in.min(self.d_out))));
        }
        if self.tag_width < self.tasks {
            return Err(schema("tag_width", format!("must be >= tasks = {}", self.tasks)));
        }
        if self.tag_width > self.d_in {
            return Err(schema("tag_width", format!("must be <= d_in = {}", self.d_in)));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(schema("alpha", "must be finite and > 0"));
        }
        if !(self.aux_coefficient >= 0.0) || !self.aux_coefficient.is_finite() {
            return Err(schema("aux_coefficient", "must be finite and >= 0"));
        }
        if self.aux_coefficient > 0.0 && self.router != RouterChoice::Balanced {
            return Err(schema("aux_coefficient", "only applies to the balanced router"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(schema("lr", "must be finite and >= 0"));
        }
        for (key, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(schema(key, "must be in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(schema("eps", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(schema("dropout", "must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn router_kind(&self) -> RouterKind {
        match self.router {
            RouterChoice::Learnable => RouterKind::Learnable,
            RouterChoice::MeanPool => RouterKind::MeanPool,
            RouterChoice::Balanced => RouterKind::Balanced {
                aux_coefficient: self.aux_coefficient,
            },
        }
    }

    pub fn teacher_dims(&self) -> TeacherDims {
        TeacherDims {
            d_in: self.d_in,
            d_out: self.d_out,
            rank: self.r,
            tasks: self.tasks,
            tag_width: self.tag_width,
        }
    }

    pub fn teacher(&self) -> Result<TeacherSpec> {
        make_teacher(self.teacher_dims(), self.alpha, self.teacher_seed)
    }

    /// Expert count of the student actually built (1 for LoRA).
    pub fn student_experts(&self) -> usize {
        match self.method {
            StudentMethod::Lora => 1,
            _ => self.n_experts,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optimizer: match self.optimizer {
                OptimizerChoice::Sgd => Optimizer::Sgd,
                OptimizerChoice::Adam => Optimizer::Adam {
                    beta1: self.beta1,
                    beta2: self.beta2,
                    eps: self.eps,
                },
            },
            lr: self.lr,
            steps: self.steps,
            batch_size: self.batch,
            dropout: self.dropout,
            seed: self.seed,
            log_every: self.log_every,
            eval_rows: self.eval_rows,
        }
    }
}

/// Parses and validates JSON text.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = match serde_path_to_error::deserialize(de) {
        Ok(c) => c,
        Err(e) => {
            let path = e.path().to_string();
            let inner = e.into_inner();
            return Err(if inner.is_data() {
                schema(&path, inner.to_string())
            } else {
                MorError::Json(inner)
            });
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| {
        MorError::Io(std::io::Error::new(e.kind(), format!("cannot read config {}: {e}", path.display())))
    })?;
    parse_config_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c = parse_config_str("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!((c.alpha, c.r, c.lr, c.batch, c.dropout), (32.0, 8, 2e-4, 8, 0.05));
    }

    #[test]
    fn zero_rank_names_key() {
        let err = parse_config_str(r#"{"r": 0}"#).unwrap_err();
        match &err {
            MorError::Config { path, .. } => assert_eq!(path, "r"),
            other => panic!("{other:?}"),
        }
        assert!(err.to_string().contains("`r`"));
    }

    #[test]
    fn unknown_and_mistyped_keys() {
        match parse_config_str(r#"{"rank": 8}"#).unwrap_err() {
            MorError::Config { message, .. } => assert!(message.contains("rank")),
            other => panic!("{other:?}"),
        }
        match parse_config_str(r#"{"lr": "fast"}"#).unwrap_err() {
            MorError::Config { path, .. } => assert_eq!(path, "lr"),
            other => panic!("{other:?}"),
        }
        match parse_config_str(r#"{"router": "greedy"}"#).unwrap_err() {
            MorError::Config { path, .. } => assert_eq!(path, "router"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_and_missing_are_distinct() {
        assert!(matches!(parse_config_str("{\"r\": 8"), Err(MorError::Json(_))));
        let err = parse_config(Path::new("/nonexistent/run.json")).unwrap_err();
        assert!(matches!(err, MorError::Io(_)));
        assert!(err.to_string().contains("/nonexistent/run.json"));
    }

    #[test]
    fn range_checks() {
        for (text, key) in [
            (r#"{"dropout": 1.0}"#, "dropout"),
            (r#"{"r": 40}"#, "r"),
            (r#"{"tasks": 5}"#, "tag_width"),
            (r#"{"aux_coefficient": 1.0}"#, "aux_coefficient"),
            (r#"{"alpha": -1}"#, "alpha"),
        ] {
            match parse_config_str(text).unwrap_err() {
                MorError::Config { path, .. } => assert_eq!(path, key, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
        let c = parse_config_str(r#"{"router": "balanced", "aux_coefficient": 10}"#).unwrap();
        assert_eq!(c.router_kind(), RouterKind::Balanced { aux_coefficient: 10.0 });
    }
}
