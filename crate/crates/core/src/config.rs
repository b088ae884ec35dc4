//! Experiment configuration: one JSON document, validated before any run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decode::{DecodeConfig, DecodeMode};
use crate::error::{LabError, Result};
use crate::metrics::{extended_f64, Criterion, CriterionKind};
use crate::policy::Vocab;
use crate::rlvr::TrainConfig;
use crate::seed;
use crate::task::{generate_tasks, Alphabet, NoiseModel, Op, TaskInstance, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabConfig {
    pub base: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub operands: usize,
    pub ops: Vec<Op>,
    pub digit_range: (usize, usize),
    pub train_tasks: usize,
    /// Drawn with its own seed from the same prompt space.
    pub heldout_tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub context_width: usize,
    pub copies_per_task: usize,
    pub correct_fraction: f64,
    pub noise: NoiseModel,
    pub smoothing: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalDecodeConfig {
    pub max_len: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub samples_per_prompt: usize,
}

impl EvalDecodeConfig {
    pub fn template(&self, mode: DecodeMode) -> DecodeConfig {
        DecodeConfig::new(mode, self.max_len, self.temperature, self.top_p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TauGrid(#[serde(with = "extended_f64::vec")] pub Vec<f64>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Threshold grid per replacement criterion.
    pub replace_taus: BTreeMap<CriterionKind, TauGrid>,
    pub extrapolate_criterion: CriterionKind,
    pub extrapolate_taus: TauGrid,
    pub gammas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub vocab: VocabConfig,
    pub task: TaskConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub decode: EvalDecodeConfig,
    pub sweep: SweepConfig,
    pub output_dir: PathBuf,
    pub master_seed: u64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            LabError::config(format!("{origin}:{path}"), e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// Every preset-dependent option made explicit, as echoed next to outputs.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.train = self.train.resolved();
        c
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |field: &str, msg: String| Err(LabError::config(field, msg));
        if !(2..=10).contains(&self.vocab.base) {
            return err("vocab.base", "must be in 2..=10".into());
        }
        let space = crate::task::prompt_space(&self.task_spec());
        for (field, n) in [("task.train_tasks", self.task.train_tasks), ("task.heldout_tasks", self.task.heldout_tasks)] {
            if n == 0 || n > space {
                return err(field, format!("must be in 1..={space}"));
            }
        }
        let p = &self.pretrain;
        if !(1..=4).contains(&p.context_width) {
            return err("pretrain.context_width", "must be in 1..=4".into());
        }
        if p.copies_per_task == 0 {
            return err("pretrain.copies_per_task", "must be at least 1".into());
        }
        if !(p.correct_fraction > 0.0 && p.correct_fraction <= 1.0) {
            return err("pretrain.correct_fraction", "must lie in (0, 1]".into());
        }
        if !(p.smoothing >= 0.0 && p.smoothing.is_finite()) {
            return err("pretrain.smoothing", "must be finite and >= 0".into());
        }
        if let Some((field, msg)) = self.train.problems().into_iter().next() {
            return err(&format!("train.{field}"), msg);
        }
        let d = &self.decode;
        if d.samples_per_prompt == 0 {
            return err("decode.samples_per_prompt", "must be at least 1".into());
        }
        self.decode
            .template(DecodeMode::BaseOnly)
            .validate()
            .map_err(|e| LabError::config("decode", e.to_string()))?;
        for (kind, grid) in &self.sweep.replace_taus {
            if grid.0.is_empty() || grid.0.iter().any(|t| t.is_nan()) {
                return err(&format!("sweep.replace_taus.{}", kind.name()), "must be a nonempty list of thresholds".into());
            }
        }
        if self.sweep.extrapolate_taus.0.is_empty() {
            return err("sweep.extrapolate_taus", "must be nonempty".into());
        }
        if self.sweep.gammas.is_empty() || self.sweep.gammas.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return err("sweep.gammas", "must be a nonempty list of finite values >= 0".into());
        }
        Ok(())
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            operands: self.task.operands,
            ops: self.task.ops.clone(),
            digit_range: self.task.digit_range,
        }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::arithmetic(self.vocab.base)
    }

    pub fn alphabet(&self) -> Result<Alphabet> {
        Alphabet::new(&self.vocab(), self.vocab.base)
    }

    pub fn component_seed(&self, label: &str) -> u64 {
        seed::derive(self.master_seed, label, 0)
    }

    pub fn train_tasks(&self) -> Result<Vec<TaskInstance>> {
        generate_tasks(&self.alphabet()?, &self.task_spec(), self.component_seed("train_tasks"), self.task.train_tasks)
    }

    pub fn heldout_tasks(&self) -> Result<Vec<TaskInstance>> {
        generate_tasks(&self.alphabet()?, &self.task_spec(), self.component_seed("heldout_tasks"), self.task.heldout_tasks)
    }

    pub fn criterion_grid(&self) -> Vec<(Criterion, Vec<f64>)> {
        self.sweep
            .replace_taus
            .iter()
            .map(|(k, g)| (Criterion::new(*k, 0.0), g.0.clone()))
            .collect()
    }
}
