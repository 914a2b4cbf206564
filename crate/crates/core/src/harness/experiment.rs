//! The end-to-end pipeline. Every stage reads its inputs from and writes its
//! outputs to the run directory under stable file names, so the CLI can run
//! stages one at a time and `compare` is just all of them in order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::{
    base_pool, calibration_indices, generate_task, task_descriptors, TaskData, TaskDescriptor,
    DEFAULT_CLUSTER_STD,
};
use super::report::{Format, ResultTable, Row};
use crate::checkpoint::{file_sha256, read_checkpoint, write_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::merge::{merge_models, MergeConfig, MergeMethod};
use crate::model::{
    evaluate_accuracy, read_jsonl, train_sgd, write_jsonl, Batch, Init, ModelSpec, TrainConfig,
};
use crate::seed;
use crate::sensitivity::{SensitivityMode, SensitivityReport, TaskModel};
use crate::task_vector::{compute_task_vector, layer_partition};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensConfig {
    /// Calibration samples per task.
    pub m: usize,
    pub temperature: f64,
    pub mode: SensitivityMode,
}

impl Default for SensConfig {
    fn default() -> Self {
        Self {
            m: 64,
            temperature: 1.0,
            mode: SensitivityMode::Both,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelSpec,
    pub tasks: Vec<TaskDescriptor>,
    #[serde(default = "default_cluster_std")]
    pub cluster_std: f64,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub sens: SensConfig,
    pub merge: Vec<MergeConfig>,
    pub output_dir: PathBuf,
}

fn default_cluster_std() -> f64 {
    DEFAULT_CLUSTER_STD
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let seed = 0;
        Self {
            seed,
            model: ModelSpec {
                layer_sizes: vec![16, 32, 32, 4],
            },
            tasks: task_descriptors(3, 2000, 500, seed),
            cluster_std: DEFAULT_CLUSTER_STD,
            // a light pass: the base sees every task but leaves room for
            // fine-tuning, otherwise every merge scores like the base
            pretrain: TrainConfig {
                lr: 0.01,
                epochs: 1,
                batch_size: 32,
            },
            finetune: TrainConfig {
                lr: 0.05,
                epochs: 10,
                batch_size: 32,
            },
            sens: SensConfig::default(),
            merge: [
                MergeMethod::Average,
                MergeMethod::TaskArithmetic,
                MergeMethod::Ties,
                MergeMethod::Dare,
            ]
            .into_iter()
            .map(MergeConfig::new)
            .collect(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.tasks.is_empty() {
            return Err(Error::InvalidArgument("config lists no tasks".into()));
        }
        let mut ids: Vec<&str> = self.tasks.iter().map(|t| t.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.tasks.len() {
            return Err(Error::InvalidArgument("task ids must be unique".into()));
        }
        if let Some(t) = self.tasks.iter().find(|t| !is_file_safe(&t.id)) {
            return Err(Error::InvalidArgument(format!(
                "task id `{}` must be non-empty and use only [A-Za-z0-9_-]",
                t.id
            )));
        }
        if let Some(t) = self.tasks.iter().find(|t| self.sens.m > t.n_train) {
            return Err(Error::InvalidArgument(format!(
                "m = {} exceeds task {}'s {} training samples",
                self.sens.m, t.id, t.n_train
            )));
        }
        self.merge.iter().try_for_each(MergeConfig::validate)
    }

    /// Same experiment under another seed: task seeds become `seed ^ index`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.seed = seed;
        for (i, t) in cfg.tasks.iter_mut().enumerate() {
            t.seed = seed ^ i as u64;
        }
        cfg
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

fn is_file_safe(id: &str) -> bool {
    !id.is_empty()
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

fn file_label(cfg: &MergeConfig) -> String {
    cfg.label().replace('[', "_").replace(']', "")
}

pub fn merged_file_name(cfg: &MergeConfig, use_sens: bool) -> String {
    format!(
        "merged_{}_{}.ckpt",
        file_label(cfg),
        if use_sens { "sens" } else { "nosens" }
    )
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// A configured run rooted at `out`.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.output_dir.clone();
        Ok(Self { cfg, out })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn task_ids(&self) -> Vec<String> {
        self.cfg.tasks.iter().map(|t| t.id.clone()).collect()
    }

    fn task(&self, id: &str) -> Result<&TaskDescriptor> {
        self.cfg
            .tasks
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task `{id}`")))
    }

    fn selected(&self, only: Option<&str>) -> Result<Vec<&TaskDescriptor>> {
        match only {
            Some(id) => Ok(vec![self.task(id)?]),
            None => Ok(self.cfg.tasks.iter().collect()),
        }
    }

    fn read_split(&self, id: &str, split: &str) -> Result<Batch> {
        read_jsonl(
            self.path(&format!("task_{id}_{split}.jsonl")),
            self.cfg.model.input_dim(),
            self.cfg.model.num_classes(),
        )
    }

    fn task_model(&self, id: &str) -> Result<Checkpoint> {
        read_checkpoint(self.path(&format!("task_{id}.ckpt")))
    }

    pub fn gen_data(&self) -> Result<()> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        let (d, c) = (self.cfg.model.input_dim(), self.cfg.model.num_classes());
        let tasks: Vec<TaskData> = self
            .cfg
            .tasks
            .iter()
            .map(|t| generate_task(t, d, c, self.cfg.cluster_std))
            .collect::<Result<_>>()?;
        for t in &tasks {
            write_jsonl(&t.train, self.path(&format!("task_{}_train.jsonl", t.id)))?;
            write_jsonl(&t.test, self.path(&format!("task_{}_test.jsonl", t.id)))?;
        }
        write_jsonl(&base_pool(&tasks)?, self.path("base_train.jsonl"))?;
        write_text(&self.path("config.json"), &self.cfg.to_json()?)
    }

    pub fn train_base(&self) -> Result<()> {
        let (d, c) = (self.cfg.model.input_dim(), self.cfg.model.num_classes());
        let pool = read_jsonl(self.path("base_train.jsonl"), d, c)?;
        let base = train_sgd(
            &self.cfg.model,
            &pool,
            &self.cfg.pretrain,
            Init::Seed(seed::derive(self.cfg.seed, "base-init")),
            seed::derive(self.cfg.seed, "base-train"),
        )?;
        write_checkpoint(&base, self.path("base.ckpt"))
    }

    pub fn finetune(&self, only: Option<&str>) -> Result<()> {
        let base = read_checkpoint(self.path("base.ckpt"))?;
        for t in self.selected(only)? {
            let train = self.read_split(&t.id, "train")?;
            let fine = train_sgd(
                &self.cfg.model,
                &train,
                &self.cfg.finetune,
                Init::From(&base),
                seed::derive(t.seed, "finetune"),
            )?;
            write_checkpoint(&fine, self.path(&format!("task_{}.ckpt", t.id)))?;
        }
        Ok(())
    }

    pub fn task_vectors(&self, only: Option<&str>) -> Result<()> {
        let base_path = self.path("base.ckpt");
        let base = read_checkpoint(&base_path)?;
        let base_sha = file_sha256(&base_path)?;
        for t in self.selected(only)? {
            let tv = compute_task_vector(&self.task_model(&t.id)?, &base, &t.id)?;
            write_checkpoint(
                &tv.to_checkpoint(&base_sha),
                self.path(&format!("tv_{}.ckpt", t.id)),
            )?;
        }
        Ok(())
    }

    /// Calibration samples drawn without replacement from each training split.
    pub fn calibration(&self, t: &TaskDescriptor) -> Result<Batch> {
        let train = self.read_split(&t.id, "train")?;
        let idx = calibration_indices(
            train.len(),
            self.cfg.sens.m,
            seed::derive(t.seed, "calibration"),
        )?;
        Ok(train.select(&idx))
    }

    pub fn sensitivity(&self) -> Result<SensitivityReport> {
        let partition = layer_partition(&read_checkpoint(self.path("base.ckpt"))?)?;
        let models: Vec<Checkpoint> = self
            .cfg
            .tasks
            .iter()
            .map(|t| self.task_model(&t.id))
            .collect::<Result<_>>()?;
        let calibs: Vec<Batch> = self
            .cfg
            .tasks
            .iter()
            .map(|t| self.calibration(t))
            .collect::<Result<_>>()?;
        let tasks: Vec<TaskModel<'_>> = self
            .cfg
            .tasks
            .iter()
            .zip(&models)
            .zip(&calibs)
            .map(|((t, params), calib)| TaskModel {
                id: &t.id,
                params,
                calib,
            })
            .collect();
        let report = SensitivityReport::compute(
            &tasks,
            &self.cfg.model,
            &partition,
            self.cfg.sens.temperature,
            self.cfg.sens.mode,
        )?;
        report.write_json(self.path("sens.json"))?;
        write_text(&self.path("sens.csv"), &report.to_csv())?;
        Ok(report)
    }

    /// Every configured merge, with and without sensitivity coefficients.
    /// Returns `(row label, use_sens, file name)` per merged checkpoint.
    pub fn merge(
        &self,
        filter: Option<(MergeMethod, Option<bool>)>,
    ) -> Result<Vec<(String, bool, String)>> {
        let base = read_checkpoint(self.path("base.ckpt"))?;
        let report = SensitivityReport::read_json(self.path("sens.json"))?;
        let models: Vec<(String, Checkpoint)> = self
            .cfg
            .tasks
            .iter()
            .map(|t| Ok((t.id.clone(), self.task_model(&t.id)?)))
            .collect::<Result<_>>()?;
        let finetuned: Vec<(&str, &Checkpoint)> =
            models.iter().map(|(id, c)| (id.as_str(), c)).collect();

        let mut written = Vec::new();
        for mcfg in &self.cfg.merge {
            for use_sens in [false, true] {
                if let Some((method, sens)) = filter {
                    if method != mcfg.method || sens.is_some_and(|s| s != use_sens) {
                        continue;
                    }
                }
                let cfg = MergeConfig {
                    use_sens,
                    ..mcfg.clone()
                };
                let merged = merge_models(&base, &finetuned, &cfg, Some(&report))?;
                let name = merged_file_name(&cfg, use_sens);
                write_checkpoint(&merged, self.path(&name))?;
                written.push((cfg.label(), use_sens, name));
            }
        }
        Ok(written)
    }

    /// Accuracy of one checkpoint on every task's test split.
    pub fn evaluate(&self, ckpt: &Checkpoint) -> Result<Vec<f64>> {
        self.cfg
            .tasks
            .iter()
            .map(|t| evaluate_accuracy(ckpt, &self.cfg.model, &self.read_split(&t.id, "test")?))
            .collect()
    }

    /// Fine-tuned models first, then every merged checkpoint, each reloaded
    /// from disk. Writes `report.csv`, `report.md` and `report.json`.
    pub fn eval(&self) -> Result<ResultTable> {
        let mut table = ResultTable::new(self.task_ids());
        for t in &self.cfg.tasks {
            table.push(Row {
                method: format!("finetuned_{}", t.id),
                use_sens: None,
                accuracies: self.evaluate(&self.task_model(&t.id)?)?,
            })?;
        }
        for mcfg in &self.cfg.merge {
            for use_sens in [false, true] {
                let ckpt = read_checkpoint(self.path(&merged_file_name(mcfg, use_sens)))?;
                table.push(Row {
                    method: mcfg.label(),
                    use_sens: Some(use_sens),
                    accuracies: self.evaluate(&ckpt)?,
                })?;
            }
        }
        self.write_reports(&table, "report")?;
        Ok(table)
    }

    pub fn write_reports(&self, table: &ResultTable, stem: &str) -> Result<()> {
        for (format, ext) in [
            (Format::Csv, "csv"),
            (Format::Markdown, "md"),
            (Format::Json, "json"),
        ] {
            write_text(&self.path(&format!("{stem}.{ext}")), &table.render(format)?)?;
        }
        Ok(())
    }

    /// Runs every stage in order.
    pub fn compare(&self) -> Result<ResultTable> {
        self.gen_data().map_err(|e| e.in_stage("gen-data"))?;
        self.train_base().map_err(|e| e.in_stage("train-base"))?;
        self.finetune(None).map_err(|e| e.in_stage("finetune"))?;
        self.task_vectors(None)
            .map_err(|e| e.in_stage("task-vector"))?;
        self.sensitivity().map_err(|e| e.in_stage("sensitivity"))?;
        self.merge(None).map_err(|e| e.in_stage("merge"))?;
        self.eval().map_err(|e| e.in_stage("eval"))
    }
}

pub fn run_compare(cfg: &ExperimentConfig) -> Result<ResultTable> {
    Pipeline::new(cfg.clone())?.compare()
}

/// Runs `compare` once per seed under `<output_dir>/seed_<s>` and writes the
/// row-wise mean to `<output_dir>/report_mean.{csv,md,json}`.
pub fn run_seeds(
    cfg: &ExperimentConfig,
    seeds: &[u64],
) -> Result<(Vec<(u64, ResultTable)>, ResultTable)> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("seed list is empty".into()));
    }
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &s in seeds {
        let mut c = cfg.with_seed(s);
        c.output_dir = cfg.output_dir.join(format!("seed_{s}"));
        per_seed.push((s, run_compare(&c)?));
    }
    let tables: Vec<ResultTable> = per_seed.iter().map(|(_, t)| t.clone()).collect();
    let mean = ResultTable::mean(&tables)?;
    Pipeline::new(cfg.clone())?.write_reports(&mean, "report_mean")?;
    Ok((per_seed, mean))
}
