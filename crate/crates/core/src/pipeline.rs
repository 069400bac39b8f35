//! Stage orchestration. One JSON config drives every stage; each stage reads
//! its inputs from earlier stage directories under the output root and writes
//! its artifacts plus a `summary.json` into its own directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, model_hash, read_manifest, save_checkpoint, MANIFEST_FILE};
use crate::compress::{apply_depth_prune, convert_hybrid, HybridPlan, MlpInit, PrunePlan};
use crate::config::{ModelConfig, StreamLayout};
use crate::dataset::{probe_items, write_ppm_mosaic, Dataset, Split};
use crate::diffusion::NoiseSchedule;
use crate::distill::{align_hybrid, bridge_gap, lightweight_finetune, targeted_distill, DistillMode};
use crate::error::{Error, Result};
use crate::eval::{
    ablation_deltas, fixed_batches, match_accuracy, sample_all_prompts, teacher_gap, val_loss, EvalReport,
};
use crate::importance::{
    importance_scores, select_prune_set, sensitivity_sanity, ImportanceConfig, ImportanceReport, OmegaKind,
};
use crate::model::{Model, ParamCount};
use crate::train::{global_finetune, LossCurve, TrainRunConfig};

/// Environment variable that overrides the configured output root.
pub const OUTPUT_ENV: &str = "MMDC_OUT";
pub const SUMMARY_FILE: &str = "summary.json";
pub const LOCK_FILE: &str = ".lock";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Teacher,
    Importance,
    Prune,
    Distill,
    Finetune,
    Hybridize,
    Align,
    FinetuneLite,
    Eval,
}

impl Stage {
    /// Execution order of `run-all`.
    pub const ALL: [Stage; 9] = [
        Stage::Teacher,
        Stage::Importance,
        Stage::Prune,
        Stage::Distill,
        Stage::Finetune,
        Stage::Hybridize,
        Stage::Align,
        Stage::FinetuneLite,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Teacher => "teacher",
            Stage::Importance => "importance",
            Stage::Prune => "prune",
            Stage::Distill => "distill",
            Stage::Finetune => "finetune",
            Stage::Hybridize => "hybridize",
            Stage::Align => "align",
            Stage::FinetuneLite => "finetune-lite",
            Stage::Eval => "eval",
        }
    }

    /// The subcommand that runs this stage.
    pub fn command(self) -> &'static str {
        match self {
            Stage::Teacher => "train-teacher",
            Stage::Importance => "estimate-importance",
            s => s.name(),
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name || s.command() == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: usize,
    pub val: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train: 4096, val: 512 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub target_keep: usize,
    /// Layers never removed; `None` means the first and last.
    pub protected: Option<Vec<usize>>,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            target_keep: 6,
            protected: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HybridConfig {
    pub n_dual: usize,
    pub mlp_init: MlpInit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Seed of the fixed `(t, eps)` draws used by every validation loss.
    pub val_seed: u64,
    pub sample_seed: u64,
    pub sample_steps: usize,
    /// Sample every prompt and score with the nearest-canonical classifier.
    pub prompt_match: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            val_seed: 1,
            sample_seed: 7,
            sample_steps: 50,
            prompt_match: true,
        }
    }
}

fn run(steps: usize, lr: f64) -> TrainRunConfig {
    TrainRunConfig {
        steps,
        lr,
        eval_every: 500,
        ..Default::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Every stage seed is derived from this and the stage name.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub importance: ImportanceConfig,
    pub prune: PruneConfig,
    pub hybrid: HybridConfig,
    pub teacher: TrainRunConfig,
    pub distill: TrainRunConfig,
    pub distill_mode: DistillMode,
    pub finetune: TrainRunConfig,
    pub align: TrainRunConfig,
    pub finetune_lite: TrainRunConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            importance: ImportanceConfig::default(),
            prune: PruneConfig::default(),
            hybrid: HybridConfig {
                n_dual: 2,
                mlp_init: MlpInit::CopyImage,
            },
            teacher: run(5000, 1e-3),
            distill: run(2000, 1e-3),
            distill_mode: DistillMode::TeacherForced,
            finetune: run(5000, 3e-4),
            align: run(1500, 1e-3),
            finetune_lite: run(2500, 3e-4),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn protected(&self) -> BTreeSet<usize> {
        match &self.prune.protected {
            Some(p) => p.iter().copied().collect(),
            None => BTreeSet::from([0, self.model.depth.saturating_sub(1)]),
        }
    }

    /// Checks every field and cross-reference before any stage runs.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        m.validate()?;
        if !m.layout.is_all_dual() {
            return Err(Error::config(
                "model.layout",
                "all dual (the teacher)",
                m.layout.describe(),
            ));
        }
        if self.data.train == 0 {
            return Err(Error::config("data.train", ">= 1", 0));
        }
        if self.data.val == 0 {
            return Err(Error::config("data.val", ">= 1", 0));
        }
        self.importance.weighting(m.timesteps)?;
        let protected = self.protected();
        if let Some(&l) = protected.iter().find(|&&l| l >= m.depth) {
            return Err(Error::config("prune.protected", format!("layers < {}", m.depth), l));
        }
        if !protected.contains(&0) || !protected.contains(&(m.depth - 1)) {
            return Err(Error::config(
                "prune.protected",
                format!("to include 0 and {}", m.depth - 1),
                format!("{protected:?}"),
            ));
        }
        let keep = self.prune.target_keep;
        if keep < protected.len().max(2) || keep > m.depth {
            return Err(Error::config(
                "prune.target_keep",
                format!("between {} and {}", protected.len().max(2), m.depth),
                keep,
            ));
        }
        if self.hybrid.n_dual < 1 || self.hybrid.n_dual > keep {
            return Err(Error::config(
                "hybrid.n_dual",
                format!("between 1 and {keep}"),
                self.hybrid.n_dual,
            ));
        }
        for (name, r) in [
            ("teacher", &self.teacher),
            ("distill", &self.distill),
            ("finetune", &self.finetune),
            ("align", &self.align),
            ("finetune_lite", &self.finetune_lite),
        ] {
            r.validate(name)?;
            if let Some(&l) = r.frozen.iter().find(|&&l| l >= m.depth) {
                return Err(Error::config(
                    format!("{name}.frozen"),
                    format!("layers < {}", m.depth),
                    l,
                ));
            }
        }
        if self.eval.sample_steps == 0 || self.eval.sample_steps > m.timesteps {
            return Err(Error::config(
                "eval.sample_steps",
                format!("between 1 and {}", m.timesteps),
                self.eval.sample_steps,
            ));
        }
        Ok(())
    }

    /// Deterministic per-purpose seed.
    pub fn derive_seed(&self, purpose: &str) -> u64 {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(purpose.as_bytes());
        u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, key) in parts.iter().enumerate() {
        let Value::Object(map) = cur else {
            return Err(Error::config(
                path,
                "a path through config objects",
                parts[..i].join("."),
            ));
        };
        if i + 1 == parts.len() {
            map.insert((*key).to_string(), value);
            return Ok(());
        }
        cur = map
            .get_mut(*key)
            .ok_or_else(|| Error::config(path, "an existing config section", *key))?;
    }
    Ok(())
}

/// Defaults, then the config file, then the output-root environment
/// variable, then `key.path=value` overrides. Values parse as JSON and fall
/// back to plain strings. Unless a layout is given, the teacher is all-dual
/// at the configured depth.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<PipelineConfig> {
    let mut value = serde_json::to_value(PipelineConfig::default())?;
    let mut layout_given = false;
    if let Some(p) = path {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| Error::config("config file", "valid JSON", format!("{}: {e}", p.display())))?;
        layout_given |= file.pointer("/model/layout").is_some();
        merge(&mut value, file);
    }
    if let Ok(out) = std::env::var(OUTPUT_ENV) {
        value["output_dir"] = Value::String(out);
    }
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::config("--set", "key.path=value", o))?;
        let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        layout_given |= key == "model.layout" || key == "model";
        set_path(&mut value, key, v)?;
    }
    if !layout_given {
        let depth = value["model"]["depth"].as_u64().unwrap_or(0) as usize;
        value["model"]["layout"] = serde_json::to_value(StreamLayout::all_dual(depth))?;
    }
    let cfg: PipelineConfig =
        serde_json::from_value(value).map_err(|e| Error::config("config", "a valid pipeline config", e))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Exclusive claim on an output root, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let path = root.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(root.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// What a stage consumed and produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    /// Upstream artifact name to content hash.
    pub inputs: BTreeMap<String, String>,
    /// Produced artifact name to content hash.
    pub outputs: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, Value>,
    pub wall_clock_s: f64,
}

impl StageSummary {
    fn new(stage: Stage) -> Self {
        Self {
            stage,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            metrics: BTreeMap::new(),
            wall_clock_s: 0.0,
        }
    }

    fn metric(&mut self, key: &str, v: impl Serialize) {
        self.metrics
            .insert(key.to_string(), serde_json::to_value(v).expect("metric serializes"));
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).and_then(Value::as_f64)
    }

    /// Single-line machine-readable form.
    pub fn line(&self) -> String {
        json!({
            "stage": self.stage,
            "status": "ok",
            "outputs": self.outputs,
            "wall_clock_s": self.wall_clock_s,
        })
        .to_string()
    }
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<String> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, &text).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path, stage: Stage) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact {
            stage: stage.command().into(),
            path: path.to_path_buf(),
        },
        _ => Error::io(path, e),
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Orchestrates stages over one output root.
pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub schedule: NoiseSchedule,
    data: Option<(Dataset, Dataset)>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            schedule: NoiseSchedule::cosine(cfg.model.timesteps)?,
            cfg,
            data: None,
        })
    }

    pub fn root(&self) -> &Path {
        &self.cfg.output_dir
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root().join(stage.name())
    }

    pub fn checkpoint_dir(&self, stage: Stage) -> PathBuf {
        self.stage_dir(stage).join(CHECKPOINT_DIR)
    }

    /// `(train, val)`, generated on first use from the global seed.
    pub fn data(&mut self) -> Result<&(Dataset, Dataset)> {
        if self.data.is_none() {
            let seed = self.cfg.derive_seed("data");
            let train = Dataset::generate(self.cfg.data.train, Split::Train, seed, false)?;
            let val = Dataset::generate(self.cfg.data.val, Split::Val, seed, true)?;
            self.data = Some((train, val));
        }
        Ok(self.data.as_ref().expect("generated above"))
    }

    /// Writes both splits under `<root>/data` as PPM images plus an index;
    /// returns each split's content hash.
    pub fn gen_data(&mut self) -> Result<BTreeMap<String, String>> {
        let root = self.root().join("data");
        let (train, val) = self.data()?;
        let mut hashes = BTreeMap::new();
        for (name, d) in [("train", train), ("val", val)] {
            d.dump(&root.join(name))?;
            hashes.insert(name.to_string(), d.content_hash());
        }
        Ok(hashes)
    }

    fn load(&self, stage: Stage) -> Result<(Model, String)> {
        let dir = self.checkpoint_dir(stage);
        if !dir.join(MANIFEST_FILE).exists() {
            return Err(Error::MissingArtifact {
                stage: stage.command().into(),
                path: dir.join(MANIFEST_FILE),
            });
        }
        let hash = read_manifest(&dir)?.sha256;
        Ok((load_checkpoint(&dir)?, hash))
    }

    fn train_cfg(&self, stage: Stage, base: &TrainRunConfig) -> TrainRunConfig {
        TrainRunConfig {
            seed: base.seed ^ self.cfg.derive_seed(stage.name()),
            ..base.clone()
        }
    }

    fn val_loss(&mut self, model: &Model) -> Result<f64> {
        let seed = self.cfg.eval.val_seed;
        let schedule = self.schedule.clone();
        let (_, val) = self.data()?;
        val_loss(model, val, &schedule, seed)
    }

    fn save(&self, stage: Stage, model: &Model, s: &mut StageSummary) -> Result<()> {
        let m = save_checkpoint(model, &self.checkpoint_dir(stage))?;
        s.outputs.insert("checkpoint".into(), m.sha256);
        s.metric("params", model.parameter_count());
        s.metric("layout", model.config.layout.describe());
        Ok(())
    }

    fn save_curve(&self, stage: Stage, curve: &LossCurve, s: &mut StageSummary) -> Result<()> {
        let path = self.stage_dir(stage).join("curve.csv");
        write_text(&path, &curve.to_csv())?;
        s.outputs.insert("curve.csv".into(), file_hash(&path)?);
        Ok(())
    }

    /// Runs one stage and writes its summary.
    pub fn run(&mut self, stage: Stage) -> Result<StageSummary> {
        let start = Instant::now();
        let dir = self.stage_dir(stage);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut s = StageSummary::new(stage);
        match stage {
            Stage::Teacher => self.stage_teacher(&mut s)?,
            Stage::Importance => self.stage_importance(&mut s, &[self.cfg.importance.omega])?,
            Stage::Prune => self.stage_prune(&mut s)?,
            Stage::Distill => self.stage_distill(&mut s)?,
            Stage::Finetune => self.stage_finetune(&mut s)?,
            Stage::Hybridize => self.stage_hybridize(&mut s)?,
            Stage::Align => self.stage_align(&mut s)?,
            Stage::FinetuneLite => self.stage_finetune_lite(&mut s)?,
            Stage::Eval => self.stage_eval(&mut s)?,
        }
        s.wall_clock_s = start.elapsed().as_secs_f64();
        write_json(&dir.join(SUMMARY_FILE), &s)?;
        Ok(s)
    }

    /// Importance with one report per weighting kind; the first feeds pruning.
    pub fn run_importance(&mut self, omegas: &[OmegaKind]) -> Result<StageSummary> {
        let start = Instant::now();
        let dir = self.stage_dir(Stage::Importance);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut s = StageSummary::new(Stage::Importance);
        self.stage_importance(&mut s, omegas)?;
        s.wall_clock_s = start.elapsed().as_secs_f64();
        write_json(&dir.join(SUMMARY_FILE), &s)?;
        Ok(s)
    }

    /// Every stage in order, calling `each` after each one.
    pub fn run_all(&mut self, mut each: impl FnMut(&StageSummary)) -> Result<Vec<StageSummary>> {
        let _lock = RunLock::acquire(self.root())?;
        let mut out = Vec::new();
        for stage in Stage::ALL {
            let s = self.run(stage)?;
            each(&s);
            out.push(s);
        }
        Ok(out)
    }

    fn stage_teacher(&mut self, s: &mut StageSummary) -> Result<()> {
        let init = Model::init(&self.cfg.model, self.cfg.derive_seed("init"))?;
        let run = self.train_cfg(Stage::Teacher, &self.cfg.teacher);
        let (schedule, vs) = (self.schedule.clone(), self.cfg.eval.val_seed);
        let (train, val) = self.data()?;
        s.inputs.insert("train".into(), train.content_hash());
        s.inputs.insert("val".into(), val.content_hash());
        let out = global_finetune(&init, train, val, &schedule, &run, vs)?;
        self.save(Stage::Teacher, &out.model, s)?;
        self.save_curve(Stage::Teacher, &out.curve, s)?;
        s.metric("initial_val_loss", out.initial_val);
        s.metric("val_loss", out.best_val);
        s.metric("best_step", out.best_step);
        Ok(())
    }

    fn stage_importance(&mut self, s: &mut StageSummary, omegas: &[OmegaKind]) -> Result<()> {
        let (teacher, th) = self.load(Stage::Teacher)?;
        s.inputs.insert("teacher".into(), th);
        let ic = &self.cfg.importance;
        let seed = ic.seed ^ self.cfg.derive_seed("importance");
        let probes = probe_items(ic.prompts, seed)?;
        let protected = self.cfg.protected();
        let dir = self.stage_dir(Stage::Importance);
        let mut primary: Option<ImportanceReport> = None;
        for (i, &kind) in omegas.iter().enumerate() {
            let weighting = ImportanceConfig {
                omega: kind,
                ..ic.clone()
            }
            .weighting(self.cfg.model.timesteps)?;
            let report = importance_scores(
                &teacher,
                &probes,
                &weighting,
                &self.schedule,
                seed,
                &protected,
                ic.pure_noise,
            )?;
            report.check_consistency(1e-6)?;
            let name = if i == 0 {
                "importance.json".to_string()
            } else {
                format!(
                    "importance-{}.json",
                    serde_json::to_value(kind)?.as_str().unwrap_or("custom")
                )
            };
            s.outputs.insert(name.clone(), write_json(&dir.join(&name), &report)?);
            s.metric(
                &format!("ranking.{}", serde_json::to_value(kind)?.as_str().unwrap_or("custom")),
                report.ranking(),
            );
            primary.get_or_insert(report);
        }
        let report = primary.ok_or_else(|| Error::invalid("no weighting kinds given"))?;
        let (schedule, vs) = (self.schedule.clone(), self.cfg.eval.val_seed);
        let (_, val) = self.data()?;
        let sens = sensitivity_sanity(&teacher, &report, val, &schedule, vs)?;
        s.outputs.insert(
            "sensitivity.json".into(),
            write_json(&dir.join("sensitivity.json"), &sens)?,
        );
        s.metric("scores", &report.scores);
        s.metric("spearman", sens.spearman);
        Ok(())
    }

    fn stage_prune(&mut self, s: &mut StageSummary) -> Result<()> {
        let (teacher, th) = self.load(Stage::Teacher)?;
        let report_path = self.stage_dir(Stage::Importance).join("importance.json");
        let report: ImportanceReport = read_json(&report_path, Stage::Importance)?;
        s.inputs.insert("teacher".into(), th);
        s.inputs.insert("importance.json".into(), file_hash(&report_path)?);
        if report.depth() != teacher.depth() {
            return Err(Error::invalid("importance report does not match the teacher depth"));
        }
        let (keep, remove) = select_prune_set(&report, self.cfg.prune.target_keep, &self.cfg.protected())?;
        let plan = PrunePlan::new(&keep, &remove, teacher.depth())?;
        let pruned = apply_depth_prune(&teacher, &plan)?;
        let dir = self.stage_dir(Stage::Prune);
        s.outputs
            .insert("plan.json".into(), write_json(&dir.join("plan.json"), &plan)?);
        self.save(Stage::Prune, &pruned, s)?;
        s.metric("keep", &plan.keep);
        s.metric("remove", &plan.remove);
        s.metric("val_loss", self.val_loss(&pruned)?);
        Ok(())
    }

    fn stage_distill(&mut self, s: &mut StageSummary) -> Result<()> {
        let (teacher, th) = self.load(Stage::Teacher)?;
        let (pruned, ph) = self.load(Stage::Prune)?;
        let plan_path = self.stage_dir(Stage::Prune).join("plan.json");
        let plan: PrunePlan = read_json(&plan_path, Stage::Prune)?;
        s.inputs.insert("teacher".into(), th.clone());
        s.inputs.insert("prune".into(), ph);
        s.inputs.insert("plan.json".into(), file_hash(&plan_path)?);
        let run = self.train_cfg(Stage::Distill, &self.cfg.distill);
        let (schedule, vs, mode) = (self.schedule.clone(), self.cfg.eval.val_seed, self.cfg.distill_mode);
        let (train, val) = self.data()?;
        let out = targeted_distill(&pruned, &teacher, train, val, &schedule, &plan, &run, mode, vs)?;
        if model_hash(&teacher) != th {
            return Err(Error::invalid("teacher changed during distillation"));
        }
        self.save(Stage::Distill, &out.model, s)?;
        self.save_curve(Stage::Distill, &out.curve, s)?;
        s.metric("layers", &out.layers);
        s.metric("initial_mse", &out.initial_mse);
        s.metric("final_mse", &out.final_mse);
        s.metric("val_loss", self.val_loss(&out.model)?);
        Ok(())
    }

    fn stage_finetune(&mut self, s: &mut StageSummary) -> Result<()> {
        let (model, h) = self.load(Stage::Distill)?;
        s.inputs.insert("distill".into(), h);
        let run = self.train_cfg(Stage::Finetune, &self.cfg.finetune);
        let (schedule, vs) = (self.schedule.clone(), self.cfg.eval.val_seed);
        let (train, val) = self.data()?;
        let out = global_finetune(&model, train, val, &schedule, &run, vs)?;
        self.save(Stage::Finetune, &out.model, s)?;
        self.save_curve(Stage::Finetune, &out.curve, s)?;
        s.metric("initial_val_loss", out.initial_val);
        s.metric("val_loss", out.best_val);
        s.metric("best_step", out.best_step);
        Ok(())
    }

    fn stage_hybridize(&mut self, s: &mut StageSummary) -> Result<()> {
        let (model, h) = self.load(Stage::Finetune)?;
        s.inputs.insert("finetune".into(), h);
        let plan = HybridPlan::new(model.depth(), self.cfg.hybrid.n_dual)?;
        let mlp = match self.cfg.hybrid.mlp_init {
            MlpInit::Fresh(seed) => MlpInit::Fresh(seed ^ self.cfg.derive_seed("hybrid-mlp")),
            m => m,
        };
        let hybrid = convert_hybrid(&model, &plan, mlp)?;
        let dir = self.stage_dir(Stage::Hybridize);
        s.outputs.insert(
            "hybrid_plan.json".into(),
            write_json(&dir.join("hybrid_plan.json"), &plan)?,
        );
        self.save(Stage::Hybridize, &hybrid, s)?;
        s.metric("val_loss", self.val_loss(&hybrid)?);
        Ok(())
    }

    fn stage_align(&mut self, s: &mut StageSummary) -> Result<()> {
        let (student, sh) = self.load(Stage::Hybridize)?;
        let (teacher, th) = self.load(Stage::Finetune)?;
        s.inputs.insert("hybridize".into(), sh);
        s.inputs.insert("finetune".into(), th.clone());
        let plan = HybridPlan::new(teacher.depth(), self.cfg.hybrid.n_dual)?;
        let run = self.train_cfg(Stage::Align, &self.cfg.align);
        let (schedule, vs) = (self.schedule.clone(), self.cfg.eval.val_seed);
        let (train, val) = self.data()?;
        let gap = bridge_gap(&student, &teacher, plan.n_dual, &fixed_batches(val, &schedule, vs)?)?;
        let out = align_hybrid(&student, &teacher, train, val, &schedule, &plan, &run, vs)?;
        if model_hash(&teacher) != th {
            return Err(Error::invalid("teacher changed during alignment"));
        }
        self.save(Stage::Align, &out.model, s)?;
        self.save_curve(Stage::Align, &out.curve, s)?;
        s.metric("bridge_gap", gap);
        s.metric("layers", &out.layers);
        s.metric("initial_mse", &out.initial_mse);
        s.metric("final_mse", &out.final_mse);
        s.metric("val_loss", self.val_loss(&out.model)?);
        Ok(())
    }

    fn stage_finetune_lite(&mut self, s: &mut StageSummary) -> Result<()> {
        let (model, h) = self.load(Stage::Align)?;
        s.inputs.insert("align".into(), h);
        let run = self.train_cfg(Stage::FinetuneLite, &self.cfg.finetune_lite);
        let (schedule, vs) = (self.schedule.clone(), self.cfg.eval.val_seed);
        let (train, val) = self.data()?;
        let out = lightweight_finetune(&model, train, val, &schedule, &run, vs)?;
        self.save(Stage::FinetuneLite, &out.model, s)?;
        self.save_curve(Stage::FinetuneLite, &out.curve, s)?;
        s.metric("initial_val_loss", out.initial_val);
        s.metric("val_loss", out.best_val);
        s.metric("best_step", out.best_step);
        Ok(())
    }

    fn stage_eval(&mut self, s: &mut StageSummary) -> Result<()> {
        let (teacher, th) = self.load(Stage::Teacher)?;
        let models = [
            ("teacher", Stage::Teacher, true),
            ("pruned", Stage::Prune, false),
            ("student", Stage::Finetune, true),
            ("hybrid_init", Stage::Hybridize, false),
            ("hybrid", Stage::FinetuneLite, true),
        ];
        let (schedule, ec) = (self.schedule.clone(), self.cfg.eval.clone());
        let dir = self.stage_dir(Stage::Eval);
        let mut reports = Vec::new();
        for (name, stage, full) in models {
            let (model, h) = if stage == Stage::Teacher {
                (teacher.clone(), th.clone())
            } else {
                self.load(stage)?
            };
            s.inputs.insert(name.into(), h.clone());
            let start = Instant::now();
            let (_, val) = self.data()?;
            let prompt_match = if full && ec.prompt_match {
                let (prompts, images) = sample_all_prompts(&model, &schedule, ec.sample_steps, ec.sample_seed)?;
                write_ppm_mosaic(&dir.join(format!("samples-{name}.ppm")), &images, 15)?;
                Some(match_accuracy(&prompts, &images))
            } else {
                None
            };
            let report = EvalReport {
                model: name.into(),
                model_hash: h,
                layout: model.config.layout.describe(),
                val_loss: val_loss(&model, val, &schedule, ec.val_seed)?,
                teacher_gap: (stage != Stage::Teacher)
                    .then(|| teacher_gap(&model, &teacher, val, &schedule, ec.val_seed))
                    .transpose()?,
                prompt_match,
                ablation_delta: if full {
                    ablation_deltas(&model, val, &schedule, ec.val_seed)?
                } else {
                    Vec::new()
                },
                params: model.parameter_count(),
                wall_clock_s: start.elapsed().as_secs_f64(),
            };
            report.validate()?;
            s.metric(&format!("{name}.val_loss"), report.val_loss);
            s.metric(&format!("{name}.teacher_gap"), report.teacher_gap);
            s.metric(&format!("{name}.prompt_match"), report.prompt_match);
            reports.push(report);
        }
        s.outputs
            .insert("eval.json".into(), write_json(&dir.join("eval.json"), &reports)?);
        Ok(())
    }
}

/// Plan echo for a layer count without weights: all layers tie, so the tie
/// rule removes the highest-indexed unprotected layers.
pub fn plan_only(depth: usize, target_keep: usize) -> Result<PrunePlan> {
    if depth < 2 {
        return Err(Error::config("depth", ">= 2", depth));
    }
    let protected = BTreeSet::from([0, depth - 1]);
    let (keep, remove) = crate::importance::plan_only(depth, target_keep, &protected)?;
    PrunePlan::new(&keep, &remove, depth)
}

// ---- report -------------------------------------------------------------------

/// Reads every stage summary present under `root`.
pub fn read_summaries(root: &Path) -> Result<Vec<StageSummary>> {
    let found: Vec<StageSummary> = Stage::ALL
        .iter()
        .filter_map(|s| {
            let p = root.join(s.name()).join(SUMMARY_FILE);
            p.exists().then(|| read_json(&p, *s))
        })
        .collect::<Result<_>>()?;
    if found.is_empty() {
        return Err(Error::MissingArtifact {
            stage: Stage::Teacher.command().into(),
            path: root.join(Stage::Teacher.name()).join(SUMMARY_FILE),
        });
    }
    Ok(found)
}

/// `1 - child / parent`.
pub fn reduction(child: usize, parent: usize) -> f64 {
    1.0 - child as f64 / parent as f64
}

/// Backbone reduction of the full-scale layer schedule (60 layers, 30 kept,
/// then 10 dual + 20 single), at the given width.
pub fn reference_scale(width: &ModelConfig) -> Result<Vec<(String, ParamCount)>> {
    let at = |layout: StreamLayout| -> Result<ParamCount> {
        let cfg = width.clone().with_layout(layout);
        cfg.validate()?;
        Ok(ParamCount::for_config(&cfg))
    };
    Ok(vec![
        ("60 dual".into(), at(StreamLayout::all_dual(60))?),
        ("30 dual".into(), at(StreamLayout::all_dual(30))?),
        ("10 dual + 20 single".into(), at(StreamLayout::hybrid(10, 20))?),
    ])
}

fn params_of(s: &StageSummary) -> Option<ParamCount> {
    s.metrics
        .get("params")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

fn curve_span(root: &Path, stage: Stage) -> Option<(f64, f64, usize)> {
    let text = fs::read_to_string(root.join(stage.name()).join("curve.csv")).ok()?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next()?.split(',').collect();
    let col = header.iter().position(|h| *h == "loss" || *h == "total")?;
    let rows: Vec<(usize, f64)> = lines
        .filter_map(|l| {
            let cells: Vec<&str> = l.split(',').collect();
            Some((cells[0].parse().ok()?, cells.get(col)?.parse().ok()?))
        })
        .collect();
    Some((rows.first()?.1, rows.last()?.1, rows.last()?.0))
}

/// Consolidated Markdown and JSON over every completed stage. Output depends
/// only on the files under `root`.
pub fn stage_report(root: &Path) -> Result<(String, Value)> {
    use std::fmt::Write as _;
    let summaries = read_summaries(root)?;
    let get = |stage: Stage| summaries.iter().find(|s| s.stage == stage);
    let mut md = String::from("# Compression run report\n\n");
    let mut js = serde_json::Map::new();

    md.push_str("## Stages\n\n| stage | wall-clock (s) | outputs | inputs |\n|---|---:|---|---|\n");
    let mut total = 0.0;
    for s in &summaries {
        total += s.wall_clock_s;
        let short = |m: &BTreeMap<String, String>| {
            m.iter()
                .map(|(k, v)| format!("{k}:{}", &v[..v.len().min(12)]))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(
            md,
            "| {} | {:.1} | {} | {} |",
            s.stage.name(),
            s.wall_clock_s,
            short(&s.outputs),
            short(&s.inputs)
        );
    }
    let _ = writeln!(md, "| total | {total:.1} | | |\n");
    js.insert("stages".into(), serde_json::to_value(&summaries)?);

    let chain = [
        ("teacher", Stage::Teacher),
        ("pruned", Stage::Prune),
        ("hybrid", Stage::Hybridize),
    ];
    let counts: Vec<(&str, ParamCount)> = chain
        .iter()
        .filter_map(|(n, st)| get(*st).and_then(params_of).map(|p| (*n, p)))
        .collect();
    if !counts.is_empty() {
        md.push_str("## Parameters\n\n| model | total | backbone | total reduction vs parent | backbone reduction vs parent |\n|---|---:|---:|---:|---:|\n");
        let mut rows = Vec::new();
        for (i, (name, p)) in counts.iter().enumerate() {
            let parent = i.checked_sub(1).map(|j| &counts[j].1);
            let (rt, rb) = parent.map_or((None, None), |q| {
                (
                    Some(reduction(p.total, q.total)),
                    Some(reduction(p.backbone, q.backbone)),
                )
            });
            let _ = writeln!(
                md,
                "| {name} | {} | {} | {} | {} |",
                p.total,
                p.backbone,
                rt.map_or("-".into(), |r| format!("{r:.3}")),
                rb.map_or("-".into(), |r| format!("{r:.3}"))
            );
            rows.push(json!({"model": name, "params": p, "total_reduction": rt, "backbone_reduction": rb}));
        }
        js.insert("parameters".into(), Value::Array(rows));
        md.push('\n');
    }

    let width = load_width(root, &summaries);
    if let Some(width) = width {
        let scale = reference_scale(&width)?;
        md.push_str("## Full-scale layer schedule at this width\n\n| schedule | backbone | backbone reduction vs previous |\n|---|---:|---:|\n");
        for (i, (name, p)) in scale.iter().enumerate() {
            let r = i.checked_sub(1).map(|j| reduction(p.backbone, scale[j].1.backbone));
            let _ = writeln!(
                md,
                "| {name} | {} | {} |",
                p.backbone,
                r.map_or("-".into(), |r| format!("{r:.3}"))
            );
        }
        let toy = counts
            .iter()
            .find(|c| c.0 == "hybrid")
            .zip(counts.iter().find(|c| c.0 == "pruned"))
            .map(|(h, p)| reduction(h.1.backbone, p.1.backbone));
        let _ = writeln!(
            md,
            "\nHybrid conversion backbone reduction, this run: {}. Reference figure for the full-scale 10+20 hybrid: approximately 40%.\n",
            toy.map_or("-".into(), |r| format!("{:.1}%", r * 100.0))
        );
        js.insert(
            "reference_scale".into(),
            json!({
                "schedules": scale.iter().map(|(n, p)| json!({"schedule": n, "params": p})).collect::<Vec<_>>(),
                "toy_hybrid_backbone_reduction": toy,
                "reference_claim": "approximately 40%",
            }),
        );
    }

    if let Some(s) = get(Stage::Importance) {
        if let Some(scores) = s
            .metrics
            .get("scores")
            .and_then(|v| serde_json::from_value::<Vec<Option<f64>>>(v.clone()).ok())
        {
            md.push_str("## Layer importance\n\n```\n");
            let max = scores.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
            for (l, sc) in scores.iter().enumerate() {
                match sc {
                    Some(v) => {
                        let n = if max > 0.0 {
                            (v / max * 40.0).round() as usize
                        } else {
                            0
                        };
                        let _ = writeln!(md, "{l:>3} {:<40} {v:.5}", "#".repeat(n));
                    }
                    None => {
                        let _ = writeln!(md, "{l:>3} {:<40} protected", "");
                    }
                }
            }
            let _ = writeln!(
                md,
                "```\n\nSpearman correlation with single-layer ablation loss increase: {}\n",
                fmt_opt(s.get_f64("spearman"))
            );
            js.insert(
                "importance".into(),
                json!({"scores": scores, "spearman": s.get_f64("spearman")}),
            );
        }
    }

    md.push_str("## Validation loss along the chain\n\n| after stage | val loss |\n|---|---:|\n");
    let mut chain_js = Vec::new();
    for st in Stage::ALL
        .iter()
        .filter(|s| **s != Stage::Eval && **s != Stage::Importance)
    {
        if let Some(v) = get(*st).and_then(|s| s.get_f64("val_loss")) {
            let _ = writeln!(md, "| {} | {v:.4} |", st.name());
            chain_js.push(json!({"stage": st.name(), "val_loss": v}));
        }
    }
    js.insert("val_loss_chain".into(), Value::Array(chain_js));
    md.push('\n');

    let curves: Vec<(Stage, (f64, f64, usize))> = Stage::ALL
        .iter()
        .filter_map(|s| curve_span(root, *s).map(|c| (*s, c)))
        .collect();
    if !curves.is_empty() {
        md.push_str("## Training curves\n\n| stage | first logged loss | last logged loss | steps | file |\n|---|---:|---:|---:|---|\n");
        for (s, (a, b, n)) in &curves {
            let _ = writeln!(md, "| {} | {a:.5} | {b:.5} | {n} | {}/curve.csv |", s.name(), s.name());
        }
        md.push('\n');
    }

    let eval_path = root.join(Stage::Eval.name()).join("eval.json");
    if eval_path.exists() {
        let reports: Vec<EvalReport> = read_json(&eval_path, Stage::Eval)?;
        md.push_str("## Evaluation\n\n| model | layout | params | val loss | teacher gap | prompt match |\n|---|---|---:|---:|---:|---:|\n");
        for r in &reports {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {:.4} | {} | {} |",
                r.model,
                r.layout,
                r.params.total,
                r.val_loss,
                fmt_opt(r.teacher_gap),
                r.prompt_match.map_or("-".into(), |a| format!("{a:.3}"))
            );
        }
        md.push('\n');
        js.insert("eval".into(), serde_json::to_value(&reports)?);
    }
    Ok((md, Value::Object(js)))
}

fn load_width(root: &Path, summaries: &[StageSummary]) -> Option<ModelConfig> {
    summaries
        .iter()
        .find(|s| s.stage == Stage::Teacher)
        .and_then(|_| read_manifest(&root.join(Stage::Teacher.name()).join(CHECKPOINT_DIR)).ok())
        .map(|m| m.config)
}

/// Writes `report.md` and `report.json` at the output root.
pub fn write_report(root: &Path) -> Result<(PathBuf, PathBuf)> {
    let (md, js) = stage_report(root)?;
    let (mp, jp) = (root.join("report.md"), root.join("report.json"));
    write_text(&mp, &md)?;
    write_json(&jp, &js)?;
    Ok((mp, jp))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_name_nine_stages() {
        PipelineConfig::default().validate().unwrap();
        assert_eq!(Stage::ALL.len(), 9);
        assert_eq!(Stage::from_name("train-teacher"), Some(Stage::Teacher));
        assert_eq!(Stage::from_name("finetune-lite"), Some(Stage::FinetuneLite));
    }

    #[test]
    fn overrides_apply_and_bad_fields_are_named() {
        let cfg = load_config(None, &["prune.target_keep=4".into(), "model.depth=6".into()]).unwrap();
        assert_eq!(cfg.prune.target_keep, 4);
        assert_eq!(cfg.model.layout.len(), 6);
        assert_eq!(cfg.protected(), BTreeSet::from([0, 5]));
        match load_config(None, &["prune.target_keep=13".into()]) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "prune.target_keep"),
            other => panic!("{:?}", other.map(|_| ())),
        }
        assert!(matches!(
            load_config(None, &["prune.nonsense=1".into()]),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            load_config(None, &["hybrid.n_dual=0".into()]),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn plan_only_echo_at_sixty_layers() {
        let plan = plan_only(60, 30).unwrap();
        assert_eq!(plan.remove.len(), 30);
        assert!(plan.remove.iter().all(|&l| (1..=58).contains(&l)));
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(RunLock::acquire(dir.path()), Err(Error::Locked(_))));
        drop(a);
        RunLock::acquire(dir.path()).unwrap();
    }
}
