//! Training and evaluation over a loaded manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};
use spectra_core::checkpoint::{quantize, Checkpoint, CheckpointMeta};
use spectra_core::evalkit::{
    macro_prf, multilabel_predictions, recall_from_similarities, similarity_matrix, zero_shot_from_similarities,
    ClassPromptSet, MetricReport,
};
use spectra_core::model::{Sample, Student};
use spectra_core::numerics::ParameterStore;
use spectra_core::synthgeo::{Split, CLASSES};
use spectra_core::teachers::{rgb_extract, TeacherSet};
use spectra_core::trainer::{train, AdamState, StepLog, TrainConfig};

use crate::config::{EvalTask, ModalityFilter, RunConfig};
use crate::dataset::{Manifest, Record};
use crate::error::{self, Error, Result};
use crate::formats::{save_raster, Raster};

/// A student with its parameters and the teachers it distills from.
pub struct Model {
    pub student: Student,
    pub store: ParameterStore,
    pub teachers: TeacherSet,
}

impl Model {
    /// Fresh initialization from the config seed.
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        let size = (cfg.data.size, cfg.data.size);
        let teachers = TeacherSet::new(size, Some(cfg.teachers.seeds))?;
        let (student, store) = Student::init(cfg.model_config(), &teachers.targets(), cfg.seed)?;
        Ok(Model { student, store, teachers })
    }

    /// Architecture from `cfg`, parameters from `ckpt`.
    pub fn from_checkpoint(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut m = Model::init(cfg)?;
        ckpt.load_into(&mut m.store)?;
        Ok(m)
    }

    pub fn checkpoint(&self, cfg: &RunConfig, step: u64) -> Checkpoint {
        Checkpoint::from_store(&self.store, CheckpointMeta { config_hash: cfg.hash(), step })
    }
}

/// Training pairs with features from every enabled teacher.
pub fn samples(records: &[Record], teachers: &TeacherSet, enabled: [bool; 3]) -> Result<Vec<Sample>> {
    records
        .iter()
        .map(|r| {
            let mut s = Sample::new(r.image.clone(), &r.entry.caption)?;
            if enabled.iter().any(|&e| e) {
                let view = rgb_extract(&r.image);
                for ((slot, t), on) in s.teacher.iter_mut().zip(&teachers.teachers).zip(enabled) {
                    if on {
                        *slot = Some(t.forward(&view)?);
                    }
                }
            }
            Ok(s)
        })
        .collect()
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub logs: Vec<StepLog>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions<'a> {
    /// Starting parameters.
    pub init: Option<&'a Checkpoint>,
    /// Carry over the optimizer state and step count of `init` as well.
    pub resume: bool,
    /// Emit an intermediate checkpoint at every global step that is a
    /// multiple of this.
    pub save_every: Option<usize>,
}

/// Trains on the train split of `manifest` and returns a checkpoint with
/// optimizer state.
///
/// Every emitted checkpoint holds exactly the state training continues
/// from: parameters are rounded to their stored f32 values at each save, so
/// resuming from an intermediate checkpoint with the same `save_every`
/// reproduces the rest of the run.
pub fn train_on_manifest(
    cfg: &RunConfig,
    manifest: &Manifest,
    opts: TrainOptions<'_>,
    mut on_save: impl FnMut(&Checkpoint) -> Result<()>,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    let filter = ModalityFilter::parse(&cfg.train.modality_filter, "train.modality_filter")?;
    let records = manifest.records(Some(Split::Train), &filter)?;
    if records.is_empty() {
        return Err(Error::config(format!(
            "no training records left after train.modality_filter = '{}'",
            cfg.train.modality_filter
        )));
    }
    if opts.save_every == Some(0) {
        return Err(Error::config("save_every must be ≥ 1"));
    }
    let mut model = Model::init(cfg)?;
    let mut tc = cfg.train_config()?;
    let mut state = AdamState::new(&model.store);
    if let Some(c) = opts.init {
        c.load_into(&mut model.store)?;
        if opts.resume {
            let opt = c
                .optimizer
                .as_ref()
                .ok_or_else(|| Error::config("resuming needs a checkpoint with optimizer state"))?;
            state = AdamState::import(&model.store, opt)?;
            tc.start_step = c.meta.step as usize;
        }
    }
    let data = samples(&records, &model.teachers, cfg.teacher_enabled()?)?;
    let end = tc.end_step(data.len());
    let mut logs = Vec::with_capacity(end.saturating_sub(tc.start_step));
    let mut step = tc.start_step;
    let snapshot = |model: &mut Model, state: &AdamState, step: usize| {
        quantize(&mut model.store);
        let mut c = model.checkpoint(cfg, step as u64);
        c.optimizer = Some(state.export(&model.store));
        c
    };
    loop {
        let next = opts.save_every.map_or(end, |k| (step / k + 1) * k);
        let n = next.min(end).saturating_sub(step);
        let seg = TrainConfig { start_step: step, steps: Some(n), ..tc.clone() };
        logs.extend(train(&model.student, &mut model.store, &data, &seg, &mut state, &mut on_step)?);
        step += n;
        if step >= end {
            break;
        }
        on_save(&snapshot(&mut model, &state, step))?;
    }
    let checkpoint = snapshot(&mut model, &state, step);
    Ok(TrainOutcome { checkpoint, logs })
}

pub const STEP_LOG_HEADER: &str = "step,l_siglip,l_m_siglip,l_m_dinov2,l_m_vit,total";

/// One CSV row per step; a teacher that did not run leaves its cell empty.
pub fn step_log_csv(logs: &[StepLog]) -> String {
    let mut out = String::from(STEP_LOG_HEADER);
    out.push('\n');
    for l in logs {
        out.push_str(&format!("{},{}", l.step, l.report.l_siglip));
        for m in &l.report.matches {
            out.push(',');
            if let Some(m) = m {
                out.push_str(&m.total().to_string());
            }
        }
        out.push_str(&format!(",{}\n", l.report.total));
    }
    out
}

/// Per-class prompt embeddings averaged over templates.
pub fn class_prompts(model: &Model, templates: &[String]) -> Result<ClassPromptSet> {
    let mut embeds = Vec::with_capacity(CLASSES.len());
    for class in CLASSES {
        let mut acc = vec![0.0; model.student.cfg.embed_dim];
        for t in templates {
            let e = model.student.encode_text(&model.store, &spectra_core::evalkit::prompt(t, class))?;
            acc.iter_mut().zip(&e).for_each(|(a, v)| *a += v);
        }
        let n = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        embeds.push(acc.into_iter().map(|v| v / n).collect());
    }
    Ok(ClassPromptSet::new(
        CLASSES.iter().map(|s| s.to_string()).collect(),
        &templates.join(" | "),
        embeds,
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub task: String,
    pub dataset: String,
    pub metrics: serde_json::Map<String, serde_json::Value>,
    pub model_checkpoint_hash: String,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).and_then(serde_json::Value::as_f64)
    }

    /// Metrics in report order.
    pub fn entries(&self) -> Vec<(String, f64)> {
        self.metrics
            .iter()
            .filter_map(|(k, v)| v.as_f64().map(|x| (k.clone(), x)))
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize") + "\n"
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&error::read_string(path)?).map_err(|e| Error::json(path, e))
    }
}

pub fn checkpoint_hash(ckpt: &Checkpoint) -> String {
    format!("{:016x}", ckpt.checksum())
}

/// Rounds through f32, the precision of similarity dumps, so reported
/// metrics are exactly reproducible from a dump.
fn as_dumped(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| f64::from(x as f32)).collect()
}

/// Evaluation inputs resolved from the `[eval]` section.
pub struct EvalSet {
    pub name: String,
    pub records: Vec<Record>,
}

impl EvalSet {
    pub fn load(cfg: &RunConfig, manifest_path: &Path) -> Result<Self> {
        let manifest = Manifest::load(manifest_path)?;
        let split = Split::from_name(&cfg.eval.split)?;
        let filter = ModalityFilter::parse(&cfg.eval.modality_filter, "eval.modality_filter")?;
        let records = manifest.records(Some(split), &filter)?;
        if records.is_empty() {
            return Err(Error::config(format!(
                "{}: no records in split '{}' with modality filter '{}'",
                manifest_path.display(),
                cfg.eval.split,
                cfg.eval.modality_filter
            )));
        }
        Ok(EvalSet {
            name: format!("{}[split={},modality={}]", manifest_path.display(), cfg.eval.split, cfg.eval.modality_filter),
            records,
        })
    }
}

/// Runs `task` and optionally writes each similarity matrix under `dump`
/// (`zero_shot.sgeo`, `retrieval.sgeo`; single channel, rows are images).
pub fn evaluate(
    cfg: &RunConfig,
    model: &Model,
    set: &EvalSet,
    task: EvalTask,
    dump: Option<&Path>,
) -> Result<MetricReport> {
    let imgs: Vec<_> = set.records.iter().map(|r| &r.image).collect();
    let image_embeds = model.student.encode_images(&model.store, &imgs)?;
    let n = set.records.len();
    let mut report = MetricReport::default();
    let classify = matches!(task, EvalTask::ZeroShot | EvalTask::Multilabel | EvalTask::All);
    if classify {
        let prompts = class_prompts(model, &cfg.eval.templates)?;
        let k = prompts.len();
        let sims = as_dumped(similarity_matrix(&image_embeds, &prompts.embeddings));
        if let Some(dir) = dump {
            save_raster(&Raster::matrix(n, k, &sims), "similarity", &dir.join("zero_shot.sgeo"))?;
        }
        if matches!(task, EvalTask::ZeroShot | EvalTask::All) {
            let labels: Vec<usize> = set.records.iter().map(|r| r.dominant).collect();
            let z = zero_shot_from_similarities(&sims, k, &labels)?;
            report.top1 = Some(z.top1);
            report.top5 = Some(z.top5);
        }
        if matches!(task, EvalTask::Multilabel | EvalTask::All) {
            let mut truth = vec![false; n * k];
            for (i, r) in set.records.iter().enumerate() {
                for &l in &r.labels {
                    truth[i * k + l] = true;
                }
            }
            let pred = multilabel_predictions(&sims, model.student.contrastive(&model.store));
            report.multilabel = Some(macro_prf(&pred, &truth, k)?);
        }
    }
    if matches!(task, EvalTask::Retrieval | EvalTask::All) {
        let text_embeds = set
            .records
            .iter()
            .map(|r| model.student.encode_text(&model.store, &r.entry.caption))
            .collect::<spectra_core::Result<Vec<_>>>()?;
        let sims = as_dumped(similarity_matrix(&image_embeds, &text_embeds));
        if let Some(dir) = dump {
            save_raster(&Raster::matrix(n, n, &sims), "similarity", &dir.join("retrieval.sgeo"))?;
        }
        report.recall = recall_from_similarities(&sims, n, &cfg.eval.ks)?.recalls;
    }
    Ok(report)
}

pub fn eval_report(task: EvalTask, set: &EvalSet, metrics: &MetricReport, ckpt: &Checkpoint) -> EvalReport {
    let mut map = serde_json::Map::new();
    for (k, v) in metrics.entries() {
        map.insert(k, serde_json::json!(v));
    }
    EvalReport {
        task: task.name().into(),
        dataset: set.name.clone(),
        metrics: map,
        model_checkpoint_hash: checkpoint_hash(ckpt),
    }
}
