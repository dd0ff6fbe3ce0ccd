//! TOML run configuration. Every key is optional; unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};
use spectra_core::evalkit::{DEFAULT_KS, DEFAULT_TEMPLATE};
use spectra_core::hypernet::HypernetConfig;
use spectra_core::losses::LossWeights;
use spectra_core::maka::MakaConfig;
use spectra_core::merge::DEFAULT_GRID;
use spectra_core::model::ModelConfig;
use spectra_core::rng::fnv1a64;
use spectra_core::synthgeo::{CorpusConfig, Modality, Split};
use spectra_core::teachers::TeacherKind;
use spectra_core::towers::{TextConfig, VisionConfig};
use spectra_core::trainer::TrainConfig;

use crate::error::{self, Error, Result};

pub const SEED_ENV: &str = "SPECTRA_SEED";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of every named random stream.
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub losses: LossSection,
    pub teachers: TeacherSection,
    pub merge: MergeSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub scenes: usize,
    pub modalities: Vec<String>,
    pub train_fraction: f64,
    /// Square image side in pixels.
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub patch: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub text_width: usize,
    pub text_depth: usize,
    pub text_heads: usize,
    pub embed_dim: usize,
    pub d_lambda: usize,
    pub hypernet_heads: usize,
    pub hypernet_depth: usize,
    pub weight_queries: usize,
    pub pe_scale: f64,
    pub pe_temperature: f64,
    pub prompt_per_teacher: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    /// `all`, `others` (everything but rgb) or a comma list of modalities.
    pub modality_filter: String,
    pub log_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub alpha_s: f64,
    pub alpha_d: f64,
    pub alpha_v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSection {
    pub enabled: Vec<String>,
    pub seeds: [u64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeSection {
    pub m1: f64,
    pub m2: f64,
    pub grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<String>,
    /// `zero-shot`, `multilabel`, `retrieval` or `all`.
    pub task: String,
    pub split: String,
    pub modality_filter: String,
    /// Class prompt embeddings average over these templates.
    pub templates: Vec<String>,
    pub ks: Vec<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        let c = CorpusConfig::default();
        DataSection {
            scenes: c.scenes,
            modalities: c.modalities.iter().map(|m| m.name().to_string()).collect(),
            train_fraction: c.train_fraction,
            size: c.size.0,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            patch: m.vision.patch,
            width: m.vision.width,
            depth: m.vision.depth,
            heads: m.vision.heads,
            text_width: m.text.width,
            text_depth: m.text.depth,
            text_heads: m.text.heads,
            embed_dim: m.embed_dim,
            d_lambda: m.hypernet.d_lambda,
            hypernet_heads: m.hypernet.heads,
            hypernet_depth: m.hypernet.depth,
            weight_queries: m.hypernet.weight_queries,
            pe_scale: m.hypernet.pe_scale,
            pe_temperature: m.hypernet.pe_temperature,
            prompt_per_teacher: m.maka.prompt_per_teacher,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lr: t.lr,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            batch_size: t.batch_size,
            steps: None,
            grad_clip: None,
            modality_filter: "all".into(),
            log_every: 10,
        }
    }
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        LossSection { alpha_s: w.alpha_s, alpha_d: w.alpha_d, alpha_v: w.alpha_v }
    }
}

impl Default for TeacherSection {
    fn default() -> Self {
        TeacherSection {
            enabled: TeacherKind::ALL.iter().map(|k| k.name().to_string()).collect(),
            seeds: TeacherKind::ALL.map(|k| k.default_seed()),
        }
    }
}

impl Default for MergeSection {
    fn default() -> Self {
        MergeSection { m1: 0.9, m2: 0.5, grid: DEFAULT_GRID.to_vec() }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            manifest: None,
            task: "zero-shot".into(),
            split: "eval".into(),
            modality_filter: "all".into(),
            templates: vec![DEFAULT_TEMPLATE.into()],
            ks: DEFAULT_KS.to_vec(),
        }
    }
}

/// Which modalities a command keeps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModalityFilter {
    All,
    /// Everything except rgb.
    Others,
    Only(Vec<Modality>),
}

impl ModalityFilter {
    /// Parses `all`, `others` or a comma list; `key` names the setting in
    /// error messages.
    pub fn parse(s: &str, key: &str) -> Result<Self> {
        match s.trim() {
            "all" | "" => Ok(ModalityFilter::All),
            "others" => Ok(ModalityFilter::Others),
            list => list
                .split(',')
                .map(|n| parse_modality(n.trim(), key))
                .collect::<Result<Vec<_>>>()
                .map(ModalityFilter::Only),
        }
    }

    pub fn keeps(&self, m: Modality) -> bool {
        match self {
            ModalityFilter::All => true,
            ModalityFilter::Others => m != Modality::Rgb,
            ModalityFilter::Only(list) => list.contains(&m),
        }
    }
}

pub fn parse_modality(name: &str, key: &str) -> Result<Modality> {
    Modality::from_name(name).map_err(|_| {
        let known: Vec<&str> = Modality::ALL.iter().map(|m| m.name()).collect();
        Error::config(format!("{key}: unknown modality '{name}' (known: {})", known.join(", ")))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalTask {
    ZeroShot,
    Multilabel,
    Retrieval,
    All,
}

impl EvalTask {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zero-shot" => Ok(EvalTask::ZeroShot),
            "multilabel" => Ok(EvalTask::Multilabel),
            "retrieval" => Ok(EvalTask::Retrieval),
            "all" => Ok(EvalTask::All),
            other => Err(Error::config(format!(
                "eval.task: unknown task '{other}' (known: zero-shot, multilabel, retrieval, all)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EvalTask::ZeroShot => "zero-shot",
            EvalTask::Multilabel => "multilabel",
            EvalTask::Retrieval => "retrieval",
            EvalTask::All => "all",
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Reads `path` (or starts from defaults when `None`), applies the seed
    /// override from the environment and validates.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => RunConfig::from_toml(&error::read_string(p)?)
                .map_err(|e| Error::Toml { path: p.to_path_buf(), source: Box::new(e) })?,
            None => RunConfig::default(),
        };
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{SEED_ENV}: '{v}' is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration always serializes")
    }

    /// FNV-1a of the canonical TOML form.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.modalities()?;
        self.teacher_enabled()?;
        ModalityFilter::parse(&self.train.modality_filter, "train.modality_filter")?;
        ModalityFilter::parse(&self.eval.modality_filter, "eval.modality_filter")?;
        EvalTask::parse(&self.eval.task)?;
        Split::from_name(&self.eval.split).map_err(|_| Error::config(format!("eval.split: unknown split '{}'", self.eval.split)))?;
        if self.eval.templates.is_empty() || self.eval.templates.iter().any(|t| !t.contains("{class}")) {
            return Err(Error::config("eval.templates: need at least one template, each containing {class}"));
        }
        self.train_config()?.validate()?;
        LossWeights::new(self.losses.alpha_s, self.losses.alpha_d, self.losses.alpha_v)?;
        for (key, m) in [("merge.m1", self.merge.m1), ("merge.m2", self.merge.m2)] {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::config(format!("{key}: {m} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn modalities(&self) -> Result<Vec<Modality>> {
        if self.data.modalities.is_empty() {
            return Err(Error::config("data.modalities: list is empty"));
        }
        self.data.modalities.iter().map(|n| parse_modality(n, "data.modalities")).collect()
    }

    pub fn corpus_config(&self) -> Result<CorpusConfig> {
        Ok(CorpusConfig {
            scenes: self.data.scenes,
            modalities: self.modalities()?,
            train_fraction: self.data.train_fraction,
            seed: self.seed,
            size: (self.data.size, self.data.size),
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            vision: VisionConfig {
                image_size: (self.data.size, self.data.size),
                patch: m.patch,
                width: m.width,
                depth: m.depth,
                heads: m.heads,
            },
            text: TextConfig { width: m.text_width, depth: m.text_depth, heads: m.text_heads },
            hypernet: HypernetConfig {
                d_lambda: m.d_lambda,
                heads: m.hypernet_heads,
                depth: m.hypernet_depth,
                weight_queries: m.weight_queries,
                pe_scale: m.pe_scale,
                pe_temperature: m.pe_temperature,
            },
            maka: MakaConfig { d_lambda: m.d_lambda, prompt_per_teacher: m.prompt_per_teacher },
            embed_dim: m.embed_dim,
        }
    }

    pub fn teacher_enabled(&self) -> Result<[bool; 3]> {
        let mut on = [false; 3];
        for name in &self.teachers.enabled {
            let k = TeacherKind::from_name(name)
                .ok_or_else(|| Error::config(format!("teachers.enabled: unknown teacher '{name}'")))?;
            on[TeacherKind::ALL.iter().position(|t| *t == k).expect("listed")] = true;
        }
        Ok(on)
    }

    /// Loss weights with disabled teachers forced to zero.
    pub fn loss_weights(&self) -> Result<LossWeights> {
        let on = self.teacher_enabled()?;
        let a = [self.losses.alpha_s, self.losses.alpha_d, self.losses.alpha_v];
        let a: Vec<f64> = a.iter().zip(on).map(|(x, e)| if e { *x } else { 0.0 }).collect();
        Ok(LossWeights::new(a[0], a[1], a[2])?)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            lr: t.lr,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            batch_size: t.batch_size,
            steps: t.steps,
            start_step: 0,
            seed: self.seed,
            weights: self.loss_weights()?,
            grad_clip: t.grad_clip,
        })
    }
}

/// Defaults as TOML, for `--help`.
pub fn defaults_help() -> String {
    let mut out = String::from("CONFIG DEFAULTS (TOML; every key optional, unknown keys rejected):\n\n");
    for line in RunConfig::default().to_toml().lines() {
        if !line.is_empty() {
            out.push_str("  ");
            out.push_str(line);
        }
        out.push('\n');
    }
    out.push_str(
        "\n  Unset by default:\n    \
         train.steps      stop after this many steps instead of `epochs` passes\n    \
         train.grad_clip  global gradient-norm clip\n    \
         eval.manifest    manifest for `eval` and `merge-search` when not given\n\n\
         ENVIRONMENT:\n  SPECTRA_SEED overrides `seed`.\n",
    );
    out
}
