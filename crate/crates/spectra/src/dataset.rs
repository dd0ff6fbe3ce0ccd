//! On-disk corpus: one raster plus sidecar per record and a JSON-lines
//! manifest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spectra_core::rng::fnv1a64;
use spectra_core::synthgeo::{class_id, corpus, CorpusConfig, Modality, Split, CLASSES};
use spectra_core::towers::MultimodalImage;

use crate::config::{parse_modality, ModalityFilter};
use crate::error::{self, Error, Result};
use crate::formats::{load_raster, save_raster, Raster};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const IMAGE_DIR: &str = "images";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Raster path relative to the manifest's directory.
    pub path: String,
    pub modality: String,
    pub caption: String,
    pub labels: Vec<String>,
    pub dominant: String,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// A manifest entry with its raster loaded and names resolved.
#[derive(Debug, Clone)]
pub struct Record {
    pub entry: ManifestEntry,
    pub modality: Modality,
    pub image: MultimodalImage,
    pub labels: Vec<usize>,
    pub dominant: usize,
    pub split: Split,
}

fn class_of(name: &str, path: &Path) -> Result<usize> {
    class_id(name).ok_or_else(|| Error::config(format!("{}: unknown class '{name}'", path.display())))
}

impl Manifest {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entries always serialize"));
            out.push('\n');
        }
        out
    }

    /// `path` is either the manifest file or its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = error::read_string(&file)?;
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::json(&file, e)))
            .collect::<Result<Vec<ManifestEntry>>>()?;
        let dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Manifest { dir, entries })
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_jsonl().as_bytes())
    }

    /// Loads every entry in `split` (all splits when `None`) that passes
    /// `filter`, in manifest order.
    pub fn records(&self, split: Option<Split>, filter: &ModalityFilter) -> Result<Vec<Record>> {
        let mut out = Vec::new();
        for e in &self.entries {
            let path = self.dir.join(&e.path);
            let modality = parse_modality(&e.modality, "manifest modality")?;
            let s = Split::from_name(&e.split)?;
            if split.is_some_and(|want| want != s) || !filter.keeps(modality) {
                continue;
            }
            let raster = load_raster(&path)?;
            if raster.lambdas != modality.lambdas() {
                return Err(Error::config(format!(
                    "{}: wavelengths do not match modality {}",
                    path.display(),
                    e.modality
                )));
            }
            out.push(Record {
                image: raster.to_image(modality.name())?,
                labels: e.labels.iter().map(|l| class_of(l, &path)).collect::<Result<_>>()?,
                dominant: class_of(&e.dominant, &path)?,
                modality,
                split: s,
                entry: e.clone(),
            });
        }
        Ok(out)
    }
}

/// Renders the corpus under `out` and writes the manifest.
pub fn generate(cfg: &CorpusConfig, out: &Path) -> Result<Manifest> {
    let mut entries = Vec::new();
    for rec in corpus(cfg)? {
        let rel = format!("{IMAGE_DIR}/{}.sgeo", rec.stem());
        let img = rec.render()?;
        save_raster(&Raster::from_image(&img), rec.modality.name(), &out.join(&rel))?;
        entries.push(ManifestEntry {
            path: rel,
            modality: rec.modality.name().into(),
            caption: rec.caption.clone(),
            labels: rec.labels.iter().map(|&k| CLASSES[k].to_string()).collect(),
            dominant: CLASSES[rec.dominant].into(),
            split: rec.split.name().into(),
        });
    }
    let manifest = Manifest { dir: out.to_path_buf(), entries };
    error::write(&out.join(MANIFEST_FILE), manifest.to_jsonl())?;
    Ok(manifest)
}
