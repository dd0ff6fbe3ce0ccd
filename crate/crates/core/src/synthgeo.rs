//! Deterministic synthetic Earth-observation scenes.
//!
//! A scene is a Voronoi partition of the image into land-cover classes. Each
//! class has a smooth reflectance curve over `ln λ` (two Gaussian bumps on a
//! floor) and a base elevation, so every modality can be rendered from the
//! same class map. Captions are filled templates over statistics computed
//! from that map.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::hypernet::{default_wavelengths, WavelengthSpec, RADAR_WAVELENGTHS};
use crate::math::{exp, log, sin};
use crate::numerics::Tensor;
use crate::rng::{normal, stream, Rng, SliceRandom};
use crate::towers::MultimodalImage;
use crate::{Error, Result};

pub const CLASSES: [&str; 8] = [
    "water",
    "forest",
    "buildings",
    "crops",
    "bare soil",
    "road",
    "grassland",
    "snow",
];

pub const NUM_CLASSES: usize = CLASSES.len();
pub const WATER: usize = 0;

pub fn class_id(name: &str) -> Option<usize> {
    CLASSES.iter().position(|c| *c == name)
}

/// `(floor, [(amplitude, centre in ln μm, width in ln μm); 2])`, with
/// `floor + Σ amplitude ≤ 1` so the curve stays in `[0, 1]`.
type Signature = (f64, [(f64, f64, f64); 2]);

const SIGNATURES: [Signature; NUM_CLASSES] = [
    (0.03, [(0.22, -0.80, 0.25), (0.05, 4.60, 0.50)]),
    (0.06, [(0.12, -0.58, 0.10), (0.55, -0.05, 0.30)]),
    (0.30, [(0.25, -0.40, 0.80), (0.40, 4.60, 0.50)]),
    (0.10, [(0.28, -0.50, 0.15), (0.45, 0.05, 0.25)]),
    (0.18, [(0.50, 0.60, 0.60), (0.20, 4.60, 0.50)]),
    (0.28, [(0.18, -0.30, 1.00), (0.25, 2.40, 0.50)]),
    (0.08, [(0.30, -0.45, 0.30), (0.35, 0.30, 0.40)]),
    (0.05, [(0.85, -0.45, 0.45), (0.05, 2.40, 0.40)]),
];

/// Normalized base heights in `[0, 1]`.
const BASE_ELEVATION: [f64; NUM_CLASSES] = [0.05, 0.50, 0.35, 0.25, 0.45, 0.30, 0.40, 0.90];

/// Metres per unit of normalized elevation, for captions.
pub const ELEVATION_SCALE_M: f64 = 1000.0;

/// Reflectance of class `k` at wavelength `lambda` (μm).
pub fn signature(k: usize, lambda: f64) -> f64 {
    let (floor, bumps) = SIGNATURES[k];
    let x = log(lambda);
    let v = bumps.iter().fold(floor, |acc, (a, mu, s)| {
        let z = (x - mu) / s;
        acc + a * exp(-0.5 * z * z)
    });
    v.clamp(0.0, 1.0)
}

pub fn base_elevation(k: usize) -> f64 {
    BASE_ELEVATION[k]
}

const MSI12: [f64; 12] = [
    0.443, 0.490, 0.560, 0.665, 0.705, 0.740, 0.783, 0.842, 0.865, 0.945, 1.610, 2.190,
];
const THERMAL_IR: f64 = 10.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Rgb,
    Msi12,
    Sar2,
    Hyper32,
    Elevation1,
    Ir1,
}

impl Modality {
    pub const ALL: [Modality; 6] = [
        Modality::Rgb,
        Modality::Msi12,
        Modality::Sar2,
        Modality::Hyper32,
        Modality::Elevation1,
        Modality::Ir1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Msi12 => "msi12",
            Modality::Sar2 => "sar2",
            Modality::Hyper32 => "hyper32",
            Modality::Elevation1 => "elevation1",
            Modality::Ir1 => "ir1",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::config(format!("unknown modality '{name}'")))
    }

    pub fn lambdas(self) -> Vec<f64> {
        match self {
            Modality::Rgb => default_wavelengths(3),
            Modality::Msi12 => MSI12.to_vec(),
            Modality::Sar2 => RADAR_WAVELENGTHS.to_vec(),
            Modality::Hyper32 => (0..32).map(|i| 0.4 + 2.1 * i as f64 / 31.0).collect(),
            Modality::Elevation1 => default_wavelengths(1),
            Modality::Ir1 => vec![THERMAL_IR],
        }
    }

    pub fn spec(self) -> WavelengthSpec {
        WavelengthSpec::new(self.name(), self.lambdas()).expect("built-in wavelengths are positive")
    }

    pub fn channels(self) -> usize {
        self.lambdas().len()
    }

    /// Per-pixel Gaussian noise σ.
    pub fn noise(self) -> f64 {
        match self {
            Modality::Sar2 => 0.05,
            Modality::Elevation1 => 0.0,
            _ => 0.02,
        }
    }

    pub fn caption_kind(self) -> CaptionKind {
        match self {
            Modality::Rgb | Modality::Msi12 | Modality::Hyper32 => CaptionKind::Landcover,
            Modality::Sar2 => CaptionKind::Flood,
            Modality::Elevation1 => CaptionKind::Elevation,
            Modality::Ir1 => CaptionKind::Object,
        }
    }
}

/// Per-pixel class ids, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl ClassMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width || data.is_empty() {
            return Err(Error::shape(format!("class mask {height}×{width} with {} values", data.len())));
        }
        if let Some(v) = data.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::config(format!("class id {v} out of range")));
        }
        Ok(ClassMask { height, width, data })
    }

    pub fn uniform(height: usize, width: usize, class: usize) -> Self {
        ClassMask {
            height,
            width,
            data: vec![class as u8; height * width],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub size: (usize, usize),
    /// Voronoi sites as `(row, col, class)`.
    pub sites: Vec<(f64, f64, usize)>,
}

pub const SITES_PER_SCENE: usize = 5;
const DOMINANT_SITES: usize = 3;

impl SceneSpec {
    /// Five Voronoi sites, three of them carrying `dominant`.
    pub fn generate(seed: u64, size: (usize, usize), dominant: usize) -> Result<Self> {
        if dominant >= NUM_CLASSES || size.0 == 0 || size.1 == 0 {
            return Err(Error::config(format!("invalid scene: class {dominant}, size {size:?}")));
        }
        let mut rng = stream(seed, "scene/sites");
        let sites = (0..SITES_PER_SCENE)
            .map(|i| {
                let class = if i < DOMINANT_SITES {
                    dominant
                } else {
                    (dominant + rng.random_range(1..NUM_CLASSES)) % NUM_CLASSES
                };
                let r = rng.random::<f64>() * size.0 as f64;
                let c = rng.random::<f64>() * size.1 as f64;
                (r, c, class)
            })
            .collect();
        Ok(SceneSpec { seed, size, sites })
    }

    /// A scene covered by one class.
    pub fn single_class(seed: u64, size: (usize, usize), class: usize) -> Self {
        SceneSpec {
            seed,
            size,
            sites: vec![(0.0, 0.0, class)],
        }
    }

    /// Index of the nearest site to each pixel centre; ties go to the lower
    /// site index.
    pub fn site_map(&self) -> Vec<usize> {
        let (h, w) = self.size;
        let mut out = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (i, (sy, sx, _)) in self.sites.iter().enumerate() {
                    let d = (y - sy) * (y - sy) + (x - sx) * (x - sx);
                    if d < best_d {
                        best_d = d;
                        best = i;
                    }
                }
                out.push(best);
            }
        }
        out
    }

    pub fn class_mask(&self) -> ClassMask {
        let data = self.site_map().into_iter().map(|s| self.sites[s].2 as u8).collect();
        ClassMask {
            height: self.size.0,
            width: self.size.1,
            data,
        }
    }

    /// Normalized heights: per-class base plus a smooth low-frequency field.
    pub fn elevation(&self, mask: &ClassMask) -> Vec<f64> {
        let mut rng = stream(self.seed, "scene/elevation");
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    0.5 + 2.5 * rng.random::<f64>(),
                    0.5 + 2.5 * rng.random::<f64>(),
                    core::f64::consts::TAU * rng.random::<f64>(),
                    0.03 * rng.random::<f64>(),
                )
            })
            .collect();
        let (h, w) = self.size;
        mask.data
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let (y, x) = ((i / w) as f64 / h as f64, (i % w) as f64 / w as f64);
                let smooth: f64 = waves
                    .iter()
                    .map(|(fy, fx, ph, a)| a * sin(core::f64::consts::TAU * (fy * y + fx * x) + ph))
                    .sum();
                (base_elevation(k as usize) + smooth).clamp(0.0, 1.0)
            })
            .collect()
    }
}

/// `s_k(λ_c) + σ·N(0,1)` clamped to `[0, 1]`; elevation renders heights.
pub fn render(scene: &SceneSpec, modality: Modality) -> Result<MultimodalImage> {
    render_with_noise(scene, modality, modality.noise())
}

pub fn render_with_noise(scene: &SceneSpec, modality: Modality, sigma: f64) -> Result<MultimodalImage> {
    let spec = modality.spec();
    let mask = scene.class_mask();
    let (h, w) = scene.size;
    let plane = h * w;
    let mut rng = stream(scene.seed, &format!("render/{}", modality.name()));
    let mut data = Vec::with_capacity(spec.channels() * plane);
    if modality == Modality::Elevation1 {
        data.extend(scene.elevation(&mask));
    } else {
        for &lambda in spec.lambdas() {
            let per_class: Vec<f64> = (0..NUM_CLASSES).map(|k| signature(k, lambda)).collect();
            data.extend(mask.data.iter().map(|&k| per_class[k as usize]));
        }
    }
    if sigma > 0.0 {
        for v in data.iter_mut() {
            *v = (*v + sigma * normal(&mut rng)).clamp(0.0, 1.0);
        }
    }
    MultimodalImage::new(Tensor::new(vec![spec.channels(), h, w], data)?, spec)
}

/// Classes present in `mask` with `100·count/(H·W)`, in class-id order.
pub fn class_percentages(mask: &ClassMask) -> Vec<(usize, f64)> {
    let mut counts = [0usize; NUM_CLASSES];
    for &v in &mask.data {
        counts[v as usize] += 1;
    }
    let total = mask.data.len() as f64;
    counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(k, &c)| (k, 100.0 * c as f64 / total))
        .collect()
}

/// Class with the largest pixel share; ties go to the lower id.
pub fn dominant_class(mask: &ClassMask) -> usize {
    let p = class_percentages(mask);
    let mut best = p[0];
    for &(k, v) in &p[1..] {
        if v > best.1 {
            best = (k, v);
        }
    }
    best.0
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Quadrants {
    pub top: bool,
    pub bottom: bool,
    pub left: bool,
    pub right: bool,
}

impl Quadrants {
    pub fn names(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        for (on, name) in [
            (self.top, "top"),
            (self.bottom, "bottom"),
            (self.left, "left"),
            (self.right, "right"),
        ] {
            if on {
                v.push(name);
            }
        }
        v
    }

    pub fn is_empty(&self) -> bool {
        !(self.top || self.bottom || self.left || self.right)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FloodStats {
    pub percent: f64,
    pub quadrants: Quadrants,
}

/// Flooded share and which image halves hold at least one flooded pixel.
/// For odd sizes the middle row or column belongs to both halves.
pub fn flood_stats(mask: &[bool], height: usize, width: usize) -> Result<FloodStats> {
    if mask.len() != height * width || mask.is_empty() {
        return Err(Error::shape(format!("flood mask {height}×{width} with {} values", mask.len())));
    }
    let mut q = Quadrants::default();
    let mut count = 0usize;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (r, c) = (i / width, i % width);
        count += 1;
        q.top |= 2 * r < height;
        q.bottom |= 2 * r + 1 >= height;
        q.left |= 2 * c < width;
        q.right |= 2 * c + 1 >= width;
    }
    Ok(FloodStats {
        percent: 100.0 * count as f64 / mask.len() as f64,
        quadrants: q,
    })
}

pub fn flood_mask(mask: &ClassMask) -> Vec<bool> {
    mask.data.iter().map(|&k| k as usize == WATER).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extremes {
    pub h_max: f64,
    pub class_max: usize,
    pub at_max: usize,
    pub h_min: f64,
    pub class_min: usize,
    pub at_min: usize,
}

/// Highest and lowest heights with the classes found there; ties go to the
/// first pixel in row-major order.
pub fn elevation_extremes(elev: &[f64], mask: &ClassMask) -> Result<Extremes> {
    if elev.len() != mask.data.len() {
        return Err(Error::shape(format!(
            "elevation has {} values, mask {}",
            elev.len(),
            mask.data.len()
        )));
    }
    let (mut at_max, mut at_min) = (0, 0);
    for (i, &v) in elev.iter().enumerate() {
        if v > elev[at_max] {
            at_max = i;
        }
        if v < elev[at_min] {
            at_min = i;
        }
    }
    Ok(Extremes {
        h_max: elev[at_max],
        class_max: mask.data[at_max] as usize,
        at_max,
        h_min: elev[at_min],
        class_min: mask.data[at_min] as usize,
        at_min,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaptionKind {
    Landcover,
    Flood,
    Elevation,
    Object,
}

impl CaptionKind {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "landcover" => Ok(CaptionKind::Landcover),
            "flood" => Ok(CaptionKind::Flood),
            "elevation" => Ok(CaptionKind::Elevation),
            "object" => Ok(CaptionKind::Object),
            _ => Err(Error::config(format!("unknown caption kind '{name}'"))),
        }
    }
}

/// Template slots; each kind reads only the fields it needs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CaptionStats {
    pub percentages: Vec<(usize, f64)>,
    pub flood: Option<FloodStats>,
    pub extremes: Option<Extremes>,
    /// `(class, number of regions)`.
    pub regions: Vec<(usize, usize)>,
}

fn join_and(items: &[String]) -> String {
    match items.len() {
        0 => String::new(),
        1 => items[0].clone(),
        n => format!("{} and {}", items[..n - 1].join(", "), items[n - 1]),
    }
}

pub fn assemble_caption(kind: CaptionKind, stats: &CaptionStats) -> Result<String> {
    let missing = |what: &str| Error::config(format!("caption needs {what}"));
    match kind {
        CaptionKind::Landcover => {
            if stats.percentages.is_empty() {
                return Err(missing("class percentages"));
            }
            let mut p = stats.percentages.clone();
            p.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let names: Vec<&str> = p.iter().map(|(k, _)| CLASSES[*k]).collect();
            let parts: Vec<String> = p
                .iter()
                .map(|(k, v)| format!("{} occupies {:.1}% of the image", CLASSES[*k], v))
                .collect();
            Ok(format!(
                "The aerial image contains {} land types. {}.",
                names.join(", "),
                parts.join(", ")
            ))
        }
        CaptionKind::Flood => {
            let f = stats.flood.ok_or_else(|| missing("flood statistics"))?;
            if f.quadrants.is_empty() {
                return Ok("There are no flooded regions in the image.".to_string());
            }
            let q: Vec<String> = f.quadrants.names().into_iter().map(String::from).collect();
            Ok(format!(
                "The flooded area occupies approximately {:.1}% of the image, with flooded pixels in the {} parts of the image.",
                f.percent,
                join_and(&q)
            ))
        }
        CaptionKind::Elevation => {
            let e = stats.extremes.ok_or_else(|| missing("elevation extremes"))?;
            Ok(format!(
                "The highest elevation is {:.1} m on {} and the lowest elevation is {:.1} m on {}.",
                e.h_max * ELEVATION_SCALE_M,
                CLASSES[e.class_max],
                e.h_min * ELEVATION_SCALE_M,
                CLASSES[e.class_min]
            ))
        }
        CaptionKind::Object => {
            if stats.regions.is_empty() {
                return Err(missing("region counts"));
            }
            let parts: Vec<String> = stats
                .regions
                .iter()
                .map(|&(k, n)| format!("{n} {} of {}", if n == 1 { "region" } else { "regions" }, CLASSES[k]))
                .collect();
            Ok(format!("The image shows {}.", join_and(&parts)))
        }
    }
}

/// Non-empty Voronoi cells per class, in class-id order.
pub fn region_counts(scene: &SceneSpec) -> Vec<(usize, usize)> {
    let sites = scene.site_map();
    let mut used = vec![false; scene.sites.len()];
    for s in sites {
        used[s] = true;
    }
    let mut counts = [0usize; NUM_CLASSES];
    for (i, (_, _, k)) in scene.sites.iter().enumerate() {
        if used[i] {
            counts[*k] += 1;
        }
    }
    counts.iter().enumerate().filter(|(_, &n)| n > 0).map(|(k, &n)| (k, n)).collect()
}

pub fn caption_stats(scene: &SceneSpec) -> Result<CaptionStats> {
    let mask = scene.class_mask();
    let elev = scene.elevation(&mask);
    Ok(CaptionStats {
        percentages: class_percentages(&mask),
        flood: Some(flood_stats(&flood_mask(&mask), mask.height, mask.width)?),
        extremes: Some(elevation_extremes(&elev, &mask)?),
        regions: region_counts(scene),
    })
}

pub fn caption(scene: &SceneSpec, modality: Modality) -> Result<String> {
    assemble_caption(modality.caption_kind(), &caption_stats(scene)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            _ => Err(Error::config(format!("unknown split '{name}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub scenes: usize,
    pub modalities: Vec<Modality>,
    pub train_fraction: f64,
    pub seed: u64,
    pub size: (usize, usize),
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            scenes: 64,
            modalities: vec![Modality::Rgb, Modality::Msi12],
            train_fraction: 0.8,
            seed: 0,
            size: (64, 64),
        }
    }
}

/// Metadata of one (scene, modality) pair; pixels are rendered on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusRecord {
    pub scene: SceneSpec,
    pub index: usize,
    pub modality: Modality,
    pub caption: String,
    pub labels: Vec<usize>,
    pub dominant: usize,
    pub split: Split,
}

impl CorpusRecord {
    pub fn render(&self) -> Result<MultimodalImage> {
        render(&self.scene, self.modality)
    }

    /// Stable file stem, e.g. `scene0007_msi12`.
    pub fn stem(&self) -> String {
        format!("scene{:04}_{}", self.index, self.modality.name())
    }
}

/// Scene-level split: the first `round(f·n)` scenes of a seeded shuffle
/// train, the rest evaluate.
pub fn scene_splits(n: usize, train_fraction: f64, seed: u64) -> Result<Vec<Split>> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::config(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, "corpus/split"));
    let n_train = libm::round(train_fraction * n as f64) as usize;
    let mut out = vec![Split::Eval; n];
    for &i in &order[..n_train] {
        out[i] = Split::Train;
    }
    Ok(out)
}

/// Records in scene-major, modality-minor order. Scene `i` is seeded from
/// `(seed, i)` and leans toward class `i mod 8`.
pub fn corpus(cfg: &CorpusConfig) -> Result<Vec<CorpusRecord>> {
    if cfg.scenes == 0 || cfg.modalities.is_empty() {
        return Err(Error::config("corpus needs at least one scene and one modality"));
    }
    let splits = scene_splits(cfg.scenes, cfg.train_fraction, cfg.seed)?;
    let mut out = Vec::with_capacity(cfg.scenes * cfg.modalities.len());
    for (i, split) in splits.into_iter().enumerate() {
        let seed = stream(cfg.seed, &format!("corpus/scene{i}")).random::<u64>();
        let scene = SceneSpec::generate(seed, cfg.size, i % NUM_CLASSES)?;
        let stats = caption_stats(&scene)?;
        let mask = scene.class_mask();
        let labels: Vec<usize> = stats.percentages.iter().map(|(k, _)| *k).collect();
        let dominant = dominant_class(&mask);
        for &m in &cfg.modalities {
            out.push(CorpusRecord {
                scene: scene.clone(),
                index: i,
                modality: m,
                caption: assemble_caption(m.caption_kind(), &stats)?,
                labels: labels.clone(),
                dominant,
                split,
            });
        }
    }
    Ok(out)
}
