//! Frozen RGB teachers: small fixed-seed ViTs of differing width and
//! resolution, plus the rule that picks three channels out of an arbitrary
//! multispectral image.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::hypernet::{dynamic_patch_embed, PatchKernels, WavelengthSpec, RGB_WAVELENGTHS};
use crate::maka::TeacherTarget;
use crate::math::sqrt;
use crate::numerics::{LayerNorm, ParamId, ParameterStore, Tensor, TransformerBlock};
use crate::rng::{normal, stream};
use crate::towers::{FeatureMap, MultimodalImage};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TeacherKind {
    Siglip,
    Dinov2,
    Vit,
}

impl TeacherKind {
    pub const ALL: [TeacherKind; 3] = [TeacherKind::Siglip, TeacherKind::Dinov2, TeacherKind::Vit];

    pub fn name(self) -> &'static str {
        match self {
            TeacherKind::Siglip => "siglip_t",
            TeacherKind::Dinov2 => "dinov2_t",
            TeacherKind::Vit => "vit_t",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn width(self) -> usize {
        match self {
            TeacherKind::Siglip => 48,
            TeacherKind::Dinov2 => 64,
            TeacherKind::Vit => 80,
        }
    }

    pub fn patch(self) -> usize {
        match self {
            TeacherKind::Siglip => 16,
            TeacherKind::Dinov2 => 4,
            TeacherKind::Vit => 32,
        }
    }

    pub fn default_seed(self) -> u64 {
        match self {
            TeacherKind::Siglip => 1001,
            TeacherKind::Dinov2 => 1002,
            TeacherKind::Vit => 1003,
        }
    }
}

const TEACHER_DEPTH: usize = 2;
const TEACHER_HEADS: usize = 4;

/// Three channels lifted out of a student image for a teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbView {
    pub pixels: Tensor,
    pub indices: [usize; 3],
}

/// Source channel indices nearest to the RGB reference wavelengths.
pub fn rgb_indices(spec: &WavelengthSpec) -> [usize; 3] {
    let lambdas = spec.lambdas();
    let c = lambdas.len();
    let mut out = [0usize; 3];
    if c < 3 {
        for (k, o) in out.iter_mut().enumerate() {
            *o = k % c;
        }
        return out;
    }
    for (o, target) in out.iter_mut().zip(RGB_WAVELENGTHS) {
        let mut best = 0;
        for (i, l) in lambdas.iter().enumerate() {
            if (l - target).abs() < (lambdas[best] - target).abs() {
                best = i;
            }
        }
        *o = best;
    }
    out
}

pub fn rgb_extract(img: &MultimodalImage) -> RgbView {
    let indices = rgb_indices(img.spec());
    let plane = img.height() * img.width();
    let src = img.pixels().data();
    let mut data = Vec::with_capacity(3 * plane);
    for &i in &indices {
        data.extend_from_slice(&src[i * plane..(i + 1) * plane]);
    }
    RgbView {
        pixels: Tensor::from_fn(vec![3, img.height(), img.width()], |k| data[k]),
        indices,
    }
}

#[derive(Debug, Clone)]
pub struct TeacherModel {
    pub kind: TeacherKind,
    pub seed: u64,
    pub image_size: (usize, usize),
    store: ParameterStore,
    kernels: PatchKernels,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    ln: LayerNorm,
}

impl TeacherModel {
    pub fn new(kind: TeacherKind, seed: u64, image_size: (usize, usize)) -> Result<Self> {
        let p = kind.patch();
        let (h, w) = image_size;
        if h % p != 0 || w % p != 0 || h == 0 || w == 0 {
            return Err(Error::config(format!(
                "{} needs image sides divisible by {p}, got {h}×{w}",
                kind.name()
            )));
        }
        let d = kind.width();
        let mut rng = stream(seed, kind.name());
        let mut store = ParameterStore::new();
        let fan = 3 * p * p;
        let kernels = PatchKernels {
            weights: Tensor::from_fn(vec![d, 3, p, p], |_| normal(&mut rng) / sqrt(fan as f64)),
            bias: Tensor::from_fn(vec![d], |_| 0.02 * normal(&mut rng)),
            patch: p,
            embed_dim: d,
        };
        let n = (h / p) * (w / p);
        let pos = store.add(
            "pos_embed",
            Tensor::from_fn(vec![n, d], |_| 0.02 * normal(&mut rng)),
            false,
        )?;
        let blocks = (0..TEACHER_DEPTH)
            .map(|i| TransformerBlock::new(&mut store, &format!("block{i}"), d, TEACHER_HEADS, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let ln = LayerNorm::new(&mut store, "ln_final", d)?;
        store.freeze_all();
        Ok(TeacherModel {
            kind,
            seed,
            image_size,
            store,
            kernels,
            pos,
            blocks,
            ln,
        })
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn grid(&self) -> (usize, usize) {
        let p = self.kind.patch();
        (self.image_size.0 / p, self.image_size.1 / p)
    }

    pub fn target(&self) -> TeacherTarget {
        TeacherTarget {
            name: self.name().into(),
            width: self.kind.width(),
            grid: self.grid(),
        }
    }

    /// Checksum over the frozen parameters, patch kernels included.
    pub fn checksum(&self) -> u64 {
        let mut h = self.store.checksum();
        for v in self.kernels.weights.data().iter().chain(self.kernels.bias.data()) {
            h = (h ^ v.to_bits()).wrapping_mul(0x100_0000_01b3);
        }
        h
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn forward(&self, view: &RgbView) -> Result<FeatureMap> {
        let s = view.pixels.shape();
        if (s[1], s[2]) != self.image_size {
            return Err(Error::shape(format!(
                "{} expects {:?} views, got {}×{}",
                self.name(),
                self.image_size,
                s[1],
                s[2]
            )));
        }
        let spec = WavelengthSpec::new("rgb", RGB_WAVELENGTHS.to_vec())?;
        let img = MultimodalImage::new(view.pixels.clone(), spec)?;
        self.forward_store(&self.store, &img)
    }

    /// Forward with an explicit parameter store, for gradient audits.
    pub fn forward_store(&self, store: &ParameterStore, img: &MultimodalImage) -> Result<FeatureMap> {
        let tokens = dynamic_patch_embed(img, &self.kernels)?;
        let grid = self.grid();
        let n = grid.0 * grid.1;
        let mut x = tokens.into_data();
        for (v, p) in x.iter_mut().zip(store.data(self.pos)) {
            *v += p;
        }
        for b in &self.blocks {
            x = b.forward(store, &x, n).0;
        }
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks(self.kind.width()) {
            out.extend(self.ln.forward(store, row).0);
        }
        FeatureMap::from_tokens(&out, grid, self.kind.width())
    }

    pub fn features(&self, img: &MultimodalImage) -> Result<FeatureMap> {
        self.forward(&rgb_extract(img))
    }
}

/// The three default teachers in fixed order.
#[derive(Debug, Clone)]
pub struct TeacherSet {
    pub teachers: Vec<TeacherModel>,
}

impl TeacherSet {
    pub fn new(image_size: (usize, usize), seeds: Option<[u64; 3]>) -> Result<Self> {
        let teachers = TeacherKind::ALL
            .iter()
            .enumerate()
            .map(|(i, &k)| TeacherModel::new(k, seeds.map_or(k.default_seed(), |s| s[i]), image_size))
            .collect::<Result<Vec<_>>>()?;
        Ok(TeacherSet { teachers })
    }

    pub fn targets(&self) -> Vec<TeacherTarget> {
        self.teachers.iter().map(TeacherModel::target).collect()
    }

    /// Features of every teacher for one image; the RGB view is shared.
    pub fn features(&self, img: &MultimodalImage) -> Result<Vec<FeatureMap>> {
        let view = rgb_extract(img);
        self.teachers.iter().map(|t| t.forward(&view)).collect()
    }

    pub fn checksum(&self) -> u64 {
        self.teachers.iter().fold(0, |h, t| h.rotate_left(7) ^ t.checksum())
    }
}
