//! Dual-tower encoder: a vision Transformer fed by dynamic patch embedding
//! and a small text Transformer, both projected onto the unit sphere.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::hypernet::{
    dynamic_patch_embed_backward, dynamic_patch_embed_cached, Hypernet, HypernetCache,
    HypernetConfig, PatchEmbedCache, PatchKernels, WavelengthSpec,
};
use crate::numerics::{
    l2_normalize, l2_normalize_backward, transpose, BlockCache, Grads, LayerNorm, Linear,
    LinearInit, LnCache, ParamId, ParameterStore, Tensor, TransformerBlock,
};
use crate::rng::{fnv1a64, normal, StreamRng};
use crate::{Error, Result};

pub const VOCAB_SIZE: usize = 4096;
pub const MAX_TOKENS: usize = 32;

/// `C×H×W` raster with its per-channel wavelengths.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalImage {
    pixels: Tensor,
    spec: WavelengthSpec,
}

impl MultimodalImage {
    pub fn new(pixels: Tensor, spec: WavelengthSpec) -> Result<Self> {
        if pixels.shape().len() != 3 {
            return Err(Error::shape(format!(
                "image must be C×H×W, got {:?}",
                pixels.shape()
            )));
        }
        if pixels.shape()[0] != spec.channels() {
            return Err(Error::shape(format!(
                "{} channels but {} wavelengths",
                pixels.shape()[0],
                spec.channels()
            )));
        }
        pixels.check_finite("image")?;
        Ok(MultimodalImage { pixels, spec })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn spec(&self) -> &WavelengthSpec {
        &self.spec
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    /// True when every pixel lies in `[0, 1]`.
    pub fn is_normalized(&self) -> bool {
        self.pixels.data().iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Same scene with channels (and wavelengths) reordered by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let (h, w) = (self.height(), self.width());
        let mut data = Vec::with_capacity(self.pixels.numel());
        for &p in perm {
            data.extend_from_slice(&self.pixels.data()[p * h * w..(p + 1) * h * w]);
        }
        MultimodalImage::new(
            Tensor::new(vec![perm.len(), h, w], data)?,
            self.spec.permuted(perm),
        )
    }
}

/// Channels-first `d×H×W` spatial feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(values: Tensor) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 || s[1] == 0 || s[2] == 0 {
            return Err(Error::shape(format!("feature map must be d×H×W, got {s:?}")));
        }
        values.check_finite("feature map")?;
        Ok(FeatureMap(values))
    }

    /// Builds a map from row-major tokens (`H·W × d`).
    pub fn from_tokens(tokens: &[f64], grid: (usize, usize), dim: usize) -> Result<Self> {
        let data = transpose(tokens, grid.0 * grid.1, dim);
        FeatureMap::new(Tensor::new(vec![dim, grid.0, grid.1], data)?)
    }

    /// Row-major tokens (`H·W × d`).
    pub fn to_tokens(&self) -> Vec<f64> {
        let (d, h, w) = self.dims();
        transpose(self.0.data(), d, h * w)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.0.shape();
        (s[0], s[1], s[2])
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

/// Paired unit-norm embeddings; row `i` of each matrix belongs together.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub image: Vec<f64>,
    pub text: Vec<f64>,
    pub n: usize,
    pub dim: usize,
}

impl EmbeddingBatch {
    pub fn new(image: Vec<f64>, text: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || !image.len().is_multiple_of(dim) || image.len() != text.len() {
            return Err(Error::shape("embedding matrices must both be N×d"));
        }
        let n = image.len() / dim;
        for row in image.chunks(dim).chain(text.chunks(dim)) {
            let norm = crate::math::sqrt(row.iter().map(|v| v * v).sum::<f64>());
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::shape(format!("embedding row has norm {norm}, expected 1")));
            }
        }
        Ok(EmbeddingBatch { image, text, n, dim })
    }

    pub fn from_rows(image: &[Vec<f64>], text: &[Vec<f64>]) -> Result<Self> {
        let dim = image.first().map_or(0, |r| r.len());
        EmbeddingBatch::new(image.concat(), text.concat(), dim)
    }
}

/// Hashed word-bucket ids. `ids` may carry padding beyond `length`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextTokens {
    pub ids: Vec<u16>,
    pub length: usize,
}

impl TextTokens {
    pub fn real(&self) -> &[u16] {
        &self.ids[..self.length]
    }

    /// Pads with `pad` up to the maximum sequence length.
    pub fn padded(&self, pad: u16) -> TextTokens {
        let mut ids = self.real().to_vec();
        ids.resize(MAX_TOKENS, pad);
        TextTokens {
            ids,
            length: self.length,
        }
    }
}

/// Lowercases, splits on anything that is not alphanumeric, hashes each word
/// with FNV-1a into [`VOCAB_SIZE`] buckets and keeps the first
/// [`MAX_TOKENS`] words.
pub fn tokenize(caption: &str) -> Result<TextTokens> {
    let ids: Vec<u16> = caption
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .take(MAX_TOKENS)
        .map(|w| {
            let lw: String = w.chars().flat_map(char::to_lowercase).collect();
            (fnv1a64(lw.as_bytes()) % VOCAB_SIZE as u64) as u16
        })
        .collect();
    if ids.is_empty() {
        return Err(Error::Empty("caption has no words".into()));
    }
    let length = ids.len();
    Ok(TextTokens { ids, length })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionConfig {
    pub image_size: (usize, usize),
    pub patch: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
}

impl Default for VisionConfig {
    fn default() -> Self {
        VisionConfig {
            image_size: (64, 64),
            patch: 8,
            width: 64,
            depth: 4,
            heads: 4,
        }
    }
}

impl VisionConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.image_size.0 / self.patch, self.image_size.1 / self.patch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            width: 64,
            depth: 2,
            heads: 4,
        }
    }
}

/// Activations of one image through the vision tower.
#[derive(Debug, Clone)]
pub struct VisionForward {
    pub embedding: Vec<f64>,
    pub features: FeatureMap,
    patch: PatchEmbedCache,
    blocks: Vec<BlockCache>,
    pooled_ln: LnCache,
    pooled_norm: Vec<f64>,
    raw_norm: f64,
}

#[derive(Debug, Clone)]
pub struct VisionTower {
    pub cfg: VisionConfig,
    pub hypernet: Hypernet,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub ln_post: LayerNorm,
    pub proj: Linear,
}

impl VisionTower {
    pub fn new(
        store: &mut ParameterStore,
        cfg: VisionConfig,
        hyper: HypernetConfig,
        embed_dim: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let (h, w) = cfg.image_size;
        if cfg.patch == 0 || h % cfg.patch != 0 || w % cfg.patch != 0 {
            return Err(Error::config(format!(
                "image {h}×{w} not divisible by patch size {}",
                cfg.patch
            )));
        }
        let hypernet = Hypernet::new(store, "hypernet", hyper, cfg.patch, cfg.width, rng)?;
        let (gh, gw) = cfg.grid();
        let pos = store.add(
            "vision.pos_embed",
            Tensor::from_fn(vec![gh * gw, cfg.width], |_| 0.02 * normal(rng)),
            true,
        )?;
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(store, &format!("vision.block{i}"), cfg.width, cfg.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let ln_post = LayerNorm::new(store, "vision.ln_post", cfg.width)?;
        let proj = Linear::new(store, "proj.image", cfg.width, embed_dim, false, LinearInit::FanIn, rng)?;
        Ok(VisionTower {
            cfg,
            hypernet,
            pos,
            blocks,
            ln_post,
            proj,
        })
    }

    pub fn kernels(
        &self,
        store: &ParameterStore,
        spec: &WavelengthSpec,
    ) -> Result<(PatchKernels, HypernetCache)> {
        self.hypernet.forward(store, spec)
    }

    pub fn forward_with_kernels(
        &self,
        store: &ParameterStore,
        img: &MultimodalImage,
        kernels: &PatchKernels,
    ) -> Result<VisionForward> {
        if (img.height(), img.width()) != self.cfg.image_size {
            return Err(Error::shape(format!(
                "vision tower expects {:?} images, got {}×{}",
                self.cfg.image_size,
                img.height(),
                img.width()
            )));
        }
        let (tokens, patch) = dynamic_patch_embed_cached(img, kernels)?;
        let grid = self.cfg.grid();
        let n = grid.0 * grid.1;
        let d = self.cfg.width;
        let mut x = tokens.into_data();
        for (v, p) in x.iter_mut().zip(store.data(self.pos)) {
            *v += p;
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(store, &x, n);
            x = y;
            caches.push(c);
        }
        let features = FeatureMap::from_tokens(&x, grid, d)?;
        let mut pooled = vec![0.0; d];
        for row in x.chunks(d) {
            for (p, v) in pooled.iter_mut().zip(row) {
                *p += v;
            }
        }
        pooled.iter_mut().for_each(|p| *p /= n as f64);
        let (pooled_norm, pooled_ln) = self.ln_post.forward(store, &pooled);
        let raw = self.proj.forward(store, &pooled_norm, 1);
        let (embedding, raw_norm) = l2_normalize(&raw);
        if !embedding.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("image embedding".into()));
        }
        Ok(VisionForward {
            embedding,
            features,
            patch,
            blocks: caches,
            pooled_ln,
            pooled_norm,
            raw_norm,
        })
    }

    /// Embedding plus last-block feature map for one image.
    pub fn encode(&self, store: &ParameterStore, img: &MultimodalImage) -> Result<(Vec<f64>, FeatureMap)> {
        let (k, _) = self.kernels(store, img.spec())?;
        let f = self.forward_with_kernels(store, img, &k)?;
        Ok((f.embedding, f.features))
    }

    /// Backward from embedding and/or feature-map gradients; kernel
    /// gradients are accumulated into `dk` for a later hypernet pass.
    pub fn backward(
        &self,
        store: &ParameterStore,
        grads: &mut Grads,
        fwd: &VisionForward,
        d_embedding: &[f64],
        d_features: Option<&FeatureMap>,
        dk: &mut PatchKernels,
    ) {
        let grid = self.cfg.grid();
        let n = grid.0 * grid.1;
        let d = self.cfg.width;
        let draw = l2_normalize_backward(&fwd.embedding, fwd.raw_norm, d_embedding);
        let dpn = self.proj.backward(store, grads, &fwd.pooled_norm, 1, &draw);
        let dpool = self.ln_post.backward(store, grads, &fwd.pooled_ln, &dpn);
        let mut dx = match d_features {
            Some(f) => f.to_tokens(),
            None => vec![0.0; n * d],
        };
        for row in dx.chunks_mut(d) {
            for (v, g) in row.iter_mut().zip(&dpool) {
                *v += g / n as f64;
            }
        }
        for (b, c) in self.blocks.iter().zip(&fwd.blocks).rev() {
            dx = b.backward(store, grads, c, &dx);
        }
        for (g, v) in grads.get_mut(self.pos).iter_mut().zip(&dx) {
            *g += v;
        }
        dynamic_patch_embed_backward(&fwd.patch, &dx, dk);
    }
}

#[derive(Debug, Clone)]
pub struct TextForward {
    pub embedding: Vec<f64>,
    ids: Vec<u16>,
    blocks: Vec<BlockCache>,
    pooled_ln: LnCache,
    pooled_norm: Vec<f64>,
    raw_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TextTower {
    pub cfg: TextConfig,
    pub token_embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub ln_final: LayerNorm,
    pub proj: Linear,
}

impl TextTower {
    pub fn new(
        store: &mut ParameterStore,
        cfg: TextConfig,
        embed_dim: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let w = cfg.width;
        let token_embed = store.add(
            "text.token_embed",
            Tensor::from_fn(vec![VOCAB_SIZE, w], |_| 0.02 * normal(rng)),
            true,
        )?;
        let pos = store.add(
            "text.pos_embed",
            Tensor::from_fn(vec![MAX_TOKENS, w], |_| 0.01 * normal(rng)),
            true,
        )?;
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(store, &format!("text.block{i}"), w, cfg.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let ln_final = LayerNorm::new(store, "text.ln_final", w)?;
        let proj = Linear::new(store, "proj.text", w, embed_dim, false, LinearInit::FanIn, rng)?;
        Ok(TextTower {
            cfg,
            token_embed,
            pos,
            blocks,
            ln_final,
            proj,
        })
    }

    /// Only the real tokens are encoded; padding never enters the sequence.
    pub fn forward(&self, store: &ParameterStore, tokens: &TextTokens) -> Result<TextForward> {
        let ids = tokens.real();
        if ids.is_empty() || ids.len() > MAX_TOKENS {
            return Err(Error::shape(format!(
                "text length must be in 1..={MAX_TOKENS}, got {}",
                ids.len()
            )));
        }
        let w = self.cfg.width;
        let n = ids.len();
        let emb = store.data(self.token_embed);
        let pos = store.data(self.pos);
        let mut x = vec![0.0; n * w];
        for (t, &id) in ids.iter().enumerate() {
            let id = usize::from(id);
            if id >= VOCAB_SIZE {
                return Err(Error::shape(format!("token id {id} out of range")));
            }
            for j in 0..w {
                x[t * w + j] = emb[id * w + j] + pos[t * w + j];
            }
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward(store, &x, n);
            x = y;
            caches.push(c);
        }
        let mut pooled = vec![0.0; w];
        for row in x.chunks(w) {
            for (p, v) in pooled.iter_mut().zip(row) {
                *p += v;
            }
        }
        pooled.iter_mut().for_each(|p| *p /= n as f64);
        let (pooled_norm, pooled_ln) = self.ln_final.forward(store, &pooled);
        let raw = self.proj.forward(store, &pooled_norm, 1);
        let (embedding, raw_norm) = l2_normalize(&raw);
        if !embedding.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("text embedding".into()));
        }
        Ok(TextForward {
            embedding,
            ids: ids.to_vec(),
            blocks: caches,
            pooled_ln,
            pooled_norm,
            raw_norm,
        })
    }

    pub fn encode(&self, store: &ParameterStore, tokens: &TextTokens) -> Result<Vec<f64>> {
        Ok(self.forward(store, tokens)?.embedding)
    }

    pub fn backward(&self, store: &ParameterStore, grads: &mut Grads, fwd: &TextForward, d_embedding: &[f64]) {
        let w = self.cfg.width;
        let n = fwd.ids.len();
        let draw = l2_normalize_backward(&fwd.embedding, fwd.raw_norm, d_embedding);
        let dpn = self.proj.backward(store, grads, &fwd.pooled_norm, 1, &draw);
        let dpool = self.ln_final.backward(store, grads, &fwd.pooled_ln, &dpn);
        let mut dx = vec![0.0; n * w];
        for row in dx.chunks_mut(w) {
            for (v, g) in row.iter_mut().zip(&dpool) {
                *v = g / n as f64;
            }
        }
        for (b, c) in self.blocks.iter().zip(&fwd.blocks).rev() {
            dx = b.backward(store, grads, c, &dx);
        }
        {
            let gp = grads.get_mut(self.pos);
            for (g, v) in gp.iter_mut().zip(&dx) {
                *g += v;
            }
        }
        let ge = grads.get_mut(self.token_embed);
        for (t, &id) in fwd.ids.iter().enumerate() {
            let id = usize::from(id);
            for j in 0..w {
                ge[id * w + j] += dx[t * w + j];
            }
        }
    }
}
