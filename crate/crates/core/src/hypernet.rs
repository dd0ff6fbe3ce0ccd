//! Wavelength-conditioned hypernetwork producing patch-embedding kernels.
//!
//! Per-channel central wavelengths are sine/cosine encoded, refined by a
//! residual two-layer MLP, concatenated with learnable weight-query tokens and
//! one bias-query token, and mixed by a small Transformer. Each wavelength
//! token's output is decoded into that channel's `D×p×p` kernel slice; the
//! bias-query output is decoded into the `D` biases. The weight queries only
//! provide attention context.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::math::{cos, exp, log, sin};
use crate::numerics::{
    gelu, gelu_backward, gemm, BlockCache, Grads, Linear, LinearInit, ParamId, ParameterStore,
    Tensor, TransformerBlock,
};
use crate::rng::{normal, StreamRng};
use crate::towers::MultimodalImage;
use crate::{Error, Result};

/// Central wavelengths (μm) of the red, green and blue bands.
pub const RGB_WAVELENGTHS: [f64; 3] = [0.665, 0.560, 0.490];
/// Surrogate wavelengths (μm) for the two radar polarisations.
pub const RADAR_WAVELENGTHS: [f64; 2] = [100.0, 110.0];
pub const PE_SCALE: f64 = 1000.0;
pub const PE_TEMPERATURE: f64 = 10_000.0;

/// Wavelengths default to the RGB triple, cycled to `channels`.
pub fn default_wavelengths(channels: usize) -> Vec<f64> {
    (0..channels).map(|c| RGB_WAVELENGTHS[c % 3]).collect()
}

/// Per-channel central wavelengths (μm) plus the modality label.
#[derive(Debug, Clone, PartialEq)]
pub struct WavelengthSpec {
    lambdas: Vec<f64>,
    modality: String,
}

impl WavelengthSpec {
    pub fn new(modality: &str, lambdas: Vec<f64>) -> Result<Self> {
        if lambdas.is_empty() {
            return Err(Error::Empty("wavelength list".into()));
        }
        if let Some(bad) = lambdas.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(Error::config(format!("wavelength must be > 0, got {bad}")));
        }
        Ok(WavelengthSpec {
            lambdas,
            modality: modality.into(),
        })
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn modality(&self) -> &str {
        &self.modality
    }

    pub fn channels(&self) -> usize {
        self.lambdas.len()
    }

    /// Reorders channels: entry `i` of the result is channel `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        WavelengthSpec {
            lambdas: perm.iter().map(|&p| self.lambdas[p]).collect(),
            modality: self.modality.clone(),
        }
    }
}

/// 1-D sine/cosine encoding with explicit scale and temperature.
///
/// Row `c` holds `sin(s·λ_c / T^(2k/d))` at column `2k` and the matching
/// cosine at `2k+1`.
pub fn encode_wavelengths_with(
    lambdas: &[f64],
    d_lambda: usize,
    scale: f64,
    temperature: f64,
) -> Result<Tensor> {
    if d_lambda < 2 || !d_lambda.is_multiple_of(2) {
        return Err(Error::config(format!(
            "wavelength embedding dim must be even and >= 2, got {d_lambda}"
        )));
    }
    let half = d_lambda / 2;
    let ln_t = log(temperature);
    let mut out = vec![0.0; lambdas.len() * d_lambda];
    for (row, &l) in out.chunks_mut(d_lambda).zip(lambdas) {
        for k in 0..half {
            let freq = exp(-ln_t * (2 * k) as f64 / d_lambda as f64);
            let arg = scale * l * freq;
            row[2 * k] = sin(arg);
            row[2 * k + 1] = cos(arg);
        }
    }
    Tensor::new(vec![lambdas.len(), d_lambda], out)
}

pub fn encode_wavelengths(spec: &WavelengthSpec, d_lambda: usize) -> Result<Tensor> {
    encode_wavelengths_with(spec.lambdas(), d_lambda, PE_SCALE, PE_TEMPERATURE)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypernetConfig {
    pub d_lambda: usize,
    pub heads: usize,
    pub depth: usize,
    /// Number of weight-query tokens.
    pub weight_queries: usize,
    pub pe_scale: f64,
    pub pe_temperature: f64,
}

impl Default for HypernetConfig {
    fn default() -> Self {
        HypernetConfig {
            d_lambda: 128,
            heads: 4,
            depth: 1,
            weight_queries: 16,
            pe_scale: PE_SCALE,
            pe_temperature: PE_TEMPERATURE,
        }
    }
}

/// Dynamic kernels for one wavelength set.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchKernels {
    /// `D×C×p×p`.
    pub weights: Tensor,
    /// `D`.
    pub bias: Tensor,
    pub patch: usize,
    pub embed_dim: usize,
}

impl PatchKernels {
    pub fn channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn zeros_like(&self) -> PatchKernels {
        PatchKernels {
            weights: Tensor::zeros(self.weights.shape().to_vec()),
            bias: Tensor::zeros(self.bias.shape().to_vec()),
            patch: self.patch,
            embed_dim: self.embed_dim,
        }
    }
}

/// Two-layer GELU head.
#[derive(Debug, Clone)]
struct Head {
    fc1: Linear,
    fc2: Linear,
}

impl Head {
    fn forward(&self, store: &ParameterStore, x: &[f64], rows: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let pre = self.fc1.forward(store, x, rows);
        let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
        let out = self.fc2.forward(store, &act, rows);
        (pre, act, out)
    }

    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        store: &ParameterStore,
        grads: &mut Grads,
        x: &[f64],
        pre: &[f64],
        act: &[f64],
        rows: usize,
        dy: &[f64],
    ) -> Vec<f64> {
        let dact = self.fc2.backward(store, grads, act, rows, dy);
        let dpre = gelu_backward(pre, &dact);
        self.fc1.backward(store, grads, x, rows, &dpre)
    }
}

#[derive(Debug, Clone)]
pub struct Hypernet {
    pub cfg: HypernetConfig,
    pub patch: usize,
    pub embed_dim: usize,
    mlp1: Linear,
    mlp2: Linear,
    pub weight_queries: ParamId,
    pub bias_query: ParamId,
    blocks: Vec<TransformerBlock>,
    head_w: Head,
    head_b: Head,
}

/// Intermediates of [`Hypernet::generate`].
#[derive(Debug, Clone)]
pub struct HypernetCache {
    channels: usize,
    raw: Vec<f64>,
    mlp_pre: Vec<f64>,
    mlp_act: Vec<f64>,
    blocks: Vec<BlockCache>,
    z: Vec<f64>,
    hw: (Vec<f64>, Vec<f64>),
    hb: (Vec<f64>, Vec<f64>),
}

impl Hypernet {
    pub fn new(
        store: &mut ParameterStore,
        prefix: &str,
        cfg: HypernetConfig,
        patch: usize,
        embed_dim: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let d = cfg.d_lambda;
        if d < 2 || !d.is_multiple_of(2) {
            return Err(Error::config(format!(
                "wavelength embedding dim must be even and >= 2, got {d}"
            )));
        }
        if patch == 0 || embed_dim == 0 {
            return Err(Error::config("patch size and embed dim must be positive"));
        }
        let mlp1 = Linear::new(store, &format!("{prefix}.mlp1"), d, d, true, LinearInit::FanIn, rng)?;
        let mlp2 = Linear::new(store, &format!("{prefix}.mlp2"), d, d, true, LinearInit::Normal(0.02), rng)?;
        let wq = Tensor::from_fn(vec![cfg.weight_queries, d], |_| 0.02 * normal(rng));
        let weight_queries = store.add(&format!("{prefix}.weight_queries"), wq, true)?;
        let bq = Tensor::from_fn(vec![1, d], |_| 0.02 * normal(rng));
        let bias_query = store.add(&format!("{prefix}.bias_query"), bq, true)?;
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(store, &format!("{prefix}.block{i}"), d, cfg.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let head_w = Head {
            fc1: Linear::new(store, &format!("{prefix}.head_w.fc1"), d, d, true, LinearInit::FanIn, rng)?,
            fc2: Linear::new(
                store,
                &format!("{prefix}.head_w.fc2"),
                d,
                embed_dim * patch * patch,
                true,
                LinearInit::Normal(0.02),
                rng,
            )?,
        };
        let head_b = Head {
            fc1: Linear::new(store, &format!("{prefix}.head_b.fc1"), d, d, true, LinearInit::FanIn, rng)?,
            fc2: Linear::new(store, &format!("{prefix}.head_b.fc2"), d, embed_dim, true, LinearInit::Normal(0.02), rng)?,
        };
        Ok(Hypernet {
            cfg,
            patch,
            embed_dim,
            mlp1,
            mlp2,
            weight_queries,
            bias_query,
            blocks,
            head_w,
            head_b,
        })
    }

    pub fn mlp_weights(&self) -> [ParamId; 4] {
        [
            self.mlp1.weight,
            self.mlp1.bias.expect("bias"),
            self.mlp2.weight,
            self.mlp2.bias.expect("bias"),
        ]
    }

    pub fn encode(&self, spec: &WavelengthSpec) -> Result<Tensor> {
        encode_wavelengths_with(
            spec.lambdas(),
            self.cfg.d_lambda,
            self.cfg.pe_scale,
            self.cfg.pe_temperature,
        )
    }

    /// `V' = V + FC2(GELU(FC1(V)))`, row-wise.
    pub fn transform_embeddings(&self, store: &ParameterStore, raw: &Tensor) -> Result<Tensor> {
        let (out, _, _) = self.transform_rows(store, raw)?;
        Ok(out)
    }

    fn transform_rows(&self, store: &ParameterStore, raw: &Tensor) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        let d = self.cfg.d_lambda;
        if raw.shape().len() != 2 || raw.shape()[1] != d {
            return Err(Error::shape(format!(
                "wavelength embedding must be C×{d}, got {:?}",
                raw.shape()
            )));
        }
        let c = raw.shape()[0];
        let pre = self.mlp1.forward(store, raw.data(), c);
        let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
        let delta = self.mlp2.forward(store, &act, c);
        let out: Vec<f64> = raw.data().iter().zip(&delta).map(|(a, b)| a + b).collect();
        Ok((Tensor::new(vec![c, d], out)?, pre, act))
    }

    /// Full pipeline from wavelengths to kernels.
    pub fn kernels(&self, store: &ParameterStore, spec: &WavelengthSpec) -> Result<PatchKernels> {
        Ok(self.forward(store, spec)?.0)
    }

    pub fn forward(
        &self,
        store: &ParameterStore,
        spec: &WavelengthSpec,
    ) -> Result<(PatchKernels, HypernetCache)> {
        let raw = self.encode(spec)?;
        let (vt, mlp_pre, mlp_act) = self.transform_rows(store, &raw)?;
        let (k, mut cache) = self.generate_with_cache(store, &vt)?;
        cache.raw = raw.into_data();
        cache.mlp_pre = mlp_pre;
        cache.mlp_act = mlp_act;
        Ok((k, cache))
    }

    /// Decodes transformed wavelength embeddings `V'` (`C×d_λ`) into kernels.
    pub fn generate_kernels(&self, store: &ParameterStore, transformed: &Tensor) -> Result<PatchKernels> {
        Ok(self.generate_with_cache(store, transformed)?.0)
    }

    fn generate_with_cache(
        &self,
        store: &ParameterStore,
        transformed: &Tensor,
    ) -> Result<(PatchKernels, HypernetCache)> {
        let d = self.cfg.d_lambda;
        if transformed.shape().len() != 2 || transformed.shape()[1] != d {
            return Err(Error::shape(format!(
                "transformed embedding must be C×{d}, got {:?}",
                transformed.shape()
            )));
        }
        let c = transformed.shape()[0];
        let nq = self.cfg.weight_queries;
        let n = nq + c + 1;
        let mut seq = Vec::with_capacity(n * d);
        seq.extend_from_slice(store.data(self.weight_queries));
        seq.extend_from_slice(transformed.data());
        seq.extend_from_slice(store.data(self.bias_query));
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, cache) = b.forward(store, &seq, n);
            seq = y;
            caches.push(cache);
        }
        let zw = &seq[nq * d..(nq + c) * d];
        let zb = &seq[(nq + c) * d..];
        let (w_pre, w_act, w_out) = self.head_w.forward(store, zw, c);
        let (b_pre, b_act, b_out) = self.head_b.forward(store, zb, 1);

        let (e, pp) = (self.embed_dim, self.patch * self.patch);
        let mut weights = vec![0.0; e * c * pp];
        for ch in 0..c {
            let row = &w_out[ch * e * pp..(ch + 1) * e * pp];
            for o in 0..e {
                weights[(o * c + ch) * pp..(o * c + ch + 1) * pp].copy_from_slice(&row[o * pp..(o + 1) * pp]);
            }
        }
        let kernels = PatchKernels {
            weights: Tensor::new(vec![e, c, self.patch, self.patch], weights)?,
            bias: Tensor::new(vec![e], b_out)?,
            patch: self.patch,
            embed_dim: e,
        };
        let cache = HypernetCache {
            channels: c,
            raw: Vec::new(),
            mlp_pre: Vec::new(),
            mlp_act: Vec::new(),
            blocks: caches,
            z: seq,
            hw: (w_pre, w_act),
            hb: (b_pre, b_act),
        };
        Ok((kernels, cache))
    }

    /// Propagates kernel gradients back into every hypernetwork parameter.
    pub fn backward(
        &self,
        store: &ParameterStore,
        grads: &mut Grads,
        cache: &HypernetCache,
        dk: &PatchKernels,
    ) {
        let d = self.cfg.d_lambda;
        let c = cache.channels;
        let nq = self.cfg.weight_queries;
        let n = nq + c + 1;
        let (e, pp) = (self.embed_dim, self.patch * self.patch);
        let dw = dk.weights.data();
        let mut dhw = vec![0.0; c * e * pp];
        for ch in 0..c {
            for o in 0..e {
                dhw[ch * e * pp + o * pp..ch * e * pp + (o + 1) * pp]
                    .copy_from_slice(&dw[(o * c + ch) * pp..(o * c + ch + 1) * pp]);
            }
        }
        let mut dz = vec![0.0; n * d];
        let zw = &cache.z[nq * d..(nq + c) * d];
        let zb = &cache.z[(nq + c) * d..];
        let dzw = self
            .head_w
            .backward(store, grads, zw, &cache.hw.0, &cache.hw.1, c, &dhw);
        dz[nq * d..(nq + c) * d].copy_from_slice(&dzw);
        let dzb = self
            .head_b
            .backward(store, grads, zb, &cache.hb.0, &cache.hb.1, 1, dk.bias.data());
        dz[(nq + c) * d..].copy_from_slice(&dzb);
        for (b, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            dz = b.backward(store, grads, bc, &dz);
        }
        for (g, v) in grads.get_mut(self.weight_queries).iter_mut().zip(&dz[..nq * d]) {
            *g += v;
        }
        for (g, v) in grads.get_mut(self.bias_query).iter_mut().zip(&dz[(nq + c) * d..]) {
            *g += v;
        }
        let dvt = &dz[nq * d..(nq + c) * d];
        if !cache.raw.is_empty() {
            let dact = self.mlp2.backward(store, grads, &cache.mlp_act, c, dvt);
            let dpre = gelu_backward(&cache.mlp_pre, &dact);
            self.mlp1.backward_params(grads, &cache.raw, c, &dpre);
        }
    }
}

/// Cached im2col matrix for the patch-embedding backward pass.
#[derive(Debug, Clone)]
pub struct PatchEmbedCache {
    patches: Vec<f64>,
    grid: (usize, usize),
}

fn im2col(img: &Tensor, p: usize) -> (Vec<f64>, usize, usize) {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let (gh, gw) = (h / p, w / p);
    let cols = c * p * p;
    let x = img.data();
    let mut out = vec![0.0; gh * gw * cols];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = &mut out[(gy * gw + gx) * cols..(gy * gw + gx + 1) * cols];
            for ch in 0..c {
                for i in 0..p {
                    let src = &x[ch * h * w + (gy * p + i) * w + gx * p..][..p];
                    row[ch * p * p + i * p..ch * p * p + (i + 1) * p].copy_from_slice(src);
                }
            }
        }
    }
    (out, gh, gw)
}

/// Stride-`p` convolution with the generated kernels; returns
/// `(H/p)×(W/p)×D` tokens.
pub fn dynamic_patch_embed(img: &MultimodalImage, kernels: &PatchKernels) -> Result<Tensor> {
    Ok(dynamic_patch_embed_cached(img, kernels)?.0)
}

pub fn dynamic_patch_embed_cached(
    img: &MultimodalImage,
    kernels: &PatchKernels,
) -> Result<(Tensor, PatchEmbedCache)> {
    let px = img.pixels();
    let (c, h, w) = (px.shape()[0], px.shape()[1], px.shape()[2]);
    let p = kernels.patch;
    if h % p != 0 || w % p != 0 {
        return Err(Error::shape(format!(
            "image {h}×{w} not divisible by patch size {p}"
        )));
    }
    if kernels.channels() != c {
        return Err(Error::shape(format!(
            "kernels expect {} channels, image has {c}",
            kernels.channels()
        )));
    }
    let (patches, gh, gw) = im2col(px, p);
    let e = kernels.embed_dim;
    let cols = c * p * p;
    let mut tokens = vec![0.0; gh * gw * e];
    gemm(gh * gw, cols, e, &patches, false, kernels.weights.data(), true, &mut tokens, false);
    for row in tokens.chunks_mut(e) {
        for (t, b) in row.iter_mut().zip(kernels.bias.data()) {
            *t += b;
        }
    }
    Ok((
        Tensor::new(vec![gh, gw, e], tokens)?,
        PatchEmbedCache {
            patches,
            grid: (gh, gw),
        },
    ))
}

/// Accumulates `dL/dkernels` from token gradients (`P×D`, row-major).
pub fn dynamic_patch_embed_backward(
    cache: &PatchEmbedCache,
    dtokens: &[f64],
    dk: &mut PatchKernels,
) {
    let e = dk.embed_dim;
    let rows = cache.grid.0 * cache.grid.1;
    let cols = dk.weights.numel() / e;
    gemm(e, rows, cols, dtokens, true, &cache.patches, false, dk.weights.data_mut(), true);
    let db = dk.bias.data_mut();
    for row in dtokens.chunks(e) {
        for (g, v) in db.iter_mut().zip(row) {
            *g += v;
        }
    }
}

/// Gradient with respect to the image pixels (`C×H×W`).
pub fn dynamic_patch_embed_input_grad(
    kernels: &PatchKernels,
    dtokens: &[f64],
    shape: (usize, usize, usize),
) -> Result<Tensor> {
    let (c, h, w) = shape;
    let p = kernels.patch;
    let (gh, gw) = (h / p, w / p);
    let e = kernels.embed_dim;
    let cols = c * p * p;
    let mut dpatches = vec![0.0; gh * gw * cols];
    gemm(gh * gw, e, cols, dtokens, false, kernels.weights.data(), false, &mut dpatches, false);
    let mut dx = vec![0.0; c * h * w];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = &dpatches[(gy * gw + gx) * cols..(gy * gw + gx + 1) * cols];
            for ch in 0..c {
                for i in 0..p {
                    let dst = &mut dx[ch * h * w + (gy * p + i) * w + gx * p..][..p];
                    dst.copy_from_slice(&row[ch * p * p + i * p..ch * p * p + (i + 1) * p]);
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, FdOptions};
    use crate::rng::stream;

    fn net(d_lambda: usize, patch: usize, embed: usize) -> (Hypernet, ParameterStore) {
        let mut store = ParameterStore::new();
        let mut rng = stream(11, "test/hypernet");
        let cfg = HypernetConfig {
            d_lambda,
            heads: 2,
            depth: 1,
            weight_queries: 4,
            ..HypernetConfig::default()
        };
        let h = Hypernet::new(&mut store, "hypernet", cfg, patch, embed, &mut rng).unwrap();
        (h, store)
    }

    fn image(spec: &WavelengthSpec, h: usize, w: usize, seed: u64) -> MultimodalImage {
        let mut rng = stream(seed, "test/img");
        let c = spec.channels();
        let px = Tensor::from_fn(vec![c, h, w], |_| {
            let v: f64 = rand::Rng::random(&mut rng);
            v
        });
        MultimodalImage::new(px, spec.clone()).unwrap()
    }

    #[test]
    fn encoding_limits_and_reference_value() {
        let v = encode_wavelengths_with(&[1e-12], 4, PE_SCALE, PE_TEMPERATURE).unwrap();
        assert!(v.data()[0].abs() < 1e-8 && (v.data()[1] - 1.0).abs() < 1e-12);
        let v = encode_wavelengths_with(&[0.001, 0.001], 8, PE_SCALE, PE_TEMPERATURE).unwrap();
        assert!((v.data()[0] - 0.841_470_984_807_896_5).abs() < 1e-9);
        assert!((v.data()[1] - 0.540_302_305_868_139_8).abs() < 1e-9);
        assert_eq!(v.data()[..8], v.data()[8..]);
        assert!(v.data().iter().all(|x| x.abs() <= 1.0));
        assert!(matches!(
            encode_wavelengths_with(&[0.5], 7, PE_SCALE, PE_TEMPERATURE),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_mlp_is_identity() {
        let (h, mut store) = net(8, 2, 3);
        for id in h.mlp_weights() {
            store.data_mut(id).fill(0.0);
        }
        let spec = WavelengthSpec::new("rgb", RGB_WAVELENGTHS.to_vec()).unwrap();
        let raw = h.encode(&spec).unwrap();
        assert_eq!(h.transform_embeddings(&store, &raw).unwrap(), raw);
    }

    #[test]
    fn transform_matches_direct_two_layer_map() {
        let (h, store) = net(8, 2, 3);
        let spec = WavelengthSpec::new("x", vec![0.49, 0.49, 2.2]).unwrap();
        let raw = h.encode(&spec).unwrap();
        let got = h.transform_embeddings(&store, &raw).unwrap();
        let [w1, b1, w2, b2] = h.mlp_weights().map(|id| store.data(id).to_vec());
        for r in 0..3 {
            let x = &raw.data()[r * 8..(r + 1) * 8];
            let hidden: Vec<f64> = (0..8)
                .map(|i| gelu((0..8).map(|j| w1[i * 8 + j] * x[j]).sum::<f64>() + b1[i]))
                .collect();
            for i in 0..8 {
                let y = x[i] + (0..8).map(|j| w2[i * 8 + j] * hidden[j]).sum::<f64>() + b2[i];
                assert!((y - got.data()[r * 8 + i]).abs() < 1e-12);
            }
        }
        // duplicated rows stay duplicated
        assert_eq!(got.data()[..8], got.data()[8..16]);
    }

    #[test]
    fn kernel_shapes_duplicates_and_permutation() {
        let (h, store) = net(16, 4, 16);
        let spec = WavelengthSpec::new("msi", vec![0.49, 0.56, 0.665, 0.842, 1.61]).unwrap();
        let k = h.kernels(&store, &spec).unwrap();
        assert_eq!(k.weights.shape(), &[16, 5, 4, 4]);
        assert_eq!(k.bias.shape(), &[16]);

        let dup = WavelengthSpec::new("d", vec![0.56, 0.9, 0.56]).unwrap();
        let kd = h.kernels(&store, &dup).unwrap();
        for o in 0..16 {
            let w = kd.weights.data();
            let s0 = &w[(o * 3) * 16..(o * 3 + 1) * 16];
            let s2 = &w[(o * 3 + 2) * 16..(o * 3 + 3) * 16];
            for (a, b) in s0.iter().zip(s2) {
                assert!((a - b).abs() < 1e-12);
            }
        }

        let perm = [3usize, 0, 4, 2, 1];
        let kp = h.kernels(&store, &spec.permuted(&perm)).unwrap();
        assert!(kp.bias.max_abs_diff(&k.bias) < 1e-10);
        for o in 0..16 {
            for (i, &src) in perm.iter().enumerate() {
                let a = &kp.weights.data()[(o * 5 + i) * 16..(o * 5 + i + 1) * 16];
                let b = &k.weights.data()[(o * 5 + src) * 16..(o * 5 + src + 1) * 16];
                for (x, y) in a.iter().zip(b) {
                    assert!((x - y).abs() < 1e-10);
                }
            }
        }
        // determinism
        assert_eq!(h.kernels(&store, &spec).unwrap(), k);
    }

    #[test]
    fn patch_embed_basic_cases() {
        let spec = WavelengthSpec::new("one", vec![0.5]).unwrap();
        let img = image(&spec, 4, 4, 1);
        let mut k = PatchKernels {
            weights: Tensor::zeros(vec![2, 1, 4, 4]),
            bias: Tensor::new(vec![2], vec![1.0, 1.0]).unwrap(),
            patch: 4,
            embed_dim: 2,
        };
        let t = dynamic_patch_embed(&img, &k).unwrap();
        assert_eq!(t.shape(), &[1, 1, 2]);
        assert_eq!(t.data(), &[1.0, 1.0]);

        for (i, w) in k.weights.data_mut().iter_mut().enumerate() {
            *w = (i as f64 * 0.37).sin();
        }
        k.bias = Tensor::new(vec![2], vec![0.5, -0.25]).unwrap();
        let t = dynamic_patch_embed(&img, &k).unwrap();
        for o in 0..2 {
            let dot: f64 = (0..16)
                .map(|j| k.weights.data()[o * 16 + j] * img.pixels().data()[j])
                .sum();
            assert!((t.data()[o] - (dot + k.bias.data()[o])).abs() < 1e-12);
        }

        let zero = MultimodalImage::new(Tensor::zeros(vec![1, 8, 8]), spec.clone()).unwrap();
        let t = dynamic_patch_embed(&zero, &k).unwrap();
        for row in t.data().chunks(2) {
            assert_eq!(row, k.bias.data());
        }

        let odd = MultimodalImage::new(Tensor::zeros(vec![1, 6, 8]), spec).unwrap();
        assert!(matches!(dynamic_patch_embed(&odd, &k), Err(Error::Shape(_))));
    }

    #[test]
    fn token_grid_shape_is_channel_independent() {
        let (h, store) = net(8, 4, 6);
        for c in [1usize, 2, 3, 12, 32, 201] {
            let spec = WavelengthSpec::new("c", (0..c).map(|i| 0.4 + 0.01 * i as f64).collect()).unwrap();
            let img = image(&spec, 8, 8, c as u64);
            let k = h.kernels(&store, &spec).unwrap();
            assert_eq!(dynamic_patch_embed(&img, &k).unwrap().shape(), &[2, 2, 6]);
        }
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let (h, store) = net(8, 2, 3);
        let spec = WavelengthSpec::new("x", vec![0.49, 0.842, 1.61]).unwrap();
        let img = image(&spec, 4, 4, 9);
        let probe: Vec<f64> = (0..4 * 3).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
        let loss = |s: &ParameterStore| -> Result<f64> {
            let k = h.kernels(s, &spec)?;
            let t = dynamic_patch_embed(&img, &k)?;
            Ok(t.data().iter().zip(&probe).map(|(a, b)| a * b).sum())
        };
        let (k, cache) = h.forward(&store, &spec).unwrap();
        let (_, pc) = dynamic_patch_embed_cached(&img, &k).unwrap();
        let mut dk = k.zeros_like();
        dynamic_patch_embed_backward(&pc, &probe, &mut dk);
        let mut grads = Grads::zeros_like(&store);
        h.backward(&store, &mut grads, &cache, &dk);
        let r = finite_difference_gradient(
            loss,
            &store,
            &grads,
            &FdOptions {
                step: 1e-5,
                ..FdOptions::default()
            },
        )
        .unwrap();
        assert!(r.max_rel_err() < 1e-4, "{:?}", r.worst());

        // pixel gradient
        let dx = dynamic_patch_embed_input_grad(&k, &probe, (3, 4, 4)).unwrap();
        let base = img.pixels().clone();
        for i in [0usize, 17, 40] {
            let eval = |delta: f64| {
                let mut p = base.clone();
                p.data_mut()[i] += delta;
                let im = MultimodalImage::new(p, spec.clone()).unwrap();
                let t = dynamic_patch_embed(&im, &k).unwrap();
                t.data().iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>()
            };
            let fd = (eval(1e-4) - eval(-1e-4)) / 2e-4;
            assert!((fd - dx.data()[i]).abs() < 1e-8);
        }
    }
}
