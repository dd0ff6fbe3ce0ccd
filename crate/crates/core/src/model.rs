//! The student: vision and text towers, MaKA branches and the learned
//! contrastive scalars, with the full objective and its gradient.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::hypernet::{HypernetCache, HypernetConfig, PatchKernels, WavelengthSpec};
use crate::losses::{
    combine, feature_match_grad, sigmoid_contrastive_grad, ContrastiveParams, LossReport,
    LossWeights, MatchTerms,
};
use crate::maka::{Maka, MakaConfig, TeacherTarget};
use crate::math::log;
use crate::numerics::{Grads, ParamId, ParameterStore, Tensor};
use crate::rng::stream;
use crate::teachers::TeacherKind;
use crate::towers::{
    tokenize, EmbeddingBatch, FeatureMap, MultimodalImage, TextConfig, TextForward, TextTokens,
    TextTower, VisionConfig, VisionForward, VisionTower,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vision: VisionConfig,
    pub text: TextConfig,
    pub hypernet: HypernetConfig,
    pub maka: MakaConfig,
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vision: VisionConfig::default(),
            text: TextConfig::default(),
            hypernet: HypernetConfig::default(),
            maka: MakaConfig::default(),
            embed_dim: 32,
        }
    }
}

impl ModelConfig {
    /// 32×32 images with 4-pixel patches (an 8×8 grid) and one block per
    /// tower; used by gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            vision: VisionConfig {
                image_size: (32, 32),
                patch: 4,
                width: 64,
                depth: 1,
                heads: 4,
            },
            text: TextConfig {
                width: 64,
                depth: 1,
                heads: 4,
            },
            ..ModelConfig::default()
        }
    }
}

/// One training pair plus cached teacher features (in `TeacherKind::ALL`
/// order; `None` where a teacher is disabled).
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: MultimodalImage,
    pub tokens: TextTokens,
    pub teacher: [Option<FeatureMap>; 3],
}

impl Sample {
    pub fn new(image: MultimodalImage, caption: &str) -> Result<Self> {
        Ok(Sample {
            image,
            tokens: tokenize(caption)?,
            teacher: [None, None, None],
        })
    }
}

/// Weighted objective `c · L_siglip + Σ_k α_k L_match^k`; training uses
/// `c = 1`, the other values exist to check single terms in isolation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub contrastive: f64,
    pub weights: LossWeights,
}

impl Objective {
    pub fn vect(weights: LossWeights) -> Self {
        Objective { contrastive: 1.0, weights }
    }

    pub fn contrastive_only() -> Self {
        Objective::vect(LossWeights::CONTRASTIVE_ONLY)
    }

    /// One teacher's match loss with unit weight and nothing else.
    pub fn branch(kind: TeacherKind) -> Self {
        let mut a = [0.0; 3];
        a[TeacherKind::ALL.iter().position(|k| *k == kind).unwrap_or(0)] = 1.0;
        Objective {
            contrastive: 0.0,
            weights: LossWeights { alpha_s: a[0], alpha_d: a[1], alpha_v: a[2] },
        }
    }
}

#[derive(Debug, Clone)]
pub struct Student {
    pub cfg: ModelConfig,
    pub vision: VisionTower,
    pub text: TextTower,
    pub maka: Maka,
    pub log_temperature: ParamId,
    pub bias: ParamId,
    branch_of: [Option<usize>; 3],
}

struct KernelGroup {
    spec: WavelengthSpec,
    kernels: PatchKernels,
    cache: HypernetCache,
    members: Vec<usize>,
}

impl Student {
    pub fn new(
        store: &mut ParameterStore,
        cfg: ModelConfig,
        targets: &[TeacherTarget],
        seed: u64,
    ) -> Result<Self> {
        let mut rng = stream(seed, "init/model");
        let vision = VisionTower::new(store, cfg.vision.clone(), cfg.hypernet.clone(), cfg.embed_dim, &mut rng)?;
        let text = TextTower::new(store, cfg.text.clone(), cfg.embed_dim, &mut rng)?;
        let maka = Maka::new(store, cfg.maka.clone(), cfg.vision.width, targets, &mut rng)?;
        let cp = ContrastiveParams::default();
        let log_temperature = store.add("contrastive.log_temperature", Tensor::scalar(cp.log_temperature), true)?;
        let bias = store.add("contrastive.bias", Tensor::scalar(cp.bias), true)?;
        let branch_of = TeacherKind::ALL.map(|k| maka.branch(k.name()));
        Ok(Student {
            cfg,
            vision,
            text,
            maka,
            log_temperature,
            bias,
            branch_of,
        })
    }

    pub fn init(cfg: ModelConfig, targets: &[TeacherTarget], seed: u64) -> Result<(Self, ParameterStore)> {
        let mut store = ParameterStore::new();
        let s = Student::new(&mut store, cfg, targets, seed)?;
        Ok((s, store))
    }

    pub fn contrastive(&self, store: &ParameterStore) -> ContrastiveParams {
        ContrastiveParams {
            log_temperature: store.data(self.log_temperature)[0],
            bias: store.data(self.bias)[0],
        }
    }

    pub fn encode_image(&self, store: &ParameterStore, img: &MultimodalImage) -> Result<Vec<f64>> {
        Ok(self.vision.encode(store, img)?.0)
    }

    /// Embeddings for many images, generating kernels once per modality.
    pub fn encode_images(&self, store: &ParameterStore, imgs: &[&MultimodalImage]) -> Result<Vec<Vec<f64>>> {
        let groups = self.kernel_groups(store, imgs.iter().copied())?;
        let mut out = vec![Vec::new(); imgs.len()];
        for g in &groups {
            for &i in &g.members {
                out[i] = self.vision.forward_with_kernels(store, imgs[i], &g.kernels)?.embedding;
            }
        }
        Ok(out)
    }

    pub fn encode_text(&self, store: &ParameterStore, caption: &str) -> Result<Vec<f64>> {
        self.text.encode(store, &tokenize(caption)?)
    }

    fn kernel_groups<'a>(
        &self,
        store: &ParameterStore,
        imgs: impl Iterator<Item = &'a MultimodalImage>,
    ) -> Result<Vec<KernelGroup>> {
        let mut groups: Vec<KernelGroup> = Vec::new();
        for (i, img) in imgs.enumerate() {
            match groups.iter_mut().find(|g| g.spec.lambdas() == img.spec().lambdas()) {
                Some(g) => g.members.push(i),
                None => {
                    let (kernels, cache) = self.vision.kernels(store, img.spec())?;
                    groups.push(KernelGroup {
                        spec: img.spec().clone(),
                        kernels,
                        cache,
                        members: vec![i],
                    });
                }
            }
        }
        Ok(groups)
    }

    pub fn batch_loss(&self, store: &ParameterStore, batch: &[&Sample], w: LossWeights) -> Result<LossReport> {
        self.objective_loss(store, batch, Objective::vect(w))
    }

    pub fn batch_loss_grad(
        &self,
        store: &ParameterStore,
        batch: &[&Sample],
        w: LossWeights,
    ) -> Result<(LossReport, Grads)> {
        self.objective_grad(store, batch, Objective::vect(w))
    }

    pub fn objective_loss(&self, store: &ParameterStore, batch: &[&Sample], obj: Objective) -> Result<LossReport> {
        Ok(self.run(store, batch, obj, false)?.0)
    }

    pub fn objective_grad(
        &self,
        store: &ParameterStore,
        batch: &[&Sample],
        obj: Objective,
    ) -> Result<(LossReport, Grads)> {
        let (r, g) = self.run(store, batch, obj, true)?;
        Ok((r, g.expect("gradients requested")))
    }

    /// `L = L_siglip + Σ_k α_k · mean_b L_match^k`. A teacher is evaluated
    /// when every sample carries its features.
    fn run(
        &self,
        store: &ParameterStore,
        batch: &[&Sample],
        obj: Objective,
        need_grad: bool,
    ) -> Result<(LossReport, Option<Grads>)> {
        let w = obj.weights;
        let b = batch.len();
        let mut groups = self.kernel_groups(store, batch.iter().map(|s| &s.image))?;
        let mut vis: Vec<Option<VisionForward>> = vec![None; b];
        let mut group_of = vec![0usize; b];
        for (gi, g) in groups.iter().enumerate() {
            for &i in &g.members {
                vis[i] = Some(self.vision.forward_with_kernels(store, &batch[i].image, &g.kernels)?);
                group_of[i] = gi;
            }
        }
        let vis: Vec<VisionForward> = vis.into_iter().map(|v| v.expect("every sample is grouped")).collect();
        let txt: Vec<TextForward> = batch
            .iter()
            .map(|s| self.text.forward(store, &s.tokens))
            .collect::<Result<_>>()?;
        let d = self.cfg.embed_dim;
        let embeds = EmbeddingBatch::new(
            vis.iter().flat_map(|v| v.embedding.iter().copied()).collect(),
            txt.iter().flat_map(|t| t.embedding.iter().copied()).collect(),
            d,
        )?;
        let cp = self.contrastive(store);
        let (l_siglip, cg) = sigmoid_contrastive_grad(&embeds, cp)?;

        let mut grads = need_grad.then(|| Grads::zeros_like(store));
        let mut d_features: Vec<Option<FeatureMap>> = vec![None; b];
        let mut matches: [Option<MatchTerms>; 3] = [None; 3];
        for (k, kind) in TeacherKind::ALL.iter().enumerate() {
            if batch.iter().any(|s| s.teacher[k].is_none()) {
                continue;
            }
            let Some(branch) = self.branch_of[k] else {
                continue;
            };
            let alpha = w.alpha(*kind);
            let mut terms = Vec::with_capacity(b);
            for (i, s) in batch.iter().enumerate() {
                let ft = s.teacher[k].as_ref().expect("checked above");
                let agg = self.maka.agglomerate(store, &vis[i].features, s.image.spec(), branch)?;
                let (t, dfs) = feature_match_grad(&agg.projected, ft)?;
                terms.push(t);
                if let Some(g) = grads.as_mut() {
                    if alpha > 0.0 {
                        let scaled = FeatureMap::new(Tensor::from_fn(dfs.values().shape().to_vec(), |j| {
                            dfs.values().data()[j] * alpha / b as f64
                        }))?;
                        let df = self.maka.backward(store, g, &agg, &scaled)?;
                        d_features[i] = Some(match d_features[i].take() {
                            Some(acc) => add_maps(&acc, &df)?,
                            None => df,
                        });
                    }
                }
            }
            matches[k] = Some(MatchTerms::mean(&terms));
        }
        let mut report = combine(l_siglip, matches, w)?;
        if obj.contrastive != 1.0 {
            report.total = obj.contrastive * l_siglip
                + TeacherKind::ALL.iter().map(|k| w.alpha(*k) * report.match_total(*k)).sum::<f64>();
        }
        if !report.total.is_finite() {
            return Err(Error::NonFinite(format!("loss {:?}", report)));
        }
        let Some(mut g) = grads else {
            return Ok((report, None));
        };

        let mut dks: Vec<PatchKernels> = groups.iter().map(|gr| gr.kernels.zeros_like()).collect();
        for i in 0..b {
            self.vision.backward(
                store,
                &mut g,
                &vis[i],
                &scaled(&cg.d_image[i * d..(i + 1) * d], obj.contrastive),
                d_features[i].as_ref(),
                &mut dks[group_of[i]],
            );
            self.text.backward(store, &mut g, &txt[i], &scaled(&cg.d_text[i * d..(i + 1) * d], obj.contrastive));
        }
        for (gr, dk) in groups.iter_mut().zip(&dks) {
            self.vision.hypernet.backward(store, &mut g, &gr.cache, dk);
        }
        g.get_mut(self.log_temperature)[0] += obj.contrastive * cg.d_log_temperature;
        g.get_mut(self.bias)[0] += obj.contrastive * cg.d_bias;
        g.mask_frozen(store);
        Ok((report, Some(g)))
    }
}

fn scaled(v: &[f64], c: f64) -> Vec<f64> {
    v.iter().map(|x| c * x).collect()
}

fn add_maps(a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
    FeatureMap::new(Tensor::new(
        a.values().shape().to_vec(),
        a.values().data().iter().zip(b.values().data()).map(|(x, y)| x + y).collect(),
    )?)
}

/// Default contrastive initialization, for reference in reports.
pub fn initial_log_temperature() -> f64 {
    log(10.0)
}

/// Names of parameters that the student exposes, grouped by prefix.
pub fn parameter_groups(store: &ParameterStore) -> Vec<(String, usize)> {
    let mut out: Vec<(String, usize)> = Vec::new();
    for (_, p) in store.iter() {
        let prefix = String::from(p.name.split('.').next().unwrap_or(""));
        match out.iter_mut().find(|(n, _)| *n == prefix) {
            Some((_, c)) => *c += p.tensor.numel(),
            None => out.push((prefix, p.tensor.numel())),
        }
    }
    out
}
