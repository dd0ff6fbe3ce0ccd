//! Modality-aware knowledge agglomeration.
//!
//! Student features are resized to a teacher's grid, layer-normalized with a
//! modality-conditioned scale and shift, then projected to the teacher's
//! channel width by a 1×1 convolution:
//!
//! ```text
//! V_p      = mean_c(W_proj · PE(λ_c))
//! [γ; β]   = W_prompt · V_p
//! F'       = LN(F) + γ ⊙ LN(F) + β
//! F_s      = Conv1×1(F')
//! ```

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::hypernet::{encode_wavelengths_with, WavelengthSpec, PE_SCALE, PE_TEMPERATURE};
use crate::numerics::{
    bilinear_resize, bilinear_resize_backward, gemm, layer_norm_rows, layer_norm_rows_backward,
    transpose, Grads, Linear, LinearInit, LnCache, ParamId, ParameterStore, Tensor, LN_EPS,
};
use crate::rng::{normal, StreamRng};
use crate::towers::FeatureMap;
use crate::{Error, Result};

/// What a distillation branch has to produce.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherTarget {
    pub name: String,
    pub width: usize,
    pub grid: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MakaConfig {
    pub d_lambda: usize,
    /// One `W_prompt` per teacher (default) or a single shared one.
    pub prompt_per_teacher: bool,
}

impl Default for MakaConfig {
    fn default() -> Self {
        MakaConfig {
            d_lambda: 128,
            prompt_per_teacher: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MakaBranch {
    pub target: TeacherTarget,
    /// `2d×d`, zero at initialization.
    pub prompt: ParamId,
    pub projector: Linear,
}

#[derive(Debug, Clone)]
pub struct Maka {
    pub cfg: MakaConfig,
    pub dim: usize,
    /// `d×d_λ`, shared by all branches.
    pub w_proj: ParamId,
    pub branches: Vec<MakaBranch>,
}

/// Intermediates of one [`Maka::agglomerate`] call.
#[derive(Debug, Clone)]
pub struct AggCache {
    branch: usize,
    source_hw: (usize, usize),
    ln: LnCache,
    film: Vec<f64>,
    prompt: Vec<f64>,
    pe_mean: Vec<f64>,
}

/// Output of MaKA before and after the projector.
#[derive(Debug, Clone)]
pub struct Agglomerated {
    /// Conditioned features `F'` (`d×H'×W'`).
    pub conditioned: FeatureMap,
    /// Projected student features `F_s` (`d_t×H'×W'`).
    pub projected: FeatureMap,
    pub cache: AggCache,
}

/// Mean wavelength encoding over channels.
fn mean_encoding(spec: &WavelengthSpec, d_lambda: usize) -> Result<Vec<f64>> {
    let pe = encode_wavelengths_with(spec.lambdas(), d_lambda, PE_SCALE, PE_TEMPERATURE)?;
    let c = spec.channels();
    let mut m = vec![0.0; d_lambda];
    for row in pe.data().chunks(d_lambda) {
        for (a, b) in m.iter_mut().zip(row) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|v| *v /= c as f64);
    Ok(m)
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; rows];
    gemm(rows, cols, 1, w, false, x, false, &mut y, false);
    y
}

/// `V_p = (1/C) Σ_c W_proj · PE(λ_c)`.
pub fn modality_prompt(w_proj: &Tensor, spec: &WavelengthSpec) -> Result<Vec<f64>> {
    let s = w_proj.shape();
    if s.len() != 2 {
        return Err(Error::shape("W_proj must be d×d_λ"));
    }
    let m = mean_encoding(spec, s[1])?;
    Ok(matvec(w_proj.data(), s[0], s[1], &m))
}

/// `F' = LN(F) + γ ⊙ LN(F) + β` with `[γ; β] = W_prompt · V_p`.
pub fn conditional_layer_norm(f: &FeatureMap, prompt: &[f64], w_prompt: &Tensor) -> Result<FeatureMap> {
    let (d, h, w) = f.dims();
    if prompt.len() != d || w_prompt.shape() != [2 * d, d] {
        return Err(Error::shape(format!(
            "conditional layer norm needs a {d}-dim prompt and a {}×{d} W_prompt",
            2 * d
        )));
    }
    let film = matvec(w_prompt.data(), 2 * d, d, prompt);
    let ln = layer_norm_rows(&f.to_tokens(), d, LN_EPS);
    let out = modulate(&ln.xhat, &film, d);
    FeatureMap::from_tokens(&out, (h, w), d)
}

fn modulate(xhat: &[f64], film: &[f64], d: usize) -> Vec<f64> {
    let (gamma, beta) = film.split_at(d);
    let mut out = xhat.to_vec();
    for row in out.chunks_mut(d) {
        for ((v, g), b) in row.iter_mut().zip(gamma).zip(beta) {
            *v = *v + *g * *v + b;
        }
    }
    out
}

impl Maka {
    pub fn new(
        store: &mut ParameterStore,
        cfg: MakaConfig,
        dim: usize,
        targets: &[TeacherTarget],
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let w_proj = store.add(
            "maka.shared.w_proj",
            Tensor::from_fn(vec![dim, cfg.d_lambda], |_| normal(rng) / crate::math::sqrt(cfg.d_lambda as f64)),
            true,
        )?;
        let shared_prompt = if cfg.prompt_per_teacher {
            None
        } else {
            Some(store.add("maka.shared.w_prompt", Tensor::zeros(vec![2 * dim, dim]), true)?)
        };
        let mut branches = Vec::with_capacity(targets.len());
        for t in targets {
            let prompt = match shared_prompt {
                Some(id) => id,
                None => store.add(
                    &format!("maka.{}.w_prompt", t.name),
                    Tensor::zeros(vec![2 * dim, dim]),
                    true,
                )?,
            };
            let projector = Linear::new(
                store,
                &format!("maka.{}.projector", t.name),
                dim,
                t.width,
                true,
                LinearInit::FanIn,
                rng,
            )?;
            branches.push(MakaBranch {
                target: t.clone(),
                prompt,
                projector,
            });
        }
        Ok(Maka {
            cfg,
            dim,
            w_proj,
            branches,
        })
    }

    pub fn branch(&self, name: &str) -> Option<usize> {
        self.branches.iter().position(|b| b.target.name == name)
    }

    /// Resize → conditional layer norm → projector for branch `idx`.
    pub fn agglomerate(
        &self,
        store: &ParameterStore,
        f: &FeatureMap,
        spec: &WavelengthSpec,
        idx: usize,
    ) -> Result<Agglomerated> {
        let br = &self.branches[idx];
        let (d, h, w) = f.dims();
        if d != self.dim {
            return Err(Error::shape(format!("MaKA expects {} channels, got {d}", self.dim)));
        }
        let resized = FeatureMap::new(bilinear_resize(f.values(), br.target.grid)?)?;
        let pe_mean = mean_encoding(spec, self.cfg.d_lambda)?;
        let prompt = matvec(store.data(self.w_proj), d, self.cfg.d_lambda, &pe_mean);
        let film = matvec(store.data(br.prompt), 2 * d, d, &prompt);
        let ln = layer_norm_rows(&resized.to_tokens(), d, LN_EPS);
        let cond = modulate(&ln.xhat, &film, d);
        let rows = br.target.grid.0 * br.target.grid.1;
        let proj = br.projector.forward(store, &cond, rows);
        Ok(Agglomerated {
            conditioned: FeatureMap::from_tokens(&cond, br.target.grid, d)?,
            projected: FeatureMap::from_tokens(&proj, br.target.grid, br.target.width)?,
            cache: AggCache {
                branch: idx,
                source_hw: (h, w),
                ln,
                film,
                prompt,
                pe_mean,
            },
        })
    }

    /// Backward from `dL/dF_s`; returns `dL/dF` on the source grid.
    pub fn backward(
        &self,
        store: &ParameterStore,
        grads: &mut Grads,
        agg: &Agglomerated,
        d_projected: &FeatureMap,
    ) -> Result<FeatureMap> {
        let c = &agg.cache;
        let br = &self.branches[c.branch];
        let d = self.dim;
        let rows = br.target.grid.0 * br.target.grid.1;
        let cond = agg.conditioned.to_tokens();
        let dcond = br
            .projector
            .backward(store, grads, &cond, rows, &d_projected.to_tokens());
        let (gamma, _) = c.film.split_at(d);
        let mut dfilm = vec![0.0; 2 * d];
        let mut dxhat = vec![0.0; rows * d];
        for r in 0..rows {
            for j in 0..d {
                let g = dcond[r * d + j];
                dfilm[j] += g * c.ln.xhat[r * d + j];
                dfilm[d + j] += g;
                dxhat[r * d + j] = g * (1.0 + gamma[j]);
            }
        }
        // dW_prompt += dfilm ⊗ V_p
        gemm(2 * d, 1, d, &dfilm, false, &c.prompt, false, grads.get_mut(br.prompt), true);
        let mut dprompt = vec![0.0; d];
        gemm(d, 2 * d, 1, store.data(br.prompt), true, &dfilm, false, &mut dprompt, false);
        let dl = self.cfg.d_lambda;
        gemm(d, 1, dl, &dprompt, false, &c.pe_mean, false, grads.get_mut(self.w_proj), true);
        let dres = layer_norm_rows_backward(&c.ln, &dxhat);
        let dres = Tensor::new(
            vec![d, br.target.grid.0, br.target.grid.1],
            transpose(&dres, rows, d),
        )?;
        FeatureMap::new(bilinear_resize_backward(&dres, c.source_hw)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypernet::{encode_wavelengths, RGB_WAVELENGTHS};
    use crate::numerics::{finite_difference_gradient, layer_norm, FdOptions};
    use crate::rng::stream;

    fn setup(dim: usize, d_lambda: usize) -> (Maka, ParameterStore) {
        let mut store = ParameterStore::new();
        let mut rng = stream(5, "test/maka");
        let targets = [
            TeacherTarget { name: "a".into(), width: 3, grid: (2, 2) },
            TeacherTarget { name: "b".into(), width: dim, grid: (4, 4) },
        ];
        let m = Maka::new(
            &mut store,
            MakaConfig { d_lambda, prompt_per_teacher: true },
            dim,
            &targets,
            &mut rng,
        )
        .unwrap();
        (m, store)
    }

    fn features(d: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = stream(seed, "test/f");
        FeatureMap::new(Tensor::from_fn(vec![d, h, w], |_| normal(&mut rng))).unwrap()
    }

    fn rgb() -> WavelengthSpec {
        WavelengthSpec::new("rgb", RGB_WAVELENGTHS.to_vec()).unwrap()
    }

    #[test]
    fn prompt_is_the_mean_of_projected_encodings() {
        let mut rng = stream(1, "w");
        let w = Tensor::from_fn(vec![4, 8], |_| normal(&mut rng));
        let spec = rgb();
        let v = modality_prompt(&w, &spec).unwrap();
        let pe = encode_wavelengths(&spec, 8).unwrap();
        for (i, vi) in v.iter().enumerate() {
            let mut s = 0.0;
            for c in 0..3 {
                s += (0..8).map(|j| w.data()[i * 8 + j] * pe.data()[c * 8 + j]).sum::<f64>();
            }
            assert!((vi - s / 3.0).abs() < 1e-12);
        }
        let one = WavelengthSpec::new("x", vec![0.56]).unwrap();
        let pe1 = encode_wavelengths(&one, 8).unwrap();
        let v1 = modality_prompt(&w, &one).unwrap();
        for (i, vi) in v1.iter().enumerate() {
            let s: f64 = (0..8).map(|j| w.data()[i * 8 + j] * pe1.data()[j]).sum();
            assert!((vi - s).abs() < 1e-12);
        }
        let dup = WavelengthSpec::new("rgb2", [RGB_WAVELENGTHS, RGB_WAVELENGTHS].concat()).unwrap();
        let vd = modality_prompt(&w, &dup).unwrap();
        for (a, b) in v.iter().zip(&vd) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conditional_norm_cases() {
        let f = features(4, 3, 3, 2);
        let ln = layer_norm(f.values(), LN_EPS).unwrap();
        let zero = Tensor::zeros(vec![8, 4]);
        let out = conditional_layer_norm(&f, &[0.3, -1.0, 2.0, 0.5], &zero).unwrap();
        assert!(out.values().max_abs_diff(&ln) < 1e-15);

        // gamma = -1 cancels LN(F); output is beta everywhere.
        let prompt = [1.0, 0.0, 0.0, 0.0];
        let mut wp = Tensor::zeros(vec![8, 4]);
        for j in 0..4 {
            wp.data_mut()[j * 4] = -1.0;
            wp.data_mut()[(4 + j) * 4] = 0.1 * j as f64;
        }
        let out = conditional_layer_norm(&f, &prompt, &wp).unwrap();
        for j in 0..4 {
            for v in &out.values().data()[j * 9..(j + 1) * 9] {
                assert!((v - 0.1 * j as f64).abs() < 1e-12);
            }
        }

        let mut rng = stream(3, "wp");
        let wp = Tensor::from_fn(vec![8, 4], |_| normal(&mut rng));
        let prompt = [0.2, -0.4, 0.9, 0.1];
        let out = conditional_layer_norm(&f, &prompt, &wp).unwrap();
        for j in 0..4 {
            let g: f64 = (0..4).map(|k| wp.data()[j * 4 + k] * prompt[k]).sum();
            let b: f64 = (0..4).map(|k| wp.data()[(4 + j) * 4 + k] * prompt[k]).sum();
            for p in 0..9 {
                let want = (1.0 + g) * ln.data()[j * 9 + p] + b;
                assert!((out.values().data()[j * 9 + p] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_prompt_identity_projector_is_plain_layer_norm() {
        let (m, mut store) = setup(4, 8);
        let idx = m.branch("b").unwrap();
        let pw = m.branches[idx].projector.weight;
        let pb = m.branches[idx].projector.bias.unwrap();
        store.data_mut(pb).fill(0.0);
        let wdat = store.data_mut(pw);
        wdat.fill(0.0);
        for i in 0..4 {
            wdat[i * 4 + i] = 1.0;
        }
        let f = features(4, 4, 4, 7);
        let out = m.agglomerate(&store, &f, &rgb(), idx).unwrap();
        let ln = layer_norm(f.values(), LN_EPS).unwrap();
        assert!(out.projected.values().max_abs_diff(&ln) < 1e-12);
        assert_eq!(out.projected.dims(), (4, 4, 4));
        let a = m.agglomerate(&store, &f, &rgb(), 0).unwrap();
        assert_eq!(a.projected.dims(), (3, 2, 2));
    }

    #[test]
    fn modalities_differ_only_with_a_prompt() {
        let (m, mut store) = setup(4, 8);
        let f = features(4, 4, 4, 8);
        let sar = WavelengthSpec::new("sar", vec![100.0, 110.0]).unwrap();
        let a = m.agglomerate(&store, &f, &rgb(), 0).unwrap();
        let b = m.agglomerate(&store, &f, &sar, 0).unwrap();
        assert!(a.projected.values().max_abs_diff(b.projected.values()) < 1e-15);
        let mut rng = stream(9, "p");
        for v in store.data_mut(m.branches[0].prompt) {
            *v = 0.3 * normal(&mut rng);
        }
        let a = m.agglomerate(&store, &f, &rgb(), 0).unwrap();
        let b = m.agglomerate(&store, &f, &sar, 0).unwrap();
        assert!(a.projected.values().max_abs_diff(b.projected.values()) > 1e-3);
    }

    #[test]
    fn projector_superposition() {
        let (m, store) = setup(4, 8);
        let f = features(4, 4, 4, 10);
        let pw = m.branches[0].projector.weight;
        let pb = m.branches[0].projector.bias.unwrap();
        let mut rng = stream(2, "sup");
        let w1: Vec<f64> = (0..12).map(|_| normal(&mut rng)).collect();
        let w2: Vec<f64> = (0..12).map(|_| normal(&mut rng)).collect();
        let run = |w: &[f64]| {
            let mut s = store.clone();
            s.data_mut(pw).copy_from_slice(w);
            s.data_mut(pb).fill(0.0);
            m.agglomerate(&s, &f, &rgb(), 0).unwrap().projected.into_tensor()
        };
        let (a, b) = (1.7, -0.6);
        let mix: Vec<f64> = w1.iter().zip(&w2).map(|(x, y)| a * x + b * y).collect();
        let lhs = run(&mix);
        let (r1, r2) = (run(&w1), run(&w2));
        for ((l, x), y) in lhs.data().iter().zip(r1.data()).zip(r2.data()) {
            assert!((l - (a * x + b * y)).abs() < 1e-12);
        }
    }

    #[test]
    fn per_teacher_parameter_audit() {
        let (_, store) = setup(4, 8);
        let prompts = store.names().filter(|n| n.ends_with(".w_prompt")).count();
        let projectors = store.names().filter(|n| n.ends_with(".projector.weight")).count();
        assert_eq!((prompts, projectors), (2, 2));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (m, mut store) = setup(4, 8);
        let mut rng = stream(4, "p");
        for b in &m.branches {
            for v in store.data_mut(b.prompt) {
                *v = 0.3 * normal(&mut rng);
            }
        }
        let f = features(4, 3, 5, 11);
        let spec = WavelengthSpec::new("msi", vec![0.49, 0.56, 0.665, 0.842]).unwrap();
        for idx in 0..2 {
            let t = &m.branches[idx].target;
            let probe =
                FeatureMap::new(Tensor::from_fn(vec![t.width, t.grid.0, t.grid.1], |i| {
                    ((i * 7) % 5) as f64 - 2.0
                }))
                .unwrap();
            let loss = |s: &ParameterStore| -> Result<f64> {
                let out = m.agglomerate(s, &f, &spec, idx)?;
                Ok(out.projected.values().data().iter().zip(probe.values().data()).map(|(a, b)| a * b).sum())
            };
            let out = m.agglomerate(&store, &f, &spec, idx).unwrap();
            let mut grads = Grads::zeros_like(&store);
            let df = m.backward(&store, &mut grads, &out, &probe).unwrap();
            let r = finite_difference_gradient(
                loss,
                &store,
                &grads,
                &FdOptions { step: 1e-5, ..FdOptions::default() },
            )
            .unwrap();
            assert!(r.max_rel_err() < 1e-4, "{:?}", r.worst());
            // input gradient
            for i in [0usize, 13, 41] {
                let eval = |delta: f64| {
                    let mut v = f.values().clone();
                    v.data_mut()[i] += delta;
                    let out = m.agglomerate(&store, &FeatureMap::new(v).unwrap(), &spec, idx).unwrap();
                    out.projected.values().data().iter().zip(probe.values().data()).map(|(a, b)| a * b).sum::<f64>()
                };
                let fd = (eval(1e-5) - eval(-1e-5)) / 2e-5;
                assert!((fd - df.values().data()[i]).abs() < 1e-6 * fd.abs().max(1.0));
            }
        }
    }
}
