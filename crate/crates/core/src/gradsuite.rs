//! Finite-difference audit of every objective on a small model: the
//! contrastive loss alone, each teacher's match loss alone, and the full
//! weighted objective, over a mixed batch of 3- and 5-channel images.

use alloc::string::String;
use alloc::vec::Vec;
use alloc::{format, vec};

use crate::hypernet::WavelengthSpec;
use crate::losses::LossWeights;
use crate::model::{ModelConfig, Objective, Sample, Student};
use crate::numerics::{finite_difference_gradient, FdOptions, GradReport, ParameterStore, Tensor};
use crate::rng::{normal, stream};
use crate::teachers::{TeacherKind, TeacherSet};
use crate::towers::MultimodalImage;
use crate::Result;

/// Largest relative error accepted by [`SuiteResult::passed`].
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOptions {
    pub model: ModelConfig,
    pub seed: u64,
    pub fd: FdOptions,
    /// Noise on the zero-initialized prompt weights so the modulation path
    /// carries signal.
    pub prompt_noise: f64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            model: ModelConfig::tiny(),
            seed: 0,
            fd: FdOptions {
                step: 1e-5,
                coords_per_param: Some(3),
                ..FdOptions::default()
            },
            prompt_noise: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteCase {
    pub objective: String,
    pub loss: f64,
    pub report: GradReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub cases: Vec<SuiteCase>,
}

impl SuiteResult {
    pub fn max_rel_err(&self) -> f64 {
        self.cases.iter().map(|c| c.report.max_rel_err()).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < TOLERANCE
    }
}

pub fn objectives() -> Vec<(String, Objective)> {
    let mut out = vec![(String::from("l_siglip"), Objective::contrastive_only())];
    for k in TeacherKind::ALL {
        out.push((format!("l_match/{}", k.name()), Objective::branch(k)));
    }
    out.push((String::from("total"), Objective::vect(LossWeights::default())));
    out
}

fn image(lambdas: &[f64], size: (usize, usize), seed: u64) -> Result<MultimodalImage> {
    let mut rng = stream(seed, "gradsuite/image");
    let c = lambdas.len();
    MultimodalImage::new(
        Tensor::from_fn(vec![c, size.0, size.1], |_| (0.5 + 0.2 * normal(&mut rng)).clamp(0.0, 1.0)),
        WavelengthSpec::new("gradsuite", lambdas.to_vec())?,
    )
}

/// The model, its parameters and a two-sample batch with teacher features.
pub fn setup(opts: &SuiteOptions) -> Result<(Student, ParameterStore, Vec<Sample>)> {
    let size = opts.model.vision.image_size;
    let teachers = TeacherSet::new(size, None)?;
    let (student, mut store) = Student::init(opts.model.clone(), &teachers.targets(), opts.seed)?;
    let mut rng = stream(opts.seed, "gradsuite/prompt");
    for br in &student.maka.branches {
        for v in store.data_mut(br.prompt) {
            *v = opts.prompt_noise * normal(&mut rng);
        }
    }
    let specs: [(&[f64], &str); 2] = [
        (&[0.665, 0.56, 0.49], "water occupies most of the image"),
        (&[0.49, 0.56, 0.665, 0.842, 1.61], "snow and road land types"),
    ];
    let mut samples = Vec::new();
    for (i, (l, caption)) in specs.iter().enumerate() {
        let img = image(l, size, opts.seed.wrapping_add(i as u64))?;
        let f = teachers.features(&img)?;
        let mut s = Sample::new(img, caption)?;
        for (slot, fm) in s.teacher.iter_mut().zip(f) {
            *slot = Some(fm);
        }
        samples.push(s);
    }
    Ok((student, store, samples))
}

pub fn run(opts: &SuiteOptions) -> Result<SuiteResult> {
    let (student, store, samples) = setup(opts)?;
    let batch: Vec<&Sample> = samples.iter().collect();
    let mut cases = Vec::new();
    for (name, obj) in objectives() {
        let (report, grads) = student.objective_grad(&store, &batch, obj)?;
        let loss = |s: &ParameterStore| Ok(student.objective_loss(s, &batch, obj)?.total);
        let fd = finite_difference_gradient(loss, &store, &grads, &opts.fd)?;
        cases.push(SuiteCase {
            objective: name,
            loss: report.total,
            report: fd,
        });
    }
    Ok(SuiteResult { cases })
}
