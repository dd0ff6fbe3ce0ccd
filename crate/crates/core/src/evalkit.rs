//! Zero-shot classification, multi-label scoring and cross-modal retrieval.
//!
//! Every ranking is stable: among equal scores the lower index wins.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::losses::ContrastiveParams;
use crate::model::Student;
use crate::numerics::ParameterStore;
use crate::towers::MultimodalImage;
use crate::{Error, Result};

pub const DEFAULT_TEMPLATE: &str = "a satellite image of {class}.";

pub fn prompt(template: &str, class: &str) -> String {
    template.replace("{class}", class)
}

/// One unit-norm text embedding per class name.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPromptSet {
    pub names: Vec<String>,
    pub template: String,
    pub embeddings: Vec<Vec<f64>>,
}

impl ClassPromptSet {
    pub fn new(names: Vec<String>, template: &str, embeddings: Vec<Vec<f64>>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Empty("class prompt set".into()));
        }
        if names.len() != embeddings.len() {
            return Err(Error::shape(format!(
                "{} class names but {} embeddings",
                names.len(),
                embeddings.len()
            )));
        }
        let dim = embeddings[0].len();
        for (name, e) in names.iter().zip(&embeddings) {
            if e.len() != dim {
                return Err(Error::shape(format!("embedding for `{name}` has the wrong width")));
            }
            let n = crate::math::sqrt(dot(e, e));
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::config(format!("embedding for `{name}` is not unit norm ({n})")));
            }
        }
        Ok(ClassPromptSet {
            names,
            template: template.into(),
            embeddings,
        })
    }

    /// Encodes `template` filled with each class name.
    pub fn build(student: &Student, store: &ParameterStore, names: &[&str], template: &str) -> Result<Self> {
        let embeddings = names
            .iter()
            .map(|c| student.encode_text(store, &prompt(template, c)))
            .collect::<Result<Vec<_>>>()?;
        ClassPromptSet::new(names.iter().map(|s| String::from(*s)).collect(), template, embeddings)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-major `rows.len() × cols.len()` matrix of dot products. For unit
/// vectors these are cosine similarities.
pub fn similarity_matrix(rows: &[Vec<f64>], cols: &[Vec<f64>]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for r in rows {
        for c in cols {
            out.push(dot(r, c));
        }
    }
    out
}

/// Zero-based position of `target` in a stable descending sort of `scores`.
pub fn rank_of(scores: &[f64], target: usize) -> usize {
    let s = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < target))
        .count()
}

pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = j;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShot {
    pub predictions: Vec<usize>,
    pub top1: f64,
    pub top5: f64,
}

/// Scores a row-major `labels.len() × n_classes` similarity matrix.
pub fn zero_shot_from_similarities(sims: &[f64], n_classes: usize, labels: &[usize]) -> Result<ZeroShot> {
    if n_classes == 0 {
        return Err(Error::Empty("no classes".into()));
    }
    if labels.is_empty() {
        return Err(Error::Empty("no images".into()));
    }
    if sims.len() != labels.len() * n_classes {
        return Err(Error::shape("similarity matrix does not match labels × classes"));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::config(format!("label {l} out of range for {n_classes} classes")));
    }
    let mut predictions = Vec::with_capacity(labels.len());
    let (mut hit1, mut hit5) = (0usize, 0usize);
    for (row, &label) in sims.chunks_exact(n_classes).zip(labels) {
        predictions.push(argmax(row));
        let r = rank_of(row, label);
        hit1 += usize::from(r == 0);
        hit5 += usize::from(r < 5);
    }
    let n = labels.len() as f64;
    Ok(ZeroShot {
        predictions,
        top1: hit1 as f64 / n,
        top5: hit5 as f64 / n,
    })
}

pub fn zero_shot_classify(image_embeds: &[Vec<f64>], prompts: &ClassPromptSet, labels: &[usize]) -> Result<ZeroShot> {
    if image_embeds.len() != labels.len() {
        return Err(Error::shape("one label per image required"));
    }
    let sims = similarity_matrix(image_embeds, &prompts.embeddings);
    zero_shot_from_similarities(&sims, prompts.len(), labels)
}

/// Encodes images with the student and classifies them.
pub fn zero_shot_eval(
    student: &Student,
    store: &ParameterStore,
    images: &[&MultimodalImage],
    prompts: &ClassPromptSet,
    labels: &[usize],
) -> Result<ZeroShot> {
    let embeds = student.encode_images(store, images)?;
    zero_shot_classify(&embeds, prompts, labels)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiLabel {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Macro P/R/F1 from predicted and true label sets (`n × k`, row-major).
///
/// Averages run over classes with at least one true positive label. A class
/// never predicted has precision 0, and F1 is the mean of per-class F1 with
/// F1 = 0 whenever P + R = 0.
pub fn macro_prf(predicted: &[bool], truth: &[bool], n_classes: usize) -> Result<MultiLabel> {
    if n_classes == 0 || predicted.len() != truth.len() || !predicted.len().is_multiple_of(n_classes) {
        return Err(Error::shape("prediction and truth matrices differ"));
    }
    let (mut p, mut r, mut f, mut counted) = (0.0, 0.0, 0.0, 0usize);
    for k in 0..n_classes {
        let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
        for (pr, tr) in predicted.chunks_exact(n_classes).zip(truth.chunks_exact(n_classes)) {
            match (pr[k], tr[k]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fnn += 1,
                (false, false) => {}
            }
        }
        if tp + fnn == 0 {
            continue;
        }
        let pk = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let rk = tp as f64 / (tp + fnn) as f64;
        let fk = if pk + rk == 0.0 { 0.0 } else { 2.0 * pk * rk / (pk + rk) };
        p += pk;
        r += rk;
        f += fk;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Empty("no class has a positive label".into()));
    }
    let c = counted as f64;
    Ok(MultiLabel {
        precision: p / c,
        recall: r / c,
        f1: f / c,
    })
}

/// A class is predicted iff `t·cos + b > 0`, i.e. its sigmoid exceeds ½.
pub fn multilabel_predictions(sims: &[f64], cp: ContrastiveParams) -> Vec<bool> {
    let t = cp.temperature();
    sims.iter().map(|s| t * s + cp.bias > 0.0).collect()
}

pub fn multilabel_classify(
    image_embeds: &[Vec<f64>],
    prompts: &ClassPromptSet,
    cp: ContrastiveParams,
    labels: &[Vec<usize>],
) -> Result<MultiLabel> {
    if image_embeds.len() != labels.len() {
        return Err(Error::shape("one label set per image required"));
    }
    let k = prompts.len();
    let mut truth = alloc::vec![false; labels.len() * k];
    for (i, set) in labels.iter().enumerate() {
        for &l in set {
            if l >= k {
                return Err(Error::config(format!("label {l} out of range for {k} classes")));
            }
            truth[i * k + l] = true;
        }
    }
    let sims = similarity_matrix(image_embeds, &prompts.embeddings);
    macro_prf(&multilabel_predictions(&sims, cp), &truth, k)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecallAt {
    pub k: usize,
    pub image_to_text: f64,
    pub text_to_image: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub recalls: Vec<RecallAt>,
    /// Requested `k` values larger than the candidate pool.
    pub skipped: Vec<usize>,
}

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// Recall@k from a square similarity matrix whose diagonal holds the mates.
pub fn recall_from_similarities(sims: &[f64], n: usize, ks: &[usize]) -> Result<Retrieval> {
    if n == 0 {
        return Err(Error::Empty("no pairs".into()));
    }
    if sims.len() != n * n {
        return Err(Error::shape("similarity matrix is not square"));
    }
    let mut i2t = Vec::with_capacity(n);
    let mut t2i = Vec::with_capacity(n);
    let mut col = alloc::vec![0.0; n];
    for i in 0..n {
        i2t.push(rank_of(&sims[i * n..(i + 1) * n], i));
        for (j, c) in col.iter_mut().enumerate() {
            *c = sims[j * n + i];
        }
        t2i.push(rank_of(&col, i));
    }
    let frac = |ranks: &[usize], k: usize| ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64;
    let mut out = Retrieval {
        recalls: Vec::new(),
        skipped: Vec::new(),
    };
    for &k in ks {
        if k == 0 || k > n {
            out.skipped.push(k);
            continue;
        }
        out.recalls.push(RecallAt {
            k,
            image_to_text: frac(&i2t, k),
            text_to_image: frac(&t2i, k),
        });
    }
    Ok(out)
}

pub fn retrieval_recall(image_embeds: &[Vec<f64>], text_embeds: &[Vec<f64>], ks: &[usize]) -> Result<Retrieval> {
    if image_embeds.len() != text_embeds.len() {
        return Err(Error::shape("image and text counts differ"));
    }
    let sims = similarity_matrix(image_embeds, text_embeds);
    recall_from_similarities(&sims, image_embeds.len(), ks)
}

/// Flat metric bundle; absent entries were not computed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub multilabel: Option<MultiLabel>,
    pub recall: Vec<RecallAt>,
}

impl MetricReport {
    /// `(name, value)` pairs in a fixed order, e.g. `top1` or `i2t_r@5`.
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        if let Some(v) = self.top1 {
            out.push(("top1".into(), v));
        }
        if let Some(v) = self.top5 {
            out.push(("top5".into(), v));
        }
        if let Some(m) = self.multilabel {
            out.push(("precision".into(), m.precision));
            out.push(("recall".into(), m.recall));
            out.push(("f1".into(), m.f1));
        }
        for r in &self.recall {
            out.push((format!("i2t_r@{}", r.k), r.image_to_text));
        }
        for r in &self.recall {
            out.push((format!("t2i_r@{}", r.k), r.text_to_image));
        }
        out
    }

    /// Recall never drops as k grows, in either direction.
    pub fn recall_is_monotone(&self) -> bool {
        let mut sorted = self.recall.clone();
        sorted.sort_by_key(|r| r.k);
        sorted
            .windows(2)
            .all(|w| w[1].image_to_text >= w[0].image_to_text && w[1].text_to_image >= w[0].text_to_image)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;
    use rand::Rng;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = dot(&v, &v).sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn basis(k: usize, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[k] = 1.0;
        v
    }

    fn prompts(k: usize) -> ClassPromptSet {
        let names = (0..k).map(|i| format!("c{i}")).collect();
        ClassPromptSet::new(names, DEFAULT_TEMPLATE, (0..k).map(|i| basis(i, k)).collect()).unwrap()
    }

    #[test]
    fn template_fill() {
        assert_eq!(prompt(DEFAULT_TEMPLATE, "forest"), "a satellite image of forest.");
    }

    #[test]
    fn orthogonal_prompts_classify_exactly() {
        let p = prompts(4);
        let imgs: Vec<_> = [2, 0, 3].iter().map(|&c| basis(c, 4)).collect();
        let z = zero_shot_classify(&imgs, &p, &[2, 0, 3]).unwrap();
        assert_eq!(z.predictions, vec![2, 0, 3]);
        assert_eq!((z.top1, z.top5), (1.0, 1.0));
        assert_eq!(similarity_matrix(&imgs[..1], &p.embeddings)[2], 1.0);
    }

    #[test]
    fn single_class_and_ties() {
        let p = prompts(1);
        let z = zero_shot_classify(&[vec![-1.0]], &p, &[0]).unwrap();
        assert_eq!(z.top1, 1.0);
        // all-equal row: lowest index wins
        let z = zero_shot_from_similarities(&[0.3; 6], 6, &[0]).unwrap();
        assert_eq!(z.predictions, vec![0]);
        let z = zero_shot_from_similarities(&[0.3; 6], 6, &[5]).unwrap();
        assert_eq!((z.top1, z.top5), (0.0, 0.0));
    }

    #[test]
    fn rescaling_keeps_predictions() {
        let mut rng = crate::rng::stream(3, "t");
        let sims: Vec<f64> = (0..50).map(|_| rng.random::<f64>() - 0.5).collect();
        let labels: Vec<usize> = (0..10).map(|i| i % 5).collect();
        let a = zero_shot_from_similarities(&sims, 5, &labels).unwrap();
        let scaled: Vec<f64> = sims.iter().map(|s| s * 7.5).collect();
        assert_eq!(a, zero_shot_from_similarities(&scaled, 5, &labels).unwrap());
    }

    #[test]
    fn prompt_set_validation() {
        assert!(ClassPromptSet::new(vec!["a".into()], DEFAULT_TEMPLATE, vec![vec![2.0]]).is_err());
        assert!(ClassPromptSet::new(vec![], DEFAULT_TEMPLATE, vec![]).is_err());
    }

    #[test]
    fn multilabel_edges() {
        let truth = [true, false, true, false, true, false];
        let perfect = macro_prf(&truth, &truth, 3).unwrap();
        assert_eq!((perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0));
        let none = macro_prf(&[false; 6], &truth, 3).unwrap();
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn multilabel_counting_oracle() {
        let mut rng = crate::rng::stream(11, "t");
        let (n, k) = (13, 4);
        let pred: Vec<bool> = (0..n * k).map(|_| rng.random::<bool>()).collect();
        let truth: Vec<bool> = (0..n * k).map(|_| rng.random::<bool>()).collect();
        let got = macro_prf(&pred, &truth, k).unwrap();
        let (mut ps, mut rs, mut fs, mut c) = (0.0, 0.0, 0.0, 0.0);
        for j in 0..k {
            let col = |m: &[bool], i: usize| m[i * k + j];
            let tp = (0..n).filter(|&i| col(&pred, i) && col(&truth, i)).count() as f64;
            let pp = (0..n).filter(|&i| col(&pred, i)).count() as f64;
            let ap = (0..n).filter(|&i| col(&truth, i)).count() as f64;
            if ap == 0.0 {
                continue;
            }
            let p = if pp == 0.0 { 0.0 } else { tp / pp };
            let r = tp / ap;
            ps += p;
            rs += r;
            fs += if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
            c += 1.0;
        }
        assert!((got.precision - ps / c).abs() < 1e-15);
        assert!((got.recall - rs / c).abs() < 1e-15);
        assert!((got.f1 - fs / c).abs() < 1e-15);
    }

    #[test]
    fn logit_and_probability_thresholds_agree() {
        let mut rng = crate::rng::stream(5, "t");
        let cp = ContrastiveParams {
            log_temperature: 1.3,
            bias: -0.4,
        };
        let sims: Vec<f64> = (0..200).map(|_| 2.0 * rng.random::<f64>() - 1.0).collect();
        let by_logit = multilabel_predictions(&sims, cp);
        let by_prob: Vec<bool> = sims
            .iter()
            .map(|s| 1.0 / (1.0 + libm::exp(-(cp.temperature() * s + cp.bias))) > 0.5)
            .collect();
        assert_eq!(by_logit, by_prob);
    }

    #[test]
    fn identity_and_reversed_retrieval() {
        let n = 10;
        let e: Vec<_> = (0..n).map(|i| basis(i, n)).collect();
        let r = retrieval_recall(&e, &e, &DEFAULT_KS).unwrap();
        assert!(r.recalls.iter().all(|x| x.image_to_text == 1.0 && x.text_to_image == 1.0));
        let rev: Vec<_> = e.iter().rev().cloned().collect();
        let r = retrieval_recall(&e, &rev, &[1]).unwrap();
        assert_eq!(r.recalls[0].image_to_text, 0.0);
        let relabeled: Vec<_> = rev.iter().rev().cloned().collect();
        let r = retrieval_recall(&e, &relabeled, &[1]).unwrap();
        assert_eq!(r.recalls[0].image_to_text, 1.0);
    }

    #[test]
    fn oversized_k_is_skipped() {
        let e: Vec<_> = (0..3).map(|i| basis(i, 3)).collect();
        let r = retrieval_recall(&e, &e, &DEFAULT_KS).unwrap();
        assert_eq!(r.recalls.len(), 1);
        assert_eq!(r.skipped, vec![5, 10]);
    }

    #[test]
    fn random_embeddings_recall_near_chance() {
        let (n, d) = (100, 16);
        let mut total = 0.0;
        for seed in 0..10 {
            let mut rng = crate::rng::stream(seed, "r");
            let mut draw = || unit((0..d).map(|_| crate::rng::normal(&mut rng)).collect());
            let a: Vec<_> = (0..n).map(|_| draw()).collect();
            let b: Vec<_> = (0..n).map(|_| draw()).collect();
            let r = retrieval_recall(&a, &b, &DEFAULT_KS).unwrap();
            let rep = MetricReport { recall: r.recalls.clone(), ..MetricReport::default() };
            assert!(rep.recall_is_monotone());
            total += r.recalls[0].image_to_text;
        }
        assert!((total / 10.0 - 0.01).abs() <= 0.02);
    }

    #[test]
    fn report_entries_order() {
        let rep = MetricReport {
            top1: Some(0.5),
            top5: Some(0.9),
            multilabel: None,
            recall: vec![RecallAt { k: 1, image_to_text: 0.2, text_to_image: 0.3 }],
        };
        let names: Vec<String> = rep.entries().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["top1", "top5", "i2t_r@1", "t2i_r@1"]);
    }
}
