//! Linear checkpoint merging, the two-stage scheme and the ratio search.
//!
//! ```text
//! θ* = (1 − m1)·θ_base + m1·θ_rgb
//! θ  = (1 − m2)·θ*     + m2·θ_others
//! ```

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::checkpoint::{Checkpoint, CheckpointMeta, Record};
use crate::{Error, Result};

/// Ratios searched when none are given.
pub const DEFAULT_GRID: [f64; 7] = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0];

fn check_ratio(m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::config(format!("merge ratio {m} outside [0, 1]")));
    }
    Ok(())
}

/// `(1 − m)·a + m·b` on shared names. Names in only one input are copied
/// through unchanged; output order is `a`'s, then `b`-only names. Optimizer
/// state is never merged.
pub fn linear_merge(a: &Checkpoint, b: &Checkpoint, m: f64) -> Result<Checkpoint> {
    check_ratio(m)?;
    let mut records = Vec::with_capacity(a.records.len());
    for ra in &a.records {
        let rec = match b.get(&ra.name) {
            None => ra.clone(),
            Some(rb) if rb.shape != ra.shape => {
                return Err(Error::MergeConflict {
                    name: ra.name.clone(),
                    left: ra.shape.clone(),
                    right: rb.shape.clone(),
                })
            }
            Some(rb) => Record {
                name: ra.name.clone(),
                shape: ra.shape.clone(),
                data: ra
                    .data
                    .iter()
                    .zip(&rb.data)
                    .map(|(x, y)| (1.0 - m) * x + m * y)
                    .collect(),
            },
        };
        records.push(rec);
    }
    for rb in &b.records {
        if a.get(&rb.name).is_none() {
            records.push(rb.clone());
        }
    }
    Ok(Checkpoint {
        records,
        meta: CheckpointMeta::default(),
        optimizer: None,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct MergeSpec<'a> {
    pub base: &'a Checkpoint,
    pub rgb: &'a Checkpoint,
    pub others: &'a Checkpoint,
    pub m1: f64,
    pub m2: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStage {
    pub intermediate: Checkpoint,
    pub merged: Checkpoint,
}

pub fn two_stage_merge(spec: &MergeSpec<'_>) -> Result<TwoStage> {
    let intermediate = linear_merge(spec.base, spec.rgb, spec.m1)?;
    let merged = linear_merge(&intermediate, spec.others, spec.m2)?;
    Ok(TwoStage {
        intermediate,
        merged,
    })
}

/// Named scores for one candidate; the first entry is the primary metric.
pub type Metrics = Vec<(String, f64)>;

#[derive(Debug, Clone, PartialEq)]
pub struct RatioTable {
    pub rows: Vec<(f64, Metrics)>,
    pub selected: f64,
}

impl RatioTable {
    /// `m,<metric>,...` with one row per ratio.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("m");
        if let Some((_, metrics)) = self.rows.first() {
            for (name, _) in metrics {
                out.push(',');
                out.push_str(name);
            }
        }
        out.push('\n');
        for (m, metrics) in &self.rows {
            out.push_str(&format_value(*m));
            for (_, v) in metrics {
                out.push(',');
                out.push_str(&format_value(*v));
            }
            out.push('\n');
        }
        out
    }
}

/// Shortest decimal that parses back to the same f64.
pub fn format_value(v: f64) -> String {
    v.to_string()
}

/// Best primary metric; ties go to the larger ratio.
pub fn select_ratio(rows: &[(f64, Metrics)]) -> Result<f64> {
    let mut best: Option<(f64, f64)> = None;
    for (m, metrics) in rows {
        let score = metrics
            .first()
            .ok_or_else(|| Error::Empty("evaluation returned no metrics".into()))?
            .1;
        best = match best {
            Some((bm, bs)) if score < bs || (score == bs && *m < bm) => Some((bm, bs)),
            _ => Some((*m, score)),
        };
    }
    best.map(|(m, _)| m)
        .ok_or_else(|| Error::Empty("empty ratio grid".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearch {
    /// Over `m1` with `m2 = 0`.
    pub stage1: RatioTable,
    /// Over `m2` at the selected `m1`.
    pub stage2: RatioTable,
}

impl GridSearch {
    pub fn m1(&self) -> f64 {
        self.stage1.selected
    }

    pub fn m2(&self) -> f64 {
        self.stage2.selected
    }
}

pub fn grid_search<F>(
    base: &Checkpoint,
    rgb: &Checkpoint,
    others: &Checkpoint,
    grid: &[f64],
    mut eval_fn: F,
) -> Result<GridSearch>
where
    F: FnMut(&Checkpoint) -> Result<Metrics>,
{
    if grid.is_empty() {
        return Err(Error::Empty("empty ratio grid".into()));
    }
    for &m in grid {
        check_ratio(m)?;
    }
    let mut rows1 = Vec::with_capacity(grid.len());
    for &m1 in grid {
        let theta = linear_merge(base, rgb, m1)?;
        rows1.push((m1, eval_fn(&theta)?));
    }
    let m1 = select_ratio(&rows1)?;
    let star = linear_merge(base, rgb, m1)?;
    let mut rows2 = Vec::with_capacity(grid.len());
    for &m2 in grid {
        let theta = linear_merge(&star, others, m2)?;
        rows2.push((m2, eval_fn(&theta)?));
    }
    let m2 = select_ratio(&rows2)?;
    Ok(GridSearch {
        stage1: RatioTable { rows: rows1, selected: m1 },
        stage2: RatioTable { rows: rows2, selected: m2 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn ckpt(entries: &[(&str, Vec<f64>)]) -> Checkpoint {
        Checkpoint {
            records: entries
                .iter()
                .map(|(n, d)| Record {
                    name: (*n).into(),
                    shape: vec![d.len()],
                    data: d.clone(),
                })
                .collect(),
            ..Checkpoint::default()
        }
    }

    #[test]
    fn endpoints_and_midpoint() {
        let a = ckpt(&[("x", vec![1.0, -2.0]), ("only_a", vec![5.0])]);
        let b = ckpt(&[("x", vec![3.0, 0.5]), ("only_b", vec![7.0])]);
        let m0 = linear_merge(&a, &b, 0.0).unwrap();
        assert_eq!(m0.get("x").unwrap().data, vec![1.0, -2.0]);
        assert_eq!(m0.get("only_b").unwrap().data, vec![7.0]);
        assert_eq!(m0.get("only_a").unwrap().data, vec![5.0]);
        let m1 = linear_merge(&a, &b, 1.0).unwrap();
        assert_eq!(m1.get("x").unwrap().data, vec![3.0, 0.5]);
        let half = linear_merge(&a, &b, 0.5).unwrap();
        assert_eq!(half.get("x").unwrap().data[0], 2.0);
        assert_eq!(half.names().collect::<Vec<_>>(), vec!["x", "only_a", "only_b"]);
    }

    #[test]
    fn conflicts_and_bad_ratios() {
        let a = ckpt(&[("x", vec![1.0, 2.0])]);
        let b = ckpt(&[("x", vec![1.0])]);
        assert!(matches!(linear_merge(&a, &b, 0.5), Err(Error::MergeConflict { .. })));
        assert!(linear_merge(&a, &a, 1.5).is_err());
        assert!(linear_merge(&a, &a, f64::NAN).is_err());
    }

    #[test]
    fn two_stage_endpoints() {
        let base = ckpt(&[("x", vec![1.0])]);
        let rgb = ckpt(&[("x", vec![2.0])]);
        let others = ckpt(&[("x", vec![4.0])]);
        let run = |m1, m2| {
            two_stage_merge(&MergeSpec { base: &base, rgb: &rgb, others: &others, m1, m2 })
                .unwrap()
                .merged
                .get("x")
                .unwrap()
                .data[0]
        };
        assert_eq!(run(0.0, 0.0), 1.0);
        assert_eq!(run(0.3, 1.0), 4.0);
        assert!((run(0.9, 0.5) - (0.5 * (0.1 * 1.0 + 0.9 * 2.0) + 0.5 * 4.0)).abs() < 1e-15);
    }

    #[test]
    fn constant_metric_picks_largest_ratio() {
        let a = ckpt(&[("x", vec![1.0])]);
        let g = grid_search(&a, &a, &a, &DEFAULT_GRID, |_| Ok(vec![("acc".into(), 0.5)])).unwrap();
        assert_eq!((g.m1(), g.m2()), (1.0, 1.0));
        assert!(grid_search(&a, &a, &a, &[], |_| Ok(vec![])).is_err());
    }

    #[test]
    fn search_tables_and_csv() {
        let base = ckpt(&[("x", vec![0.0])]);
        let rgb = ckpt(&[("x", vec![1.0])]);
        let others = ckpt(&[("x", vec![-1.0])]);
        // peak at x = 0.7
        let eval = |c: &Checkpoint| {
            let x = c.get("x").unwrap().data[0];
            Ok(vec![("score".to_string(), -(x - 0.7).abs()), ("x".to_string(), x)])
        };
        let g = grid_search(&base, &rgb, &others, &DEFAULT_GRID, eval).unwrap();
        assert_eq!(g.m1(), 0.7);
        assert_eq!(g.m2(), 0.0);
        let csv = g.stage1.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("m,score,x"));
        assert_eq!(lines.next(), Some("0,-0.7,0"));
        assert_eq!(csv.lines().count(), 8);
    }
}
