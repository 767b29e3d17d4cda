//! Binary load-path tree: each edge applies a positive strain increment along
//! one axis while the other axis is held.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::constitutive::StrainTotals;
use crate::error::{Error, Result};

/// Children per tree node.
pub const TREE_ARITY: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Axis {
    E11,
    E22,
}

impl Axis {
    /// Candidate order; also the tie-break order for step selection.
    pub const BOTH: [Axis; TREE_ARITY] = [Axis::E11, Axis::E22];

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::E11 => "e11",
            Axis::E22 => "e22",
        }
    }

    fn child_offset(self) -> usize {
        match self {
            Axis::E11 => 1,
            Axis::E22 => 2,
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "e11" | "eps11" => Ok(Axis::E11),
            "e22" | "eps22" => Ok(Axis::E22),
            _ => Err(Error::Config(alloc::format!("unknown axis `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadStep {
    pub axis: Axis,
    /// Strain increment magnitude, positive.
    pub delta_eps: f64,
}

/// An ordered sequence of load steps sharing one strain increment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadPath {
    pub strain_increment: f64,
    pub axes: Vec<Axis>,
}

impl LoadPath {
    pub fn new(strain_increment: f64, axes: impl IntoIterator<Item = Axis>) -> Self {
        LoadPath {
            strain_increment,
            axes: axes.into_iter().collect(),
        }
    }

    pub fn empty(strain_increment: f64) -> Self {
        Self::new(strain_increment, [])
    }

    pub fn len(&self) -> usize {
        self.axes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.axes.is_empty()
    }

    pub fn push(&mut self, axis: Axis) {
        self.axes.push(axis);
    }

    pub fn steps(&self) -> impl Iterator<Item = LoadStep> + '_ {
        self.axes.iter().map(|&axis| LoadStep {
            axis,
            delta_eps: self.strain_increment,
        })
    }

    /// Tree node reached by this path.
    pub fn node(&self) -> usize {
        node_id(&self.axes)
    }

    /// Comma separated axes, e.g. `e11,e22,e11`.
    pub fn label(&self) -> String {
        path_label(&self.axes)
    }

    pub fn parse(strain_increment: f64, s: &str) -> Result<Self> {
        let axes = if s.trim().is_empty() {
            Vec::new()
        } else {
            s.split(',').map(Axis::from_str).collect::<Result<Vec<_>>>()?
        };
        Ok(LoadPath::new(strain_increment, axes))
    }
}

pub fn path_label(axes: &[Axis]) -> String {
    let mut out = String::new();
    for (i, a) in axes.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(a.as_str());
    }
    out
}

/// Binary-heap numbering: root 0, children of `k` are `2k+1` (e11) and
/// `2k+2` (e22).
pub fn node_id(prefix: &[Axis]) -> usize {
    prefix
        .iter()
        .fold(0, |k, a| TREE_ARITY * k + a.child_offset())
}

/// Depth of a node (number of steps from the root).
pub fn node_depth(node: usize) -> usize {
    let mut depth = 0;
    let mut k = node;
    while k > 0 {
        k = (k - 1) / TREE_ARITY;
        depth += 1;
    }
    depth
}

/// Number of non-root nodes of a tree of the given depth.
pub fn node_count(depth: usize) -> usize {
    (1usize << (depth + 1)) - 2
}

/// All `2^depth` paths in lexicographic order (e11 before e22).
pub fn enumerate_paths(depth: usize, strain_increment: f64) -> Vec<LoadPath> {
    (0..1usize << depth)
        .map(|code| {
            let axes = (0..depth).map(|i| {
                if (code >> (depth - 1 - i)) & 1 == 0 {
                    Axis::E11
                } else {
                    Axis::E22
                }
            });
            LoadPath::new(strain_increment, axes)
        })
        .collect()
}

/// Total in-plane strains after each increment of one load step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StrainHistory {
    pub eps11: Vec<f64>,
    pub eps22: Vec<f64>,
}

impl StrainHistory {
    pub fn len(&self) -> usize {
        self.eps11.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eps11.is_empty()
    }
}

/// Linear ramp of the loaded axis over `increments` equal sub-increments; the
/// other axis stays at its accumulated value.
pub fn strain_history(start: StrainTotals, step: &LoadStep, increments: usize) -> StrainHistory {
    let m = increments.max(1);
    let ramp = |base: f64, i: usize| base + step.delta_eps * (i as f64) / (m as f64);
    let (eps11, eps22) = match step.axis {
        Axis::E11 => (
            (1..=m).map(|i| ramp(start.eps11, i)).collect(),
            alloc::vec![start.eps22; m],
        ),
        Axis::E22 => (
            alloc::vec![start.eps11; m],
            (1..=m).map(|i| ramp(start.eps22, i)).collect(),
        ),
    };
    StrainHistory { eps11, eps22 }
}

/// Where stresses are observed inside each load step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasurementSchedule {
    pub points_per_step: usize,
    pub increments_per_step: usize,
}

impl MeasurementSchedule {
    pub fn new(points_per_step: usize, increments_per_step: usize) -> Result<Self> {
        if points_per_step == 0 || points_per_step > increments_per_step {
            return Err(Error::Config(alloc::format!(
                "need 1 <= points_per_step ({points_per_step}) <= increments_per_step ({increments_per_step})"
            )));
        }
        Ok(MeasurementSchedule {
            points_per_step,
            increments_per_step,
        })
    }

    /// 1-based increment indices of the measurements within a step; the last
    /// always coincides with the node.
    pub fn indices(&self) -> Vec<usize> {
        measurement_indices(self)
    }
}

/// `floor(j*m/p + 1/2)` for `j = 1..=p`.
pub fn measurement_indices(schedule: &MeasurementSchedule) -> Vec<usize> {
    let p = schedule.points_per_step;
    let m = schedule.increments_per_step;
    (1..=p).map(|j| (2 * j * m + p) / (2 * p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_numbering() {
        assert_eq!(node_id(&[]), 0);
        assert_eq!(node_id(&[Axis::E11, Axis::E22]), 4);
        assert_eq!(node_id(&[Axis::E11, Axis::E22, Axis::E11]), 9);
        assert_eq!(node_depth(0), 0);
        assert_eq!(node_depth(4), 2);
        assert_eq!(node_depth(9), 3);
        assert_eq!(node_count(5), 62);
        assert_eq!(node_count(7), 254);
    }

    #[test]
    fn node_id_is_a_bijection() {
        let depth = 6;
        let mut seen = alloc::vec![false; node_count(depth) + 1];
        for d in 0..=depth {
            for p in enumerate_paths(d, 0.01) {
                let k = p.node();
                assert!(!seen[k], "node {k} hit twice");
                seen[k] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn enumeration() {
        let one = enumerate_paths(1, 0.01);
        assert_eq!(one.len(), 2);
        assert_eq!(one[0].axes, [Axis::E11]);
        assert_eq!(one[1].axes, [Axis::E22]);
        let two: Vec<String> = enumerate_paths(2, 0.01).iter().map(LoadPath::label).collect();
        assert_eq!(two, ["e11,e11", "e11,e22", "e22,e11", "e22,e22"]);
        assert_eq!(enumerate_paths(7, 0.02).len(), 128);
    }

    #[test]
    fn strain_ramps() {
        let step = LoadStep {
            axis: Axis::E11,
            delta_eps: 0.01,
        };
        let h = strain_history(StrainTotals::default(), &step, 100);
        assert_eq!(h.len(), 100);
        assert!((h.eps11[0] - 1e-4).abs() < 1e-18);
        assert!((h.eps11[1] - 2e-4).abs() < 1e-18);
        assert_eq!(h.eps11[99], 0.01);
        assert!(h.eps22.iter().all(|&e| e == 0.0));

        let start = StrainTotals {
            eps11: 0.01,
            eps22: 0.0,
        };
        let step = LoadStep {
            axis: Axis::E22,
            delta_eps: 0.01,
        };
        let h = strain_history(start, &step, 100);
        assert!(h.eps11.iter().all(|&e| e == 0.01));
        assert_eq!(h.eps22[99], 0.01);

        let step = LoadStep {
            axis: Axis::E22,
            delta_eps: 0.02,
        };
        let h = strain_history(StrainTotals::default(), &step, 100);
        assert_eq!(h.eps22[99], 0.02);
    }

    #[test]
    fn total_strain_after_all_steps() {
        for (inc, depth, total) in [(0.01, 5, 0.05), (0.02, 7, 0.14)] {
            let mut totals = StrainTotals::default();
            for step in LoadPath::new(inc, core::iter::repeat(Axis::E11).take(depth)).steps() {
                let h = strain_history(totals, &step, 100);
                totals.eps11 = *h.eps11.last().unwrap();
            }
            assert!((totals.eps11 - total).abs() < 1e-15);
        }
    }

    #[test]
    fn schedule_indices() {
        let s = |p, m| MeasurementSchedule::new(p, m).unwrap().indices();
        assert_eq!(s(1, 100), [100]);
        assert_eq!(s(1, 1), [1]);
        let three = s(3, 100);
        assert_eq!(three, [33, 67, 100]);
        for (j, &idx) in three.iter().enumerate() {
            let exact = (j + 1) as f64 * 100.0 / 3.0;
            assert!((idx as f64 - exact).abs() <= 0.5);
        }
        assert!(MeasurementSchedule::new(0, 100).is_err());
        assert!(MeasurementSchedule::new(5, 4).is_err());
    }

    #[test]
    fn labels_round_trip() {
        let p = LoadPath::parse(0.01, "e11,e22,e11").unwrap();
        assert_eq!(p.axes, [Axis::E11, Axis::E22, Axis::E11]);
        assert_eq!(p.label(), "e11,e22,e11");
        assert!(LoadPath::parse(0.01, "e11,e33").is_err());
        assert!(LoadPath::parse(0.01, "").unwrap().is_empty());
    }
}
