//! Matching and reconstruction metrics.

use std::collections::HashMap;

use nalgebra::Point3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::recon::PointCloud;
use crate::scene::ClusterAssignment;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("NodeMismatch: {0}")]
    NodeMismatch(String),
    #[error("EmptyCloud: point cloud has no points")]
    EmptyCloud,
    #[error("scale must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("count lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

/// Fraction of nodes carrying the majority ground-truth label of their
/// estimated cluster. All-singleton clusterings score 1.
pub fn purity(est: &ClusterAssignment, gt: &ClusterAssignment) -> Result<f64, EvalError> {
    if est.len() != gt.len() {
        return Err(EvalError::NodeMismatch(format!(
            "{} estimated vs {} ground-truth nodes",
            est.len(),
            gt.len()
        )));
    }
    if est.is_empty() {
        return Err(EvalError::NodeMismatch("no nodes".into()));
    }
    let mut counts: Vec<HashMap<usize, usize>> = vec![HashMap::new(); est.k()];
    for (&e, &g) in est.labels().iter().zip(gt.labels()) {
        *counts[e].entry(g).or_default() += 1;
    }
    let correct: usize = counts
        .iter()
        .map(|c| c.values().copied().max().unwrap_or(0))
        .sum();
    Ok(correct as f64 / est.len() as f64)
}

/// Mean absolute difference between paired cluster counts.
pub fn cluster_count_mae(est: &[usize], gt: &[usize]) -> Result<f64, EvalError> {
    if est.len() != gt.len() {
        return Err(EvalError::LengthMismatch(est.len(), gt.len()));
    }
    if est.is_empty() {
        return Ok(0.0);
    }
    let total: usize = est.iter().zip(gt).map(|(&a, &b)| a.abs_diff(b)).sum();
    Ok(total as f64 / est.len() as f64)
}

/// Exact nearest-neighbour index over 3D points.
pub struct KdTree<'a> {
    points: &'a [Point3<f64>],
    nodes: Vec<KdNode>,
    root: Option<usize>,
}

struct KdNode {
    point: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

impl<'a> KdTree<'a> {
    pub fn new(points: &'a [Point3<f64>]) -> Self {
        let mut tree = Self {
            points,
            nodes: Vec::with_capacity(points.len()),
            root: None,
        };
        let mut idx: Vec<usize> = (0..points.len()).collect();
        tree.root = tree.build(&mut idx);
        tree
    }

    fn build(&mut self, idx: &mut [usize]) -> Option<usize> {
        if idx.is_empty() {
            return None;
        }
        let pts = self.points;
        let axis = (0..3)
            .map(|a| {
                let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                    (lo.min(pts[i][a]), hi.max(pts[i][a]))
                });
                (a, hi - lo)
            })
            .fold((0, -1.0), |best, (a, s)| if s > best.1 { (a, s) } else { best })
            .0;
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]));
        let point = idx[mid];
        let (lo, rest) = idx.split_at_mut(mid);
        let left = self.build(lo);
        let right = self.build(&mut rest[1..]);
        self.nodes.push(KdNode {
            point,
            axis,
            left,
            right,
        });
        Some(self.nodes.len() - 1)
    }

    /// Squared distance to and index of the nearest stored point.
    pub fn nearest(&self, q: &Point3<f64>) -> Option<(f64, usize)> {
        let mut best = (f64::INFINITY, usize::MAX);
        self.search(self.root, q, &mut best);
        self.root.map(|_| best)
    }

    fn search(&self, node: Option<usize>, q: &Point3<f64>, best: &mut (f64, usize)) {
        let Some(n) = node else { return };
        let node = &self.nodes[n];
        let p = &self.points[node.point];
        let d2 = (p - q).norm_squared();
        if d2 < best.0 || (d2 == best.0 && node.point < best.1) {
            *best = (d2, node.point);
        }
        let diff = q[node.axis] - p[node.axis];
        let (near, far) = if diff < 0.0 {
            (node.left, node.right)
        } else {
            (node.right, node.left)
        };
        self.search(near, q, best);
        if diff * diff <= best.0 {
            self.search(far, q, best);
        }
    }
}

fn mean_nn_distance(from: &[Point3<f64>], to: &[Point3<f64>]) -> f64 {
    let tree = KdTree::new(to);
    let d: Vec<f64> = from
        .par_iter()
        .map(|q| tree.nearest(q).map(|(d2, _)| d2.sqrt()).unwrap_or(f64::INFINITY))
        .collect();
    d.iter().sum::<f64>() / d.len() as f64
}

/// Symmetric mean nearest-neighbour distance between two clouds.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64, EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::EmptyCloud);
    }
    Ok(0.5 * (mean_nn_distance(&a.points, &b.points) + mean_nn_distance(&b.points, &a.points)))
}

pub fn normalize_error(d: f64, scale: f64) -> Result<f64, EvalError> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(EvalError::InvalidScale(scale));
    }
    Ok(d / scale)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub s_match: Option<f64>,
    pub e_k_abs: Option<f64>,
    pub chamfer: Option<f64>,
    pub chamfer_normalized: Option<f64>,
}
