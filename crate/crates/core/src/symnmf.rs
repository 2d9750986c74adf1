//! Symmetric nonnegative matrix factorization `W ≈ H·Hᵀ`, row-argmax
//! cluster extraction and cluster-count selection by minimum size spread.

use log::{debug, warn};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::matching::MatchGraph;
use crate::scene::ClusterAssignment;
use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NmfError {
    #[error("InvalidK: k = {k} is outside [1, {n}]")]
    InvalidK { k: usize, n: usize },
    #[error("AsymmetricInput: max |W - Wᵀ| = {0}")]
    AsymmetricInput(f64),
    #[error("input matrix must be square, finite and nonnegative")]
    InvalidInput,
    #[error("empty k range {lo}..={hi}")]
    EmptyRange { lo: usize, hi: usize },
    #[error("options need max_iters >= 1, restarts >= 1 and rel_tol > 0")]
    InvalidOptions,
    #[error("expected {expected} node keys, got {got}")]
    KeyCount { expected: usize, got: usize },
}

const DENOM_GUARD: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SymnmfOptions {
    pub max_iters: usize,
    /// Stop once the relative objective change falls below this.
    pub rel_tol: f64,
    pub restarts: usize,
    pub seed: u64,
    /// Keep the per-iteration objective of every restart.
    pub record_trace: bool,
}

impl Default for SymnmfOptions {
    fn default() -> Self {
        Self {
            max_iters: 300,
            rel_tol: 1e-5,
            restarts: 10,
            seed: 0,
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymnmfResult {
    /// `n × k`, elementwise nonnegative.
    pub h: DMatrix<f64>,
    /// `‖W − HHᵀ‖²_F` of `h`.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Restart that produced `h`.
    pub restart: usize,
    /// Objective after initialization and after every update, per restart.
    /// Empty unless `record_trace` is set.
    pub traces: Vec<Vec<f64>>,
}

fn validate(w: &DMatrix<f64>, k: usize) -> Result<(), NmfError> {
    let n = w.nrows();
    if w.ncols() != n || w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(NmfError::InvalidInput);
    }
    if k < 1 || k > n {
        return Err(NmfError::InvalidK { k, n });
    }
    let mut asym: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((w[(i, j)] - w[(j, i)]).abs());
        }
    }
    if asym > SYMMETRY_TOL {
        return Err(NmfError::AsymmetricInput(asym));
    }
    Ok(())
}

/// `‖W − HHᵀ‖²_F` expanded as `‖W‖² − 2⟨H, WH⟩ + ‖HᵀH‖²`, reusing `WH` and
/// `HᵀH` from the update step.
fn objective_from_products(
    w_norm_sq: f64,
    h: &DMatrix<f64>,
    wh: &DMatrix<f64>,
    hth: &DMatrix<f64>,
) -> f64 {
    (w_norm_sq - 2.0 * h.dot(wh) + hth.norm_squared()).max(0.0)
}

/// Direct evaluation of `‖W − HHᵀ‖²_F`.
pub fn objective(w: &DMatrix<f64>, h: &DMatrix<f64>) -> f64 {
    (w - h * h.transpose()).norm_squared()
}

/// Initial factor with entries in `(0, 2·sqrt(mean(W)/k)]`. Entry `(i, c)`
/// depends only on `(seed, k, restart, keys[i], c)`.
fn initial_factor(w: &DMatrix<f64>, k: usize, restart: usize, seed: u64, keys: &[u64]) -> DMatrix<f64> {
    let n = w.nrows();
    let scale = 2.0 * (w.mean() / k as f64).sqrt();
    DMatrix::from_fn(n, k, |i, c| {
        scale
            * seed::unit_open_closed(
                seed,
                &[seed::stage::SYMNMF, k as u64, restart as u64, keys[i], c as u64],
            )
    })
}

struct Run {
    h: DMatrix<f64>,
    objective: f64,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
}

fn single_run(w: &DMatrix<f64>, mut h: DMatrix<f64>, opts: &SymnmfOptions) -> Run {
    let w_norm_sq = w.norm_squared();
    let mut trace = Vec::new();
    let mut prev: Option<f64> = None;
    let mut iterations = 0;
    loop {
        let wh = w * &h;
        let hth = h.transpose() * &h;
        let obj = objective_from_products(w_norm_sq, &h, &wh, &hth);
        if opts.record_trace {
            trace.push(obj);
        }
        let converged = obj == 0.0
            || prev.is_some_and(|p| (p - obj).abs() <= opts.rel_tol * p.max(f64::MIN_POSITIVE));
        if converged || iterations == opts.max_iters {
            return Run {
                h,
                objective: obj,
                iterations,
                converged,
                trace,
            };
        }
        prev = Some(obj);
        let denom = &h * &hth;
        h.zip_zip_apply(&wh, &denom, |hv, num, den| {
            *hv *= 0.5 + 0.5 * num / den.max(DENOM_GUARD);
        });
        iterations += 1;
    }
}

/// Factorizes `w` with `opts.restarts` seeded restarts and keeps the lowest
/// objective (ties go to the earlier restart).
pub fn symnmf(w: &DMatrix<f64>, k: usize, opts: &SymnmfOptions) -> Result<SymnmfResult, NmfError> {
    let keys: Vec<u64> = (0..w.nrows() as u64).collect();
    symnmf_keyed(w, k, opts, &keys)
}

/// [`symnmf`] with explicit per-node keys for the random initialization, so
/// that permuting nodes together with their keys permutes the result.
pub fn symnmf_keyed(
    w: &DMatrix<f64>,
    k: usize,
    opts: &SymnmfOptions,
    keys: &[u64],
) -> Result<SymnmfResult, NmfError> {
    validate(w, k)?;
    if keys.len() != w.nrows() {
        return Err(NmfError::KeyCount {
            expected: w.nrows(),
            got: keys.len(),
        });
    }
    if opts.max_iters == 0 || opts.restarts == 0 || !(opts.rel_tol > 0.0) {
        return Err(NmfError::InvalidOptions);
    }
    let runs: Vec<Run> = (0..opts.restarts)
        .into_par_iter()
        .map(|r| single_run(w, initial_factor(w, k, r, opts.seed, keys), opts))
        .collect();
    let best = runs
        .iter()
        .enumerate()
        .fold(0, |best, (r, run)| if run.objective < runs[best].objective { r } else { best });
    let traces = if opts.record_trace {
        runs.iter().map(|r| r.trace.clone()).collect()
    } else {
        Vec::new()
    };
    let run = runs.into_iter().nth(best).expect("at least one restart");
    Ok(SymnmfResult {
        h: run.h,
        objective: run.objective,
        iterations: run.iterations,
        converged: run.converged,
        restart: best,
        traces,
    })
}

/// Column of the largest entry per row; ties pick the lowest column and
/// all-zero rows fall back to column 0.
pub fn argmax_labels(h: &DMatrix<f64>) -> Vec<usize> {
    h.row_iter()
        .enumerate()
        .map(|(i, row)| {
            let (best, max) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (c, &v)| if v > acc.1 { (c, v) } else { acc });
            if max <= 0.0 {
                debug!("row {i} of H is all zero; assigned to cluster 0");
            }
            best
        })
        .collect()
}

/// Row-argmax cluster ids, compacted to `0..k`.
pub fn assign_clusters(h: &DMatrix<f64>) -> ClusterAssignment {
    ClusterAssignment::from_labels(argmax_labels(h))
}

/// Population standard deviation of cluster sizes over exactly `k`
/// clusters, counting empty ones as size 0.
pub fn cluster_size_std(labels: &[usize], k: usize) -> f64 {
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    let mean = labels.len() as f64 / k as f64;
    let var = sizes
        .iter()
        .map(|&s| (mean - s as f64).powi(2))
        .sum::<f64>()
        / k as f64;
    var.sqrt()
}

/// One row of the model-selection table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KDiagnostics {
    pub k: usize,
    pub objective: f64,
    pub size_std: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KSelection {
    pub k_opt: usize,
    pub assignment: ClusterAssignment,
    pub objective: f64,
    pub size_std: f64,
    /// Evaluated candidates in increasing `k`. The sweep stops at the first
    /// `k` whose clusters all have equal size, since no later `k` can win.
    pub table: Vec<KDiagnostics>,
}

/// Picks the `k` whose clustering has the smallest cluster-size standard
/// deviation; ties go to the smaller `k`.
pub fn select_k(
    w: &DMatrix<f64>,
    k_range: std::ops::RangeInclusive<usize>,
    opts: &SymnmfOptions,
) -> Result<KSelection, NmfError> {
    let keys: Vec<u64> = (0..w.nrows() as u64).collect();
    select_k_keyed(w, k_range, opts, &keys)
}

pub fn select_k_keyed(
    w: &DMatrix<f64>,
    k_range: std::ops::RangeInclusive<usize>,
    opts: &SymnmfOptions,
    keys: &[u64],
) -> Result<KSelection, NmfError> {
    let (lo, hi) = (*k_range.start(), *k_range.end());
    if lo > hi {
        return Err(NmfError::EmptyRange { lo, hi });
    }
    let mut best: Option<KSelection> = None;
    let mut table = Vec::new();
    for k in k_range {
        let res = symnmf_keyed(w, k, opts, keys)?;
        let labels = argmax_labels(&res.h);
        let std = cluster_size_std(&labels, k);
        debug!("k = {k}: objective {:.6e}, size std {std:.4}", res.objective);
        table.push(KDiagnostics {
            k,
            objective: res.objective,
            size_std: std,
            iterations: res.iterations,
            converged: res.converged,
        });
        if best.as_ref().is_none_or(|b| std < b.size_std) {
            best = Some(KSelection {
                k_opt: k,
                assignment: ClusterAssignment::from_labels(labels),
                objective: res.objective,
                size_std: std,
                table: Vec::new(),
            });
        }
        if std == 0.0 {
            break;
        }
    }
    let mut best = best.expect("range is nonempty");
    best.table = table;
    Ok(best)
}

/// How the number of clusters is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KMode {
    /// Default range: from the largest per-view instance count up to
    /// `min(|V|, 3·that + 8)`.
    Auto,
    Range(usize, usize),
    /// Known number of objects.
    Fixed(usize),
}

/// The default search range for a graph.
pub fn default_k_range(graph: &MatchGraph) -> std::ops::RangeInclusive<usize> {
    let mut per_view: std::collections::BTreeMap<u32, usize> = Default::default();
    for &(v, _) in graph.keys() {
        *per_view.entry(v).or_default() += 1;
    }
    let lo = per_view.values().copied().max().unwrap_or(0).max(1);
    let hi = graph.node_count().min(3 * lo + 8);
    lo..=hi
}

/// Clusters a match graph end to end. Initializations are keyed on each
/// node's `(view, instance)` so results do not depend on node order.
pub fn cluster_scene(
    graph: &MatchGraph,
    mode: KMode,
    opts: &SymnmfOptions,
) -> Result<KSelection, NmfError> {
    let n = graph.node_count();
    let w = graph.weights();
    if n == 0 {
        return Ok(KSelection {
            k_opt: 0,
            assignment: ClusterAssignment::from_labels(Vec::new()),
            objective: 0.0,
            size_std: 0.0,
            table: Vec::new(),
        });
    }
    if w.iter().all(|&v| v == 0.0) {
        warn!("match graph has no edges; every node becomes its own cluster");
        return Ok(KSelection {
            k_opt: n,
            assignment: ClusterAssignment::singletons(n),
            objective: 0.0,
            size_std: 0.0,
            table: Vec::new(),
        });
    }
    let range = match mode {
        KMode::Auto => default_k_range(graph),
        KMode::Range(lo, hi) => lo..=hi,
        KMode::Fixed(k) => k..=k,
    };
    let keys: Vec<u64> = graph
        .keys()
        .iter()
        .map(|&(view, instance)| ((view as u64) << 32) | instance as u64)
        .collect();
    select_k_keyed(w, range, opts, &keys)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_blocks() -> DMatrix<f64> {
        DMatrix::from_fn(6, 6, |i, j| if i / 3 == j / 3 { 0.9 } else { 0.0 })
    }

    #[test]
    fn argmax_rules() {
        let h = DMatrix::from_row_slice(3, 3, &[0.1, 0.9, 0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(argmax_labels(&h), vec![1, 0, 0]);
        assert_eq!(assign_clusters(&h).labels(), &[1, 0, 0]);
    }

    #[test]
    fn recovers_two_blocks() {
        let w = two_blocks();
        let res = symnmf(&w, 2, &SymnmfOptions::default()).unwrap();
        let labels = assign_clusters(&res.h);
        assert_eq!(labels.k(), 2);
        assert_eq!(labels.label(0), labels.label(2));
        assert_eq!(labels.label(3), labels.label(5));
        assert_ne!(labels.label(0), labels.label(3));
        let ideal = DMatrix::from_fn(6, 2, |i, c| if i / 3 == c { 0.9f64.sqrt() } else { 0.0 });
        assert!(res.objective <= objective(&w, &ideal) + 1e-9);
        assert!(res.h.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_matrix_is_fine() {
        let w = DMatrix::zeros(4, 4);
        let res = symnmf(&w, 2, &SymnmfOptions::default()).unwrap();
        assert_eq!(res.objective, 0.0);
        assert!(res.h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_errors() {
        let w = two_blocks();
        assert_eq!(symnmf(&w, 0, &SymnmfOptions::default()), Err(NmfError::InvalidK { k: 0, n: 6 }));
        assert_eq!(symnmf(&w, 7, &SymnmfOptions::default()), Err(NmfError::InvalidK { k: 7, n: 6 }));
        let mut a = w.clone();
        a[(0, 4)] = 0.5;
        assert!(matches!(symnmf(&a, 2, &SymnmfOptions::default()), Err(NmfError::AsymmetricInput(_))));
    }

    #[test]
    fn size_std_counts_empty_clusters() {
        // sizes (3, 1, 0): mean 4/3, var = (25/9 + 1/9 + 16/9) / 3 = 14/9
        let std = cluster_size_std(&[0, 0, 0, 1], 3);
        assert!((std - (14.0f64 / 9.0).sqrt()).abs() < 1e-15);
        assert_eq!(cluster_size_std(&[0, 1, 0, 1], 2), 0.0);
    }

    #[test]
    fn one_block_prefers_lower_end() {
        let w = DMatrix::from_fn(5, 5, |i, j| if i == j { 0.0 } else { 1.0 });
        let sel = select_k(&w, 1..=4, &SymnmfOptions::default()).unwrap();
        assert_eq!(sel.k_opt, 1);
        assert_eq!(sel.size_std, 0.0);
    }
}
