//! Region-proposal refinement: instance clusters are projected into each view
//! as soft epipolar maps, proposals take the cluster whose map they resemble
//! most (Ruzicka similarity), and suppression only happens between proposals
//! that share a cluster.

use std::collections::BTreeMap;

use log::debug;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{fundamental_from_poses, CameraView};
use crate::matching::{band_from_points, build_graph, node_sample_seed, sample_region_points, MatchError, MatchParams};
use crate::raster::PixelSet;
use crate::scene::{ClusterAssignment, InstanceMask, SceneError, SceneManifest};
use crate::symnmf::{cluster_scene, KMode, NmfError, SymnmfOptions};

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("EmptyCluster: no members to project")]
    EmptyCluster,
    #[error("DimensionMismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("proposal references unknown view {0}")]
    UnknownView(u32),
    #[error("at least one refinement round is required")]
    NoRounds,
    #[error("map values must number width x height and lie in [0, 1]")]
    InvalidMap,
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Nmf(#[from] NmfError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// A real-valued per-pixel map in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EpipolarMap {
    pub view_id: u32,
    width: u32,
    height: u32,
    values: Vec<f64>,
}

impl EpipolarMap {
    pub fn zeros(view_id: u32, width: u32, height: u32) -> Self {
        Self {
            view_id,
            width,
            height,
            values: vec![0.0; width as usize * height as usize],
        }
    }

    pub fn from_values(view_id: u32, width: u32, height: u32, values: Vec<f64>) -> Result<Self, RefineError> {
        if values.len() != width as usize * height as usize || values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(RefineError::InvalidMap);
        }
        Ok(Self {
            view_id,
            width,
            height,
            values,
        })
    }

    /// 0/1 indicator map of a mask.
    pub fn from_mask(view_id: u32, mask: &PixelSet) -> Self {
        let mut map = Self::zeros(view_id, mask.width(), mask.height());
        for (x, y) in mask.iter() {
            map.values[y as usize * mask.width() as usize + x as usize] = 1.0;
        }
        map
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.values[y as usize * self.width as usize + x as usize]
    }
}

/// Per-pixel fraction of cluster members whose epipolar band covers the
/// pixel in `target`. Members observed in `target` itself are left out of
/// both sum and count; if nothing remains the map is zero.
pub fn epipolar_map(
    members: &[&InstanceMask],
    cameras: &SceneManifest,
    target: &CameraView,
    params: &MatchParams,
) -> Result<EpipolarMap, RefineError> {
    if members.is_empty() {
        return Err(RefineError::EmptyCluster);
    }
    let (w, h) = (target.width(), target.height());
    let mut counts = vec![0u32; w as usize * h as usize];
    let mut used = 0u32;
    for m in members.iter().filter(|m| m.view_id != target.view_id()) {
        let source = cameras.camera(m.view_id).ok_or(RefineError::UnknownView(m.view_id))?;
        let f = fundamental_from_poses(source, target).map_err(MatchError::from)?;
        let points = sample_region_points(
            &m.region,
            params.n_samples,
            node_sample_seed(params.seed, m.view_id, m.instance_index),
        )?;
        let band = match band_from_points(0, &points, &f, target, params.thickness) {
            Ok(b) => b,
            Err(MatchError::AllDegenerate) => {
                debug!("member ({}, {}) has no usable lines in view {}", m.view_id, m.instance_index, target.view_id());
                used += 1;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        for (x, y) in band.coverage.iter() {
            counts[y as usize * w as usize + x as usize] += 1;
        }
        used += 1;
    }
    let mut map = EpipolarMap::zeros(target.view_id(), w, h);
    if used > 0 {
        for (v, &c) in map.values.iter_mut().zip(&counts) {
            *v = c as f64 / used as f64;
        }
    }
    Ok(map)
}

/// `Σ min(a, b) / Σ max(a, b)`; two all-zero maps give 0.
pub fn ruzicka(a: &EpipolarMap, b: &EpipolarMap) -> Result<f64, RefineError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(RefineError::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (&x, &y) in a.values.iter().zip(&b.values) {
        num += x.min(y);
        den += x.max(y);
    }
    Ok(if den == 0.0 { 0.0 } else { num / den })
}

/// [`ruzicka`] against the indicator map of `mask`, without materializing it.
pub fn ruzicka_with_mask(map: &EpipolarMap, mask: &PixelSet) -> Result<f64, RefineError> {
    if (map.width, map.height) != (mask.width(), mask.height()) {
        return Err(RefineError::DimensionMismatch(map.width, map.height, mask.width(), mask.height()));
    }
    let w = map.width as usize;
    let (mut num, mut den_inside, mut sum_inside) = (0.0, 0.0, 0.0);
    for (x, y) in mask.iter() {
        let v = map.values[y as usize * w + x as usize];
        num += v.min(1.0);
        den_inside += v.max(1.0);
        sum_inside += v;
    }
    let total: f64 = map.values.iter().sum();
    let den = den_inside + (total - sum_inside);
    Ok(if den <= 0.0 { 0.0 } else { num / den })
}

/// A scored region proposal `R'_{i,r}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub view_id: u32,
    pub mask: PixelSet,
    pub score: f64,
    pub cluster_id: Option<usize>,
}

/// Sets each proposal's cluster to the one whose epipolar map in the
/// proposal's view is most similar (ties to the lower id); proposals with
/// zero similarity everywhere become unmatched.
pub fn reassign_cluster_ids(
    proposals: &[Proposal],
    clusters: &ClusterAssignment,
    scene: &SceneManifest,
    params: &MatchParams,
) -> Result<Vec<Proposal>, RefineError> {
    let views: std::collections::BTreeSet<u32> = proposals.iter().map(|p| p.view_id).collect();
    let jobs: Vec<(u32, usize)> = views
        .iter()
        .flat_map(|&v| (0..clusters.k()).map(move |c| (v, c)))
        .collect();
    let maps: BTreeMap<(u32, usize), EpipolarMap> = jobs
        .par_iter()
        .map(|&(v, c)| {
            let target = scene.camera(v).ok_or(RefineError::UnknownView(v))?;
            let members: Vec<&InstanceMask> =
                clusters.members(c).into_iter().map(|n| scene.node(n)).collect();
            Ok(((v, c), epipolar_map(&members, scene, target, params)?))
        })
        .collect::<Result<_, RefineError>>()?;

    proposals
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for c in 0..clusters.k() {
                let s = ruzicka_with_mask(&maps[&(p.view_id, c)], &p.mask)?;
                if s > best.map_or(0.0, |b| b.1) {
                    best = Some((c, s));
                }
            }
            Ok(Proposal {
                cluster_id: best.map(|b| b.0),
                ..p.clone()
            })
        })
        .collect()
}

/// Greedy score-descending mask NMS within each `(view, cluster_id)` group;
/// a proposal is suppressed when its IoU with an already kept proposal of
/// the same group exceeds `iou_threshold`. Unmatched proposals form their
/// own group per view. Returns the kept proposals in input order.
pub fn cluster_aware_nms(proposals: &[Proposal], iou_threshold: f64) -> Vec<Proposal> {
    grouped_nms(proposals, |p| (p.view_id, p.cluster_id), iou_threshold)
}

/// Cluster-agnostic NMS, run per view.
pub fn standard_nms(proposals: &[Proposal], iou_threshold: f64) -> Vec<Proposal> {
    grouped_nms(proposals, |p| p.view_id, iou_threshold)
}

fn grouped_nms<K, G>(proposals: &[Proposal], group: G, iou_threshold: f64) -> Vec<Proposal>
where
    K: Ord + Send,
    G: Fn(&Proposal) -> K,
{
    let mut groups: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (i, p) in proposals.iter().enumerate() {
        groups.entry(group(p)).or_default().push(i);
    }
    let mut kept: Vec<usize> = groups
        .into_par_iter()
        .flat_map_iter(|(_, members)| greedy_nms(proposals, members, iou_threshold))
        .collect();
    kept.sort_unstable();
    kept.into_iter().map(|i| proposals[i].clone()).collect()
}

fn greedy_nms(proposals: &[Proposal], mut order: Vec<usize>, iou_threshold: f64) -> Vec<usize> {
    order.sort_by(|&a, &b| proposals[b].score.total_cmp(&proposals[a].score).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept
            .iter()
            .all(|&j| proposals[i].mask.iou(&proposals[j].mask) <= iou_threshold)
        {
            kept.push(i);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineOptions {
    pub rounds: usize,
    /// IoU threshold of the initial, cluster-agnostic pool NMS.
    pub nms_init: f64,
    /// IoU threshold of the per-cluster NMS.
    pub nms: f64,
    pub matching: MatchParams,
    pub k_mode: KMode,
    pub symnmf: SymnmfOptions,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            rounds: 2,
            nms_init: 0.7,
            nms: 0.3,
            matching: MatchParams::default(),
            k_mode: KMode::Auto,
            symnmf: SymnmfOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    /// Final instances; instance indices count from 1 per view in proposal
    /// order.
    pub scene: SceneManifest,
    pub assignment: ClusterAssignment,
    /// Kept proposals with their final cluster ids, in `scene` node order.
    pub proposals: Vec<Proposal>,
}

fn proposals_to_scene(cameras: &SceneManifest, kept: &[Proposal]) -> Result<SceneManifest, RefineError> {
    let mut next: BTreeMap<u32, u32> = BTreeMap::new();
    let mut masks = Vec::with_capacity(kept.len());
    for p in kept {
        if cameras.camera(p.view_id).is_none() {
            return Err(RefineError::UnknownView(p.view_id));
        }
        let idx = next.entry(p.view_id).or_insert(0);
        *idx += 1;
        masks.push(InstanceMask {
            view_id: p.view_id,
            instance_index: *idx,
            region: p.mask.clone(),
            score: Some(p.score),
        });
    }
    Ok(cameras.with_masks(masks)?)
}

/// Alternates matching/clustering of the current instance set with cluster
/// reassignment and cluster-aware NMS over the proposal pool.
///
/// The pool is the input after NMS at `nms_init`; the first instance set is
/// the pool after plain NMS at `nms`.
pub fn refine(
    cameras: &SceneManifest,
    proposals: &[Proposal],
    opts: &RefineOptions,
) -> Result<RefineOutcome, RefineError> {
    if opts.rounds == 0 {
        return Err(RefineError::NoRounds);
    }
    let pool = standard_nms(proposals, opts.nms_init);
    let mut kept = standard_nms(&pool, opts.nms);
    for round in 0..opts.rounds {
        let scene = proposals_to_scene(cameras, &kept)?;
        let graph = build_graph(&scene, &opts.matching)?;
        let clusters = cluster_scene(&graph, opts.k_mode, &opts.symnmf)?.assignment;
        let labelled = reassign_cluster_ids(&pool, &clusters, &scene, &opts.matching)?;
        kept = cluster_aware_nms(&labelled, opts.nms);
        debug!("refine round {round}: {} of {} pool proposals kept", kept.len(), pool.len());
    }
    // Node order of the final scene is (view, position in `kept`).
    kept.sort_by_key(|p| p.view_id);
    let scene = proposals_to_scene(cameras, &kept)?;
    let unmatched_base = kept.iter().filter_map(|p| p.cluster_id).max().map_or(0, |m| m + 1);
    let assignment = ClusterAssignment::from_labels(
        kept.iter()
            .enumerate()
            .map(|(i, p)| p.cluster_id.unwrap_or(unmatched_base + i))
            .collect(),
    );
    let proposals = kept
        .into_iter()
        .enumerate()
        .map(|(i, p)| Proposal {
            cluster_id: Some(assignment.label(i)),
            ..p
        })
        .collect();
    Ok(RefineOutcome {
        scene,
        assignment,
        proposals,
    })
}
