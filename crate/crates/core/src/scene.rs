//! Multi-view scene data model: per-view instance regions, the global node
//! index and cluster assignments.

use std::collections::BTreeMap;

use crate::geometry::{CameraView, GeometryError};
use crate::raster::PixelSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("MissingView: {0}")]
    MissingView(String),
    #[error("EmptyLabelImage: {path}: {reason}")]
    EmptyLabelImage { path: String, reason: String },
    #[error("mask references unknown view {0}")]
    UnknownView(u32),
    #[error("duplicate camera for view {0}")]
    DuplicateView(u32),
    #[error("duplicate instance ({0}, {1})")]
    DuplicateNode(u32, u32),
    #[error("instance ({0}, {1}) has an empty region")]
    EmptyRegion(u32, u32),
    #[error("instance ({0}, {1}) does not match its view's image size")]
    SizeMismatch(u32, u32),
    #[error("NodeMismatch: {0}")]
    NodeMismatch(String),
    #[error(transparent)]
    Camera(#[from] GeometryError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

/// One instance region `R_{i,m}` in one view.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMask {
    pub view_id: u32,
    pub instance_index: u32,
    pub region: PixelSet,
    /// Detector confidence; only region proposals carry one.
    pub score: Option<f64>,
}

impl InstanceMask {
    pub fn new(view_id: u32, instance_index: u32, region: PixelSet) -> Self {
        Self {
            view_id,
            instance_index,
            region,
            score: None,
        }
    }
}

/// Calibrated cameras plus every instance mask, with node ids assigned in
/// `(view_id, instance_index)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneManifest {
    cameras: Vec<CameraView>,
    masks: Vec<InstanceMask>,
}

impl SceneManifest {
    pub fn new(
        mut cameras: Vec<CameraView>,
        mut masks: Vec<InstanceMask>,
    ) -> Result<Self, SceneError> {
        cameras.sort_by_key(|c| c.view_id());
        for pair in cameras.windows(2) {
            if pair[0].view_id() == pair[1].view_id() {
                return Err(SceneError::DuplicateView(pair[0].view_id()));
            }
        }
        masks.sort_by_key(|m| (m.view_id, m.instance_index));
        for pair in masks.windows(2) {
            if (pair[0].view_id, pair[0].instance_index) == (pair[1].view_id, pair[1].instance_index)
            {
                return Err(SceneError::DuplicateNode(pair[0].view_id, pair[0].instance_index));
            }
        }
        let scene = Self { cameras, masks };
        for m in &scene.masks {
            let cam = scene
                .camera(m.view_id)
                .ok_or(SceneError::UnknownView(m.view_id))?;
            if m.region.width() != cam.width() || m.region.height() != cam.height() {
                return Err(SceneError::SizeMismatch(m.view_id, m.instance_index));
            }
            if m.region.is_empty() {
                return Err(SceneError::EmptyRegion(m.view_id, m.instance_index));
            }
        }
        Ok(scene)
    }

    /// Cameras sorted by view id.
    pub fn cameras(&self) -> &[CameraView] {
        &self.cameras
    }

    pub fn camera(&self, view_id: u32) -> Option<&CameraView> {
        self.cameras
            .binary_search_by_key(&view_id, |c| c.view_id())
            .ok()
            .map(|i| &self.cameras[i])
    }

    /// Masks in node order.
    pub fn masks(&self) -> &[InstanceMask] {
        &self.masks
    }

    pub fn node_count(&self) -> usize {
        self.masks.len()
    }

    pub fn node(&self, id: usize) -> &InstanceMask {
        &self.masks[id]
    }

    pub fn node_key(&self, id: usize) -> (u32, u32) {
        let m = &self.masks[id];
        (m.view_id, m.instance_index)
    }

    pub fn node_id(&self, view_id: u32, instance_index: u32) -> Option<usize> {
        self.masks
            .binary_search_by_key(&(view_id, instance_index), |m| (m.view_id, m.instance_index))
            .ok()
    }

    /// Node ids of the masks in `view_id` (a contiguous range).
    pub fn nodes_in_view(&self, view_id: u32) -> std::ops::Range<usize> {
        let start = self.masks.partition_point(|m| m.view_id < view_id);
        let end = self.masks.partition_point(|m| m.view_id <= view_id);
        start..end
    }

    pub fn max_instances_per_view(&self) -> usize {
        self.cameras
            .iter()
            .map(|c| self.nodes_in_view(c.view_id()).len())
            .max()
            .unwrap_or(0)
    }

    /// Number of views that contain at least one mask.
    pub fn populated_views(&self) -> usize {
        self.cameras
            .iter()
            .filter(|c| !self.nodes_in_view(c.view_id()).is_empty())
            .count()
    }

    /// The same cameras with a different mask set.
    pub fn with_masks(&self, masks: Vec<InstanceMask>) -> Result<Self, SceneError> {
        Self::new(self.cameras.clone(), masks)
    }
}

/// Cluster label per node; ids are contiguous in `0..k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    labels: Vec<usize>,
    k: usize,
}

impl ClusterAssignment {
    /// Relabels arbitrary ids to `0..k`, preserving their numeric order and
    /// dropping unused ids.
    pub fn from_labels(labels: Vec<usize>) -> Self {
        let mut remap: BTreeMap<usize, usize> = labels.iter().map(|&l| (l, 0)).collect();
        for (new, slot) in remap.values_mut().enumerate() {
            *slot = new;
        }
        let k = remap.len();
        let labels = labels.into_iter().map(|l| remap[&l]).collect();
        Self { labels, k }
    }

    /// Every node in its own cluster.
    pub fn singletons(n: usize) -> Self {
        Self {
            labels: (0..n).collect(),
            k: n,
        }
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, node: usize) -> usize {
        self.labels[node]
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&n| self.labels[n] == cluster)
            .collect()
    }
}
