//! Instance-wise volumetric reconstruction by silhouette back-projection.
//!
//! Each voxel center is projected into the view of every cluster member; its
//! value is the fraction of members whose mask contains the projection.
//! Projections that leave the image or fall behind the camera count as
//! outside. Occupancy is `value >= threshold`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use log::info;
use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{ClusterAssignment, InstanceMask, SceneManifest};

#[derive(Debug, Error)]
pub enum ReconError {
    #[error("EmptyCluster: nothing to back-project")]
    EmptyCluster,
    #[error("DegenerateGrid: {0}")]
    DegenerateGrid(String),
    #[error("no camera for view {0}")]
    MissingCamera(u32),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed PLY: {0}")]
    Ply(String),
}

/// Axis-aligned voxel lattice; voxel `(i, j, k)` has its center at
/// `origin + voxel_size·(i + ½, j + ½, k + ½)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub dims: [usize; 3],
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), ReconError> {
        if !(self.voxel_size > 0.0) || !self.voxel_size.is_finite() {
            return Err(ReconError::DegenerateGrid(format!("voxel size {}", self.voxel_size)));
        }
        if self.dims.contains(&0) {
            return Err(ReconError::DegenerateGrid(format!("dims {:?}", self.dims)));
        }
        if self.origin.iter().any(|v| !v.is_finite()) {
            return Err(ReconError::DegenerateGrid("non-finite origin".into()));
        }
        Ok(())
    }

    /// Cubic voxels covering the box `[min, max]`, with `resolution` voxels
    /// along its longest side.
    pub fn covering(min: [f64; 3], max: [f64; 3], resolution: usize) -> Self {
        let extent = (0..3).map(|a| max[a] - min[a]).fold(0.0, f64::max);
        let voxel_size = extent / resolution as f64;
        let dims = std::array::from_fn(|a| {
            (((max[a] - min[a]) / voxel_size).ceil() as usize).clamp(1, resolution)
        });
        Self {
            origin: min,
            voxel_size,
            dims,
        }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear index with x varying fastest.
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn unravel(&self, idx: usize) -> (usize, usize, usize) {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        (i, j, k)
    }

    pub fn center(&self, i: usize, j: usize, k: usize) -> Point3<f64> {
        Point3::from(
            Vector3::from(self.origin)
                + self.voxel_size * Vector3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5),
        )
    }
}

/// Per-voxel back-projection consensus in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub spec: GridSpec,
    values: Vec<f32>,
}

impl VoxelGrid {
    pub fn from_values(spec: GridSpec, values: Vec<f32>) -> Result<Self, ReconError> {
        spec.validate()?;
        if values.len() != spec.len() {
            return Err(ReconError::DegenerateGrid(format!(
                "{} values for {} voxels",
                values.len(),
                spec.len()
            )));
        }
        Ok(Self { spec, values })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.values[self.spec.index(i, j, k)]
    }

    /// Raw little-endian `f32` voxels (x fastest) plus a JSON sidecar.
    pub fn save_raw(&self, raw_path: &Path, sidecar_path: &Path) -> Result<(), ReconError> {
        let mut bytes = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(raw_path, bytes)?;
        let sidecar = GridSidecar {
            origin: self.spec.origin,
            voxel_size: self.spec.voxel_size,
            dims: self.spec.dims,
            order: "x-fastest".to_string(),
        };
        fs::write(sidecar_path, serde_json::to_string_pretty(&sidecar)? + "\n")?;
        Ok(())
    }

    pub fn load_raw(raw_path: &Path, sidecar_path: &Path) -> Result<Self, ReconError> {
        let sidecar: GridSidecar = serde_json::from_str(&fs::read_to_string(sidecar_path)?)?;
        if sidecar.order != "x-fastest" {
            return Err(ReconError::DegenerateGrid(format!("unsupported order {}", sidecar.order)));
        }
        let bytes = fs::read(raw_path)?;
        if bytes.len() % 4 != 0 {
            return Err(ReconError::DegenerateGrid("raw size is not a multiple of 4".into()));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let spec = GridSpec {
            origin: sidecar.origin,
            voxel_size: sidecar.voxel_size,
            dims: sidecar.dims,
        };
        Self::from_values(spec, values)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GridSidecar {
    origin: [f64; 3],
    voxel_size: f64,
    dims: [usize; 3],
    order: String,
}

/// Averages mask membership of every voxel's projections over the members.
pub fn backproject_cluster(
    members: &[&InstanceMask],
    scene: &SceneManifest,
    spec: &GridSpec,
) -> Result<VoxelGrid, ReconError> {
    spec.validate()?;
    if members.is_empty() {
        return Err(ReconError::EmptyCluster);
    }
    let views = members
        .iter()
        .map(|m| {
            scene
                .camera(m.view_id)
                .map(|c| (c.projection_matrix(), &m.region))
                .ok_or(ReconError::MissingCamera(m.view_id))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let count = members.len() as f32;
    let plane = spec.dims[0] * spec.dims[1];
    let mut values = vec![0f32; spec.len()];
    values
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(k, slab)| {
            for (offset, v) in slab.iter_mut().enumerate() {
                let (i, j) = (offset % spec.dims[0], offset / spec.dims[0]);
                let x = spec.center(i, j, k).to_homogeneous();
                let mut inside = 0u32;
                for (p, region) in &views {
                    let h = p * x;
                    if h.z <= 0.0 {
                        continue;
                    }
                    let (u, w) = ((h.x / h.z).floor(), (h.y / h.z).floor());
                    if u >= 0.0 && w >= 0.0 && region.contains(u as i64, w as i64) {
                        inside += 1;
                    }
                }
                *v = inside as f32 / count;
            }
        });
    VoxelGrid::from_values(*spec, values)
}

/// Boolean occupancy over a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Occupancy {
    pub spec: GridSpec,
    occupied: Vec<bool>,
}

impl Occupancy {
    pub fn is_occupied(&self, i: usize, j: usize, k: usize) -> bool {
        self.occupied[self.spec.index(i, j, k)]
    }

    pub fn count(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.occupied
    }

    /// Voxelwise OR; both grids must share a spec.
    pub fn union_with(&mut self, other: &Occupancy) {
        assert_eq!(self.spec, other.spec, "occupancy grids differ");
        for (a, b) in self.occupied.iter_mut().zip(&other.occupied) {
            *a |= b;
        }
    }
}

pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// `occupied ⇔ value >= threshold`.
pub fn binarize(grid: &VoxelGrid, threshold: f32) -> Occupancy {
    Occupancy {
        spec: grid.spec,
        occupied: grid.values.iter().map(|&v| v >= threshold).collect(),
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3<f64>>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn extend(&mut self, other: &PointCloud) {
        self.points.extend_from_slice(&other.points);
    }

    /// ASCII PLY with `double` x/y/z vertex properties.
    pub fn to_ply(&self) -> String {
        let mut out = format!(
            "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
            self.points.len()
        );
        for p in &self.points {
            out.push_str(&format!("{} {} {}\n", p.x, p.y, p.z));
        }
        out
    }

    pub fn save_ply(&self, path: &Path) -> Result<(), ReconError> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        f.write_all(self.to_ply().as_bytes())?;
        Ok(())
    }

    /// Parses the ASCII PLY subset written by [`PointCloud::to_ply`]: a
    /// vertex element whose first three properties are x, y, z.
    pub fn from_ply(text: &str) -> Result<Self, ReconError> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("ply") {
            return Err(ReconError::Ply("missing magic".into()));
        }
        let mut count = None;
        for line in lines.by_ref() {
            let line = line.trim();
            if line == "end_header" {
                break;
            }
            if line.starts_with("format") && line != "format ascii 1.0" {
                return Err(ReconError::Ply(format!("unsupported {line}")));
            }
            if let Some(rest) = line.strip_prefix("element vertex ") {
                count = Some(rest.trim().parse::<usize>().map_err(|e| ReconError::Ply(e.to_string()))?);
            }
        }
        let count = count.ok_or_else(|| ReconError::Ply("no vertex element".into()))?;
        let mut points = Vec::with_capacity(count);
        for _ in 0..count {
            let line = lines.next().ok_or_else(|| ReconError::Ply("truncated vertex list".into()))?;
            let v: Vec<f64> = line
                .split_whitespace()
                .take(3)
                .map(|s| s.parse::<f64>().map_err(|e| ReconError::Ply(e.to_string())))
                .collect::<Result<_, _>>()?;
            if v.len() != 3 || v.iter().any(|c| !c.is_finite()) {
                return Err(ReconError::Ply(format!("bad vertex line {line:?}")));
            }
            points.push(Point3::new(v[0], v[1], v[2]));
        }
        Ok(Self { points })
    }

    pub fn load_ply(path: &Path) -> Result<Self, ReconError> {
        Self::from_ply(&fs::read_to_string(path)?)
    }
}

/// One point per occupied voxel, at the voxel center.
pub fn voxels_to_points(occupancy: &Occupancy) -> PointCloud {
    let spec = occupancy.spec;
    PointCloud::new(
        occupancy
            .occupied
            .iter()
            .enumerate()
            .filter(|(_, &o)| o)
            .map(|(idx, _)| {
                let (i, j, k) = spec.unravel(idx);
                spec.center(i, j, k)
            })
            .collect(),
    )
}

#[derive(Debug, Clone)]
pub struct ClusterReconstruction {
    pub grid: VoxelGrid,
    pub occupancy: Occupancy,
    pub cloud: PointCloud,
    /// Clusters observed in a single view carry no multi-view evidence.
    pub low_confidence: bool,
}

/// Back-projects every cluster independently using only its own members.
pub fn reconstruct_all(
    assignment: &ClusterAssignment,
    scene: &SceneManifest,
    spec: &GridSpec,
    threshold: f32,
) -> Result<BTreeMap<usize, ClusterReconstruction>, ReconError> {
    let mut out = BTreeMap::new();
    for c in 0..assignment.k() {
        let members: Vec<&InstanceMask> =
            assignment.members(c).into_iter().map(|n| scene.node(n)).collect();
        let grid = backproject_cluster(&members, scene, spec)?;
        let occupancy = binarize(&grid, threshold);
        let cloud = voxels_to_points(&occupancy);
        let low_confidence = members.len() < 2;
        if low_confidence {
            info!("cluster {c} has a single member; reconstruction is low confidence");
        }
        out.insert(
            c,
            ClusterReconstruction {
                grid,
                occupancy,
                cloud,
                low_confidence,
            },
        );
    }
    Ok(out)
}
