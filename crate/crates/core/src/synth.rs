//! Analytic ground-truth scenes: spheres seen by an elevated camera ring.
//!
//! Silhouettes are rendered exactly: a pixel belongs to a sphere's mask iff
//! the viewing ray through its center meets the sphere.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::{Point3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraView, GeometryError};
use crate::io;
use crate::raster::PixelSet;
use crate::recon::{GridSpec, PointCloud, ReconError};
use crate::refine::Proposal;
use crate::scene::{ClusterAssignment, InstanceMask, SceneError, SceneManifest};
use crate::seed::{self, stage};

pub const RING_DISTANCE: f64 = 5.0;
pub const RING_ELEVATION_DEG: f64 = 45.0;
pub const FOCAL_PER_PIXEL: f64 = 1.1;
pub const PLACEMENT_RADIUS: f64 = 1.6;
pub const PLACEMENT_HEIGHT: f64 = 0.2;
pub const PLACEMENT_BUDGET: usize = 10_000;
pub const GT_CLOUD_POINTS: usize = 2048;
pub const GRID_RESOLUTION: usize = 128;
const OCCLUSION_RESAMPLES: u64 = 100;
const CORRUPT: u64 = 0xC0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("PlacementFailure: placed {placed} of {requested} objects within {budget} attempts")]
    PlacementFailure {
        placed: usize,
        requested: usize,
        budget: usize,
    },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Recon(#[from] ReconError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n_objects: usize,
    pub n_views: usize,
    pub image_size: u32,
    pub radius_range: (f64, f64),
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_objects: 4,
            n_views: 5,
            image_size: 256,
            radius_range: (0.12, 0.2),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: [f64; 3],
    pub radius: f64,
}

impl Sphere {
    pub fn center(&self) -> Point3<f64> {
        Point3::from(self.center)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub scene: SceneManifest,
    pub gt: ClusterAssignment,
    pub spheres: Vec<Sphere>,
    pub gt_clouds: Vec<PointCloud>,
    pub grid: GridSpec,
    /// Mean sphere diameter.
    pub scale: f64,
}

/// `n` cameras evenly spaced in azimuth, looking at the origin from above.
pub fn ring_cameras(n: usize, image_size: u32) -> Result<Vec<CameraView>, GeometryError> {
    let el = RING_ELEVATION_DEG.to_radians();
    (0..n)
        .map(|v| {
            let az = 2.0 * PI * v as f64 / n as f64;
            let eye = Point3::new(
                RING_DISTANCE * el.cos() * az.cos(),
                RING_DISTANCE * el.cos() * az.sin(),
                RING_DISTANCE * el.sin(),
            );
            CameraView::look_at(
                v as u32,
                eye,
                Point3::origin(),
                Vector3::z(),
                FOCAL_PER_PIXEL * image_size as f64,
                image_size,
                image_size,
            )
        })
        .collect()
}

/// Exact silhouette: pixels whose center ray meets the sphere in front of
/// the camera.
pub fn render_sphere_mask(camera: &CameraView, sphere: &Sphere) -> PixelSet {
    let (w, h) = (camera.width(), camera.height());
    let mut mask = PixelSet::new(w, h);
    let c = camera.rotation() * sphere.center().coords + camera.translation();
    let r2 = sphere.radius * sphere.radius;
    let c2 = c.norm_squared();
    if c.z <= sphere.radius || c2 <= r2 {
        return mask;
    }
    let k_inv = camera
        .intrinsics()
        .try_inverse()
        .expect("validated intrinsics are invertible");
    // The silhouette lies inside the projection of the bounding cube.
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for corner in 0..8 {
        let offset = Vector3::new(
            if corner & 1 == 0 { -1.0 } else { 1.0 },
            if corner & 2 == 0 { -1.0 } else { 1.0 },
            if corner & 4 == 0 { -1.0 } else { 1.0 },
        ) * sphere.radius;
        let p = camera.intrinsics() * (c + offset);
        x0 = x0.min(p.x / p.z);
        x1 = x1.max(p.x / p.z);
        y0 = y0.min(p.y / p.z);
        y1 = y1.max(p.y / p.z);
    }
    let xs = x0.floor().max(0.0) as i64..=x1.ceil().min(w as f64 - 1.0) as i64;
    let ys = y0.floor().max(0.0) as i64..=y1.ceil().min(h as f64 - 1.0) as i64;
    for y in ys {
        for x in xs.clone() {
            let v = k_inv * Vector3::new(x as f64 + 0.5, y as f64 + 0.5, 1.0);
            let vc = v.dot(&c);
            if vc > 0.0 && vc * vc >= v.norm_squared() * (c2 - r2) {
                mask.insert(x as u32, y as u32);
            }
        }
    }
    mask
}

fn fully_visible(mask: &PixelSet) -> bool {
    match mask.bbox() {
        Some((x0, y0, x1, y1)) => {
            x0 > 0 && y0 > 0 && x1 + 1 < mask.width() && y1 + 1 < mask.height()
        }
        None => false,
    }
}

/// Fibonacci-lattice samples on the sphere surface.
pub fn sphere_surface_points(sphere: &Sphere, n: usize) -> PointCloud {
    let golden = PI * (3.0 - 5f64.sqrt());
    let c = sphere.center();
    PointCloud::new(
        (0..n)
            .map(|i| {
                let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
                let rho = (1.0 - z * z).max(0.0).sqrt();
                let phi = golden * i as f64;
                c + sphere.radius * Vector3::new(rho * phi.cos(), rho * phi.sin(), z)
            })
            .collect(),
    )
}

/// Ground truth recovered from instance indices: instance `m` is object
/// `m - 1` in every view.
pub fn gt_from_instances(scene: &SceneManifest) -> ClusterAssignment {
    ClusterAssignment::from_labels(
        scene
            .masks()
            .iter()
            .map(|m| m.instance_index as usize - 1)
            .collect(),
    )
}

/// Grid enclosing every sphere with a margin of one maximal radius.
pub fn grid_for(spheres: &[Sphere], resolution: usize) -> GridSpec {
    let margin = spheres.iter().map(|s| s.radius).fold(0.0, f64::max);
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for s in spheres {
        for a in 0..3 {
            lo[a] = lo[a].min(s.center[a] - s.radius - margin);
            hi[a] = hi[a].max(s.center[a] + s.radius + margin);
        }
    }
    GridSpec::covering(lo, hi, resolution)
}

fn validate(p: &SynthParams) -> Result<(), SynthError> {
    let (lo, hi) = p.radius_range;
    if p.n_objects == 0 {
        return Err(SynthError::InvalidParams("need at least one object".into()));
    }
    if p.n_views < 2 {
        return Err(SynthError::InvalidParams("need at least two views".into()));
    }
    if p.image_size < 16 {
        return Err(SynthError::InvalidParams(format!("image size {} too small", p.image_size)));
    }
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(SynthError::InvalidParams(format!("radius range ({lo}, {hi})")));
    }
    if p.n_objects > u16::MAX as usize {
        return Err(SynthError::InvalidParams("too many objects".into()));
    }
    Ok(())
}

/// Places spheres by rejection sampling so that every sphere is fully
/// visible in every view and no two silhouettes come within one pixel.
pub fn generate(params: &SynthParams) -> Result<SyntheticScene, SynthError> {
    validate(params)?;
    let cameras = ring_cameras(params.n_views, params.image_size)?;
    let mut rng = seed::rng(params.seed, &[stage::SYNTH]);
    let mut spheres: Vec<Sphere> = Vec::with_capacity(params.n_objects);
    let mut masks: Vec<Vec<PixelSet>> = Vec::with_capacity(params.n_objects);
    let mut halos: Vec<Vec<PixelSet>> = Vec::with_capacity(params.n_objects);
    let mut attempts = 0;
    while spheres.len() < params.n_objects {
        if attempts == PLACEMENT_BUDGET {
            return Err(SynthError::PlacementFailure {
                placed: spheres.len(),
                requested: params.n_objects,
                budget: PLACEMENT_BUDGET,
            });
        }
        attempts += 1;
        let rho = PLACEMENT_RADIUS * rng.gen::<f64>().sqrt();
        let phi = rng.gen_range(0.0..2.0 * PI);
        let z = rng.gen_range(-PLACEMENT_HEIGHT..=PLACEMENT_HEIGHT);
        let (lo, hi) = params.radius_range;
        let radius = if lo == hi { lo } else { rng.gen_range(lo..hi) };
        let sphere = Sphere {
            center: [rho * phi.cos(), rho * phi.sin(), z],
            radius,
        };
        let mut candidate = Vec::with_capacity(cameras.len());
        let mut ok = true;
        for (v, cam) in cameras.iter().enumerate() {
            let m = render_sphere_mask(cam, &sphere);
            if !fully_visible(&m) || halos.iter().any(|h| h[v].intersects(&m)) {
                ok = false;
                break;
            }
            candidate.push(m);
        }
        if !ok {
            continue;
        }
        halos.push(candidate.iter().map(|m| m.dilate(1)).collect());
        masks.push(candidate);
        spheres.push(sphere);
    }
    let instance_masks = masks
        .into_iter()
        .enumerate()
        .flat_map(|(m, per_view)| {
            per_view
                .into_iter()
                .enumerate()
                .map(move |(v, region)| InstanceMask::new(v as u32, m as u32 + 1, region))
        })
        .collect();
    let scene = SceneManifest::new(cameras, instance_masks)?;
    let gt = gt_from_instances(&scene);
    let gt_clouds = spheres
        .iter()
        .map(|s| sphere_surface_points(s, GT_CLOUD_POINTS))
        .collect();
    let grid = grid_for(&spheres, GRID_RESOLUTION);
    let scale = spheres.iter().map(|s| 2.0 * s.radius).sum::<f64>() / spheres.len() as f64;
    Ok(SyntheticScene {
        scene,
        gt,
        spheres,
        gt_clouds,
        grid,
        scale,
    })
}

/// Drops each mask with probability `drop_rate` and erodes or dilates the
/// survivors by `corruption` pixels. Every instance keeps at least two views
/// (or all of its views if it had fewer).
pub fn occlusion_variant(
    scene: &SceneManifest,
    drop_rate: f64,
    corruption: u32,
    seed: u64,
) -> Result<SceneManifest, SynthError> {
    if !(0.0..=1.0).contains(&drop_rate) {
        return Err(SynthError::InvalidParams(format!("drop rate {drop_rate}")));
    }
    let masks = scene.masks();
    let draw = |attempt: u64, m: &InstanceMask| {
        seed::unit_open_closed(
            seed,
            &[stage::OCCLUSION, attempt, m.view_id as u64, m.instance_index as u64],
        )
    };
    let mut by_instance: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    for (n, m) in masks.iter().enumerate() {
        by_instance.entry(m.instance_index).or_default().push(n);
    }
    let satisfied = |keep: &[bool]| {
        by_instance.values().all(|nodes| {
            nodes.iter().filter(|&&n| keep[n]).count() >= nodes.len().min(2)
        })
    };
    let keep_for = |attempt: u64| -> Vec<bool> {
        masks.iter().map(|m| draw(attempt, m) > drop_rate).collect()
    };
    let keep = match (0..OCCLUSION_RESAMPLES).map(keep_for).find(|k| satisfied(k)) {
        Some(k) => k,
        None => {
            let mut keep = keep_for(0);
            for nodes in by_instance.values() {
                let need = nodes.len().min(2);
                let mut order = nodes.clone();
                order.sort_by(|&a, &b| draw(0, &masks[b]).total_cmp(&draw(0, &masks[a])));
                for &n in order.iter().take(need) {
                    keep[n] = true;
                }
            }
            keep
        }
    };
    let survivors = masks
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(m, _)| {
            if corruption == 0 {
                return m.clone();
            }
            let erode = draw(CORRUPT, m) <= 0.5;
            let mut region = if erode {
                m.region.erode(corruption)
            } else {
                m.region.dilate(corruption)
            };
            if region.is_empty() {
                region = m.region.dilate(corruption);
            }
            InstanceMask { region, ..m.clone() }
        })
        .collect();
    Ok(scene.with_masks(survivors)?)
}

/// Scored proposals per view: each true mask plus two shifted, lower-scored
/// duplicates.
pub fn make_proposals(scene: &SceneManifest, seed: u64) -> Vec<Proposal> {
    let mut out = Vec::new();
    for m in scene.masks() {
        let mut rng = seed::rng(seed, &[stage::SYNTH, m.view_id as u64, m.instance_index as u64]);
        out.push(Proposal {
            view_id: m.view_id,
            mask: m.region.clone(),
            score: rng.gen_range(0.9..1.0),
            cluster_id: None,
        });
        for _ in 0..2 {
            let dx: i64 = rng.gen_range(-3..=3);
            let dy: i64 = rng.gen_range(-3..=3);
            let shifted = PixelSet::from_points(
                m.region.width(),
                m.region.height(),
                m.region.iter().filter_map(|(x, y)| {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    (nx >= 0 && ny >= 0 && nx < m.region.width() as i64 && ny < m.region.height() as i64)
                        .then_some((nx as u32, ny as u32))
                }),
            );
            if shifted.is_empty() {
                continue;
            }
            out.push(Proposal {
                view_id: m.view_id,
                mask: shifted,
                score: rng.gen_range(0.5..0.9),
                cluster_id: None,
            });
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScaleRecord {
    pub scale: f64,
    pub spheres: Vec<Sphere>,
}

pub const CAMERAS_FILE: &str = "cameras.json";
pub const MASK_DIR: &str = "masks";
pub const GT_ASSIGNMENT_FILE: &str = "gt_assignment.json";
pub const GRID_FILE: &str = "grid.json";
pub const SCALE_FILE: &str = "scale.json";

pub fn gt_cloud_name(k: usize) -> String {
    format!("gt_cloud_{k}.ply")
}

/// Writes cameras, label images, ground truth, grid and scale into `dir`.
pub fn write_synthetic(scene: &SyntheticScene, dir: &Path) -> Result<(), SynthError> {
    fs::create_dir_all(dir)?;
    io::save_cameras(scene.scene.cameras(), &dir.join(CAMERAS_FILE))?;
    io::save_label_images(&scene.scene, &dir.join(MASK_DIR))?;
    io::save_assignment(&scene.gt, &scene.scene, &dir.join(GT_ASSIGNMENT_FILE))?;
    for (k, cloud) in scene.gt_clouds.iter().enumerate() {
        cloud.save_ply(&dir.join(gt_cloud_name(k)))?;
    }
    fs::write(dir.join(GRID_FILE), serde_json::to_string_pretty(&scene.grid)? + "\n")?;
    let scale = ScaleRecord {
        scale: scene.scale,
        spheres: scene.spheres.clone(),
    };
    fs::write(dir.join(SCALE_FILE), serde_json::to_string_pretty(&scale)? + "\n")?;
    Ok(())
}

pub fn load_grid(path: &Path) -> Result<GridSpec, SynthError> {
    let grid: GridSpec = serde_json::from_str(&fs::read_to_string(path)?)?;
    grid.validate()?;
    Ok(grid)
}

pub fn load_scale(path: &Path) -> Result<ScaleRecord, SynthError> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Matrix3;

    fn conic_area(cam: &CameraView, s: &Sphere) -> f64 {
        let c = cam.rotation() * s.center().coords + cam.translation();
        let m = c * c.transpose() - (c.norm_squared() - s.radius * s.radius) * Matrix3::identity();
        let ki = cam.intrinsics().try_inverse().unwrap();
        let q = ki.transpose() * m * ki;
        let a33 = q.fixed_view::<2, 2>(0, 0).determinant();
        PI * q.determinant().abs() / a33.abs().powf(1.5)
    }

    #[test]
    fn single_object_scene() {
        let s = generate(&SynthParams {
            n_objects: 1,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(s.scene.node_count(), 5);
        assert_eq!(s.gt.k(), 1);
        assert_eq!(s.gt_clouds[0].len(), GT_CLOUD_POINTS);
    }

    #[test]
    fn every_object_in_every_view() {
        let p = SynthParams {
            n_objects: 6,
            n_views: 4,
            seed: 5,
            ..Default::default()
        };
        let s = generate(&p).unwrap();
        for cam in s.scene.cameras() {
            assert_eq!(s.scene.nodes_in_view(cam.view_id()).len(), 6);
        }
        assert_eq!(generate(&p).unwrap().scene, s.scene);
    }

    #[test]
    fn mask_area_matches_conic() {
        let cams = ring_cameras(3, 256).unwrap();
        let s = Sphere {
            center: [0.3, -0.2, 0.1],
            radius: 0.3,
        };
        for cam in &cams {
            let area = render_sphere_mask(cam, &s).len() as f64;
            let exact = conic_area(cam, &s);
            assert!((area - exact).abs() / exact < 0.02, "{area} vs {exact}");
        }
    }

    #[test]
    fn surface_points_lie_on_sphere() {
        let s = Sphere {
            center: [1.0, 2.0, 3.0],
            radius: 0.5,
        };
        for p in sphere_surface_points(&s, 100).points {
            assert!(((p - s.center()).norm() - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn occlusion_identity_and_cap() {
        let s = generate(&SynthParams::default()).unwrap();
        assert_eq!(occlusion_variant(&s.scene, 0.0, 0, 1).unwrap(), s.scene);
        let all = occlusion_variant(&s.scene, 1.0, 0, 1).unwrap();
        assert_eq!(all.node_count(), 2 * 4);
        let a = occlusion_variant(&s.scene, 0.3, 2, 9).unwrap();
        assert_eq!(a, occlusion_variant(&s.scene, 0.3, 2, 9).unwrap());
    }

    #[test]
    fn crowded_scene_fails() {
        let err = generate(&SynthParams {
            n_objects: 50,
            radius_range: (0.6, 0.7),
            ..Default::default()
        });
        assert!(matches!(err, Err(SynthError::PlacementFailure { .. })));
    }
}
