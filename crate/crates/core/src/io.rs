//! File formats: camera JSON, 16-bit label PNGs, binary proposal PNGs with a
//! score manifest, and assignment JSON.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::geometry::{CameraRecord, CameraView};
use crate::raster::PixelSet;
use crate::refine::Proposal;
use crate::scene::{ClusterAssignment, InstanceMask, SceneError, SceneManifest};

pub fn label_image_name(view_id: u32) -> String {
    format!("view_{view_id}.png")
}

pub fn load_cameras(path: &Path) -> Result<Vec<CameraView>, SceneError> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            SceneError::MissingView(format!("camera file {} not found", path.display()))
        } else {
            SceneError::Io(e)
        }
    })?;
    let records: Vec<CameraRecord> = serde_json::from_str(&text)?;
    records
        .iter()
        .map(|r| CameraView::try_from(r).map_err(SceneError::from))
        .collect()
}

pub fn save_cameras(cameras: &[CameraView], path: &Path) -> Result<(), SceneError> {
    let records: Vec<CameraRecord> = cameras.iter().map(CameraRecord::from).collect();
    write_json(path, &records)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), SceneError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Decodes an 8- or 16-bit grayscale PNG into raw label values.
fn read_labels(path: &Path) -> Result<(u32, u32, Vec<u16>), SceneError> {
    let corrupt = |reason: String| SceneError::EmptyLabelImage {
        path: path.display().to_string(),
        reason,
    };
    let img = image::open(path).map_err(|e| corrupt(e.to_string()))?;
    let (w, h) = (img.width(), img.height());
    if w == 0 || h == 0 {
        return Err(corrupt("zero-sized image".into()));
    }
    let values = match img {
        DynamicImage::ImageLuma16(buf) => buf.into_raw(),
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(u16::from).collect(),
        other => return Err(corrupt(format!("unsupported pixel format {:?}", other.color()))),
    };
    Ok((w, h, values))
}

/// Splits a label image into one region per distinct nonzero value.
pub fn masks_from_labels(view_id: u32, width: u32, height: u32, values: &[u16]) -> Vec<InstanceMask> {
    let mut regions: std::collections::BTreeMap<u16, PixelSet> = Default::default();
    for (i, &v) in values.iter().enumerate() {
        if v != 0 {
            regions
                .entry(v)
                .or_insert_with(|| PixelSet::new(width, height))
                .insert(i as u32 % width, i as u32 / width);
        }
    }
    regions
        .into_iter()
        .map(|(v, region)| InstanceMask::new(view_id, v as u32, region))
        .collect()
}

/// Loads cameras and one `view_<id>.png` label image per camera.
pub fn load_scene(camera_file: &Path, mask_dir: &Path) -> Result<SceneManifest, SceneError> {
    let cameras = load_cameras(camera_file)?;
    let mut masks = Vec::new();
    for cam in &cameras {
        let path = mask_dir.join(label_image_name(cam.view_id()));
        if !path.is_file() {
            return Err(SceneError::MissingView(format!(
                "label image {} not found",
                path.display()
            )));
        }
        let (w, h, values) = read_labels(&path)?;
        if (w, h) != (cam.width(), cam.height()) {
            return Err(SceneError::EmptyLabelImage {
                path: path.display().to_string(),
                reason: format!(
                    "image is {w}x{h} but camera expects {}x{}",
                    cam.width(),
                    cam.height()
                ),
            });
        }
        masks.extend(masks_from_labels(cam.view_id(), w, h, &values));
    }
    SceneManifest::new(cameras, masks)
}

/// Writes one 16-bit label PNG per camera. Where masks overlap, the mask
/// with the larger instance index wins.
pub fn save_label_images(scene: &SceneManifest, dir: &Path) -> Result<(), SceneError> {
    fs::create_dir_all(dir)?;
    for cam in scene.cameras() {
        let (w, h) = (cam.width(), cam.height());
        let mut values = vec![0u16; w as usize * h as usize];
        for node in scene.nodes_in_view(cam.view_id()) {
            let m = scene.node(node);
            let label = u16::try_from(m.instance_index)
                .ok()
                .filter(|&l| l > 0)
                .ok_or_else(|| {
                    SceneError::NodeMismatch(format!(
                        "instance index {} cannot be stored in a label image",
                        m.instance_index
                    ))
                })?;
            for (x, y) in m.region.iter() {
                values[y as usize * w as usize + x as usize] = label;
            }
        }
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(w, h, values).expect("buffer matches image size");
        buf.save(dir.join(label_image_name(cam.view_id())))?;
    }
    Ok(())
}

/// One line of the assignment JSON.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentRecord {
    pub view_id: u32,
    pub instance_index: u32,
    pub cluster_id: usize,
}

pub fn assignment_records(
    assignment: &ClusterAssignment,
    scene: &SceneManifest,
) -> Result<Vec<AssignmentRecord>, SceneError> {
    if assignment.len() != scene.node_count() {
        return Err(SceneError::NodeMismatch(format!(
            "assignment has {} nodes, scene has {}",
            assignment.len(),
            scene.node_count()
        )));
    }
    Ok((0..scene.node_count())
        .map(|n| {
            let (view_id, instance_index) = scene.node_key(n);
            AssignmentRecord {
                view_id,
                instance_index,
                cluster_id: assignment.label(n),
            }
        })
        .collect())
}

pub fn assignment_to_json(
    assignment: &ClusterAssignment,
    scene: &SceneManifest,
) -> Result<String, SceneError> {
    let mut text = serde_json::to_string_pretty(&assignment_records(assignment, scene)?)?;
    text.push('\n');
    Ok(text)
}

/// Writes `[{view_id, instance_index, cluster_id}, ...]` in node order.
pub fn save_assignment(
    assignment: &ClusterAssignment,
    scene: &SceneManifest,
    path: &Path,
) -> Result<(), SceneError> {
    fs::write(path, assignment_to_json(assignment, scene)?)?;
    Ok(())
}

/// Reads an assignment file; every scene node must appear exactly once.
pub fn load_assignment(path: &Path, scene: &SceneManifest) -> Result<ClusterAssignment, SceneError> {
    let records: Vec<AssignmentRecord> = serde_json::from_str(&fs::read_to_string(path)?)?;
    assignment_from_records(&records, scene)
}

pub fn assignment_from_records(
    records: &[AssignmentRecord],
    scene: &SceneManifest,
) -> Result<ClusterAssignment, SceneError> {
    let mut labels: Vec<Option<usize>> = vec![None; scene.node_count()];
    for r in records {
        let node = scene.node_id(r.view_id, r.instance_index).ok_or_else(|| {
            SceneError::NodeMismatch(format!(
                "({}, {}) is not a node of the scene",
                r.view_id, r.instance_index
            ))
        })?;
        if labels[node].replace(r.cluster_id).is_some() {
            return Err(SceneError::NodeMismatch(format!(
                "({}, {}) assigned twice",
                r.view_id, r.instance_index
            )));
        }
    }
    let labels = labels
        .into_iter()
        .enumerate()
        .map(|(n, l)| {
            l.ok_or_else(|| {
                let (v, m) = scene.node_key(n);
                SceneError::NodeMismatch(format!("({v}, {m}) has no cluster"))
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ClusterAssignment::from_labels(labels))
}

/// One entry of `proposals.json`; `file` is relative to the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub view_id: u32,
    pub file: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_id: Option<usize>,
}

/// Reads `proposals.json` and the binary PNG masks it lists.
pub fn load_proposals(manifest: &Path) -> Result<Vec<Proposal>, SceneError> {
    let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let records: Vec<ProposalRecord> = serde_json::from_str(&fs::read_to_string(manifest)?)?;
    let mut out = Vec::with_capacity(records.len());
    for rec in records {
        let path = base.join(&rec.file);
        let (w, h, values) = read_labels(&path)?;
        let mask = PixelSet::from_points(
            w,
            h,
            values
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != 0)
                .map(|(i, _)| (i as u32 % w, i as u32 / w)),
        );
        if mask.is_empty() {
            return Err(SceneError::EmptyLabelImage {
                path: path.display().to_string(),
                reason: "proposal mask is empty".into(),
            });
        }
        out.push(Proposal {
            view_id: rec.view_id,
            mask,
            score: rec.score,
            cluster_id: rec.cluster_id,
        });
    }
    Ok(out)
}

/// Writes `proposals/<view_id>/<r>.png` under `dir` plus `dir/proposals.json`;
/// `r` counts proposals per view in input order.
pub fn save_proposals(proposals: &[Proposal], dir: &Path) -> Result<PathBuf, SceneError> {
    let mut counters: std::collections::BTreeMap<u32, usize> = Default::default();
    let mut records = Vec::with_capacity(proposals.len());
    for p in proposals {
        let r = counters.entry(p.view_id).or_insert(0);
        let rel = format!("proposals/{}/{}.png", p.view_id, r);
        *r += 1;
        let path = dir.join(&rel);
        fs::create_dir_all(path.parent().expect("proposal path has a parent"))?;
        let (w, h) = (p.mask.width(), p.mask.height());
        let mut buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::new(w, h);
        for (x, y) in p.mask.iter() {
            buf.put_pixel(x, y, Luma([255]));
        }
        buf.save(&path)?;
        records.push(ProposalRecord {
            view_id: p.view_id,
            file: rel,
            score: p.score,
            cluster_id: p.cluster_id,
        });
    }
    let manifest = dir.join("proposals.json");
    write_json(&manifest, &records)?;
    Ok(manifest)
}
