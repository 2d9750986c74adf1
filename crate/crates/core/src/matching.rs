//! Descriptor-free region matching.
//!
//! Each instance region is sampled, every sample is mapped to its epipolar
//! line in another view, and the resulting band of thick lines is scored
//! against each instance region of that view:
//!
//! ```text
//! w(a → b) = |coverage ∩ R_b| / |R_b|  ·  #{lines touching R_b} / #{lines}
//! ```
//!
//! The two directed weights of a pair are averaged into the undirected
//! adjacency matrix used for clustering. A centroid-line baseline that
//! produces a binary graph lives here as well.

use std::collections::BTreeMap;
use std::path::Path;

use log::{debug, warn};
use nalgebra::{DMatrix, Point2};
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{epipolar_line, fundamental_from_poses, CameraView, FundamentalMatrix, GeometryError, Line2D};
use crate::raster::{rasterize_line_into, visit_line_pixels, PixelSet};
use crate::scene::SceneManifest;
use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("EmptyRegion: cannot sample an empty region")]
    EmptyRegion,
    #[error("AllDegenerate: every sampled point maps to the epipole")]
    AllDegenerate,
    #[error("region is {width}x{height} but the band for view {view} is {band_width}x{band_height}")]
    TargetMismatch {
        view: u32,
        width: u32,
        height: u32,
        band_width: u32,
        band_height: u32,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Sampling and raster settings for band construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchParams {
    /// Points sampled per region.
    pub n_samples: usize,
    /// Epipolar line thickness in pixels.
    pub thickness: f64,
    pub seed: u64,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            n_samples: 200,
            thickness: 2.0,
            seed: 0,
        }
    }
}

/// Samples pixel centers of `region`.
///
/// Draws `n` points uniformly with replacement; when the region has at most
/// `n` pixels every pixel is returned once, in row-major order.
pub fn sample_region_points(
    region: &PixelSet,
    n: usize,
    seed: u64,
) -> Result<Vec<Point2<f64>>, MatchError> {
    assert!(n >= 1, "sample budget must be positive");
    let pixels: Vec<(u32, u32)> = region.iter().collect();
    if pixels.is_empty() {
        return Err(MatchError::EmptyRegion);
    }
    let center = |(x, y): (u32, u32)| Point2::new(x as f64 + 0.5, y as f64 + 0.5);
    if pixels.len() <= n {
        return Ok(pixels.into_iter().map(center).collect());
    }
    let mut rng = seed::rng(seed, &[]);
    Ok((0..n)
        .map(|_| center(pixels[rng.gen_range(0..pixels.len())]))
        .collect())
}

/// The pencil of epipolar lines cast by one region into another view.
#[derive(Debug, Clone, PartialEq)]
pub struct EpipolarBand {
    /// Node id of the source region.
    pub source: usize,
    pub target_view: u32,
    /// One line per non-degenerate sample.
    pub lines: Vec<Line2D>,
    /// Union of the thick-line rasters, clipped to the target image.
    pub coverage: PixelSet,
    pub thickness: f64,
}

impl EpipolarBand {
    /// Assembles a band from explicit lines, rasterizing its coverage.
    pub fn from_lines(
        source: usize,
        target_view: u32,
        lines: Vec<Line2D>,
        thickness: f64,
        width: u32,
        height: u32,
    ) -> Self {
        let mut coverage = PixelSet::new(width, height);
        for line in &lines {
            rasterize_line_into(line, thickness, &mut coverage);
        }
        Self {
            source,
            target_view,
            lines,
            coverage,
            thickness,
        }
    }
}

/// Maps sample points through `f` and rasterizes the lines onto `target`.
pub fn band_from_points(
    source: usize,
    points: &[Point2<f64>],
    f: &FundamentalMatrix,
    target: &CameraView,
    thickness: f64,
) -> Result<EpipolarBand, MatchError> {
    debug_assert_eq!(f.target_view(), target.view_id());
    let lines: Vec<Line2D> = points
        .iter()
        .filter_map(|p| match epipolar_line(f, p) {
            Ok(l) => Some(l),
            Err(GeometryError::DegenerateLine) => None,
            Err(e) => unreachable!("epipolar_line only fails with DegenerateLine: {e}"),
        })
        .collect();
    if lines.is_empty() {
        return Err(MatchError::AllDegenerate);
    }
    Ok(EpipolarBand::from_lines(
        source,
        target.view_id(),
        lines,
        thickness,
        target.width(),
        target.height(),
    ))
}

/// Samples `region` and builds its band in `target`.
pub fn epipolar_band(
    source: usize,
    region: &PixelSet,
    f: &FundamentalMatrix,
    target: &CameraView,
    params: &MatchParams,
    seed: u64,
) -> Result<EpipolarBand, MatchError> {
    let points = sample_region_points(region, params.n_samples, seed)?;
    band_from_points(source, &points, f, target, params.thickness)
}

/// Cached per-region data for repeated weight evaluation.
struct RegionIndex<'a> {
    region: &'a PixelSet,
    area: usize,
    bbox: (u32, u32, u32, u32),
}

impl<'a> RegionIndex<'a> {
    fn new(region: &'a PixelSet) -> Option<Self> {
        Some(Self {
            region,
            area: region.len(),
            bbox: region.bbox()?,
        })
    }

    /// Whether the thick raster of `line` shares a pixel with the region.
    fn touched_by(&self, line: &Line2D, half: f64) -> bool {
        let (x0, y0, x1, y1) = self.bbox;
        let corners = [
            (x0 as f64 + 0.5, y0 as f64 + 0.5),
            (x1 as f64 + 0.5, y0 as f64 + 0.5),
            (x0 as f64 + 0.5, y1 as f64 + 0.5),
            (x1 as f64 + 0.5, y1 as f64 + 0.5),
        ];
        let margin = half + 1e-6;
        let signed = corners.map(|(x, y)| line.a() * x + line.b() * y + line.c());
        if signed.iter().all(|&s| s > margin) || signed.iter().all(|&s| s < -margin) {
            return false;
        }
        visit_line_pixels(line, half, self.bbox, |x, y| {
            self.region.contains(x as i64, y as i64)
        })
    }

    fn weight(&self, band: &EpipolarBand) -> f64 {
        let covered = band.coverage.intersection_count(self.region);
        if covered == 0 {
            return 0.0;
        }
        let half = band.thickness / 2.0;
        let touching = band.lines.iter().filter(|l| self.touched_by(l, half)).count();
        (covered as f64 / self.area as f64) * (touching as f64 / band.lines.len() as f64)
    }
}

/// Degree of intersection between a band and a region of its target view.
///
/// A line counts as passing through the region when its thick raster shares
/// at least one pixel with it.
pub fn edge_weight(band: &EpipolarBand, region: &PixelSet) -> Result<f64, MatchError> {
    if region.width() != band.coverage.width() || region.height() != band.coverage.height() {
        return Err(MatchError::TargetMismatch {
            view: band.target_view,
            width: region.width(),
            height: region.height(),
            band_width: band.coverage.width(),
            band_height: band.coverage.height(),
        });
    }
    if band.lines.is_empty() {
        return Err(MatchError::AllDegenerate);
    }
    match RegionIndex::new(region) {
        Some(index) => Ok(index.weight(band)),
        None => Err(MatchError::EmptyRegion),
    }
}

/// Undirected instance graph with a dense symmetric adjacency matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchGraph {
    weights: DMatrix<f64>,
    /// `(view_id, instance_index)` of each node.
    keys: Vec<(u32, u32)>,
    /// Ordered view pairs `(source, target)` whose target image contains
    /// the epipole, so bands degenerate into wedges.
    pub epipole_inside: Vec<(u32, u32)>,
    /// Directed pairs `(source node, target view)` skipped because every
    /// sample hit the epipole.
    pub degenerate_bands: Vec<(usize, u32)>,
}

impl MatchGraph {
    /// Builds a graph from a symmetric matrix; the caller vouches for the
    /// invariants (see [`MatchGraph::check_invariants`]).
    pub fn from_weights(weights: DMatrix<f64>, keys: Vec<(u32, u32)>) -> Self {
        assert_eq!(weights.nrows(), keys.len());
        assert_eq!(weights.ncols(), keys.len());
        Self {
            weights,
            keys,
            epipole_inside: Vec::new(),
            degenerate_bands: Vec::new(),
        }
    }

    /// Symmetrizes directed weights by their arithmetic mean.
    fn from_directed(directed: &DMatrix<f64>, keys: Vec<(u32, u32)>) -> Self {
        let n = keys.len();
        let mut w = DMatrix::zeros(n, n);
        for a in 0..n {
            for b in (a + 1)..n {
                let v = (directed[(a, b)] + directed[(b, a)]) / 2.0;
                w[(a, b)] = v;
                w[(b, a)] = v;
            }
        }
        Self::from_weights(w, keys)
    }

    pub fn node_count(&self) -> usize {
        self.keys.len()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn keys(&self) -> &[(u32, u32)] {
        &self.keys
    }

    pub fn weight(&self, a: usize, b: usize) -> f64 {
        self.weights[(a, b)]
    }

    /// Exact symmetry, zero diagonal, `[0, 1]` range and zero intra-view
    /// entries.
    pub fn check_invariants(&self) -> Result<(), String> {
        let n = self.node_count();
        for a in 0..n {
            for b in 0..n {
                let w = self.weights[(a, b)];
                if !(0.0..=1.0).contains(&w) {
                    return Err(format!("W[{a}][{b}] = {w} outside [0, 1]"));
                }
                if w != self.weights[(b, a)] {
                    return Err(format!("W[{a}][{b}] != W[{b}][{a}]"));
                }
                if (a == b || self.keys[a].0 == self.keys[b].0) && w != 0.0 {
                    return Err(format!("W[{a}][{b}] = {w} must be zero"));
                }
            }
        }
        Ok(())
    }

    /// Comma-separated dump of `W`, one row per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.weights.row_iter() {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Fundamental matrices for every ordered pair of distinct views.
pub fn pairwise_fundamentals(
    cameras: &[CameraView],
) -> Result<BTreeMap<(u32, u32), FundamentalMatrix>, GeometryError> {
    let mut out = BTreeMap::new();
    for ci in cameras {
        for cj in cameras {
            if ci.view_id() != cj.view_id() {
                out.insert((ci.view_id(), cj.view_id()), fundamental_from_poses(ci, cj)?);
            }
        }
    }
    Ok(out)
}

fn epipole_inside(f: &FundamentalMatrix, target: &CameraView) -> bool {
    let e = f.target_epipole();
    if e.z.abs() < 1e-15 {
        return false;
    }
    target.contains_point(&Point2::new(e.x / e.z, e.y / e.z))
}

/// Seed for the samples of one node, keyed on its stable `(view, instance)`.
pub fn node_sample_seed(seed: u64, view_id: u32, instance_index: u32) -> u64 {
    seed::derive(
        seed,
        &[seed::stage::SAMPLING, view_id as u64, instance_index as u64],
    )
}

/// Builds the band-intersection graph over all nodes of `scene`.
///
/// Ordered pairs are evaluated in parallel; each directed weight depends
/// only on the pair, so the matrix is independent of scheduling.
pub fn build_graph(scene: &SceneManifest, params: &MatchParams) -> Result<MatchGraph, MatchError> {
    let n = scene.node_count();
    let keys: Vec<(u32, u32)> = (0..n).map(|i| scene.node_key(i)).collect();
    let fundamentals = pairwise_fundamentals(scene.cameras())?;

    let samples: Vec<Vec<Point2<f64>>> = (0..n)
        .into_par_iter()
        .map(|a| {
            let m = scene.node(a);
            sample_region_points(
                &m.region,
                params.n_samples,
                node_sample_seed(params.seed, m.view_id, m.instance_index),
            )
        })
        .collect::<Result<_, _>>()?;
    let indices: Vec<RegionIndex> = scene
        .masks()
        .iter()
        .map(|m| RegionIndex::new(&m.region).ok_or(MatchError::EmptyRegion))
        .collect::<Result<_, _>>()?;

    let tasks: Vec<(usize, &CameraView)> = (0..n)
        .flat_map(|a| {
            let view = keys[a].0;
            scene
                .cameras()
                .iter()
                .filter(move |c| c.view_id() != view)
                .filter(|c| !scene.nodes_in_view(c.view_id()).is_empty())
                .map(move |c| (a, c))
        })
        .collect();

    let results: Vec<(usize, u32, Option<Vec<(usize, f64)>>)> = tasks
        .par_iter()
        .map(|&(a, target)| {
            let f = &fundamentals[&(keys[a].0, target.view_id())];
            match band_from_points(a, &samples[a], f, target, params.thickness) {
                Ok(band) => {
                    let row = scene
                        .nodes_in_view(target.view_id())
                        .map(|b| (b, indices[b].weight(&band)))
                        .collect();
                    (a, target.view_id(), Some(row))
                }
                Err(MatchError::AllDegenerate) => (a, target.view_id(), None),
                Err(e) => unreachable!("band construction from valid samples failed: {e}"),
            }
        })
        .collect();

    let mut directed = DMatrix::zeros(n, n);
    let mut degenerate = Vec::new();
    for (a, view, row) in results {
        match row {
            Some(row) => row.into_iter().for_each(|(b, w)| directed[(a, b)] = w),
            None => {
                warn!("node {a}: every sample is the epipole of view {view}; weights set to 0");
                degenerate.push((a, view));
            }
        }
    }

    let mut graph = MatchGraph::from_directed(&directed, keys);
    graph.degenerate_bands = degenerate;
    graph.epipole_inside = fundamentals
        .iter()
        .filter(|((_, j), f)| epipole_inside(f, scene.camera(*j).expect("camera exists")))
        .map(|(&pair, _)| pair)
        .collect();
    for (i, j) in &graph.epipole_inside {
        debug!("epipole of view {i} lies inside view {j}; bands there are wedges");
    }
    debug_assert!(graph.check_invariants().is_ok());
    Ok(graph)
}

/// Centroid-line baseline: each instance links, in every other view, to the
/// instance whose centroid lies closest to the epipolar line of its own
/// centroid. Directed links weigh 1 and are averaged like [`build_graph`].
pub fn point_baseline_match(scene: &SceneManifest) -> Result<MatchGraph, MatchError> {
    let n = scene.node_count();
    let keys: Vec<(u32, u32)> = (0..n).map(|i| scene.node_key(i)).collect();
    let fundamentals = pairwise_fundamentals(scene.cameras())?;
    let centroids: Vec<Point2<f64>> = scene
        .masks()
        .iter()
        .map(|m| {
            let (x, y) = m.region.centroid().expect("scene regions are nonempty");
            Point2::new(x, y)
        })
        .collect();

    let mut directed = DMatrix::zeros(n, n);
    for a in 0..n {
        for cam in scene.cameras() {
            let view = cam.view_id();
            let candidates = scene.nodes_in_view(view);
            if view == keys[a].0 || candidates.is_empty() {
                continue;
            }
            let line = match epipolar_line(&fundamentals[&(keys[a].0, view)], &centroids[a]) {
                Ok(l) => l,
                Err(_) => {
                    warn!("node {a}: centroid is the epipole of view {view}; skipped");
                    continue;
                }
            };
            let best = candidates
                .map(|b| (b, line.distance(centroids[b].x, centroids[b].y)))
                .fold(None, |best: Option<(usize, f64)>, (b, d)| match best {
                    Some((_, bd)) if bd <= d => best,
                    _ => Some((b, d)),
                })
                .expect("candidate range is nonempty");
            directed[(a, best.0)] = 1.0;
        }
    }
    Ok(MatchGraph::from_directed(&directed, keys))
}

/// Writes an RGB overlay: band coverage in red, `regions` in green.
pub fn save_band_overlay(
    band: &EpipolarBand,
    regions: &[&PixelSet],
    path: &Path,
) -> Result<(), image::ImageError> {
    let (w, h) = (band.coverage.width(), band.coverage.height());
    let mut img = image::RgbImage::new(w, h);
    for (x, y) in band.coverage.iter() {
        img.get_pixel_mut(x, y).0[0] = 255;
    }
    for region in regions {
        for (x, y) in region.iter() {
            img.get_pixel_mut(x, y).0[1] = 255;
        }
    }
    img.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::rasterize_line;
    use nalgebra::{Matrix3, Vector3};

    fn block(w: u32, h: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> PixelSet {
        let mut s = PixelSet::new(w, h);
        for y in y0..y1 {
            for x in x0..x1 {
                s.insert(x, y);
            }
        }
        s
    }

    /// Per-line exhaustive raster, intersected with the region.
    fn oracle_weight(band: &EpipolarBand, region: &PixelSet) -> f64 {
        let (w, h) = (region.width(), region.height());
        let mut coverage = PixelSet::new(w, h);
        let mut touching = 0;
        for line in &band.lines {
            let r = rasterize_line(line, band.thickness, w, h);
            if r.intersects(region) {
                touching += 1;
            }
            coverage.union_with(&r);
        }
        (coverage.intersection_count(region) as f64 / region.len() as f64)
            * (touching as f64 / band.lines.len() as f64)
    }

    #[test]
    fn single_pixel_region_is_returned_once() {
        let r = PixelSet::from_points(8, 8, [(3, 4)]);
        let pts = sample_region_points(&r, 200, 1).unwrap();
        assert_eq!(pts, vec![Point2::new(3.5, 4.5)]);
    }

    #[test]
    fn sampling_is_deterministic_and_inside() {
        let r = block(32, 32, 4, 4, 20, 20);
        let a = sample_region_points(&r, 50, 9).unwrap();
        let b = sample_region_points(&r, 50, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
        assert!(a.iter().all(|p| r.contains(p.x.floor() as i64, p.y.floor() as i64)));
        assert_ne!(a, sample_region_points(&r, 50, 10).unwrap());
        assert_eq!(sample_region_points(&PixelSet::new(4, 4), 5, 0), Err(MatchError::EmptyRegion));
    }

    #[test]
    fn handcrafted_weight_is_point_three() {
        // 10x10 region; lines at y = 11, 13, 14 cover its rows 10..15
        // (50 px), vertical lines at x = 25 miss it entirely.
        let region = block(32, 32, 10, 10, 20, 20);
        assert_eq!(region.len(), 100);
        let mut lines = Vec::new();
        for y in [11.0, 13.0, 14.0] {
            lines.extend(std::iter::repeat(Line2D::new(0.0, 1.0, -y).unwrap()).take(40));
        }
        lines.extend(std::iter::repeat(Line2D::new(1.0, 0.0, -25.0).unwrap()).take(80));
        let band = EpipolarBand::from_lines(0, 1, lines, 2.0, 32, 32);
        assert_eq!(band.coverage.intersection_count(&region), 50);
        let w = edge_weight(&band, &region).unwrap();
        assert!((w - 0.3).abs() < 1e-15);
        assert_eq!(w, oracle_weight(&band, &region));
    }

    #[test]
    fn disjoint_and_full_cover() {
        let region = block(16, 16, 4, 4, 8, 8);
        let far = EpipolarBand::from_lines(0, 1, vec![Line2D::new(0.0, 1.0, -14.0).unwrap()], 2.0, 16, 16);
        assert_eq!(edge_weight(&far, &region).unwrap(), 0.0);
        let lines = (0..4).map(|i| Line2D::new(0.0, 1.0, -(5.0 + i as f64)).unwrap()).collect();
        let full = EpipolarBand::from_lines(0, 1, lines, 2.0, 16, 16);
        assert_eq!(edge_weight(&full, &region).unwrap(), 1.0);
    }

    #[test]
    fn rectified_band_stays_on_its_rows() {
        let k = Matrix3::new(100.0, 0.0, 32.0, 0.0, 100.0, 32.0, 0.0, 0.0, 1.0);
        let a = CameraView::new(0, k, Matrix3::identity(), Vector3::zeros(), 64, 64).unwrap();
        let b = CameraView::new(1, k, Matrix3::identity(), Vector3::new(-1.0, 0.0, 0.0), 64, 64)
            .unwrap();
        let f = fundamental_from_poses(&a, &b).unwrap();
        let y = 20u32;
        let region = block(64, 64, 10, y, 30, y + 1);
        let params = MatchParams::default();
        let band = epipolar_band(0, &region, &f, &b, &params, 3).unwrap();
        assert_eq!(band.lines.len(), 20);
        for (_, py) in band.coverage.iter() {
            assert!(py + 1 >= y && py <= y + 1);
        }
    }
}
