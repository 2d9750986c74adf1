//! Dense pixel sets and deterministic thick-line rasterization.
//!
//! Pixel `(x, y)` is the unit square `[x, x+1) × [y, y+1)`; its center is
//! `(x + 0.5, y + 0.5)`. Every coverage decision in the crate is made on
//! pixel centers, so a pixel belongs to a thick line exactly when
//! [`Line2D::covers_pixel`] holds.

use crate::geometry::Line2D;

/// A set of integer pixel coordinates inside a `width × height` image,
/// stored as a row-major bitmap.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct PixelSet {
    width: u32,
    height: u32,
    words: Vec<u64>,
}

impl std::fmt::Debug for PixelSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PixelSet")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("len", &self.len())
            .finish()
    }
}

impl PixelSet {
    pub fn new(width: u32, height: u32) -> Self {
        let bits = width as usize * height as usize;
        Self {
            width,
            height,
            words: vec![0; bits.div_ceil(64)],
        }
    }

    /// Builds a set from coordinates; points outside the image are dropped.
    pub fn from_points<I>(width: u32, height: u32, points: I) -> Self
    where
        I: IntoIterator<Item = (u32, u32)>,
    {
        let mut set = Self::new(width, height);
        for (x, y) in points {
            set.insert(x, y);
        }
        set
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    #[inline]
    fn bit(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    /// Inserts a pixel. Returns `false` when the pixel lies outside the image.
    #[inline]
    pub fn insert(&mut self, x: u32, y: u32) -> bool {
        if x >= self.width || y >= self.height {
            return false;
        }
        let b = self.bit(x, y);
        self.words[b / 64] |= 1 << (b % 64);
        true
    }

    #[inline]
    pub fn remove(&mut self, x: u32, y: u32) {
        if x < self.width && y < self.height {
            let b = self.bit(x, y);
            self.words[b / 64] &= !(1 << (b % 64));
        }
    }

    /// Membership test accepting any signed coordinate.
    #[inline]
    pub fn contains(&self, x: i64, y: i64) -> bool {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return false;
        }
        let b = self.bit(x as u32, y as u32);
        self.words[b / 64] >> (b % 64) & 1 == 1
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn clear(&mut self) {
        self.words.iter_mut().for_each(|w| *w = 0);
    }

    fn check_dims(&self, other: &PixelSet) {
        assert!(
            self.width == other.width && self.height == other.height,
            "pixel sets have different dimensions: {}x{} vs {}x{}",
            self.width,
            self.height,
            other.width,
            other.height
        );
    }

    /// `|self ∩ other|`. Both sets must share dimensions.
    pub fn intersection_count(&self, other: &PixelSet) -> usize {
        self.check_dims(other);
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    /// `|self ∪ other|`. Both sets must share dimensions.
    pub fn union_count(&self, other: &PixelSet) -> usize {
        self.check_dims(other);
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a | b).count_ones() as usize)
            .sum()
    }

    pub fn intersects(&self, other: &PixelSet) -> bool {
        self.check_dims(other);
        self.words.iter().zip(&other.words).any(|(a, b)| a & b != 0)
    }

    pub fn union_with(&mut self, other: &PixelSet) {
        self.check_dims(other);
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
    }

    pub fn is_subset(&self, other: &PixelSet) -> bool {
        self.check_dims(other);
        self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0)
    }

    /// Mask intersection-over-union; two empty sets give 0.
    pub fn iou(&self, other: &PixelSet) -> f64 {
        let union = self.union_count(other);
        if union == 0 {
            return 0.0;
        }
        self.intersection_count(other) as f64 / union as f64
    }

    /// Pixels in row-major order (y, then x).
    pub fn iter(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let width = self.width as usize;
        self.words.iter().enumerate().flat_map(move |(wi, &word)| {
            let mut w = word;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let tz = w.trailing_zeros() as usize;
                w &= w - 1;
                let b = wi * 64 + tz;
                Some(((b % width) as u32, (b / width) as u32))
            })
        })
    }

    /// Inclusive bounding box `(x0, y0, x1, y1)`, or `None` when empty.
    pub fn bbox(&self) -> Option<(u32, u32, u32, u32)> {
        let mut it = self.iter();
        let (x, y) = it.next()?;
        let mut bb = (x, y, x, y);
        for (x, y) in it {
            bb.0 = bb.0.min(x);
            bb.1 = bb.1.min(y);
            bb.2 = bb.2.max(x);
            bb.3 = bb.3.max(y);
        }
        Some(bb)
    }

    /// Mean of pixel centers, or `None` when empty.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let mut n = 0usize;
        let (mut sx, mut sy) = (0.0, 0.0);
        for (x, y) in self.iter() {
            sx += x as f64 + 0.5;
            sy += y as f64 + 0.5;
            n += 1;
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    /// Morphological dilation with a Euclidean disk of `radius` pixels.
    pub fn dilate(&self, radius: u32) -> PixelSet {
        let offsets = disk_offsets(radius);
        let mut out = PixelSet::new(self.width, self.height);
        for (x, y) in self.iter() {
            for &(dx, dy) in &offsets {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx >= 0 && ny >= 0 {
                    out.insert(nx as u32, ny as u32);
                }
            }
        }
        out
    }

    /// Morphological erosion with a Euclidean disk of `radius` pixels;
    /// pixels outside the image count as background.
    pub fn erode(&self, radius: u32) -> PixelSet {
        let offsets = disk_offsets(radius);
        let mut out = PixelSet::new(self.width, self.height);
        for (x, y) in self.iter() {
            if offsets
                .iter()
                .all(|&(dx, dy)| self.contains(x as i64 + dx, y as i64 + dy))
            {
                out.insert(x, y);
            }
        }
        out
    }
}

fn disk_offsets(radius: u32) -> Vec<(i64, i64)> {
    let r = radius as i64;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                offsets.push((dx, dy));
            }
        }
    }
    offsets
}

/// Rasterizes `line` with the given `thickness` onto a fresh
/// `width × height` set: a pixel is set iff its center lies within
/// `thickness / 2` of the line.
pub fn rasterize_line(line: &Line2D, thickness: f64, width: u32, height: u32) -> PixelSet {
    let mut out = PixelSet::new(width, height);
    rasterize_line_into(line, thickness, &mut out);
    out
}

/// Like [`rasterize_line`], but ORs the raster into an existing set.
pub fn rasterize_line_into(line: &Line2D, thickness: f64, out: &mut PixelSet) {
    assert!(thickness > 0.0, "line thickness must be positive");
    let (w, h) = (out.width(), out.height());
    if w == 0 || h == 0 {
        return;
    }
    visit_line_pixels(line, thickness / 2.0, (0, 0, w - 1, h - 1), |x, y| {
        out.insert(x, y);
        false
    });
}

/// Calls `f` for every pixel of the inclusive window `(x0, y0, x1, y1)`
/// whose center lies within `half` of `line`, stopping early once `f`
/// returns `true`. Returns whether it stopped early.
pub fn visit_line_pixels<F>(line: &Line2D, half: f64, window: (u32, u32, u32, u32), mut f: F) -> bool
where
    F: FnMut(u32, u32) -> bool,
{
    let (x0, y0, x1, y1) = window;
    let (a, b, c) = (line.a(), line.b(), line.c());
    // Walk along the dominant axis; the candidate window per step is padded
    // by one pixel and every candidate is confirmed with the exact predicate.
    if b.abs() >= a.abs() {
        for x in x0..=x1 {
            let cx = x as f64 + 0.5;
            let (lo, hi) = span(a * cx + c, b, half);
            for y in clamp_range(lo, hi, y0, y1) {
                if line.covers_pixel(x, y, half) && f(x, y) {
                    return true;
                }
            }
        }
    } else {
        for y in y0..=y1 {
            let cy = y as f64 + 0.5;
            let (lo, hi) = span(b * cy + c, a, half);
            for x in clamp_range(lo, hi, x0, x1) {
                if line.covers_pixel(x, y, half) && f(x, y) {
                    return true;
                }
            }
        }
    }
    false
}

/// Solves `|offset + slope * t| <= half` for the center coordinate `t`.
fn span(offset: f64, slope: f64, half: f64) -> (f64, f64) {
    let t0 = (-half - offset) / slope;
    let t1 = (half - offset) / slope;
    (t0.min(t1), t0.max(t1))
}

fn clamp_range(lo: f64, hi: f64, min: u32, max: u32) -> std::ops::RangeInclusive<u32> {
    let first = (lo - 0.5).floor() - 1.0;
    let last = (hi - 0.5).ceil() + 1.0;
    if !(last >= min as f64) || !(first <= max as f64) {
        #[allow(clippy::reversed_empty_ranges)]
        return 1..=0;
    }
    let first = first.max(min as f64) as u32;
    let last = last.min(max as f64) as u32;
    first..=last
}
