//! Superpixels to 3D point clusters and pairwise centroid distances.
//!
//! This is where the self-supervised targets come from: each kept cluster is
//! back-projected through the camera intrinsics, and the label for a pair of
//! clusters is the Euclidean distance between their point-cloud centroids.

use std::hash::{Hash, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depthio::{DepthFrame, Intrinsics};
use crate::error::{Error, Result};
use crate::superpix::{self, SlicParams, SuperpixelMap};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }

    pub fn distance(&self, other: &Point3) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        let dz = self.z - other.z;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Pixel `(u, v)` (column, row) at z-depth `z` to a camera-frame point.
pub fn backproject(u: f64, v: f64, z: f64, intr: &Intrinsics) -> Result<Point3> {
    if !(z > 0.0) {
        return Err(Error::invalid(format!("backproject needs z > 0, got {z}")));
    }
    Ok(Point3 {
        x: (u - intr.cx) * z / intr.fx,
        y: (v - intr.cy) * z / intr.fy,
        z,
    })
}

/// Inverse of [`backproject`]; returns `(u, v)`.
pub fn project(p: &Point3, intr: &Intrinsics) -> (f64, f64) {
    (intr.fx * p.x / p.z + intr.cx, intr.fy * p.y / p.z + intr.cy)
}

/// Normalized, half-open pixel box: `u` spans columns, `v` rows, both in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBoxNorm {
    pub u0: f64,
    pub v0: f64,
    pub u1: f64,
    pub v1: f64,
}

impl BBoxNorm {
    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.u0)
            && (0.0..=1.0).contains(&self.u1)
            && (0.0..=1.0).contains(&self.v0)
            && (0.0..=1.0).contains(&self.v1)
            && self.u0 < self.u1
            && self.v0 < self.v1
    }

    /// Horizontally mirrored box.
    pub fn flip_horizontal(&self) -> Self {
        BBoxNorm {
            u0: 1.0 - self.u1,
            u1: 1.0 - self.u0,
            ..*self
        }
    }
}

/// Fraction of the convex hull's pixel raster covered by `mask`.
///
/// Pixels are `(row, col)`; the hull is taken over pixel centers and the raster
/// counts every pixel center inside or on it. Collinear masks give 1.0.
pub fn solidity(mask: &[(usize, usize)]) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::invalid("solidity of an empty mask"));
    }
    let mut pts: Vec<(i64, i64)> = mask.iter().map(|&(r, c)| (c as i64, r as i64)).collect();
    pts.sort_unstable();
    pts.dedup();
    let hull = convex_hull(&pts);
    if hull.len() < 3 {
        return Ok(1.0);
    }
    let (xmin, xmax) = hull.iter().fold((i64::MAX, i64::MIN), |a, p| (a.0.min(p.0), a.1.max(p.0)));
    let (ymin, ymax) = hull.iter().fold((i64::MAX, i64::MIN), |a, p| (a.0.min(p.1), a.1.max(p.1)));
    let mut raster = 0usize;
    for y in ymin..=ymax {
        for x in xmin..=xmax {
            if inside_convex(&hull, (x, y)) {
                raster += 1;
            }
        }
    }
    Ok(pts.len() as f64 / raster as f64)
}

fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Andrew's monotone chain on sorted, deduplicated points. Counter-clockwise,
/// collinear points dropped.
fn convex_hull(sorted: &[(i64, i64)]) -> Vec<(i64, i64)> {
    if sorted.len() < 3 {
        return sorted.to_vec();
    }
    let mut hull: Vec<(i64, i64)> = Vec::with_capacity(2 * sorted.len());
    for &p in sorted {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in sorted.iter().rev().skip(1) {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

fn inside_convex(hull: &[(i64, i64)], p: (i64, i64)) -> bool {
    (0..hull.len()).all(|i| cross(hull[i], hull[(i + 1) % hull.len()], p) >= 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub id: u32,
    pub pixel_count: usize,
    /// Mean of the back-projected valid member pixels; zero when none are valid.
    pub centroid: Point3,
    /// Population std of member z-depths, meters.
    pub depth_std: f64,
    pub solidity: f64,
    pub missing_frac: f64,
    pub bbox_norm: BBoxNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterThresholds {
    pub min_solidity: f64,
    pub max_depth_std: f64,
    pub max_missing_frac: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        FilterThresholds {
            min_solidity: 0.75,
            max_depth_std: 0.2,
            max_missing_frac: 0.05,
        }
    }
}

impl FilterThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.min_solidity)
            || !(self.max_depth_std >= 0.0)
            || !(0.0..=1.0).contains(&self.max_missing_frac)
        {
            return Err(Error::invalid(format!("filter thresholds out of range: {self:?}")));
        }
        Ok(())
    }

    pub fn keeps(&self, rec: &ClusterRecord) -> bool {
        rec.solidity > self.min_solidity
            && rec.depth_std < self.max_depth_std
            && rec.missing_frac < self.max_missing_frac
    }
}

/// Statistics for one superpixel given its member pixels.
pub fn cluster_record(frame: &DepthFrame, id: u32, pixels: &[(usize, usize)]) -> Result<ClusterRecord> {
    if pixels.is_empty() {
        return Err(Error::invalid(format!("cluster {id} has no pixels")));
    }
    let intr = &frame.intrinsics;
    let (mut sx, mut sy, mut sz) = (0.0, 0.0, 0.0);
    let mut n_valid = 0usize;
    let (mut rmin, mut rmax, mut cmin, mut cmax) = (usize::MAX, 0, usize::MAX, 0);
    for &(r, c) in pixels {
        rmin = rmin.min(r);
        rmax = rmax.max(r);
        cmin = cmin.min(c);
        cmax = cmax.max(c);
        if frame.valid[[r, c]] {
            let p = backproject(c as f64, r as f64, frame.depth[[r, c]], intr)?;
            sx += p.x;
            sy += p.y;
            sz += p.z;
            n_valid += 1;
        }
    }
    let (centroid, depth_std, missing_frac) = if n_valid == 0 {
        (Point3::default(), 0.0, 1.0)
    } else {
        let n = n_valid as f64;
        let centroid = Point3::new(sx / n, sy / n, sz / n);
        let var = pixels
            .iter()
            .filter(|&&(r, c)| frame.valid[[r, c]])
            .map(|&(r, c)| (frame.depth[[r, c]] - centroid.z).powi(2))
            .sum::<f64>()
            / n;
        let missing = (pixels.len() - n_valid) as f64 / pixels.len() as f64;
        (centroid, var.sqrt(), missing)
    };
    let (w, h) = (frame.width() as f64, frame.height() as f64);
    Ok(ClusterRecord {
        id,
        pixel_count: pixels.len(),
        centroid,
        depth_std,
        solidity: solidity(pixels)?,
        missing_frac,
        bbox_norm: BBoxNorm {
            u0: cmin as f64 / w,
            v0: rmin as f64 / h,
            u1: (cmax + 1) as f64 / w,
            v1: (rmax + 1) as f64 / h,
        },
    })
}

pub fn cluster_stats(frame: &DepthFrame, spmap: &SuperpixelMap, id: u32) -> Result<ClusterRecord> {
    if id as usize >= spmap.n {
        return Err(Error::invalid(format!("unknown superpixel id {id} (n = {})", spmap.n)));
    }
    let pixels: Vec<(usize, usize)> = spmap
        .labels
        .indexed_iter()
        .filter(|(_, &l)| l == id)
        .map(|(p, _)| p)
        .collect();
    cluster_record(frame, id, &pixels)
}

/// Records for every superpixel, in id order.
pub fn all_cluster_stats(frame: &DepthFrame, spmap: &SuperpixelMap) -> Result<Vec<ClusterRecord>> {
    spmap
        .members()
        .iter()
        .enumerate()
        .map(|(id, px)| cluster_record(frame, id as u32, px))
        .collect()
}

pub fn filter_clusters(records: &[ClusterRecord], th: &FilterThresholds) -> Vec<ClusterRecord> {
    records.iter().filter(|r| th.keeps(r)).copied().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairLabel {
    pub frame_id: String,
    pub id_a: u32,
    pub id_b: u32,
    /// Centroid distance in meters.
    pub distance: f64,
    pub bbox_a: BBoxNorm,
    pub bbox_b: BBoxNorm,
}

/// Draws `min(max_pairs, C(n,2))` distinct unordered pairs uniformly.
///
/// Output is sorted by position in the lexicographic pair enumeration, so
/// `id_a < id_b` whenever the input is in id order.
pub fn sample_pairs(frame_id: &str, valid: &[ClusterRecord], max_pairs: usize, seed: u64) -> Vec<PairLabel> {
    let n = valid.len();
    if n < 2 {
        return Vec::new();
    }
    let total = n * (n - 1) / 2;
    let mut picks: Vec<usize> = if max_pairs >= total {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, total, max_pairs).into_vec()
    };
    picks.sort_unstable();

    // Linear index k enumerates (0,1), (0,2), ..., (0,n-1), (1,2), ...
    let mut out = Vec::with_capacity(picks.len());
    let mut i = 0usize;
    let mut row_start = 0usize;
    for k in picks {
        while k >= row_start + (n - 1 - i) {
            row_start += n - 1 - i;
            i += 1;
        }
        let j = i + 1 + (k - row_start);
        let (a, b) = if valid[i].id <= valid[j].id {
            (&valid[i], &valid[j])
        } else {
            (&valid[j], &valid[i])
        };
        out.push(PairLabel {
            frame_id: frame_id.to_string(),
            id_a: a.id,
            id_b: b.id,
            distance: a.centroid.distance(&b.centroid),
            bbox_a: a.bbox_norm,
            bbox_b: b.bbox_norm,
        });
    }
    out
}

/// Stable per-frame seed so labels do not depend on processing order.
pub fn frame_seed(seed: u64, frame_id: &str) -> u64 {
    // FNV-1a; std's DefaultHasher is not guaranteed stable across releases.
    let mut h = Fnv1a::default();
    seed.hash(&mut h);
    frame_id.hash(&mut h);
    h.finish()
}

struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }
}

impl Hasher for Fnv1a {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for b in bytes {
            self.0 ^= u64::from(*b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelingConfig {
    pub slic: SlicParams,
    pub thresholds: FilterThresholds,
    pub pairs_per_frame: usize,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        LabelingConfig {
            slic: SlicParams::default(),
            thresholds: FilterThresholds::default(),
            pairs_per_frame: 32,
        }
    }
}

/// Everything the pretext task needs from one frame.
#[derive(Debug, Clone)]
pub struct FrameLabels {
    pub superpixels: SuperpixelMap,
    pub kept: Vec<ClusterRecord>,
    pub pairs: Vec<PairLabel>,
}

/// Full annotation pipeline: fill, smooth, SLIC, statistics, filter, pair sampling.
pub fn label_frame(frame: &DepthFrame, cfg: &LabelingConfig, seed: u64) -> Result<FrameLabels> {
    let superpixels = superpix::segment_frame(frame, &cfg.slic)?;
    let records = all_cluster_stats(frame, &superpixels)?;
    let kept = filter_clusters(&records, &cfg.thresholds);
    let pairs = sample_pairs(
        &frame.frame_id,
        &kept,
        cfg.pairs_per_frame,
        frame_seed(seed, &frame.frame_id),
    );
    Ok(FrameLabels {
        superpixels,
        kept,
        pairs,
    })
}
