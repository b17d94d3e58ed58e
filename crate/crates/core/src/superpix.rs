//! SLIC over-segmentation of metric depth maps.

use std::collections::{HashMap, VecDeque};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::depthio::DepthFrame;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlicParams {
    /// Target number of segments.
    pub n_segments: usize,
    /// Weight of spatial proximity against depth similarity.
    pub compactness: f64,
    /// Pre-smoothing Gaussian std in pixels.
    pub sigma: f64,
    pub iterations: usize,
    /// Components smaller than this fraction of S² are merged away.
    pub min_region_factor: f64,
}

impl Default for SlicParams {
    fn default() -> Self {
        SlicParams {
            n_segments: 500,
            compactness: 3.0,
            sigma: 3.0,
            iterations: 10,
            min_region_factor: 0.25,
        }
    }
}

impl SlicParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_segments == 0 {
            return Err(Error::invalid("n_segments must be >= 1"));
        }
        if !(self.compactness > 0.0) {
            return Err(Error::invalid("compactness must be > 0"));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::invalid("sigma must be >= 0"));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be >= 1"));
        }
        if !(self.min_region_factor >= 0.0) {
            return Err(Error::invalid("min_region_factor must be >= 0"));
        }
        Ok(())
    }
}

/// Per-pixel segment ids, contiguous in `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpixelMap {
    pub labels: Array2<u32>,
    pub n: usize,
}

impl SuperpixelMap {
    /// Pixel coordinates `(row, col)` of every segment, in row-major scan order.
    pub fn members(&self) -> Vec<Vec<(usize, usize)>> {
        let mut out = vec![Vec::new(); self.n];
        for ((r, c), &l) in self.labels.indexed_iter() {
            out[l as usize].push((r, c));
        }
        out
    }
}

/// Replaces every invalid pixel with the depth of its nearest valid pixel.
///
/// Distance is Euclidean in pixel units; ties go to the smaller row, then the
/// smaller column.
pub fn fill_invalid(frame: &DepthFrame) -> Result<Array2<f64>> {
    let (h, w) = frame.depth.dim();
    if frame.valid.iter().all(|&v| !v) {
        return Err(Error::invalid(format!(
            "frame {} has no valid pixels",
            frame.frame_id
        )));
    }
    let mut out = frame.depth.clone();
    for r in 0..h {
        for c in 0..w {
            if frame.valid[[r, c]] {
                continue;
            }
            // Ring r contains pixels at Chebyshev distance r, whose Euclidean
            // distance is at least r; stop once rings cannot beat the best.
            let mut best: Option<(usize, usize, usize)> = None;
            let max_ring = h.max(w);
            for ring in 1..=max_ring {
                if let Some((d2, _, _)) = best {
                    if ring * ring > d2 {
                        break;
                    }
                }
                let r0 = r as isize - ring as isize;
                let r1 = r as isize + ring as isize;
                let c0 = c as isize - ring as isize;
                let c1 = c as isize + ring as isize;
                for rr in r0.max(0)..=r1.min(h as isize - 1) {
                    let on_edge_row = rr == r0 || rr == r1;
                    let mut cc = c0.max(0);
                    while cc <= c1.min(w as isize - 1) {
                        let (ru, cu) = (rr as usize, cc as usize);
                        if frame.valid[[ru, cu]] {
                            let dr = rr - r as isize;
                            let dc = cc - c as isize;
                            let d2 = (dr * dr + dc * dc) as usize;
                            let cand = (d2, ru, cu);
                            if best.is_none_or(|b| cand < b) {
                                best = Some(cand);
                            }
                        }
                        if on_edge_row || cc == c1 {
                            cc += 1;
                        } else {
                            // Interior rows of the ring only need the two side columns.
                            cc = c1;
                        }
                    }
                }
            }
            let (_, br, bc) = best.expect("at least one valid pixel exists");
            out[[r, c]] = frame.depth[[br, bc]];
        }
    }
    Ok(out)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with edge replication; radius ⌈3σ⌉.
pub fn gaussian_smooth(image: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return image.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (h, w) = image.dim();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;

    let mut tmp = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, &wgt) in kernel.iter().enumerate() {
                let cc = clamp(c as isize + k as isize - radius, w);
                acc += wgt * image[[r, cc]];
            }
            tmp[[r, c]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, &wgt) in kernel.iter().enumerate() {
                let rr = clamp(r as isize + k as isize - radius, h);
                acc += wgt * tmp[[rr, c]];
            }
            out[[r, c]] = acc;
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct Center {
    depth: f64,
    row: f64,
    col: f64,
}

fn gradient_at(img: &Array2<f64>, r: usize, c: usize) -> f64 {
    let (h, w) = img.dim();
    let v = img[[r, c]];
    let mut g = 0.0;
    if r > 0 {
        g += (img[[r - 1, c]] - v).abs();
    }
    if r + 1 < h {
        g += (img[[r + 1, c]] - v).abs();
    }
    if c > 0 {
        g += (img[[r, c - 1]] - v).abs();
    }
    if c + 1 < w {
        g += (img[[r, c + 1]] - v).abs();
    }
    g
}

/// Grid seeds: `round(n/S)` cells per axis, one seed at the pixel holding each
/// cell center, then nudged to the lowest-gradient pixel of its 3×3 neighborhood.
fn seed_centers(img: &Array2<f64>, step: f64) -> Vec<Center> {
    let (h, w) = img.dim();
    let ny = ((h as f64 / step).round() as usize).max(1);
    let nx = ((w as f64 / step).round() as usize).max(1);
    let mut centers = Vec::with_capacity(ny * nx);
    for iy in 0..ny {
        let r = (((iy as f64 + 0.5) * h as f64 / ny as f64) - 0.5).floor().max(0.0) as usize;
        for ix in 0..nx {
            let c = (((ix as f64 + 0.5) * w as f64 / nx as f64) - 0.5).floor().max(0.0) as usize;
            let mut best = (gradient_at(img, r, c), r, c);
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let rr = r as isize + dr;
                    let cc = c as isize + dc;
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        continue;
                    }
                    let (ru, cu) = (rr as usize, cc as usize);
                    let g = gradient_at(img, ru, cu);
                    if g < best.0 {
                        best = (g, ru, cu);
                    }
                }
            }
            let (_, br, bc) = best;
            centers.push(Center {
                depth: img[[br, bc]],
                row: br as f64,
                col: bc as f64,
            });
        }
    }
    centers
}

/// SLIC on a single-channel metric depth image.
///
/// Distance: D² = (Δdepth/κ)² + (Δxy/S)² with S = √(H·W/K).
pub fn slic(smoothed: &Array2<f64>, params: &SlicParams) -> Result<SuperpixelMap> {
    params.validate()?;
    let (h, w) = smoothed.dim();
    if params.n_segments > h * w {
        return Err(Error::invalid(format!(
            "n_segments {} exceeds pixel count {}",
            params.n_segments,
            h * w
        )));
    }
    let step = ((h * w) as f64 / params.n_segments as f64).sqrt();
    let mut centers = seed_centers(smoothed, step);
    let inv_k2 = 1.0 / (params.compactness * params.compactness);
    let inv_s2 = 1.0 / (step * step);

    const UNASSIGNED: u32 = u32::MAX;
    let mut labels = Array2::<u32>::from_elem((h, w), UNASSIGNED);
    let mut dist = Array2::<f64>::from_elem((h, w), f64::INFINITY);

    for _ in 0..params.iterations {
        dist.fill(f64::INFINITY);
        for (k, ctr) in centers.iter().enumerate() {
            let r0 = (ctr.row - step).ceil().max(0.0) as usize;
            let r1 = ((ctr.row + step).floor() as isize).min(h as isize - 1);
            let c0 = (ctr.col - step).ceil().max(0.0) as usize;
            let c1 = ((ctr.col + step).floor() as isize).min(w as isize - 1);
            if r1 < 0 || c1 < 0 {
                continue;
            }
            for r in r0..=r1 as usize {
                let dy = r as f64 - ctr.row;
                for c in c0..=c1 as usize {
                    let dx = c as f64 - ctr.col;
                    let dd = smoothed[[r, c]] - ctr.depth;
                    let d2 = dd * dd * inv_k2 + (dx * dx + dy * dy) * inv_s2;
                    if d2 < dist[[r, c]] {
                        dist[[r, c]] = d2;
                        labels[[r, c]] = k as u32;
                    }
                }
            }
        }

        let mut sums = vec![(0.0f64, 0.0f64, 0.0f64, 0usize); centers.len()];
        for ((r, c), &l) in labels.indexed_iter() {
            if l == UNASSIGNED {
                continue;
            }
            let s = &mut sums[l as usize];
            s.0 += smoothed[[r, c]];
            s.1 += r as f64;
            s.2 += c as f64;
            s.3 += 1;
        }
        for (ctr, s) in centers.iter_mut().zip(&sums) {
            if s.3 > 0 {
                let n = s.3 as f64;
                *ctr = Center {
                    depth: s.0 / n,
                    row: s.1 / n,
                    col: s.2 / n,
                };
            }
        }
    }

    // Pixels outside every window fall back to the nearest center in the image plane.
    for ((r, c), l) in labels.indexed_iter_mut() {
        if *l == UNASSIGNED {
            let mut best = (f64::INFINITY, 0u32);
            for (k, ctr) in centers.iter().enumerate() {
                let d = (r as f64 - ctr.row).powi(2) + (c as f64 - ctr.col).powi(2);
                if d < best.0 {
                    best = (d, k as u32);
                }
            }
            *l = best.1;
        }
    }

    let min_size = (params.min_region_factor * step * step).floor() as usize;
    Ok(enforce_connectivity(&labels, min_size))
}

/// Splits every label into its 4-connected components, merges components
/// smaller than `min_size` into the neighbor sharing the longest boundary
/// (ties: smallest neighbor label, then earliest component), and renumbers
/// the survivors `0..n` in scan order of their first pixel.
pub fn enforce_connectivity(labels: &Array2<u32>, min_size: usize) -> SuperpixelMap {
    let (h, w) = labels.dim();
    const NONE: usize = usize::MAX;
    let mut comp = Array2::<usize>::from_elem((h, w), NONE);
    let mut comp_label = Vec::new();
    let mut comp_size = Vec::new();
    let mut queue = VecDeque::new();

    for r in 0..h {
        for c in 0..w {
            if comp[[r, c]] != NONE {
                continue;
            }
            let id = comp_label.len();
            let lab = labels[[r, c]];
            comp[[r, c]] = id;
            queue.push_back((r, c));
            let mut size = 0;
            while let Some((pr, pc)) = queue.pop_front() {
                size += 1;
                for (nr, nc) in neighbors4(pr, pc, h, w) {
                    if comp[[nr, nc]] == NONE && labels[[nr, nc]] == lab {
                        comp[[nr, nc]] = id;
                        queue.push_back((nr, nc));
                    }
                }
            }
            comp_label.push(lab);
            comp_size.push(size);
        }
    }

    let n_comp = comp_label.len();
    // Shared boundary length between adjacent components, counted in 4-adjacent pixel pairs.
    let mut adjacency: Vec<HashMap<usize, usize>> = vec![HashMap::new(); n_comp];
    for r in 0..h {
        for c in 0..w {
            let a = comp[[r, c]];
            if c + 1 < w {
                let b = comp[[r, c + 1]];
                if a != b {
                    *adjacency[a].entry(b).or_default() += 1;
                    *adjacency[b].entry(a).or_default() += 1;
                }
            }
            if r + 1 < h {
                let b = comp[[r + 1, c]];
                if a != b {
                    *adjacency[a].entry(b).or_default() += 1;
                    *adjacency[b].entry(a).or_default() += 1;
                }
            }
        }
    }

    // Union-find style redirect: parent[i] == i for live components.
    let mut parent: Vec<usize> = (0..n_comp).collect();
    for i in 0..n_comp {
        if parent[i] != i || comp_size[i] >= min_size {
            continue;
        }
        let best = adjacency[i]
            .iter()
            .map(|(&j, &len)| (j, len))
            .min_by(|a, b| {
                b.1.cmp(&a.1)
                    .then(comp_label[a.0].cmp(&comp_label[b.0]))
                    .then(a.0.cmp(&b.0))
            });
        let Some((target, _)) = best else { continue };
        parent[i] = target;
        comp_size[target] += comp_size[i];
        let moved = std::mem::take(&mut adjacency[i]);
        for (j, len) in moved {
            adjacency[j].remove(&i);
            if j != target {
                *adjacency[target].entry(j).or_default() += len;
                *adjacency[j].entry(target).or_default() += len;
            }
        }
        adjacency[target].remove(&i);
    }

    let find = |mut i: usize| {
        while parent[i] != i {
            i = parent[i];
        }
        i
    };

    let mut remap = vec![NONE; n_comp];
    let mut next = 0usize;
    let mut out = Array2::<u32>::zeros((h, w));
    for ((r, c), o) in out.indexed_iter_mut() {
        let root = find(comp[[r, c]]);
        if remap[root] == NONE {
            remap[root] = next;
            next += 1;
        }
        *o = remap[root] as u32;
    }
    SuperpixelMap { labels: out, n: next }
}

fn neighbors4(r: usize, c: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let mut v = [(usize::MAX, usize::MAX); 4];
    if r > 0 {
        v[0] = (r - 1, c);
    }
    if r + 1 < h {
        v[1] = (r + 1, c);
    }
    if c > 0 {
        v[2] = (r, c - 1);
    }
    if c + 1 < w {
        v[3] = (r, c + 1);
    }
    v.into_iter().filter(|p| p.0 != usize::MAX)
}

/// Fill, smooth and segment a frame in one go.
pub fn segment_frame(frame: &DepthFrame, params: &SlicParams) -> Result<SuperpixelMap> {
    let filled = fill_invalid(frame)?;
    let smoothed = gaussian_smooth(&filled, params.sigma);
    slic(&smoothed, params)
}

/// True when every segment is a single 4-connected component.
pub fn is_four_connected(map: &SuperpixelMap) -> bool {
    let relabeled = enforce_connectivity(&map.labels, 0);
    relabeled.n == map.n
}

/// Writes the label map as 16-bit PNG and a white-on-black boundary overlay.
pub fn dump_superpixels(map: &SuperpixelMap, dir: &std::path::Path, frame_id: &str) -> Result<()> {
    let (h, w) = map.labels.dim();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ids: Vec<u16> = map
        .labels
        .iter()
        .map(|&l| l.min(u32::from(u16::MAX)) as u16)
        .collect();
    crate::depthio::write_gray16(&dir.join(format!("{frame_id}_labels.png")), w, h, &ids)?;
    let mut edges = vec![0u8; h * w];
    for r in 0..h {
        for c in 0..w {
            let l = map.labels[[r, c]];
            let boundary = neighbors4(r, c, h, w).any(|(nr, nc)| map.labels[[nr, nc]] != l);
            if boundary {
                edges[r * w + c] = 255;
            }
        }
    }
    crate::depthio::write_gray8(&dir.join(format!("{frame_id}_boundaries.png")), w, h, &edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depthio::Intrinsics;
    use ndarray::array;

    fn frame_from(depth: Array2<f64>) -> DepthFrame {
        let (h, w) = depth.dim();
        DepthFrame::from_depth(depth, Intrinsics::centered(w, h, 10.0), "t", 0).unwrap()
    }

    #[test]
    fn smoothing_preserves_constants_and_sigma_zero_is_identity() {
        let img = Array2::from_elem((9, 7), 2.5);
        let out = gaussian_smooth(&img, 3.0);
        assert!(out.iter().all(|&v| (v - 2.5).abs() < 1e-12));
        let ramp = Array2::from_shape_fn((5, 6), |(r, c)| (r * 6 + c) as f64 * 0.37);
        assert_eq!(gaussian_smooth(&ramp, 0.0), ramp);
    }

    #[test]
    fn impulse_response_matches_direct_2d_gaussian() {
        let n = 31;
        let mut img = Array2::<f64>::zeros((n, n));
        img[[15, 15]] = 1.0;
        let sigma = 3.0;
        let out = gaussian_smooth(&img, sigma);
        let radius = 9i32;
        let g = |dr: i32, dc: i32| (-((dr * dr + dc * dc) as f64) / (2.0 * sigma * sigma)).exp();
        let mut norm = 0.0;
        for dr in -radius..=radius {
            for dc in -radius..=radius {
                norm += g(dr, dc);
            }
        }
        for r in 0..n {
            for c in 0..n {
                let dr = r as i32 - 15;
                let dc = c as i32 - 15;
                let expected = if dr.abs() <= radius && dc.abs() <= radius {
                    g(dr, dc) / norm
                } else {
                    0.0
                };
                assert!((out[[r, c]] - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fill_invalid_cases() {
        let full = frame_from(array![[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(fill_invalid(&full).unwrap(), full.depth);

        let mut single = Array2::<f64>::zeros((4, 5));
        single[[2, 3]] = 2.0;
        let filled = fill_invalid(&frame_from(single)).unwrap();
        assert!(filled.iter().all(|&v| v == 2.0));

        let row = frame_from(array![[1.0, 0.0, 0.0, 3.0]]);
        assert_eq!(fill_invalid(&row).unwrap(), array![[1.0, 1.0, 3.0, 3.0]]);

        let empty = frame_from(Array2::zeros((2, 2)));
        assert!(fill_invalid(&empty).is_err());
    }

    #[test]
    fn fill_invalid_ties_prefer_smaller_row_then_column() {
        // Center pixel is equidistant from all four neighbors.
        let f = frame_from(array![[0.0, 1.0, 0.0], [2.0, 0.0, 3.0], [0.0, 4.0, 0.0]]);
        let filled = fill_invalid(&f).unwrap();
        assert_eq!(filled[[1, 1]], 1.0);
        // Corner (0,0): neighbors (0,1)=1 and (1,0)=2 at distance 1; row 0 wins.
        assert_eq!(filled[[0, 0]], 1.0);
        // Corner (2,0): (1,0)=2 and (2,1)=4; smaller row wins.
        assert_eq!(filled[[2, 0]], 2.0);
    }

    #[test]
    fn quadrants_on_constant_image() {
        let img = Array2::from_elem((8, 8), 1.5);
        let params = SlicParams {
            n_segments: 4,
            ..SlicParams::default()
        };
        let map = slic(&img, &params).unwrap();
        assert_eq!(map.n, 4);
        for r in 0..8 {
            for c in 0..8 {
                let q = (r / 4) * 2 + c / 4;
                assert_eq!(map.labels[[r, c]], q as u32, "pixel ({r},{c})");
            }
        }
    }

    #[test]
    fn step_edge_is_never_straddled() {
        let img = Array2::from_shape_fn((32, 32), |(_, c)| if c < 16 { 1.0 } else { 2.0 });
        let params = SlicParams {
            n_segments: 4,
            compactness: 3.0,
            ..SlicParams::default()
        };
        let map = slic(&img, &params).unwrap();
        let members = map.members();
        for seg in &members {
            let left = seg.iter().any(|&(_, c)| c < 16);
            let right = seg.iter().any(|&(_, c)| c >= 16);
            assert!(!(left && right));
        }
    }

    #[test]
    fn too_many_segments_is_an_error() {
        let img = Array2::from_elem((3, 3), 1.0);
        let params = SlicParams {
            n_segments: 10,
            ..SlicParams::default()
        };
        assert!(slic(&img, &params).is_err());
    }

    #[test]
    fn connectivity_fixed_point_and_compaction() {
        let labels = array![[7, 7, 3], [7, 7, 3], [9, 9, 3]];
        let map = enforce_connectivity(&labels, 1);
        assert_eq!(map.n, 3);
        assert_eq!(map.labels, array![[0, 0, 1], [0, 0, 1], [2, 2, 1]]);
    }

    #[test]
    fn stray_pixel_is_absorbed() {
        let mut labels = Array2::from_elem((5, 5), 1u32);
        labels[[2, 2]] = 0;
        let map = enforce_connectivity(&labels, 2);
        assert_eq!(map.n, 1);
        assert!(map.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn small_component_merges_into_longest_boundary_neighbor() {
        // Label 0 is a 100-pixel block, label 1 a 3-pixel column below it,
        // label 2 everything else.
        let mut labels = Array2::from_elem((13, 11), 2u32);
        for r in 0..10 {
            for c in 0..10 {
                labels[[r, c]] = 0;
            }
        }
        for r in 10..13 {
            labels[[r, 0]] = 1;
        }
        // Boundary with label 0: (10,0)-(9,0) → 1.
        // Boundary with label 2: (r,0)-(r,1) for r in 10..13 → 3.
        let map = enforce_connectivity(&labels, 4);
        assert_eq!(map.n, 2);
        assert_eq!(map.labels[[11, 0]], map.labels[[11, 5]]);
        assert_ne!(map.labels[[11, 0]], map.labels[[0, 0]]);
    }

    #[test]
    fn merge_tie_goes_to_smallest_label() {
        // Single pixel label 5 between label 4 (above) and label 3 (below).
        let labels = array![[4, 4, 4], [4, 5, 3], [3, 3, 3]];
        // Boundaries of the stray: up (4), left (4), right (3), down (3) → tie.
        let map = enforce_connectivity(&labels, 2);
        let stray = map.labels[[1, 1]];
        assert_eq!(stray, map.labels[[2, 0]]);
    }
}
