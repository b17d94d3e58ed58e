//! Segmentation and classification metrics, paired significance testing,
//! rank correlation and embedding export.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Matrix2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::depthio::{DatasetManifest, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::geometry::{label_frame, LabelingConfig};
use crate::model::{normalize_depth, Network};
use crate::train::MetricsRecord;

/// Square `k × k` count matrix; rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.k + pred] += 1;
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.k, other.k);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::invalid("pixel accuracy of an empty confusion matrix"));
        }
        let diag: u64 = (0..self.k).map(|c| self.get(c, c)).sum();
        Ok(diag as f64 / total as f64)
    }

    /// Mean IoU over classes that occur in either ground truth or prediction.
    pub fn miou(&self) -> Result<f64> {
        miou(self)
    }
}

pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    let k = cm.k;
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..k {
        let tp = cm.get(c, c);
        let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| cm.get(c, p)).sum();
        let fp: u64 = (0..k).filter(|&t| t != c).map(|t| cm.get(t, c)).sum();
        let union = tp + fp + fn_;
        if union > 0 {
            sum += tp as f64 / union as f64;
            present += 1;
        }
    }
    if present == 0 {
        return Err(Error::invalid("mIoU of an empty confusion matrix"));
    }
    Ok(sum / present as f64)
}

/// Per-class `(score, is_positive)` lists in evaluation-frame order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankedPredictions {
    pub per_class: Vec<Vec<(f64, bool)>>,
}

/// All-points average precision averaged over classes.
pub fn map_score(r: &RankedPredictions) -> Result<f64> {
    if r.per_class.is_empty() {
        return Err(Error::invalid("mAP needs at least one class"));
    }
    let mut total = 0.0;
    for (c, list) in r.per_class.iter().enumerate() {
        if list.iter().any(|(s, _)| !s.is_finite()) {
            return Err(Error::invalid(format!("class {c} has a non-finite score")));
        }
        let mut order: Vec<usize> = (0..list.len()).collect();
        // Stable: equal scores keep frame order.
        order.sort_by(|&a, &b| list[b].0.partial_cmp(&list[a].0).unwrap());
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank, &i) in order.iter().enumerate() {
            if list[i].1 {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
            }
        }
        if hits == 0 {
            return Err(Error::invalid(format!("class {c} has no positives")));
        }
        total += ap / hits as f64;
    }
    Ok(total / r.per_class.len() as f64)
}

/// Average (mid) ranks, 1-based.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`.
    pub statistic: f64,
    pub p_value: f64,
    /// Nonzero differences used.
    pub n: usize,
    pub exact: bool,
}

/// Largest sample size that uses exact enumeration of all sign patterns.
pub const WILCOXON_EXACT_MAX_N: usize = 12;

/// Two-sided Wilcoxon signed-rank test on paired differences.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<WilcoxonResult> {
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::invalid("Wilcoxon test on non-finite differences"));
    }
    let nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nz.len();
    if n == 0 {
        return Err(Error::invalid("Wilcoxon test needs at least one nonzero difference"));
    }
    let ranks = average_ranks(&nz.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let w_plus: f64 = nz.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w = w_plus.min(total - w_plus);

    if n <= WILCOXON_EXACT_MAX_N {
        // Null distribution of W+ over all 2^n sign patterns; it is symmetric,
        // so the lower tail at min(W+, W-) gives half the two-sided p.
        let mut at_most = 0u64;
        for mask in 0u32..(1 << n) {
            let s: f64 = (0..n).filter(|&i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if s <= w + 1e-9 {
                at_most += 1;
            }
        }
        let p = (2.0 * at_most as f64 / (1u64 << n) as f64).min(1.0);
        return Ok(WilcoxonResult {
            statistic: w,
            p_value: p,
            n,
            exact: true,
        });
    }

    let mean = total / 2.0;
    let mut ties = 0.0;
    let mut sorted = ranks.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    let var = (n * (n + 1) * (2 * n + 1)) as f64 / 24.0 - ties / 48.0;
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((mean - w).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        (2.0 * (1.0 - normal.cdf(z))).min(1.0)
    };
    Ok(WilcoxonResult {
        statistic: w,
        p_value: p,
        n,
        exact: false,
    })
}

/// Holm step-down adjustment; output in input order.
pub fn holm_adjust(pvalues: &[f64]) -> Result<Vec<f64>> {
    if let Some(p) = pvalues.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid(format!("p-value {p} outside [0, 1]")));
    }
    let m = pvalues.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvalues[a].partial_cmp(&pvalues[b]).unwrap());
    let mut out = vec![0.0; m];
    let mut running: f64 = 0.0;
    for (j, &i) in order.iter().enumerate() {
        running = running.max((m - j) as f64 * pvalues[i]);
        out[i] = running.min(1.0);
    }
    Ok(out)
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::invalid("spearman needs two equally long inputs of length >= 2"));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::invalid("spearman on non-finite values"));
    }
    pearson(&average_ranks(xs), &average_ranks(ys))
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid("correlation of a constant input"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Top-2 principal components of a row-major data table.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    /// Unit-norm directions, first has the larger variance.
    pub components: [Vec<f64>; 2],
    pub variances: [f64; 2],
    pub projected: Vec<[f64; 2]>,
}

const PCA_ITERATIONS: usize = 300;

/// Deterministic top-2 PCA by orthogonal subspace iteration on the
/// covariance operator followed by a 2×2 Rayleigh–Ritz step.
pub fn pca2(rows: &[Vec<f64>]) -> Result<Pca2> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::invalid("PCA of an empty table"));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::invalid("PCA rows must share a nonzero dimension"));
    }
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let denom = (n.max(2) - 1) as f64;
    let cov_apply = |v: &DMatrix<f64>| x.transpose() * (&x * v) / denom;

    let k = d.min(2);
    // Fixed, generic starting block.
    let mut q = DMatrix::from_fn(d, k, |i, j| 1.0 + ((i * (j + 2) + 3 * j) % 7) as f64 / 7.0 + (i as f64 + 1.0).ln() * j as f64);
    q = orthonormalize(q);
    for _ in 0..PCA_ITERATIONS {
        let next = orthonormalize(cov_apply(&q));
        if next.iter().all(|v| v.is_finite()) {
            q = next;
        }
    }
    let aq = cov_apply(&q);
    let t = q.transpose() * &aq;
    let (vals, vecs) = if k == 2 {
        let eig = Matrix2::new(t[(0, 0)], t[(0, 1)], t[(1, 0)], t[(1, 1)]).symmetric_eigen();
        let (a, b) = if eig.eigenvalues[0] >= eig.eigenvalues[1] { (0, 1) } else { (1, 0) };
        let rot = DMatrix::from_fn(2, 2, |i, j| eig.eigenvectors[(i, if j == 0 { a } else { b })]);
        ([eig.eigenvalues[a], eig.eigenvalues[b]], &q * rot)
    } else {
        ([t[(0, 0)], 0.0], q.clone())
    };
    let mut components = [vec![0.0; d], vec![0.0; d]];
    for (c, comp) in components.iter_mut().enumerate().take(k) {
        let col = vecs.column(c);
        // Sign convention: the largest-magnitude entry is positive.
        let pivot = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (o, v) in comp.iter_mut().zip(col.iter()) {
            *o = sign * v;
        }
    }
    let projected = (0..n)
        .map(|i| {
            let row = x.row(i);
            let p = |c: &Vec<f64>| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [p(&components[0]), p(&components[1])]
        })
        .collect();
    Ok(Pca2 {
        mean,
        components,
        variances: [vals[0].max(0.0), vals[1].max(0.0)],
        projected,
    })
}

/// Modified Gram–Schmidt on the columns; degenerate columns are replaced by
/// a unit vector orthogonal to the previous ones.
fn orthonormalize(mut m: DMatrix<f64>) -> DMatrix<f64> {
    let (d, k) = m.shape();
    for j in 0..k {
        for i in 0..j {
            let proj = m.column(i).dot(&m.column(j));
            let ci = m.column(i).clone_owned();
            m.column_mut(j).axpy(-proj, &ci, 1.0);
        }
        let norm = m.column(j).norm();
        if norm > 1e-300 {
            m.column_mut(j).unscale_mut(norm);
        } else {
            let mut e = DMatrix::zeros(d, 1);
            e[(j.min(d - 1), 0)] = 1.0;
            for i in 0..j {
                let proj = m.column(i).dot(&e.column(0));
                let ci = m.column(i).clone_owned();
                e.column_mut(0).axpy(-proj, &ci, 1.0);
            }
            let en = e.column(0).norm();
            m.set_column(j, &(e.column(0) / en));
        }
    }
    m
}

/// One exported cluster embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub frame_id: String,
    pub cluster_id: u32,
    /// Majority ground-truth class over labeled member pixels.
    pub class: Option<u8>,
    pub embedding: Vec<f32>,
}

pub const EMBEDDING_MAGIC: &[u8; 8] = b"SPDEMB1\0";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingExport {
    pub table: PathBuf,
    pub index: PathBuf,
    pub projection: PathBuf,
    pub rows: usize,
}

/// Writes `embeddings.bin` (magic, `u64` rows, `u64` dim, then `f32` LE rows),
/// `embeddings.csv` (row index) and `projection.csv` (top-2 PCA coordinates).
pub fn write_embeddings(rows: &[EmbeddingRow], out_dir: &Path) -> Result<EmbeddingExport> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let dim = rows.first().map(|r| r.embedding.len()).unwrap_or(0);
    if rows.iter().any(|r| r.embedding.len() != dim) {
        return Err(Error::invalid("embeddings have differing lengths"));
    }
    let table = out_dir.join("embeddings.bin");
    let index = out_dir.join("embeddings.csv");
    let projection = out_dir.join("projection.csv");

    let f = File::create(&table).map_err(|e| Error::io(&table, e))?;
    let mut w = BufWriter::new(f);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(&table, e));
    write(EMBEDDING_MAGIC)?;
    write(&(rows.len() as u64).to_le_bytes())?;
    write(&(dim as u64).to_le_bytes())?;
    for r in rows {
        for v in &r.embedding {
            write(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(&table, e))?;

    let class = |c: Option<u8>| c.map(|c| c.to_string()).unwrap_or_default();
    let mut idx = csv::Writer::from_path(&index).map_err(|e| csv_err(&index, e))?;
    idx.write_record(["row", "frame_id", "cluster_id", "class"]).map_err(|e| csv_err(&index, e))?;
    for (i, r) in rows.iter().enumerate() {
        idx.write_record([i.to_string(), r.frame_id.clone(), r.cluster_id.to_string(), class(r.class)])
            .map_err(|e| csv_err(&index, e))?;
    }
    idx.flush().map_err(|e| Error::io(&index, e))?;

    let coords = if rows.is_empty() {
        Vec::new()
    } else {
        let data: Vec<Vec<f64>> = rows.iter().map(|r| r.embedding.iter().map(|&v| v as f64).collect()).collect();
        pca2(&data)?.projected
    };
    let mut proj = csv::Writer::from_path(&projection).map_err(|e| csv_err(&projection, e))?;
    proj.write_record(["row", "frame_id", "cluster_id", "class", "pc1", "pc2"])
        .map_err(|e| csv_err(&projection, e))?;
    for (i, (r, c)) in rows.iter().zip(&coords).enumerate() {
        proj.write_record([
            i.to_string(),
            r.frame_id.clone(),
            r.cluster_id.to_string(),
            class(r.class),
            format!("{:.9e}", c[0]),
            format!("{:.9e}", c[1]),
        ])
        .map_err(|e| csv_err(&projection, e))?;
    }
    proj.flush().map_err(|e| Error::io(&projection, e))?;
    Ok(EmbeddingExport {
        table,
        index,
        projection,
        rows: rows.len(),
    })
}

/// Most frequent non-ignored label over `pixels`; ties go to the lower id.
pub fn majority_class(labels: &ndarray::Array2<u8>, pixels: &[(usize, usize)]) -> Option<u8> {
    let mut counts = [0usize; 256];
    for &(r, c) in pixels {
        counts[labels[[r, c]] as usize] += 1;
    }
    counts[IGNORE_LABEL as usize] = 0;
    let (best, &n) = counts.iter().enumerate().rev().max_by_key(|&(_, n)| *n)?;
    (n > 0).then_some(best as u8)
}

/// SPS embedding of every kept cluster of every manifest frame, in manifest
/// then cluster order.
pub fn cluster_embeddings(
    net: &Network<f32>,
    manifest: &DatasetManifest,
    labeling: &LabelingConfig,
    unit_scale: f64,
    seed: u64,
) -> Result<Vec<EmbeddingRow>> {
    let per_frame: Vec<Vec<EmbeddingRow>> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let frame = manifest.load_frame(e, unit_scale)?;
            let labeled = label_frame(&frame, labeling, seed)?;
            let members = labeled.superpixels.members();
            let x = normalize_depth::<f32>(&frame, net.config.input_size);
            let dense = net.dense_features(&x)?;
            labeled
                .kept
                .iter()
                .map(|rec| {
                    Ok(EmbeddingRow {
                        frame_id: frame.frame_id.clone(),
                        cluster_id: rec.id,
                        class: frame.labels.as_ref().and_then(|l| majority_class(l, &members[rec.id as usize])),
                        embedding: net.embed(&dense, 0, &rec.bbox_norm)?,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(per_frame.into_iter().flatten().collect())
}

/// Loads `checkpoint` and writes the embedding export for `manifest` into `out_dir`.
pub fn export_embeddings(
    checkpoint: &Path,
    manifest: &DatasetManifest,
    labeling: &LabelingConfig,
    unit_scale: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<EmbeddingExport> {
    let (net, _) = crate::model::checkpoint::load::<f32>(checkpoint)?;
    let rows = cluster_embeddings(&net, manifest, labeling, unit_scale, seed)?;
    write_embeddings(&rows, out_dir)
}

/// Reads back an `embeddings.bin` table as `(rows, dim, values)`.
pub fn read_embedding_table(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Format {
        path: path.to_path_buf(),
        expected: "embedding table".into(),
        found: m.into(),
    };
    if bytes.len() < 24 || &bytes[..8] != EMBEDDING_MAGIC {
        return Err(bad("bad magic"));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let dim = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    if bytes.len() != 24 + 4 * rows * dim {
        return Err(bad("length does not match header"));
    }
    let values = bytes[24..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((rows, dim, values))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

/// One fraction's pretrained-vs-scratch comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceRow {
    pub task: String,
    pub fraction: f64,
    /// Seeds present for both inits.
    pub n_pairs: usize,
    /// Mean of pretrained minus scratch test metric.
    pub mean_delta: f64,
    pub statistic: f64,
    pub p_raw: f64,
    pub p_holm: f64,
}

impl SignificanceRow {
    pub fn significant_at(&self, alpha: f64) -> bool {
        self.p_holm < alpha
    }
}

/// Pairs pretrained and scratch results per (task, fraction, seed), runs a
/// Wilcoxon test per fraction and Holm-corrects across fractions per task.
///
/// Fractions whose differences are all zero get `p = 1`.
pub fn significance(records: &[MetricsRecord]) -> Result<Vec<SignificanceRow>> {
    // task -> fraction bits -> seed -> (pretrained, scratch)
    type Cell = (Option<f64>, Option<f64>);
    let mut groups: BTreeMap<String, BTreeMap<u64, BTreeMap<u64, Cell>>> = BTreeMap::new();
    for r in records {
        let cell = groups
            .entry(r.task.clone())
            .or_default()
            .entry(r.fraction.to_bits())
            .or_default()
            .entry(r.seed)
            .or_default();
        let slot = if r.init == "scratch" { &mut cell.1 } else { &mut cell.0 };
        if slot.is_some() {
            return Err(Error::invalid(format!(
                "duplicate result for task {} init {} fraction {} seed {}",
                r.task, r.init, r.fraction, r.seed
            )));
        }
        *slot = Some(r.test_metric);
    }
    let mut out = Vec::new();
    for (task, fractions) in groups {
        let mut rows = Vec::new();
        for (bits, seeds) in fractions {
            let diffs: Vec<f64> = seeds
                .values()
                .filter_map(|(p, s)| Some((*p)? - (*s)?))
                .collect();
            if diffs.is_empty() {
                continue;
            }
            let (statistic, p_raw) = match wilcoxon_signed_rank(&diffs) {
                Ok(w) => (w.statistic, w.p_value),
                Err(_) => (0.0, 1.0),
            };
            rows.push(SignificanceRow {
                task: task.clone(),
                fraction: f64::from_bits(bits),
                n_pairs: diffs.len(),
                mean_delta: diffs.iter().sum::<f64>() / diffs.len() as f64,
                statistic,
                p_raw,
                p_holm: 0.0,
            });
        }
        rows.sort_by(|a, b| a.fraction.partial_cmp(&b.fraction).unwrap());
        let adjusted = holm_adjust(&rows.iter().map(|r| r.p_raw).collect::<Vec<_>>())?;
        for (r, p) in rows.iter_mut().zip(adjusted) {
            r.p_holm = p;
        }
        out.extend(rows);
    }
    if out.is_empty() {
        return Err(Error::invalid("no (pretrained, scratch) result pairs to compare"));
    }
    Ok(out)
}

pub fn format_significance_table(rows: &[SignificanceRow]) -> String {
    let mut s = format!(
        "{:<14} {:>8} {:>3} {:>12} {:>10} {:>10} {:>6} {:>6}\n",
        "task", "fraction", "n", "mean_delta", "p_raw", "p_holm", "p<.05", "p<.01"
    );
    let yn = |b: bool| if b { "yes" } else { "no" };
    for r in rows {
        s.push_str(&format!(
            "{:<14} {:>8.4} {:>3} {:>+12.6} {:>10.4e} {:>10.4e} {:>6} {:>6}\n",
            r.task,
            r.fraction,
            r.n_pairs,
            r.mean_delta,
            r.p_raw,
            r.p_holm,
            yn(r.significant_at(0.05)),
            yn(r.significant_at(0.01)),
        ));
    }
    s
}
