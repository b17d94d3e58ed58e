//! Depth frames, camera intrinsics and dataset manifests.
//!
//! Depth is stored on disk as 16-bit single-channel PNG in units of
//! `unit_scale` meters (millimeters by default), with 0 marking an invalid
//! pixel. Class masks are 8-bit PNGs where 255 means "ignore".

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Meters per stored unit for millimeter PNGs.
pub const DEFAULT_UNIT_SCALE: f64 = 0.001;
/// Valid depths must be strictly below this many meters.
pub const MAX_DEPTH_M: f64 = 100.0;
/// Label value excluded from losses and metrics.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("intrinsics out of range: {self:?}")))
        }
    }

    /// Square sensor with a symmetric field of view, principal point at the image center.
    pub fn centered(width: usize, height: usize, focal: f64) -> Self {
        Intrinsics {
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let intr: Intrinsics =
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: e.line(),
                message: e.to_string(),
            })?;
        intr.validate()?;
        Ok(intr)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// A depth image in meters with its validity mask and optional ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    /// `height × width`, meters; 0 wherever `valid` is false.
    pub depth: Array2<f64>,
    pub valid: Array2<bool>,
    pub intrinsics: Intrinsics,
    pub frame_id: String,
    pub view_id: u32,
    pub labels: Option<Array2<u8>>,
    pub activity: Option<u32>,
}

impl DepthFrame {
    /// Builds a frame from raw depth, zeroing non-positive or non-finite samples.
    pub fn from_depth(
        depth: Array2<f64>,
        intrinsics: Intrinsics,
        frame_id: impl Into<String>,
        view_id: u32,
    ) -> Result<Self> {
        let valid = depth.mapv(|d| d.is_finite() && d > 0.0);
        let depth = ndarray::Zip::from(&depth)
            .and(&valid)
            .map_collect(|&d, &v| if v { d } else { 0.0 });
        let frame = DepthFrame {
            depth,
            valid,
            intrinsics,
            frame_id: frame_id.into(),
            view_id,
            labels: None,
            activity: None,
        };
        frame.validate()?;
        Ok(frame)
    }

    pub fn height(&self) -> usize {
        self.depth.nrows()
    }

    pub fn width(&self) -> usize {
        self.depth.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let expected = (self.intrinsics.height, self.intrinsics.width);
        if self.depth.dim() != expected || self.valid.dim() != expected {
            return Err(Error::shape(
                format!("{expected:?}"),
                format!("{:?}", self.depth.dim()),
            ));
        }
        if let Some(labels) = &self.labels {
            if labels.dim() != expected {
                return Err(Error::shape(
                    format!("{expected:?}"),
                    format!("{:?}", labels.dim()),
                ));
            }
        }
        for (&d, &v) in self.depth.iter().zip(self.valid.iter()) {
            if v && !(d.is_finite() && d > 0.0 && d < MAX_DEPTH_M) {
                return Err(Error::invalid(format!(
                    "frame {}: valid depth {d} outside (0, {MAX_DEPTH_M})",
                    self.frame_id
                )));
            }
            if !v && d != 0.0 {
                return Err(Error::invalid(format!(
                    "frame {}: invalid pixel carries depth {d}",
                    self.frame_id
                )));
            }
        }
        Ok(())
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Reads a 16-bit depth PNG. The frame id is the file stem.
pub fn load_depth_frame(path: &Path, intrinsics: &Intrinsics, unit_scale: f64) -> Result<DepthFrame> {
    if !(unit_scale > 0.0) {
        return Err(Error::invalid(format!("unit_scale must be positive, got {unit_scale}")));
    }
    intrinsics.validate()?;
    let (w, h, raw) = read_gray16(path)?;
    if (w, h) != (intrinsics.width, intrinsics.height) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            expected: format!("{}x{} image", intrinsics.width, intrinsics.height),
            found: format!("{w}x{h}"),
        });
    }
    let stored = Array2::from_shape_vec((h, w), raw).expect("decoded buffer matches header");
    let depth = stored.mapv(|s| f64::from(s) * unit_scale);
    let valid = stored.mapv(|s| s > 0);
    let frame_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let frame = DepthFrame {
        depth,
        valid,
        intrinsics: *intrinsics,
        frame_id,
        view_id: 0,
        labels: None,
        activity: None,
    };
    frame.validate().map_err(|e| match e {
        Error::InvalidInput(msg) => Error::Format {
            path: path.to_path_buf(),
            expected: format!("depths below {MAX_DEPTH_M} m"),
            found: msg,
        },
        other => other,
    })?;
    Ok(frame)
}

/// Writes the depth channel of `frame` as a 16-bit PNG.
/// Valid samples are rounded to the nearest unit and never stored as 0.
pub fn write_depth_png(frame: &DepthFrame, path: &Path, unit_scale: f64) -> Result<()> {
    let stored: Vec<u16> = frame
        .depth
        .iter()
        .zip(frame.valid.iter())
        .map(|(&d, &v)| {
            if v {
                (d / unit_scale).round().clamp(1.0, f64::from(u16::MAX)) as u16
            } else {
                0
            }
        })
        .collect();
    write_gray16(path, frame.width(), frame.height(), &stored)
}

pub fn load_label_png(path: &Path) -> Result<Array2<u8>> {
    let (w, h, raw) = read_gray8(path)?;
    Ok(Array2::from_shape_vec((h, w), raw).expect("decoded buffer matches header"))
}

pub fn write_label_png(labels: &Array2<u8>, path: &Path) -> Result<()> {
    let data: Vec<u8> = labels.iter().copied().collect();
    write_gray8(path, labels.ncols(), labels.nrows(), &data)
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn decode_gray(path: &Path, depth: png::BitDepth) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let info = reader.info();
    let (w, h) = (info.width as usize, info.height as usize);
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != depth {
        return Err(Error::Format {
            path: path.to_path_buf(),
            expected: format!("{}-bit single-channel PNG", depth as u8),
            found: format!("{:?} {}-bit", info.color_type, info.bit_depth as u8),
        });
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let out = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    buf.truncate(out.buffer_size());
    Ok((w, h, buf))
}

fn read_gray16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let (w, h, bytes) = decode_gray(path, png::BitDepth::Sixteen)?;
    let values = bytes
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((w, h, values))
}

fn read_gray8(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    decode_gray(path, png::BitDepth::Eight)
}

fn encode_gray(path: &Path, w: usize, h: usize, depth: png::BitDepth, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(depth);
    let mut writer = encoder.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(data).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

pub(crate) fn write_gray16(path: &Path, w: usize, h: usize, values: &[u16]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_be_bytes()).collect();
    encode_gray(path, w, h, png::BitDepth::Sixteen, &bytes)
}

pub(crate) fn write_gray8(path: &Path, w: usize, h: usize, values: &[u8]) -> Result<()> {
    encode_gray(path, w, h, png::BitDepth::Eight, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }

    fn from_stem(stem: &str) -> Option<Self> {
        match stem {
            "train" => Some(SplitTag::Train),
            "val" => Some(SplitTag::Val),
            "test" => Some(SplitTag::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub frame_id: String,
    /// Resolved against the manifest's directory.
    pub depth_path: PathBuf,
    pub view_id: u32,
    pub label_path: Option<PathBuf>,
    pub activity: Option<u32>,
}

/// Ordered list of frames. The split tag comes from the file stem
/// (`train.csv`, `val.csv`, `test.csv`) and is `None` for any other name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub split_tag: Option<SplitTag>,
    /// Directory the relative paths were resolved against.
    pub root: PathBuf,
}

pub const MANIFEST_HEADER: [&str; 5] = ["frame_id", "depth_path", "view_id", "label_path", "activity"];

#[derive(Debug, Deserialize)]
struct ManifestRow {
    frame_id: String,
    depth_path: String,
    view_id: u32,
    label_path: Option<String>,
    activity: Option<u32>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sidecar intrinsics for camera `view_id`: `<root>/intrinsics/view_<id>.json`.
    pub fn intrinsics_path(&self, view_id: u32) -> PathBuf {
        intrinsics_path(&self.root, view_id)
    }

    /// Loads the full frame for `entry`, attaching labels and activity if present.
    pub fn load_frame(&self, entry: &ManifestEntry, unit_scale: f64) -> Result<DepthFrame> {
        let intr = Intrinsics::load(&self.intrinsics_path(entry.view_id))?;
        let mut frame = load_depth_frame(&entry.depth_path, &intr, unit_scale)?;
        frame.frame_id = entry.frame_id.clone();
        frame.view_id = entry.view_id;
        frame.activity = entry.activity;
        if let Some(lp) = &entry.label_path {
            let labels = load_label_png(lp)?;
            if labels.dim() != frame.depth.dim() {
                return Err(Error::Format {
                    path: lp.clone(),
                    expected: format!("{:?} label mask", frame.depth.dim()),
                    found: format!("{:?}", labels.dim()),
                });
            }
            frame.labels = Some(labels);
        }
        Ok(frame)
    }

    /// Writes the manifest with paths relative to `path`'s directory where possible.
    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(MANIFEST_HEADER).map_err(|e| csv_io(path, e))?;
        for e in &self.entries {
            let rel = |p: &Path| -> String {
                p.strip_prefix(base)
                    .unwrap_or(p)
                    .to_string_lossy()
                    .into_owned()
            };
            let record = [
                e.frame_id.clone(),
                rel(&e.depth_path),
                e.view_id.to_string(),
                e.label_path.as_deref().map(rel).unwrap_or_default(),
                e.activity.map(|a| a.to_string()).unwrap_or_default(),
            ];
            w.write_record(&record).map_err(|e| csv_io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn intrinsics_path(root: &Path, view_id: u32) -> PathBuf {
    root.join("intrinsics").join(format!("view_{view_id}.json"))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: e.position().map(|p| p.line() as usize).unwrap_or(0),
        message: e.to_string(),
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);

    let header = reader.headers().map_err(|e| csv_io(path, e))?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names != MANIFEST_HEADER {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header `{}`, found `{}`", MANIFEST_HEADER.join(","), names.join(",")),
        });
    }

    let resolve = |s: &str| -> PathBuf {
        let p = Path::new(s);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            root.join(p)
        }
    };

    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_io(path, e))?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let row: ManifestRow = record.deserialize(Some(&header)).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
        if !seen.insert(row.frame_id.clone()) {
            return Err(Error::DuplicateId {
                path: path.to_path_buf(),
                line,
                frame_id: row.frame_id,
            });
        }
        let label_path = row
            .label_path
            .filter(|s| !s.trim().is_empty())
            .map(|s| resolve(s.trim()));
        if let Some(lp) = &label_path {
            if !lp.is_file() {
                return Err(Error::DanglingLabel {
                    path: path.to_path_buf(),
                    line,
                    label: lp.clone(),
                });
            }
        }
        entries.push(ManifestEntry {
            frame_id: row.frame_id,
            depth_path: resolve(row.depth_path.trim()),
            view_id: row.view_id,
            label_path,
            activity: row.activity,
        });
    }

    let split_tag = path
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(SplitTag::from_stem);
    Ok(DatasetManifest {
        entries,
        split_tag,
        root,
    })
}
