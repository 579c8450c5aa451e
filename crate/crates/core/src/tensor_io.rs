//! On-disk formats shared with the feature exporter.
//!
//! Tensor files (`PSOLTNSR`) are little-endian:
//!
//! ```text
//! magic    8 bytes  "PSOLTNSR"
//! version  u32      1
//! count    u32      number of records
//! record*  u16 id length, id bytes (UTF-8), u32 h, u32 w, u32 d,
//!          h*w*d f32 values, row-major with channel fastest
//! ```
//!
//! Manifests, classifier outputs and pseudo annotations are JSON lines.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bbox::BoxXYWH;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PSOLTNSR";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

/// One image's `h x w x d` activation grid, channel fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub image_id: String,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub values: Vec<f32>,
}

impl FeatureMap {
    pub fn new(image_id: impl Into<String>, h: usize, w: usize, d: usize, values: Vec<f32>) -> Result<Self> {
        let fm = FeatureMap {
            image_id: image_id.into(),
            h,
            w,
            d,
            values,
        };
        fm.validate()?;
        Ok(fm)
    }

    pub fn zeros(image_id: impl Into<String>, h: usize, w: usize, d: usize) -> Self {
        FeatureMap {
            image_id: image_id.into(),
            h,
            w,
            d,
            values: vec![0.0; h * w * d],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 || self.d == 0 {
            return Err(Error::Validation(format!(
                "feature map {:?} has a zero dimension ({}x{}x{})",
                self.image_id, self.h, self.w, self.d
            )));
        }
        if self.h * self.w * self.d != self.values.len() {
            return Err(Error::Validation(format!(
                "feature map {:?}: {}x{}x{} does not match {} stored values",
                self.image_id,
                self.h,
                self.w,
                self.d,
                self.values.len()
            )));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "feature map {:?} has a non-finite value at flat index {i}",
                self.image_id
            )));
        }
        Ok(())
    }

    pub fn positions(&self) -> usize {
        self.h * self.w
    }

    /// The descriptor at grid cell `(row, col)`.
    #[inline]
    pub fn descriptor(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.w + col) * self.d;
        &self.values[start..start + self.d]
    }

    pub fn descriptors(&self) -> std::slice::ChunksExact<'_, f32> {
        self.values.chunks_exact(self.d)
    }
}

pub fn encoded_len(records: &[FeatureMap]) -> usize {
    HEADER_LEN
        + records
            .iter()
            .map(|r| 2 + r.image_id.len() + 12 + 4 * r.values.len())
            .sum::<usize>()
}

pub fn encode_tensors<W: Write>(records: &[FeatureMap], mut out: W) -> Result<()> {
    let io = |e| Error::io("<stream>", e);
    if let Some(first) = records.first() {
        for r in records {
            if r.d != first.d {
                return Err(Error::Format(format!(
                    "mixed depths in one tensor file: {:?} has d={}, {:?} has d={}",
                    first.image_id, first.d, r.image_id, r.d
                )));
            }
        }
    }
    for r in records {
        r.validate()?;
        if r.image_id.len() > u16::MAX as usize {
            return Err(Error::Format(format!(
                "image id of {} bytes does not fit a u16 length",
                r.image_id.len()
            )));
        }
    }
    let count = u32::try_from(records.len())
        .map_err(|_| Error::Format(format!("{} records exceed the u32 count field", records.len())))?;

    out.write_all(MAGIC).map_err(io)?;
    out.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    out.write_all(&count.to_le_bytes()).map_err(io)?;
    for r in records {
        out.write_all(&(r.image_id.len() as u16).to_le_bytes()).map_err(io)?;
        out.write_all(r.image_id.as_bytes()).map_err(io)?;
        for dim in [r.h, r.w, r.d] {
            let dim = u32::try_from(dim).map_err(|_| Error::Format(format!("dimension {dim} exceeds u32")))?;
            out.write_all(&dim.to_le_bytes()).map_err(io)?;
        }
        let mut buf = Vec::with_capacity(4 * r.values.len());
        for v in &r.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf).map_err(io)?;
    }
    Ok(())
}

pub fn write_tensor_file(records: &[FeatureMap], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    // Validate before touching the file so a rejected write leaves nothing behind.
    let mut buf = Vec::with_capacity(encoded_len(records));
    encode_tensors(records, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Streaming decoder over a `PSOLTNSR` byte source.
pub struct TensorReader<R> {
    inner: R,
    count: u32,
    next: u32,
    depth: Option<usize>,
    failed: bool,
}

impl<R: Read> TensorReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut header = [0u8; HEADER_LEN];
        read_full(&mut inner, &mut header).map_err(|e| match e.kind() {
            ErrorKind::UnexpectedEof => Error::Format("file is shorter than the 16-byte header".into()),
            _ => Error::io("<stream>", e),
        })?;
        if &header[..8] != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected \"PSOLTNSR\"",
                String::from_utf8_lossy(&header[..8])
            )));
        }
        let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let count = u32::from_le_bytes(header[12..16].try_into().unwrap());
        Ok(TensorReader {
            inner,
            count,
            next: 0,
            depth: None,
            failed: false,
        })
    }

    pub fn record_count(&self) -> usize {
        self.count as usize
    }

    fn read_record(&mut self) -> Result<FeatureMap> {
        let record = self.next as usize;
        let trunc = |what: &str| Error::Truncated {
            record,
            detail: what.to_string(),
        };
        let mut read = |buf: &mut [u8], what: &str| -> Result<()> {
            read_full(&mut self.inner, buf).map_err(|e| match e.kind() {
                ErrorKind::UnexpectedEof => trunc(what),
                _ => Error::io("<stream>", e),
            })
        };

        let mut len = [0u8; 2];
        read(&mut len, "id length")?;
        let mut id = vec![0u8; u16::from_le_bytes(len) as usize];
        read(&mut id, "id bytes")?;
        let image_id = String::from_utf8(id)
            .map_err(|_| Error::Format(format!("record {record}: image id is not valid UTF-8")))?;
        let mut dims = [0u8; 12];
        read(&mut dims, "shape")?;
        let h = u32::from_le_bytes(dims[0..4].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(dims[4..8].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(dims[8..12].try_into().unwrap()) as usize;
        let n = h
            .checked_mul(w)
            .and_then(|x| x.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("record {record}: shape {h}x{w}x{d} overflows")))?;
        let mut raw = vec![0u8; 4 * n];
        read(&mut raw, "values")?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();

        if let Some(expected) = self.depth {
            if expected != d {
                return Err(Error::Format(format!(
                    "record {record} ({image_id:?}) has d={d}, earlier records have d={expected}"
                )));
            }
        }
        self.depth = Some(d);
        let fm = FeatureMap {
            image_id,
            h,
            w,
            d,
            values,
        };
        fm.validate()
            .map_err(|e| Error::Validation(format!("record {record}: {e}")))?;
        Ok(fm)
    }
}

impl<R: Read> Iterator for TensorReader<R> {
    type Item = Result<FeatureMap>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.next >= self.count {
            return None;
        }
        let out = self.read_record();
        self.next += 1;
        if out.is_err() {
            self.failed = true;
        }
        Some(out)
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> std::io::Result<()> {
    r.read_exact(buf)
}

pub fn open_tensor_file(path: impl AsRef<Path>) -> Result<TensorReader<BufReader<File>>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    TensorReader::new(BufReader::new(file))
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Vec<FeatureMap>> {
    open_tensor_file(path)?.collect()
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<FeatureMap>> {
    TensorReader::new(bytes)?.collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub image_id: String,
    pub class_label: u32,
    pub orig_width: u32,
    pub orig_height: u32,
    pub net_input_size: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_box: Option<BoxXYWH>,
    pub split: Split,
}

impl ImageRecord {
    pub fn validate(&self) -> Result<()> {
        if self.orig_width == 0 || self.orig_height == 0 || self.net_input_size == 0 {
            return Err(Error::Validation(format!(
                "image {:?}: dimensions must be positive",
                self.image_id
            )));
        }
        if let Some(b) = &self.gt_box {
            if !b.fits_within(self.orig_width as f64, self.orig_height as f64) {
                return Err(Error::Validation(format!(
                    "image {:?}: gt_box {b:?} does not fit a {}x{} image",
                    self.image_id, self.orig_width, self.orig_height
                )));
            }
        }
        Ok(())
    }

    pub fn full_box(&self) -> BoxXYWH {
        BoxXYWH::new(0.0, 0.0, self.orig_width as f64, self.orig_height as f64)
    }
}

pub fn parse_manifest<R: BufRead>(reader: R) -> Result<Vec<ImageRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io("<manifest>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ImageRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        rec.validate().map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if !seen.insert(rec.image_id.clone()) {
            return Err(Error::DuplicateId(rec.image_id));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ImageRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(BufReader::new(file))
}

pub fn write_json_lines<T: Serialize>(items: &[T], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| Error::Format(e.to_string()))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json_lines<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Per-image classification scores; higher means more likely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierOutputs {
    pub image_id: String,
    pub scores: Vec<f64>,
}

impl ClassifierOutputs {
    pub fn num_classes(&self) -> usize {
        self.scores.len()
    }

    /// Top-1 class; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate().skip(1) {
            if s > self.scores[best] {
                best = i;
            }
        }
        best
    }

    /// 1-based rank of `class` under the lowest-index tie-break.
    pub fn rank_of(&self, class: usize) -> usize {
        let target = self.scores[class];
        1 + self
            .scores
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > target || (s == target && j < class))
            .count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scores.is_empty() {
            return Err(Error::Validation(format!(
                "image {:?}: empty score vector",
                self.image_id
            )));
        }
        if self.scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Validation(format!(
                "image {:?}: non-finite score",
                self.image_id
            )));
        }
        Ok(())
    }
}

pub fn read_classifier_outputs(path: impl AsRef<Path>) -> Result<Vec<ClassifierOutputs>> {
    let rows: Vec<ClassifierOutputs> = read_json_lines(path)?;
    let mut seen = HashSet::new();
    let mut classes = None;
    for r in &rows {
        r.validate()?;
        if !seen.insert(r.image_id.as_str()) {
            return Err(Error::DuplicateId(r.image_id.clone()));
        }
        match classes {
            None => classes = Some(r.num_classes()),
            Some(c) if c != r.num_classes() => {
                return Err(Error::Validation(format!(
                    "image {:?} has {} scores, earlier rows have {c}",
                    r.image_id,
                    r.num_classes()
                )))
            }
            _ => {}
        }
    }
    Ok(rows)
}

/// Final-layer classifier weights, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierWeights {
    pub classes: usize,
    pub depth: usize,
    pub values: Vec<f32>,
}

impl ClassifierWeights {
    pub fn new(classes: usize, depth: usize, values: Vec<f32>) -> Result<Self> {
        if classes * depth != values.len() || classes == 0 || depth == 0 {
            return Err(Error::Validation(format!(
                "classifier weights {classes}x{depth} do not match {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("classifier weights contain non-finite values".into()));
        }
        Ok(ClassifierWeights { classes, depth, values })
    }

    pub fn row(&self, class: usize) -> &[f32] {
        &self.values[class * self.depth..(class + 1) * self.depth]
    }

    /// Stored as a single `1 x C x d` record.
    pub fn to_record(&self) -> FeatureMap {
        FeatureMap {
            image_id: "W".into(),
            h: 1,
            w: self.classes,
            d: self.depth,
            values: self.values.clone(),
        }
    }

    pub fn from_record(rec: FeatureMap) -> Result<Self> {
        if rec.h != 1 {
            return Err(Error::Format(format!(
                "classifier weights record must be 1xCxd, got {}x{}x{}",
                rec.h, rec.w, rec.d
            )));
        }
        ClassifierWeights::new(rec.w, rec.d, rec.values)
    }
}

pub fn read_classifier_weights(path: impl AsRef<Path>) -> Result<ClassifierWeights> {
    let mut recs = read_tensor_file(path)?;
    if recs.len() != 1 {
        return Err(Error::Format(format!(
            "classifier weights file must hold exactly one record, found {}",
            recs.len()
        )));
    }
    ClassifierWeights::from_record(recs.pop().unwrap())
}

pub fn write_classifier_weights(cw: &ClassifierWeights, path: impl AsRef<Path>) -> Result<()> {
    write_tensor_file(&[cw.to_record()], path)
}

/// A globally pooled feature vector, the input of the box and class heads.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeature {
    pub image_id: String,
    pub v: Vec<f64>,
}

/// Reads pooled features stored as `1 x 1 x d` records.
pub fn read_pooled_features(path: impl AsRef<Path>) -> Result<Vec<PooledFeature>> {
    let recs = read_tensor_file(path)?;
    let mut seen = HashSet::new();
    recs.into_iter()
        .map(|r| {
            if r.h != 1 || r.w != 1 {
                return Err(Error::Format(format!(
                    "pooled feature {:?} must be 1x1xd, got {}x{}x{}",
                    r.image_id, r.h, r.w, r.d
                )));
            }
            if !seen.insert(r.image_id.clone()) {
                return Err(Error::DuplicateId(r.image_id));
            }
            Ok(PooledFeature {
                image_id: r.image_id,
                v: r.values.iter().map(|&x| x as f64).collect(),
            })
        })
        .collect()
}

pub fn write_pooled_features(features: &[PooledFeature], path: impl AsRef<Path>) -> Result<()> {
    let recs: Vec<FeatureMap> = features
        .iter()
        .map(|p| FeatureMap {
            image_id: p.image_id.clone(),
            h: 1,
            w: 1,
            d: p.v.len(),
            values: p.v.iter().map(|&x| x as f32).collect(),
        })
        .collect();
    write_tensor_file(&recs, path)
}
