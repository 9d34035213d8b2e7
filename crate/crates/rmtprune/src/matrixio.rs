//! File formats: PMAT matrices, IDX datasets, CSV fixtures and model
//! checkpoints.
//!
//! PMAT layout: the 8 ASCII bytes `PMAT0001`, rows and cols as u64
//! little-endian, then rows·cols f64 little-endian in row-major order.
//!
//! A checkpoint is a `key = value` text header terminated by a blank line,
//! followed by concatenated PMAT blobs whose byte offsets (relative to the
//! first blob) are listed in the header.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::RealMatrix;
use crate::nn::Activation;

const PMAT_MAGIC: &[u8; 8] = b"PMAT0001";
const PMAT_HEADER: usize = 24;
const CKPT_MAGIC: &str = "RMTCKPT1";
const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Write `bytes` to a sibling temp file and rename it over `path`, so a
/// reader never observes a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Parameter(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn encode_matrix(m: &RealMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(PMAT_HEADER + 8 * m.len());
    out.extend_from_slice(PMAT_MAGIC);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for x in m.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

/// Decode one PMAT blob; returns the matrix and the number of bytes used.
pub fn decode_matrix(bytes: &[u8]) -> Result<(RealMatrix, usize)> {
    if bytes.len() < PMAT_HEADER {
        return Err(Error::Truncated(format!("{} bytes is shorter than a PMAT header", bytes.len())));
    }
    if &bytes[..8] != PMAT_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected PMAT0001",
            String::from_utf8_lossy(&bytes[..8])
        )));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let n = rows
        .checked_mul(cols)
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| Error::Format(format!("header size {rows}x{cols} overflows")))?;
    let need = n
        .checked_mul(8)
        .and_then(|b| b.checked_add(PMAT_HEADER))
        .ok_or_else(|| Error::Format(format!("header size {rows}x{cols} overflows")))?;
    if bytes.len() < need {
        return Err(Error::Truncated(format!(
            "{rows}x{cols} matrix needs {need} bytes, found {}",
            bytes.len()
        )));
    }
    let data = bytes[PMAT_HEADER..need]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((RealMatrix::new(rows as usize, cols as usize, data)?, need))
}

pub fn write_matrix(m: &RealMatrix, path: &Path) -> Result<()> {
    write_atomic(path, &encode_matrix(m))
}

pub fn read_matrix(path: &Path) -> Result<RealMatrix> {
    let bytes = read_file(path)?;
    let (m, used) = decode_matrix(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after matrix in {}",
            bytes.len() - used,
            path.display()
        )));
    }
    Ok(m)
}

/// CSV with one row per line and 17 significant digits per entry.
pub fn matrix_to_csv(m: &RealMatrix) -> String {
    let mut s = String::new();
    for i in 0..m.rows() {
        let line: Vec<String> = m.row(i).iter().map(|x| format!("{x:.16e}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

pub fn matrix_from_csv(text: &str) -> Result<RealMatrix> {
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("line {}: {e}: {t:?}", ln + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    RealMatrix::from_rows(&rows)
}

pub fn write_matrix_csv(m: &RealMatrix, path: &Path) -> Result<()> {
    write_atomic(path, matrix_to_csv(m).as_bytes())
}

pub fn read_matrix_csv(path: &Path) -> Result<RealMatrix> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))?;
    matrix_from_csv(&text)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub features: RealMatrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: RealMatrix, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::Dimension(format!(
                "{} labels for {} samples",
                labels.len(),
                features.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Data(format!("label {bad} outside [0, {n_classes})")));
        }
        Ok(Self { features, labels, n_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    pub fn take(&self, n: usize) -> LabeledDataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

/// Decoded content of one IDX file.
#[derive(Clone, Debug, PartialEq)]
pub enum IdxData {
    /// n × (H·W) pixels scaled to [0, 1].
    Images(RealMatrix),
    Labels(Vec<usize>),
}

pub fn decode_idx(bytes: &[u8]) -> Result<IdxData> {
    let word = |i: usize| -> Result<usize> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(|| Error::Truncated("IDX header cut short".into()))
    };
    let magic = word(0)? as u32;
    match magic {
        IDX_LABELS => {
            let n = word(1)?;
            let body = &bytes[8..];
            if body.len() != n {
                return Err(Error::Truncated(format!("header says {n} labels, file has {}", body.len())));
            }
            Ok(IdxData::Labels(body.iter().map(|&b| b as usize).collect()))
        }
        IDX_IMAGES => {
            let (n, h, w) = (word(1)?, word(2)?, word(3)?);
            let body = &bytes[16..];
            let expect = n
                .checked_mul(h)
                .and_then(|x| x.checked_mul(w))
                .ok_or_else(|| Error::Format("IDX dimensions overflow".into()))?;
            if body.len() != expect {
                return Err(Error::Truncated(format!(
                    "header says {n}x{h}x{w} = {expect} pixels, file has {}",
                    body.len()
                )));
            }
            let data = body.iter().map(|&p| p as f64 / 255.0).collect();
            Ok(IdxData::Images(RealMatrix::from_vec_unchecked(n, h * w, data)))
        }
        other => Err(Error::Format(format!("unknown IDX magic {other:#010x}"))),
    }
}

pub fn read_idx(path: &Path) -> Result<IdxData> {
    decode_idx(&read_file(path)?)
}

/// Pair an IDX image file with its label file.
pub fn load_idx_dataset(images: &Path, labels: &Path, n_classes: usize) -> Result<LabeledDataset> {
    let IdxData::Images(x) = read_idx(images)? else {
        return Err(Error::Format(format!("{} is not an IDX image file", images.display())));
    };
    let IdxData::Labels(y) = read_idx(labels)? else {
        return Err(Error::Format(format!("{} is not an IDX label file", labels.display())));
    };
    LabeledDataset::new(x, y, n_classes)
}

/// Scale every row by one global factor so that the largest row ℓ2 norm
/// equals `target_max_norm`.
///
/// A factor within 1e-12 of one is treated as identity, so re-normalizing
/// an already normalized dataset returns it byte for byte.
pub fn normalize_dataset(d: &LabeledDataset, target_max_norm: f64) -> Result<LabeledDataset> {
    if !(target_max_norm > 0.0) {
        return Err(Error::Parameter(format!("target norm must be positive, got {target_max_norm}")));
    }
    if d.is_empty() {
        return Err(Error::Degenerate("empty dataset".into()));
    }
    let max_norm = (0..d.len())
        .map(|i| crate::linalg::norm2(d.features.row(i)))
        .fold(0.0, f64::max);
    if max_norm == 0.0 {
        return Err(Error::Degenerate("all feature rows are zero".into()));
    }
    let factor = target_max_norm / max_norm;
    if (factor - 1.0).abs() <= 1e-12 {
        return Ok(d.clone());
    }
    Ok(LabeledDataset { features: d.features.scale(factor), ..d.clone() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedMatrix {
    pub name: String,
    pub matrix: RealMatrix,
}

impl NamedMatrix {
    pub fn new(name: impl Into<String>, matrix: RealMatrix) -> Self {
        Self { name: name.into(), matrix }
    }
}

/// Serialized form of an MLP.
///
/// Layer `k` (1-based) stores `layer{k}.weight` (out × in) or, when split,
/// `layer{k}.left` (out × r) and `layer{k}.right` (r × in); an optional
/// `layer{k}.bias` (1 × out). Masks are named `layer{k}.mask` and have the
/// weight's shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub topology: Vec<usize>,
    pub activation: Activation,
    pub activation_on_final: bool,
    pub layers: Vec<NamedMatrix>,
    pub masks: Vec<NamedMatrix>,
    pub split_flags: Vec<bool>,
}

impl ModelCheckpoint {
    pub fn find(&self, name: &str) -> Option<&RealMatrix> {
        self.layers.iter().find(|m| m.name == name).map(|m| &m.matrix)
    }

    pub fn find_mask(&self, name: &str) -> Option<&RealMatrix> {
        self.masks.iter().find(|m| m.name == name).map(|m| &m.matrix)
    }

    /// Check the shape chain, split factors and masks.
    pub fn validate(&self) -> Result<()> {
        let n_layers = self.topology.len().saturating_sub(1);
        if n_layers == 0 {
            return Err(Error::Format("topology needs at least two widths".into()));
        }
        if self.split_flags.len() != n_layers {
            return Err(Error::Format(format!(
                "{} split flags for {n_layers} layers",
                self.split_flags.len()
            )));
        }
        let mut known = 0;
        for k in 1..=n_layers {
            let (out, inp) = (self.topology[k], self.topology[k - 1]);
            let need = |name: String| {
                self.find(&name).ok_or_else(|| Error::Format(format!("missing matrix {name}")))
            };
            if self.split_flags[k - 1] {
                let l = need(format!("layer{k}.left"))?;
                let r = need(format!("layer{k}.right"))?;
                if l.rows() != out || r.cols() != inp || l.cols() != r.rows() {
                    return Err(Error::Format(format!(
                        "layer {k}: split factors {:?} and {:?} do not form {out}x{inp}",
                        l.shape(),
                        r.shape()
                    )));
                }
                known += 2;
            } else {
                let w = need(format!("layer{k}.weight"))?;
                if w.shape() != (out, inp) {
                    return Err(Error::Format(format!(
                        "layer {k}: weight is {:?}, topology needs ({out}, {inp})",
                        w.shape()
                    )));
                }
                known += 1;
            }
            if let Some(b) = self.find(&format!("layer{k}.bias")) {
                if b.shape() != (1, out) {
                    return Err(Error::Format(format!("layer {k}: bias shape {:?}", b.shape())));
                }
                known += 1;
            }
            if let Some(m) = self.find_mask(&format!("layer{k}.mask")) {
                if self.split_flags[k - 1] || m.shape() != (out, inp) {
                    return Err(Error::Format(format!(
                        "layer {k}: mask shape {:?} does not match weight ({out}, {inp})",
                        m.shape()
                    )));
                }
                if m.as_slice().iter().any(|&x| x != 0.0 && x != 1.0) {
                    return Err(Error::Format(format!("layer {k}: mask is not binary")));
                }
            }
        }
        if known != self.layers.len() {
            return Err(Error::Format("checkpoint holds matrices outside the topology".into()));
        }
        let valid_mask = |m: &NamedMatrix| {
            (1..=n_layers).any(|k| m.name == format!("layer{k}.mask"))
        };
        if let Some(m) = self.masks.iter().find(|m| !valid_mask(m)) {
            return Err(Error::Format(format!("unexpected mask {}", m.name)));
        }
        Ok(())
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

pub fn encode_checkpoint(m: &ModelCheckpoint) -> Result<Vec<u8>> {
    m.validate()?;
    let mut header = String::new();
    writeln!(header, "{CKPT_MAGIC}").unwrap();
    writeln!(header, "topology = {}", join(&m.topology)).unwrap();
    writeln!(header, "activation = {}", m.activation.name()).unwrap();
    writeln!(header, "activation_on_final = {}", m.activation_on_final).unwrap();
    let flags: Vec<u8> = m.split_flags.iter().map(|&f| f as u8).collect();
    writeln!(header, "split = {}", join(&flags)).unwrap();
    let mut blobs = Vec::new();
    let entries = m.layers.iter().map(|x| ("matrix", x)).chain(m.masks.iter().map(|x| ("mask", x)));
    for (kind, nm) in entries {
        if nm.name.contains(char::is_whitespace) || nm.name.is_empty() {
            return Err(Error::Format(format!("invalid matrix name {:?}", nm.name)));
        }
        let blob = encode_matrix(&nm.matrix);
        writeln!(header, "{kind} = {} {} {}", nm.name, blobs.len(), blob.len()).unwrap();
        blobs.extend_from_slice(&blob);
    }
    header.push('\n');
    let mut out = header.into_bytes();
    out.extend_from_slice(&blobs);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelCheckpoint> {
    let split_at = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::Format("checkpoint header has no terminating blank line".into()))?;
    let header = std::str::from_utf8(&bytes[..split_at])
        .map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
    let body = &bytes[split_at + 2..];
    let mut lines = header.lines();
    if lines.next() != Some(CKPT_MAGIC) {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let mut topology = None;
    let mut activation = None;
    let mut on_final = None;
    let mut split = None;
    let mut layers = Vec::new();
    let mut masks = Vec::new();
    let mut expected_end = 0usize;
    for line in lines {
        let (key, value) = line
            .split_once(" = ")
            .ok_or_else(|| Error::Format(format!("malformed header line {line:?}")))?;
        let ints = |v: &str| -> Result<Vec<usize>> {
            v.split(',')
                .filter(|t| !t.is_empty())
                .map(|t| t.parse().map_err(|_| Error::Format(format!("bad integer {t:?}"))))
                .collect()
        };
        match key {
            "topology" => topology = Some(ints(value)?),
            "activation" => activation = Some(Activation::parse(value)?),
            "activation_on_final" => {
                on_final = Some(value.parse::<bool>().map_err(|_| Error::Format(format!("bad flag {value:?}")))?)
            }
            "split" => split = Some(ints(value)?.into_iter().map(|f| f != 0).collect::<Vec<_>>()),
            "matrix" | "mask" => {
                let parts: Vec<&str> = value.split(' ').collect();
                let [name, off, len] = parts[..] else {
                    return Err(Error::Format(format!("malformed blob entry {value:?}")));
                };
                let off: usize = off.parse().map_err(|_| Error::Format(format!("bad offset {off:?}")))?;
                let len: usize = len.parse().map_err(|_| Error::Format(format!("bad length {len:?}")))?;
                let end = off.checked_add(len).filter(|&e| e <= body.len()).ok_or_else(|| {
                    Error::Truncated(format!("blob {name} at {off}+{len} exceeds {} body bytes", body.len()))
                })?;
                if off != expected_end {
                    return Err(Error::Format(format!("blob {name} starts at {off}, expected {expected_end}")));
                }
                expected_end = end;
                let (matrix, used) = decode_matrix(&body[off..end])?;
                if used != len {
                    return Err(Error::Format(format!("blob {name} length {len} but PMAT uses {used}")));
                }
                let nm = NamedMatrix::new(name, matrix);
                if key == "matrix" { layers.push(nm) } else { masks.push(nm) }
            }
            other => return Err(Error::Format(format!("unknown header key {other:?}"))),
        }
    }
    if expected_end != body.len() {
        return Err(Error::Format(format!("{} unreferenced bytes after blobs", body.len() - expected_end)));
    }
    let missing = |k: &str| Error::Format(format!("header lacks {k}"));
    let ckpt = ModelCheckpoint {
        topology: topology.ok_or_else(|| missing("topology"))?,
        activation: activation.ok_or_else(|| missing("activation"))?,
        activation_on_final: on_final.ok_or_else(|| missing("activation_on_final"))?,
        layers,
        masks,
        split_flags: split.ok_or_else(|| missing("split"))?,
    };
    ckpt.validate()?;
    Ok(ckpt)
}

pub fn save_checkpoint(m: &ModelCheckpoint, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(m)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    decode_checkpoint(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pmat_roundtrip_bytes() {
        let m = RealMatrix::new(2, 3, vec![1.0, -2.5, 3.25, 0.0, 1e-300, -7.0]).unwrap();
        let bytes = encode_matrix(&m);
        assert_eq!(&bytes[..8], b"PMAT0001");
        assert_eq!(bytes.len(), 24 + 48);
        let (back, used) = decode_matrix(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, m);
    }

    #[test]
    fn pmat_errors() {
        let m = RealMatrix::zeros(2, 2);
        let mut bytes = encode_matrix(&m);
        bytes[4..8].copy_from_slice(b"9999");
        assert!(matches!(decode_matrix(&bytes), Err(Error::Format(_))));
        let bytes = encode_matrix(&m);
        assert!(matches!(decode_matrix(&bytes[..30]), Err(Error::Truncated(_))));
        let mut bytes = encode_matrix(&m);
        bytes[24..32].copy_from_slice(&f64::INFINITY.to_le_bytes());
        assert!(matches!(decode_matrix(&bytes), Err(Error::Data(_))));
    }

    #[test]
    fn idx_labels_and_images() {
        let mut labels = vec![0, 0, 8, 1, 0, 0, 0, 3];
        labels.extend([0, 4, 9]);
        assert_eq!(decode_idx(&labels).unwrap(), IdxData::Labels(vec![0, 4, 9]));

        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2];
        img.extend([0, 255, 128, 64]);
        let IdxData::Images(m) = decode_idx(&img).unwrap() else { panic!() };
        assert_eq!(m.as_slice(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);

        img.pop();
        assert!(matches!(decode_idx(&img), Err(Error::Truncated(_))));
        assert!(matches!(decode_idx(&[0, 0, 8, 2, 0, 0, 0, 0]), Err(Error::Format(_))));
    }

    #[test]
    fn normalize_example() {
        let x = RealMatrix::new(2, 2, vec![3.0, 4.0, 0.0, 1.0]).unwrap();
        let d = LabeledDataset::new(x, vec![0, 1], 2).unwrap();
        let n = normalize_dataset(&d, 0.1).unwrap();
        let expect = [0.06, 0.08, 0.0, 0.02];
        for (a, b) in n.features.as_slice().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(normalize_dataset(&n, 0.1).unwrap(), n);
        let z = LabeledDataset::new(RealMatrix::zeros(2, 2), vec![0, 0], 1).unwrap();
        assert!(matches!(normalize_dataset(&z, 1.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn csv_roundtrip_exact() {
        let m = RealMatrix::new(2, 2, vec![0.1, 1.0 / 3.0, -2e-17, 12345.678901234567]).unwrap();
        assert_eq!(matrix_from_csv(&matrix_to_csv(&m)).unwrap(), m);
    }
}
