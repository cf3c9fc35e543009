//! `GSRT` tensor files and CSV reports.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! magic     4 bytes  "GSRT"
//! version   u32      1
//! dtype     u8       0 = f64, 1 = f32, 2 = i8
//! meta_len  u32      length of the UTF-8 JSON metadata that follows
//! metadata  meta_len bytes
//! ndim      u8
//! dims      ndim × u64
//! payload   product(dims) × dtype size, row-major
//! ```

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::lab::{AblationReport, ExperimentReport, Metric};
use crate::quant::{QuantSpec, QuantizedTensor};
use crate::transform::{MatrixKind, OrthoMatrix, SignRandomization};

pub const MAGIC: &[u8; 4] = b"GSRT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {0}")]
    VersionUnsupported(u32),
    #[error("file is truncated")]
    TruncatedPayload,
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("bad metadata: {0}")]
    BadMetadata(String),
    #[error("tensor shape does not match its data: {0}")]
    ShapeMismatch(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = IoError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F64 = 0,
    F32 = 1,
    I8 = 2,
}

impl Dtype {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F64),
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::I8),
            other => Err(IoError::UnsupportedDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
            Dtype::I8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    I8(Vec<i8>),
}

impl TensorData {
    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F64(_) => Dtype::F64,
            TensorData::F32(_) => Dtype::F32,
            TensorData::I8(_) => Dtype::I8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::F32(v) => v.len(),
            TensorData::I8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F64(v) => v.clone(),
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::I8(v) => v.iter().map(|&x| f64::from(x)).collect(),
        }
    }
}

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        if dims.len() > u8::MAX as usize {
            return Err(IoError::ShapeMismatch(format!("{} dimensions", dims.len())));
        }
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| IoError::ShapeMismatch("element count overflows".into()))?;
        if count != data.len() {
            return Err(IoError::ShapeMismatch(format!(
                "dims {dims:?} hold {count} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let data = m.transpose().as_slice().to_vec();
        Tensor {
            dims: vec![m.nrows(), m.ncols()],
            data: TensorData::F64(data),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn dtype(&self) -> Dtype {
        self.data.dtype()
    }

    /// Interprets a 2-D tensor as a matrix (any dtype, widened to f64).
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        let [r, c] = self.dims[..] else {
            return Err(IoError::ShapeMismatch(format!(
                "expected 2 dimensions, got {}",
                self.dims.len()
            )));
        };
        Ok(DMatrix::from_row_slice(r, c, &self.data.to_f64()))
    }
}

pub fn encode(tensor: &Tensor, metadata: &Value) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(metadata).map_err(|e| IoError::BadMetadata(e.to_string()))?;
    let meta_len = u32::try_from(meta.len())
        .map_err(|_| IoError::BadMetadata("metadata longer than u32::MAX".into()))?;
    let mut out = Vec::with_capacity(
        18 + meta.len() + 8 * tensor.dims.len() + tensor.data.len() * tensor.dtype().size(),
    );
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(tensor.dtype() as u8);
    out.extend_from_slice(&meta_len.to_le_bytes());
    out.extend_from_slice(&meta);
    out.push(tensor.dims.len() as u8);
    for &d in &tensor.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match &tensor.data {
        TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::I8(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(IoError::TruncatedPayload);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(Tensor, Value)> {
    let mut cur = Cursor { buf: bytes };
    if cur.take(4).map_err(|_| IoError::BadMagic)? != MAGIC {
        return Err(IoError::BadMagic);
    }
    let version = u32::from_le_bytes(cur.array()?);
    if version != VERSION {
        return Err(IoError::VersionUnsupported(version));
    }
    let dtype = Dtype::from_code(cur.array::<1>()?[0])?;
    let meta_len = u32::from_le_bytes(cur.array()?) as usize;
    let metadata: Value = serde_json::from_slice(cur.take(meta_len)?)
        .map_err(|e| IoError::BadMetadata(e.to_string()))?;
    let ndim = cur.array::<1>()?[0] as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = u64::from_le_bytes(cur.array()?);
        dims.push(usize::try_from(d).map_err(|_| IoError::TruncatedPayload)?);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or(IoError::TruncatedPayload)?;
    let payload = cur.take(count.checked_mul(dtype.size()).ok_or(IoError::TruncatedPayload)?)?;
    if !cur.buf.is_empty() {
        return Err(IoError::TrailingBytes(cur.buf.len()));
    }
    let data = match dtype {
        Dtype::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::I8 => TensorData::I8(payload.iter().map(|&b| b as i8).collect()),
    };
    Ok((Tensor { dims, data }, metadata))
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor, metadata: &Value) -> Result<()> {
    fs::write(path, encode(tensor, metadata)?)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<(Tensor, Value)> {
    decode(&fs::read(path)?)
}

fn meta_field<'a>(meta: &'a Value, key: &str) -> Result<&'a Value> {
    meta.get(key)
        .ok_or_else(|| IoError::BadMetadata(format!("missing `{key}`")))
}

fn from_meta<T: serde::de::DeserializeOwned>(meta: &Value, key: &str) -> Result<T> {
    serde_json::from_value(meta_field(meta, key)?.clone())
        .map_err(|e| IoError::BadMetadata(format!("`{key}`: {e}")))
}

pub fn rotation_metadata(m: &OrthoMatrix) -> Value {
    json!({
        "matrix": m.kind(),
        "order": m.order(),
        "scale": m.scale(),
        "randomization": m.randomization(),
    })
}

pub fn rotation_to_tensor(m: &OrthoMatrix) -> Tensor {
    Tensor {
        dims: vec![m.order(), m.order()],
        data: TensorData::I8(m.signs().to_vec()),
    }
}

pub fn write_rotation(path: impl AsRef<Path>, m: &OrthoMatrix) -> Result<()> {
    write_tensor(path, &rotation_to_tensor(m), &rotation_metadata(m))
}

/// Rebuilds a rotation from its signs and construction record; the stored
/// signs must match the record exactly.
pub fn rotation_from_tensor(tensor: &Tensor, meta: &Value) -> Result<OrthoMatrix> {
    let TensorData::I8(signs) = tensor.data() else {
        return Err(IoError::BadMetadata("rotation signs must be i8".into()));
    };
    let kind: MatrixKind = from_meta(meta, "matrix")?;
    let randomization: Vec<SignRandomization> = from_meta(meta, "randomization")?;
    let m = OrthoMatrix::from_parts(kind, signs.clone(), randomization)
        .map_err(|e| IoError::BadMetadata(e.to_string()))?;
    let scale: f64 = from_meta(meta, "scale")?;
    if scale != m.scale() || tensor.dims() != [m.order(), m.order()] {
        return Err(IoError::BadMetadata("scale or shape disagrees with the construction".into()));
    }
    Ok(m)
}

pub fn read_rotation(path: impl AsRef<Path>) -> Result<OrthoMatrix> {
    let (t, meta) = read_tensor(path)?;
    rotation_from_tensor(&t, &meta)
}

/// Any square rotation file as a dense matrix: structured `i8` sign files
/// (scaled by their `scale` entry) or plain `f32`/`f64` matrices.
pub fn read_dense_rotation(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let (t, meta) = read_tensor(path)?;
    if t.dims().len() != 2 || t.dims()[0] != t.dims()[1] {
        return Err(IoError::ShapeMismatch(format!("rotation must be square, got {:?}", t.dims())));
    }
    match t.dtype() {
        Dtype::I8 => {
            let scale: f64 = from_meta(&meta, "scale")?;
            Ok(t.to_matrix()? * scale)
        }
        _ => t.to_matrix(),
    }
}

pub fn quantized_to_tensor(q: &QuantizedTensor) -> (Tensor, Value) {
    let spec = q.spec();
    let offset = if spec.symmetric() { 0 } else { 1i32 << (spec.bits() - 1) };
    let codes = q.codes().iter().map(|&c| (c - offset) as i8).collect();
    let (rows, cols) = q.shape();
    let meta = json!({
        "quantized": {
            "spec": spec,
            "code_offset": offset,
            "scales": q.scales(),
            "zero_points": q.zero_points(),
        }
    });
    (
        Tensor {
            dims: vec![rows, cols],
            data: TensorData::I8(codes),
        },
        meta,
    )
}

pub fn quantized_from_tensor(tensor: &Tensor, meta: &Value) -> Result<QuantizedTensor> {
    let TensorData::I8(codes) = tensor.data() else {
        return Err(IoError::BadMetadata("quantized codes must be i8".into()));
    };
    let [rows, cols] = tensor.dims()[..] else {
        return Err(IoError::ShapeMismatch("quantized tensor must be 2-D".into()));
    };
    let q = meta_field(meta, "quantized")?;
    let spec: QuantSpec = from_meta(q, "spec")?;
    let offset: i32 = from_meta(q, "code_offset")?;
    let scales: Vec<f64> = from_meta(q, "scales")?;
    let zero_points: Option<Vec<i32>> = from_meta(q, "zero_points")?;
    let codes = codes.iter().map(|&c| i32::from(c) + offset).collect();
    QuantizedTensor::from_parts((rows, cols), codes, scales, zero_points, spec)
        .map_err(|e| IoError::BadMetadata(e.to_string()))
}

pub fn write_quantized(path: impl AsRef<Path>, q: &QuantizedTensor) -> Result<()> {
    let (t, meta) = quantized_to_tensor(q);
    write_tensor(path, &t, &meta)
}

pub fn read_quantized(path: impl AsRef<Path>) -> Result<QuantizedTensor> {
    let (t, meta) = read_tensor(path)?;
    quantized_from_tensor(&t, &meta)
}

/// One line of a report CSV.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReportRow {
    pub variant: String,
    pub tensor_id: usize,
    pub metric: String,
    pub value: f64,
}

/// 17 significant digits; parses back to the identical `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Rows in `(tensor_id, variant, metric)` order.
pub fn report_rows(report: &ExperimentReport) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for v in &report.variants {
        for m in Metric::ALL {
            for (tensor_id, &value) in v.values(m).iter().enumerate() {
                rows.push(ReportRow {
                    variant: v.name.clone(),
                    tensor_id,
                    metric: m.name().to_string(),
                    value,
                });
            }
        }
    }
    rows.sort_by(|a, b| {
        (a.tensor_id, &a.variant, Metric::rank(&a.metric))
            .cmp(&(b.tensor_id, &b.variant, Metric::rank(&b.metric)))
    });
    rows
}

pub fn report_to_csv(report: &ExperimentReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["variant", "tensor_id", "metric", "value"])?;
    for r in report_rows(report) {
        w.write_record([
            r.variant.as_str(),
            &r.tensor_id.to_string(),
            &r.metric,
            &format_f64(r.value),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| IoError::IoFailure(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_report(path: impl AsRef<Path>, report: &ExperimentReport) -> Result<()> {
    fs::write(path, report_to_csv(report)?)?;
    Ok(())
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers()?.clone();
    if headers != vec!["variant", "tensor_id", "metric", "value"] {
        return Err(IoError::BadMetadata(format!("unexpected csv header {headers:?}")));
    }
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    parse_report_csv(&fs::read_to_string(path)?)
}

/// Per-seed ablation cells: `precision,mode,seed,output_mse`.
pub fn ablation_to_csv(report: &AblationReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["precision", "mode", "seed", "output_mse"])?;
    for cell in &report.cells {
        let mode = match cell.mode {
            crate::rotation::R4Mode::Global => "global",
            crate::rotation::R4Mode::Local => "local",
        };
        for (seed, v) in cell.output_mse.iter().enumerate() {
            w.write_record([
                cell.precision.label().as_str(),
                mode,
                &seed.to_string(),
                &format_f64(*v),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| IoError::IoFailure(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Keeps unknown metadata keys untouched when adding a new one.
pub fn merge_metadata(base: &Value, key: &str, value: Value) -> Value {
    let mut map = base.as_object().cloned().unwrap_or_else(Map::new);
    map.insert(key.to_string(), value);
    Value::Object(map)
}
