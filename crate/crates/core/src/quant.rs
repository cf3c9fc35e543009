//! Group quantizers and error metrics.
//!
//! Matrices handed to the quantizers use the `(output, input)` layout:
//! each row is one output channel and quantization groups are contiguous runs
//! of `group_size` input channels along that row.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("invalid quantization spec: {0}")]
    InvalidSpec(String),
    #[error("group size {group} does not divide row length {len}")]
    GroupDoesNotDivide { len: usize, group: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("hessian is singular even after dampening")]
    SingularHessian,
}

pub type Result<T, E = QuantError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupSize {
    Fixed(usize),
    /// One group spanning the whole row.
    PerChannel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clip {
    None,
    FixedRatio(f64),
    MseSearch(Vec<f64>),
}

impl Clip {
    /// MSE search over `1.00, 0.99, ..., 0.50`.
    pub fn mse_default() -> Self {
        Clip::MseSearch(default_mse_grid())
    }
}

pub fn default_mse_grid() -> Vec<f64> {
    (50..=100).rev().map(|k| k as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    bits: u8,
    group_size: GroupSize,
    symmetric: bool,
    clip: Clip,
}

impl QuantSpec {
    pub fn new(bits: u8, group_size: GroupSize, symmetric: bool, clip: Clip) -> Result<Self> {
        if !(2..=8).contains(&bits) {
            return Err(QuantError::InvalidSpec(format!("bits {bits} outside [2, 8]")));
        }
        if group_size == GroupSize::Fixed(0) {
            return Err(QuantError::InvalidSpec("group size must be positive".into()));
        }
        let ratio_ok = |r: f64| r > 0.0 && r <= 1.0;
        match &clip {
            Clip::FixedRatio(r) if !ratio_ok(*r) => {
                return Err(QuantError::InvalidSpec(format!("clip ratio {r} outside (0, 1]")))
            }
            Clip::MseSearch(grid) if grid.is_empty() => {
                return Err(QuantError::InvalidSpec("empty clip search grid".into()))
            }
            Clip::MseSearch(grid) if !grid.iter().all(|&r| ratio_ok(r)) => {
                return Err(QuantError::InvalidSpec("clip grid ratio outside (0, 1]".into()))
            }
            _ => {}
        }
        Ok(QuantSpec {
            bits,
            group_size,
            symmetric,
            clip,
        })
    }

    /// Asymmetric weight quantizer with MSE-searched clipping.
    pub fn weight(bits: u8, group: usize) -> Result<Self> {
        Self::new(bits, GroupSize::Fixed(group), false, Clip::mse_default())
    }

    /// Symmetric activation quantizer clipped at 0.9 of the group max.
    pub fn activation(bits: u8, group: usize) -> Result<Self> {
        Self::new(bits, GroupSize::Fixed(group), true, Clip::FixedRatio(0.9))
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn group_size(&self) -> GroupSize {
        self.group_size
    }

    pub fn symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn clip(&self) -> &Clip {
        &self.clip
    }

    /// Concrete group length for rows of length `len`.
    pub fn group_len(&self, len: usize) -> Result<usize> {
        match self.group_size {
            GroupSize::PerChannel => Ok(len),
            GroupSize::Fixed(g) if len % g == 0 && len > 0 => Ok(g),
            GroupSize::Fixed(g) => Err(QuantError::GroupDoesNotDivide { len, group: g }),
        }
    }

    /// Inclusive code range.
    pub fn code_range(&self) -> (i32, i32) {
        if self.symmetric {
            (-(1 << (self.bits - 1)), (1 << (self.bits - 1)) - 1)
        } else {
            (0, (1 << self.bits) - 1)
        }
    }
}

/// Scale and optional zero point of one group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupParams {
    pub scale: f64,
    pub zero_point: Option<i32>,
    /// Values outside `[lo, hi]` are clipped before rounding.
    lo: f64,
    hi: f64,
}

impl GroupParams {
    /// Parameters for `values` with the range shrunk by `ratio`.
    pub fn fit(values: &[f64], spec: &QuantSpec, ratio: f64) -> Self {
        if spec.symmetric {
            let m = values.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            if m == 0.0 {
                return GroupParams {
                    scale: 1.0,
                    zero_point: None,
                    lo: 0.0,
                    hi: 0.0,
                };
            }
            let qpos = f64::from((1 << (spec.bits - 1)) - 1);
            let clipped = m * ratio;
            return GroupParams {
                scale: clipped / qpos,
                zero_point: None,
                lo: -clipped,
                hi: clipped,
            };
        }
        // the range always spans zero, so the zero point is a valid code
        let (mn, mx) = values
            .iter()
            .fold((0.0f64, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        if mx == mn {
            return GroupParams {
                scale: 1.0,
                zero_point: Some(0),
                lo: 0.0,
                hi: 0.0,
            };
        }
        let qmax = f64::from((1 << spec.bits) - 1);
        let mid = 0.5 * (mx + mn);
        let half = 0.5 * (mx - mn) * ratio;
        let (lo, hi) = (mid - half, mid + half);
        let scale = (hi - lo) / qmax;
        let zero = (-lo / scale).round().clamp(0.0, qmax) as i32;
        GroupParams {
            scale,
            zero_point: Some(zero),
            lo,
            hi,
        }
    }

    pub fn quantize(&self, w: f64, range: (i32, i32)) -> i32 {
        let w = if self.lo <= self.hi { w.clamp(self.lo, self.hi) } else { w };
        let q = (w / self.scale).round() + f64::from(self.zero_point.unwrap_or(0));
        q.clamp(f64::from(range.0), f64::from(range.1)) as i32
    }

    pub fn dequantize(&self, code: i32) -> f64 {
        f64::from(code - self.zero_point.unwrap_or(0)) * self.scale
    }

    fn squared_error(&self, values: &[f64], range: (i32, i32)) -> f64 {
        values
            .iter()
            .map(|&w| (w - self.dequantize(self.quantize(w, range))).powi(2))
            .sum()
    }
}

/// Picks the clip ratio from `grid` with the least squared reconstruction
/// error; ties go to the larger ratio.
pub fn mse_clip_search(group: &[f64], spec: &QuantSpec, grid: &[f64]) -> (f64, f64) {
    let range = spec.code_range();
    let mut best = (f64::NAN, f64::INFINITY);
    for &ratio in grid {
        let err = GroupParams::fit(group, spec, ratio).squared_error(group, range);
        if err < best.1 || (err == best.1 && ratio > best.0) {
            best = (ratio, err);
        }
    }
    best
}

/// Group parameters under the spec's clipping policy.
pub fn choose_params(group: &[f64], spec: &QuantSpec) -> GroupParams {
    let ratio = match &spec.clip {
        Clip::None => 1.0,
        Clip::FixedRatio(r) => *r,
        Clip::MseSearch(grid) => mse_clip_search(group, spec, grid).0,
    };
    GroupParams::fit(group, spec, ratio)
}

/// Integer codes plus per-group scales and zero points.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    rows: usize,
    cols: usize,
    group_len: usize,
    /// Row-major.
    codes: Vec<i32>,
    /// Row-major over `(row, group)`.
    scales: Vec<f64>,
    zero_points: Option<Vec<i32>>,
    spec: QuantSpec,
}

impl QuantizedTensor {
    pub fn from_parts(
        shape: (usize, usize),
        codes: Vec<i32>,
        scales: Vec<f64>,
        zero_points: Option<Vec<i32>>,
        spec: QuantSpec,
    ) -> Result<Self> {
        let (rows, cols) = shape;
        let group_len = spec.group_len(cols)?;
        let groups = rows * (cols / group_len);
        let bad = codes.len() != rows * cols
            || scales.len() != groups
            || zero_points.as_ref().is_some_and(|z| z.len() != groups)
            || zero_points.is_some() == spec.symmetric;
        if bad {
            return Err(QuantError::InvalidSpec(
                "codes/scales/zero points do not match the shape".into(),
            ));
        }
        let t = QuantizedTensor {
            rows,
            cols,
            group_len,
            codes,
            scales,
            zero_points,
            spec,
        };
        if !t.codes_in_range() {
            return Err(QuantError::InvalidSpec("code outside the representable range".into()));
        }
        Ok(t)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn zero_points(&self) -> Option<&[i32]> {
        self.zero_points.as_deref()
    }

    pub fn spec(&self) -> &QuantSpec {
        &self.spec
    }

    pub fn group_len(&self) -> usize {
        self.group_len
    }

    pub fn groups_per_row(&self) -> usize {
        self.cols / self.group_len
    }

    pub fn codes_in_range(&self) -> bool {
        let (lo, hi) = self.spec.code_range();
        self.codes.iter().all(|&c| (lo..=hi).contains(&c))
    }

    fn params(&self, row: usize, col: usize) -> (f64, i32) {
        let g = row * self.groups_per_row() + col / self.group_len;
        let zero = self.zero_points.as_ref().map_or(0, |z| z[g]);
        (self.scales[g], zero)
    }

    pub fn dequantize(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |r, c| {
            let (scale, zero) = self.params(r, c);
            f64::from(self.codes[r * self.cols + c] - zero) * scale
        })
    }
}

/// `(code - zero_point) * scale`, elementwise.
pub fn dequantize(q: &QuantizedTensor) -> DMatrix<f64> {
    q.dequantize()
}

/// Per-group parameters for every group of `w`, chosen from `w` itself.
fn all_params(w: &DMatrix<f64>, spec: &QuantSpec, group: usize) -> Vec<GroupParams> {
    let mut buf = vec![0.0; group];
    let mut out = Vec::with_capacity(w.nrows() * w.ncols() / group);
    for r in 0..w.nrows() {
        for g in 0..w.ncols() / group {
            for (k, b) in buf.iter_mut().enumerate() {
                *b = w[(r, g * group + k)];
            }
            out.push(choose_params(&buf, spec));
        }
    }
    out
}

fn assemble(
    shape: (usize, usize),
    group: usize,
    codes: Vec<i32>,
    params: &[GroupParams],
    spec: &QuantSpec,
) -> QuantizedTensor {
    let scales = params.iter().map(|p| p.scale).collect();
    let zero_points = (!spec.symmetric)
        .then(|| params.iter().map(|p| p.zero_point.unwrap_or(0)).collect());
    QuantizedTensor {
        rows: shape.0,
        cols: shape.1,
        group_len: group,
        codes,
        scales,
        zero_points,
        spec: spec.clone(),
    }
}

/// Round-to-nearest group quantization (ties away from zero).
pub fn rtn_quantize(w: &DMatrix<f64>, spec: &QuantSpec) -> Result<QuantizedTensor> {
    let (rows, cols) = w.shape();
    let group = spec.group_len(cols)?;
    let params = all_params(w, spec, group);
    let range = spec.code_range();
    let gpr = cols / group;
    let mut codes = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            codes.push(params[r * gpr + c / group].quantize(w[(r, c)], range));
        }
    }
    Ok(assemble((rows, cols), group, codes, &params, spec))
}

/// Second-moment matrix of calibration inputs, `2 XᵀX / samples`.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationHessian {
    pub h: DMatrix<f64>,
    pub sample_count: usize,
}

impl CalibrationHessian {
    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    /// `Rᵀ H R`: the Hessian seen by a weight whose inputs were rotated by `R`.
    pub fn rotated(&self, r: &DMatrix<f64>) -> Self {
        let h = r.transpose() * &self.h * r;
        CalibrationHessian {
            h: (&h + h.transpose()) * 0.5,
            sample_count: self.sample_count,
        }
    }
}

pub fn hessian_from_calibration(x: &DMatrix<f64>) -> Result<CalibrationHessian> {
    let samples = x.nrows();
    if samples == 0 || x.ncols() == 0 {
        return Err(QuantError::EmptyCalibration);
    }
    let h = x.transpose() * x * (2.0 / samples as f64);
    Ok(CalibrationHessian {
        h: (&h + h.transpose()) * 0.5,
        sample_count: samples,
    })
}

/// Upper-triangular `U` with `UᵀU = (H + λI)⁻¹`, `λ = 0.01 · mean diag(H)`.
fn inverse_cholesky_upper(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = h.nrows();
    let damp = 0.01 * h.diagonal().mean();
    if !(damp > 0.0) {
        return Err(QuantError::SingularHessian);
    }
    let mut hd = h.clone();
    for i in 0..d {
        hd[(i, i)] += damp;
    }
    let inv = hd
        .cholesky()
        .ok_or(QuantError::SingularHessian)?
        .inverse();
    let inv = (&inv + inv.transpose()) * 0.5;
    let l = inv.cholesky().ok_or(QuantError::SingularHessian)?.unpack();
    Ok(l.transpose())
}

/// Row-wise `e H eᵀ` for an error row `e`.
fn row_proxy(e: &[f64], h: &DMatrix<f64>) -> f64 {
    let d = e.len();
    let mut total = 0.0;
    for i in 0..d {
        let mut acc = 0.0;
        for j in 0..d {
            acc += h[(i, j)] * e[j];
        }
        total += e[i] * acc;
    }
    total
}

/// Column-sequential quantization with Hessian-weighted error feedback.
///
/// Group parameters are fixed up front from the original weights (including
/// clip search), so the result shares its grid with [`rtn_quantize`]. Columns
/// are processed left to right. A row whose feedback pass ends with a larger
/// `e H eᵀ` than plain rounding keeps the rounded codes instead, so the proxy
/// objective never exceeds the RTN one.
pub fn gptq_quantize(
    w: &DMatrix<f64>,
    hessian: &CalibrationHessian,
    spec: &QuantSpec,
) -> Result<QuantizedTensor> {
    gptq_impl(w, hessian, spec, true)
}

/// [`gptq_quantize`] without the per-row fallback to rounding.
pub fn gptq_quantize_unguarded(
    w: &DMatrix<f64>,
    hessian: &CalibrationHessian,
    spec: &QuantSpec,
) -> Result<QuantizedTensor> {
    gptq_impl(w, hessian, spec, false)
}

fn gptq_impl(
    w: &DMatrix<f64>,
    hessian: &CalibrationHessian,
    spec: &QuantSpec,
    guarded: bool,
) -> Result<QuantizedTensor> {
    let (rows, cols) = w.shape();
    if hessian.h.shape() != (cols, cols) {
        return Err(QuantError::ShapeMismatch(hessian.h.shape(), (cols, cols)));
    }
    let group = spec.group_len(cols)?;
    let params = all_params(w, spec, group);
    let u = inverse_cholesky_upper(&hessian.h)?;
    let range = spec.code_range();
    let gpr = cols / group;

    let mut codes = Vec::with_capacity(rows * cols);
    let mut work = vec![0.0; cols];
    let mut row_codes = vec![0i32; cols];
    let mut rtn_codes = vec![0i32; cols];
    let mut err_fb = vec![0.0; cols];
    let mut err_rtn = vec![0.0; cols];
    for r in 0..rows {
        let p = &params[r * gpr..(r + 1) * gpr];
        for (c, v) in work.iter_mut().enumerate() {
            *v = w[(r, c)];
        }
        for i in 0..cols {
            let gp = &p[i / group];
            let q = gp.quantize(work[i], range);
            row_codes[i] = q;
            let e = (work[i] - gp.dequantize(q)) / u[(i, i)];
            for j in i + 1..cols {
                work[j] -= e * u[(i, j)];
            }
        }
        for c in 0..cols {
            let gp = &p[c / group];
            rtn_codes[c] = gp.quantize(w[(r, c)], range);
            err_fb[c] = w[(r, c)] - gp.dequantize(row_codes[c]);
            err_rtn[c] = w[(r, c)] - gp.dequantize(rtn_codes[c]);
        }
        if !guarded || row_proxy(&err_fb, &hessian.h) <= row_proxy(&err_rtn, &hessian.h) {
            codes.extend_from_slice(&row_codes);
        } else {
            codes.extend_from_slice(&rtn_codes);
        }
    }
    Ok(assemble((rows, cols), group, codes, &params, spec))
}

#[derive(Debug, Clone, PartialEq)]
pub enum ErrorMetric<'a> {
    Mse,
    MaxAbs,
    /// `tr((W − Ŵ) H (W − Ŵ)ᵀ)`.
    ProxyHessian(&'a DMatrix<f64>),
}

pub fn quant_error(w: &DMatrix<f64>, w_hat: &DMatrix<f64>, metric: ErrorMetric<'_>) -> Result<f64> {
    if w.shape() != w_hat.shape() {
        return Err(QuantError::ShapeMismatch(w.shape(), w_hat.shape()));
    }
    let e = w - w_hat;
    Ok(match metric {
        ErrorMetric::Mse => e.norm_squared() / e.len() as f64,
        ErrorMetric::MaxAbs => e.amax(),
        ErrorMetric::ProxyHessian(h) => {
            if h.shape() != (e.ncols(), e.ncols()) {
                return Err(QuantError::ShapeMismatch(h.shape(), (e.ncols(), e.ncols())));
            }
            (&e * h).component_mul(&e).sum()
        }
    })
}
