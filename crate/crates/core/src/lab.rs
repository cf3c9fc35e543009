//! Synthetic weight corpora and rotation comparison runs.
//!
//! Corpus tensors use the `(output, input)` layout. A rotation chosen for
//! `R1` mixes input channels (columns) when it is the front rotation of the
//! weight role and output channels (rows) when it is the rear one.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StudentT};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use statrs::distribution::{Binomial, DiscreteCDF};
use thiserror::Error;

use crate::quant::{
    gptq_quantize, hessian_from_calibration, quant_error, rtn_quantize, CalibrationHessian,
    ErrorMetric, QuantError, QuantSpec,
};
use crate::rotation::{
    build_toy_block, fuse_rotations, toy_input, BlockQuant, R4Mode, Role, RotationAssignment,
    RotationChoice, RotationError, Slot, ToyBlockConfig, assignment_table,
};
use crate::transform::{hadamard_sylvester, sequency_profile, walsh, OrthoMatrix, TransformError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    #[error("invalid corpus spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Rotation(#[from] RotationError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Transform(#[from] TransformError),
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseDist {
    Gaussian,
    StudentT(f64),
}

impl BaseDist {
    /// Variance of one base draw.
    pub fn variance(&self) -> f64 {
        match *self {
            BaseDist::Gaussian => 1.0,
            BaseDist::StudentT(nu) if nu > 2.0 => nu / (nu - 2.0),
            BaseDist::StudentT(_) => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub base: BaseDist,
    pub outlier_channels: usize,
    pub outlier_gain: f64,
    /// Energy of the smooth component relative to the base draw.
    pub smooth_weight: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            count: 100,
            rows: 512,
            cols: 512,
            base: BaseDist::StudentT(4.0),
            outlier_channels: 4,
            outlier_gain: 20.0,
            smooth_weight: 0.3,
            seed: 0,
        }
    }
}

/// Cosine modes making up the smooth component.
const SMOOTH_MODES: usize = 4;

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LabError::InvalidSpec(m.to_string()));
        if self.count == 0 || self.rows == 0 || self.cols == 0 {
            return bad("count, rows and cols must be positive");
        }
        if self.outlier_channels >= self.cols {
            return bad("outlier_channels must be fewer than cols");
        }
        if !(self.outlier_gain > 0.0) || !(self.smooth_weight >= 0.0) {
            return bad("outlier_gain must be > 0 and smooth_weight >= 0");
        }
        if let BaseDist::StudentT(nu) = self.base {
            if !(nu > 0.0) {
                return bad("student-t degrees of freedom must be positive");
            }
        }
        Ok(())
    }

    /// Input channels carrying outliers (shared by every tensor).
    pub fn outlier_columns(&self) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6f75_746c_6965_7273);
        let mut cols = sample(&mut rng, self.cols, self.outlier_channels).into_vec();
        cols.sort_unstable();
        cols
    }
}

/// A generated set of `(output, input)` weight tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub tensors: Vec<DMatrix<f64>>,
}

impl Corpus {
    /// SHA-256 over every tensor's little-endian bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tensors {
            hash_matrix(&mut h, t);
        }
        hex::encode(h.finalize())
    }
}

fn hash_matrix(h: &mut Sha256, m: &DMatrix<f64>) {
    h.update((m.nrows() as u64).to_le_bytes());
    h.update((m.ncols() as u64).to_le_bytes());
    for v in m.iter() {
        h.update(v.to_le_bytes());
    }
}

fn draw_base(rng: &mut ChaCha8Rng, base: BaseDist) -> f64 {
    match base {
        BaseDist::Gaussian => rng.sample(rand_distr::StandardNormal),
        BaseDist::StudentT(nu) => StudentT::new(nu).expect("validated dof").sample(rng),
    }
}

/// Tensor = base draw + smooth low-frequency component along the input axis,
/// then the designated outlier input channels multiplied by `outlier_gain`.
pub fn gen_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let outliers = spec.outlier_columns();
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let base_var = spec.base.variance();
    let base_std = if base_var.is_finite() { base_var.sqrt() } else { 1.0 };
    // per-entry RMS of the smooth part, as a share of the base energy
    let smooth_rms = (spec.smooth_weight * base_std * base_std).sqrt();
    let tensors = (0..spec.count)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(t as u64);
            let mut m = DMatrix::zeros(spec.rows, spec.cols);
            for r in 0..spec.rows {
                for c in 0..spec.cols {
                    m[(r, c)] = draw_base(&mut rng, spec.base);
                }
            }
            if spec.smooth_weight > 0.0 {
                let modes: Vec<f64> = (0..spec.rows * SMOOTH_MODES)
                    .map(|_| unit.sample(&mut rng))
                    .collect();
                // each cosine has mean square 1/2; amplitudes are unit normal
                let norm = smooth_rms * (2.0 / SMOOTH_MODES as f64).sqrt();
                for r in 0..spec.rows {
                    for c in 0..spec.cols {
                        let x = (c as f64 + 0.5) / spec.cols as f64;
                        let s: f64 = (1..=SMOOTH_MODES)
                            .map(|k| {
                                modes[r * SMOOTH_MODES + k - 1]
                                    * (std::f64::consts::PI * k as f64 * x).cos()
                            })
                            .sum();
                        m[(r, c)] += norm * s;
                    }
                }
            }
            for &c in &outliers {
                m.column_mut(c).iter_mut().for_each(|v| *v *= spec.outlier_gain);
            }
            m
        })
        .collect();
    Ok(Corpus {
        spec: *spec,
        tensors,
    })
}

/// Seeded calibration activations `(samples, cols)` sharing the corpus's
/// outlier channels.
pub fn calibration_inputs(spec: &CorpusSpec, samples: usize) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6361_6c69_6272_6174);
    let mut x = DMatrix::from_fn(samples, spec.cols, |_, _| {
        rng.sample::<f64, _>(rand_distr::StandardNormal)
    });
    for c in spec.outlier_columns() {
        x.column_mut(c).iter_mut().for_each(|v| *v *= spec.outlier_gain);
    }
    x
}

/// A rotation application strategy: the fast transform for structured
/// matrices, a dense product otherwise.
#[derive(Debug, Clone)]
enum RotationOp {
    Identity,
    Fast(OrthoMatrix),
    Dense(DMatrix<f64>),
}

impl RotationOp {
    fn from_choice(choice: &RotationChoice, n: usize, group: usize, seed: u64) -> Result<Self> {
        if let RotationChoice::External(_) = choice {
            return Ok(RotationOp::Dense(choice.build(n, group, seed)?.expect("external")));
        }
        Ok(match choice.build_structured(n, group, seed)? {
            Some(m) => RotationOp::Fast(m),
            None => RotationOp::Identity,
        })
    }

    fn dense(&self, n: usize) -> DMatrix<f64> {
        match self {
            RotationOp::Identity => DMatrix::identity(n, n),
            RotationOp::Fast(m) => m.to_dense(),
            RotationOp::Dense(d) => d.clone(),
        }
    }

    /// `T <- T R` (`inverse`: `T <- T Rᵀ`).
    fn right(&self, t: &mut DMatrix<f64>, inverse: bool) {
        match self {
            RotationOp::Identity => {}
            RotationOp::Dense(r) => {
                *t = if inverse { &*t * r.transpose() } else { &*t * r };
            }
            RotationOp::Fast(m) => {
                let mut buf = vec![0.0; t.ncols()];
                for r in 0..t.nrows() {
                    for (c, b) in buf.iter_mut().enumerate() {
                        *b = t[(r, c)];
                    }
                    // row x: x R == (Rᵀ xᵀ)ᵀ
                    if inverse {
                        m.apply(&mut buf).expect("checked order");
                    } else {
                        m.apply_transpose(&mut buf).expect("checked order");
                    }
                    for (c, b) in buf.iter().enumerate() {
                        t[(r, c)] = *b;
                    }
                }
            }
        }
    }

    /// `T <- Rᵀ T` (`inverse`: `T <- R T`).
    fn left_transpose(&self, t: &mut DMatrix<f64>, inverse: bool) {
        match self {
            RotationOp::Identity => {}
            RotationOp::Dense(r) => {
                *t = if inverse { r * &*t } else { r.tr_mul(t) };
            }
            RotationOp::Fast(m) => {
                for mut col in t.column_iter_mut() {
                    let s = col.as_mut_slice();
                    if inverse {
                        m.apply(s).expect("checked order");
                    } else {
                        m.apply_transpose(s).expect("checked order");
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub r1: RotationChoice,
}

impl Variant {
    pub fn new(r1: RotationChoice) -> Self {
        Variant {
            name: r1.name().to_string(),
            r1,
        }
    }

    /// The four rotation variants compared throughout.
    pub fn standard() -> Vec<Variant> {
        [RotationChoice::GH, RotationChoice::GW, RotationChoice::LH, RotationChoice::GSR]
            .into_iter()
            .map(Variant::new)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantizer {
    Rtn,
    Gptq,
    /// Rotate and rotate back without quantizing.
    Disabled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonConfig {
    pub wspec: QuantSpec,
    pub quantizer: Quantizer,
    /// Weight type; decides whether R1 is the front or the rear rotation.
    pub role: Role,
    /// Block size of LH/GSR.
    pub rotation_group: usize,
    pub rotation_seed: u64,
    pub calibration_samples: usize,
}

impl ComparisonConfig {
    pub fn new(wspec: QuantSpec, quantizer: Quantizer, rotation_group: usize) -> Self {
        ComparisonConfig {
            wspec,
            quantizer,
            role: Role::Wq,
            rotation_group,
            rotation_seed: 0,
            calibration_samples: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    Mse,
    MaxAbs,
    Proxy,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Mse, Metric::MaxAbs, Metric::Proxy];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Mse => "mse",
            Metric::MaxAbs => "max_abs",
            Metric::Proxy => "proxy",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Metric::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Sort key for metric names; unknown names sort last.
    pub fn rank(name: &str) -> usize {
        Metric::ALL
            .iter()
            .position(|m| m.name() == name)
            .unwrap_or(Metric::ALL.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn summarize(values: &[f64]) -> Summary {
    Summary {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        median: median(values),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub name: String,
    /// SHA-256 of the corpus bytes and quantizer settings this variant consumed.
    pub input_hash: String,
    pub mse: Vec<f64>,
    pub max_abs: Vec<f64>,
    pub proxy: Vec<f64>,
}

impl VariantReport {
    pub fn values(&self, m: Metric) -> &[f64] {
        match m {
            Metric::Mse => &self.mse,
            Metric::MaxAbs => &self.max_abs,
            Metric::Proxy => &self.proxy,
        }
    }

    pub fn summary(&self, m: Metric) -> Summary {
        summarize(self.values(m))
    }
}

/// One-sided paired sign test of `a < b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: u64,
    pub losses: u64,
    /// `P(X >= wins)` for `X ~ Binomial(wins + losses, 1/2)`.
    pub p_value: f64,
}

impl SignTest {
    pub fn significant(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

pub fn sign_test(a: &[f64], b: &[f64]) -> SignTest {
    let wins = a.iter().zip(b).filter(|(x, y)| x < y).count() as u64;
    let losses = a.iter().zip(b).filter(|(x, y)| x > y).count() as u64;
    let n = wins + losses;
    let p_value = if n == 0 || wins == 0 {
        1.0
    } else {
        let binom = Binomial::new(0.5, n).expect("valid binomial");
        binom.sf(wins - 1)
    };
    SignTest {
        wins,
        losses,
        p_value,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: Value,
    pub seed: u64,
    pub corpus_hash: String,
    pub variants: Vec<VariantReport>,
}

impl ExperimentReport {
    pub fn variant(&self, name: &str) -> Option<&VariantReport> {
        self.variants.iter().find(|v| v.name == name)
    }

    /// Every variant consumed identical inputs.
    pub fn fairness_ok(&self) -> bool {
        self.variants
            .windows(2)
            .all(|w| w[0].input_hash == w[1].input_hash)
    }

    pub fn tensor_count(&self) -> usize {
        self.variants.first().map_or(0, |v| v.mse.len())
    }

    /// Sign test of `a < b` on `metric`; `None` if either variant is missing.
    pub fn compare(&self, a: &str, b: &str, metric: Metric) -> Option<SignTest> {
        Some(sign_test(
            self.variant(a)?.values(metric),
            self.variant(b)?.values(metric),
        ))
    }

    /// Variant × metric table of means and medians.
    pub fn text_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:>14} {:>14} {:>14} {:>14} {:>14} {:>14}",
            "R1", "mse mean", "mse median", "max mean", "max median", "proxy mean", "proxy median"
        );
        for v in &self.variants {
            let _ = write!(s, "{:<10}", v.name);
            for m in Metric::ALL {
                let sm = v.summary(m);
                let _ = write!(s, " {:>14.6e} {:>14.6e}", sm.mean, sm.median);
            }
            s.push('\n');
        }
        s
    }
}

fn quantize_roundtrip(
    input: &DMatrix<f64>,
    cfg: &ComparisonConfig,
    hessian: Option<&CalibrationHessian>,
) -> Result<DMatrix<f64>> {
    Ok(match cfg.quantizer {
        Quantizer::Disabled => input.clone(),
        Quantizer::Rtn => rtn_quantize(input, &cfg.wspec)?.dequantize(),
        Quantizer::Gptq => {
            let h = hessian.expect("gptq runs carry a hessian");
            gptq_quantize(input, h, &cfg.wspec)?.dequantize()
        }
    })
}

/// Rotates, quantizes, dequantizes and rotates back every corpus tensor for
/// every variant, measuring the error against the original tensor.
pub fn run_comparison(
    corpus: &Corpus,
    variants: &[Variant],
    cfg: &ComparisonConfig,
) -> Result<ExperimentReport> {
    let spec = corpus.spec;
    let entry = assignment_table()
        .into_iter()
        .find(|e| e.role == cfg.role)
        .expect("every role has a table entry");
    // R1 on the front mixes input channels; on the rear it mixes outputs.
    let r1_front = entry.front == Slot::R1;
    let r1_rear = entry.rear == Slot::R1;
    let dim = if r1_front { spec.cols } else { spec.rows };

    let calib = calibration_inputs(&spec, cfg.calibration_samples.max(1));
    let hessian = hessian_from_calibration(&calib)?;
    let settings = serde_json::to_vec(&json!({
        "wspec": cfg.wspec,
        "quantizer": cfg.quantizer,
    }))
    .expect("serializable settings");

    let mut reports = Vec::with_capacity(variants.len());
    for variant in variants {
        let op = RotationOp::from_choice(&variant.r1, dim, cfg.rotation_group, cfg.rotation_seed)?;
        let (front, rear) = match (r1_front, r1_rear) {
            (true, _) => (op, RotationOp::Identity),
            (false, true) => (RotationOp::Identity, op),
            (false, false) => (RotationOp::Identity, RotationOp::Identity),
        };
        let rotated_h = match (&front, cfg.quantizer) {
            (_, Quantizer::Gptq) => Some(hessian.rotated(&front.dense(spec.cols))),
            _ => None,
        };
        let mut hasher = Sha256::new();
        hasher.update(&settings);
        let mut rep = VariantReport {
            name: variant.name.clone(),
            input_hash: String::new(),
            mse: Vec::new(),
            max_abs: Vec::new(),
            proxy: Vec::new(),
        };
        for t in &corpus.tensors {
            if t.shape() != (spec.rows, spec.cols) {
                return Err(LabError::DimensionMismatch(format!(
                    "tensor is {:?}, corpus declares {}x{}",
                    t.shape(),
                    spec.rows,
                    spec.cols
                )));
            }
            hash_matrix(&mut hasher, t);
            // quantizer input W'ᵀ = Rrᵀ T F
            let mut x = t.clone();
            front.right(&mut x, false);
            rear.left_transpose(&mut x, false);
            let mut back = quantize_roundtrip(&x, cfg, rotated_h.as_ref())?;
            rear.left_transpose(&mut back, true);
            front.right(&mut back, true);
            rep.mse.push(quant_error(t, &back, ErrorMetric::Mse)?);
            rep.max_abs.push(quant_error(t, &back, ErrorMetric::MaxAbs)?);
            rep.proxy.push(quant_error(t, &back, ErrorMetric::ProxyHessian(&hessian.h))?);
        }
        rep.input_hash = hex::encode(hasher.finalize());
        reports.push(rep);
    }
    Ok(ExperimentReport {
        config: json!({
            "corpus": spec,
            "variants": variants.iter().map(|v| v.name.clone()).collect::<Vec<_>>(),
            "wspec": cfg.wspec,
            "quantizer": cfg.quantizer,
            "role": cfg.role,
            "rotation_group": cfg.rotation_group,
            "rotation_seed": cfg.rotation_seed,
            "calibration_samples": cfg.calibration_samples,
        }),
        seed: spec.seed,
        corpus_hash: corpus.digest(),
        variants: reports,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub group: usize,
    pub hadamard: f64,
    pub walsh: f64,
}

/// Per-group sequency variance of natural-order Hadamard vs Walsh rows.
pub fn sequency_variance_report(n: usize, group: usize) -> Result<Vec<VarianceRow>> {
    let h = sequency_profile(&hadamard_sylvester(n)?, group)?;
    let w = sequency_profile(&walsh(n)?, group)?;
    Ok(h
        .per_group_variance
        .iter()
        .zip(&w.per_group_variance)
        .enumerate()
        .map(|(g, (&hadamard, &walsh))| VarianceRow {
            group: g,
            hadamard,
            walsh,
        })
        .collect())
}

pub fn variance_table(rows: &[VarianceRow]) -> String {
    let mut s = format!("{:>6} {:>12} {:>12}\n", "group", "hadamard", "walsh");
    for r in rows {
        let _ = writeln!(s, "{:>6} {:>12.4} {:>12.4}", r.group, r.hadamard, r.walsh);
    }
    s
}

/// Quantization setting of one ablation column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Precision {
    pub weight_bits: Option<u8>,
    pub act_bits: Option<u8>,
}

impl Precision {
    pub fn label(&self) -> String {
        format!(
            "W{}A{}",
            self.weight_bits.unwrap_or(16),
            self.act_bits.unwrap_or(16)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub precision: Precision,
    pub mode: R4Mode,
    /// Output MSE against the unrotated full-precision block, per seed.
    pub output_mse: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeComparison {
    pub precision: Precision,
    pub median_global: f64,
    pub median_local: f64,
    /// Bootstrap 95% interval of the median paired difference `local − global`.
    pub ci: (f64, f64),
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: Value,
    pub cells: Vec<AblationCell>,
    pub comparisons: Vec<ModeComparison>,
}

impl AblationReport {
    pub fn cell(&self, precision: Precision, mode: R4Mode) -> Option<&AblationCell> {
        self.cells
            .iter()
            .find(|c| c.precision == precision && c.mode == mode)
    }

    pub fn comparison(&self, precision: Precision) -> Option<&ModeComparison> {
        self.comparisons.iter().find(|c| c.precision == precision)
    }

    pub fn text_table(&self) -> String {
        let mut s = format!(
            "{:<9} {:>16} {:>16} {:>30} {:>10}\n",
            "bits", "R4 global", "R4 local", "95% CI (local-global)", "verdict"
        );
        for c in &self.comparisons {
            let verdict = if !c.significant {
                "not significant"
            } else if c.ci.1 < 0.0 {
                "local better"
            } else {
                "global better"
            };
            let _ = writeln!(
                s,
                "{:<9} {:>16.6e} {:>16.6e} [{:>13.5e}, {:>13.5e}] {:>10}",
                c.precision.label(),
                c.median_global,
                c.median_local,
                c.ci.0,
                c.ci.1,
                verdict
            );
        }
        s
    }
}

/// Differences below this are rounding noise, never a verdict.
pub const SIGNIFICANCE_FLOOR: f64 = 1e-10;

/// Bootstrap percentile interval of the median of `diffs`.
pub fn bootstrap_median_ci(diffs: &[f64], resamples: usize, seed: u64) -> (f64, f64) {
    if diffs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = vec![0.0; diffs.len()];
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| {
            for b in buf.iter_mut() {
                *b = diffs[rng.random_range(0..diffs.len())];
            }
            median(&buf)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let at = |q: f64| stats[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    (at(0.025), at(0.975))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationConfig {
    pub block: ToyBlockConfig,
    pub seeds: usize,
    pub r1: RotationChoice,
    pub weight_bits: u8,
    pub act_bits: u8,
    pub bootstrap_resamples: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            block: ToyBlockConfig::default(),
            seeds: 50,
            r1: RotationChoice::GSR,
            weight_bits: 2,
            act_bits: 4,
            bootstrap_resamples: 2000,
        }
    }
}

/// Toy-block R4 global-vs-local ablation at full precision, weight-only and
/// weight+activation quantization.
pub fn r4_ablation(cfg: &AblationConfig) -> Result<AblationReport> {
    cfg.block.validate()?;
    let g = cfg.block.group;
    let wspec = QuantSpec::weight(cfg.weight_bits, g)?;
    let aspec = QuantSpec::activation(cfg.act_bits, g)?;
    let precisions = [
        Precision {
            weight_bits: None,
            act_bits: None,
        },
        Precision {
            weight_bits: Some(cfg.weight_bits),
            act_bits: None,
        },
        Precision {
            weight_bits: Some(cfg.weight_bits),
            act_bits: Some(cfg.act_bits),
        },
    ];
    let modes = [R4Mode::Global, R4Mode::Local];
    let mut cells: Vec<AblationCell> = precisions
        .iter()
        .flat_map(|&p| {
            modes.iter().map(move |&mode| AblationCell {
                precision: p,
                mode,
                output_mse: Vec::new(),
            })
        })
        .collect();

    for s in 0..cfg.seeds as u64 {
        let block_cfg = ToyBlockConfig {
            seed: cfg.block.seed.wrapping_add(s),
            ..cfg.block
        };
        let block = build_toy_block(block_cfg)?;
        let x = toy_input(&block_cfg, block_cfg.seed ^ 0x9e37_79b9);
        let reference = block.forward(&x, None)?;
        for cell in cells.iter_mut() {
            let assign = RotationAssignment {
                r1: cfg.r1.clone(),
                r2: RotationChoice::GH,
                r3: RotationChoice::GH,
                r4: RotationChoice::GH,
                r4_mode: cell.mode,
                seed: block_cfg.seed,
            };
            let fused = fuse_rotations(&block, &assign)?;
            let quant = BlockQuant {
                weight: cell.precision.weight_bits.map(|_| wspec.clone()),
                activation: cell.precision.act_bits.map(|_| aspec.clone()),
            };
            let y = fused.forward(&x, Some(&quant))?;
            cell.output_mse.push(quant_error(&reference, &y, ErrorMetric::Mse)?);
        }
    }

    let comparisons = precisions
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let global = &cells[2 * i].output_mse;
            let local = &cells[2 * i + 1].output_mse;
            let diffs: Vec<f64> = local.iter().zip(global).map(|(l, g)| l - g).collect();
            let ci = bootstrap_median_ci(&diffs, cfg.bootstrap_resamples.max(1), 0x5eed ^ i as u64);
            ModeComparison {
                precision: p,
                median_global: median(global),
                median_local: median(local),
                ci,
                significant: ci.0 > SIGNIFICANCE_FLOOR || ci.1 < -SIGNIFICANCE_FLOOR,
            }
        })
        .collect();

    Ok(AblationReport {
        config: json!({
            "block": cfg.block,
            "seeds": cfg.seeds,
            "r1": cfg.r1.name(),
            "weight_bits": cfg.weight_bits,
            "act_bits": cfg.act_bits,
            "bootstrap_resamples": cfg.bootstrap_resamples,
        }),
        cells,
        comparisons,
    })
}
