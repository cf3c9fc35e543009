//! Rotation fusion into a LLaMA-style block.
//!
//! Weights use the `(input, output)` layout, so a linear layer is `y = x W`
//! and a rotated weight is `W' = R_fᵀ W R_r`. The four slots:
//!
//! * `R1` rotates the residual stream (fused into every weight touching it),
//! * `R2` rotates value/output per attention head,
//! * `R3` rotates query and key after RoPE (online),
//! * `R4` rotates the down-projection input (online, fused into `W_down`).

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, RealField};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quant::{rtn_quantize, QuantError, QuantSpec};
use crate::transform::{
    gsr, hadamard_sylvester, randomize_signs, walsh, BlockBase, OrthoMatrix, SignRandomization,
    TransformError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RotationError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("external rotation is not orthogonal (residual {0:e})")]
    ExternalMatrixNotOrthogonal(f64),
    #[error("invalid block config: {0}")]
    InvalidConfig(String),
    #[error("block already carries fused rotations")]
    AlreadyFused,
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

pub type Result<T, E = RotationError> = std::result::Result<T, E>;

/// Residual tolerance for externally supplied rotations.
pub const EXTERNAL_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Wq,
    Wk,
    Wv,
    Wo,
    Wup,
    Wgate,
    Wdown,
}

impl Role {
    pub const ALL: [Role; 7] = [
        Role::Wq,
        Role::Wk,
        Role::Wv,
        Role::Wo,
        Role::Wup,
        Role::Wgate,
        Role::Wdown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Role::Wq => "wq",
            Role::Wk => "wk",
            Role::Wv => "wv",
            Role::Wo => "wo",
            Role::Wup => "wup",
            Role::Wgate => "wgate",
            Role::Wdown => "wdown",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.to_ascii_lowercase();
        Role::ALL.into_iter().find(|r| r.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Slot {
    Identity,
    R1,
    R2,
    R4,
}

/// Front/rear rotation pair for one weight type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightRole {
    pub role: Role,
    pub front: Slot,
    pub rear: Slot,
}

pub fn assignment_table() -> [WeightRole; 7] {
    use Slot::*;
    let r = |role, front, rear| WeightRole { role, front, rear };
    [
        r(Role::Wq, R1, Identity),
        r(Role::Wk, R1, Identity),
        r(Role::Wv, R1, R2),
        r(Role::Wo, R2, R1),
        r(Role::Wup, R1, Identity),
        r(Role::Wgate, R1, Identity),
        r(Role::Wdown, R4, R1),
    ]
}

/// Max absolute entry of `R Rᵀ − I`.
pub fn dense_orthogonality_residual(r: &DMatrix<f64>) -> f64 {
    let n = r.nrows();
    (r * r.transpose() - DMatrix::<f64>::identity(n, n)).amax()
}

fn require_square(m: &DMatrix<f64>, n: usize, what: &str) -> Result<()> {
    if m.shape() != (n, n) {
        return Err(RotationError::DimensionMismatch(format!(
            "{what}: expected {n}x{n}, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// `W' = R_fᵀ W R_r`; `None` stands for the identity on that side.
pub fn rotate_weight(
    w: &DMatrix<f64>,
    front: Option<&DMatrix<f64>>,
    rear: Option<&DMatrix<f64>>,
) -> Result<DMatrix<f64>> {
    if let Some(f) = front {
        require_square(f, w.nrows(), "front rotation")?;
    }
    if let Some(r) = rear {
        require_square(r, w.ncols(), "rear rotation")?;
    }
    let left = match front {
        Some(f) => f.tr_mul(w),
        None => w.clone(),
    };
    Ok(match rear {
        Some(r) => left * r,
        None => left,
    })
}

/// `W'[i, j]` through the nested inner products
/// `⟨[⟨R_fᵀ[i,:], W[:,h]⟩]_h, R_r[:, j]⟩`.
pub fn rotated_entry_expanded(
    w: &DMatrix<f64>,
    front: &DMatrix<f64>,
    rear: &DMatrix<f64>,
    i: usize,
    j: usize,
) -> f64 {
    let inner: Vec<f64> = (0..w.ncols())
        .map(|h| (0..w.nrows()).map(|c| front[(c, i)] * w[(c, h)]).sum())
        .collect();
    inner.iter().enumerate().map(|(h, v)| v * rear[(h, j)]).sum()
}

/// `copies` copies of `block` along the diagonal.
pub fn block_diag(block: &DMatrix<f64>, copies: usize) -> DMatrix<f64> {
    let g = block.nrows();
    let mut out = DMatrix::zeros(g * copies, g * copies);
    for b in 0..copies {
        out.view_mut((b * g, b * g), (g, g)).copy_from(block);
    }
    out
}

/// Which columns of `R_f` / `R_r` to overwrite with noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Perturbation {
    FrontOutsideGroup { group_index: usize, group: usize },
    FrontInsideGroup { group_index: usize, group: usize },
    RearColumn(usize),
}

/// `|W'_perturbed − W'|` elementwise, for `W' = R_fᵀ W R_r`.
pub fn perturbation_delta(
    w: &DMatrix<f64>,
    front: &DMatrix<f64>,
    rear: &DMatrix<f64>,
    target: Perturbation,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let base = rotate_weight(w, Some(front), Some(rear))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let (mut f, mut r) = (front.clone(), rear.clone());
    let group_bounds = |group_index: usize, group: usize| -> Result<(usize, usize)> {
        if group == 0 || w.nrows() % group != 0 || (group_index + 1) * group > w.nrows() {
            return Err(RotationError::DimensionMismatch(format!(
                "group {group_index} of size {group} does not fit {} rows",
                w.nrows()
            )));
        }
        Ok((group_index * group, (group_index + 1) * group))
    };
    match target {
        Perturbation::FrontOutsideGroup { group_index, group } => {
            let (lo, hi) = group_bounds(group_index, group)?;
            for c in (0..f.ncols()).filter(|c| !(lo..hi).contains(c)) {
                f.column_mut(c).iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            }
        }
        Perturbation::FrontInsideGroup { group_index, group } => {
            let (lo, hi) = group_bounds(group_index, group)?;
            for c in lo..hi {
                f.column_mut(c).iter_mut().for_each(|v| *v += normal.sample(&mut rng));
            }
        }
        Perturbation::RearColumn(j) => {
            if j >= r.ncols() {
                return Err(RotationError::DimensionMismatch(format!("rear column {j}")));
            }
            r.column_mut(j).iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        }
    }
    let moved = rotate_weight(w, Some(&f), Some(&r))?;
    Ok((moved - base).abs())
}

/// True when overwriting every `R_f` column outside group `group_index`
/// leaves rows `group_index*group .. (group_index+1)*group` of `W'` unchanged
/// (within 1e-12).
pub fn observation1_locality(
    w: &DMatrix<f64>,
    front: &DMatrix<f64>,
    rear: &DMatrix<f64>,
    group_index: usize,
    group: usize,
    seed: u64,
) -> Result<bool> {
    let delta = perturbation_delta(
        w,
        front,
        rear,
        Perturbation::FrontOutsideGroup { group_index, group },
        seed,
    )?;
    let rows = delta.rows(group_index * group, group);
    Ok(rows.amax() <= 1e-12)
}

/// One rotation slot's construction recipe.
#[derive(Clone, PartialEq)]
pub enum RotationChoice {
    Identity,
    /// Randomized global Hadamard.
    GH,
    /// Global Walsh.
    GW,
    /// Randomized block-diagonal Hadamard (one shared sign draw).
    LH,
    /// Block-diagonal Walsh.
    GSR,
    External(Arc<DMatrix<f64>>),
}

impl fmt::Debug for RotationChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl RotationChoice {
    pub fn name(&self) -> &'static str {
        match self {
            RotationChoice::Identity => "identity",
            RotationChoice::GH => "gh",
            RotationChoice::GW => "gw",
            RotationChoice::LH => "lh",
            RotationChoice::GSR => "gsr",
            RotationChoice::External(_) => "external",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.to_ascii_lowercase().as_str() {
            "identity" | "i" | "none" => RotationChoice::Identity,
            "gh" => RotationChoice::GH,
            "gw" => RotationChoice::GW,
            "lh" => RotationChoice::LH,
            "gsr" => RotationChoice::GSR,
            _ => return None,
        })
    }

    /// Global kinds become their block-diagonal counterpart.
    pub fn localized(&self) -> Self {
        match self {
            RotationChoice::GH => RotationChoice::LH,
            RotationChoice::GW => RotationChoice::GSR,
            other => other.clone(),
        }
    }

    /// Structured construction; `None` for identity and external matrices.
    pub fn build_structured(&self, n: usize, group: usize, seed: u64) -> Result<Option<OrthoMatrix>> {
        Ok(match self {
            RotationChoice::Identity | RotationChoice::External(_) => None,
            RotationChoice::GH => Some(randomize_signs(&hadamard_sylvester(n)?, seed)),
            RotationChoice::GW => Some(walsh(n)?),
            RotationChoice::LH => Some(gsr(
                n,
                group.min(n),
                BlockBase::HadamardNatural,
                Some(SignRandomization {
                    seed,
                    per_block: false,
                }),
            )?),
            RotationChoice::GSR => Some(gsr(n, group.min(n), BlockBase::Walsh, None)?),
        })
    }

    /// Dense `n × n` matrix, or `None` for the identity.
    pub fn build(&self, n: usize, group: usize, seed: u64) -> Result<Option<DMatrix<f64>>> {
        if let RotationChoice::External(m) = self {
            require_square(m, n, "external rotation")?;
            let res = dense_orthogonality_residual(m);
            if !(res <= EXTERNAL_TOLERANCE) {
                return Err(RotationError::ExternalMatrixNotOrthogonal(res));
            }
            return Ok(Some((**m).clone()));
        }
        Ok(self.build_structured(n, group, seed)?.map(|m| m.to_dense()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum R4Mode {
    Global,
    Local,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RotationAssignment {
    pub r1: RotationChoice,
    pub r2: RotationChoice,
    pub r3: RotationChoice,
    pub r4: RotationChoice,
    pub r4_mode: R4Mode,
    /// Sign seeds for randomized slots are `seed`, `seed+1`, `seed+2`, `seed+3`.
    pub seed: u64,
}

impl RotationAssignment {
    pub fn identity() -> Self {
        Self::only_r1(RotationChoice::Identity)
    }

    pub fn only_r1(r1: RotationChoice) -> Self {
        RotationAssignment {
            r1,
            r2: RotationChoice::Identity,
            r3: RotationChoice::Identity,
            r4: RotationChoice::Identity,
            r4_mode: R4Mode::Global,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyBlockConfig {
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub group: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for ToyBlockConfig {
    fn default() -> Self {
        ToyBlockConfig {
            hidden: 64,
            heads: 4,
            ffn: 128,
            group: 16,
            seq_len: 8,
            seed: 0,
        }
    }
}

impl ToyBlockConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RotationError::InvalidConfig(m));
        let pow2 = |v: usize| v >= 2 && v.is_power_of_two();
        if !pow2(self.hidden) || !pow2(self.ffn) {
            return bad(format!("hidden {} and ffn {} must be powers of two >= 2", self.hidden, self.ffn));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 || self.head_dim() < 2 {
            return bad(format!("{} heads do not split hidden {}", self.heads, self.hidden));
        }
        if self.head_dim() % 2 != 0 {
            return bad("head dim must be even for RoPE".into());
        }
        if !pow2(self.group) || self.hidden % self.group != 0 || self.ffn % self.group != 0 {
            return bad(format!("group {} must be a power of two dividing hidden and ffn", self.group));
        }
        if self.seq_len < 1 {
            return bad("seq_len must be positive".into());
        }
        Ok(())
    }
}

/// Quantization applied inside [`ToyBlock::forward`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BlockQuant {
    pub weight: Option<QuantSpec>,
    pub activation: Option<QuantSpec>,
}

/// One multiplication pass recorded while fusing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionRecord {
    pub role: Role,
    pub front: Slot,
    pub rear: Slot,
    /// Non-identity matrix products actually performed.
    pub multiplications: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyWeights {
    pub wq: DMatrix<f64>,
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
    pub wo: DMatrix<f64>,
    pub wup: DMatrix<f64>,
    pub wgate: DMatrix<f64>,
    pub wdown: DMatrix<f64>,
}

impl ToyWeights {
    pub fn get(&self, role: Role) -> &DMatrix<f64> {
        match role {
            Role::Wq => &self.wq,
            Role::Wk => &self.wk,
            Role::Wv => &self.wv,
            Role::Wo => &self.wo,
            Role::Wup => &self.wup,
            Role::Wgate => &self.wgate,
            Role::Wdown => &self.wdown,
        }
    }

    fn get_mut(&mut self, role: Role) -> &mut DMatrix<f64> {
        match role {
            Role::Wq => &mut self.wq,
            Role::Wk => &mut self.wk,
            Role::Wv => &mut self.wv,
            Role::Wo => &mut self.wo,
            Role::Wup => &mut self.wup,
            Role::Wgate => &mut self.wgate,
            Role::Wdown => &mut self.wdown,
        }
    }
}

/// Single attention + SwiGLU block with unit RMSNorm scales.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBlock {
    cfg: ToyBlockConfig,
    weights: ToyWeights,
    /// Residual-stream rotation applied at entry and undone at exit; stands
    /// in for the embedding and head fusion of a full model.
    r1: Option<DMatrix<f64>>,
    /// Online post-RoPE rotation of q and k.
    r3: Option<DMatrix<f64>>,
    /// Online rotation of the down-projection input.
    r4: Option<DMatrix<f64>>,
    fusion_log: Vec<FusionRecord>,
}

const RMS_EPS: f64 = 1e-6;
const ROPE_BASE: f64 = 10000.0;

/// Seeded weight with a smooth component along the input axis.
fn toy_weight(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let std = 1.0 / (rows as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let mut w = DMatrix::from_fn(rows, cols, |_, _| normal.sample(rng));
    // a few low-frequency cosines per output column
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    for c in 0..cols {
        for k in 1..=3 {
            let amp = 0.5 * std * unit.sample(rng) / k as f64;
            for r in 0..rows {
                let phase = std::f64::consts::PI * k as f64 * (r as f64 + 0.5) / rows as f64;
                w[(r, c)] += amp * phase.cos();
            }
        }
    }
    w
}

pub fn build_toy_block(cfg: ToyBlockConfig) -> Result<ToyBlock> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (c, h) = (cfg.hidden, cfg.ffn);
    let weights = ToyWeights {
        wq: toy_weight(&mut rng, c, c),
        wk: toy_weight(&mut rng, c, c),
        wv: toy_weight(&mut rng, c, c),
        wo: toy_weight(&mut rng, c, c),
        wup: toy_weight(&mut rng, c, h),
        wgate: toy_weight(&mut rng, c, h),
        wdown: toy_weight(&mut rng, h, c),
    };
    Ok(ToyBlock {
        cfg,
        weights,
        r1: None,
        r3: None,
        r4: None,
        fusion_log: Vec::new(),
    })
}

/// Seeded `(seq_len, hidden)` input with a handful of large channels.
pub fn toy_input(cfg: &ToyBlockConfig, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut x = DMatrix::from_fn(cfg.seq_len, cfg.hidden, |_, _| normal.sample(&mut rng));
    for &ch in &[1usize, cfg.hidden / 2 + 3] {
        if ch < cfg.hidden {
            x.column_mut(ch).iter_mut().for_each(|v| *v *= 8.0);
        }
    }
    x
}

fn to_t<T: RealField + Copy>(m: &DMatrix<f64>) -> DMatrix<T> {
    m.map(nalgebra::convert::<f64, T>)
}

struct Prepared<T: RealField + Copy> {
    w: [DMatrix<T>; 7],
    r1: Option<DMatrix<T>>,
    r3: Option<DMatrix<T>>,
    r4: Option<DMatrix<T>>,
}

fn rms_norm<T: RealField + Copy>(x: &DMatrix<T>) -> DMatrix<T> {
    let mut out = x.clone();
    let eps: T = nalgebra::convert(RMS_EPS);
    let n: T = nalgebra::convert(x.ncols() as f64);
    for mut row in out.row_iter_mut() {
        let ms = row.iter().fold(T::zero(), |a, &v| a + v * v) / n;
        let inv = T::one() / (ms + eps).sqrt();
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

/// Half-split rotary embedding on a `(seq, head_dim)` slice.
fn rope<T: RealField + Copy>(x: &mut DMatrix<T>) {
    let hd = x.ncols();
    let half = hd / 2;
    for pos in 0..x.nrows() {
        for i in 0..half {
            let freq = ROPE_BASE.powf(-2.0 * i as f64 / hd as f64);
            let angle = pos as f64 * freq;
            let (s, c): (T, T) = (nalgebra::convert(angle.sin()), nalgebra::convert(angle.cos()));
            let (a, b) = (x[(pos, i)], x[(pos, i + half)]);
            x[(pos, i)] = a * c - b * s;
            x[(pos, i + half)] = a * s + b * c;
        }
    }
}

fn silu<T: RealField + Copy>(v: T) -> T {
    v / (T::one() + (-v).exp())
}

fn quantize_activation<T: RealField + Copy>(a: &DMatrix<T>, spec: &QuantSpec) -> Result<DMatrix<T>> {
    let wide = a.map(|v| v.to_subset().expect("finite activation"));
    Ok(to_t(&rtn_quantize(&wide, spec)?.dequantize()))
}

impl ToyBlock {
    pub fn config(&self) -> &ToyBlockConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &ToyWeights {
        &self.weights
    }

    pub fn fusion_log(&self) -> &[FusionRecord] {
        &self.fusion_log
    }

    /// Online rotations currently active: `(r1 at the boundary, r3, r4)`.
    pub fn online_rotations(&self) -> (bool, bool, bool) {
        (self.r1.is_some(), self.r3.is_some(), self.r4.is_some())
    }

    /// Weights replaced by their quantize-dequantize image (RTN, groups along
    /// input channels).
    pub fn with_quantized_weights(&self, spec: &QuantSpec) -> Result<ToyBlock> {
        let mut out = self.clone();
        for role in Role::ALL {
            let w = self.weights.get(role);
            let q = rtn_quantize(&w.transpose(), spec)?;
            *out.weights.get_mut(role) = q.dequantize().transpose();
        }
        Ok(out)
    }

    fn prepare<T: RealField + Copy>(&self) -> Prepared<T> {
        let w = &self.weights;
        Prepared {
            w: [&w.wq, &w.wk, &w.wv, &w.wo, &w.wup, &w.wgate, &w.wdown].map(to_t),
            r1: self.r1.as_ref().map(to_t),
            r3: self.r3.as_ref().map(to_t),
            r4: self.r4.as_ref().map(to_t),
        }
    }

    fn check_input(&self, rows: usize, cols: usize) -> Result<()> {
        if cols != self.cfg.hidden || rows == 0 {
            return Err(RotationError::DimensionMismatch(format!(
                "input is {rows}x{cols}, block hidden size is {}",
                self.cfg.hidden
            )));
        }
        Ok(())
    }

    /// Forward pass in precision `T`, optionally quantizing weights (RTN) and
    /// the down-projection input.
    pub fn forward_in<T: RealField + Copy>(
        &self,
        x: &DMatrix<T>,
        quant: Option<&BlockQuant>,
    ) -> Result<DMatrix<T>> {
        self.check_input(x.nrows(), x.ncols())?;
        let quantized;
        let block = match quant.and_then(|q| q.weight.as_ref()) {
            Some(spec) => {
                quantized = self.with_quantized_weights(spec)?;
                &quantized
            }
            None => self,
        };
        let act = quant.and_then(|q| q.activation.as_ref());
        block.forward_prepared(&block.prepare::<T>(), x, act)
    }

    pub fn forward(&self, x: &DMatrix<f64>, quant: Option<&BlockQuant>) -> Result<DMatrix<f64>> {
        self.forward_in(x, quant)
    }

    fn forward_prepared<T: RealField + Copy>(
        &self,
        p: &Prepared<T>,
        x: &DMatrix<T>,
        act: Option<&QuantSpec>,
    ) -> Result<DMatrix<T>> {
        let [wq, wk, wv, wo, wup, wgate, wdown] = &p.w;
        let (seq, hd) = (x.nrows(), self.cfg.head_dim());
        let x = match &p.r1 {
            Some(r) => x * r,
            None => x.clone(),
        };

        let h = rms_norm(&x);
        let (q, k, v) = (&h * wq, &h * wk, &h * wv);
        let scale: T = nalgebra::convert(1.0 / (hd as f64).sqrt());
        let mut attn = DMatrix::<T>::zeros(seq, self.cfg.hidden);
        for head in 0..self.cfg.heads {
            let cols = head * hd;
            let mut qh = q.columns(cols, hd).into_owned();
            let mut kh = k.columns(cols, hd).into_owned();
            rope(&mut qh);
            rope(&mut kh);
            if let Some(r3) = &p.r3 {
                qh = qh * r3;
                kh = kh * r3;
            }
            let mut scores = &qh * kh.transpose() * scale;
            for i in 0..seq {
                let row_max = (0..=i).fold(scores[(i, 0)], |m, j| m.max(scores[(i, j)]));
                let mut total = T::zero();
                for j in 0..seq {
                    let e = if j <= i { (scores[(i, j)] - row_max).exp() } else { T::zero() };
                    scores[(i, j)] = e;
                    total += e;
                }
                for j in 0..seq {
                    scores[(i, j)] /= total;
                }
            }
            attn.columns_mut(cols, hd)
                .copy_from(&(&scores * v.columns(cols, hd)));
        }
        let x1 = &x + attn * wo;

        let h2 = rms_norm(&x1);
        let up = &h2 * wup;
        let gate = &h2 * wgate;
        let mut a = gate.zip_map(&up, |g, u| silu(g) * u);
        if let Some(r4) = &p.r4 {
            a = a * r4;
        }
        if let Some(spec) = act {
            a = quantize_activation(&a, spec)?;
        }
        let out = x1 + a * wdown;
        Ok(match &p.r1 {
            Some(r) => out * r.transpose(),
            None => out,
        })
    }
}

/// Dense matrices for every slot of `assign`, sized for `cfg`.
pub struct SlotMatrices {
    pub r1: Option<DMatrix<f64>>,
    pub r2: Option<DMatrix<f64>>,
    pub r3: Option<DMatrix<f64>>,
    pub r4: Option<DMatrix<f64>>,
}

pub fn slot_matrices(cfg: &ToyBlockConfig, assign: &RotationAssignment) -> Result<SlotMatrices> {
    let hd = cfg.head_dim();
    let g = cfg.group;
    let r4_choice = match assign.r4_mode {
        R4Mode::Global => assign.r4.clone(),
        R4Mode::Local => assign.r4.localized(),
    };
    Ok(SlotMatrices {
        r1: assign.r1.build(cfg.hidden, g, assign.seed)?,
        r2: assign.r2.build(hd, g.min(hd), assign.seed.wrapping_add(1))?,
        r3: assign.r3.build(hd, g.min(hd), assign.seed.wrapping_add(2))?,
        r4: r4_choice.build(cfg.ffn, g, assign.seed.wrapping_add(3))?,
    })
}

/// Folds the assignment's rotations into the block's weights following
/// [`assignment_table`]; `R3` and `R4` stay active online.
pub fn fuse_rotations(block: &ToyBlock, assign: &RotationAssignment) -> Result<ToyBlock> {
    if !block.fusion_log.is_empty() || block.r1.is_some() || block.r3.is_some() || block.r4.is_some()
    {
        return Err(RotationError::AlreadyFused);
    }
    let cfg = block.cfg;
    let slots = slot_matrices(&cfg, assign)?;
    let r2_full = slots.r2.as_ref().map(|r| block_diag(r, cfg.heads));
    let pick = |slot: Slot| -> Option<&DMatrix<f64>> {
        match slot {
            Slot::Identity => None,
            Slot::R1 => slots.r1.as_ref(),
            Slot::R2 => r2_full.as_ref(),
            Slot::R4 => slots.r4.as_ref(),
        }
    };

    let mut out = block.clone();
    for entry in assignment_table() {
        let (front, rear) = (pick(entry.front), pick(entry.rear));
        let w = block.weights.get(entry.role);
        *out.weights.get_mut(entry.role) = rotate_weight(w, front, rear)?;
        out.fusion_log.push(FusionRecord {
            role: entry.role,
            front: entry.front,
            rear: entry.rear,
            multiplications: usize::from(front.is_some()) + usize::from(rear.is_some()),
        });
    }
    out.r1 = slots.r1;
    out.r3 = slots.r3;
    out.r4 = slots.r4;
    Ok(out)
}
