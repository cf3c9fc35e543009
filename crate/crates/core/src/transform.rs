//! Hadamard-family rotation matrices.
//!
//! Every matrix here is stored as a dense grid of `{-1, 0, +1}` signs plus a
//! single scale `1/sqrt(block_order)`. The two are only combined when a dense
//! floating-point matrix is requested or when the matrix is applied to data,
//! which keeps construction checks exact.
//!
//! Row order matters. The Sylvester construction produces rows in *natural*
//! order, where the number of sign flips per row (its sequency) is scrambled.
//! The Walsh matrix holds the same rows sorted by ascending sequency.

use nalgebra::DMatrix;
use rand_xoshiro::rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest order any constructor will accept.
pub const MAX_ORDER: usize = 1 << 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransformError {
    #[error("order {0} is not a power of two >= 2")]
    NonPowerOfTwo(usize),
    #[error("order {0} exceeds the maximum of {MAX_ORDER}")]
    OrderTooLarge(usize),
    #[error("row is empty")]
    EmptyRow,
    #[error("row contains entries other than +1/-1")]
    NotSignRow,
    #[error("expected an unrandomized natural-order Hadamard matrix")]
    NotHadamard,
    #[error("bit-reversal/Gray-code permutation disagrees with sequency sort at order {0}")]
    PermutationMismatch(usize),
    #[error("group size {group} does not divide order {order}")]
    GroupDoesNotDivide { order: usize, group: usize },
    #[error("vector length {got} does not match matrix order {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("sign pattern does not match the recorded construction")]
    InconsistentSigns,
}

pub type Result<T, E = TransformError> = std::result::Result<T, E>;

/// Block kind used inside a grouped block-diagonal rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockBase {
    Walsh,
    HadamardNatural,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MatrixKind {
    HadamardNatural,
    WalshSequency,
    GroupedBlockDiagonal { base: BlockBase, group_size: usize },
}

impl MatrixKind {
    /// Order of the Sylvester blocks making up the matrix.
    fn block_order(&self, order: usize) -> usize {
        match *self {
            MatrixKind::GroupedBlockDiagonal { group_size, .. } => group_size,
            _ => order,
        }
    }

    fn block_base(&self) -> BlockBase {
        match *self {
            MatrixKind::HadamardNatural => BlockBase::HadamardNatural,
            MatrixKind::WalshSequency => BlockBase::Walsh,
            MatrixKind::GroupedBlockDiagonal { base, .. } => base,
        }
    }
}

/// Record of one diagonal sign-flip pass (`M -> M * D`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignRandomization {
    pub seed: u64,
    /// `false`: one length-`block` draw repeated on every diagonal block.
    /// `true`: an independent draw for every column of the full matrix.
    pub per_block: bool,
}

/// Orthogonal `{-1,0,+1}`-patterned rotation with its construction record.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoMatrix {
    order: usize,
    signs: Vec<i8>,
    scale: f64,
    kind: MatrixKind,
    randomization: Vec<SignRandomization>,
    // D diagonal accumulated over every randomization pass.
    flips: Option<Vec<i8>>,
}

fn check_order(n: usize) -> Result<()> {
    if n < 2 || !n.is_power_of_two() {
        return Err(TransformError::NonPowerOfTwo(n));
    }
    if n > MAX_ORDER {
        return Err(TransformError::OrderTooLarge(n));
    }
    Ok(())
}

fn check_group(order: usize, group: usize) -> Result<()> {
    check_order(order)?;
    if group < 2 || !group.is_power_of_two() || group > order || order % group != 0 {
        return Err(TransformError::GroupDoesNotDivide { order, group });
    }
    Ok(())
}

fn bits_for(n: usize) -> u32 {
    n.trailing_zeros()
}

/// Reverses the low `bits` bits of `i`.
pub fn bit_reverse(i: usize, bits: u32) -> usize {
    if bits == 0 {
        return 0;
    }
    i.reverse_bits() >> (usize::BITS - bits)
}

pub fn binary_to_gray(i: usize) -> usize {
    i ^ (i >> 1)
}

pub fn gray_to_binary(mut g: usize) -> usize {
    let mut shift = 1;
    while shift < usize::BITS {
        g ^= g >> shift;
        shift <<= 1;
    }
    g
}

/// Sequency of row `i` of the natural-order Sylvester matrix of order `n`,
/// in closed form: `gray_to_binary(bit_reverse(i))`.
pub fn natural_row_sequency(i: usize, n: usize) -> usize {
    gray_to_binary(bit_reverse(i, bits_for(n)))
}

/// Walsh row `k` is natural row `walsh_permutation(n)[k]`.
///
/// Computed as bit-reversal of the Gray code of `k`.
pub fn walsh_permutation(n: usize) -> Vec<usize> {
    let bits = bits_for(n);
    (0..n).map(|k| bit_reverse(binary_to_gray(k), bits)).collect()
}

/// Sign entry of the unnormalised natural Sylvester matrix.
#[cfg(test)]
fn sylvester_sign(i: usize, j: usize) -> i8 {
    if (i & j).count_ones() % 2 == 0 {
        1
    } else {
        -1
    }
}

/// Number of adjacent sign changes along a `±1` row.
pub fn row_sequency(row: &[i8]) -> Result<usize> {
    if row.is_empty() {
        return Err(TransformError::EmptyRow);
    }
    if row.iter().any(|&s| s != 1 && s != -1) {
        return Err(TransformError::NotSignRow);
    }
    Ok(row.windows(2).filter(|w| w[0] != w[1]).count())
}

/// Sequency of a row that may carry structural zeros (block-diagonal rows);
/// only the non-zero support is inspected.
fn support_sequency(row: &[i8]) -> Result<usize> {
    let support: Vec<i8> = row.iter().copied().filter(|&s| s != 0).collect();
    row_sequency(&support)
}

/// Sylvester construction `H_{2n} = H_2 ⊗ H_n`, natural row order.
pub fn hadamard_sylvester(n: usize) -> Result<OrthoMatrix> {
    check_order(n)?;
    // Kronecker expansion, doubling the order each step.
    let mut signs = vec![1i8];
    let mut m = 1;
    while m < n {
        let next = 2 * m;
        let mut grown = vec![0i8; next * next];
        for (bi, bj, f) in [(0, 0, 1i8), (0, 1, 1), (1, 0, 1), (1, 1, -1)] {
            for i in 0..m {
                for j in 0..m {
                    grown[(bi * m + i) * next + bj * m + j] = f * signs[i * m + j];
                }
            }
        }
        signs = grown;
        m = next;
    }
    Ok(OrthoMatrix {
        order: n,
        signs,
        scale: 1.0 / (n as f64).sqrt(),
        kind: MatrixKind::HadamardNatural,
        randomization: Vec::new(),
        flips: None,
    })
}

/// Reorders the rows of a natural Hadamard matrix into ascending sequency.
///
/// The bit-reversal/Gray-code permutation is checked against a plain sort by
/// counted sequency; any disagreement is reported as
/// [`TransformError::PermutationMismatch`].
pub fn walsh_from_hadamard(h: &OrthoMatrix) -> Result<OrthoMatrix> {
    if h.kind != MatrixKind::HadamardNatural || !h.randomization.is_empty() {
        return Err(TransformError::NotHadamard);
    }
    let n = h.order;
    let perm = walsh_permutation(n);

    let mut by_count: Vec<(usize, usize)> = (0..n)
        .map(|i| row_sequency(h.row(i)).map(|s| (s, i)))
        .collect::<Result<_>>()?;
    by_count.sort_unstable();
    let sorted: Vec<usize> = by_count.iter().map(|&(_, i)| i).collect();
    let strictly_ascending = by_count.iter().enumerate().all(|(k, &(s, _))| s == k);
    if sorted != perm || !strictly_ascending {
        return Err(TransformError::PermutationMismatch(n));
    }

    let mut signs = Vec::with_capacity(n * n);
    for &src in &perm {
        signs.extend_from_slice(h.row(src));
    }
    Ok(OrthoMatrix {
        order: n,
        signs,
        scale: h.scale,
        kind: MatrixKind::WalshSequency,
        randomization: Vec::new(),
        flips: None,
    })
}

/// Natural-order Walsh matrix of order `n`.
pub fn walsh(n: usize) -> Result<OrthoMatrix> {
    walsh_from_hadamard(&hadamard_sylvester(n)?)
}

/// Sign diagonal drawn from splitmix64: the top bit of each output set means -1.
pub fn sign_diagonal(seed: u64, len: usize) -> Vec<i8> {
    let mut rng = SplitMix64::from_seed(seed.to_le_bytes());
    (0..len)
        .map(|_| if rng.next_u64() >> 63 == 1 { -1 } else { 1 })
        .collect()
}

/// Right-multiplies by a seeded diagonal `±1` matrix (`M -> M * D`).
///
/// `D` has one independent draw per column. See [`randomize_signs_with`] to
/// share one draw across the diagonal blocks of a grouped matrix.
pub fn randomize_signs(m: &OrthoMatrix, seed: u64) -> OrthoMatrix {
    randomize_signs_with(
        m,
        SignRandomization {
            seed,
            per_block: true,
        },
    )
}

pub fn randomize_signs_with(m: &OrthoMatrix, r: SignRandomization) -> OrthoMatrix {
    let n = m.order;
    let block = m.kind.block_order(n);
    let d = if r.per_block {
        sign_diagonal(r.seed, n)
    } else {
        sign_diagonal(r.seed, block).repeat(n / block)
    };
    apply_flips(m, &d, r)
}

fn apply_flips(m: &OrthoMatrix, d: &[i8], r: SignRandomization) -> OrthoMatrix {
    let n = m.order;
    let mut out = m.clone();
    for i in 0..n {
        for (s, &f) in out.signs[i * n..(i + 1) * n].iter_mut().zip(d) {
            *s *= f;
        }
    }
    let flips = match &m.flips {
        Some(prev) => prev.iter().zip(d).map(|(a, b)| a * b).collect(),
        None => d.to_vec(),
    };
    out.flips = Some(flips);
    out.randomization.push(r);
    out
}

/// Grouped block-diagonal rotation: `order / group` identical `group`-sized
/// blocks of the requested base on the diagonal, zeros elsewhere.
///
/// With `randomize = Some(r)` the blocks are sign-randomized; by default
/// (`r.per_block == false`) all blocks share one diagonal draw.
pub fn gsr(
    order: usize,
    group: usize,
    base: BlockBase,
    randomize: Option<SignRandomization>,
) -> Result<OrthoMatrix> {
    check_group(order, group)?;
    let block = match base {
        BlockBase::Walsh => walsh(group)?,
        BlockBase::HadamardNatural => hadamard_sylvester(group)?,
    };
    let mut signs = vec![0i8; order * order];
    for b in 0..order / group {
        let off = b * group;
        for i in 0..group {
            signs[(off + i) * order + off..(off + i) * order + off + group]
                .copy_from_slice(block.row(i));
        }
    }
    let m = OrthoMatrix {
        order,
        signs,
        scale: block.scale,
        kind: MatrixKind::GroupedBlockDiagonal {
            base,
            group_size: group,
        },
        randomization: Vec::new(),
        flips: None,
    };
    Ok(match randomize {
        Some(r) => randomize_signs_with(&m, r),
        None => m,
    })
}

/// Per-row sequencies and their per-group statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SequencyProfile {
    pub per_row_sequency: Vec<usize>,
    pub group_size: usize,
    pub per_group_mean: Vec<f64>,
    /// Population variance.
    pub per_group_variance: Vec<f64>,
}

impl SequencyProfile {
    pub fn mean_group_variance(&self) -> f64 {
        self.per_group_variance.iter().sum::<f64>() / self.per_group_variance.len() as f64
    }

    pub fn from_sequencies(per_row_sequency: Vec<usize>, group_size: usize) -> Result<Self> {
        let n = per_row_sequency.len();
        if group_size == 0 || n % group_size != 0 {
            return Err(TransformError::GroupDoesNotDivide {
                order: n,
                group: group_size,
            });
        }
        let (per_group_mean, per_group_variance) = per_row_sequency
            .chunks(group_size)
            .map(|g| {
                let mean = g.iter().sum::<usize>() as f64 / group_size as f64;
                let var = g
                    .iter()
                    .map(|&s| (s as f64 - mean).powi(2))
                    .sum::<f64>()
                    / group_size as f64;
                (mean, var)
            })
            .unzip();
        Ok(SequencyProfile {
            per_row_sequency,
            group_size,
            per_group_mean,
            per_group_variance,
        })
    }
}

/// Sequency statistics over consecutive row groups of size `group`.
///
/// Rows of block-diagonal matrices are measured over their non-zero support.
pub fn sequency_profile(m: &OrthoMatrix, group: usize) -> Result<SequencyProfile> {
    if group == 0 || m.order % group != 0 {
        return Err(TransformError::GroupDoesNotDivide {
            order: m.order,
            group,
        });
    }
    let seqs = (0..m.order)
        .map(|i| support_sequency(m.row(i)))
        .collect::<Result<Vec<_>>>()?;
    SequencyProfile::from_sequencies(seqs, group)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Ordering {
    Natural,
    Sequency,
}

/// Unnormalised in-place butterfly; natural (Sylvester) ordering.
fn butterfly(x: &mut [f64]) {
    let n = x.len();
    let mut h = 1;
    while h < n {
        for start in (0..n).step_by(2 * h) {
            for i in start..start + h {
                let (a, b) = (x[i], x[i + h]);
                x[i] = a + b;
                x[i + h] = a - b;
            }
        }
        h *= 2;
    }
}

/// Fast orthonormal Walsh–Hadamard transform, `O(n log n)`.
///
/// `Natural` returns `H x`, `Sequency` returns `W x` with `W` the Walsh
/// (sequency-ordered) matrix; both scaled by `1/sqrt(n)`.
pub fn fwht(x: &[f64], ordering: Ordering) -> Result<Vec<f64>> {
    check_order(x.len())?;
    let n = x.len();
    let mut y = x.to_vec();
    butterfly(&mut y);
    let s = 1.0 / (n as f64).sqrt();
    y.iter_mut().for_each(|v| *v *= s);
    Ok(match ordering {
        Ordering::Natural => y,
        Ordering::Sequency => walsh_permutation(n).into_iter().map(|p| y[p]).collect(),
    })
}

impl OrthoMatrix {
    /// Rebuilds a matrix from stored signs and its construction record,
    /// rejecting any sign pattern the record does not reproduce.
    pub fn from_parts(
        kind: MatrixKind,
        signs: Vec<i8>,
        randomization: Vec<SignRandomization>,
    ) -> Result<Self> {
        let n2 = signs.len();
        let n = (n2 as f64).sqrt().round() as usize;
        if n * n != n2 {
            return Err(TransformError::InconsistentSigns);
        }
        let mut m = match kind {
            MatrixKind::HadamardNatural => hadamard_sylvester(n)?,
            MatrixKind::WalshSequency => walsh(n)?,
            MatrixKind::GroupedBlockDiagonal { base, group_size } => {
                gsr(n, group_size, base, None)?
            }
        };
        for r in randomization {
            m = randomize_signs_with(&m, r);
        }
        if m.signs != signs {
            return Err(TransformError::InconsistentSigns);
        }
        Ok(m)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn kind(&self) -> MatrixKind {
        self.kind
    }

    pub fn randomization(&self) -> &[SignRandomization] {
        &self.randomization
    }

    /// Order of the diagonal blocks (`order` itself for full matrices).
    pub fn block_order(&self) -> usize {
        self.kind.block_order(self.order)
    }

    pub fn row(&self, i: usize) -> &[i8] {
        &self.signs[i * self.order..(i + 1) * self.order]
    }

    pub fn sign(&self, i: usize, j: usize) -> i8 {
        self.signs[i * self.order + j]
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.order;
        DMatrix::from_fn(n, n, |i, j| self.scale * f64::from(self.signs[i * n + j]))
    }

    /// `max |(s·S)(s·S)ᵀ − I|` with `S` the stored signs.
    ///
    /// Row inner products are exact integer counts over packed sign bits;
    /// only the final scaling happens in `f64`.
    pub fn orthogonality_residual(&self) -> f64 {
        let n = self.order;
        let words = n.div_ceil(64);
        let mut nonzero = vec![0u64; n * words];
        let mut negative = vec![0u64; n * words];
        let mut span = vec![(0usize, 0usize); n];
        for i in 0..n {
            let (mut lo, mut hi) = (words, 0);
            for (j, &s) in self.row(i).iter().enumerate() {
                if s != 0 {
                    nonzero[i * words + j / 64] |= 1 << (j % 64);
                    lo = lo.min(j / 64);
                    hi = hi.max(j / 64 + 1);
                }
                if s < 0 {
                    negative[i * words + j / 64] |= 1 << (j % 64);
                }
            }
            span[i] = (lo, hi.max(lo));
        }
        let s2 = self.scale * self.scale;
        let mut worst = 0.0f64;
        for i in 0..n {
            let (mi, ni) = (&nonzero[i * words..][..words], &negative[i * words..][..words]);
            for j in i..n {
                let lo = span[i].0.max(span[j].0);
                let hi = span[i].1.min(span[j].1);
                let mut dot = 0i64;
                if lo < hi {
                    let (mj, nj) = (&nonzero[j * words..][..words], &negative[j * words..][..words]);
                    for w in lo..hi {
                        let both = mi[w] & mj[w];
                        let differ = both & (ni[w] ^ nj[w]);
                        dot += i64::from(both.count_ones()) - 2 * i64::from(differ.count_ones());
                    }
                }
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((s2 * dot as f64 - target).abs());
            }
        }
        worst
    }

    /// Checks the block-diagonal layout: every entry off the diagonal blocks
    /// is zero and every block equals the first one.
    pub fn blocks_identical(&self) -> bool {
        let n = self.order;
        let g = self.block_order();
        for i in 0..n {
            let bi = i / g;
            for j in 0..n {
                let s = self.signs[i * n + j];
                if j / g != bi {
                    if s != 0 {
                        return false;
                    }
                } else if s != self.signs[(i % g) * n + j % g] {
                    return false;
                }
            }
        }
        true
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.order {
            return Err(TransformError::LengthMismatch {
                expected: self.order,
                got: len,
            });
        }
        Ok(())
    }

    /// In-place `x <- R x` through the fast transform.
    pub fn apply(&self, x: &mut [f64]) -> Result<()> {
        self.check_len(x.len())?;
        if let Some(d) = &self.flips {
            x.iter_mut().zip(d).for_each(|(v, &f)| *v *= f64::from(f));
        }
        let g = self.block_order();
        let walsh = self.kind.block_base() == BlockBase::Walsh;
        let perm = walsh.then(|| walsh_permutation(g));
        let mut buf = vec![0.0; g];
        for block in x.chunks_mut(g) {
            butterfly(block);
            if let Some(p) = &perm {
                for (k, &src) in p.iter().enumerate() {
                    buf[k] = block[src];
                }
                block.copy_from_slice(&buf);
            }
            block.iter_mut().for_each(|v| *v *= self.scale);
        }
        Ok(())
    }

    /// In-place `x <- Rᵀ x` through the fast transform.
    pub fn apply_transpose(&self, x: &mut [f64]) -> Result<()> {
        self.check_len(x.len())?;
        let g = self.block_order();
        let walsh = self.kind.block_base() == BlockBase::Walsh;
        let perm = walsh.then(|| walsh_permutation(g));
        let mut buf = vec![0.0; g];
        for block in x.chunks_mut(g) {
            if let Some(p) = &perm {
                for (k, &dst) in p.iter().enumerate() {
                    buf[dst] = block[k];
                }
                block.copy_from_slice(&buf);
            }
            butterfly(block);
            block.iter_mut().for_each(|v| *v *= self.scale);
        }
        if let Some(d) = &self.flips {
            x.iter_mut().zip(d).for_each(|(v, &f)| *v *= f64::from(f));
        }
        Ok(())
    }
}
