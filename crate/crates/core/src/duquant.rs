//! Invertible smoothing + rotation + permutation reparameterization of a
//! linear layer.
//!
//! For `Y = X W` the layer is rewritten as
//!
//! ```text
//! Y = [(X Λ) R1 P R2] [R2^T P^T R1^T (Λ^-1 W)]
//! ```
//!
//! where `Λ` is a positive diagonal smoothing matrix, `R1`, `R2` are
//! block-diagonal orthogonal matrices and `P` is a zigzag channel
//! permutation. The left factor is applied to activations before
//! integerization, the right factor is folded into the weights.

use serde::{Deserialize, Serialize};

use crate::error::{dims, invalid, Result};
use crate::numerics::{matmul, random_orthogonal, zigzag_permutation, Matrix, Permutation};
use crate::scalar::Scalar;

/// Floor applied to both maxima before exponentiation in the smoothing rule.
pub const SMOOTHING_FLOOR: f64 = 1e-6;
pub const DEFAULT_BLOCK_SIZE: usize = 64;
pub const DEFAULT_SMOOTHING_ALPHA: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FactorizationMode {
    /// Smoothing, both rotations and the permutation.
    #[default]
    Full,
    /// Smoothing only: rotations and permutation are identities.
    SmoothOnly,
    /// Everything is an identity. Debug aid.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorizationConfig {
    pub alpha: f64,
    pub block_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub mode: FactorizationMode,
}

impl Default for FactorizationConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_SMOOTHING_ALPHA,
            block_size: DEFAULT_BLOCK_SIZE,
            seed: 0,
            mode: FactorizationMode::Full,
        }
    }
}

impl FactorizationConfig {
    /// Block size actually used for `channels` input channels: the configured
    /// size capped at the channel count.
    pub fn effective_block_size(&self, channels: usize) -> usize {
        self.block_size.min(channels).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct DuQuantFactorization<T> {
    pub lambda: Vec<T>,
    pub r1_blocks: Vec<Matrix<T>>,
    pub perm: Permutation,
    pub r2_blocks: Vec<Matrix<T>>,
    pub block_size: usize,
    pub smoothing_alpha: f64,
    /// Seed the rotation blocks were drawn from.
    pub seed: u64,
    pub mode: FactorizationMode,
}

/// `Λ_j = max|X[:, j]|^α / max|W[j, :]|^(1-α)`, both maxima floored.
pub fn compute_smoothing<T: Scalar>(act_colmax: &[T], w: &Matrix<T>, alpha: f64) -> Result<Vec<T>> {
    if act_colmax.len() != w.rows() {
        return Err(dims("compute_smoothing", w.rows(), act_colmax.len()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid("compute_smoothing", format!("alpha {alpha} outside [0, 1]")));
    }
    let floor = T::lit(SMOOTHING_FLOOR);
    let a = T::lit(alpha);
    let b = T::lit(1.0 - alpha);
    Ok(act_colmax
        .iter()
        .zip(w.row_abs_max())
        .map(|(&xm, wm)| xm.abs().max(floor).powf(a) / wm.max(floor).powf(b))
        .collect())
}

fn check_blocks(op: &'static str, channels: usize, block_size: usize) -> Result<usize> {
    if block_size == 0 || !channels.is_multiple_of(block_size) {
        return Err(invalid(
            op,
            format!("block size {block_size} does not divide {channels} channels"),
        ));
    }
    Ok(channels / block_size)
}

fn identity_blocks<T: Scalar>(n: usize, b: usize) -> Vec<Matrix<T>> {
    (0..n / b).map(|_| Matrix::identity(b)).collect()
}

/// `x * blockdiag(blocks)`.
fn apply_block_diag<T: Scalar>(x: &Matrix<T>, blocks: &[Matrix<T>]) -> Result<Matrix<T>> {
    let b = blocks.first().map_or(0, |m| m.rows());
    let parts = blocks
        .iter()
        .enumerate()
        .map(|(i, r)| matmul(&x.col_block(i * b, b), r))
        .collect::<Result<Vec<_>>>()?;
    Matrix::hcat(&parts)
}

/// `blockdiag(blocks)^T * w`.
fn apply_block_diag_transposed<T: Scalar>(w: &Matrix<T>, blocks: &[Matrix<T>]) -> Result<Matrix<T>> {
    let b = blocks.first().map_or(0, |m| m.rows());
    let parts = blocks
        .iter()
        .enumerate()
        .map(|(i, r)| matmul(&r.transpose(), &w.row_block(i * b, b)))
        .collect::<Result<Vec<_>>>()?;
    Matrix::vcat(&parts)
}

type BlockPair<T> = (Vec<Matrix<T>>, Vec<Matrix<T>>);

/// `R1` block `b` is seeded with `seed + b`, `R2` block `b` with
/// `seed + blocks + b`. Non-full modes use identity blocks.
fn rotation_blocks<T: Scalar>(n: usize, b: usize, seed: u64, mode: FactorizationMode) -> Result<BlockPair<T>> {
    let blocks = check_blocks("rotation_blocks", n, b)?;
    if mode != FactorizationMode::Full {
        return Ok((identity_blocks(n, b), identity_blocks(n, b)));
    }
    let draw = |offset: usize| {
        (0..blocks)
            .map(|i| random_orthogonal::<T>(b, seed.wrapping_add((offset + i) as u64)))
            .collect::<Result<Vec<_>>>()
    };
    Ok((draw(0)?, draw(blocks)?))
}

impl<T: Scalar> DuQuantFactorization<T> {
    pub fn identity(channels: usize, block_size: usize) -> Result<Self> {
        check_blocks("DuQuantFactorization::identity", channels, block_size)?;
        Ok(Self {
            lambda: vec![T::one(); channels],
            r1_blocks: identity_blocks(channels, block_size),
            perm: Permutation::identity(channels),
            r2_blocks: identity_blocks(channels, block_size),
            block_size,
            smoothing_alpha: 0.0,
            seed: 0,
            mode: FactorizationMode::Identity,
        })
    }

    /// Rebuilds a factorization from its stored parts; rotation blocks are
    /// regenerated from `seed`.
    pub fn from_parts(
        lambda: Vec<T>,
        perm: Permutation,
        block_size: usize,
        smoothing_alpha: f64,
        seed: u64,
        mode: FactorizationMode,
    ) -> Result<Self> {
        let n = lambda.len();
        let (r1_blocks, r2_blocks) = rotation_blocks(n, block_size, seed, mode)?;
        let f = Self {
            lambda,
            r1_blocks,
            perm,
            r2_blocks,
            block_size,
            smoothing_alpha,
            seed,
            mode,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn channels(&self) -> usize {
        self.lambda.len()
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "DuQuantFactorization";
        let n = self.channels();
        let blocks = check_blocks(OP, n, self.block_size)?;
        if self.lambda.iter().any(|&l| !(l > T::zero()) || !l.is_finite()) {
            return Err(invalid(OP, "smoothing factors must be positive"));
        }
        if self.perm.len() != n {
            return Err(dims(OP, n, self.perm.len()));
        }
        for set in [&self.r1_blocks, &self.r2_blocks] {
            if set.len() != blocks || set.iter().any(|m| m.shape() != (self.block_size, self.block_size)) {
                return Err(invalid(OP, "rotation blocks do not tile the channels"));
            }
        }
        Ok(())
    }

    /// `X Λ R1 P R2`.
    pub fn apply_activation_side(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.cols() != self.channels() {
            return Err(dims("apply_activation_side", self.channels(), x.cols()));
        }
        let x = x.scale_cols(&self.lambda)?;
        let x = apply_block_diag(&x, &self.r1_blocks)?;
        let x = self.perm.permute_cols(&x)?;
        apply_block_diag(&x, &self.r2_blocks)
    }

    /// `R2^T P^T R1^T Λ^-1 W`.
    pub fn fold_weight_side(&self, w: &Matrix<T>) -> Result<Matrix<T>> {
        if w.rows() != self.channels() {
            return Err(dims("fold_weight_side", self.channels(), w.rows()));
        }
        let inv: Vec<T> = self.lambda.iter().map(|&l| T::one() / l).collect();
        let w = w.scale_rows(&inv)?;
        let w = apply_block_diag_transposed(&w, &self.r1_blocks)?;
        let w = self.perm.unpermute_rows(&w)?;
        apply_block_diag_transposed(&w, &self.r2_blocks)
    }
}

/// Builds the factorization for one layer from the per-input-channel
/// activation maxima observed during calibration.
///
/// Rotation block `b` of `R1` is seeded with `seed + b` and block `b` of `R2`
/// with `seed + blocks + b`. The permutation is a zigzag deal over the bound
/// `sum_i |x_i Λ_i| |R1[i, j]|` on the magnitude of each rotated channel.
pub fn build_factorization<T: Scalar>(
    act_colmax: &[T],
    w: &Matrix<T>,
    cfg: &FactorizationConfig,
) -> Result<DuQuantFactorization<T>> {
    const OP: &str = "build_factorization";
    let n = w.rows();
    if act_colmax.len() != n {
        return Err(dims(OP, n, act_colmax.len()));
    }
    let b = cfg.effective_block_size(n);
    check_blocks(OP, n, b)?;
    if cfg.mode == FactorizationMode::Identity {
        return DuQuantFactorization::identity(n, b);
    }
    let lambda = compute_smoothing(act_colmax, w, cfg.alpha)?;
    let (r1_blocks, r2_blocks) = rotation_blocks(n, b, cfg.seed, cfg.mode)?;
    if cfg.mode == FactorizationMode::SmoothOnly {
        return Ok(DuQuantFactorization {
            lambda,
            r1_blocks,
            perm: Permutation::identity(n),
            r2_blocks,
            block_size: b,
            smoothing_alpha: cfg.alpha,
            seed: cfg.seed,
            mode: cfg.mode,
        });
    }

    let smoothed: Vec<T> = act_colmax.iter().zip(&lambda).map(|(&x, &l)| x.abs() * l).collect();
    let mut magnitudes = vec![T::zero(); n];
    for (blk, r) in r1_blocks.iter().enumerate() {
        for j in 0..b {
            magnitudes[blk * b + j] = (0..b).map(|i| smoothed[blk * b + i] * r.get(i, j).abs()).sum();
        }
    }
    let perm = zigzag_permutation(&magnitudes, b)?;
    Ok(DuQuantFactorization {
        lambda,
        r1_blocks,
        perm,
        r2_blocks,
        block_size: b,
        smoothing_alpha: cfg.alpha,
        seed: cfg.seed,
        mode: cfg.mode,
    })
}
