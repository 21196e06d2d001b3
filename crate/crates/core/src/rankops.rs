//! Rank-structure oracles: splitting a rank-`r` update into `n` contiguous
//! rank-`r/n` blocks, sparse top-k mixing of those blocks, and the
//! Eckart–Young truncation curve of an update matrix.

use crate::error::{MorError, Result};
use crate::matcore::{jacobi_svd, Matrix};

/// Relative singular-value threshold used for numerical rank.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// `n` contiguous slabs `B_i = B[:, i·r/n .. (i+1)·r/n]`,
/// `A_i = A[i·r/n .. (i+1)·r/n, :]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSplit {
    pub blocks: Vec<(Matrix, Matrix)>,
}

impl BlockSplit {
    pub fn n(&self) -> usize {
        self.blocks.len()
    }

    /// Rank of each block (`r / n`).
    pub fn block_rank(&self) -> usize {
        self.blocks[0].1.rows()
    }

    /// `B_i A_i` for one block.
    pub fn block_product(&self, i: usize) -> Result<Matrix> {
        let (b, a) = &self.blocks[i];
        b.matmul(a)
    }
}

pub fn block_split(b: &Matrix, a: &Matrix, n: usize) -> Result<BlockSplit> {
    let r = b.cols();
    if a.rows() != r {
        return Err(MorError::shape("block_split", b.shape(), a.shape()));
    }
    if n == 0 || !r.is_multiple_of(n) {
        return Err(MorError::InvalidArgument(format!(
            "block count {n} must be a positive divisor of rank {r}"
        )));
    }
    let w = r / n;
    let blocks = (0..n)
        .map(|i| (b.col_slice(i * w, (i + 1) * w), a.row_slice(i * w, (i + 1) * w)))
        .collect();
    Ok(BlockSplit { blocks })
}

/// `sum_i B_i A_i`.
///
/// Each block's scalar products are added straight into the running sum in
/// block order, which reproduces the accumulation order of `B·A` and makes
/// the result bitwise equal to the direct product.
pub fn block_reconstruct(split: &BlockSplit) -> Result<Matrix> {
    let (b0, a0) = split
        .blocks
        .first()
        .ok_or(MorError::Empty("block_reconstruct"))?;
    let mut out = Matrix::zeros(b0.rows(), a0.cols());
    for (b, a) in &split.blocks {
        if b.rows() != out.rows() || a.cols() != out.cols() || b.cols() != a.rows() {
            return Err(MorError::shape("block_reconstruct", b.shape(), a.shape()));
        }
        for i in 0..out.rows() {
            for j in 0..out.cols() {
                let mut acc = out.get(i, j);
                for t in 0..b.cols() {
                    acc += b.get(i, t) * a.get(t, j);
                }
                out.set(i, j, acc);
            }
        }
    }
    Ok(out)
}

/// Weighted sum of the `k` blocks with largest gate weight (ties to the
/// lowest index), with the selected weights renormalized to sum to one.
pub fn sparse_mix(split: &BlockSplit, g: &[f64], k: usize) -> Result<Matrix> {
    let n = split.n();
    if g.len() != n {
        return Err(MorError::shape("sparse_mix", (g.len(), 1), (n, 1)));
    }
    if k == 0 || k > n {
        return Err(MorError::InvalidArgument(format!("k = {k} must be in 1..={n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| g[j].total_cmp(&g[i]).then(i.cmp(&j)));
    let chosen = &order[..k];
    let total: f64 = chosen.iter().map(|&i| g[i]).sum();
    if !(total > 0.0) {
        return Err(MorError::InvalidArgument("selected gate weights sum to zero".into()));
    }
    let (b0, a0) = &split.blocks[0];
    let mut out = Matrix::zeros(b0.rows(), a0.cols());
    // accumulate in block order so k = n reproduces the dense mixture exactly
    let mut selected = chosen.to_vec();
    selected.sort_unstable();
    for i in selected {
        out.axpy(g[i] / total, &split.block_product(i)?)?;
    }
    Ok(out)
}

/// Squared Frobenius error of the best rank-`r` approximation for every
/// `r = 0..=min(rows, cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncationCurve {
    pub ranks: Vec<usize>,
    pub errors: Vec<f64>,
    /// Singular values, descending.
    pub singular_values: Vec<f64>,
}

impl TruncationCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,error,singular_value\n");
        for (i, (r, e)) in self.ranks.iter().zip(&self.errors).enumerate() {
            let sv = if i == 0 { String::new() } else { format!("{:e}", self.singular_values[i - 1]) };
            s.push_str(&format!("{r},{e:e},{sv}\n"));
        }
        s
    }
}

/// `errors[r] = sum_{i > r} σ_i²`, from the Jacobi singular values.
pub fn truncation_curve(delta_w: &Matrix) -> Result<TruncationCurve> {
    let svd = if delta_w.rows() >= delta_w.cols() {
        jacobi_svd(delta_w)?
    } else {
        jacobi_svd(&delta_w.transpose())?
    };
    let sigma = svd.s.into_inner();
    let p = sigma.len();
    let mut errors = vec![0.0; p + 1];
    // tail sums from the smallest singular value upward
    for r in (0..p).rev() {
        errors[r] = errors[r + 1] + sigma[r] * sigma[r];
    }
    Ok(TruncationCurve {
        ranks: (0..=p).collect(),
        errors,
        singular_values: sigma,
    })
}

/// Number of singular values above `RANK_TOLERANCE · σ_max`.
pub fn numerical_rank(m: &Matrix) -> Result<usize> {
    let svd = if m.rows() >= m.cols() {
        jacobi_svd(m)?
    } else {
        jacobi_svd(&m.transpose())?
    };
    let max = svd.s.first().copied().unwrap_or(0.0);
    if max == 0.0 {
        return Ok(0);
    }
    Ok(svd.s.iter().filter(|s| **s > RANK_TOLERANCE * max).count())
}
