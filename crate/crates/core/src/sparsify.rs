//! Block magnitude pruning of the sparse GRU's recurrent matrices.

use crate::error::{Error, Result};
use crate::model::{BlockMask, GruParams, Matrix, BLOCK_ROWS};
use crate::real::Real;

/// Final kept fractions for the update, reset and new-gate matrices.
pub const TARGET_DENSITIES: [f64; 3] = [0.09, 0.09, 0.12];

#[derive(Debug, Clone, PartialEq)]
pub struct SparsitySchedule {
    pub targets: [f64; 3],
    pub start_step: u64,
    pub end_step: u64,
    /// Masks are recomputed every this many steps inside the anneal window.
    pub rerank_every: u64,
    /// Rank blocks that touch the diagonal ahead of all others.
    pub keep_diagonal: bool,
}

impl Default for SparsitySchedule {
    fn default() -> Self {
        Self {
            targets: TARGET_DENSITIES,
            start_step: 0,
            end_step: 200_000,
            rerank_every: 1000,
            keep_diagonal: true,
        }
    }
}

impl SparsitySchedule {
    pub fn validate(&self) -> Result<()> {
        if self.targets.iter().any(|&d| !(d > 0.0 && d <= 1.0)) {
            return Err(Error::Config(format!("densities must lie in (0, 1]: {:?}", self.targets)));
        }
        if self.end_step < self.start_step || self.rerank_every == 0 {
            return Err(Error::Config("bad sparsification step range".into()));
        }
        Ok(())
    }

    pub fn mean_target(&self) -> f64 {
        self.targets.iter().sum::<f64>() / 3.0
    }

    /// Whether masks should be recomputed at `step`.
    pub fn is_rerank_step(&self, step: u64) -> bool {
        step >= self.start_step
            && step <= self.end_step
            && ((step - self.start_step) % self.rerank_every == 0 || step == self.end_step)
    }
}

/// Per-gate density: 1 before the start, cubic decay to the target, then flat.
pub fn density_at(step: u64, s: &SparsitySchedule) -> [f64; 3] {
    if step < s.start_step {
        return [1.0; 3];
    }
    if step >= s.end_step {
        return s.targets;
    }
    let p = (step - s.start_step) as f64 / (s.end_step - s.start_step) as f64;
    let decay = (1.0 - p).powi(3);
    s.targets.map(|t| t + (1.0 - t) * decay)
}

/// Keeps the `round(density · blocks)` 16×1 blocks with the largest L2 norm in
/// a `rows × cols` matrix. Ties break toward lower block index.
pub fn prune<F: Real>(w: &Matrix<F>, density: f64, keep_diagonal: bool) -> Result<BlockMask> {
    if w.rows % BLOCK_ROWS != 0 {
        return Err(Error::Config(format!(
            "{} rows not divisible by the block height {BLOCK_ROWS}",
            w.rows
        )));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Config(format!("density {density} outside (0, 1]")));
    }
    let rb = w.rows / BLOCK_ROWS;
    let total = rb * w.cols;
    let budget = ((density * total as f64).round() as usize).clamp(1, total);
    let mut scored: Vec<(bool, f64, usize)> = (0..total)
        .map(|i| {
            let (b, c) = (i / w.cols, i % w.cols);
            let norm: f64 = (b * BLOCK_ROWS..(b + 1) * BLOCK_ROWS)
                .map(|r| w.at(r, c).f64().powi(2))
                .sum();
            let diag = keep_diagonal && (b * BLOCK_ROWS..(b + 1) * BLOCK_ROWS).contains(&c);
            (diag, norm, i)
        })
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.total_cmp(&a.1)).then(a.2.cmp(&b.2)));
    let mut keep = vec![false; total];
    for &(_, _, i) in &scored[..budget] {
        keep[i] = true;
    }
    Ok(BlockMask {
        rows: w.rows,
        cols: w.cols,
        keep,
    })
}

/// Recomputes the mask of every gate of `gru` at the given densities and zeroes
/// the pruned weights.
pub fn prune_gru<F: Real>(gru: &mut GruParams<F>, densities: [f64; 3], keep_diagonal: bool) -> Result<()> {
    let u = gru.units;
    let mut mask = BlockMask::dense(3 * u, u);
    for (g, &d) in densities.iter().enumerate() {
        let gate = Matrix::from_vec(u, u, gru.w_rec.data[g * u * u..(g + 1) * u * u].to_vec())?;
        let m = prune(&gate, d, keep_diagonal)?;
        let off = g * (u / BLOCK_ROWS) * u;
        mask.keep[off..off + m.keep.len()].copy_from_slice(&m.keep);
    }
    mask.apply(&mut gru.w_rec);
    gru.mask = Some(mask);
    Ok(())
}

/// Kept fraction of each gate's recurrent matrix.
pub fn gate_densities(mask: &BlockMask) -> [f64; 3] {
    let per = mask.row_blocks() / 3;
    [0, 1, 2].map(|g| mask.density_of(g * per, (g + 1) * per))
}
