use rand::Rng;

use super::config::{NetworkConfig, BLOCK_ROWS};
use crate::error::{Error, Result};
use crate::real::Real;

/// Row-major dense matrix, `[rows][cols]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<F> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<F>,
}

impl<F: Real> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("matrix data", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        Self {
            rows,
            cols,
            data: (0..rows * cols)
                .map(|_| F::c(rng.gen_range(-a..a)))
                .collect(),
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    /// `out += W x`
    pub fn matvec_acc(&self, x: &[F], out: &mut [F]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols)) {
            let mut acc = F::zero();
            for (w, v) in row.iter().zip(x) {
                acc += *w * *v;
            }
            *o += acc;
        }
    }

    /// `out += W^T g`
    pub fn matvec_t_acc(&self, g: &[F], out: &mut [F]) {
        debug_assert_eq!(g.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (row, &gi) in self.data.chunks_exact(self.cols).zip(g) {
            if gi == F::zero() {
                continue;
            }
            for (o, w) in out.iter_mut().zip(row) {
                *o += *w * gi;
            }
        }
    }

    /// `W += g x^T`
    pub fn outer_acc(&mut self, g: &[F], x: &[F]) {
        debug_assert_eq!(g.len(), self.rows);
        debug_assert_eq!(x.len(), self.cols);
        for (row, &gi) in self.data.chunks_exact_mut(self.cols).zip(g) {
            if gi == F::zero() {
                continue;
            }
            for (w, v) in row.iter_mut().zip(x) {
                *w += gi * *v;
            }
        }
    }

    pub fn cast<G: Real>(&self) -> Matrix<G> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| G::c(v.f64())).collect(),
        }
    }
}

/// Affine layer `W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub w: Matrix<F>,
    pub b: Vec<F>,
}

impl<F: Real> Linear<F> {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            w: Matrix::zeros(out, inp),
            b: vec![F::zero(); out],
        }
    }

    pub fn xavier(out: usize, inp: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: Matrix::xavier(out, inp, rng),
            b: vec![F::zero(); out],
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols
    }

    pub fn forward(&self, x: &[F]) -> Vec<F> {
        let mut out = self.b.clone();
        self.w.matvec_acc(x, &mut out);
        out
    }

    fn cast<G: Real>(&self) -> Linear<G> {
        Linear {
            w: self.w.cast(),
            b: cast_vec(&self.b),
        }
    }
}

pub(crate) fn cast_vec<F: Real, G: Real>(v: &[F]) -> Vec<G> {
    v.iter().map(|x| G::c(x.f64())).collect()
}

/// Keep/drop flags for 16×1 blocks of a `rows × cols` matrix, indexed
/// `[row_block][col]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockMask {
    pub rows: usize,
    pub cols: usize,
    pub keep: Vec<bool>,
}

impl BlockMask {
    pub fn dense(rows: usize, cols: usize) -> Self {
        debug_assert_eq!(rows % BLOCK_ROWS, 0);
        Self {
            rows,
            cols,
            keep: vec![true; rows / BLOCK_ROWS * cols],
        }
    }

    pub fn row_blocks(&self) -> usize {
        self.rows / BLOCK_ROWS
    }

    #[inline]
    pub fn is_kept(&self, row_block: usize, col: usize) -> bool {
        self.keep[row_block * self.cols + col]
    }

    #[inline]
    pub fn covers(&self, row: usize, col: usize) -> bool {
        self.is_kept(row / BLOCK_ROWS, col)
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// Kept fraction over row blocks `[rb_lo, rb_hi)`.
    pub fn density_of(&self, rb_lo: usize, rb_hi: usize) -> f64 {
        let s = &self.keep[rb_lo * self.cols..rb_hi * self.cols];
        s.iter().filter(|&&k| k).count() as f64 / s.len() as f64
    }

    pub fn density(&self) -> f64 {
        self.kept() as f64 / self.keep.len() as f64
    }

    /// Zeroes every weight outside the mask.
    pub fn apply<F: Real>(&self, m: &mut Matrix<F>) {
        debug_assert_eq!((m.rows, m.cols), (self.rows, self.cols));
        for rb in 0..self.row_blocks() {
            for c in 0..self.cols {
                if !self.is_kept(rb, c) {
                    for r in rb * BLOCK_ROWS..(rb + 1) * BLOCK_ROWS {
                        m.data[r * m.cols + c] = F::zero();
                    }
                }
            }
        }
    }
}

/// Block-compressed rows: for each 16-row block, the list of kept columns and
/// their 16 contiguous values.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSparse<F> {
    pub rows: usize,
    pub cols: usize,
    /// Offsets into `cols_idx` per row block (`row_blocks + 1` entries).
    pub row_ptr: Vec<u32>,
    pub col_idx: Vec<u32>,
    /// `BLOCK_ROWS` values per kept block.
    pub values: Vec<F>,
}

impl<F: Real> BlockSparse<F> {
    pub fn from_masked(w: &Matrix<F>, mask: &BlockMask) -> Self {
        let mut row_ptr = vec![0u32];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for rb in 0..mask.row_blocks() {
            for c in 0..w.cols {
                if mask.is_kept(rb, c) {
                    col_idx.push(c as u32);
                    for r in rb * BLOCK_ROWS..(rb + 1) * BLOCK_ROWS {
                        values.push(w.at(r, c));
                    }
                }
            }
            row_ptr.push(col_idx.len() as u32);
        }
        Self {
            rows: w.rows,
            cols: w.cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn blocks(&self) -> usize {
        self.col_idx.len()
    }

    /// `out += S x`
    pub fn matvec_acc(&self, x: &[F], out: &mut [F]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for rb in 0..self.rows / BLOCK_ROWS {
            let o = &mut out[rb * BLOCK_ROWS..(rb + 1) * BLOCK_ROWS];
            let (lo, hi) = (self.row_ptr[rb] as usize, self.row_ptr[rb + 1] as usize);
            for b in lo..hi {
                let v = x[self.col_idx[b] as usize];
                let blk = &self.values[b * BLOCK_ROWS..(b + 1) * BLOCK_ROWS];
                for (oi, w) in o.iter_mut().zip(blk) {
                    *oi += *w * v;
                }
            }
        }
    }

    pub fn to_dense(&self) -> (Matrix<F>, BlockMask) {
        let mut m = Matrix::zeros(self.rows, self.cols);
        let mut mask = BlockMask {
            rows: self.rows,
            cols: self.cols,
            keep: vec![false; self.rows / BLOCK_ROWS * self.cols],
        };
        for rb in 0..self.rows / BLOCK_ROWS {
            for b in self.row_ptr[rb] as usize..self.row_ptr[rb + 1] as usize {
                let c = self.col_idx[b] as usize;
                mask.keep[rb * self.cols + c] = true;
                for i in 0..BLOCK_ROWS {
                    m.data[(rb * BLOCK_ROWS + i) * self.cols + c] = self.values[b * BLOCK_ROWS + i];
                }
            }
        }
        (m, mask)
    }
}

/// GRU weights with gate rows stacked `[update; reset; new]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams<F> {
    pub units: usize,
    pub w_in: Matrix<F>,
    pub b_in: Vec<F>,
    pub w_rec: Matrix<F>,
    pub b_rec: Vec<F>,
    /// Present on the block-sparse GRU; masked recurrent entries are exactly zero.
    pub mask: Option<BlockMask>,
}

impl<F: Real> GruParams<F> {
    pub fn init(units: usize, input: usize, sparse: bool, rng: &mut impl Rng) -> Self {
        Self {
            units,
            w_in: Matrix::xavier(3 * units, input, rng),
            b_in: vec![F::zero(); 3 * units],
            w_rec: Matrix::xavier(3 * units, units, rng),
            b_rec: vec![F::zero(); 3 * units],
            mask: sparse.then(|| BlockMask::dense(3 * units, units)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_in.cols
    }

    pub fn apply_mask(&mut self) {
        if let Some(mask) = &self.mask {
            mask.apply(&mut self.w_rec);
        }
    }

    fn cast<G: Real>(&self) -> GruParams<G> {
        GruParams {
            units: self.units,
            w_in: self.w_in.cast(),
            b_in: cast_vec(&self.b_in),
            w_rec: self.w_rec.cast(),
            b_rec: cast_vec(&self.b_rec),
            mask: self.mask.clone(),
        }
    }
}

/// Two affine channels blended by `0.5 exp(lambda)` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DualFcParams<F> {
    pub ch1: Linear<F>,
    pub ch2: Linear<F>,
    pub lambda1: Vec<F>,
    pub lambda2: Vec<F>,
}

impl<F: Real> DualFcParams<F> {
    pub fn init(out: usize, input: usize, rng: &mut impl Rng) -> Self {
        Self {
            ch1: Linear::xavier(out, input, rng),
            ch2: Linear::xavier(out, input, rng),
            lambda1: vec![F::zero(); out],
            lambda2: vec![F::zero(); out],
        }
    }

    fn cast<G: Real>(&self) -> DualFcParams<G> {
        DualFcParams {
            ch1: self.ch1.cast(),
            ch2: self.ch2.cast(),
            lambda1: cast_vec(&self.lambda1),
            lambda2: cast_vec(&self.lambda2),
        }
    }
}

/// Latent → ReLU hidden → tanhshrink logits, shared across bands.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualParams<F> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

impl<F: Real> ResidualParams<F> {
    pub fn init(latent: usize, hidden: usize, bins: usize, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::xavier(hidden, latent, rng),
            fc2: Linear::xavier(bins, hidden, rng),
        }
    }

    fn cast<G: Real>(&self) -> ResidualParams<G> {
        ResidualParams {
            fc1: self.fc1.cast(),
            fc2: self.fc2.cast(),
        }
    }
}

/// All trainable weights of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F> {
    pub cfg: NetworkConfig,
    pub segconv: Linear<F>,
    pub cond_fc: Linear<F>,
    pub embed_coarse: Matrix<F>,
    pub embed_fine: Matrix<F>,
    pub sparse_gru: GruParams<F>,
    pub coarse_gru: GruParams<F>,
    pub fine_gru: GruParams<F>,
    pub coarse_head: DualFcParams<F>,
    pub fine_head: DualFcParams<F>,
    pub coarse_residual: ResidualParams<F>,
    pub fine_residual: ResidualParams<F>,
}

/// Borrowed view of one named tensor.
#[derive(Debug)]
pub struct TensorRef<'a, F> {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub data: &'a [F],
}

#[derive(Debug)]
pub struct TensorMut<'a, F> {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub data: &'a mut [F],
}

macro_rules! param_list {
    ($self:ident, $ctor:ident, $as:ident) => {{
        let p = $self;
        vec![
            $ctor("segconv.w", vec![p.segconv.w.rows, p.segconv.w.cols], $as!(p.segconv.w.data)),
            $ctor("segconv.b", vec![p.segconv.b.len()], $as!(p.segconv.b)),
            $ctor("cond_fc.w", vec![p.cond_fc.w.rows, p.cond_fc.w.cols], $as!(p.cond_fc.w.data)),
            $ctor("cond_fc.b", vec![p.cond_fc.b.len()], $as!(p.cond_fc.b)),
            $ctor("embed.coarse", vec![p.embed_coarse.rows, p.embed_coarse.cols], $as!(p.embed_coarse.data)),
            $ctor("embed.fine", vec![p.embed_fine.rows, p.embed_fine.cols], $as!(p.embed_fine.data)),
            $ctor("sparse_gru.w_in", vec![p.sparse_gru.w_in.rows, p.sparse_gru.w_in.cols], $as!(p.sparse_gru.w_in.data)),
            $ctor("sparse_gru.b_in", vec![p.sparse_gru.b_in.len()], $as!(p.sparse_gru.b_in)),
            $ctor("sparse_gru.w_rec", vec![p.sparse_gru.w_rec.rows, p.sparse_gru.w_rec.cols], $as!(p.sparse_gru.w_rec.data)),
            $ctor("sparse_gru.b_rec", vec![p.sparse_gru.b_rec.len()], $as!(p.sparse_gru.b_rec)),
            $ctor("coarse_gru.w_in", vec![p.coarse_gru.w_in.rows, p.coarse_gru.w_in.cols], $as!(p.coarse_gru.w_in.data)),
            $ctor("coarse_gru.b_in", vec![p.coarse_gru.b_in.len()], $as!(p.coarse_gru.b_in)),
            $ctor("coarse_gru.w_rec", vec![p.coarse_gru.w_rec.rows, p.coarse_gru.w_rec.cols], $as!(p.coarse_gru.w_rec.data)),
            $ctor("coarse_gru.b_rec", vec![p.coarse_gru.b_rec.len()], $as!(p.coarse_gru.b_rec)),
            $ctor("fine_gru.w_in", vec![p.fine_gru.w_in.rows, p.fine_gru.w_in.cols], $as!(p.fine_gru.w_in.data)),
            $ctor("fine_gru.b_in", vec![p.fine_gru.b_in.len()], $as!(p.fine_gru.b_in)),
            $ctor("fine_gru.w_rec", vec![p.fine_gru.w_rec.rows, p.fine_gru.w_rec.cols], $as!(p.fine_gru.w_rec.data)),
            $ctor("fine_gru.b_rec", vec![p.fine_gru.b_rec.len()], $as!(p.fine_gru.b_rec)),
            $ctor("coarse_head.w1", vec![p.coarse_head.ch1.w.rows, p.coarse_head.ch1.w.cols], $as!(p.coarse_head.ch1.w.data)),
            $ctor("coarse_head.b1", vec![p.coarse_head.ch1.b.len()], $as!(p.coarse_head.ch1.b)),
            $ctor("coarse_head.w2", vec![p.coarse_head.ch2.w.rows, p.coarse_head.ch2.w.cols], $as!(p.coarse_head.ch2.w.data)),
            $ctor("coarse_head.b2", vec![p.coarse_head.ch2.b.len()], $as!(p.coarse_head.ch2.b)),
            $ctor("coarse_head.lambda1", vec![p.coarse_head.lambda1.len()], $as!(p.coarse_head.lambda1)),
            $ctor("coarse_head.lambda2", vec![p.coarse_head.lambda2.len()], $as!(p.coarse_head.lambda2)),
            $ctor("fine_head.w1", vec![p.fine_head.ch1.w.rows, p.fine_head.ch1.w.cols], $as!(p.fine_head.ch1.w.data)),
            $ctor("fine_head.b1", vec![p.fine_head.ch1.b.len()], $as!(p.fine_head.ch1.b)),
            $ctor("fine_head.w2", vec![p.fine_head.ch2.w.rows, p.fine_head.ch2.w.cols], $as!(p.fine_head.ch2.w.data)),
            $ctor("fine_head.b2", vec![p.fine_head.ch2.b.len()], $as!(p.fine_head.ch2.b)),
            $ctor("fine_head.lambda1", vec![p.fine_head.lambda1.len()], $as!(p.fine_head.lambda1)),
            $ctor("fine_head.lambda2", vec![p.fine_head.lambda2.len()], $as!(p.fine_head.lambda2)),
            $ctor("coarse_residual.w1", vec![p.coarse_residual.fc1.w.rows, p.coarse_residual.fc1.w.cols], $as!(p.coarse_residual.fc1.w.data)),
            $ctor("coarse_residual.b1", vec![p.coarse_residual.fc1.b.len()], $as!(p.coarse_residual.fc1.b)),
            $ctor("coarse_residual.w2", vec![p.coarse_residual.fc2.w.rows, p.coarse_residual.fc2.w.cols], $as!(p.coarse_residual.fc2.w.data)),
            $ctor("coarse_residual.b2", vec![p.coarse_residual.fc2.b.len()], $as!(p.coarse_residual.fc2.b)),
            $ctor("fine_residual.w1", vec![p.fine_residual.fc1.w.rows, p.fine_residual.fc1.w.cols], $as!(p.fine_residual.fc1.w.data)),
            $ctor("fine_residual.b1", vec![p.fine_residual.fc1.b.len()], $as!(p.fine_residual.fc1.b)),
            $ctor("fine_residual.w2", vec![p.fine_residual.fc2.w.rows, p.fine_residual.fc2.w.cols], $as!(p.fine_residual.fc2.w.data)),
            $ctor("fine_residual.b2", vec![p.fine_residual.fc2.b.len()], $as!(p.fine_residual.fc2.b)),
        ]
    }};
}

macro_rules! as_ref {
    ($e:expr) => {
        &$e[..]
    };
}

macro_rules! as_mut {
    ($e:expr) => {
        &mut $e[..]
    };
}

fn tref<'a, F>(name: &'static str, shape: Vec<usize>, data: &'a [F]) -> TensorRef<'a, F> {
    TensorRef { name, shape, data }
}

fn tmut<'a, F>(name: &'static str, shape: Vec<usize>, data: &'a mut [F]) -> TensorMut<'a, F> {
    TensorMut { name, shape, data }
}

/// Name of the only block-sparse tensor.
pub const SPARSE_TENSOR: &str = "sparse_gru.w_rec";

impl<F: Real> ModelParams<F> {
    /// Xavier-uniform weights, zero biases, zero DualFC blend logits and a
    /// fully dense recurrent mask.
    pub fn init(cfg: NetworkConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let b = cfg.head_bins;
        Ok(Self {
            cfg,
            segconv: Linear::xavier(cfg.segconv_dim(), cfg.segconv_dim(), rng),
            cond_fc: Linear::xavier(cfg.cond_proj, cfg.segconv_dim(), rng),
            embed_coarse: Matrix::xavier(b, cfg.embed_dim, rng),
            embed_fine: Matrix::xavier(b, cfg.embed_dim, rng),
            sparse_gru: GruParams::init(cfg.sparse_units, cfg.sparse_input(), true, rng),
            coarse_gru: GruParams::init(cfg.dense_units, cfg.coarse_input(), false, rng),
            fine_gru: GruParams::init(cfg.dense_units, cfg.fine_input(), false, rng),
            coarse_head: DualFcParams::init(cfg.head_output(), cfg.dense_units, rng),
            fine_head: DualFcParams::init(cfg.head_output(), cfg.dense_units, rng),
            coarse_residual: ResidualParams::init(cfg.logit_latent, cfg.residual_hidden, b, rng),
            fine_residual: ResidualParams::init(cfg.logit_latent, cfg.residual_hidden, b, rng),
        })
    }

    /// Same structure with every value zero (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data.fill(F::zero());
        }
        z
    }

    pub fn tensors(&self) -> Vec<TensorRef<'_, F>> {
        param_list!(self, tref, as_ref)
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_, F>> {
        param_list!(self, tmut, as_mut)
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn apply_masks(&mut self) {
        self.sparse_gru.apply_mask();
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams {
            cfg: self.cfg,
            segconv: self.segconv.cast(),
            cond_fc: self.cond_fc.cast(),
            embed_coarse: self.embed_coarse.cast(),
            embed_fine: self.embed_fine.cast(),
            sparse_gru: self.sparse_gru.cast(),
            coarse_gru: self.coarse_gru.cast(),
            fine_gru: self.fine_gru.cast(),
            coarse_head: self.coarse_head.cast(),
            fine_head: self.fine_head.cast(),
            coarse_residual: self.coarse_residual.cast(),
            fine_residual: self.fine_residual.cast(),
        }
    }

    /// Checks every tensor against the shapes implied by `cfg`.
    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        let fresh = {
            let mut rng = rand::rngs::mock::StepRng::new(0, 0);
            ModelParams::<F>::init_shapes_only(self.cfg, &mut rng)
        };
        for (a, b) in self.tensors().iter().zip(fresh.tensors()) {
            if a.shape != b.shape {
                return Err(Error::Format(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    a.name, a.shape, b.shape
                )));
            }
        }
        if let Some(mask) = &self.sparse_gru.mask {
            if (mask.rows, mask.cols) != (self.sparse_gru.w_rec.rows, self.sparse_gru.w_rec.cols) {
                return Err(Error::Format("sparse mask shape mismatch".into()));
            }
        }
        Ok(())
    }

    fn init_shapes_only(cfg: NetworkConfig, rng: &mut impl Rng) -> Self {
        // StepRng(0, 0) draws zeros; only shapes matter here.
        Self::init(cfg, rng).expect("validated config")
    }
}
