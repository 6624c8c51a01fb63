//! Dense matrices and block-quantized tensors.
//!
//! [`MxTensor`] stores a matrix as 32-element blocks running along one axis:
//! row-major blocks span 32 consecutive columns of one row (activations and
//! GEMM left operands), column-major blocks span 32 consecutive rows of one
//! column (weights and GEMM right operands). Either way the reduction axis
//! of a GEMM must be the blocked axis, so both operands advance through
//! whole blocks together. Ragged edges are zero-padded inside the final
//! block of each lane.

use crate::bf16::Bf16;
use crate::block::{MxBlock, BLOCK_SIZE};
use crate::error::Error;
use crate::fp4::{E8m0Scale, Fp4Code};
use crate::real::Scalar;
use crate::Result;
use serde::{Deserialize, Serialize};

/// Axis along which 32-element blocks run.
#[derive(Copy, Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Orientation {
    /// Blocks span columns within a row.
    RowMajor,
    /// Blocks span rows within a column.
    ColMajor,
}

impl Orientation {
    pub fn to_byte(self) -> u8 {
        match self {
            Orientation::RowMajor => 0,
            Orientation::ColMajor => 1,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Orientation::RowMajor),
            1 => Ok(Orientation::ColMajor),
            other => Err(Error::format("MXT1", format!("unknown orientation byte {other}"))),
        }
    }
}

/// Row-major dense matrix.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Copy + Default> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![T::default(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Mat { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn transposed(&self) -> Self {
        Mat::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Copies columns `start..start + width` into a new matrix.
    pub fn col_slice(&self, start: usize, width: usize) -> Self {
        assert!(start + width <= self.cols);
        Mat::from_fn(self.rows, width, |i, j| self.get(i, start + j))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn hcat(parts: &[Self]) -> Self {
        assert!(!parts.is_empty());
        let rows = parts[0].rows;
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut out = Mat::zeros(rows, cols);
        for i in 0..rows {
            let mut at = 0;
            for p in parts {
                assert_eq!(p.rows, rows);
                out.row_mut(i)[at..at + p.cols].copy_from_slice(p.row(i));
                at += p.cols;
            }
        }
        out
    }

    /// Keeps the first `n` rows.
    pub fn top_rows(&self, n: usize) -> Self {
        assert!(n <= self.rows);
        Mat { rows: n, cols: self.cols, data: self.data[..n * self.cols].to_vec() }
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Mat<U> {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| f(*v)).collect() }
    }
}

impl<F: Scalar> Mat<F> {
    /// Reference GEMM with an index-ascending reduction fold.
    pub fn matmul(&self, rhs: &Mat<F>) -> Mat<F> {
        assert_eq!(self.cols, rhs.rows, "inner dimensions must agree");
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for j in 0..rhs.cols {
                let mut acc = F::zero();
                for k in 0..self.cols {
                    acc += self.get(i, k) * rhs.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> F {
        self.data.iter().map(|v| *v * *v).sum::<F>().sqrt()
    }

    pub fn max_abs(&self) -> F {
        self.data.iter().fold(F::zero(), |m, v| m.max(v.abs()))
    }
}

/// `||a - b||_F / ||b||_F`, with an exact-zero reference yielding 0 for an
/// exact match and infinity otherwise.
pub fn rel_frobenius_error<F: Scalar>(a: &Mat<F>, b: &Mat<F>) -> F {
    assert_eq!((a.rows, a.cols), (b.rows, b.cols), "shape mismatch in error metric");
    let mut num = F::zero();
    let mut den = F::zero();
    for (x, y) in a.data.iter().zip(b.data.iter()) {
        let d = *x - *y;
        num += d * d;
        den += *y * *y;
    }
    if den == F::zero() {
        if num == F::zero() {
            F::zero()
        } else {
            F::infinity()
        }
    } else {
        (num / den).sqrt()
    }
}

/// Largest elementwise absolute difference.
pub fn max_abs_diff<F: Scalar>(a: &Mat<F>, b: &Mat<F>) -> F {
    assert_eq!((a.rows, a.cols), (b.rows, b.cols), "shape mismatch in error metric");
    a.data
        .iter()
        .zip(b.data.iter())
        .fold(F::zero(), |m, (x, y)| m.max((*x - *y).abs()))
}

fn blocks_for(n: usize) -> usize {
    n.div_ceil(BLOCK_SIZE)
}

/// A matrix of 32-element quantized blocks.
#[derive(Clone, PartialEq, Debug)]
pub struct MxTensor {
    rows: usize,
    cols: usize,
    orientation: Orientation,
    blocks: Vec<MxBlock>,
}

impl MxTensor {
    /// Quantizes a real matrix, rounding elements to nearest.
    pub fn quantize_nearest<F: Scalar>(mat: &Mat<F>, orientation: Orientation) -> Self {
        Self::quantize_nearest_saturating(mat, orientation).0
    }

    /// Nearest quantization that also counts elements clamped at `±6`.
    pub fn quantize_nearest_saturating<F: Scalar>(
        mat: &Mat<F>,
        orientation: Orientation,
    ) -> (Self, u64) {
        let mut sats = 0u64;
        let tensor = Self::build(mat.rows, mat.cols, orientation, |lane| {
            let (block, s) = MxBlock::quantize_saturating(lane);
            sats += s as u64;
            block
        }, |i, j| mat.get(i, j).to_wide());
        (tensor, sats)
    }

    /// Quantizes a BF16 matrix through the truncating hardware path.
    pub fn quantize_bf16_truncate(mat: &Mat<Bf16>, orientation: Orientation) -> Self {
        Self::build(
            mat.rows,
            mat.cols,
            orientation,
            |lane| {
                let bf: Vec<Bf16> = lane.iter().map(|v| Bf16::from_f64(*v)).collect();
                MxBlock::from_bf16_truncate(&bf)
            },
            |i, j| mat.get(i, j).to_f64(),
        )
    }

    fn build(
        rows: usize,
        cols: usize,
        orientation: Orientation,
        mut make_block: impl FnMut(&[f64]) -> MxBlock,
        get: impl Fn(usize, usize) -> f64,
    ) -> Self {
        let mut blocks = Vec::new();
        match orientation {
            Orientation::RowMajor => {
                for i in 0..rows {
                    for bc in 0..blocks_for(cols) {
                        let start = bc * BLOCK_SIZE;
                        let end = (start + BLOCK_SIZE).min(cols);
                        let lane: Vec<f64> = (start..end).map(|j| get(i, j)).collect();
                        blocks.push(make_block(&lane));
                    }
                }
            }
            Orientation::ColMajor => {
                for br in 0..blocks_for(rows) {
                    for j in 0..cols {
                        let start = br * BLOCK_SIZE;
                        let end = (start + BLOCK_SIZE).min(rows);
                        let lane: Vec<f64> = (start..end).map(|i| get(i, j)).collect();
                        blocks.push(make_block(&lane));
                    }
                }
            }
        }
        MxTensor { rows, cols, orientation, blocks }
    }

    /// Number of blocks a tensor of the given shape holds.
    pub fn expected_block_count(rows: usize, cols: usize, orientation: Orientation) -> usize {
        match orientation {
            Orientation::RowMajor => rows * blocks_for(cols),
            Orientation::ColMajor => blocks_for(rows) * cols,
        }
    }

    /// Assembles a tensor from pre-built blocks in row-major grid order.
    pub fn from_blocks(
        rows: usize,
        cols: usize,
        orientation: Orientation,
        blocks: Vec<MxBlock>,
    ) -> Result<Self> {
        let t = MxTensor { rows, cols, orientation, blocks };
        let expected = t.grid_rows() * t.grid_cols();
        if t.blocks.len() != expected {
            return Err(Error::dimension(format!(
                "expected {expected} blocks for {rows}x{cols} {orientation:?}, got {}",
                t.blocks.len()
            )));
        }
        Ok(t)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    /// Block-grid height: rows (row-major) or row-block count (col-major).
    pub fn grid_rows(&self) -> usize {
        match self.orientation {
            Orientation::RowMajor => self.rows,
            Orientation::ColMajor => blocks_for(self.rows),
        }
    }

    /// Block-grid width: column-block count (row-major) or columns.
    pub fn grid_cols(&self) -> usize {
        match self.orientation {
            Orientation::RowMajor => blocks_for(self.cols),
            Orientation::ColMajor => self.cols,
        }
    }

    /// Number of blocks along the blocked (reduction) axis.
    pub fn blocks_along_reduction(&self) -> usize {
        match self.orientation {
            Orientation::RowMajor => blocks_for(self.cols),
            Orientation::ColMajor => blocks_for(self.rows),
        }
    }

    pub fn blocks(&self) -> &[MxBlock] {
        &self.blocks
    }

    #[inline]
    fn block_index(&self, i: usize, j: usize) -> (usize, usize) {
        match self.orientation {
            Orientation::RowMajor => (i * self.grid_cols() + j / BLOCK_SIZE, j % BLOCK_SIZE),
            Orientation::ColMajor => ((i / BLOCK_SIZE) * self.grid_cols() + j, i % BLOCK_SIZE),
        }
    }

    /// Block holding logical element `(i, j)`.
    #[inline]
    pub fn block_at(&self, i: usize, j: usize) -> &MxBlock {
        &self.blocks[self.block_index(i, j).0]
    }

    /// Block at grid coordinates. Both orientations store the grid row-major,
    /// so `(gr, gc)` indexes `grid_rows() x grid_cols()` directly.
    #[inline]
    pub fn grid_block(&self, gr: usize, gc: usize) -> &MxBlock {
        debug_assert!(gr < self.grid_rows() && gc < self.grid_cols());
        &self.blocks[gr * self.grid_cols() + gc]
    }

    /// Element code at a logical position.
    #[inline]
    pub fn element(&self, i: usize, j: usize) -> Fp4Code {
        let (b, off) = self.block_index(i, j);
        self.blocks[b].elements[off]
    }

    /// Shared scale of the block holding a logical position.
    #[inline]
    pub fn scale_at(&self, i: usize, j: usize) -> E8m0Scale {
        self.blocks[self.block_index(i, j).0].scale
    }

    /// Decoded dense matrix (logical dimensions, padding dropped).
    pub fn to_real<F: Scalar>(&self) -> Mat<F> {
        Mat::from_fn(self.rows, self.cols, |i, j| {
            let (b, off) = self.block_index(i, j);
            F::from_wide(self.blocks[b].dequantize_element(off))
        })
    }

    /// Decoded dense BF16 matrix via the field-transfer conversion.
    pub fn to_bf16(&self) -> (Mat<Bf16>, bool) {
        let mut saturated = false;
        let mat = Mat::from_fn(self.rows, self.cols, |i, j| {
            let (b, off) = self.block_index(i, j);
            let block = &self.blocks[b];
            let (v, sat) = crate::block::element_to_bf16(block.elements[off], block.scale);
            saturated |= sat;
            v
        });
        (mat, saturated)
    }

    /// Transpose: logical dimensions swap, the orientation flips, and the
    /// block grid is re-indexed. No element is re-quantized.
    pub fn transposed(&self) -> MxTensor {
        let orientation = match self.orientation {
            Orientation::RowMajor => Orientation::ColMajor,
            Orientation::ColMajor => Orientation::RowMajor,
        };
        let (gr, gc) = (self.grid_rows(), self.grid_cols());
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for r in 0..gc {
            for c in 0..gr {
                blocks.push(self.blocks[c * gc + r]);
            }
        }
        MxTensor { rows: self.cols, cols: self.rows, orientation, blocks }
    }

    /// Slices whole block-columns `[start_block, start_block + n_blocks)` of
    /// a row-major tensor (used to carve per-head lanes).
    pub fn slice_block_cols(&self, start_block: usize, n_blocks: usize) -> Result<MxTensor> {
        if self.orientation != Orientation::RowMajor {
            return Err(Error::dimension("block-column slicing requires a row-major tensor"));
        }
        let gc = self.grid_cols();
        if start_block + n_blocks > gc {
            return Err(Error::dimension(format!(
                "block columns {start_block}..{} out of {gc}",
                start_block + n_blocks
            )));
        }
        let cols = if start_block + n_blocks == gc {
            self.cols - start_block * BLOCK_SIZE
        } else {
            n_blocks * BLOCK_SIZE
        };
        let mut blocks = Vec::with_capacity(self.rows * n_blocks);
        for i in 0..self.rows {
            for b in 0..n_blocks {
                blocks.push(self.blocks[i * gc + start_block + b]);
            }
        }
        Ok(MxTensor { rows: self.rows, cols, orientation: Orientation::RowMajor, blocks })
    }

    /// Slices logical rows `[start, start + n)` of a row-major tensor.
    /// Row-major blocks never span rows, so this is a plain block copy.
    pub fn slice_rows(&self, start: usize, n: usize) -> Result<MxTensor> {
        if self.orientation != Orientation::RowMajor {
            return Err(Error::dimension("row slicing requires a row-major tensor"));
        }
        if start + n > self.rows {
            return Err(Error::dimension(format!(
                "rows {start}..{} out of {}",
                start + n,
                self.rows
            )));
        }
        let gc = self.grid_cols();
        let blocks = self.blocks[start * gc..(start + n) * gc].to_vec();
        Ok(MxTensor { rows: n, cols: self.cols, orientation: Orientation::RowMajor, blocks })
    }

    /// Slices whole block-rows `[start_block, start_block + n_blocks)` of a
    /// column-major tensor: a contiguous span of 32-row groups.
    pub fn slice_block_rows(&self, start_block: usize, n_blocks: usize) -> Result<MxTensor> {
        if self.orientation != Orientation::ColMajor {
            return Err(Error::dimension("block-row slicing requires a column-major tensor"));
        }
        let gr = self.grid_rows();
        if start_block + n_blocks > gr {
            return Err(Error::dimension(format!(
                "block rows {start_block}..{} out of {gr}",
                start_block + n_blocks
            )));
        }
        let rows = if start_block + n_blocks == gr {
            self.rows - start_block * BLOCK_SIZE
        } else {
            n_blocks * BLOCK_SIZE
        };
        let gc = self.grid_cols();
        let blocks = self.blocks[start_block * gc..(start_block + n_blocks) * gc].to_vec();
        Ok(MxTensor { rows, cols: self.cols, orientation: Orientation::ColMajor, blocks })
    }
}
