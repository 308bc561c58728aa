//! Named parameter blocks shared by the optimizer, gradient checks, and
//! checkpoints.
//!
//! Block data is exposed in nalgebra's native column-major order. Consumers
//! that need row-major values (checkpoints) convert explicitly.

use nalgebra::{DMatrix, DVector};

pub struct BlockRef<'a> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

pub struct BlockMut<'a> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a mut [f64],
}

/// A container of real-valued parameter blocks with a stable block order.
///
/// Gradients are stored in the same type as the parameters they belong to,
/// so two values of one type always enumerate matching blocks.
pub trait Parameterized {
    fn blocks(&self) -> Vec<BlockRef<'_>>;
    fn blocks_mut(&mut self) -> Vec<BlockMut<'_>>;

    fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.data.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.data.iter().all(|v| v.is_finite()))
    }

    /// `self += alpha * other`, block by block.
    fn axpy(&mut self, alpha: f64, other: &Self)
    where
        Self: Sized,
    {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            debug_assert_eq!(dst.data.len(), src.data.len());
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += alpha * s;
            }
        }
    }

    fn scale(&mut self, alpha: f64) {
        for b in self.blocks_mut() {
            b.data.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    fn fill(&mut self, value: f64) {
        for b in self.blocks_mut() {
            b.data.iter_mut().for_each(|v| *v = value);
        }
    }
}

pub(crate) fn matrix_ref<'a>(name: String, m: &'a DMatrix<f64>) -> BlockRef<'a> {
    BlockRef {
        name,
        rows: m.nrows(),
        cols: m.ncols(),
        data: m.as_slice(),
    }
}

pub(crate) fn matrix_mut<'a>(name: String, m: &'a mut DMatrix<f64>) -> BlockMut<'a> {
    BlockMut {
        name,
        rows: m.nrows(),
        cols: m.ncols(),
        data: m.as_mut_slice(),
    }
}

pub(crate) fn vector_ref<'a>(name: String, v: &'a DVector<f64>) -> BlockRef<'a> {
    BlockRef {
        name,
        rows: v.len(),
        cols: 1,
        data: v.as_slice(),
    }
}

pub(crate) fn vector_mut<'a>(name: String, v: &'a mut DVector<f64>) -> BlockMut<'a> {
    BlockMut {
        name,
        rows: v.len(),
        cols: 1,
        data: v.as_mut_slice(),
    }
}

impl Parameterized for DVector<f64> {
    fn blocks(&self) -> Vec<BlockRef<'_>> {
        vec![vector_ref("x".into(), self)]
    }

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_>> {
        vec![vector_mut("x".into(), self)]
    }
}
