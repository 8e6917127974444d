//! Shape arithmetic shared by the tape ops: numpy-style broadcasting,
//! stride computation, and gradient reduction back to an operand's shape.

use crate::error::{Error, Result};

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// Broadcast two shapes, aligning trailing axes.
pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() { 1 } else { a[i - (ndim - a.len())] };
        let db = if i < ndim - b.len() { 1 } else { b[i - (ndim - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::Dimension(format!(
                "shapes {a:?} and {b:?} do not broadcast"
            )));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

fn pad_left(shape: &[usize], ndim: usize) -> Vec<usize> {
    let mut padded = vec![1usize; ndim];
    padded[ndim - shape.len()..].copy_from_slice(shape);
    padded
}

/// Materializes `data` (of shape `from`) expanded to `to`.
/// `to` must be broadcast-reachable from `from`.
pub(crate) fn expand_to(data: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return data.to_vec();
    }
    let ndim = to.len();
    let padded = pad_left(from, ndim);
    let src_strides = strides_of(&padded);
    let numel: usize = to.iter().product();
    let mut out = vec![0.0; numel];
    let mut coords = vec![0usize; ndim];
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut rem = flat;
        for d in (0..ndim).rev() {
            coords[d] = rem % to[d];
            rem /= to[d];
        }
        let mut src = 0usize;
        for d in 0..ndim {
            if padded[d] != 1 {
                src += coords[d] * src_strides[d];
            }
        }
        *slot = data[src];
    }
    out
}

/// Sums `grad` (laid out per shape `from`) down to shape `to`,
/// collapsing the axes that were broadcast on the forward pass.
pub(crate) fn reduce_to_shape(grad: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return grad.to_vec();
    }
    let ndim = from.len();
    let padded = pad_left(to, ndim);
    let dst_strides = strides_of(&padded);
    let numel_to: usize = to.iter().product();
    let mut out = vec![0.0; numel_to];
    let mut coords = vec![0usize; ndim];
    for (flat, g) in grad.iter().enumerate() {
        let mut rem = flat;
        for d in (0..ndim).rev() {
            coords[d] = rem % from[d];
            rem /= from[d];
        }
        let mut dst = 0usize;
        for d in 0..ndim {
            if padded[d] != 1 {
                dst += coords[d] * dst_strides[d];
            }
        }
        out[dst] += g;
    }
    out
}
