//! Dense row-major tensors.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::{Element, Scalar};

/// Dense, contiguous, row-major n-dimensional array.
///
/// Rank 0 (shape `[]`) holds a single scalar. Every dimension is at least 1.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..SHOWN])
        }
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn check_dims(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(op, format!("zero-sized dimension in {shape:?}")));
    }
    Ok(())
}

/// Visits every multi-index of `shape` in row-major order, passing the flat
/// output index and the offsets obtained through two stride vectors.
pub(crate) fn for_each_offset2(
    shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = shape[rank - 1];
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let outer = numel_of(&shape[..rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut out = 0usize;
    for _ in 0..outer {
        let (mut a, mut b) = (oa, ob);
        for _ in 0..last {
            f(out, a, b);
            out += 1;
            a += la;
            b += lb;
        }
        // advance the outer odometer
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            oa -= sa[ax] * shape[ax];
            ob -= sb[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Numpy-style broadcast of two shapes (aligned on trailing axes).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(
                    "broadcast",
                    format!("cannot broadcast {a:?} with {b:?}"),
                ))
            }
        };
    }
    Ok(out)
}

/// Strides that read `shape` as if it were broadcast to `target`.
pub(crate) fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let offset = target.len() - shape.len();
    (0..target.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        check_dims("Tensor::new", &shape)?;
        if numel_of(&shape) != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {} values, got {}", numel_of(&shape), data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        let n = numel_of(&shape);
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        assert!(shape.iter().all(|&d| d > 0), "zero-sized dimension in {shape:?}");
        let data = (0..numel_of(&shape)).map(f).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// The single value of a rank-0 or one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        let strides = strides_of(&self.shape);
        let off: usize = index
            .iter()
            .zip(&strides)
            .zip(&self.shape)
            .map(|((&i, &s), &d)| {
                assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
                i * s
            })
            .sum();
        self.data[off]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        self.clone().into_reshape(shape)
    }

    pub fn into_reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        check_dims("reshape", &shape)?;
        if numel_of(&shape) != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} into {shape:?}", self.shape),
            ));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(
                "permute",
                format!("{axes:?} is not a permutation of {rank} axes"),
            ));
        }
        let src = strides_of(&self.shape);
        let shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let read: Vec<usize> = axes.iter().map(|&a| src[a]).collect();
        let mut data = vec![T::default(); self.data.len()];
        for_each_offset2(&shape, &read, &read, |o, a, _| data[o] = self.data[a]);
        Ok(Tensor { shape, data })
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || len == 0 || start + len > self.shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("range {start}..{} on axis {axis} of {:?}", start + len, self.shape),
            ));
        }
        let outer = numel_of(&self.shape[..axis]);
        let inner = numel_of(&self.shape[axis + 1..]);
        let dim = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor { shape, data })
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no tensors to concatenate"))?;
        if axis >= first.rank() {
            return Err(Error::shape("concat", format!("axis {axis} out of range")));
        }
        for p in parts {
            let ok = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} incompatible with {:?} on axis {axis}", p.shape, first.shape),
                ));
            }
        }
        let outer = numel_of(&first.shape[..axis]);
        let inner = numel_of(&first.shape[axis + 1..]);
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Tensor { shape, data })
    }

    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape.clone())
    }

    /// Builds from f64 values, converting to `T`.
    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        self.map(|v| U::lit(v.to_f64_lossy()))
    }

    /// Elementwise combination of two equally shaped tensors.
    pub fn zip_map(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// Elementwise combination under numpy broadcasting.
    pub fn broadcast_with(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape == other.shape {
            return self.zip_map(other, f);
        }
        let shape = broadcast_shape(&self.shape, &other.shape)?;
        let sa = broadcast_strides(&self.shape, &shape);
        let sb = broadcast_strides(&other.shape, &shape);
        let mut data = vec![T::zero(); numel_of(&shape)];
        for_each_offset2(&shape, &sa, &sb, |o, a, b| data[o] = f(self.data[a], other.data[b]));
        Ok(Tensor { shape, data })
    }

    /// Sums a broadcast result back down to `target` (the adjoint of
    /// broadcasting `target` up to `self.shape()`).
    pub fn sum_to_shape(&self, target: &[usize]) -> Result<Self> {
        if self.shape == target {
            return Ok(self.clone());
        }
        if broadcast_shape(target, &self.shape)? != self.shape {
            return Err(Error::shape(
                "sum_to_shape",
                format!("{target:?} does not broadcast to {:?}", self.shape),
            ));
        }
        let st = broadcast_strides(target, &self.shape);
        let own = strides_of(&self.shape);
        let mut data = vec![T::zero(); numel_of(target)];
        for_each_offset2(&self.shape, &own, &st, |_, a, t| data[t] += self.data[a]);
        Ok(Tensor {
            shape: target.to_vec(),
            data,
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        self.broadcast_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Self> {
        self.broadcast_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Self> {
        self.broadcast_with(other, |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|v| v * c)
    }

    /// `self += other` for equal shapes.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add_assign",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a += b);
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Tensor<T>) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::shape("dot", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T> {
        Ok(self.zip_map(other, |a, b| a - b)?.max_abs())
    }

    /// Index of the maximum along `axis` (first wins on ties); the axis is
    /// removed from the result shape.
    pub fn argmax(&self, axis: usize) -> Result<Tensor<i64>> {
        if axis >= self.rank() {
            return Err(Error::shape("argmax", format!("axis {axis} out of range")));
        }
        let outer = numel_of(&self.shape[..axis]);
        let dim = self.shape[axis];
        let inner = numel_of(&self.shape[axis + 1..]);
        let mut out = vec![0i64; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = 0;
                let mut best_v = self.data[o * dim * inner + i];
                for k in 1..dim {
                    let v = self.data[(o * dim + k) * inner + i];
                    if v > best_v {
                        best_v = v;
                        best = k;
                    }
                }
                out[o * inner + i] = best as i64;
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Tensor { shape, data: out })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_buffers() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        let s = Tensor::new(Vec::<usize>::new(), vec![3.5f64]).unwrap();
        assert_eq!(s.rank(), 0);
        assert_eq!(s.item(), 3.5);
    }

    #[test]
    fn permute_matches_index_formula() {
        let t = Tensor::from_fn(vec![2, 3, 4], |i| i as f64);
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(p.at(&[c, a, b]), t.at(&[a, b, c]));
                }
            }
        }
        assert!(t.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn narrow_and_concat_invert() {
        let t = Tensor::from_fn(vec![2, 5, 3], |i| i as f64);
        let a = t.narrow(1, 0, 2).unwrap();
        let b = t.narrow(1, 2, 3).unwrap();
        assert_eq!(Tensor::concat(&[&a, &b], 1).unwrap(), t);
        assert!(t.narrow(1, 4, 2).is_err());
    }

    #[test]
    fn broadcasting_and_its_adjoint() {
        let x = Tensor::from_fn(vec![2, 3, 2], |i| i as f64);
        let s = Tensor::new(vec![3, 1], vec![1.0, 10.0, 100.0]).unwrap();
        let y = x.mul(&s).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2]);
        assert_eq!(y.at(&[1, 2, 1]), x.at(&[1, 2, 1]) * 100.0);
        let back = Tensor::<f64>::ones(vec![2, 3, 2]).sum_to_shape(&[3, 1]).unwrap();
        assert_eq!(back.data(), &[4.0, 4.0, 4.0]);
        assert!(broadcast_shape(&[2, 3], &[4, 3]).is_err());
    }

    #[test]
    fn argmax_first_wins() {
        let t = Tensor::new(vec![1, 3, 2], vec![0.0, 5.0, 2.0, 5.0, 2.0, 1.0f64]).unwrap();
        let a = t.argmax(1).unwrap();
        assert_eq!(a.shape(), &[1, 2]);
        assert_eq!(a.data(), &[1, 0]);
    }
}
