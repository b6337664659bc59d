//! Four-direction flattening of a feature map and its adjoint.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The four traversal orders of an `H×W` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanDirection {
    RowFwd,
    ColFwd,
    RowRev,
    ColRev,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [Self::RowFwd, Self::ColFwd, Self::RowRev, Self::ColRev];

    /// Row-major grid offset visited at sequence position `p`.
    #[inline]
    pub fn source(self, p: usize, h: usize, w: usize) -> usize {
        let l = h * w;
        let col_major = |q: usize| (q % h) * w + q / h;
        match self {
            Self::RowFwd => p,
            Self::ColFwd => col_major(p),
            Self::RowRev => l - 1 - p,
            Self::ColRev => col_major(l - 1 - p),
        }
    }
}

fn order(h: usize, w: usize) -> [Vec<usize>; 4] {
    ScanDirection::ALL.map(|d| (0..h * w).map(|p| d.source(p, h, w)).collect())
}

fn scan_raw<T: Scalar>(x: &[T], b: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let l = h * w;
    let orders = order(h, w);
    let mut out = vec![T::zero(); b * 4 * c * l];
    for bi in 0..b {
        for (k, ord) in orders.iter().enumerate() {
            for ch in 0..c {
                let src = &x[(bi * c + ch) * l..(bi * c + ch + 1) * l];
                let dst = &mut out[((bi * 4 + k) * c + ch) * l..((bi * 4 + k) * c + ch + 1) * l];
                for (o, &s) in dst.iter_mut().zip(ord) {
                    *o = src[s];
                }
            }
        }
    }
    out
}

fn merge_raw<T: Scalar>(seqs: &[T], b: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let l = h * w;
    let orders = order(h, w);
    let mut out = vec![T::zero(); b * c * l];
    for bi in 0..b {
        for (k, ord) in orders.iter().enumerate() {
            for ch in 0..c {
                let src = &seqs[((bi * 4 + k) * c + ch) * l..((bi * 4 + k) * c + ch + 1) * l];
                let dst = &mut out[(bi * c + ch) * l..(bi * c + ch + 1) * l];
                for (&v, &s) in src.iter().zip(ord) {
                    dst[s] += v;
                }
            }
        }
    }
    out
}

fn nchw(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(shape).map_err(|_| Error::shape(op, format!("expected B×C×H×W, got {shape:?}")))
}

fn merge_dims(shape: &[usize], h: usize, w: usize) -> Result<(usize, usize)> {
    match shape {
        &[b, 4, c, l] if l == h * w => Ok((b, c)),
        _ => Err(Error::shape(
            "cross_merge",
            format!("expected B×4×C×{} for a {h}×{w} map, got {shape:?}", h * w),
        )),
    }
}

/// `B×C×H×W → B×4×C×(H·W)`: row-major, column-major, and both reversed.
pub fn cross_scan<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = nchw("cross_scan", x.shape())?;
    Tensor::new(vec![b, 4, c, h * w], scan_raw(x.data(), b, c, h, w))
}

/// `B×4×C×(H·W) → B×C×H×W`: each direction restored to grid order, then
/// summed in direction order.
pub fn cross_merge<T: Scalar>(seqs: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (b, c) = merge_dims(seqs.shape(), h, w)?;
    Tensor::new(vec![b, c, h, w], merge_raw(seqs.data(), b, c, h, w))
}

impl<T: Scalar> Tape<T> {
    pub fn cross_scan(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = nchw("cross_scan", self.shape(x))?;
        let value = cross_scan(self.value(x))?;
        Ok(self.record("cross_scan", value, &[x], move |args| {
            vec![Some(Tensor::new(vec![b, c, h, w], merge_raw(args.grad.data(), b, c, h, w)).expect("shape"))]
        }))
    }

    pub fn cross_merge(&mut self, seqs: Var, h: usize, w: usize) -> Result<Var> {
        let (b, c) = merge_dims(self.shape(seqs), h, w)?;
        let value = cross_merge(self.value(seqs), h, w)?;
        Ok(self.record("cross_merge", value, &[seqs], move |args| {
            vec![Some(Tensor::new(vec![b, 4, c, h * w], scan_raw(args.grad.data(), b, c, h, w)).expect("shape"))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_orders() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let s = cross_scan(&x).unwrap();
        assert_eq!(s.shape(), &[1, 4, 1, 4]);
        assert_eq!(s.data(), &[1., 2., 3., 4., 1., 3., 2., 4., 4., 3., 2., 1., 4., 2., 3., 1.]);
    }

    #[test]
    fn single_pixel_directions_agree() {
        let x = Tensor::new(vec![1, 3, 1, 1], vec![1.0f64, -2.0, 0.5]).unwrap();
        let s = cross_scan(&x).unwrap();
        for k in 1..4 {
            assert_eq!(s.narrow(1, k, 1).unwrap(), s.narrow(1, 0, 1).unwrap());
        }
    }

    #[test]
    fn merge_of_one_direction_restores_layout() {
        let x = Tensor::from_fn(vec![2, 3, 3, 5], |i| i as f64 * 0.25);
        let s = cross_scan(&x).unwrap();
        for k in 0..4 {
            let only_k = Tensor::from_fn(s.shape().to_vec(), |i| {
                if (i / (3 * 15)) % 4 == k {
                    s.data()[i]
                } else {
                    0.0
                }
            });
            assert_eq!(cross_merge(&only_k, 3, 5).unwrap(), x);
        }
        assert_eq!(cross_merge(&s, 3, 5).unwrap(), x.scale(4.0));
        assert!(cross_merge(&s, 5, 3).is_ok());
        assert!(cross_merge(&s, 4, 4).is_err());
    }
}
