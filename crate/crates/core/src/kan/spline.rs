use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Uniform knot vector of order `k` with `g` cells over `[lo, hi]`,
/// extended by `k` cells on each side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplineGrid {
    pub k: usize,
    #[serde(rename = "G")]
    pub g: usize,
    pub range: [f64; 2],
}

impl Default for SplineGrid {
    fn default() -> Self {
        SplineGrid {
            k: 3,
            g: 5,
            range: [-1.0, 1.0],
        }
    }
}

impl SplineGrid {
    pub fn new(k: usize, g: usize, lo: f64, hi: f64) -> Result<Self> {
        let grid = SplineGrid { k, g, range: [lo, hi] };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.g == 0 || !(self.range[0] < self.range[1]) {
            return Err(Error::InvalidArgument(format!(
                "spline grid needs G ≥ 1 and lo < hi, got G={} range={:?}",
                self.g, self.range
            )));
        }
        Ok(())
    }

    /// `G + k`.
    pub fn num_basis(&self) -> usize {
        self.g + self.k
    }

    pub fn step(&self) -> f64 {
        (self.range[1] - self.range[0]) / self.g as f64
    }

    /// The `G + 2k + 1` knots `t_j = lo + (j − k)·step`.
    pub fn knots(&self) -> Vec<f64> {
        let h = self.step();
        (0..self.g + 2 * self.k + 1)
            .map(|j| self.range[0] + (j as f64 - self.k as f64) * h)
            .collect()
    }
}

/// `a / b`, with `0/0` (a degenerate knot span) taken as 0.
#[inline]
fn ratio<T: Scalar>(a: T, b: T) -> T {
    if b == T::zero() {
        T::zero()
    } else {
        a / b
    }
}

/// Cox–de Boor evaluation of all `G + k` order-`k` basis functions at `x`,
/// and optionally their derivatives. `knots` has `G + 2k + 1` entries.
fn eval<T: Scalar>(x: T, knots: &[T], k: usize, values: &mut [T], mut derivs: Option<&mut [T]>) {
    let m = knots.len() - 1;
    let last = m - 1;
    let mut n: Vec<T> = (0..m)
        .map(|i| {
            let inside = knots[i] <= x && (x < knots[i + 1] || (i == last && x == knots[i + 1]));
            if inside {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    let mut dn = vec![T::zero(); m];
    for p in 1..=k {
        let mut next = vec![T::zero(); m - p];
        let mut dnext = vec![T::zero(); m - p];
        for i in 0..m - p {
            let left = knots[i + p] - knots[i];
            let right = knots[i + p + 1] - knots[i + 1];
            let wl = ratio(x - knots[i], left);
            let wr = ratio(knots[i + p + 1] - x, right);
            next[i] = wl * n[i] + wr * n[i + 1];
            dnext[i] = ratio(n[i], left) + wl * dn[i] - ratio(n[i + 1], right) + wr * dn[i + 1];
        }
        n = next;
        dn = dnext;
    }
    values.copy_from_slice(&n);
    if let Some(d) = derivs.as_deref_mut() {
        d.copy_from_slice(&dn);
    }
}

fn knots_as<T: Scalar>(grid: &SplineGrid) -> Vec<T> {
    grid.knots().into_iter().map(T::lit).collect()
}

/// Basis values for every element of `x`: output shape `x.shape ++ [G+k]`.
/// Inputs outside the knot span get all-zero or partial bases.
pub fn bspline_basis<T: Scalar>(x: &Tensor<T>, grid: &SplineGrid) -> Result<Tensor<T>> {
    grid.validate()?;
    let nb = grid.num_basis();
    let knots = knots_as::<T>(grid);
    let mut out = vec![T::zero(); x.numel() * nb];
    for (i, &v) in x.data().iter().enumerate() {
        eval(v, &knots, grid.k, &mut out[i * nb..(i + 1) * nb], None);
    }
    let mut shape = x.shape().to_vec();
    shape.push(nb);
    Tensor::new(shape, out)
}

impl<T: Scalar> Tape<T> {
    pub fn bspline_basis(&mut self, x: Var, grid: &SplineGrid) -> Result<Var> {
        grid.validate()?;
        let nb = grid.num_basis();
        let knots = knots_as::<T>(grid);
        let numel = self.value(x).numel();
        let keep = self.will_record(&[x]);
        let mut out = vec![T::zero(); numel * nb];
        let mut deriv = if keep { vec![T::zero(); numel * nb] } else { Vec::new() };
        for (i, &v) in self.value(x).data().iter().enumerate() {
            let d = keep.then(|| &mut deriv[i * nb..(i + 1) * nb]);
            eval(v, &knots, grid.k, &mut out[i * nb..(i + 1) * nb], d);
        }
        let mut shape = self.shape(x).to_vec();
        shape.push(nb);
        let value = Tensor::new(shape, out)?;
        let xs = self.shape(x).to_vec();
        Ok(self.record("bspline_basis", value, &[x], move |args| {
            let g = args.grad.data();
            let gx = (0..numel)
                .map(|i| (0..nb).map(|j| g[i * nb + j] * deriv[i * nb + j]).sum())
                .collect();
            vec![Some(Tensor::new(xs.clone(), gx).expect("shape"))]
        }))
    }
}
