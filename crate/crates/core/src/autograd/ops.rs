//! Elementwise, shape, and reduction operations on the tape.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel_of, Tensor};

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Silu,
    Sigmoid,
    Softplus,
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    // ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|), finite for any x
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Silu => x * sigmoid(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
        }
    }

    /// Derivative at `x`; relu uses 0 at the kink.
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            Activation::Softplus => sigmoid(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Silu => "silu",
            Activation::Sigmoid => "sigmoid",
            Activation::Softplus => "softplus",
        }
    }
}

/// Softmax along `axis` of a raw tensor, max-shifted.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::shape("softmax", format!("axis {axis} out of range for {:?}", x.shape())));
    }
    let shape = x.shape();
    let outer = numel_of(&shape[..axis]);
    let dim = shape[axis];
    let inner = numel_of(&shape[axis + 1..]);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * dim + k) * inner + i;
            let mut m = T::neg_infinity();
            for k in 0..dim {
                m = m.max(src[at(k)]);
            }
            let mut z = T::zero();
            for k in 0..dim {
                let e = (src[at(k)] - m).exp();
                out[at(k)] = e;
                z += e;
            }
            for k in 0..dim {
                out[at(k)] /= z;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

fn binary_grads<T: Scalar>(
    g: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    needs: &[bool],
    da: impl Fn(T, T, T) -> T,
    db: impl Fn(T, T, T) -> T,
) -> Vec<Option<Tensor<T>>> {
    // g has the broadcast shape; a and b are read broadcast to it
    let full_a = if a.shape() == g.shape() { a.clone() } else { g.zeros_like().add(a).expect("broadcast") };
    let full_b = if b.shape() == g.shape() { b.clone() } else { g.zeros_like().add(b).expect("broadcast") };
    let grad_for = |need: bool, f: &dyn Fn(T, T, T) -> T, target: &[usize]| {
        need.then(|| {
            let data: Vec<T> = g
                .data()
                .iter()
                .zip(full_a.data().iter().zip(full_b.data()))
                .map(|(&gv, (&av, &bv))| f(gv, av, bv))
                .collect();
            Tensor::new(g.shape().to_vec(), data)
                .expect("shape")
                .sum_to_shape(target)
                .expect("broadcast adjoint")
        })
    };
    vec![grad_for(needs[0], &da, a.shape()), grad_for(needs[1], &db, b.shape())]
}

impl<T: Scalar> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        Ok(self.record("add", value, &[a, b], move |args| {
            vec![
                args.needs[0].then(|| args.grad.sum_to_shape(&sa).expect("broadcast adjoint")),
                args.needs[1].then(|| args.grad.sum_to_shape(&sb).expect("broadcast adjoint")),
            ]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        Ok(self.record("sub", value, &[a, b], move |args| {
            vec![
                args.needs[0].then(|| args.grad.sum_to_shape(&sa).expect("broadcast adjoint")),
                args.needs[1].then(|| {
                    args.grad.sum_to_shape(&sb).expect("broadcast adjoint").scale(-T::one())
                }),
            ]
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.record("mul", value, &[a, b], |args| {
            binary_grads(args.grad, args.inputs[0], args.inputs[1], args.needs, |g, _, b| g * b, |g, a, _| g * a)
        }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).broadcast_with(self.value(b), |x, y| x / y)?;
        Ok(self.record("div", value, &[a, b], |args| {
            binary_grads(
                args.grad,
                args.inputs[0],
                args.inputs[1],
                args.needs,
                |g, _, b| g / b,
                |g, a, b| -g * a / (b * b),
            )
        }))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).scale(c);
        self.record("scale", value, &[a], move |args| vec![Some(args.grad.scale(c))])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|v| v + c);
        self.record("add_scalar", value, &[a], |args| vec![Some(args.grad.clone())])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.exp());
        self.record("exp", value, &[a], |args| {
            vec![Some(args.grad.zip_map(args.output, |g, y| g * y).expect("shape"))]
        })
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.ln());
        self.record("log", value, &[a], |args| {
            vec![Some(args.grad.zip_map(args.inputs[0], |g, x| g / x).expect("shape"))]
        })
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let value = self.value(a).map(|v| kind.apply(v));
        self.record(kind.name(), value, &[a], move |args| {
            vec![Some(
                args.grad
                    .zip_map(args.inputs[0], |g, x| g * kind.derivative(x))
                    .expect("shape"),
            )]
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Silu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Softplus)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let shape = self.shape(a).to_vec();
        self.record("sum", value, &[a], move |args| {
            vec![Some(Tensor::full(shape.clone(), args.grad.item()))]
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::lit(self.value(a).numel() as f64);
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    /// Sums over one axis, optionally keeping it with size 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(Error::shape("sum_axis", format!("axis {axis} out of range for {:?}", x.shape())));
        }
        let in_shape = x.shape().to_vec();
        let outer = numel_of(&in_shape[..axis]);
        let dim = in_shape[axis];
        let inner = numel_of(&in_shape[axis + 1..]);
        let mut out = vec![T::zero(); outer * inner];
        let src = x.data();
        for o in 0..outer {
            for k in 0..dim {
                let row = &src[(o * dim + k) * inner..(o * dim + k + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut shape = in_shape.clone();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.record("sum_axis", value, &[a], move |args| {
            let g = args.grad.data();
            let mut gx = vec![T::zero(); outer * dim * inner];
            for o in 0..outer {
                for k in 0..dim {
                    gx[(o * dim + k) * inner..(o * dim + k + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::new(in_shape.clone(), gx).expect("shape"))]
        }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape.to_vec())?;
        let orig = self.shape(a).to_vec();
        Ok(self.record("reshape", value, &[a], move |args| {
            vec![Some(args.grad.reshape(orig.clone()).expect("reshape adjoint"))]
        }))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(a).permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        Ok(self.record("permute", value, &[a], move |args| {
            vec![Some(args.grad.permute(&inverse).expect("permute adjoint"))]
        }))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).narrow(axis, start, len)?;
        let in_shape = self.shape(a).to_vec();
        Ok(self.record("narrow", value, &[a], move |args| {
            let outer = numel_of(&in_shape[..axis]);
            let inner = numel_of(&in_shape[axis + 1..]);
            let dim = in_shape[axis];
            let mut gx = vec![T::zero(); outer * dim * inner];
            let g = args.grad.data();
            for o in 0..outer {
                let dst = (o * dim + start) * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::new(in_shape.clone(), gx).expect("shape"))]
        }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat(&tensors, axis)?;
        let sizes: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        Ok(self.record("concat", value, parts, move |args| {
            let mut start = 0;
            sizes
                .iter()
                .zip(args.needs)
                .map(|(&len, &need)| {
                    let g = need.then(|| args.grad.narrow(axis, start, len).expect("concat adjoint"));
                    start += len;
                    g
                })
                .collect()
        }))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = softmax(self.value(a), axis)?;
        Ok(self.record("softmax", value, &[a], move |args| {
            let y = args.output;
            let shape = y.shape();
            let outer = numel_of(&shape[..axis]);
            let dim = shape[axis];
            let inner = numel_of(&shape[axis + 1..]);
            let (yd, gd) = (y.data(), args.grad.data());
            let mut gx = vec![T::zero(); yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * dim + k) * inner + i;
                    let dot: T = (0..dim).map(|k| gd[at(k)] * yd[at(k)]).sum();
                    for k in 0..dim {
                        gx[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(shape.to_vec(), gx).expect("shape"))]
        }))
    }

    /// `Σ a ⊙ w` for a fixed weight tensor; turns any output into a scalar
    /// objective with a non-degenerate gradient.
    pub fn weighted_sum(&mut self, a: Var, weights: Tensor<T>) -> Result<Var> {
        let w = self.constant(weights);
        let prod = self.mul(a, w)?;
        Ok(self.sum(prod))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn activation_values() {
        assert_eq!(Activation::Relu.apply(-2.0f64), 0.0);
        assert_eq!(Activation::Relu.apply(3.0f64), 3.0);
        assert_eq!(Activation::Silu.apply(0.0f64), 0.0);
        // 1 / (1 + e^-1)
        let expected_silu1 = 1.0 / (1.0 + (-1.0f64).exp());
        assert!(close(Activation::Silu.apply(1.0f64), expected_silu1, 1e-15));
        assert!(close(expected_silu1, 0.731_058_578_630_004_9, 1e-15));
        assert!(close(Activation::Softplus.apply(0.0f64), std::f64::consts::LN_2, 1e-15));
        // overflow-safe branch
        assert_eq!(Activation::Softplus.apply(1000.0f64), 1000.0);
        assert!(Activation::Softplus.apply(-1000.0f64) >= 0.0);
        assert!(Activation::Sigmoid.apply(-1000.0f64).is_finite());
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::new(vec![2], vec![0.0f64, 0.0]).unwrap();
        assert_eq!(softmax(&t, 0).unwrap().data(), &[0.5, 0.5]);
        let t = Tensor::new(vec![2], vec![1000.0f64, 0.0]).unwrap();
        let s = softmax(&t, 0).unwrap();
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] >= 0.0 && s.data()[1] < 1e-300);
        let t = Tensor::new(vec![3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let s = softmax(&t, 0).unwrap();
        // direct normalization: e^k / (e + e^2 + e^3)
        let z: f64 = (1..=3).map(|k| (k as f64).exp()).sum();
        for (k, &v) in s.data().iter().enumerate() {
            assert!(close(v, ((k + 1) as f64).exp() / z, 1e-15));
        }
        let expected = [0.09003, 0.24473, 0.66524];
        for (v, e) in s.data().iter().zip(expected) {
            assert!(close(*v, e, 1e-5));
        }
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn silu_gradient_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(0.0), true);
        let y = tape.silu(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 0.5);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let mut tape = Tape::<f64>::new();
        let g0 = tape.leaf(Tensor::scalar(1.7), true);
        let f = tape.add(g0, g0).unwrap();
        let grads = tape.backward(f).unwrap();
        assert_eq!(grads.get(g0).unwrap().item(), 2.0);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![2]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn constants_record_no_rule() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::ones(vec![2]));
        let y = tape.exp(c);
        assert!(!tape.requires_grad(y));
        let mut inference = Tape::<f64>::inference();
        let x = inference.leaf(Tensor::ones(vec![2]), true);
        assert!(!inference.requires_grad(x));
    }
}
