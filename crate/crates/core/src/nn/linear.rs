use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{gemm, MatRef};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn check(x: &[usize], w: &[usize], b: Option<&[usize]>) -> Result<(usize, usize, usize)> {
    if w.len() != 2 {
        return Err(Error::shape("linear", format!("weight must be OUT×IN, got {w:?}")));
    }
    let (out, inp) = (w[0], w[1]);
    if x.last() != Some(&inp) {
        return Err(Error::shape("linear", format!("input {x:?} does not end in {inp}")));
    }
    if let Some(b) = b {
        if b != [out] {
            return Err(Error::shape("linear", format!("bias {b:?}, expected [{out}]")));
        }
    }
    let rows = x[..x.len() - 1].iter().product();
    Ok((rows, inp, out))
}

fn forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, rows: usize, inp: usize, out: usize) -> Vec<T> {
    let mut y = vec![T::zero(); rows * out];
    if let Some(b) = b {
        for r in 0..rows {
            y[r * out..(r + 1) * out].copy_from_slice(b);
        }
    }
    gemm(MatRef::new(x, rows, inp), MatRef::new(w, out, inp).t(), &mut y, b.is_some());
    y
}

/// Affine map over the last dimension: `y = x·Wᵀ + b`, batched over all
/// leading dimensions.
pub fn linear<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (rows, inp, out) = check(input.shape(), weight.shape(), bias.map(|b| b.shape()))?;
    let y = forward(input.data(), weight.data(), bias.map(|b| b.data()), rows, inp, out);
    let mut shape = input.shape().to_vec();
    *shape.last_mut().expect("rank ≥ 1") = out;
    Tensor::new(shape, y)
}

impl<T: Scalar> Tape<T> {
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let value = linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let (rows, inp, out) = check(self.shape(x), self.shape(w), b.map(|b| self.shape(b)))?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        Ok(self.record("linear", value, &parents, move |args| {
            let (xd, wd, g) = (args.inputs[0].data(), args.inputs[1].data(), args.grad.data());
            let gx = args.needs[0].then(|| {
                let mut gx = vec![T::zero(); rows * inp];
                gemm(MatRef::new(g, rows, out), MatRef::new(wd, out, inp), &mut gx, false);
                Tensor::new(xs.clone(), gx).expect("shape")
            });
            let gw = args.needs[1].then(|| {
                let mut gw = vec![T::zero(); out * inp];
                gemm(MatRef::new(g, rows, out).t(), MatRef::new(xd, rows, inp), &mut gw, false);
                Tensor::new(ws.clone(), gw).expect("shape")
            });
            let mut grads = vec![gx, gw];
            if args.inputs.len() == 3 {
                grads.push(args.needs[2].then(|| {
                    let mut gb = vec![T::zero(); out];
                    for r in 0..rows {
                        for (acc, &v) in gb.iter_mut().zip(&g[r * out..(r + 1) * out]) {
                            *acc += v;
                        }
                    }
                    Tensor::new(vec![out], gb).expect("shape")
                }));
            }
            grads
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight_zero_bias() {
        let x = Tensor::from_fn(vec![2, 3, 4], |i| i as f64 * 0.5 - 3.0);
        let eye = Tensor::from_fn(vec![4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        let y = linear(&x, &eye, Some(&Tensor::zeros(vec![4]))).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn hand_multiply() {
        let x = Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, -1.0]).unwrap();
        let y = linear(&x, &w, Some(&Tensor::zeros(vec![2]))).unwrap();
        assert_eq!(y.data(), &[3.0, -1.0]);
    }

    #[test]
    fn expands_channels_fourfold() {
        let c = 6;
        let x = Tensor::<f32>::ones(vec![2, 3, 3, c]);
        let w = Tensor::<f32>::ones(vec![4 * c, c]);
        assert_eq!(linear(&x, &w, None).unwrap().shape(), &[2, 3, 3, 4 * c]);
        assert!(linear(&x, &Tensor::ones(vec![4, c + 1]), None).is_err());
    }
}
