use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Non-overlapping square window, or the whole plane.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolWindow {
    Size(usize),
    Global,
}

struct PoolGeom {
    planes: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    out_shape: Vec<usize>,
}

impl PoolGeom {
    fn new(shape: &[usize], window: PoolWindow) -> Result<Self> {
        if shape.len() != 4 {
            return Err(Error::shape("pool2d", format!("expected NCHW input, got {shape:?}")));
        }
        let (h, w) = (shape[2], shape[3]);
        let (kh, kw) = match window {
            PoolWindow::Global => (h, w),
            PoolWindow::Size(0) => {
                return Err(Error::InvalidArgument("pool window must be positive".into()))
            }
            PoolWindow::Size(k) => {
                if h % k != 0 || w % k != 0 {
                    return Err(Error::shape(
                        "pool2d",
                        format!("spatial {h}x{w} not divisible by window {k}"),
                    ));
                }
                (k, k)
            }
        };
        Ok(PoolGeom {
            planes: shape[0] * shape[1],
            h,
            w,
            kh,
            kw,
            out_shape: vec![shape[0], shape[1], h / kh, w / kw],
        })
    }

    fn oh(&self) -> usize {
        self.h / self.kh
    }

    fn ow(&self) -> usize {
        self.w / self.kw
    }
}

/// Returns pooled values and, for max pooling, the flat input index of each
/// selected element (first maximum wins).
fn pool_forward<T: Scalar>(g: &PoolGeom, x: &[T], kind: PoolKind) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (g.oh(), g.ow());
    let mut out = Vec::with_capacity(g.planes * oh * ow);
    let mut arg = Vec::new();
    let inv = T::one() / T::lit((g.kh * g.kw) as f64);
    for p in 0..g.planes {
        let base = p * g.h * g.w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_at = 0;
                let mut sum = T::zero();
                for i in 0..g.kh {
                    let row = base + (oy * g.kh + i) * g.w + ox * g.kw;
                    for (j, &v) in x[row..row + g.kw].iter().enumerate() {
                        if v > best {
                            best = v;
                            best_at = row + j;
                        }
                        sum += v;
                    }
                }
                match kind {
                    PoolKind::Max => {
                        out.push(best);
                        arg.push(best_at);
                    }
                    PoolKind::Avg => out.push(sum * inv),
                }
            }
        }
    }
    (out, arg)
}

pub fn pool2d<T: Scalar>(input: &Tensor<T>, kind: PoolKind, window: PoolWindow) -> Result<Tensor<T>> {
    let g = PoolGeom::new(input.shape(), window)?;
    let (out, _) = pool_forward(&g, input.data(), kind);
    Tensor::new(g.out_shape.clone(), out)
}

impl<T: Scalar> Tape<T> {
    pub fn pool2d(&mut self, x: Var, kind: PoolKind, window: PoolWindow) -> Result<Var> {
        let g = PoolGeom::new(self.shape(x), window)?;
        let (out, arg) = pool_forward(&g, self.value(x).data(), kind);
        let value = Tensor::new(g.out_shape.clone(), out)?;
        let in_shape = self.shape(x).to_vec();
        Ok(self.record("pool2d", value, &[x], move |args| {
            let gout = args.grad.data();
            let mut gx = vec![T::zero(); args.inputs[0].numel()];
            match kind {
                PoolKind::Max => {
                    for (&at, &gv) in arg.iter().zip(gout) {
                        gx[at] += gv;
                    }
                }
                PoolKind::Avg => {
                    let inv = T::one() / T::lit((g.kh * g.kw) as f64);
                    let (oh, ow) = (g.oh(), g.ow());
                    for p in 0..g.planes {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = gout[(p * oh + oy) * ow + ox] * inv;
                                for i in 0..g.kh {
                                    let row = p * g.h * g.w + (oy * g.kh + i) * g.w + ox * g.kw;
                                    gx[row..row + g.kw].iter_mut().for_each(|v| *v += gv);
                                }
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::new(in_shape.clone(), gx).expect("shape"))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square() -> Tensor<f64> {
        Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn max_and_global_average() {
        let m = pool2d(&square(), PoolKind::Max, PoolWindow::Size(2)).unwrap();
        assert_eq!(m.shape(), &[1, 1, 1, 1]);
        assert_eq!(m.data(), &[4.0]);
        let a = pool2d(&square(), PoolKind::Avg, PoolWindow::Global).unwrap();
        assert_eq!(a.data(), &[2.5]);
    }

    #[test]
    fn stage_downsampling_shape() {
        let x = Tensor::<f32>::zeros(vec![1, 48, 128, 128]);
        let y = pool2d(&x, PoolKind::Max, PoolWindow::Size(2)).unwrap();
        assert_eq!(y.shape(), &[1, 48, 64, 64]);
    }

    #[test]
    fn indivisible_extent_is_an_error() {
        let x = Tensor::<f64>::zeros(vec![1, 1, 3, 4]);
        assert!(pool2d(&x, PoolKind::Max, PoolWindow::Size(2)).is_err());
        assert!(pool2d(&x, PoolKind::Max, PoolWindow::Global).is_ok());
    }

    #[test]
    fn max_gradient_routes_to_argmax() {
        let mut tape = Tape::new();
        let x = tape.leaf(square(), true);
        let y = tape.pool2d(x, PoolKind::Max, PoolWindow::Size(2)).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);
    }
}
