//! 2-D convolution (cross-correlation), its transpose, and the im2col
//! machinery both share.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{gemm, MatRef};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

impl Conv2dSpec {
    /// Stride 1 with the padding that preserves spatial size for odd `k`.
    pub fn same(k: usize) -> Self {
        Conv2dSpec {
            stride: 1,
            padding: k / 2,
            groups: 1,
        }
    }

    pub fn depthwise(k: usize, channels: usize) -> Self {
        Conv2dSpec {
            groups: channels,
            ..Self::same(k)
        }
    }
}

/// Geometry of one convolution: a `c×h×w` image sampled by a `kh×kw`
/// window onto an `oh×ow` grid.
#[derive(Clone, Copy, Debug)]
struct Window {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Window {
    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Input column index for output column `o` and kernel column `j`.
    #[inline]
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let v = (o * self.stride + k) as isize - self.pad as isize;
        (v >= 0 && (v as usize) < extent).then_some(v as usize)
    }

    fn im2col<T: Scalar>(&self, img: &[T], col: &mut [T]) {
        let cols = self.col_cols();
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * cols;
                    for oy in 0..self.oh {
                        let dst = &mut col[row + oy * self.ow..row + (oy + 1) * self.ow];
                        match self.src(oy, i, self.h) {
                            None => dst.iter_mut().for_each(|v| *v = T::zero()),
                            Some(y) => {
                                let line = &img[(c * self.h + y) * self.w..(c * self.h + y + 1) * self.w];
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    *d = match self.src(ox, j, self.w) {
                                        Some(x) => line[x],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col`: scatters columns back, accumulating.
    fn col2im<T: Scalar>(&self, col: &[T], img: &mut [T]) {
        let cols = self.col_cols();
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * cols;
                    for oy in 0..self.oh {
                        let Some(y) = self.src(oy, i, self.h) else { continue };
                        let src = &col[row + oy * self.ow..row + (oy + 1) * self.ow];
                        let line = &mut img[(c * self.h + y) * self.w..(c * self.h + y + 1) * self.w];
                        for (ox, &v) in src.iter().enumerate() {
                            if let Some(x) = self.src(ox, j, self.w) {
                                line[x] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn out_extent(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad >= k).then(|| (size + 2 * pad - k) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    ic: usize,
    oc: usize,
    groups: usize,
    win: Window,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], bias: Option<&[usize]>, spec: Conv2dSpec) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected NCHW input and OIHW weight, got {x:?} and {w:?}"),
            ));
        }
        if spec.stride == 0 || spec.groups == 0 {
            return Err(Error::InvalidArgument("conv2d stride and groups must be positive".into()));
        }
        let (n, ic, h, wd) = (x[0], x[1], x[2], x[3]);
        let (oc, icg, kh, kw) = (w[0], w[1], w[2], w[3]);
        if ic % spec.groups != 0 || oc % spec.groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("channels in={ic} out={oc} not divisible by groups={}", spec.groups),
            ));
        }
        if icg != ic / spec.groups {
            return Err(Error::shape(
                "conv2d",
                format!("weight expects {icg} input channels per group, input has {}", ic / spec.groups),
            ));
        }
        if let Some(b) = bias {
            if b != [oc] {
                return Err(Error::shape("conv2d", format!("bias shape {b:?}, expected [{oc}]")));
            }
        }
        let (Some(oh), Some(ow)) = (
            out_extent(h, kh, spec.stride, spec.padding),
            out_extent(wd, kw, spec.stride, spec.padding),
        ) else {
            return Err(Error::shape(
                "conv2d",
                format!("padded input {h}x{wd} (pad {}) smaller than kernel {kh}x{kw}", spec.padding),
            ));
        };
        Ok(ConvGeom {
            n,
            ic,
            oc,
            groups: spec.groups,
            win: Window {
                c: icg,
                h,
                w: wd,
                kh,
                kw,
                stride: spec.stride,
                pad: spec.padding,
                oh,
                ow,
            },
        })
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.oc, self.win.oh, self.win.ow]
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.ic && self.groups == self.oc
    }

    fn ocg(&self) -> usize {
        self.oc / self.groups
    }
}

fn depthwise_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], out: &mut [T]) {
    let win = g.win;
    let (hw, ohw, kk) = (win.h * win.w, win.oh * win.ow, win.kh * win.kw);
    for n in 0..g.n {
        for c in 0..g.ic {
            let img = &x[(n * g.ic + c) * hw..(n * g.ic + c + 1) * hw];
            let k = &w[c * kk..(c + 1) * kk];
            let dst = &mut out[(n * g.oc + c) * ohw..(n * g.oc + c + 1) * ohw];
            for i in 0..win.kh {
                for oy in 0..win.oh {
                    let Some(y) = win.src(oy, i, win.h) else { continue };
                    let line = &img[y * win.w..(y + 1) * win.w];
                    let drow = &mut dst[oy * win.ow..(oy + 1) * win.ow];
                    for j in 0..win.kw {
                        let kv = k[i * win.kw + j];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            if let Some(xx) = win.src(ox, j, win.w) {
                                *d += kv * line[xx];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gout: &[T],
    gx: Option<&mut [T]>,
    gw: Option<&mut [T]>,
) {
    let win = g.win;
    let (hw, ohw, kk) = (win.h * win.w, win.oh * win.ow, win.kh * win.kw);
    let mut gx = gx;
    let mut gw = gw;
    for n in 0..g.n {
        for c in 0..g.ic {
            let base_in = (n * g.ic + c) * hw;
            let go = &gout[(n * g.oc + c) * ohw..(n * g.oc + c + 1) * ohw];
            for i in 0..win.kh {
                for oy in 0..win.oh {
                    let Some(y) = win.src(oy, i, win.h) else { continue };
                    let grow = &go[oy * win.ow..(oy + 1) * win.ow];
                    for j in 0..win.kw {
                        let kidx = c * kk + i * win.kw + j;
                        let mut acc = T::zero();
                        for (ox, &gv) in grow.iter().enumerate() {
                            if let Some(xx) = win.src(ox, j, win.w) {
                                let at = base_in + y * win.w + xx;
                                acc += gv * x[at];
                                if let Some(gx) = gx.as_deref_mut() {
                                    gx[at] += gv * w[kidx];
                                }
                            }
                        }
                        if let Some(gw) = gw.as_deref_mut() {
                            gw[kidx] += acc;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], n: usize, per_channel: usize) {
    let c = bias.len();
    for b in 0..n {
        for (ch, &bv) in bias.iter().enumerate() {
            let s = (b * c + ch) * per_channel;
            out[s..s + per_channel].iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn bias_grad<T: Scalar>(gout: &[T], n: usize, c: usize, per_channel: usize) -> Vec<T> {
    let mut gb = vec![T::zero(); c];
    for b in 0..n {
        for (ch, acc) in gb.iter_mut().enumerate() {
            let s = (b * c + ch) * per_channel;
            *acc += gout[s..s + per_channel].iter().copied().sum::<T>();
        }
    }
    gb
}

fn conv_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let win = g.win;
    let (hw, ohw) = (win.h * win.w, win.oh * win.ow);
    let mut out = vec![T::zero(); g.n * g.oc * ohw];
    if g.is_depthwise() {
        depthwise_forward(g, x, w, &mut out);
    } else {
        let (rows, ocg) = (win.col_rows(), g.ocg());
        let mut col = if win.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * ohw] };
        for n in 0..g.n {
            for grp in 0..g.groups {
                let img = &x[(n * g.ic + grp * win.c) * hw..(n * g.ic + (grp + 1) * win.c) * hw];
                let cols: &[T] = if win.is_pointwise() {
                    img
                } else {
                    win.im2col(img, &mut col);
                    &col
                };
                let wg = &w[grp * ocg * rows..(grp + 1) * ocg * rows];
                let dst = &mut out[(n * g.oc + grp * ocg) * ohw..(n * g.oc + (grp + 1) * ocg) * ohw];
                gemm(MatRef::new(wg, ocg, rows), MatRef::new(cols, rows, ohw), dst, false);
            }
        }
    }
    if let Some(b) = bias {
        add_bias(&mut out, b, g.n, ohw);
    }
    out
}

/// Returns (grad input, grad weight) as requested.
fn conv_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gout: &[T],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let win = g.win;
    let (hw, ohw) = (win.h * win.w, win.oh * win.ow);
    let mut gx = need_x.then(|| vec![T::zero(); g.n * g.ic * hw]);
    let mut gw = need_w.then(|| vec![T::zero(); w.len()]);
    if g.is_depthwise() {
        depthwise_backward(g, x, w, gout, gx.as_deref_mut(), gw.as_deref_mut());
        return (gx, gw);
    }
    let (rows, ocg) = (win.col_rows(), g.ocg());
    let mut col = vec![T::zero(); rows * ohw];
    for n in 0..g.n {
        for grp in 0..g.groups {
            let in_range = (n * g.ic + grp * win.c) * hw..(n * g.ic + (grp + 1) * win.c) * hw;
            let go = &gout[(n * g.oc + grp * ocg) * ohw..(n * g.oc + (grp + 1) * ocg) * ohw];
            let wg = &w[grp * ocg * rows..(grp + 1) * ocg * rows];
            if let Some(gx) = gx.as_deref_mut() {
                let dst = &mut gx[in_range.clone()];
                if win.is_pointwise() {
                    gemm(MatRef::new(wg, ocg, rows).t(), MatRef::new(go, ocg, ohw), dst, true);
                } else {
                    gemm(MatRef::new(wg, ocg, rows).t(), MatRef::new(go, ocg, ohw), &mut col, false);
                    win.col2im(&col, dst);
                }
            }
            if let Some(gw) = gw.as_deref_mut() {
                let img = &x[in_range];
                let cols: &[T] = if win.is_pointwise() {
                    img
                } else {
                    win.im2col(img, &mut col);
                    &col
                };
                let dst = &mut gw[grp * ocg * rows..(grp + 1) * ocg * rows];
                gemm(MatRef::new(go, ocg, ohw), MatRef::new(cols, rows, ohw).t(), dst, true);
            }
        }
    }
    (gx, gw)
}

/// 2-D cross-correlation. Input `N×IC×H×W`, weight `OC×(IC/groups)×KH×KW`.
/// With `groups == IC == OC` this is a depthwise convolution.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: Conv2dSpec,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), weight.shape(), bias.map(|b| b.shape()), spec)?;
    let out = conv_forward(&g, input.data(), weight.data(), bias.map(|b| b.data()));
    Tensor::new(g.out_shape(), out)
}

/// Geometry of a transposed convolution: the image is the *output*
/// (`OC×OH×OW`) and the input grid is the window grid.
#[derive(Clone, Copy, Debug)]
struct TransposedGeom {
    n: usize,
    ic: usize,
    oc: usize,
    win: Window,
}

impl TransposedGeom {
    fn new(x: &[usize], w: &[usize], bias: Option<&[usize]>, stride: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::shape(
                "transposed_conv2d",
                format!("expected NCHW input and (IC, OC, KH, KW) weight, got {x:?} and {w:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("transposed_conv2d stride must be ≥ 1".into()));
        }
        if x[1] != w[0] {
            return Err(Error::shape(
                "transposed_conv2d",
                format!("input has {} channels, weight expects {}", x[1], w[0]),
            ));
        }
        if let Some(b) = bias {
            if b != [w[1]] {
                return Err(Error::shape("transposed_conv2d", format!("bias shape {b:?}, expected [{}]", w[1])));
            }
        }
        let (n, ic, h, wd) = (x[0], x[1], x[2], x[3]);
        let (oc, kh, kw) = (w[1], w[2], w[3]);
        Ok(TransposedGeom {
            n,
            ic,
            oc,
            win: Window {
                c: oc,
                h: (h - 1) * stride + kh,
                w: (wd - 1) * stride + kw,
                kh,
                kw,
                stride,
                pad: 0,
                oh: h,
                ow: wd,
            },
        })
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.oc, self.win.h, self.win.w]
    }
}

fn transposed_forward<T: Scalar>(g: &TransposedGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let win = g.win;
    let (grid, rows, out_hw) = (win.col_cols(), win.col_rows(), win.h * win.w);
    let mut out = vec![T::zero(); g.n * g.oc * out_hw];
    let mut col = vec![T::zero(); rows * grid];
    for n in 0..g.n {
        let xn = &x[n * g.ic * grid..(n + 1) * g.ic * grid];
        gemm(MatRef::new(w, g.ic, rows).t(), MatRef::new(xn, g.ic, grid), &mut col, false);
        win.col2im(&col, &mut out[n * g.oc * out_hw..(n + 1) * g.oc * out_hw]);
    }
    if let Some(b) = bias {
        add_bias(&mut out, b, g.n, out_hw);
    }
    out
}

/// Transposed convolution (padding 0): the exact adjoint of [`conv2d`]
/// with the same kernel. Weight is `IC×OC×KH×KW`; output spatial size is
/// `(H−1)·stride + KH`.
pub fn transposed_conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = TransposedGeom::new(input.shape(), weight.shape(), bias.map(|b| b.shape()), stride)?;
    let out = transposed_forward(&g, input.data(), weight.data(), bias.map(|b| b.data()));
    Tensor::new(g.out_shape(), out)
}

impl<T: Scalar> Tape<T> {
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let g = ConvGeom::new(self.shape(x), self.shape(w), b.map(|b| self.shape(b)), spec)?;
        let out = conv_forward(
            &g,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(g.out_shape(), out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        Ok(self.record("conv2d", value, &parents, move |args| {
            let (gx, gw) = conv_backward(
                &g,
                args.inputs[0].data(),
                args.inputs[1].data(),
                args.grad.data(),
                args.needs[0],
                args.needs[1],
            );
            let mut grads = vec![
                gx.map(|d| Tensor::new(xs.clone(), d).expect("shape")),
                gw.map(|d| Tensor::new(ws.clone(), d).expect("shape")),
            ];
            if args.inputs.len() == 3 {
                let hw = g.win.oh * g.win.ow;
                grads.push(args.needs[2].then(|| {
                    Tensor::new(vec![g.oc], bias_grad(args.grad.data(), g.n, g.oc, hw)).expect("shape")
                }));
            }
            grads
        }))
    }

    pub fn transposed_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let g = TransposedGeom::new(self.shape(x), self.shape(w), b.map(|b| self.shape(b)), stride)?;
        let out = transposed_forward(&g, self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()));
        let value = Tensor::new(g.out_shape(), out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        Ok(self.record("transposed_conv2d", value, &parents, move |args| {
            let win = g.win;
            let (grid, rows, out_hw) = (win.col_cols(), win.col_rows(), win.h * win.w);
            let (x, w, gout) = (args.inputs[0].data(), args.inputs[1].data(), args.grad.data());
            let mut gx = args.needs[0].then(|| vec![T::zero(); x.len()]);
            let mut gw = args.needs[1].then(|| vec![T::zero(); w.len()]);
            let mut col = vec![T::zero(); rows * grid];
            for n in 0..g.n {
                win.im2col(&gout[n * g.oc * out_hw..(n + 1) * g.oc * out_hw], &mut col);
                if let Some(gx) = gx.as_deref_mut() {
                    let dst = &mut gx[n * g.ic * grid..(n + 1) * g.ic * grid];
                    gemm(MatRef::new(w, g.ic, rows), MatRef::new(&col, rows, grid), dst, false);
                }
                if let Some(gw) = gw.as_deref_mut() {
                    let xn = &x[n * g.ic * grid..(n + 1) * g.ic * grid];
                    gemm(MatRef::new(xn, g.ic, grid), MatRef::new(&col, rows, grid).t(), gw, true);
                }
            }
            let mut grads = vec![
                gx.map(|d| Tensor::new(xs.clone(), d).expect("shape")),
                gw.map(|d| Tensor::new(ws.clone(), d).expect("shape")),
            ];
            if args.inputs.len() == 3 {
                grads.push(args.needs[2].then(|| {
                    Tensor::new(vec![g.oc], bias_grad(gout, g.n, g.oc, out_hw)).expect("shape")
                }));
            }
            grads
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = t(&[1, 1, 1, 1], &[1.0]);
        assert_eq!(conv2d(&x, &k, None, Conv2dSpec::default()).unwrap(), x);
    }

    #[test]
    fn all_ones_kernel_sums_window() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = t(&[1, 1, 2, 2], &[1.0; 4]);
        let y = conv2d(&x, &k, None, Conv2dSpec::default()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn first_stage_width() {
        let x = Tensor::<f32>::zeros(vec![1, 3, 256, 256]);
        let k = Tensor::<f32>::zeros(vec![48, 3, 3, 3]);
        let y = conv2d(&x, &k, None, Conv2dSpec::same(3)).unwrap();
        assert_eq!(y.shape(), &[1, 48, 256, 256]);
    }

    #[test]
    fn padding_and_stride_arithmetic() {
        let x = Tensor::<f64>::ones(vec![2, 4, 7, 5]);
        let k = Tensor::<f64>::ones(vec![6, 2, 3, 3]);
        let spec = Conv2dSpec {
            stride: 2,
            padding: 1,
            groups: 2,
        };
        let y = conv2d(&x, &k, None, spec).unwrap();
        assert_eq!(y.shape(), &[2, 6, 4, 3]);
        // centre taps see a full 2×3×3 window of ones
        assert_eq!(y.at(&[0, 0, 1, 1]), 18.0);
        // top-left corner only sees the lower-right 2×2 of each kernel
        assert_eq!(y.at(&[1, 5, 0, 0]), 8.0);
    }

    #[test]
    fn shape_errors_are_descriptive() {
        let x = Tensor::<f64>::ones(vec![1, 3, 4, 4]);
        let k = Tensor::<f64>::ones(vec![2, 2, 3, 3]);
        let err = conv2d(&x, &k, None, Conv2dSpec::default()).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
        let k = Tensor::<f64>::ones(vec![2, 3, 5, 5]);
        assert!(conv2d(&x, &k, None, Conv2dSpec::default()).is_err());
        let bad_groups = Conv2dSpec {
            groups: 2,
            ..Conv2dSpec::default()
        };
        assert!(conv2d(&x, &Tensor::ones(vec![2, 1, 1, 1]), None, bad_groups).is_err());
    }

    #[test]
    fn depthwise_matches_grouped_reference() {
        // depthwise fast path against the same conv expressed per channel
        let x = Tensor::from_fn(vec![2, 3, 5, 4], |i| ((i * 37) % 11) as f64 - 5.0);
        let k = Tensor::from_fn(vec![3, 1, 3, 3], |i| ((i * 13) % 7) as f64 - 3.0);
        let b = t(&[3], &[0.5, -1.0, 2.0]);
        let y = conv2d(&x, &k, Some(&b), Conv2dSpec::depthwise(3, 3)).unwrap();
        for c in 0..3 {
            let xc = x.narrow(1, c, 1).unwrap();
            let kc = k.narrow(0, c, 1).unwrap();
            let bc = b.narrow(0, c, 1).unwrap();
            let yc = conv2d(&xc, &kc, Some(&bc), Conv2dSpec::same(3)).unwrap();
            assert_eq!(y.narrow(1, c, 1).unwrap(), yc);
        }
    }

    #[test]
    fn transposed_single_site_broadcast() {
        let x = t(&[1, 1, 1, 1], &[5.0]);
        let k = t(&[1, 1, 2, 2], &[1.0; 4]);
        let y = transposed_conv2d(&x, &k, None, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[5.0; 4]);
    }

    #[test]
    fn transposed_doubles_resolution() {
        let x = Tensor::<f64>::ones(vec![1, 6, 16, 16]);
        let k = Tensor::<f64>::ones(vec![6, 3, 2, 2]);
        let y = transposed_conv2d(&x, &k, None, 2).unwrap();
        assert_eq!(y.shape(), &[1, 3, 32, 32]);
        assert!(transposed_conv2d(&x, &k, None, 0).is_err());
    }
}
