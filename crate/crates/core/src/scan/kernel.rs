//! Discretization and the diagonal linear recurrence
//! `h_t = ā_t ⊙ h_{t−1} + b̄_t x_t`, `y_t = C_t·h_t + D ⊙ x_t`.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How the recurrence is evaluated. Both give the same result up to
/// rounding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ScanMode {
    /// One step at a time.
    #[default]
    Naive,
    /// Fixed-size chunks scanned independently from a zero state, then
    /// stitched together by propagating each chunk's final state.
    Blocked,
}

pub const SCAN_CHUNK: usize = 16;

impl std::str::FromStr for ScanMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(ScanMode::Naive),
            "blocked" => Ok(ScanMode::Blocked),
            _ => Err(Error::InvalidArgument(format!("unknown scan mode {s:?} (naive|blocked)"))),
        }
    }
}

/// Zero-order hold for `A = −exp(a_log)`, Euler for the input matrix:
/// `ā = exp(Δ·A)`, `b̄ = Δ·B`. Shapes `B×L×D`, `D×N`, `B×L×N` give two
/// `B×L×D×N` tensors.
pub fn discretize<T: Scalar>(delta: &Tensor<T>, a_log: &Tensor<T>, b_in: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let dims = Dims::new(delta.shape(), a_log.shape(), b_in.shape())?;
    if let Some(bad) = delta.data().iter().find(|&&v| !(v > T::zero())) {
        return Err(Error::InvalidArgument(format!("discretize: step sizes must be positive, found {bad}")));
    }
    let Dims { b, l, d, n } = dims;
    let mut a_bar = Vec::with_capacity(b * l * d * n);
    let mut b_bar = Vec::with_capacity(b * l * d * n);
    for bt in 0..b * l {
        for dd in 0..d {
            let dt = delta.data()[bt * d + dd];
            for nn in 0..n {
                let a = -a_log.data()[dd * n + nn].exp();
                a_bar.push((dt * a).exp());
                b_bar.push(dt * b_in.data()[bt * n + nn]);
            }
        }
    }
    let shape = vec![b, l, d, n];
    Ok((Tensor::new(shape.clone(), a_bar)?, Tensor::new(shape, b_bar)?))
}

#[derive(Clone, Copy, Debug)]
struct Dims {
    b: usize,
    l: usize,
    d: usize,
    n: usize,
}

impl Dims {
    fn new(delta: &[usize], a_log: &[usize], b_in: &[usize]) -> Result<Self> {
        let bad = || {
            Error::shape(
                "selective_scan",
                format!("expected delta B×L×D, a_log D×N, B B×L×N; got {delta:?}, {a_log:?}, {b_in:?}"),
            )
        };
        let ([b, l, d], [d2, n], [b2, l2, n2]) = (
            <[usize; 3]>::try_from(delta).map_err(|_| bad())?,
            <[usize; 2]>::try_from(a_log).map_err(|_| bad())?,
            <[usize; 3]>::try_from(b_in).map_err(|_| bad())?,
        );
        if d != d2 || b != b2 || l != l2 || n != n2 {
            return Err(bad());
        }
        Ok(Dims { b, l, d, n })
    }
}

/// One batch element, already discretized: `abar` and `bx = b̄·x` are
/// `L×D×N`, `c` is `L×N`, `x` is `L×D`. Writes `y` (`L×D`) and, if asked,
/// every state `h_t` (`L×D×N`).
struct Seq<'a, T> {
    l: usize,
    d: usize,
    n: usize,
    abar: &'a [T],
    bx: &'a [T],
    c: &'a [T],
    x: &'a [T],
    d_skip: &'a [T],
}

impl<T: Scalar> Seq<'_, T> {
    fn output(&self, t: usize, h: &[T], y: &mut [T]) {
        let (d, n) = (self.d, self.n);
        let ct = &self.c[t * n..(t + 1) * n];
        for dd in 0..d {
            let hd = &h[dd * n..(dd + 1) * n];
            let mut acc = T::zero();
            for k in 0..n {
                acc += ct[k] * hd[k];
            }
            y[t * d + dd] = acc + self.d_skip[dd] * self.x[t * d + dd];
        }
    }

    fn naive(&self, y: &mut [T], mut states: Option<&mut [T]>) {
        let dn = self.d * self.n;
        let mut h = vec![T::zero(); dn];
        for t in 0..self.l {
            let (a, bx) = (&self.abar[t * dn..(t + 1) * dn], &self.bx[t * dn..(t + 1) * dn]);
            for i in 0..dn {
                h[i] = a[i] * h[i] + bx[i];
            }
            self.output(t, &h, y);
            if let Some(s) = states.as_deref_mut() {
                s[t * dn..(t + 1) * dn].copy_from_slice(&h);
            }
        }
    }

    fn blocked(&self, chunk: usize, y: &mut [T], states: Option<&mut [T]>) {
        let dn = self.d * self.n;
        let mut local = vec![T::zero(); self.l * dn];
        let mut decay = vec![T::zero(); self.l * dn];
        let chunks: Vec<(usize, usize)> = (0..self.l).step_by(chunk).map(|s| (s, (s + chunk).min(self.l))).collect();
        // Each chunk from a zero state, with its running product of ā.
        for &(s, e) in &chunks {
            for t in s..e {
                let r = t * dn..(t + 1) * dn;
                for i in 0..dn {
                    let (a, bx) = (self.abar[r.start + i], self.bx[r.start + i]);
                    let (h_prev, p_prev) = if t == s {
                        (T::zero(), T::one())
                    } else {
                        (local[r.start - dn + i], decay[r.start - dn + i])
                    };
                    local[r.start + i] = a * h_prev + bx;
                    decay[r.start + i] = a * p_prev;
                }
            }
        }
        // Carries: the true state entering each chunk.
        let mut carries = vec![vec![T::zero(); dn]];
        for &(_, e) in &chunks[..chunks.len() - 1] {
            let prev = carries.last().expect("non-empty");
            let last = (e - 1) * dn;
            let next: Vec<T> = (0..dn).map(|i| local[last + i] + decay[last + i] * prev[i]).collect();
            carries.push(next);
        }
        let mut h = vec![T::zero(); dn];
        for (&(s, e), carry) in chunks.iter().zip(&carries) {
            for t in s..e {
                for i in 0..dn {
                    h[i] = local[t * dn + i] + decay[t * dn + i] * carry[i];
                }
                self.output(t, &h, y);
                local[t * dn..(t + 1) * dn].copy_from_slice(&h);
            }
        }
        if let Some(s) = states {
            s.copy_from_slice(&local);
        }
    }

    fn run(&self, mode: ScanMode, y: &mut [T], states: Option<&mut [T]>) {
        match mode {
            ScanMode::Naive => self.naive(y, states),
            ScanMode::Blocked => self.blocked(SCAN_CHUNK, y, states),
        }
    }
}

/// The recurrence on pre-discretized inputs: `a_bar`, `b_bar` are
/// `B×L×D×N`, `x` is `B×L×D`, `c` is `B×L×N`, `d_skip` is `D`.
pub fn scan<T: Scalar>(
    a_bar: &Tensor<T>,
    b_bar: &Tensor<T>,
    x: &Tensor<T>,
    c: &Tensor<T>,
    d_skip: &Tensor<T>,
    mode: ScanMode,
) -> Result<Tensor<T>> {
    let [b, l, d, n] = <[usize; 4]>::try_from(a_bar.shape())
        .map_err(|_| Error::shape("scan", format!("a_bar must be B×L×D×N, got {:?}", a_bar.shape())))?;
    if b_bar.shape() != a_bar.shape() || x.shape() != [b, l, d] || c.shape() != [b, l, n] || d_skip.shape() != [d] {
        return Err(Error::shape(
            "scan",
            format!(
                "inconsistent shapes: a_bar {:?}, b_bar {:?}, x {:?}, c {:?}, d_skip {:?}",
                a_bar.shape(),
                b_bar.shape(),
                x.shape(),
                c.shape(),
                d_skip.shape()
            ),
        ));
    }
    let ldn = l * d * n;
    let mut y = vec![T::zero(); b * l * d];
    for bi in 0..b {
        let xb = &x.data()[bi * l * d..(bi + 1) * l * d];
        let bx: Vec<T> = (0..ldn).map(|i| b_bar.data()[bi * ldn + i] * xb[i / n]).collect();
        let seq = Seq {
            l,
            d,
            n,
            abar: &a_bar.data()[bi * ldn..(bi + 1) * ldn],
            bx: &bx,
            c: &c.data()[bi * l * n..(bi + 1) * l * n],
            x: xb,
            d_skip: d_skip.data(),
        };
        seq.run(mode, &mut y[bi * l * d..(bi + 1) * l * d], None);
    }
    Tensor::new(vec![b, l, d], y)
}

/// Discretize-then-scan in one call. `x`, `delta`: `B×L×D`; `a_log`: `D×N`;
/// `b_in`, `c`: `B×L×N`; `d_skip`: `D`.
pub fn selective_scan<T: Scalar>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    a_log: &Tensor<T>,
    b_in: &Tensor<T>,
    c: &Tensor<T>,
    d_skip: &Tensor<T>,
    mode: ScanMode,
) -> Result<Tensor<T>> {
    let (y, _) = fused_forward(x, delta, a_log, b_in, c, d_skip, mode, false)?;
    Ok(y)
}

#[allow(clippy::too_many_arguments)]
fn fused_forward<T: Scalar>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    a_log: &Tensor<T>,
    b_in: &Tensor<T>,
    c: &Tensor<T>,
    d_skip: &Tensor<T>,
    mode: ScanMode,
    keep_states: bool,
) -> Result<(Tensor<T>, Vec<T>)> {
    let Dims { b, l, d, n } = Dims::new(delta.shape(), a_log.shape(), b_in.shape())?;
    if l == 0 {
        return Err(Error::InvalidArgument("selective_scan: empty sequence".into()));
    }
    if x.shape() != delta.shape() || c.shape() != b_in.shape() || d_skip.shape() != [d] {
        return Err(Error::shape(
            "selective_scan",
            format!(
                "x {:?} vs delta {:?}, C {:?} vs B {:?}, d_skip {:?} vs D={d}",
                x.shape(),
                delta.shape(),
                c.shape(),
                b_in.shape(),
                d_skip.shape()
            ),
        ));
    }
    let a: Vec<T> = a_log.data().iter().map(|&v| -v.exp()).collect();
    let ldn = l * d * n;
    let mut y = vec![T::zero(); b * l * d];
    let mut states = if keep_states { vec![T::zero(); b * ldn] } else { Vec::new() };
    let mut abar = vec![T::zero(); ldn];
    let mut bx = vec![T::zero(); ldn];
    for bi in 0..b {
        let xb = &x.data()[bi * l * d..(bi + 1) * l * d];
        let db = &delta.data()[bi * l * d..(bi + 1) * l * d];
        let bb = &b_in.data()[bi * l * n..(bi + 1) * l * n];
        for t in 0..l {
            for dd in 0..d {
                let (dt, xv) = (db[t * d + dd], xb[t * d + dd]);
                for k in 0..n {
                    let i = (t * d + dd) * n + k;
                    abar[i] = (dt * a[dd * n + k]).exp();
                    bx[i] = dt * bb[t * n + k] * xv;
                }
            }
        }
        let seq = Seq {
            l,
            d,
            n,
            abar: &abar,
            bx: &bx,
            c: &c.data()[bi * l * n..(bi + 1) * l * n],
            x: xb,
            d_skip: d_skip.data(),
        };
        let st = keep_states.then(|| &mut states[bi * ldn..(bi + 1) * ldn]);
        seq.run(mode, &mut y[bi * l * d..(bi + 1) * l * d], st);
    }
    Ok((Tensor::new(vec![b, l, d], y)?, states))
}

impl<T: Scalar> Tape<T> {
    /// Fused selective scan with an analytic backward pass through the
    /// recurrence. Inputs as in [`selective_scan`].
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        x: Var,
        delta: Var,
        a_log: Var,
        b_in: Var,
        c: Var,
        d_skip: Var,
        mode: ScanMode,
    ) -> Result<Var> {
        let parents = [x, delta, a_log, b_in, c, d_skip];
        let keep = self.will_record(&parents);
        let (y, states) = fused_forward(
            self.value(x),
            self.value(delta),
            self.value(a_log),
            self.value(b_in),
            self.value(c),
            self.value(d_skip),
            mode,
            keep,
        )?;
        let Dims { b, l, d, n } = Dims::new(self.shape(delta), self.shape(a_log), self.shape(b_in))?;
        Ok(self.record("selective_scan", y, &parents, move |args| {
            let [x, delta, a_log, b_in, c, d_skip] = [0, 1, 2, 3, 4, 5].map(|i| args.inputs[i].data());
            let gy = args.grad.data();
            let a: Vec<T> = a_log.iter().map(|&v| -v.exp()).collect();
            let ldn = l * d * n;
            let mut gx = vec![T::zero(); x.len()];
            let mut gdelta = vec![T::zero(); delta.len()];
            let mut ga = vec![T::zero(); a.len()];
            let mut gb = vec![T::zero(); b_in.len()];
            let mut gc = vec![T::zero(); c.len()];
            let mut gd = vec![T::zero(); d];
            let mut gh = vec![T::zero(); d * n];
            for bi in 0..b {
                let hs = &states[bi * ldn..(bi + 1) * ldn];
                gh.iter_mut().for_each(|v| *v = T::zero());
                for t in (0..l).rev() {
                    let row = bi * l + t;
                    let (ct, bt) = (&c[row * n..(row + 1) * n], &b_in[row * n..(row + 1) * n]);
                    for dd in 0..d {
                        let (g, xv, dt) = (gy[row * d + dd], x[row * d + dd], delta[row * d + dd]);
                        gx[row * d + dd] += g * d_skip[dd];
                        gd[dd] += g * xv;
                        let h_t = &hs[(t * d + dd) * n..(t * d + dd + 1) * n];
                        let mut gdt = T::zero();
                        let mut gxv = T::zero();
                        for k in 0..n {
                            gc[row * n + k] += g * h_t[k];
                            // dL/dh_t, including the carry from t+1 already in gh
                            let ghk = gh[dd * n + k] + g * ct[k];
                            let ak = a[dd * n + k];
                            let abar = (dt * ak).exp();
                            let h_prev = if t > 0 { hs[((t - 1) * d + dd) * n + k] } else { T::zero() };
                            let g_abar = ghk * h_prev * abar;
                            gdt += g_abar * ak + ghk * bt[k] * xv;
                            ga[dd * n + k] += g_abar * dt;
                            gb[row * n + k] += ghk * dt * xv;
                            gxv += ghk * dt * bt[k];
                            gh[dd * n + k] = ghk * abar;
                        }
                        gdelta[row * d + dd] += gdt;
                        gx[row * d + dd] += gxv;
                    }
                }
            }
            // A = −exp(a_log), so dA/da_log = A.
            for (g, &av) in ga.iter_mut().zip(&a) {
                *g *= av;
            }
            let shapes = [0, 1, 2, 3, 4, 5].map(|i| args.inputs[i].shape().to_vec());
            [gx, gdelta, ga, gb, gc, gd]
                .into_iter()
                .zip(shapes)
                .zip(args.needs)
                .map(|((g, s), &need)| need.then(|| Tensor::new(s, g).expect("shape")))
                .collect()
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
    fn discretize_examples() {
        let (a, b) = discretize(&t(&[1, 1, 1], &[std::f64::consts::LN_2]), &t(&[1, 1], &[0.0]), &t(&[1, 1, 1], &[3.0])).unwrap();
        assert!((a.item() - 0.5).abs() < 1e-15);
        assert!((b.item() - 3.0 * std::f64::consts::LN_2).abs() < 1e-15);
        let (_, b) = discretize(&t(&[1, 1, 1], &[1.0]), &t(&[1, 1], &[0.7]), &t(&[1, 1, 1], &[3.0])).unwrap();
        assert_eq!(b.item(), 3.0);
        let (a, b) = discretize(&t(&[1, 1, 1], &[1e-300]), &t(&[1, 1], &[0.0]), &t(&[1, 1, 1], &[3.0])).unwrap();
        assert_eq!(a.item(), 1.0);
        assert!(b.item() < 1e-299);
        assert!(discretize(&t(&[1, 1, 1], &[0.0]), &t(&[1, 1], &[0.0]), &t(&[1, 1, 1], &[3.0])).is_err());
        assert!(discretize(&t(&[1, 1, 1], &[-1.0]), &t(&[1, 1], &[0.0]), &t(&[1, 1, 1], &[3.0])).is_err());
    }

    #[test]
    fn memoryless_scan_depends_on_current_input_only() {
        let l = 5;
        let a_bar = Tensor::zeros(vec![1, l, 1, 2]);
        let b_bar = Tensor::from_fn(vec![1, l, 1, 2], |i| 0.5 + i as f64);
        let x = Tensor::from_fn(vec![1, l, 1], |i| (i as f64) - 1.5);
        let c = Tensor::from_fn(vec![1, l, 2], |i| 0.1 * i as f64);
        let d = t(&[1], &[0.25]);
        for mode in [ScanMode::Naive, ScanMode::Blocked] {
            let y = scan(&a_bar, &b_bar, &x, &c, &d, mode).unwrap();
            for s in 0..l {
                let xs = x.data()[s];
                let expect: f64 = (0..2).map(|k| c.data()[s * 2 + k] * b_bar.data()[s * 2 + k] * xs).sum::<f64>() + 0.25 * xs;
                assert!((y.data()[s] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn accumulator_yields_prefix_sums() {
        let l = 40;
        let x = Tensor::from_fn(vec![1, l, 1], |i| (i * i % 7) as f64);
        let ones = Tensor::ones(vec![1, l, 1, 1]);
        let c = Tensor::ones(vec![1, l, 1]);
        let d = t(&[1], &[0.0]);
        for mode in [ScanMode::Naive, ScanMode::Blocked] {
            let y = scan(&ones, &ones, &x, &c, &d, mode).unwrap();
            let mut acc = 0.0;
            for s in 0..l {
                acc += x.data()[s];
                assert_eq!(y.data()[s], acc);
            }
        }
    }

    #[test]
    fn rejects_empty_and_mismatched() {
        let d = t(&[1, 1, 2], &[0.1, 0.1]);
        let a_log = Tensor::zeros(vec![3, 1]);
        let b_in = Tensor::zeros(vec![1, 1, 1]);
        assert!(selective_scan(&d, &d, &a_log, &b_in, &b_in, &Tensor::ones(vec![2]), ScanMode::Naive).is_err());
        assert!("sideways".parse::<ScanMode>().is_err());
        assert_eq!("blocked".parse::<ScanMode>().unwrap(), ScanMode::Blocked);
    }
}
