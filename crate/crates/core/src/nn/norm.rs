//! Batch normalization over NCHW channels and layer normalization over the
//! last dimension.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Running per-channel statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(vec![channels]),
            var: Tensor::ones(vec![channels]),
        }
    }
}

struct BnGeom {
    n: usize,
    c: usize,
    hw: usize,
}

fn bn_geom(x: &[usize], gamma: &[usize], beta: &[usize], stats: Option<&[usize]>) -> Result<BnGeom> {
    if x.len() != 4 {
        return Err(Error::shape("batch_norm2d", format!("expected NCHW input, got {x:?}")));
    }
    let c = x[1];
    for (what, s) in [("gamma", Some(gamma)), ("beta", Some(beta)), ("running stats", stats)] {
        if let Some(s) = s {
            if s != [c] {
                return Err(Error::shape("batch_norm2d", format!("{what} shape {s:?}, expected [{c}]")));
            }
        }
    }
    Ok(BnGeom {
        n: x[0],
        c,
        hw: x[2] * x[3],
    })
}

/// Per-channel (mean, biased variance) over N, H, W.
fn batch_moments<T: Scalar>(g: &BnGeom, x: &[T]) -> (Vec<T>, Vec<T>) {
    let count = T::lit((g.n * g.hw) as f64);
    let mut mean = vec![T::zero(); g.c];
    let mut var = vec![T::zero(); g.c];
    for ch in 0..g.c {
        let plane = |b: usize| &x[(b * g.c + ch) * g.hw..(b * g.c + ch + 1) * g.hw];
        let m = (0..g.n).map(|b| plane(b).iter().copied().sum::<T>()).sum::<T>() / count;
        let v = (0..g.n)
            .map(|b| plane(b).iter().map(|&v| (v - m) * (v - m)).sum::<T>())
            .sum::<T>()
            / count;
        mean[ch] = m;
        var[ch] = v;
    }
    (mean, var)
}

fn normalize<T: Scalar>(g: &BnGeom, x: &[T], mean: &[T], inv_std: &[T], gamma: &[T], beta: &[T]) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for b in 0..g.n {
        for ch in 0..g.c {
            let r = (b * g.c + ch) * g.hw..(b * g.c + ch + 1) * g.hw;
            let (m, s, ga, be) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for (o, &v) in y[r.clone()].iter_mut().zip(&x[r]) {
                *o = (v - m) * s * ga + be;
            }
        }
    }
    y
}

fn updated_stats<T: Scalar>(g: &BnGeom, stats: &RunningStats<T>, mean: &[T], var: &[T]) -> RunningStats<T> {
    let m = T::lit(BN_MOMENTUM);
    let count = g.n * g.hw;
    let unbias = if count > 1 {
        T::lit(count as f64 / (count - 1) as f64)
    } else {
        T::one()
    };
    RunningStats {
        mean: Tensor::from_fn(vec![g.c], |c| (T::one() - m) * stats.mean.data()[c] + m * mean[c]),
        var: Tensor::from_fn(vec![g.c], |c| (T::one() - m) * stats.var.data()[c] + m * var[c] * unbias),
    }
}

/// Training mode normalizes by batch statistics and updates `stats` in
/// place (momentum 0.1, unbiased running variance); eval mode uses `stats`.
pub fn batch_norm2d<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut RunningStats<T>,
    training: bool,
) -> Result<Tensor<T>> {
    let g = bn_geom(input.shape(), gamma.shape(), beta.shape(), Some(stats.mean.shape()))?;
    let eps = T::lit(NORM_EPS);
    let (mean, var) = if training {
        let (m, v) = batch_moments(&g, input.data());
        *stats = updated_stats(&g, stats, &m, &v);
        (m, v)
    } else {
        (stats.mean.data().to_vec(), stats.var.data().to_vec())
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let y = normalize(&g, input.data(), &mean, &inv_std, gamma.data(), beta.data());
    Tensor::new(input.shape().to_vec(), y)
}

/// Layer normalization over the last dimension.
pub fn layer_norm<T: Scalar>(input: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
    let (y, _, _) = layer_norm_parts(input, gamma, beta)?;
    Ok(y)
}

/// Output, normalized input x̂, and per-row 1/σ.
fn layer_norm_parts<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let c = *input
        .shape()
        .last()
        .ok_or_else(|| Error::shape("layer_norm", "rank-0 input"))?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "layer_norm",
            format!("gamma {:?} / beta {:?}, expected [{c}]", gamma.shape(), beta.shape()),
        ));
    }
    let eps = T::lit(NORM_EPS);
    let inv_c = T::one() / T::lit(c as f64);
    let rows = input.numel() / c;
    let x = input.data();
    let (ga, be) = (gamma.data(), beta.data());
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let m = row.iter().copied().sum::<T>() * inv_c;
        let v = row.iter().map(|&v| (v - m) * (v - m)).sum::<T>() * inv_c;
        let s = T::one() / (v + eps).sqrt();
        inv_std[r] = s;
        for k in 0..c {
            let h = (row[k] - m) * s;
            xhat[r * c + k] = h;
            y[r * c + k] = h * ga[k] + be[k];
        }
    }
    Ok((Tensor::new(input.shape().to_vec(), y)?, xhat, inv_std))
}

impl<T: Scalar> Tape<T> {
    /// Batch norm on the tape. In training mode the second element carries
    /// the updated running statistics for the caller to store.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &RunningStats<T>,
        training: bool,
    ) -> Result<(Var, Option<RunningStats<T>>)> {
        let g = bn_geom(self.shape(x), self.shape(gamma), self.shape(beta), Some(stats.mean.shape()))?;
        let eps = T::lit(NORM_EPS);
        let (mean, var, update) = if training {
            let (m, v) = batch_moments(&g, self.value(x).data());
            let update = updated_stats(&g, stats, &m, &v);
            (m, v, Some(update))
        } else {
            (stats.mean.data().to_vec(), stats.var.data().to_vec(), None)
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let y = normalize(
            &g,
            self.value(x).data(),
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let value = Tensor::new(self.shape(x).to_vec(), y)?;
        let shape = self.shape(x).to_vec();
        let out = self.record("batch_norm2d", value, &[x, gamma, beta], move |args| {
            let (xd, ga, gout) = (args.inputs[0].data(), args.inputs[1].data(), args.grad.data());
            let count = T::lit((g.n * g.hw) as f64);
            let mut gx = vec![T::zero(); xd.len()];
            let mut ggamma = vec![T::zero(); g.c];
            let mut gbeta = vec![T::zero(); g.c];
            for ch in 0..g.c {
                let (m, s) = (mean[ch], inv_std[ch]);
                let (mut sum_g, mut sum_gh) = (T::zero(), T::zero());
                for b in 0..g.n {
                    let r = (b * g.c + ch) * g.hw..(b * g.c + ch + 1) * g.hw;
                    for (&gv, &xv) in gout[r.clone()].iter().zip(&xd[r]) {
                        sum_g += gv;
                        sum_gh += gv * (xv - m) * s;
                    }
                }
                ggamma[ch] = sum_gh;
                gbeta[ch] = sum_g;
                if !args.needs[0] {
                    continue;
                }
                for b in 0..g.n {
                    let r = (b * g.c + ch) * g.hw..(b * g.c + ch + 1) * g.hw;
                    for ((o, &gv), &xv) in gx[r.clone()].iter_mut().zip(&gout[r.clone()]).zip(&xd[r]) {
                        *o = if training {
                            let h = (xv - m) * s;
                            ga[ch] * s * (gv - sum_g / count - h * sum_gh / count)
                        } else {
                            ga[ch] * s * gv
                        };
                    }
                }
            }
            vec![
                args.needs[0].then(|| Tensor::new(shape.clone(), gx).expect("shape")),
                args.needs[1].then(|| Tensor::new(vec![g.c], ggamma).expect("shape")),
                args.needs[2].then(|| Tensor::new(vec![g.c], gbeta).expect("shape")),
            ]
        });
        Ok((out, update))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (value, xhat, inv_std) = layer_norm_parts(self.value(x), self.value(gamma), self.value(beta))?;
        let c = gamma_len(self.shape(gamma));
        let keep = self.will_record(&[x, gamma, beta]);
        let (xhat, inv_std) = if keep { (xhat, inv_std) } else { (Vec::new(), Vec::new()) };
        let shape = self.shape(x).to_vec();
        Ok(self.record("layer_norm", value, &[x, gamma, beta], move |args| {
            let (ga, gout) = (args.inputs[1].data(), args.grad.data());
            let rows = gout.len() / c;
            let inv_c = T::one() / T::lit(c as f64);
            let mut gx = vec![T::zero(); gout.len()];
            let mut ggamma = vec![T::zero(); c];
            let mut gbeta = vec![T::zero(); c];
            for r in 0..rows {
                let (g, h) = (&gout[r * c..(r + 1) * c], &xhat[r * c..(r + 1) * c]);
                let (mut sum_gy, mut sum_gyh) = (T::zero(), T::zero());
                for k in 0..c {
                    ggamma[k] += g[k] * h[k];
                    gbeta[k] += g[k];
                    let gy = g[k] * ga[k];
                    sum_gy += gy;
                    sum_gyh += gy * h[k];
                }
                if args.needs[0] {
                    for k in 0..c {
                        let gy = g[k] * ga[k];
                        gx[r * c + k] = inv_std[r] * (gy - sum_gy * inv_c - h[k] * sum_gyh * inv_c);
                    }
                }
            }
            vec![
                args.needs[0].then(|| Tensor::new(shape.clone(), gx).expect("shape")),
                args.needs[1].then(|| Tensor::new(vec![c], ggamma).expect("shape")),
                args.needs[2].then(|| Tensor::new(vec![c], gbeta).expect("shape")),
            ]
        }))
    }
}

fn gamma_len(shape: &[usize]) -> usize {
    shape[0]
}
