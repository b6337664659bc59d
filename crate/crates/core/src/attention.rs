//! Channel-then-spatial attention for skip connections.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Conv2dSpec, PoolKind, PoolWindow};
use crate::params::{Graph, ParamBuilder};
use crate::scalar::Scalar;

pub const SPATIAL_KERNEL: usize = 7;

#[derive(Clone, Debug)]
pub struct Cbam {
    pub channels: usize,
    pub reduction: usize,
    /// `C → C/r`, 1×1.
    pub down: Conv2d,
    /// `C/r → C`, 1×1.
    pub up: Conv2d,
    /// `2 → 1`, 7×7, padding 3.
    pub spatial: Conv2d,
}

impl Cbam {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::InvalidArgument(format!(
                "cbam: {channels} channels not divisible by reduction {reduction}"
            )));
        }
        let hidden = channels / reduction;
        pb.scope(name, |pb| {
            Ok(Cbam {
                channels,
                reduction,
                down: Conv2d::new(pb, "channel_down", channels, hidden, 1, Conv2dSpec::same(1), true)?,
                up: Conv2d::new(pb, "channel_up", hidden, channels, 1, Conv2dSpec::same(1), true)?,
                spatial: Conv2d::new(pb, "spatial", 2, 1, SPATIAL_KERNEL, Conv2dSpec::same(SPATIAL_KERNEL), true)?,
            })
        })
    }

    /// `B×C×H×W → B×C×1×1` scores.
    pub fn channel_attention<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let c = g.shape(x).get(1).copied();
        if c != Some(self.channels) {
            return Err(Error::shape("cbam", format!("input {:?}, expected {} channels", g.shape(x), self.channels)));
        }
        let branch = |g: &mut Graph<T>, kind| -> Result<Var> {
            let p = g.pool2d(x, kind, PoolWindow::Global)?;
            let h = self.down.forward(g, p)?;
            let h = g.relu(h);
            self.up.forward(g, h)
        };
        let m = branch(g, PoolKind::Max)?;
        let a = branch(g, PoolKind::Avg)?;
        let s = g.add(m, a)?;
        Ok(g.sigmoid(s))
    }

    /// `B×C×H×W → B×1×H×W` scores.
    pub fn spatial_attention<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("cbam", format!("expected NCHW input, got {s:?}")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        // pool over channels by viewing them as a 1-wide plane per pixel
        let t = g.permute(x, &[0, 2, 3, 1])?;
        let t = g.reshape(t, &[b, h * w, c, 1])?;
        let mx = g.pool2d(t, PoolKind::Max, PoolWindow::Global)?;
        let av = g.pool2d(t, PoolKind::Avg, PoolWindow::Global)?;
        let mx = g.reshape(mx, &[b, 1, h, w])?;
        let av = g.reshape(av, &[b, 1, h, w])?;
        let pair = g.concat(&[mx, av], 1)?;
        let y = self.spatial.forward(g, pair)?;
        Ok(g.sigmoid(y))
    }

    /// `relu(x + s(x')⊙x')` with `x' = c(x)⊙x`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (refined, _) = self.refine(g, x)?;
        let s = g.add(x, refined)?;
        Ok(g.relu(s))
    }

    /// The pre-residual map `x''` and the channel-refined `x'`.
    pub fn refine<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<(Var, Var)> {
        let ca = self.channel_attention(g, x)?;
        let x1 = g.mul(ca, x)?;
        let sa = self.spatial_attention(g, x1)?;
        Ok((g.mul(sa, x1)?, x1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    fn zero_biases(store: &mut ParamStore<f64>) {
        let ids: Vec<_> = store.ids().filter(|&id| store.name(id).ends_with("bias")).collect();
        for id in ids {
            let z = store.value(id).zeros_like();
            store.set(id, z).unwrap();
        }
    }

    fn eval(store: &ParamStore<f64>, x: &Tensor<f64>, f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>) -> Tensor<f64> {
        let mut g = Graph::eval(store);
        let v = g.constant(x.clone());
        let y = f(&mut g, v).unwrap();
        g.value(y).clone()
    }

    fn module(c: usize, r: usize) -> (Cbam, ParamStore<f64>) {
        let mut pb = ParamBuilder::new(3);
        let m = Cbam::new(&mut pb, "cbam", c, r).unwrap();
        (m, pb.finish())
    }

    #[test]
    fn rejects_indivisible_reduction() {
        let mut pb = ParamBuilder::<f64>::new(0);
        assert!(Cbam::new(&mut pb, "cbam", 6, 4).is_err());
        assert!(Cbam::new(&mut pb, "cbam", 8, 0).is_err());
    }

    #[test]
    fn zero_input_gives_half_scores() {
        let (m, mut store) = module(8, 4);
        zero_biases(&mut store);
        let x = Tensor::zeros(vec![2, 8, 3, 5]);
        let ca = eval(&store, &x, |g, v| m.channel_attention(g, v));
        assert_eq!(ca.shape(), &[2, 8, 1, 1]);
        assert!(ca.data().iter().all(|&s| s == 0.5));
        let sa = eval(&store, &x, |g, v| m.spatial_attention(g, v));
        assert_eq!(sa.shape(), &[2, 1, 3, 5]);
        assert!(sa.data().iter().all(|&s| s == 0.5));
        assert_eq!(eval(&store, &x, |g, v| m.forward(g, v)).max_abs(), 0.0);
    }

    #[test]
    fn constant_channels_share_branch_value() {
        let (m, store) = module(2, 2);
        let x = Tensor::from_fn(vec![1, 2, 3, 3], |i| if i < 9 { 0.7 } else { -1.2 });
        let ca = eval(&store, &x, |g, v| m.channel_attention(g, v));
        // hand evaluation: both pooled vectors are [0.7, -1.2]
        let w = |id| store.value(id).data().to_vec();
        let (dw, db) = (w(m.down.weight), w(m.down.bias.unwrap()));
        let (uw, ub) = (w(m.up.weight), w(m.up.bias.unwrap()));
        let hidden = (dw[0] * 0.7 + dw[1] * -1.2 + db[0]).max(0.0);
        for ch in 0..2 {
            let f = uw[ch] * hidden + ub[ch];
            let expect = 1.0 / (1.0 + (-2.0 * f).exp());
            assert!((ca.data()[ch] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn hot_pixel_peaks_under_center_kernel() {
        let (m, mut store) = module(4, 2);
        zero_biases(&mut store);
        let mut k = Tensor::zeros(vec![1, 2, 7, 7]);
        k.data_mut()[24] = 1.0;
        k.data_mut()[49 + 24] = 1.0;
        store.set(m.spatial.weight, k).unwrap();
        let mut x = Tensor::zeros(vec![1, 4, 5, 5]);
        x.data_mut()[2 * 25 + 12] = 2.0;
        let sa = eval(&store, &x, |g, v| m.spatial_attention(g, v));
        let peak = 1.0 / (1.0 + (-(2.0f64 + 0.5)).exp());
        assert!((sa.data()[12] - peak).abs() < 1e-15);
        assert!(sa.data().iter().enumerate().all(|(i, &s)| i == 12 || s == 0.5));
    }

    #[test]
    fn saturated_scores_double_positive_input() {
        let (m, mut store) = module(4, 2);
        for id in [m.up.bias.unwrap(), m.spatial.bias.unwrap()] {
            let big = Tensor::full(store.value(id).shape().to_vec(), 60.0);
            store.set(id, big).unwrap();
        }
        for id in [m.up.weight, m.spatial.weight] {
            let z = store.value(id).zeros_like();
            store.set(id, z).unwrap();
        }
        let x = Tensor::from_fn(vec![1, 4, 4, 4], |i| (i as f64 * 0.37).sin().abs());
        let y = eval(&store, &x, |g, v| m.forward(g, v));
        assert!(y.max_abs_diff(&x.scale(2.0)).unwrap() < 1e-12);
    }

    #[test]
    fn output_is_nonnegative_and_refined_map_is_bounded() {
        let (m, store) = module(8, 4);
        let x = Tensor::from_fn(vec![2, 8, 4, 4], |i| (i as f64 * 1.7).sin() * 3.0);
        let y = eval(&store, &x, |g, v| m.forward(g, v));
        assert!(y.data().iter().all(|&v| v >= 0.0));
        let r = eval(&store, &x, |g, v| Ok(m.refine(g, v)?.0));
        assert!(r.max_abs() <= x.max_abs());
    }

    #[test]
    fn preserves_first_skip_shape() {
        let mut pb = ParamBuilder::<f32>::new(9);
        let m = Cbam::new(&mut pb, "cbam", 48, 16).unwrap();
        let store = pb.finish();
        let mut g = Graph::eval(&store);
        let x = g.constant(Tensor::from_fn(vec![1, 48, 128, 128], |i| ((i % 11) as f32) * 0.1 - 0.5));
        let y = m.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[1, 48, 128, 128]);
    }
}
