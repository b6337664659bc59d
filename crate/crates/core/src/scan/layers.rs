use rand::Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Conv2dSpec, LayerNorm, Linear};
use crate::params::{Graph, ParamBuilder, ParamId};
use crate::scalar::Scalar;

use super::ScanMode;

/// `ceil(D/16)`.
pub fn dt_rank(d: usize) -> usize {
    d.div_ceil(16).max(1)
}

const DT_MIN: f64 = 1e-3;
const DT_MAX: f64 = 1e-1;

/// Selective state-space layer over sequences `B×L×D`.
#[derive(Clone, Debug)]
pub struct S6 {
    pub d: usize,
    pub n: usize,
    pub rank: usize,
    /// `(rank + 2N) × D`, no bias: produces raw Δ, B and C per token.
    pub x_proj: Linear,
    /// `D × rank` plus bias.
    pub dt_proj: Linear,
    pub a_log: ParamId,
    pub d_skip: ParamId,
}

impl S6 {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, d: usize, n: usize) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::InvalidArgument(format!("S6 needs D, N ≥ 1 (got D={d}, N={n})")));
        }
        let rank = dt_rank(d);
        pb.scope(name, |pb| {
            let x_proj = Linear::new(pb, "x_proj", d, rank + 2 * n, false)?;
            let dt_proj = pb.scope("dt_proj", |pb| {
                let weight = pb.uniform("weight", &[d, rank], 1.0 / (rank as f64).sqrt())?;
                // softplus(bias) log-uniform in [DT_MIN, DT_MAX]
                let bias = pb.from_fn("bias", &[d], |rng, _| {
                    let u: f64 = rng.random();
                    let dt = (u * (DT_MAX.ln() - DT_MIN.ln()) + DT_MIN.ln()).exp();
                    dt + (-(-dt).exp_m1()).ln()
                })?;
                Ok::<_, Error>(Linear { weight, bias: Some(bias) })
            })?;
            let a_log = pb.from_fn("a_log", &[d, n], |_, i| ((i % n + 1) as f64).ln())?;
            let d_skip = pb.ones("d_skip", &[d])?;
            Ok(S6 {
                d,
                n,
                rank,
                x_proj,
                dt_proj,
                a_log,
                d_skip,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, u: Var, mode: ScanMode) -> Result<Var> {
        let proj = self.x_proj.forward(g, u)?;
        let dt_raw = g.narrow(proj, 2, 0, self.rank)?;
        let b_in = g.narrow(proj, 2, self.rank, self.n)?;
        let c = g.narrow(proj, 2, self.rank + self.n, self.n)?;
        let dt = self.dt_proj.forward(g, dt_raw)?;
        let delta = g.softplus(dt);
        let (a_log, d_skip) = (g.param(self.a_log), g.param(self.d_skip));
        g.selective_scan(u, delta, a_log, b_in, c, d_skip, mode)
    }
}

/// Cross-scan, one S6 per direction, cross-merge, layer norm. Input and
/// output are channel-last `B×H×W×D`.
#[derive(Clone, Debug)]
pub struct Ss2d {
    /// Four entries; all alias the same parameters when directions share.
    pub directions: Vec<S6>,
    pub norm: LayerNorm,
    pub mode: ScanMode,
}

impl Ss2d {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, d: usize, n: usize, share_directions: bool) -> Result<Self> {
        pb.scope(name, |pb| {
            let directions = if share_directions {
                vec![S6::new(pb, "s6", d, n)?; 4]
            } else {
                (0..4).map(|k| S6::new(pb, &format!("s6_{k}"), d, n)).collect::<Result<_>>()?
            };
            Ok(Ss2d {
                directions,
                norm: LayerNorm::new(pb, "out_norm", d)?,
                mode: ScanMode::Naive,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let [b, h, w, d] = <[usize; 4]>::try_from(g.shape(x))
            .map_err(|_| Error::shape("ss2d", format!("expected B×H×W×C, got {:?}", g.shape(x))))?;
        let chw = g.permute(x, &[0, 3, 1, 2])?;
        let seqs = g.cross_scan(chw)?;
        let mut outs = Vec::with_capacity(4);
        for (k, s6) in self.directions.iter().enumerate() {
            let s = g.narrow(seqs, 1, k, 1)?;
            let s = g.reshape(s, &[b, d, h * w])?;
            let s = g.permute(s, &[0, 2, 1])?;
            let y = s6.forward(g, s, self.mode)?;
            let y = g.permute(y, &[0, 2, 1])?;
            outs.push(g.reshape(y, &[b, 1, d, h * w])?);
        }
        let stacked = g.concat(&outs, 1)?;
        let merged = g.cross_merge(stacked, h, w)?;
        let hwc = g.permute(merged, &[0, 2, 3, 1])?;
        self.norm.forward(g, hwc)
    }
}

/// One gated VSS layer on channel-last `B×H×W×C`.
#[derive(Clone, Debug)]
pub struct VssLayer {
    pub c: usize,
    pub norm: LayerNorm,
    /// `C → 4C`.
    pub expand: Linear,
    /// Depthwise 3×3 on the `2C` branch.
    pub dwconv: Conv2d,
    /// Ends in its own layer norm, the post-scan norm of the layer.
    pub ss2d: Ss2d,
    /// `2C → C`.
    pub out_proj: Linear,
}

impl VssLayer {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, c: usize, d_state: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(VssLayer {
                c,
                norm: LayerNorm::new(pb, "norm", c)?,
                expand: Linear::new(pb, "in_proj", c, 4 * c, true)?,
                dwconv: Conv2d::new(pb, "dwconv", 2 * c, 2 * c, 3, Conv2dSpec::depthwise(3, 2 * c), true)?,
                ss2d: Ss2d::new(pb, "ss2d", 2 * c, d_state, false)?,
                out_proj: Linear::new(pb, "out_proj", 2 * c, c, true)?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        if g.shape(x).last() != Some(&self.c) {
            return Err(Error::shape("vss_layer", format!("input {:?}, expected C={}", g.shape(x), self.c)));
        }
        let c2 = 2 * self.c;
        let xn = self.norm.forward(g, x)?;
        let xbar = self.expand.forward(g, xn)?;
        let x1 = g.narrow(xbar, 3, 0, c2)?;
        let x2 = g.narrow(xbar, 3, c2, c2)?;
        let branch = g.permute(x1, &[0, 3, 1, 2])?;
        let branch = self.dwconv.forward(g, branch)?;
        let branch = g.silu(branch);
        let branch = g.permute(branch, &[0, 2, 3, 1])?;
        let branch = self.ss2d.forward(g, branch)?;
        let gate = g.silu(x2);
        let gated = g.mul(branch, gate)?;
        let out = self.out_proj.forward(g, gated)?;
        g.add(out, x)
    }

    pub fn set_mode(&mut self, mode: ScanMode) {
        self.ss2d.mode = mode;
    }
}

/// Four VSS layers in sequence.
#[derive(Clone, Debug)]
pub struct VssBlock {
    pub layers: Vec<VssLayer>,
}

pub const VSS_DEPTH: usize = 4;

impl VssBlock {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, c: usize, d_state: usize) -> Result<Self> {
        pb.scope(name, |pb| {
            let layers = (0..VSS_DEPTH)
                .map(|i| VssLayer::new(pb, &format!("layer{i}"), c, d_state))
                .collect::<Result<_>>()?;
            Ok(VssBlock { layers })
        })
    }

    pub fn from_layers(layers: Vec<VssLayer>) -> Result<Self> {
        if layers.len() != VSS_DEPTH {
            return Err(Error::InvalidArgument(format!(
                "a VSS block has exactly {VSS_DEPTH} layers, got {}",
                layers.len()
            )));
        }
        Ok(VssBlock { layers })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, x)?;
        }
        Ok(x)
    }

    pub fn set_mode(&mut self, mode: ScanMode) {
        for layer in &mut self.layers {
            layer.set_mode(mode);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    fn zero_where(store: &mut ParamStore<f64>, pred: impl Fn(&str) -> bool) {
        let ids: Vec<_> = store.ids().filter(|&id| pred(store.name(id))).collect();
        for id in ids {
            let z = store.value(id).zeros_like();
            store.set(id, z).unwrap();
        }
    }

    fn run(store: &ParamStore<f64>, x: &Tensor<f64>, f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>) -> Tensor<f64> {
        let mut g = Graph::eval(store);
        let v = g.constant(x.clone());
        let y = f(&mut g, v).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn dt_rank_is_ceil_sixteenth() {
        assert_eq!(dt_rank(1), 1);
        assert_eq!(dt_rank(16), 1);
        assert_eq!(dt_rank(17), 2);
        assert_eq!(dt_rank(768), 48);
    }

    #[test]
    fn s6_init_ranges() {
        let mut pb = ParamBuilder::<f64>::new(0);
        let s6 = S6::new(&mut pb, "s6", 32, 4).unwrap();
        let store = pb.finish();
        let bias = store.value(s6.dt_proj.bias.unwrap());
        for &b in bias.data() {
            let dt = crate::autograd::Activation::Softplus.apply(b);
            assert!((1e-3 - 1e-12..=1e-1 + 1e-12).contains(&dt), "{dt}");
        }
        let a_log = store.value(s6.a_log);
        assert_eq!(&a_log.data()[..4], &[0.0, 2f64.ln(), 3f64.ln(), 4f64.ln()]);
        assert!(store.value(s6.d_skip).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ss2d_single_pixel_sums_four_identical_scans() {
        let mut pb = ParamBuilder::<f64>::new(1);
        let ss2d = Ss2d::new(&mut pb, "ss2d", 3, 2, true).unwrap();
        let store = pb.finish();
        let x = Tensor::from_fn(vec![1, 1, 1, 3], |i| 0.3 * i as f64 - 0.2);
        let y = run(&store, &x, |g, v| ss2d.forward(g, v));
        // one direction through the shared S6, times four, then the norm
        let y1 = run(&store, &x, |g, v| {
            let s = g.reshape(v, &[1, 1, 3])?;
            let s = ss2d.directions[0].forward(g, s, ScanMode::Naive)?;
            let s = g.scale(s, 4.0);
            let s = g.reshape(s, &[1, 1, 1, 3])?;
            ss2d.norm.forward(g, s)
        });
        assert!(y.max_abs_diff(&y1).unwrap() < 1e-12);
    }

    #[test]
    fn ss2d_preserves_shape() {
        let mut pb = ParamBuilder::<f32>::new(2);
        let ss2d = Ss2d::new(&mut pb, "ss2d", 32, 4, false).unwrap();
        let store = pb.finish();
        let mut g = Graph::eval(&store);
        let x = g.constant(Tensor::ones(vec![2, 16, 16, 32]));
        let y = ss2d.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[2, 16, 16, 32]);
    }

    #[test]
    fn vss_layer_zero_input_zero_biases() {
        let mut pb = ParamBuilder::<f64>::new(3);
        let layer = VssLayer::new(&mut pb, "vss", 16, 4).unwrap();
        let mut store = pb.finish();
        zero_where(&mut store, |n| n.ends_with(".bias") && !n.contains("dt_proj"));
        let y = run(&store, &Tensor::zeros(vec![2, 8, 8, 16]), |g, v| layer.forward(g, v));
        assert_eq!(y.shape(), &[2, 8, 8, 16]);
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn vss_block_with_zeroed_branches_is_identity() {
        let mut pb = ParamBuilder::<f64>::new(4);
        let block = VssBlock::new(&mut pb, "vss", 8, 4).unwrap();
        let mut store = pb.finish();
        zero_where(&mut store, |n| n.contains("out_proj"));
        let x = Tensor::from_fn(vec![1, 4, 4, 8], |i| (i as f64 * 0.37).sin());
        let y = run(&store, &x, |g, v| block.forward(g, v));
        assert_eq!(y, x);
        assert!(VssBlock::from_layers(block.layers[..3].to_vec()).is_err());
    }

    #[test]
    fn vss_block_every_layer_gets_gradient() {
        let mut pb = ParamBuilder::<f64>::new(5);
        let block = VssBlock::new(&mut pb, "vss", 4, 2).unwrap();
        let store = pb.finish();
        let mut g = Graph::train(&store);
        let x = g.constant(Tensor::from_fn(vec![1, 3, 3, 4], |i| (i as f64 * 0.71).cos()));
        let y = block.forward(&mut g, x).unwrap();
        let w = Tensor::from_fn(vec![1, 3, 3, 4], |i| (i as f64 * 1.3).sin());
        let l = g.weighted_sum(y, w).unwrap();
        let grads = g.backward(l).unwrap();
        let pg = g.param_gradients(&grads);
        assert_eq!(pg.len(), store.trainable_ids().count());
        for (id, gr) in pg {
            assert!(gr.max_abs() > 0.0, "{} has zero gradient", store.name(id));
        }
    }
}
