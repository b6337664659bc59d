use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Conv2dSpec, LayerNorm};
use crate::params::{Graph, ParamBuilder, ParamId};
use crate::scalar::Scalar;
use crate::scan::VssBlock;

use super::SplineGrid;

/// `y_m = Σ_n base[m,n]·silu(x_n) + Σ_n Σ_j spline[m,n,j]·B_j(x_n)` over
/// the last dimension.
#[derive(Clone, Debug)]
pub struct KanLinear {
    pub inp: usize,
    pub out: usize,
    pub grid: SplineGrid,
    /// `OUT × IN`.
    pub base_weight: ParamId,
    /// `OUT × IN × (G+k)`.
    pub spline_weight: ParamId,
}

impl KanLinear {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, inp: usize, out: usize, grid: SplineGrid) -> Result<Self> {
        grid.validate()?;
        pb.scope(name, |pb| {
            let scale = 1.0 / (inp as f64).sqrt();
            Ok(KanLinear {
                inp,
                out,
                grid,
                base_weight: pb.uniform("base_weight", &[out, inp], scale)?,
                spline_weight: pb.normal("spline_weight", &[out, inp, grid.num_basis()], 0.1 * scale)?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.last() != Some(&self.inp) {
            return Err(Error::shape("kan_linear", format!("input {shape:?}, expected last dim {}", self.inp)));
        }
        let nb = self.grid.num_basis();
        let base_w = g.param(self.base_weight);
        let spline_w = g.param(self.spline_weight);
        let act = g.silu(x);
        let base = g.linear(act, base_w, None)?;
        let basis = g.bspline_basis(x, &self.grid)?;
        let mut flat = shape.clone();
        *flat.last_mut().expect("rank ≥ 1") = self.inp * nb;
        let basis = g.reshape(basis, &flat)?;
        let spline_w = g.reshape(spline_w, &[self.out, self.inp * nb])?;
        let spline = g.linear(basis, spline_w, None)?;
        g.add(base, spline)
    }
}

/// Channel-last `B×H×W×C` to `B×C×H×W`, through `f`, and back.
fn channel_first<T: Scalar>(g: &mut Graph<T>, x: Var, f: impl FnOnce(&mut Graph<T>, Var) -> Result<Var>) -> Result<Var> {
    let y = g.permute(x, &[0, 3, 1, 2])?;
    let y = f(g, y)?;
    g.permute(y, &[0, 2, 3, 1])
}

/// `DWConv(KAN(DWConv(KAN(LN(x)))))` on channel-last tokens.
#[derive(Clone, Debug)]
pub struct TokKan {
    pub norm: LayerNorm,
    pub kan: [KanLinear; 2],
    pub dwconv: [Conv2d; 2],
}

impl TokKan {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, c: usize, grid: SplineGrid) -> Result<Self> {
        pb.scope(name, |pb| {
            let norm = LayerNorm::new(pb, "norm", c)?;
            let k0 = KanLinear::new(pb, "kan0", c, c, grid)?;
            let d0 = Conv2d::new(pb, "dwconv0", c, c, 3, Conv2dSpec::depthwise(3, c), true)?;
            let k1 = KanLinear::new(pb, "kan1", c, c, grid)?;
            let d1 = Conv2d::new(pb, "dwconv1", c, c, 3, Conv2dSpec::depthwise(3, c), true)?;
            Ok(TokKan {
                norm,
                kan: [k0, k1],
                dwconv: [d0, d1],
            })
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let mut y = self.norm.forward(g, x)?;
        for (kan, conv) in self.kan.iter().zip(&self.dwconv) {
            y = kan.forward(g, y)?;
            y = channel_first(g, y, |g, v| conv.forward(g, v))?;
        }
        Ok(y)
    }
}

/// The convolution stack placed in front of Tok-KAN.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EfconvMode {
    None,
    Conv3,
    Conv5,
    #[default]
    Conv3x2,
}

impl EfconvMode {
    pub const ALL: [EfconvMode; 4] = [Self::None, Self::Conv3, Self::Conv5, Self::Conv3x2];

    /// Kernel sizes of the convolutions, in order.
    pub fn kernels(self) -> &'static [usize] {
        match self {
            Self::None => &[],
            Self::Conv3 => &[3],
            Self::Conv5 => &[5],
            Self::Conv3x2 => &[3, 3],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Conv3 => "conv3",
            Self::Conv5 => "conv5",
            Self::Conv3x2 => "conv3x2",
        }
    }
}

impl fmt::Display for EfconvMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EfconvMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown efconv mode {s:?} (none|conv3|conv5|conv3x2)")))
    }
}

/// Channel-preserving convolutions with no activation between them.
#[derive(Clone, Debug)]
pub struct EfConv {
    pub mode: EfconvMode,
    pub convs: Vec<Conv2d>,
}

impl EfConv {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, c: usize, mode: EfconvMode) -> Result<Self> {
        pb.scope(name, |pb| {
            let convs = mode
                .kernels()
                .iter()
                .enumerate()
                .map(|(i, &k)| Conv2d::new(pb, &format!("conv{i}"), c, c, k, Conv2dSpec::same(k), true))
                .collect::<Result<_>>()?;
            Ok(EfConv { mode, convs })
        })
    }

    /// Channel-last in and out.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        if self.convs.is_empty() {
            return Ok(x);
        }
        channel_first(g, x, |g, mut y| {
            for conv in &self.convs {
                y = conv.forward(g, y)?;
            }
            Ok(y)
        })
    }
}

/// `x̄ = EFConv(x)`, `out = TokKAN(x̄) + x̄`.
#[derive(Clone, Debug)]
pub struct EfcKan {
    pub efconv: EfConv,
    pub tok: TokKan,
}

impl EfcKan {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<T>, name: &str, c: usize, mode: EfconvMode, grid: SplineGrid) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(EfcKan {
                efconv: EfConv::new(pb, "efconv", c, mode)?,
                tok: TokKan::new(pb, "tok_kan", c, grid)?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let xbar = self.efconv.forward(g, x)?;
        let t = self.tok.forward(g, xbar)?;
        g.add(t, xbar)
    }
}

/// `y = LN(x + VSS(x))`, `out = y + EFC-KAN(y)`, channel-last.
#[derive(Clone, Debug)]
pub struct VkanBlock {
    pub vss: VssBlock,
    pub norm: LayerNorm,
    pub efc: EfcKan,
}

impl VkanBlock {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<T>,
        name: &str,
        c: usize,
        d_state: usize,
        mode: EfconvMode,
        grid: SplineGrid,
    ) -> Result<Self> {
        pb.scope(name, |pb| {
            Ok(VkanBlock {
                vss: VssBlock::new(pb, "vss", c, d_state)?,
                norm: LayerNorm::new(pb, "norm", c)?,
                efc: EfcKan::new(pb, "efc_kan", c, mode, grid)?,
            })
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let v = self.vss.forward(g, x)?;
        let s = g.add(x, v)?;
        let y = self.norm.forward(g, s)?;
        let e = self.efc.forward(g, y)?;
        g.add(y, e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Activation;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    fn fill_where(store: &mut ParamStore<f64>, pred: impl Fn(&str) -> bool, v: f64) {
        let ids: Vec<_> = store.ids().filter(|&id| pred(store.name(id))).collect();
        for id in ids {
            let t = Tensor::full(store.value(id).shape().to_vec(), v);
            store.set(id, t).unwrap();
        }
    }

    fn run(store: &ParamStore<f64>, x: &Tensor<f64>, f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>) -> Tensor<f64> {
        let mut g = Graph::eval(store);
        let v = g.constant(x.clone());
        let y = f(&mut g, v).unwrap();
        g.value(y).clone()
    }

    fn tokens(shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |i| (i as f64 * 0.613).sin() * 1.3)
    }

    #[test]
    fn zero_spline_is_base_path() {
        let mut pb = ParamBuilder::<f64>::new(0);
        let kan = KanLinear::new(&mut pb, "kan", 3, 2, SplineGrid::default()).unwrap();
        let mut store = pb.finish();
        fill_where(&mut store, |n| n.ends_with("spline_weight"), 0.0);
        let x = tokens(&[4, 3]);
        let y = run(&store, &x, |g, v| kan.forward(g, v));
        let expect = crate::nn::linear(&x.map(|v| Activation::Silu.apply(v)), store.value(kan.base_weight), None).unwrap();
        assert!(y.max_abs_diff(&expect).unwrap() < 1e-15);
    }

    #[test]
    fn single_coefficient_on_active_cell() {
        let grid = SplineGrid::new(0, 4, 0.0, 4.0).unwrap();
        let mut pb = ParamBuilder::<f64>::new(0);
        let kan = KanLinear::new(&mut pb, "kan", 1, 1, grid).unwrap();
        let mut store = pb.finish();
        fill_where(&mut store, |n| n.ends_with("base_weight"), 0.0);
        let sw = Tensor::new(vec![1, 1, 4], vec![0.0, 0.0, 2.5, 0.0]).unwrap();
        store.set(kan.spline_weight, sw).unwrap();
        let y = run(&store, &Tensor::new(vec![3, 1], vec![2.2, 2.9, 0.5]).unwrap(), |g, v| kan.forward(g, v));
        assert_eq!(y.data(), &[2.5, 2.5, 0.0]);
    }

    #[test]
    fn kan_linear_is_linear_in_weights() {
        let mut pb = ParamBuilder::<f64>::new(1);
        let kan = KanLinear::new(&mut pb, "kan", 4, 3, SplineGrid::default()).unwrap();
        let store = pb.finish();
        let mut doubled = store.clone();
        for id in [kan.base_weight, kan.spline_weight] {
            let v = store.value(id).scale(2.0);
            doubled.set(id, v).unwrap();
        }
        let x = tokens(&[5, 4]);
        let y = run(&store, &x, |g, v| kan.forward(g, v));
        let y2 = run(&doubled, &x, |g, v| kan.forward(g, v));
        assert_eq!(y2, y.scale(2.0));
    }

    #[test]
    fn kan_linear_rejects_width_mismatch() {
        let mut pb = ParamBuilder::<f64>::new(1);
        let kan = KanLinear::new(&mut pb, "kan", 4, 3, SplineGrid::default()).unwrap();
        let store = pb.finish();
        let mut g = Graph::eval(&store);
        let x = g.constant(tokens(&[5, 3]));
        assert!(kan.forward(&mut g, x).is_err());
    }

    #[test]
    fn tok_kan_shape_and_zero_weights() {
        let mut pb = ParamBuilder::<f64>::new(2);
        let tok = TokKan::new(&mut pb, "tok", 16, SplineGrid::default()).unwrap();
        let mut store = pb.finish();
        let x = tokens(&[2, 8, 8, 16]);
        assert_eq!(run(&store, &x, |g, v| tok.forward(g, v)).shape(), &[2, 8, 8, 16]);
        fill_where(&mut store, |n| n.contains("kan") || n.contains("dwconv"), 0.0);
        assert_eq!(run(&store, &x, |g, v| tok.forward(g, v)).max_abs(), 0.0);
    }

    #[test]
    fn efconv_identities() {
        let x = tokens(&[1, 6, 6, 3]);
        let mut pb = ParamBuilder::<f64>::new(3);
        let none = EfConv::new(&mut pb, "none", 3, EfconvMode::None).unwrap();
        let twice = EfConv::new(&mut pb, "twice", 3, EfconvMode::Conv3x2).unwrap();
        let mut store = pb.finish();
        assert_eq!(run(&store, &x, |g, v| none.forward(g, v)), x);
        for conv in &twice.convs {
            let w = Tensor::from_fn(vec![3, 3, 3, 3], |i| {
                let (o, c, k) = (i / 27, (i / 9) % 3, i % 9);
                if o == c && k == 4 {
                    1.0
                } else {
                    0.0
                }
            });
            store.set(conv.weight, w).unwrap();
            store.set(conv.bias.unwrap(), Tensor::zeros(vec![3])).unwrap();
        }
        assert_eq!(run(&store, &x, |g, v| twice.forward(g, v)), x);
    }

    #[test]
    fn stacked_threes_match_five_support() {
        let mut pb = ParamBuilder::<f64>::new(4);
        let twice = EfConv::new(&mut pb, "twice", 1, EfconvMode::Conv3x2).unwrap();
        let five = EfConv::new(&mut pb, "five", 1, EfconvMode::Conv5).unwrap();
        let mut store = pb.finish();
        fill_where(&mut store, |n| n.ends_with("weight"), 1.0);
        fill_where(&mut store, |n| n.ends_with("bias"), 0.0);
        let x = Tensor::from_fn(vec![1, 9, 9, 1], |i| if i == 40 { 1.0 } else { 0.0 });
        let support = |t: Tensor<f64>| t.data().iter().map(|&v| v != 0.0).collect::<Vec<_>>();
        let a = support(run(&store, &x, |g, v| twice.forward(g, v)));
        let b = support(run(&store, &x, |g, v| five.forward(g, v)));
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|&&s| s).count(), 25);
    }

    #[test]
    fn efc_kan_residual_only_wraps_tok_kan() {
        let x = tokens(&[1, 4, 4, 4]);
        let mut pb = ParamBuilder::<f64>::new(5);
        let with_conv = EfcKan::new(&mut pb, "a", 4, EfconvMode::Conv3, SplineGrid::default()).unwrap();
        let plain = EfcKan::new(&mut pb, "b", 4, EfconvMode::None, SplineGrid::default()).unwrap();
        let mut store = pb.finish();
        fill_where(&mut store, |n| n.contains("tok_kan") && !n.contains("norm"), 0.0);
        let y = run(&store, &x, |g, v| with_conv.forward(g, v));
        let ef = run(&store, &x, |g, v| with_conv.efconv.forward(g, v));
        assert_eq!(y, ef);
        assert_eq!(run(&store, &x, |g, v| plain.forward(g, v)), x);
    }

    #[test]
    fn vkan_with_zeroed_sub_blocks_is_layer_norm_of_doubled_input() {
        let x = tokens(&[1, 4, 4, 8]);
        let mut pb = ParamBuilder::<f64>::new(6);
        let block = VkanBlock::new(&mut pb, "vkan", 8, 2, EfconvMode::Conv3x2, SplineGrid::default()).unwrap();
        let mut store = pb.finish();
        fill_where(&mut store, |n| n.contains("out_proj") || (n.contains("efc_kan") && !n.contains("norm")), 0.0);
        let y = run(&store, &x, |g, v| block.forward(g, v));
        // a VSS block with zero output projections is the identity
        let ln = crate::nn::layer_norm(&x.scale(2.0), &Tensor::ones(vec![8]), &Tensor::zeros(vec![8])).unwrap();
        let d = y.max_abs_diff(&ln).unwrap();
        assert!(d < 1e-14, "{d}");
    }

    #[test]
    fn vkan_preserves_bottleneck_shape() {
        let mut pb = ParamBuilder::<f32>::new(7);
        let block = VkanBlock::new(&mut pb, "vkan", 768, 16, EfconvMode::Conv3x2, SplineGrid::default()).unwrap();
        let store = pb.finish();
        let mut g = Graph::eval(&store);
        let x = g.constant(crate::tensor::Tensor::from_fn(vec![1, 8, 8, 768], |i| ((i % 13) as f32) * 0.1 - 0.6));
        let y = block.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[1, 8, 8, 768]);
        assert!(g.value(y).data().iter().all(|v| v.is_finite()));
    }
}
