//! Per-module gradient-check suites on small random shapes.

use crate::attention::Cbam;
use crate::autograd::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2dSpec, PoolKind, PoolWindow, RunningStats};
use crate::losses::{cross_entropy_loss, deep_supervision_loss, segmentation_loss, soft_dice_loss};
use crate::mask::LabelMask;
use crate::net::{MedVkan, ModelConfig};
use crate::kan::{EfcKan, EfconvMode, KanLinear, SplineGrid, TokKan, VkanBlock};
use crate::params::{Graph, ParamBuilder, ParamId, ParamStore};
use crate::scan::{ScanMode, Ss2d, VssLayer};
use crate::tensor::Tensor;

use super::{check_graph, randomize_trainable, finite_diff_check, probe_weights, random_tensor, CheckOptions, ParamProbe, Stencil};

pub const SUITES: [&str; 6] = ["tensor", "scan", "kan", "cbam", "losses", "net"];

pub fn suite_names() -> &'static [&'static str] {
    &SUITES
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteCase {
    pub suite: &'static str,
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    /// Coordinate of the largest error, when known.
    pub worst: Option<String>,
}

impl SuiteCase {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

pub const BLOCK_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;
const STEP: f64 = 1e-6;
/// Composite blocks carry gradients down to ~1e-8 next to O(1) outputs,
/// so they use a wider step with the fourth-order stencil.
const BLOCK_STEP: f64 = 2e-4;

pub fn run_suite(name: &str) -> Result<Vec<SuiteCase>> {
    match name {
        "tensor" => tensor_suite(),
        "scan" => scan_suite(),
        "kan" => kan_suite(),
        "cbam" => cbam_suite(),
        "losses" => losses_suite(),
        "net" => net_suite(),
        _ => Err(Error::InvalidArgument(format!(
            "unknown gradcheck module {name:?}; expected one of {}",
            SUITES.join(", ")
        ))),
    }
}

struct Collector {
    suite: &'static str,
    cases: Vec<SuiteCase>,
}

impl Collector {
    fn new(suite: &'static str) -> Self {
        Collector { suite, cases: Vec::new() }
    }

    fn push(&mut self, name: impl Into<String>, err: f64, tolerance: f64) {
        self.cases.push(SuiteCase {
            suite: self.suite,
            name: name.into(),
            max_rel_err: err,
            tolerance,
            worst: None,
        });
    }

    /// Checks `op` over fresh random inputs at several points; `inputs`
    /// draws the inputs for a given seed.
    fn primitive<I, F>(&mut self, name: &str, points: u64, inputs: I, op: F) -> Result<()>
    where
        I: Fn(u64) -> Vec<Tensor<f64>>,
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let mut worst = 0.0f64;
        for p in 0..points {
            let xs = inputs(1000 + p);
            let out_shape = {
                let mut t = Tape::inference();
                let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
                let y = op(&mut t, &vs)?;
                t.shape(y).to_vec()
            };
            let w = probe_weights(&out_shape, 7000 + p);
            let err = finite_diff_check(
                |t, v| {
                    let y = op(t, v)?;
                    t.weighted_sum(y, w.clone())
                },
                &xs,
                STEP,
            )?;
            worst = worst.max(err);
        }
        self.push(name, worst, BLOCK_TOL);
        Ok(())
    }

    /// Checks a parameterized block against all of its trainable
    /// parameters and its input, with parameters redrawn from `[-1, 1]`.
    fn block<M, B, F>(&mut self, name: &str, seed: u64, build: B, shape: &[usize], forward: F) -> Result<()>
    where
        B: FnOnce(&mut ParamBuilder<f64>) -> Result<M>,
        F: Fn(&M, &mut Graph<f64>, Var) -> Result<Var>,
    {
        let mut pb = ParamBuilder::<f64>::new(seed);
        let module = build(&mut pb)?;
        let mut store = pb.finish();
        randomize_trainable(&mut store, -1.0, 1.0, seed + 100);
        positive_scales(&mut store, seed + 200);
        let x = random_tensor(shape, -1.0, 1.0, seed + 1);
        let out_shape = {
            let mut g = Graph::eval(&store);
            let v = g.constant(x.clone());
            let y = forward(&module, &mut g, v)?;
            g.shape(y).to_vec()
        };
        let w = probe_weights(&out_shape, seed + 2);
        let opts = CheckOptions {
            step: BLOCK_STEP,
            stencil: Stencil::FivePoint,
            training: true,
            params: ParamProbe::All,
            inputs: true,
        };
        let rep = check_graph(&store, &[x], opts, |g, v| {
            let y = forward(&module, g, v[0])?;
            g.weighted_sum(y, w.clone())
        })?;
        self.push(name, rep.max_rel_err, BLOCK_TOL);
        self.cases.last_mut().expect("just pushed").worst = Some(rep.worst);
        Ok(())
    }
}

/// Redraws normalization scales (the 1-D `weight` tensors) from
/// `[0.5, 1.5]`, so normalized activations keep their spread.
fn positive_scales(store: &mut ParamStore<f64>, seed: u64) {
    let ids: Vec<ParamId> = store
        .trainable_ids()
        .filter(|&id| store.name(id).ends_with("weight") && store.value(id).shape().len() == 1)
        .collect();
    for (i, id) in ids.into_iter().enumerate() {
        let shape = store.value(id).shape().to_vec();
        store.set(id, random_tensor(&shape, 0.5, 1.5, seed + i as u64)).expect("same shape");
    }
}

/// Uniform in `[-1, 1]` with every entry at least `gap` away from zero.
fn off_kink(shape: &[usize], gap: f64, seed: u64) -> Tensor<f64> {
    let mut x = random_tensor(shape, -1.0, 1.0, seed);
    for v in x.data_mut() {
        if v.abs() < gap {
            *v += (2.0 * gap).copysign(*v);
        }
    }
    x
}

fn tensor_suite() -> Result<Vec<SuiteCase>> {
    let mut c = Collector::new("tensor");
    const P: u64 = 10;
    let r = |shape: &'static [usize]| move |s: u64| vec![random_tensor(shape, -1.0, 1.0, s)];
    let pair = |a: &'static [usize], b: &'static [usize]| {
        move |s: u64| vec![random_tensor(a, -1.0, 1.0, s), random_tensor(b, -1.0, 1.0, s + 500)]
    };

    c.primitive("add (broadcast)", P, pair(&[2, 3, 4], &[3, 1]), |t, v| t.add(v[0], v[1]))?;
    c.primitive("sub (broadcast)", P, pair(&[2, 3], &[2, 3]), |t, v| t.sub(v[0], v[1]))?;
    c.primitive("mul (broadcast)", P, pair(&[2, 3, 4], &[4]), |t, v| t.mul(v[0], v[1]))?;
    c.primitive(
        "div",
        P,
        |s| vec![random_tensor(&[3, 4], -1.0, 1.0, s), random_tensor(&[3, 4], 0.5, 2.0, s + 1)],
        |t, v| t.div(v[0], v[1]),
    )?;
    c.primitive("exp", P, r(&[5, 3]), |t, v| Ok(t.exp(v[0])))?;
    c.primitive("log", P, |s| vec![random_tensor(&[5, 3], 0.2, 3.0, s)], |t, v| Ok(t.log(v[0])))?;
    c.primitive("relu", P, |s| vec![off_kink(&[4, 6], 0.1, s)], |t, v| Ok(t.relu(v[0])))?;
    for act in [Activation::Silu, Activation::Sigmoid, Activation::Softplus] {
        c.primitive(act.name(), P, r(&[4, 6]), move |t, v| Ok(t.activation(v[0], act)))?;
    }
    c.primitive("softmax", P, r(&[3, 5]), |t, v| t.softmax(v[0], 1))?;
    c.primitive("sum_axis", P, r(&[2, 3, 4]), |t, v| t.sum_axis(v[0], 1, false))?;
    c.primitive("permute/narrow/concat", P, r(&[2, 3, 4]), |t, v| {
        let p = t.permute(v[0], &[2, 0, 1])?;
        let a = t.narrow(p, 0, 1, 2)?;
        let b = t.narrow(p, 0, 0, 1)?;
        t.concat(&[a, b, a], 0)
    })?;
    c.primitive("conv2d", P, pair(&[2, 3, 5, 5], &[4, 3, 3, 3]), |t, v| {
        t.conv2d(v[0], v[1], None, Conv2dSpec::same(3))
    })?;
    c.primitive(
        "conv2d (stride 2, pad 1, groups 2, bias)",
        P,
        |s| {
            vec![
                random_tensor(&[2, 4, 6, 6], -1.0, 1.0, s),
                random_tensor(&[6, 2, 3, 3], -1.0, 1.0, s + 1),
                random_tensor(&[6], -1.0, 1.0, s + 2),
            ]
        },
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec { stride: 2, padding: 1, groups: 2 }),
    )?;
    c.primitive("conv2d depthwise", P, pair(&[2, 4, 5, 5], &[4, 1, 3, 3]), |t, v| {
        t.conv2d(v[0], v[1], None, Conv2dSpec::depthwise(3, 4))
    })?;
    c.primitive(
        "transposed_conv2d",
        P,
        |s| {
            vec![
                random_tensor(&[2, 3, 4, 4], -1.0, 1.0, s),
                random_tensor(&[3, 2, 2, 2], -1.0, 1.0, s + 1),
                random_tensor(&[2], -1.0, 1.0, s + 2),
            ]
        },
        |t, v| t.transposed_conv2d(v[0], v[1], Some(v[2]), 2),
    )?;
    c.primitive("max pool", P, r(&[2, 2, 4, 4]), |t, v| t.pool2d(v[0], PoolKind::Max, PoolWindow::Size(2)))?;
    c.primitive("avg pool (global)", P, r(&[2, 3, 4, 4]), |t, v| t.pool2d(v[0], PoolKind::Avg, PoolWindow::Global))?;
    c.primitive(
        "linear",
        P,
        |s| {
            vec![
                random_tensor(&[2, 3, 4], -1.0, 1.0, s),
                random_tensor(&[5, 4], -1.0, 1.0, s + 1),
                random_tensor(&[5], -1.0, 1.0, s + 2),
            ]
        },
        |t, v| t.linear(v[0], v[1], Some(v[2])),
    )?;
    let bn_inputs = |s: u64| {
        vec![
            random_tensor(&[2, 3, 3, 3], -1.0, 1.0, s),
            random_tensor(&[3], 0.5, 1.5, s + 1),
            random_tensor(&[3], -1.0, 1.0, s + 2),
        ]
    };
    let stats = RunningStats {
        mean: Tensor::new(vec![3], vec![0.1, -0.2, 0.3])?,
        var: Tensor::new(vec![3], vec![0.5, 1.0, 2.0])?,
    };
    let st = stats.clone();
    c.primitive("batch_norm2d (training)", P, bn_inputs, move |t, v| {
        Ok(t.batch_norm2d(v[0], v[1], v[2], &st, true)?.0)
    })?;
    c.primitive("batch_norm2d (eval)", P, bn_inputs, move |t, v| {
        Ok(t.batch_norm2d(v[0], v[1], v[2], &stats, false)?.0)
    })?;
    c.primitive(
        "layer_norm",
        P,
        |s| {
            vec![
                random_tensor(&[2, 3, 5], -1.0, 1.0, s),
                random_tensor(&[5], 0.5, 1.5, s + 1),
                random_tensor(&[5], -1.0, 1.0, s + 2),
            ]
        },
        |t, v| t.layer_norm(v[0], v[1], v[2]),
    )?;
    Ok(c.cases)
}

fn scan_suite() -> Result<Vec<SuiteCase>> {
    let mut c = Collector::new("scan");
    for mode in [ScanMode::Naive, ScanMode::Blocked] {
        c.primitive(
            &format!("selective_scan ({mode:?})"),
            3,
            |s| {
                let (b, l, d, n) = (2, 20, 3, 4);
                vec![
                    random_tensor(&[b, l, d], -1.0, 1.0, s),
                    random_tensor(&[b, l, d], 0.05, 1.0, s + 1),
                    random_tensor(&[d, n], -1.0, 1.0, s + 2),
                    random_tensor(&[b, l, n], -1.0, 1.0, s + 3),
                    random_tensor(&[b, l, n], -1.0, 1.0, s + 4),
                    random_tensor(&[d], -1.0, 1.0, s + 5),
                ]
            },
            move |t, v| t.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], mode),
        )?;
    }
    c.primitive("cross_scan/cross_merge", 3, |s| vec![random_tensor(&[2, 4, 3, 4], -1.0, 1.0, s)], |t, v| {
        let s = t.cross_scan(v[0])?;
        let sq = t.mul(s, s)?;
        t.cross_merge(sq, 3, 4)
    })?;

    c.block("ss2d (2×4×4×4)", 11, |pb| Ss2d::new(pb, "ss2d", 4, 4, false), &[2, 4, 4, 4], |m, g, x| m.forward(g, x))?;
    c.block("vss_layer (2×4×4×4)", 14, |pb| VssLayer::new(pb, "vss", 4, 4), &[2, 4, 4, 4], |m, g, x| m.forward(g, x))?;
    Ok(c.cases)
}

fn kan_suite() -> Result<Vec<SuiteCase>> {
    let mut c = Collector::new("kan");
    let grid = SplineGrid::default();
    // spread past the grid so the extension cells are exercised
    c.primitive("bspline_basis", 10, |s| vec![random_tensor(&[3, 7], -1.6, 1.6, s)], move |t, v| {
        t.bspline_basis(v[0], &grid)
    })?;
    c.block("kan_linear (5×4 → 3)", 21, |pb| KanLinear::new(pb, "kan", 4, 3, grid), &[5, 4], |m, g, x| m.forward(g, x))?;
    c.block("tok_kan (2×4×4×3)", 22, |pb| TokKan::new(pb, "tok", 3, grid), &[2, 4, 4, 3], |m, g, x| m.forward(g, x))?;
    for mode in EfconvMode::ALL {
        c.block(
            &format!("efc_kan {mode} (2×6×6×3)"),
            23,
            |pb| EfcKan::new(pb, "efc", 3, mode, grid),
            &[2, 6, 6, 3],
            |m, g, x| m.forward(g, x),
        )?;
    }
    c.block(
        "vkan_block (1×4×4×4)",
        24,
        |pb| VkanBlock::new(pb, "vkan", 4, 2, EfconvMode::Conv3x2, grid),
        &[1, 4, 4, 4],
        |m, g, x| m.forward(g, x),
    )?;
    Ok(c.cases)
}

fn cbam_suite() -> Result<Vec<SuiteCase>> {
    let mut c = Collector::new("cbam");
    c.block("channel_attention (2×8×4×4)", 31, |pb| Cbam::new(pb, "cbam", 8, 4), &[2, 8, 4, 4], |m, g, x| {
        m.channel_attention(g, x)
    })?;
    c.block("spatial_attention (2×8×4×4)", 32, |pb| Cbam::new(pb, "cbam", 8, 4), &[2, 8, 4, 4], |m, g, x| {
        m.spatial_attention(g, x)
    })?;
    c.block("cbam_apply (2×8×6×6)", 33, |pb| Cbam::new(pb, "cbam", 8, 4), &[2, 8, 6, 6], |m, g, x| m.forward(g, x))?;
    Ok(c.cases)
}

fn losses_suite() -> Result<Vec<SuiteCase>> {
    let mut c = Collector::new("losses");
    let mask = LabelMask::from_fn([2, 4, 4], |i| ((i * 7) % 3) as u32);
    let logits = |shape: &'static [usize]| move |s: u64| vec![random_tensor(shape, -2.0, 2.0, s)];
    let m = mask.clone();
    c.primitive("soft_dice_loss ∘ softmax", 10, logits(&[2, 3, 4, 4]), move |t, v| {
        let p = t.softmax(v[0], 1)?;
        soft_dice_loss(t, p, &m)
    })?;
    let m = mask.clone();
    c.primitive("cross_entropy_loss", 10, logits(&[2, 3, 4, 4]), move |t, v| cross_entropy_loss(t, v[0], &m))?;
    let big = LabelMask::from_fn([1, 8, 8], |i| ((i / 8 + i % 8) % 3) as u32);
    c.primitive(
        "deep_supervision_loss",
        10,
        |s| (0..4).map(|i| random_tensor(&[1, 3, 8 >> i, 8 >> i], -2.0, 2.0, s + 10 * i as u64)).collect(),
        move |t, v| Ok(deep_supervision_loss(t, v, &big, &[1.0, 0.5, 0.25, 0.125])?.total),
    )?;
    Ok(c.cases)
}

/// Tiny model on one 1×1×64×64 image: training-mode loss gradient against
/// 20 sampled parameters.
fn net_suite() -> Result<Vec<SuiteCase>> {
    let mut c = Collector::new("net");
    let cfg = ModelConfig::tiny(1, 2);
    let (model, mut store) = MedVkan::init::<f64>(&cfg, 41)?;
    randomize_trainable(&mut store, -1.0, 1.0, 141);
    positive_scales(&mut store, 241);
    let x = random_tensor(&[1, 1, 64, 64], 0.0, 1.0, 42);
    let mask = LabelMask::from_fn([1, 64, 64], |i| {
        let (y, x) = ((i / 64) as f64 - 30.0, (i % 64) as f64 - 36.0);
        (y * y / 300.0 + x * x / 150.0 < 1.0) as u32
    });
    let opts = CheckOptions {
        step: BLOCK_STEP,
        stencil: Stencil::FivePoint,
        training: true,
        params: ParamProbe::Sample { count: 20, seed: 43 },
        inputs: false,
    };
    let rep = check_graph(&store, &[x], opts, |g, v| {
        let logits = model.forward(g, v[0])?;
        segmentation_loss(g, &logits, &mask, &cfg.ds_weights)
    })?;
    c.push("medvkan tiny end-to-end (20 parameters)", rep.max_rel_err, END_TO_END_TOL);
    c.cases.last_mut().expect("just pushed").worst = Some(rep.worst);
    Ok(c.cases)
}
