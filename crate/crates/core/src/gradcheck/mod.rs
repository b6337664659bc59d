//! Central-difference verification of tape gradients.

mod suites;

pub use suites::{run_suite, suite_names, SuiteCase, BLOCK_TOL, END_TO_END_TOL, SUITES};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Graph, ParamId, ParamStore};
use crate::tensor::Tensor;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Largest relative error between the tape gradient of a scalar-valued
/// `f` and central differences `(f(x+h) − f(x−h)) / 2h`, over every
/// coordinate of every input.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::inference();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let r = f(&mut t, &vs)?;
        Ok(t.value(r).item())
    };
    let mut work = inputs.to_vec();
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).cloned().unwrap_or_else(|| inputs[i].zeros_like());
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + step;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = x0 - step;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = x0;
            worst = worst.max(rel_err(analytic.data()[j], (fp - fm) / (2.0 * step)));
        }
    }
    Ok(worst)
}

/// Which parameter coordinates a store-based check perturbs.
#[derive(Clone, Copy, Debug)]
pub enum ParamProbe {
    None,
    All,
    /// `count` coordinates: a uniformly chosen trainable tensor, then a
    /// uniformly chosen entry of it.
    Sample { count: usize, seed: u64 },
}

/// Difference formula used by [`check_graph`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`.
    #[default]
    Central,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, exact for quartics.
    FivePoint,
}

impl Stencil {
    /// `(k, c)` pairs of `Σ c·(f(x+kh) − f(x−kh)) / h`.
    fn pairs(self) -> &'static [(f64, f64)] {
        match self {
            Stencil::Central => &[(1.0, 0.5)],
            Stencil::FivePoint => &[(1.0, 8.0 / 12.0), (2.0, -1.0 / 12.0)],
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub step: f64,
    pub stencil: Stencil,
    /// Batch-norm mode of every evaluation.
    pub training: bool,
    pub params: ParamProbe,
    pub inputs: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            step: 1e-6,
            stencil: Stencil::Central,
            training: true,
            params: ParamProbe::All,
            inputs: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub max_rel_err: f64,
    /// Where the largest error occurred.
    pub worst: String,
    pub probes: usize,
}

enum Target {
    Param(ParamId, usize),
    Input(usize, usize),
}

/// Gradient check of a model-level function w.r.t. its parameters and
/// inputs. `f` must return a scalar.
pub fn check_graph<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], opts: CheckOptions, f: F) -> Result<CheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::with_tape(store, Tape::new(), opts.training, true);
    let vars: Vec<Var> = inputs.iter().map(|x| g.leaf(x.clone(), opts.inputs)).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;
    let param_grad = |id: ParamId, j: usize| -> f64 {
        g.bound_var(id).and_then(|v| grads.get(v)).map_or(0.0, |t| t.data()[j])
    };

    let mut targets = Vec::new();
    let trainable: Vec<ParamId> = store.trainable_ids().collect();
    match opts.params {
        ParamProbe::None => {}
        ParamProbe::All => {
            for &id in &trainable {
                targets.extend((0..store.value(id).numel()).map(|j| Target::Param(id, j)));
            }
        }
        ParamProbe::Sample { count, seed } => {
            if trainable.is_empty() {
                return Err(Error::InvalidArgument("no trainable parameters to sample".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..count {
                let id = trainable[rng.random_range(0..trainable.len())];
                targets.push(Target::Param(id, rng.random_range(0..store.value(id).numel())));
            }
        }
    }
    if opts.inputs {
        for (i, x) in inputs.iter().enumerate() {
            targets.extend((0..x.numel()).map(|j| Target::Input(i, j)));
        }
    }

    let mut work_store = store.clone();
    let mut work_inputs = inputs.to_vec();
    let eval = |s: &ParamStore<f64>, xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::with_tape(s, Tape::inference(), opts.training, false);
        let vs: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let r = f(&mut g, &vs)?;
        Ok(g.value(r).item())
    };
    let h = opts.step;
    let mut report = CheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        probes: targets.len(),
    };
    for target in &targets {
        let mut numeric = 0.0;
        let (analytic, label) = match *target {
            Target::Param(id, j) => {
                let x0 = store.value(id).data()[j];
                for &(k, c) in opts.stencil.pairs() {
                    work_store.value_mut(id).data_mut()[j] = x0 + k * h;
                    let fp = eval(&work_store, &work_inputs)?;
                    work_store.value_mut(id).data_mut()[j] = x0 - k * h;
                    numeric += c * (fp - eval(&work_store, &work_inputs)?);
                }
                work_store.value_mut(id).data_mut()[j] = x0;
                (param_grad(id, j), format!("{}[{j}]", store.name(id)))
            }
            Target::Input(i, j) => {
                let x0 = inputs[i].data()[j];
                for &(k, c) in opts.stencil.pairs() {
                    work_inputs[i].data_mut()[j] = x0 + k * h;
                    let fp = eval(&work_store, &work_inputs)?;
                    work_inputs[i].data_mut()[j] = x0 - k * h;
                    numeric += c * (fp - eval(&work_store, &work_inputs)?);
                }
                work_inputs[i].data_mut()[j] = x0;
                (grads.get(vars[i]).map_or(0.0, |t| t.data()[j]), format!("input{i}[{j}]"))
            }
        };
        let e = rel_err(analytic, numeric / h);
        if e > report.max_rel_err || report.worst.is_empty() {
            report.max_rel_err = report.max_rel_err.max(e);
            report.worst = label;
        }
    }
    Ok(report)
}

/// Replaces every trainable tensor with uniform draws from `[lo, hi]`,
/// moving the check away from initializations whose gradients are tiny
/// (such as the small default step sizes of a selective scan).
pub fn randomize_trainable(store: &mut ParamStore<f64>, lo: f64, hi: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = rng.random_range(lo..=hi);
        }
    }
}

/// Fixed pseudo-random weights in `[-1, 1]`, used to turn a tensor output
/// into a scalar objective.
pub fn probe_weights(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..=1.0))
}

/// Random tensor with entries uniform in `[lo, hi]`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..=hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Conv2dSpec;

    #[test]
    fn relative_error_definition() {
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(rel_err(0.0, 1e-12), 1e-12 / 1e-8);
    }

    #[test]
    fn linear_layer() {
        let x = random_tensor(&[3, 4], -1.0, 1.0, 1);
        let w = random_tensor(&[5, 4], -1.0, 1.0, 2);
        let b = random_tensor(&[5], -1.0, 1.0, 3);
        let probe = probe_weights(&[3, 5], 4);
        let err = finite_diff_check(
            |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                t.weighted_sum(y, probe.clone())
            },
            &[x, w, b],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-7, "linear {err}");
    }

    #[test]
    fn conv2d_layer() {
        let x = random_tensor(&[2, 4, 5, 5], -1.0, 1.0, 5);
        let w = random_tensor(&[6, 2, 3, 3], -1.0, 1.0, 6);
        let b = random_tensor(&[6], -1.0, 1.0, 7);
        let spec = Conv2dSpec { stride: 2, padding: 1, groups: 2 };
        let probe = probe_weights(&[2, 6, 3, 3], 8);
        let err = finite_diff_check(
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), spec)?;
                t.weighted_sum(y, probe.clone())
            },
            &[x, w, b],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "conv2d {err}");
    }

    #[test]
    fn relu_away_from_kink() {
        let mut x = random_tensor(&[40], -1.0, 1.0, 9);
        for v in x.data_mut() {
            if v.abs() <= 0.1 {
                *v += 0.2f64.copysign(*v);
            }
        }
        let probe = probe_weights(&[40], 10);
        let err = finite_diff_check(|t, v| { let y = t.relu(v[0]); t.weighted_sum(y, probe.clone()) }, &[x], 1e-5).unwrap();
        assert!(err <= 1e-7, "relu {err}");
    }
}
