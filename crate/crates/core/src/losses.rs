//! Segmentation losses on the tape.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DICE_EPS: f64 = 1e-5;

fn check_scores<T: Scalar>(tape: &Tape<T>, x: Var, mask: &LabelMask, op: &'static str) -> Result<usize> {
    let s = tape.shape(x);
    let [b, h, w] = mask.shape();
    match *s {
        [sb, k, sh, sw] if sb == b && sh == h && sw == w => {
            mask.check_classes(k)?;
            Ok(k)
        }
        _ => Err(Error::shape(op, format!("scores {s:?} vs mask {:?}", mask.shape()))),
    }
}

/// `1 − (2Σp·y + ε)/(Σp + Σy + ε)` per sample and class, averaged over
/// both. `probs` is `B×K×H×W`.
pub fn soft_dice_loss<T: Scalar>(tape: &mut Tape<T>, probs: Var, mask: &LabelMask) -> Result<Var> {
    let k = check_scores(tape, probs, mask, "soft_dice_loss")?;
    let y = mask.one_hot::<T>(k)?;
    let [b, h, w] = mask.shape();
    let eps = T::lit(DICE_EPS);
    let mut counts = vec![0usize; b * k];
    for (i, &l) in mask.data().iter().enumerate() {
        counts[i / (h * w) * k + l as usize] += 1;
    }
    let y_sum = Tensor::from_fn(vec![b, k], |i| T::lit(counts[i] as f64) + eps);
    let yv = tape.constant(y);
    let py = tape.mul(probs, yv)?;
    let flat = |t: &mut Tape<T>, v| -> Result<Var> {
        let r = t.reshape(v, &[b, k, h * w])?;
        t.sum_axis(r, 2, false)
    };
    let inter = flat(tape, py)?;
    let p_sum = flat(tape, probs)?;
    let num = tape.scale(inter, T::lit(2.0));
    let num = tape.add_scalar(num, eps);
    let ys = tape.constant(y_sum);
    let den = tape.add(p_sum, ys)?;
    let ratio = tape.div(num, den)?;
    let m = tape.mean(ratio);
    let neg = tape.neg(m);
    Ok(tape.add_scalar(neg, T::one()))
}

/// Mean over all pixels of `−log softmax(logits)[label]`, softmax over
/// the class axis.
pub fn cross_entropy_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, mask: &LabelMask) -> Result<Var> {
    let k = check_scores(tape, logits, mask, "cross_entropy_loss")?;
    let [b, h, w] = mask.shape();
    let hw = h * w;
    let n = b * hw;
    let z = tape.value(logits).data();
    let labels = mask.data();
    let keep = tape.will_record(&[logits]);
    let mut probs = if keep { vec![T::zero(); z.len()] } else { Vec::new() };
    let mut total = T::zero();
    for i in 0..n {
        let (bi, p) = (i / hw, i % hw);
        let at = |c: usize| (bi * k + c) * hw + p;
        let mut mx = T::neg_infinity();
        for c in 0..k {
            mx = mx.max(z[at(c)]);
        }
        let mut s = T::zero();
        for c in 0..k {
            s += (z[at(c)] - mx).exp();
        }
        let lse = mx + s.ln();
        total += lse - z[at(labels[i] as usize)];
        if keep {
            for c in 0..k {
                probs[at(c)] = (z[at(c)] - lse).exp();
            }
        }
    }
    let inv_n = T::one() / T::lit(n as f64);
    let value = Tensor::scalar(total * inv_n);
    let labels = labels.to_vec();
    let shape = vec![b, k, h, w];
    Ok(tape.record("cross_entropy", value, &[logits], move |args| {
        let g = args.grad.item() * inv_n;
        let mut d = probs.clone();
        for (i, &l) in labels.iter().enumerate() {
            let (bi, p) = (i / hw, i % hw);
            d[(bi * k + l as usize) * hw + p] -= T::one();
        }
        for v in &mut d {
            *v *= g;
        }
        vec![Some(Tensor::new(shape.clone(), d).expect("shape"))]
    }))
}

/// Soft dice on `softmax(logits)` plus cross-entropy, at one scale.
pub fn dice_ce_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, mask: &LabelMask) -> Result<Var> {
    let probs = tape.softmax(logits, 1)?;
    let dice = soft_dice_loss(tape, probs, mask)?;
    let ce = cross_entropy_loss(tape, logits, mask)?;
    tape.add(dice, ce)
}

/// Per-stage `dice + ce` and their weighted total.
#[derive(Clone, Debug)]
pub struct DeepSupervisionLoss {
    pub total: Var,
    /// `None` where the weight is zero and the stage was skipped.
    pub stages: Vec<Option<Var>>,
}

/// `Σ_k α_k (dice_k + ce_k)` over four outputs at scales 1, 1/2, 1/4, 1/8,
/// each scored against the nearest-neighbour downsampled mask. Terms are
/// accumulated in stage order.
pub fn deep_supervision_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: &[Var],
    mask: &LabelMask,
    weights: &[f64; 4],
) -> Result<DeepSupervisionLoss> {
    if logits.len() != 4 {
        return Err(Error::InvalidArgument(format!(
            "deep supervision expects 4 outputs, got {}",
            logits.len()
        )));
    }
    let mut total: Option<Var> = None;
    let mut stages = Vec::with_capacity(4);
    for (i, (&z, &a)) in logits.iter().zip(weights).enumerate() {
        let expect = 1usize << i;
        let s = tape.shape(z);
        if s.len() != 4 || s[2] * expect != mask.height() || s[3] * expect != mask.width() {
            return Err(Error::shape(
                "deep_supervision_loss",
                format!("output {i} is {s:?}, expected 1/{expect} of mask {:?}", mask.shape()),
            ));
        }
        if a == 0.0 {
            stages.push(None);
            continue;
        }
        let m = mask.downsample(expect)?;
        let l = dice_ce_loss(tape, z, &m)?;
        stages.push(Some(l));
        let term = tape.scale(l, T::lit(a));
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(T::zero())),
    };
    Ok(DeepSupervisionLoss { total, stages })
}

/// Training objective for a model output list: deep supervision over four
/// outputs, or `dice + ce` on a single one.
pub fn segmentation_loss<T: Scalar>(tape: &mut Tape<T>, logits: &[Var], mask: &LabelMask, weights: &[f64; 4]) -> Result<Var> {
    match logits {
        [single] => dice_ce_loss(tape, *single, mask),
        _ => Ok(deep_supervision_loss(tape, logits, mask, weights)?.total),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn value(f: impl FnOnce(&mut Tape<f64>) -> Result<Var>) -> f64 {
        let mut t = Tape::inference();
        let v = f(&mut t).unwrap();
        t.value(v).item()
    }

    #[test]
    fn dice_extremes_and_half_overlap() {
        let m = LabelMask::plane(2, 2, vec![1, 1, 0, 0]).unwrap();
        let perfect = m.one_hot::<f64>(2).unwrap();
        let l = value(|t| {
            let p = t.constant(perfect.clone());
            soft_dice_loss(t, p, &m)
        });
        assert!(l <= 1e-5, "{l}");
        let flipped = Tensor::from_fn(vec![1, 2, 2, 2], |i| 1.0 - perfect.data()[i]);
        let l = value(|t| {
            let p = t.constant(flipped);
            soft_dice_loss(t, p, &m)
        });
        assert!((l - 1.0).abs() < 1e-4, "{l}");
        let pred = LabelMask::plane(2, 2, vec![1, 0, 1, 0]).unwrap().one_hot::<f64>(2).unwrap();
        let hard = value(|t| {
            let p = t.constant(pred.clone());
            soft_dice_loss(t, p, &m)
        });
        // both classes have |Y| = |Ỹ| = 2 and overlap 1
        assert!((hard - 0.5).abs() < 1e-5, "{hard}");
    }

    #[test]
    fn cross_entropy_cases() {
        let m = LabelMask::plane(1, 3, vec![0, 1, 1]).unwrap();
        let l = value(|t| {
            let z = t.constant(Tensor::zeros(vec![1, 2, 1, 3]));
            cross_entropy_loss(t, z, &m)
        });
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let one = LabelMask::plane(1, 1, vec![0]).unwrap();
        let l = value(|t| {
            let z = t.constant(Tensor::new(vec![1, 2, 1, 1], vec![1.0, 0.0]).unwrap());
            cross_entropy_loss(t, z, &one)
        });
        assert!((l - 0.313262).abs() < 1e-6);
        let l = value(|t| {
            let z = t.constant(Tensor::new(vec![1, 2, 1, 1], vec![40.0, 0.0]).unwrap());
            cross_entropy_loss(t, z, &one)
        });
        assert!(l < 1e-15);
        let bad = LabelMask::plane(1, 1, vec![2]).unwrap();
        let mut t = Tape::<f64>::inference();
        let z = t.constant(Tensor::zeros(vec![1, 2, 1, 1]));
        assert!(cross_entropy_loss(&mut t, z, &bad).is_err());
    }

    fn pyramid(t: &mut Tape<f64>, seed: usize) -> Vec<Var> {
        (0..4)
            .map(|i| {
                let s = 8 >> i;
                t.constant(Tensor::from_fn(vec![2, 3, s, s], |j| ((j * 7 + seed + i) as f64 * 0.37).sin()))
            })
            .collect()
    }

    #[test]
    fn single_scale_weights_reduce_to_stage_zero() {
        let m = LabelMask::from_fn([2, 8, 8], |i| (i % 3) as u32);
        let mut t = Tape::inference();
        let z = pyramid(&mut t, 1);
        let ds = deep_supervision_loss(&mut t, &z, &m, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        let single = dice_ce_loss(&mut t, z[0], &m).unwrap();
        assert_eq!(t.value(ds.total).item().to_bits(), t.value(single).item().to_bits());
        assert!(deep_supervision_loss(&mut t, &z[..3], &m, &[1.0; 4]).is_err());
    }

    #[test]
    fn perfect_predictions_at_every_scale() {
        let m = LabelMask::from_fn([1, 8, 8], |i| ((i / 8) / 4) as u32);
        let mut t = Tape::inference();
        let z: Vec<Var> = (0..4)
            .map(|i| {
                let oh = m.downsample(1 << i).unwrap().one_hot::<f64>(2).unwrap();
                t.constant(oh.scale(60.0))
            })
            .collect();
        let ds = deep_supervision_loss(&mut t, &z, &m, &[1.0, 0.5, 0.25, 0.125]).unwrap();
        assert!(t.value(ds.total).item() < 1e-4);
    }

    #[test]
    fn recomposition_is_bit_exact() {
        let m = LabelMask::from_fn([2, 8, 8], |i| ((i * 5) % 3) as u32);
        let w = [1.0, 0.5, 0.25, 0.125];
        let mut t = Tape::inference();
        let z = pyramid(&mut t, 3);
        let ds = deep_supervision_loss(&mut t, &z, &m, &w).unwrap();
        let mut manual = 0.0f64;
        for (i, zi) in z.iter().enumerate() {
            let l = dice_ce_loss(&mut t, *zi, &m.downsample(1 << i).unwrap()).unwrap();
            let term = w[i] * t.value(l).item();
            manual = if i == 0 { term } else { manual + term };
        }
        assert_eq!(t.value(ds.total).item().to_bits(), manual.to_bits());
    }
}
