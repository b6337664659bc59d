//! Evaluation metrics on hard label masks.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{connected_components, LabelMask};

fn same_shape(pred: &LabelMask, gt: &LabelMask) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("metric", format!("pred {:?} vs gt {:?}", pred.shape(), gt.shape())));
    }
    Ok(())
}

/// `(|P∩G|, |P|, |G|)` for class `c`.
fn overlap(pred: &LabelMask, gt: &LabelMask, c: u32) -> (usize, usize, usize) {
    let mut counts = (0, 0, 0);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p == c, g == c);
        counts.0 += (p && g) as usize;
        counts.1 += p as usize;
        counts.2 += g as usize;
    }
    counts
}

/// `2|P∩G| / (|P| + |G|)`; 1 when both are empty.
pub fn dice_score(pred: &LabelMask, gt: &LabelMask, class: u32) -> Result<f64> {
    same_shape(pred, gt)?;
    let (i, p, g) = overlap(pred, gt, class);
    Ok(if p + g == 0 { 1.0 } else { 2.0 * i as f64 / (p + g) as f64 })
}

/// `|P∩G| / |P∪G|`; 1 when both are empty.
pub fn iou_score(pred: &LabelMask, gt: &LabelMask, class: u32) -> Result<f64> {
    same_shape(pred, gt)?;
    let (i, p, g) = overlap(pred, gt, class);
    let union = p + g - i;
    Ok(if union == 0 { 1.0 } else { i as f64 / union as f64 })
}

/// Surface pixels of class `c` per batch plane: foreground pixels with a
/// 4-neighbour outside the class or on the image border.
pub fn surface(mask: &LabelMask, class: u32) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = (mask.height(), mask.width());
    (0..mask.batch())
        .map(|b| {
            let d = mask.plane_data(b);
            let fg = |y: usize, x: usize| d[y * w + x] == class;
            let mut pts = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    if !fg(y, x) {
                        continue;
                    }
                    let edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
                    if edge || !fg(y - 1, x) || !fg(y + 1, x) || !fg(y, x - 1) || !fg(y, x + 1) {
                        pts.push((y, x));
                    }
                }
            }
            pts
        })
        .collect()
}

/// Points of `from` within Euclidean distance `tau` of some point of `to`,
/// searching a `⌊τ⌋` window on an occupancy grid.
fn within(from: &[(usize, usize)], to: &[(usize, usize)], h: usize, w: usize, tau: f64) -> usize {
    let mut grid = vec![false; h * w];
    for &(y, x) in to {
        grid[y * w + x] = true;
    }
    let r = tau.floor().min((h.max(w)) as f64) as isize;
    let tau2 = tau * tau;
    from.iter()
        .filter(|&&(y, x)| {
            for dy in -r..=r {
                let yy = y as isize + dy;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in -r..=r {
                    let xx = x as isize + dx;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    if ((dy * dy + dx * dx) as f64) <= tau2 && grid[yy as usize * w + xx as usize] {
                        return true;
                    }
                }
            }
            false
        })
        .count()
}

/// Normalized surface distance at tolerance `tau` pixels, pooled over the
/// batch: surface points of each mask within `tau` of the other's surface,
/// over the total surface size. 1 when both surfaces are empty, 0 when
/// exactly one is.
pub fn nsd_score(pred: &LabelMask, gt: &LabelMask, class: u32, tau: f64) -> Result<f64> {
    same_shape(pred, gt)?;
    if !(tau >= 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be non-negative, got {tau}")));
    }
    let (sp, sg) = (surface(pred, class), surface(gt, class));
    let (h, w) = (pred.height(), pred.width());
    let (mut hit, mut total) = (0, 0);
    let (mut np, mut ng) = (0, 0);
    for (p, g) in sp.iter().zip(&sg) {
        hit += within(p, g, h, w, tau) + within(g, p, h, w, tau);
        total += p.len() + g.len();
        np += p.len();
        ng += g.len();
    }
    Ok(match (np, ng) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => hit as f64 / total as f64,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InstanceScores {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl InstanceScores {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        InstanceScores { f1, precision, recall, tp, fp, fn_ }
    }
}

/// Matches predicted to ground-truth instances (labels > 0 in equally
/// sized maps) by greedy descending IoU over pairs with IoU > 0.5.
pub fn instance_f1(pred: &[i64], gt: &[i64]) -> Result<InstanceScores> {
    if pred.len() != gt.len() {
        return Err(Error::shape("instance_f1", format!("{} vs {} pixels", pred.len(), gt.len())));
    }
    if let Some(v) = pred.iter().chain(gt).find(|&&v| v < 0) {
        return Err(Error::InvalidArgument(format!("negative instance label {v}")));
    }
    let mut area_p: HashMap<i64, usize> = HashMap::new();
    let mut area_g: HashMap<i64, usize> = HashMap::new();
    let mut inter: HashMap<(i64, i64), usize> = HashMap::new();
    for (&p, &g) in pred.iter().zip(gt) {
        if p > 0 {
            *area_p.entry(p).or_default() += 1;
        }
        if g > 0 {
            *area_g.entry(g).or_default() += 1;
        }
        if p > 0 && g > 0 {
            *inter.entry((p, g)).or_default() += 1;
        }
    }
    let mut pairs: Vec<(f64, i64, i64)> = inter
        .iter()
        .map(|(&(p, g), &i)| (i as f64 / (area_p[&p] + area_g[&g] - i) as f64, p, g))
        .filter(|&(iou, ..)| iou > 0.5)
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut used_p, mut used_g) = (Vec::new(), Vec::new());
    for (_, p, g) in pairs {
        if !used_p.contains(&p) && !used_g.contains(&g) {
            used_p.push(p);
            used_g.push(g);
        }
    }
    let tp = used_p.len();
    Ok(InstanceScores::from_counts(tp, area_p.len() - tp, area_g.len() - tp))
}

/// Instance map of one plane: the 4-connected components of every
/// foreground class, numbered consecutively across classes.
pub fn instances(mask: &LabelMask, b: usize, num_classes: usize) -> Vec<i64> {
    let (h, w) = (mask.height(), mask.width());
    let d = mask.plane_data(b);
    let mut out = vec![0i64; h * w];
    let mut offset = 0i64;
    for c in 1..num_classes as u32 {
        let (labels, n) = connected_components(h, w, |i| d[i] == c);
        for (o, &l) in out.iter_mut().zip(&labels) {
            if l > 0 {
                *o = offset + l as i64;
            }
        }
        offset += n as i64;
    }
    out
}

/// Per-class and aggregate scores, averaged over samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub num_classes: usize,
    pub tau: f64,
    pub sample_count: usize,
    /// Indexed by class, background included.
    pub dice: Vec<f64>,
    pub iou: Vec<f64>,
    pub nsd: Vec<f64>,
    pub mean_foreground_dice: f64,
    pub mean_foreground_iou: f64,
    pub mean_foreground_nsd: f64,
    pub instance_f1: f64,
    pub instance_precision: f64,
    pub instance_recall: f64,
}

impl MetricsReport {
    /// Scores every sample of `pred` against `gt` and averages.
    pub fn compute(pred: &LabelMask, gt: &LabelMask, num_classes: usize, tau: f64) -> Result<Self> {
        same_shape(pred, gt)?;
        if num_classes < 2 {
            return Err(Error::InvalidArgument("metrics need at least 2 classes".into()));
        }
        pred.check_classes(num_classes)?;
        gt.check_classes(num_classes)?;
        let n = pred.batch();
        let mut dice = vec![0.0; num_classes];
        let mut iou = vec![0.0; num_classes];
        let mut nsd = vec![0.0; num_classes];
        let (mut f1, mut prec, mut rec) = (0.0, 0.0, 0.0);
        for b in 0..n {
            let (p, g) = (pred.sample(b), gt.sample(b));
            for c in 0..num_classes {
                dice[c] += dice_score(&p, &g, c as u32)?;
                iou[c] += iou_score(&p, &g, c as u32)?;
                nsd[c] += nsd_score(&p, &g, c as u32, tau)?;
            }
            let s = instance_f1(&instances(pred, b, num_classes), &instances(gt, b, num_classes))?;
            f1 += s.f1;
            prec += s.precision;
            rec += s.recall;
        }
        let inv = 1.0 / n as f64;
        for v in dice.iter_mut().chain(&mut iou).chain(&mut nsd) {
            *v *= inv;
        }
        let fg = |v: &[f64]| v[1..].iter().sum::<f64>() / (num_classes - 1) as f64;
        Ok(MetricsReport {
            num_classes,
            tau,
            sample_count: n,
            mean_foreground_dice: fg(&dice),
            mean_foreground_iou: fg(&iou),
            mean_foreground_nsd: fg(&nsd),
            dice,
            iou,
            nsd,
            instance_f1: f1 * inv,
            instance_precision: prec * inv,
            instance_recall: rec * inv,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, rows: &[&str]) -> LabelMask {
        let data = rows.iter().flat_map(|r| r.bytes().map(|b| (b - b'0') as u32)).collect();
        LabelMask::plane(h, w, data).unwrap()
    }

    #[test]
    fn dice_and_iou_cases() {
        let a = grid(2, 4, &["1111", "0000"]);
        let b = grid(2, 4, &["0000", "1111"]);
        let c = grid(2, 4, &["0011", "1100"]);
        assert_eq!(dice_score(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dice_score(&a, &b, 1).unwrap(), 0.0);
        assert_eq!(dice_score(&a, &c, 1).unwrap(), 0.5);
        assert_eq!(iou_score(&a, &a, 1).unwrap(), 1.0);
        assert!((iou_score(&a, &c, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice_score(&a, &a, 2).unwrap(), 1.0);
        assert_eq!(iou_score(&a, &b, 2).unwrap(), 1.0);
    }

    #[test]
    fn surface_includes_border_and_skips_interior() {
        let m = grid(4, 4, &["0000", "0111", "0111", "0111"]);
        let s = &surface(&m, 1)[0];
        assert_eq!(s.len(), 8);
        assert!(!s.contains(&(2, 2)));
        assert!(s.contains(&(3, 3)));
    }

    #[test]
    fn nsd_cases() {
        let sq = |dx: usize| LabelMask::from_fn([1, 8, 8], move |i| ((2..6).contains(&(i / 8)) && (2 + dx..6 + dx).contains(&(i % 8))) as u32);
        assert_eq!(nsd_score(&sq(0), &sq(0), 1, 1.0).unwrap(), 1.0);
        assert_eq!(nsd_score(&sq(0), &sq(1), 1, 1.0).unwrap(), 1.0);
        let far = LabelMask::from_fn([1, 8, 8], |i| (i == 0) as u32);
        let near_corner = LabelMask::from_fn([1, 8, 8], |i| (i == 63) as u32);
        assert_eq!(nsd_score(&far, &near_corner, 1, 1.0).unwrap(), 0.0);
        let empty = LabelMask::from_fn([1, 8, 8], |_| 0);
        assert_eq!(nsd_score(&empty, &empty, 1, 1.0).unwrap(), 1.0);
        assert_eq!(nsd_score(&empty, &far, 1, 1.0).unwrap(), 0.0);
        assert!(nsd_score(&far, &far, 1, -1.0).is_err());
    }

    #[test]
    fn instance_f1_cases() {
        let gt = [1, 1, 1, 1, 0, 2, 2, 0];
        assert_eq!(instance_f1(&gt, &gt).unwrap().f1, 1.0);
        let none = instance_f1(&[0; 8], &gt).unwrap();
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
        // prediction covers 4 of gt 1's pixels plus 1 extra: IoU 0.8
        let pred = [5, 5, 5, 5, 5, 0, 0, 0];
        let s = instance_f1(&pred, &gt).unwrap();
        assert_eq!((s.precision, s.recall), (1.0, 0.5));
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!(instance_f1(&[-1], &[0]).is_err());
    }

    #[test]
    fn report_round_trips_and_flags_empty_prediction() {
        let gt = LabelMask::from_fn([2, 4, 4], |i| ((i % 16) < 6) as u32);
        let bg = LabelMask::from_fn([2, 4, 4], |_| 0);
        let r = MetricsReport::compute(&bg, &gt, 2, 1.0).unwrap();
        assert_eq!(r.dice[1], 0.0);
        assert_eq!(r.mean_foreground_dice, 0.0);
        assert_eq!(r.sample_count, 2);
        let back: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        let perfect = MetricsReport::compute(&gt, &gt, 2, 1.0).unwrap();
        assert_eq!(perfect.mean_foreground_dice, 1.0);
        assert_eq!(perfect.instance_f1, 1.0);
    }
}
