//! Deterministic synthetic segmentation samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::net::SIZE_DIVISOR;
use crate::tensor::Tensor;

use super::Sample;

pub const BACKGROUND_LEVEL: f64 = 0.3;
pub const NOISE_STD: f64 = 0.1;

/// Mean intensity of class `c` (0 is background).
pub fn class_level(c: usize, num_classes: usize) -> f64 {
    BACKGROUND_LEVEL + 0.5 * c as f64 / num_classes as f64
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
    Rect { y0: usize, x0: usize, y1: usize, x1: usize },
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, size: usize) -> Self {
        let (lo, hi) = (size as f64 / 8.0, size as f64 / 4.0);
        let ry = rng.random_range(lo..=hi);
        let rx = rng.random_range(lo..=hi);
        let cy = rng.random_range(ry..=size as f64 - ry);
        let cx = rng.random_range(rx..=size as f64 - rx);
        if rng.random_bool(0.5) {
            Shape::Ellipse { cy, cx, ry, rx }
        } else {
            let clamp = |v: f64| (v.round().max(0.0) as usize).min(size);
            Shape::Rect {
                y0: clamp(cy - ry),
                x0: clamp(cx - rx),
                y1: clamp(cy + ry),
                x1: clamp(cx + rx),
            }
        }
    }

    fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            Shape::Ellipse { cy, cx, ry, rx } => {
                let (dy, dx) = ((y as f64 + 0.5 - cy) / ry, (x as f64 + 0.5 - cx) / rx);
                dy * dy + dx * dx <= 1.0
            }
            Shape::Rect { y0, x0, y1, x1 } => (y0..y1).contains(&y) && (x0..x1).contains(&x),
        }
    }
}

/// Sample `index` of the dataset drawn from `seed`: ChaCha8 keyed by the
/// seed, stream = sample index, so samples are independent of how many are
/// generated or in what order.
pub fn synth_sample(seed: u64, index: usize, size: usize, num_classes: usize) -> Result<Sample> {
    if size == 0 || size % SIZE_DIVISOR != 0 {
        return Err(Error::InvalidArgument(format!("size {size} must be a positive multiple of {SIZE_DIVISOR}")));
    }
    if num_classes < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 classes, got {num_classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let mut label = vec![0u32; size * size];
    for c in 1..num_classes {
        let shape = Shape::random(&mut rng, size);
        for (p, l) in label.iter_mut().enumerate() {
            if shape.contains(p / size, p % size) {
                *l = c as u32;
            }
        }
    }
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let image = label
        .iter()
        .map(|&l| (class_level(l as usize, num_classes) + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32)
        .collect();
    Ok(Sample {
        image: Tensor::new(vec![1, size, size], image)?,
        label: LabelMask::plane(size, size, label)?,
    })
}

/// `n` samples; see [`synth_sample`].
pub fn synth_dataset(seed: u64, n: usize, size: usize, num_classes: usize) -> Result<Vec<Sample>> {
    (0..n).map(|i| synth_sample(seed, i, size, num_classes)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_index() {
        let a = synth_dataset(7, 3, 32, 3).unwrap();
        let b = synth_dataset(7, 3, 32, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(synth_sample(7, 2, 32, 3).unwrap(), a[2]);
        assert_ne!(synth_dataset(8, 1, 32, 3).unwrap()[0], a[0]);
    }

    #[test]
    fn binary_labels_and_ranges() {
        for s in synth_dataset(1, 10, 64, 2).unwrap() {
            let mut seen = [false; 2];
            for &l in s.label.data() {
                seen[l as usize] = true;
            }
            assert_eq!(seen, [true, true]);
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(synth_sample(0, 0, 48, 2).is_err());
        assert!(synth_sample(0, 0, 64, 1).is_err());
    }

    #[test]
    fn foreground_is_brighter() {
        let (mut gap, n) = (0.0, 100);
        for s in synth_dataset(3, n, 32, 2).unwrap() {
            let (mut fg, mut bg) = ((0.0, 0), (0.0, 0));
            for (&v, &l) in s.image.data().iter().zip(s.label.data()) {
                let acc = if l == 1 { &mut fg } else { &mut bg };
                acc.0 += v as f64;
                acc.1 += 1;
            }
            gap += fg.0 / fg.1 as f64 - bg.0 / bg.1 as f64;
        }
        assert!(gap / n as f64 >= 0.2);
    }
}
