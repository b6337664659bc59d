//! Integer label masks and instance labelling.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `B×H×W` class labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    shape: [usize; 3],
    data: Vec<u32>,
}

impl LabelMask {
    pub fn new(shape: [usize; 3], data: Vec<u32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n == 0 || n != data.len() {
            return Err(Error::shape("label_mask", format!("shape {shape:?} with {} labels", data.len())));
        }
        Ok(LabelMask { shape, data })
    }

    pub fn from_fn(shape: [usize; 3], f: impl FnMut(usize) -> u32) -> Self {
        let n = shape.iter().product();
        LabelMask { shape, data: (0..n).map(f).collect() }
    }

    /// A single `H×W` plane as a batch of one.
    pub fn plane(h: usize, w: usize, data: Vec<u32>) -> Result<Self> {
        Self::new([1, h, w], data)
    }

    /// From a `H×W` or `B×H×W` tensor of labels.
    pub fn from_u8(t: &Tensor<u8>) -> Result<Self> {
        let shape = match *t.shape() {
            [h, w] => [1, h, w],
            [b, h, w] => [b, h, w],
            ref s => return Err(Error::shape("label_mask", format!("expected H×W or B×H×W labels, got {s:?}"))),
        };
        Self::new(shape, t.data().iter().map(|&v| v as u32).collect())
    }

    /// `H×W` (batch of one) or `B×H×W` u8 tensor.
    pub fn to_u8(&self) -> Result<Tensor<u8>> {
        let data = self
            .data
            .iter()
            .map(|&v| u8::try_from(v).map_err(|_| Error::InvalidArgument(format!("label {v} does not fit in u8"))))
            .collect::<Result<Vec<_>>>()?;
        let shape = if self.shape[0] == 1 { vec![self.shape[1], self.shape[2]] } else { self.shape.to_vec() };
        Tensor::new(shape, data)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn height(&self) -> usize {
        self.shape[1]
    }

    pub fn width(&self) -> usize {
        self.shape[2]
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn get(&self, b: usize, y: usize, x: usize) -> u32 {
        self.data[(b * self.shape[1] + y) * self.shape[2] + x]
    }

    pub fn plane_data(&self, b: usize) -> &[u32] {
        let n = self.shape[1] * self.shape[2];
        &self.data[b * n..(b + 1) * n]
    }

    pub fn sample(&self, b: usize) -> LabelMask {
        LabelMask {
            shape: [1, self.shape[1], self.shape[2]],
            data: self.plane_data(b).to_vec(),
        }
    }

    /// Stacks equally sized masks along the batch axis.
    pub fn stack(parts: &[&LabelMask]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::InvalidArgument("no masks to stack".into()))?;
        let mut data = Vec::new();
        let mut b = 0;
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(Error::shape("label_mask", format!("{:?} vs {:?}", p.shape, first.shape)));
            }
            data.extend_from_slice(&p.data);
            b += p.shape[0];
        }
        Self::new([b, first.shape[1], first.shape[2]], data)
    }

    pub fn max_label(&self) -> u32 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Errors if any label is `≥ k`.
    pub fn check_classes(&self, k: usize) -> Result<()> {
        match self.data.iter().position(|&v| v as usize >= k) {
            Some(i) => Err(Error::InvalidArgument(format!(
                "label {} at flat index {i} is not below the class count {k}",
                self.data[i]
            ))),
            None => Ok(()),
        }
    }

    /// `B×K×H×W` indicator tensor.
    pub fn one_hot<T: Scalar>(&self, k: usize) -> Result<Tensor<T>> {
        self.check_classes(k)?;
        let [b, h, w] = self.shape;
        let hw = h * w;
        let mut out = vec![T::zero(); b * k * hw];
        for (i, &v) in self.data.iter().enumerate() {
            let (bi, p) = (i / hw, i % hw);
            out[(bi * k + v as usize) * hw + p] = T::one();
        }
        Tensor::new(vec![b, k, h, w], out)
    }

    /// Nearest-neighbour downsampling by `factor`: output pixel `(i, j)`
    /// takes input `(i·f + f/2, j·f + f/2)`.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        let [b, h, w] = self.shape;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::shape("downsample", format!("{h}x{w} not divisible by {factor}")));
        }
        let (oh, ow, off) = (h / factor, w / factor, factor / 2);
        Ok(Self::from_fn([b, oh, ow], |i| {
            let (bi, r) = (i / (oh * ow), i % (oh * ow));
            self.get(bi, (r / ow) * factor + off, (r % ow) * factor + off)
        }))
    }

    /// Argmax over the class axis of `B×K×H×W` scores (first maximum wins).
    pub fn argmax<T: Scalar>(scores: &Tensor<T>) -> Result<Self> {
        let &[b, k, h, w] = scores.shape() else {
            return Err(Error::shape("argmax", format!("expected B×K×H×W scores, got {:?}", scores.shape())));
        };
        let hw = h * w;
        let d = scores.data();
        Ok(Self::from_fn([b, h, w], |i| {
            let (bi, p) = (i / hw, i % hw);
            let mut best = 0;
            for c in 1..k {
                if d[(bi * k + c) * hw + p] > d[(bi * k + best) * hw + p] {
                    best = c;
                }
            }
            best as u32
        }))
    }
}

/// 4-connected components of the pixels of one `H×W` plane where `fg`
/// holds. Labels are `1..=n` in raster order of first pixel; 0 elsewhere.
pub fn connected_components(h: usize, w: usize, fg: impl Fn(usize) -> bool) -> (Vec<u32>, u32) {
    let mut labels = vec![0u32; h * w];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if labels[start] != 0 || !fg(start) {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            let neighbours = [
                (y > 0).then(|| p - w),
                (y + 1 < h).then(|| p + w),
                (x > 0).then(|| p - 1),
                (x + 1 < w).then(|| p + 1),
            ];
            for q in neighbours.into_iter().flatten() {
                if labels[q] == 0 && fg(q) {
                    labels[q] = next;
                    stack.push(q);
                }
            }
        }
    }
    (labels, next)
}
