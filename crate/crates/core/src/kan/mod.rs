//! B-spline Kolmogorov–Arnold layers and the blocks assembled from them.

mod layers;
mod spline;

pub use layers::{EfConv, EfcKan, EfconvMode, KanLinear, TokKan, VkanBlock};
pub use spline::{bspline_basis, SplineGrid};
