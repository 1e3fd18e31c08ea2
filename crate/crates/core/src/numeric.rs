//! Small dense-math helpers shared by the inference path, generic over the
//! float width so the same code runs in f32 and f64.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use num_traits::Float;

/// Scalar type of the inference engine.
pub trait Real:
    Float + ndarray::LinalgScalar + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

pub fn cast_matrix<F: Real>(m: &Array2<f64>) -> Array2<F> {
    m.mapv(F::from_f64)
}

pub fn silu<F: Real>(x: F) -> F {
    let one = F::one();
    x * (one / (one + (-x).exp()))
}

/// x @ w + b with b broadcast over rows. b has shape 1 x cols.
pub fn linear<F: Real>(x: &ArrayView2<F>, w: &Array2<F>, b: &Array2<F>) -> Array2<F> {
    let mut y = x.dot(w);
    let bias = b.row(0);
    for mut row in y.rows_mut() {
        row += &bias;
    }
    y
}

/// Per-row layer norm with learned gain/bias rows (1 x dim).
pub fn layer_norm_rows<F: Real>(
    x: &ArrayView2<F>,
    gain: &Array2<F>,
    bias: &Array2<F>,
    eps: F,
) -> Array2<F> {
    let mut y = row_normalize(x, eps);
    let g = gain.row(0);
    let b = bias.row(0);
    for mut row in y.rows_mut() {
        for (i, v) in row.iter_mut().enumerate() {
            *v = *v * g[i] + b[i];
        }
    }
    y
}

/// Per-row normalization to zero mean and unit variance (biased variance),
/// guarded by eps.
pub fn row_normalize<F: Real>(x: &ArrayView2<F>, eps: F) -> Array2<F> {
    let dim = F::from_f64(x.ncols() as f64);
    let mut y = x.to_owned();
    for mut row in y.rows_mut() {
        let mean = row.iter().fold(F::zero(), |a, &v| a + v) / dim;
        let var = row
            .iter()
            .fold(F::zero(), |a, &v| a + (v - mean) * (v - mean))
            / dim;
        let denom = (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) / denom;
        }
    }
    y
}

/// Softmax over the entries of `scores` whose `allowed` flag is set; banned
/// entries come out exactly zero. The max is taken over allowed entries only.
pub fn softmax_masked<F: Real>(scores: &ArrayView1<F>, allowed: &[bool]) -> Array1<F> {
    debug_assert_eq!(scores.len(), allowed.len());
    let mut max = F::neg_infinity();
    for (s, &a) in scores.iter().zip(allowed) {
        if a && *s > max {
            max = *s;
        }
    }
    let mut out = Array1::zeros(scores.len());
    if max == F::neg_infinity() {
        return out; // fully banned row; callers never build one
    }
    let mut sum = F::zero();
    for (i, (s, &a)) in scores.iter().zip(allowed).enumerate() {
        if a {
            let e = (*s - max).exp();
            out[i] = e;
            sum = sum + e;
        }
    }
    out.mapv_inplace(|v| v / sum);
    out
}

pub fn max_abs_diff<F: Real>(a: &Array2<F>, b: &Array2<F>) -> f64 {
    debug_assert_eq!(a.dim(), b.dim());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (*x - *y).abs().to_f64())
        .fold(0.0, f64::max)
}
