//! Training objective: L1 terms and the contrastive edge loss.

use crate::autodiff::{Graph, Padding, Unary, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const E1: [[f64; 3]; 3] = [[0.0, -1.0, 0.0], [-1.0, 4.0, -1.0], [0.0, -1.0, 0.0]];
/// As printed, including the `+1` bottom-right entry (kernel sum 2).
pub const E2: [[f64; 3]; 3] = [[-1.0, 0.0, -1.0], [0.0, 4.0, 0.0], [-1.0, 0.0, 1.0]];
pub const E2_SYMMETRIC: [[f64; 3]; 3] = [[-1.0, 0.0, -1.0], [0.0, 4.0, 0.0], [-1.0, 0.0, -1.0]];
pub const E3: [[f64; 3]; 3] = [[1.0, 1.0, 1.0], [1.0, -8.0, 1.0], [1.0, 1.0, 1.0]];

/// The three fixed edge kernels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeKernels {
    pub kernels: [[[f64; 3]; 3]; 3],
}

impl EdgeKernels {
    pub fn new(e2_symmetric: bool) -> Self {
        EdgeKernels {
            kernels: [E1, if e2_symmetric { E2_SYMMETRIC } else { E2 }, E3],
        }
    }

    /// Stacked as a `(3, 1, 3, 3)` convolution weight.
    pub fn weight<S: Scalar>(&self) -> Tensor<S> {
        Tensor::from_fn([3, 1, 3, 3], |k, _, i, j| S::lit(self.kernels[k][i][j]))
    }
}

impl Default for EdgeKernels {
    fn default() -> Self {
        Self::new(false)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.7,
            beta: 0.3,
            gamma: 0.1,
        }
    }
}

impl LossWeights {
    /// The weighted sum of already evaluated terms.
    pub fn combine(&self, l1_sr: f64, l1_ref: f64, celoss: f64) -> f64 {
        self.alpha * l1_sr + self.beta * l1_ref + self.gamma * celoss
    }
}

/// Mean absolute error.
pub fn l1_loss<S: Scalar>(g: &mut Graph<S>, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::ShapeMismatch {
            op: "l1_loss",
            lhs: g.shape(a),
            rhs: g.shape(b),
        });
    }
    let d = g.sub(a, b)?;
    let d = g.unary(Unary::Abs, d)?;
    g.mean_all(d)
}

/// Mean over the three kernels and all interior pixels of the squared
/// difference between edge responses. Kernels are applied by
/// cross-correlation without padding.
pub fn celoss<S: Scalar>(g: &mut Graph<S>, sr: Var, hr: Var, kernels: &EdgeKernels) -> Result<Var> {
    let s = g.shape(sr);
    if s != g.shape(hr) {
        return Err(Error::ShapeMismatch {
            op: "celoss",
            lhs: s,
            rhs: g.shape(hr),
        });
    }
    if s.c() != 1 {
        return Err(Error::ChannelMismatch {
            op: "celoss",
            expected: 1,
            got: s.c(),
        });
    }
    if s.h() < 3 || s.w() < 3 {
        return Err(Error::invalid("celoss", format!("image {s} smaller than 3x3")));
    }
    // The edge operators are linear, so responses of the difference equal
    // differences of responses.
    let d = g.sub(sr, hr)?;
    let w = g.constant(kernels.weight());
    let e = g.conv2d(d, w, None, 1, Padding::Valid)?;
    let e = g.square(e)?;
    g.mean_all(e)
}

/// The weighted objective and its parts.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub l1_sr: Var,
    pub l1_ref: Var,
    pub celoss: Var,
}

/// `α·l1(sr, hr) + β·l1(rec_ref, ref) + γ·celoss(sr, hr)`.
pub fn total_loss<S: Scalar>(
    g: &mut Graph<S>,
    sr: Var,
    hr: Var,
    rec_ref: Var,
    reference: Var,
    w: &LossWeights,
    kernels: &EdgeKernels,
) -> Result<LossTerms> {
    let l1_sr = l1_loss(g, sr, hr)?;
    let l1_ref = l1_loss(g, rec_ref, reference)?;
    let ce = celoss(g, sr, hr, kernels)?;
    let a = g.scale(l1_sr, w.alpha)?;
    let b = g.scale(l1_ref, w.beta)?;
    let c = g.scale(ce, w.gamma)?;
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(LossTerms {
        total,
        l1_sr,
        l1_ref,
        celoss: ce,
    })
}
