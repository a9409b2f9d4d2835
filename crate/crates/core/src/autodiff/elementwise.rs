use super::{Graph, Var};
use crate::error::Result;
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Unary {
    Sigmoid,
    Silu,
    /// Tanh approximation of GELU.
    Gelu,
    Exp,
    Square,
    Abs,
    Softplus,
    Neg,
}

impl Unary {
    pub fn name(self) -> &'static str {
        match self {
            Unary::Sigmoid => "sigmoid",
            Unary::Silu => "silu",
            Unary::Gelu => "gelu",
            Unary::Exp => "exp",
            Unary::Square => "square",
            Unary::Abs => "abs",
            Unary::Softplus => "softplus",
            Unary::Neg => "neg",
        }
    }

    fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Silu => x * sigmoid(x),
            Unary::Gelu => S::lit(0.5) * x * (S::one() + gelu_inner(x).tanh()),
            Unary::Exp => x.exp(),
            Unary::Square => x * x,
            Unary::Abs => x.abs(),
            Unary::Softplus => softplus(x),
            Unary::Neg => -x,
        }
    }

    /// Derivative at input `x` with forward output `y`.
    fn derivative<S: Scalar>(self, x: S, y: S) -> S {
        match self {
            Unary::Sigmoid => y * (S::one() - y),
            Unary::Silu => {
                let s = sigmoid(x);
                s * (S::one() + x * (S::one() - s))
            }
            Unary::Gelu => {
                let t = gelu_inner(x).tanh();
                let du = S::lit(GELU_K) * (S::one() + S::lit(3.0 * GELU_C) * x * x);
                S::lit(0.5) * (S::one() + t) + S::lit(0.5) * x * (S::one() - t * t) * du
            }
            Unary::Exp => y,
            Unary::Square => S::lit(2.0) * x,
            Unary::Abs => {
                if x > S::zero() {
                    S::one()
                } else if x < S::zero() {
                    -S::one()
                } else {
                    S::zero()
                }
            }
            Unary::Softplus => sigmoid(x),
            Unary::Neg => -S::one(),
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_C: f64 = 0.044_715;

fn gelu_inner<S: Scalar>(x: S) -> S {
    S::lit(GELU_K) * (x + S::lit(GELU_C) * x * x * x)
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

fn broadcast_strides(s: Shape, out: Shape) -> [usize; 4] {
    let st = s.strides();
    let mut r = [0; 4];
    for i in 0..4 {
        r[i] = if s.0[i] == 1 && out.0[i] != 1 { 0 } else { st[i] };
    }
    r
}

/// Evaluates `f(a[i], b[i])` over the broadcast of both operands.
fn broadcast_zip<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, out: Shape, f: impl Fn(S, S) -> S) -> Tensor<S> {
    if a.shape() == out && b.shape() == out {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_vec(out, data).expect("same shape");
    }
    let sa = broadcast_strides(a.shape(), out);
    let sb = broadcast_strides(b.shape(), out);
    let [n, c, h, w] = out.0;
    let (ad, bd) = (a.data(), b.data());
    let mut data = Vec::with_capacity(out.numel());
    for i0 in 0..n {
        for i1 in 0..c {
            for i2 in 0..h {
                let oa = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let ob = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..w {
                    data.push(f(ad[oa + i3 * sa[3]], bd[ob + i3 * sb[3]]));
                }
            }
        }
    }
    Tensor::from_vec(out, data).expect("broadcast shape")
}

impl<S: Scalar> Graph<S> {
    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let op = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = Shape::broadcast(op, sa, sb)?;
        let (va, vb) = (self.value(a), self.value(b));
        let out = match kind {
            Binary::Add => broadcast_zip(va, vb, out_shape, |x, y| x + y),
            Binary::Sub => broadcast_zip(va, vb, out_shape, |x, y| x - y),
            Binary::Mul => broadcast_zip(va, vb, out_shape, |x, y| x * y),
        };
        self.push(
            op,
            out,
            vec![a, b],
            Box::new(move |inp, _out, g, needs| {
                let ga = needs[0].then(|| match kind {
                    Binary::Add | Binary::Sub => g.sum_to(sa),
                    Binary::Mul => broadcast_zip(g, inp[1], out_shape, |g, y| g * y).sum_to(sa),
                });
                let gb = needs[1].then(|| match kind {
                    Binary::Add => g.sum_to(sb),
                    Binary::Sub => g.map(|v| -v).sum_to(sb),
                    Binary::Mul => broadcast_zip(g, inp[0], out_shape, |g, x| g * x).sum_to(sb),
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| kind.apply(v));
        self.push(
            kind.name(),
            out,
            vec![x],
            Box::new(move |inp, out, g, _| {
                let data = inp[0]
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(g.data())
                    .map(|((&x, &y), &g)| g * kind.derivative(x, y))
                    .collect();
                vec![Some(Tensor::from_vec(g.shape(), data).expect("same shape"))]
            }),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Silu, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }

    /// `k * x` for a constant `k`.
    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let k = S::lit(k);
        let out = self.value(x).map(|v| v * k);
        self.push(
            "scale",
            out,
            vec![x],
            Box::new(move |_, _, g, _| vec![Some(g.map(|v| v * k))]),
        )
    }

    /// `x + k` for a constant `k`.
    pub fn add_scalar(&mut self, x: Var, k: f64) -> Result<Var> {
        let k = S::lit(k);
        let out = self.value(x).map(|v| v + k);
        self.push("add_scalar", out, vec![x], Box::new(|_, _, g, _| vec![Some(g.clone())]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: [usize; 4]) -> Tensor<f64> {
        let mut i = 0.0;
        Tensor::from_fn(shape, |_, _, _, _| {
            i += 1.0;
            (i * 0.37f64).sin()
        })
    }

    #[test]
    fn self_difference_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(ramp([2, 3, 4, 4]), false);
        let d = g.sub(x, x).unwrap();
        assert!(g.value(d).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sigmoid_midpoint() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros([1, 2, 3, 3]), false);
        let s = g.sigmoid(x).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn gelu_reference_values() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec([1, 1, 1, 3], vec![0.0, 1.0, -2.0]).unwrap(), false);
        let y = g.unary(Unary::Gelu, x).unwrap();
        // 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
        let expect = [0.0, 0.841_191_990_608_276_8, -0.045_402_305_912_224_94];
        for (a, b) in g.value(y).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn multiplicative_identity() {
        let mut g = Graph::new();
        let a = ramp([1, 2, 3, 3]);
        let x = g.leaf(a.clone(), false);
        let one = g.leaf(Tensor::ones([1, 2, 3, 3]), false);
        let y = g.mul(x, one).unwrap();
        assert_eq!(g.value(y), &a);
    }

    #[test]
    fn broadcast_matches_explicit_tiling() {
        let a = ramp([2, 3, 4, 5]);
        let b = ramp([1, 3, 1, 5]);
        let mut g = Graph::new();
        let xa = g.leaf(a.clone(), false);
        let xb = g.leaf(b.clone(), false);
        let y = g.mul(xa, xb).unwrap();
        let tiled = b.broadcast_to(a.shape()).unwrap();
        let expect = a.zip_map(&tiled, |x, y| x * y).unwrap();
        assert_eq!(g.value(y), &expect);
    }

    #[test]
    fn incompatible_shapes_error() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros([1, 2, 3, 3]), false);
        let b = g.leaf(Tensor::zeros([1, 3, 3, 3]), false);
        assert!(g.add(a, b).is_err());
    }
}
