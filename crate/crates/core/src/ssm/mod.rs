//! Selective state-space scans.
//!
//! The continuous system `h' = A h + B x, y = C h` is discretized per token
//! with a timestep `Δ` and then evaluated either as a linear recurrence
//! ([`selective_scan_recurrent`]) or, for time-invariant parameters, as a
//! causal convolution with the kernel `(C B̄, C Ā B̄, …)`
//! ([`selective_scan_conv`]). The 2D variants unfold a patch grid into four
//! directional sequences and merge the scanned results back.

mod scan_op;
mod ss2d;

pub use ss2d::{ss2d, ss2d_global, ss2d_local, SsmParams, SsmVars};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Below this `|ΔA|` the ZOH input gain uses its first-order series.
pub const SERIES_THRESHOLD: f64 = 1e-6;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub enum Discretization {
    /// Exact zero-order hold: `B̄ = (ΔA)⁻¹(exp(ΔA) − 1)·ΔB`.
    #[default]
    Zoh,
    /// First-order simplification `B̄ = ΔB`.
    Euler,
}

/// `expm1(z) / z`, the ZOH gain per unit of `Δ`.
#[inline]
pub(crate) fn zoh_gain<S: Scalar>(z: S) -> S {
    if z.abs() < S::lit(SERIES_THRESHOLD) {
        S::one() + z * S::lit(0.5)
    } else {
        z.exp_m1() / z
    }
}

/// Below this `|z|`, [`exp_pair`] and [`zoh_gain_slope`] use Taylor series.
pub(crate) const SERIES_RANGE: f64 = 1e-2;

/// `(exp(z), expm1(z))` with one exponential; a Taylor polynomial covers
/// small `|z|` where `exp(z) - 1` would cancel.
#[inline]
pub(crate) fn exp_pair<S: Scalar>(z: S) -> (S, S) {
    let e = z.exp();
    if z.abs() < S::lit(SERIES_RANGE) {
        let lit = |v: f64| S::lit(v);
        let h = S::one() + z / lit(6.0);
        let h = S::one() + z / lit(5.0) * h;
        let h = S::one() + z / lit(4.0) * h;
        let h = S::one() + z / lit(3.0) * h;
        let h = S::one() + z / lit(2.0) * h;
        (e, z * h)
    } else {
        (e, e - S::one())
    }
}

/// Derivative of [`zoh_gain`] given `exp(z)` and `expm1(z)`.
#[inline]
pub(crate) fn zoh_gain_slope<S: Scalar>(z: S, exp_z: S, expm1_z: S) -> S {
    if z.abs() < S::lit(SERIES_RANGE) {
        let z2 = z * z;
        S::lit(0.5) + z / S::lit(3.0) + z2 / S::lit(8.0) + z2 * z / S::lit(30.0) + z2 * z2 / S::lit(144.0)
    } else {
        (z * exp_z - expm1_z) / (z * z)
    }
}

/// Discretizes one diagonal entry: returns `(Ā, B̄)`.
pub fn discretize_scalar<S: Scalar>(a: S, b: S, delta: S, rule: Discretization) -> Result<(S, S)> {
    if !(delta > S::zero()) {
        return Err(Error::invalid("discretize", format!("timestep must be positive, got {delta}")));
    }
    let z = delta * a;
    let a_bar = z.exp();
    let b_bar = match rule {
        Discretization::Zoh => delta * zoh_gain(z) * b,
        Discretization::Euler => delta * b,
    };
    Ok((a_bar, b_bar))
}

/// Discretizes a diagonal system `A = diag(a)` with input vector `b`.
pub fn discretize<S: Scalar>(a: &[S], b: &[S], delta: S, rule: Discretization) -> Result<(Vec<S>, Vec<S>)> {
    if a.len() != b.len() {
        return Err(Error::invalid("discretize", "A and B lengths differ"));
    }
    let mut a_bar = Vec::with_capacity(a.len());
    let mut b_bar = Vec::with_capacity(a.len());
    for (&ai, &bi) in a.iter().zip(b) {
        let (x, y) = discretize_scalar(ai, bi, delta, rule)?;
        a_bar.push(x);
        b_bar.push(y);
    }
    Ok((a_bar, b_bar))
}

/// Scan direction over a row-major patch grid.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Direction {
    LeftRight,
    TopBottom,
    RightLeft,
    BottomTop,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::LeftRight,
        Direction::TopBottom,
        Direction::RightLeft,
        Direction::BottomTop,
    ];

    /// Flat grid indices in the order this direction visits them.
    pub fn order(self, h: usize, w: usize) -> Vec<usize> {
        let row_major = || (0..h * w).collect::<Vec<_>>();
        let col_major = || (0..w).flat_map(|x| (0..h).map(move |y| y * w + x)).collect::<Vec<_>>();
        match self {
            Direction::LeftRight => row_major(),
            Direction::TopBottom => col_major(),
            Direction::RightLeft => row_major().into_iter().rev().collect(),
            Direction::BottomTop => col_major().into_iter().rev().collect(),
        }
    }
}

/// Whether a 2D scan runs over the whole grid or inside each quadrant.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ScanMode {
    Global,
    Local,
}

/// `(row, col, rows, cols)` of the four quadrants: top-left, top-right,
/// bottom-left, bottom-right. Top and left take the ceiling half.
pub fn quadrants(h: usize, w: usize) -> [(usize, usize, usize, usize); 4] {
    let (th, lw) = (h.div_ceil(2), w.div_ceil(2));
    [
        (0, 0, th, lw),
        (0, lw, th, w - lw),
        (th, 0, h - th, lw),
        (th, lw, h - th, w - lw),
    ]
}

/// Visiting order over an `h x w` grid and the offsets where the hidden
/// state restarts. Local mode concatenates the four quadrant scans.
pub fn scan_plan(mode: ScanMode, h: usize, w: usize, dir: Direction) -> (Vec<usize>, Vec<usize>) {
    match mode {
        ScanMode::Global => (dir.order(h, w), vec![0]),
        ScanMode::Local => {
            let mut order = Vec::with_capacity(h * w);
            let mut starts = Vec::new();
            for (y0, x0, qh, qw) in quadrants(h, w) {
                if qh == 0 || qw == 0 {
                    continue;
                }
                starts.push(order.len());
                order.extend(dir.order(qh, qw).into_iter().map(|i| (y0 + i / qw) * w + x0 + i % qw));
            }
            (order, starts)
        }
    }
}

/// Patch features laid out `(H, W, C)`.
#[derive(Clone, PartialEq, Debug)]
pub struct PatchGrid<S> {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> PatchGrid<S> {
    pub fn new(h: usize, w: usize, channels: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != h * w * channels {
            return Err(Error::invalid("patch grid", "data length does not match extents"));
        }
        Ok(PatchGrid { h, w, channels, data })
    }

    pub fn token(&self, i: usize) -> &[S] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }
}

/// Tokens `(L, C)` read from a grid in one direction.
#[derive(Clone, PartialEq, Debug)]
pub struct ScanSequence<S> {
    pub tokens: Vec<S>,
    pub channels: usize,
    pub direction: Direction,
    pub origin: (usize, usize),
}

impl<S: Scalar> ScanSequence<S> {
    pub fn len(&self) -> usize {
        self.tokens.len() / self.channels.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, t: usize) -> &[S] {
        &self.tokens[t * self.channels..(t + 1) * self.channels]
    }

    fn with_tokens(&self, tokens: Vec<S>) -> Self {
        ScanSequence {
            tokens,
            channels: self.channels,
            direction: self.direction,
            origin: self.origin,
        }
    }

    /// Writes tokens back to their grid positions.
    pub fn relayout(&self) -> PatchGrid<S> {
        let (h, w) = self.origin;
        let c = self.channels;
        let mut data = vec![S::zero(); h * w * c];
        for (t, &i) in self.direction.order(h, w).iter().enumerate() {
            data[i * c..(i + 1) * c].copy_from_slice(self.token(t));
        }
        PatchGrid { h, w, channels: c, data }
    }
}

/// Unfolds a grid into its four directional sequences.
pub fn scan_expand<S: Scalar>(grid: &PatchGrid<S>) -> Result<[ScanSequence<S>; 4]> {
    if grid.h == 0 || grid.w == 0 {
        return Err(Error::invalid("scan_expand", "empty grid"));
    }
    Ok(Direction::ALL.map(|d| {
        let tokens = d
            .order(grid.h, grid.w)
            .into_iter()
            .flat_map(|i| grid.token(i).iter().copied())
            .collect();
        ScanSequence {
            tokens,
            channels: grid.channels,
            direction: d,
            origin: (grid.h, grid.w),
        }
    }))
}

/// Re-lays each sequence into the grid and sums them.
pub fn scan_merge<S: Scalar>(seqs: &[ScanSequence<S>; 4]) -> Result<PatchGrid<S>> {
    let first = &seqs[0];
    for s in seqs.iter() {
        if s.tokens.len() != first.tokens.len() || s.origin != first.origin || s.channels != first.channels {
            return Err(Error::invalid("scan_merge", "sequences differ in length or origin"));
        }
        if s.len() != s.origin.0 * s.origin.1 {
            return Err(Error::invalid("scan_merge", "sequence length does not match origin grid"));
        }
    }
    let mut out = first.relayout();
    for s in &seqs[1..] {
        for (o, v) in out.data.iter_mut().zip(s.relayout().data) {
            *o = *o + v;
        }
    }
    Ok(out)
}

/// A discretized diagonal system with per-token parameters.
///
/// `a_bar`, `b_bar` are `(L, C, N)`; `c` is `(L, N)` and shared by channels.
#[derive(Clone, Debug)]
pub struct DiscreteSystem<S> {
    pub len: usize,
    pub channels: usize,
    pub n_state: usize,
    pub a_bar: Vec<S>,
    pub b_bar: Vec<S>,
    pub c: Vec<S>,
}

impl<S: Scalar> DiscreteSystem<S> {
    /// Discretizes selective parameters: `a (C, N)`, `delta (L, C)` after the
    /// positivity activation, `b` and `c` as `(L, N)`.
    pub fn from_selective(
        a: &[S],
        delta: &[S],
        b: &[S],
        c: &[S],
        channels: usize,
        n_state: usize,
        rule: Discretization,
    ) -> Result<Self> {
        let len = delta.len() / channels.max(1);
        if a.len() != channels * n_state || delta.len() != len * channels || b.len() != len * n_state || c.len() != len * n_state {
            return Err(Error::invalid("selective scan", "parameter extents disagree"));
        }
        let mut a_bar = Vec::with_capacity(len * channels * n_state);
        let mut b_bar = Vec::with_capacity(len * channels * n_state);
        for t in 0..len {
            for ch in 0..channels {
                let d = delta[t * channels + ch];
                for s in 0..n_state {
                    let (x, y) = discretize_scalar(a[ch * n_state + s], b[t * n_state + s], d, rule)?;
                    a_bar.push(x);
                    b_bar.push(y);
                }
            }
        }
        Ok(DiscreteSystem {
            len,
            channels,
            n_state,
            a_bar,
            b_bar,
            c: c.to_vec(),
        })
    }

    /// The same `(Ā, B̄, C)` at every one of `len` steps. `a_bar`, `b_bar`
    /// are `(C, N)`, `c` is `(N)`.
    pub fn time_invariant(a_bar: &[S], b_bar: &[S], c: &[S], channels: usize, len: usize) -> Result<Self> {
        let n_state = c.len();
        if a_bar.len() != channels * n_state || b_bar.len() != channels * n_state {
            return Err(Error::invalid("selective scan", "parameter extents disagree"));
        }
        Ok(DiscreteSystem {
            len,
            channels,
            n_state,
            a_bar: a_bar.repeat(len),
            b_bar: b_bar.repeat(len),
            c: c.repeat(len),
        })
    }

    fn is_time_invariant(&self) -> bool {
        let cn = self.channels * self.n_state;
        (1..self.len).all(|t| {
            self.a_bar[t * cn..(t + 1) * cn] == self.a_bar[..cn]
                && self.b_bar[t * cn..(t + 1) * cn] == self.b_bar[..cn]
                && self.c[t * self.n_state..(t + 1) * self.n_state] == self.c[..self.n_state]
        })
    }

    fn check(&self, seq: &ScanSequence<S>) -> Result<()> {
        if seq.channels != self.channels || seq.len() != self.len {
            return Err(Error::invalid(
                "selective scan",
                format!(
                    "sequence ({}, {}) does not match system ({}, {})",
                    seq.len(),
                    seq.channels,
                    self.len,
                    self.channels
                ),
            ));
        }
        Ok(())
    }
}

/// Hidden state `(C, N)` of a running scan.
#[derive(Clone, Debug)]
pub struct ScanState<S> {
    pub h: Vec<S>,
}

impl<S: Scalar> ScanState<S> {
    pub fn norm(&self) -> S {
        self.h.iter().map(|&v| v * v).sum::<S>().sqrt()
    }
}

/// `h_t = Ā_t h_{t-1} + B̄_t x_t`, `y_t = C_t h_t`, `h_0 = 0`.
pub fn selective_scan_recurrent<S: Scalar>(seq: &ScanSequence<S>, sys: &DiscreteSystem<S>) -> Result<ScanSequence<S>> {
    selective_scan_observed(seq, sys, |_, _| {})
}

/// [`selective_scan_recurrent`] that reports the state after every step.
pub fn selective_scan_observed<S: Scalar>(
    seq: &ScanSequence<S>,
    sys: &DiscreteSystem<S>,
    mut observe: impl FnMut(usize, &ScanState<S>),
) -> Result<ScanSequence<S>> {
    sys.check(seq)?;
    let (c, n) = (sys.channels, sys.n_state);
    let mut state = ScanState { h: vec![S::zero(); c * n] };
    let mut y = vec![S::zero(); sys.len * c];
    for t in 0..sys.len {
        let x = seq.token(t);
        let cn = t * c * n;
        let ct = &sys.c[t * n..(t + 1) * n];
        for ch in 0..c {
            let mut acc = S::zero();
            for s in 0..n {
                let i = ch * n + s;
                let h = sys.a_bar[cn + i] * state.h[i] + sys.b_bar[cn + i] * x[ch];
                state.h[i] = h;
                acc = acc + ct[s] * h;
            }
            if !acc.is_finite() {
                return Err(Error::NonFinite { op: "selective_scan", node: t });
            }
            y[t * c + ch] = acc;
        }
        observe(t, &state);
    }
    Ok(seq.with_tokens(y))
}

/// Causal convolution with `K̄_j = C Ā^j B̄`; requires time-invariant parameters.
pub fn selective_scan_conv<S: Scalar>(seq: &ScanSequence<S>, sys: &DiscreteSystem<S>) -> Result<ScanSequence<S>> {
    sys.check(seq)?;
    if !sys.is_time_invariant() {
        return Err(Error::NotTimeInvariant);
    }
    let (c, n, len) = (sys.channels, sys.n_state, sys.len);
    let (a, b, cv) = (&sys.a_bar[..c * n], &sys.b_bar[..c * n], &sys.c[..n]);
    // kernel[j * c + ch]
    let mut kernel = vec![S::zero(); len * c];
    for ch in 0..c {
        for s in 0..n {
            let i = ch * n + s;
            let mut pow = S::one();
            for j in 0..len {
                kernel[j * c + ch] = kernel[j * c + ch] + cv[s] * pow * b[i];
                pow = pow * a[i];
            }
        }
    }
    let mut y = vec![S::zero(); len * c];
    for t in 0..len {
        for j in 0..=t {
            let x = seq.token(t - j);
            for ch in 0..c {
                y[t * c + ch] = y[t * c + ch] + kernel[j * c + ch] * x[ch];
            }
        }
    }
    Ok(seq.with_tokens(y))
}
