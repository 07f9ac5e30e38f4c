//! B-spline bases on clamped uniform knot vectors and the KAN connection
//! function
//!
//! ```text
//! φ(x) = w · silu(x) + s · Σ_r c_r B_{k,r}(clamp(x))
//! ```
//!
//! `k` is the polynomial degree of the pieces (so `k = 3` is cubic). The
//! spline path sees its input clamped to `[grid_min, grid_max]`; the SiLU
//! path sees the raw input.

use thiserror::Error;

use crate::autodiff::{self, CustomOp, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SplineError {
    #[error("spline of degree {order} needs at least {} basis functions, got {num_basis}", order + 1)]
    TooFewBasis { order: usize, num_basis: usize },
    #[error("grid range [{min}, {max}] is empty or not finite")]
    InvalidGrid { min: f64, max: f64 },
    #[error("expected {expected} spline coefficients, got {actual}")]
    CoefficientLength { expected: usize, actual: usize },
}

/// Knot layout shared by every edge of a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineSpec {
    order: usize,
    num_basis: usize,
    grid_min: f64,
    grid_max: f64,
    knots: Vec<f64>,
}

impl SplineSpec {
    /// Builds `num_basis + order + 1` knots: `order + 1` copies of each
    /// endpoint with a uniform interior grid between them.
    pub fn new(order: usize, num_basis: usize, grid_min: f64, grid_max: f64) -> Result<Self, SplineError> {
        if num_basis < order + 1 {
            return Err(SplineError::TooFewBasis { order, num_basis });
        }
        if !(grid_min.is_finite() && grid_max.is_finite() && grid_min < grid_max) {
            return Err(SplineError::InvalidGrid {
                min: grid_min,
                max: grid_max,
            });
        }
        let intervals = num_basis - order;
        let step = (grid_max - grid_min) / intervals as f64;
        let mut knots = Vec::with_capacity(num_basis + order + 1);
        knots.extend(std::iter::repeat_n(grid_min, order + 1));
        knots.extend((1..intervals).map(|j| grid_min + step * j as f64));
        knots.extend(std::iter::repeat_n(grid_max, order + 1));
        Ok(Self {
            order,
            num_basis,
            grid_min,
            grid_max,
            knots,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn num_basis(&self) -> usize {
        self.num_basis
    }

    pub fn grid(&self) -> (f64, f64) {
        (self.grid_min, self.grid_max)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Index `i` of the knot span `[t_i, t_{i+1})` containing `x`; the last
    /// non-empty span is closed on the right.
    fn span(&self, x: f64) -> usize {
        let (k, n) = (self.order, self.num_basis);
        if x >= self.grid_max {
            return n - 1;
        }
        // Binary search over t_k ..= t_n.
        let (mut lo, mut hi) = (k, n);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if x < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// Non-zero degree-`degree` basis values at `x` for the given span,
    /// i.e. `B_{span-degree} ..= B_{span}`.
    fn local_basis(&self, span: usize, x: f64, degree: usize, out: &mut [f64]) {
        let t = &self.knots;
        let mut left = [0.0; 16];
        let mut right = [0.0; 16];
        out[0] = 1.0;
        for j in 1..=degree {
            left[j] = x - t[span + 1 - j];
            right[j] = t[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom == 0.0 { 0.0 } else { out[r] / denom };
                out[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            out[j] = saved;
        }
    }

    /// Writes `B_{k,1..R}(x)` into `values` and, optionally, their
    /// derivatives into `derivs`. `x` is clamped to the grid first; the
    /// derivative is reported as zero outside the grid.
    pub fn eval_into(&self, x: f64, values: &mut [f64], derivs: Option<&mut [f64]>) {
        assert!(self.order < 15, "spline degree above 14 is not supported");
        values.fill(0.0);
        if !x.is_finite() {
            values.fill(f64::NAN);
            if let Some(d) = derivs {
                d.fill(f64::NAN);
            }
            return;
        }
        let inside = x >= self.grid_min && x <= self.grid_max;
        let xc = x.clamp(self.grid_min, self.grid_max);
        let k = self.order;
        let span = self.span(xc);
        let mut local = [0.0; 16];
        self.local_basis(span, xc, k, &mut local);
        values[span - k..=span].copy_from_slice(&local[..=k]);

        if let Some(d) = derivs {
            d.fill(0.0);
            if k == 0 || !inside {
                return;
            }
            let mut lower = [0.0; 16];
            self.local_basis(span, xc, k - 1, &mut lower);
            // lower[j] = B_{span-k+1+j, k-1}
            let t = &self.knots;
            let kf = k as f64;
            for j in 0..=k {
                let i = span - k + j;
                let a = if j >= 1 {
                    let denom = t[i + k] - t[i];
                    if denom > 0.0 {
                        kf * lower[j - 1] / denom
                    } else {
                        0.0
                    }
                } else {
                    0.0
                };
                let b = if j < k {
                    let denom = t[i + k + 1] - t[i + 1];
                    if denom > 0.0 {
                        kf * lower[j] / denom
                    } else {
                        0.0
                    }
                } else {
                    0.0
                };
                d[i] = a - b;
            }
        }
    }

    /// `B_{k,1..R}(clamp(x))`.
    pub fn basis_eval(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.num_basis];
        self.eval_into(x, &mut out, None);
        out
    }

    /// Differentiable basis expansion. An input of shape `[.., n]` maps to
    /// `[.., n * R]` where element `(.., i * R + r)` holds `B_r(x_i)`; a
    /// scalar input maps to `[R]`.
    pub fn basis_var<'t>(&self, x: Var<'t>) -> Var<'t> {
        let xv = x.value();
        let r = self.num_basis;
        let mut values = vec![0.0; xv.len() * r];
        let mut derivs = vec![0.0; xv.len() * r];
        for (e, &xe) in xv.data().iter().enumerate() {
            self.eval_into(xe, &mut values[e * r..(e + 1) * r], Some(&mut derivs[e * r..(e + 1) * r]));
        }
        let mut shape = xv.shape().to_vec();
        match shape.last_mut() {
            Some(last) => *last *= r,
            None => shape.push(r),
        }
        let out = Tensor::new(shape, values).expect("basis output sized from input");
        x.tape().custom(&[x], out, Box::new(BasisBackward { derivs, r }))
    }
}

struct BasisBackward {
    derivs: Vec<f64>,
    r: usize,
}

impl CustomOp for BasisBackward {
    fn name(&self) -> &'static str {
        "bspline_basis"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_output: &[f64]) -> Vec<Vec<f64>> {
        let n = inputs[0].len();
        let grad = (0..n)
            .map(|e| {
                let span = e * self.r..(e + 1) * self.r;
                grad_output[span.clone()]
                    .iter()
                    .zip(&self.derivs[span])
                    .map(|(g, d)| g * d)
                    .sum()
            })
            .collect();
        vec![grad]
    }
}

/// Learnable parameters of one connection: base weight `w`, spline weight
/// `s` and coefficients `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectionParams {
    pub w: f64,
    pub s: f64,
    pub c: Vec<f64>,
}

impl ConnectionParams {
    pub fn new(spec: &SplineSpec, w: f64, s: f64, c: Vec<f64>) -> Result<Self, SplineError> {
        if c.len() != spec.num_basis() {
            return Err(SplineError::CoefficientLength {
                expected: spec.num_basis(),
                actual: c.len(),
            });
        }
        Ok(Self { w, s, c })
    }

    /// Plain evaluation of `φ(x)`.
    pub fn eval(&self, spec: &SplineSpec, x: f64) -> f64 {
        let basis = spec.basis_eval(x);
        let spline: f64 = basis.iter().zip(&self.c).map(|(b, c)| b * c).sum();
        self.w * crate::special::silu(x) + self.s * spline
    }

    /// Puts the parameters on `tape` as leaves.
    pub fn bind<'t>(&self, tape: &'t autodiff::Tape) -> ConnectionVars<'t> {
        ConnectionVars {
            w: tape.scalar(self.w),
            s: tape.scalar(self.s),
            c: tape.leaf(Tensor::from_vec(self.c.clone())),
        }
    }
}

/// Connection parameters living on a tape.
#[derive(Debug, Clone, Copy)]
pub struct ConnectionVars<'t> {
    pub w: Var<'t>,
    pub s: Var<'t>,
    pub c: Var<'t>,
}

/// Differentiable `φ(x)` for a single connection, applied elementwise to a
/// scalar or 1-D `x`.
pub fn phi<'t>(spec: &SplineSpec, params: ConnectionVars<'t>, x: Var<'t>) -> autodiff::Result<Var<'t>> {
    let shape = x.shape();
    let n: usize = shape.iter().product();
    let r = spec.num_basis();
    let (lo, hi) = spec.grid();
    let basis = spec.basis_var(x.clamp(lo, hi)?).reshape(&[n, r])?;
    let spline = basis.matmul(params.c.reshape(&[r, 1])?)?.reshape(&shape)?;
    let base = x.silu()?.mul(params.w)?;
    base.add(spline.mul(params.s)?)
}
