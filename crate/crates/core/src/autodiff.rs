//! Reverse-mode automatic differentiation on a flat, index-addressed tape.
//!
//! Nodes are appended in evaluation order, so parents always precede
//! children and a single reverse sweep computes every adjoint. A tape is
//! meant to be reused: [`Tape::clear`] keeps the allocations.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("non-finite value {0} entered the tape")]
    NonFinite(f64),
    #[error("domain error in {op}: argument {arg}")]
    Domain { op: &'static str, arg: f64 },
    #[error("variable {0} is not on this tape")]
    ForeignVar(u32),
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
    #[error("analytic gradient has {got} entries for {expected} coordinates")]
    LengthMismatch { expected: usize, got: usize },
}

type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Input,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Tanh,
    Logistic,
    Abs,
    Pow,
    Max,
    Min,
    Custom,
}

/// Handle to a tape node. Cheap to copy; carries its forward value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Var {
    index: u32,
    value: f64,
}

impl Var {
    pub fn value(self) -> f64 {
        self.value
    }

    pub fn index(self) -> u32 {
        self.index
    }
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    ops: Vec<Op>,
    values: Vec<f64>,
    /// Node `i` owns `parents[edge_start[i]..edge_start[i + 1]]`.
    edge_start: Vec<u32>,
    parents: Vec<u32>,
    partials: Vec<f64>,
    inputs: Vec<u32>,
}

/// Adjoints of every node up to the differentiated output.
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<f64>,
    inputs: Vec<u32>,
    non_finite: bool,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> f64 {
        self.adjoints.get(v.index as usize).copied().unwrap_or(0.0)
    }

    /// Gradient over inputs, in the order they were created.
    pub fn inputs(&self) -> Vec<f64> {
        self.inputs
            .iter()
            .map(|&i| self.adjoints.get(i as usize).copied().unwrap_or(0.0))
            .collect()
    }

    /// True when some adjoint overflowed or became NaN.
    pub fn has_non_finite(&self) -> bool {
        self.non_finite
    }
}

fn check(value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(AutodiffError::NonFinite(value))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(nodes: usize) -> Self {
        Self {
            ops: Vec::with_capacity(nodes),
            values: Vec::with_capacity(nodes),
            edge_start: Vec::with_capacity(nodes + 1),
            parents: Vec::with_capacity(2 * nodes),
            partials: Vec::with_capacity(2 * nodes),
            inputs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn clear(&mut self) {
        self.ops.clear();
        self.values.clear();
        self.edge_start.clear();
        self.parents.clear();
        self.partials.clear();
        self.inputs.clear();
    }

    pub fn op(&self, v: Var) -> Op {
        self.ops[v.index as usize]
    }

    fn push(&mut self, op: Op, value: f64, edges: &[(Var, f64)]) -> Var {
        let index = self.values.len() as u32;
        if self.edge_start.is_empty() {
            self.edge_start.push(0);
        }
        for &(p, d) in edges {
            debug_assert!(p.index < index, "parent must precede child");
            self.parents.push(p.index);
            self.partials.push(d);
        }
        self.ops.push(op);
        self.values.push(value);
        self.edge_start.push(self.parents.len() as u32);
        Var { index, value }
    }

    /// A differentiable leaf. Its gradient is reported by [`Gradients::inputs`].
    pub fn input(&mut self, value: f64) -> Result<Var> {
        let v = self.push(Op::Input, check(value)?, &[]);
        self.inputs.push(v.index);
        Ok(v)
    }

    pub fn constant(&mut self, value: f64) -> Result<Var> {
        Ok(self.push(Op::Constant, check(value)?, &[]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add, a.value + b.value, &[(a, 1.0), (b, 1.0)])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Sub, a.value - b.value, &[(a, 1.0), (b, -1.0)])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul, a.value * b.value, &[(a, b.value), (b, a.value)])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if b.value == 0.0 {
            return Err(AutodiffError::Domain { op: "div", arg: b.value });
        }
        let q = check(a.value / b.value)?;
        Ok(self.push(Op::Div, q, &[(a, 1.0 / b.value), (b, -q / b.value)]))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.push(Op::Neg, -a.value, &[(a, -1.0)])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let e = check(a.value.exp())?;
        Ok(self.push(Op::Exp, e, &[(a, e)]))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if a.value <= 0.0 {
            return Err(AutodiffError::Domain { op: "log", arg: a.value });
        }
        Ok(self.push(Op::Log, a.value.ln(), &[(a, 1.0 / a.value)]))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = a.value.tanh();
        self.push(Op::Tanh, t, &[(a, 1.0 - t * t)])
    }

    pub fn logistic(&mut self, a: Var) -> Var {
        let s = if a.value >= 0.0 {
            1.0 / (1.0 + (-a.value).exp())
        } else {
            let e = a.value.exp();
            e / (1.0 + e)
        };
        self.push(Op::Logistic, s, &[(a, s * (1.0 - s))])
    }

    /// Subgradient 0 at the kink.
    pub fn abs(&mut self, a: Var) -> Var {
        let d = if a.value > 0.0 {
            1.0
        } else if a.value < 0.0 {
            -1.0
        } else {
            0.0
        };
        self.push(Op::Abs, a.value.abs(), &[(a, d)])
    }

    /// `a^p` for a constant exponent. Negative bases need an integer
    /// exponent; a zero base needs `p ≥ 1` so the derivative is finite.
    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        let domain = Err(AutodiffError::Domain { op: "pow", arg: a.value });
        if (a.value < 0.0 && p.fract() != 0.0) || (a.value == 0.0 && p < 1.0) {
            return domain;
        }
        let y = check(a.value.powf(p))?;
        let d = if p == 0.0 {
            0.0
        } else if a.value == 0.0 {
            if p == 1.0 {
                1.0
            } else {
                0.0
            }
        } else {
            check(p * a.value.powf(p - 1.0))?
        };
        Ok(self.push(Op::Pow, y, &[(a, d)]))
    }

    /// Routes the whole adjoint to the larger argument; ties go to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Var {
        if a.value >= b.value {
            self.push(Op::Max, a.value, &[(a, 1.0), (b, 0.0)])
        } else {
            self.push(Op::Max, b.value, &[(a, 0.0), (b, 1.0)])
        }
    }

    /// Routes the whole adjoint to the smaller argument; ties go to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        if a.value <= b.value {
            self.push(Op::Min, a.value, &[(a, 1.0), (b, 0.0)])
        } else {
            self.push(Op::Min, b.value, &[(a, 0.0), (b, 1.0)])
        }
    }

    /// A fused node with caller-supplied value and local partials.
    pub fn custom(&mut self, value: f64, edges: &[(Var, f64)]) -> Result<Var> {
        check(value)?;
        for &(_, d) in edges {
            check(d)?;
        }
        Ok(self.push(Op::Custom, value, edges))
    }

    /// One reverse sweep from `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let n = output.index as usize + 1;
        if n > self.values.len() || self.values[n - 1].to_bits() != output.value.to_bits() {
            return Err(AutodiffError::ForeignVar(output.index));
        }
        let mut adjoints = vec![0.0; n];
        adjoints[n - 1] = 1.0;
        for i in (0..n).rev() {
            let adj = adjoints[i];
            if adj == 0.0 {
                continue;
            }
            let (lo, hi) = (self.edge_start[i] as usize, self.edge_start[i + 1] as usize);
            for e in lo..hi {
                adjoints[self.parents[e] as usize] += adj * self.partials[e];
            }
        }
        let non_finite = adjoints.iter().any(|a| !a.is_finite());
        Ok(Gradients {
            adjoints,
            inputs: self.inputs.iter().copied().filter(|&i| (i as usize) < n).collect(),
            non_finite,
        })
    }
}

/// Central differences `(f(x + h e_i) − f(x − h e_i)) / 2h`.
pub fn central_differences(mut f: impl FnMut(&[f64]) -> f64, x0: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(AutodiffError::BadStep(h));
    }
    let mut x = x0.to_vec();
    (0..x0.len())
        .map(|i| {
            x[i] = x0[i] + h;
            let up = f(&x);
            x[i] = x0[i] - h;
            let down = f(&x);
            x[i] = x0[i];
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}

/// Relative error with denominator `max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Largest relative error between `analytic` and central differences of `f` at `x0`.
pub fn finite_difference_check(
    f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    analytic: &[f64],
    h: f64,
) -> Result<f64> {
    if analytic.len() != x0.len() {
        return Err(AutodiffError::LengthMismatch {
            expected: x0.len(),
            got: analytic.len(),
        });
    }
    let numeric = central_differences(f, x0, h)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max))
}
