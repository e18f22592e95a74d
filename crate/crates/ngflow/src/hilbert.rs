//! Quadrature rules and the ambient inner products: discrete L2 over a sample
//! measure, and the H1_0 seminorm on [0, 1] via the composite trapezoid rule.
//!
//! Function values (and derivatives, for the H1 case) are supplied
//! pre-evaluated at the rule nodes; this module never calls back into network
//! code.

use crate::scalar::{cast, Scalar};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HilbertError {
    #[error("value array length {got} does not match node count {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("H1 seminorm inner product requires derivative arrays")]
    MissingDerivatives,
    #[error("H1 seminorm requires a trapezoid rule")]
    WrongRuleKind,
    #[error("invalid quadrature data: {0}")]
    InvalidRule(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadKind {
    MonteCarlo,
    Trapezoid,
}

/// Nodes and nonnegative weights carrying the ambient measure. Monte-Carlo
/// weights sum to one; trapezoid weights sum to the interval length.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule<T> {
    pub nodes: Vec<Vec<T>>,
    pub weights: Vec<T>,
    pub kind: QuadKind,
}

impl<T: Scalar> QuadratureRule<T> {
    /// Composite trapezoid rule: `n >= 2` uniformly spaced nodes on `[a, b]`
    /// including both endpoints; endpoint weights `h/2`, interior weights `h`.
    pub fn trapezoid(n: usize, a: T, b: T) -> Self {
        assert!(n >= 2, "trapezoid rule needs at least two nodes");
        assert!(a < b, "empty interval");
        let h = (b - a) / cast::<T>((n - 1) as f64);
        let half = h / cast::<T>(2.0);
        let nodes = (0..n)
            .map(|i| vec![a + h * cast::<T>(i as f64)])
            .collect();
        let weights = (0..n)
            .map(|i| if i == 0 || i == n - 1 { half } else { h })
            .collect();
        Self {
            nodes,
            weights,
            kind: QuadKind::Trapezoid,
        }
    }

    /// Equal-weight discrete measure over the given sample points.
    pub fn monte_carlo(samples: Vec<Vec<T>>) -> Self {
        assert!(!samples.is_empty(), "empty sample set");
        let w = T::one() / cast::<T>(samples.len() as f64);
        let weights = vec![w; samples.len()];
        Self {
            nodes: samples,
            weights,
            kind: QuadKind::MonteCarlo,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// First coordinate of node `i` (the common case of 1-d rules).
    pub fn node_scalar(&self, i: usize) -> T {
        self.nodes[i][0]
    }

    /// Quadrature of pre-evaluated integrand values.
    pub fn integrate(&self, values: &[T]) -> T {
        self.weights
            .iter()
            .zip(values)
            .map(|(&w, &v)| w * v)
            .sum()
    }

    /// One row per node: coordinates, then the weight.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (node, w) in self.nodes.iter().zip(&self.weights) {
            for c in node {
                out.push_str(&format!("{c},"));
            }
            out.push_str(&format!("{w}\n"));
        }
        out
    }

    pub fn from_csv(kind: QuadKind, s: &str) -> Result<Self, HilbertError> {
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for (lineno, line) in s.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 2 {
                return Err(HilbertError::InvalidRule(format!(
                    "line {}: expected coordinates and weight",
                    lineno + 1
                )));
            }
            let mut parsed = Vec::with_capacity(fields.len());
            for f in &fields {
                let v: f64 = f.trim().parse().map_err(|e| {
                    HilbertError::InvalidRule(format!("line {}: {e}", lineno + 1))
                })?;
                parsed.push(cast::<T>(v));
            }
            let w = parsed.pop().unwrap();
            nodes.push(parsed);
            weights.push(w);
        }
        if nodes.is_empty() {
            return Err(HilbertError::InvalidRule("no rows".into()));
        }
        Ok(Self {
            nodes,
            weights,
            kind,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceKind {
    L2Discrete,
    H1ZeroSeminorm,
}

/// An ambient inner product: a space kind plus the quadrature rule realizing
/// its integrals.
#[derive(Clone, Debug)]
pub struct InnerProductSpec<T> {
    pub space: SpaceKind,
    pub rule: QuadratureRule<T>,
}

impl<T: Scalar> InnerProductSpec<T> {
    pub fn new(space: SpaceKind, rule: QuadratureRule<T>) -> Result<Self, HilbertError> {
        if space == SpaceKind::H1ZeroSeminorm && rule.kind != QuadKind::Trapezoid {
            return Err(HilbertError::WrongRuleKind);
        }
        Ok(Self { space, rule })
    }
}

/// The ambient inner product of two functions given by their values (and, for
/// the H1 seminorm, derivatives) at the rule nodes.
///
/// L2: `sum_i w_i u(x_i) v(x_i)`; H1 seminorm: `sum_i w_i u'(x_i) v'(x_i)`.
pub fn inner_product<T: Scalar>(
    spec: &InnerProductSpec<T>,
    u: &[T],
    v: &[T],
    u_dx: Option<&[T]>,
    v_dx: Option<&[T]>,
) -> Result<T, HilbertError> {
    let n = spec.rule.len();
    for arr in [u, v] {
        if arr.len() != n {
            return Err(HilbertError::LengthMismatch {
                expected: n,
                got: arr.len(),
            });
        }
    }
    match spec.space {
        SpaceKind::L2Discrete => Ok(spec
            .rule
            .weights
            .iter()
            .zip(u.iter().zip(v))
            .map(|(&w, (&a, &b))| w * a * b)
            .sum()),
        SpaceKind::H1ZeroSeminorm => {
            let (du, dv) = match (u_dx, v_dx) {
                (Some(du), Some(dv)) => (du, dv),
                _ => return Err(HilbertError::MissingDerivatives),
            };
            for arr in [du, dv] {
                if arr.len() != n {
                    return Err(HilbertError::LengthMismatch {
                        expected: n,
                        got: arr.len(),
                    });
                }
            }
            Ok(spec
                .rule
                .weights
                .iter()
                .zip(du.iter().zip(dv))
                .map(|(&w, (&a, &b))| w * a * b)
                .sum())
        }
    }
}
