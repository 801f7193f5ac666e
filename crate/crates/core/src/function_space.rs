//! Discretization of `L²₋α = L²(ℝ₊, e^{−αx} dx)` on a uniform grid.
//!
//! A [`GridFunction`] stores nodal values on `x_i = i·h`, `i = 0..N`, plus a
//! tail value. Conceptually the grid continues to virtual nodes
//! `x_max + h, x_max + 2h, …`, all carrying the tail value, and the function
//! is the piecewise-linear interpolant through every node. Inner products
//! and norms integrate that interpolant against `e^{−αx}` exactly: the nodal
//! weights are the weighted integrals of the hat functions and the virtual
//! nodes collapse into a single geometric tail weight.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::quadrature::{phi_left, phi_right};

#[derive(Debug, Clone)]
pub struct Grid {
    n_nodes: usize,
    x_max: f64,
    spacing: f64,
    alpha: f64,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    tail_weight: f64,
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.n_nodes == other.n_nodes
            && self.x_max.to_bits() == other.x_max.to_bits()
            && self.alpha.to_bits() == other.alpha.to_bits()
    }
}

impl Grid {
    pub fn uniform(n_nodes: usize, x_max: f64, alpha: f64) -> Result<Self> {
        if n_nodes < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 nodes, got {n_nodes}")));
        }
        if !(x_max.is_finite() && x_max > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "x_max must be positive and finite, got {x_max}"
            )));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "alpha must be positive and finite, got {alpha}"
            )));
        }
        let h = x_max / (n_nodes - 1) as f64;
        let nodes: Vec<f64> = (0..n_nodes).map(|i| i as f64 * h).collect();

        let a = alpha * h;
        let interior = h * (phi_left(-a) + a.exp() * phi_right(-a));
        let mut weights: Vec<f64> = nodes.iter().map(|&x| (-alpha * x).exp() * interior).collect();
        weights[0] = h * phi_left(-a);
        let tail_weight = (-alpha * n_nodes as f64 * h).exp() * interior / (-(-a).exp_m1());

        Ok(Grid {
            n_nodes,
            x_max,
            spacing: h,
            alpha,
            nodes,
            weights,
            tail_weight,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Quadrature weights for `∫ f e^{−αx} dx`, one per node.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Combined weight of all virtual nodes past `x_max`.
    pub fn tail_weight(&self) -> f64 {
        self.tail_weight
    }
}

#[derive(Clone, PartialEq)]
pub struct GridFunction {
    grid: Arc<Grid>,
    values: Vec<f64>,
    tail: f64,
}

impl fmt::Debug for GridFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GridFunction")
            .field("n_nodes", &self.values.len())
            .field("values", &self.values)
            .field("tail", &self.tail)
            .finish()
    }
}

impl GridFunction {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>, tail: f64) -> Result<Self> {
        if values.len() != grid.n_nodes {
            return Err(Error::LengthMismatch {
                what: "grid function values",
                expected: grid.n_nodes,
                got: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "grid function values",
                index,
            });
        }
        if !tail.is_finite() {
            return Err(Error::NonFinite {
                what: "grid function tail",
                index: values.len(),
            });
        }
        Ok(GridFunction { grid, values, tail })
    }

    /// Samples `f` at the nodes; the tail takes the value at `x_max`.
    pub fn from_fn(grid: Arc<Grid>, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values: Vec<f64> = grid.nodes.iter().map(|&x| f(x)).collect();
        let tail = values[values.len() - 1];
        Self::new(grid, values, tail)
    }

    pub fn from_fn_with_tail(grid: Arc<Grid>, f: impl Fn(f64) -> f64, tail: f64) -> Result<Self> {
        let values = grid.nodes.iter().map(|&x| f(x)).collect();
        Self::new(grid, values, tail)
    }

    pub fn constant(grid: Arc<Grid>, c: f64) -> Self {
        let values = vec![c; grid.n_nodes];
        GridFunction { grid, values, tail: c }
    }

    pub fn zeros(grid: Arc<Grid>) -> Self {
        Self::constant(grid, 0.0)
    }

    pub(crate) fn from_parts_unchecked(grid: Arc<Grid>, values: Vec<f64>, tail: f64) -> Self {
        debug_assert_eq!(values.len(), grid.n_nodes);
        GridFunction { grid, values, tail }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn tail(&self) -> f64 {
        self.tail
    }

    pub fn set_tail(&mut self, tail: f64) {
        self.tail = tail;
    }

    pub fn into_parts(self) -> (Vec<f64>, f64) {
        (self.values, self.tail)
    }

    /// Value at node `i`, or the tail value for `i ≥ N`.
    #[inline]
    pub fn extended(&self, i: usize) -> f64 {
        if i < self.values.len() {
            self.values[i]
        } else {
            self.tail
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tail.is_finite() && self.values.iter().all(|v| v.is_finite())
    }

    /// Smallest value over the nodes and the tail.
    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(self.tail, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(self.tail, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GridFunction {
        GridFunction {
            grid: Arc::clone(&self.grid),
            values: self.values.iter().map(|&v| f(v)).collect(),
            tail: f(self.tail),
        }
    }

    pub fn zip_map(&self, other: &GridFunction, f: impl Fn(f64, f64) -> f64) -> Result<GridFunction> {
        self.check_same_grid(other)?;
        Ok(GridFunction {
            grid: Arc::clone(&self.grid),
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
            tail: f(self.tail, other.tail),
        })
    }

    pub fn scale(&self, c: f64) -> GridFunction {
        self.map(|v| c * v)
    }

    pub fn add(&self, other: &GridFunction) -> Result<GridFunction> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &GridFunction) -> Result<GridFunction> {
        self.zip_map(other, |a, b| a - b)
    }

    /// `self += c · other`.
    pub fn axpy(&mut self, c: f64, other: &GridFunction) -> Result<()> {
        self.check_same_grid(other)?;
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a += c * b;
        }
        self.tail += c * other.tail;
        Ok(())
    }

    pub fn check_same_grid(&self, other: &GridFunction) -> Result<()> {
        if Arc::ptr_eq(&self.grid, &other.grid) || *self.grid == *other.grid {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }

    /// Weighted sum `Σ wᵢ φ(fᵢ) + W∞ φ(f∞)`, the exact-weight quadrature of
    /// `∫ φ(f) e^{−αx} dx` for the constant-extended grid function.
    pub fn weighted_sum(&self, phi: impl Fn(f64) -> f64) -> f64 {
        let body: f64 = self
            .grid
            .weights
            .iter()
            .zip(&self.values)
            .map(|(&w, &v)| w * phi(v))
            .sum();
        body + self.grid.tail_weight * phi(self.tail)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    /// `(∫ |f|² e^{−αx} dx)^{1/2}`
    L2Weighted,
    /// `∫ |f| e^{−αx} dx`
    L1Weighted,
    /// Max over nodes and tail.
    Sup,
    /// `(f(∞)² + ∫ |f'|² e^{αx})^{1/2}` with `f'` the cell slope on
    /// `[0, x_max]`; the constant extension contributes no derivative.
    HAlpha,
}

pub fn weighted_inner(f: &GridFunction, g: &GridFunction) -> Result<f64> {
    f.check_same_grid(g)?;
    let grid = &f.grid;
    let body: f64 = grid
        .weights
        .iter()
        .zip(f.values.iter().zip(&g.values))
        .map(|(&w, (&a, &b))| w * a * b)
        .sum();
    Ok(body + grid.tail_weight * f.tail * g.tail)
}

pub fn norm(f: &GridFunction, kind: NormKind) -> f64 {
    match kind {
        NormKind::L2Weighted => f.weighted_sum(|v| v * v).sqrt(),
        NormKind::L1Weighted => f.weighted_sum(f64::abs),
        NormKind::Sup => f.values.iter().fold(f.tail.abs(), |m, v| m.max(v.abs())),
        NormKind::HAlpha => {
            let grid = &f.grid;
            let h = grid.spacing;
            // ∫ e^{αx} over one cell, scaled by e^{α x_i} per cell below.
            let cell = (grid.alpha * h).exp_m1() / grid.alpha;
            let slope_energy: f64 = f
                .values
                .windows(2)
                .zip(&grid.nodes)
                .map(|(w, &x)| {
                    let d = (w[1] - w[0]) / h;
                    d * d * (grid.alpha * x).exp() * cell
                })
                .sum();
            (f.tail * f.tail + slope_energy).sqrt()
        }
    }
}

#[derive(Debug, Clone)]
pub struct LatticeParts {
    pub positive: GridFunction,
    pub negative: GridFunction,
    /// 1 where `f < 0`, else 0.
    pub negative_indicator: GridFunction,
}

pub fn lattice_parts(f: &GridFunction) -> LatticeParts {
    LatticeParts {
        positive: f.map(|v| v.max(0.0)),
        negative: f.map(|v| (-v).max(0.0)),
        negative_indicator: f.map(|v| if v < 0.0 { 1.0 } else { 0.0 }),
    }
}

/// `‖f⁻‖²` in `L²₋α`.
pub fn negative_energy(f: &GridFunction) -> f64 {
    f.weighted_sum(|v| if v < 0.0 { v * v } else { 0.0 })
}
