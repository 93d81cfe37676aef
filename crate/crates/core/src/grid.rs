//! Tensor grids on truncated boxes.
//!
//! Nodes are numbered with axis 0 fastest. Non-periodic axes include both
//! end points (`spacing = 2L/(N-1)`); periodic axes omit the right end point
//! (`spacing = 2L/N`).

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Smallest admissible node count per axis.
pub const MIN_NODES: usize = 9;

/// Default cap on the total number of grid nodes.
pub const DEFAULT_NODE_CAP: usize = 4_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    /// Homogeneous Neumann conditions by ghost-node reflection.
    #[default]
    Neumann,
    /// Boundary rows eliminated: boundary values stay frozen at their
    /// initial values.
    Dirichlet,
    Periodic,
}

impl Boundary {
    pub fn name(self) -> &'static str {
        match self {
            Boundary::Neumann => "neumann",
            Boundary::Dirichlet => "dirichlet",
            Boundary::Periodic => "periodic",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Axis {
    pub center: f64,
    pub half_width: f64,
    pub nodes: usize,
    pub lower: f64,
    pub spacing: f64,
}

impl Axis {
    pub fn coord(&self, k: usize) -> f64 {
        self.lower + k as f64 * self.spacing
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Grid {
    axes: Vec<Axis>,
    boundary: Boundary,
    #[serde(skip)]
    strides: Vec<usize>,
    len: usize,
}

impl Grid {
    /// Box `[-L, L]^d` with `nodes` nodes per axis.
    pub fn new(dim: usize, half_width: f64, nodes: usize, boundary: Boundary) -> Result<Self> {
        Self::with_axes(&vec![0.0; dim], &vec![half_width; dim], &vec![nodes; dim], boundary)
    }

    pub fn with_axes(
        centers: &[f64],
        half_widths: &[f64],
        nodes: &[usize],
        boundary: Boundary,
    ) -> Result<Self> {
        let dim = centers.len();
        if dim == 0 || dim > 3 {
            return Err(Error::InvalidArgument(format!(
                "grid dimension must be 1, 2 or 3, got {dim}"
            )));
        }
        if half_widths.len() != dim || nodes.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "{dim} centers, {} half-widths, {} node counts",
                half_widths.len(),
                nodes.len()
            )));
        }
        let mut axes = Vec::with_capacity(dim);
        for a in 0..dim {
            let (c, l, n) = (centers[a], half_widths[a], nodes[a]);
            if n < MIN_NODES {
                return Err(Error::GridTooCoarse(format!(
                    "axis {} has {n} nodes, at least {MIN_NODES} required",
                    a + 1
                )));
            }
            if !(l > 0.0 && l.is_finite() && c.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "axis {} needs a positive finite half-width, got {l}",
                    a + 1
                )));
            }
            let spacing = match boundary {
                Boundary::Periodic => 2.0 * l / n as f64,
                _ => 2.0 * l / (n - 1) as f64,
            };
            axes.push(Axis {
                center: c,
                half_width: l,
                nodes: n,
                lower: c - l,
                spacing,
            });
        }
        let mut strides = Vec::with_capacity(dim);
        let mut len = 1usize;
        for ax in &axes {
            strides.push(len);
            len = len.checked_mul(ax.nodes).ok_or(Error::MemoryCap {
                unknowns: usize::MAX,
                cap: DEFAULT_NODE_CAP,
            })?;
        }
        if len > DEFAULT_NODE_CAP {
            return Err(Error::MemoryCap {
                unknowns: len,
                cap: DEFAULT_NODE_CAP,
            });
        }
        Ok(Self {
            axes,
            boundary,
            strides,
            len,
        })
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    /// Number of nodes.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.axes[axis].spacing
    }

    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(|a| a.spacing).product()
    }

    /// Rejects `components * len()` above `cap`.
    pub fn check_capacity(&self, components: usize, cap: usize) -> Result<()> {
        let unknowns = self.len.saturating_mul(components);
        if unknowns > cap {
            return Err(Error::MemoryCap { unknowns, cap });
        }
        Ok(())
    }

    pub fn multi_index(&self, node: usize) -> Vec<usize> {
        self.axes
            .iter()
            .zip(&self.strides)
            .map(|(a, s)| (node / s) % a.nodes)
            .collect()
    }

    pub fn index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.strides).map(|(k, s)| k * s).sum()
    }

    fn axis_index(&self, node: usize, axis: usize) -> usize {
        (node / self.strides[axis]) % self.axes[axis].nodes
    }

    pub fn coord(&self, node: usize, axis: usize) -> f64 {
        self.axes[axis].coord(self.axis_index(node, axis))
    }

    pub fn point(&self, node: usize) -> Vec<f64> {
        (0..self.dim()).map(|a| self.coord(node, a)).collect()
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.len).map(|n| self.point(n)).collect()
    }

    /// Neighbour `offset` steps along `axis`: wraps on periodic grids and
    /// reflects about the end node otherwise (ghost-node reflection).
    pub fn neighbor(&self, node: usize, axis: usize, offset: isize) -> usize {
        let n = self.axes[axis].nodes as isize;
        let k = self.axis_index(node, axis) as isize;
        let mut j = k + offset;
        match self.boundary {
            Boundary::Periodic => j = j.rem_euclid(n),
            _ => {
                if j < 0 {
                    j = -j;
                }
                if j > n - 1 {
                    j = 2 * (n - 1) - j;
                }
                j = j.clamp(0, n - 1);
            }
        }
        (node as isize + (j - k) * self.strides[axis] as isize) as usize
    }

    /// True on the faces of a non-periodic box.
    pub fn on_boundary(&self, node: usize) -> bool {
        if self.boundary == Boundary::Periodic {
            return false;
        }
        (0..self.dim()).any(|a| {
            let k = self.axis_index(node, a);
            k == 0 || k + 1 == self.axes[a].nodes
        })
    }

    /// Trapezoid (periodic: rectangle) quadrature weights.
    pub fn weights(&self) -> Vec<f64> {
        let per_axis: Vec<Vec<f64>> = self
            .axes
            .iter()
            .map(|a| {
                let mut w = vec![a.spacing; a.nodes];
                if self.boundary != Boundary::Periodic {
                    w[0] *= 0.5;
                    w[a.nodes - 1] *= 0.5;
                }
                w
            })
            .collect();
        (0..self.len)
            .map(|n| {
                (0..self.dim())
                    .map(|a| per_axis[a][self.axis_index(n, a)])
                    .product()
            })
            .collect()
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        self.weights().iter().zip(values).map(|(w, v)| w * v).sum()
    }

    /// Nodes with `|x_a - center_a| <= fraction * L_a` on every axis. All
    /// nodes of a periodic grid are inner.
    pub fn inner_mask(&self, fraction: f64) -> Vec<bool> {
        if self.boundary == Boundary::Periodic {
            return vec![true; self.len];
        }
        (0..self.len)
            .map(|n| {
                self.axes.iter().enumerate().all(|(a, ax)| {
                    (self.coord(n, a) - ax.center).abs() <= fraction * ax.half_width + 1e-12
                })
            })
            .collect()
    }

    pub fn nearest_node(&self, point: &[f64]) -> usize {
        let multi: Vec<usize> = self
            .axes
            .iter()
            .zip(point)
            .map(|(a, &x)| {
                let k = ((x - a.lower) / a.spacing).round();
                k.clamp(0.0, (a.nodes - 1) as f64) as usize
            })
            .collect();
        self.index(&multi)
    }

    /// Index of the node whose coordinates equal `point` up to `1e-9`
    /// relative spacing.
    pub fn node_at(&self, point: &[f64]) -> Option<usize> {
        let n = self.nearest_node(point);
        let p = self.point(n);
        let exact = p
            .iter()
            .zip(point)
            .enumerate()
            .all(|(a, (x, y))| (x - y).abs() <= 1e-9 * self.axes[a].spacing);
        exact.then_some(n)
    }

    /// Multilinear interpolation of nodal `values` at `point`; `None`
    /// outside the box.
    pub fn interpolate(&self, values: &[f64], point: &[f64]) -> Option<f64> {
        let d = self.dim();
        let mut base = vec![0usize; d];
        let mut frac = vec![0.0; d];
        for a in 0..d {
            let ax = &self.axes[a];
            let s = (point[a] - ax.lower) / ax.spacing;
            let last = (ax.nodes - 1) as f64;
            if !(-1e-9..=last + 1e-9).contains(&s) {
                return None;
            }
            let s = s.clamp(0.0, last);
            let k = (s.floor() as usize).min(ax.nodes - 2);
            base[a] = k;
            frac[a] = s - k as f64;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut idx = 0;
            for a in 0..d {
                let up = (corner >> a) & 1;
                w *= if up == 1 { frac[a] } else { 1.0 - frac[a] };
                idx += (base[a] + up) * self.strides[a];
            }
            if w != 0.0 {
                acc += w * values[idx];
            }
        }
        Some(acc)
    }

    /// Nested coarse grid with every other node and the map from coarse to
    /// fine node indices; `None` when the node count does not nest or the
    /// coarse grid would be too small.
    pub fn coarsen(&self) -> Option<(Grid, Vec<usize>)> {
        let nodes: Option<Vec<usize>> = self
            .axes
            .iter()
            .map(|a| match self.boundary {
                Boundary::Periodic => (a.nodes % 2 == 0).then_some(a.nodes / 2),
                _ => (a.nodes % 2 == 1).then_some(a.nodes.div_ceil(2)),
            })
            .collect();
        let nodes = nodes?;
        let centers: Vec<f64> = self.axes.iter().map(|a| a.center).collect();
        let widths: Vec<f64> = self.axes.iter().map(|a| a.half_width).collect();
        let coarse = Grid::with_axes(&centers, &widths, &nodes, self.boundary).ok()?;
        let map = (0..coarse.len())
            .map(|n| {
                let multi: Vec<usize> = coarse.multi_index(n).iter().map(|k| 2 * k).collect();
                self.index(&multi)
            })
            .collect();
        Some((coarse, map))
    }

    /// Grid with half the spacing on the same box.
    pub fn refined(&self) -> Result<Grid> {
        let nodes: Vec<usize> = self
            .axes
            .iter()
            .map(|a| match self.boundary {
                Boundary::Periodic => 2 * a.nodes,
                _ => 2 * a.nodes - 1,
            })
            .collect();
        self.resized(1.0, &nodes)
    }

    /// Grid on the box of twice the half-width with the same spacing.
    pub fn doubled(&self) -> Result<Grid> {
        let nodes: Vec<usize> = self
            .axes
            .iter()
            .map(|a| match self.boundary {
                Boundary::Periodic => 2 * a.nodes,
                _ => 2 * (a.nodes - 1) + 1,
            })
            .collect();
        self.resized(2.0, &nodes)
    }

    fn resized(&self, width_factor: f64, nodes: &[usize]) -> Result<Grid> {
        let centers: Vec<f64> = self.axes.iter().map(|a| a.center).collect();
        let widths: Vec<f64> = self.axes.iter().map(|a| a.half_width * width_factor).collect();
        Grid::with_axes(&centers, &widths, nodes, self.boundary)
    }
}
