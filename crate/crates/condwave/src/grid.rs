//! Uniform one- and two-dimensional grids.
//!
//! Each axis is either a `Box` (hard-wall interval, both endpoints are grid
//! points, fields are treated as zero outside) or `Periodic` (a ring; the
//! right endpoint is identified with the left one and is not stored).

use crate::{Error, Result};
use ndarray::Array1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    Box,
    Periodic,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid1D {
    n: usize,
    min: f64,
    max: f64,
    boundary: Boundary,
}

impl Grid1D {
    pub fn new(n: usize, min: f64, max: f64, boundary: Boundary) -> Result<Self> {
        if n < 8 {
            return Err(Error::InvalidGrid(format!("n = {n} < 8")));
        }
        if !min.is_finite() || !max.is_finite() || min >= max {
            return Err(Error::InvalidGrid(format!(
                "extents [{min}, {max}] must be finite and increasing"
            )));
        }
        Ok(Grid1D { n, min, max, boundary })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn min(&self) -> f64 {
        self.min
    }

    pub fn max(&self) -> f64 {
        self.max
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    /// Interval length; for a periodic axis this is the circumference.
    pub fn length(&self) -> f64 {
        self.max - self.min
    }

    pub fn spacing(&self) -> f64 {
        match self.boundary {
            Boundary::Box => self.length() / (self.n - 1) as f64,
            Boundary::Periodic => self.length() / self.n as f64,
        }
    }

    pub fn coord(&self, i: usize) -> f64 {
        self.min + i as f64 * self.spacing()
    }

    pub fn coords(&self) -> Array1<f64> {
        Array1::from_iter((0..self.n).map(|i| self.coord(i)))
    }

    /// Wrap a coordinate into the fundamental domain of a periodic axis.
    /// Box coordinates are returned unchanged.
    pub fn wrap(&self, x: f64) -> f64 {
        match self.boundary {
            Boundary::Box => x,
            Boundary::Periodic => {
                let l = self.length();
                let mut y = (x - self.min).rem_euclid(l) + self.min;
                // rem_euclid can return exactly l for tiny negative inputs
                if y >= self.min + l {
                    y -= l;
                }
                y
            }
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        match self.boundary {
            Boundary::Box => x >= self.min && x <= self.max,
            Boundary::Periodic => x.is_finite(),
        }
    }

    /// Fractional index of a coordinate. Periodic axes wrap; box axes error
    /// outside the extents.
    pub fn to_index(&self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(Error::InvalidGrid(format!("non-finite coordinate {x}")));
        }
        match self.boundary {
            Boundary::Box => {
                if !self.contains(x) {
                    return Err(Error::OutOfDomain { x1: x, x2: f64::NAN, axis: 9 });
                }
                Ok((x - self.min) / self.spacing())
            }
            Boundary::Periodic => Ok((self.wrap(x) - self.min) / self.spacing()),
        }
    }

    /// Trapezoid quadrature weights (including the spacing factor).
    pub fn quad_weights(&self) -> Array1<f64> {
        let h = self.spacing();
        match self.boundary {
            Boundary::Periodic => Array1::from_elem(self.n, h),
            Boundary::Box => {
                let mut w = Array1::from_elem(self.n, h);
                w[0] = 0.5 * h;
                w[self.n - 1] = 0.5 * h;
                w
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid2D {
    axes: [Grid1D; 2],
}

impl Grid2D {
    pub fn new(axis1: Grid1D, axis2: Grid1D) -> Self {
        Grid2D { axes: [axis1, axis2] }
    }

    pub fn axis(&self, a: usize) -> &Grid1D {
        &self.axes[a]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.axes[0].n(), self.axes[1].n())
    }

    pub fn cell_area(&self) -> f64 {
        self.axes[0].spacing() * self.axes[1].spacing()
    }

    pub fn point(&self, i1: usize, i2: usize) -> [f64; 2] {
        [self.axes[0].coord(i1), self.axes[1].coord(i2)]
    }
}

/// Build a 2D grid from per-axis sizes, extents, and boundaries.
pub fn make_grid(
    n: (usize, usize),
    extents: [(f64, f64); 2],
    boundaries: [Boundary; 2],
) -> Result<Grid2D> {
    let a1 = Grid1D::new(n.0, extents[0].0, extents[0].1, boundaries[0])?;
    let a2 = Grid1D::new(n.1, extents[1].0, extents[1].1, boundaries[1])?;
    Ok(Grid2D::new(a1, a2))
}
