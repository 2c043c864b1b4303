//! Scalar fields on 2D grids: finite-difference stencils, interpolation,
//! polar decomposition, masks, and weighted norms.
//!
//! Conventions used throughout the crate:
//! * derivatives are 2nd-order central stencils; periodic axes wrap, box
//!   axes switch to 2nd-order one-sided stencils at the first/last point;
//! * interpolation is separable cubic (4-point Lagrange) in the interior,
//!   falling back to linear within one cell of a box edge;
//! * node masks cut out neighborhoods of wave function zeros, where phase
//!   and velocity fields are undefined.

use crate::grid::{Boundary, Grid1D, Grid2D};
use crate::{Error, Result, HBAR};
use ndarray::{Array1, Array2};
use num_complex::Complex64 as C64;
use std::collections::VecDeque;
use std::ops::{Add, Mul, Sub};

/// Relative amplitude floor that defines the node mask.
pub const NODE_EPS_REL: f64 = 1e-6;

/// Element types the stencil and interpolation kernels work on.
pub trait FieldElem:
    Copy + Default + Add<Output = Self> + Sub<Output = Self> + Mul<f64, Output = Self>
{
}
impl FieldElem for f64 {}
impl FieldElem for C64 {}

#[derive(Clone, Debug)]
pub struct Field2D<T> {
    pub grid: Grid2D,
    pub values: Array2<T>,
}

pub type ComplexField2D = Field2D<C64>;
pub type RealField2D = Field2D<f64>;

impl<T: FieldElem> Field2D<T> {
    pub fn new(grid: Grid2D, values: Array2<T>) -> Result<Self> {
        let expected = grid.shape();
        let found = values.dim();
        if expected != found {
            return Err(Error::ShapeMismatch { expected, found });
        }
        Ok(Field2D { grid, values })
    }

    pub fn zeros(grid: Grid2D) -> Self {
        let (n1, n2) = grid.shape();
        Field2D { grid, values: Array2::from_elem((n1, n2), T::default()) }
    }

    /// Tabulate `f(x1, x2)` on the grid.
    pub fn from_fn(grid: Grid2D, mut f: impl FnMut(f64, f64) -> T) -> Self {
        let (n1, n2) = grid.shape();
        let mut values = Array2::from_elem((n1, n2), T::default());
        for i1 in 0..n1 {
            let x1 = grid.axis(0).coord(i1);
            for i2 in 0..n2 {
                values[[i1, i2]] = f(x1, grid.axis(1).coord(i2));
            }
        }
        Field2D { grid, values }
    }
}

fn axis_len(grid: &Grid2D, axis: usize) -> usize {
    grid.axis(axis).n()
}

/// 2nd-order first derivative along `axis`.
pub fn gradient<T: FieldElem>(f: &Field2D<T>, axis: usize) -> Field2D<T> {
    let (n1, n2) = f.grid.shape();
    let n = axis_len(&f.grid, axis);
    let h = f.grid.axis(axis).spacing();
    let periodic = f.grid.axis(axis).boundary() == Boundary::Periodic;
    let mut out = Array2::from_elem((n1, n2), T::default());

    let get = |i1: usize, i2: usize| f.values[[i1, i2]];
    let mut set = |i1: usize, i2: usize, v: T| out[[i1, i2]] = v;

    let lanes = if axis == 0 { n2 } else { n1 };
    for lane in 0..lanes {
        let at = |i: usize| if axis == 0 { get(i, lane) } else { get(lane, i) };
        for i in 0..n {
            let d = if periodic {
                let ip = (i + 1) % n;
                let im = (i + n - 1) % n;
                (at(ip) - at(im)) * (0.5 / h)
            } else if i == 0 {
                (at(1) * 4.0 - at(0) * 3.0 - at(2)) * (0.5 / h)
            } else if i == n - 1 {
                (at(n - 1) * 3.0 - at(n - 2) * 4.0 + at(n - 3)) * (0.5 / h)
            } else {
                (at(i + 1) - at(i - 1)) * (0.5 / h)
            };
            if axis == 0 {
                set(i, lane, d);
            } else {
                set(lane, i, d);
            }
        }
    }
    Field2D { grid: f.grid, values: out }
}

/// 2nd-order second derivative along `axis` (3-point interior stencil,
/// 4-point one-sided at box edges).
pub fn second_derivative<T: FieldElem>(f: &Field2D<T>, axis: usize) -> Field2D<T> {
    let (n1, n2) = f.grid.shape();
    let n = axis_len(&f.grid, axis);
    let h2 = f.grid.axis(axis).spacing().powi(2);
    let periodic = f.grid.axis(axis).boundary() == Boundary::Periodic;
    let mut out = Array2::from_elem((n1, n2), T::default());

    let get = |i1: usize, i2: usize| f.values[[i1, i2]];
    let mut set = |i1: usize, i2: usize, v: T| out[[i1, i2]] = v;

    let lanes = if axis == 0 { n2 } else { n1 };
    for lane in 0..lanes {
        let at = |i: usize| if axis == 0 { get(i, lane) } else { get(lane, i) };
        for i in 0..n {
            let d = if periodic {
                let ip = (i + 1) % n;
                let im = (i + n - 1) % n;
                (at(ip) + at(im) - at(i) * 2.0) * (1.0 / h2)
            } else if i == 0 {
                (at(0) * 2.0 - at(1) * 5.0 + at(2) * 4.0 - at(3)) * (1.0 / h2)
            } else if i == n - 1 {
                (at(n - 1) * 2.0 - at(n - 2) * 5.0 + at(n - 3) * 4.0 - at(n - 4)) * (1.0 / h2)
            } else {
                (at(i + 1) + at(i - 1) - at(i) * 2.0) * (1.0 / h2)
            };
            if axis == 0 {
                set(i, lane, d);
            } else {
                set(lane, i, d);
            }
        }
    }
    Field2D { grid: f.grid, values: out }
}

pub fn laplacian<T: FieldElem>(f: &Field2D<T>) -> Field2D<T> {
    let a = second_derivative(f, 0);
    let b = second_derivative(f, 1);
    let mut values = a.values;
    values.zip_mut_with(&b.values, |x, &y| *x = *x + y);
    Field2D { grid: f.grid, values }
}

// ---------------------------------------------------------------------------
// Norms and quadrature

/// Trapezoid weight for the 2D grid point (i1, i2).
pub fn quad_weight(grid: &Grid2D, i1: usize, i2: usize) -> f64 {
    let w1 = grid.axis(0).quad_weights();
    let w2 = grid.axis(1).quad_weights();
    w1[i1] * w2[i2]
}

/// Weighted L2 norm of a complex field: sqrt(sum w |f|^2).
pub fn l2_norm(f: &ComplexField2D) -> f64 {
    let w1 = f.grid.axis(0).quad_weights();
    let w2 = f.grid.axis(1).quad_weights();
    let mut s = 0.0;
    for ((i1, i2), v) in f.values.indexed_iter() {
        s += w1[i1] * w2[i2] * v.norm_sqr();
    }
    s.sqrt()
}

pub fn l2_norm_real(f: &RealField2D) -> f64 {
    let w1 = f.grid.axis(0).quad_weights();
    let w2 = f.grid.axis(1).quad_weights();
    let mut s = 0.0;
    for ((i1, i2), v) in f.values.indexed_iter() {
        s += w1[i1] * w2[i2] * v * v;
    }
    s.sqrt()
}

/// Normalize in place to unit L2 norm; returns the previous norm.
pub fn normalize(f: &mut ComplexField2D) -> Result<f64> {
    let norm = l2_norm(f);
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroField);
    }
    f.values.mapv_inplace(|v| v / norm);
    Ok(norm)
}

// ---------------------------------------------------------------------------
// Masks

/// Node mask: true where |psi| < eps_rel * max|psi|. Also returns max|psi|.
pub fn node_mask(f: &ComplexField2D, eps_rel: f64) -> Result<(Array2<bool>, f64)> {
    let max = f.values.iter().map(|v| v.norm()).fold(0.0_f64, f64::max);
    if max == 0.0 {
        return Err(Error::ZeroField);
    }
    let floor = eps_rel * max;
    Ok((f.values.mapv(|v| v.norm() < floor), max))
}

/// Grow a mask by `cells` in the Chebyshev metric, respecting periodic wrap.
pub fn dilate_mask(mask: &Array2<bool>, grid: &Grid2D, cells: usize) -> Array2<bool> {
    let (n1, n2) = mask.dim();
    let p1 = grid.axis(0).boundary() == Boundary::Periodic;
    let p2 = grid.axis(1).boundary() == Boundary::Periodic;
    let mut cur = mask.clone();
    for _ in 0..cells {
        let mut next = cur.clone();
        for i1 in 0..n1 {
            for i2 in 0..n2 {
                if !cur[[i1, i2]] {
                    continue;
                }
                for (d1, d2) in [(-1_i64, 0_i64), (1, 0), (0, -1), (0, 1)] {
                    let j1 = i1 as i64 + d1;
                    let j2 = i2 as i64 + d2;
                    let j1 = if p1 {
                        Some(j1.rem_euclid(n1 as i64) as usize)
                    } else if (0..n1 as i64).contains(&j1) {
                        Some(j1 as usize)
                    } else {
                        None
                    };
                    let j2 = if p2 {
                        Some(j2.rem_euclid(n2 as i64) as usize)
                    } else if (0..n2 as i64).contains(&j2) {
                        Some(j2 as usize)
                    } else {
                        None
                    };
                    if let (Some(j1), Some(j2)) = (j1, j2) {
                        next[[j1, j2]] = true;
                    }
                }
            }
        }
        cur = next;
    }
    cur
}

/// A real field with an undefined-value mask (velocity fields near nodes).
#[derive(Clone, Debug)]
pub struct MaskedReal2D {
    pub field: RealField2D,
    pub mask: Array2<bool>,
}

impl MaskedReal2D {
    /// Derivative along `axis`; output masked wherever the stencil touches a
    /// masked input point.
    pub fn derivative(&self, axis: usize) -> MaskedReal2D {
        let field = gradient(&self.field, axis);
        let mask = dilate_axis(&self.mask, &self.field.grid, axis, 2);
        MaskedReal2D { field, mask }
    }
}

fn dilate_axis(mask: &Array2<bool>, grid: &Grid2D, axis: usize, cells: usize) -> Array2<bool> {
    let (n1, n2) = mask.dim();
    let n = if axis == 0 { n1 } else { n2 };
    let periodic = grid.axis(axis).boundary() == Boundary::Periodic;
    let mut out = mask.clone();
    for i1 in 0..n1 {
        for i2 in 0..n2 {
            if !mask[[i1, i2]] {
                continue;
            }
            let i = if axis == 0 { i1 } else { i2 };
            for d in 1..=cells as i64 {
                for s in [-d, d] {
                    let j = i as i64 + s;
                    let j = if periodic {
                        j.rem_euclid(n as i64) as usize
                    } else if (0..n as i64).contains(&j) {
                        j as usize
                    } else {
                        continue;
                    };
                    if axis == 0 {
                        out[[j, i2]] = true;
                    } else {
                        out[[i1, j]] = true;
                    }
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Interpolation

struct AxisStencil {
    idx: [usize; 4],
    w: [f64; 4],
    m: usize,
}

fn lagrange_cubic(u: f64) -> [f64; 4] {
    [
        -u * (u - 1.0) * (u - 2.0) / 6.0,
        (u * u - 1.0) * (u - 2.0) / 2.0,
        -u * (u + 1.0) * (u - 2.0) / 2.0,
        u * (u * u - 1.0) / 6.0,
    ]
}

fn axis_stencil(axis: &Grid1D, x: f64, axis_id: usize) -> Result<AxisStencil> {
    let n = axis.n();
    let g = axis.to_index(x).map_err(|_| Error::OutOfDomain {
        x1: if axis_id == 0 { x } else { f64::NAN },
        x2: if axis_id == 1 { x } else { f64::NAN },
        axis: axis_id,
    })?;
    match axis.boundary() {
        Boundary::Periodic => {
            let i0 = g.floor() as usize % n;
            let u = g - g.floor();
            let w = lagrange_cubic(u);
            let wrap = |k: i64| ((i0 as i64 + k).rem_euclid(n as i64)) as usize;
            Ok(AxisStencil { idx: [wrap(-1), wrap(0), wrap(1), wrap(2)], w, m: 4 })
        }
        Boundary::Box => {
            let mut i0 = g.floor() as usize;
            if i0 >= n - 1 {
                i0 = n - 2;
            }
            let u = g - i0 as f64;
            if i0 == 0 || i0 == n - 2 {
                // within one cell of the edge: linear
                Ok(AxisStencil { idx: [i0, i0 + 1, 0, 0], w: [1.0 - u, u, 0.0, 0.0], m: 2 })
            } else {
                let w = lagrange_cubic(u);
                Ok(AxisStencil { idx: [i0 - 1, i0, i0 + 1, i0 + 2], w, m: 4 })
            }
        }
    }
}

/// Interpolate a field at an off-grid point. Separable cubic in the
/// interior, linear within one cell of a box edge; periodic axes wrap;
/// box coordinates outside the extents are an error.
pub fn interpolate<T: FieldElem>(f: &Field2D<T>, p: [f64; 2]) -> Result<T> {
    let s1 = axis_stencil(f.grid.axis(0), p[0], 0)?;
    let s2 = axis_stencil(f.grid.axis(1), p[1], 1)?;
    let mut acc = T::default();
    for a in 0..s1.m {
        let mut row = T::default();
        for b in 0..s2.m {
            row = row + f.values[[s1.idx[a], s2.idx[b]]] * s2.w[b];
        }
        acc = acc + row * s1.w[a];
    }
    Ok(acc)
}

/// Interpolate along axis 2 only, at every axis-1 grid point: returns
/// `out[i1] = f(x1_i1, x2)`. This is the slice-extraction workhorse.
pub fn interpolate_row<T: FieldElem>(f: &Field2D<T>, x2: f64) -> Result<Array1<T>> {
    let s2 = axis_stencil(f.grid.axis(1), x2, 1)?;
    let n1 = f.grid.axis(0).n();
    let mut out = Array1::from_elem(n1, T::default());
    for i1 in 0..n1 {
        let mut acc = T::default();
        for b in 0..s2.m {
            acc = acc + f.values[[i1, s2.idx[b]]] * s2.w[b];
        }
        out[i1] = acc;
    }
    Ok(out)
}

/// Point interpolation of a masked field; errors with the offending grid
/// index if the stencil touches a masked point.
pub fn interpolate_masked(f: &MaskedReal2D, p: [f64; 2]) -> Result<f64> {
    let s1 = axis_stencil(f.field.grid.axis(0), p[0], 0)?;
    let s2 = axis_stencil(f.field.grid.axis(1), p[1], 1)?;
    let mut acc = 0.0;
    for a in 0..s1.m {
        for b in 0..s2.m {
            let (i1, i2) = (s1.idx[a], s2.idx[b]);
            if f.mask[[i1, i2]] {
                return Err(Error::Masked(i1, i2));
            }
            acc += f.field.values[[i1, i2]] * s1.w[a] * s2.w[b];
        }
    }
    Ok(acc)
}

/// Bilinear interpolation: slower-converging than the cubic kernel but
/// bounded by the surrounding sample values, which rejection sampling
/// relies on (the interpolant never exceeds the grid maximum and never
/// goes negative for non-negative data).
pub fn interpolate_bilinear(f: &RealField2D, p: [f64; 2]) -> Result<f64> {
    let lin = |axis: &Grid1D, x: f64, axis_id: usize| -> Result<([usize; 2], [f64; 2])> {
        let n = axis.n();
        let g = axis.to_index(x).map_err(|_| Error::OutOfDomain {
            x1: if axis_id == 0 { x } else { f64::NAN },
            x2: if axis_id == 1 { x } else { f64::NAN },
            axis: axis_id,
        })?;
        match axis.boundary() {
            Boundary::Periodic => {
                let i0 = g.floor() as usize % n;
                let u = g - g.floor();
                Ok(([i0, (i0 + 1) % n], [1.0 - u, u]))
            }
            Boundary::Box => {
                let mut i0 = g.floor() as usize;
                if i0 >= n - 1 {
                    i0 = n - 2;
                }
                let u = g - i0 as f64;
                Ok(([i0, i0 + 1], [1.0 - u, u]))
            }
        }
    };
    let (i1, w1) = lin(f.grid.axis(0), p[0], 0)?;
    let (i2, w2) = lin(f.grid.axis(1), p[1], 1)?;
    let mut acc = 0.0;
    for a in 0..2 {
        for b in 0..2 {
            acc += f.values[[i1[a], i2[b]]] * w1[a] * w2[b];
        }
    }
    Ok(acc)
}

/// Row interpolation of a masked field: `None` where the stencil touches a
/// masked point.
pub fn interpolate_row_masked(f: &MaskedReal2D, x2: f64) -> Result<Array1<Option<f64>>> {
    let s2 = axis_stencil(f.field.grid.axis(1), x2, 1)?;
    let n1 = f.field.grid.axis(0).n();
    let mut out = Array1::from_elem(n1, None);
    for i1 in 0..n1 {
        let mut acc = 0.0;
        let mut ok = true;
        for b in 0..s2.m {
            if f.mask[[i1, s2.idx[b]]] {
                ok = false;
                break;
            }
            acc += f.field.values[[i1, s2.idx[b]]] * s2.w[b];
        }
        if ok {
            out[i1] = Some(acc);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Polar decomposition

/// Amplitude/phase representation `psi = R exp(i S / hbar)` with the phase
/// unwrapped over the grid and a node mask where the phase is undefined.
#[derive(Clone, Debug)]
pub struct PolarField {
    pub grid: Grid2D,
    pub r: Array2<f64>,
    pub s: Array2<f64>,
    pub mask: Array2<bool>,
    pub eps_node: f64,
}

/// Wrap an angle difference into (-pi, pi].
pub fn wrap_angle(d: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut w = d - two_pi * (d / two_pi).round();
    if w <= -std::f64::consts::PI {
        w += two_pi;
    }
    w
}

/// Decompose a complex field into amplitude and unwrapped phase.
///
/// The phase is propagated over a breadth-first spanning tree of the
/// non-masked points, one connected component at a time, each component
/// anchored at its maximum-amplitude point with `S = hbar * arg(psi)` there.
/// Masked points get `S = 0` and must be excluded from downstream use; the
/// phase is multivalued around masked node regions (circulation), which is
/// physics, not an error.
pub fn polar_decompose(f: &ComplexField2D, eps_rel: f64) -> Result<PolarField> {
    let (mask, _) = node_mask(f, eps_rel)?;
    let (n1, n2) = f.values.dim();
    let r = f.values.mapv(|v| v.norm());
    let mut s = Array2::zeros((n1, n2));
    let mut visited = mask.clone();
    let p1 = f.grid.axis(0).boundary() == Boundary::Periodic;
    let p2 = f.grid.axis(1).boundary() == Boundary::Periodic;

    // Deterministic component roots: global max first, then row-major scan.
    let mut roots: Vec<(usize, usize)> = Vec::new();
    let mut best = (0usize, 0usize);
    let mut best_amp = -1.0;
    for ((i1, i2), v) in r.indexed_iter() {
        if !mask[[i1, i2]] && *v > best_amp {
            best_amp = *v;
            best = (i1, i2);
        }
    }
    if best_amp < 0.0 {
        return Err(Error::ZeroField);
    }
    roots.push(best);
    for i1 in 0..n1 {
        for i2 in 0..n2 {
            if !mask[[i1, i2]] {
                roots.push((i1, i2));
            }
        }
    }

    let mut queue = VecDeque::new();
    for root in roots {
        if visited[[root.0, root.1]] {
            continue;
        }
        visited[[root.0, root.1]] = true;
        s[[root.0, root.1]] = HBAR * f.values[[root.0, root.1]].arg();
        queue.push_back(root);
        while let Some((i1, i2)) = queue.pop_front() {
            let here_arg = f.values[[i1, i2]].arg();
            let here_s = s[[i1, i2]];
            for (d1, d2) in [(-1_i64, 0_i64), (1, 0), (0, -1), (0, 1)] {
                let j1 = i1 as i64 + d1;
                let j2 = i2 as i64 + d2;
                let j1 = if p1 {
                    j1.rem_euclid(n1 as i64) as usize
                } else if (0..n1 as i64).contains(&j1) {
                    j1 as usize
                } else {
                    continue;
                };
                let j2 = if p2 {
                    j2.rem_euclid(n2 as i64) as usize
                } else if (0..n2 as i64).contains(&j2) {
                    j2 as usize
                } else {
                    continue;
                };
                if visited[[j1, j2]] {
                    continue;
                }
                visited[[j1, j2]] = true;
                let d_arg = wrap_angle(f.values[[j1, j2]].arg() - here_arg);
                s[[j1, j2]] = here_s + HBAR * d_arg;
                queue.push_back((j1, j2));
            }
        }
    }

    Ok(PolarField { grid: f.grid, r, s, mask, eps_node: eps_rel })
}

impl PolarField {
    /// Rebuild `R exp(i S / hbar)`; exact at non-masked points.
    pub fn recompose(&self) -> ComplexField2D {
        let values = ndarray::Zip::from(&self.r)
            .and(&self.s)
            .map_collect(|&r, &s| C64::from_polar(r, s / HBAR));
        ComplexField2D { grid: self.grid, values }
    }
}

/// Unwrap the phase of a 1D complex slice from its maximum-amplitude point
/// outward, skipping masked points (phase there is set to 0). Across a
/// masked gap the unwrapping continues from the nearest unmasked neighbor.
pub fn unwrap_phase_1d(psi: &Array1<C64>, mask: &Array1<bool>) -> Array1<f64> {
    let n = psi.len();
    let mut s = Array1::zeros(n);
    let mut anchor = None;
    let mut best = -1.0;
    for i in 0..n {
        if !mask[i] && psi[i].norm() > best {
            best = psi[i].norm();
            anchor = Some(i);
        }
    }
    let Some(a) = anchor else { return s };
    s[a] = HBAR * psi[a].arg();
    let mut prev = a;
    for i in (a + 1)..n {
        if mask[i] {
            continue;
        }
        s[i] = s[prev] + HBAR * wrap_angle(psi[i].arg() - psi[prev].arg());
        prev = i;
    }
    prev = a;
    for i in (0..a).rev() {
        if mask[i] {
            continue;
        }
        s[i] = s[prev] + HBAR * wrap_angle(psi[i].arg() - psi[prev].arg());
        prev = i;
    }
    s
}
