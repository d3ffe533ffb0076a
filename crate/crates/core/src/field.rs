//! Sampled fields on the base group, the lifting group, and single factors:
//! rectangular grids with multilinear interpolation, the fiber push-forward,
//! the lifting `f -> f#`, convolutions (full and along subgroups), and
//! normalized dilates.
//!
//! Off-lattice reads interpolate multilinearly and return 0 outside the grid
//! hull (fields are treated as compactly supported).  Grid convolutions use
//! the trapezoidal rule on the input lattice; fiber integrals apply
//! Gauss-Kronrod panels split at the interpolation breakpoints, which
//! integrates the interpolant exactly.

use crate::error::{Error, Result};
use crate::group::{Factor, GroupDims};
use crate::quad::{self, QuadOpts};
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::sync::OnceLock;

/// Hard cap on total samples in a single grid.
pub const GRID_BUDGET: usize = 1 << 27;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum DomainTag {
    /// The base group `C^N x R^2`; axes `[z-blocks.., t1, t2]`.
    BaseGroup,
    /// The lifting group `C^N x R^3`; axes `[z-blocks.., u1, u2, u3]`.
    LiftGroup,
    /// A single factor `C^{n_mu} x R`; axes `[x_1..x_{2n}, t]`.
    Heisenberg(Factor),
    /// Free-form rectangular grid (operator kernels, scratch data).
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisSpec {
    pub origin: f64,
    pub spacing: f64,
    pub count: usize,
}

impl AxisSpec {
    pub fn new(origin: f64, spacing: f64, count: usize) -> Self {
        AxisSpec { origin, spacing, count }
    }

    /// Symmetric axis `[-extent, extent]` with `count` points.
    pub fn symmetric(extent: f64, count: usize) -> Self {
        let spacing = 2.0 * extent / (count - 1) as f64;
        AxisSpec { origin: -extent, spacing, count }
    }

    pub fn coord(&self, i: usize) -> f64 {
        self.origin + self.spacing * i as f64
    }

    pub fn last(&self) -> f64 {
        self.coord(self.count - 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: Vec<AxisSpec>,
}

impl GridSpec {
    pub fn new(axes: Vec<AxisSpec>) -> Result<Self> {
        let mut total: usize = 1;
        for ax in &axes {
            if ax.count < 2 {
                return Err(Error::InvalidArg("axis count must be >= 2".into()));
            }
            if !(ax.spacing > 0.0) {
                return Err(Error::InvalidArg("axis spacing must be > 0".into()));
            }
            total = total
                .checked_mul(ax.count)
                .ok_or(Error::GridBudget(usize::MAX))?;
        }
        if total > GRID_BUDGET {
            return Err(Error::GridBudget(total));
        }
        Ok(GridSpec { axes })
    }

    pub fn ndim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        self.axes.iter().map(|a| a.spacing).product()
    }

    pub fn flat(&self, idx: &[usize]) -> usize {
        let mut f = 0;
        for (ax, &i) in self.axes.iter().zip(idx) {
            f = f * ax.count + i;
        }
        f
    }

    pub fn unflatten(&self, mut flat: usize, idx: &mut [usize]) {
        for k in (0..self.axes.len()).rev() {
            idx[k] = flat % self.axes[k].count;
            flat /= self.axes[k].count;
        }
    }

    pub fn coords_of(&self, flat: usize, out: &mut [f64]) {
        let mut f = flat;
        for k in (0..self.axes.len()).rev() {
            out[k] = self.axes[k].coord(f % self.axes[k].count);
            f /= self.axes[k].count;
        }
    }
}

/// Scalar types a field can hold.
pub trait Scalar:
    Copy
    + Default
    + Send
    + Sync
    + std::ops::Add<Output = Self>
    + std::ops::AddAssign
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<f64, Output = Self>
    + 'static
{
    fn magnitude(self) -> f64;
    /// Pointwise product of two samples (complex multiplication for `C64`).
    fn prod(self, other: Self) -> Self;
}

impl Scalar for f64 {
    fn magnitude(self) -> f64 {
        self.abs()
    }
    fn prod(self, other: Self) -> Self {
        self * other
    }
}

impl Scalar for C64 {
    fn magnitude(self) -> f64 {
        self.norm()
    }
    fn prod(self, other: Self) -> Self {
        self * other
    }
}

/// A function sampled on a rectangular grid, row-major over the axes.
#[derive(Clone, Debug, PartialEq)]
pub struct Field<T> {
    pub domain: DomainTag,
    pub dims: GroupDims,
    pub grid: GridSpec,
    pub values: Vec<T>,
}

pub type RField = Field<f64>;
pub type CField = Field<C64>;

impl<T: Scalar> Field<T> {
    pub fn zeros(domain: DomainTag, dims: GroupDims, grid: GridSpec) -> Self {
        let n = grid.len();
        Field { domain, dims, grid, values: vec![T::default(); n] }
    }

    pub fn from_fn(
        domain: DomainTag,
        dims: GroupDims,
        grid: GridSpec,
        f: impl Fn(&[f64]) -> T + Send + Sync,
    ) -> Self {
        let n = grid.len();
        let nd = grid.ndim();
        let values: Vec<T> = (0..n)
            .into_par_iter()
            .map(|flat| {
                let mut c = vec![0.0; nd];
                grid.coords_of(flat, &mut c);
                f(&c)
            })
            .collect();
        Field { domain, dims, grid, values }
    }

    pub fn assert_same_shape(&self, other: &Field<T>) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::DimMismatch("fields have different grids".into()));
        }
        Ok(())
    }

    /// Multilinear interpolation; 0 outside the grid hull.
    pub fn interp(&self, x: &[f64]) -> T {
        let nd = self.grid.ndim();
        debug_assert_eq!(x.len(), nd);
        let mut base = [0usize; 16];
        let mut frac = [0.0f64; 16];
        for (k, ax) in self.grid.axes.iter().enumerate() {
            let u = (x[k] - ax.origin) / ax.spacing;
            if u < 0.0 || u > (ax.count - 1) as f64 {
                return T::default();
            }
            let mut i = u.floor() as usize;
            if i >= ax.count - 1 {
                i = ax.count - 2;
            }
            base[k] = i;
            frac[k] = u - i as f64;
        }
        let mut acc = T::default();
        for corner in 0..(1usize << nd) {
            let mut w = 1.0;
            let mut flat = 0usize;
            for k in 0..nd {
                let hi = (corner >> k) & 1 == 1;
                w *= if hi { frac[k] } else { 1.0 - frac[k] };
                flat = flat * self.grid.axes[k].count + base[k] + hi as usize;
            }
            if w != 0.0 {
                acc += self.values[flat] * w;
            }
        }
        acc
    }

    /// Plain Riemann/trapezoid integral (fields vanish at the boundary).
    pub fn integral(&self) -> T {
        let vol = self.grid.cell_volume();
        let mut acc = T::default();
        for &v in &self.values {
            acc += v * vol;
        }
        acc
    }

    pub fn map(&self, f: impl Fn(T) -> T + Send + Sync) -> Self {
        let values = self.values.par_iter().map(|&v| f(v)).collect();
        Field { domain: self.domain, dims: self.dims, grid: self.grid.clone(), values }
    }

    pub fn linf_distance(&self, other: &Field<T>) -> Result<f64> {
        self.assert_same_shape(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| (a - b).magnitude())
            .fold(0.0, f64::max))
    }

    pub fn sup_magnitude(&self) -> f64 {
        self.values.iter().map(|v| v.magnitude()).fold(0.0, f64::max)
    }
}

// ---------------------------------------------------------------------------
// Coordinate-level group operations (block/split convention, see `group`).
// ---------------------------------------------------------------------------

/// Number of coordinates a domain uses.
pub fn coord_len(domain: DomainTag, dims: &GroupDims) -> usize {
    match domain {
        DomainTag::BaseGroup => 2 * dims.n() + 2,
        DomainTag::LiftGroup => 2 * dims.n() + 3,
        DomainTag::Heisenberg(mu) => 2 * dims.n_of(mu) + 1,
        DomainTag::Raw => 0,
    }
}

fn phi_coords(a: &[f64], b: &[f64], n: usize) -> f64 {
    // 2 Im <z, z'> = 2 sum (x_{n+j} x'_j - x_j x'_{n+j}).
    let mut s = 0.0;
    for j in 0..n {
        s += a[n + j] * b[j] - a[j] * b[n + j];
    }
    2.0 * s
}

/// `out = a . b` in flat coordinates for the given domain.
pub fn mul_coords(domain: DomainTag, dims: &GroupDims, a: &[f64], b: &[f64], out: &mut [f64]) {
    for k in 0..a.len() {
        out[k] = a[k] + b[k];
    }
    let blocks = [(0usize, dims.n1), (2 * dims.n1, dims.n2), (2 * (dims.n1 + dims.n2), dims.n3)];
    match domain {
        DomainTag::Heisenberg(mu) => {
            let n = dims.n_of(mu);
            out[2 * n] += phi_coords(&a[..2 * n], &b[..2 * n], n);
        }
        DomainTag::BaseGroup => {
            let zt = 2 * dims.n();
            let p1 = phi_coords(&a[blocks[0].0..], &b[blocks[0].0..], blocks[0].1);
            let p2 = phi_coords(&a[blocks[1].0..], &b[blocks[1].0..], blocks[1].1);
            let p3 = phi_coords(&a[blocks[2].0..], &b[blocks[2].0..], blocks[2].1);
            out[zt] += p1 + p3;
            out[zt + 1] += p2 + p3;
        }
        DomainTag::LiftGroup => {
            let zt = 2 * dims.n();
            for (i, (off, n)) in blocks.iter().enumerate() {
                out[zt + i] += phi_coords(&a[*off..], &b[*off..], *n);
            }
        }
        DomainTag::Raw => {}
    }
}

/// `out = a^{-1}` in flat coordinates.
pub fn inv_coords(a: &[f64], out: &mut [f64]) {
    for k in 0..a.len() {
        out[k] = -a[k];
    }
}

// ---------------------------------------------------------------------------
// Fixed-panel Gauss-Kronrod for interpolated fiber integrands.
// ---------------------------------------------------------------------------

const XGK: [f64; 8] = [
    0.9914553711208126,
    0.9491079123427585,
    0.8648644233597691,
    0.7415311855993944,
    0.5860872354676911,
    0.4058451513773972,
    0.2077849550078985,
    0.0,
];
const WGK: [f64; 8] = [
    0.0229353220105292,
    0.0630920926299786,
    0.1047900103222502,
    0.1406532597155259,
    0.1690047266392679,
    0.1903505780647854,
    0.2044329400752989,
    0.2094821410847278,
];

fn gk15_panel<T: Scalar>(f: &mut impl FnMut(f64) -> T, a: f64, b: f64) -> T {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut acc = f(center) * (WGK[7] * half);
    for (i, &x) in XGK.iter().enumerate().take(7) {
        let dx = half * x;
        acc += (f(center - dx) + f(center + dx)) * (WGK[i] * half);
    }
    acc
}

/// Integrate over `[lo, hi]` with panels split at `breaks` (sorted in-place).
pub fn panel_integral<T: Scalar>(
    mut f: impl FnMut(f64) -> T,
    lo: f64,
    hi: f64,
    breaks: &mut Vec<f64>,
) -> T {
    let mut acc = T::default();
    if hi <= lo {
        return acc;
    }
    breaks.retain(|&u| u > lo && u < hi);
    breaks.push(lo);
    breaks.push(hi);
    breaks.sort_by(f64::total_cmp);
    for w in breaks.windows(2) {
        if w[1] > w[0] {
            acc += gk15_panel(&mut f, w[0], w[1]);
        }
    }
    acc
}

// ---------------------------------------------------------------------------
// Push-forward, lifting, transfer.
// ---------------------------------------------------------------------------

/// Fiber integral `(pi_* F)(z, t) = int F(z, t1-u, t2-u, u) du` for a field
/// on the lifting group.  Output lives on the base group with `t`-axes equal
/// to the input `u1`, `u2` axes.
pub fn pushforward<T: Scalar>(f: &Field<T>) -> Result<Field<T>> {
    if f.domain != DomainTag::LiftGroup {
        return Err(Error::InvalidArg("pushforward expects a field on the lifting group".into()));
    }
    let nz = 2 * f.dims.n();
    let ax_u1 = f.grid.axes[nz];
    let ax_u2 = f.grid.axes[nz + 1];
    let ax_u3 = f.grid.axes[nz + 2];
    let mut axes = f.grid.axes[..nz].to_vec();
    axes.push(ax_u1);
    axes.push(ax_u2);
    let grid = GridSpec::new(axes)?;
    let nd_out = grid.ndim();
    let n_out = grid.len();

    let values: Vec<T> = (0..n_out)
        .into_par_iter()
        .map(|flat| {
            let mut c = vec![0.0; nd_out];
            grid.coords_of(flat, &mut c);
            let (t1, t2) = (c[nz], c[nz + 1]);
            // Integration window: u3 in its axis, t1-u in the u1 axis, etc.
            let lo = ax_u3.origin.max(t1 - ax_u1.last()).max(t2 - ax_u2.last());
            let hi = ax_u3.last().min(t1 - ax_u1.origin).min(t2 - ax_u2.origin);
            let mut breaks: Vec<f64> = Vec::new();
            for i in 0..ax_u3.count {
                breaks.push(ax_u3.coord(i));
            }
            for i in 0..ax_u1.count {
                breaks.push(t1 - ax_u1.coord(i));
            }
            for i in 0..ax_u2.count {
                breaks.push(t2 - ax_u2.coord(i));
            }
            let mut x = vec![0.0; nd_out + 1];
            x[..nz].copy_from_slice(&c[..nz]);
            panel_integral(
                |u| {
                    x[nz] = t1 - u;
                    x[nz + 1] = t2 - u;
                    x[nz + 2] = u;
                    f.interp(&x)
                },
                lo,
                hi,
                &mut breaks,
            )
        })
        .collect();

    Ok(Field { domain: DomainTag::BaseGroup, dims: f.dims, grid, values })
}

/// Smooth even bump supported on `[1/2, 1] u [-1, -1/2]` with unit integral,
/// used by the lifting `f -> f#`.  Fixed once so results are reproducible.
pub struct ChiBump {
    norm: f64,
}

static CHI_NORM: OnceLock<f64> = OnceLock::new();

impl ChiBump {
    pub fn standard() -> Self {
        let norm = *CHI_NORM.get_or_init(|| {
            let raw = quad::integrate(
                |t| ChiBump { norm: 1.0 }.eval_raw(t),
                0.5,
                1.0,
                QuadOpts::with_tol(1e-14),
            )
            .expect("chi bump normalization")
            .value;
            0.5 / raw
        });
        ChiBump { norm }
    }

    fn eval_raw(&self, t: f64) -> f64 {
        let s = 4.0 * (t.abs() - 0.75);
        if s.abs() >= 1.0 {
            0.0
        } else {
            (-1.0 / (1.0 - s * s)).exp()
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.norm * self.eval_raw(t)
    }

    /// Integral over the line; should be 1 within 1e-12.
    pub fn mass(&self) -> f64 {
        2.0 * quad::integrate(|t| self.eval(t), 0.5, 1.0, QuadOpts::with_tol(1e-14))
            .expect("chi mass")
            .value
    }
}

/// The lifting `f#(z, t1, t2, u) = 2 chi(t1 + t2) f(z, t1+u, t2+u)`, a
/// compactly supported preimage of `f` under the push-forward.
pub fn lift_sharp(f: &RField, chi: &ChiBump, u_axis: AxisSpec) -> Result<RField> {
    if f.domain != DomainTag::BaseGroup {
        return Err(Error::InvalidArg("lift_sharp expects a field on the base group".into()));
    }
    let nz = 2 * f.dims.n();
    let mut axes = f.grid.axes.clone();
    axes.push(u_axis);
    let grid = GridSpec::new(axes)?;
    let dims = f.dims;
    let out = Field::from_fn(DomainTag::LiftGroup, dims, grid, |c| {
        let (t1, t2, u) = (c[nz], c[nz + 1], c[nz + 2]);
        let w = 2.0 * chi.eval(t1 + t2);
        if w == 0.0 {
            return 0.0;
        }
        let mut x = c[..nz + 2].to_vec();
        x[nz] = t1 + u;
        x[nz + 1] = t2 + u;
        w * f.interp(&x)
    });
    Ok(out)
}

/// Projection of an operator kernel along the last three axes:
/// `T(.., t1, t2) = int Ttilde(.., t1-u, t2-u, u) du`.
pub fn transfer_kernel<T: Scalar>(k: &Field<T>) -> Result<Field<T>> {
    let nd = k.grid.ndim();
    if nd < 3 {
        return Err(Error::InvalidArg("transfer_kernel needs at least three axes".into()));
    }
    let lead = nd - 3;
    let ax1 = k.grid.axes[lead];
    let ax2 = k.grid.axes[lead + 1];
    let ax3 = k.grid.axes[lead + 2];
    let mut axes = k.grid.axes[..lead].to_vec();
    axes.push(ax1);
    axes.push(ax2);
    let grid = GridSpec::new(axes)?;
    let n_out = grid.len();
    let values: Vec<T> = (0..n_out)
        .into_par_iter()
        .map(|flat| {
            let mut c = vec![0.0; lead + 2];
            grid.coords_of(flat, &mut c);
            let (t1, t2) = (c[lead], c[lead + 1]);
            let lo = ax3.origin.max(t1 - ax1.last()).max(t2 - ax2.last());
            let hi = ax3.last().min(t1 - ax1.origin).min(t2 - ax2.origin);
            let mut breaks: Vec<f64> = Vec::new();
            for i in 0..ax3.count {
                breaks.push(ax3.coord(i));
            }
            for i in 0..ax1.count {
                breaks.push(t1 - ax1.coord(i));
            }
            for i in 0..ax2.count {
                breaks.push(t2 - ax2.coord(i));
            }
            let mut x = vec![0.0; lead + 3];
            x[..lead].copy_from_slice(&c[..lead]);
            panel_integral(
                |u| {
                    x[lead] = t1 - u;
                    x[lead + 1] = t2 - u;
                    x[lead + 2] = u;
                    k.interp(&x)
                },
                lo,
                hi,
                &mut breaks,
            )
        })
        .collect();
    Ok(Field { domain: DomainTag::Raw, dims: k.dims, grid, values })
}

// ---------------------------------------------------------------------------
// Convolutions.
// ---------------------------------------------------------------------------

/// Diagnostics attached to a grid convolution.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct ConvolveInfo {
    /// Fraction of the kernel's absolute mass on the outermost grid shell; a
    /// large value means the kernel was truncated by its grid.
    pub kernel_boundary_mass: f64,
}

fn boundary_mass<T: Scalar>(k: &Field<T>) -> f64 {
    let nd = k.grid.ndim();
    let mut idx = vec![0usize; nd];
    let mut total = 0.0;
    let mut boundary = 0.0;
    for flat in 0..k.grid.len() {
        k.grid.unflatten(flat, &mut idx);
        let m = k.values[flat].magnitude();
        total += m;
        if idx
            .iter()
            .zip(&k.grid.axes)
            .any(|(&i, ax)| i == 0 || i == ax.count - 1)
        {
            boundary += m;
        }
    }
    if total > 0.0 {
        boundary / total
    } else {
        0.0
    }
}

/// Group convolution `(f * k)(g) = int f(h) k(h^{-1} g) dh` evaluated at the
/// given coordinate points.
pub fn convolve_at<T: Scalar>(
    f: &Field<T>,
    k: &Field<T>,
    points: &[Vec<f64>],
) -> Result<Vec<T>> {
    if f.domain != k.domain || f.dims != k.dims {
        return Err(Error::DimMismatch("convolve: domain/dims".into()));
    }
    let nd = f.grid.ndim();
    let vol = f.grid.cell_volume();
    let out: Vec<T> = points
        .par_iter()
        .map(|g| {
            let mut h = vec![0.0; nd];
            let mut hinv = vec![0.0; nd];
            let mut arg = vec![0.0; nd];
            let mut acc = T::default();
            for flat in 0..f.grid.len() {
                let fv = f.values[flat];
                if fv.magnitude() == 0.0 {
                    continue;
                }
                f.grid.coords_of(flat, &mut h);
                inv_coords(&h, &mut hinv);
                mul_coords(f.domain, &f.dims, &hinv, g, &mut arg);
                acc += fv.prod(k.interp(&arg)) * vol;
            }
            acc
        })
        .collect();
    Ok(out)
}

/// Group convolution sampled on the grid of `f`.
pub fn convolve<T: Scalar>(f: &Field<T>, k: &Field<T>) -> Result<(Field<T>, ConvolveInfo)> {
    let nd = f.grid.ndim();
    let n = f.grid.len();
    let points: Vec<Vec<f64>> = (0..n)
        .map(|flat| {
            let mut c = vec![0.0; nd];
            f.grid.coords_of(flat, &mut c);
            c
        })
        .collect();
    let values = convolve_at(f, k, &points)?;
    let info = ConvolveInfo { kernel_boundary_mass: boundary_mass(k) };
    Ok((
        Field { domain: f.domain, dims: f.dims, grid: f.grid.clone(), values },
        info,
    ))
}

/// Convolution along the subgroup `H_mu`:
/// `(f *_mu H)(g) = int_{H_mu} f(g tau_mu(h)^{-1}) H(h) dh`.
/// Works on both the base group and the lifting group.
pub fn convolve_subgroup<T: Scalar>(
    f: &Field<T>,
    mu: Factor,
    h_ker: &Field<T>,
) -> Result<Field<T>> {
    match h_ker.domain {
        DomainTag::Heisenberg(m) if m == mu => {}
        _ => return Err(Error::InvalidArg("subgroup kernel must live on the matching factor".into())),
    }
    let dims = f.dims;
    let n_mu = dims.n_of(mu);
    let nd = f.grid.ndim();
    let nz = 2 * dims.n();
    let zoff = 2 * dims.block(mu).start;
    let vol = h_ker.grid.cell_volume();
    let nh = h_ker.grid.len();
    let hd = h_ker.grid.ndim();
    let base = matches!(f.domain, DomainTag::BaseGroup);

    let n_out = f.grid.len();
    let values: Vec<T> = (0..n_out)
        .into_par_iter()
        .map(|flat| {
            let mut g = vec![0.0; nd];
            f.grid.coords_of(flat, &mut g);
            let mut h = vec![0.0; hd];
            let mut arg = vec![0.0; nd];
            let mut acc = T::default();
            for hf in 0..nh {
                let w = h_ker.values[hf];
                if w.magnitude() == 0.0 {
                    continue;
                }
                h_ker.grid.coords_of(hf, &mut h);
                arg.copy_from_slice(&g);
                // g . tau(h)^{-1}: shift the mu-block by -h_z and untwist.
                for j in 0..2 * n_mu {
                    arg[zoff + j] -= h[j];
                }
                let twist = -h[2 * n_mu] - phi_coords(&g[zoff..zoff + 2 * n_mu], &h[..2 * n_mu], n_mu);
                if base {
                    match mu {
                        Factor::H1 => arg[nz] += twist,
                        Factor::H2 => arg[nz + 1] += twist,
                        Factor::H3 => {
                            arg[nz] += twist;
                            arg[nz + 1] += twist;
                        }
                    }
                } else {
                    arg[nz + mu.index()] += twist;
                }
                acc += f.interp(&arg).prod(w) * vol;
            }
            acc
        })
        .collect();

    Ok(Field { domain: f.domain, dims, grid: f.grid.clone(), values })
}

/// Mass-preserving normalized dilate `phi_r(g) = r^{-Q_mu} phi(delta_{1/r} g)`
/// realized by rescaling the grid axes.
pub fn normalized_dilate(phi: &RField, r: f64) -> Result<RField> {
    let mu = match phi.domain {
        DomainTag::Heisenberg(m) => m,
        _ => return Err(Error::InvalidArg("normalized_dilate expects a factor field".into())),
    };
    if !(r > 0.0) {
        return Err(Error::InvalidArg("dilation parameter must be positive".into()));
    }
    let n = phi.dims.n_of(mu);
    let q = phi.dims.q_of(mu) as i32;
    let scale = r.powi(-q);
    let mut axes = phi.grid.axes.clone();
    for ax in axes.iter_mut().take(2 * n) {
        ax.origin *= r;
        ax.spacing *= r;
    }
    axes[2 * n].origin *= r * r;
    axes[2 * n].spacing *= r * r;
    let grid = GridSpec::new(axes)?;
    Ok(Field {
        domain: phi.domain,
        dims: phi.dims,
        grid,
        values: phi.values.iter().map(|&v| v * scale).collect(),
    })
}

// ---------------------------------------------------------------------------
// Serialization: JSON header + little-endian f64 payload, and CSV.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct FieldHeader {
    domain: DomainTag,
    dims: GroupDims,
    grid: GridSpec,
}

const MAGIC: &[u8; 8] = b"NILFLD1\n";

impl RField {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let header = serde_json::to_vec(&FieldHeader {
            domain: self.domain,
            dims: self.dims,
            grid: self.grid.clone(),
        })?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<RField> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Config("not a field file".into()));
        }
        let mut len8 = [0u8; 8];
        r.read_exact(&mut len8)?;
        let hlen = u64::from_le_bytes(len8) as usize;
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf)?;
        let header: FieldHeader = serde_json::from_slice(&hbuf)?;
        let n = header.grid.len();
        let mut values = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            values.push(f64::from_le_bytes(b));
        }
        Ok(Field { domain: header.domain, dims: header.dims, grid: header.grid, values })
    }

    pub fn save_csv(&self, path: &std::path::Path) -> Result<()> {
        let nd = self.grid.ndim();
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        let cols: Vec<String> = (0..nd).map(|k| format!("x{k}")).collect();
        writeln!(w, "{},value", cols.join(","))?;
        let mut c = vec![0.0; nd];
        for flat in 0..self.grid.len() {
            self.grid.coords_of(flat, &mut c);
            let row: Vec<String> = c.iter().map(|x| format!("{x}")).collect();
            writeln!(w, "{},{}", row.join(","), self.values[flat])?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn abelian_lift_grid(extent: f64, count: usize) -> GridSpec {
        GridSpec::new(vec![
            AxisSpec::symmetric(extent, count),
            AxisSpec::symmetric(extent, count),
            AxisSpec::symmetric(extent, count),
        ])
        .unwrap()
    }

    #[test]
    fn grid_indexing_round_trip() {
        let g = GridSpec::new(vec![AxisSpec::new(0.0, 0.5, 3), AxisSpec::new(-1.0, 1.0, 4)]).unwrap();
        assert_eq!(g.len(), 12);
        let mut idx = [0usize; 2];
        for flat in 0..12 {
            g.unflatten(flat, &mut idx);
            assert_eq!(g.flat(&idx), flat);
        }
        let mut c = [0.0; 2];
        g.coords_of(7, &mut c);
        assert_eq!(c, [0.5, 2.0]);
    }

    #[test]
    fn interp_reproduces_linear_functions() {
        let dims = GroupDims::abelian();
        let grid = abelian_lift_grid(2.0, 9);
        let f = Field::from_fn(DomainTag::LiftGroup, dims, grid, |c| {
            1.0 + 2.0 * c[0] - c[1] + 0.5 * c[2]
        });
        let v = f.interp(&[0.33, -0.71, 1.24]);
        assert!((v - (1.0 + 0.66 + 0.71 + 0.62)).abs() < 1e-12);
        assert_eq!(f.interp(&[5.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn pushforward_of_gaussian_matches_closed_form() {
        // (pi_* F)(0,0) = int exp(-3u^2) du = sqrt(pi/3); the error is the
        // O(h^2) bias of the trilinear interpolant, so halving the spacing
        // should divide it by about four.
        let dims = GroupDims::abelian();
        let exact = (PI / 3.0) .sqrt();
        let mut errs = Vec::new();
        for count in [71usize, 141] {
            let grid = abelian_lift_grid(7.0, count);
            let f = Field::from_fn(DomainTag::LiftGroup, dims, grid, |c| {
                (-(c[0] * c[0] + c[1] * c[1] + c[2] * c[2])).exp()
            });
            let pf = pushforward(&f).unwrap();
            errs.push((pf.interp(&[0.0, 0.0]) - exact).abs());
        }
        assert!(errs[0] < 0.02 * exact, "coarse error {}", errs[0]);
        let ratio = errs[0] / errs[1];
        assert!(ratio > 2.5, "refinement ratio {ratio} (errors {errs:?})");
        // Zero field pushes to zero.
        let grid = abelian_lift_grid(7.0, 11);
        let z: RField = Field::zeros(DomainTag::LiftGroup, dims, grid);
        assert_eq!(pushforward(&z).unwrap().sup_magnitude(), 0.0);
    }

    #[test]
    fn chi_bump_is_normalized_even_and_supported() {
        let chi = ChiBump::standard();
        assert!((chi.mass() - 1.0).abs() < 1e-12);
        assert_eq!(chi.eval(0.3), 0.0);
        assert_eq!(chi.eval(1.1), 0.0);
        assert!(chi.eval(0.75) > 0.0);
        assert_eq!(chi.eval(0.6), chi.eval(-0.6));
    }

    #[test]
    fn lift_sharp_inverts_pushforward() {
        let dims = GroupDims::abelian();
        // The chi bump varies on a short scale, so the lift grid must
        // resolve it; the residual is the interpolation bias.
        let grid = GridSpec::new(vec![
            AxisSpec::symmetric(3.0, 129),
            AxisSpec::symmetric(3.0, 129),
        ])
        .unwrap();
        let f = Field::from_fn(DomainTag::BaseGroup, dims, grid, |c| {
            (-2.0 * (c[0] * c[0] + 0.5 * c[1] * c[1])).exp()
        });
        let chi = ChiBump::standard();
        let lifted = lift_sharp(&f, &chi, AxisSpec::symmetric(2.0, 65)).unwrap();
        let back = pushforward(&lifted).unwrap();
        let mut worst = 0.0f64;
        for (flat, &v) in back.values.iter().enumerate() {
            let mut c = [0.0; 2];
            back.grid.coords_of(flat, &mut c);
            worst = worst.max((v - f.interp(&c)).abs());
        }
        assert!(worst < 2e-2, "round trip error {worst}");
    }

    #[test]
    fn lift_sharp_support_bound() {
        // supp f in {|t_a| < M} gives supp f# in {|t_a|, |u| < M + 1/2}.
        let dims = GroupDims::abelian();
        let m_bound = 1.0;
        let grid = GridSpec::new(vec![
            AxisSpec::symmetric(3.0, 49),
            AxisSpec::symmetric(3.0, 49),
        ])
        .unwrap();
        let f = Field::from_fn(DomainTag::BaseGroup, dims, grid, |c| {
            if c[0].abs() < m_bound && c[1].abs() < m_bound {
                (1.0 - (c[0] / m_bound).powi(2)) * (1.0 - (c[1] / m_bound).powi(2))
            } else {
                0.0
            }
        });
        let chi = ChiBump::standard();
        let lifted = lift_sharp(&f, &chi, AxisSpec::symmetric(3.0, 49)).unwrap();
        let mut c = [0.0; 3];
        for flat in 0..lifted.grid.len() {
            if lifted.values[flat] != 0.0 {
                lifted.grid.coords_of(flat, &mut c);
                assert!(c.iter().all(|&x| x.abs() < m_bound + 0.5), "support leak at {c:?}");
            }
        }
    }

    #[test]
    fn convolution_of_gaussians_abelian() {
        // In the abelian mode the group convolution is the Euclidean one:
        // two Gaussians convolve to a Gaussian with summed variances.
        let dims = GroupDims::abelian();
        let grid = GridSpec::new(vec![
            AxisSpec::symmetric(6.0, 61),
            AxisSpec::symmetric(6.0, 61),
        ])
        .unwrap();
        let a2 = 0.5;
        let b2 = 0.8;
        let f = Field::from_fn(DomainTag::BaseGroup, dims, grid.clone(), |c| {
            (-(c[0] * c[0] + c[1] * c[1]) / (2.0 * a2)).exp()
        });
        let k = Field::from_fn(DomainTag::BaseGroup, dims, grid, |c| {
            (-(c[0] * c[0] + c[1] * c[1]) / (2.0 * b2)).exp()
        });
        let probe = vec![vec![0.37, -0.91], vec![0.0, 0.0]];
        let got = convolve_at(&f, &k, &probe).unwrap();
        let c2 = a2 + b2;
        let amp = 2.0 * PI * a2 * b2 / c2;
        // On-lattice point: no interpolation, trapezoid error only.
        let exact0 = amp;
        assert!((got[1] - exact0).abs() < 1e-6 * amp, "origin: {} vs {exact0}", got[1]);
        // Off-lattice point: O(h^2) interpolation bias.
        let exact = amp * (-(probe[0][0].powi(2) + probe[0][1].powi(2)) / (2.0 * c2)).exp();
        assert!((got[0] - exact).abs() < 2e-2 * amp, "{} vs {exact}", got[0]);
        // f * 0 = 0.
        let z = Field::zeros(DomainTag::BaseGroup, dims, f.grid.clone());
        let (fz, _) = convolve(&f, &z).unwrap();
        assert_eq!(fz.sup_magnitude(), 0.0);
    }

    #[test]
    fn convolution_respects_total_mass() {
        let dims = GroupDims::new(0, 0, 1);
        let grid = GridSpec::new(vec![
            AxisSpec::symmetric(3.0, 9),
            AxisSpec::symmetric(3.0, 9),
            AxisSpec::symmetric(5.0, 13),
            AxisSpec::symmetric(5.0, 13),
        ])
        .unwrap();
        let f = Field::from_fn(DomainTag::BaseGroup, dims, grid.clone(), |c| {
            (-(c[0] * c[0] + c[1] * c[1] + 0.5 * c[2] * c[2] + 0.5 * c[3] * c[3])).exp()
        });
        let k = Field::from_fn(DomainTag::BaseGroup, dims, grid, |c| {
            (-2.0 * (c[0] * c[0] + c[1] * c[1]) - c[2] * c[2] - c[3] * c[3]).exp()
        });
        let (fk, info) = convolve(&f, &k).unwrap();
        // int (f*k) = int f int k for unimodular Haar measure.
        let lhs = fk.integral();
        let rhs = f.integral().prod(k.integral());
        assert!(
            (lhs - rhs).abs() < 0.05 * rhs.abs(),
            "mass: {lhs} vs {rhs} (boundary {})",
            info.kernel_boundary_mass
        );
    }

    #[test]
    fn subgroup_delta_approximation_is_identity() {
        let dims = GroupDims::abelian();
        let grid = GridSpec::new(vec![
            AxisSpec::symmetric(4.0, 33),
            AxisSpec::symmetric(4.0, 33),
        ])
        .unwrap();
        let f = Field::from_fn(DomainTag::BaseGroup, dims, grid, |c| {
            (-(c[0] * c[0] + c[1] * c[1])).exp()
        });
        // Narrow normalized bump on the third factor (the diagonal direction).
        let hgrid = GridSpec::new(vec![AxisSpec::symmetric(0.25, 21)]).unwrap();
        let mut h = Field::from_fn(DomainTag::Heisenberg(Factor::H3), dims, hgrid, |c| {
            let s = c[0] / 0.25;
            if s.abs() < 1.0 {
                (1.0 - s * s).powi(3)
            } else {
                0.0
            }
        });
        let mass = h.integral();
        h = h.map(|v| v / mass);
        let out = convolve_subgroup(&f, Factor::H3, &h).unwrap();
        let err = out.linf_distance(&f).unwrap();
        assert!(err < 4e-2, "delta approximation error {err}");
    }

    #[test]
    fn subgroup_convolutions_commute_on_lift() {
        // (f ~*_1 H) ~*_3 G = (f ~*_3 G) ~*_1 H on the lifting group.
        let dims = GroupDims::new(0, 0, 1);
        let grid = GridSpec::new(vec![
            AxisSpec::symmetric(2.5, 9),
            AxisSpec::symmetric(2.5, 9),
            AxisSpec::symmetric(2.5, 9),
            AxisSpec::symmetric(2.5, 9),
            AxisSpec::symmetric(2.5, 9),
        ])
        .unwrap();
        let f = Field::from_fn(DomainTag::LiftGroup, dims, grid, |c| {
            (-(c.iter().map(|x| x * x).sum::<f64>())).exp()
        });
        let h1 = Field::from_fn(
            DomainTag::Heisenberg(Factor::H1),
            dims,
            GridSpec::new(vec![AxisSpec::symmetric(1.0, 7)]).unwrap(),
            |c| (1.0 - c[0] * c[0]).max(0.0),
        );
        let g3 = Field::from_fn(
            DomainTag::Heisenberg(Factor::H3),
            dims,
            GridSpec::new(vec![
                AxisSpec::symmetric(1.0, 5),
                AxisSpec::symmetric(1.0, 5),
                AxisSpec::symmetric(1.0, 5),
            ])
            .unwrap(),
            |c| (1.0 - c.iter().map(|x| x * x).sum::<f64>()).max(0.0),
        );
        let ab = convolve_subgroup(&convolve_subgroup(&f, Factor::H1, &h1).unwrap(), Factor::H3, &g3).unwrap();
        let ba = convolve_subgroup(&convolve_subgroup(&f, Factor::H3, &g3).unwrap(), Factor::H1, &h1).unwrap();
        let scale = ab.sup_magnitude().max(1e-300);
        let err = ab.linf_distance(&ba).unwrap() / scale;
        assert!(err < 2e-2, "commutation error {err}");
    }

    #[test]
    fn normalized_dilate_preserves_mass() {
        let dims = GroupDims::new(1, 0, 0);
        let grid = GridSpec::new(vec![
            AxisSpec::symmetric(1.0, 17),
            AxisSpec::symmetric(1.0, 17),
            AxisSpec::symmetric(1.0, 17),
        ])
        .unwrap();
        let phi = Field::from_fn(DomainTag::Heisenberg(Factor::H1), dims, grid, |c| {
            (1.0 - c.iter().map(|x| x * x).sum::<f64>()).max(0.0)
        });
        let m0 = phi.integral();
        for r in [0.5, 1.0, 2.7] {
            let d = normalized_dilate(&phi, r).unwrap();
            assert!((d.integral() - m0).abs() < 1e-12 * m0.abs());
        }
        // Abelian factor: phi_r(t) = r^{-2} phi(t / r^2).
        let dims0 = GroupDims::abelian();
        let phi0 = Field::from_fn(
            DomainTag::Heisenberg(Factor::H2),
            dims0,
            GridSpec::new(vec![AxisSpec::symmetric(1.0, 11)]).unwrap(),
            |c| 1.0 - c[0].abs(),
        );
        let d = normalized_dilate(&phi0, 2.0).unwrap();
        assert!((d.interp(&[2.0]) - 0.25 * phi0.interp(&[0.5])).abs() < 1e-14);
    }

    #[test]
    fn transfer_of_separable_gaussian() {
        // Last-three-axes fiber integral of exp(-a t1^2 - b t2^2 - c u^2).
        let grid = GridSpec::new(vec![
            AxisSpec::symmetric(6.0, 61),
            AxisSpec::symmetric(6.0, 61),
            AxisSpec::symmetric(6.0, 61),
        ])
        .unwrap();
        let k = Field::from_fn(DomainTag::Raw, GroupDims::abelian(), grid, |c| {
            (-(c[0] * c[0] + 2.0 * c[1] * c[1] + 0.5 * c[2] * c[2])).exp()
        });
        let t = transfer_kernel(&k).unwrap();
        // Oracle by 1D quadrature.
        let oracle = quad::integrate_line(
            |u| (-(0.7 - u).powi(2) - 2.0 * (0.2 - u).powi(2) - 0.5 * u * u).exp(),
            QuadOpts::with_tol(1e-12),
        )
        .unwrap()
        .value;
        let v = t.interp(&[0.7, 0.2]);
        assert!((v - oracle).abs() < 2e-2, "{v} vs {oracle}");
        let z: RField = Field::zeros(DomainTag::Raw, GroupDims::abelian(), k.grid.clone());
        assert_eq!(transfer_kernel(&z).unwrap().sup_magnitude(), 0.0);
    }

    #[test]
    fn field_file_round_trip() {
        let dims = GroupDims::abelian();
        let grid = GridSpec::new(vec![AxisSpec::symmetric(1.0, 5), AxisSpec::symmetric(1.0, 5)]).unwrap();
        let f = Field::from_fn(DomainTag::BaseGroup, dims, grid, |c| c[0] + 10.0 * c[1]);
        let dir = std::env::temp_dir().join("nilharm_field_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("f.nfb");
        f.save(&path).unwrap();
        let g = RField::load(&path).unwrap();
        assert_eq!(f, g);
        f.save_csv(&dir.join("f.csv")).unwrap();
    }
}
