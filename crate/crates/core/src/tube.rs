//! Tubes: the tri-parameter balls of the base group.  A tube is a cube in
//! the complex coordinates times a parallelogram in the two central
//! coordinates, with a case split on the scale ordering that exposes the
//! hidden third parameter.  This module provides exact membership and
//! volume, the exact fiber-overlap function `W_r`, Monte-Carlo certification
//! of the inclusion `T(g, r/2) c pi(B(g, r)) c T(g, 2r)`, and tube /
//! iterated / subgroup maximal functions on sampled fields.

use crate::error::{Error, Result};
use crate::field::{DomainTag, RField};
use crate::group::{Factor, GroupDims, PointN};
use crate::util::seeded_rng;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ScaleTriple(pub [f64; 3]);

impl ScaleTriple {
    pub fn new(r1: f64, r2: f64, r3: f64) -> Result<Self> {
        if !(r1 > 0.0 && r2 > 0.0 && r3 > 0.0) {
            return Err(Error::InvalidArg("scales must be positive".into()));
        }
        Ok(ScaleTriple([r1, r2, r3]))
    }

    pub fn scale(&self, a: f64) -> ScaleTriple {
        ScaleTriple([self.0[0] * a, self.0[1] * a, self.0[2] * a])
    }
}

/// `P_{a,b} = {(t1,t2) : -a < t1 - t2 < a, |t2| < b}` (strict inequalities).
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Parallelogram {
    pub a: f64,
    pub b: f64,
}

pub fn in_parallelogram(p: &Parallelogram, t: [f64; 2]) -> bool {
    let d = t[0] - t[1];
    -p.a < d && d < p.a && t[1].abs() < p.b
}

/// Central cross-section of a tube: `|t1 - t2| < a` together with a pin on
/// one of the two coordinates.  For `r1 > r2` the section is
/// `P_{r1^2, r2^2 v r3^2}` (pinning `t2`); for `r1 <= r2` the mirrored
/// section pins `t1`: `|t1 - t2| < r2^2`, `|t1| < r1^2 v r3^2`.  The mirror
/// is forced by the projected product ball, whose `t1 - t2` spread is
/// `r1^2 + r2^2`: pinning `t2` in both cases breaks the sandwich inclusion
/// whenever `r2` dominates, as a Monte-Carlo scan readily exhibits.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct CentralSection {
    pub a: f64,
    pub b: f64,
    /// Which coordinate carries the `|t| < b` pin (0 or 1).
    pub pinned: usize,
}

pub fn in_section(s: &CentralSection, t: [f64; 2]) -> bool {
    let d = t[0] - t[1];
    -s.a < d && d < s.a && t[s.pinned].abs() < s.b
}

pub fn tube_section(r: &ScaleTriple) -> CentralSection {
    let [r1, r2, r3] = r.0;
    if r1 > r2 {
        CentralSection { a: r1 * r1, b: (r2 * r2).max(r3 * r3), pinned: 1 }
    } else {
        CentralSection { a: r2 * r2, b: (r1 * r1).max(r3 * r3), pinned: 0 }
    }
}

/// The `r1 > r2` section as a plain parallelogram (pin on `t2`).
pub fn tube_parallelogram(r: &ScaleTriple) -> Parallelogram {
    let s = tube_section(r);
    Parallelogram { a: s.a, b: s.b }
}

#[derive(Clone, Debug)]
pub struct Tube {
    pub base: PointN,
    pub r: ScaleTriple,
}

/// Membership of the relative coordinates `base^{-1} g` in the model tube.
pub fn in_tube(dims: &GroupDims, tube: &Tube, g: &PointN) -> Result<bool> {
    let q = crate::group::mul_n(dims, &crate::group::inv_n(&tube.base), g)?;
    Ok(in_tube_at_origin(dims, &tube.r, &q))
}

pub fn in_tube_at_origin(dims: &GroupDims, r: &ScaleTriple, q: &PointN) -> bool {
    for mu in Factor::ALL {
        let rad = r.0[mu.index()];
        for z in &q.z[dims.block(mu)] {
            if z.re.abs() >= rad || z.im.abs() >= rad {
                return false;
            }
        }
    }
    in_section(&tube_section(r), q.t)
}

/// `|T(g,r)| = 2^{Q-2} prod r_mu^{2 n_mu} * a * b` with `(a, b)` the
/// parallelogram parameters of the case split.
pub fn tube_volume(dims: &GroupDims, r: &ScaleTriple) -> f64 {
    tube_volume_log2(dims, &[r.0[0].log2(), r.0[1].log2(), r.0[2].log2()]).exp2()
}

/// Log2 of the tube volume from log2 scales; safe far outside f64 range.
pub fn tube_volume_log2(dims: &GroupDims, rlog: &[f64; 3]) -> f64 {
    let q = dims.q() as f64;
    let mut acc = q - 2.0;
    for mu in Factor::ALL {
        acc += 2.0 * dims.n_of(mu) as f64 * rlog[mu.index()];
    }
    let (a, b) = if rlog[0] > rlog[1] {
        (2.0 * rlog[0], 2.0 * rlog[1].max(rlog[2]))
    } else {
        (2.0 * rlog[0].max(rlog[2]), 2.0 * rlog[1])
    };
    acc + a + b
}

/// Exact fiber overlap
/// `W_r(t) = |{u : |t1-u| < r1^2, |t2-u| < r2^2, |u| < r3^2}|`
/// (length of an intersection of three open intervals).
pub fn w_r(r: &ScaleTriple, t: [f64; 2]) -> f64 {
    let [r1, r2, r3] = r.0;
    let lo = (t[0] - r1 * r1).max(t[1] - r2 * r2).max(-r3 * r3);
    let hi = (t[0] + r1 * r1).min(t[1] + r2 * r2).min(r3 * r3);
    (hi - lo).max(0.0)
}

// ---------------------------------------------------------------------------
// Densities on the base group, in flat coordinates relative to the base
// point.  Both integrate to 1 against Haar measure.
// ---------------------------------------------------------------------------

fn cube_indicator(dims: &GroupDims, r: &ScaleTriple, q: &[f64]) -> bool {
    let mut off = 0;
    for mu in Factor::ALL {
        let rad = r.0[mu.index()];
        let n2 = 2 * dims.n_of(mu);
        for k in 0..n2 {
            if q[off + k].abs() >= rad {
                return false;
            }
        }
        off += n2;
    }
    true
}

fn cube_volume(dims: &GroupDims, r: &ScaleTriple) -> f64 {
    let mut v = 1.0;
    for mu in Factor::ALL {
        v *= (2.0 * r.0[mu.index()]).powi(2 * dims.n_of(mu) as i32);
    }
    v
}

/// Normalized tube indicator density.
pub fn tube_density(dims: &GroupDims, r: &ScaleTriple, q: &[f64]) -> f64 {
    let nz = 2 * dims.n();
    if !cube_indicator(dims, r, q) {
        return 0.0;
    }
    let p = tube_section(r);
    if !in_section(&p, [q[nz], q[nz + 1]]) {
        return 0.0;
    }
    1.0 / (cube_volume(dims, r) * 4.0 * p.a * p.b)
}

/// Density of the composite averaging kernel obtained by pushing forward the
/// product of normalized ball indicators: cube indicator times the fiber
/// overlap `W_r`, normalized.
pub fn chi_density(dims: &GroupDims, r: &ScaleTriple, q: &[f64]) -> f64 {
    let nz = 2 * dims.n();
    if !cube_indicator(dims, r, q) {
        return 0.0;
    }
    let [r1, r2, r3] = r.0;
    w_r(r, [q[nz], q[nz + 1]])
        / (cube_volume(dims, r) * 8.0 * r1 * r1 * r2 * r2 * r3 * r3)
}

/// Two-sided bound for the fiber overlap:
/// `(2/9) min(r2^2, r3^2) 1_{P/9} <= W_r <= 2 min(r2^2, r3^2) 1_P`
/// with `P = P_{r1^2 + r2^2, r2^2 + r3^2}`.  Returns the number of violations
/// on a dense scan.
pub fn w_claim_scan(r: &ScaleTriple, grid_per_axis: usize) -> usize {
    let [r1, r2, r3] = r.0;
    // Both bounds and the support set mirror with the short axis: for
    // r1 <= r2 swap the roles of (r1, t1) and (r2, t2).
    let (ra, rb, pinned) = if r1 > r2 { (r1, r2, 1) } else { (r2, r1, 0) };
    let m = (rb * rb).min(r3 * r3);
    let outer = CentralSection { a: ra * ra + rb * rb, b: rb * rb + r3 * r3, pinned };
    let inner = CentralSection { a: outer.a / 9.0, b: outer.b / 9.0, pinned };
    let ext_pin = outer.b;
    let ext_free = outer.a + outer.b;
    let mut violations = 0;
    for i in 0..grid_per_axis {
        for j in 0..grid_per_axis {
            let free = (2.0 * (i as f64 + 0.5) / grid_per_axis as f64 - 1.0) * 1.2 * ext_free;
            let pin = (2.0 * (j as f64 + 0.5) / grid_per_axis as f64 - 1.0) * 1.2 * ext_pin;
            let t = if pinned == 1 { [free, pin] } else { [pin, free] };
            let w = w_r(r, t);
            let lo = if in_section(&inner, t) { 2.0 * m / 9.0 } else { 0.0 };
            let hi = if in_section(&outer, t) { 2.0 * m } else { 0.0 };
            // A few ulps of slack: the upper bound is attained exactly.
            let slack = 1e-12 * (1.0 + m + free.abs() + pin.abs());
            if w < lo - slack || w > hi + slack {
                violations += 1;
            }
        }
    }
    violations
}

// ---------------------------------------------------------------------------
// Projected product-ball sandwich.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct SandwichReport {
    pub r: [f64; 3],
    pub samples: usize,
    pub inner_violations: usize,
    pub outer_violations: usize,
}

impl SandwichReport {
    pub fn pass(&self) -> bool {
        self.inner_violations == 0 && self.outer_violations == 0
    }
}

/// Certify `T(0, r/2) c pi(B(0, r)) c T(0, 2r)` by sampling.
///
/// Inner inclusion: for a sampled point of `T(0, r/2)` a preimage witness in
/// the product ball exists iff the three open intervals
/// `(t1 - r1^2, t1 + r1^2)`, `(t2 - r2^2, t2 + r2^2)`, `(-r3^2, r3^2)`
/// intersect; the witness is the midpoint of the intersection.
/// Outer inclusion: project sampled product-ball points and test membership.
pub fn tube_projection_sandwich(
    dims: &GroupDims,
    r: &ScaleTriple,
    samples: usize,
    seed: u64,
) -> SandwichReport {
    let [r1, r2, r3] = r.0;
    let halves: Vec<usize> = (0..samples).collect();
    let (inner_violations, outer_violations) = halves
        .par_chunks(8192)
        .map(|chunk| {
            let mut rng = seeded_rng(seed, chunk[0] as u64);
            let mut inner = 0usize;
            let mut outer = 0usize;
            let nz = 2 * dims.n();
            for _ in chunk {
                // Inner: sample T(0, r/2).
                let rh = r.scale(0.5);
                let p = tube_section(&rh);
                let pin = (2.0 * rng.gen::<f64>() - 1.0) * p.b;
                let diff = (2.0 * rng.gen::<f64>() - 1.0) * p.a;
                let (t1, t2) = if p.pinned == 1 { (pin + diff, pin) } else { (pin, pin - diff) };
                // z-part is irrelevant to the fiber witness: the cube halves
                // are nested.  Witness interval:
                let lo = (t1 - r1 * r1).max(t2 - r2 * r2).max(-r3 * r3);
                let hi = (t1 + r1 * r1).min(t2 + r2 * r2).min(r3 * r3);
                if hi <= lo {
                    inner += 1;
                } else {
                    let u = 0.5 * (lo + hi);
                    // Check the witness explicitly.
                    if (t1 - u).abs() >= r1 * r1
                        || (t2 - u).abs() >= r2 * r2
                        || u.abs() >= r3 * r3
                    {
                        inner += 1;
                    }
                }
                // Outer: sample the product ball, project, test T(0, 2r).
                let mut coords = vec![0.0; nz + 2];
                let mut off = 0;
                for mu in Factor::ALL {
                    let rad = r.0[mu.index()];
                    for k in 0..2 * dims.n_of(mu) {
                        coords[off + k] = (2.0 * rng.gen::<f64>() - 1.0) * rad;
                    }
                    off += 2 * dims.n_of(mu);
                }
                let u1 = (2.0 * rng.gen::<f64>() - 1.0) * r1 * r1;
                let u2 = (2.0 * rng.gen::<f64>() - 1.0) * r2 * r2;
                let u3 = (2.0 * rng.gen::<f64>() - 1.0) * r3 * r3;
                coords[nz] = u1 + u3;
                coords[nz + 1] = u2 + u3;
                let g = crate::group::pointn_from_coords(dims, &coords).expect("coords");
                if !in_tube_at_origin(dims, &r.scale(2.0), &g) {
                    outer += 1;
                }
            }
            (inner, outer)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    SandwichReport { r: r.0, samples, inner_violations, outer_violations }
}

// ---------------------------------------------------------------------------
// Averages and maximal functions on sampled fields.
//
// Fast path: the abelian mode (2D fields over the central plane) with
// prefix sums; general dims fall back to direct loops on small grids.
// ---------------------------------------------------------------------------

/// Smallest integer strictly greater than x.
fn int_above(x: f64) -> i64 {
    let f = x.floor();
    if f == x {
        f as i64 + 1
    } else {
        x.ceil() as i64
    }
}

/// Largest integer strictly smaller than x.
fn int_below(x: f64) -> i64 {
    let c = x.ceil();
    if c == x {
        c as i64 - 1
    } else {
        x.floor() as i64
    }
}

/// Plain 2D prefix-sum table with box queries (inclusive index ranges).
struct Prefix2D {
    n1: usize,
    n2: usize,
    p: Vec<f64>,
}

impl Prefix2D {
    fn new(n1: usize, n2: usize, value: impl Fn(usize, usize) -> f64) -> Self {
        let mut p = vec![0.0; (n1 + 1) * (n2 + 1)];
        for i in 0..n1 {
            for j in 0..n2 {
                p[(i + 1) * (n2 + 1) + (j + 1)] = value(i, j)
                    + p[i * (n2 + 1) + (j + 1)]
                    + p[(i + 1) * (n2 + 1) + j]
                    - p[i * (n2 + 1) + j];
            }
        }
        Prefix2D { n1, n2, p }
    }

    fn sum(&self, i0: i64, i1: i64, j0: i64, j1: i64) -> f64 {
        let i0 = i0.max(0) as usize;
        let j0 = j0.max(0) as usize;
        if i1 < i0 as i64 || j1 < j0 as i64 || i0 >= self.n1 || j0 >= self.n2 {
            return 0.0;
        }
        let i1 = (i1 as usize).min(self.n1 - 1);
        let j1 = (j1 as usize).min(self.n2 - 1);
        let at = |i: usize, j: usize| self.p[i * (self.n2 + 1) + j];
        at(i1 + 1, j1 + 1) - at(i0, j1 + 1) - at(i1 + 1, j0) + at(i0, j0)
    }
}

/// Abelian 2D field helper: both prefix over (i, j) and over the sheared
/// coordinates (d = i - j, j) for parallelogram queries.
struct AbelianTables {
    n1: usize,
    n2: usize,
    h1: f64,
    h2: f64,
    o1: f64,
    o2: f64,
    straight: Prefix2D,
    sheared: Prefix2D,
    sheared_count: Prefix2D,
}

impl AbelianTables {
    fn new(f: &RField, transform: impl Fn(f64) -> f64 + Copy) -> Result<Self> {
        if f.dims.n() != 0 || f.grid.ndim() != 2 {
            return Err(Error::InvalidArg("abelian tables need a 2D central-plane field".into()));
        }
        let n1 = f.grid.axes[0].count;
        let n2 = f.grid.axes[1].count;
        let val = |i: usize, j: usize| transform(f.values[i * n2 + j]);
        let straight = Prefix2D::new(n1, n2, val);
        // Sheared layout: row index d + (n2 - 1) with d = i - j.
        let nd = n1 + n2 - 1;
        let sheared = Prefix2D::new(nd, n2, |d, j| {
            let i = d as i64 + j as i64 - (n2 as i64 - 1);
            if i >= 0 && (i as usize) < n1 {
                val(i as usize, j)
            } else {
                0.0
            }
        });
        let sheared_count = Prefix2D::new(nd, n2, |d, j| {
            let i = d as i64 + j as i64 - (n2 as i64 - 1);
            if i >= 0 && (i as usize) < n1 {
                1.0
            } else {
                0.0
            }
        });
        Ok(AbelianTables {
            n1,
            n2,
            h1: f.grid.axes[0].spacing,
            h2: f.grid.axes[1].spacing,
            o1: f.grid.axes[0].origin,
            o2: f.grid.axes[1].origin,
            straight,
            sheared,
            sheared_count,
        })
    }

    /// Sum and lattice count over the section `|t1 - t2 - c_d| < a`,
    /// `|t_pin - c_pin| < b` (strict).  Requires equal spacings.  The
    /// sheared table is indexed by (d, j); pinning t1 means constraining
    /// i = d + j, which in (d, j) space is again a per-d j-interval, handled
    /// by intersecting per-row.
    fn section_sum(&self, c_d: f64, a: f64, c_pin: f64, b: f64, pinned: usize) -> (f64, f64) {
        debug_assert!((self.h1 - self.h2).abs() < 1e-14 * self.h1.abs());
        let h = self.h1;
        let od = self.o1 - self.o2;
        let off = self.n2 as i64 - 1;
        let dlo = int_above((c_d - a - od) / h) + off;
        let dhi = int_below((c_d + a - od) / h) + off;
        if pinned == 1 {
            let jlo = int_above((c_pin - b - self.o2) / h);
            let jhi = int_below((c_pin + b - self.o2) / h);
            (
                self.sheared.sum(dlo, dhi, jlo, jhi),
                self.sheared_count.sum(dlo, dhi, jlo, jhi),
            )
        } else {
            // |t1 - c_pin| < b pins i = d + j - off: j in i-range minus d.
            let ilo = int_above((c_pin - b - self.o1) / h);
            let ihi = int_below((c_pin + b - self.o1) / h);
            let mut s = 0.0;
            let mut cnt = 0.0;
            for d in dlo.max(0)..=dhi.min(self.n1 as i64 + self.n2 as i64 - 2) {
                let jlo = ilo - (d - off);
                let jhi = ihi - (d - off);
                s += self.sheared.sum(d, d, jlo, jhi);
                cnt += self.sheared_count.sum(d, d, jlo, jhi);
            }
            (s, cnt)
        }
    }

    /// Sum over the axis-aligned open box `|t1 - c1| < a1, |t2 - c2| < a2`.
    fn box_sum(&self, c1: f64, a1: f64, c2: f64, a2: f64) -> f64 {
        let ilo = int_above((c1 - a1 - self.o1) / self.h1);
        let ihi = int_below((c1 + a1 - self.o1) / self.h1);
        let jlo = int_above((c2 - a2 - self.o2) / self.h2);
        let jhi = int_below((c2 + a2 - self.o2) / self.h2);
        self.straight.sum(ilo, ihi, jlo, jhi)
    }
}

/// Translation-invariant lattice count of the model tube section at grid
/// spacing `h` (the number of lattice offsets strictly inside the section,
/// independent of the base point).
pub fn section_lattice_count(r: &ScaleTriple, h: f64) -> f64 {
    let s = tube_section(r);
    let nd = (int_below(s.a / h) - int_above(-s.a / h) + 1).max(0);
    let np = (int_below(s.b / h) - int_above(-s.b / h) + 1).max(0);
    (nd * np) as f64
}

/// Raw sums and lattice counts over `T(g, r)` at every grid point of an
/// abelian 2D field (no absolute value, no normalization); the building
/// block for area integrals over nontangential regions.
pub fn tube_box_sums(f: &RField, r: &ScaleTriple) -> Result<(Vec<f64>, Vec<f64>)> {
    let tab = AbelianTables::new(f, |v| v)?;
    let p = tube_section(r);
    let n2 = tab.n2;
    let pairs: Vec<(f64, f64)> = (0..f.grid.len())
        .into_par_iter()
        .map(|flat| {
            let i = flat / n2;
            let j = flat % n2;
            let g1 = tab.o1 + tab.h1 * i as f64;
            let g2 = tab.o2 + tab.h2 * j as f64;
            let pin_center = if p.pinned == 1 { g2 } else { g1 };
            tab.section_sum(g1 - g2, p.a, pin_center, p.b, p.pinned)
        })
        .collect();
    Ok(pairs.into_iter().unzip())
}

/// Tube averages `(1/#) sum_{h in T(g,r)} |f(h)|` over grid points, count
/// normalized, at every grid point of an abelian field.
pub fn tube_average_field(f: &RField, r: &ScaleTriple) -> Result<RField> {
    if f.dims.is_abelian() {
        let tab = AbelianTables::new(f, f64::abs)?;
        let p = tube_section(r);
        let n2 = tab.n2;
        let values: Vec<f64> = (0..f.grid.len())
            .into_par_iter()
            .map(|flat| {
                let i = flat / n2;
                let j = flat % n2;
                let g1 = tab.o1 + tab.h1 * i as f64;
                let g2 = tab.o2 + tab.h2 * j as f64;
                let pin_center = if p.pinned == 1 { g2 } else { g1 };
                let (s, cnt) = tab.section_sum(g1 - g2, p.a, pin_center, p.b, p.pinned);
                if cnt > 0.0 {
                    s / cnt
                } else {
                    0.0
                }
            })
            .collect();
        return Ok(RField { domain: f.domain, dims: f.dims, grid: f.grid.clone(), values });
    }
    tube_average_field_generic(f, r)
}

fn tube_average_field_generic(f: &RField, r: &ScaleTriple) -> Result<RField> {
    let dims = f.dims;
    let nd = f.grid.ndim();
    let pts = f.grid.len();
    if pts > 1 << 16 {
        return Err(Error::GridBudget(pts));
    }
    let mut coords: Vec<Vec<f64>> = Vec::with_capacity(pts);
    for flat in 0..pts {
        let mut c = vec![0.0; nd];
        f.grid.coords_of(flat, &mut c);
        coords.push(c);
    }
    let values: Vec<f64> = (0..pts)
        .into_par_iter()
        .map(|gf| {
            let g = crate::group::pointn_from_coords(&dims, &coords[gf]).expect("point");
            let ginv = crate::group::inv_n(&g);
            let mut acc = 0.0;
            let mut cnt = 0usize;
            for hf in 0..pts {
                let h = crate::group::pointn_from_coords(&dims, &coords[hf]).expect("point");
                let q = crate::group::mul_n(&dims, &ginv, &h).expect("mul");
                if in_tube_at_origin(&dims, r, &q) {
                    acc += f.values[hf].abs();
                    cnt += 1;
                }
            }
            if cnt > 0 {
                acc / cnt as f64
            } else {
                0.0
            }
        })
        .collect();
    Ok(RField { domain: f.domain, dims, grid: f.grid.clone(), values })
}

/// Tube maximal function over a finite scale grid.
pub fn maximal_tube(f: &RField, scales: &[ScaleTriple]) -> Result<RField> {
    if scales.is_empty() {
        return Err(Error::InvalidArg("empty scale grid".into()));
    }
    let mut out = RField::zeros(f.domain, f.dims, f.grid.clone());
    for r in scales {
        let avg = tube_average_field(f, r)?;
        for (o, v) in out.values.iter_mut().zip(avg.values) {
            *o = o.max(v);
        }
    }
    Ok(out)
}

/// Geometric scale grid `2^{j/steps_inv}`-spaced per axis over a window, as
/// triples.
pub fn geometric_scales(jmin: f64, jmax: f64, per_octave: usize) -> Vec<ScaleTriple> {
    let mut axis = Vec::new();
    let steps = ((jmax - jmin) * per_octave as f64).round() as usize;
    for k in 0..=steps {
        axis.push(2.0f64.powf(jmin + k as f64 / per_octave as f64));
    }
    let mut out = Vec::new();
    for &a in &axis {
        for &b in &axis {
            for &c in &axis {
                out.push(ScaleTriple([a, b, c]));
            }
        }
    }
    out
}

/// Average against the composite density (analytic normalization):
/// `(|f| * chi_r)(g)`.  Abelian fast path decomposes the fiber overlap into
/// an exact piecewise-constant integral of axis-aligned box sums.
pub fn chi_average_field(f: &RField, r: &ScaleTriple) -> Result<RField> {
    if f.dims.is_abelian() {
        let tab = AbelianTables::new(f, f64::abs)?;
        let [r1, r2, r3] = r.0;
        let (s1, s2, s3) = (r1 * r1, r2 * r2, r3 * r3);
        let cell = f.grid.cell_volume();
        let norm = 8.0 * s1 * s2 * s3;
        let n2 = tab.n2;
        let h = tab.h1;
        let values: Vec<f64> = (0..f.grid.len())
            .into_par_iter()
            .map(|flat| {
                let i = flat / n2;
                let j = flat % n2;
                let g1 = tab.o1 + h * i as f64;
                let g2 = tab.o2 + tab.h2 * j as f64;
                // int_{|u| < s3} [box sum at center (g1 - u, g2 - u)] du,
                // integrated exactly over the u-breakpoints where a box edge
                // crosses the lattice.
                let mut breaks: Vec<f64> = vec![-s3, s3];
                for (center, rad, o, n) in
                    [(g1, s1, tab.o1, tab.n1), (g2, s2, tab.o2, tab.n2)]
                {
                    // Edge positions center - u +- rad = lattice  =>  u = ...
                    for edge in [-rad, rad] {
                        let lo = ((center + edge - (o + (n - 1) as f64 * h)) / h).ceil() as i64;
                        let hi = ((center + edge - o) / h).floor() as i64;
                        for k in lo..=hi {
                            let u = center + edge - (o + k as f64 * h) * 1.0;
                            // u solves center - u + edge = lattice_k.
                            let _ = u;
                            breaks.push(center + edge - (o + k as f64 * h));
                        }
                    }
                }
                breaks.retain(|&u| (-s3..=s3).contains(&u));
                breaks.sort_by(f64::total_cmp);
                breaks.dedup();
                let mut acc = 0.0;
                for w in breaks.windows(2) {
                    let um = 0.5 * (w[0] + w[1]);
                    let s = tab.box_sum(g1 - um, s1, g2 - um, s2);
                    acc += s * (w[1] - w[0]);
                }
                acc * cell / norm
            })
            .collect();
        return Ok(RField { domain: f.domain, dims: f.dims, grid: f.grid.clone(), values });
    }
    density_average_generic(f, r, chi_density)
}

/// Average against the normalized tube indicator (analytic normalization).
pub fn tube_density_average_field(f: &RField, r: &ScaleTriple) -> Result<RField> {
    if f.dims.is_abelian() {
        let tab = AbelianTables::new(f, f64::abs)?;
        let p = tube_section(r);
        let cell = f.grid.cell_volume();
        let vol = 4.0 * p.a * p.b;
        let n2 = tab.n2;
        let values: Vec<f64> = (0..f.grid.len())
            .into_par_iter()
            .map(|flat| {
                let i = flat / n2;
                let j = flat % n2;
                let g1 = tab.o1 + tab.h1 * i as f64;
                let g2 = tab.o2 + tab.h2 * j as f64;
                let pin_center = if p.pinned == 1 { g2 } else { g1 };
                let (s, _) = tab.section_sum(g1 - g2, p.a, pin_center, p.b, p.pinned);
                s * cell / vol
            })
            .collect();
        return Ok(RField { domain: f.domain, dims: f.dims, grid: f.grid.clone(), values });
    }
    density_average_generic(f, r, tube_density)
}

/// Lattice-sampled average against the composite density: every route that
/// participates in a pointwise comparison shares these quadrature nodes, so
/// pointwise density domination transfers to the averages exactly.
pub fn chi_average_lattice(f: &RField, r: &ScaleTriple) -> Result<RField> {
    density_average_generic(f, r, chi_density)
}

/// Lattice-sampled average against the normalized tube indicator.
pub fn tube_density_average_lattice(f: &RField, r: &ScaleTriple) -> Result<RField> {
    density_average_generic(f, r, tube_density)
}

fn density_average_generic(
    f: &RField,
    r: &ScaleTriple,
    density: fn(&GroupDims, &ScaleTriple, &[f64]) -> f64,
) -> Result<RField> {
    let dims = f.dims;
    let nd = f.grid.ndim();
    let pts = f.grid.len();
    if pts > 1 << 16 {
        return Err(Error::GridBudget(pts));
    }
    let cell = f.grid.cell_volume();
    let values: Vec<f64> = (0..pts)
        .into_par_iter()
        .map(|gf| {
            let mut gc = vec![0.0; nd];
            f.grid.coords_of(gf, &mut gc);
            let g = crate::group::pointn_from_coords(&dims, &gc).expect("point");
            let ginv = crate::group::inv_n(&g);
            let mut hc = vec![0.0; nd];
            let mut acc = 0.0;
            for hf in 0..pts {
                if f.values[hf] == 0.0 {
                    continue;
                }
                f.grid.coords_of(hf, &mut hc);
                let h = crate::group::pointn_from_coords(&dims, &hc).expect("point");
                let q = crate::group::mul_n(&dims, &ginv, &h).expect("mul");
                let qc = crate::group::pointn_coords(&dims, &q);
                acc += f.values[hf].abs() * density(&dims, r, &qc) * cell;
            }
            acc
        })
        .collect();
    Ok(RField { domain: f.domain, dims, grid: f.grid.clone(), values })
}

/// One averaging stage along the subgroup `H_mu` with radius `rad`: the mean
/// of `|f|(g tau_mu(h))` over the ball `|h| < rad` realized on the field's
/// own lattice.  In the abelian mode this is an exact interval average along
/// the `t_mu` axis (the diagonal for mu = 3).
pub fn subgroup_average(f: &RField, mu: Factor, rad: f64) -> Result<RField> {
    if !f.dims.is_abelian() {
        return Err(Error::InvalidArg(
            "subgroup averages are implemented for the abelian mode".into(),
        ));
    }
    let tab = AbelianTables::new(f, f64::abs)?;
    let s = rad * rad;
    let n2 = tab.n2;
    let values: Vec<f64> = (0..f.grid.len())
        .into_par_iter()
        .map(|flat| {
            let i = flat / n2;
            let j = flat % n2;
            let g1 = tab.o1 + tab.h1 * i as f64;
            let g2 = tab.o2 + tab.h2 * j as f64;
            let (sum, cnt) = match mu {
                Factor::H1 => {
                    let ilo = int_above((g1 - s - tab.o1) / tab.h1).max(0);
                    let ihi = int_below((g1 + s - tab.o1) / tab.h1).min(tab.n1 as i64 - 1);
                    (
                        tab.straight.sum(ilo, ihi, j as i64, j as i64),
                        (ihi - ilo + 1).max(0) as f64,
                    )
                }
                Factor::H2 => {
                    let jlo = int_above((g2 - s - tab.o2) / tab.h2).max(0);
                    let jhi = int_below((g2 + s - tab.o2) / tab.h2).min(tab.n2 as i64 - 1);
                    (
                        tab.straight.sum(i as i64, i as i64, jlo, jhi),
                        (jhi - jlo + 1).max(0) as f64,
                    )
                }
                Factor::H3 => {
                    // Diagonal direction: g . tau_3(u) = (t1 + u, t2 + u).
                    let d = (i as i64) - (j as i64) + (tab.n2 as i64 - 1);
                    let jlo = int_above((g2 - s - tab.o2) / tab.h2);
                    let jhi = int_below((g2 + s - tab.o2) / tab.h2);
                    (
                        tab.sheared.sum(d, d, jlo, jhi),
                        tab.sheared_count.sum(d, d, jlo, jhi),
                    )
                }
            };
            if cnt > 0.0 {
                sum / cnt
            } else {
                0.0
            }
        })
        .collect();
    Ok(RField { domain: f.domain, dims: f.dims, grid: f.grid.clone(), values })
}

/// Maximal function along the subgroup: sup of stage averages over radii.
pub fn maximal_subgroup(f: &RField, mu: Factor, radii: &[f64]) -> Result<RField> {
    if radii.is_empty() {
        return Err(Error::InvalidArg("empty radius list".into()));
    }
    let mut out = RField::zeros(f.domain, f.dims, f.grid.clone());
    for &rad in radii {
        let avg = subgroup_average(f, mu, rad)?;
        for (o, v) in out.values.iter_mut().zip(avg.values) {
            *o = o.max(v);
        }
    }
    Ok(out)
}

/// The composite `((|f| *_1 chi) *_2 chi) *_3 chi` realized as three stage
/// averages on the shared lattice.
pub fn iterated_chi(f: &RField, r: &ScaleTriple) -> Result<RField> {
    let a = subgroup_average(f, Factor::H1, r.0[0])?;
    let b = subgroup_average(&a, Factor::H2, r.0[1])?;
    subgroup_average(&b, Factor::H3, r.0[2])
}

/// Iterated maximal function `sup_r` of the stage composite over a scale grid.
pub fn maximal_iterated(f: &RField, scales: &[ScaleTriple]) -> Result<RField> {
    if scales.is_empty() {
        return Err(Error::InvalidArg("empty scale grid".into()));
    }
    let mut out = RField::zeros(f.domain, f.dims, f.grid.clone());
    for r in scales {
        let v = iterated_chi(f, r)?;
        for (o, x) in out.values.iter_mut().zip(v.values) {
            *o = o.max(x);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{AxisSpec, Field, GridSpec};
    use crate::group::identity_n;
    use num_complex::Complex64 as C64;

    #[test]
    fn parallelogram_membership() {
        let p = Parallelogram { a: 1.0, b: 1.0 };
        assert!(in_parallelogram(&p, [0.0, 0.0]));
        assert!(!in_parallelogram(&p, [1.0, 0.0]));
        assert!(in_parallelogram(&p, [-0.5, -0.9]));
        assert!(!in_parallelogram(&p, [0.5, -0.9]));
    }

    #[test]
    fn tube_membership_cases() {
        let dims = GroupDims::new(1, 1, 1);
        let r = ScaleTriple([2.0, 1.0, 1.0]);
        let t = Tube { base: identity_n(&dims), r };
        let mut g = identity_n(&dims);
        assert!(in_tube(&dims, &t, &g).unwrap());
        g.t = [3.9, 0.0];
        assert!(in_tube(&dims, &t, &g).unwrap());
        g.t = [4.1, 0.0];
        assert!(!in_tube(&dims, &t, &g).unwrap());
    }

    #[test]
    fn tube_membership_translation_invariance() {
        let dims = GroupDims::new(1, 0, 1);
        let r = ScaleTriple([1.0, 0.7, 1.3]);
        let base = PointN {
            z: vec![C64::new(0.3, -0.4), C64::new(0.9, 0.1)],
            t: [0.5, -0.2],
        };
        let t = Tube { base: base.clone(), r };
        let h = PointN {
            z: vec![C64::new(0.2, 0.1), C64::new(-0.3, 0.6)],
            t: [0.4, 0.8],
        };
        let gh = crate::group::mul_n(&dims, &base, &h).unwrap();
        let direct = in_tube(&dims, &t, &gh).unwrap();
        let origin = in_tube_at_origin(&dims, &r, &h);
        assert_eq!(direct, origin);
    }

    #[test]
    fn tube_volume_examples() {
        let dims = GroupDims::new(1, 1, 1);
        assert!((tube_volume(&dims, &ScaleTriple([1.0; 3])) - 256.0).abs() < 1e-10);
        assert!((tube_volume(&dims, &ScaleTriple([2.0, 1.0, 1.0])) - 4096.0).abs() < 1e-9);
    }

    #[test]
    fn tube_volume_monte_carlo() {
        let dims = GroupDims::new(1, 1, 1);
        let r = ScaleTriple([2.0, 1.0, 1.5]);
        let vol = tube_volume(&dims, &r);
        // Sample the bounding cuboid and count membership.
        let p = tube_parallelogram(&r);
        let mut rng = seeded_rng(7, 0);
        let bounds_t1 = p.a + p.b;
        let mut hits = 0usize;
        let n = 200_000;
        let mut cube_vol = 1.0;
        for mu in Factor::ALL {
            cube_vol *= (2.0 * r.0[mu.index()]).powi(2 * dims.n_of(mu) as i32);
        }
        let box_vol = cube_vol * (2.0 * bounds_t1) * (2.0 * p.b);
        for _ in 0..n {
            let mut coords = vec![0.0; 2 * dims.n() + 2];
            let mut off = 0;
            for mu in Factor::ALL {
                for k in 0..2 * dims.n_of(mu) {
                    coords[off + k] = (2.0 * rng.gen::<f64>() - 1.0) * r.0[mu.index()];
                }
                off += 2 * dims.n_of(mu);
            }
            coords[off] = (2.0 * rng.gen::<f64>() - 1.0) * bounds_t1;
            coords[off + 1] = (2.0 * rng.gen::<f64>() - 1.0) * p.b;
            let g = crate::group::pointn_from_coords(&dims, &coords).unwrap();
            if in_tube_at_origin(&dims, &r, &g) {
                hits += 1;
            }
        }
        let mc = box_vol * hits as f64 / n as f64;
        assert!(
            (mc - vol).abs() < 0.01 * vol,
            "MC volume {mc} vs formula {vol}"
        );
    }

    #[test]
    fn w_r_examples() {
        let r = ScaleTriple([1.0; 3]);
        assert_eq!(w_r(&r, [0.0, 0.0]), 2.0);
        assert_eq!(w_r(&r, [3.0, 0.0]), 0.0);
        // Upper bound: W_r <= 2 min(r2^2, r3^2).
        let r2 = ScaleTriple([1.5, 0.8, 2.0]);
        for t1 in [-2.0, 0.0, 0.3, 1.0] {
            for t2 in [-1.0, 0.0, 0.7] {
                assert!(w_r(&r2, [t1, t2]) <= 2.0 * (0.8f64 * 0.8).min(4.0) + 1e-15);
            }
        }
    }

    #[test]
    fn w_claim_holds_on_scan() {
        for r in [
            ScaleTriple([1.0, 1.0, 1.0]),
            ScaleTriple([2.0, 1.0, 0.25]),
            ScaleTriple([0.5, 1.5, 8.0]),
            ScaleTriple([4.0, 0.3, 1.0]),
        ] {
            assert_eq!(w_claim_scan(&r, 160), 0, "violations at {:?}", r.0);
        }
    }

    #[test]
    fn projection_sandwich_zero_violations() {
        let dims = GroupDims::new(1, 1, 1);
        for r in [
            ScaleTriple([1.0, 1.0, 1.0]),
            ScaleTriple([1.0, 0.5, 8.0]),
            ScaleTriple([2.0, 1.0, 0.2]),
        ] {
            let rep = tube_projection_sandwich(&dims, &r, 20_000, 11);
            assert!(rep.pass(), "violations: {rep:?}");
        }
        // Degenerate abelian dims reduce to interval arithmetic.
        let rep = tube_projection_sandwich(&GroupDims::abelian(), &ScaleTriple([1.0, 2.0, 0.5]), 20_000, 5);
        assert!(rep.pass(), "abelian violations: {rep:?}");
    }

    fn gaussian_2d(extent: f64, count: usize, s: f64) -> RField {
        let grid = GridSpec::new(vec![
            AxisSpec::symmetric(extent, count),
            AxisSpec::symmetric(extent, count),
        ])
        .unwrap();
        Field::from_fn(DomainTag::BaseGroup, GroupDims::abelian(), grid, move |c| {
            (-(c[0] * c[0] + c[1] * c[1]) / (2.0 * s * s)).exp()
        })
    }

    #[test]
    fn constant_field_has_unit_averages() {
        let grid = GridSpec::new(vec![
            AxisSpec::symmetric(4.0, 33),
            AxisSpec::symmetric(4.0, 33),
        ])
        .unwrap();
        let f = Field::from_fn(DomainTag::BaseGroup, GroupDims::abelian(), grid, |_| 1.0);
        let r = ScaleTriple([1.0, 0.8, 1.2]);
        let avg = tube_average_field(&f, &r).unwrap();
        for &v in &avg.values {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let m = maximal_tube(&f, &[r]).unwrap();
        for &v in &m.values {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let it = iterated_chi(&f, &r).unwrap();
        for &v in &it.values {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn maximal_dominates_function_at_small_scales() {
        let f = gaussian_2d(4.0, 49, 1.0);
        // Include a scale small enough that the tube holds one lattice point.
        let scales = vec![ScaleTriple([0.1, 0.1, 0.1]), ScaleTriple([1.0, 1.0, 1.0])];
        let m = maximal_tube(&f, &scales).unwrap();
        for (mv, fv) in m.values.iter().zip(&f.values) {
            assert!(mv + 1e-12 >= fv.abs());
        }
    }

    #[test]
    fn abelian_fast_path_matches_generic() {
        let f = gaussian_2d(3.0, 21, 0.8);
        let r = ScaleTriple([0.9, 1.1, 0.7]);
        let fast = tube_average_field(&f, &r).unwrap();
        let slow = tube_average_field_generic(&f, &r).unwrap();
        assert!(fast.linf_distance(&slow).unwrap() < 1e-12);
        let fast_d = tube_density_average_field(&f, &r).unwrap();
        let slow_d = density_average_generic(&f, &r, tube_density).unwrap();
        assert!(fast_d.linf_distance(&slow_d).unwrap() < 1e-12);
        let fast_chi = chi_average_field(&f, &r).unwrap();
        let slow_chi = chi_average_lattice(&f, &r).unwrap();
        let err = fast_chi.linf_distance(&slow_chi).unwrap();
        // The fast path integrates the fiber overlap exactly in u; the
        // lattice path samples it at grid points, so they agree to O(h).
        assert!(err < 6e-2 * fast_chi.sup_magnitude(), "chi paths differ by {err}");
    }

    #[test]
    fn iterated_composite_dominated_by_nested_maximal() {
        let f = gaussian_2d(4.0, 41, 1.2);
        let r = ScaleTriple([0.8, 1.3, 0.6]);
        let composite = iterated_chi(&f, &r).unwrap();
        let radii1 = vec![0.4, 0.8, 1.6];
        let radii2 = vec![0.65, 1.3, 2.6];
        let radii3 = vec![0.3, 0.6, 1.2];
        let m1 = maximal_subgroup(&f, Factor::H1, &radii1).unwrap();
        let m21 = maximal_subgroup(&m1, Factor::H2, &radii2).unwrap();
        let m321 = maximal_subgroup(&m21, Factor::H3, &radii3).unwrap();
        for (c, m) in composite.values.iter().zip(&m321.values) {
            assert!(c <= &(m + 1e-12), "composite {c} above nested maximal {m}");
        }
    }

    #[test]
    fn subgroup_average_is_identity_for_tiny_radius() {
        let f = gaussian_2d(3.0, 31, 0.9);
        for mu in Factor::ALL {
            let avg = subgroup_average(&f, mu, 0.05).unwrap();
            assert!(avg.linf_distance(&f).unwrap() < 1e-12);
        }
    }
}
