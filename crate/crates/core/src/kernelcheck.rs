//! Machine checks for tri-parameter convolution-kernel conditions on the
//! lifting group: size estimates with weighted shell sups, cancellation
//! against normalized bump functions across dilation sweeps, mollifier
//! regularization, application of the projected singular kernel, and the
//! mixed-scale decay bounds.
//!
//! All audited kernels here are products of factor kernels, so every
//! multi-factor integral splits into per-factor pieces: the size conditions
//! become weighted sups per factor and the cancellation pairings become
//! products of one-factor bump integrals.  "Uniformly bounded" is
//! operationalized as a max/min ratio cap across the tested dyadic sweep of
//! the regularization parameter; the cap is configurable and always
//! reported, never silently absorbed.

use crate::error::{Error, Result};
use crate::field::{AxisSpec, DomainTag, Field, GridSpec, RField};
use crate::group::{Factor, GroupDims, HPoint, MultiIndex};
use crate::szego;
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::Serialize;

// ---------------------------------------------------------------------------
// Normalized bump functions.
// ---------------------------------------------------------------------------

/// Template family for normalized bump functions: smooth, supported in the
/// unit gauge ball (a cuboid), bounded with bounded gradient.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct NbfSpec {
    /// Cap on the sup of the bump and of its gradient.
    pub bound: f64,
}

impl Default for NbfSpec {
    fn default() -> Self {
        NbfSpec { bound: 8.0 }
    }
}

/// `(1 - s^2)^3` on (-1, 1), the canonical bump coordinate profile.
pub fn bump1(s: f64) -> f64 {
    let v = 1.0 - s * s;
    if v > 0.0 {
        v * v * v
    } else {
        0.0
    }
}

/// Odd, mean-zero coordinate profile `s (1 - s^2)^3`.
pub fn bump1_odd(s: f64) -> f64 {
    s * bump1(s)
}

/// Product bump on a factor in flat coords, supported in the unit gauge
/// cuboid; `odd_t` switches the central profile to the mean-zero variant.
pub fn factor_bump(n_mu: usize, coords: &[f64], odd_t: bool) -> f64 {
    let mut v = 1.0;
    for &x in &coords[..2 * n_mu] {
        v *= bump1(x);
        if v == 0.0 {
            return 0.0;
        }
    }
    let t = coords[2 * n_mu];
    v * if odd_t { bump1_odd(t) } else { bump1(t) }
}

impl NbfSpec {
    /// Verify the template obeys the declared bounds on a scan.
    pub fn validate(&self, n_mu: usize) -> Result<()> {
        let d = 2 * n_mu + 1;
        let mut worst_v: f64 = 0.0;
        let mut worst_g: f64 = 0.0;
        let steps = 9usize;
        let mut idx = vec![0usize; d];
        loop {
            let c: Vec<f64> = idx.iter().map(|&i| -0.95 + 1.9 * i as f64 / (steps - 1) as f64).collect();
            worst_v = worst_v.max(factor_bump(n_mu, &c, false).abs());
            for k in 0..d {
                let mut cp = c.clone();
                let mut cm = c.clone();
                cp[k] += 1e-5;
                cm[k] -= 1e-5;
                let g = (factor_bump(n_mu, &cp, false) - factor_bump(n_mu, &cm, false)) / 2e-5;
                worst_g = worst_g.max(g.abs());
            }
            let mut k = 0;
            loop {
                if k == d {
                    if worst_v <= self.bound && worst_g <= self.bound {
                        return Ok(());
                    }
                    return Err(Error::InvalidArg(format!(
                        "bump exceeds declared bound: sup={worst_v:.3}, grad={worst_g:.3}"
                    )));
                }
                idx[k] += 1;
                if idx[k] < steps {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Kernel handles (products of factor kernels).
// ---------------------------------------------------------------------------

/// One factor of a tri-parameter product kernel, evaluated pointwise at a
/// strictly positive regularization; the singular locus is the origin.
#[derive(Clone, Copy, Debug, Serialize)]
pub enum FactorKernel {
    /// Cauchy-Szego factor kernel with intrinsic regularization.
    Szego { eps: f64 },
    /// `(eps + |g|)^(exponent)` in the gauge norm; no cancellation.
    GaugePower { exponent: f64, eps: f64 },
    /// Smooth compactly supported kernel with central cancellation:
    /// `t * prod bump1(x_i) * bump1(t)`, decaying like a bump.
    SmoothOdd,
    Zero,
}

/// A tri-parameter convolution kernel on the lifting group given as a
/// product of factor kernels.  Evaluation away from the singular loci only.
#[derive(Clone, Debug, Serialize)]
pub struct KernelHandle {
    pub dims: GroupDims,
    pub factors: [FactorKernel; 3],
}

impl KernelHandle {
    pub fn szego_product(dims: GroupDims, eps: [f64; 3]) -> Self {
        KernelHandle {
            dims,
            factors: [
                FactorKernel::Szego { eps: eps[0] },
                FactorKernel::Szego { eps: eps[1] },
                FactorKernel::Szego { eps: eps[2] },
            ],
        }
    }

    pub fn zero(dims: GroupDims) -> Self {
        KernelHandle { dims, factors: [FactorKernel::Zero; 3] }
    }

    /// Re-regularize every factor at a new epsilon (keeps the family).
    pub fn with_eps(&self, eps: f64) -> Self {
        let mut out = self.clone();
        for f in &mut out.factors {
            match f {
                FactorKernel::Szego { eps: e } => *e = eps,
                FactorKernel::GaugePower { eps: e, .. } => *e = eps,
                _ => {}
            }
        }
        out
    }

    /// Evaluate one factor at flat factor coordinates `[x.., t]`.
    pub fn eval_factor(&self, mu: Factor, coords: &[f64]) -> C64 {
        let n = self.dims.n_of(mu);
        match self.factors[mu.index()] {
            FactorKernel::Szego { eps } => {
                szego::szego_factor_coords(n, eps, coords).expect("szego factor eval")
            }
            FactorKernel::GaugePower { exponent, eps } => {
                let mut gauge = coords[2 * n].abs().sqrt();
                for &x in &coords[..2 * n] {
                    gauge = gauge.max(x.abs());
                }
                C64::new((eps + gauge).powf(exponent), 0.0)
            }
            FactorKernel::SmoothOdd => {
                C64::new(factor_bump(n, coords, true), 0.0)
            }
            FactorKernel::Zero => C64::new(0.0, 0.0),
        }
    }
}

// ---------------------------------------------------------------------------
// Poisson-bounded norm.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct PoissonNormReport {
    pub order: u32,
    /// None encodes divergence (the weighted sup keeps growing at the grid
    /// boundary).
    pub norm: Option<f64>,
}

/// Grid estimate of `sup (1 + |g|)^{|I| + Q_mu + 1} |Y^I phi|` over
/// `|I| <= order`.  The weight uses the gauge norm.  Divergence is flagged
/// when the sup lives on the outermost shell and dominates the interior.
pub fn poisson_bounded_norm(phi: &RField, order: u32) -> Result<PoissonNormReport> {
    let mu = match phi.domain {
        DomainTag::Heisenberg(m) => m,
        _ => return Err(Error::InvalidArg("poisson norm expects a factor field".into())),
    };
    let dims = phi.dims;
    let n = dims.n_of(mu);
    let q = dims.q_of(mu);
    let step = phi.grid.axes[0].spacing.max(phi.grid.axes[2 * n].spacing.sqrt());
    if order > 0 && phi.grid.axes.iter().any(|a| a.count < 8) {
        return Err(Error::GridTooCoarse(
            "need at least 8 samples per axis for derivative orders > 0".into(),
        ));
    }
    let multis = multi_indices(2 * n, order);
    let nd = phi.grid.ndim();
    let mut sup_total: f64 = 0.0;
    let mut sup_inner: f64 = 0.0;
    let mut argmax_boundary = false;
    let mut c = vec![0.0; nd];
    for flat in 0..phi.grid.len() {
        phi.grid.coords_of(flat, &mut c);
        let g = crate::group::hpoint_from_coords(mu, &c)?;
        let gauge = crate::group::norm_inf(&g);
        // Skip the outermost cell ring for derivative stencils.
        let on_boundary = c
            .iter()
            .zip(&phi.grid.axes)
            .any(|(&x, ax)| x < ax.origin + ax.spacing || x > ax.last() - ax.spacing);
        for idx in &multis {
            if on_boundary && idx.order() > 0 {
                continue;
            }
            let val = apply_y_field(phi, idx, &g, step * 0.5)?;
            let weighted = (1.0 + gauge).powi((idx.order() as i64 + q + 1) as i32) * val.abs();
            if weighted > sup_total {
                sup_total = weighted;
                argmax_boundary = on_boundary
                    || c
                        .iter()
                        .zip(&phi.grid.axes)
                        .any(|(&x, ax)| {
                            let span = ax.last() - ax.origin;
                            x < ax.origin + 0.1 * span || x > ax.last() - 0.1 * span
                        });
            }
            let interior = c.iter().zip(&phi.grid.axes).all(|(&x, ax)| {
                let span = ax.last() - ax.origin;
                x >= ax.origin + 0.375 * span && x <= ax.last() - 0.375 * span
            });
            if interior {
                sup_inner = sup_inner.max(weighted);
            }
        }
    }
    let diverges = argmax_boundary && sup_total > 2.0 * sup_inner;
    Ok(PoissonNormReport { order, norm: if diverges { None } else { Some(sup_total) } })
}

fn multi_indices(len: usize, max_order: u32) -> Vec<MultiIndex> {
    let mut out = vec![MultiIndex::new(Factor::H1, vec![0; len.max(1)])];
    if len == 0 {
        return out;
    }
    // Orders 1..=max_order, compositions over `len` slots (small orders only).
    let mut frontier: Vec<Vec<u32>> = vec![vec![0; len]];
    for _ in 0..max_order {
        let mut next = Vec::new();
        for base in &frontier {
            for k in 0..len {
                let mut e = base.clone();
                e[k] += 1;
                if !next.contains(&e) {
                    next.push(e.clone());
                    out.push(MultiIndex::new(Factor::H1, e));
                }
            }
        }
        frontier = next;
    }
    out
}

/// Finite-difference composed left-invariant derivative of a sampled factor
/// field (reads interpolate, flows act by right translation).
fn apply_y_field(phi: &RField, idx: &MultiIndex, g: &HPoint, step: f64) -> Result<f64> {
    let dims = phi.dims;
    let n = g.z.len();
    if n == 0 {
        // Degenerate factor: derivative in t at quadratic step scaling.
        let ord = idx.order();
        return d_t_field(phi, ord, g.t, step * step);
    }
    match idx.exponents.iter().position(|&e| e > 0) {
        None => Ok(phi.interp(&crate::group::hpoint_coords(g))),
        Some(j) => {
            let mut rest = idx.clone();
            rest.exponents[j] -= 1;
            let e = crate::group::y_flow(&dims, g.mu, j, step);
            let em = crate::group::y_flow(&dims, g.mu, j, -step);
            let fp = apply_y_field(phi, &rest, &crate::group::mul_h(g, &e)?, step)?;
            let fm = apply_y_field(phi, &rest, &crate::group::mul_h(g, &em)?, step)?;
            Ok((fp - fm) / (2.0 * step))
        }
    }
}

fn d_t_field(phi: &RField, order: u32, t: f64, step: f64) -> Result<f64> {
    if order == 0 {
        return Ok(phi.interp(&[t]));
    }
    let fp = d_t_field(phi, order - 1, t + step, step)?;
    let fm = d_t_field(phi, order - 1, t - step, step)?;
    Ok((fp - fm) / (2.0 * step))
}

// ---------------------------------------------------------------------------
// Size estimates.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct SizeFactorReport {
    pub factor: usize,
    pub order: u32,
    /// Weighted sups per dyadic shell.
    pub shell_sups: Vec<f64>,
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SizeReport {
    pub per_factor: Vec<SizeFactorReport>,
    pub ratio_bound: f64,
    pub pass: bool,
}

/// Estimate `sup |g|^{Q_mu + |I|} |Y^I K_mu|` per dyadic shell and factor;
/// passes when the shell sups are uniform up to the ratio bound.
pub fn size_estimate_check(
    kernel: &KernelHandle,
    max_order: u32,
    shells: std::ops::Range<i32>,
    samples_per_shell: usize,
    ratio_bound: f64,
) -> Result<SizeReport> {
    let mut per_factor = Vec::new();
    let mut pass = true;
    for mu in Factor::ALL {
        let n = kernel.dims.n_of(mu);
        for ord in 0..=max_order {
            let mut shell_sups = Vec::new();
            for k in shells.clone() {
                let radius = 2.0f64.powi(k);
                let sup = shell_sup(kernel, mu, ord, radius, samples_per_shell)?;
                shell_sups.push(sup);
            }
            let max = shell_sups.iter().cloned().fold(0.0, f64::max);
            let min = shell_sups.iter().cloned().fold(f64::INFINITY, f64::min);
            let ratio = if max == 0.0 { 1.0 } else { max / min };
            if ratio > ratio_bound {
                pass = false;
            }
            per_factor.push(SizeFactorReport {
                factor: mu.index() + 1,
                order: ord,
                shell_sups,
                ratio,
            });
            let _ = n;
        }
    }
    Ok(SizeReport { per_factor, ratio_bound, pass })
}

/// Weighted sup over quasi-random points of the gauge sphere of the given
/// radius, over all multi-indices of exactly the given order.
fn shell_sup(
    kernel: &KernelHandle,
    mu: Factor,
    order: u32,
    radius: f64,
    samples: usize,
) -> Result<f64> {
    let n = kernel.dims.n_of(mu);
    let d = 2 * n + 1;
    let q = kernel.dims.q_of(mu);
    let mut qr = crate::util::QuasiRandom::new(d);
    let multis: Vec<MultiIndex> = multi_indices(2 * n, order)
        .into_iter()
        .filter(|m| m.order() == order)
        .collect();
    let mut sup: f64 = 0.0;
    for _ in 0..samples {
        let u = qr.next_point();
        // A point on the gauge sphere: one coordinate pinned to +-1.
        let mut c: Vec<f64> = u.iter().map(|&x| 2.0 * x - 1.0).collect();
        let pin = ((u[0] * 7919.0) as usize) % d;
        c[pin] = if u[d - 1] > 0.5 { 1.0 } else { -1.0 };
        // Dilate to the shell.
        for (k, item) in c.iter_mut().enumerate() {
            *item *= if k < 2 * n { radius } else { radius * radius };
        }
        for idx in &multis {
            let v = y_derivative_kernel(kernel, mu, idx, &c, 1e-3 * radius)?;
            sup = sup.max(radius.powi((q + order as i64) as i32) * v.norm());
        }
    }
    Ok(sup)
}

/// Finite-difference left-invariant derivative of a factor kernel.
fn y_derivative_kernel(
    kernel: &KernelHandle,
    mu: Factor,
    idx: &MultiIndex,
    coords: &[f64],
    step: f64,
) -> Result<C64> {
    let n = kernel.dims.n_of(mu);
    if n == 0 {
        let ord = idx.order();
        return d_t_kernel(kernel, mu, ord, coords[0], step * step);
    }
    match idx.exponents.iter().position(|&e| e > 0) {
        None => Ok(kernel.eval_factor(mu, coords)),
        Some(j) => {
            let mut rest = idx.clone();
            rest.exponents[j] -= 1;
            let g = crate::group::hpoint_from_coords(mu, coords)?;
            let e = crate::group::y_flow(&kernel.dims, mu, j, step);
            let em = crate::group::y_flow(&kernel.dims, mu, j, -step);
            let fp = y_derivative_kernel(
                kernel,
                mu,
                &rest,
                &crate::group::hpoint_coords(&crate::group::mul_h(&g, &e)?),
                step,
            )?;
            let fm = y_derivative_kernel(
                kernel,
                mu,
                &rest,
                &crate::group::hpoint_coords(&crate::group::mul_h(&g, &em)?),
                step,
            )?;
            Ok((fp - fm) / (2.0 * step))
        }
    }
}

fn d_t_kernel(kernel: &KernelHandle, mu: Factor, order: u32, t: f64, step: f64) -> Result<C64> {
    if order == 0 {
        return Ok(kernel.eval_factor(mu, &[t]));
    }
    let fp = d_t_kernel(kernel, mu, order - 1, t + step, step)?;
    let fm = d_t_kernel(kernel, mu, order - 1, t - step, step)?;
    Ok((fp - fm) / (2.0 * step))
}

// ---------------------------------------------------------------------------
// Cancellation conditions.
// ---------------------------------------------------------------------------

/// Tensor Gauss-Legendre(5) integral of `f` over the factor cuboid
/// `(-rx, rx)^{2n} x (-rt, rt)` with `panels` panels per axis.
pub fn factor_integral(
    n_mu: usize,
    rx: f64,
    rt: f64,
    panels: usize,
    f: &(dyn Fn(&[f64]) -> C64 + Sync),
) -> C64 {
    const GL_X: [f64; 5] = [
        -0.906179845938664,
        -0.538469310105683,
        0.0,
        0.538469310105683,
        0.906179845938664,
    ];
    const GL_W: [f64; 5] = [
        0.236926885056189,
        0.478628670499366,
        0.568888888888889,
        0.478628670499366,
        0.236926885056189,
    ];
    let d = 2 * n_mu + 1;
    let nodes = 5 * panels;
    let mut axis: Vec<Vec<(f64, f64)>> = Vec::with_capacity(d);
    for k in 0..d {
        let half = if k < 2 * n_mu { rx } else { rt };
        let h = 2.0 * half / panels as f64;
        let mut a = Vec::with_capacity(nodes);
        for p in 0..panels {
            let center = -half + (p as f64 + 0.5) * h;
            for q in 0..5 {
                a.push((center + 0.5 * h * GL_X[q], 0.5 * h * GL_W[q]));
            }
        }
        axis.push(a);
    }
    // Parallelize over the first axis.
    (0..nodes)
        .into_par_iter()
        .map(|i0| {
            let mut idx = vec![0usize; d];
            idx[0] = i0;
            let mut total = C64::new(0.0, 0.0);
            let mut point = vec![0.0; d];
            loop {
                let mut w = 1.0;
                for (k, &i) in idx.iter().enumerate() {
                    point[k] = axis[k][i].0;
                    w *= axis[k][i].1;
                }
                total += f(&point) * w;
                let mut k = 1;
                loop {
                    if k == d {
                        return total;
                    }
                    idx[k] += 1;
                    if idx[k] < nodes {
                        break;
                    }
                    idx[k] = 0;
                    k += 1;
                }
                if d == 1 {
                    return total;
                }
            }
        })
        .reduce(|| C64::new(0.0, 0.0), |a, b| a + b)
}

/// Tensor Gauss-Legendre(5) over the factor cuboid with a mesh graded
/// dyadically toward the origin, resolving integrands that peak at the
/// central scale (`core_x` in the horizontal axes, `core_t` centrally).
pub fn factor_integral_graded(
    n_mu: usize,
    rx: f64,
    rt: f64,
    core_x: f64,
    core_t: f64,
    f: &(dyn Fn(&[f64]) -> C64 + Sync),
) -> C64 {
    const GL_X: [f64; 5] = [
        -0.906179845938664,
        -0.538469310105683,
        0.0,
        0.538469310105683,
        0.906179845938664,
    ];
    const GL_W: [f64; 5] = [
        0.236926885056189,
        0.478628670499366,
        0.568888888888889,
        0.478628670499366,
        0.236926885056189,
    ];
    let graded_axis = |r: f64, core: f64| -> Vec<(f64, f64)> {
        let mut edges = vec![0.0f64];
        let mut e = core.min(r);
        while e < r {
            edges.push(e);
            e *= 2.0;
        }
        edges.push(r);
        let mut nodes = Vec::new();
        for w in edges.windows(2) {
            let h = w[1] - w[0];
            if h <= 0.0 {
                continue;
            }
            let centre = 0.5 * (w[0] + w[1]);
            for q in 0..5 {
                let x = centre + 0.5 * h * GL_X[q];
                let wt = 0.5 * h * GL_W[q];
                nodes.push((x, wt));
                nodes.push((-x, wt));
            }
        }
        nodes
    };
    let d = 2 * n_mu + 1;
    let mut axis: Vec<Vec<(f64, f64)>> = Vec::with_capacity(d);
    for k in 0..d {
        if k < 2 * n_mu {
            axis.push(graded_axis(rx, core_x));
        } else {
            axis.push(graded_axis(rt, core_t));
        }
    }
    let n0 = axis[0].len();
    (0..n0)
        .into_par_iter()
        .map(|i0| {
            let mut idx = vec![0usize; d];
            idx[0] = i0;
            let mut total = C64::new(0.0, 0.0);
            let mut point = vec![0.0; d];
            loop {
                let mut w = 1.0;
                for (k, &i) in idx.iter().enumerate() {
                    point[k] = axis[k][i].0;
                    w *= axis[k][i].1;
                }
                total += f(&point) * w;
                let mut k = 1;
                loop {
                    if k == d {
                        return total;
                    }
                    idx[k] += 1;
                    if idx[k] < axis[k].len() {
                        break;
                    }
                    idx[k] = 0;
                    k += 1;
                }
                if d == 1 {
                    return total;
                }
            }
        })
        .reduce(|| C64::new(0.0, 0.0), |a, b| a + b)
}

/// One-factor cancellation integral `int K_mu(g) phi(delta g) dg` over the
/// support cuboid of the dilated bump, with the mesh graded toward the
/// kernel peak.
pub fn factor_cancellation(
    kernel: &KernelHandle,
    mu: Factor,
    delta: f64,
    _panels: usize,
) -> C64 {
    let n = kernel.dims.n_of(mu);
    let rx = 1.0 / delta;
    let rt = 1.0 / (delta * delta);
    let core = match kernel.factors[mu.index()] {
        FactorKernel::Szego { eps } => eps.max(1e-6),
        FactorKernel::GaugePower { eps, .. } => eps.max(1e-6),
        _ => 0.25,
    };
    factor_integral_graded(n, rx, rt, core / 2.0, core * core / 4.0, &|c: &[f64]| {
        let mut scaled = c.to_vec();
        for (k, item) in scaled.iter_mut().enumerate() {
            *item *= if k < 2 * n { delta } else { delta * delta };
        }
        kernel.eval_factor(mu, c) * factor_bump(n, &scaled, false)
    })
}

#[derive(Clone, Copy, Debug, Serialize, PartialEq, Eq)]
pub enum CancellationVariant {
    /// One factor free (differentiated), the other two integrated.
    PairIntegrated,
    /// Two factors free, one integrated.
    SingleIntegrated,
    /// All three factors integrated.
    FullyIntegrated,
}

#[derive(Clone, Debug, Serialize)]
pub struct CancellationReport {
    pub variant: CancellationVariant,
    /// Per epsilon in the sweep: the combined constant (sup over the delta
    /// sweep of the product of factor quantities).
    pub eps_sweep: Vec<f64>,
    pub constants: Vec<f64>,
    pub ratio: f64,
    pub ratio_bound: f64,
    pub pass: bool,
}

/// Cancellation check across a dilation sweep, with stability across the
/// regularization sweep as the pass criterion (constants independent of
/// epsilon up to the ratio bound).  Exploits the product structure: free
/// factors contribute their weighted size sups, integrated factors their
/// sup over the delta sweep of the bump pairing.
pub fn cancellation_check(
    kernel: &KernelHandle,
    variant: CancellationVariant,
    deltas: &[f64],
    eps_sweep: &[f64],
    panels: usize,
    ratio_bound: f64,
) -> Result<CancellationReport> {
    let mut constants = Vec::new();
    for &eps in eps_sweep {
        let k = kernel.with_eps(eps);
        // Integrated-factor sups over the delta sweep.
        let mut integ = [0.0f64; 3];
        for mu in Factor::ALL {
            let mut sup: f64 = 0.0;
            for &d in deltas {
                sup = sup.max(factor_cancellation(&k, mu, d, panels).norm());
            }
            integ[mu.index()] = sup;
        }
        // Free-factor weighted size sups at order 0 (the derivative orders
        // are covered by the size check; cancellation stresses the pairing).
        let mut size = [0.0f64; 3];
        for mu in Factor::ALL {
            let mut sup: f64 = 0.0;
            for shell in -2..=2 {
                sup = sup.max(shell_sup(&k, mu, 0, 2.0f64.powi(shell), 40)?);
            }
            size[mu.index()] = sup;
        }
        let combined = match variant {
            CancellationVariant::PairIntegrated => {
                // max over the choice of free factor.
                let mut worst: f64 = 0.0;
                for free in 0..3 {
                    let mut v = size[free];
                    for other in 0..3 {
                        if other != free {
                            v *= integ[other];
                        }
                    }
                    worst = worst.max(v);
                }
                worst
            }
            CancellationVariant::SingleIntegrated => {
                let mut worst: f64 = 0.0;
                for int in 0..3 {
                    let mut v = integ[int];
                    for other in 0..3 {
                        if other != int {
                            v *= size[other];
                        }
                    }
                    worst = worst.max(v);
                }
                worst
            }
            CancellationVariant::FullyIntegrated => integ[0] * integ[1] * integ[2],
        };
        constants.push(combined);
    }
    let max = constants.iter().cloned().fold(0.0, f64::max);
    let min = constants.iter().cloned().fold(f64::INFINITY, f64::min);
    let ratio = if max == 0.0 { 1.0 } else { max / min };
    Ok(CancellationReport {
        variant,
        eps_sweep: eps_sweep.to_vec(),
        constants,
        ratio,
        ratio_bound,
        pass: ratio <= ratio_bound,
    })
}

// ---------------------------------------------------------------------------
// Mollifier regularization and the projected operator.
// ---------------------------------------------------------------------------

/// Mollifier regularization of a product kernel on a sampled grid of the
/// lifting group: `K_eps(g) = phi(eps g) (phi_eps * K)(g)` with a product
/// bump `phi`, realized factor by factor.
pub fn regularize(
    kernel: &KernelHandle,
    eps: f64,
    grid: &GridSpec,
    panels: usize,
) -> Result<Field<C64>> {
    let dims = kernel.dims;
    if grid.ndim() != 2 * dims.n() + 3 {
        return Err(Error::DimMismatch("regularize: grid must match the lifting group".into()));
    }
    // Per-factor mollified kernels sampled on the factor sub-grids.
    let mut factor_fields: Vec<Field<C64>> = Vec::new();
    for mu in Factor::ALL {
        let n = dims.n_of(mu);
        let mut axes: Vec<AxisSpec> = Vec::new();
        let zoff = 2 * dims.block(mu).start;
        for k in 0..2 * n {
            axes.push(grid.axes[zoff + k]);
        }
        axes.push(grid.axes[2 * dims.n() + mu.index()]);
        let fgrid = GridSpec::new(axes)?;
        let k2 = kernel.clone();
        let field = Field::from_fn(DomainTag::Heisenberg(mu), dims, fgrid, move |c| {
            // (phi_eps * K_mu)(c) over the mollifier support, then the outer
            // cutoff phi(eps c).
            let conv = factor_integral(n, eps, eps * eps, panels, &|h: &[f64]| {
                // phi_eps(h) = eps^{-Q} phi(delta_{1/eps} h)
                let mut hs = h.to_vec();
                for (k, item) in hs.iter_mut().enumerate() {
                    *item /= if k < 2 * n { eps } else { eps * eps };
                }
                let w = factor_bump(n, &hs, false);
                if w == 0.0 {
                    return C64::new(0.0, 0.0);
                }
                // h^{-1} . c on the factor.
                let hp = crate::group::hpoint_from_coords(mu, h).expect("h");
                let cp = crate::group::hpoint_from_coords(mu, c).expect("c");
                let arg = crate::group::mul_h(&crate::group::inv_h(&hp), &cp).expect("mul");
                let q = dims.q_of(mu) as i32;
                k2.eval_factor(mu, &crate::group::hpoint_coords(&arg)) * (w * eps.powi(-q))
            });
            let mut cs = c.to_vec();
            for (k, item) in cs.iter_mut().enumerate() {
                *item *= if k < 2 * n { eps } else { eps * eps };
            }
            conv * factor_bump(n, &cs, false)
        });
        factor_fields.push(field);
    }
    // Assemble the product on the full grid.
    let nd = grid.ndim();
    let nz = 2 * dims.n();
    let n_total = grid.len();
    let values: Vec<C64> = (0..n_total)
        .into_par_iter()
        .map(|flat| {
            let mut c = vec![0.0; nd];
            grid.coords_of(flat, &mut c);
            let mut acc = C64::new(1.0, 0.0);
            for mu in Factor::ALL {
                let n = dims.n_of(mu);
                let zoff = 2 * dims.block(mu).start;
                let mut fc = Vec::with_capacity(2 * n + 1);
                fc.extend_from_slice(&c[zoff..zoff + 2 * n]);
                fc.push(c[nz + mu.index()]);
                acc *= factor_fields[mu.index()].interp(&fc);
            }
            acc
        })
        .collect();
    Ok(Field { domain: DomainTag::LiftGroup, dims, grid: grid.clone(), values })
}

/// Apply the projected singular kernel to a field on the base group:
/// `f * pi_*(K_eps)` via push-forward of the sampled regularization and a
/// grid convolution.  Real part of the output (the imaginary part of the
/// projected kernel pairs with the odd symmetry and is kept for reporting).
pub fn apply_flag_singular(
    f: &RField,
    kernel: &KernelHandle,
    eps: f64,
    lift_grid: &GridSpec,
    panels: usize,
) -> Result<(RField, RField)> {
    let keps = regularize(kernel, eps, lift_grid, panels)?;
    let proj = crate::field::pushforward(&keps)?;
    let fre: RField = Field {
        domain: proj.domain,
        dims: proj.dims,
        grid: proj.grid.clone(),
        values: proj.values.iter().map(|v| v.re).collect(),
    };
    let fim: RField = Field {
        domain: proj.domain,
        dims: proj.dims,
        grid: proj.grid.clone(),
        values: proj.values.iter().map(|v| v.im).collect(),
    };
    let (re, _) = crate::field::convolve(f, &fre)?;
    let (im, _) = crate::field::convolve(f, &fim)?;
    Ok((re, im))
}

// ---------------------------------------------------------------------------
// Decay bounds.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct DecayReport {
    /// Fitted constant for the single-convolution bound
    /// `|Phi_r ~* K| <= C prod r/(r + |g|)^{Q+1}`.
    pub single_c: f64,
    /// Fitted constant for the double-convolution bound with the mixed-scale
    /// attenuation `(r/r' ^ r'/r)^{1/3}` included in the dominator.
    pub double_equal_c: f64,
    pub double_mixed_c: f64,
    pub mean_zero_defect: f64,
    pub pass: bool,
}

/// Fit the dominating constants for the decay bounds of the mollified
/// kernel paired with mean-zero bumps, per factor and combined.
pub fn decay_bound_check(
    kernel: &KernelHandle,
    r_equal: f64,
    r_mixed_ratio: f64,
    sample_radii: &[f64],
    panels: usize,
    slack: f64,
) -> Result<DecayReport> {
    let dims = kernel.dims;
    // Mean-zero precondition of the bump family.
    let mean = factor_integral(dims.n1, 1.0, 1.0, panels, &|c: &[f64]| {
        C64::new(factor_bump(dims.n1, c, true), 0.0)
    });
    if mean.norm() > 1e-10 {
        return Err(Error::InvalidArg(format!(
            "bump family is not mean zero: {:.3e}",
            mean.norm()
        )));
    }

    let mut single_c: f64 = 0.0;
    let mut fit = |r: f64, rp: f64| -> Result<f64> {
        let mut c_all = 1.0;
        for mu in Factor::ALL {
            let n = dims.n_of(mu);
            let q = dims.q_of(mu);
            let mut c_mu: f64 = 0.0;
            for &rad in sample_radii {
                let conv = phi_conv_kernel(kernel, mu, r, rad, panels)?;
                let value = if rp == r {
                    conv.norm()
                } else {
                    psi_outer_conv(kernel, mu, r, rp, rad, panels)?.norm()
                };
                let atten = if rp == r {
                    1.0
                } else {
                    ((r / rp).min(rp / r)).powf(1.0 / 3.0)
                };
                let dominator = atten * r / (r + rad).powi((q + 1) as i32);
                c_mu = c_mu.max(value / dominator);
            }
            c_all *= c_mu;
            let _ = n;
        }
        Ok(c_all)
    };
    let equal = fit(r_equal, r_equal)?;
    single_c = single_c.max(equal);
    let mixed = fit(r_equal, r_equal * r_mixed_ratio)?;
    Ok(DecayReport {
        single_c,
        double_equal_c: equal,
        double_mixed_c: mixed,
        mean_zero_defect: mean.norm(),
        pass: mixed <= equal * (1.0 + slack),
    })
}

/// `(phi_r ~* K_mu)(g)` at a gauge-sphere sample point of radius `rad`,
/// with a mean-zero normalized dilated bump.
fn phi_conv_kernel(
    kernel: &KernelHandle,
    mu: Factor,
    r: f64,
    rad: f64,
    panels: usize,
) -> Result<C64> {
    let n = kernel.dims.n_of(mu);
    let q = kernel.dims.q_of(mu) as i32;
    // Sample point: pinned first coordinate at the shell radius.
    let mut gc = vec![0.0; 2 * n + 1];
    if n > 0 {
        gc[0] = rad;
        gc[2 * n] = 0.3 * rad * rad;
    } else {
        gc[0] = rad * rad;
    }
    let g = crate::group::hpoint_from_coords(mu, &gc)?;
    Ok(factor_integral(n, r, r * r, panels, &|h: &[f64]| {
        let mut hs = h.to_vec();
        for (k, item) in hs.iter_mut().enumerate() {
            *item /= if k < 2 * n { r } else { r * r };
        }
        let w = factor_bump(n, &hs, true) * r.powi(-q);
        if w == 0.0 {
            return C64::new(0.0, 0.0);
        }
        let hp = crate::group::hpoint_from_coords(mu, h).expect("h");
        let arg = crate::group::mul_h(&crate::group::inv_h(&hp), &g).expect("mul");
        kernel.eval_factor(mu, &crate::group::hpoint_coords(&arg)) * w
    }))
}

/// `(phi_r ~* K_mu ~* psi_rp)(g)`: the inner convolution on a sampled grid,
/// then the outer pairing with the second mean-zero bump.
fn psi_outer_conv(
    kernel: &KernelHandle,
    mu: Factor,
    r: f64,
    rp: f64,
    rad: f64,
    panels: usize,
) -> Result<C64> {
    let n = kernel.dims.n_of(mu);
    let q = kernel.dims.q_of(mu) as i32;
    let mut gc = vec![0.0; 2 * n + 1];
    if n > 0 {
        gc[0] = rad;
        gc[2 * n] = 0.3 * rad * rad;
    } else {
        gc[0] = rad * rad;
    }
    let g = crate::group::hpoint_from_coords(mu, &gc)?;
    let kern = kernel.clone();
    Ok(factor_integral(n, rp, rp * rp, panels, &|k: &[f64]| {
        let mut ks = k.to_vec();
        for (i, item) in ks.iter_mut().enumerate() {
            *item /= if i < 2 * n { rp } else { rp * rp };
        }
        let w = factor_bump(n, &ks, true) * rp.powi(-q);
        if w == 0.0 {
            return C64::new(0.0, 0.0);
        }
        let kp = crate::group::hpoint_from_coords(mu, k).expect("k");
        let gk = crate::group::mul_h(&g, &crate::group::inv_h(&kp)).expect("mul");
        phi_conv_at(&kern, mu, r, &gk, panels) * w
    }))
}

fn phi_conv_at(kernel: &KernelHandle, mu: Factor, r: f64, g: &HPoint, panels: usize) -> C64 {
    let n = kernel.dims.n_of(mu);
    let q = kernel.dims.q_of(mu) as i32;
    factor_integral(n, r, r * r, panels, &|h: &[f64]| {
        let mut hs = h.to_vec();
        for (k, item) in hs.iter_mut().enumerate() {
            *item /= if k < 2 * n { r } else { r * r };
        }
        let w = factor_bump(n, &hs, true) * r.powi(-q);
        if w == 0.0 {
            return C64::new(0.0, 0.0);
        }
        let hp = crate::group::hpoint_from_coords(mu, h).expect("h");
        let arg = crate::group::mul_h(&crate::group::inv_h(&hp), g).expect("mul");
        kernel.eval_factor(mu, &crate::group::hpoint_coords(&arg)) * w
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bump_template_within_declared_bounds() {
        NbfSpec::default().validate(1).unwrap();
        NbfSpec { bound: 0.1 }.validate(1).unwrap_err();
    }

    #[test]
    fn poisson_norm_of_compact_bump_is_finite() {
        let dims = GroupDims::new(1, 0, 0);
        let grid = GridSpec::new(vec![
            AxisSpec::symmetric(1.2, 25),
            AxisSpec::symmetric(1.2, 25),
            AxisSpec::symmetric(1.2, 25),
        ])
        .unwrap();
        let phi = Field::from_fn(DomainTag::Heisenberg(Factor::H1), dims, grid, |c| {
            factor_bump(1, c, false)
        });
        let rep = poisson_bounded_norm(&phi, 1).unwrap();
        assert!(rep.norm.is_some());
    }

    #[test]
    fn poisson_norm_on_the_line() {
        // The Poisson kernel is in the class; a slowly decaying power is not.
        let dims = GroupDims::abelian();
        let grid = GridSpec::new(vec![AxisSpec::symmetric(400.0, 4001)]).unwrap();
        let p = Field::from_fn(DomainTag::Heisenberg(Factor::H1), dims, grid.clone(), |c| {
            1.0 / (std::f64::consts::PI * (1.0 + c[0] * c[0]))
        });
        let rep = poisson_bounded_norm(&p, 0).unwrap();
        assert!(rep.norm.is_some(), "poisson kernel should be bounded: {rep:?}");
        let slow = Field::from_fn(DomainTag::Heisenberg(Factor::H1), dims, grid, |c| {
            (1.0 + c[0] * c[0]).powf(-0.25)
        });
        let rep = poisson_bounded_norm(&slow, 0).unwrap();
        assert!(rep.norm.is_none(), "slow-decay weight should diverge: {rep:?}");
    }

    #[test]
    fn size_check_passes_for_szego_and_fails_for_overdecay() {
        let dims = GroupDims::new(1, 1, 1);
        let k = KernelHandle::szego_product(dims, [0.0; 3]);
        let rep = size_estimate_check(&k, 0, -3..3, 60, 4.0).unwrap();
        assert!(rep.pass, "{rep:?}");
        // Too much decay: the weighted sup decays across shells.
        let bad = KernelHandle {
            dims,
            factors: [FactorKernel::GaugePower { exponent: -5.0, eps: 0.0 }; 3],
        };
        let rep = size_estimate_check(&bad, 0, -3..3, 60, 4.0).unwrap();
        assert!(!rep.pass, "{rep:?}");
        // Zero kernel passes with sup 0.
        let rep = size_estimate_check(&KernelHandle::zero(dims), 0, -3..3, 20, 4.0).unwrap();
        assert!(rep.pass);
        assert!(rep.per_factor.iter().all(|f| f.shell_sups.iter().all(|&s| s == 0.0)));
    }

    #[test]
    fn cancellation_passes_for_szego_and_fails_without_sign_change() {
        let dims = GroupDims::new(1, 1, 1);
        let deltas: Vec<f64> = (-3..=3).map(|k| 2.0f64.powi(k)).collect();
        let eps: Vec<f64> = (1..=4).map(|k| 2.0f64.powi(-k)).collect();
        let k = KernelHandle::szego_product(dims, [1e-3; 3]);
        let rep = cancellation_check(&k, CancellationVariant::FullyIntegrated, &deltas, &eps, 3, 4.0)
            .unwrap();
        assert!(rep.pass, "{rep:?}");
        // A positive kernel at the critical decay accumulates logarithmically.
        let eps_wide: Vec<f64> = (0..=10).map(|k| 2.0f64.powi(-k)).collect();
        let bad = KernelHandle {
            dims,
            factors: [FactorKernel::GaugePower { exponent: -4.0, eps: 0.5 }; 3],
        };
        let rep = cancellation_check(
            &bad,
            CancellationVariant::FullyIntegrated,
            &deltas,
            &eps_wide,
            3,
            4.0,
        )
        .unwrap();
        assert!(!rep.pass, "{rep:?}");
        // Zero passes.
        let rep = cancellation_check(
            &KernelHandle::zero(dims),
            CancellationVariant::FullyIntegrated,
            &deltas,
            &eps,
            2,
            4.0,
        )
        .unwrap();
        assert!(rep.pass);
    }

    #[test]
    fn regularize_approximates_smooth_kernels() {
        // For a smooth compactly supported kernel, K_eps -> K pointwise.
        let dims = GroupDims::abelian();
        let grid = GridSpec::new(vec![
            AxisSpec::symmetric(0.8, 17),
            AxisSpec::symmetric(0.8, 17),
            AxisSpec::symmetric(0.8, 17),
        ])
        .unwrap();
        let k = KernelHandle { dims, factors: [FactorKernel::SmoothOdd; 3] };
        let keps = regularize(&k, 0.25, &grid, 3).unwrap();
        let mut c = vec![0.0; 3];
        let mut worst: f64 = 0.0;
        for flat in 0..grid.len() {
            grid.coords_of(flat, &mut c);
            let exact: f64 = (0..3)
                .map(|i| factor_bump(0, &[c[i]], true))
                .product();
            worst = worst.max((keps.values[flat] - C64::new(exact, 0.0)).norm());
        }
        assert!(worst < 0.08, "mollification error {worst}");
        // Zero kernel regularizes to zero.
        let z = regularize(&KernelHandle::zero(dims), 0.25, &grid, 2).unwrap();
        assert!(z.sup_magnitude() == 0.0);
    }

    #[test]
    fn decay_bounds_fit_finite_constants() {
        let dims = GroupDims::new(1, 1, 1);
        let k = KernelHandle::szego_product(dims, [1e-2; 3]);
        let rep = decay_bound_check(&k, 1.0, 0.125, &[0.5, 1.0, 2.0, 4.0], 3, 1.0).unwrap();
        assert!(rep.single_c.is_finite() && rep.single_c > 0.0);
        assert!(rep.pass, "{rep:?}");
        // Zero kernel trivially passes.
        let rep = decay_bound_check(&KernelHandle::zero(dims), 1.0, 0.125, &[1.0], 2, 1.0).unwrap();
        assert!(rep.double_equal_c == 0.0);
    }
}
