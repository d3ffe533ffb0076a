//! Closed-form Cauchy-Szego kernels: the factor kernel on a Heisenberg
//! group, the product kernel on the lifting group, and the binomial-sum
//! kernel on the base group, together with the numerical certification that
//! the fiber push-forward of the product kernel equals the base-group kernel
//! with shifted regularization parameters,
//! `pi_*(S_{e1,e2,e3}) = S_{e1+e3, e2+e3}`.
//!
//! The regularization parameters are always strictly positive in evaluation;
//! the singular kernel is reached only through limits and through the
//! principal-value sphere integral checked by [`sphere_cancellation`].

use crate::error::{Error, Result};
use crate::group::{Factor, GroupDims, HPoint, PointLift, PointN};
use crate::quad::{self, QuadOpts};
use crate::util::{binomial, factorial, QuasiRandom};
use num_complex::Complex64 as C64;
use serde::Serialize;
use std::f64::consts::PI;

#[derive(Clone, Debug, Serialize)]
pub enum KernelFamily {
    Factor(Factor),
    Product,
    Projected,
}

/// Selects a kernel family with its regularization parameters (length 1, 3,
/// or 2 matching the family).
#[derive(Clone, Debug, Serialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub dims: GroupDims,
    pub eps: Vec<f64>,
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        let want = match self.family {
            KernelFamily::Factor(_) => 1,
            KernelFamily::Product => 3,
            KernelFamily::Projected => 2,
        };
        if self.eps.len() != want {
            return Err(Error::Config(format!(
                "kernel family needs {want} regularization parameters, got {}",
                self.eps.len()
            )));
        }
        if self.eps.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::Config("regularization parameters must be > 0".into()));
        }
        Ok(())
    }
}

/// Normalization constant `c_mu = n_mu! / (4 (pi/2)^{n_mu+1})`.
pub fn factor_constant(n_mu: usize) -> Result<f64> {
    Ok(factorial(n_mu as u64)? / (4.0 * (PI / 2.0).powi(n_mu as i32 + 1)))
}

/// Factor kernel `c_mu / (|z|^2 + eps - i t)^{n_mu + 1}` on `H_mu`.
pub fn szego_factor(dims: &GroupDims, eps: f64, g: &HPoint) -> Result<C64> {
    let n = dims.n_of(g.mu);
    if g.z.len() != n {
        return Err(Error::DimMismatch("szego_factor: z length".into()));
    }
    let z2: f64 = g.z.iter().map(|z| z.norm_sqr()).sum();
    let denom = C64::new(z2 + eps, -g.t);
    Ok(C64::new(factor_constant(n)?, 0.0) / denom.powi(n as i32 + 1))
}

/// Same kernel in flat `[x.., t]` coordinates (split convention).
pub fn szego_factor_coords(n_mu: usize, eps: f64, coords: &[f64]) -> Result<C64> {
    let z2: f64 = coords[..2 * n_mu].iter().map(|x| x * x).sum();
    let t = coords[2 * n_mu];
    let denom = C64::new(z2 + eps, -t);
    Ok(C64::new(factor_constant(n_mu)?, 0.0) / denom.powi(n_mu as i32 + 1))
}

/// Product kernel on the lifting group.
pub fn szego_product(dims: &GroupDims, eps: [f64; 3], p: &PointLift) -> Result<C64> {
    let mut acc = C64::new(1.0, 0.0);
    for mu in Factor::ALL {
        let h = crate::group::lift_factor(dims, p, mu);
        acc *= szego_factor(dims, eps[mu.index()], &h)?;
    }
    Ok(acc)
}

/// Binomial-sum kernel on the base group:
/// `1/(16 (pi/2)^{N+2}) * sum_k C(n3,k) (n1+k)!/D1^{n1+k+1} (n2+n3-k)!/D2^{n2+n3-k+1}`
/// with `D_a = |z_a|^2 + |z_3|^2 + eps_a - i t_a`.
pub fn szego_flag(dims: &GroupDims, eps: [f64; 2], g: &PointN) -> Result<C64> {
    let (n1, n2, n3) = (dims.n1, dims.n2, dims.n3);
    let z1sq: f64 = g.z[dims.block(Factor::H1)].iter().map(|z| z.norm_sqr()).sum();
    let z2sq: f64 = g.z[dims.block(Factor::H2)].iter().map(|z| z.norm_sqr()).sum();
    let z3sq: f64 = g.z[dims.block(Factor::H3)].iter().map(|z| z.norm_sqr()).sum();
    let d1 = C64::new(z1sq + z3sq + eps[0], -g.t[0]);
    let d2 = C64::new(z2sq + z3sq + eps[1], -g.t[1]);
    let front = 1.0 / (16.0 * (PI / 2.0).powi(dims.n() as i32 + 2));
    let mut sum = C64::new(0.0, 0.0);
    for k in 0..=n3 {
        let coeff = binomial(n3 as u64, k as u64)?
            * factorial((n1 + k) as u64)?
            * factorial((n2 + n3 - k) as u64)?;
        sum += C64::new(coeff, 0.0)
            / (d1.powi((n1 + k) as i32 + 1) * d2.powi((n2 + n3 - k) as i32 + 1));
    }
    Ok(sum * front)
}

/// Independent route to the same kernel through the residue expansion with
/// falling factorials; used as a transcription guard against `szego_flag`.
pub fn szego_flag_residue(dims: &GroupDims, eps: [f64; 2], g: &PointN) -> Result<C64> {
    let (n1, n2, n3) = (dims.n1, dims.n2, dims.n3);
    let z1sq: f64 = g.z[dims.block(Factor::H1)].iter().map(|z| z.norm_sqr()).sum();
    let z2sq: f64 = g.z[dims.block(Factor::H2)].iter().map(|z| z.norm_sqr()).sum();
    let z3sq: f64 = g.z[dims.block(Factor::H3)].iter().map(|z| z.norm_sqr()).sum();
    let d1 = C64::new(z1sq + z3sq + eps[0], -g.t[0]);
    let d2 = C64::new(z2sq + z3sq + eps[1], -g.t[1]);
    let c123 = factor_constant(n1)? * factor_constant(n2)? * factor_constant(n3)?;
    let front = 2.0 * PI * c123 * (-1.0f64).powi(n3 as i32) / factorial(n3 as u64)?;
    let falling = |a: i64, k: usize| -> f64 {
        // (-a-1)(-a-2)...(-a-k)
        let mut acc = 1.0;
        for i in 1..=k as i64 {
            acc *= (-a - i) as f64;
        }
        acc
    };
    let mut sum = C64::new(0.0, 0.0);
    for k in 0..=n3 {
        let coeff = binomial(n3 as u64, k as u64)?
            * falling(n1 as i64, k)
            * falling(n2 as i64, n3 - k);
        sum += C64::new(coeff, 0.0)
            / (d1.powi((n1 + k) as i32 + 1) * d2.powi((n2 + n3 - k) as i32 + 1));
    }
    Ok(sum * front)
}

// ---------------------------------------------------------------------------
// Siegel-domain polarized defining functions.
// ---------------------------------------------------------------------------

/// A point of the flat model of the Siegel domain: base-group coordinates
/// plus heights `eps` above the Shilov boundary (eps = 0 is the boundary).
#[derive(Clone, Debug)]
pub struct SiegelPoint {
    pub base: PointN,
    pub eps: [f64; 2],
}

/// Polarized defining function `rho_a(zeta, eta)`; under the quadratic
/// identification of the flat model it equals
/// `eps_a + |z_a - z'_a|^2 + |z_3 - z'_3|^2 - i (group difference t_a)`.
pub fn gindikin_rho(
    dims: &GroupDims,
    alpha: usize,
    zeta: &SiegelPoint,
    eta: &PointN,
) -> Result<C64> {
    if alpha != 1 && alpha != 2 {
        return Err(Error::InvalidArg("alpha must be 1 or 2".into()));
    }
    let a = alpha - 1;
    let blk = if alpha == 1 { dims.block(Factor::H1) } else { dims.block(Factor::H2) };
    let b3 = dims.block(Factor::H3);
    let diff_sq = |r: std::ops::Range<usize>| -> f64 {
        zeta.base.z[r.clone()]
            .iter()
            .zip(&eta.z[r])
            .map(|(x, y)| (x - y).norm_sqr())
            .sum()
    };
    let za = diff_sq(blk.clone());
    let z3 = diff_sq(b3.clone());
    // t-component of eta^{-1} . zeta.
    let phi_a = crate::group::phi_form(&eta.z[blk.clone()], &zeta.base.z[blk])?;
    let phi_3 = crate::group::phi_form(&eta.z[b3.clone()], &zeta.base.z[b3])?;
    let t_diff = zeta.base.t[a] - eta.t[a] - phi_a - phi_3;
    Ok(C64::new(zeta.eps[a] + za + z3, -t_diff))
}

// ---------------------------------------------------------------------------
// Projection identity certification.
// ---------------------------------------------------------------------------

/// Fiber integral of the product kernel over the line through `g`.
pub fn product_kernel_pushforward(
    dims: &GroupDims,
    eps: [f64; 3],
    g: &PointN,
    tol: f64,
) -> Result<C64> {
    let z1sq: f64 = g.z[dims.block(Factor::H1)].iter().map(|z| z.norm_sqr()).sum();
    let z2sq: f64 = g.z[dims.block(Factor::H2)].iter().map(|z| z.norm_sqr()).sum();
    let z3sq: f64 = g.z[dims.block(Factor::H3)].iter().map(|z| z.norm_sqr()).sum();
    let (n1, n2, n3) = (dims.n1 as i32, dims.n2 as i32, dims.n3 as i32);
    let c = factor_constant(dims.n1)? * factor_constant(dims.n2)? * factor_constant(dims.n3)?;
    let (t1, t2) = (g.t[0], g.t[1]);
    let integrand = move |u: f64| -> C64 {
        let d1 = C64::new(z1sq + eps[0], -(t1 - u));
        let d2 = C64::new(z2sq + eps[1], -(t2 - u));
        let d3 = C64::new(z3sq + eps[2], -u);
        C64::new(c, 0.0) / (d1.powi(n1 + 1) * d2.powi(n2 + 1) * d3.powi(n3 + 1))
    };
    quad::integrate_complex_line(integrand, QuadOpts::with_tol(tol))
}

#[derive(Clone, Debug, Serialize)]
pub struct ProjectionReport {
    pub dims: GroupDims,
    pub eps: [f64; 3],
    pub samples: usize,
    pub max_rel_err: f64,
    pub worst_point: Vec<f64>,
    pub tol: f64,
    pub pass: bool,
}

/// Quasi-random sample points spread over a box around the origin.
pub fn projection_sample_points(dims: &GroupDims, count: usize, extent: f64) -> Vec<PointN> {
    let d = 2 * dims.n() + 2;
    let mut q = QuasiRandom::new(d);
    (0..count)
        .map(|_| {
            let p = q.next_point();
            let coords: Vec<f64> = p.iter().map(|x| (2.0 * x - 1.0) * extent).collect();
            crate::group::pointn_from_coords(dims, &coords).expect("sample point")
        })
        .collect()
}

/// Certify `pi_*(S_{e1,e2,e3}) = S_{e1+e3, e2+e3}` by adaptive quadrature
/// against the closed form, point by point.
pub fn check_projection_identity(
    dims: &GroupDims,
    eps: [f64; 3],
    samples: &[PointN],
    tol: f64,
) -> Result<ProjectionReport> {
    let mut max_rel = 0.0f64;
    let mut worst = Vec::new();
    for g in samples {
        let rhs = szego_flag(dims, [eps[0] + eps[2], eps[1] + eps[2]], g)?;
        // Anchor the absolute quadrature tolerance to the closed-form value
        // so the comparison is relative even where the kernel is tiny.
        let qtol = (rhs.norm() * tol * 1e-2).max(1e-300);
        let lhs = {
            let opts = crate::quad::QuadOpts {
                abs_tol: qtol,
                rel_tol: tol * 1e-2,
                max_subdiv: 20_000,
            };
            let z1sq: f64 = g.z[dims.block(Factor::H1)].iter().map(|z| z.norm_sqr()).sum();
            let z2sq: f64 = g.z[dims.block(Factor::H2)].iter().map(|z| z.norm_sqr()).sum();
            let z3sq: f64 = g.z[dims.block(Factor::H3)].iter().map(|z| z.norm_sqr()).sum();
            let (n1, n2, n3) = (dims.n1 as i32, dims.n2 as i32, dims.n3 as i32);
            let c = factor_constant(dims.n1)? * factor_constant(dims.n2)? * factor_constant(dims.n3)?;
            let (t1, t2) = (g.t[0], g.t[1]);
            quad::integrate_complex_line(
                move |u: f64| {
                    let d1 = C64::new(z1sq + eps[0], -(t1 - u));
                    let d2 = C64::new(z2sq + eps[1], -(t2 - u));
                    let d3 = C64::new(z3sq + eps[2], -u);
                    C64::new(c, 0.0) / (d1.powi(n1 + 1) * d2.powi(n2 + 1) * d3.powi(n3 + 1))
                },
                opts,
            )?
        };
        let rel = (lhs - rhs).norm() / rhs.norm().max(1e-300);
        if rel > max_rel {
            max_rel = rel;
            worst = crate::group::pointn_coords(dims, g);
        }
    }
    Ok(ProjectionReport {
        dims: *dims,
        eps,
        samples: samples.len(),
        max_rel_err: max_rel,
        worst_point: worst,
        tol,
        pass: max_rel <= tol,
    })
}

// ---------------------------------------------------------------------------
// Strong cancellation: gauge-sphere integral of the singular factor kernel.
// ---------------------------------------------------------------------------

/// Integral of the unregularized factor kernel over the unit gauge sphere
/// `{|h| = 1}` with the polar-decomposition surface measure.  The gauge ball
/// is the cuboid `(-1,1)^{2n} x (-1,1)`; the measure weights the `x`-faces
/// with their Lebesgue area and the `t`-faces with twice theirs, which is
/// exactly what makes `dh = r^{Q-1} dr dsigma`.
pub fn sphere_cancellation(dims: &GroupDims, mu: Factor, panels: usize) -> Result<C64> {
    let n = dims.n_of(mu);
    if n == 0 {
        // Gauge sphere is the two points t = +-1 with weight 2; the kernel
        // value c0 / (-it) is odd, so the sum is exactly zero.
        let plus = szego_factor_coords(0, 0.0, &[1.0])?;
        let minus = szego_factor_coords(0, 0.0, &[-1.0])?;
        return Ok((plus + minus) * 2.0);
    }
    let d = 2 * n; // face dimension: (2n - 1) free x's + t, or 2n free x's
    let mut total = C64::new(0.0, 0.0);
    // x-faces: coordinate i fixed at +-1.
    for i in 0..2 * n {
        for sign in [1.0, -1.0] {
            total += cube_face_integral(panels, d, &mut |face: &[f64]| {
                let mut coords = vec![0.0; 2 * n + 1];
                let mut k = 0;
                for (j, slot) in coords.iter_mut().enumerate().take(2 * n) {
                    if j == i {
                        *slot = sign;
                    } else {
                        *slot = face[k];
                        k += 1;
                    }
                }
                coords[2 * n] = face[d - 1];
                szego_factor_coords(n, 0.0, &coords).expect("kernel eval")
            })?;
        }
    }
    // t-faces: t = +-1, weight 2.
    for sign in [1.0, -1.0] {
        total += cube_face_integral(panels, d, &mut |face: &[f64]| {
            let mut coords = vec![0.0; 2 * n + 1];
            coords[..2 * n].copy_from_slice(face);
            coords[2 * n] = sign;
            szego_factor_coords(n, 0.0, &coords).expect("kernel eval")
        })? * 2.0;
    }
    Ok(total)
}

/// Tensor-product Gauss-Legendre(5) over `[-1,1]^d` with `panels` panels per
/// axis.  The integrands are smooth on the faces (the kernel singularity
/// sits at the origin, off the sphere).
fn cube_face_integral(
    panels: usize,
    d: usize,
    f: &mut dyn FnMut(&[f64]) -> C64,
) -> Result<C64> {
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
    let nodes_per_axis = 5 * panels;
    let h = 2.0 / panels as f64;
    let mut axis_nodes = Vec::with_capacity(nodes_per_axis);
    for p in 0..panels {
        let center = -1.0 + (p as f64 + 0.5) * h;
        for q in 0..5 {
            axis_nodes.push((center + 0.5 * h * GL_X[q], 0.5 * h * GL_W[q]));
        }
    }
    let mut total = C64::new(0.0, 0.0);
    let mut idx = vec![0usize; d];
    let mut point = vec![0.0; d];
    loop {
        let mut w = 1.0;
        for (k, &i) in idx.iter().enumerate() {
            point[k] = axis_nodes[i].0;
            w *= axis_nodes[i].1;
        }
        total += f(&point) * w;
        // Ripple-carry increment.
        let mut k = 0;
        loop {
            if k == d {
                return Ok(total);
            }
            idx[k] += 1;
            if idx[k] < nodes_per_axis {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}
