//! Exact group algebra for the three Heisenberg factors `H_mu`, the base
//! group `N = C^N x R^2`, and the lifting group `Ntilde = H_1 x H_2 x H_3`,
//! together with left-invariant vector fields and sub-Laplacians realized by
//! finite differences.
//!
//! Coordinate conventions: a complex entry `z_{mu j} = x_{mu j} + i x_{mu (n_mu+j)}`,
//! and points serialize as flat real vectors `[x_{mu 1}, ..., x_{mu 2n_mu}, t...]`
//! in block order.

use crate::error::{Error, Result};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Factor {
    H1,
    H2,
    H3,
}

impl Factor {
    pub const ALL: [Factor; 3] = [Factor::H1, Factor::H2, Factor::H3];

    pub fn index(self) -> usize {
        match self {
            Factor::H1 => 0,
            Factor::H2 => 1,
            Factor::H3 => 2,
        }
    }

    pub fn from_index(i: usize) -> Factor {
        Factor::ALL[i]
    }
}

/// The triple `(n1, n2, n3)` of complex dimensions of the factors, with
/// derived homogeneous dimensions `Q_mu = 2 n_mu + 2` and `Q = 2N + 4`.
/// All-zero dims (the abelian degenerate mode) is legal.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct GroupDims {
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
}

impl GroupDims {
    pub fn new(n1: usize, n2: usize, n3: usize) -> Self {
        GroupDims { n1, n2, n3 }
    }

    pub fn abelian() -> Self {
        GroupDims::new(0, 0, 0)
    }

    pub fn is_abelian(&self) -> bool {
        self.n() == 0
    }

    /// Total complex dimension `N = n1 + n2 + n3`.
    pub fn n(&self) -> usize {
        self.n1 + self.n2 + self.n3
    }

    pub fn n_of(&self, mu: Factor) -> usize {
        match mu {
            Factor::H1 => self.n1,
            Factor::H2 => self.n2,
            Factor::H3 => self.n3,
        }
    }

    /// Homogeneous dimension of the factor, `Q_mu = 2 n_mu + 2`.
    pub fn q_of(&self, mu: Factor) -> i64 {
        2 * self.n_of(mu) as i64 + 2
    }

    /// Homogeneous dimension of the base group, `Q = 2N + 4`.
    pub fn q(&self) -> i64 {
        2 * self.n() as i64 + 4
    }

    /// Range of a factor's complex block inside the concatenated `z` vector.
    pub fn block(&self, mu: Factor) -> std::ops::Range<usize> {
        match mu {
            Factor::H1 => 0..self.n1,
            Factor::H2 => self.n1..self.n1 + self.n2,
            Factor::H3 => self.n1 + self.n2..self.n(),
        }
    }
}

/// A point of a single Heisenberg factor `H_mu = C^{n_mu} x R`.
#[derive(Clone, Debug, PartialEq)]
pub struct HPoint {
    pub mu: Factor,
    pub z: Vec<C64>,
    pub t: f64,
}

/// A point of the base group `N = C^N x R^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointN {
    pub z: Vec<C64>,
    pub t: [f64; 2],
}

/// A point of the lifting group `Ntilde = C^N x R^3`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointLift {
    pub z: Vec<C64>,
    pub u: [f64; 3],
}

/// `Phi(z, z') = 2 Im <z, z'>` with the standard Hermitian inner product.
pub fn phi_form(za: &[C64], zb: &[C64]) -> Result<f64> {
    if za.len() != zb.len() {
        return Err(Error::DimMismatch(format!(
            "phi_form: {} vs {}",
            za.len(),
            zb.len()
        )));
    }
    let mut im = 0.0;
    for (a, b) in za.iter().zip(zb) {
        im += (a * b.conj()).im;
    }
    Ok(2.0 * im)
}

pub fn identity_h(dims: &GroupDims, mu: Factor) -> HPoint {
    HPoint { mu, z: vec![C64::new(0.0, 0.0); dims.n_of(mu)], t: 0.0 }
}

pub fn identity_n(dims: &GroupDims) -> PointN {
    PointN { z: vec![C64::new(0.0, 0.0); dims.n()], t: [0.0; 2] }
}

pub fn identity_lift(dims: &GroupDims) -> PointLift {
    PointLift { z: vec![C64::new(0.0, 0.0); dims.n()], u: [0.0; 3] }
}

pub fn mul_h(a: &HPoint, b: &HPoint) -> Result<HPoint> {
    if a.mu != b.mu || a.z.len() != b.z.len() {
        return Err(Error::DimMismatch("mul_h: factor or length".into()));
    }
    let z: Vec<C64> = a.z.iter().zip(&b.z).map(|(x, y)| x + y).collect();
    let t = a.t + b.t + phi_form(&a.z, &b.z)?;
    Ok(HPoint { mu: a.mu, z, t })
}

pub fn inv_h(a: &HPoint) -> HPoint {
    HPoint { mu: a.mu, z: a.z.iter().map(|x| -x).collect(), t: -a.t }
}

pub fn mul_n(dims: &GroupDims, a: &PointN, b: &PointN) -> Result<PointN> {
    if a.z.len() != dims.n() || b.z.len() != dims.n() {
        return Err(Error::DimMismatch("mul_n: z length".into()));
    }
    let z: Vec<C64> = a.z.iter().zip(&b.z).map(|(x, y)| x + y).collect();
    let b1 = dims.block(Factor::H1);
    let b2 = dims.block(Factor::H2);
    let b3 = dims.block(Factor::H3);
    let p1 = phi_form(&a.z[b1.clone()], &b.z[b1])?;
    let p2 = phi_form(&a.z[b2.clone()], &b.z[b2])?;
    let p3 = phi_form(&a.z[b3.clone()], &b.z[b3])?;
    Ok(PointN { z, t: [a.t[0] + b.t[0] + p1 + p3, a.t[1] + b.t[1] + p2 + p3] })
}

pub fn inv_n(a: &PointN) -> PointN {
    PointN { z: a.z.iter().map(|x| -x).collect(), t: [-a.t[0], -a.t[1]] }
}

pub fn mul_lift(dims: &GroupDims, a: &PointLift, b: &PointLift) -> Result<PointLift> {
    if a.z.len() != dims.n() || b.z.len() != dims.n() {
        return Err(Error::DimMismatch("mul_lift: z length".into()));
    }
    let z: Vec<C64> = a.z.iter().zip(&b.z).map(|(x, y)| x + y).collect();
    let mut u = [0.0; 3];
    for mu in Factor::ALL {
        let r = dims.block(mu);
        u[mu.index()] =
            a.u[mu.index()] + b.u[mu.index()] + phi_form(&a.z[r.clone()], &b.z[r])?;
    }
    Ok(PointLift { z, u })
}

pub fn inv_lift(a: &PointLift) -> PointLift {
    PointLift {
        z: a.z.iter().map(|x| -x).collect(),
        u: [-a.u[0], -a.u[1], -a.u[2]],
    }
}

/// Anisotropic dilation `delta_a(z, t) = (a z, a^2 t)` on a factor.
pub fn dilate_h(a: f64, g: &HPoint) -> Result<HPoint> {
    if a <= 0.0 {
        return Err(Error::InvalidArg(format!("dilate_h: a = {a} <= 0")));
    }
    Ok(HPoint { mu: g.mu, z: g.z.iter().map(|x| x * a).collect(), t: a * a * g.t })
}

/// Gauge norm `max{|x_1|, ..., |x_2n|, |t|^(1/2)}` on a factor.
pub fn norm_inf(g: &HPoint) -> f64 {
    let mut m = g.t.abs().sqrt();
    for z in &g.z {
        m = m.max(z.re.abs()).max(z.im.abs());
    }
    m
}

/// Embedding homomorphism `tau_mu : H_mu -> N`.  The third factor feeds its
/// central coordinate into both `t`-slots.
pub fn embed_tau(dims: &GroupDims, h: &HPoint) -> Result<PointN> {
    if h.z.len() != dims.n_of(h.mu) {
        return Err(Error::DimMismatch("embed_tau: z length".into()));
    }
    let mut g = identity_n(dims);
    let r = dims.block(h.mu);
    g.z[r].copy_from_slice(&h.z);
    match h.mu {
        Factor::H1 => g.t[0] = h.t,
        Factor::H2 => g.t[1] = h.t,
        Factor::H3 => {
            g.t[0] = h.t;
            g.t[1] = h.t;
        }
    }
    Ok(g)
}

/// Natural embedding of `H_mu` into the product group `Ntilde`.
pub fn embed_lift(dims: &GroupDims, h: &HPoint) -> Result<PointLift> {
    if h.z.len() != dims.n_of(h.mu) {
        return Err(Error::DimMismatch("embed_lift: z length".into()));
    }
    let mut g = identity_lift(dims);
    let r = dims.block(h.mu);
    g.z[r].copy_from_slice(&h.z);
    g.u[h.mu.index()] = h.t;
    Ok(g)
}

/// Projection `pi(z, u) = (z, u1 + u3, u2 + u3)`, a group homomorphism.
pub fn project_pi(p: &PointLift) -> PointN {
    PointN { z: p.z.clone(), t: [p.u[0] + p.u[2], p.u[1] + p.u[2]] }
}

/// Factor block of a lift point as an `HPoint`.
pub fn lift_factor(dims: &GroupDims, p: &PointLift, mu: Factor) -> HPoint {
    HPoint { mu, z: p.z[dims.block(mu)].to_vec(), t: p.u[mu.index()] }
}

// ---------------------------------------------------------------------------
// Real-coordinate serialization: [x_{mu 1}, ..., x_{mu 2n_mu}] per block + t's.
// ---------------------------------------------------------------------------

pub fn hpoint_coords(g: &HPoint) -> Vec<f64> {
    let n = g.z.len();
    let mut v = Vec::with_capacity(2 * n + 1);
    v.extend(g.z.iter().map(|z| z.re));
    v.extend(g.z.iter().map(|z| z.im));
    v.push(g.t);
    v
}

pub fn hpoint_from_coords(mu: Factor, coords: &[f64]) -> Result<HPoint> {
    if coords.len() % 2 != 1 {
        return Err(Error::DimMismatch("hpoint coords must have odd length".into()));
    }
    let n = coords.len() / 2;
    let z = (0..n).map(|j| C64::new(coords[j], coords[n + j])).collect();
    Ok(HPoint { mu, z, t: coords[2 * n] })
}

fn z_coords(dims: &GroupDims, z: &[C64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(2 * dims.n());
    for mu in Factor::ALL {
        let r = dims.block(mu);
        v.extend(z[r.clone()].iter().map(|w| w.re));
        v.extend(z[r].iter().map(|w| w.im));
    }
    v
}

fn z_from_coords(dims: &GroupDims, v: &[f64]) -> Vec<C64> {
    let mut z = Vec::with_capacity(dims.n());
    let mut off = 0;
    for mu in Factor::ALL {
        let n = dims.n_of(mu);
        for j in 0..n {
            z.push(C64::new(v[off + j], v[off + n + j]));
        }
        off += 2 * n;
    }
    z
}

pub fn pointn_coords(dims: &GroupDims, g: &PointN) -> Vec<f64> {
    let mut v = z_coords(dims, &g.z);
    v.extend_from_slice(&g.t);
    v
}

pub fn pointn_from_coords(dims: &GroupDims, v: &[f64]) -> Result<PointN> {
    if v.len() != 2 * dims.n() + 2 {
        return Err(Error::DimMismatch("pointn coords length".into()));
    }
    Ok(PointN { z: z_from_coords(dims, v), t: [v[2 * dims.n()], v[2 * dims.n() + 1]] })
}

pub fn pointlift_coords(dims: &GroupDims, g: &PointLift) -> Vec<f64> {
    let mut v = z_coords(dims, &g.z);
    v.extend_from_slice(&g.u);
    v
}

pub fn pointlift_from_coords(dims: &GroupDims, v: &[f64]) -> Result<PointLift> {
    if v.len() != 2 * dims.n() + 3 {
        return Err(Error::DimMismatch("pointlift coords length".into()));
    }
    let n2 = 2 * dims.n();
    Ok(PointLift { z: z_from_coords(dims, v), u: [v[n2], v[n2 + 1], v[n2 + 2]] })
}

// ---------------------------------------------------------------------------
// Left-invariant vector fields and sub-Laplacians via finite differences.
// ---------------------------------------------------------------------------

/// Multi-index of exponents for the composed fields `Y^(I) = Y_1^{I_1} ... Y_{2n}^{I_{2n}}`.
#[derive(Clone, Debug)]
pub struct MultiIndex {
    pub mu: Factor,
    pub exponents: Vec<u32>,
}

impl MultiIndex {
    pub fn new(mu: Factor, exponents: Vec<u32>) -> Self {
        MultiIndex { mu, exponents }
    }

    pub fn order(&self) -> u32 {
        self.exponents.iter().sum()
    }
}

/// Default central-difference step: `eps^(1/3) * (1 + |g|)`.
pub fn default_fd_step(gauge: f64) -> f64 {
    f64::EPSILON.powf(1.0 / 3.0) * (1.0 + gauge)
}

/// `exp(delta * Y_{mu j})` as a group element of the factor: the flow of a
/// left-invariant field is right translation by this element.
pub fn y_flow(dims: &GroupDims, mu: Factor, j: usize, delta: f64) -> HPoint {
    let n = dims.n_of(mu);
    let mut e = identity_h(dims, mu);
    if j < n {
        e.z[j] = C64::new(delta, 0.0);
    } else {
        e.z[j - n] = C64::new(0.0, delta);
    }
    e
}

/// Apply `Y_{mu j}` to a function on the factor by a central difference.
pub fn apply_y_single<F: Fn(&HPoint) -> f64>(
    dims: &GroupDims,
    j: usize,
    f: &F,
    g: &HPoint,
    step: f64,
) -> Result<f64> {
    let e = y_flow(dims, g.mu, j, step);
    let einv = y_flow(dims, g.mu, j, -step);
    let fp = f(&mul_h(g, &e)?);
    let fm = f(&mul_h(g, &einv)?);
    Ok((fp - fm) / (2.0 * step))
}

/// Apply the composed field `Y^(I)` by nested central differences.
pub fn apply_y<F: Fn(&HPoint) -> f64>(
    dims: &GroupDims,
    idx: &MultiIndex,
    f: &F,
    g: &HPoint,
    step: f64,
) -> Result<f64> {
    // Find the leftmost slot with a remaining exponent; the leftmost factor
    // in the composition acts last, i.e. outermost in the recursion.
    match idx.exponents.iter().position(|&e| e > 0) {
        None => Ok(f(g)),
        Some(j) => {
            let mut rest = idx.clone();
            rest.exponents[j] -= 1;
            let e = y_flow(dims, g.mu, j, step);
            let einv = y_flow(dims, g.mu, j, -step);
            let fp = apply_y(dims, &rest, f, &mul_h(g, &e)?, step)?;
            let fm = apply_y(dims, &rest, f, &mul_h(g, &einv)?, step)?;
            Ok((fp - fm) / (2.0 * step))
        }
    }
}

/// Apply the induced field `X_{mu j}` on the base group (image of `Y_{mu j}`
/// under the embedding) by a central difference.
pub fn apply_x_single<F: Fn(&PointN) -> f64>(
    dims: &GroupDims,
    mu: Factor,
    j: usize,
    f: &F,
    g: &PointN,
    step: f64,
) -> Result<f64> {
    let e = embed_tau(dims, &y_flow(dims, mu, j, step))?;
    let einv = embed_tau(dims, &y_flow(dims, mu, j, -step))?;
    let fp = f(&mul_n(dims, g, &e)?);
    let fm = f(&mul_n(dims, g, &einv)?);
    Ok((fp - fm) / (2.0 * step))
}

/// Sub-Laplacian `Delta_mu = -sum_j Y_{mu j}^2` on a factor, applied `order`
/// times.  In the abelian degenerate mode (`n_mu = 0`) it is `-d^2/dt^2`.
pub fn sub_laplacian_h<F: Fn(&HPoint) -> f64>(
    dims: &GroupDims,
    f: &F,
    order: u32,
    g: &HPoint,
    step: f64,
) -> Result<f64> {
    if order == 0 {
        return Ok(f(g));
    }
    let n = dims.n_of(g.mu);
    let inner = |h: &HPoint| -> f64 {
        sub_laplacian_h(dims, f, order - 1, h, step).expect("recursion on valid point")
    };
    let mut acc = 0.0;
    if n == 0 {
        let mut p = g.clone();
        p.t += step * step;
        let fp = inner(&p);
        p.t = g.t - step * step;
        let fm = inner(&p);
        // Central coordinate scales like the square of the dilation, so the
        // degenerate sub-Laplacian second-differences t at step^2.
        acc = -(fp - 2.0 * inner(g) + fm) / (step * step * step * step);
    } else {
        let f0 = inner(g);
        for j in 0..2 * n {
            let e = y_flow(dims, g.mu, j, step);
            let einv = y_flow(dims, g.mu, j, -step);
            let fp = inner(&mul_h(g, &e)?);
            let fm = inner(&mul_h(g, &einv)?);
            acc -= (fp - 2.0 * f0 + fm) / (step * step);
        }
    }
    Ok(acc)
}

/// The operator on the base group induced by the factor sub-Laplacian.  In
/// the abelian mode: `-d^2/dt_mu^2` for mu = 1, 2 and `-(d/dt_1 + d/dt_2)^2`
/// for mu = 3.
pub fn sub_laplacian_n<F: Fn(&PointN) -> f64>(
    dims: &GroupDims,
    mu: Factor,
    f: &F,
    order: u32,
    g: &PointN,
    step: f64,
) -> Result<f64> {
    if order == 0 {
        return Ok(f(g));
    }
    let n = dims.n_of(mu);
    let inner = |h: &PointN| -> f64 {
        sub_laplacian_n(dims, mu, f, order - 1, h, step).expect("recursion on valid point")
    };
    let mut acc = 0.0;
    if n == 0 {
        let s2 = step * step;
        let shift = |g: &PointN, d: f64| -> PointN {
            let mut p = g.clone();
            match mu {
                Factor::H1 => p.t[0] += d,
                Factor::H2 => p.t[1] += d,
                Factor::H3 => {
                    p.t[0] += d;
                    p.t[1] += d;
                }
            }
            p
        };
        let fp = inner(&shift(g, s2));
        let fm = inner(&shift(g, -s2));
        acc = -(fp - 2.0 * inner(g) + fm) / (s2 * s2);
    } else {
        let f0 = inner(g);
        for j in 0..2 * n {
            let e = embed_tau(dims, &y_flow(dims, mu, j, step))?;
            let einv = embed_tau(dims, &y_flow(dims, mu, j, -step))?;
            let fp = inner(&mul_n(dims, g, &e)?);
            let fm = inner(&mul_n(dims, g, &einv)?);
            acc -= (fp - 2.0 * f0 + fm) / (step * step);
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn phi_form_examples() {
        assert_eq!(phi_form(&[c(1.0, 0.0)], &[c(1.0, 0.0)]).unwrap(), 0.0);
        assert_eq!(phi_form(&[c(1.0, 0.0)], &[c(0.0, 1.0)]).unwrap(), -2.0);
        assert_eq!(
            phi_form(&[c(0.0, 0.0), c(0.0, 0.0)], &[c(5.0, 0.0), c(0.0, 7.0)]).unwrap(),
            0.0
        );
        assert!(phi_form(&[c(1.0, 0.0)], &[]).is_err());
    }

    #[test]
    fn mul_n_twists_both_central_slots() {
        let dims = GroupDims::new(0, 0, 1);
        let a = PointN { z: vec![c(1.0, 0.0)], t: [0.0, 0.0] };
        let b = PointN { z: vec![c(0.0, 1.0)], t: [0.0, 0.0] };
        let ab = mul_n(&dims, &a, &b).unwrap();
        assert_eq!(ab.z[0], c(1.0, 1.0));
        assert_eq!(ab.t, [-2.0, -2.0]);
    }

    #[test]
    fn identity_and_inverse_laws() {
        let dims = GroupDims::new(1, 0, 1);
        let g = PointN { z: vec![c(0.3, -1.2), c(0.7, 0.4)], t: [0.5, -0.25] };
        let e = identity_n(&dims);
        assert_eq!(mul_n(&dims, &e, &g).unwrap(), g);
        let gi = inv_n(&g);
        let prod = mul_n(&dims, &g, &gi).unwrap();
        assert!(prod.z.iter().all(|z| z.norm() == 0.0));
        assert!(prod.t[0].abs() < 1e-15 && prod.t[1].abs() < 1e-15);
    }

    #[test]
    fn inverse_examples() {
        let dims = GroupDims::new(1, 0, 0);
        let h = HPoint { mu: Factor::H1, z: vec![c(1.0, 1.0)], t: 3.0 };
        let hi = inv_h(&h);
        assert_eq!(hi.z[0], c(-1.0, -1.0));
        assert_eq!(hi.t, -3.0);
        let dims0 = GroupDims::abelian();
        let p = PointLift { z: vec![], u: [1.0, 2.0, 3.0] };
        let pi = inv_lift(&p);
        assert_eq!(pi.u, [-1.0, -2.0, -3.0]);
        let _ = dims0;
    }

    #[test]
    fn dilation_examples() {
        let dims = GroupDims::new(1, 0, 0);
        let g = HPoint { mu: Factor::H1, z: vec![c(1.0, 0.0)], t: 1.0 };
        let d2 = dilate_h(2.0, &g).unwrap();
        assert_eq!(d2.z[0], c(2.0, 0.0));
        assert_eq!(d2.t, 4.0);
        assert_eq!(dilate_h(1.0, &g).unwrap(), g);
        assert!(dilate_h(0.0, &g).is_err());
        let _ = dims;
    }

    #[test]
    fn gauge_norm_examples() {
        let g = HPoint { mu: Factor::H1, z: vec![c(1.0, 2.0)], t: -9.0 };
        assert_eq!(norm_inf(&g), 3.0);
        let e = HPoint { mu: Factor::H1, z: vec![c(0.0, 0.0)], t: 0.0 };
        assert_eq!(norm_inf(&e), 0.0);
        let d = dilate_h(2.0, &g).unwrap();
        assert!((norm_inf(&d) - 2.0 * norm_inf(&g)).abs() < 1e-15);
    }

    #[test]
    fn embed_examples() {
        let dims = GroupDims::new(1, 1, 1);
        let h3 = HPoint { mu: Factor::H3, z: vec![c(2.0, -1.0)], t: 5.0 };
        let g = embed_tau(&dims, &h3).unwrap();
        assert_eq!(g.z[2], c(2.0, -1.0));
        assert_eq!(g.t, [5.0, 5.0]);
        let e = embed_tau(&dims, &identity_h(&dims, Factor::H1)).unwrap();
        assert_eq!(e, identity_n(&dims));
    }

    #[test]
    fn embeds_commute_pairwise() {
        let dims = GroupDims::new(1, 1, 1);
        let a = embed_tau(&dims, &HPoint { mu: Factor::H1, z: vec![c(1.0, 2.0)], t: 0.3 }).unwrap();
        let b = embed_tau(&dims, &HPoint { mu: Factor::H2, z: vec![c(-0.5, 1.0)], t: -0.7 }).unwrap();
        let c3 = embed_tau(&dims, &HPoint { mu: Factor::H3, z: vec![c(0.1, 0.9)], t: 2.0 }).unwrap();
        for (x, y) in [(&a, &b), (&a, &c3), (&b, &c3)] {
            let xy = mul_n(&dims, x, y).unwrap();
            let yx = mul_n(&dims, y, x).unwrap();
            assert_eq!(xy, yx);
        }
    }

    #[test]
    fn projection_examples() {
        let dims = GroupDims::new(0, 0, 1);
        let p = PointLift { z: vec![c(1.0, 0.5)], u: [1.0, 2.0, 3.0] };
        let g = project_pi(&p);
        assert_eq!(g.t, [4.0, 5.0]);
        assert_eq!(project_pi(&identity_lift(&dims)), identity_n(&dims));
    }

    #[test]
    fn pi_composed_with_lift_embedding_is_tau() {
        let dims = GroupDims::new(1, 2, 1);
        for mu in Factor::ALL {
            let n = dims.n_of(mu);
            let h = HPoint {
                mu,
                z: (0..n).map(|j| c(0.3 + j as f64, -0.2 * j as f64)).collect(),
                t: 1.25,
            };
            let via_lift = project_pi(&embed_lift(&dims, &h).unwrap());
            let direct = embed_tau(&dims, &h).unwrap();
            assert_eq!(via_lift, direct);
        }
    }

    #[test]
    fn coords_round_trip() {
        let dims = GroupDims::new(1, 0, 2);
        let g = PointN {
            z: vec![c(1.0, 2.0), c(3.0, 4.0), c(5.0, 6.0)],
            t: [7.0, 8.0],
        };
        let v = pointn_coords(&dims, &g);
        assert_eq!(v, vec![1.0, 2.0, 3.0, 5.0, 4.0, 6.0, 7.0, 8.0]);
        assert_eq!(pointn_from_coords(&dims, &v).unwrap(), g);
    }

    #[test]
    fn vector_field_on_linear_function() {
        // Y_1 t = 2 x_2 at any point of a 1-dim factor.
        let dims = GroupDims::new(1, 0, 0);
        let g = HPoint { mu: Factor::H1, z: vec![c(0.7, -1.3)], t: 0.4 };
        let f = |h: &HPoint| h.t;
        let v = apply_y_single(&dims, 0, &f, &g, default_fd_step(norm_inf(&g))).unwrap();
        assert!((v - 2.0 * (-1.3)).abs() < 1e-7, "got {v}");
        // Constants are annihilated.
        let k = |_: &HPoint| 42.0;
        let idx = MultiIndex::new(Factor::H1, vec![1, 1]);
        let w = apply_y(&dims, &idx, &k, &g, 1e-4).unwrap();
        assert!(w.abs() < 1e-8);
    }

    #[test]
    fn bracket_relation() {
        // [Y_1, Y_2] f = -4 df/dt for a smooth test function.
        let dims = GroupDims::new(1, 0, 0);
        let f = |h: &HPoint| (h.z[0].re * 0.5 + h.z[0].im).sin() * (0.3 * h.t).cos() + h.t * h.z[0].re;
        let g = HPoint { mu: Factor::H1, z: vec![c(0.3, -0.2)], t: 0.7 };
        let step = 1e-4;
        let y12 = |h: &HPoint| apply_y_single(&dims, 1, &f, h, step).unwrap();
        let y21 = |h: &HPoint| apply_y_single(&dims, 0, &f, h, step).unwrap();
        let commutator = apply_y_single(&dims, 0, &y12, &g, step).unwrap()
            - apply_y_single(&dims, 1, &y21, &g, step).unwrap();
        let dt = {
            let mut gp = g.clone();
            gp.t += step;
            let mut gm = g.clone();
            gm.t -= step;
            (f(&gp) - f(&gm)) / (2.0 * step)
        };
        assert!(
            (commutator + 4.0 * dt).abs() < 1e-5,
            "commutator {commutator} vs -4 df/dt {}",
            -4.0 * dt
        );
    }

    #[test]
    fn abelian_sub_laplacian_is_negative_second_derivative() {
        let dims = GroupDims::abelian();
        let f = |h: &HPoint| h.t * h.t;
        let g = HPoint { mu: Factor::H2, z: vec![], t: 0.9 };
        let v = sub_laplacian_h(&dims, &f, 1, &g, 0.05).unwrap();
        assert!((v + 2.0).abs() < 1e-9, "got {v}");
        let konst = |_: &HPoint| 3.0;
        assert!(sub_laplacian_h(&dims, &konst, 1, &g, 0.05).unwrap().abs() < 1e-9);
    }

    #[test]
    fn sub_laplacian_matches_symbolic_expansion_on_gaussian() {
        // Delta_1 f for f = exp(-x1^2) depends on t only through the frame:
        // -Y1^2 f - Y2^2 f with Y1 = dx1 + 2 x2 dt, Y2 = dx2 - 2 x1 dt.
        // For f independent of t and x2: Delta f = -f''(x1).
        let dims = GroupDims::new(1, 0, 0);
        let f = |h: &HPoint| (-h.z[0].re * h.z[0].re).exp();
        let g = HPoint { mu: Factor::H1, z: vec![c(0.4, 1.1)], t: -0.3 };
        let v = sub_laplacian_h(&dims, &f, 1, &g, 1e-3).unwrap();
        let x = 0.4f64;
        let exact = -(4.0 * x * x - 2.0) * (-x * x).exp();
        assert!((v - exact).abs() < 1e-5, "got {v}, want {exact}");
    }

    proptest! {
        #[test]
        fn mul_n_is_associative(vals in proptest::collection::vec(-2.0f64..2.0, 12)) {
            let dims = GroupDims::new(1, 1, 1);
            let mk = |s: &[f64]| PointN {
                z: vec![c(s[0], s[1]), c(s[2], s[3])],
                t: [0.0, 0.0],
            };
            // Build three points from the sampled slice and fill t's.
            let mut a = mk(&vals[0..4]);
            let mut b = mk(&vals[4..8]);
            let mut g3 = mk(&vals[8..12]);
            a.z.push(c(vals[4], vals[8]));
            b.z.push(c(vals[0], vals[11]));
            g3.z.push(c(vals[7], vals[3]));
            a.t = [vals[5], vals[6]];
            b.t = [vals[9], vals[10]];
            g3.t = [vals[1], vals[2]];
            let ab_c = mul_n(&dims, &mul_n(&dims, &a, &b).unwrap(), &g3).unwrap();
            let a_bc = mul_n(&dims, &a, &mul_n(&dims, &b, &g3).unwrap()).unwrap();
            for (x, y) in ab_c.z.iter().zip(&a_bc.z) {
                prop_assert!((x - y).norm() < 1e-12);
            }
            prop_assert!((ab_c.t[0] - a_bc.t[0]).abs() < 1e-12);
            prop_assert!((ab_c.t[1] - a_bc.t[1]).abs() < 1e-12);
        }

        #[test]
        fn pi_is_a_homomorphism(vals in proptest::collection::vec(-3.0f64..3.0, 14)) {
            let dims = GroupDims::new(1, 1, 0);
            let mk = |s: &[f64]| PointLift {
                z: vec![c(s[0], s[1]), c(s[2], s[3])],
                u: [s[4], s[5], s[6]],
            };
            let a = mk(&vals[0..7]);
            let b = mk(&vals[7..14]);
            let lhs = project_pi(&mul_lift(&dims, &a, &b).unwrap());
            let rhs = mul_n(&dims, &project_pi(&a), &project_pi(&b)).unwrap();
            for (x, y) in lhs.z.iter().zip(&rhs.z) {
                prop_assert!((x - y).norm() < 1e-12);
            }
            prop_assert!((lhs.t[0] - rhs.t[0]).abs() < 1e-12);
            prop_assert!((lhs.t[1] - rhs.t[1]).abs() < 1e-12);
        }

        #[test]
        fn gauge_norm_quasi_triangle(vals in proptest::collection::vec(-2.0f64..2.0, 6)) {
            let a = HPoint { mu: Factor::H1, z: vec![c(vals[0], vals[1])], t: vals[2] };
            let b = HPoint { mu: Factor::H1, z: vec![c(vals[3], vals[4])], t: vals[5] };
            let ab = mul_h(&a, &b).unwrap();
            // ||ab|| <= C (||a|| + ||b||) with C = 2 for this gauge.
            prop_assert!(norm_inf(&ab) <= 2.0 * (norm_inf(&a) + norm_inf(&b)) + 1e-12);
        }
    }
}
