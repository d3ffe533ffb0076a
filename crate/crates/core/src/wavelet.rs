//! One-dimensional wavelet machinery for the abelian degenerate mode, where
//! each factor is a line with the parabolic dilation `t -> a^2 t` and the
//! normalized dilate is `phi_r(t) = r^{-2} phi(t / r^2)`.
//!
//! Profiles carry closed-form antiderivatives and first-moment
//! antiderivatives, so axis convolutions use exact cell masses plus a
//! first-moment correction (fourth-order accurate for smooth fields even
//! when the kernel is much narrower than the grid).

use crate::error::{Error, Result};
use crate::field::RField;
use crate::quad::{self, QuadOpts};
use serde::Serialize;
use std::f64::consts::PI;

/// `d^n/dt^n exp(-a t^2)` by the Hermite-style recursion.
pub fn gauss_deriv(n: usize, a: f64, t: f64) -> f64 {
    let g = (-a * t * t).exp();
    if n == 0 {
        return g;
    }
    let mut dm1 = g;
    let mut d = -2.0 * a * t * g;
    for k in 1..n {
        let next = -2.0 * a * (t * d + k as f64 * dm1);
        dm1 = d;
        d = next;
    }
    d
}

/// A 1D profile with closed-form integral data.
#[derive(Clone, Debug, Serialize)]
pub enum Profile {
    /// `c (t^2 - 1) exp(-t^2/2)`, the second derivative of a Gaussian.
    MexicanHat { c: f64 },
    /// Polynomial supported on `[-1, 1]` given by coefficients in `t`.
    Poly { coeffs: Vec<f64> },
    /// Self-convolution of a scaled Mexican hat pair:
    /// `c^2 sqrt(pi) d^4/dt^4 exp(-t^2/4)`.
    HatPair { c2: f64 },
}

impl Profile {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            Profile::MexicanHat { c } => c * (t * t - 1.0) * (-0.5 * t * t).exp(),
            Profile::Poly { coeffs } => {
                if t.abs() >= 1.0 {
                    0.0
                } else {
                    horner(coeffs, t)
                }
            }
            Profile::HatPair { c2 } => c2 * PI.sqrt() * gauss_deriv(4, 0.25, t),
        }
    }

    /// Antiderivative vanishing at minus infinity.
    pub fn antideriv(&self, t: f64) -> f64 {
        match self {
            Profile::MexicanHat { c } => -c * t * (-0.5 * t * t).exp(),
            Profile::Poly { coeffs } => {
                let prim = integrate_coeffs(coeffs);
                if t <= -1.0 {
                    0.0
                } else if t >= 1.0 {
                    horner(&prim, 1.0) - horner(&prim, -1.0)
                } else {
                    horner(&prim, t) - horner(&prim, -1.0)
                }
            }
            Profile::HatPair { c2 } => c2 * PI.sqrt() * gauss_deriv(3, 0.25, t),
        }
    }

    /// Antiderivative of `t -> t * profile(t)` vanishing at minus infinity.
    pub fn moment_antideriv(&self, t: f64) -> f64 {
        match self {
            // int t g'' = t g' - g; here g = e^{-t^2/2} scaled by c.
            Profile::MexicanHat { c } => {
                let g = (-0.5 * t * t).exp();
                c * (-t * t * g - g) - c * (-0.0f64)
            }
            Profile::Poly { coeffs } => {
                let mut shifted = vec![0.0];
                shifted.extend_from_slice(coeffs);
                let prim = integrate_coeffs(&shifted);
                if t <= -1.0 {
                    0.0
                } else if t >= 1.0 {
                    horner(&prim, 1.0) - horner(&prim, -1.0)
                } else {
                    horner(&prim, t) - horner(&prim, -1.0)
                }
            }
            // int t G'''' = t G''' - G''.
            Profile::HatPair { c2 } => {
                c2 * PI.sqrt() * (t * gauss_deriv(3, 0.25, t) - gauss_deriv(2, 0.25, t))
            }
        }
    }

    /// Antiderivative of `t -> t^2 profile(t)`, when available in closed
    /// form; used for the second-moment quadrature correction.
    pub fn moment2_antideriv(&self, t: f64) -> Option<f64> {
        match self {
            Profile::MexicanHat { .. } => None,
            Profile::Poly { coeffs } => {
                let mut shifted = vec![0.0, 0.0];
                shifted.extend_from_slice(coeffs);
                let prim = integrate_coeffs(&shifted);
                Some(if t <= -1.0 {
                    0.0
                } else if t >= 1.0 {
                    horner(&prim, 1.0) - horner(&prim, -1.0)
                } else {
                    horner(&prim, t) - horner(&prim, -1.0)
                })
            }
            // int t^2 G'''' = t^2 G''' - 2 t G'' + 2 G'.
            Profile::HatPair { c2 } => Some(
                c2 * PI.sqrt()
                    * (t * t * gauss_deriv(3, 0.25, t) - 2.0 * t * gauss_deriv(2, 0.25, t)
                        + 2.0 * gauss_deriv(1, 0.25, t)),
            ),
        }
    }

    /// Fourier transform `int f(t) e^{-i xi t} dt` (real for even profiles;
    /// computed by quadrature for polynomials).
    pub fn hat(&self, xi: f64) -> f64 {
        match self {
            Profile::MexicanHat { c } => {
                -c * xi * xi * (2.0 * PI).sqrt() * (-0.5 * xi * xi).exp()
            }
            _ => {
                let f = |t: f64| self.eval(t) * (xi * t).cos();
                let opts = QuadOpts { abs_tol: 1e-11, rel_tol: 1e-11, max_subdiv: 20_000 };
                quad::integrate(f, -1.0, 1.0, opts).map(|r| r.value).unwrap_or(f64::NAN)
            }
        }
    }

    pub fn scale(&self, factor: f64) -> Profile {
        match self {
            Profile::MexicanHat { c } => Profile::MexicanHat { c: c * factor },
            Profile::Poly { coeffs } => {
                Profile::Poly { coeffs: coeffs.iter().map(|v| v * factor).collect() }
            }
            Profile::HatPair { c2 } => Profile::HatPair { c2: c2 * factor },
        }
    }

    /// Mean value `int profile`.
    pub fn mass(&self) -> f64 {
        self.antideriv(1e6)
    }
}

fn horner(coeffs: &[f64], t: f64) -> f64 {
    let mut acc = 0.0;
    for &c in coeffs.iter().rev() {
        acc = acc * t + c;
    }
    acc
}

fn integrate_coeffs(coeffs: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0];
    for (k, &c) in coeffs.iter().enumerate() {
        out.push(c / (k as f64 + 1.0));
    }
    out
}

/// `(1 - t^2)^p` as a coefficient vector.
pub fn bump_poly(p: usize) -> Vec<f64> {
    let mut coeffs = vec![1.0];
    for _ in 0..p {
        // Multiply by (1 - t^2).
        let mut next = vec![0.0; coeffs.len() + 2];
        for (k, &c) in coeffs.iter().enumerate() {
            next[k] += c;
            next[k + 2] -= c;
        }
        coeffs = next;
    }
    coeffs
}

/// Formal second derivative of a coefficient vector.
pub fn poly_deriv2(coeffs: &[f64]) -> Vec<f64> {
    let d1: Vec<f64> = coeffs
        .iter()
        .enumerate()
        .skip(1)
        .map(|(k, &c)| c * k as f64)
        .collect();
    d1.iter()
        .enumerate()
        .skip(1)
        .map(|(k, &c)| c * k as f64)
        .collect()
}

/// The degenerate factor sub-Laplacian `(-d^2/dt^2)^m` applied to a
/// polynomial profile.
pub fn poly_laplacian_power(coeffs: &[f64], m: u32) -> Vec<f64> {
    let mut cur = coeffs.to_vec();
    for _ in 0..m {
        cur = poly_deriv2(&cur).iter().map(|v| -v).collect();
    }
    cur
}

// ---------------------------------------------------------------------------
// Axis kernels: cell-averaged scaled profiles for lattice convolutions.
// ---------------------------------------------------------------------------

/// Which lattice direction a 1D kernel convolves along (the two central
/// axes, or the diagonal reached by the third embedding).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AxisDir {
    T1,
    T2,
    Diag,
}

/// A 1D convolution kernel resolved into lattice cells: exact cell masses
/// and first moments about the cell centers.
#[derive(Clone, Debug)]
pub struct AxisKernel {
    pub klo: i64,
    pub mass: Vec<f64>,
    pub moment: Vec<f64>,
    /// Second moments about the cell centers (empty when the profile lacks
    /// a closed-form second-moment antiderivative).
    pub moment2: Vec<f64>,
}

impl AxisKernel {
    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }
}

/// Build the cell decomposition of the scaled profile `r^{-2} f(t / r^2)`
/// over offsets `|k h| <= extent`.  Cell masses and moments are exact
/// differences of the closed-form antiderivatives.
pub fn axis_kernel(profile: &Profile, s: f64, h: f64, extent: f64) -> AxisKernel {
    let kmax = (extent / h).ceil() as i64;
    let klo = -kmax;
    let n = (2 * kmax + 1) as usize;
    let mut mass = vec![0.0; n];
    let mut moment = vec![0.0; n];
    let has_m2 = profile.moment2_antideriv(0.0).is_some();
    let mut moment2 = if has_m2 { vec![0.0; n] } else { Vec::new() };
    for i in 0..n {
        let k = klo + i as i64;
        let a = (k as f64 - 0.5) * h;
        let b = (k as f64 + 0.5) * h;
        mass[i] = profile.antideriv(b / s) - profile.antideriv(a / s);
        // First moment about the cell center: s * int u f(u) du over the
        // scaled cell, minus center * mass.
        let m1_raw = s * (profile.moment_antideriv(b / s) - profile.moment_antideriv(a / s));
        let c = k as f64 * h;
        moment[i] = m1_raw - c * mass[i];
        if has_m2 {
            let m2_raw = s * s
                * (profile.moment2_antideriv(b / s).unwrap()
                    - profile.moment2_antideriv(a / s).unwrap());
            moment2[i] = m2_raw - 2.0 * c * m1_raw + c * c * mass[i];
        }
    }
    AxisKernel { klo, mass, moment, moment2 }
}

/// Accumulate several scaled profiles (e.g. a scale-window sum) into one
/// cell kernel.
pub fn axis_kernel_sum(
    profile: &Profile,
    scales: &[f64],
    weight: f64,
    h: f64,
    extent: f64,
) -> AxisKernel {
    let kmax = (extent / h).ceil() as i64;
    let klo = -kmax;
    let n = (2 * kmax + 1) as usize;
    let mut mass = vec![0.0; n];
    let mut moment = vec![0.0; n];
    let has_m2 = profile.moment2_antideriv(0.0).is_some();
    let mut moment2 = if has_m2 { vec![0.0; n] } else { Vec::new() };
    for &r in scales {
        let s = r * r;
        let k1 = axis_kernel(profile, s, h, extent);
        for i in 0..n {
            mass[i] += weight * k1.mass[i];
            moment[i] += weight * k1.moment[i];
            if has_m2 {
                moment2[i] += weight * k1.moment2[i];
            }
        }
    }
    AxisKernel { klo, mass, moment, moment2 }
}

/// Convolve a 2D central-plane field along an axis or the diagonal with a
/// cell kernel: `out(x) = sum_k [f(x - k e) m_k - f'(x - k e) mu_k]`,
/// the first-moment correction making the quadrature fourth-order on
/// smooth fields.
pub fn convolve_axis(f: &RField, dir: AxisDir, ker: &AxisKernel) -> Result<RField> {
    if f.dims.n() != 0 || f.grid.ndim() != 2 {
        return Err(Error::InvalidArg("axis convolution needs a 2D central-plane field".into()));
    }
    let n1 = f.grid.axes[0].count;
    let n2 = f.grid.axes[1].count;
    let h = f.grid.axes[0].spacing;
    if (f.grid.axes[1].spacing - h).abs() > 1e-14 * h {
        return Err(Error::InvalidArg("axis convolution needs equal spacings".into()));
    }
    let (di, dj) = match dir {
        AxisDir::T1 => (1i64, 0i64),
        AxisDir::T2 => (0, 1),
        AxisDir::Diag => (1, 1),
    };
    // Derivative along the direction by central differences.
    let at = |v: &[f64], i: i64, j: i64| -> f64 {
        if i < 0 || j < 0 || i >= n1 as i64 || j >= n2 as i64 {
            0.0
        } else {
            v[(i as usize) * n2 + j as usize]
        }
    };
    let mut deriv = vec![0.0; n1 * n2];
    let mut deriv2 = vec![0.0; n1 * n2];
    for i in 0..n1 as i64 {
        for j in 0..n2 as i64 {
            let idx = (i as usize) * n2 + j as usize;
            deriv[idx] =
                (at(&f.values, i + di, j + dj) - at(&f.values, i - di, j - dj)) / (2.0 * h);
            deriv2[idx] = (at(&f.values, i + di, j + dj) - 2.0 * f.values[idx]
                + at(&f.values, i - di, j - dj))
                / (h * h);
        }
    }
    let with_m2 = !ker.moment2.is_empty();
    use rayon::prelude::*;
    let values: Vec<f64> = (0..n1 * n2)
        .into_par_iter()
        .map(|flat| {
            let i = (flat / n2) as i64;
            let j = (flat % n2) as i64;
            let mut acc = 0.0;
            for (kk, (&m, &mm)) in ker.mass.iter().zip(&ker.moment).enumerate() {
                let k = ker.klo + kk as i64;
                let fi = i - k * di;
                let fj = j - k * dj;
                let m2 = if with_m2 { ker.moment2[kk] } else { 0.0 };
                if m == 0.0 && mm == 0.0 && m2 == 0.0 {
                    continue;
                }
                acc += at(&f.values, fi, fj) * m - at(&deriv, fi, fj) * mm
                    + 0.5 * at(&deriv2, fi, fj) * m2;
            }
            acc
        })
        .collect();
    Ok(RField { domain: f.domain, dims: f.dims, grid: f.grid.clone(), values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{AxisSpec, DomainTag, Field, GridSpec};
    use crate::group::GroupDims;

    #[test]
    fn gauss_deriv_matches_finite_differences() {
        let a = 0.25;
        for n in 1..=4usize {
            for t in [-1.7, 0.0, 0.4, 2.2] {
                let h = 1e-4;
                let fd = (gauss_deriv(n - 1, a, t + h) - gauss_deriv(n - 1, a, t - h)) / (2.0 * h);
                let an = gauss_deriv(n, a, t);
                assert!((fd - an).abs() < 1e-6, "n={n} t={t}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn profile_antiderivatives_are_consistent() {
        let profiles = vec![
            Profile::MexicanHat { c: 0.8 },
            Profile::Poly { coeffs: bump_poly(5) },
            Profile::Poly { coeffs: poly_laplacian_power(&bump_poly(6), 1) },
            Profile::HatPair { c2: 0.64 },
        ];
        for p in profiles {
            for t in [-0.9, -0.3, 0.2, 0.77] {
                let h = 1e-5;
                let da = (p.antideriv(t + h) - p.antideriv(t - h)) / (2.0 * h);
                assert!((da - p.eval(t)).abs() < 1e-7, "antideriv mismatch at {t}: {da} vs {}", p.eval(t));
                let dm = (p.moment_antideriv(t + h) - p.moment_antideriv(t - h)) / (2.0 * h);
                assert!((dm - t * p.eval(t)).abs() < 1e-7, "moment mismatch at {t}");
            }
        }
    }

    #[test]
    fn laplacian_profile_has_zero_mass_and_moment() {
        let psi = Profile::Poly { coeffs: poly_laplacian_power(&bump_poly(6), 1) };
        assert!(psi.mass().abs() < 1e-14);
        assert!((psi.moment_antideriv(2.0) - psi.moment_antideriv(-2.0)).abs() < 1e-14);
    }

    #[test]
    fn hat_pair_is_the_fourier_square() {
        // (phi * phi)^(xi) = phi_hat(xi)^2 for the Mexican hat.
        let c = (2.0f64 / PI).sqrt();
        let pair = Profile::HatPair { c2: c * c };
        for xi in [0.3, 1.0, 2.4] {
            let direct = quad::integrate(
                |t| pair.eval(t) * (xi * t).cos(),
                -30.0,
                30.0,
                QuadOpts::with_tol(1e-12),
            )
            .unwrap()
            .value;
            let hat = Profile::MexicanHat { c }.hat(xi);
            assert!((direct - hat * hat).abs() < 1e-8, "xi={xi}: {direct} vs {}", hat * hat);
        }
    }

    #[test]
    fn axis_kernel_mass_totals() {
        let p = Profile::Poly { coeffs: bump_poly(5) };
        let total: f64 = p.antideriv(2.0);
        for s in [0.01, 0.5, 7.0] {
            let k = axis_kernel(&p, s, 0.25, 40.0 * s.max(1.0));
            let got: f64 = k.mass.iter().sum();
            assert!((got - total).abs() < 1e-12, "s={s}: {got} vs {total}");
        }
    }

    #[test]
    fn axis_convolution_matches_quadrature_oracle() {
        let dims = GroupDims::abelian();
        let grid = GridSpec::new(vec![
            AxisSpec::symmetric(6.0, 81),
            AxisSpec::symmetric(6.0, 81),
        ])
        .unwrap();
        let f = Field::from_fn(DomainTag::BaseGroup, dims, grid, |c| {
            (-(c[0] * c[0] + 0.7 * c[1] * c[1])).exp()
        });
        for (prof, tol) in [
            (Profile::MexicanHat { c: 1.0 }, 5e-3),
            (Profile::Poly { coeffs: poly_laplacian_power(&bump_poly(6), 1) }, 8e-4),
            (Profile::HatPair { c2: 2.0 / PI }, 8e-4),
        ] {
            let s = 0.8;
            let ker = axis_kernel(&prof, s, f.grid.axes[0].spacing, 12.0);
            for dir in [AxisDir::T1, AxisDir::Diag] {
                let out = convolve_axis(&f, dir, &ker).unwrap();
                // Oracle at a grid point by quadrature.
                let (i, j) = (42usize, 39usize);
                let x = [f.grid.axes[0].coord(i), f.grid.axes[1].coord(j)];
                let oracle = quad::integrate(
                    |u| {
                        let g = match dir {
                            AxisDir::T1 => [x[0] - u, x[1]],
                            AxisDir::Diag => [x[0] - u, x[1] - u],
                            AxisDir::T2 => unreachable!(),
                        };
                        (-(g[0] * g[0] + 0.7 * g[1] * g[1])).exp() * prof.eval(u / s) / s
                    },
                    -12.0,
                    12.0,
                    QuadOpts::with_tol(1e-12),
                )
                .unwrap()
                .value;
                let got = out.values[i * 81 + j];
                assert!(
                    (got - oracle).abs() < tol,
                    "{dir:?}: {got} vs {oracle}"
                );
            }
        }
    }

    #[test]
    fn narrow_kernel_convolution_stays_accurate() {
        // Kernel much narrower than the grid: the cell masses see it exactly.
        let dims = GroupDims::abelian();
        let grid = GridSpec::new(vec![
            AxisSpec::symmetric(5.0, 51),
            AxisSpec::symmetric(5.0, 51),
        ])
        .unwrap();
        let f = Field::from_fn(DomainTag::BaseGroup, dims, grid, |c| {
            (-(c[0] * c[0] + c[1] * c[1]) / 4.0).exp()
        });
        let p = Profile::Poly { coeffs: bump_poly(5) };
        let mass: f64 = p.antideriv(2.0);
        let s = 1e-4; // support width 1e-4 vs spacing 0.2
        let ker = axis_kernel(&p, s, f.grid.axes[0].spacing, 1.0);
        let out = convolve_axis(&f, AxisDir::T2, &ker).unwrap();
        // Should be close to mass * f.
        let mut worst: f64 = 0.0;
        for (o, v) in out.values.iter().zip(&f.values) {
            worst = worst.max((o - mass * v).abs());
        }
        assert!(worst < 1e-6 * mass, "narrow kernel error {worst}");
    }
}
