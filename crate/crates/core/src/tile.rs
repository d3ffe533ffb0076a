//! Self-affine tiling of a Heisenberg group `R^{2nu} x R` with interleaved
//! symplectic pairs `(y_{2l-1}, y_{2l})`.  The basic tile sits over the unit
//! cube with a fractal height function built from binary digit expansions;
//! integer translates tile the group, dyadic dilates refine it, and each
//! tile splits into `2^{2nu+2}` congruent subtiles.
//!
//! Every `f64` is a dyadic rational, so the height series terminates after
//! finitely many terms and lattice-aligned geometry is exact; verdicts near
//! the fractal time-boundary are reported as `Uncertain` rather than guessed.

use crate::error::{Error, Result};
use crate::util::seeded_rng;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

/// Symplectic form `B(y, y') = sum_l (y'_{2l-1} y_{2l} - y_{2l-1} y'_{2l})`.
pub fn b_form(y: &[f64], yp: &[f64]) -> Result<f64> {
    if y.len() != yp.len() || y.len() % 2 != 0 {
        return Err(Error::DimMismatch("b_form needs equal even lengths".into()));
    }
    let mut s = 0.0;
    for l in 0..y.len() / 2 {
        s += yp[2 * l] * y[2 * l + 1] - y[2 * l] * yp[2 * l + 1];
    }
    Ok(s)
}

fn b_form_unchecked(y: &[f64], yp: &[f64]) -> f64 {
    let mut s = 0.0;
    for l in 0..y.len() / 2 {
        s += yp[2 * l] * y[2 * l + 1] - y[2 * l] * yp[2 * l + 1];
    }
    s
}

/// Integer symplectic form for lattice elements.
pub fn b_form_int(y: &[i64], yp: &[i64]) -> i64 {
    let mut s = 0;
    for l in 0..y.len() / 2 {
        s += yp[2 * l] * y[2 * l + 1] - y[2 * l] * yp[2 * l + 1];
    }
    s
}

/// Fractal height function
/// `f_o(y) = sum_m 4^{-m} B([2^m y] mod 2, <2^m y>)` on `[0,1)^{2nu}`.
///
/// The series is exact for every `f64` input: once all components of
/// `2^m y` are integers the remaining terms vanish.  `tol` additionally
/// truncates when the tail bound `nu 4^{-m} / 3` drops below it.
pub fn f_o(y: &[f64], tol: f64) -> f64 {
    let nu = y.len() / 2;
    let mut acc = 0.0;
    let mut scaled: Vec<f64> = y.to_vec();
    let mut digits = vec![0.0; y.len()];
    let mut fracs = vec![0.0; y.len()];
    let mut weight = 1.0;
    for _m in 1..=200 {
        weight *= 0.25;
        let mut all_int = true;
        for k in 0..scaled.len() {
            scaled[k] *= 2.0;
            let fl = scaled[k].floor();
            digits[k] = (fl as i64).rem_euclid(2) as f64;
            fracs[k] = scaled[k] - fl;
            if fracs[k] != 0.0 {
                all_int = false;
            }
        }
        acc += weight * b_form_unchecked(&digits, &fracs);
        if all_int || weight * nu as f64 / 3.0 < tol.min(1e-18) {
            break;
        }
    }
    acc
}

/// Three-valued membership verdict: points within tolerance of the fractal
/// time-boundary are flagged rather than resolved by guessing.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize)]
pub enum Verdict {
    In,
    Out,
    Uncertain,
}

/// Address of a tile: `delta_{2^j}((a, k) . T_o)` for a lattice element
/// `(a, k)` of the integer Heisenberg lattice.
#[derive(Clone, PartialEq, Eq, Debug, Serialize)]
pub struct TileId {
    pub nu: usize,
    pub j: i64,
    pub a: Vec<i64>,
    pub k: i64,
}

/// Lattice multiplication `(a, k)(a', k') = (a + a', k + k' + B(a, a'))`.
pub fn lattice_mul(a: (&[i64], i64), b: (&[i64], i64)) -> (Vec<i64>, i64) {
    let y: Vec<i64> = a.0.iter().zip(b.0).map(|(x, w)| x + w).collect();
    (y, a.1 + b.1 + b_form_int(a.0, b.0))
}

/// A point of the tiling group in `(y, s)` coordinates.
#[derive(Clone, Debug)]
pub struct TilePoint {
    pub y: Vec<f64>,
    pub s: f64,
}

/// Reduce `p` by the scale and the lattice: returns the residual
/// `(y', s')` with `y' in [0,1)^{2nu}` plus the lattice cell `a` at scale j.
fn reduce(j: i64, p: &TilePoint) -> (Vec<i64>, Vec<f64>, f64) {
    let scale = 2.0f64.powi(-j as i32);
    let sscale = scale * scale;
    let qy: Vec<f64> = p.y.iter().map(|v| v * scale).collect();
    let qs = p.s * sscale;
    let a: Vec<i64> = qy.iter().map(|v| v.floor() as i64).collect();
    let af: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = qy.iter().zip(&a).map(|(v, &w)| v - w as f64).collect();
    let s = qs - b_form_unchecked(&af, &qy);
    (a, y, s)
}

/// Membership of `p` in the tile, with `Uncertain` within `tol` of the
/// fractal time-boundary.
pub fn in_tile(id: &TileId, p: &TilePoint, tol: f64) -> Verdict {
    let (a, y, mut s) = reduce(id.j, p);
    if a != id.a {
        return Verdict::Out;
    }
    s -= id.k as f64;
    let base = f_o(&y, tol);
    half_open_verdict(s - base, 1.0, tol)
}

/// Half-open membership `d in [0, span)` with a tolerance band.  The height
/// function is evaluated exactly for dyadic inputs, so exact boundary hits
/// are decidable: only strictly-near, non-exact values are `Uncertain`.
fn half_open_verdict(d: f64, span: f64, tol: f64) -> Verdict {
    if d == 0.0 {
        return Verdict::In;
    }
    if d == span {
        return Verdict::Out;
    }
    let near = (d.abs() < tol) || ((d - span).abs() < tol);
    if near {
        Verdict::Uncertain
    } else if d > 0.0 && d < span {
        Verdict::In
    } else {
        Verdict::Out
    }
}

/// Constructive point location: the unique tile of scale `j` containing `p`.
pub fn tile_of_point(j: i64, p: &TilePoint, tol: f64) -> (TileId, Verdict) {
    let (a, y, s) = reduce(j, p);
    let d = s - f_o(&y, tol);
    let k = d.floor() as i64;
    let frac = d - k as f64;
    let verdict = if frac == 0.0 {
        Verdict::In
    } else if frac < tol || frac > 1.0 - tol {
        Verdict::Uncertain
    } else {
        Verdict::In
    };
    (TileId { nu: y.len() / 2, j, a, k }, verdict)
}

/// Sample a uniform point of the tile (uniform in `y`, uniform over the unit
/// time-interval above the height graph).
pub fn sample_tile(id: &TileId, rng: &mut impl Rng, tol: f64) -> TilePoint {
    let nu2 = 2 * id.nu;
    let y: Vec<f64> = (0..nu2).map(|_| rng.gen::<f64>()).collect();
    let s = f_o(&y, tol) + rng.gen::<f64>();
    // (a, k) . (y, s), then dilate by 2^j.
    let af: Vec<f64> = id.a.iter().map(|&v| v as f64).collect();
    let py: Vec<f64> = af.iter().zip(&y).map(|(a, v)| a + v).collect();
    let ps = id.k as f64 + s + b_form_unchecked(&af, &y);
    let scale = 2.0f64.powi(id.j as i32);
    TilePoint { y: py.iter().map(|v| v * scale).collect(), s: ps * scale * scale }
}

/// Gauge norm on the tiling group: `max(|y_i|, |s|^{1/2})`.
pub fn tile_gauge(p: &TilePoint) -> f64 {
    let mut m = p.s.abs().sqrt();
    for v in &p.y {
        m = m.max(v.abs());
    }
    m
}

fn tile_mul(a: &TilePoint, b: &TilePoint) -> TilePoint {
    TilePoint {
        y: a.y.iter().zip(&b.y).map(|(x, w)| x + w).collect(),
        s: a.s + b.s + b_form_unchecked(&a.y, &b.y),
    }
}

fn tile_inv(a: &TilePoint) -> TilePoint {
    TilePoint { y: a.y.iter().map(|v| -v).collect(), s: -a.s }
}

#[derive(Clone, Debug, Serialize)]
pub struct TilingReport {
    pub nu: usize,
    pub scale: i64,
    pub samples: usize,
    pub tol: f64,
    pub partition_violations: usize,
    pub uncertain_fraction: f64,
    pub nested_violations: usize,
    pub self_similar_violations: usize,
    pub subtiles_seen: usize,
    pub subtiles_expected: usize,
    pub covariance_violations: usize,
    pub ball_c1: f64,
    pub ball_c2: f64,
}

impl TilingReport {
    pub fn pass(&self) -> bool {
        self.partition_violations == 0
            && self.nested_violations == 0
            && self.self_similar_violations == 0
            && self.covariance_violations == 0
            && self.subtiles_seen == self.subtiles_expected
            && self.uncertain_fraction < 1e-3
    }
}

/// Monte-Carlo certification of the tiling properties at one scale:
/// exactly-one membership, nestedness into the next scale, self-similarity
/// with `2^{2nu+2}` subtiles, lattice covariance, and a fitted ball sandwich
/// for the basic tile.
pub fn verify_tiling(
    nu: usize,
    scale: i64,
    samples: usize,
    seed: u64,
    tol: f64,
) -> TilingReport {
    let nu2 = 2 * nu;
    let jf = 2.0f64.powi(scale as i32);
    let chunked: Vec<usize> = (0..samples).collect();
    let (partition_violations, uncertain, nested_violations, self_similar_violations, cov_violations, subtile_mask) =
        chunked
            .par_chunks(4096)
            .map(|chunk| {
                let mut rng = seeded_rng(seed, 1 + chunk[0] as u64);
                let mut part = 0usize;
                let mut unc = 0usize;
                let mut nest = 0usize;
                let mut selfsim = 0usize;
                let mut cov = 0usize;
                let mut mask: u64 = 0;
                for _ in chunk {
                    // Partition: random point in a box spanning several cells.
                    let p = TilePoint {
                        y: (0..nu2).map(|_| (rng.gen::<f64>() * 6.0 - 3.0) * jf).collect(),
                        s: (rng.gen::<f64>() * 8.0 - 4.0) * jf * jf,
                    };
                    let (id, v) = tile_of_point(scale, &p, tol);
                    if v == Verdict::Uncertain {
                        unc += 1;
                    } else {
                        if in_tile(&id, &p, tol) != Verdict::In {
                            part += 1;
                        }
                        // Neighbors in the time direction must reject.
                        for dk in [-1i64, 1] {
                            let mut nid = id.clone();
                            nid.k += dk;
                            if in_tile(&nid, &p, tol) == Verdict::In {
                                part += 1;
                            }
                        }
                    }

                    // Nestedness: points of this tile land in one parent.
                    let (parent, pv) = tile_of_point(scale + 1, &p, tol);
                    if pv == Verdict::In && v == Verdict::In {
                        let q = sample_tile(&id, &mut rng, tol);
                        let (parent_q, qv) = tile_of_point(scale + 1, &q, tol);
                        if qv == Verdict::In && parent_q != parent {
                            nest += 1;
                        }
                    }

                    // Self-similarity: a point of delta_2(T_o) lies in a
                    // subtile addressed by the digit set.
                    let base = TileId { nu, j: 0, a: vec![0; nu2], k: 0 };
                    let h = sample_tile(&base, &mut rng, tol);
                    let doubled = TilePoint {
                        y: h.y.iter().map(|v| 2.0 * v).collect(),
                        s: 4.0 * h.s,
                    };
                    let (sub, sv) = tile_of_point(0, &doubled, tol);
                    if sv == Verdict::In {
                        let digits_ok = sub.a.iter().all(|&x| x == 0 || x == 1)
                            && (0..4).contains(&sub.k);
                        if digits_ok {
                            let mut bit = sub.k as u64;
                            for (i, &x) in sub.a.iter().enumerate() {
                                bit |= (x as u64) << (2 + i);
                            }
                            mask |= 1u64 << bit;
                        } else {
                            selfsim += 1;
                        }
                    }

                    // Lattice covariance: tile(g q) = g tile(q) exactly.
                    let ga: Vec<i64> = (0..nu2).map(|_| rng.gen_range(-3..=3)).collect();
                    let gk: i64 = rng.gen_range(-3..=3);
                    let (qid, qv) = tile_of_point(scale, &p, tol);
                    if qv == Verdict::In {
                        let gaf: Vec<f64> = ga.iter().map(|&v| v as f64 * jf).collect();
                        let gp = tile_mul(
                            &TilePoint { y: gaf, s: gk as f64 * jf * jf },
                            &p,
                        );
                        let (gid, gv) = tile_of_point(scale, &gp, tol);
                        if gv == Verdict::In {
                            let (ea, ek) = lattice_mul((&ga, gk), (&qid.a, qid.k));
                            if gid.a != ea || gid.k != ek {
                                cov += 1;
                            }
                        }
                    }
                }
                (part, unc, nest, selfsim, cov, mask)
            })
            .reduce(
                || (0, 0, 0, 0, 0, 0u64),
                |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2, a.3 + b.3, a.4 + b.4, a.5 | b.5),
            );

    let (c1, c2) = fit_ball_sandwich(nu, seed, tol);

    TilingReport {
        nu,
        scale,
        samples,
        tol,
        partition_violations,
        uncertain_fraction: uncertain as f64 / samples as f64,
        nested_violations,
        self_similar_violations,
        subtiles_seen: subtile_mask.count_ones() as usize,
        subtiles_expected: 1 << (2 * nu + 2),
        covariance_violations: cov_violations,
        ball_c1: c1,
        ball_c2: c2,
    }
}

/// Fit inner/outer gauge-ball radii around a center of the basic tile:
/// `B(xi, C1) c T_o c B(xi, C2)` with MC-calibrated constants.
pub fn fit_ball_sandwich(nu: usize, seed: u64, tol: f64) -> (f64, f64) {
    let nu2 = 2 * nu;
    let cy = vec![0.5; nu2];
    let xi = TilePoint { y: cy.clone(), s: f_o(&cy, tol) + 0.5 };
    let xi_inv = tile_inv(&xi);
    let mut rng = seeded_rng(seed, 999);
    // Outer: sup of gauge over tile samples.
    let base = TileId { nu, j: 0, a: vec![0; nu2], k: 0 };
    let mut c2: f64 = 0.0;
    for _ in 0..20_000 {
        let p = sample_tile(&base, &mut rng, tol);
        c2 = c2.max(tile_gauge(&tile_mul(&xi_inv, &p)));
    }
    // Inner: bisect the largest ball radius whose samples stay inside.
    let mut lo = 0.0f64;
    let mut hi = 1.0f64;
    for _ in 0..12 {
        let c = 0.5 * (lo + hi);
        let mut ok = true;
        for _ in 0..4000 {
            let q = TilePoint {
                y: (0..nu2).map(|_| (2.0 * rng.gen::<f64>() - 1.0) * c).collect(),
                s: (2.0 * rng.gen::<f64>() - 1.0) * c * c,
            };
            let p = tile_mul(&xi, &q);
            if in_tile(&base, &p, tol) == Verdict::Out {
                ok = false;
                break;
            }
        }
        if ok {
            lo = c;
        } else {
            hi = c;
        }
    }
    (lo, c2 * 1.0000001)
}

// ---------------------------------------------------------------------------
// Shard precursor: a stack of 2^kappa tiles over the unit cube.
// ---------------------------------------------------------------------------

/// Default stack height exponent: smallest `kappa` with `nu < 2^{kappa-10}`.
pub fn default_kappa(nu: usize) -> u32 {
    10 + (usize::BITS - nu.leading_zeros())
}

/// Address of a precursor translate: lattice `Z^{2nu} x 2^kappa Z` at scale j.
#[derive(Clone, PartialEq, Eq, Debug, Serialize)]
pub struct PrecursorId {
    pub nu: usize,
    pub kappa: u32,
    pub j: i64,
    pub a: Vec<i64>,
    /// Time translate in units of `2^kappa`.
    pub m: i64,
}

/// Membership in the precursor stack via the interval form
/// `t in f_o(y) + [0, 2^kappa)` after lattice reduction.
pub fn precursor_contains(id: &PrecursorId, p: &TilePoint, tol: f64) -> Result<Verdict> {
    if (id.nu as u64) >= (1u64 << (id.kappa.saturating_sub(10))) {
        return Err(Error::InvalidArg(format!(
            "kappa too small: need nu < 2^(kappa-10), got nu={} kappa={}",
            id.nu, id.kappa
        )));
    }
    let (a, y, mut s) = reduce(id.j, p);
    if a != id.a {
        return Ok(Verdict::Out);
    }
    let span = 2.0f64.powi(id.kappa as i32);
    s -= id.m as f64 * span;
    Ok(half_open_verdict(s - f_o(&y, tol), span, tol))
}

/// Locate the precursor translate containing `p` at scale `j`.
pub fn precursor_of_point(
    nu: usize,
    kappa: u32,
    j: i64,
    p: &TilePoint,
    tol: f64,
) -> (PrecursorId, Verdict) {
    let (a, y, s) = reduce(j, p);
    let span = 2.0f64.powi(kappa as i32);
    let d = s - f_o(&y, tol);
    let m = (d / span).floor() as i64;
    let frac = d - m as f64 * span;
    let verdict = if frac == 0.0 {
        Verdict::In
    } else if frac < tol || frac > span - tol {
        Verdict::Uncertain
    } else {
        Verdict::In
    };
    (PrecursorId { nu, kappa, j, a, m }, verdict)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn b_form_examples() {
        assert_eq!(b_form(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), -1.0);
        let y = [0.3, -0.7, 1.1, 0.2];
        assert_eq!(b_form(&y, &y).unwrap(), 0.0);
        let y2: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        let yp = [0.5, 0.4, -0.3, 0.9];
        assert!((b_form(&y2, &yp).unwrap() - 2.0 * b_form(&y, &yp).unwrap()).abs() < 1e-15);
        assert!(b_form(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn height_function_dyadic_values() {
        assert_eq!(f_o(&[0.0, 0.0], 1e-9), 0.0);
        assert_eq!(f_o(&[0.5, 0.5], 1e-9), 0.0);
        assert_eq!(f_o(&[0.5, 0.25], 1e-9), -0.125);
    }

    #[test]
    fn height_function_range_bound() {
        let mut rng = seeded_rng(3, 0);
        for _ in 0..100_000 {
            let y = [rng.gen::<f64>(), rng.gen::<f64>()];
            let v = f_o(&y, 1e-12);
            assert!(v > -1.0 && v < 1.0, "f_o out of range at {y:?}: {v}");
        }
    }

    #[test]
    fn height_function_truncation_tail() {
        // Doubling the implicit depth changes nothing beyond the tail bound.
        let mut rng = seeded_rng(4, 0);
        for _ in 0..1000 {
            let y = [rng.gen::<f64>(), rng.gen::<f64>()];
            let coarse = f_o(&y, 1e-6);
            let fine = f_o(&y, 1e-18);
            assert!((coarse - fine).abs() <= 1e-6 / 3.0 + 1e-15);
        }
    }

    #[test]
    fn tile_membership_examples() {
        let id = TileId { nu: 1, j: 0, a: vec![0, 0], k: 0 };
        assert_eq!(in_tile(&id, &TilePoint { y: vec![0.25, 0.25], s: 0.3 }, 1e-9), Verdict::In);
        // Boundary-inclusive side of the height graph.
        assert_eq!(
            in_tile(&id, &TilePoint { y: vec![0.5, 0.25], s: -0.125 + 0.5 }, 1e-9),
            Verdict::In
        );
        assert_eq!(in_tile(&id, &TilePoint { y: vec![0.0, 0.0], s: 1.0 }, 1e-9), Verdict::Out);
    }

    #[test]
    fn point_location_consistency() {
        let mut rng = seeded_rng(5, 0);
        for _ in 0..2000 {
            let p = TilePoint {
                y: vec![rng.gen::<f64>() * 4.0 - 2.0, rng.gen::<f64>() * 4.0 - 2.0],
                s: rng.gen::<f64>() * 6.0 - 3.0,
            };
            for j in [-1i64, 0, 2] {
                let (id, v) = tile_of_point(j, &p, 1e-9);
                if v == Verdict::In {
                    assert_eq!(in_tile(&id, &p, 1e-9), Verdict::In, "at {p:?} scale {j}");
                }
            }
        }
    }

    #[test]
    fn tiling_suite_small() {
        let rep = verify_tiling(1, 0, 50_000, 42, 1e-9);
        assert!(rep.pass(), "{rep:?}");
        assert_eq!(rep.subtiles_expected, 16);
        assert!(rep.ball_c1 > 0.05, "inner ball too small: {}", rep.ball_c1);
        assert!(rep.ball_c2 < 4.0, "outer ball too large: {}", rep.ball_c2);
    }

    #[test]
    fn precursor_membership_and_partition() {
        let nu = 1;
        let kappa = default_kappa(nu);
        assert_eq!(kappa, 11);
        let id = PrecursorId { nu, kappa, j: 0, a: vec![0, 0], m: 0 };
        assert_eq!(
            precursor_contains(&id, &TilePoint { y: vec![0.0, 0.0], s: 0.0 }, 1e-9).unwrap(),
            Verdict::In
        );
        let span = 2.0f64.powi(kappa as i32);
        assert_eq!(
            precursor_contains(&id, &TilePoint { y: vec![0.0, 0.0], s: span }, 1e-9).unwrap(),
            Verdict::Out
        );
        // kappa too small errors out.
        let bad = PrecursorId { nu: 4, kappa: 10, j: 0, a: vec![0; 8], m: 0 };
        assert!(precursor_contains(&bad, &TilePoint { y: vec![0.0; 8], s: 0.0 }, 1e-9).is_err());
        // Exactly-one over samples.
        let mut rng = seeded_rng(9, 0);
        for _ in 0..20_000 {
            let p = TilePoint {
                y: vec![rng.gen::<f64>() * 6.0 - 3.0, rng.gen::<f64>() * 6.0 - 3.0],
                s: (rng.gen::<f64>() - 0.5) * 4.0 * span,
            };
            let (pid, v) = precursor_of_point(nu, kappa, 0, &p, 1e-9);
            if v == Verdict::In {
                assert_eq!(precursor_contains(&pid, &p, 1e-9).unwrap(), Verdict::In);
                for dm in [-1i64, 1] {
                    let mut nid = pid.clone();
                    nid.m += dm;
                    assert_eq!(precursor_contains(&nid, &p, 1e-9).unwrap(), Verdict::Out);
                }
            }
        }
    }

    #[test]
    fn covariance_is_exact_integer_arithmetic() {
        let a1 = vec![2i64, -1];
        let a2 = vec![0i64, 3];
        let (y, k) = lattice_mul((&a1, 5), (&a2, -2));
        // B(a1, a2) = a2[0]*a1[1] - a1[0]*a2[1] = 0*(-1) - 2*3 = -6.
        assert_eq!(y, vec![2, 2]);
        assert_eq!(k, 5 - 2 - 6);
    }
}
