//! Shards: stacks of fractal tiles that partition the base group at each
//! scale triple `j = (j1, j2, j3)` and are comparable to tubes.  The
//! construction splits into three cases by scale ordering (after recording a
//! swap that enforces `j2 <= j1`):
//!
//! * case I   (`j3 < j2 <= j1`):  residual box `[-A, A) x [-B2, B2)`;
//! * case II  (`j2 <= j3 <= j1`): residual box `[-A, A) x [-B3, B3)`;
//! * case III (`j1 < j3`):        a diagonal staircase of `[-3A, 3A) x [-A, A)`
//!   blocks stepped by even multiples of `A` along the diagonal;
//!
//! with `A = 2^{2 j1 + kappa}`, `B_mu = 2^{2 j_mu + kappa}`, all residuals
//! taken relative to the fractal height offsets of the two tiled factors.
//! Lattice arithmetic is exact; only the height function carries a
//! tolerance, and verdicts near its graph are `Uncertain`.

use crate::error::{Error, Result};
use crate::field::{mul_coords, DomainTag};
use crate::group::{Factor, GroupDims, PointN};
use crate::tile::{default_kappa, f_o, Verdict};
use crate::tube::{in_tube_at_origin, tube_volume_log2, ScaleTriple};
use crate::util::seeded_rng;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

/// Stack height exponent shared by the two tiled factors.
pub fn choose_kappa(dims: &GroupDims) -> u32 {
    default_kappa(dims.n1.max(dims.n2))
}

/// The comparability constant `sigma`: large enough for
/// (a) the tube-product inclusion (`2^sigma > 8 sqrt(n_mu)`),
/// (b) the center-tube membership inequalities (`2^{-sigma}(2^{-sigma} + N) < 1`),
/// (c) the shard-in-tube inclusion, whose height is of order `2^{2j + kappa + 3}`
///     and therefore needs `2 sigma >= kappa + 3`.
pub fn choose_sigma(dims: &GroupDims) -> u32 {
    let maxn = dims.n1.max(dims.n2).max(dims.n3) as f64;
    let a = (8.0 * maxn.sqrt()).max(1.0 + dims.n() as f64);
    let s1 = 2 + (a.log2().ceil() as u32);
    let s2 = (choose_kappa(dims) + 3).div_ceil(2);
    s1.max(s2)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize)]
pub enum ShardCase {
    I,
    II,
    III,
}

fn classify(j: &[i64; 3]) -> ShardCase {
    // Requires j[1] <= j[0].
    if j[2] < j[1] {
        ShardCase::I
    } else if j[2] <= j[0] {
        ShardCase::II
    } else {
        ShardCase::III
    }
}

/// Address of a shard: scale triple, recorded axis swap, case tag, and the
/// exact lattice element (z part in units of `2^{j_mu}` per real coordinate,
/// t part in units of the case lattice steps).  Lattice data live in the
/// swapped frame when `swapped` is set.
#[derive(Clone, PartialEq, Eq, Debug, Serialize)]
pub struct ShardId {
    pub jvec: [i64; 3],
    pub swapped: bool,
    pub case: ShardCase,
    pub za: Vec<i64>,
    pub m: [i64; 2],
}

/// Frame data for one scale triple (in the swapped frame).
#[derive(Clone, Copy, Debug)]
pub struct ShardFrame {
    pub dims: GroupDims,
    pub kappa: u32,
    pub j: [i64; 3],
    pub swapped: bool,
    pub case: ShardCase,
    pub a: f64,
    pub b2: f64,
    pub b3: f64,
    pub steps: [f64; 2],
    /// Staircase half-range `2^{2(j3 - j1)}` (case III only).
    pub stair: i64,
}

impl ShardFrame {
    pub fn new(dims: &GroupDims, kappa: u32, jvec: [i64; 3]) -> Self {
        let swapped = jvec[1] > jvec[0];
        let (d, j) = if swapped {
            (GroupDims::new(dims.n2, dims.n1, dims.n3), [jvec[1], jvec[0], jvec[2]])
        } else {
            (*dims, jvec)
        };
        let case = classify(&j);
        let p2 = |e: i64| 2.0f64.powi(e as i32);
        let a = p2(2 * j[0] + kappa as i64);
        let b2 = p2(2 * j[1] + kappa as i64);
        let b3 = p2(2 * j[2] + kappa as i64);
        let (steps, stair) = match case {
            ShardCase::I => ([2.0 * a, 2.0 * b2], 0),
            ShardCase::II => ([2.0 * a, 2.0 * b3], 0),
            ShardCase::III => ([6.0 * a, 2.0 * b3], 1i64 << (2 * (j[2] - j[0]) as u32)),
        };
        ShardFrame { dims: d, kappa, j, swapped, case, a, b2, b3, steps, stair }
    }

    /// log2 of the shard volume (the t-lattice cell area times the z cell).
    pub fn volume_log2(&self) -> f64 {
        let mut acc = self.steps[0].log2() + self.steps[1].log2();
        for mu in Factor::ALL {
            acc += 2.0 * self.dims.n_of(mu) as f64 * self.j[mu.index()] as f64;
        }
        acc
    }
}

/// Swap the two leading blocks (and central slots) of base-group coords.
pub fn swap_coords(dims: &GroupDims, c: &[f64]) -> Vec<f64> {
    let n1 = 2 * dims.n1;
    let n2 = 2 * dims.n2;
    let n3 = 2 * dims.n3;
    let mut out = Vec::with_capacity(c.len());
    out.extend_from_slice(&c[n1..n1 + n2]);
    out.extend_from_slice(&c[..n1]);
    out.extend_from_slice(&c[n1 + n2..n1 + n2 + n3]);
    out.push(c[n1 + n2 + n3 + 1]);
    out.push(c[n1 + n2 + n3]);
    out
}

/// Interleave a block's split-order reals `(x_1..x_n, x_{n+1}..x_{2n})` into
/// symplectic pairs for the height function.
fn interleave(block: &[f64]) -> Vec<f64> {
    let n = block.len() / 2;
    let mut y = Vec::with_capacity(block.len());
    for l in 0..n {
        y.push(block[l]);
        y.push(block[n + l]);
    }
    y
}

fn phi_block(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() / 2;
    let mut s = 0.0;
    for j in 0..n {
        s += a[n + j] * b[j] - a[j] * b[n + j];
    }
    2.0 * s
}

/// Reduction of a point in the swapped frame: z-cell indices, residual z in
/// the model box, untwisted t minus the fractal offsets.
struct Reduced {
    za: Vec<i64>,
    u: [f64; 2],
}

fn reduce(frame: &ShardFrame, c: &[f64], tol: f64) -> Reduced {
    let d = &frame.dims;
    let nz = 2 * d.n();
    let mut za = Vec::with_capacity(nz);
    let mut lattice_z = vec![0.0; nz];
    let mut resid = vec![0.0; nz];
    let mut off = 0;
    for mu in Factor::ALL {
        let s = 2.0f64.powi(frame.j[mu.index()] as i32);
        for k in 0..2 * d.n_of(mu) {
            let q = (c[off + k] / s).floor();
            za.push(q as i64);
            lattice_z[off + k] = q * s;
            resid[off + k] = c[off + k] - q * s;
        }
        off += 2 * d.n_of(mu);
    }
    // Untwist: t of lattice^{-1} . g.
    let b1 = 0..2 * d.n1;
    let b2 = 2 * d.n1..2 * (d.n1 + d.n2);
    let b3 = 2 * (d.n1 + d.n2)..nz;
    let p1 = phi_block(&lattice_z[b1.clone()], &c[b1.clone()]);
    let p2 = phi_block(&lattice_z[b2.clone()], &c[b2.clone()]);
    let p3 = phi_block(&lattice_z[b3.clone()], &c[b3.clone()]);
    let t1 = c[nz] - p1 - p3;
    let t2 = c[nz + 1] - p2 - p3;
    // Fractal offsets of the two tiled factors.
    let s1 = 2.0f64.powi(frame.j[0] as i32);
    let s2 = 2.0f64.powi(frame.j[1] as i32);
    let y1: Vec<f64> = interleave(&resid[b1]).iter().map(|v| v / s1).collect();
    let y2: Vec<f64> = interleave(&resid[b2]).iter().map(|v| v / s2).collect();
    let o1 = s1 * s1 * f_o(&y1, tol);
    let o2 = s2 * s2 * f_o(&y2, tol);
    Reduced { za, u: [t1 - o1, t2 - o2] }
}

fn interval_verdict(d: f64, span: f64, tol: f64) -> Verdict {
    if d == 0.0 {
        return Verdict::In;
    }
    if d == span {
        return Verdict::Out;
    }
    if d.abs() < tol || (d - span).abs() < tol {
        Verdict::Uncertain
    } else if d > 0.0 && d < span {
        Verdict::In
    } else {
        Verdict::Out
    }
}

fn combine(a: Verdict, b: Verdict) -> Verdict {
    use Verdict::*;
    match (a, b) {
        (Out, _) | (_, Out) => Out,
        (Uncertain, _) | (_, Uncertain) => Uncertain,
        _ => In,
    }
}

/// Membership of relative residuals `(u1, u2)` (already reduced by the
/// lattice translate) in the basic shard of the frame.
fn basic_contains(frame: &ShardFrame, u: [f64; 2], tol: f64) -> Verdict {
    match frame.case {
        ShardCase::I => combine(
            interval_verdict(u[0] + frame.a, 2.0 * frame.a, tol),
            interval_verdict(u[1] + frame.b2, 2.0 * frame.b2, tol),
        ),
        ShardCase::II => combine(
            interval_verdict(u[0] + frame.a, 2.0 * frame.a, tol),
            interval_verdict(u[1] + frame.b3, 2.0 * frame.b3, tol),
        ),
        ShardCase::III => {
            // The unique even m with u2 - mA in [-A, A); then u1 - mA must
            // lie in [-3A, 3A) and m in the staircase range.
            let a = frame.a;
            let c = u[1] / a;
            let mut m = 2 * (((c - 1.0) / 2.0).ceil() as i64);
            // Guard the half-open edge: m is the unique even integer in
            // (c - 1, c + 1].
            if (m as f64) <= c - 1.0 {
                m += 2;
            }
            if m < -frame.stair || m > frame.stair - 2 {
                return Verdict::Out;
            }
            let md = m as f64 * a;
            combine(
                interval_verdict(u[0] - md + 3.0 * a, 6.0 * a, tol),
                interval_verdict(u[1] - md + a, 2.0 * a, tol),
            )
        }
    }
}

/// Membership of a base-group point (original frame coordinates) in the
/// shard addressed by `id`.
pub fn in_shard(
    dims: &GroupDims,
    kappa: u32,
    id: &ShardId,
    coords: &[f64],
    tol: f64,
) -> Verdict {
    let frame = ShardFrame::new(dims, kappa, id.jvec);
    let c = if frame.swapped { swap_coords(dims, coords) } else { coords.to_vec() };
    let red = reduce(&frame, &c, tol);
    if red.za != id.za {
        return Verdict::Out;
    }
    let u = [
        red.u[0] - id.m[0] as f64 * frame.steps[0],
        red.u[1] - id.m[1] as f64 * frame.steps[1],
    ];
    basic_contains(&frame, u, tol)
}

/// Constructive point location at a scale triple.
pub fn shard_of_point(
    dims: &GroupDims,
    kappa: u32,
    jvec: [i64; 3],
    coords: &[f64],
    tol: f64,
) -> (ShardId, Verdict) {
    let frame = ShardFrame::new(dims, kappa, jvec);
    let c = if frame.swapped { swap_coords(dims, coords) } else { coords.to_vec() };
    let red = reduce(&frame, &c, tol);
    let m = match frame.case {
        ShardCase::I | ShardCase::II => [
            ((red.u[0] + frame.steps[0] / 2.0) / frame.steps[0]).floor() as i64,
            ((red.u[1] + frame.steps[1] / 2.0) / frame.steps[1]).floor() as i64,
        ],
        ShardCase::III => {
            // First t2 by the coarse lattice, then the staircase index, then
            // t1 by the coarse lattice relative to the staircase.
            let m2 = ((red.u[1] + frame.b3 + frame.a) / frame.steps[1]).floor() as i64;
            let u2 = red.u[1] - m2 as f64 * frame.steps[1];
            let cidx = u2 / frame.a;
            let mut st = 2 * (((cidx - 1.0) / 2.0).ceil() as i64);
            if (st as f64) <= cidx - 1.0 {
                st += 2;
            }
            let m1 = ((red.u[0] - st as f64 * frame.a + 3.0 * frame.a) / frame.steps[0]).floor()
                as i64;
            [m1, m2]
        }
    };
    let id = ShardId { jvec, swapped: frame.swapped, case: frame.case, za: red.za, m };
    let u = [
        red.u[0] - id.m[0] as f64 * frame.steps[0],
        red.u[1] - id.m[1] as f64 * frame.steps[1],
    ];
    let v = basic_contains(&frame, u, tol);
    (id, v)
}

/// Uniform sample of the shard (original frame coordinates).
pub fn sample_shard(
    dims: &GroupDims,
    kappa: u32,
    id: &ShardId,
    rng: &mut impl Rng,
    tol: f64,
) -> Vec<f64> {
    let frame = ShardFrame::new(dims, kappa, id.jvec);
    let d = &frame.dims;
    let nz = 2 * d.n();
    // Residual z in the model box.
    let mut resid = vec![0.0; nz];
    let mut lattice_z = vec![0.0; nz];
    let mut off = 0;
    let mut zi = 0;
    for mu in Factor::ALL {
        let s = 2.0f64.powi(frame.j[mu.index()] as i32);
        for _ in 0..2 * d.n_of(mu) {
            resid[off] = rng.gen::<f64>() * s;
            lattice_z[off] = id.za[zi] as f64 * s;
            off += 1;
            zi += 1;
        }
    }
    // Residual t above the fractal offsets.
    let s1 = 2.0f64.powi(frame.j[0] as i32);
    let s2 = 2.0f64.powi(frame.j[1] as i32);
    let y1: Vec<f64> = interleave(&resid[..2 * d.n1]).iter().map(|v| v / s1).collect();
    let y2: Vec<f64> =
        interleave(&resid[2 * d.n1..2 * (d.n1 + d.n2)]).iter().map(|v| v / s2).collect();
    let o1 = s1 * s1 * f_o(&y1, tol);
    let o2 = s2 * s2 * f_o(&y2, tol);
    let (u1, u2) = match frame.case {
        ShardCase::I => (
            (2.0 * rng.gen::<f64>() - 1.0) * frame.a,
            (2.0 * rng.gen::<f64>() - 1.0) * frame.b2,
        ),
        ShardCase::II => (
            (2.0 * rng.gen::<f64>() - 1.0) * frame.a,
            (2.0 * rng.gen::<f64>() - 1.0) * frame.b3,
        ),
        ShardCase::III => {
            let pick = rng.gen_range(0..frame.stair) * 2 - frame.stair;
            let md = pick as f64 * frame.a;
            (
                md + (2.0 * rng.gen::<f64>() * 3.0 - 3.0) * frame.a,
                md + (2.0 * rng.gen::<f64>() - 1.0) * frame.a,
            )
        }
    };
    let t1 = u1 + o1 + id.m[0] as f64 * frame.steps[0];
    let t2 = u2 + o2 + id.m[1] as f64 * frame.steps[1];
    // Multiply the lattice element on the left.
    let mut lam = vec![0.0; nz + 2];
    lam[..nz].copy_from_slice(&lattice_z);
    let mut q = vec![0.0; nz + 2];
    q[..nz].copy_from_slice(&resid);
    q[nz] = t1;
    q[nz + 1] = t2;
    let mut out = vec![0.0; nz + 2];
    mul_coords(DomainTag::BaseGroup, d, &lam, &q, &mut out);
    if frame.swapped {
        swap_coords(d, &out)
    } else {
        out
    }
}

/// Shard center: all real coordinates at half the cell side, t = 0,
/// translated by the lattice element.
pub fn shard_center(dims: &GroupDims, kappa: u32, id: &ShardId) -> Vec<f64> {
    let frame = ShardFrame::new(dims, kappa, id.jvec);
    let d = &frame.dims;
    let nz = 2 * d.n();
    let mut lam = vec![0.0; nz + 2];
    let mut q = vec![0.0; nz + 2];
    let mut off = 0;
    let mut zi = 0;
    for mu in Factor::ALL {
        let s = 2.0f64.powi(frame.j[mu.index()] as i32);
        for _ in 0..2 * d.n_of(mu) {
            lam[off] = id.za[zi] as f64 * s;
            q[off] = 0.5 * s;
            off += 1;
            zi += 1;
        }
    }
    lam[nz] = id.m[0] as f64 * frame.steps[0];
    lam[nz + 1] = id.m[1] as f64 * frame.steps[1];
    let mut out = vec![0.0; nz + 2];
    mul_coords(DomainTag::BaseGroup, d, &lam, &q, &mut out);
    if frame.swapped {
        swap_coords(d, &out)
    } else {
        out
    }
}

/// Lattice base point of the shard (original frame).
pub fn shard_base(dims: &GroupDims, kappa: u32, id: &ShardId) -> Vec<f64> {
    let frame = ShardFrame::new(dims, kappa, id.jvec);
    let d = &frame.dims;
    let nz = 2 * d.n();
    let mut lam = vec![0.0; nz + 2];
    let mut off = 0;
    let mut zi = 0;
    for mu in Factor::ALL {
        let s = 2.0f64.powi(frame.j[mu.index()] as i32);
        for _ in 0..2 * d.n_of(mu) {
            lam[off] = id.za[zi] as f64 * s;
            off += 1;
            zi += 1;
        }
    }
    lam[nz] = id.m[0] as f64 * frame.steps[0];
    lam[nz + 1] = id.m[1] as f64 * frame.steps[1];
    if frame.swapped {
        swap_coords(d, &lam)
    } else {
        lam
    }
}

fn point_from_coords(dims: &GroupDims, c: &[f64]) -> PointN {
    crate::group::pointn_from_coords(dims, c).expect("coords")
}

// ---------------------------------------------------------------------------
// Certification reports.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct ShardPartitionReport {
    pub jvec: [i64; 3],
    pub case: ShardCase,
    pub samples: usize,
    pub violations: usize,
    pub uncertain_fraction: f64,
}

/// Exactly-one membership: locate, verify containment, and verify that the
/// neighboring lattice translates reject the point.
pub fn shard_partition_check(
    dims: &GroupDims,
    kappa: u32,
    jvec: [i64; 3],
    samples: usize,
    seed: u64,
    tol: f64,
) -> ShardPartitionReport {
    let frame = ShardFrame::new(dims, kappa, jvec);
    let nz = 2 * dims.n();
    let span_z: Vec<f64> = {
        let mut v = Vec::new();
        let d = if frame.swapped {
            GroupDims::new(dims.n1, dims.n2, dims.n3)
        } else {
            *dims
        };
        for mu in Factor::ALL {
            let s = 2.0f64.powi(jvec[mu.index()] as i32);
            for _ in 0..2 * d.n_of(mu) {
                v.push(3.0 * s);
            }
        }
        v
    };
    let tspan = [3.0 * frame.steps[0], 3.0 * frame.steps[1]];
    let idxs: Vec<usize> = (0..samples).collect();
    let (violations, uncertain) = idxs
        .par_chunks(4096)
        .map(|chunk| {
            let mut rng = seeded_rng(seed, 17 + chunk[0] as u64);
            let mut viol = 0usize;
            let mut unc = 0usize;
            for _ in chunk {
                let mut c = vec![0.0; nz + 2];
                for (k, s) in span_z.iter().enumerate() {
                    c[k] = (2.0 * rng.gen::<f64>() - 1.0) * s;
                }
                c[nz] = (2.0 * rng.gen::<f64>() - 1.0) * tspan[0];
                c[nz + 1] = (2.0 * rng.gen::<f64>() - 1.0) * tspan[1];
                let (id, v) = shard_of_point(dims, kappa, jvec, &c, tol);
                match v {
                    Verdict::Uncertain => unc += 1,
                    Verdict::Out => viol += 1,
                    Verdict::In => {
                        if in_shard(dims, kappa, &id, &c, tol) != Verdict::In {
                            viol += 1;
                        }
                        for (axis, dm) in [(0, -1i64), (0, 1), (1, -1), (1, 1)] {
                            let mut nid = id.clone();
                            nid.m[axis] += dm;
                            if in_shard(dims, kappa, &nid, &c, tol) == Verdict::In {
                                viol += 1;
                            }
                        }
                    }
                }
            }
            (viol, unc)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    ShardPartitionReport {
        jvec,
        case: frame.case,
        samples,
        violations,
        uncertain_fraction: uncertain as f64 / samples as f64,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ShardSandwichReport {
    pub jvec: [i64; 3],
    pub case: ShardCase,
    pub sigma: u32,
    pub kappa: u32,
    pub samples: usize,
    pub inner_violations: usize,
    pub outer_violations: usize,
    pub box_inner_violations: usize,
    pub box_outer_violations: usize,
}

impl ShardSandwichReport {
    pub fn pass(&self) -> bool {
        self.inner_violations == 0
            && self.outer_violations == 0
            && self.box_inner_violations == 0
            && self.box_outer_violations == 0
    }
}

/// Certify the tube comparability of the basic shard:
/// `T(center, 2^{j - sigma}) c R_o c T(0, 2^{j + sigma})`
/// together with the box form
/// `Box_j x P_{2^{2j1+k-3}, 2^{2(j2 v j3)+k-3}} c R_o c Box_j x P_{..+3}`
/// (in the swapped frame, pinned on the second central coordinate).
pub fn shard_sandwich_check(
    dims: &GroupDims,
    kappa: u32,
    sigma: u32,
    jvec: [i64; 3],
    samples: usize,
    seed: u64,
    tol: f64,
) -> ShardSandwichReport {
    let frame = ShardFrame::new(dims, kappa, jvec);
    let d = frame.dims;
    let nz = 2 * d.n();
    let basic = ShardId {
        jvec,
        swapped: frame.swapped,
        case: frame.case,
        za: vec![0; nz],
        m: [0, 0],
    };
    // Everything below runs in the swapped frame; the shard id reduction
    // un-swaps internally, so feed it swapped-frame coordinates by passing
    // through the original-frame encoding.
    let p2 = |e: i64| 2.0f64.powi(e as i32);
    let r_in = ScaleTriple([
        p2(frame.j[0] - sigma as i64),
        p2(frame.j[1] - sigma as i64),
        p2(frame.j[2] - sigma as i64),
    ]);
    let r_out = ScaleTriple([
        p2(frame.j[0] + sigma as i64),
        p2(frame.j[1] + sigma as i64),
        p2(frame.j[2] + sigma as i64),
    ]);
    // Center in the swapped frame.
    let center: Vec<f64> = {
        let mut q = vec![0.0; nz + 2];
        let mut off = 0;
        for mu in Factor::ALL {
            let s = p2(frame.j[mu.index()]);
            for _ in 0..2 * d.n_of(mu) {
                q[off] = 0.5 * s;
                off += 1;
            }
        }
        q
    };
    let bexp = frame.j[1].max(frame.j[2]);
    let box_in = (p2(2 * frame.j[0] + kappa as i64 - 3), p2(2 * bexp + kappa as i64 - 3));
    let box_out = (p2(2 * frame.j[0] + kappa as i64 + 3), p2(2 * bexp + kappa as i64 + 3));

    let to_original = |c_swapped: &[f64]| -> Vec<f64> {
        if frame.swapped {
            swap_coords(&d, c_swapped)
        } else {
            c_swapped.to_vec()
        }
    };

    let idxs: Vec<usize> = (0..samples).collect();
    let (iv, ov, biv, bov) = idxs
        .par_chunks(4096)
        .map(|chunk| {
            let mut rng = seeded_rng(seed, 31 + chunk[0] as u64);
            let (mut iv, mut ov, mut biv, mut bov) = (0usize, 0usize, 0usize, 0usize);
            for _ in chunk {
                // Inner tube sample: center . w with w in T(0, r_in).
                let mut w = vec![0.0; nz + 2];
                let mut off = 0;
                for mu in Factor::ALL {
                    for _ in 0..2 * d.n_of(mu) {
                        w[off] = (2.0 * rng.gen::<f64>() - 1.0) * r_in.0[mu.index()];
                        off += 1;
                    }
                }
                let sec = crate::tube::tube_section(&r_in);
                let pin = (2.0 * rng.gen::<f64>() - 1.0) * sec.b;
                let diff = (2.0 * rng.gen::<f64>() - 1.0) * sec.a;
                let (t1, t2) = if sec.pinned == 1 { (pin + diff, pin) } else { (pin, pin - diff) };
                w[nz] = t1;
                w[nz + 1] = t2;
                let mut q = vec![0.0; nz + 2];
                mul_coords(DomainTag::BaseGroup, &d, &center, &w, &mut q);
                if in_shard(dims, kappa, &basic, &to_original(&q), tol) == Verdict::Out {
                    iv += 1;
                }
                // Outer: sample the shard, check the tube at the origin.
                let sc = sample_shard(dims, kappa, &basic, &mut rng, tol);
                let sc_sw = if frame.swapped { swap_coords(dims, &sc) } else { sc.clone() };
                let gq = point_from_coords(&d, &sc_sw);
                if !in_tube_at_origin(&d, &r_out, &gq) {
                    ov += 1;
                }
                // Box inner: sample the box, check shard membership.
                let mut bq = vec![0.0; nz + 2];
                let mut off = 0;
                for mu in Factor::ALL {
                    let s = p2(frame.j[mu.index()]);
                    for _ in 0..2 * d.n_of(mu) {
                        bq[off] = rng.gen::<f64>() * s;
                        off += 1;
                    }
                }
                let bt2 = (2.0 * rng.gen::<f64>() - 1.0) * box_in.1;
                let bt1 = bt2 + (2.0 * rng.gen::<f64>() - 1.0) * box_in.0;
                bq[nz] = bt1;
                bq[nz + 1] = bt2;
                if in_shard(dims, kappa, &basic, &to_original(&bq), tol) == Verdict::Out {
                    biv += 1;
                }
                // Box outer: shard samples stay in the outer box.
                let s2 = point_from_coords(&d, &sc_sw);
                let dtt = s2.t[0] - s2.t[1];
                let mut inside = dtt.abs() < box_out.0 && s2.t[1].abs() < box_out.1;
                let mut off = 0;
                for mu in Factor::ALL {
                    let s = p2(frame.j[mu.index()]);
                    for _ in 0..2 * d.n_of(mu) {
                        if sc_sw[off] < 0.0 || sc_sw[off] >= s {
                            inside = false;
                        }
                        off += 1;
                    }
                }
                if !inside {
                    bov += 1;
                }
            }
            (iv, ov, biv, bov)
        })
        .reduce(|| (0, 0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2, a.3 + b.3));

    ShardSandwichReport {
        jvec,
        case: frame.case,
        sigma,
        kappa,
        samples,
        inner_violations: iv,
        outer_violations: ov,
        box_inner_violations: biv,
        box_outer_violations: bov,
    }
}

// ---------------------------------------------------------------------------
// Enlargements and tents.
// ---------------------------------------------------------------------------

/// The enlargement of a shard: the tube of scale `2^{j + 2 sigma}` at the
/// shard's lattice base point.
pub fn enlargement(dims: &GroupDims, kappa: u32, sigma: u32, id: &ShardId) -> crate::tube::Tube {
    let base = shard_base(dims, kappa, id);
    let p2 = |e: i64| 2.0f64.powi(e as i32);
    crate::tube::Tube {
        base: point_from_coords(dims, &base),
        r: ScaleTriple([
            p2(id.jvec[0] + 2 * sigma as i64),
            p2(id.jvec[1] + 2 * sigma as i64),
            p2(id.jvec[2] + 2 * sigma as i64),
        ]),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EnlargementReport {
    pub jvec: [i64; 3],
    pub sigma: u32,
    pub samples: usize,
    pub shard_in_enlargement_violations: usize,
    pub shard_in_witness_tube_violations: usize,
    /// log2(|R*| / |R|), must be <= 4 sigma Q.
    pub volume_ratio_log2: f64,
    /// log2 of the certified lower bound |R| / |T(0, 2^{j+3s})| for the
    /// maximal function on the enlargement; must be >= -4 sigma Q.
    pub maximal_lower_bound_log2: f64,
    pub four_sigma_q: f64,
}

impl EnlargementReport {
    pub fn pass(&self) -> bool {
        self.shard_in_enlargement_violations == 0
            && self.shard_in_witness_tube_violations == 0
            && self.volume_ratio_log2 <= self.four_sigma_q + 1e-9
            && self.maximal_lower_bound_log2 >= -self.four_sigma_q - 1e-9
    }
}

/// Certify `R c R*`, the witness-tube inclusion `R c T(g', 2^{j+3 sigma})`
/// for `g'` sampled in `R*`, and the exact volume bounds that give the
/// maximal-function lower bound `M(1_R)(g') >= 2^{-4 sigma Q}` on `R*`.
pub fn enlargement_check(
    dims: &GroupDims,
    kappa: u32,
    sigma: u32,
    id: &ShardId,
    samples: usize,
    seed: u64,
    tol: f64,
) -> Result<EnlargementReport> {
    let frame = ShardFrame::new(dims, kappa, id.jvec);
    let enl = enlargement(dims, kappa, sigma, id);
    let p2 = |e: i64| 2.0f64.powi(e as i32);
    let r3 = ScaleTriple([
        p2(id.jvec[0] + 3 * sigma as i64),
        p2(id.jvec[1] + 3 * sigma as i64),
        p2(id.jvec[2] + 3 * sigma as i64),
    ]);
    let mut rng = seeded_rng(seed, 71);
    let mut in_enl = 0usize;
    let mut in_witness = 0usize;
    for _ in 0..samples {
        let p = sample_shard(dims, kappa, id, &mut rng, tol);
        let gp = point_from_coords(dims, &p);
        if !crate::tube::in_tube(dims, &enl, &gp)? {
            in_enl += 1;
        }
        // Witness center: a point of R*.
        let mut w = vec![0.0; p.len()];
        let nz = 2 * dims.n();
        for k in 0..nz {
            w[k] = (2.0 * rng.gen::<f64>() - 1.0) * enl.r.0[coord_factor(dims, k)];
        }
        let sec = crate::tube::tube_section(&enl.r);
        let pin = (2.0 * rng.gen::<f64>() - 1.0) * sec.b;
        let diff = (2.0 * rng.gen::<f64>() - 1.0) * sec.a;
        let (t1, t2) = if sec.pinned == 1 { (pin + diff, pin) } else { (pin, pin - diff) };
        w[nz] = t1;
        w[nz + 1] = t2;
        let base_c = crate::group::pointn_coords(dims, &enl.base);
        let mut gprime = vec![0.0; p.len()];
        mul_coords(DomainTag::BaseGroup, dims, &base_c, &w, &mut gprime);
        let witness = crate::tube::Tube { base: point_from_coords(dims, &gprime), r: r3 };
        if !crate::tube::in_tube(dims, &witness, &gp)? {
            in_witness += 1;
        }
    }
    let jlog = [id.jvec[0] as f64, id.jvec[1] as f64, id.jvec[2] as f64];
    let shard_log = frame.volume_log2();
    let enl_log = tube_volume_log2(
        dims,
        &[
            jlog[0] + 2.0 * sigma as f64,
            jlog[1] + 2.0 * sigma as f64,
            jlog[2] + 2.0 * sigma as f64,
        ],
    );
    let witness_log = tube_volume_log2(
        dims,
        &[
            jlog[0] + 3.0 * sigma as f64,
            jlog[1] + 3.0 * sigma as f64,
            jlog[2] + 3.0 * sigma as f64,
        ],
    );
    Ok(EnlargementReport {
        jvec: id.jvec,
        sigma,
        samples,
        shard_in_enlargement_violations: in_enl,
        shard_in_witness_tube_violations: in_witness,
        volume_ratio_log2: enl_log - shard_log,
        maximal_lower_bound_log2: shard_log - witness_log,
        four_sigma_q: 4.0 * sigma as f64 * dims.q() as f64,
    })
}

fn coord_factor(dims: &GroupDims, k: usize) -> usize {
    if k < 2 * dims.n1 {
        0
    } else if k < 2 * (dims.n1 + dims.n2) {
        1
    } else {
        2
    }
}

/// A tent: a shard together with its dyadic scale box
/// `[2^{j1}, 2^{j1+1}) x [2^{j2}, 2^{j2+1}) x [2^{j3}, 2^{j3+1})`.
#[derive(Clone, Debug, Serialize)]
pub struct Tent {
    pub shard: ShardId,
}

impl Tent {
    pub fn scale_box_contains(&self, r: &ScaleTriple) -> bool {
        (0..3).all(|i| {
            let lo = 2.0f64.powi(self.shard.jvec[i] as i32);
            r.0[i] >= lo && r.0[i] < 2.0 * lo
        })
    }
}

/// The unique tent over `(g, r)`: floor-dyadic scales then shard location.
pub fn tent_of(
    dims: &GroupDims,
    kappa: u32,
    coords: &[f64],
    r: &ScaleTriple,
    tol: f64,
) -> (Tent, Verdict) {
    let jvec = [
        r.0[0].log2().floor() as i64,
        r.0[1].log2().floor() as i64,
        r.0[2].log2().floor() as i64,
    ];
    let (shard, v) = shard_of_point(dims, kappa, jvec, coords, tol);
    (Tent { shard }, v)
}

#[derive(Clone, Debug, Serialize)]
pub struct TentPartitionReport {
    pub samples: usize,
    pub violations: usize,
    pub uncertain_fraction: f64,
}

/// Exactly-one tent per `(g, r)` draw: the scale box is pinned by the floor
/// construction, the shard by the partition check, and neighbors reject.
pub fn tent_partition_check(
    dims: &GroupDims,
    kappa: u32,
    jwindow: (f64, f64),
    samples: usize,
    seed: u64,
    tol: f64,
) -> TentPartitionReport {
    let nz = 2 * dims.n();
    let idxs: Vec<usize> = (0..samples).collect();
    let (violations, uncertain) = idxs
        .par_chunks(2048)
        .map(|chunk| {
            let mut rng = seeded_rng(seed, 51 + chunk[0] as u64);
            let mut viol = 0usize;
            let mut unc = 0usize;
            for _ in chunk {
                let r = ScaleTriple([
                    2.0f64.powf(rng.gen::<f64>() * (jwindow.1 - jwindow.0) + jwindow.0),
                    2.0f64.powf(rng.gen::<f64>() * (jwindow.1 - jwindow.0) + jwindow.0),
                    2.0f64.powf(rng.gen::<f64>() * (jwindow.1 - jwindow.0) + jwindow.0),
                ]);
                let jvec = [
                    r.0[0].log2().floor() as i64,
                    r.0[1].log2().floor() as i64,
                    r.0[2].log2().floor() as i64,
                ];
                let frame = ShardFrame::new(dims, kappa, jvec);
                let mut c = vec![0.0; nz + 2];
                for (k, item) in c.iter_mut().enumerate().take(nz) {
                    let s = 2.0f64.powi(jvec[coord_factor(dims, k)] as i32);
                    *item = (2.0 * rng.gen::<f64>() - 1.0) * 3.0 * s;
                }
                c[nz] = (2.0 * rng.gen::<f64>() - 1.0) * 3.0 * frame.steps[0];
                c[nz + 1] = (2.0 * rng.gen::<f64>() - 1.0) * 3.0 * frame.steps[1];
                let (tent, v) = tent_of(dims, kappa, &c, &r, tol);
                match v {
                    Verdict::Uncertain => unc += 1,
                    Verdict::Out => viol += 1,
                    Verdict::In => {
                        if !tent.scale_box_contains(&r) {
                            viol += 1;
                        }
                        if in_shard(dims, kappa, &tent.shard, &c, tol) != Verdict::In {
                            viol += 1;
                        }
                    }
                }
            }
            (viol, unc)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    TentPartitionReport {
        samples,
        violations,
        uncertain_fraction: uncertain as f64 / samples as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_dominates_all_constraints() {
        // The stack height forces 2 sigma >= kappa + 3 on top of the
        // tube-product and center inequalities.
        let d111 = GroupDims::new(1, 1, 1);
        assert_eq!(choose_kappa(&d111), 11);
        assert_eq!(choose_sigma(&d111), 7);
        let d0 = GroupDims::abelian();
        assert_eq!(choose_kappa(&d0), 10);
        assert_eq!(choose_sigma(&d0), 7);
        let d211 = GroupDims::new(2, 1, 1);
        assert_eq!(choose_kappa(&d211), 12);
        assert!(choose_sigma(&d211) >= 8);
        // Monotone in dims.
        assert!(choose_sigma(&GroupDims::new(3, 2, 2)) >= choose_sigma(&d111));
    }

    #[test]
    fn case_classification_with_swap() {
        let dims = GroupDims::new(1, 1, 1);
        let f = ShardFrame::new(&dims, 11, [0, 0, -5]);
        assert_eq!(f.case, ShardCase::I);
        assert!(!f.swapped);
        let f = ShardFrame::new(&dims, 11, [2, 0, 1]);
        assert_eq!(f.case, ShardCase::II);
        let f = ShardFrame::new(&dims, 11, [0, 0, 3]);
        assert_eq!(f.case, ShardCase::III);
        assert_eq!(f.stair, 1 << 6);
        // j2 > j1 records a swap and mirrors the ordering.
        let f = ShardFrame::new(&dims, 11, [0, 2, 1]);
        assert!(f.swapped);
        assert_eq!(f.j, [2, 0, 1]);
        assert_eq!(f.case, ShardCase::II);
    }

    #[test]
    fn center_is_interior() {
        let dims = GroupDims::new(1, 1, 1);
        let kappa = choose_kappa(&dims);
        for jvec in [[0, 0, -5], [2, 0, 1], [0, 0, 3], [0, 2, 1]] {
            let frame = ShardFrame::new(&dims, kappa, jvec);
            let basic = ShardId {
                jvec,
                swapped: frame.swapped,
                case: frame.case,
                za: vec![0; 2 * dims.n()],
                m: [0, 0],
            };
            let c = shard_center(&dims, kappa, &basic);
            assert_eq!(
                in_shard(&dims, kappa, &basic, &c, 1e-9),
                Verdict::In,
                "center not interior for {jvec:?}"
            );
        }
    }

    #[test]
    fn case_i_interval_example() {
        // jvec (0,0,-5): residual width 2^kappa per central axis; a point at
        // 1.5 * 2^kappa is outside the basic shard.
        let dims = GroupDims::new(1, 1, 1);
        let kappa = choose_kappa(&dims);
        let frame = ShardFrame::new(&dims, kappa, [0, 0, -5]);
        let basic = ShardId {
            jvec: [0, 0, -5],
            swapped: false,
            case: frame.case,
            za: vec![0; 6],
            m: [0, 0],
        };
        let span = 2.0f64.powi(kappa as i32);
        let mut c = vec![0.0; 8];
        c[0] = 0.25;
        c[6] = 1.5 * span;
        assert_eq!(in_shard(&dims, kappa, &basic, &c, 1e-9), Verdict::Out);
        c[6] = 0.5 * span;
        assert_eq!(in_shard(&dims, kappa, &basic, &c, 1e-9), Verdict::In);
    }

    #[test]
    fn location_is_equivariant_under_the_lattice() {
        let dims = GroupDims::new(1, 1, 1);
        let kappa = choose_kappa(&dims);
        let jvec = [1, 0, 2];
        let frame = ShardFrame::new(&dims, kappa, jvec);
        let mut rng = seeded_rng(13, 0);
        for _ in 0..200 {
            let id = ShardId {
                jvec,
                swapped: frame.swapped,
                case: frame.case,
                za: (0..6).map(|_| rng.gen_range(-2..=2)).collect(),
                m: [rng.gen_range(-2..=2), rng.gen_range(-2..=2)],
            };
            let p = sample_shard(&dims, kappa, &id, &mut rng, 1e-9);
            let (found, v) = shard_of_point(&dims, kappa, jvec, &p, 1e-9);
            if v == Verdict::In {
                assert_eq!(found, id, "relocation mismatch");
            }
        }
    }

    #[test]
    fn partition_exactly_one_all_cases() {
        let dims = GroupDims::new(1, 1, 1);
        let kappa = choose_kappa(&dims);
        for jvec in [[0, 0, -4], [1, 0, 1], [0, 0, 2]] {
            let rep = shard_partition_check(&dims, kappa, jvec, 20_000, 23, 1e-9);
            assert_eq!(rep.violations, 0, "{rep:?}");
            assert!(rep.uncertain_fraction < 1e-3);
        }
        // Abelian degenerate mode: exact rectangles.
        let d0 = GroupDims::abelian();
        let rep = shard_partition_check(&d0, choose_kappa(&d0), [0, -1, 1], 20_000, 29, 1e-9);
        assert_eq!(rep.violations, 0, "{rep:?}");
    }

    #[test]
    fn sandwich_all_cases() {
        let dims = GroupDims::new(1, 1, 1);
        let kappa = choose_kappa(&dims);
        let sigma = choose_sigma(&dims);
        for jvec in [[0, 0, -4], [1, 0, 1], [0, 0, 2], [0, 1, 0]] {
            let rep = shard_sandwich_check(&dims, kappa, sigma, jvec, 8_000, 37, 1e-9);
            assert!(rep.pass(), "{rep:?}");
        }
    }

    #[test]
    fn enlargement_bounds() {
        let dims = GroupDims::new(1, 1, 1);
        let kappa = choose_kappa(&dims);
        let sigma = choose_sigma(&dims);
        let jvec = [0, 0, 1];
        let frame = ShardFrame::new(&dims, kappa, jvec);
        let id = ShardId {
            jvec,
            swapped: frame.swapped,
            case: frame.case,
            za: vec![0, 1, -1, 0, 0, 2],
            m: [1, -1],
        };
        let rep = enlargement_check(&dims, kappa, sigma, &id, 3_000, 41, 1e-9).unwrap();
        assert!(rep.pass(), "{rep:?}");
    }

    #[test]
    fn tent_partition_draws() {
        let dims = GroupDims::new(1, 1, 1);
        let kappa = choose_kappa(&dims);
        let rep = tent_partition_check(&dims, kappa, (-2.0, 2.0), 10_000, 43, 1e-9);
        assert_eq!(rep.violations, 0, "{rep:?}");
        assert!(rep.uncertain_fraction < 1e-3);
    }
}
