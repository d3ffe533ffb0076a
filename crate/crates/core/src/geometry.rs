//! Slice geometry exporters for plotting: the projected-box hexagon, tube
//! cross-sections, shard staircase slices, and tile height graphs.

use crate::error::Result;
use crate::group::GroupDims;
use crate::shard::{ShardCase, ShardFrame};
use crate::tile::f_o;
use crate::tube::{tube_section, ScaleTriple};
use std::io::Write;

/// Vertices of the image of the central box `I_{r^2}` under the fiber
/// projection `(u1, u2, u3) -> (u1 + u3, u2 + u3)`: the Minkowski sum of
/// three segments, a hexagon (ordered counterclockwise).
pub fn hexagon_vertices(r: &ScaleTriple) -> Vec<[f64; 2]> {
    let [r1, r2, r3] = r.0;
    let (a, b, c) = (r1 * r1, r2 * r2, r3 * r3);
    let mut pts = Vec::new();
    for s1 in [-1.0, 1.0] {
        for s2 in [-1.0, 1.0] {
            for s3 in [-1.0, 1.0] {
                pts.push([s1 * a + s3 * c, s2 * b + s3 * c]);
            }
        }
    }
    convex_hull(pts)
}

fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|p, q| p[0].total_cmp(&q[0]).then(p[1].total_cmp(&q[1])));
    pts.dedup_by(|p, q| (p[0] - q[0]).abs() < 1e-12 && (p[1] - q[1]).abs() < 1e-12);
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: &[f64; 2], a: &[f64; 2], b: &[f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for p in &pts {
        while lower.len() >= 2 && cross(&lower[lower.len() - 2], &lower[lower.len() - 1], p) <= 1e-12 {
            lower.pop();
        }
        lower.push(*p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for p in pts.iter().rev() {
        while upper.len() >= 2 && cross(&upper[upper.len() - 2], &upper[upper.len() - 1], p) <= 1e-12 {
            upper.pop();
        }
        upper.push(*p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Central cross-section of the model tube as parallelogram vertices.
pub fn tube_slice_vertices(r: &ScaleTriple) -> Vec<[f64; 2]> {
    let s = tube_section(r);
    let mut v = Vec::new();
    for (pin, d) in [(-s.b, -s.a), (-s.b, s.a), (s.b, s.a), (s.b, -s.a)] {
        if s.pinned == 1 {
            v.push([pin + d, pin]);
        } else {
            v.push([pin, pin - d]);
        }
    }
    v
}

/// Central-slice rectangles of the basic shard (one per staircase block in
/// the diagonal case), in the swapped frame of the scale triple:
/// `(t1_lo, t1_hi, t2_lo, t2_hi)`.
pub fn shard_slice_rects(dims: &GroupDims, kappa: u32, jvec: [i64; 3]) -> Vec<[f64; 4]> {
    let frame = ShardFrame::new(dims, kappa, jvec);
    match frame.case {
        ShardCase::I => vec![[-frame.a, frame.a, -frame.b2, frame.b2]],
        ShardCase::II => vec![[-frame.a, frame.a, -frame.b3, frame.b3]],
        ShardCase::III => {
            let mut out = Vec::new();
            let mut m = -frame.stair;
            while m <= frame.stair - 2 {
                let md = m as f64 * frame.a;
                out.push([md - 3.0 * frame.a, md + 3.0 * frame.a, md - frame.a, md + frame.a]);
                m += 2;
            }
            out
        }
    }
}

/// Write the tile height graph over a grid of the unit cube as CSV.
pub fn write_height_csv(nu: usize, per_axis: usize, path: &std::path::Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let cols: Vec<String> = (0..2 * nu).map(|k| format!("y{k}")).collect();
    writeln!(w, "{},f", cols.join(","))?;
    let mut idx = vec![0usize; 2 * nu];
    loop {
        let y: Vec<f64> = idx.iter().map(|&i| i as f64 / per_axis as f64).collect();
        let v = f_o(&y, 1e-12);
        let row: Vec<String> = y.iter().map(|x| format!("{x}")).collect();
        writeln!(w, "{},{v}", row.join(","))?;
        let mut k = 0;
        loop {
            if k == 2 * nu {
                return Ok(());
            }
            idx[k] += 1;
            if idx[k] < per_axis {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hexagon_has_six_vertices() {
        let hex = hexagon_vertices(&ScaleTriple([2.0, 1.0, 1.0]));
        assert_eq!(hex.len(), 6, "{hex:?}");
        // Extremes: +-(r1^2 + r3^2) horizontally.
        let xmax = hex.iter().map(|p| p[0]).fold(f64::MIN, f64::max);
        assert_eq!(xmax, 5.0);
    }

    #[test]
    fn degenerate_hexagon_collapses() {
        // r3 = 0-like (tiny): four extreme points remain.
        let hex = hexagon_vertices(&ScaleTriple([2.0, 1.0, 1e-9]));
        assert!(hex.len() >= 4);
    }

    #[test]
    fn tube_slice_is_a_parallelogram() {
        let v = tube_slice_vertices(&ScaleTriple([2.0, 1.0, 1.0]));
        assert_eq!(v.len(), 4);
        // Pinned coordinate is t2 here.
        assert!(v.iter().all(|p| p[1].abs() <= 1.0 + 1e-12));
    }

    #[test]
    fn staircase_slices_count() {
        let dims = GroupDims::new(1, 1, 1);
        let rects = shard_slice_rects(&dims, 11, [0, 0, 2]);
        assert_eq!(rects.len(), 1 << 4, "one block per staircase step");
        let rects = shard_slice_rects(&dims, 11, [1, 0, 0]);
        assert_eq!(rects.len(), 1);
    }
}
