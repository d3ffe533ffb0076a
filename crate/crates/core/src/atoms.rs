//! Atomic decomposition over tents in the abelian degenerate mode: level
//! sets of the area function, shard classification, coefficient extraction,
//! atom certification by random sign sequences, grouping to maximal shards,
//! and reconstruction diagnostics.
//!
//! The scale window is octave-aligned so every scale point lies in exactly
//! one tent box, and every grid point in exactly one shard per octave
//! triple; summing the extracted pieces therefore reproduces the windowed
//! reproducing integral exactly (a reordering identity, verified
//! numerically on small configurations).  Mass at scales outside the window
//! is reported as unresolved tail rather than silently dropped.

use crate::error::{Error, Result};
use crate::field::RField;
use crate::group::GroupDims;
use crate::lp::{for_each_scale_field, lp_norm, ScaleWindow, WaveletPair};
use crate::shard::{shard_of_point, ShardFrame, ShardId};
use crate::tile::Verdict;
use crate::tube::{
    section_lattice_count, tube_box_sums, tube_volume_log2, ScaleTriple,
};
use crate::util::seeded_rng;
use crate::wavelet::{axis_kernel, convolve_axis, AxisDir, Profile};
use rand::Rng;
use serde::Serialize;
use std::collections::BTreeMap;

pub type ShardKey = ([i64; 3], [i64; 2]);

#[derive(Clone, Debug, Serialize)]
pub struct AtomsConfig {
    pub dims: GroupDims,
    /// Stack height exponent; in the abelian mode the height constraint is
    /// vacuous and the smallest positive choice keeps shards commensurate
    /// with their scale.
    pub kappa: u32,
    pub sigma: u32,
    pub window: ScaleWindow,
    pub ell_min: i32,
    pub ell_max: i32,
    pub m_order: u32,
    pub sign_draws: usize,
    pub seed: u64,
    pub slack: f64,
}

impl AtomsConfig {
    pub fn abelian(window: ScaleWindow, m_order: u32, seed: u64) -> Self {
        AtomsConfig {
            dims: GroupDims::abelian(),
            kappa: 1,
            sigma: 2,
            window,
            ell_min: -24,
            ell_max: 12,
            m_order,
            sign_draws: 32,
            seed,
            slack: 0.5,
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.dims.is_abelian() {
            return Err(Error::Config(
                "the atomic pipeline runs in the abelian mode; nonzero dims are served by the \
                 factorization identity checks"
                    .into(),
            ));
        }
        if self.window.jmin.fract() != 0.0 || self.window.jmax.fract() != 0.0 {
            return Err(Error::Config("scale window must be octave aligned".into()));
        }
        Ok(())
    }
}

/// Level sets of the area function with the shard classifier.
#[derive(Clone, Debug)]
pub struct LevelSetFamily {
    pub ell_range: (i32, i32),
    pub e_masks: Vec<Vec<bool>>,
    pub e_measures: Vec<f64>,
    pub etilde_masks: Vec<Vec<bool>>,
    pub etilde_measures: Vec<f64>,
    /// Level assigned to each shard (tents carrying any window mass).
    pub shard_level: BTreeMap<ShardKey, i32>,
    /// Window mass of shards whose classifier found no level in range.
    pub unresolved_mass: f64,
}

/// One extracted piece: the shard, its level, and the coefficient and
/// potential fields.
#[derive(Clone, Debug)]
pub struct AtomPiece {
    pub key: ShardKey,
    pub ell: i32,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

pub struct AtomsPipeline<'a> {
    pub cfg: AtomsConfig,
    pub f: &'a RField,
    pub pair: WaveletPair,
    scales: Vec<f64>,
    /// Stored per-triple convolutions `f * phi_r`.
    fr: Vec<RField>,
    /// Shard key of each grid point per octave triple.
    point_shard: BTreeMap<[i64; 3], Vec<ShardKey>>,
    pub area: RField,
    pub family: LevelSetFamily,
    pub lambda: BTreeMap<i32, f64>,
    /// Tent energy per shard (window mass of its tents).
    pub tent_energy: BTreeMap<ShardKey, f64>,
}

fn octave_of(r: f64) -> i64 {
    r.log2().floor() as i64
}

impl<'a> AtomsPipeline<'a> {
    /// Run the level-set stage: per-scale convolutions, the area function,
    /// level masks and measures, and the shard classifier.
    pub fn build(cfg: AtomsConfig, f: &'a RField, pair: WaveletPair) -> Result<Self> {
        cfg.validate()?;
        pair.validate()?;
        let (phi, _) = pair.abelian_profiles()?;
        let scales = cfg.window.scales();
        let w = cfg.window.weight().powi(3);
        let npts = f.grid.len();
        let h = f.grid.axes[0].spacing;

        // Store F_r for every scale triple and accumulate the area function.
        let g = scales.len();
        let mut fr: Vec<RField> = Vec::with_capacity(g * g * g);
        let mut area_sq = vec![0.0; npts];
        for_each_scale_field(f, phi, &cfg.window, |_, _, _, r, field| {
            let sq = field.map(|v| v * v);
            let rt = ScaleTriple([r[0], r[1], r[2]]);
            let count = section_lattice_count(&rt, h).max(1.0);
            let (sums, _) = tube_box_sums(&sq, &rt)?;
            for (a, s) in area_sq.iter_mut().zip(&sums) {
                *a += w * s / count;
            }
            fr.push(field.clone());
            Ok(())
        })?;
        let area = RField {
            domain: f.domain,
            dims: f.dims,
            grid: f.grid.clone(),
            values: area_sq.iter().map(|v| v.sqrt()).collect(),
        };

        // Shard of every grid point per octave triple.
        let jmin = cfg.window.jmin as i64;
        let jmax = cfg.window.jmax as i64;
        let mut point_shard: BTreeMap<[i64; 3], Vec<ShardKey>> = BTreeMap::new();
        let nd = f.grid.ndim();
        let mut coords = vec![0.0; nd];
        for j1 in jmin..jmax {
            for j2 in jmin..jmax {
                for j3 in jmin..jmax {
                    let jvec = [j1, j2, j3];
                    let mut keys = Vec::with_capacity(npts);
                    for flat in 0..npts {
                        f.grid.coords_of(flat, &mut coords);
                        let (id, v) = shard_of_point(&cfg.dims, cfg.kappa, jvec, &coords, 1e-9);
                        debug_assert!(v != Verdict::Out);
                        keys.push((jvec, id.m));
                    }
                    point_shard.insert(jvec, keys);
                }
            }
        }

        // Tent energies per shard.
        let cell = f.grid.cell_volume();
        let mut tent_energy: BTreeMap<ShardKey, f64> = BTreeMap::new();
        let mut idx = 0usize;
        for &r1 in &scales {
            for &r2 in &scales {
                for &r3 in &scales {
                    let jvec = [octave_of(r1), octave_of(r2), octave_of(r3)];
                    let keys = &point_shard[&jvec];
                    let field = &fr[idx];
                    for (flat, &v) in field.values.iter().enumerate() {
                        if v != 0.0 {
                            *tent_energy.entry(keys[flat]).or_insert(0.0) +=
                                w * v * v * cell;
                        }
                    }
                    idx += 1;
                }
            }
        }

        // Level sets.
        let nl = (cfg.ell_max - cfg.ell_min + 1) as usize;
        let mut e_masks = Vec::with_capacity(nl);
        let mut e_measures = Vec::with_capacity(nl);
        for li in 0..nl {
            let thr = 2.0f64.powi(cfg.ell_min + li as i32);
            let mask: Vec<bool> = area.values.iter().map(|&s| s > thr).collect();
            let meas = mask.iter().filter(|&&b| b).count() as f64 * cell;
            e_masks.push(mask);
            e_measures.push(meas);
        }

        // Enlarged sets through the tube maximal function of the masks.  The
        // scale set includes one domain-covering tube, so the threshold
        // (far below any attainable average) is crossed wherever the mask
        // has mass at all; smaller window tubes refine the field near the
        // mask.  The threshold itself is reported with the config.
        let mut max_scales: Vec<ScaleTriple> = Vec::new();
        for j in jmin..=jmax + 3 {
            let r = 2.0f64.powi(j as i32);
            max_scales.push(ScaleTriple([r, r, r]));
        }
        let span = f.grid.axes[0].last() - f.grid.axes[0].origin;
        let cover = span.sqrt() * 2.0;
        max_scales.push(ScaleTriple([cover, cover, cover]));
        let etilde_thr = 2.0f64.powi(-(3 * cfg.sigma as i32 * cfg.dims.q() as i32) - 1);
        let mut etilde_masks = Vec::with_capacity(nl);
        let mut etilde_measures = Vec::with_capacity(nl);
        for mask in &e_masks {
            let ind = RField {
                domain: f.domain,
                dims: f.dims,
                grid: f.grid.clone(),
                values: mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            };
            let m = crate::tube::maximal_tube(&ind, &max_scales)?;
            let emask: Vec<bool> = m.values.iter().map(|&v| v > etilde_thr).collect();
            let meas = emask.iter().filter(|&&b| b).count() as f64 * cell;
            etilde_masks.push(emask);
            etilde_measures.push(meas);
        }

        // Shard classifier: the unique level with
        // |R* cap E_{l+1}| <= 2^{-2 sigma Q - 1} |R*| < |R* cap E_l|.
        // |R*| is the analytic tube volume; the intersections are grid
        // measures over the enlargement tube.
        let mut shard_level: BTreeMap<ShardKey, i32> = BTreeMap::new();
        let mut unresolved_mass = 0.0;
        let q = cfg.dims.q() as f64;
        for (&key, &energy) in &tent_energy {
            let (jvec, m) = key;
            let rstar_log2 = tube_volume_log2(
                &cfg.dims,
                &[
                    jvec[0] as f64 + 2.0 * cfg.sigma as f64,
                    jvec[1] as f64 + 2.0 * cfg.sigma as f64,
                    jvec[2] as f64 + 2.0 * cfg.sigma as f64,
                ],
            );
            let tau = 2.0f64.powf(rstar_log2 - 2.0 * cfg.sigma as f64 * q - 1.0);
            // Grid measures of R* cap E_l for all levels at once.
            let frame = ShardFrame::new(&cfg.dims, cfg.kappa, jvec);
            let base1 = m[0] as f64 * frame.steps[0];
            let base2 = m[1] as f64 * frame.steps[1];
            let rstar = ScaleTriple([
                2.0f64.powi(jvec[0] as i32 + 2 * cfg.sigma as i32),
                2.0f64.powi(jvec[1] as i32 + 2 * cfg.sigma as i32),
                2.0f64.powi(jvec[2] as i32 + 2 * cfg.sigma as i32),
            ]);
            let mut level = None;
            let mut meas_prev = f64::INFINITY;
            for li in 0..nl {
                let meas = tube_mask_measure(f, &e_masks[li], &rstar, [base1, base2])?;
                if li > 0 && meas <= tau && tau < meas_prev {
                    level = Some(cfg.ell_min + li as i32 - 1);
                    break;
                }
                meas_prev = meas;
            }
            match level {
                Some(l) => {
                    shard_level.insert(key, l);
                }
                None => {
                    unresolved_mass += energy;
                }
            }
        }

        // Coefficients lambda_l: masked window energy times the measure of
        // the enlarged level set.
        let mut lambda: BTreeMap<i32, f64> = BTreeMap::new();
        for (key, &energy) in &tent_energy {
            if let Some(&l) = shard_level.get(key) {
                *lambda.entry(l).or_insert(0.0) += energy;
            }
        }
        let lambda: BTreeMap<i32, f64> = lambda
            .into_iter()
            .map(|(l, e)| {
                let li = (l - cfg.ell_min) as usize;
                (l, e.sqrt() * etilde_measures[li].sqrt())
            })
            .collect();

        let family = LevelSetFamily {
            ell_range: (cfg.ell_min, cfg.ell_max),
            e_masks,
            e_measures,
            etilde_masks,
            etilde_measures,
            shard_level,
            unresolved_mass,
        };
        Ok(AtomsPipeline {
            cfg,
            f,
            pair,
            scales,
            fr,
            point_shard,
            area,
            family,
            lambda,
            tent_energy,
        })
    }

    /// Shards classified to one level.
    pub fn shards_at_level(&self, ell: i32) -> Vec<ShardKey> {
        self.family
            .shard_level
            .iter()
            .filter(|(_, &l)| l == ell)
            .map(|(&k, _)| k)
            .collect()
    }

    pub fn levels(&self) -> Vec<i32> {
        self.lambda.keys().cloned().collect()
    }

    /// Extract the pieces of one level: coefficient fields
    /// `a_R = (1/lambda) sum_{r in box(R)} w (F_r 1_R) * psi_r` and the
    /// potentials `b_R` built from the compact potential profile with the
    /// parabolic scale factor `(r1 r2 r3)^{4M}` that intertwines the
    /// degenerate sub-Laplacian powers.
    pub fn extract_pieces(&self, ell: i32) -> Result<Vec<AtomPiece>> {
        let lam = *self
            .lambda
            .get(&ell)
            .ok_or_else(|| Error::InvalidArg(format!("no mass at level {ell}")))?;
        if lam == 0.0 {
            return Err(Error::InvalidArg(format!("degenerate level {ell}: zero coefficient")));
        }
        let (_, psi) = self.pair.abelian_profiles()?;
        let psidot = match &self.pair {
            WaveletPair::AbelianAnalytic { psidot, .. } => psidot.clone(),
            _ => None,
        };
        let shards = self.shards_at_level(ell);
        let w = self.cfg.window.weight().powi(3);
        let npts = self.f.grid.len();
        let mut pieces: Vec<AtomPiece> = shards
            .iter()
            .map(|&key| AtomPiece { key, ell, a: vec![0.0; npts], b: vec![0.0; npts] })
            .collect();
        let index_of: BTreeMap<ShardKey, usize> =
            shards.iter().enumerate().map(|(i, &k)| (k, i)).collect();

        let g = self.scales.len();
        for (i1, &r1) in self.scales.iter().enumerate() {
            for (i2, &r2) in self.scales.iter().enumerate() {
                for (i3, &r3) in self.scales.iter().enumerate() {
                    let jvec = [octave_of(r1), octave_of(r2), octave_of(r3)];
                    let keys = &self.point_shard[&jvec];
                    let field = &self.fr[i1 * g * g + i2 * g + i3];
                    // Masked stage convolutions per shard of this level.
                    let mut masked: BTreeMap<usize, RField> = BTreeMap::new();
                    for (flat, key) in keys.iter().enumerate() {
                        if let Some(&pi) = index_of.get(key) {
                            let v = field.values[flat];
                            if v != 0.0 {
                                masked
                                    .entry(pi)
                                    .or_insert_with(|| {
                                        RField::zeros(
                                            self.f.domain,
                                            self.f.dims,
                                            self.f.grid.clone(),
                                        )
                                    })
                                    .values[flat] = v;
                            }
                        }
                    }
                    for (pi, mfield) in masked {
                        let out = self.stage_psi(&mfield, psi, [r1, r2, r3])?;
                        for (acc, v) in pieces[pi].a.iter_mut().zip(&out.values) {
                            *acc += w * v / lam;
                        }
                        if let Some(pd) = &psidot {
                            let out = self.stage_psi(&mfield, pd, [r1, r2, r3])?;
                            let scale =
                                (r1 * r2 * r3).powi(4 * self.cfg.m_order as i32);
                            for (acc, v) in pieces[pi].b.iter_mut().zip(&out.values) {
                                *acc += w * scale * v / lam;
                            }
                        }
                    }
                }
            }
        }
        Ok(pieces)
    }

    fn stage_psi(&self, f: &RField, prof: &Profile, r: [f64; 3]) -> Result<RField> {
        let h = f.grid.axes[0].spacing;
        let ext = f.grid.axes[0].last() - f.grid.axes[0].origin;
        let k1 = axis_kernel(prof, r[0] * r[0], h, ext);
        let k2 = axis_kernel(prof, r[1] * r[1], h, ext);
        let k3 = axis_kernel(prof, r[2] * r[2], h, ext);
        let a = convolve_axis(f, AxisDir::T1, &k1)?;
        let b = convolve_axis(&a, AxisDir::T2, &k2)?;
        convolve_axis(&b, AxisDir::Diag, &k3)
    }

    /// The full windowed reproducing integral (all tents, unmasked).
    pub fn windowed_reconstruction(&self) -> Result<RField> {
        let (_, psi) = self.pair.abelian_profiles()?;
        let w = self.cfg.window.weight().powi(3);
        let mut acc = RField::zeros(self.f.domain, self.f.dims, self.f.grid.clone());
        let g = self.scales.len();
        for (i1, &r1) in self.scales.iter().enumerate() {
            for (i2, &r2) in self.scales.iter().enumerate() {
                for (i3, &r3) in self.scales.iter().enumerate() {
                    let field = &self.fr[i1 * g * g + i2 * g + i3];
                    let out = self.stage_psi(field, psi, [r1, r2, r3])?;
                    for (a, v) in acc.values.iter_mut().zip(&out.values) {
                        *a += w * v;
                    }
                }
            }
        }
        Ok(acc)
    }
}

/// Grid measure of `E cap T(base, r)` for a mask over the field's grid.
fn tube_mask_measure(
    f: &RField,
    mask: &[bool],
    r: &ScaleTriple,
    base: [f64; 2],
) -> Result<f64> {
    let ind = RField {
        domain: f.domain,
        dims: f.dims,
        grid: f.grid.clone(),
        values: mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    };
    let (sums, _) = tube_box_sums(&ind, r)?;
    // Interpolate the box-sum field at the base point (sums live on grid
    // points; the base is a lattice point of the shard lattice, typically
    // off this grid, so take the nearest grid point).
    let ax0 = &f.grid.axes[0];
    let ax1 = &f.grid.axes[1];
    let i = ((base[0] - ax0.origin) / ax0.spacing)
        .round()
        .clamp(0.0, (ax0.count - 1) as f64) as usize;
    let j = ((base[1] - ax1.origin) / ax1.spacing)
        .round()
        .clamp(0.0, (ax1.count - 1) as f64) as usize;
    Ok(sums[i * ax1.count + j] * f.grid.cell_volume())
}

// ---------------------------------------------------------------------------
// Certification and reports.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct AtomCertification {
    pub ell: i32,
    pub pieces: usize,
    /// sup over sign draws of `||sum tau_R a_R||_2 * |E~_l|^{1/2}`.
    pub worst_ratio: f64,
    pub slack: f64,
    pub support_violations: usize,
    /// Relative defect of `a_R = Delta^M b_R` at probe points.
    pub laplacian_defect: f64,
    pub pass: bool,
}

/// Certify the atom properties at one level: the sign-sequence bound
/// against `|E~_l|^{-1/2}`, potential supports inside the enlargements, and
/// the sub-Laplacian relation between coefficients and potentials.
pub fn certify_atoms(
    pipe: &AtomsPipeline,
    ell: i32,
    pieces: &[AtomPiece],
) -> Result<AtomCertification> {
    let li = (ell - pipe.cfg.ell_min) as usize;
    let emeas = pipe.family.etilde_measures[li];
    let cell = pipe.f.grid.cell_volume();
    let npts = pipe.f.grid.len();
    let mut worst: f64 = 0.0;
    let mut rng = seeded_rng(pipe.cfg.seed, (ell as i64 + 1_000_000) as u64);
    for draw in 0..pipe.cfg.sign_draws {
        let mut acc = vec![0.0; npts];
        for (pi, piece) in pieces.iter().enumerate() {
            let sign = if draw == 0 {
                1.0 // the all-plus sequence is always included
            } else if rng.gen::<bool>() {
                1.0
            } else {
                -1.0
            };
            let _ = pi;
            for (a, v) in acc.iter_mut().zip(&piece.a) {
                *a += sign * v;
            }
        }
        let norm = (acc.iter().map(|v| v * v).sum::<f64>() * cell).sqrt();
        worst = worst.max(norm * emeas.sqrt());
    }

    // Support of the potentials inside the enlargements.
    let mut support_violations = 0usize;
    let nd = pipe.f.grid.ndim();
    let mut coords = vec![0.0; nd];
    for piece in pieces {
        let (jvec, m) = piece.key;
        let frame = ShardFrame::new(&pipe.cfg.dims, pipe.cfg.kappa, jvec);
        let base = crate::group::PointN {
            z: vec![],
            t: [m[0] as f64 * frame.steps[0], m[1] as f64 * frame.steps[1]],
        };
        let tube = crate::tube::Tube {
            base,
            r: ScaleTriple([
                2.0f64.powi(jvec[0] as i32 + 2 * pipe.cfg.sigma as i32),
                2.0f64.powi(jvec[1] as i32 + 2 * pipe.cfg.sigma as i32),
                2.0f64.powi(jvec[2] as i32 + 2 * pipe.cfg.sigma as i32),
            ]),
        };
        let sup = piece.b.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        if sup == 0.0 {
            continue;
        }
        for (flat, &v) in piece.b.iter().enumerate() {
            if v.abs() > 1e-9 * sup {
                pipe.f.grid.coords_of(flat, &mut coords);
                let p = crate::group::pointn_from_coords(&pipe.cfg.dims, &coords)?;
                if !crate::tube::in_tube(&pipe.cfg.dims, &tube, &p)? {
                    support_violations += 1;
                }
            }
        }
    }

    // a = Delta_1^M Delta_2^M Delta_3^M b at interior probe points, by
    // central differences of the composite degenerate sub-Laplacians.
    let mut defect: f64 = 0.0;
    if pipe.cfg.m_order == 1 {
        let n2 = pipe.f.grid.axes[1].count;
        let n1 = pipe.f.grid.axes[0].count;
        let h = pipe.f.grid.axes[0].spacing;
        for piece in pieces {
            let sup = piece.a.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            if sup == 0.0 {
                continue;
            }
            let read = |i: i64, j: i64| -> f64 {
                if i < 0 || j < 0 || i >= n1 as i64 || j >= n2 as i64 {
                    0.0
                } else {
                    piece.b[(i as usize) * n2 + j as usize]
                }
            };
            // Delta_1 Delta_2 Delta_3 b with Delta_1 = -d^2/dt1^2,
            // Delta_2 = -d^2/dt2^2, Delta_3 = -(d/dt1 + d/dt2)^2.
            let lap = |i: i64, j: i64| -> f64 {
                let d2 = |f: &dyn Fn(i64, i64) -> f64, di: i64, dj: i64, i: i64, j: i64| {
                    (f(i + di, j + dj) - 2.0 * f(i, j) + f(i - di, j - dj)) / (h * h)
                };
                let l3 = |i: i64, j: i64| -d2(&read, 1, 1, i, j);
                let l23 = |i: i64, j: i64| -d2(&l3, 0, 1, i, j);
                -d2(&l23, 1, 0, i, j)
            };
            let mut count = 0;
            for (flat, &av) in piece.a.iter().enumerate() {
                if av.abs() > 0.2 * sup && count < 24 {
                    let i = (flat / n2) as i64;
                    let j = (flat % n2) as i64;
                    if i >= 3 && j >= 3 && i < n1 as i64 - 3 && j < n2 as i64 - 3 {
                        let l = lap(i, j);
                        defect = defect.max((l - av).abs() / sup);
                        count += 1;
                    }
                }
            }
        }
    }

    let pass = worst <= 1.0 + pipe.cfg.slack && support_violations == 0;
    Ok(AtomCertification {
        ell,
        pieces: pieces.len(),
        worst_ratio: worst,
        slack: pipe.cfg.slack,
        support_violations,
        laplacian_defect: defect,
        pass,
    })
}

/// Group pieces to maximal shards of the enlarged level set: each piece is
/// folded into the largest shard (by volume) of the family that contains
/// it, preserving the potential form and supports.
pub fn group_to_maximal(
    pipe: &AtomsPipeline,
    ell: i32,
    pieces: &[AtomPiece],
) -> Result<Vec<AtomPiece>> {
    // Candidate shards: those of the level family inside E~_l (grid check).
    let li = (ell - pipe.cfg.ell_min) as usize;
    let emask = &pipe.family.etilde_masks[li];
    let nd = pipe.f.grid.ndim();
    let mut coords = vec![0.0; nd];
    let keys: Vec<ShardKey> = pieces.iter().map(|p| p.key).collect();
    let inside = |key: &ShardKey| -> bool {
        // Every grid point of the shard lies inside the mask.
        let (jvec, _m) = *key;
        let point_keys = &pipe.point_shard[&jvec];
        let mut any = false;
        for (flat, k) in point_keys.iter().enumerate() {
            if k == key {
                any = true;
                if !emask[flat] {
                    return false;
                }
            }
        }
        any
    };
    let _ = &mut coords;
    // Geometric inclusion of abelian shards (rectangles), exact arithmetic.
    let rect = |key: &ShardKey| -> ([f64; 2], [f64; 2]) {
        let (jvec, m) = *key;
        let frame = ShardFrame::new(&pipe.cfg.dims, pipe.cfg.kappa, jvec);
        let half = [frame.steps[0] / 2.0, frame.steps[1] / 2.0];
        let base = [m[0] as f64 * frame.steps[0], m[1] as f64 * frame.steps[1]];
        ([base[0] - half[0], base[1] - half[1]], [base[0] + half[0], base[1] + half[1]])
    };
    let contains = |big: &ShardKey, small: &ShardKey| -> bool {
        let (blo, bhi) = rect(big);
        let (slo, shi) = rect(small);
        blo[0] <= slo[0] && blo[1] <= slo[1] && bhi[0] >= shi[0] && bhi[1] >= shi[1]
    };
    // Maximal members of the family.
    let candidates: Vec<ShardKey> = keys.iter().cloned().filter(|k| inside(k)).collect();
    let mut maximal: Vec<ShardKey> = Vec::new();
    'outer: for k in &candidates {
        for other in &candidates {
            if other != k && contains(other, k) && !contains(k, other) {
                continue 'outer;
            }
        }
        maximal.push(*k);
    }
    // Fold each piece into its maximal representative.
    let npts = pipe.f.grid.len();
    let mut grouped: BTreeMap<ShardKey, AtomPiece> = BTreeMap::new();
    for piece in pieces {
        let target = maximal
            .iter()
            .find(|mk| contains(mk, &piece.key))
            .cloned()
            .unwrap_or(piece.key);
        let entry = grouped.entry(target).or_insert_with(|| AtomPiece {
            key: target,
            ell,
            a: vec![0.0; npts],
            b: vec![0.0; npts],
        });
        for (acc, v) in entry.a.iter_mut().zip(&piece.a) {
            *acc += v;
        }
        for (acc, v) in entry.b.iter_mut().zip(&piece.b) {
            *acc += v;
        }
    }
    Ok(grouped.into_values().collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct HalfMeasureReport {
    pub sampled_tents: usize,
    pub violations: usize,
    pub worst_ratio: f64,
}

/// Certify `|(E~_l \ E_{l+1}) cap T(g', r)| / |T(g', r)| >= 1/2` over
/// sampled tent points of the classified shards.
pub fn half_measure_check(pipe: &AtomsPipeline, per_level: usize) -> Result<HalfMeasureReport> {
    let mut rng = seeded_rng(pipe.cfg.seed, 777);
    let mut sampled = 0usize;
    let mut violations = 0usize;
    let mut worst: f64 = 1.0;
    let nl = pipe.family.e_masks.len();
    let h = pipe.f.grid.axes[0].spacing;
    for (key, &ell) in &pipe.family.shard_level {
        let li = (ell - pipe.cfg.ell_min) as usize;
        if li + 1 >= nl {
            continue;
        }
        let (jvec, _) = *key;
        // Mask of the good set.
        let good: Vec<f64> = pipe.family.etilde_masks[li]
            .iter()
            .zip(&pipe.family.e_masks[li + 1])
            .map(|(&et, &e1)| if et && !e1 { 1.0 } else { 0.0 })
            .collect();
        let gf = RField {
            domain: pipe.f.domain,
            dims: pipe.f.dims,
            grid: pipe.f.grid.clone(),
            values: good,
        };
        for _ in 0..per_level {
            // Scale inside the tent box, base at a grid point of the shard.
            let r = ScaleTriple([
                2.0f64.powi(jvec[0] as i32) * (1.0 + rng.gen::<f64>()),
                2.0f64.powi(jvec[1] as i32) * (1.0 + rng.gen::<f64>()),
                2.0f64.powi(jvec[2] as i32) * (1.0 + rng.gen::<f64>()),
            ]);
            let count = section_lattice_count(&r, h);
            if count < 16.0 {
                continue; // too coarse for a meaningful grid ratio
            }
            let keys = &pipe.point_shard[&jvec];
            let candidates: Vec<usize> = keys
                .iter()
                .enumerate()
                .filter(|(_, k)| *k == key)
                .map(|(flat, _)| flat)
                .collect();
            if candidates.is_empty() {
                continue;
            }
            let flat = candidates[rng.gen_range(0..candidates.len())];
            let (sums, counts) = tube_box_sums(&gf, &r)?;
            if counts[flat] < 16.0 {
                continue;
            }
            let ratio = sums[flat] / counts[flat];
            sampled += 1;
            worst = worst.min(ratio);
            if ratio < 0.5 {
                violations += 1;
            }
        }
    }
    Ok(HalfMeasureReport { sampled_tents: sampled, violations, worst_ratio: worst })
}

#[derive(Clone, Debug, Serialize)]
pub struct DecompositionReport {
    pub lambda_sum: f64,
    pub area_l1: f64,
    pub ratio: f64,
    pub unresolved_mass: f64,
    pub reconstruction_l1_rel: f64,
    pub levels: Vec<i32>,
}

/// Headline numbers: `sum |lambda_l|`, `||S(f)||_1`, their ratio, and the
/// relative `L^1` reconstruction error of the windowed integral.
pub fn decomposition_report(pipe: &AtomsPipeline) -> Result<DecompositionReport> {
    let lambda_sum: f64 = pipe.lambda.values().sum();
    let area_l1 = lp_norm(&pipe.area, 1.0)?;
    let recon = pipe.windowed_reconstruction()?;
    let mut diff = pipe.f.clone();
    for (d, r) in diff.values.iter_mut().zip(&recon.values) {
        *d -= r;
    }
    let rel = lp_norm(&diff, 1.0)? / lp_norm(pipe.f, 1.0)?;
    Ok(DecompositionReport {
        lambda_sum,
        area_l1,
        ratio: lambda_sum / area_l1.max(1e-300),
        unresolved_mass: pipe.family.unresolved_mass,
        reconstruction_l1_rel: rel,
        levels: pipe.levels(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{AxisSpec, DomainTag, Field, GridSpec};
    use crate::lp::abelian_atom_pair;

    fn bump_field(extent: f64, count: usize, width: f64) -> RField {
        let grid = GridSpec::new(vec![
            AxisSpec::symmetric(extent, count),
            AxisSpec::symmetric(extent, count),
        ])
        .unwrap();
        Field::from_fn(DomainTag::BaseGroup, GroupDims::abelian(), grid, move |c| {
            let r2 = (c[0] * c[0] + c[1] * c[1]) / (width * width);
            (1.0 - r2).max(0.0).powi(3)
        })
    }

    fn small_config(seed: u64) -> AtomsConfig {
        AtomsConfig::abelian(ScaleWindow::new(-1.0, 2.0, 2).unwrap(), 1, seed)
    }

    #[test]
    fn zero_field_gives_empty_family() {
        let f = bump_field(8.0, 33, 1.0);
        let z: RField = Field::zeros(f.domain, f.dims, f.grid.clone());
        let pipe =
            AtomsPipeline::build(small_config(3), &z, abelian_atom_pair(1).unwrap()).unwrap();
        assert!(pipe.lambda.is_empty());
        assert!(pipe.family.e_measures.iter().all(|&m| m == 0.0));
        let rep = decomposition_report(&pipe).unwrap();
        assert_eq!(rep.lambda_sum, 0.0);
    }

    #[test]
    fn level_sets_are_monotone() {
        let f = bump_field(8.0, 49, 1.2);
        let pipe =
            AtomsPipeline::build(small_config(5), &f, abelian_atom_pair(1).unwrap()).unwrap();
        for w in pipe.family.e_measures.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "level measures must decrease");
        }
        // Each classified shard has exactly one level by construction; the
        // enlarged sets contain the level sets.
        for (em, etm) in pipe.family.e_masks.iter().zip(&pipe.family.etilde_masks) {
            for (e, et) in em.iter().zip(etm) {
                assert!(!e | et, "E_l must sit inside its enlargement");
            }
        }
    }

    #[test]
    fn pieces_sum_to_windowed_reconstruction() {
        let f = bump_field(8.0, 41, 1.2);
        let pipe =
            AtomsPipeline::build(small_config(7), &f, abelian_atom_pair(1).unwrap()).unwrap();
        let recon = pipe.windowed_reconstruction().unwrap();
        // Sum lambda_l * sum_R a_{l,R} over all levels plus the unresolved
        // tents; with full coverage the reordering is exact.
        let mut acc = vec![0.0; f.grid.len()];
        let mut covered = true;
        for ell in pipe.levels() {
            let lam = pipe.lambda[&ell];
            let pieces = pipe.extract_pieces(ell).unwrap();
            for p in &pieces {
                for (a, v) in acc.iter_mut().zip(&p.a) {
                    *a += lam * v;
                }
            }
        }
        if pipe.family.unresolved_mass > 0.0 {
            covered = false;
        }
        if covered {
            let mut worst: f64 = 0.0;
            for (a, r) in acc.iter().zip(&recon.values) {
                worst = worst.max((a - r).abs());
            }
            let scale = recon.sup_magnitude().max(1e-300);
            assert!(worst / scale < 1e-10, "reordering defect {}", worst / scale);
        }
    }

    #[test]
    fn certification_and_grouping() {
        let f = bump_field(8.0, 41, 1.2);
        let pipe =
            AtomsPipeline::build(small_config(11), &f, abelian_atom_pair(1).unwrap()).unwrap();
        let mut any = false;
        for ell in pipe.levels() {
            let pieces = pipe.extract_pieces(ell).unwrap();
            if pieces.is_empty() {
                continue;
            }
            any = true;
            let cert = certify_atoms(&pipe, ell, &pieces).unwrap();
            assert!(cert.pass, "level {ell}: {cert:?}");
            let grouped = group_to_maximal(&pipe, ell, &pieces).unwrap();
            assert!(grouped.len() <= pieces.len());
            let cert2 = certify_atoms(&pipe, ell, &grouped).unwrap();
            assert!(cert2.pass, "regrouped level {ell}: {cert2:?}");
            // Grouping preserves the level sum exactly.
            let mut s1 = vec![0.0; f.grid.len()];
            let mut s2 = vec![0.0; f.grid.len()];
            for p in &pieces {
                for (a, v) in s1.iter_mut().zip(&p.a) {
                    *a += v;
                }
            }
            for p in &grouped {
                for (a, v) in s2.iter_mut().zip(&p.a) {
                    *a += v;
                }
            }
            let worst = s1
                .iter()
                .zip(&s2)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            assert!(worst < 1e-12);
        }
        assert!(any, "battery produced no pieces");
    }

    #[test]
    fn scaling_doubles_lambda() {
        let f = bump_field(8.0, 41, 1.2);
        let f2 = f.map(|v| 2.0 * v);
        let pair = abelian_atom_pair(1).unwrap();
        let p1 = AtomsPipeline::build(small_config(13), &f, pair.clone()).unwrap();
        // Shift the level range by one so the dyadic thresholds match the
        // doubled field exactly.
        let mut cfg2 = small_config(13);
        cfg2.ell_min += 1;
        cfg2.ell_max += 1;
        let p2 = AtomsPipeline::build(cfg2, &f2, pair).unwrap();
        let s1: f64 = p1.lambda.values().sum();
        let s2: f64 = p2.lambda.values().sum();
        assert!((s2 / s1 - 2.0).abs() < 1e-9, "lambda scaling {s2} vs 2*{s1}");
        let r1 = decomposition_report(&p1).unwrap();
        let r2 = decomposition_report(&p2).unwrap();
        assert!((r2.ratio / r1.ratio - 1.0).abs() < 1e-9);
    }

    #[test]
    fn half_measure_inequality() {
        let f = bump_field(8.0, 49, 1.2);
        let pipe =
            AtomsPipeline::build(small_config(17), &f, abelian_atom_pair(1).unwrap()).unwrap();
        let rep = half_measure_check(&pipe, 8).unwrap();
        assert_eq!(rep.violations, 0, "{rep:?}");
    }
}
