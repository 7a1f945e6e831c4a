//! Overlap and boundary metrics over the nested tumor regions: Dice in
//! percent and the 95th-percentile Hausdorff distance in millimetres.
//!
//! HD95 uses the pooled convention: directed surface distances from both
//! masks go into one multiset and the quantile is taken over that. Nearest
//! distances come from an exact Euclidean distance transform (lower
//! envelope of parabolas, one pass per axis), so small cases can be checked
//! against the all-pairs oracle without tolerance.

use crate::error::{Error, Result};
use crate::volume::LabelVolume;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    WholeTumor,
    TumorCore,
    EnhancingTumor,
}

impl Region {
    /// Report order follows the results table: WT, TC, ET.
    pub const ALL: [Region; 3] = [Region::WholeTumor, Region::TumorCore, Region::EnhancingTumor];

    pub fn name(self) -> &'static str {
        match self {
            Region::WholeTumor => "WT",
            Region::TumorCore => "TC",
            Region::EnhancingTumor => "ET",
        }
    }

    pub fn contains_class(self, label: u8) -> bool {
        match self {
            Region::WholeTumor => (1..=3).contains(&label),
            Region::TumorCore => label == 2 || label == 3,
            Region::EnhancingTumor => label == 3,
        }
    }
}

/// Binary mask over a (D, H, W) grid with physical voxel spacing in mm.
#[derive(Clone, Debug)]
pub struct RegionMask {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub mask: Vec<bool>,
}

impl RegionMask {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], mask: Vec<bool>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if mask.len() != n {
            return Err(Error::shape(
                "region mask",
                format!("{} entries for dims {dims:?}", mask.len()),
            ));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::config(format!("spacing {spacing:?} must be positive")));
        }
        Ok(RegionMask { dims, spacing, mask })
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }
}

/// Builds the three nested masks (WT ⊇ TC ⊇ ET) from a single-case label
/// map. Labels above 3 are rejected.
pub fn regions_from_labels(labels: &LabelVolume, spacing: [f64; 3]) -> Result<[RegionMask; 3]> {
    let [b, d, h, w] = labels.shape();
    if b != 1 {
        return Err(Error::shape("regions", format!("expected one case, got batch {b}")));
    }
    if let Some(&bad) = labels.data().iter().find(|&&l| l > 3) {
        return Err(Error::config(format!("label {bad} outside the class range 0..=3")));
    }
    let build = |region: Region| {
        RegionMask::new(
            [d, h, w],
            spacing,
            labels.data().iter().map(|&l| region.contains_class(l)).collect(),
        )
    };
    Ok([build(Region::WholeTumor)?, build(Region::TumorCore)?, build(Region::EnhancingTumor)?])
}

fn check_comparable(pred: &RegionMask, gt: &RegionMask) -> Result<()> {
    if pred.dims != gt.dims {
        return Err(Error::shape(
            "metrics",
            format!("prediction dims {:?} vs ground truth {:?}", pred.dims, gt.dims),
        ));
    }
    if pred.spacing != gt.spacing {
        return Err(Error::config(format!(
            "spacing mismatch: {:?} vs {:?}",
            pred.spacing, gt.spacing
        )));
    }
    Ok(())
}

/// Overlap score in percent: 200|P∩G| / (|P|+|G|). Two empty masks agree
/// perfectly by convention and score 100.
pub fn dice_score(pred: &RegionMask, gt: &RegionMask) -> Result<f64> {
    check_comparable(pred, gt)?;
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&p, &g) in pred.mask.iter().zip(&gt.mask) {
        inter += (p && g) as usize;
        total += p as usize + g as usize;
    }
    if total == 0 {
        return Ok(100.0);
    }
    Ok(200.0 * inter as f64 / total as f64)
}

/// Marks foreground voxels with at least one 6-connected background or
/// out-of-bounds neighbor.
pub fn boundary(mask: &RegionMask) -> Vec<bool> {
    let [d, h, w] = mask.dims;
    let at = |z: isize, y: isize, x: isize| -> bool {
        if z < 0 || y < 0 || x < 0 || z >= d as isize || y >= h as isize || x >= w as isize {
            return false;
        }
        mask.mask[(z as usize * h + y as usize) * w + x as usize]
    };
    let mut out = vec![false; mask.mask.len()];
    for z in 0..d as isize {
        for y in 0..h as isize {
            for x in 0..w as isize {
                if !at(z, y, x) {
                    continue;
                }
                let exposed = !at(z - 1, y, x)
                    || !at(z + 1, y, x)
                    || !at(z, y - 1, x)
                    || !at(z, y + 1, x)
                    || !at(z, y, x - 1)
                    || !at(z, y, x + 1);
                out[(z as usize * h + y as usize) * w + x as usize] = exposed;
            }
        }
    }
    out
}

/// One-dimensional squared-distance transform: the lower envelope of the
/// parabolas (x - x_q)^2 + f[q] sampled back at the grid points x_p = p*step.
/// Infinite f entries contribute no parabola; an empty envelope leaves the
/// row infinite.
fn dt1d(f: &[f64], step: f64, out: &mut [f64]) {
    let n = f.len();
    // sites holds the parabola indices on the lower envelope; bounds holds
    // the interior crossing points, one fewer than sites.
    let mut sites: Vec<usize> = Vec::with_capacity(n);
    let mut bounds: Vec<f64> = Vec::with_capacity(n);
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let xq = q as f64 * step;
        let mut s = 0.0;
        while let Some(&p) = sites.last() {
            let xp = p as f64 * step;
            s = ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
            let last = bounds.last().copied().unwrap_or(f64::NEG_INFINITY);
            if s <= last {
                sites.pop();
                bounds.pop();
            } else {
                break;
            }
        }
        if !sites.is_empty() {
            bounds.push(s);
        }
        sites.push(q);
    }
    if sites.is_empty() {
        for v in out[..n].iter_mut() {
            *v = f64::INFINITY;
        }
        return;
    }
    let mut k = 0usize;
    for p in 0..n {
        let x = p as f64 * step;
        while k < bounds.len() && bounds[k] < x {
            k += 1;
        }
        let xv = sites[k] as f64 * step;
        out[p] = (x - xv) * (x - xv) + f[sites[k]];
    }
}

/// Exact squared Euclidean distance (mm^2) from every voxel to the nearest
/// set voxel, or infinity when the set is empty.
pub fn edt_sq(sources: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [d, h, w] = dims;
    let mut g: Vec<f64> =
        sources.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let mut row = vec![0.0f64; d.max(h).max(w)];
    let mut col = vec![0.0f64; d.max(h).max(w)];
    for z in 0..d {
        for y in 0..h {
            let base = (z * h + y) * w;
            dt1d(&g[base..base + w], spacing[2], &mut row[..w]);
            g[base..base + w].copy_from_slice(&row[..w]);
        }
    }
    for z in 0..d {
        for x in 0..w {
            for y in 0..h {
                col[y] = g[(z * h + y) * w + x];
            }
            dt1d(&col[..h], spacing[1], &mut row[..h]);
            for y in 0..h {
                g[(z * h + y) * w + x] = row[y];
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            for z in 0..d {
                col[z] = g[(z * h + y) * w + x];
            }
            dt1d(&col[..d], spacing[0], &mut row[..d]);
            for z in 0..d {
                g[(z * h + y) * w + x] = row[z];
            }
        }
    }
    g
}

/// Sorted pool of directed boundary-to-boundary distances, both directions.
/// `None` when either mask has no foreground.
pub fn pooled_surface_distances(pred: &RegionMask, gt: &RegionMask) -> Result<Option<Vec<f64>>> {
    check_comparable(pred, gt)?;
    if pred.is_empty() || gt.is_empty() {
        return Ok(None);
    }
    let bp = boundary(pred);
    let bg = boundary(gt);
    let to_gt = edt_sq(&bg, pred.dims, pred.spacing);
    let to_pred = edt_sq(&bp, pred.dims, pred.spacing);
    let mut pool = Vec::new();
    for i in 0..bp.len() {
        if bp[i] {
            pool.push(to_gt[i].sqrt());
        }
        if bg[i] {
            pool.push(to_pred[i].sqrt());
        }
    }
    pool.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(Some(pool))
}

/// Linear-interpolated quantile of an ascending slice, q in [0, 1].
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of an empty multiset");
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// 95th-percentile Hausdorff distance in mm, pooled over both directions.
/// `None` when either mask is empty.
pub fn hd95(pred: &RegionMask, gt: &RegionMask) -> Result<Option<f64>> {
    Ok(pooled_surface_distances(pred, gt)?.map(|pool| quantile(&pool, 0.95)))
}

#[derive(Clone, Debug)]
pub struct RegionRow {
    pub region: &'static str,
    pub dice: f64,
    pub hd95: Option<f64>,
}

/// Per-region scores plus a trailing average row; regions with an empty
/// mask on either side carry an undefined HD and stay out of the average.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub rows: Vec<RegionRow>,
}

impl MetricsReport {
    pub fn evaluate(pred: &LabelVolume, gt: &LabelVolume, spacing: [f64; 3]) -> Result<Self> {
        if pred.shape() != gt.shape() {
            return Err(Error::shape(
                "metrics",
                format!("prediction shape {:?} vs ground truth {:?}", pred.shape(), gt.shape()),
            ));
        }
        let pred_regions = regions_from_labels(pred, spacing)?;
        let gt_regions = regions_from_labels(gt, spacing)?;
        let mut rows = Vec::with_capacity(3);
        for ((region, p), g) in Region::ALL.iter().zip(&pred_regions).zip(&gt_regions) {
            rows.push(RegionRow {
                region: region.name(),
                dice: dice_score(p, g)?,
                hd95: hd95(p, g)?,
            });
        }
        Ok(MetricsReport { rows })
    }

    /// Element-wise mean over per-case reports. Dice averages over every
    /// case; HD averages only the cases where it is defined.
    pub fn mean_of(reports: &[MetricsReport]) -> Result<Self> {
        let first = reports
            .first()
            .ok_or_else(|| Error::config("no reports to average".to_string()))?;
        let mut rows = Vec::with_capacity(first.rows.len());
        for (i, proto) in first.rows.iter().enumerate() {
            let mut dice = 0.0;
            let mut hd_sum = 0.0;
            let mut hd_n = 0usize;
            for r in reports {
                let row = r.rows.get(i).filter(|row| row.region == proto.region).ok_or_else(
                    || Error::config("reports disagree on region layout".to_string()),
                )?;
                dice += row.dice;
                if let Some(h) = row.hd95 {
                    hd_sum += h;
                    hd_n += 1;
                }
            }
            rows.push(RegionRow {
                region: proto.region,
                dice: dice / reports.len() as f64,
                hd95: if hd_n > 0 { Some(hd_sum / hd_n as f64) } else { None },
            });
        }
        Ok(MetricsReport { rows })
    }

    /// Comma-separated table in results order: WT, TC, ET, then the average.
    pub fn csv(&self) -> String {
        let mut out = String::from("region,dice,hd95\n");
        let mut dice_sum = 0.0;
        let mut hd_sum = 0.0;
        let mut hd_n = 0usize;
        for row in &self.rows {
            let hd = match row.hd95 {
                Some(h) => {
                    hd_sum += h;
                    hd_n += 1;
                    format!("{h}")
                }
                None => "undefined".to_string(),
            };
            dice_sum += row.dice;
            out.push_str(&format!("{},{},{}\n", row.region, row.dice, hd));
        }
        let avg_hd = if hd_n > 0 {
            format!("{}", hd_sum / hd_n as f64)
        } else {
            "undefined".to_string()
        };
        out.push_str(&format!("Avg,{},{}\n", dice_sum / self.rows.len() as f64, avg_hd));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_from(dims: [usize; 3], spacing: [f64; 3], on: &[[usize; 3]]) -> RegionMask {
        let [d, h, w] = dims;
        let _ = d;
        let mut m = vec![false; dims.iter().product()];
        for &[z, y, x] in on {
            m[(z * h + y) * w + x] = true;
        }
        RegionMask::new(dims, spacing, m).unwrap()
    }

    fn random_mask(rng: &mut ChaCha8Rng, dims: [usize; 3], spacing: [f64; 3], fill: f64) -> RegionMask {
        let n: usize = dims.iter().product();
        RegionMask::new(dims, spacing, (0..n).map(|_| rng.gen_bool(fill)).collect()).unwrap()
    }

    /// All-pairs nearest boundary distance, mirroring the transform's
    /// arithmetic (coordinates scaled before differencing, axes summed
    /// width + height first, then depth).
    fn naive_pool(pred: &RegionMask, gt: &RegionMask) -> Option<Vec<f64>> {
        if pred.is_empty() || gt.is_empty() {
            return None;
        }
        let coords = |m: &RegionMask| -> Vec<[usize; 3]> {
            let b = boundary(m);
            let [_, h, w] = m.dims;
            (0..b.len())
                .filter(|&i| b[i])
                .map(|i| [i / (h * w), (i / w) % h, i % w])
                .collect()
        };
        let sq = |a: &[usize; 3], b: &[usize; 3], s: &[f64; 3]| -> f64 {
            let dz = a[0] as f64 * s[0] - b[0] as f64 * s[0];
            let dy = a[1] as f64 * s[1] - b[1] as f64 * s[1];
            let dx = a[2] as f64 * s[2] - b[2] as f64 * s[2];
            dz * dz + (dy * dy + dx * dx)
        };
        let pa = coords(pred);
        let pb = coords(gt);
        let mut pool = Vec::new();
        for a in &pa {
            pool.push(
                pb.iter().map(|b| sq(a, b, &pred.spacing)).fold(f64::INFINITY, f64::min).sqrt(),
            );
        }
        for b in &pb {
            pool.push(
                pa.iter().map(|a| sq(b, a, &pred.spacing)).fold(f64::INFINITY, f64::min).sqrt(),
            );
        }
        pool.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Some(pool)
    }

    #[test]
    fn dice_closed_forms() {
        let dims = [2, 2, 4];
        let a = mask_from(dims, [1.0; 3], &[[0, 0, 0], [0, 0, 1], [0, 1, 0], [1, 0, 0]]);
        assert_eq!(dice_score(&a, &a).unwrap(), 100.0);

        let b = mask_from(dims, [1.0; 3], &[[1, 1, 3], [1, 1, 2], [0, 1, 3], [1, 0, 3]]);
        assert_eq!(dice_score(&a, &b).unwrap(), 0.0);

        // |P| = |G| = 8 with 4 shared voxels.
        let p = mask_from(
            dims,
            [1.0; 3],
            &[[0, 0, 0], [0, 0, 1], [0, 0, 2], [0, 0, 3], [0, 1, 0], [0, 1, 1], [0, 1, 2], [0, 1, 3]],
        );
        let g = mask_from(
            dims,
            [1.0; 3],
            &[[0, 1, 0], [0, 1, 1], [0, 1, 2], [0, 1, 3], [1, 0, 0], [1, 0, 1], [1, 0, 2], [1, 0, 3]],
        );
        assert_eq!(dice_score(&p, &g).unwrap(), 50.0);

        let empty = mask_from(dims, [1.0; 3], &[]);
        assert_eq!(dice_score(&empty, &empty).unwrap(), 100.0);
        assert_eq!(dice_score(&empty, &a).unwrap(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(90);
        for _ in 0..20 {
            let x = random_mask(&mut rng, [3, 4, 3], [1.0; 3], 0.4);
            let y = random_mask(&mut rng, [3, 4, 3], [1.0; 3], 0.4);
            assert_eq!(dice_score(&x, &y).unwrap(), dice_score(&y, &x).unwrap());
        }

        let other = mask_from([2, 2, 5], [1.0; 3], &[]);
        assert!(dice_score(&a, &other).is_err());
        let scaled = mask_from(dims, [2.0, 1.0, 1.0], &[]);
        assert!(dice_score(&a, &scaled).is_err());
    }

    #[test]
    fn region_masks_nest_and_reject_bad_labels() {
        let zero = LabelVolume::zeros([1, 2, 2, 2]);
        let empty = regions_from_labels(&zero, [1.0; 3]).unwrap();
        assert!(empty.iter().all(|m| m.is_empty()));

        let mut one = LabelVolume::zeros([1, 2, 2, 2]);
        one.data_mut()[3] = 3;
        let [wt, tc, et] = regions_from_labels(&one, [1.0; 3]).unwrap();
        assert!(wt.mask[3] && tc.mask[3] && et.mask[3]);
        assert_eq!(wt.count(), 1);

        let mut rng = ChaCha8Rng::seed_from_u64(91);
        for _ in 0..10 {
            let lab = LabelVolume::new(
                [1, 3, 4, 3],
                (0..36).map(|_| rng.gen_range(0..4u8)).collect(),
            )
            .unwrap();
            let [wt, tc, et] = regions_from_labels(&lab, [1.0; 3]).unwrap();
            for i in 0..36 {
                assert!(!et.mask[i] || tc.mask[i], "ET outside TC at {i}");
                assert!(!tc.mask[i] || wt.mask[i], "TC outside WT at {i}");
            }
        }

        let mut bad = LabelVolume::zeros([1, 2, 2, 2]);
        bad.data_mut()[0] = 4;
        assert!(regions_from_labels(&bad, [1.0; 3]).is_err());
    }

    #[test]
    fn boundary_keeps_exposed_voxels_only() {
        // Solid 3x3x3 cube inside 5^3: every cube voxel except the center
        // touches background.
        let mut on = Vec::new();
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    on.push([z, y, x]);
                }
            }
        }
        let cube = mask_from([5, 5, 5], [1.0; 3], &on);
        let b = boundary(&cube);
        assert_eq!(b.iter().filter(|&&v| v).count(), 26);
        assert!(!b[(2 * 5 + 2) * 5 + 2]);

        // A mask filling the whole grid is boundary only at the faces.
        let full = RegionMask::new([3, 3, 3], [1.0; 3], vec![true; 27]).unwrap();
        let fb = boundary(&full);
        assert_eq!(fb.iter().filter(|&&v| v).count(), 26);
        assert!(!fb[(1 * 3 + 1) * 3 + 1]);

        let single = mask_from([4, 4, 4], [1.0; 3], &[[2, 1, 3]]);
        let sb = boundary(&single);
        assert_eq!(sb.iter().filter(|&&v| v).count(), 1);
        assert!(sb[(2 * 4 + 1) * 4 + 3]);
    }

    #[test]
    fn distance_transform_equals_all_pairs_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(92);
        for trial in 0..40 {
            let dims = [
                rng.gen_range(1..=10usize),
                rng.gen_range(1..=10usize),
                rng.gen_range(1..=10usize),
            ];
            // Power-of-two spacings keep every squared distance exact, so
            // the transform must agree with brute force to the bit.
            let spacing = if trial % 2 == 0 { [1.0; 3] } else { [2.0, 0.5, 1.0] };
            let src = random_mask(&mut rng, dims, spacing, 0.15);
            if src.is_empty() {
                continue;
            }
            let fast = edt_sq(&src.mask, dims, spacing);
            let [d, h, w] = dims;
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let mut best = f64::INFINITY;
                        for zz in 0..d {
                            for yy in 0..h {
                                for xx in 0..w {
                                    if !src.mask[(zz * h + yy) * w + xx] {
                                        continue;
                                    }
                                    let dz = z as f64 * spacing[0] - zz as f64 * spacing[0];
                                    let dy = y as f64 * spacing[1] - yy as f64 * spacing[1];
                                    let dx = x as f64 * spacing[2] - xx as f64 * spacing[2];
                                    best = best.min(dz * dz + (dy * dy + dx * dx));
                                }
                            }
                        }
                        let got = fast[(z * h + y) * w + x];
                        assert_eq!(got, best, "trial {trial} at ({z},{y},{x})");
                    }
                }
            }
        }

        // Anisotropic non-dyadic spacing cannot promise bit equality, only
        // agreement to rounding error.
        let spacing = [1.2, 0.7, 2.3];
        let src = random_mask(&mut rng, [6, 5, 7], spacing, 0.2);
        let fast = edt_sq(&src.mask, [6, 5, 7], spacing);
        for z in 0..6 {
            for y in 0..5 {
                for x in 0..7 {
                    let mut best = f64::INFINITY;
                    for zz in 0..6 {
                        for yy in 0..5 {
                            for xx in 0..7 {
                                if !src.mask[(zz * 5 + yy) * 7 + xx] {
                                    continue;
                                }
                                let dz = (z as f64 - zz as f64) * spacing[0];
                                let dy = (y as f64 - yy as f64) * spacing[1];
                                let dx = (x as f64 - xx as f64) * spacing[2];
                                best = best.min(dz * dz + dy * dy + dx * dx);
                            }
                        }
                    }
                    let got = fast[(z * 5 + y) * 7 + x];
                    assert!((got - best).abs() <= 1e-9 * best.max(1.0), "{got} vs {best}");
                }
            }
        }
    }

    #[test]
    fn hd95_matches_oracle_and_known_cases() {
        let a = mask_from([4, 4, 4], [1.0; 3], &[[0, 0, 0]]);
        let b = mask_from([4, 4, 4], [1.0; 3], &[[3, 0, 0]]);
        assert_eq!(hd95(&a, &b).unwrap(), Some(3.0));

        let same = mask_from([4, 4, 4], [1.0; 3], &[[1, 2, 3], [2, 2, 2]]);
        assert_eq!(hd95(&same, &same).unwrap(), Some(0.0));

        let empty = mask_from([4, 4, 4], [1.0; 3], &[]);
        assert_eq!(hd95(&a, &empty).unwrap(), None);
        assert_eq!(hd95(&empty, &a).unwrap(), None);
        assert_eq!(hd95(&empty, &empty).unwrap(), None);

        // Spacing scales the answer: same voxels, 0.5 mm along depth.
        let a_fine = mask_from([4, 4, 4], [0.5, 1.0, 1.0], &[[0, 0, 0]]);
        let b_fine = mask_from([4, 4, 4], [0.5, 1.0, 1.0], &[[3, 0, 0]]);
        assert_eq!(hd95(&a_fine, &b_fine).unwrap(), Some(1.5));

        let mut rng = ChaCha8Rng::seed_from_u64(93);
        let mut nonempty = 0;
        while nonempty < 60 {
            let dims = [
                rng.gen_range(1..=8usize),
                rng.gen_range(1..=8usize),
                rng.gen_range(1..=8usize),
            ];
            let p = random_mask(&mut rng, dims, [1.0; 3], 0.3);
            let g = random_mask(&mut rng, dims, [1.0; 3], 0.3);
            let pool = match pooled_surface_distances(&p, &g).unwrap() {
                Some(pool) => pool,
                None => continue,
            };
            nonempty += 1;
            let want = naive_pool(&p, &g).unwrap();
            assert_eq!(pool, want);
            let hd = quantile(&pool, 0.95);
            let full = quantile(&pool, 1.0);
            assert!(hd <= full, "hd95 {hd} above max {full}");
            assert_eq!(hd95(&p, &g).unwrap(), hd95(&g, &p).unwrap());
        }
    }

    #[test]
    fn quantile_interpolates_linearly() {
        assert_eq!(quantile(&[7.0], 0.95), 7.0);
        assert_eq!(quantile(&[0.0, 10.0], 0.95), 9.5);
        assert_eq!(quantile(&[0.0, 1.0, 2.0, 3.0, 4.0], 0.5), 2.0);
        let q = quantile(&[0.0, 1.0, 2.0, 3.0, 4.0], 0.95);
        assert!((q - 3.8).abs() < 1e-12);
        assert_eq!(quantile(&[1.0, 2.0, 5.0], 1.0), 5.0);
        assert_eq!(quantile(&[1.0, 2.0, 5.0], 0.0), 1.0);
    }

    #[test]
    fn report_rows_follow_table_order_and_skip_undefined_hd() {
        // Ground truth has an enhancing voxel, the prediction never does,
        // so the ET row's HD is undefined while Dice still scores 0.
        let mut gt = LabelVolume::zeros([1, 3, 3, 3]);
        gt.data_mut()[0] = 1;
        gt.data_mut()[1] = 3;
        let mut pred = LabelVolume::zeros([1, 3, 3, 3]);
        pred.data_mut()[0] = 1;
        pred.data_mut()[1] = 1;

        let report = MetricsReport::evaluate(&pred, &gt, [1.0; 3]).unwrap();
        assert_eq!(
            report.rows.iter().map(|r| r.region).collect::<Vec<_>>(),
            ["WT", "TC", "ET"]
        );
        assert_eq!(report.rows[0].dice, 100.0);
        assert_eq!(report.rows[0].hd95, Some(0.0));
        assert!(report.rows[2].hd95.is_none());

        let csv = report.csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "region,dice,hd95");
        assert_eq!(lines.len(), 5);
        assert!(lines[3].starts_with("ET,"));
        assert!(lines[3].ends_with(",undefined"));
        // Average HD covers only the defined rows.
        assert!(lines[4].starts_with("Avg,"));
        assert!(!lines[4].ends_with(",undefined"));

        let mean = MetricsReport::mean_of(&[report.clone(), report]).unwrap();
        assert_eq!(mean.rows[0].dice, 100.0);
        assert!(mean.rows[2].hd95.is_none());
    }
}
