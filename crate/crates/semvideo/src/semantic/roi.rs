//! Post-hoc importance of brain regions for a trained decoder.
//!
//! The subject projector's first (and only) layer maps selected voxels into
//! the shared latent space, so the mean absolute outgoing weight of a voxel
//! is a direct measure of how much the decoder listens to it. Region scores
//! average those voxel scores over each region's members and are min-max
//! normalized across regions for comparability.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor;

/// Named half-open ranges `[lo, hi)` over the raw voxel axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoiTable {
    pub regions: Vec<(String, usize, usize)>,
}

impl RoiTable {
    /// Parse `name lo hi` lines; `#` comments and blank lines are skipped.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut regions: Vec<(String, usize, usize)> = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let bad = |what: &str| {
                Error::Validation(format!("{origin}:{}: {what}: {raw:?}", ln + 1))
            };
            let name = it.next().ok_or_else(|| bad("missing region name"))?;
            let lo: usize = it
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| bad("bad lower bound"))?;
            let hi: usize = it
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| bad("bad upper bound"))?;
            if it.next().is_some() {
                return Err(bad("trailing tokens"));
            }
            if lo >= hi {
                return Err(bad("empty range (need lo < hi)"));
            }
            if regions.iter().any(|(n, _, _)| n == name) {
                return Err(bad("duplicate region name"));
            }
            regions.push((name.to_string(), lo, hi));
        }
        if regions.is_empty() {
            return Err(Error::Validation(format!(
                "{origin}: no regions defined"
            )));
        }
        Ok(RoiTable { regions })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, lo, hi) in &self.regions {
            let _ = writeln!(s, "{name} {lo} {hi}");
        }
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::error::missing_as_validation(std::fs::read_to_string(path), path)?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        tensor::atomic_write(path, self.to_text().as_bytes())
    }
}

/// Mean absolute outgoing weight per input voxel of a projector layer.
pub fn voxel_importance(projector: &Linear) -> Vec<f64> {
    let cols = projector.w.ncols() as f64;
    projector
        .w
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>() / cols)
        .collect()
}

/// Normalized per-region scores. Regions with no selected voxels carry no
/// score at all rather than a misleading zero.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiImportance {
    pub regions: Vec<(String, Option<f64>)>,
}

impl RoiImportance {
    pub fn get(&self, name: &str) -> Option<Option<f64>> {
        self.regions
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }
}

/// Score each region of `table` for one subject's projector.
///
/// `voxel_mask` is the subject's selection mask over the raw voxel axis;
/// its set bits must line up with the projector's input rows. Present
/// region scores are min-max normalized to `[0, 1]`; a degenerate spread
/// (all regions equal) maps everything to 0.5.
pub fn roi_importance(
    projector: &Linear,
    voxel_mask: &[bool],
    table: &RoiTable,
) -> Result<RoiImportance> {
    let selected = voxel_mask.iter().filter(|&&b| b).count();
    if selected != projector.w.nrows() {
        return Err(Error::Validation(format!(
            "voxel mask selects {selected} voxels but the projector has {} input rows",
            projector.w.nrows()
        )));
    }
    if let Some((name, _, hi)) = table
        .regions
        .iter()
        .find(|(_, _, hi)| *hi > voxel_mask.len())
    {
        return Err(Error::Validation(format!(
            "region {name} extends to voxel {hi} but the subject has only {}",
            voxel_mask.len()
        )));
    }
    let per_voxel = voxel_importance(projector);
    // Scatter selected-voxel scores onto the raw axis.
    let mut raw = vec![None; voxel_mask.len()];
    let mut k = 0;
    for (i, &keep) in voxel_mask.iter().enumerate() {
        if keep {
            raw[i] = Some(per_voxel[k]);
            k += 1;
        }
    }

    let mut scores: Vec<(String, Option<f64>)> = Vec::with_capacity(table.regions.len());
    for (name, lo, hi) in &table.regions {
        let members: Vec<f64> = raw[*lo..*hi].iter().flatten().copied().collect();
        let score = (!members.is_empty())
            .then(|| members.iter().sum::<f64>() / members.len() as f64);
        scores.push((name.clone(), score));
    }

    let present: Vec<f64> = scores.iter().filter_map(|(_, v)| *v).collect();
    if let (Some(&min), Some(&max)) = (
        present.iter().min_by(|a, b| a.total_cmp(b)),
        present.iter().max_by(|a, b| a.total_cmp(b)),
    ) {
        let span = max - min;
        for (_, v) in &mut scores {
            if let Some(x) = v {
                *x = if span > 0.0 { (*x - min) / span } else { 0.5 };
            }
        }
    }
    Ok(RoiImportance { regions: scores })
}

/// Export as `roi,importance` CSV; regions with no selected voxels write
/// the literal `missing`.
pub fn save_roi_csv(path: &Path, imp: &RoiImportance) -> Result<()> {
    let mut s = String::from("roi,importance\n");
    for (name, v) in &imp.regions {
        match v {
            Some(x) => {
                let _ = writeln!(s, "{name},{x}");
            }
            None => {
                let _ = writeln!(s, "{name},missing");
            }
        }
    }
    tensor::atomic_write(path, s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn projector_from(w: Array2<f64>) -> Linear {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = Linear::new(w.nrows(), w.ncols(), &mut rng);
        p.w = w;
        p
    }

    #[test]
    fn voxel_importance_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Array2::from_shape_fn((6, 4), |_| rng.gen_range(-2.0..2.0));
        let p = projector_from(w.clone());
        let got = voxel_importance(&p);
        for v in 0..6 {
            let mut acc = 0.0;
            for u in 0..4 {
                acc += w[[v, u]].abs();
            }
            assert_abs_diff_eq!(got[v], acc / 4.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn table_parsing_accepts_comments_and_rejects_malformed_lines() {
        let t = RoiTable::parse("# visual areas\nV1 0 4\n\nMT 4 9\n", "inline").unwrap();
        assert_eq!(
            t.regions,
            vec![("V1".into(), 0, 4), ("MT".into(), 4, 9)]
        );
        assert_eq!(RoiTable::parse(&t.to_text(), "rt").unwrap(), t);
        for bad in [
            "V1 4 4",       // empty range
            "V1 9 4",       // inverted
            "V1 0",         // missing bound
            "V1 0 x",       // non-numeric
            "V1 0 4 extra", // trailing
            "V1 0 4\nV1 5 6", // duplicate
            "# only comments",
        ] {
            assert!(RoiTable::parse(bad, "inline").is_err(), "accepted {bad:?}");
        }
    }

    #[test]
    fn region_scores_normalize_and_dominant_region_hits_one() {
        // 8 raw voxels, 6 selected (indices 0,1,2,3,6,7). Rows 4 and 5 of
        // the projector feed raw voxels 6 and 7.
        let mask = [true, true, true, true, false, false, true, true];
        let mut w = Array2::from_elem((6, 3), 0.1);
        // Boost the weights of the selected voxels living in "late".
        w.row_mut(4).fill(1.0);
        w.row_mut(5).fill(1.0);
        let p = projector_from(w);
        let table = RoiTable::parse("early 0 4\nmid 4 6\nlate 6 8\n", "t").unwrap();
        let imp = roi_importance(&p, &mask, &table).unwrap();
        assert_abs_diff_eq!(imp.get("late").unwrap().unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(imp.get("early").unwrap().unwrap(), 0.0, epsilon = 1e-12);
        // "mid" covers only unselected voxels: reported missing, not zero.
        assert_eq!(imp.get("mid").unwrap(), None);
    }

    #[test]
    fn uniform_importance_degenerates_to_half() {
        let mask = [true; 6];
        let p = projector_from(Array2::from_elem((6, 2), -0.3));
        let table = RoiTable::parse("a 0 3\nb 3 6\n", "t").unwrap();
        let imp = roi_importance(&p, &mask, &table).unwrap();
        assert_eq!(imp.get("a").unwrap(), Some(0.5));
        assert_eq!(imp.get("b").unwrap(), Some(0.5));
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        let p = projector_from(Array2::from_elem((4, 2), 0.2));
        let table = RoiTable::parse("a 0 4\n", "t").unwrap();
        // Mask selects 3 voxels, projector expects 4.
        assert!(roi_importance(&p, &[true, true, true, false], &table).is_err());
        // Region extends beyond the mask.
        let long = RoiTable::parse("a 0 10\n", "t").unwrap();
        assert!(roi_importance(&p, &[true; 4], &long).is_err());
    }

    #[test]
    fn csv_export_spells_out_missing_regions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("roi.csv");
        let imp = RoiImportance {
            regions: vec![
                ("v1".into(), Some(1.0)),
                ("gap".into(), None),
                ("mt".into(), Some(0.0)),
            ],
        };
        save_roi_csv(&path, &imp).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "roi,importance\nv1,1\ngap,missing\nmt,0\n");
    }

    #[test]
    fn table_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rois.txt");
        let t = RoiTable::parse("V1 0 32\nV2 32 64\nMT 64 80\n", "x").unwrap();
        t.save(&path).unwrap();
        assert_eq!(RoiTable::load(&path).unwrap(), t);
        let err = RoiTable::load(&dir.path().join("none.txt")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
