//! FO error measure and per-region aggregation.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::error::{invalid, mismatch, Result};
use crate::geometry::angle_deg;
use crate::pipeline::FoVolume;
use crate::signal::{FoSet, RegionLabel};
use crate::stats::{mean, paired_stats, std_dev, PairedStats};

/// Name of the error measure, recorded in every report.
pub const ERROR_METRIC: &str = "symmetric-mean-min-angle (empty estimate = 90 deg)";

/// Error assigned when an estimate contains no FO at all.
pub const EMPTY_ESTIMATE_ERROR: f64 = 90.0;

/// Symmetric mean of closest-angle discrepancies between two FO sets, in
/// degrees.
pub fn fo_error(estimated: &FoSet, truth: &FoSet) -> Result<f64> {
    if truth.is_empty() {
        return Err(invalid!("FO error needs a nonempty truth set"));
    }
    if estimated.is_empty() {
        return Ok(EMPTY_ESTIMATE_ERROR);
    }
    let mean_min = |from: &FoSet, to: &FoSet| {
        from.iter()
            .map(|a| {
                to.iter()
                    .map(|b| angle_deg(&a.direction, &b.direction))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / from.len() as f64
    };
    Ok(0.5 * (mean_min(truth, estimated) + mean_min(estimated, truth)))
}

/// Voxel groups a summary is reported for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EvalRegion {
    All,
    Noncrossing,
    TwoCrossing,
    ThreeCrossing,
}

impl EvalRegion {
    pub const ALL: [EvalRegion; 4] = [
        EvalRegion::All,
        EvalRegion::Noncrossing,
        EvalRegion::TwoCrossing,
        EvalRegion::ThreeCrossing,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            EvalRegion::All => "all",
            EvalRegion::Noncrossing => "noncrossing",
            EvalRegion::TwoCrossing => "2-crossing",
            EvalRegion::ThreeCrossing => "3-crossing",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        EvalRegion::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| invalid!("unknown region '{s}'"))
    }

    pub fn contains(&self, label: RegionLabel) -> bool {
        match self {
            EvalRegion::All => label != RegionLabel::Background,
            EvalRegion::Noncrossing => label == RegionLabel::Noncrossing,
            EvalRegion::TwoCrossing => label == RegionLabel::TwoCrossing,
            EvalRegion::ThreeCrossing => label == RegionLabel::ThreeCrossing,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionStats {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Per-voxel errors (None outside the tissue) of one estimate.
pub fn voxel_errors(est: &FoVolume, truth: &FoVolume, labels: &[RegionLabel]) -> Result<Vec<Option<f64>>> {
    if est.dims != truth.dims {
        return Err(invalid!("estimate grid {:?} does not match truth grid {:?}", est.dims, truth.dims));
    }
    if labels.len() != truth.fos.len() {
        return Err(mismatch!("{} labels for {} voxels", labels.len(), truth.fos.len()));
    }
    est.fos
        .iter()
        .zip(&truth.fos)
        .zip(labels)
        .map(|((e, t), &l)| {
            if l == RegionLabel::Background {
                Ok(None)
            } else {
                fo_error(e, t).map(Some)
            }
        })
        .collect()
}

/// Errors of the voxels inside `region`, in voxel order.
pub fn region_errors(errors: &[Option<f64>], labels: &[RegionLabel], region: EvalRegion) -> Vec<f64> {
    errors
        .iter()
        .zip(labels)
        .filter(|(_, &l)| region.contains(l))
        .filter_map(|(e, _)| *e)
        .collect()
}

pub type ErrorSummary = BTreeMap<EvalRegion, RegionStats>;

pub fn summarize(errors: &[Option<f64>], labels: &[RegionLabel]) -> ErrorSummary {
    EvalRegion::ALL
        .into_iter()
        .map(|region| {
            let e = region_errors(errors, labels, region);
            let stats = RegionStats {
                mean: if e.is_empty() { 0.0 } else { mean(&e) },
                std: std_dev(&e),
                n: e.len(),
            };
            (region, stats)
        })
        .collect()
}

pub fn evaluate_volume(est: &FoVolume, truth: &FoVolume, labels: &[RegionLabel]) -> Result<ErrorSummary> {
    Ok(summarize(&voxel_errors(est, truth, labels)?, labels))
}

/// Paired comparison of two methods' errors over one region. Positive d
/// means method `a` has the larger errors.
pub fn compare_region(
    a: &[Option<f64>],
    b: &[Option<f64>],
    labels: &[RegionLabel],
    region: EvalRegion,
) -> Result<PairedStats> {
    if a.len() != b.len() || a.len() != labels.len() {
        return Err(mismatch!("error maps of {} and {} voxels with {} labels", a.len(), b.len(), labels.len()));
    }
    paired_stats(&region_errors(a, labels, region), &region_errors(b, labels, region))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Direction;
    use crate::pipeline::Method;
    use alloc::vec;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn set(dirs: &[Direction]) -> FoSet {
        FoSet::equal_fractions(dirs)
    }

    #[test]
    fn error_examples() {
        let xy = set(&[Direction::X, Direction::Y]);
        assert_eq!(fo_error(&xy, &xy).unwrap(), 0.0);
        let tilted = Direction::new(10f64.to_radians().cos(), 10f64.to_radians().sin(), 0.0).unwrap();
        assert_abs_diff_eq!(fo_error(&set(&[tilted]), &set(&[Direction::X])).unwrap(), 10.0, epsilon = 1e-9);
        assert_abs_diff_eq!(fo_error(&set(&[Direction::X]), &xy).unwrap(), 22.5, epsilon = 1e-12);
        assert_eq!(fo_error(&FoSet::empty(), &xy).unwrap(), 90.0);
        assert!(fo_error(&xy, &FoSet::empty()).is_err());
    }

    #[test]
    fn volume_summary() {
        let labels = vec![
            RegionLabel::Background,
            RegionLabel::Noncrossing,
            RegionLabel::TwoCrossing,
            RegionLabel::TwoCrossing,
        ];
        let truth_sets = vec![
            FoSet::empty(),
            set(&[Direction::X]),
            set(&[Direction::X, Direction::Y]),
            set(&[Direction::X, Direction::Z]),
        ];
        let truth = FoVolume::new([4, 1, 1], truth_sets.clone(), Method::Truth).unwrap();
        let same = FoVolume::new([4, 1, 1], truth_sets, Method::Cfari).unwrap();
        let s = evaluate_volume(&same, &truth, &labels).unwrap();
        assert!(s.values().all(|r| r.mean == 0.0));
        assert_eq!(s[&EvalRegion::All].n, 3);
        assert_eq!(s[&EvalRegion::TwoCrossing].n, 2);
        assert_eq!(s[&EvalRegion::ThreeCrossing].n, 0);

        let est = FoVolume::new(
            [4, 1, 1],
            vec![FoSet::empty(), set(&[Direction::X]), set(&[Direction::X]), FoSet::empty()],
            Method::Cfari,
        )
        .unwrap();
        let s = evaluate_volume(&est, &truth, &labels).unwrap();
        assert_abs_diff_eq!(s[&EvalRegion::TwoCrossing].mean, (22.5 + 90.0) / 2.0, epsilon = 1e-12);

        let wrong = FoVolume::new([2, 2, 1], vec![FoSet::empty(); 4], Method::Cfari).unwrap();
        assert!(evaluate_volume(&wrong, &truth, &labels).is_err());
    }

    fn arb_set() -> impl Strategy<Value = FoSet> {
        prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 1..4).prop_filter_map("nonzero", |vs| {
            let dirs: Option<Vec<_>> = vs.into_iter().map(|v| Direction::from_array(v).ok()).collect();
            Some(FoSet::equal_fractions(&dirs?))
        })
    }

    proptest! {
        #[test]
        fn error_is_symmetric_and_bounded(a in arb_set(), b in arb_set()) {
            let ab = fo_error(&a, &b).unwrap();
            let ba = fo_error(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=90.0).contains(&ab));
            prop_assert!(fo_error(&a, &a).unwrap() < 1e-9);
        }
    }
}
