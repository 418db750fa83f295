//! The two-step estimation procedure: FO extraction and peak refinement,
//! mapping to the coarse basis, network-based coarse estimation, the guided
//! dense solve, and the unguided baselines.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, mismatch, Error, Result};
use crate::geometry::{angle_deg, Dictionary, Direction, DirectionSet};
use crate::network::{forward, ModelStore};
use crate::signal::{FiberOrientation, FoSet};
use crate::solvers::{
    compute_guidance_weights, solve_nn_l1, solve_reweighted_l1, solve_weighted_l1, GuidanceWeights,
    SolverSettings, SparseProblem,
};

/// Fraction threshold and refinement angle used to turn mixture fractions
/// into FOs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoExtractionConfig {
    pub threshold: f64,
    pub refine_angle_deg: f64,
}

impl Default for FoExtractionConfig {
    fn default() -> Self {
        Self {
            threshold: 0.1,
            refine_angle_deg: 20.0,
        }
    }
}

impl FoExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(invalid!("fraction threshold must lie in (0, 1) (got {})", self.threshold));
        }
        if !(self.refine_angle_deg > 0.0 && self.refine_angle_deg < 90.0) {
            return Err(invalid!(
                "refinement angle must lie in (0, 90) degrees (got {})",
                self.refine_angle_deg
            ));
        }
        Ok(())
    }
}

/// Basis directions whose fraction exceeds the threshold, renormalized. When
/// none does, the single largest atom (lowest index on ties) is kept.
pub fn extract_fos(f: &[f64], basis: &DirectionSet, cfg: &FoExtractionConfig) -> Result<FoSet> {
    if f.len() != basis.len() {
        return Err(mismatch!("{} fractions for {} basis directions", f.len(), basis.len()));
    }
    let mut kept: Vec<FiberOrientation> = f
        .iter()
        .enumerate()
        .filter(|&(_, &v)| v > cfg.threshold)
        .map(|(i, &fraction)| FiberOrientation {
            direction: basis.get(i),
            fraction,
        })
        .collect();
    if kept.is_empty() {
        let mut best = 0;
        for (i, &v) in f.iter().enumerate() {
            if v > f[best] {
                best = i;
            }
        }
        kept.push(FiberOrientation {
            direction: basis.get(best),
            fraction: 1.0,
        });
    }
    Ok(FoSet::new(kept)?.normalized())
}

/// Keeps an FO only if no other FO within `angle_deg` carries a strictly
/// larger fraction; equal fractions are all kept. Renormalizes.
pub fn refine_fos(fos: &FoSet, angle_deg_limit: f64) -> FoSet {
    let all = fos.as_slice();
    let kept: Vec<FiberOrientation> = all
        .iter()
        .enumerate()
        .filter(|&(j, fo)| {
            all.iter().enumerate().all(|(other, o)| {
                other == j
                    || angle_deg(&fo.direction, &o.direction) > angle_deg_limit
                    || fo.fraction >= o.fraction
            })
        })
        .map(|(_, fo)| *fo)
        .collect();
    FoSet::new(kept)
        .expect("fractions of a valid set stay valid")
        .normalized()
}

/// Largest FO count reported for a voxel.
pub const MAX_FOS: usize = 5;

/// Keeps the `max` largest FOs (earlier entries on ties) and renormalizes.
pub fn cap_fos(fos: FoSet, max: usize) -> FoSet {
    if fos.len() <= max {
        return fos;
    }
    FoSet::new(fos.iter().take(max).copied().collect())
        .expect("subset of a valid set")
        .normalized()
}

/// Extraction, refinement and the [`MAX_FOS`] cap.
pub fn fractions_to_fos(f: &[f64], basis: &DirectionSet, cfg: &FoExtractionConfig) -> Result<FoSet> {
    let fos = extract_fos(f, basis, cfg)?;
    Ok(cap_fos(refine_fos(&fos, cfg.refine_angle_deg), MAX_FOS))
}

/// Index of the closest coarse direction for each FO, duplicates collapsed
/// (first occurrence kept).
pub fn map_to_coarse(fos: &FoSet, coarse: &DirectionSet) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::with_capacity(fos.len());
    for fo in fos.iter() {
        let i = coarse.nearest(&fo.direction);
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

/// Distinct FO configurations on the coarse basis from per-voxel FO sets.
/// At most the `max_fos` largest FOs of a voxel are used. Each
/// configuration is a sorted list of coarse indices; the result is sorted.
pub fn training_configurations<'a>(
    fo_sets: impl IntoIterator<Item = &'a FoSet>,
    coarse: &DirectionSet,
    max_fos: usize,
) -> Vec<Vec<usize>> {
    let mut configs = BTreeSet::new();
    for fos in fo_sets {
        if fos.is_empty() {
            continue;
        }
        let top = FoSet::new(fos.iter().take(max_fos).copied().collect())
            .expect("subset of a valid set");
        let mut config = map_to_coarse(&top, coarse);
        config.sort_unstable();
        configs.insert(config);
    }
    configs.into_iter().collect()
}

/// Method that produced an FO volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Cfari,
    L2l0,
    Dn,
    Fordn,
    Truth,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Cfari, Method::L2l0, Method::Dn, Method::Fordn, Method::Truth];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Cfari => "cfari",
            Method::L2l0 => "l2l0",
            Method::Dn => "dn",
            Method::Fordn => "fordn",
            Method::Truth => "truth",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| invalid!("unknown method '{s}' (expected cfari, l2l0, dn, fordn or truth)"))
    }
}

/// Per-voxel FO sets over a volume.
#[derive(Debug, Clone, PartialEq)]
pub struct FoVolume {
    pub dims: [usize; 3],
    pub fos: Vec<FoSet>,
    pub method: Method,
}

impl FoVolume {
    pub fn new(dims: [usize; 3], fos: Vec<FoSet>, method: Method) -> Result<Self> {
        if dims[0] * dims[1] * dims[2] != fos.len() {
            return Err(mismatch!("{:?} grid needs {} voxels, got {}", dims, dims[0] * dims[1] * dims[2], fos.len()));
        }
        if let Some(n) = fos.iter().map(FoSet::len).find(|&n| n > MAX_FOS && method != Method::Truth) {
            return Err(Error::Validation(alloc::format!("voxel with {n} FOs exceeds the sanity bound of {MAX_FOS}")));
        }
        Ok(Self { dims, fos, method })
    }
}

/// Something that turns one voxel's signal into FOs.
pub trait VoxelEstimator: Sync {
    /// `region` 0 is background.
    fn estimate(&self, y: &[f64], region: u32) -> Result<FoSet>;

    /// Checks the region ids of a volume before any voxel is processed.
    fn check_regions(&self, _regions: &[u32]) -> Result<()> {
        Ok(())
    }
}

/// Applies `estimator` to every voxel in order. `signals` is voxel-major
/// with `k` values per voxel.
pub fn estimate_volume<E: VoxelEstimator + ?Sized>(
    estimator: &E,
    signals: &[f64],
    k: usize,
    regions: &[u32],
) -> Result<Vec<FoSet>> {
    if k == 0 || signals.len() != regions.len() * k {
        return Err(mismatch!("{} signal values for {} voxels of {} values", signals.len(), regions.len(), k));
    }
    estimator.check_regions(regions)?;
    signals
        .chunks(k)
        .zip(regions)
        .map(|(y, &r)| estimator.estimate(y, r))
        .collect()
}

/// Network-based coarse FOs (the guiding directions).
#[derive(Debug, Clone, Copy)]
pub struct CoarseEstimator<'a> {
    pub models: &'a ModelStore,
    pub coarse_basis: &'a DirectionSet,
    pub extraction: FoExtractionConfig,
}

impl<'a> CoarseEstimator<'a> {
    pub fn new(models: &'a ModelStore, coarse_basis: &'a DirectionSet, extraction: FoExtractionConfig) -> Result<Self> {
        extraction.validate()?;
        if let Some((r, m)) = models.iter().find(|(_, m)| m.params.n() != coarse_basis.len()) {
            return Err(mismatch!(
                "model for region {r} has {} atoms, coarse basis has {}",
                m.params.n(),
                coarse_basis.len()
            ));
        }
        Ok(Self {
            models,
            coarse_basis,
            extraction,
        })
    }
}

impl VoxelEstimator for CoarseEstimator<'_> {
    fn estimate(&self, y: &[f64], region: u32) -> Result<FoSet> {
        if region == 0 {
            return Ok(FoSet::empty());
        }
        let model = self.models.get(region).ok_or(Error::MissingModel(region))?;
        let pass = forward(&model.params, y)?;
        fractions_to_fos(&pass.output, self.coarse_basis, &self.extraction)
    }

    fn check_regions(&self, regions: &[u32]) -> Result<()> {
        let missing = regions
            .iter()
            .copied()
            .filter(|&r| r != 0)
            .find(|&r| self.models.get(r).is_none());
        match missing {
            Some(r) => Err(Error::MissingModel(r)),
            None => Ok(()),
        }
    }
}

/// Normalizes a nonnegative solution and turns it into FOs.
pub fn postprocess_solution(
    solution: &[f64],
    basis: &DirectionSet,
    cfg: &FoExtractionConfig,
) -> Result<FoSet> {
    let sum: f64 = solution.iter().sum();
    let normalized: Vec<f64> = if sum > 0.0 {
        solution.iter().map(|v| v / sum).collect()
    } else {
        solution.to_vec()
    };
    fractions_to_fos(&normalized, basis, cfg)
}

/// Settings of the guided dense solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidedSettings {
    pub alpha: f64,
    pub beta: f64,
    pub solver: SolverSettings,
}

impl Default for GuidedSettings {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            beta: 0.25,
            solver: SolverSettings::default(),
        }
    }
}

/// Result of the guided solve at one voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedVoxel {
    pub fos: FoSet,
    pub guides: Vec<Direction>,
    /// Set when no guiding FO was available and unit weights were used.
    pub unguided_fallback: bool,
}

/// Coarse network estimate followed by the weighted ℓ1 solve on the dense
/// dictionary.
#[derive(Debug, Clone, Copy)]
pub struct FordnEstimator<'a> {
    pub coarse: CoarseEstimator<'a>,
    pub dense: &'a Dictionary,
    pub dense_basis: &'a DirectionSet,
    pub settings: GuidedSettings,
}

impl<'a> FordnEstimator<'a> {
    pub fn new(
        coarse: CoarseEstimator<'a>,
        dense: &'a Dictionary,
        dense_basis: &'a DirectionSet,
        settings: GuidedSettings,
    ) -> Result<Self> {
        if dense.n() != dense_basis.len() {
            return Err(mismatch!("dense dictionary has {} atoms, basis has {}", dense.n(), dense_basis.len()));
        }
        if !(0.0..1.0).contains(&settings.alpha) {
            return Err(invalid!("α must lie in [0, 1) (got {})", settings.alpha));
        }
        Ok(Self {
            coarse,
            dense,
            dense_basis,
            settings,
        })
    }

    /// Guided solve given the guiding directions.
    pub fn solve_with_guides(&self, y: &[f64], guides: &[Direction]) -> Result<GuidedVoxel> {
        let (weights, unguided_fallback) = if guides.is_empty() {
            (GuidanceWeights::unit(self.dense.n()), true)
        } else {
            (compute_guidance_weights(self.dense_basis, guides, self.settings.alpha)?, false)
        };
        let problem = SparseProblem::new(self.dense, y, self.settings.beta)?;
        let report = solve_weighted_l1(&problem, &weights, &self.settings.solver)?;
        let fos = postprocess_solution(&report.solution, self.dense_basis, &self.coarse.extraction)?;
        Ok(GuidedVoxel {
            fos,
            guides: guides.to_vec(),
            unguided_fallback,
        })
    }

    pub fn estimate_detailed(&self, y: &[f64], region: u32) -> Result<Option<GuidedVoxel>> {
        if region == 0 {
            return Ok(None);
        }
        let guides = self.coarse.estimate(y, region)?.directions();
        self.solve_with_guides(y, &guides).map(Some)
    }
}

impl VoxelEstimator for FordnEstimator<'_> {
    fn estimate(&self, y: &[f64], region: u32) -> Result<FoSet> {
        Ok(self
            .estimate_detailed(y, region)?
            .map(|v| v.fos)
            .unwrap_or_default())
    }

    fn check_regions(&self, regions: &[u32]) -> Result<()> {
        self.coarse.check_regions(regions)
    }
}

/// Unguided sparse reconstruction baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Baseline {
    /// Nonnegative ℓ1.
    Cfari,
    /// Iteratively reweighted nonnegative ℓ1.
    L2l0 { rounds: usize, epsilon: f64 },
}

impl Baseline {
    pub fn method(&self) -> Method {
        match self {
            Baseline::Cfari => Method::Cfari,
            Baseline::L2l0 { .. } => Method::L2l0,
        }
    }

    pub fn from_method(method: Method, rounds: usize, epsilon: f64) -> Result<Self> {
        match method {
            Method::Cfari => Ok(Baseline::Cfari),
            Method::L2l0 => Ok(Baseline::L2l0 { rounds, epsilon }),
            other => Err(invalid!("'{}' is not a baseline method", other.name())),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BaselineEstimator<'a> {
    pub baseline: Baseline,
    pub dictionary: &'a Dictionary,
    pub basis: &'a DirectionSet,
    pub beta: f64,
    pub solver: SolverSettings,
    pub extraction: FoExtractionConfig,
}

impl BaselineEstimator<'_> {
    pub fn solve(&self, y: &[f64]) -> Result<Vec<f64>> {
        let problem = SparseProblem::new(self.dictionary, y, self.beta)?;
        let report = match self.baseline {
            Baseline::Cfari => solve_nn_l1(&problem, &self.solver)?,
            Baseline::L2l0 { rounds, epsilon } => solve_reweighted_l1(&problem, rounds, epsilon, &self.solver)?,
        };
        Ok(report.solution)
    }
}

impl VoxelEstimator for BaselineEstimator<'_> {
    fn estimate(&self, y: &[f64], region: u32) -> Result<FoSet> {
        if region == 0 {
            return Ok(FoSet::empty());
        }
        if self.dictionary.n() != self.basis.len() {
            return Err(mismatch!("dictionary has {} atoms, basis has {}", self.dictionary.n(), self.basis.len()));
        }
        postprocess_solution(&self.solve(y)?, self.basis, &self.extraction)
    }
}

/// Dense length-`n` vector with the given entries added in.
pub fn sparse_vector(n: usize, entries: &[(usize, f64)]) -> Vec<f64> {
    let mut v = vec![0.0; n];
    for &(i, f) in entries {
        v[i] += f;
    }
    v
}
