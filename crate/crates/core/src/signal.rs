//! Multi-tensor signal synthesis, Rician noise and the crossing-tract digital
//! phantom.

use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::geometry::{make_prolate_tensor, Direction, Eigenvalues, GradientScheme};

/// A fiber orientation with its mixture fraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiberOrientation {
    pub direction: Direction,
    pub fraction: f64,
}

/// Fiber orientations at one voxel, sorted by descending fraction.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FoSet {
    fos: Vec<FiberOrientation>,
}

impl FoSet {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Sorts by descending fraction (stable, so equal fractions keep their
    /// input order). Fractions must be finite and nonnegative.
    pub fn new(mut fos: Vec<FiberOrientation>) -> Result<Self> {
        if let Some(fo) = fos.iter().find(|fo| !(fo.fraction >= 0.0 && fo.fraction.is_finite())) {
            return Err(invalid!("mixture fractions must be finite and nonnegative (got {})", fo.fraction));
        }
        fos.sort_by(|a, b| b.fraction.total_cmp(&a.fraction));
        Ok(Self { fos })
    }

    pub fn from_pairs(pairs: &[(Direction, f64)]) -> Result<Self> {
        Self::new(
            pairs
                .iter()
                .map(|&(direction, fraction)| FiberOrientation { direction, fraction })
                .collect(),
        )
    }

    /// Equal fractions `1/m` over the given directions.
    pub fn equal_fractions(directions: &[Direction]) -> Self {
        let f = 1.0 / directions.len() as f64;
        Self {
            fos: directions
                .iter()
                .map(|&direction| FiberOrientation { direction, fraction: f })
                .collect(),
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.fos.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.fos.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &FiberOrientation> {
        self.fos.iter()
    }

    pub fn as_slice(&self) -> &[FiberOrientation] {
        &self.fos
    }

    pub fn directions(&self) -> Vec<Direction> {
        self.fos.iter().map(|fo| fo.direction).collect()
    }

    pub fn fraction_sum(&self) -> f64 {
        self.fos.iter().map(|fo| fo.fraction).sum()
    }

    /// Rescales fractions to sum to one. An all-zero set is left unchanged.
    pub fn normalized(mut self) -> Self {
        let s = self.fraction_sum();
        if s > 0.0 {
            self.fos.iter_mut().for_each(|fo| fo.fraction /= s);
        }
        self
    }
}

/// Noiseless normalized signal `y_k = Σ_i f_i exp(−b_k g_kᵀ D_i g_k)` with a
/// prolate tensor along every FO.
pub fn synthesize_signal(
    fos: &FoSet,
    eigenvalues: Eigenvalues,
    scheme: &GradientScheme,
) -> Result<Vec<f64>> {
    if fos.is_empty() || fos.len() > 3 {
        return Err(invalid!("synthesis needs 1 to 3 fiber orientations (got {})", fos.len()));
    }
    let sum = fos.fraction_sum();
    if Float::abs(sum - 1.0) > 1e-9 {
        return Err(invalid!("mixture fractions must sum to 1 (got {sum})"));
    }
    let mut y = vec![0.0; scheme.len()];
    for fo in fos.iter() {
        let tensor = make_prolate_tensor(fo.direction, eigenvalues)?;
        for (yk, a) in y.iter_mut().zip(scheme.attenuations(&tensor)) {
            *yk += fo.fraction * a;
        }
    }
    Ok(y)
}

/// Isotropic attenuation `exp(−b·d)` for every gradient.
pub fn isotropic_signal(diffusivity: f64, scheme: &GradientScheme) -> Vec<f64> {
    scheme.iter().map(|g| Float::exp(-g.b * diffusivity)).collect()
}

/// How noisy raw signals are brought back to attenuations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BaselineMode {
    /// Divide by the noise-free baseline, so the SNR is exact.
    #[default]
    Clean,
    /// Divide by a Rician-noised baseline measurement.
    Noisy,
}

/// Rician-corrupts the raw signals `s0·y` with `σ = s0/snr` and renormalizes.
/// An infinite SNR returns `y` unchanged.
pub fn add_rician_noise<R: Rng + ?Sized>(
    y: &[f64],
    snr: f64,
    s0: f64,
    mode: BaselineMode,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(snr > 0.0) {
        return Err(invalid!("SNR must be positive (got {snr})"));
    }
    if !(s0 > 0.0 && s0.is_finite()) {
        return Err(invalid!("baseline signal must be positive (got {s0})"));
    }
    let sigma = s0 / snr;
    if sigma == 0.0 {
        return Ok(y.to_vec());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| invalid!("{e}"))?;
    let mut rician = |s: f64| {
        let n1: f64 = normal.sample(rng);
        let n2: f64 = normal.sample(rng);
        Float::sqrt((s + n1) * (s + n1) + n2 * n2)
    };
    let noisy: Vec<f64> = y.iter().map(|&v| rician(s0 * v)).collect();
    let baseline = match mode {
        BaselineMode::Clean => s0,
        BaselineMode::Noisy => rician(s0),
    };
    Ok(noisy.into_iter().map(|s| s / baseline).collect())
}

/// Independent random stream for one voxel, so results do not depend on the
/// order or parallelism in which voxels are visited.
pub fn voxel_rng(seed: u64, voxel: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(voxel);
    rng
}

/// Centerline of a tubular tract, in voxel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum TractPath {
    /// Infinite straight line through `point` along `direction`.
    Line { point: [f64; 3], direction: [f64; 3] },
    /// Circular arc `center + radius(cos θ·u + sin θ·v)` for θ in
    /// `[start_deg, end_deg]`; `u` and `v` must be orthonormal.
    Arc {
        center: [f64; 3],
        u: [f64; 3],
        v: [f64; 3],
        radius: f64,
        start_deg: f64,
        end_deg: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tract {
    pub path: TractPath,
    /// Tube radius in voxels.
    pub radius: f64,
}

impl Tract {
    /// Distance from `p` to the centerline and the centerline tangent at the
    /// closest point.
    pub fn closest(&self, p: [f64; 3]) -> ([f64; 3], f64) {
        match &self.path {
            TractPath::Line { point, direction } => {
                let d = unit(*direction);
                let r = sub(p, *point);
                let t = dot3(r, d);
                let perp = [r[0] - t * d[0], r[1] - t * d[1], r[2] - t * d[2]];
                (d, Float::sqrt(dot3(perp, perp)))
            }
            TractPath::Arc {
                center,
                u,
                v,
                radius,
                start_deg,
                end_deg,
            } => {
                let r = sub(p, *center);
                let theta = Float::atan2(dot3(r, *v), dot3(r, *u)).to_degrees();
                let candidates = [theta, theta + 360.0, theta - 360.0];
                let inside = candidates
                    .iter()
                    .copied()
                    .find(|t| *t >= *start_deg && *t <= *end_deg);
                let at = |deg: f64| {
                    let (s, c) = Float::sin_cos(deg.to_radians());
                    let point = [
                        center[0] + radius * (c * u[0] + s * v[0]),
                        center[1] + radius * (c * u[1] + s * v[1]),
                        center[2] + radius * (c * u[2] + s * v[2]),
                    ];
                    let tangent = [
                        -s * u[0] + c * v[0],
                        -s * u[1] + c * v[1],
                        -s * u[2] + c * v[2],
                    ];
                    let d = sub(p, point);
                    (tangent, Float::sqrt(dot3(d, d)))
                };
                match inside {
                    Some(t) => at(t),
                    None => {
                        let a = at(*start_deg);
                        let b = at(*end_deg);
                        if a.1 <= b.1 {
                            a
                        } else {
                            b
                        }
                    }
                }
            }
        }
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn unit(a: [f64; 3]) -> [f64; 3] {
    let n = Float::sqrt(dot3(a, a));
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Crossing type of a voxel, by the number of tracts covering it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum RegionLabel {
    Background = 0,
    Noncrossing = 1,
    TwoCrossing = 2,
    ThreeCrossing = 3,
}

impl RegionLabel {
    pub const TISSUE: [RegionLabel; 3] = [
        RegionLabel::Noncrossing,
        RegionLabel::TwoCrossing,
        RegionLabel::ThreeCrossing,
    ];

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Self::Background),
            1 => Ok(Self::Noncrossing),
            2 => Ok(Self::TwoCrossing),
            3 => Ok(Self::ThreeCrossing),
            _ => Err(invalid!("unknown region label {v}")),
        }
    }

    pub fn from_count(count: usize) -> Self {
        match count {
            0 => Self::Background,
            1 => Self::Noncrossing,
            2 => Self::TwoCrossing,
            _ => Self::ThreeCrossing,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Background => "background",
            Self::Noncrossing => "noncrossing",
            Self::TwoCrossing => "2-crossing",
            Self::ThreeCrossing => "3-crossing",
        }
    }
}

/// Geometry and acquisition of a digital crossing phantom.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub voxel_size_mm: f64,
    pub tracts: Vec<Tract>,
    /// Required number of pairwise and triple crossing locations.
    pub expected_pair_locations: usize,
    pub expected_triple_locations: usize,
}

impl PhantomSpec {
    /// Five tubes on a 40³ grid: three straight tracts along the axes meeting
    /// at the center (the triple crossing) and two 270° arcs of radius 14,
    /// one in the xy-plane and one in the yz-plane, each cutting the straight
    /// tracts three times away from the center.
    pub fn five_tracts() -> Self {
        let n = 40usize;
        let c = (n as f64 - 1.0) / 2.0;
        let center = [c, c, c];
        let radius = 4.0;
        let line = |direction| Tract {
            path: TractPath::Line {
                point: center,
                direction,
            },
            radius,
        };
        let arc = |u, v, start_deg, end_deg| Tract {
            path: TractPath::Arc {
                center,
                u,
                v,
                radius: 14.0,
                start_deg,
                end_deg,
            },
            radius,
        };
        Self {
            dims: [n, n, n],
            voxel_size_mm: 1.0,
            tracts: vec![
                line([1.0, 0.0, 0.0]),
                line([0.0, 1.0, 0.0]),
                line([0.0, 0.0, 1.0]),
                arc([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], -45.0, 225.0),
                arc([0.0, 1.0, 0.0], [0.0, 0.0, 1.0], 45.0, 315.0),
            ],
            expected_pair_locations: 6,
            expected_triple_locations: 1,
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }
}

/// Flat voxel index, x fastest.
#[inline]
pub fn voxel_index(dims: [usize; 3], i: usize, j: usize, k: usize) -> usize {
    (k * dims[1] + j) * dims[0] + i
}

#[inline]
pub fn voxel_coords(dims: [usize; 3], idx: usize) -> [usize; 3] {
    [idx % dims[0], (idx / dims[0]) % dims[1], idx / (dims[0] * dims[1])]
}

/// Connected crossing locations found in a phantom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Census {
    /// Components of the multi-tract voxels containing no triple voxel.
    pub pair_locations: usize,
    /// Components containing at least one voxel covered by three tracts.
    pub triple_locations: usize,
    pub noncrossing_voxels: usize,
    pub two_crossing_voxels: usize,
    pub three_crossing_voxels: usize,
}

/// Ground truth and region structure of a phantom, before signal synthesis.
#[derive(Debug, Clone)]
pub struct PhantomTruth {
    pub dims: [usize; 3],
    pub voxel_size_mm: f64,
    pub truth: Vec<FoSet>,
    pub labels: Vec<RegionLabel>,
    /// Bit `t` set when tract `t` covers the voxel.
    pub tract_masks: Vec<u8>,
    pub census: Census,
}

/// Rasterizes the tracts: each voxel center gets the tangents of the tracts
/// covering it with equal fractions. Fails with the realized counts when the
/// crossing structure differs from the spec's expectation.
pub fn rasterize_phantom(spec: &PhantomSpec) -> Result<PhantomTruth> {
    if spec.tracts.is_empty() || spec.tracts.len() > 8 {
        return Err(invalid!("phantom needs 1 to 8 tracts"));
    }
    let dims = spec.dims;
    let total = spec.voxel_count();
    let mut truth = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    let mut tract_masks = Vec::with_capacity(total);
    for idx in 0..total {
        let [i, j, k] = voxel_coords(dims, idx);
        let p = [i as f64, j as f64, k as f64];
        let mut dirs = Vec::new();
        let mut mask = 0u8;
        for (t, tract) in spec.tracts.iter().enumerate() {
            let (tangent, dist) = tract.closest(p);
            if dist <= tract.radius {
                dirs.push(Direction::from_array(tangent)?);
                mask |= 1 << t;
            }
        }
        labels.push(RegionLabel::from_count(dirs.len()));
        tract_masks.push(mask);
        truth.push(if dirs.is_empty() {
            FoSet::empty()
        } else {
            FoSet::equal_fractions(&dirs)
        });
    }
    let census = census(dims, &labels);
    if census.pair_locations != spec.expected_pair_locations
        || census.triple_locations != spec.expected_triple_locations
    {
        return Err(Error::Validation(format!(
            "phantom crossing census: realized {} two-tract and {} three-tract locations, expected {} and {}",
            census.pair_locations,
            census.triple_locations,
            spec.expected_pair_locations,
            spec.expected_triple_locations
        )));
    }
    Ok(PhantomTruth {
        dims,
        voxel_size_mm: spec.voxel_size_mm,
        truth,
        labels,
        tract_masks,
        census,
    })
}

/// Counts crossing locations as 26-connected components of voxels covered by
/// two or more tracts.
pub fn census(dims: [usize; 3], labels: &[RegionLabel]) -> Census {
    let mut out = Census::default();
    for l in labels {
        match l {
            RegionLabel::Noncrossing => out.noncrossing_voxels += 1,
            RegionLabel::TwoCrossing => out.two_crossing_voxels += 1,
            RegionLabel::ThreeCrossing => out.three_crossing_voxels += 1,
            RegionLabel::Background => {}
        }
    }
    let crossing = |l: RegionLabel| l >= RegionLabel::TwoCrossing;
    let mut seen = vec![false; labels.len()];
    let mut queue = VecDeque::new();
    for start in 0..labels.len() {
        if seen[start] || !crossing(labels[start]) {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut has_triple = false;
        while let Some(idx) = queue.pop_front() {
            has_triple |= labels[idx] == RegionLabel::ThreeCrossing;
            let [i, j, k] = voxel_coords(dims, idx);
            for dk in -1i64..=1 {
                for dj in -1i64..=1 {
                    for di in -1i64..=1 {
                        let (ni, nj, nk) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                        if ni < 0
                            || nj < 0
                            || nk < 0
                            || ni >= dims[0] as i64
                            || nj >= dims[1] as i64
                            || nk >= dims[2] as i64
                        {
                            continue;
                        }
                        let n = voxel_index(dims, ni as usize, nj as usize, nk as usize);
                        if !seen[n] && crossing(labels[n]) {
                            seen[n] = true;
                            queue.push_back(n);
                        }
                    }
                }
            }
        }
        if has_triple {
            out.triple_locations += 1;
        } else {
            out.pair_locations += 1;
        }
    }
    out
}

/// Acquisition settings for phantom signal synthesis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcquisitionSettings {
    pub eigenvalues: Eigenvalues,
    pub snr: f64,
    pub s0: f64,
    pub baseline: BaselineMode,
    pub seed: u64,
}

/// Phantom with synthesized normalized signals, `K` values per voxel.
#[derive(Debug, Clone)]
pub struct PhantomVolume {
    pub truth: PhantomTruth,
    /// Voxel-major: voxel `v` occupies `signals[v*K..(v+1)*K]`.
    pub signals: Vec<f64>,
    pub k: usize,
}

impl PhantomVolume {
    pub fn signal(&self, voxel: usize) -> &[f64] {
        &self.signals[voxel * self.k..(voxel + 1) * self.k]
    }
}

/// Rasterizes `spec`, synthesizes the multi-tensor signal everywhere
/// (isotropic diffusion at the tensors' mean diffusivity in background) and
/// adds Rician noise from a per-voxel stream of `acq.seed`.
pub fn build_crossing_phantom(
    spec: &PhantomSpec,
    scheme: &GradientScheme,
    acq: &AcquisitionSettings,
) -> Result<PhantomVolume> {
    acq.eigenvalues.validate()?;
    let truth = rasterize_phantom(spec)?;
    let k = scheme.len();
    let md = (acq.eigenvalues.axial + 2.0 * acq.eigenvalues.radial) / 3.0;
    let background = isotropic_signal(md, scheme);
    let mut signals = Vec::with_capacity(truth.truth.len() * k);
    for (v, fos) in truth.truth.iter().enumerate() {
        let clean = if fos.is_empty() {
            background.clone()
        } else {
            synthesize_signal(fos, acq.eigenvalues, scheme)?
        };
        let noisy = if acq.snr.is_infinite() {
            clean
        } else {
            let mut rng = voxel_rng(acq.seed, v as u64);
            add_rician_noise(&clean, acq.snr, acq.s0, acq.baseline, &mut rng)?
        };
        signals.extend_from_slice(&noisy);
    }
    Ok(PhantomVolume { truth, signals, k })
}
