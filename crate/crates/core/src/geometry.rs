//! Directions on the sphere, prolate basis tensors, gradient schemes and the
//! dictionary matrix.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::f64::consts::PI;

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Result};
use crate::linalg::Matrix;

/// Unit vector identified with its antipode.
///
/// The stored representative has its first nonzero component among
/// `(z, y, x)` positive, so two directions describing the same axis compare
/// equal component-wise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction([f64; 3]);

impl Direction {
    pub const X: Direction = Direction([1.0, 0.0, 0.0]);
    pub const Y: Direction = Direction([0.0, 1.0, 0.0]);
    pub const Z: Direction = Direction([0.0, 0.0, 1.0]);

    /// Normalizes and canonicalizes `(x, y, z)`.
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(invalid!("direction components must be finite"));
        }
        let norm = Float::sqrt(x * x + y * y + z * z);
        if norm == 0.0 {
            return Err(invalid!("zero vector has no direction"));
        }
        Ok(Self::canonical([x / norm, y / norm, z / norm]))
    }

    pub fn from_array(v: [f64; 3]) -> Result<Self> {
        Self::new(v[0], v[1], v[2])
    }

    /// Reads a vector that should already be a unit vector: fails when its
    /// norm is off by more than `tol`, keeps the components bit for bit when
    /// they are unit to rounding, and renormalizes otherwise.
    pub fn from_unit(v: [f64; 3], tol: f64) -> Result<Self> {
        if !v.iter().all(|c| c.is_finite()) {
            return Err(invalid!("direction components must be finite"));
        }
        let sq = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
        if Float::abs(Float::sqrt(sq) - 1.0) > tol {
            return Err(invalid!(
                "({}, {}, {}) is not a unit vector (norm {})",
                v[0],
                v[1],
                v[2],
                Float::sqrt(sq)
            ));
        }
        if Float::abs(sq - 1.0) <= 4.0 * f64::EPSILON {
            Ok(Self::canonical(v))
        } else {
            Self::from_array(v)
        }
    }

    fn canonical(v: [f64; 3]) -> Self {
        let flip = if v[2] != 0.0 {
            v[2] < 0.0
        } else if v[1] != 0.0 {
            v[1] < 0.0
        } else {
            v[0] < 0.0
        };
        if flip {
            Direction([-v[0], -v[1], -v[2]])
        } else {
            Direction(v)
        }
    }

    #[inline]
    pub fn x(&self) -> f64 {
        self.0[0]
    }

    #[inline]
    pub fn y(&self) -> f64 {
        self.0[1]
    }

    #[inline]
    pub fn z(&self) -> f64 {
        self.0[2]
    }

    #[inline]
    pub fn as_array(&self) -> [f64; 3] {
        self.0
    }

    #[inline]
    pub fn dot(&self, other: &Direction) -> f64 {
        self.0[0] * other.0[0] + self.0[1] * other.0[1] + self.0[2] * other.0[2]
    }

    /// `|u·v|`, the cosine of the axis angle.
    #[inline]
    pub fn abs_cos(&self, other: &Direction) -> f64 {
        Float::abs(self.dot(other))
    }

    /// Applies a 3×3 matrix (row-major) and re-canonicalizes.
    pub fn transformed(&self, m: &[[f64; 3]; 3]) -> Result<Self> {
        let v = self.0;
        let r = |row: &[f64; 3]| row[0] * v[0] + row[1] * v[1] + row[2] * v[2];
        Self::new(r(&m[0]), r(&m[1]), r(&m[2]))
    }

    /// Lexicographic order on `(z, y, x)`.
    pub fn canonical_cmp(&self, other: &Direction) -> Ordering {
        self.0[2]
            .total_cmp(&other.0[2])
            .then(self.0[1].total_cmp(&other.0[1]))
            .then(self.0[0].total_cmp(&other.0[0]))
    }
}

/// Axis angle in degrees, `arccos(|u·v|)`, in `[0, 90]`.
pub fn angle_deg(u: &Direction, v: &Direction) -> f64 {
    // atan2 keeps full precision for nearly parallel directions
    let (a, b) = (u.as_array(), v.as_array());
    let cross = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    let sin = Float::sqrt(cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]);
    Float::atan2(sin, u.abs_cos(v)) * 180.0 / PI
}

/// Ordered set of pairwise distinct directions.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionSet {
    directions: Vec<Direction>,
    level: Option<u32>,
}

impl DirectionSet {
    /// Rejects empty sets and sets containing the same axis twice.
    pub fn new(directions: Vec<Direction>) -> Result<Self> {
        if directions.is_empty() {
            return Err(invalid!("direction set must be nonempty"));
        }
        for (i, a) in directions.iter().enumerate() {
            for (j, b) in directions.iter().enumerate().skip(i + 1) {
                if a.abs_cos(b) >= 1.0 - 1e-12 {
                    return Err(invalid!("directions {i} and {j} coincide"));
                }
            }
        }
        Ok(Self {
            directions,
            level: None,
        })
    }

    /// Tessellation level when generated by [`tessellate_hemisphere`].
    pub fn level(&self) -> Option<u32> {
        self.level
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> Direction {
        self.directions[i]
    }

    pub fn as_slice(&self) -> &[Direction] {
        &self.directions
    }

    pub fn iter(&self) -> impl Iterator<Item = &Direction> {
        self.directions.iter()
    }

    /// Index of the member with the largest `|v·d|`; ties (within 1e-12) go
    /// to the lowest index.
    pub fn nearest(&self, d: &Direction) -> usize {
        let mut best = 0;
        let mut best_cos = f64::NEG_INFINITY;
        for (i, v) in self.directions.iter().enumerate() {
            let c = v.abs_cos(d);
            if c > best_cos + 1e-12 {
                best = i;
                best_cos = c;
            }
        }
        best
    }

    /// Largest angle between a member and its nearest other member.
    pub fn max_nearest_neighbor_angle(&self) -> f64 {
        self.nearest_neighbor_angles().fold(0.0, f64::max)
    }

    pub fn min_pairwise_angle(&self) -> f64 {
        self.nearest_neighbor_angles().fold(90.0, f64::min)
    }

    fn nearest_neighbor_angles(&self) -> impl Iterator<Item = f64> + '_ {
        self.directions.iter().enumerate().map(move |(i, a)| {
            self.directions
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, b)| angle_deg(a, b))
                .fold(90.0, f64::min)
        })
    }
}

/// Hemisphere directions from an octahedron whose edges are split into `n`
/// segments, projected to the sphere with antipodal duplicates removed.
///
/// The vertices of the subdivided octahedron are exactly the integer points
/// with `|p| + |q| + |r| = n`, so the result has `2n² + 1` members, sorted by
/// `(z, y, x)`.
pub fn tessellate_hemisphere(n: u32) -> Result<DirectionSet> {
    if n == 0 {
        return Err(invalid!("tessellation level must be at least 1"));
    }
    let n = n as i64;
    let mut directions = Vec::with_capacity((2 * n * n + 1) as usize);
    for r in 0..=n {
        for q in -(n - r)..=(n - r) {
            let rest = n - r - q.abs();
            let ps: &[i64] = if rest == 0 { &[0] } else { &[-rest, rest] };
            for &p in ps {
                let canonical = r > 0 || (q > 0) || (q == 0 && p > 0);
                if canonical {
                    directions.push(Direction::new(p as f64, q as f64, r as f64)?);
                }
            }
        }
    }
    directions.sort_by(Direction::canonical_cmp);
    debug_assert_eq!(directions.len() as i64, 2 * n * n + 1);
    Ok(DirectionSet {
        directions,
        level: Some(n as u32),
    })
}

/// Principal and transverse eigenvalues (mm²/s) of the prolate basis tensors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eigenvalues {
    pub axial: f64,
    pub radial: f64,
}

impl Default for Eigenvalues {
    fn default() -> Self {
        Self {
            axial: 1.5e-3,
            radial: 3.0e-4,
        }
    }
}

impl Eigenvalues {
    pub fn validate(&self) -> Result<()> {
        if !(self.axial > self.radial && self.radial > 0.0) {
            return Err(invalid!(
                "eigenvalues must satisfy axial > radial > 0 (got {} and {})",
                self.axial,
                self.radial
            ));
        }
        Ok(())
    }
}

/// Cylindrically symmetric tensor `λ2·I + (λ1 − λ2)·v·vᵀ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProlateTensor {
    matrix: [[f64; 3]; 3],
    eigenvalues: Eigenvalues,
    pev: Direction,
}

impl ProlateTensor {
    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.matrix
    }

    pub fn eigenvalues(&self) -> Eigenvalues {
        self.eigenvalues
    }

    pub fn pev(&self) -> Direction {
        self.pev
    }

    pub fn trace(&self) -> f64 {
        self.matrix[0][0] + self.matrix[1][1] + self.matrix[2][2]
    }

    /// `gᵀ D g`.
    #[inline]
    pub fn quadratic_form(&self, g: &Direction) -> f64 {
        // Evaluated through the eigen-structure: λ2 + (λ1 − λ2)(g·v)².
        let c = g.dot(&self.pev);
        self.eigenvalues.radial + (self.eigenvalues.axial - self.eigenvalues.radial) * c * c
    }
}

pub fn make_prolate_tensor(pev: Direction, eigenvalues: Eigenvalues) -> Result<ProlateTensor> {
    eigenvalues.validate()?;
    let v = pev.as_array();
    let d = eigenvalues.axial - eigenvalues.radial;
    let mut matrix = [[0.0; 3]; 3];
    for (r, row) in matrix.iter_mut().enumerate() {
        for (c, m) in row.iter_mut().enumerate() {
            *m = d * v[r] * v[c] + if r == c { eigenvalues.radial } else { 0.0 };
        }
    }
    Ok(ProlateTensor {
        matrix,
        eigenvalues,
        pev,
    })
}

/// One diffusion measurement: unit gradient direction and b-value (s/mm²).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gradient {
    pub direction: Direction,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientScheme {
    gradients: Vec<Gradient>,
}

impl GradientScheme {
    pub fn new(gradients: Vec<Gradient>) -> Result<Self> {
        if gradients.is_empty() {
            return Err(invalid!("gradient scheme must have at least one gradient"));
        }
        if let Some(g) = gradients.iter().find(|g| !(g.b >= 0.0 && g.b.is_finite())) {
            return Err(invalid!("b-values must be finite and nonnegative (got {})", g.b));
        }
        Ok(Self { gradients })
    }

    /// Every direction at the same b-value.
    pub fn single_shell(directions: &[Direction], b: f64) -> Result<Self> {
        Self::new(
            directions
                .iter()
                .map(|&direction| Gradient { direction, b })
                .collect(),
        )
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.gradients.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.gradients.is_empty()
    }

    pub fn gradients(&self) -> &[Gradient] {
        &self.gradients
    }

    pub fn iter(&self) -> impl Iterator<Item = &Gradient> {
        self.gradients.iter()
    }

    /// Diffusion attenuation `exp(−b gᵀDg)` of a tensor for every gradient.
    pub fn attenuations(&self, tensor: &ProlateTensor) -> Vec<f64> {
        self.gradients
            .iter()
            .map(|g| attenuation(g, tensor))
            .collect()
    }
}

#[inline]
fn attenuation(g: &Gradient, tensor: &ProlateTensor) -> f64 {
    if g.b == 0.0 {
        return 1.0;
    }
    Float::exp(-g.b * tensor.quadratic_form(&g.direction))
}

/// Antipodally symmetric electrostatic energy `Σ_{i<j} 1/|dᵢ−dⱼ| + 1/|dᵢ+dⱼ|`.
pub fn electrostatic_energy(directions: &[[f64; 3]]) -> f64 {
    let mut e = 0.0;
    for i in 0..directions.len() {
        for j in i + 1..directions.len() {
            let (minus, plus) = pair_distances(&directions[i], &directions[j]);
            e += 1.0 / minus + 1.0 / plus;
        }
    }
    e
}

fn pair_distances(a: &[f64; 3], b: &[f64; 3]) -> (f64, f64) {
    let mut m = 0.0;
    let mut p = 0.0;
    for k in 0..3 {
        m += (a[k] - b[k]) * (a[k] - b[k]);
        p += (a[k] + b[k]) * (a[k] + b[k]);
    }
    (Float::sqrt(m), Float::sqrt(p))
}

/// Outcome of the repulsion optimization behind [`generate_gradient_scheme`].
#[derive(Debug, Clone)]
pub struct RepulsionResult {
    pub directions: Vec<Direction>,
    pub initial_energy: f64,
    pub final_energy: f64,
    pub iterations: usize,
}

/// Spreads `k` axes over the sphere by projected gradient descent on
/// [`electrostatic_energy`], starting from seeded Gaussian points.
pub fn repel_directions(k: usize, seed: u64) -> Result<RepulsionResult> {
    if k < 2 {
        return Err(invalid!("need at least two directions to repel"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points: Vec<[f64; 3]> = Vec::with_capacity(k);
    while points.len() < k {
        let v: [f64; 3] = [
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
        ];
        let n = Float::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        if n > 1e-8 {
            points.push([v[0] / n, v[1] / n, v[2] / n]);
        }
    }
    let initial_energy = electrostatic_energy(&points);
    let mut energy = initial_energy;
    let mut step = 0.1 / k as f64;
    let mut grad = vec![[0.0; 3]; k];
    let mut trial = points.clone();
    let mut iterations = 0;
    for it in 0..10_000 {
        iterations = it + 1;
        grad.iter_mut().for_each(|g| *g = [0.0; 3]);
        for i in 0..k {
            for j in i + 1..k {
                let (a, b) = (points[i], points[j]);
                let (minus, plus) = pair_distances(&a, &b);
                let (cm, cp) = (minus * minus * minus, plus * plus * plus);
                for c in 0..3 {
                    // ∂/∂a of 1/|a−b| + 1/|a+b|
                    let ga = -(a[c] - b[c]) / cm - (a[c] + b[c]) / cp;
                    let gb = (a[c] - b[c]) / cm - (a[c] + b[c]) / cp;
                    grad[i][c] += ga;
                    grad[j][c] += gb;
                }
            }
        }
        // Tangential component only.
        for (g, p) in grad.iter_mut().zip(&points) {
            let radial = g[0] * p[0] + g[1] * p[1] + g[2] * p[2];
            for c in 0..3 {
                g[c] -= radial * p[c];
            }
        }
        loop {
            for ((t, p), g) in trial.iter_mut().zip(&points).zip(&grad) {
                let moved = [p[0] - step * g[0], p[1] - step * g[1], p[2] - step * g[2]];
                let n = Float::sqrt(moved[0] * moved[0] + moved[1] * moved[1] + moved[2] * moved[2]);
                *t = [moved[0] / n, moved[1] / n, moved[2] / n];
            }
            let e = electrostatic_energy(&trial);
            if e < energy {
                let rel = (energy - e) / energy;
                core::mem::swap(&mut points, &mut trial);
                energy = e;
                step *= 1.2;
                if rel < 1e-13 {
                    return finish(points, initial_energy, energy, iterations);
                }
                break;
            }
            step *= 0.5;
            if step < 1e-16 {
                return finish(points, initial_energy, energy, iterations);
            }
        }
    }
    finish(points, initial_energy, energy, iterations)
}

fn finish(
    points: Vec<[f64; 3]>,
    initial_energy: f64,
    final_energy: f64,
    iterations: usize,
) -> Result<RepulsionResult> {
    let directions = points
        .into_iter()
        .map(Direction::from_array)
        .collect::<Result<Vec<_>>>()?;
    Ok(RepulsionResult {
        directions,
        initial_energy,
        final_energy,
        iterations,
    })
}

/// Seeded single-shell scheme of `k ≥ 6` repelled directions at b-value `b`.
pub fn generate_gradient_scheme(k: usize, b: f64, seed: u64) -> Result<GradientScheme> {
    if k < 6 {
        return Err(invalid!("need at least 6 gradient directions (got {k})"));
    }
    let result = repel_directions(k, seed)?;
    GradientScheme::single_shell(&result.directions, b)
}

/// Basis attenuation matrix `G` (K rows, N columns) with
/// `G[k][i] = exp(−b_k g_kᵀ D_i g_k)`.
#[derive(Debug, Clone)]
pub struct Dictionary {
    matrix: Matrix,
    scheme: Option<GradientScheme>,
    tensors: Vec<ProlateTensor>,
    lipschitz: f64,
}

impl Dictionary {
    #[inline]
    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    /// Generic dictionary from an explicit matrix (no generating tensors).
    pub fn from_matrix(matrix: Matrix) -> Result<Self> {
        if matrix.rows() == 0 || matrix.cols() == 0 || !matrix.is_finite() {
            return Err(invalid!("dictionary matrix must be nonempty and finite"));
        }
        let lipschitz = 2.0 * matrix.largest_gram_eigenvalue(1e-8, 100_000);
        Ok(Self {
            matrix,
            scheme: None,
            tensors: Vec::new(),
            lipschitz,
        })
    }

    /// Gradient scheme the matrix was generated from, if any.
    pub fn scheme(&self) -> Option<&GradientScheme> {
        self.scheme.as_ref()
    }

    pub fn tensors(&self) -> &[ProlateTensor] {
        &self.tensors
    }

    /// Number of measurements (rows).
    #[inline]
    pub fn k(&self) -> usize {
        self.matrix.rows()
    }

    /// Number of atoms (columns).
    #[inline]
    pub fn n(&self) -> usize {
        self.matrix.cols()
    }

    /// Largest eigenvalue of `2GᵀG`, the Lipschitz constant of the gradient
    /// of `‖Gf − y‖²`.
    #[inline]
    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn basis_directions(&self) -> impl Iterator<Item = Direction> + '_ {
        self.tensors.iter().map(|t| t.pev())
    }
}

pub fn build_dictionary(scheme: &GradientScheme, basis: &[ProlateTensor]) -> Result<Dictionary> {
    if basis.is_empty() {
        return Err(invalid!("dictionary basis must be nonempty"));
    }
    let matrix = Matrix::from_fn(scheme.len(), basis.len(), |k, i| {
        attenuation(&scheme.gradients()[k], &basis[i])
    });
    let lipschitz = 2.0 * matrix.largest_gram_eigenvalue(1e-8, 100_000);
    Ok(Dictionary {
        matrix,
        scheme: Some(scheme.clone()),
        tensors: basis.to_vec(),
        lipschitz,
    })
}

/// Dictionary whose atoms are prolate tensors along every direction of `basis`.
pub fn dictionary_for_basis(
    scheme: &GradientScheme,
    basis: &DirectionSet,
    eigenvalues: Eigenvalues,
) -> Result<Dictionary> {
    let tensors = basis
        .iter()
        .map(|&d| make_prolate_tensor(d, eigenvalues))
        .collect::<Result<Vec<_>>>()?;
    build_dictionary(scheme, &tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn level_one_is_the_coordinate_axes() {
        let set = tessellate_hemisphere(1).unwrap();
        assert_eq!(set.as_slice(), &[Direction::X, Direction::Y, Direction::Z]);
    }

    #[test]
    fn unit_vectors_read_back_exactly() {
        for d in tessellate_hemisphere(12).unwrap().iter() {
            assert_eq!(Direction::from_unit(d.as_array(), 1e-6).unwrap(), *d);
        }
        let d = Direction::from_unit([0.0, 0.0, -1.0000001], 1e-6).unwrap();
        assert_eq!(d, Direction::Z);
        assert!(Direction::from_unit([0.0, 0.0, 1.01], 1e-6).is_err());
    }

    #[test]
    fn basis_counts() {
        assert_eq!(tessellate_hemisphere(6).unwrap().len(), 73);
        assert_eq!(tessellate_hemisphere(12).unwrap().len(), 289);
        assert!(tessellate_hemisphere(0).is_err());
    }

    #[test]
    fn tessellation_members_are_unit_and_distinct() {
        for n in 1..=12 {
            let set = tessellate_hemisphere(n).unwrap();
            assert_eq!(set.len() as u32, 2 * n * n + 1);
            for d in set.iter() {
                assert_abs_diff_eq!(d.dot(d), 1.0, epsilon = 1e-12);
            }
            assert!(set.min_pairwise_angle() > 0.0);
            // DirectionSet::new re-checks antipodal distinctness.
            DirectionSet::new(set.as_slice().to_vec()).unwrap();
        }
    }

    #[test]
    fn canonical_representative() {
        let d = Direction::new(0.0, 0.0, -2.0).unwrap();
        assert_eq!(d, Direction::Z);
        let d = Direction::new(1.0, -1.0, 0.0).unwrap();
        assert!(d.y() > 0.0 && d.x() < 0.0);
        assert!(Direction::new(0.0, 0.0, 0.0).is_err());
        assert!(Direction::new(f64::NAN, 0.0, 1.0).is_err());
    }

    #[test]
    fn prolate_tensor_examples() {
        let eig = Eigenvalues::default();
        let t = make_prolate_tensor(Direction::Z, eig).unwrap();
        let expected = [[3e-4, 0.0, 0.0], [0.0, 3e-4, 0.0], [0.0, 0.0, 1.5e-3]];
        assert_eq!(t.matrix(), &expected);
        let t = make_prolate_tensor(Direction::X, eig).unwrap();
        assert_abs_diff_eq!(t.matrix()[0][0], 1.5e-3, epsilon = 1e-18);
        assert_abs_diff_eq!(t.matrix()[1][1], 3e-4, epsilon = 1e-18);
        let bad = Eigenvalues {
            axial: 3e-4,
            radial: 1.5e-3,
        };
        assert!(make_prolate_tensor(Direction::X, bad).is_err());
    }

    #[test]
    fn dictionary_closed_forms() {
        let eig = Eigenvalues::default();
        let scheme = GradientScheme::new(vec![
            Gradient { direction: Direction::Z, b: 0.0 },
            Gradient { direction: Direction::Z, b: 1000.0 },
            Gradient { direction: Direction::X, b: 1000.0 },
        ])
        .unwrap();
        let basis = [make_prolate_tensor(Direction::Z, eig).unwrap()];
        let g = build_dictionary(&scheme, &basis).unwrap();
        assert_eq!(g.matrix().get(0, 0), 1.0);
        // Quadratic forms evaluated by hand: 1000·1.5e-3 and 1000·3e-4.
        assert_abs_diff_eq!(g.matrix().get(1, 0), (-1.5f64).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(g.matrix().get(1, 0), 0.22313, epsilon = 1e-5);
        assert_abs_diff_eq!(g.matrix().get(2, 0), 0.74082, epsilon = 1e-5);
    }

    #[test]
    fn angle_examples() {
        assert_eq!(angle_deg(&Direction::X, &Direction::X), 0.0);
        let minus_x = Direction::new(-1.0, 0.0, 0.0).unwrap();
        assert_eq!(angle_deg(&Direction::X, &minus_x), 0.0);
        assert_abs_diff_eq!(angle_deg(&Direction::X, &Direction::Y), 90.0, epsilon = 1e-12);
    }

    #[test]
    fn six_gradients_are_well_spread() {
        let r = repel_directions(6, 7).unwrap();
        assert!(r.final_energy <= r.initial_energy);
        let set = DirectionSet::new(r.directions).unwrap();
        // Exhaustive pairwise scan.
        let mut min = 90.0f64;
        for (i, a) in set.iter().enumerate() {
            for b in set.iter().skip(i + 1) {
                min = min.min(angle_deg(a, b));
            }
        }
        assert!(min >= 60.0, "minimum pairwise angle {min}");
    }

    #[test]
    fn gradient_scheme_errors_and_determinism() {
        assert!(generate_gradient_scheme(5, 1000.0, 1).is_err());
        let a = generate_gradient_scheme(30, 1000.0, 3).unwrap();
        let b = generate_gradient_scheme(30, 1000.0, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 30);
        assert!(a.iter().all(|g| g.b == 1000.0));
    }

    #[test]
    fn nearest_breaks_ties_by_index() {
        let set = DirectionSet::new(vec![Direction::X, Direction::Y]).unwrap();
        let mid = Direction::new(1.0, 1.0, 0.0).unwrap();
        assert_eq!(set.nearest(&mid), 0);
    }

    fn rotation(axis: [f64; 3], angle: f64) -> [[f64; 3]; 3] {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        let (x, y, z) = (axis[0] / n, axis[1] / n, axis[2] / n);
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        [
            [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
            [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
            [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
        ]
    }

    proptest! {
        #[test]
        fn trace_is_invariant(x in -1.0f64..1.0, y in -1.0f64..1.0, z in 0.1f64..1.0) {
            let eig = Eigenvalues::default();
            let t = make_prolate_tensor(Direction::new(x, y, z).unwrap(), eig).unwrap();
            prop_assert!((t.trace() - (eig.axial + 2.0 * eig.radial)).abs() < 1e-15);
        }

        #[test]
        fn angle_is_symmetric_and_antipodal(
            a in prop::array::uniform3(-1.0f64..1.0),
            b in prop::array::uniform3(-1.0f64..1.0),
        ) {
            prop_assume!(a.iter().map(|v| v * v).sum::<f64>() > 1e-3);
            prop_assume!(b.iter().map(|v| v * v).sum::<f64>() > 1e-3);
            let u = Direction::from_array(a).unwrap();
            let v = Direction::from_array(b).unwrap();
            let w = Direction::new(-b[0], -b[1], -b[2]).unwrap();
            let ab = angle_deg(&u, &v);
            prop_assert_eq!(ab, angle_deg(&v, &u));
            prop_assert_eq!(ab, angle_deg(&u, &w));
            prop_assert!((0.0..=90.0).contains(&ab));
        }

        #[test]
        fn dictionary_is_rotation_invariant(
            axis in prop::array::uniform3(-1.0f64..1.0),
            angle in 0.0f64..std::f64::consts::TAU,
            seed in 0u64..50,
        ) {
            prop_assume!(axis.iter().map(|v| v * v).sum::<f64>() > 1e-3);
            let rot = rotation(axis, angle);
            let eig = Eigenvalues::default();
            let scheme = generate_gradient_scheme(8, 1000.0, seed).unwrap();
            let basis = tessellate_hemisphere(2).unwrap();
            let g = dictionary_for_basis(&scheme, &basis, eig).unwrap();
            let rotated_scheme = GradientScheme::single_shell(
                &scheme.iter().map(|g| g.direction.transformed(&rot).unwrap()).collect::<Vec<_>>(),
                1000.0,
            ).unwrap();
            let rotated_basis = DirectionSet::new(
                basis.iter().map(|d| d.transformed(&rot).unwrap()).collect(),
            ).unwrap();
            let gr = dictionary_for_basis(&rotated_scheme, &rotated_basis, eig).unwrap();
            prop_assert!(g.matrix().max_abs_diff(gr.matrix()) < 1e-12);
            prop_assert!(g.matrix().as_slice().iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }
}
