//! Voxel-parallel execution on a rayon pool. Every parallel map collects in
//! input order and reductions run sequentially afterwards, so results do not
//! depend on the worker count.

use fordn_core::network::{chunk_gradient, BatchEvaluator, ChunkGradient, TrainingSample, UnfoldedNetParams, GRADIENT_CHUNK};
use fordn_core::pipeline::VoxelEstimator;
use fordn_core::signal::FoSet;
use rayon::prelude::*;

use crate::error::{CliError, Result};

/// Environment variable holding the default worker count.
pub const JOBS_ENV: &str = "FORDN_JOBS";

/// A dedicated pool with `jobs` workers (0 picks the rayon default).
pub fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Validation(format!("cannot start {jobs} workers: {e}")))
}

/// Parallel counterpart of `fordn_core::pipeline::estimate_volume`.
pub fn estimate_volume<E: VoxelEstimator + ?Sized>(
    estimator: &E,
    signals: &[f64],
    k: usize,
    regions: &[u32],
) -> Result<Vec<FoSet>> {
    if k == 0 || signals.len() != regions.len() * k {
        return Err(CliError::Validation(format!(
            "{} signal values for {} voxels of {k} values",
            signals.len(),
            regions.len()
        )));
    }
    estimator.check_regions(regions)?;
    signals
        .par_chunks(k)
        .zip(regions.par_iter())
        .map(|(y, &r)| estimator.estimate(y, r))
        .collect::<fordn_core::Result<Vec<_>>>()
        .map_err(CliError::from)
}

/// Gradient chunks evaluated on the current rayon pool.
#[derive(Debug, Clone, Copy, Default)]
pub struct Parallel;

impl BatchEvaluator for Parallel {
    fn evaluate(&self, params: &UnfoldedNetParams, batch: &[&TrainingSample]) -> Vec<ChunkGradient> {
        batch
            .par_chunks(GRADIENT_CHUNK)
            .map(|c| chunk_gradient(params, c))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fordn_core::geometry::{dictionary_for_basis, generate_gradient_scheme, tessellate_hemisphere, Eigenvalues};
    use fordn_core::network::Sequential;
    use fordn_core::pipeline::{Baseline, BaselineEstimator, FoExtractionConfig};
    use fordn_core::signal::voxel_rng;
    use fordn_core::solvers::SolverSettings;
    use rand::Rng;

    #[test]
    fn parallel_matches_sequential() {
        let scheme = generate_gradient_scheme(12, 1000.0, 2).unwrap();
        let basis = tessellate_hemisphere(3).unwrap();
        let g = dictionary_for_basis(&scheme, &basis, Eigenvalues::default()).unwrap();
        let est = BaselineEstimator {
            baseline: Baseline::Cfari,
            dictionary: &g,
            basis: &basis,
            beta: 0.05,
            solver: SolverSettings::default(),
            extraction: FoExtractionConfig::default(),
        };
        let mut rng = voxel_rng(1, 0);
        let n = 40;
        let signals: Vec<f64> = (0..n * 12).map(|_| rng.random_range(0.1..0.9)).collect();
        let regions: Vec<u32> = (0..n as u32).map(|v| v % 3).collect();
        let seq = fordn_core::pipeline::estimate_volume(&est, &signals, 12, &regions).unwrap();
        for jobs in [1, 3] {
            let par = pool(jobs).unwrap().install(|| estimate_volume(&est, &signals, 12, &regions)).unwrap();
            assert_eq!(par, seq);
        }

        let params = UnfoldedNetParams::scaled_classical(&g, 2.0);
        let samples: Vec<TrainingSample> = signals
            .chunks(12)
            .map(|y| TrainingSample {
                y: y.to_vec(),
                target: {
                    let mut t = vec![0.0; basis.len()];
                    t[0] = 1.0;
                    t
                },
            })
            .collect();
        let refs: Vec<&TrainingSample> = samples.iter().collect();
        let a = Sequential.evaluate(&params, &refs);
        let b = pool(3).unwrap().install(|| Parallel.evaluate(&params, &refs));
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
            assert_eq!(x.grads.dw, y.grads.dw);
            assert_eq!(x.grads.ds, y.grads.ds);
        }
    }
}
