//! Unfolded thresholding network: `depth` layers `fᵗ⁺¹ = h_λ(W·y + S·fᵗ)`
//! with `W` and `S` shared among layers, followed by the normalization
//! `f ← (f + τ1)/‖f + τ1‖₁`.
//!
//! Training minimizes the squared error `‖f_out − target‖²` averaged over
//! samples, with analytic gradients and Adam.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, mismatch, Result};
use crate::geometry::{Dictionary, DirectionSet, Eigenvalues, GradientScheme};
use crate::linalg::{axpy, dot, Matrix};
use crate::signal::{add_rician_noise, synthesize_signal, voxel_rng, BaselineMode, FoSet};
use crate::solvers::hard_threshold;

pub const DEFAULT_DEPTH: usize = 8;
pub const DEFAULT_LAMBDA: f64 = 0.01;
pub const DEFAULT_TAU: f64 = 1e-10;

/// Samples per chunk of a batch. Partial gradients are formed per chunk and
/// summed in chunk order, which fixes the floating-point reduction order no
/// matter how chunks are scheduled.
pub const GRADIENT_CHUNK: usize = 16;

/// Learned parameters and fixed hyperparameters of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct UnfoldedNetParams {
    /// `N′×K`
    pub w: Matrix,
    /// `N′×N′`
    pub s: Matrix,
    pub lambda: f64,
    pub tau: f64,
    pub depth: usize,
    /// Whether the output passes through the normalization layer.
    pub normalize: bool,
}

impl UnfoldedNetParams {
    /// Iterative hard thresholding weights `W = μGᵀ`, `S = I − μGᵀG`.
    pub fn thresholding_init(dictionary: &Dictionary, step: f64) -> Self {
        let g = dictionary.matrix();
        let mut w = g.transpose();
        w.scale(step);
        let mut s = g.gram();
        s.scale(-step);
        for i in 0..s.rows() {
            s.set(i, i, s.get(i, i) + 1.0);
        }
        Self {
            w,
            s,
            lambda: DEFAULT_LAMBDA,
            tau: DEFAULT_TAU,
            depth: DEFAULT_DEPTH,
            normalize: true,
        }
    }

    /// `W = Gᵀ`, `S = I − GᵀG`.
    pub fn classical(dictionary: &Dictionary) -> Self {
        Self::thresholding_init(dictionary, 1.0)
    }

    /// Classical weights with the convergent step `μ = 1/λmax(GᵀG)`.
    pub fn stable_classical(dictionary: &Dictionary) -> Self {
        Self::thresholding_init(dictionary, 2.0 / dictionary.lipschitz())
    }

    /// `stable_classical` with the input weights multiplied by `gain`: the
    /// same iterations run on `gain·y`, which the normalization cancels,
    /// so `λ` acts as a threshold `gain` times smaller.
    pub fn scaled_classical(dictionary: &Dictionary, gain: f64) -> Self {
        let mut params = Self::stable_classical(dictionary);
        params.w.scale(gain);
        params
    }

    pub fn k(&self) -> usize {
        self.w.cols()
    }

    pub fn n(&self) -> usize {
        self.w.rows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.s.rows() != self.w.rows() || self.s.cols() != self.w.rows() {
            return Err(mismatch!(
                "S must be {n}×{n} for W with {n} rows (got {}×{})",
                self.s.rows(),
                self.s.cols(),
                n = self.w.rows()
            ));
        }
        if !(self.w.is_finite() && self.s.is_finite()) {
            return Err(invalid!("network weights must be finite"));
        }
        if !(self.lambda >= 0.0) || !(self.tau > 0.0) || self.depth == 0 {
            return Err(invalid!(
                "need λ ≥ 0, τ > 0 and depth ≥ 1 (got {}, {}, {})",
                self.lambda,
                self.tau,
                self.depth
            ));
        }
        Ok(())
    }
}

/// Activations retained from a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    /// Pre-activations `aᵗ = W·y + S·fᵗ⁻¹`, one per layer.
    pub pre: Vec<Vec<f64>>,
    /// Layer outputs `fᵗ = h_λ(aᵗ)`, one per layer.
    pub post: Vec<Vec<f64>>,
    /// `‖f + τ1‖₁` of the last layer (1 when normalization is off).
    pub norm: f64,
    pub output: Vec<f64>,
}

pub fn forward(params: &UnfoldedNetParams, y: &[f64]) -> Result<ForwardPass> {
    if y.len() != params.k() {
        return Err(mismatch!("input has {} values, network expects {}", y.len(), params.k()));
    }
    Ok(forward_unchecked(params, y))
}

fn forward_unchecked(params: &UnfoldedNetParams, y: &[f64]) -> ForwardPass {
    let n = params.n();
    let wy = params.w.mul_vec(y);
    let mut pre = Vec::with_capacity(params.depth);
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(params.depth);
    let mut active = Vec::with_capacity(n);
    for _ in 0..params.depth {
        let mut a = wy.clone();
        if let Some(prev) = post.last() {
            active.clear();
            active.extend((0..n).filter(|&j| prev[j] != 0.0));
            for (i, ai) in a.iter_mut().enumerate() {
                let row = params.s.row(i);
                let mut acc = 0.0;
                for &j in &active {
                    acc += row[j] * prev[j];
                }
                *ai += acc;
            }
        }
        let f: Vec<f64> = a.iter().map(|&v| hard_threshold(v, params.lambda)).collect();
        pre.push(a);
        post.push(f);
    }
    let last = post.last().expect("depth ≥ 1");
    let (norm, output) = if params.normalize {
        let norm: f64 = last.iter().map(|v| v + params.tau).sum();
        (norm, last.iter().map(|v| (v + params.tau) / norm).collect())
    } else {
        (1.0, last.clone())
    };
    ForwardPass {
        pre,
        post,
        norm,
        output,
    }
}

/// Gradients with respect to `W` and `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub dw: Matrix,
    pub ds: Matrix,
}

impl Gradients {
    pub fn zeros(params: &UnfoldedNetParams) -> Self {
        Self {
            dw: Matrix::zeros(params.n(), params.k()),
            ds: Matrix::zeros(params.n(), params.n()),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        axpy(1.0, other.dw.as_slice(), self.dw.as_mut_slice());
        axpy(1.0, other.ds.as_slice(), self.ds.as_mut_slice());
    }

    pub fn scale(&mut self, s: f64) {
        self.dw.scale(s);
        self.ds.scale(s);
    }

    pub fn norm(&self) -> f64 {
        let a = self.dw.as_slice();
        let b = self.ds.as_slice();
        Float::sqrt(dot(a, a) + dot(b, b))
    }
}

/// Mean squared error over the output entries.
pub fn sample_loss(output: &[f64], target: &[f64]) -> f64 {
    let ss: f64 = output.iter().zip(target).map(|(o, t)| (o - t) * (o - t)).sum();
    ss / output.len() as f64
}

/// Gradients of the mean squared error with respect to `W` and `S`, summed over
/// the shared layers.
pub fn backward(
    params: &UnfoldedNetParams,
    y: &[f64],
    target: &[f64],
    pass: &ForwardPass,
) -> Result<Gradients> {
    let mut grads = Gradients::zeros(params);
    backward_into(params, y, target, pass, &mut grads)?;
    Ok(grads)
}

/// Accumulates the gradients of one sample into `grads`.
pub fn backward_into(
    params: &UnfoldedNetParams,
    y: &[f64],
    target: &[f64],
    pass: &ForwardPass,
    grads: &mut Gradients,
) -> Result<()> {
    let n = params.n();
    if pass.pre.len() != params.depth
        || pass.post.len() != params.depth
        || pass.pre.iter().chain(&pass.post).any(|v| v.len() != n)
        || pass.output.len() != n
    {
        return Err(invalid!("activations do not match the network shape"));
    }
    if y.len() != params.k() || target.len() != n {
        return Err(mismatch!(
            "input has {} values and target {}, network is {}→{}",
            y.len(),
            target.len(),
            params.k(),
            n
        ));
    }
    // d loss / d output
    let scale = 2.0 / pass.output.len() as f64;
    let upstream: Vec<f64> = pass.output.iter().zip(target).map(|(o, t)| scale * (o - t)).collect();
    // Through the normalization: ∂oᵢ/∂zⱼ = (δᵢⱼ − oᵢ)/‖z‖₁.
    let mut delta_f: Vec<f64> = if params.normalize {
        let proj = dot(&pass.output, &upstream);
        upstream.iter().map(|g| (g - proj) / pass.norm).collect()
    } else {
        upstream
    };
    let mut delta_a = vec![0.0; n];
    for layer in (0..params.depth).rev() {
        let a = &pass.pre[layer];
        let mut any = false;
        for i in 0..n {
            delta_a[i] = if a[i] >= params.lambda { delta_f[i] } else { 0.0 };
            any |= delta_a[i] != 0.0;
        }
        if !any {
            break;
        }
        for (i, &d) in delta_a.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            axpy(d, y, grads.dw.row_mut(i));
            if layer > 0 {
                axpy(d, &pass.post[layer - 1], grads.ds.row_mut(i));
            }
        }
        if layer > 0 {
            // δf = Sᵀ δa
            delta_f.iter_mut().for_each(|v| *v = 0.0);
            for (i, &d) in delta_a.iter().enumerate() {
                if d != 0.0 {
                    axpy(d, params.s.row(i), &mut delta_f);
                }
            }
        }
    }
    Ok(())
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of `params` (flattened) given `grads` of the same length.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - Float::powi(self.beta1, self.t as i32);
        let c2 = 1.0 - Float::powi(self.beta2, self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (Float::sqrt(v_hat) + self.epsilon);
        }
    }
}

/// Adam state for the two weight matrices of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetOptimizer {
    w: Adam,
    s: Adam,
}

impl NetOptimizer {
    pub fn new(params: &UnfoldedNetParams, lr: f64) -> Self {
        Self {
            w: Adam::new(params.w.as_slice().len(), lr),
            s: Adam::new(params.s.as_slice().len(), lr),
        }
    }

    pub fn step(&mut self, params: &mut UnfoldedNetParams, grads: &Gradients) {
        self.w.step(params.w.as_mut_slice(), grads.dw.as_slice());
        self.s.step(params.s.as_mut_slice(), grads.ds.as_slice());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub y: Vec<f64>,
    pub target: Vec<f64>,
}

/// How a training set was synthesized.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingProvenance {
    /// Coarse-basis index sets, one per FO configuration.
    pub configs: Vec<Vec<usize>>,
    pub snr: f64,
    pub seed: u64,
    pub samples_per_combo: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub samples: Vec<TrainingSample>,
    pub provenance: TrainingProvenance,
    pub region: u32,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Fraction vectors with `parts` entries, each a multiple of 0.1 and at
/// least 0.1, summing to one. A single part gets fraction one.
pub fn fraction_compositions(parts: usize) -> Vec<Vec<f64>> {
    fn rec(parts: usize, remaining: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<f64>>) {
        if parts == 1 {
            prefix.push(remaining);
            out.push(prefix.iter().map(|&t| t as f64 / 10.0).collect());
            prefix.pop();
            return;
        }
        for first in 1..=remaining - (parts as u32 - 1) {
            prefix.push(first);
            rec(parts - 1, remaining - first, prefix, out);
            prefix.pop();
        }
    }
    if parts == 0 {
        return Vec::new();
    }
    if parts == 1 {
        return vec![vec![1.0]];
    }
    let mut out = Vec::new();
    rec(parts, 10, &mut Vec::new(), &mut out);
    out
}

/// Noise settings for synthesized training signals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSettings {
    pub snr: f64,
    pub s0: f64,
    pub baseline: BaselineMode,
}

/// For every configuration of 1–3 coarse directions and every fraction
/// composition, `samples_per_combo` Rician-noised signals whose targets are
/// the exact fraction vectors on the coarse basis.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_training_set(
    configs: &[Vec<usize>],
    basis: &DirectionSet,
    scheme: &GradientScheme,
    eigenvalues: Eigenvalues,
    noise: NoiseSettings,
    samples_per_combo: usize,
    seed: u64,
    region: u32,
) -> Result<TrainingSet> {
    if samples_per_combo == 0 {
        return Err(invalid!("need at least one sample per fraction combination"));
    }
    let mut samples = Vec::new();
    for (c, config) in configs.iter().enumerate() {
        if config.is_empty() || config.len() > 3 {
            return Err(invalid!(
                "training configurations need 1 to 3 directions (config {c} has {})",
                config.len()
            ));
        }
        if let Some(&i) = config.iter().find(|&&i| i >= basis.len()) {
            return Err(invalid!("configuration {c} references atom {i} outside the basis"));
        }
        let mut rng = voxel_rng(seed, c as u64);
        for fractions in fraction_compositions(config.len()) {
            let pairs: Vec<_> = config
                .iter()
                .zip(&fractions)
                .map(|(&i, &f)| (basis.get(i), f))
                .collect();
            let clean = synthesize_signal(&FoSet::from_pairs(&pairs)?, eigenvalues, scheme)?;
            let mut target = vec![0.0; basis.len()];
            for (&i, &f) in config.iter().zip(&fractions) {
                target[i] += f;
            }
            for _ in 0..samples_per_combo {
                let y = if noise.snr.is_infinite() {
                    clean.clone()
                } else {
                    add_rician_noise(&clean, noise.snr, noise.s0, noise.baseline, &mut rng)?
                };
                samples.push(TrainingSample {
                    y,
                    target: target.clone(),
                });
            }
        }
    }
    if samples.is_empty() {
        return Err(invalid!("no training configurations"));
    }
    Ok(TrainingSet {
        samples,
        provenance: TrainingProvenance {
            configs: configs.to_vec(),
            snr: noise.snr,
            seed,
            samples_per_combo,
        },
        region,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Summed gradients and summed loss over one chunk of samples.
#[derive(Debug, Clone)]
pub struct ChunkGradient {
    pub grads: Gradients,
    pub loss: f64,
}

pub fn chunk_gradient(params: &UnfoldedNetParams, chunk: &[&TrainingSample]) -> ChunkGradient {
    let mut grads = Gradients::zeros(params);
    let mut loss = 0.0;
    for sample in chunk {
        let pass = forward_unchecked(params, &sample.y);
        loss += sample_loss(&pass.output, &sample.target);
        backward_into(params, &sample.y, &sample.target, &pass, &mut grads)
            .expect("training samples are validated before use");
    }
    ChunkGradient { grads, loss }
}

/// Evaluates [`chunk_gradient`] over consecutive [`GRADIENT_CHUNK`]-sized
/// chunks of a batch, returning the per-chunk results in order.
pub trait BatchEvaluator {
    fn evaluate(&self, params: &UnfoldedNetParams, batch: &[&TrainingSample]) -> Vec<ChunkGradient>;
}

/// Evaluates chunks one after another.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl BatchEvaluator for Sequential {
    fn evaluate(&self, params: &UnfoldedNetParams, batch: &[&TrainingSample]) -> Vec<ChunkGradient> {
        batch
            .chunks(GRADIENT_CHUNK)
            .map(|c| chunk_gradient(params, c))
            .collect()
    }
}

/// Trained parameters with the per-epoch mean training loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: UnfoldedNetParams,
    pub loss_history: Vec<f64>,
    pub samples: usize,
    pub config: TrainConfig,
    pub region: u32,
}

pub fn train(
    dataset: &TrainingSet,
    init: UnfoldedNetParams,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    train_with(dataset, init, config, &Sequential)
}

/// Mini-batch Adam on the mean sample loss. Samples are reshuffled every
/// epoch from `config.seed`; the last partial batch is kept. The recorded
/// loss of an epoch is the mean sample loss seen during that epoch.
pub fn train_with<E: BatchEvaluator + ?Sized>(
    dataset: &TrainingSet,
    init: UnfoldedNetParams,
    config: &TrainConfig,
    evaluator: &E,
) -> Result<TrainedModel> {
    init.validate()?;
    if dataset.is_empty() {
        return Err(invalid!("training set is empty"));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(invalid!("batch size and epoch count must be positive"));
    }
    if let Some(s) = dataset
        .samples
        .iter()
        .find(|s| s.y.len() != init.k() || s.target.len() != init.n())
    {
        return Err(mismatch!(
            "sample is {}→{}, network is {}→{}",
            s.y.len(),
            s.target.len(),
            init.k(),
            init.n()
        ));
    }
    let mut params = init;
    let mut optimizer = NetOptimizer::new(&params, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut batch = Vec::with_capacity(config.batch_size);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(idx.iter().map(|&i| &dataset.samples[i]));
            let mut chunks = evaluator.evaluate(&params, &batch).into_iter();
            let first = chunks.next().expect("nonempty batch");
            let mut grads = first.grads;
            epoch_loss += first.loss;
            for c in chunks {
                grads.add_assign(&c.grads);
                epoch_loss += c.loss;
            }
            grads.scale(1.0 / batch.len() as f64);
            optimizer.step(&mut params, &grads);
        }
        history.push(epoch_loss / dataset.len() as f64);
    }
    Ok(TrainedModel {
        params,
        loss_history: history,
        samples: dataset.len(),
        config: *config,
        region: dataset.region,
    })
}

/// Trained networks keyed by region id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelStore {
    models: BTreeMap<u32, TrainedModel>,
}

impl ModelStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rejects a model whose coarse size differs from the models already
    /// stored.
    pub fn insert(&mut self, model: TrainedModel) -> Result<()> {
        if let Some(existing) = self.models.values().next() {
            if existing.params.n() != model.params.n() || existing.params.k() != model.params.k() {
                return Err(mismatch!(
                    "model for region {} is {}→{}, store holds {}→{}",
                    model.region,
                    model.params.k(),
                    model.params.n(),
                    existing.params.k(),
                    existing.params.n()
                ));
            }
        }
        self.models.insert(model.region, model);
        Ok(())
    }

    pub fn get(&self, region: u32) -> Option<&TrainedModel> {
        self.models.get(&region)
    }

    pub fn regions(&self) -> impl Iterator<Item = u32> + '_ {
        self.models.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&u32, &TrainedModel)> {
        self.models.iter()
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{dictionary_for_basis, generate_gradient_scheme, tessellate_hemisphere};
    use crate::linalg::max_abs_diff;
    use crate::solvers::{iterative_step, Threshold};
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn coarse() -> (Dictionary, DirectionSet, GradientScheme) {
        let scheme = generate_gradient_scheme(30, 1000.0, 1).unwrap();
        let basis = tessellate_hemisphere(6).unwrap();
        let g = dictionary_for_basis(&scheme, &basis, Eigenvalues::default()).unwrap();
        (g, basis, scheme)
    }

    #[test]
    fn forward_matches_thresholding_iterations() {
        let (g, _, _) = coarse();
        for params in [UnfoldedNetParams::classical(&g), UnfoldedNetParams::stable_classical(&g)] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            for _ in 0..20 {
                let y: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..1.0)).collect();
                let mut f = vec![0.0; 73];
                for _ in 0..params.depth {
                    f = iterative_step(&f, &y, &params.w, &params.s, params.lambda, Threshold::Hard).unwrap();
                }
                let norm: f64 = f.iter().map(|v| v + params.tau).sum();
                let oracle: Vec<f64> = f.iter().map(|v| (v + params.tau) / norm).collect();
                let out = forward(&params, &y).unwrap().output;
                assert!(max_abs_diff(&out, &oracle) < 1e-12);
            }
        }
    }

    #[test]
    fn zero_input_gives_uniform_output() {
        let (g, _, _) = coarse();
        let params = UnfoldedNetParams::stable_classical(&g);
        let pass = forward(&params, &[0.0; 30]).unwrap();
        assert!(pass.post.iter().all(|f| f.iter().all(|&v| v == 0.0)));
        for v in &pass.output {
            assert_abs_diff_eq!(*v, 1.0 / 73.0, epsilon = 1e-15);
        }
        assert!(forward(&params, &[0.0; 29]).is_err());
    }

    #[test]
    fn zero_loss_gives_zero_gradient() {
        let (g, _, _) = coarse();
        let params = UnfoldedNetParams::stable_classical(&g);
        let y: Vec<f64> = (0..30).map(|k| g.matrix().get(k, 12)).collect();
        let pass = forward(&params, &y).unwrap();
        let grads = backward(&params, &y, &pass.output.clone(), &pass).unwrap();
        assert!(grads.norm() < 1e-10);
    }

    #[test]
    fn backward_rejects_mismatched_activations() {
        let (g, _, _) = coarse();
        let params = UnfoldedNetParams::stable_classical(&g);
        let y = vec![0.5; 30];
        let mut pass = forward(&params, &y).unwrap();
        pass.pre.pop();
        assert!(backward(&params, &y, &[0.0; 73], &pass).is_err());
    }

    #[test]
    fn single_layer_gradient_by_hand() {
        // depth 1, λ = 0, no normalization: output = relu(Wy), so
        // dW = (2/3)(f − t)·yᵀ on rows where Wy ≥ 0 and zero elsewhere.
        let w = Matrix::from_row_major(3, 2, vec![0.5, 0.1, -0.4, -0.2, 0.3, 0.3]);
        let params = UnfoldedNetParams {
            w,
            s: Matrix::identity(3),
            lambda: 0.0,
            tau: 1e-10,
            depth: 1,
            normalize: false,
        };
        let y = [1.0, 2.0];
        let t = [0.2, 0.0, 1.0];
        let pass = forward(&params, &y).unwrap();
        let grads = backward(&params, &y, &t, &pass).unwrap();
        let f = [0.7, 0.0, 0.9];
        let expected = Matrix::from_fn(3, 2, |r, c| if r == 1 { 0.0 } else { 2.0 / 3.0 * (f[r] - t[r]) * y[c] });
        assert!(grads.dw.max_abs_diff(&expected) < 1e-12);
        assert!(grads.ds.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_first_step_is_lr_sign() {
        let mut adam = Adam::new(3, 1e-3);
        let mut p = [0.0, 1.0, -1.0];
        adam.step(&mut p, &[0.5, -2.0, 0.0]);
        assert_abs_diff_eq!(p[0], -1e-3, epsilon = 1e-10);
        assert_abs_diff_eq!(p[1], 1.0 + 1e-3, epsilon = 1e-10);
        assert_eq!(p[2], -1.0);
        adam.step(&mut p, &[0.5, -2.0, 0.0]);
        // Constant gradient: m̂ = g and v̂ = g² again, a second lr·sign step.
        assert_abs_diff_eq!(p[0], -2e-3, epsilon = 1e-10);
        assert_abs_diff_eq!(p[1], 1.0 + 2e-3, epsilon = 1e-10);
    }

    #[test]
    fn compositions() {
        assert_eq!(fraction_compositions(1), vec![vec![1.0]]);
        assert_eq!(fraction_compositions(2).len(), 9);
        let three = fraction_compositions(3);
        assert_eq!(three.len(), 36);
        assert!(three.iter().any(|c| c == &vec![0.2, 0.4, 0.4]));
        for c in three {
            assert_abs_diff_eq!(c.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert!(c.iter().all(|&f| f >= 0.1 - 1e-12));
        }
    }

    #[test]
    fn training_set_synthesis() {
        let (_, basis, scheme) = coarse();
        let noise = NoiseSettings { snr: 20.0, s0: 1.0, baseline: BaselineMode::Clean };
        let set = synthesize_training_set(
            &[vec![3], vec![5, 40], vec![1, 2, 60]],
            &basis,
            &scheme,
            Eigenvalues::default(),
            noise,
            4,
            9,
            1,
        )
        .unwrap();
        assert_eq!(set.len(), (1 + 9 + 36) * 4);
        for s in &set.samples {
            assert_abs_diff_eq!(s.target.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert!(s.target.iter().filter(|&&t| t > 0.0).count() <= 3);
        }
        let bad = synthesize_training_set(&[vec![1, 2, 3, 4]], &basis, &scheme, Eigenvalues::default(), noise, 4, 9, 1);
        assert!(bad.is_err());
    }

    #[test]
    fn training_is_deterministic_and_overfits() {
        let (g, basis, scheme) = coarse();
        let noise = NoiseSettings { snr: f64::INFINITY, s0: 1.0, baseline: BaselineMode::Clean };
        let set = synthesize_training_set(&[vec![20, 50]], &basis, &scheme, Eigenvalues::default(), noise, 1, 0, 1).unwrap();
        let one = TrainingSet {
            samples: vec![set.samples[4].clone(); 256],
            ..set
        };
        let cfg = TrainConfig { seed: 5, ..Default::default() };
        let a = train(&one, UnfoldedNetParams::stable_classical(&g), &cfg).unwrap();
        let b = train(&one, UnfoldedNetParams::stable_classical(&g), &cfg).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.params, b.params);
        assert_eq!(a.loss_history.len(), 8);
        assert!(*a.loss_history.last().unwrap() < 1e-4, "{:?}", a.loss_history);
    }

    #[test]
    fn model_store_checks_sizes() {
        let (g, _, _) = coarse();
        let model = |region, params| TrainedModel {
            params,
            loss_history: vec![],
            samples: 0,
            config: TrainConfig::default(),
            region,
        };
        let mut store = ModelStore::new();
        store.insert(model(1, UnfoldedNetParams::stable_classical(&g))).unwrap();
        let small = UnfoldedNetParams {
            w: Matrix::zeros(3, 30),
            s: Matrix::zeros(3, 3),
            ..UnfoldedNetParams::stable_classical(&g)
        };
        assert!(store.insert(model(2, small)).is_err());
        assert_eq!(store.regions().collect::<Vec<_>>(), vec![1]);
    }
}
