//! The experiment stages: phantom synthesis, network training, FO
//! estimation and evaluation, plus the baseline β search.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fordn_core::eval::{compare_region, summarize, voxel_errors, ErrorSummary, EvalRegion, ERROR_METRIC};
use fordn_core::geometry::{dictionary_for_basis, generate_gradient_scheme, tessellate_hemisphere, Dictionary, DirectionSet, GradientScheme};
use fordn_core::network::{synthesize_training_set, train_with, ModelStore, NoiseSettings, UnfoldedNetParams};
use fordn_core::pipeline::{
    training_configurations, Baseline, BaselineEstimator, CoarseEstimator, FordnEstimator, FoVolume, Method,
};
use fordn_core::signal::{build_crossing_phantom, AcquisitionSettings, Census, PhantomSpec, PhantomVolume, RegionLabel};
use log::{info, warn};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::io::{
    self, loss_path, model_path, DataType, ModelHeader, Provenance, SignalVolume, TrainingMetadata, VolumeHeader,
};
use crate::parallel;
use crate::report::{emit_report, ErrorRow, Report, StatsRow};

/// Largest number of FOs per voxel taken from the baseline when building
/// training configurations.
pub const TRAINING_MAX_FOS: usize = 3;

/// Added to the phantom noise seed for the validation phantom of the β
/// search, so tuning never sees the evaluation noise.
pub const VALIDATION_SEED_OFFSET: u64 = 1_000_003;

/// File names written by `phantom`.
pub mod files {
    pub const SIGNALS: &str = "signals.f32";
    pub const TRUTH: &str = "truth.fos";
    pub const LABELS: &str = "labels.u8";
    pub const REGIONS: &str = "regions.u8";
    pub const GRADIENTS: &str = "gradients.txt";
    pub const CONFIG: &str = "config.toml";
}

/// Resolved configuration plus the worker pool size.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: ExperimentConfig,
    pub jobs: usize,
}

impl Context {
    pub fn new(config: ExperimentConfig, jobs: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, jobs })
    }

    fn hash(&self) -> String {
        self.config.hash()
    }

    fn provenance(&self, kind: &str) -> Provenance {
        Provenance::new(kind, self.hash())
    }

    fn run<T: Send>(&self, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
        parallel::pool(self.jobs)?.install(f)
    }

    /// The configured gradient scheme: the table file if one is set,
    /// otherwise the generated one.
    pub fn scheme(&self) -> Result<GradientScheme> {
        let a = &self.config.acquisition;
        match &a.gradient_table {
            Some(path) => io::read_gradient_table(path),
            None => Ok(generate_gradient_scheme(a.directions, a.b_value, a.scheme_seed)?),
        }
    }

    fn scheme_or_file(&self, gradients: Option<&Path>) -> Result<GradientScheme> {
        match gradients {
            Some(p) => io::read_gradient_table(p),
            None => self.scheme(),
        }
    }

    fn basis(&self, level: u32) -> Result<DirectionSet> {
        Ok(tessellate_hemisphere(level)?)
    }

    fn dictionary(&self, scheme: &GradientScheme, basis: &DirectionSet) -> Result<Dictionary> {
        Ok(dictionary_for_basis(scheme, basis, self.config.eigenvalues())?)
    }

    fn baseline(&self, method: Method) -> Result<(Baseline, f64)> {
        let s = &self.config.solver;
        let baseline = Baseline::from_method(method, s.reweight_rounds, s.reweight_epsilon)?;
        let beta = match method {
            Method::Cfari => s.beta_cfari,
            _ => s.beta_l2l0,
        };
        Ok((baseline, beta))
    }
}

// ---------------------------------------------------------------------------
// phantom

/// Synthesizes the crossing phantom for the configured acquisition.
pub fn synthesize_phantom(ctx: &Context, noise_seed: u64) -> Result<(GradientScheme, PhantomVolume)> {
    let scheme = ctx.scheme()?;
    let a = &ctx.config.acquisition;
    let acq = AcquisitionSettings {
        eigenvalues: ctx.config.eigenvalues(),
        snr: a.snr,
        s0: a.s0,
        baseline: ctx.config.baseline_mode(),
        seed: noise_seed,
    };
    let volume = build_crossing_phantom(&PhantomSpec::five_tracts(), &scheme, &acq)?;
    Ok((scheme, volume))
}

/// Writes signals, ground truth, labels, regions, the gradient table and
/// the resolved config into `out`.
pub fn cmd_phantom(ctx: &Context, out: &Path) -> Result<Census> {
    let started = Instant::now();
    let (scheme, phantom) = synthesize_phantom(ctx, ctx.config.phantom.noise_seed)?;
    let truth = &phantom.truth;
    let a = &ctx.config.acquisition;

    let signals_prov = ctx
        .provenance("signals")
        .with("snr", a.snr)
        .with("s0", a.s0)
        .with("noise_seed", ctx.config.phantom.noise_seed)
        .with("noisy_baseline", a.noisy_baseline)
        .with("gradient_table", files::GRADIENTS);
    let header = VolumeHeader::new(truth.dims, truth.voxel_size_mm, phantom.k, DataType::F32le, signals_prov);
    io::write_signal_volume(&out.join(files::SIGNALS), &header, &phantom.signals)?;

    let labels: Vec<u8> = truth.labels.iter().map(|&l| l as u8).collect();
    let label_prov = ctx
        .provenance("labels")
        .with("values", "0 background, 1 noncrossing, 2 2-crossing, 3 3-crossing");
    let header = VolumeHeader::new(truth.dims, truth.voxel_size_mm, 1, DataType::U8, label_prov);
    io::write_label_volume(&out.join(files::LABELS), &header, &labels)?;

    // The phantom is not parcellated: all tissue is region 1.
    let regions: Vec<u8> = labels.iter().map(|&l| u8::from(l != 0)).collect();
    let region_prov = ctx.provenance("regions").with("values", "0 background, 1 tissue");
    let header = VolumeHeader::new(truth.dims, truth.voxel_size_mm, 1, DataType::U8, region_prov);
    io::write_label_volume(&out.join(files::REGIONS), &header, &regions)?;

    let truth_volume = FoVolume::new(truth.dims, truth.truth.clone(), Method::Truth)?;
    io::write_fo_volume(&out.join(files::TRUTH), &truth_volume, ctx.provenance("truth"))?;
    io::write_gradient_table(&out.join(files::GRADIENTS), &scheme)?;
    io::write_text(&out.join(files::CONFIG), &ctx.config.to_toml())?;
    info!("phantom written to {} in {:.1?}", out.display(), started.elapsed());
    Ok(truth.census)
}

pub fn format_census(c: &Census) -> String {
    format!(
        "crossing locations: {} two-crossing, {} three-crossing\nvoxels: {} noncrossing, {} 2-crossing, {} 3-crossing",
        c.pair_locations, c.triple_locations, c.noncrossing_voxels, c.two_crossing_voxels, c.three_crossing_voxels
    )
}

// ---------------------------------------------------------------------------
// loading helpers

/// Signals and region ids checked against each other and the scheme.
pub struct Inputs {
    pub signals: SignalVolume,
    pub regions: Vec<u32>,
    pub scheme: GradientScheme,
}

pub fn load_inputs(ctx: &Context, signals: &Path, regions: &Path, gradients: Option<&Path>) -> Result<Inputs> {
    let volume = io::read_signal_volume(signals)?;
    let (rh, rv) = io::read_label_volume(regions)?;
    if rh.dims != volume.header.dims {
        return Err(CliError::Validation(format!(
            "region volume {:?} does not match signal volume {:?}",
            rh.dims, volume.header.dims
        )));
    }
    let scheme = ctx.scheme_or_file(gradients)?;
    if scheme.len() != volume.channels() {
        return Err(CliError::Validation(format!(
            "gradient scheme has {} directions, signals have {} channels",
            scheme.len(),
            volume.channels()
        )));
    }
    if volume.header.provenance.config_hash != ctx.hash() {
        warn!("{} was produced under a different configuration", signals.display());
    }
    Ok(Inputs {
        signals: volume,
        regions: rv.into_iter().map(u32::from).collect(),
        scheme,
    })
}

fn present_regions(regions: &[u32]) -> BTreeSet<u32> {
    regions.iter().copied().filter(|&r| r != 0).collect()
}

/// Reads the model of every region present in `regions` from `dir`.
pub fn load_models(dir: Option<&Path>, regions: &[u32]) -> Result<ModelStore> {
    let needed = present_regions(regions);
    let dir = dir.ok_or_else(|| {
        CliError::Validation("this method needs trained networks: run `fordn train` first and pass --models DIR".into())
    })?;
    let mut store = ModelStore::new();
    for r in needed {
        let path = model_path(dir, r);
        if !path.is_file() {
            return Err(CliError::Validation(format!(
                "no trained network for region {r} ({} missing): run `fordn train` first",
                path.display()
            )));
        }
        let (_, model) = io::read_model(&path)?;
        if model.region != r {
            return Err(CliError::format(&path, format!("holds region {} instead of {r}", model.region)));
        }
        store.insert(model)?;
    }
    Ok(store)
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub region: u32,
    pub configurations: usize,
    pub samples: usize,
    pub loss_history: Vec<f64>,
    pub seconds: f64,
}

/// Per region: baseline FOs, their coarse configurations, a synthesized
/// training set and a trained network.
pub fn cmd_train(ctx: &Context, inputs: &Inputs, out: &Path) -> Result<Vec<TrainSummary>> {
    let cfg = &ctx.config;
    let coarse = ctx.basis(cfg.basis.coarse_level)?;
    let dense = ctx.basis(cfg.basis.dense_level)?;
    let coarse_dict = ctx.dictionary(&inputs.scheme, &coarse)?;
    let dense_dict = ctx.dictionary(&inputs.scheme, &dense)?;
    let (baseline, beta) = ctx.baseline(Method::Cfari)?;
    let estimator = BaselineEstimator {
        baseline,
        dictionary: &dense_dict,
        basis: &dense,
        beta,
        solver: cfg.solver_settings(),
        extraction: cfg.extraction_config(),
    };
    let regions = present_regions(&inputs.regions);
    if regions.is_empty() {
        return Err(CliError::Validation("region volume has no nonzero region".into()));
    }
    let k = inputs.signals.channels();
    let mut summaries = Vec::new();
    for region in regions {
        let started = Instant::now();
        let mask: Vec<u32> = inputs.regions.iter().map(|&r| u32::from(r == region)).collect();
        let fos = ctx.run(|| parallel::estimate_volume(&estimator, &inputs.signals.data, k, &mask))?;
        let configs = training_configurations(fos.iter(), &coarse, TRAINING_MAX_FOS);
        let seed = cfg.network.training_seed.wrapping_add(u64::from(region));
        let noise = NoiseSettings {
            snr: cfg.network.training_snr,
            s0: cfg.acquisition.s0,
            baseline: cfg.baseline_mode(),
        };
        let set = synthesize_training_set(
            &configs,
            &coarse,
            &inputs.scheme,
            cfg.eigenvalues(),
            noise,
            cfg.network.samples_per_combo,
            seed,
            region,
        )?;
        info!("region {region}: {} configurations, {} samples", configs.len(), set.len());
        let mut init = UnfoldedNetParams::scaled_classical(&coarse_dict, cfg.network.init_gain);
        init.depth = cfg.network.depth;
        init.lambda = cfg.network.lambda;
        init.tau = cfg.network.tau;
        let train_cfg = cfg.train_config(seed);
        let model = ctx.run(|| Ok(train_with(&set, init, &train_cfg, &parallel::Parallel)?))?;
        let header = ModelHeader {
            k: model.params.k(),
            n: model.params.n(),
            depth: model.params.depth,
            lambda: model.params.lambda,
            tau: model.params.tau,
            normalize: model.params.normalize,
            region_id: region,
            training: TrainingMetadata {
                epochs: train_cfg.epochs,
                batch_size: train_cfg.batch_size,
                learning_rate: train_cfg.learning_rate,
                seed,
                samples: model.samples,
                loss_history: model.loss_history.clone(),
                initialization: format!(
                    "W = {}·Gᵀ/L, S = I − GᵀG/L with L = λmax(GᵀG) of the coarse dictionary",
                    cfg.network.init_gain
                ),
                loss: "mean squared error over the N′ outputs".into(),
                shuffle: "full reshuffle every epoch (ChaCha8 seeded with the training seed), last partial batch kept".into(),
                weight_decay: 0.0,
            },
            provenance: ctx
                .provenance("model")
                .with("configurations", configs.len())
                .with("training_snr", cfg.network.training_snr),
        };
        io::write_model(&model_path(out, region), &header, &model.params)?;
        io::write_loss_csv(&loss_path(out, region), &model.loss_history)?;
        summaries.push(TrainSummary {
            region,
            configurations: configs.len(),
            samples: model.samples,
            loss_history: model.loss_history,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(summaries)
}

// ---------------------------------------------------------------------------
// estimate

/// Runs one method over every voxel.
pub fn estimate(ctx: &Context, method: Method, inputs: &Inputs, models: Option<&Path>) -> Result<FoVolume> {
    let cfg = &ctx.config;
    let dims = inputs.signals.header.dims;
    let k = inputs.signals.channels();
    let signals = &inputs.signals.data;
    let regions = &inputs.regions;
    let extraction = cfg.extraction_config();
    let fos = match method {
        Method::Cfari | Method::L2l0 => {
            let (baseline, beta) = ctx.baseline(method)?;
            let basis = ctx.basis(cfg.basis.dense_level)?;
            let dictionary = ctx.dictionary(&inputs.scheme, &basis)?;
            let est = BaselineEstimator {
                baseline,
                dictionary: &dictionary,
                basis: &basis,
                beta,
                solver: cfg.solver_settings(),
                extraction,
            };
            ctx.run(|| parallel::estimate_volume(&est, signals, k, regions))?
        }
        Method::Dn | Method::Fordn => {
            let store = load_models(models, regions)?;
            let coarse_basis = ctx.basis(cfg.basis.coarse_level)?;
            let coarse = CoarseEstimator::new(&store, &coarse_basis, extraction)?;
            if method == Method::Dn {
                ctx.run(|| parallel::estimate_volume(&coarse, signals, k, regions))?
            } else {
                let basis = ctx.basis(cfg.basis.dense_level)?;
                let dictionary = ctx.dictionary(&inputs.scheme, &basis)?;
                let est = FordnEstimator::new(coarse, &dictionary, &basis, cfg.guided_settings())?;
                ctx.run(|| parallel::estimate_volume(&est, signals, k, regions))?
            }
        }
        Method::Truth => return Err(CliError::Usage("'truth' is not an estimation method".into())),
    };
    Ok(FoVolume::new(dims, fos, method)?)
}

fn estimate_provenance(ctx: &Context, method: Method) -> Provenance {
    let cfg = &ctx.config;
    let s = &cfg.solver;
    let mut p = ctx
        .provenance(method.name())
        .with("threshold", cfg.extraction.threshold)
        .with("refine_angle_deg", cfg.extraction.refine_angle_deg)
        .with("max_iter", s.max_iter)
        .with("tol", s.tol);
    p = match method {
        Method::Cfari => p.with("beta", s.beta_cfari).with("basis_level", cfg.basis.dense_level),
        Method::L2l0 => p
            .with("beta", s.beta_l2l0)
            .with("reweight_rounds", s.reweight_rounds)
            .with("reweight_epsilon", s.reweight_epsilon)
            .with("basis_level", cfg.basis.dense_level),
        Method::Dn => p.with("lambda", cfg.network.lambda).with("basis_level", cfg.basis.coarse_level),
        Method::Fordn | Method::Truth => p
            .with("alpha", s.alpha)
            .with("beta", s.beta_fordn)
            .with("lambda", cfg.network.lambda)
            .with("basis_level", cfg.basis.dense_level),
    };
    p
}

pub fn cmd_estimate(ctx: &Context, method: Method, inputs: &Inputs, models: Option<&Path>, out: &Path) -> Result<FoVolume> {
    let started = Instant::now();
    let volume = estimate(ctx, method, inputs, models)?;
    io::write_fo_volume(out, &volume, estimate_provenance(ctx, method))?;
    info!("{} estimate written to {} in {:.1?}", method.name(), out.display(), started.elapsed());
    Ok(volume)
}

// ---------------------------------------------------------------------------
// evaluate

/// Errors per method and region, and paired statistics for every method
/// pair (earlier method in cfari, l2l0, dn, fordn order first).
pub fn build_report(truth: &FoVolume, labels: &[RegionLabel], estimates: &[FoVolume]) -> Result<Report> {
    let mut ordered: Vec<&FoVolume> = estimates.iter().collect();
    ordered.sort_by_key(|v| v.method);
    let errors: Vec<Vec<Option<f64>>> = ordered
        .iter()
        .map(|e| voxel_errors(e, truth, labels))
        .collect::<fordn_core::Result<_>>()?;
    let mut report = Report::default();
    for (e, errs) in ordered.iter().zip(&errors) {
        let summary: ErrorSummary = summarize(errs, labels);
        for (region, stats) in &summary {
            report.errors.push(ErrorRow::new(e.method.name(), *region, stats));
        }
    }
    for i in 0..ordered.len() {
        for j in i + 1..ordered.len() {
            for region in EvalRegion::ALL {
                match compare_region(&errors[i], &errors[j], labels, region) {
                    Ok(s) => report
                        .stats
                        .push(StatsRow::new(ordered[i].method.name(), ordered[j].method.name(), region, &s)),
                    Err(e) => warn!(
                        "no statistics for {} vs {} in {}: {e}",
                        ordered[i].method.name(),
                        ordered[j].method.name(),
                        region.name()
                    ),
                }
            }
        }
    }
    Ok(report)
}

pub fn cmd_evaluate(truth: &Path, labels_path: &Path, estimates: &[PathBuf], out: &Path, force: bool) -> Result<Report> {
    if estimates.is_empty() {
        return Err(CliError::Usage("evaluate needs at least one estimate file".into()));
    }
    let (truth_header, truth_volume) = io::read_fo_volume(truth)?;
    let (label_header, label_bytes) = io::read_label_volume(labels_path)?;
    if label_header.dims != truth_volume.dims {
        return Err(CliError::Validation(format!(
            "label volume {:?} does not match truth {:?}",
            label_header.dims, truth_volume.dims
        )));
    }
    let labels: Vec<RegionLabel> = label_bytes
        .iter()
        .map(|&b| RegionLabel::from_u8(b))
        .collect::<fordn_core::Result<_>>()
        .map_err(|e| CliError::format(labels_path, e.to_string()))?;
    let reference = truth_header.provenance.config_hash.clone();
    let mut mismatched = Vec::new();
    if label_header.provenance.config_hash != reference {
        mismatched.push(format!("{} (config {})", labels_path.display(), short(&label_header.provenance.config_hash)));
    }
    let mut volumes = Vec::new();
    let mut seen = BTreeSet::new();
    for path in estimates {
        let (h, v) = io::read_fo_volume(path)?;
        if v.method == Method::Truth {
            return Err(CliError::Validation(format!("{} is a ground-truth file, not an estimate", path.display())));
        }
        if v.dims != truth_volume.dims {
            return Err(CliError::Validation(format!(
                "{} has grid {:?}, truth has {:?}",
                path.display(),
                v.dims,
                truth_volume.dims
            )));
        }
        if !seen.insert(v.method) {
            return Err(CliError::Validation(format!("method {} given twice", v.method.name())));
        }
        if h.provenance.config_hash != reference {
            mismatched.push(format!("{} (config {})", path.display(), short(&h.provenance.config_hash)));
        }
        volumes.push(v);
    }
    if !mismatched.is_empty() {
        let message = format!(
            "inputs were produced under a different configuration than the truth (config {}): {}",
            short(&reference),
            mismatched.join(", ")
        );
        if !force {
            return Err(CliError::Validation(format!("{message}; pass --force to evaluate anyway")));
        }
        warn!("{message}");
    }
    let report = build_report(&truth_volume, &labels, &volumes)?;
    emit_report(out, &report)?;
    let meta = serde_json::json!({
        "metric": ERROR_METRIC,
        "config_hash": reference,
        "forced": force && !mismatched.is_empty(),
        "methods": volumes.iter().map(|v| v.method.name()).collect::<Vec<_>>(),
        "cohens_d": "positive when the first method of the pair has the larger errors",
        "version": io::VERSION,
    });
    io::write_text(&out.join("report.json"), &(serde_json::to_string_pretty(&meta).expect("json") + "\n"))?;
    Ok(report)
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

pub fn format_report(report: &Report) -> String {
    let mut out = String::from("method   region        mean     std      n\n");
    for r in &report.errors {
        out.push_str(&format!("{:<8} {:<12} {:>7.3} {:>7.3} {:>6}\n", r.method, r.region.name(), r.mean, r.std, r.n));
    }
    if !report.stats.is_empty() {
        out.push_str("\npair             region             t          p        d\n");
        for s in &report.stats {
            out.push_str(&format!("{:<16} {:<12} {:>9.3} {:>10.3e} {:>8.3}\n", s.pair(), s.region.name(), s.t, s.p, s.d));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// baseline β search

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    pub beta: f64,
    pub summary: ErrorSummary,
}

/// Mean baseline error for each β on a validation phantom that shares the
/// geometry but not the noise of the evaluation phantom. Every `stride`-th
/// tissue voxel is used.
pub fn tune_beta(ctx: &Context, method: Method, betas: &[f64], stride: usize) -> Result<Vec<TuneResult>> {
    if betas.is_empty() || stride == 0 {
        return Err(CliError::Usage("need at least one β and a positive stride".into()));
    }
    let seed = ctx.config.phantom.noise_seed.wrapping_add(VALIDATION_SEED_OFFSET);
    let (scheme, phantom) = synthesize_phantom(ctx, seed)?;
    let labels: Vec<RegionLabel> = phantom
        .truth
        .labels
        .iter()
        .enumerate()
        .map(|(v, &l)| if v % stride == 0 { l } else { RegionLabel::Background })
        .collect();
    let regions: Vec<u32> = labels.iter().map(|&l| u32::from(l != RegionLabel::Background)).collect();
    let truth = FoVolume::new(phantom.truth.dims, phantom.truth.truth.clone(), Method::Truth)?;
    let basis = ctx.basis(ctx.config.basis.dense_level)?;
    let dictionary = ctx.dictionary(&scheme, &basis)?;
    let (baseline, _) = ctx.baseline(method)?;
    let mut out = Vec::new();
    for &beta in betas {
        let est = BaselineEstimator {
            baseline,
            dictionary: &dictionary,
            basis: &basis,
            beta,
            solver: ctx.config.solver_settings(),
            extraction: ctx.config.extraction_config(),
        };
        let fos = ctx.run(|| parallel::estimate_volume(&est, &phantom.signals, phantom.k, &regions))?;
        let volume = FoVolume::new(phantom.truth.dims, fos, method)?;
        let summary = summarize(&voxel_errors(&volume, &truth, &labels)?, &labels);
        info!("{} β={beta}: mean error {:.3}", method.name(), summary[&EvalRegion::All].mean);
        out.push(TuneResult { beta, summary });
    }
    Ok(out)
}

/// The β with the lowest overall mean error (first on ties).
pub fn best_beta(results: &[TuneResult]) -> Option<f64> {
    results
        .iter()
        .min_by(|a, b| a.summary[&EvalRegion::All].mean.total_cmp(&b.summary[&EvalRegion::All].mean))
        .map(|r| r.beta)
}
