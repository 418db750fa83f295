//! On-disk formats: gradient tables, raw volumes with JSON sidecars, FO
//! volumes as text records, network model files and loss curves.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use fordn_core::geometry::{Direction, DirectionSet, Gradient, GradientScheme};
use fordn_core::linalg::Matrix;
use fordn_core::network::{TrainConfig, TrainedModel, UnfoldedNetParams};
use fordn_core::pipeline::{FoVolume, Method};
use fordn_core::signal::{FiberOrientation, FoSet};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Tolerance on the norm of directions read from text files.
pub const UNIT_TOL: f64 = 1e-6;

const MODEL_MAGIC: &[u8; 8] = b"FORDNMDL";

/// Path of the JSON sidecar that accompanies `path`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::format(path, format!("invalid JSON sidecar: {e}")))
}

/// Where an output came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// What the file holds (`signals`, `truth`, `labels`, `cfari`, ...).
    pub kind: String,
    pub config_hash: String,
    pub version: String,
    /// Free-form parameters relevant to this output.
    #[serde(default)]
    pub parameters: serde_json::Map<String, serde_json::Value>,
}

impl Provenance {
    pub fn new(kind: impl Into<String>, config_hash: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            config_hash: config_hash.into(),
            version: VERSION.to_string(),
            parameters: serde_json::Map::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Serialize) -> Self {
        self.parameters
            .insert(key.to_string(), serde_json::to_value(value).expect("serializable"));
        self
    }
}

// ---------------------------------------------------------------------------
// gradient tables

pub fn format_gradient_table(scheme: &GradientScheme) -> String {
    let mut out = String::from("# gx gy gz b\n");
    for g in scheme.iter() {
        let [x, y, z] = g.direction.as_array();
        writeln!(out, "{x} {y} {z} {}", g.b).unwrap();
    }
    out
}

pub fn write_gradient_table(path: &Path, scheme: &GradientScheme) -> Result<()> {
    write_file(path, format_gradient_table(scheme).as_bytes())
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_floats(path: &Path, line_no: usize, line: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| CliError::format(path, format!("line {line_no}: '{t}' is not a number")))
        })
        .collect()
}

pub fn parse_gradient_table(path: &Path, text: &str) -> Result<GradientScheme> {
    let mut gradients = Vec::new();
    for (line_no, line) in data_lines(text) {
        let v = parse_floats(path, line_no, line)?;
        if v.len() != 4 {
            return Err(CliError::format(path, format!("line {line_no}: expected 'gx gy gz b', got {} values", v.len())));
        }
        let direction = Direction::from_unit([v[0], v[1], v[2]], UNIT_TOL)
            .map_err(|e| CliError::format(path, format!("line {line_no}: {e}")))?;
        gradients.push(Gradient { direction, b: v[3] });
    }
    GradientScheme::new(gradients).map_err(|e| CliError::format(path, e.to_string()))
}

pub fn read_gradient_table(path: &Path) -> Result<GradientScheme> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_gradient_table(path, &text)
}

/// Basis directions as `dx dy dz` lines.
pub fn write_directions(path: &Path, set: &DirectionSet) -> Result<()> {
    let mut out = String::from("# dx dy dz\n");
    for d in set.iter() {
        let [x, y, z] = d.as_array();
        writeln!(out, "{x} {y} {z}").unwrap();
    }
    write_file(path, out.as_bytes())
}

pub fn read_directions(path: &Path) -> Result<DirectionSet> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut dirs = Vec::new();
    for (line_no, line) in data_lines(&text) {
        let v = parse_floats(path, line_no, line)?;
        if v.len() != 3 {
            return Err(CliError::format(path, format!("line {line_no}: expected 'dx dy dz'")));
        }
        dirs.push(
            Direction::from_unit([v[0], v[1], v[2]], UNIT_TOL)
                .map_err(|e| CliError::format(path, format!("line {line_no}: {e}")))?,
        );
    }
    DirectionSet::new(dirs).map_err(|e| CliError::format(path, e.to_string()))
}

// ---------------------------------------------------------------------------
// raw volumes

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataType {
    F32le,
    U8,
}

/// JSON sidecar of a raw volume. Channel `c` occupies a full x-fastest
/// volume at offset `c·nx·ny·nz`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 3],
    pub voxel_size_mm: f64,
    pub channels: usize,
    pub order: String,
    pub dtype: DataType,
    pub provenance: Provenance,
}

impl VolumeHeader {
    pub fn new(dims: [usize; 3], voxel_size_mm: f64, channels: usize, dtype: DataType, provenance: Provenance) -> Self {
        Self {
            dims,
            voxel_size_mm,
            channels,
            order: "x-fastest".to_string(),
            dtype,
            provenance,
        }
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Multi-channel volume held voxel-major in memory (`channels` values per
/// voxel).
#[derive(Debug, Clone, PartialEq)]
pub struct SignalVolume {
    pub header: VolumeHeader,
    pub data: Vec<f64>,
}

impl SignalVolume {
    pub fn channels(&self) -> usize {
        self.header.channels
    }
}

pub fn write_signal_volume(path: &Path, header: &VolumeHeader, voxel_major: &[f64]) -> Result<()> {
    let (n, k) = (header.voxels(), header.channels);
    if voxel_major.len() != n * k || header.dtype != DataType::F32le {
        return Err(CliError::Validation(format!(
            "signal volume needs {n}×{k} f32 values, got {}",
            voxel_major.len()
        )));
    }
    let mut bytes = Vec::with_capacity(n * k * 4);
    for c in 0..k {
        for v in 0..n {
            bytes.extend_from_slice(&(voxel_major[v * k + c] as f32).to_le_bytes());
        }
    }
    write_file(path, &bytes)?;
    write_json(&sidecar_path(path), header)
}

pub fn read_signal_volume(path: &Path) -> Result<SignalVolume> {
    let header: VolumeHeader = read_json(&sidecar_path(path))?;
    if header.dtype != DataType::F32le || header.order != "x-fastest" {
        return Err(CliError::format(path, "expected an x-fastest f32le volume"));
    }
    let bytes = read_file(path)?;
    let (n, k) = (header.voxels(), header.channels);
    if bytes.len() != n * k * 4 {
        return Err(CliError::format(
            path,
            format!("expected {} bytes for {:?}×{k}, found {}", n * k * 4, header.dims, bytes.len()),
        ));
    }
    let mut data = vec![0.0; n * k];
    for (idx, chunk) in bytes.chunks_exact(4).enumerate() {
        let (c, v) = (idx / n, idx % n);
        let value = f32::from_le_bytes(chunk.try_into().unwrap());
        if !value.is_finite() {
            return Err(CliError::format(path, format!("non-finite value at voxel {v}, channel {c}")));
        }
        data[v * k + c] = f64::from(value);
    }
    Ok(SignalVolume { header, data })
}

pub fn write_label_volume(path: &Path, header: &VolumeHeader, labels: &[u8]) -> Result<()> {
    if labels.len() != header.voxels() || header.channels != 1 || header.dtype != DataType::U8 {
        return Err(CliError::Validation(format!(
            "label volume needs {} u8 values, got {}",
            header.voxels(),
            labels.len()
        )));
    }
    write_file(path, labels)?;
    write_json(&sidecar_path(path), header)
}

pub fn read_label_volume(path: &Path) -> Result<(VolumeHeader, Vec<u8>)> {
    let header: VolumeHeader = read_json(&sidecar_path(path))?;
    if header.dtype != DataType::U8 || header.channels != 1 {
        return Err(CliError::format(path, "expected a single-channel u8 volume"));
    }
    let bytes = read_file(path)?;
    if bytes.len() != header.voxels() {
        return Err(CliError::format(
            path,
            format!("expected {} bytes for {:?}, found {}", header.voxels(), header.dims, bytes.len()),
        ));
    }
    Ok((header, bytes))
}

// ---------------------------------------------------------------------------
// FO volumes

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoVolumeHeader {
    pub dims: [usize; 3],
    pub method: String,
    pub record: String,
    pub renormalization: String,
    pub provenance: Provenance,
}

pub fn format_fo_records(volume: &FoVolume) -> String {
    let [nx, ny, _] = volume.dims;
    let mut out = String::with_capacity(volume.fos.len() * 12);
    for (v, fos) in volume.fos.iter().enumerate() {
        let (i, j, k) = (v % nx, (v / nx) % ny, v / (nx * ny));
        write!(out, "{i} {j} {k} {}", fos.len()).unwrap();
        for fo in fos.iter() {
            let [x, y, z] = fo.direction.as_array();
            write!(out, " {x} {y} {z} {}", fo.fraction).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_fo_volume(path: &Path, volume: &FoVolume, provenance: Provenance) -> Result<()> {
    write_file(path, format_fo_records(volume).as_bytes())?;
    let header = FoVolumeHeader {
        dims: volume.dims,
        method: volume.method.name().to_string(),
        record: "i j k n (dx dy dz f)×n, one line per voxel, x fastest".to_string(),
        renormalization: "fractions renormalized to sum 1 after thresholding and after peak refinement".to_string(),
        provenance,
    };
    write_json(&sidecar_path(path), &header)
}

pub fn parse_fo_records(path: &Path, dims: [usize; 3], method: Method, reader: impl BufRead) -> Result<FoVolume> {
    let [nx, ny, nz] = dims;
    let total = nx * ny * nz;
    let mut fos = vec![None; total];
    for (line_no, line) in reader.lines().enumerate() {
        let line_no = line_no + 1;
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: String| CliError::format(path, format!("line {line_no}: {m}"));
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() < 4 {
            return Err(bad("expected 'i j k n ...'".into()));
        }
        let idx: Vec<usize> = tokens[..4]
            .iter()
            .map(|t| t.parse::<usize>().map_err(|_| bad(format!("'{t}' is not an index"))))
            .collect::<Result<_>>()?;
        let (i, j, k, n) = (idx[0], idx[1], idx[2], idx[3]);
        if i >= nx || j >= ny || k >= nz {
            return Err(bad(format!("voxel ({i}, {j}, {k}) outside {dims:?}")));
        }
        if tokens.len() != 4 + 4 * n {
            return Err(bad(format!("{n} FOs need {} values, found {}", 4 * n, tokens.len() - 4)));
        }
        let values: Vec<f64> = tokens[4..]
            .iter()
            .map(|t| t.parse::<f64>().map_err(|_| bad(format!("'{t}' is not a number"))))
            .collect::<Result<_>>()?;
        let set = values
            .chunks_exact(4)
            .map(|c| {
                Direction::from_unit([c[0], c[1], c[2]], UNIT_TOL)
                    .map(|direction| FiberOrientation { direction, fraction: c[3] })
            })
            .collect::<fordn_core::Result<Vec<_>>>()
            .and_then(FoSet::new)
            .map_err(|e| bad(e.to_string()))?;
        let v = i + nx * (j + ny * k);
        if fos[v].replace(set).is_some() {
            return Err(bad(format!("voxel ({i}, {j}, {k}) listed twice")));
        }
    }
    let missing = fos.iter().filter(|f| f.is_none()).count();
    if missing > 0 {
        return Err(CliError::format(path, format!("{missing} voxels have no record")));
    }
    FoVolume::new(dims, fos.into_iter().map(Option::unwrap).collect(), method).map_err(CliError::from)
}

pub fn read_fo_volume(path: &Path) -> Result<(FoVolumeHeader, FoVolume)> {
    let header: FoVolumeHeader = read_json(&sidecar_path(path))?;
    let method = Method::parse(&header.method).map_err(|e| CliError::format(path, e.to_string()))?;
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let volume = parse_fo_records(path, header.dims, method, BufReader::new(file))?;
    Ok((header, volume))
}

// ---------------------------------------------------------------------------
// models

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N_coarse")]
    pub n: usize,
    pub depth: usize,
    pub lambda: f64,
    pub tau: f64,
    pub normalize: bool,
    pub region_id: u32,
    pub training: TrainingMetadata,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub samples: usize,
    pub loss_history: Vec<f64>,
    pub initialization: String,
    pub loss: String,
    pub shuffle: String,
    pub weight_decay: f64,
}

pub fn model_path(dir: &Path, region: u32) -> PathBuf {
    dir.join(format!("model_region{region}.fordnmdl"))
}

pub fn loss_path(dir: &Path, region: u32) -> PathBuf {
    dir.join(format!("loss_region{region}.csv"))
}

pub fn encode_model(header: &ModelHeader, params: &UnfoldedNetParams) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("serializable");
    let mut out = Vec::with_capacity(16 + json.len() + 4 * (params.w.as_slice().len() + params.s.as_slice().len()));
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for &v in params.w.as_slice().iter().chain(params.s.as_slice()) {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn write_model(path: &Path, header: &ModelHeader, params: &UnfoldedNetParams) -> Result<()> {
    write_file(path, &encode_model(header, params))
}

pub fn decode_model(path: &Path, bytes: &[u8]) -> Result<(ModelHeader, TrainedModel)> {
    let bad = |m: &str| CliError::format(path, m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MODEL_MAGIC {
        return Err(bad("not a model file (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
    let header: ModelHeader =
        serde_json::from_slice(json).map_err(|e| CliError::format(path, format!("invalid model header: {e}")))?;
    let (k, n) = (header.k, header.n);
    let mut floats = bytes[16 + len..]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())));
    let expected = n * k + n * n;
    if bytes.len() - 16 - len != 4 * expected {
        return Err(bad(&format!("expected {expected} weights for K={k}, N'={n}")));
    }
    let w = Matrix::from_row_major(n, k, floats.by_ref().take(n * k).collect());
    let s = Matrix::from_row_major(n, n, floats.collect());
    let params = UnfoldedNetParams {
        w,
        s,
        lambda: header.lambda,
        tau: header.tau,
        depth: header.depth,
        normalize: header.normalize,
    };
    params.validate().map_err(|e| CliError::format(path, e.to_string()))?;
    let t = &header.training;
    let model = TrainedModel {
        params,
        loss_history: t.loss_history.clone(),
        samples: t.samples,
        config: TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            seed: t.seed,
        },
        region: header.region_id,
    };
    Ok((header, model))
}

pub fn read_model(path: &Path) -> Result<(ModelHeader, TrainedModel)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CliError::io(path, e))?;
    decode_model(path, &bytes)
}

pub fn format_loss_csv(history: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (e, l) in history.iter().enumerate() {
        writeln!(out, "{},{l}", e + 1).unwrap();
    }
    out
}

pub fn write_loss_csv(path: &Path, history: &[f64]) -> Result<()> {
    write_file(path, format_loss_csv(history).as_bytes())
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("epoch,loss") {
        return Err(CliError::format(path, "missing 'epoch,loss' header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',')
                .nth(1)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| CliError::format(path, format!("bad row '{l}'")))
        })
        .collect()
}

/// Writes text atomically enough for our purposes: create parent dirs and
/// the file.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())
}

pub fn flush_stdout() {
    let _ = std::io::stdout().flush();
}

#[cfg(test)]
mod tests {
    use super::*;
    use fordn_core::geometry::{generate_gradient_scheme, tessellate_hemisphere};

    #[test]
    fn gradient_table_round_trip() {
        let scheme = generate_gradient_scheme(30, 1000.0, 1).unwrap();
        let text = format_gradient_table(&scheme);
        assert_eq!(parse_gradient_table(Path::new("g"), &text).unwrap(), scheme);
    }

    #[test]
    fn gradient_table_errors() {
        let p = Path::new("g.txt");
        assert!(parse_gradient_table(p, "1 0 0\n").is_err());
        assert!(parse_gradient_table(p, "1 0 0.5 1000\n").is_err());
        assert!(parse_gradient_table(p, "1 0 x 1000\n").is_err());
        let ok = parse_gradient_table(p, "# comment\n1 0 0 1000\n0 0 1.0000001 1000\n").unwrap();
        assert_eq!(ok.len(), 2);
    }

    #[test]
    fn fo_records_round_trip() {
        let basis = tessellate_hemisphere(12).unwrap();
        let fos = vec![
            FoSet::empty(),
            FoSet::from_pairs(&[(basis.get(5), 0.7), (basis.get(100), 0.3)]).unwrap(),
            FoSet::from_pairs(&[(Direction::new(0.3, -0.2, 0.9).unwrap(), 1.0)]).unwrap(),
            FoSet::from_pairs(&[(basis.get(1), 1.0 / 3.0), (basis.get(2), 1.0 / 3.0), (basis.get(3), 1.0 / 3.0)]).unwrap(),
        ];
        let vol = FoVolume::new([2, 2, 1], fos, Method::Fordn).unwrap();
        let text = format_fo_records(&vol);
        assert!(text.starts_with("0 0 0 0\n1 0 0 2 "));
        let back = parse_fo_records(Path::new("x"), [2, 2, 1], Method::Fordn, text.as_bytes()).unwrap();
        assert_eq!(back, vol);
    }

    #[test]
    fn fo_records_errors() {
        let p = Path::new("x");
        assert!(parse_fo_records(p, [1, 1, 1], Method::Dn, "0 0 0 1 1 0 0\n".as_bytes()).is_err());
        assert!(parse_fo_records(p, [2, 1, 1], Method::Dn, "0 0 0 0\n".as_bytes()).is_err());
        assert!(parse_fo_records(p, [1, 1, 1], Method::Dn, "0 0 0 0\n0 0 0 0\n".as_bytes()).is_err());
        assert!(parse_fo_records(p, [1, 1, 1], Method::Dn, "0 0 0 1 2 0 0 1\n".as_bytes()).is_err());
    }

    #[test]
    fn loss_csv_round_trip() {
        let h = vec![0.5, 0.25, 0.125000001];
        let text = format_loss_csv(&h);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        write_text(&p, &text).unwrap();
        assert_eq!(read_loss_csv(&p).unwrap(), h);
    }

    #[test]
    fn model_round_trip_keeps_f32_weights() {
        use fordn_core::geometry::{dictionary_for_basis, Eigenvalues};
        let scheme = generate_gradient_scheme(12, 1000.0, 1).unwrap();
        let g = dictionary_for_basis(&scheme, &tessellate_hemisphere(3).unwrap(), Eigenvalues::default()).unwrap();
        let params = UnfoldedNetParams::scaled_classical(&g, 3.0);
        let header = ModelHeader {
            k: params.k(),
            n: params.n(),
            depth: params.depth,
            lambda: params.lambda,
            tau: params.tau,
            normalize: params.normalize,
            region_id: 2,
            training: TrainingMetadata {
                epochs: 8,
                batch_size: 64,
                learning_rate: 1e-3,
                seed: 5,
                samples: 100,
                loss_history: vec![0.5, 0.25],
                initialization: "scaled".into(),
                loss: "mse".into(),
                shuffle: "per-epoch".into(),
                weight_decay: 0.0,
            },
            provenance: Provenance::new("model", "abc").with("region", 2),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = model_path(dir.path(), 2);
        write_model(&p, &header, &params).unwrap();
        let (h, m) = read_model(&p).unwrap();
        assert_eq!(h, header);
        assert_eq!(m.region, 2);
        assert_eq!(m.loss_history, vec![0.5, 0.25]);
        assert_eq!(m.config.seed, 5);
        for (a, b) in m.params.w.as_slice().iter().chain(m.params.s.as_slice()).zip(params.w.as_slice().iter().chain(params.s.as_slice())) {
            assert_eq!(*a, f64::from(*b as f32));
        }

        let bytes = encode_model(&header, &params);
        assert!(decode_model(&p, &bytes[..bytes.len() - 4]).is_err());
        assert!(decode_model(&p, b"NOTAMODEL0000000").is_err());
        let mut wrong = header.clone();
        wrong.n += 1;
        assert!(decode_model(&p, &encode_model(&wrong, &params)).is_err());
    }
}
