//! Synthetic corpus generation and on-disk dataset ingestion.
//!
//! A corpus is an immutable list of samples plus a registry mapping dataset
//! names to dense ids in `[0, M)`. Generation is bitwise reproducible from
//! `(spec, seed)`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::derive_seed;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown synthetic family {0:?}")]
    UnknownFamily(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    BadFractions(Vec<f64>),
    #[error("sample {0}: {1}")]
    BadSample(String, String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One multivariate series: `C` variates by `T` points.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimeSeriesSample {
    /// Row-major `C x T` values.
    pub values: Vec<Vec<f64>>,
    /// Per-variate count of real (non-padding) points.
    pub valid_len: Vec<usize>,
    pub dataset_id: usize,
    pub class_label: Option<usize>,
    pub sample_id: String,
    /// Per-time-point ground truth for anomaly streams.
    pub anomaly_labels: Option<Vec<bool>>,
}

impl TimeSeriesSample {
    pub fn n_variates(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> usize {
        self.values.first().map(|v| v.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.len() == 0 {
            return Err(DataError::BadSample(self.sample_id.clone(), "empty".into()));
        }
        for (c, row) in self.values.iter().enumerate() {
            if row.len() != self.len() {
                return Err(DataError::BadSample(
                    self.sample_id.clone(),
                    format!("variate {c} length {} != {}", row.len(), self.len()),
                ));
            }
            if !row.iter().all(|v| v.is_finite()) {
                return Err(DataError::BadSample(
                    self.sample_id.clone(),
                    format!("variate {c} has non-finite values"),
                ));
            }
        }
        if self.valid_len.len() != self.values.len() || self.valid_len.iter().any(|&l| l == 0) {
            return Err(DataError::BadSample(self.sample_id.clone(), "bad valid_len".into()));
        }
        Ok(())
    }
}

/// Dense, stable mapping of dataset names to ids in `[0, M)`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DatasetRegistry {
    names: Vec<String>,
}

impl DatasetRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str) -> usize {
        if let Some(id) = self.id_of(name) {
            return id;
        }
        self.names.push(name.to_string());
        self.names.len() - 1
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name_of(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(|s| s.as_str())
    }

    /// M, the number of datasets.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    SineMix,
    Sawtooth,
    Ar2,
    TrendSeason,
    SquarePulse,
}

impl Family {
    pub fn parse(s: &str) -> Result<Family> {
        match s {
            "sine-mix" => Ok(Family::SineMix),
            "sawtooth" => Ok(Family::Sawtooth),
            "ar2" => Ok(Family::Ar2),
            "trend-season" => Ok(Family::TrendSeason),
            "square-pulse" => Ok(Family::SquarePulse),
            other => Err(DataError::UnknownFamily(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Family::SineMix => "sine-mix",
            Family::Sawtooth => "sawtooth",
            Family::Ar2 => "ar2",
            Family::TrendSeason => "trend-season",
            Family::SquarePulse => "square-pulse",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FamilySpec {
    pub family: Family,
    pub n_variates: usize,
    pub n_points: usize,
    pub n_samples: usize,
    pub noise: f64,
    /// Fraction of anomalous points to inject (0 disables). Injected samples
    /// carry ground-truth labels.
    #[serde(default)]
    pub anomaly_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub families: Vec<FamilySpec>,
}

impl SyntheticSpec {
    /// Two-dataset corpus used throughout the test suite: sine-mix vs
    /// sawtooth, class label = family index.
    pub fn default_pretrain(n_variates: usize, n_points: usize, n_samples: usize, noise: f64) -> Self {
        SyntheticSpec {
            families: vec![
                FamilySpec {
                    family: Family::SineMix,
                    n_variates,
                    n_points,
                    n_samples,
                    noise,
                    anomaly_fraction: 0.0,
                },
                FamilySpec {
                    family: Family::Sawtooth,
                    n_variates,
                    n_points,
                    n_samples,
                    noise,
                    anomaly_fraction: 0.0,
                },
            ],
        }
    }
}

/// Immutable sample collection plus its registry.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub registry: DatasetRegistry,
    pub samples: Vec<TimeSeriesSample>,
    pub spec: Option<SyntheticSpec>,
    pub seed: u64,
}

impl Corpus {
    pub fn n_datasets(&self) -> usize {
        self.registry.len()
    }

    /// Variates from datasets other than `dataset_id`, as (sample, variate)
    /// index pairs. Used as the donor pool for variate replacement.
    pub fn foreign_variates(&self, dataset_id: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (si, s) in self.samples.iter().enumerate() {
            if s.dataset_id != dataset_id {
                for c in 0..s.n_variates() {
                    out.push((si, c));
                }
            }
        }
        out
    }
}

/// Dataset-level shape parameters, drawn once per family so every sample of
/// a dataset shares its characteristic dynamics; only phases, innovations,
/// and noise vary per sample.
#[derive(Debug, Clone)]
enum FamilyParams {
    SineMix { f1: f64, f2: f64, a2: f64 },
    Sawtooth { period: f64 },
    Ar2 { phi1: f64, phi2: f64 },
    TrendSeason { slope: f64, period: f64, amp: f64 },
    SquarePulse { period: f64, duty: f64 },
}

/// Base period, in points, shared by all periodic families. Locked to the
/// default patch length so that desk-scale pre-training runs (a few hundred
/// steps) see a stable patch-level structure they can actually learn.
pub const BASE_PERIOD: f64 = 24.0;

/// Per-series time shift, in points, applied by the periodic families.
/// Small on purpose: samples of a dataset stay recognizably aligned while
/// remaining distinct.
const PHASE_JITTER: f64 = 1.0;

fn draw_family_params(family: Family, rng: &mut ChaCha8Rng) -> FamilyParams {
    match family {
        Family::SineMix => FamilyParams::SineMix {
            f1: 1.0 / BASE_PERIOD,
            // harmonic overtone keeps the overall period at BASE_PERIOD
            f2: rng.gen_range(2..=3) as f64 / BASE_PERIOD,
            a2: rng.gen_range(0.2..0.6),
        },
        Family::Sawtooth => FamilyParams::Sawtooth { period: BASE_PERIOD },
        // phi chosen with roots inside the unit circle.
        Family::Ar2 => FamilyParams::Ar2 {
            phi1: rng.gen_range(0.3..0.7),
            phi2: rng.gen_range(-0.3..0.2),
        },
        Family::TrendSeason => FamilyParams::TrendSeason {
            slope: rng.gen_range(-0.02..0.02),
            period: BASE_PERIOD,
            amp: rng.gen_range(0.5..1.5),
        },
        Family::SquarePulse => FamilyParams::SquarePulse {
            period: BASE_PERIOD,
            duty: rng.gen_range(0.2..0.8),
        },
    }
}

fn gen_series(params: &FamilyParams, t: usize, noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = Vec::with_capacity(t);
    match *params {
        FamilyParams::SineMix { f1, f2, a2 } => {
            let shift = rng.gen_range(-PHASE_JITTER..=PHASE_JITTER);
            for i in 0..t {
                let x = i as f64 + shift;
                out.push((std::f64::consts::TAU * f1 * x).sin()
                    + a2 * (std::f64::consts::TAU * f2 * x).sin());
            }
        }
        FamilyParams::Sawtooth { period } => {
            let shift = rng.gen_range(-PHASE_JITTER..=PHASE_JITTER);
            for i in 0..t {
                let x = (i as f64 + shift) / period;
                out.push(2.0 * (x - x.floor()) - 1.0);
            }
        }
        FamilyParams::Ar2 { phi1, phi2 } => {
            let mut x1 = 0.0;
            let mut x2 = 0.0;
            for _ in 0..50 {
                let e: f64 = rng.gen_range(-1.0..1.0);
                let x = phi1 * x1 + phi2 * x2 + e;
                x2 = x1;
                x1 = x;
            }
            for _ in 0..t {
                let e: f64 = rng.gen_range(-1.0..1.0);
                let x = phi1 * x1 + phi2 * x2 + e;
                out.push(x);
                x2 = x1;
                x1 = x;
            }
        }
        FamilyParams::TrendSeason { slope, period, amp } => {
            let shift = rng.gen_range(-PHASE_JITTER..=PHASE_JITTER);
            for i in 0..t {
                let x = i as f64 + shift;
                out.push(slope * x + amp * (std::f64::consts::TAU * x / period).sin());
            }
        }
        FamilyParams::SquarePulse { period, duty } => {
            let shift = rng.gen_range(-PHASE_JITTER..=PHASE_JITTER);
            for i in 0..t {
                let x = ((i as f64 + shift) / period).rem_euclid(1.0);
                out.push(if x < duty { 1.0 } else { -1.0 });
            }
        }
    }
    if noise > 0.0 {
        for v in out.iter_mut() {
            // Box-Muller from two uniforms keeps the stream layout simple.
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            *v += noise * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
    out
}

/// Injects point spikes and level shifts into ~`fraction` of the points,
/// returning the ground-truth label vector.
fn inject_anomalies(values: &mut [Vec<f64>], fraction: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let t = values[0].len();
    let mut labels = vec![false; t];
    if fraction <= 0.0 {
        return labels;
    }
    let target = ((t as f64) * fraction).round().max(1.0) as usize;
    let sigma: f64 = {
        let flat: Vec<f64> = values.iter().flatten().copied().collect();
        let mean = flat.iter().sum::<f64>() / flat.len() as f64;
        (flat.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / flat.len() as f64).sqrt()
    };
    let mag = 10.0 * sigma.max(0.1);
    let mut placed = 0;
    while placed < target {
        if rng.gen_bool(0.5) || target - placed < 3 {
            // point spike
            let pos = rng.gen_range(0..t);
            if labels[pos] {
                continue;
            }
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            for row in values.iter_mut() {
                row[pos] += sign * mag;
            }
            labels[pos] = true;
            placed += 1;
        } else {
            // level shift segment
            let len = rng.gen_range(3..=8.min(target - placed).max(3));
            let start = rng.gen_range(0..t.saturating_sub(len).max(1));
            if labels[start..start + len].iter().any(|&l| l) {
                continue;
            }
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            for row in values.iter_mut() {
                for v in row[start..start + len].iter_mut() {
                    *v += sign * mag * 0.6;
                }
            }
            for l in labels[start..start + len].iter_mut() {
                *l = true;
            }
            placed += len;
        }
    }
    labels
}

/// Deterministic synthetic corpus: one registry dataset per family, family
/// index doubling as the class label.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec, seed: u64) -> Result<Corpus> {
    let mut registry = DatasetRegistry::new();
    let mut samples = Vec::new();
    for (fi, fam) in spec.families.iter().enumerate() {
        let dataset_id = registry.register(fam.family.name());
        let mut fam_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[fi as u64, 0xFA111]));
        let params = draw_family_params(fam.family, &mut fam_rng);
        for si in 0..fam.n_samples {
            let mut values = Vec::with_capacity(fam.n_variates);
            for c in 0..fam.n_variates {
                let s = derive_seed(seed, &[fi as u64, si as u64, c as u64]);
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                values.push(gen_series(&params, fam.n_points, fam.noise, &mut rng));
            }
            let anomaly_labels = if fam.anomaly_fraction > 0.0 {
                let s = derive_seed(seed, &[fi as u64, si as u64, 0xA40_u64]);
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                Some(inject_anomalies(&mut values, fam.anomaly_fraction, &mut rng))
            } else {
                None
            };
            samples.push(TimeSeriesSample {
                valid_len: vec![fam.n_points; fam.n_variates],
                values,
                dataset_id,
                class_label: Some(fi),
                sample_id: format!("{}-{si}", fam.family.name()),
                anomaly_labels,
            });
        }
    }
    Ok(Corpus {
        registry,
        samples,
        spec: Some(spec.clone()),
        seed,
    })
}

/// Per-variate mean/standard-deviation pairs captured at normalization time.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl NormStats {
    pub fn denormalize(&self, variate: usize, v: f64) -> f64 {
        v * self.stds[variate] + self.means[variate]
    }
}

pub const STD_FLOOR: f64 = 1e-6;

/// Per-variate z-score with population (1/n) standard deviation, floored at
/// [`STD_FLOOR`]. Only the valid prefix contributes to the statistics.
pub fn normalize_instance(sample: &TimeSeriesSample) -> (TimeSeriesSample, NormStats) {
    let mut out = sample.clone();
    let mut means = Vec::with_capacity(sample.n_variates());
    let mut stds = Vec::with_capacity(sample.n_variates());
    for (c, row) in out.values.iter_mut().enumerate() {
        let n = sample.valid_len[c].min(row.len()).max(1);
        let mean = row[..n].iter().sum::<f64>() / n as f64;
        let var = row[..n].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt().max(STD_FLOOR);
        for v in row.iter_mut() {
            *v = (*v - mean) / std;
        }
        means.push(mean);
        stds.push(std);
    }
    (out, NormStats { means, stds })
}

/// Normalizes a single variate with its own statistics (donor rule).
pub fn normalize_series(series: &[f64]) -> Vec<f64> {
    let n = series.len().max(1);
    let mean = series.iter().sum::<f64>() / n as f64;
    let var = series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt().max(STD_FLOOR);
    series.iter().map(|v| (v - mean) / std).collect()
}

#[derive(Debug, Clone, Default)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Deterministic split, stratified by class label when present.
pub fn split(corpus: &Corpus, fractions: (f64, f64, f64), seed: u64) -> Result<Split> {
    let (a, b, c) = fractions;
    if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(DataError::BadFractions(vec![a, b, c]));
    }
    // group indices by class (None = one group)
    let mut groups: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
    for (i, s) in corpus.samples.iter().enumerate() {
        groups.entry(s.class_label).or_default().push(i);
    }
    let mut out = Split::default();
    for (gi, (_, mut idxs)) in groups.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5917, gi as u64]));
        // Fisher-Yates
        for i in (1..idxs.len()).rev() {
            let j = rng.gen_range(0..=i);
            idxs.swap(i, j);
        }
        let n = idxs.len();
        let n_train = (a * n as f64).round() as usize;
        let n_val = (b * n as f64).round() as usize;
        let n_train = n_train.min(n);
        let n_val = n_val.min(n - n_train);
        out.train.extend(&idxs[..n_train]);
        out.val.extend(&idxs[n_train..n_train + n_val]);
        out.test.extend(&idxs[n_train + n_val..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone)]
pub enum CsvSchema {
    /// Columns are variates, rows are time steps. Optional label column by
    /// header name. Produces one sample per file.
    Wide { label_column: Option<String> },
    /// `id,time,variate,value` rows, one sample per id.
    Long,
}

/// Parses a CSV file into samples. Malformed rows are rejected with their
/// line numbers.
pub fn load_csv_dataset(path: &Path, schema: &CsvSchema, dataset_id: usize) -> Result<Vec<TimeSeriesSample>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| DataError::Csv(format!("{}: empty file", path.display())))?;
    let cols: Vec<&str> = header.split(',').map(|s| s.trim()).collect();
    let parse_cell = |cell: &str, line_no: usize| -> Result<f64> {
        let v: f64 = cell
            .trim()
            .parse()
            .map_err(|_| DataError::Csv(format!("{}: line {}: non-numeric cell {:?}", path.display(), line_no + 1, cell)))?;
        if !v.is_finite() {
            return Err(DataError::Csv(format!(
                "{}: line {}: non-finite cell {:?}",
                path.display(),
                line_no + 1,
                cell
            )));
        }
        Ok(v)
    };
    match schema {
        CsvSchema::Wide { label_column } => {
            let label_idx = match label_column {
                Some(name) => Some(cols.iter().position(|c| c == name).ok_or_else(|| {
                    DataError::Csv(format!("{}: missing label column {name:?}", path.display()))
                })?),
                None => None,
            };
            let value_idx: Vec<usize> = (0..cols.len()).filter(|i| Some(*i) != label_idx).collect();
            if value_idx.is_empty() {
                return Err(DataError::Csv(format!("{}: no value columns", path.display())));
            }
            let mut values: Vec<Vec<f64>> = vec![Vec::new(); value_idx.len()];
            let mut label = None;
            for (line_no, line) in lines {
                if line.trim().is_empty() {
                    continue;
                }
                let cells: Vec<&str> = line.split(',').collect();
                if cells.len() != cols.len() {
                    return Err(DataError::Csv(format!(
                        "{}: line {}: expected {} columns, found {}",
                        path.display(),
                        line_no + 1,
                        cols.len(),
                        cells.len()
                    )));
                }
                for (vi, &ci) in value_idx.iter().enumerate() {
                    values[vi].push(parse_cell(cells[ci], line_no)?);
                }
                if let Some(li) = label_idx {
                    label = Some(parse_cell(cells[li], line_no)? as usize);
                }
            }
            if values[0].is_empty() {
                return Err(DataError::Csv(format!("{}: no data rows", path.display())));
            }
            let t = values[0].len();
            Ok(vec![TimeSeriesSample {
                valid_len: vec![t; values.len()],
                values,
                dataset_id,
                class_label: label,
                sample_id: path.display().to_string(),
                anomaly_labels: None,
            }])
        }
        CsvSchema::Long => {
            let need = ["id", "time", "variate", "value"];
            let mut idx = [0usize; 4];
            for (k, name) in need.iter().enumerate() {
                idx[k] = cols.iter().position(|c| c == name).ok_or_else(|| {
                    DataError::Csv(format!("{}: missing column {name:?}", path.display()))
                })?;
            }
            let label_idx = cols.iter().position(|c| *c == "label");
            // id -> variate -> (time, value)
            let mut by_id: BTreeMap<String, BTreeMap<usize, Vec<(usize, f64)>>> = BTreeMap::new();
            let mut labels: BTreeMap<String, usize> = BTreeMap::new();
            for (line_no, line) in lines {
                if line.trim().is_empty() {
                    continue;
                }
                let cells: Vec<&str> = line.split(',').collect();
                if cells.len() != cols.len() {
                    return Err(DataError::Csv(format!(
                        "{}: line {}: expected {} columns, found {}",
                        path.display(),
                        line_no + 1,
                        cols.len(),
                        cells.len()
                    )));
                }
                let id = cells[idx[0]].trim().to_string();
                let time = parse_cell(cells[idx[1]], line_no)? as usize;
                let variate = parse_cell(cells[idx[2]], line_no)? as usize;
                let value = parse_cell(cells[idx[3]], line_no)?;
                by_id.entry(id.clone()).or_default().entry(variate).or_default().push((time, value));
                if let Some(li) = label_idx {
                    labels.insert(id, parse_cell(cells[li], line_no)? as usize);
                }
            }
            let mut out = Vec::new();
            for (id, variates) in by_id {
                let mut values = Vec::new();
                for (_, mut points) in variates {
                    points.sort_by_key(|&(t, _)| t);
                    values.push(points.into_iter().map(|(_, v)| v).collect::<Vec<f64>>());
                }
                let t = values.iter().map(|v| v.len()).max().unwrap_or(0);
                let valid_len: Vec<usize> = values.iter().map(|v| v.len()).collect();
                for row in values.iter_mut() {
                    row.resize(t, 0.0);
                }
                out.push(TimeSeriesSample {
                    values,
                    valid_len,
                    dataset_id,
                    class_label: labels.get(&id).copied(),
                    sample_id: id,
                    anomaly_labels: None,
                });
            }
            if out.is_empty() {
                return Err(DataError::Csv(format!("{}: no data rows", path.display())));
            }
            Ok(out)
        }
    }
}

/// Writes a human-readable manifest: datasets, ids, sample counts, and the
/// generation spec + seed.
pub fn write_manifest(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "# corpus manifest")?;
    writeln!(f, "seed = {}", corpus.seed)?;
    writeln!(f, "n_datasets = {}", corpus.n_datasets())?;
    writeln!(f, "n_samples = {}", corpus.samples.len())?;
    for (id, name) in corpus.registry.names().iter().enumerate() {
        let count = corpus.samples.iter().filter(|s| s.dataset_id == id).count();
        writeln!(f, "dataset {id} = {name} ({count} samples)")?;
    }
    if let Some(spec) = &corpus.spec {
        writeln!(f, "spec = {}", serde_json::to_string(spec).unwrap())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_families_gives_m2() {
        let spec = SyntheticSpec::default_pretrain(3, 96, 32, 0.05);
        let corpus = generate_synthetic_corpus(&spec, 1).unwrap();
        assert_eq!(corpus.n_datasets(), 2);
        assert_eq!(corpus.samples.len(), 64);
    }

    #[test]
    fn noiseless_sine_matches_closed_form() {
        let spec = SyntheticSpec {
            families: vec![FamilySpec {
                family: Family::SineMix,
                n_variates: 1,
                n_points: 64,
                n_samples: 1,
                noise: 0.0,
                anomaly_fraction: 0.0,
            }],
        };
        let corpus = generate_synthetic_corpus(&spec, 9).unwrap();
        // regenerate with the same derived rngs and compare
        let mut fam_rng = ChaCha8Rng::seed_from_u64(derive_seed(9, &[0, 0xFA111]));
        let params = draw_family_params(Family::SineMix, &mut fam_rng);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(9, &[0, 0, 0]));
        let expected = gen_series(&params, 64, 0.0, &mut rng);
        assert_eq!(corpus.samples[0].values[0], expected);
        // harmonic mixture repeats with the base period
        let v = &corpus.samples[0].values[0];
        for i in 0..(64 - BASE_PERIOD as usize) {
            assert!((v[i] - v[i + BASE_PERIOD as usize]).abs() < 1e-9);
        }
    }

    #[test]
    fn ar2_is_stationary() {
        let spec = SyntheticSpec {
            families: vec![FamilySpec {
                family: Family::Ar2,
                n_variates: 1,
                n_points: 20_000,
                n_samples: 4,
                noise: 0.0,
                anomaly_fraction: 0.0,
            }],
        };
        let corpus = generate_synthetic_corpus(&spec, 11).unwrap();
        for s in &corpus.samples {
            let row = &s.values[0];
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64;
            // uniform(-1,1) noise has variance 1/3; with |phi| bounded as
            // generated, the stationary variance stays well under 2.
            assert!(var.is_finite() && var < 2.0, "variance {var}");
            assert!(mean.abs() < 0.5);
        }
    }

    #[test]
    fn corpus_is_reproducible() {
        let spec = SyntheticSpec::default_pretrain(2, 48, 8, 0.1);
        let a = generate_synthetic_corpus(&spec, 42).unwrap();
        let b = generate_synthetic_corpus(&spec, 42).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.values, y.values);
        }
    }

    #[test]
    fn normalize_examples() {
        let s = TimeSeriesSample {
            values: vec![vec![5.0; 10], vec![0.0, 2.0]],
            valid_len: vec![10, 2],
            dataset_id: 0,
            class_label: None,
            sample_id: "t".into(),
            anomaly_labels: None,
        };
        // constant variate collapses to zeros under the floored std
        let s1 = TimeSeriesSample {
            values: vec![s.values[0].clone()],
            valid_len: vec![10],
            ..s.clone()
        };
        let (n1, _) = normalize_instance(&s1);
        assert!(n1.values[0].iter().all(|&v| v == 0.0));

        let s2 = TimeSeriesSample {
            values: vec![vec![0.0, 2.0]],
            valid_len: vec![2],
            ..s.clone()
        };
        let (n2, stats) = normalize_instance(&s2);
        assert_eq!(n2.values[0], vec![-1.0, 1.0]);
        assert_eq!(stats.means[0], 1.0);
        assert_eq!(stats.stds[0], 1.0);
    }

    #[test]
    fn normalize_round_trip() {
        let spec = SyntheticSpec::default_pretrain(3, 50, 4, 0.2);
        let corpus = generate_synthetic_corpus(&spec, 5).unwrap();
        for s in &corpus.samples {
            let (n, stats) = normalize_instance(s);
            for c in 0..s.n_variates() {
                for (orig, norm) in s.values[c].iter().zip(&n.values[c]) {
                    assert!((stats.denormalize(c, *norm) - orig).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn split_all_train() {
        let spec = SyntheticSpec::default_pretrain(1, 16, 8, 0.0);
        let corpus = generate_synthetic_corpus(&spec, 3).unwrap();
        let sp = split(&corpus, (1.0, 0.0, 0.0), 0).unwrap();
        assert_eq!(sp.train.len(), 16);
        assert!(sp.val.is_empty() && sp.test.is_empty());
    }

    #[test]
    fn split_stratified_balanced() {
        let spec = SyntheticSpec::default_pretrain(1, 16, 20, 0.0);
        let corpus = generate_synthetic_corpus(&spec, 3).unwrap();
        let sp = split(&corpus, (0.8, 0.1, 0.1), 7).unwrap();
        for ids in [&sp.train, &sp.val, &sp.test] {
            let c0 = ids.iter().filter(|&&i| corpus.samples[i].class_label == Some(0)).count();
            let c1 = ids.len() - c0;
            assert!((c0 as i64 - c1 as i64).abs() <= 1);
        }
        let sp2 = split(&corpus, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!(sp.train, sp2.train);
        assert_eq!(sp.val, sp2.val);
        assert_eq!(sp.test, sp2.test);
    }

    #[test]
    fn splits_are_disjoint_and_exhaustive() {
        let spec = SyntheticSpec::default_pretrain(1, 16, 13, 0.0);
        let corpus = generate_synthetic_corpus(&spec, 3).unwrap();
        let sp = split(&corpus, (0.6, 0.2, 0.2), 1).unwrap();
        let mut all: Vec<usize> = sp.train.iter().chain(&sp.val).chain(&sp.test).copied().collect();
        all.sort_unstable();
        let expect: Vec<usize> = (0..corpus.samples.len()).collect();
        assert_eq!(all, expect);
    }

    #[test]
    fn csv_wide() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wide.csv");
        let mut text = String::from("a,b,c\n");
        for i in 0..96 {
            text.push_str(&format!("{},{},{}\n", i, i * 2, i * 3));
        }
        std::fs::write(&path, text).unwrap();
        let samples = load_csv_dataset(&path, &CsvSchema::Wide { label_column: None }, 0).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].n_variates(), 3);
        assert_eq!(samples[0].len(), 96);
    }

    #[test]
    fn csv_long_two_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("long.csv");
        let mut text = String::from("id,time,variate,value\n");
        for id in ["s1", "s2"] {
            for t in 0..4 {
                text.push_str(&format!("{id},{t},0,{}\n", t as f64 * 0.5));
            }
        }
        std::fs::write(&path, text).unwrap();
        let samples = load_csv_dataset(&path, &CsvSchema::Long, 0).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].len(), 4);
    }

    #[test]
    fn csv_nan_rejected_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "a,b\n1,2\nNaN,4\n").unwrap();
        let err = load_csv_dataset(&path, &CsvSchema::Wide { label_column: None }, 0).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn anomaly_injection_labels_match() {
        let spec = SyntheticSpec {
            families: vec![FamilySpec {
                family: Family::SineMix,
                n_variates: 1,
                n_points: 500,
                n_samples: 3,
                noise: 0.05,
                anomaly_fraction: 0.02,
            }],
        };
        let corpus = generate_synthetic_corpus(&spec, 17).unwrap();
        for s in &corpus.samples {
            let labels = s.anomaly_labels.as_ref().unwrap();
            let count = labels.iter().filter(|&&l| l).count();
            assert!(count >= 5 && count <= 30, "count {count}");
        }
    }

    #[test]
    fn registry_bijection() {
        let mut r = DatasetRegistry::new();
        let a = r.register("x");
        let b = r.register("y");
        assert_eq!((a, b), (0, 1));
        assert_eq!(r.register("x"), 0);
        assert_eq!(r.len(), 2);
        assert_eq!(r.id_of("y"), Some(1));
        assert_eq!(r.name_of(0), Some("x"));
    }
}
