//! Synthetic replicate data with known variance components, a brute-force
//! ICC oracle, and the engineered three-model study fixture.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StudentT, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::ingest::{run_label, write_long_csv, Dataset, NumericGrid, OrderingMode, ReplicateMatrix};
use crate::model::{CellStatus, MeasurementCell, MetricClass, MetricSpec, MetricValue, Registry, ValueKind};
use crate::reliability::{spearman_brown, IccKind, IccMode};
use crate::screening::ScreenOutcome;
use crate::thresholds::{
    classify_agreement_categorical, classify_agreement_continuous, classify_reliability, AgreementClass,
    ReliabilityClass, ThresholdConfig,
};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for a named stream; independent of generation order.
pub fn derive_seed(master: u64, parts: &[&str]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for b in part.bytes().chain(std::iter::once(0xff)) {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    splitmix64(master ^ splitmix64(h))
}

fn rng_for(master: u64, parts: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, parts))
}

/// Unit-variance noise shapes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum NoiseDistribution {
    #[default]
    Gaussian,
    Uniform,
    /// Student-t rescaled to unit variance; needs more than 2 degrees of freedom.
    StudentT { dof: f64 },
}

impl NoiseDistribution {
    fn validate(self) -> Result<()> {
        match self {
            NoiseDistribution::StudentT { dof } if dof.is_nan() || dof <= 2.0 => {
                Err(Error::Config(format!("Student-t noise needs dof > 2, got {dof}")))
            }
            _ => Ok(()),
        }
    }

    fn sample(self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            NoiseDistribution::Gaussian => Normal::new(0.0, 1.0).expect("unit normal").sample(rng),
            NoiseDistribution::Uniform => {
                let w = 3f64.sqrt();
                Uniform::new_inclusive(-w, w).expect("finite bounds").sample(rng)
            }
            NoiseDistribution::StudentT { dof } => {
                StudentT::new(dof).expect("validated dof").sample(rng) * ((dof - 2.0) / dof).sqrt()
            }
        }
    }
}

/// One-way random segment effect plus replication noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceSpec {
    pub sigma_b_sq: f64,
    pub sigma_e_sq: f64,
    pub mu: f64,
    pub segments: usize,
    pub runs: usize,
    pub seed: u64,
    #[serde(default)]
    pub noise: NoiseDistribution,
}

impl VarianceSpec {
    pub fn new(sigma_b_sq: f64, sigma_e_sq: f64, segments: usize, runs: usize, seed: u64) -> Self {
        VarianceSpec { sigma_b_sq, sigma_e_sq, mu: 0.0, segments, runs, seed, noise: NoiseDistribution::Gaussian }
    }

    /// Spec whose single-run ICC is `rho`, with unit total variance.
    pub fn with_icc(rho: f64, segments: usize, runs: usize, seed: u64) -> Self {
        VarianceSpec::new(rho, 1.0 - rho, segments, runs, seed)
    }

    pub fn theoretical_icc31(&self) -> f64 {
        self.sigma_b_sq / (self.sigma_b_sq + self.sigma_e_sq)
    }

    pub fn theoretical_icc3k(&self) -> f64 {
        spearman_brown(self.theoretical_icc31(), self.runs)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_b_sq >= 0.0 && self.sigma_b_sq.is_finite()) {
            return Err(Error::Config(format!("sigma_b_sq must be finite and >= 0, got {}", self.sigma_b_sq)));
        }
        if !(self.sigma_e_sq > 0.0 && self.sigma_e_sq.is_finite()) {
            return Err(Error::Config(format!("sigma_e_sq must be finite and > 0, got {}", self.sigma_e_sq)));
        }
        if !self.mu.is_finite() {
            return Err(Error::Config("mu must be finite".into()));
        }
        if self.segments < 2 || self.runs < 2 {
            return Err(Error::Config(format!(
                "need at least 2 segments and 2 runs, got {} x {}",
                self.segments, self.runs
            )));
        }
        self.noise.validate()
    }
}

/// x[s][r] = mu + b_s + e_sr with b_s ~ N(0, sigma_b_sq) and unit-shape
/// noise scaled to sigma_e_sq.
pub fn gen_continuous_grid(spec: &VarianceSpec) -> Result<NumericGrid> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (sb, se) = (spec.sigma_b_sq.sqrt(), spec.sigma_e_sq.sqrt());
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = Vec::with_capacity(spec.segments * spec.runs);
    for _ in 0..spec.segments {
        let b = spec.mu + sb * unit.sample(&mut rng);
        for _ in 0..spec.runs {
            data.push(b + se * spec.noise.sample(&mut rng));
        }
    }
    NumericGrid::new(spec.segments, spec.runs, data)
}

pub fn gen_continuous(spec: &VarianceSpec) -> Result<ReplicateMatrix> {
    Ok(ReplicateMatrix::from_numeric("sim", "x", &gen_continuous_grid(spec)?))
}

/// Latent label per segment from `base`; each replicate keeps it with
/// probability 1 - `flip_probability`, else takes one of the other labels
/// uniformly. Two labels give a binary matrix, more a categorical one.
pub fn gen_categorical(
    segments: usize,
    runs: usize,
    base: &[(String, f64)],
    flip_probability: f64,
    seed: u64,
) -> Result<ReplicateMatrix> {
    if base.len() < 2 {
        return Err(Error::Config("need at least two labels".into()));
    }
    if base.iter().any(|(_, p)| !(*p >= 0.0 && p.is_finite())) {
        return Err(Error::Config("label probabilities must be finite and >= 0".into()));
    }
    let total: f64 = base.iter().map(|(_, p)| p).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("label probabilities sum to {total}, not 1")));
    }
    if !(0.0..=1.0).contains(&flip_probability) {
        return Err(Error::Config(format!("flip probability {flip_probability} outside [0, 1]")));
    }
    if segments < 1 || runs < 2 {
        return Err(Error::Config("need at least 1 segment and 2 runs".into()));
    }
    let kind = if base.len() == 2 { ValueKind::Binary } else { ValueKind::Categorical };
    let wrap = |label: &str| match kind {
        ValueKind::Binary => MetricValue::Binary(label.to_string()),
        _ => MetricValue::Categorical(label.to_string()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(segments);
    for _ in 0..segments {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut latent = base.len() - 1;
        for (i, (_, p)) in base.iter().enumerate() {
            acc += p;
            if u < acc {
                latent = i;
                break;
            }
        }
        let row = (0..runs)
            .map(|_| {
                let label = if rng.random::<f64>() < flip_probability {
                    let other = rng.random_range(0..base.len() - 1);
                    if other >= latent { other + 1 } else { other }
                } else {
                    latent
                };
                Some(wrap(&base[label].0))
            })
            .collect();
        rows.push(row);
    }
    let levels = (kind == ValueKind::Binary).then(|| [base[0].0.clone(), base[1].0.clone()]);
    Ok(ReplicateMatrix::from_rows(
        "sim",
        "y",
        kind,
        (0..segments).map(|s| format!("s{s:04}")).collect(),
        (0..runs).map(run_label).collect(),
        rows,
    )?
    .with_binary_levels(levels))
}

/// Mean squares and ICCs computed directly from their definitions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleIcc {
    pub ms_b: f64,
    pub ms_w: f64,
    pub ms_e: f64,
    pub ms_r: f64,
    pub icc31: f64,
    pub icc3k: f64,
}

/// Reference ICC over a complete grid given as rows of equal length.
#[allow(clippy::needless_range_loop)]
pub fn oracle_icc_bruteforce(rows: &[Vec<f64>], mode: IccMode) -> Result<OracleIcc> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::InsufficientData { required: 2, found: n });
    }
    let k = rows[0].len();
    if k < 2 || rows.iter().any(|r| r.len() != k) {
        return Err(Error::InvalidInput("oracle needs a rectangular grid with k >= 2".into()));
    }
    let mut total = 0.0;
    for row in rows {
        for &x in row {
            total += x;
        }
    }
    let grand = total / (n * k) as f64;
    let mut row_mean = vec![0.0; n];
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..k {
            s += rows[i][j];
        }
        row_mean[i] = s / k as f64;
    }
    let mut col_mean = vec![0.0; k];
    for j in 0..k {
        let mut s = 0.0;
        for i in 0..n {
            s += rows[i][j];
        }
        col_mean[j] = s / n as f64;
    }
    let mut ss_total = 0.0;
    let mut ss_within = 0.0;
    for i in 0..n {
        for j in 0..k {
            ss_total += (rows[i][j] - grand) * (rows[i][j] - grand);
            ss_within += (rows[i][j] - row_mean[i]) * (rows[i][j] - row_mean[i]);
        }
    }
    let mut ss_between = 0.0;
    for i in 0..n {
        ss_between += k as f64 * (row_mean[i] - grand) * (row_mean[i] - grand);
    }
    let mut ss_runs = 0.0;
    for j in 0..k {
        ss_runs += n as f64 * (col_mean[j] - grand) * (col_mean[j] - grand);
    }
    let ss_error = (ss_total - ss_between - ss_runs).max(0.0);
    let (nf, kf) = (n as f64, k as f64);
    let ms_b = ss_between / (nf - 1.0);
    let ms_w = ss_within / (nf * (kf - 1.0));
    let ms_e = ss_error / ((nf - 1.0) * (kf - 1.0));
    let ms_r = ss_runs / (kf - 1.0);
    let err = if mode == IccMode::Within { ms_w } else { ms_e };
    if ms_b + (kf - 1.0) * err <= 0.0 || ms_b <= 0.0 {
        return Err(Error::DegenerateVariance("oracle: zero between-segment variance".into()));
    }
    Ok(OracleIcc {
        ms_b,
        ms_w,
        ms_e,
        ms_r,
        icc31: (ms_b - err) / (ms_b + (kf - 1.0) * err),
        icc3k: (ms_b - err) / ms_b,
    })
}

fn default_half_width() -> f64 {
    1.0
}

fn default_scale() -> f64 {
    1.0
}

fn default_mu() -> f64 {
    5.0
}

/// Per-model parameters of a continuous metric: x = mu + offset + scale·b_s + e.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuousModel {
    /// Target single-run ICC; 1 means noise-free.
    pub rho: f64,
    #[serde(default)]
    pub offset: f64,
    #[serde(default = "default_scale")]
    pub scale: f64,
}

/// Per-model parameters of a balanced binary metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinaryModel {
    /// Share of segments whose latent label is swapped; swaps are nested
    /// across models.
    #[serde(default)]
    pub swap: f64,
    /// Per-replicate flip probability.
    #[serde(default)]
    pub flip: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum GeneratorPlan {
    Continuous {
        #[serde(default = "default_mu")]
        mu: f64,
        models: Vec<ContinuousModel>,
    },
    Binary { models: Vec<BinaryModel> },
    /// Independent binary draws with P("1") = p in every model.
    Rare { p: f64 },
    Constant { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricPlan {
    pub metric_id: String,
    pub metric_class: MetricClass,
    #[serde(default)]
    pub pipeline: String,
    pub generator: GeneratorPlan,
    /// Models whose cells are all marked not calculated.
    #[serde(default)]
    pub absent_in: Vec<String>,
    /// Per-cell probability of a not-calculated cell.
    #[serde(default)]
    pub missing_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureManifest {
    pub models: Vec<String>,
    pub runs: usize,
    pub segments: usize,
    pub seed: u64,
    /// Segment effects are spread evenly over [-w, w].
    #[serde(default = "default_half_width")]
    pub latent_half_width: f64,
    pub metrics: Vec<MetricPlan>,
}

impl FixtureManifest {
    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("fixture manifest: {e}")))
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.metrics.is_empty() {
            return Ok(());
        }
        if self.models.len() < 2 {
            return Err(Error::Config("fixture needs at least 2 models".into()));
        }
        if self.runs < 2 || self.segments < 2 {
            return Err(Error::Config("fixture needs at least 2 runs and 2 segments".into()));
        }
        if !(self.latent_half_width > 0.0 && self.latent_half_width.is_finite()) {
            return Err(Error::Config("latent_half_width must be positive".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for m in &self.metrics {
            let id = &m.metric_id;
            if !seen.insert(id.as_str()) {
                return Err(Error::Config(format!("duplicate metric {id}")));
            }
            if let Some(bad) = m.absent_in.iter().find(|a| !self.models.contains(a)) {
                return Err(Error::Config(format!("{id}: absent_in names unknown model {bad}")));
            }
            if !(0.0..1.0).contains(&m.missing_rate) {
                return Err(Error::Config(format!("{id}: missing_rate must be in [0, 1)")));
            }
            match &m.generator {
                GeneratorPlan::Continuous { mu, models } => {
                    if models.len() != self.models.len() {
                        return Err(Error::Config(format!("{id}: one parameter set per model required")));
                    }
                    if !mu.is_finite() {
                        return Err(Error::Config(format!("{id}: mu must be finite")));
                    }
                    for p in models {
                        if !(p.rho > 0.0 && p.rho <= 1.0) || !p.offset.is_finite() || !(p.scale > 0.0 && p.scale.is_finite()) {
                            return Err(Error::Config(format!("{id}: need 0 < rho <= 1, finite offset, positive scale")));
                        }
                    }
                }
                GeneratorPlan::Binary { models } => {
                    if models.len() != self.models.len() {
                        return Err(Error::Config(format!("{id}: one parameter set per model required")));
                    }
                    for p in models {
                        if !(0.0..=1.0).contains(&p.swap) || !(0.0..0.5).contains(&p.flip) {
                            return Err(Error::Config(format!("{id}: need swap in [0, 1] and flip in [0, 0.5)")));
                        }
                    }
                }
                GeneratorPlan::Rare { p } => {
                    if !(0.0..=0.5).contains(p) {
                        return Err(Error::Config(format!("{id}: rare probability must be in [0, 0.5]")));
                    }
                }
                GeneratorPlan::Constant { value } => {
                    if !value.is_finite() {
                        return Err(Error::Config(format!("{id}: constant must be finite")));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruthReliability {
    pub model_id: String,
    pub metric_id: String,
    /// Expected screening outcome for this slice.
    pub screening: ScreenOutcome,
    pub theoretical_icc31: Option<f64>,
    pub class31: Option<ReliabilityClass>,
    pub class3k: Option<ReliabilityClass>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruthAgreement {
    pub track: IccKind,
    pub pair_label: String,
    pub metric_id: String,
    /// Predicted nMAE (continuous) or kappa (binary).
    pub predicted: f64,
    pub class: AgreementClass,
}

/// Engineered expectations, kept apart from the generated data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroundTruth {
    pub models: Vec<String>,
    pub universe: usize,
    pub reliability: Vec<TruthReliability>,
    pub rt_single: Vec<String>,
    pub rt_average: Vec<String>,
    pub agreement: Vec<TruthAgreement>,
}

impl GroundTruth {
    pub fn reliability_of(&self, model_id: &str, metric_id: &str) -> Option<&TruthReliability> {
        self.reliability.iter().find(|t| t.model_id == model_id && t.metric_id == metric_id)
    }

    pub fn rt_set(&self, track: IccKind) -> &[String] {
        match track {
            IccKind::Single => &self.rt_single,
            IccKind::Average => &self.rt_average,
        }
    }
}

pub struct Fixture {
    pub manifest: FixtureManifest,
    pub cells: Vec<MeasurementCell>,
    pub registry: Registry,
    pub truth: GroundTruth,
}

#[derive(Debug, Clone)]
pub struct FixturePaths {
    pub data: PathBuf,
    pub registry: PathBuf,
    pub truth: PathBuf,
    pub manifest: PathBuf,
}

impl Fixture {
    pub fn dataset(&self) -> Result<Dataset> {
        Dataset::from_cells(self.cells.clone(), Some(self.registry.clone()), &OrderingMode::FirstAppearance)
    }

    /// Writes data.csv, registry.json, truth.json and manifest.json.
    pub fn write_to(&self, dir: &Path) -> Result<FixturePaths> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = FixturePaths {
            data: dir.join("data.csv"),
            registry: dir.join("registry.json"),
            truth: dir.join("truth.json"),
            manifest: dir.join("manifest.json"),
        };
        let file = fs::File::create(&paths.data).map_err(|e| Error::io(&paths.data, e))?;
        write_long_csv(self.cells.iter().cloned(), std::io::BufWriter::new(file))?;
        let write = |path: &Path, text: String| fs::write(path, text + "\n").map_err(|e| Error::io(path, e));
        write(&paths.registry, self.registry.to_json_string())?;
        write(&paths.truth, serde_json::to_string_pretty(&self.truth).expect("truth serializes"))?;
        write(&paths.manifest, self.manifest.to_json_string())?;
        Ok(paths)
    }
}

/// Evenly spaced segment effects over [-w, w], shuffled per metric.
fn latent_effects(manifest: &FixtureManifest, metric_id: &str) -> Vec<f64> {
    let s = manifest.segments;
    let w = manifest.latent_half_width;
    let mut b: Vec<f64> = (0..s).map(|i| -w + 2.0 * w * (i as f64 + 0.5) / s as f64).collect();
    b.shuffle(&mut rng_for(manifest.seed, &[metric_id, "latent"]));
    b
}

fn sample_variance(xs: &[f64]) -> f64 {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

fn noise_sd(p: &ContinuousModel, var_b: f64) -> f64 {
    if p.rho >= 1.0 {
        0.0
    } else {
        (p.scale * p.scale * var_b * (1.0 - p.rho) / p.rho).sqrt()
    }
}

/// Balanced latent labels and the nested swap order, shared by all models.
struct BinaryLatent {
    labels: Vec<bool>,
    ones: Vec<usize>,
    zeros: Vec<usize>,
}

fn binary_latent(manifest: &FixtureManifest, metric_id: &str) -> BinaryLatent {
    let s = manifest.segments;
    let mut rng = rng_for(manifest.seed, &[metric_id, "latent"]);
    let mut order: Vec<usize> = (0..s).collect();
    order.shuffle(&mut rng);
    let mut labels = vec![false; s];
    for &i in &order[..s / 2] {
        labels[i] = true;
    }
    let mut ones: Vec<usize> = (0..s).filter(|&i| labels[i]).collect();
    let mut zeros: Vec<usize> = (0..s).filter(|&i| !labels[i]).collect();
    ones.shuffle(&mut rng);
    zeros.shuffle(&mut rng);
    BinaryLatent { labels, ones, zeros }
}

fn swap_count(swap: f64, segments: usize) -> usize {
    (swap * segments as f64 / 2.0).round() as usize
}

/// Generated values for one metric, indexed [model][segment][run].
type MetricValues = Vec<Vec<Vec<Option<MetricValue>>>>;

fn generate_metric(manifest: &FixtureManifest, plan: &MetricPlan) -> MetricValues {
    let (s, k) = (manifest.segments, manifest.runs);
    let id = plan.metric_id.as_str();
    let mut out = Vec::with_capacity(manifest.models.len());
    let b = latent_effects(manifest, id);
    let var_b = sample_variance(&b);
    let latent = matches!(plan.generator, GeneratorPlan::Binary { .. }).then(|| binary_latent(manifest, id));
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    for (m, model) in manifest.models.iter().enumerate() {
        let mut rng = rng_for(manifest.seed, &[id, model, "values"]);
        let mut grid: Vec<Vec<Option<MetricValue>>> = Vec::with_capacity(s);
        for (seg, &b_seg) in b.iter().enumerate() {
            let mut row = Vec::with_capacity(k);
            for _ in 0..k {
                let v = match &plan.generator {
                    GeneratorPlan::Continuous { mu, models } => {
                        let p = &models[m];
                        let sd = noise_sd(p, var_b);
                        let e = if sd > 0.0 { sd * unit.sample(&mut rng) } else { 0.0 };
                        MetricValue::Continuous(mu + p.offset + p.scale * b_seg + e)
                    }
                    GeneratorPlan::Binary { models } => {
                        let p = &models[m];
                        let flip = p.flip > 0.0 && rng.random::<f64>() < p.flip;
                        let label = model_latent_label(latent.as_ref().expect("binary latent"), p.swap, s, seg);
                        MetricValue::Binary(if label != flip { "1" } else { "0" }.into())
                    }
                    GeneratorPlan::Rare { p } => {
                        MetricValue::Binary(if rng.random::<f64>() < *p { "1" } else { "0" }.into())
                    }
                    GeneratorPlan::Constant { value } => MetricValue::Continuous(*value),
                };
                row.push(Some(v));
            }
            grid.push(row);
        }
        if plan.absent_in.contains(model) {
            grid.iter_mut().flatten().for_each(|c| *c = None);
        } else if plan.missing_rate > 0.0 {
            let mut miss = rng_for(manifest.seed, &[id, model, "missing"]);
            for cell in grid.iter_mut().flatten() {
                if miss.random::<f64>() < plan.missing_rate {
                    *cell = None;
                }
            }
        }
        out.push(grid);
    }
    out
}

fn model_latent_label(latent: &BinaryLatent, swap: f64, segments: usize, seg: usize) -> bool {
    let n = swap_count(swap, segments);
    let swapped = latent.ones[..n.min(latent.ones.len())].contains(&seg)
        || latent.zeros[..n.min(latent.zeros.len())].contains(&seg);
    latent.labels[seg] != swapped
}

/// E|N(mu, tau^2)|
fn folded_normal_mean(mu: f64, tau: f64) -> f64 {
    if tau == 0.0 {
        return mu.abs();
    }
    let z = mu / tau;
    tau * (2.0 / std::f64::consts::PI).sqrt() * (-z * z / 2.0).exp() + mu * (1.0 - erfc(z / 2f64.sqrt()))
}

const RELIABILITY_MARGIN: f64 = 0.03;
const NMAE_RELATIVE_MARGIN: f64 = 0.10;
const KAPPA_MARGIN: f64 = 0.04;

fn reliability_truth(icc: f64, cfg: &ThresholdConfig, what: &str) -> Result<ReliabilityClass> {
    if icc < 1.0 {
        for cut in [cfg.reliability_moderate, cfg.reliability_good, cfg.reliability_excellent] {
            if (icc - cut).abs() < RELIABILITY_MARGIN {
                return Err(Error::Config(format!(
                    "{what}: theoretical ICC {icc:.4} is within {RELIABILITY_MARGIN} of cutpoint {cut}"
                )));
            }
        }
    }
    classify_reliability(icc, cfg)
}

fn pair_indices(n_models: usize) -> Vec<(&'static str, usize, usize)> {
    if n_models == 3 {
        vec![("A", 0, 1), ("B", 0, 2), ("C", 1, 2)]
    } else {
        Vec::new()
    }
}

/// Builds the cells, registry and ground truth for a manifest.
pub fn gen_study_fixture(manifest: &FixtureManifest, cfg: &ThresholdConfig) -> Result<Fixture> {
    manifest.validate()?;
    let generated: Vec<MetricValues> =
        manifest.metrics.par_iter().map(|plan| generate_metric(manifest, plan)).collect();

    let runs: Vec<String> = (0..manifest.runs).map(run_label).collect();
    let segments: Vec<String> = (0..manifest.segments).map(|s| format!("seg{s:04}")).collect();
    let mut cells = Vec::with_capacity(manifest.metrics.len() * manifest.models.len() * manifest.runs * manifest.segments);
    for (m, model) in manifest.models.iter().enumerate() {
        for (r, run) in runs.iter().enumerate() {
            for (s, seg) in segments.iter().enumerate() {
                for (plan, values) in manifest.metrics.iter().zip(&generated) {
                    let value = values[m][s][r].clone();
                    let status = if value.is_some() { CellStatus::Valid } else { CellStatus::NotCalculated };
                    cells.push(MeasurementCell {
                        model_id: model.clone(),
                        run_id: run.clone(),
                        segment_id: seg.clone(),
                        metric_id: plan.metric_id.clone(),
                        value,
                        status,
                    });
                }
            }
        }
    }

    let registry = Registry::new(
        manifest
            .metrics
            .iter()
            .map(|p| {
                let pipeline = if p.pipeline.is_empty() { p.metric_class.as_str().to_string() } else { p.pipeline.clone() };
                match p.generator {
                    GeneratorPlan::Binary { .. } | GeneratorPlan::Rare { .. } => {
                        MetricSpec::new(&p.metric_id, pipeline, p.metric_class, ValueKind::Binary).with_labels(["0", "1"])
                    }
                    _ => MetricSpec::new(&p.metric_id, pipeline, p.metric_class, ValueKind::Continuous),
                }
            })
            .collect(),
    )?;

    let truth = ground_truth(manifest, &generated, cfg)?;
    Ok(Fixture { manifest: manifest.clone(), cells, registry, truth })
}

fn ground_truth(manifest: &FixtureManifest, generated: &[MetricValues], cfg: &ThresholdConfig) -> Result<GroundTruth> {
    let k = manifest.runs;
    let mut reliability = Vec::new();
    for plan in &manifest.metrics {
        for (m, model) in manifest.models.iter().enumerate() {
            let what = format!("{} / {model}", plan.metric_id);
            let absent = plan.absent_in.contains(model);
            let rho = match &plan.generator {
                _ if absent => None,
                GeneratorPlan::Continuous { models, .. } => Some(models[m].rho),
                GeneratorPlan::Binary { models } => Some((1.0 - 2.0 * models[m].flip).powi(2)),
                GeneratorPlan::Rare { .. } | GeneratorPlan::Constant { .. } => None,
            };
            let screening = match &plan.generator {
                _ if absent => ScreenOutcome::NotCalculated,
                GeneratorPlan::Rare { .. } | GeneratorPlan::Constant { .. } => ScreenOutcome::ScreenedLowVariance,
                _ => ScreenOutcome::Kept,
            };
            let (class31, class3k) = match rho {
                Some(r) => (
                    Some(reliability_truth(r, cfg, &what)?),
                    Some(reliability_truth(spearman_brown(r, k), cfg, &what)?),
                ),
                None => (None, None),
            };
            reliability.push(TruthReliability {
                model_id: model.clone(),
                metric_id: plan.metric_id.clone(),
                screening,
                theoretical_icc31: rho,
                class31,
                class3k,
            });
        }
    }

    let n_models = manifest.models.len();
    let rt = |which: IccKind| -> Vec<String> {
        if n_models != 3 {
            return Vec::new();
        }
        let mut ids: Vec<String> = manifest
            .metrics
            .iter()
            .filter(|p| {
                reliability.iter().filter(|t| t.metric_id == p.metric_id).all(|t| {
                    let c = if which == IccKind::Single { t.class31 } else { t.class3k };
                    c.is_some_and(ReliabilityClass::is_excellent_or_better)
                })
            })
            .map(|p| p.metric_id.clone())
            .collect();
        ids.sort();
        ids
    };
    let rt_single = rt(IccKind::Single);
    let rt_average = rt(IccKind::Average);

    let mut agreement = Vec::new();
    let index: HashMap<&str, usize> =
        manifest.metrics.iter().enumerate().map(|(i, p)| (p.metric_id.as_str(), i)).collect();
    for track in IccKind::BOTH {
        let set = if track == IccKind::Single { &rt_single } else { &rt_average };
        for id in set {
            let i = index[id.as_str()];
            for (label, a, b) in pair_indices(n_models) {
                let (predicted, class) = predict_agreement(manifest, &manifest.metrics[i], &generated[i], a, b, cfg)?;
                agreement.push(TruthAgreement {
                    track,
                    pair_label: label.to_string(),
                    metric_id: id.clone(),
                    predicted,
                    class,
                });
            }
        }
    }
    Ok(GroundTruth {
        models: manifest.models.clone(),
        universe: manifest.metrics.len(),
        reliability,
        rt_single,
        rt_average,
        agreement,
    })
}

fn predict_agreement(
    manifest: &FixtureManifest,
    plan: &MetricPlan,
    values: &MetricValues,
    a: usize,
    b: usize,
    cfg: &ThresholdConfig,
) -> Result<(f64, AgreementClass)> {
    let what = format!("{} models {} vs {}", plan.metric_id, manifest.models[a], manifest.models[b]);
    match &plan.generator {
        GeneratorPlan::Continuous { models, .. } => {
            let effects = latent_effects(manifest, &plan.metric_id);
            let var_b = sample_variance(&effects);
            let (pa, pb) = (&models[a], &models[b]);
            let tau = noise_sd(pa, var_b).hypot(noise_sd(pb, var_b));
            let expected_mae = effects
                .iter()
                .map(|x| folded_normal_mean(pa.offset - pb.offset + (pa.scale - pb.scale) * x, tau))
                .sum::<f64>()
                / effects.len() as f64;
            let pooled = values[a].iter().chain(&values[b]).flatten().flatten().filter_map(MetricValue::as_number);
            let (lo, hi) = pooled.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
            let nmae = expected_mae / (hi - lo);
            for cut in cfg.nmae_cutpoints {
                if (nmae - cut).abs() < NMAE_RELATIVE_MARGIN * cut {
                    return Err(Error::Config(format!("{what}: predicted nMAE {nmae:.4} too close to {cut}")));
                }
            }
            Ok((nmae, classify_agreement_continuous(nmae, cfg)?))
        }
        GeneratorPlan::Binary { models } => {
            let (pa, pb) = (&models[a], &models[b]);
            let s = manifest.segments;
            let delta = 2.0 * swap_count(pa.swap, s).abs_diff(swap_count(pb.swap, s)) as f64 / s as f64;
            let g = pa.flip * (1.0 - pb.flip) + pb.flip * (1.0 - pa.flip);
            let kappa = 1.0 - 2.0 * (delta * (1.0 - g) + (1.0 - delta) * g);
            for cut in cfg.kappa_cutpoints {
                if (kappa - cut).abs() < KAPPA_MARGIN {
                    return Err(Error::Config(format!("{what}: predicted kappa {kappa:.4} too close to {cut}")));
                }
            }
            Ok((kappa, classify_agreement_categorical(kappa, cfg)?))
        }
        _ => Err(Error::Config(format!("{what}: no agreement prediction for this generator"))),
    }
}

/// Reusable metric recipes for composing fixtures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Template {
    /// Excellent everywhere, identical offsets.
    ExcellentAgree,
    ExcellentShift,
    ExcellentSpread,
    ExcellentFar,
    /// Noise-free in every model.
    Perfect,
    /// Excellent single-run ICC with moderate agreement in every pair.
    ExcellentModerate,
    /// Good single-run ICC, excellent averaged ICC in every model.
    GoodAveraged,
    /// Excellent in two models, good in the third.
    SplitSingle,
    MixedReliability,
    Poor,
    Moderate,
    BinaryAgree,
    BinarySplit,
    BinaryPerfect,
    Constant,
    RareBinary,
    /// Excellent but not calculated in the last model.
    MissingInOne,
    /// Excellent with sporadic not-calculated cells.
    Sparse,
}

impl Template {
    /// Recipes that land in both eligibility sets.
    pub const RT_SINGLE: [Template; 10] = [
        Template::ExcellentAgree,
        Template::ExcellentShift,
        Template::ExcellentSpread,
        Template::ExcellentFar,
        Template::Perfect,
        Template::ExcellentModerate,
        Template::BinaryAgree,
        Template::BinarySplit,
        Template::BinaryPerfect,
        Template::Sparse,
    ];
    /// Recipes eligible on the averaged track only.
    pub const RT_AVERAGE_ONLY: [Template; 2] = [Template::GoodAveraged, Template::SplitSingle];
    /// Recipes outside both eligibility sets.
    pub const INELIGIBLE: [Template; 6] = [
        Template::MixedReliability,
        Template::Poor,
        Template::Moderate,
        Template::Constant,
        Template::RareBinary,
        Template::MissingInOne,
    ];

    /// Plan for three models.
    pub fn plan(self, metric_id: String, metric_class: MetricClass, models: &[String]) -> MetricPlan {
        let cont = |params: [(f64, f64, f64); 3]| GeneratorPlan::Continuous {
            mu: default_mu(),
            models: params.iter().map(|&(rho, offset, scale)| ContinuousModel { rho, offset, scale }).collect(),
        };
        let same = |rho: f64| cont([(rho, 0.0, 1.0); 3]);
        let bin = |params: [(f64, f64); 3]| GeneratorPlan::Binary {
            models: params.iter().map(|&(swap, flip)| BinaryModel { swap, flip }).collect(),
        };
        let mut absent_in = Vec::new();
        let mut missing_rate = 0.0;
        let generator = match self {
            Template::ExcellentAgree => same(0.99),
            Template::ExcellentShift => cont([(0.99, 0.0, 1.0), (0.99, 0.0, 1.0), (0.99, 0.16, 1.0)]),
            Template::ExcellentSpread => cont([(0.99, 0.0, 1.0), (0.99, 0.4, 1.0), (0.99, 1.2, 1.0)]),
            Template::ExcellentFar => cont([(0.99, 0.0, 1.0), (0.99, 1.0, 1.0), (0.99, 2.2, 1.0)]),
            Template::Perfect => cont([(1.0, 0.0, 1.0), (1.0, 0.15, 1.0), (1.0, 0.9, 1.0)]),
            Template::ExcellentModerate => same(0.93),
            Template::GoodAveraged => cont([(0.82, 0.0, 1.0), (0.82, 0.5, 1.0), (0.82, 1.6, 1.0)]),
            Template::SplitSingle => cont([(0.99, 0.0, 1.0), (0.99, 0.0, 1.0), (0.82, 0.0, 1.0)]),
            Template::MixedReliability => cont([(0.96, 0.0, 1.0), (0.82, 0.0, 1.0), (0.586, 0.0, 1.0)]),
            Template::Poor => cont([(0.05, 0.0, 1.0), (0.05, 0.0, 1.0), (0.294, 0.0, 1.0)]),
            Template::Moderate => same(0.586),
            Template::BinaryAgree => bin([(0.0, 0.005); 3]),
            Template::BinarySplit => bin([(0.0, 0.005), (0.12, 0.005), (0.36, 0.005)]),
            Template::BinaryPerfect => bin([(0.0, 0.0), (0.0, 0.0), (0.05, 0.0)]),
            Template::Constant => GeneratorPlan::Constant { value: 0.0 },
            Template::RareBinary => GeneratorPlan::Rare { p: 0.002 },
            Template::MissingInOne => {
                absent_in.push(models[2].clone());
                same(0.99)
            }
            Template::Sparse => {
                missing_rate = 0.05;
                same(0.99)
            }
        };
        MetricPlan { metric_id, metric_class, pipeline: String::new(), generator, absent_in, missing_rate }
    }
}

pub const FIXTURE_MODELS: [&str; 3] = ["alpha", "beta", "gamma"];

/// Manifest with `count` metrics per template, classes assigned round-robin.
pub fn compose_manifest(seed: u64, segments: usize, runs: usize, counts: &[(Template, usize)]) -> FixtureManifest {
    let models: Vec<String> = FIXTURE_MODELS.iter().map(|m| m.to_string()).collect();
    let mut metrics = Vec::new();
    for &(template, count) in counts {
        for _ in 0..count {
            let i = metrics.len();
            let class = MetricClass::ALL[i % MetricClass::ALL.len()];
            metrics.push(template.plan(format!("metric_{i:03}"), class, &models));
        }
    }
    FixtureManifest { models, runs, segments, seed, latent_half_width: default_half_width(), metrics }
}

/// 3 models x 4 runs x 552 segments x 50 metrics covering every template.
pub fn standard_manifest(seed: u64) -> FixtureManifest {
    let counts = [
        (Template::ExcellentAgree, 4),
        (Template::ExcellentShift, 2),
        (Template::ExcellentSpread, 2),
        (Template::ExcellentFar, 2),
        (Template::Perfect, 2),
        (Template::ExcellentModerate, 2),
        (Template::BinaryAgree, 2),
        (Template::BinarySplit, 2),
        (Template::BinaryPerfect, 2),
        (Template::Sparse, 2),
        (Template::GoodAveraged, 4),
        (Template::SplitSingle, 4),
        (Template::MixedReliability, 4),
        (Template::Poor, 4),
        (Template::Moderate, 4),
        (Template::Constant, 3),
        (Template::RareBinary, 2),
        (Template::MissingInOne, 3),
    ];
    compose_manifest(seed, 552, 4, &counts)
}

/// 213 metrics with 31 single-track and 89 averaged-track eligible metrics.
pub fn full_scale_manifest(seed: u64) -> FixtureManifest {
    let spread = |templates: &[Template], total: usize| -> Vec<(Template, usize)> {
        templates
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, total / templates.len() + usize::from(i < total % templates.len())))
            .collect()
    };
    let mut counts = spread(&Template::RT_SINGLE, 31);
    counts.extend(spread(&Template::RT_AVERAGE_ONLY, 58));
    counts.extend(spread(&Template::INELIGIBLE, 124));
    compose_manifest(seed, 552, 4, &counts)
}
