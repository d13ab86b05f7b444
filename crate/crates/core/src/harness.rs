//! Experiment orchestration: replicate loops over settings and basis
//! dimensions, the training grid, baseline runs, cube search, aggregation and
//! the plain-text/CSV reports.
//!
//! Layout under `output_dir`:
//!
//! ```text
//! setting{s}/m{m}/rep{r}/baseline.json
//! setting{s}/m{m}/rep{r}/{EU,FA,LA}/scores.csv
//! setting{s}/m{m}/rep{r}/{EU,FA,LA}/cube_log.jsonl
//! setting{s}/m{m}/rep{r}/complete.json      written last; marks the replicate done
//! setting{s}/m{m}/{EU,FA,LA}_subregion.json
//! setting{s}_m{m}_results.csv
//! setting{s}_m{m}_subregions.csv
//! tables.txt
//! ```
//!
//! Settings are numbered from 1 in paths, reports and errors; the `setting`
//! arguments of the functions below are 0-based indices into
//! [`ExperimentConfig::settings`].

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{augment_design, eigen_basis, BasisSet};
use crate::bayes_baseline::{baseline_scores, gibbs_sample, posterior_predictive, BaselinePriors, GibbsConfig};
use crate::cubing::{aggregate_subregions, cube_search, normalize_scores, CubeSearchConfig, HyperConfig, HyperGrid, Subregion};
use crate::error::{invalid, Error, Result};
use crate::io::{fmt, load_dataset_csv, TabularOptions};
use crate::mc_dropout::{crps_samples_for_variant, interval, predictive_passes, summarize, UqVariant, DEFAULT_PASSES};
use crate::nn::{train, Loss, TrainConfig};
use crate::rng::derive_seed;
use crate::scoring::{crps_in_place, score_record, BaselineJson, ScoreRecord, DEFAULT_ALPHA, DEFAULT_GAMMA};
use crate::spatial_sim::{build_cov_matrix, simulate_dataset, SimConfig, Smoothness, SpatialDataset};

/// One data-generating setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Setting {
    pub nu: Smoothness,
    pub effective_range: f64,
}

/// The four settings of the simulation study, in their conventional order.
pub fn standard_settings() -> Vec<Setting> {
    use Smoothness::{Half, ThreeHalves};
    [(Half, 0.3), (ThreeHalves, 0.3), (Half, 0.6), (ThreeHalves, 0.6)]
        .into_iter()
        .map(|(nu, effective_range)| Setting { nu, effective_range })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    EU,
    FA,
    LA,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::EU, Variant::FA, Variant::LA];

    pub fn name(self) -> &'static str {
        match self {
            Variant::EU => "EU",
            Variant::FA => "FA",
            Variant::LA => "LA",
        }
    }

    pub fn loss(self) -> Loss {
        match self {
            Variant::LA => Loss::GaussianNll,
            _ => Loss::Mse,
        }
    }

    pub fn uq(self, fa_length_scale: f64, n_train: usize) -> UqVariant {
        match self {
            Variant::EU => UqVariant::Eu,
            Variant::FA => UqVariant::Fa { length_scale: fa_length_scale, n_train },
            Variant::LA => UqVariant::La,
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "EU" => Ok(Variant::EU),
            "FA" => Ok(Variant::FA),
            "LA" => Ok(Variant::LA),
            _ => invalid(format!("unknown variant {s:?}; expected EU, FA or LA")),
        }
    }
}

/// Gibbs chain length for the baseline (seeds come from the study root).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainLength {
    pub n_iter: usize,
    pub n_burn: usize,
}

impl Default for ChainLength {
    fn default() -> Self {
        Self { n_iter: 10_000, n_burn: 1_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub settings: Vec<Setting>,
    pub basis_dims: Vec<usize>,
    pub replicates: usize,
    pub variants: Vec<Variant>,
    pub grid: HyperGrid,
    pub cube: CubeSearchConfig,
    /// Template; `nu`, `effective_range` and `seed` are set per replicate.
    pub sim: SimConfig,
    pub seed_root: u64,
    pub output_dir: PathBuf,
    /// MC dropout passes per test point.
    pub passes: usize,
    pub baseline: ChainLength,
    /// Template; dropout rate, weight decay, loss and seed are set per grid cell.
    pub train: TrainConfig,
    pub alpha: f64,
    pub gamma: f64,
    /// Prior length scale `ℓ` in the FA precision.
    pub fa_length_scale: f64,
    /// Per-replicate ranking depth counted by the subregion aggregation.
    pub top_n: usize,
    /// Number of cubes kept in a subregion.
    pub keep: usize,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            settings: standard_settings(),
            basis_dims: vec![25, 135],
            replicates: 5,
            variants: Variant::ALL.to_vec(),
            grid: HyperGrid::default(),
            cube: CubeSearchConfig::default(),
            sim: SimConfig::default(),
            seed_root: 20_240_601,
            output_dir: PathBuf::from("results"),
            passes: DEFAULT_PASSES,
            baseline: ChainLength::default(),
            train: TrainConfig::default(),
            alpha: DEFAULT_ALPHA,
            gamma: DEFAULT_GAMMA,
            fa_length_scale: 1.0,
            top_n: 10,
            keep: 5,
            workers: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.settings.is_empty() || self.basis_dims.is_empty() || self.variants.is_empty() {
            return invalid("settings, basis_dims and variants must be non-empty");
        }
        if self.replicates == 0 {
            return invalid("replicates must be at least 1");
        }
        if let Some(&m) = self.basis_dims.iter().find(|&&m| m == 0 || m >= self.sim.n_total) {
            return invalid(format!("basis dimension {m} must lie in 1..{}", self.sim.n_total));
        }
        let mut v = self.variants.clone();
        v.sort();
        v.dedup();
        if v.len() != self.variants.len() {
            return invalid("variants must be distinct");
        }
        for s in &self.settings {
            if !(s.effective_range > 0.0) {
                return invalid("effective ranges must be positive");
            }
        }
        self.grid.validate()?;
        self.cube.validate()?;
        self.sim.validate()?;
        self.train.validate()?;
        if self.passes < 2 {
            return invalid("passes must be at least 2");
        }
        if self.baseline.n_burn >= self.baseline.n_iter {
            return invalid("baseline burn-in must be shorter than the chain");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) || !(self.gamma > 0.0) {
            return invalid("need 0 < alpha < 1 and gamma > 0");
        }
        if !(self.fa_length_scale > 0.0) || self.top_n == 0 || self.keep == 0 {
            return invalid("fa_length_scale, top_n and keep must be positive");
        }
        if self.grid.dropout.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return invalid("grid dropout rates must lie in (0,1)");
        }
        if self.grid.k.iter().any(|&k| !(k > 0.0)) {
            return invalid("grid multipliers must be positive");
        }
        Ok(())
    }

    fn setting(&self, setting: usize) -> Result<Setting> {
        self.settings.get(setting).copied().ok_or(Error::IndexOutOfRange { index: setting, len: self.settings.len() })
    }

    /// Simulation config for one replicate. The dataset does not depend on
    /// `m`, so every basis dimension is evaluated on the same data.
    pub fn sim_for(&self, setting: usize, replicate: usize) -> Result<SimConfig> {
        let s = self.setting(setting)?;
        Ok(SimConfig {
            nu: s.nu,
            effective_range: s.effective_range,
            seed: derive_seed(self.seed_root, &[1, setting as u64, replicate as u64]),
            ..self.sim.clone()
        })
    }

    /// Root of every model-side stream for one `(setting, m, replicate)`.
    pub fn model_seed(&self, setting: usize, m: usize, replicate: usize) -> u64 {
        derive_seed(self.seed_root, &[2, setting as u64, m as u64, replicate as u64])
    }

    pub fn replicate_dir(&self, setting: usize, m: usize, replicate: usize) -> PathBuf {
        self.m_dir(setting, m).join(format!("rep{replicate}"))
    }

    pub fn m_dir(&self, setting: usize, m: usize) -> PathBuf {
        self.output_dir.join(format!("setting{}", setting + 1)).join(format!("m{m}"))
    }

    fn max_m(&self) -> usize {
        self.basis_dims.iter().copied().max().unwrap_or(1)
    }
}

/// A simulated dataset with its basis at the largest configured dimension.
#[derive(Debug, Clone)]
pub struct ReplicateData {
    pub dataset: SpatialDataset<f64>,
    pub basis: BasisSet<f64>,
}

/// Simulates the replicate's dataset and eigendecomposes its covariance once.
pub fn prepare_replicate(cfg: &ExperimentConfig, setting: usize, replicate: usize) -> Result<ReplicateData> {
    let sim = cfg.sim_for(setting, replicate)?;
    let dataset = simulate_dataset::<f64>(&sim)?;
    let cov = build_cov_matrix(dataset.locations.view(), &sim.matern()?)?;
    let basis = eigen_basis(cov.view(), cfg.max_m())?;
    Ok(ReplicateData { dataset, basis })
}

/// Augmented design `[X, Φ_m]` split into train and test rows.
#[derive(Debug, Clone)]
pub struct Design {
    pub x_train: Array2<f64>,
    pub z_train: Array1<f64>,
    pub x_test: Array2<f64>,
    pub z_test: Array1<f64>,
}

impl Design {
    pub fn new(data: &ReplicateData, m: usize) -> Result<Self> {
        let phi = data.basis.truncate(m)?.phi;
        let xa = augment_design(data.dataset.x.view(), phi.view())?;
        let ds = &data.dataset;
        Ok(Self {
            x_train: xa.select(Axis(0), &ds.split.train),
            z_train: ds.train_z(),
            x_test: xa.select(Axis(0), &ds.split.test),
            z_test: ds.test_z(),
        })
    }
}

/// Baseline scores for one design, with chain and predictive seeds derived
/// from `model_seed`.
pub fn run_baseline(cfg: &ExperimentConfig, design: &Design, model_seed: u64) -> Result<ScoreRecord> {
    let priors = BaselinePriors::standard(design.x_train.ncols(), design.z_train.var(0.0));
    let chain = GibbsConfig {
        n_iter: cfg.baseline.n_iter,
        n_burn: cfg.baseline.n_burn,
        seed: derive_seed(model_seed, &[0]),
        tau2_init: None,
    };
    let draws = gibbs_sample(design.x_train.view(), design.z_train.view(), &priors, &chain)?;
    let pred = posterior_predictive(&draws, design.x_test.view(), derive_seed(model_seed, &[1]))?;
    baseline_scores(pred.view(), design.z_test.view(), cfg.alpha, cfg.gamma)
}

/// Trains one network per `(λ, p)` cell and loss head needed by `variants`
/// and scores every `(λ, p, k)` point. Network seeds depend on the cell's
/// values rather than its position, so a sub-grid reproduces the matching
/// entries of the full grid. Returns one vector per variant in
/// [`HyperGrid::index`] order.
pub fn evaluate_grid(
    cfg: &ExperimentConfig,
    design: &Design,
    model_seed: u64,
    variants: &[Variant],
    grid: &HyperGrid,
) -> Result<Vec<Vec<ScoreRecord>>> {
    grid.validate()?;
    let lambdas = grid.lambda_values();
    let cells: Vec<(usize, usize)> =
        (0..lambdas.len()).flat_map(|i| (0..grid.dropout.len()).map(move |j| (i, j))).collect();
    let y_test = design.z_test.to_vec();
    let n_train = design.x_train.nrows();

    let per_cell: Vec<Vec<Vec<ScoreRecord>>> = cells
        .par_iter()
        .map(|&(i, j)| -> Result<Vec<Vec<ScoreRecord>>> {
            let (lambda, p) = (lambdas[i], grid.dropout[j]);
            let mut out = vec![Vec::new(); variants.len()];
            for loss in [Loss::Mse, Loss::GaussianNll] {
                let users: Vec<usize> = (0..variants.len()).filter(|&v| variants[v].loss() == loss).collect();
                if users.is_empty() {
                    continue;
                }
                let seed = derive_seed(model_seed, &[3, loss as u64, lambda.to_bits(), p.to_bits()]);
                let tc = TrainConfig { dropout_rate: p, weight_decay: lambda, loss, seed, ..cfg.train.clone() };
                let net = train(design.x_train.view(), design.z_train.view(), &tc)?;
                let mc_seed = derive_seed(seed, &[1]);
                let passes = predictive_passes(&net, design.x_test.view(), cfg.passes, p, mc_seed)?;
                for v in users {
                    let uq = variants[v].uq(cfg.fa_length_scale, n_train);
                    let summary = summarize(&passes, &uq, lambda)?;
                    let mut samples = crps_samples_for_variant(&passes, &uq, mc_seed)?;
                    let mut crps = 0.0;
                    for (mut row, &y) in samples.rows_mut().into_iter().zip(&y_test) {
                        crps += crps_in_place(row.as_slice_mut().expect("standard layout"), y)?;
                    }
                    crps /= y_test.len().max(1) as f64;
                    let point = summary.mean.to_vec();
                    for &k in &grid.k {
                        let iv = interval(&summary, k)?;
                        out[v].push(score_record(&iv, &point, &y_test, crps, cfg.alpha, cfg.gamma)?);
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let mut result = vec![Vec::with_capacity(grid.len()); variants.len()];
    for cell in per_cell {
        for (v, recs) in cell.into_iter().enumerate() {
            result[v].extend(recs);
        }
    }
    Ok(result)
}

/// One row of a replicate's `scores.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub replicate: usize,
    pub variant: Variant,
    pub lambda: f64,
    pub dropout: f64,
    pub k: f64,
    pub mis: f64,
    pub crps: f64,
    pub rmse: f64,
    pub width: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateOutput {
    pub baseline: BaselineJson,
    /// Per configured variant, rows in grid order.
    pub scores: Vec<(Variant, Vec<ScoreRow>)>,
}

fn tag(setting: usize, m: usize, replicate: usize) -> impl Fn(Error) -> Error {
    move |e| Error::Replicate { setting: setting + 1, m, replicate, source: Box::new(e) }
}

/// Runs one replicate end to end and persists its artifacts. `data` may be
/// supplied to reuse a dataset and eigendecomposition across `m`.
pub fn run_replicate(
    cfg: &ExperimentConfig,
    setting: usize,
    m: usize,
    replicate: usize,
    data: Option<&ReplicateData>,
) -> Result<ReplicateOutput> {
    let inner = || -> Result<ReplicateOutput> {
        cfg.validate()?;
        let owned;
        let data = match data {
            Some(d) => d,
            None => {
                owned = prepare_replicate(cfg, setting, replicate)?;
                &owned
            }
        };
        let design = Design::new(data, m)?;
        let seed = cfg.model_seed(setting, m, replicate);
        let baseline = BaselineJson::from(&run_baseline(cfg, &design, seed)?);
        let tables = evaluate_grid(cfg, &design, seed, &cfg.variants, &cfg.grid)?;
        let out = ReplicateOutput {
            baseline,
            scores: cfg
                .variants
                .iter()
                .zip(tables)
                .map(|(&v, recs)| (v, score_rows(&cfg.grid, replicate, v, &recs)))
                .collect(),
        };
        persist_replicate(cfg, setting, m, replicate, &out)?;
        Ok(out)
    };
    inner().map_err(tag(setting, m, replicate))
}

fn score_rows(grid: &HyperGrid, replicate: usize, variant: Variant, recs: &[ScoreRecord]) -> Vec<ScoreRow> {
    let [a, b, c] = grid.shape();
    let mut rows = Vec::with_capacity(recs.len());
    for i in 0..a {
        for j in 0..b {
            for l in 0..c {
                let h = grid.config(i, j, l);
                let r = &recs[grid.index(i, j, l)];
                rows.push(ScoreRow {
                    replicate,
                    variant,
                    lambda: h.lambda,
                    dropout: h.dropout,
                    k: h.k,
                    mis: r.mmis,
                    crps: r.crps,
                    rmse: r.rmse,
                    width: r.width,
                    coverage: r.coverage,
                });
            }
        }
    }
    rows
}

#[derive(Debug, Serialize, Deserialize)]
struct CompleteMarker {
    setting: usize,
    m: usize,
    replicate: usize,
    variants: Vec<Variant>,
}

fn write_json_pretty<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub fn write_score_rows(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["replicate", "variant", "lambda", "dropout", "k", "mis", "crps", "rmse", "width", "coverage"])?;
    for r in rows {
        w.write_record([
            r.replicate.to_string(),
            r.variant.name().to_string(),
            fmt(r.lambda),
            fmt(r.dropout),
            fmt(r.k),
            fmt(r.mis),
            fmt(r.crps),
            fmt(r.rmse),
            fmt(r.width),
            fmt(r.coverage),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_score_rows(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

fn persist_replicate(cfg: &ExperimentConfig, setting: usize, m: usize, replicate: usize, out: &ReplicateOutput) -> Result<()> {
    let dir = cfg.replicate_dir(setting, m, replicate);
    fs::create_dir_all(&dir)?;
    write_json_pretty(&dir.join("baseline.json"), &out.baseline)?;
    for (v, rows) in &out.scores {
        let vdir = dir.join(v.name());
        fs::create_dir_all(&vdir)?;
        write_score_rows(&vdir.join("scores.csv"), rows)?;
        let table = score_table(&cfg.grid, rows, out.baseline.mis)?;
        let search = cube_search(&table, &cfg.cube)?;
        let mut w = BufWriter::new(File::create(vdir.join("cube_log.jsonl"))?);
        search.write_jsonl(&mut w)?;
        w.flush()?;
    }
    let marker = CompleteMarker { setting: setting + 1, m, replicate, variants: cfg.variants.clone() };
    write_json_pretty(&dir.join("complete.json"), &marker)
}

/// Whether a replicate's artifacts are all on disk for the configured variants.
pub fn replicate_complete(cfg: &ExperimentConfig, setting: usize, m: usize, replicate: usize) -> bool {
    let dir = cfg.replicate_dir(setting, m, replicate);
    match read_json::<CompleteMarker>(&dir.join("complete.json")) {
        Ok(marker) => cfg.variants.iter().all(|v| marker.variants.contains(v)),
        Err(_) => false,
    }
}

/// Reads a persisted replicate back.
pub fn load_replicate(cfg: &ExperimentConfig, setting: usize, m: usize, replicate: usize) -> Result<ReplicateOutput> {
    let dir = cfg.replicate_dir(setting, m, replicate);
    let baseline: BaselineJson = read_json(&dir.join("baseline.json"))?;
    let scores = cfg
        .variants
        .iter()
        .map(|&v| Ok((v, read_score_rows(&dir.join(v.name()).join("scores.csv"))?)))
        .collect::<Result<_>>()?;
    Ok(ReplicateOutput { baseline, scores })
}

/// The mMIS table of one replicate/variant, normalised against the baseline.
pub fn score_table(grid: &HyperGrid, rows: &[ScoreRow], baseline_mis: f64) -> Result<crate::cubing::ScoreTable> {
    if rows.len() != grid.len() {
        return Err(Error::DimensionMismatch { context: "score rows vs grid", expected: grid.len(), found: rows.len() });
    }
    normalize_scores(grid.clone(), rows.iter().map(|r| r.mis).collect(), baseline_mis)
}

/// Mean metrics of one model over replicates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mis: f64,
    pub crps: f64,
    pub rmse: f64,
    pub width: f64,
    pub coverage: f64,
}

impl SummaryRow {
    fn mean<'a>(rows: impl Iterator<Item = &'a SummaryRow>) -> Option<SummaryRow> {
        let v: Vec<&SummaryRow> = rows.collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let avg = |f: fn(&SummaryRow) -> f64| v.iter().map(|r| f(r)).sum::<f64>() / n;
        Some(SummaryRow {
            mis: avg(|r| r.mis),
            crps: avg(|r| r.crps),
            rmse: avg(|r| r.rmse),
            width: avg(|r| r.width),
            coverage: avg(|r| r.coverage),
        })
    }
}

impl From<&BaselineJson> for SummaryRow {
    fn from(b: &BaselineJson) -> Self {
        Self { mis: b.mis, crps: b.crps, rmse: b.rmse, width: b.width, coverage: b.coverage }
    }
}

impl From<&ScoreRow> for SummaryRow {
    fn from(r: &ScoreRow) -> Self {
        Self { mis: r.mis, crps: r.crps, rmse: r.rmse, width: r.width, coverage: r.coverage }
    }
}

/// Mean metrics of the rows whose configuration lies in `region`, or `None`
/// when none does.
pub fn subregion_mean(rows: &[ScoreRow], region: &Subregion) -> Option<SummaryRow> {
    let inside: Vec<SummaryRow> = rows
        .iter()
        .filter(|r| region.contains(&HyperConfig { lambda: r.lambda, dropout: r.dropout, k: r.k }))
        .map(SummaryRow::from)
        .collect();
    SummaryRow::mean(inside.iter())
}

/// Aggregated results for one `(setting, m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellReport {
    pub setting: usize,
    pub m: usize,
    pub replicates: usize,
    pub baseline: SummaryRow,
    pub variants: Vec<(Variant, SummaryRow, Subregion)>,
}

/// Aggregates the persisted replicates of one `(setting, m)`: cube search per
/// replicate and variant, subregion aggregation across replicates, and mean
/// metrics (variants averaged over their subregion, then over replicates).
pub fn aggregate_cell(cfg: &ExperimentConfig, setting: usize, m: usize) -> Result<CellReport> {
    let reps: Vec<ReplicateOutput> =
        (0..cfg.replicates).map(|r| load_replicate(cfg, setting, m, r).map_err(tag(setting, m, r))).collect::<Result<_>>()?;
    let baseline = SummaryRow::mean(reps.iter().map(|r| SummaryRow::from(&r.baseline)).collect::<Vec<_>>().iter())
        .ok_or(Error::EmptyInput("replicates"))?;
    let mut variants = Vec::new();
    for (vi, &v) in cfg.variants.iter().enumerate() {
        let mut rankings = Vec::with_capacity(reps.len());
        for rep in &reps {
            let table = score_table(&cfg.grid, &rep.scores[vi].1, rep.baseline.mis)?;
            rankings.push(cube_search(&table, &cfg.cube)?.ranked);
        }
        let region = aggregate_subregions(&rankings, cfg.top_n, cfg.keep)?;
        let per_rep: Vec<SummaryRow> = reps
            .iter()
            .map(|rep| subregion_mean(&rep.scores[vi].1, &region).ok_or(Error::EmptyCube))
            .collect::<Result<_>>()?;
        let mean = SummaryRow::mean(per_rep.iter()).ok_or(Error::EmptyInput("replicates"))?;
        variants.push((v, mean, region));
    }
    Ok(CellReport { setting, m, replicates: reps.len(), baseline, variants })
}

/// Regenerates every report file from persisted replicate artifacts.
pub fn report(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;
    let mut written = Vec::new();
    let mut text = String::new();
    for s in 0..cfg.settings.len() {
        for &m in &cfg.basis_dims {
            let cell = aggregate_cell(cfg, s, m)?;
            for (v, _, region) in &cell.variants {
                let path = cfg.m_dir(s, m).join(format!("{}_subregion.json", v.name()));
                write_json_pretty(&path, region)?;
                written.push(path);
            }
            let stem = format!("setting{}_m{m}", s + 1);
            let results = cfg.output_dir.join(format!("{stem}_results.csv"));
            write_results_csv(&results, &cell)?;
            let subs = cfg.output_dir.join(format!("{stem}_subregions.csv"));
            write_subregions_csv(&subs, &cell)?;
            written.push(results);
            written.push(subs);
            text.push_str(&render_cell(cfg, &cell));
            text.push('\n');
        }
    }
    let tables = cfg.output_dir.join("tables.txt");
    fs::write(&tables, text)?;
    written.push(tables);
    Ok(written)
}

fn write_results_csv(path: &Path, cell: &CellReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "mis", "crps", "rmse", "width", "coverage"])?;
    let rows = std::iter::once(("Baseline", &cell.baseline)).chain(cell.variants.iter().map(|(v, r, _)| (v.name(), r)));
    for (name, r) in rows {
        w.write_record([name.to_string(), fmt(r.mis), fmt(r.crps), fmt(r.rmse), fmt(r.width), fmt(r.coverage)])?;
    }
    w.flush()?;
    Ok(())
}

fn write_subregions_csv(path: &Path, cell: &CellReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["variant", "wdr_lo", "wdr_hi", "dr_lo", "dr_hi", "sdr_lo", "sdr_hi", "n_top"])?;
    for (v, _, s) in &cell.variants {
        w.write_record([
            v.name().to_string(),
            fmt(s.wdr[0]),
            fmt(s.wdr[1]),
            fmt(s.dr[0]),
            fmt(s.dr[1]),
            fmt(s.sdr[0]),
            fmt(s.sdr[1]),
            fmt(s.n_top),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn render_cell(cfg: &ExperimentConfig, cell: &CellReport) -> String {
    let s = cfg.settings[cell.setting];
    let mut out = format!(
        "Setting {} (nu={}, effective range={}), m={}, {} replicates\n",
        cell.setting + 1,
        s.nu.nu(),
        s.effective_range,
        cell.m,
        cell.replicates
    );
    out.push_str(&format!("{:<10}{:>9}{:>9}{:>9}{:>9}{:>9}\n", "model", "MIS", "CRPS", "RMSE", "Width", "Cvg"));
    let rows = std::iter::once(("Baseline", &cell.baseline)).chain(cell.variants.iter().map(|(v, r, _)| (v.name(), r)));
    for (name, r) in rows {
        out.push_str(&format!(
            "{name:<10}{:>9.3}{:>9.3}{:>9.3}{:>9.3}{:>9.3}\n",
            r.mis, r.crps, r.rmse, r.width, r.coverage
        ));
    }
    out.push_str(&format!("{:<10}{:>24}{:>16}{:>16}{:>8}\n", "variant", "WDR", "DR", "SDR", "N_top"));
    for (v, _, r) in &cell.variants {
        out.push_str(&format!(
            "{:<10}{:>24}{:>16}{:>16}{:>8.1}\n",
            v.name(),
            format!("({:.1e}, {:.1e})", r.wdr[0], r.wdr[1]),
            format!("({:.2}, {:.2})", r.dr[0], r.dr[1]),
            format!("({:.2}, {:.2})", r.sdr[0], r.sdr[1]),
            r.n_top
        ));
    }
    out
}

/// Runs every missing replicate, then regenerates the reports. Replicates
/// with a completion marker are skipped, so an interrupted study can be
/// resumed by rerunning it.
pub fn run_study(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("worker pool: {e}")))?;
    pool.install(|| {
        for s in 0..cfg.settings.len() {
            for r in 0..cfg.replicates {
                let pending: Vec<usize> =
                    cfg.basis_dims.iter().copied().filter(|&m| !replicate_complete(cfg, s, m, r)).collect();
                if pending.is_empty() {
                    continue;
                }
                let data = prepare_replicate(cfg, s, r).map_err(tag(s, pending[0], r))?;
                for m in pending {
                    run_replicate(cfg, s, m, r, Some(&data))?;
                }
            }
        }
        report(cfg)
    })
}

/// Loads a user-supplied tabular dataset (see [`crate::io::read_dataset_csv`]
/// for the column layout).
pub fn load_tabular_dataset(path: &Path, opts: &TabularOptions) -> Result<SpatialDataset<f64>> {
    let ds = load_dataset_csv::<f64>(path, opts)?;
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn smoke_config(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            settings: vec![Setting { nu: Smoothness::Half, effective_range: 0.3 }],
            basis_dims: vec![5],
            replicates: 1,
            grid: HyperGrid { lambda_log10: vec![-6.0, -3.0], dropout: vec![0.1, 0.3], k: vec![1.0, 2.0] },
            sim: SimConfig { n_total: 120, n_train: 80, ..SimConfig::default() },
            output_dir: dir.to_path_buf(),
            passes: 20,
            baseline: ChainLength { n_iter: 200, n_burn: 50 },
            train: TrainConfig { batch_size: 16, epochs: 5, ..TrainConfig::default() },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid_and_round_trips_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let s = toml::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&s).unwrap(), cfg);
        assert!(ExperimentConfig::from_toml_str("replicates = 0").is_err());
        assert!(ExperimentConfig::from_toml_str("basis_dims = [2000]").is_err());
        assert!(ExperimentConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn dataset_seed_ignores_m() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.sim_for(0, 2).unwrap().seed, cfg.sim_for(0, 2).unwrap().seed);
        assert_ne!(cfg.sim_for(0, 2).unwrap().seed, cfg.sim_for(0, 3).unwrap().seed);
        assert_ne!(cfg.sim_for(0, 2).unwrap().seed, cfg.sim_for(1, 2).unwrap().seed);
        assert_ne!(cfg.model_seed(0, 25, 0), cfg.model_seed(0, 135, 0));
    }

    #[test]
    fn smoke_replicate_emits_grid_rows() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = smoke_config(dir.path());
        let out = run_replicate(&cfg, 0, 5, 0, None).unwrap();
        assert_eq!(out.scores.len(), 3);
        for (_, rows) in &out.scores {
            assert_eq!(rows.len(), 8);
        }
        assert!(replicate_complete(&cfg, 0, 5, 0));
        assert_eq!(load_replicate(&cfg, 0, 5, 0).unwrap(), out);
    }

    #[test]
    fn sub_grid_matches_full_grid_entries() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = smoke_config(dir.path());
        let data = prepare_replicate(&cfg, 0, 0).unwrap();
        let design = Design::new(&data, 5).unwrap();
        let seed = cfg.model_seed(0, 5, 0);
        let full = evaluate_grid(&cfg, &design, seed, &[Variant::LA], &cfg.grid).unwrap();
        let sub = HyperGrid { lambda_log10: vec![-3.0], dropout: vec![0.3], k: vec![2.0] };
        let part = evaluate_grid(&cfg, &design, seed, &[Variant::LA], &sub).unwrap();
        assert_eq!(part[0][0], full[0][cfg.grid.index(1, 1, 1)]);
    }

    #[test]
    fn replicate_errors_carry_coordinates() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = smoke_config(dir.path());
        cfg.train.batch_size = 1000;
        match run_replicate(&cfg, 0, 5, 0, None) {
            Err(Error::Replicate { setting: 1, m: 5, replicate: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
