//! End-to-end experiment: scene generation, survey, completion,
//! recommendation and evaluation. Each stage reads its predecessor's files
//! under the output directory, so stages can be rerun one at a time.
//!
//! Layout:
//!
//! ```text
//! out/
//!   scene.toml
//!   kop_<k>/measurements.csv      mean_power in W
//!   kop_<k>/completed.csv         value_dB
//!   kop_<k>/diagnostics.csv
//!   kop_<k>/recommendations.csv   predicted_dB
//!   results_ppl.csv
//!   results_se.csv                p_t_dbm, se_bps_hz
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::{build_codebook, ArrayGeometry, BeamIndex, Codebook};
use crate::completion::{complete, CompletedTensor, CompletionConfig, StageOrder};
use crate::database::{
    position_label, sample_observed_positions, Domain, GridSpec, MeasurementDatabase, PositionLabel, PowerTensor,
};
use crate::error::{invalid, Error, Result};
use crate::metrics::{best_beam, dbm_to_watts, power_loss_probability, spectral_efficiency, FrameTiming, LinkBudget};
use crate::recommend::{
    exhaustive, fingerprint_baseline, read_recommendations_csv, select_beams, write_recommendations_csv,
    RecommendationSet, Source,
};
use crate::scene::{Coordinate, Scene, SceneConfig, ServiceArea};
use crate::smc::SmcParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Label spacing in metres.
    pub delta_s: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { delta_s: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodebookConfig {
    pub c_theta: usize,
    pub c_phi: usize,
    pub n_x: usize,
    pub n_y: usize,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self { c_theta: 16, c_phi: 16, n_x: 16, n_y: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurveyConfig {
    /// Observed position ratios; one experiment per entry.
    pub k_op: Vec<f64>,
    pub top_fraction: f64,
    pub seed: u64,
    pub p_t_dbm: f64,
    /// Receiver noise variance in W; zero gives a noiseless survey.
    pub noise_var: f64,
}

impl Default for SurveyConfig {
    fn default() -> Self {
        Self { k_op: vec![0.2, 0.4], top_fraction: 0.1, seed: 7, p_t_dbm: 30.0, noise_var: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompletionSection {
    pub parallel: bool,
    pub order: StageOrder,
}

impl Default for CompletionSection {
    fn default() -> Self {
        Self { parallel: true, order: StageOrder::BeamFirst }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Trained beams as fractions of the codebook size.
    pub n_tr_fractions: Vec<f64>,
    pub p_t_dbm: Vec<f64>,
    pub bandwidth_hz: f64,
    pub noise_psd_dbm_hz: f64,
    pub antenna_efficiency: f64,
    pub microslot_us: u64,
    pub frame_us: u64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            n_tr_fractions: (1..=10).map(|k| k as f64 * 0.02).map(|f| (f * 100.0).round() / 100.0).collect(),
            p_t_dbm: (0..=6).map(|k| k as f64 * 5.0).collect(),
            bandwidth_hz: 1.76e9,
            noise_psd_dbm_hz: -174.0,
            antenna_efficiency: 1.0,
            microslot_us: 10,
            frame_us: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: SceneConfig,
    pub area: ServiceArea,
    pub grid: GridConfig,
    pub codebook: CodebookConfig,
    pub survey: SurveyConfig,
    pub stage1: SmcParams,
    pub stage2: SmcParams,
    pub completion: CompletionSection,
    pub evaluation: EvaluationConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::InvalidArgument(message) => Error::Parse { path: path.to_path_buf(), message },
            other => other,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// Overrides the scene and survey seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.scene.seed = seed;
        self.survey.seed = seed;
        self
    }

    pub fn completion_config(&self) -> CompletionConfig {
        CompletionConfig {
            stage1: self.stage1,
            stage2: self.stage2,
            parallel: self.completion.parallel,
            order: self.completion.order,
        }
    }

    pub fn geometry(&self) -> Result<ArrayGeometry> {
        ArrayGeometry::new(self.codebook.n_x, self.codebook.n_y)
    }

    pub fn codebook(&self) -> Result<Codebook> {
        build_codebook(self.geometry()?, self.codebook.c_theta, self.codebook.c_phi)
    }

    pub fn n_beams(&self) -> usize {
        self.codebook.c_theta * self.codebook.c_phi
    }

    /// `N_tr = round(fraction·|W|)`, at least one beam.
    pub fn n_tr(&self, fraction: f64) -> usize {
        ((fraction * self.n_beams() as f64).round() as usize).clamp(1, self.n_beams())
    }

    pub fn timing(&self) -> FrameTiming {
        FrameTiming {
            microslot: Duration::from_micros(self.evaluation.microslot_us),
            frame: Duration::from_micros(self.evaluation.frame_us),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.area.validate()?;
        self.geometry()?;
        if self.codebook.c_theta == 0 || self.codebook.c_phi == 0 {
            return Err(invalid("codebook sizes must be positive"));
        }
        if !(self.grid.delta_s > 0.0) {
            return Err(invalid(format!("grid.delta_s must be positive, got {}", self.grid.delta_s)));
        }
        if self.survey.k_op.is_empty() {
            return Err(invalid("survey.k_op must list at least one ratio"));
        }
        let mut dirs = BTreeSet::new();
        for &k in &self.survey.k_op {
            if !(k > 0.0 && k <= 1.0) {
                return Err(invalid(format!("survey.k_op entries must lie in (0, 1], got {k}")));
            }
            if !dirs.insert(kop_dir_name(k)) {
                return Err(invalid(format!("survey.k_op lists {k} twice")));
            }
        }
        if !(self.survey.top_fraction > 0.0 && self.survey.top_fraction <= 1.0) {
            return Err(invalid(format!("survey.top_fraction must lie in (0, 1], got {}", self.survey.top_fraction)));
        }
        if !(self.survey.noise_var >= 0.0) || !self.survey.p_t_dbm.is_finite() {
            return Err(invalid("survey.noise_var must be non-negative and survey.p_t_dbm finite"));
        }
        self.completion_config().validate()?;
        let ev = &self.evaluation;
        if ev.n_tr_fractions.is_empty() || ev.p_t_dbm.is_empty() {
            return Err(invalid("evaluation.n_tr_fractions and evaluation.p_t_dbm must be non-empty"));
        }
        if let Some(f) = ev.n_tr_fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(invalid(format!("evaluation.n_tr_fractions entries must lie in (0, 1], got {f}")));
        }
        if ev.p_t_dbm.iter().any(|p| !p.is_finite()) {
            return Err(invalid("evaluation.p_t_dbm entries must be finite"));
        }
        LinkBudget {
            bandwidth_hz: ev.bandwidth_hz,
            carrier_hz: self.scene.carrier_hz,
            noise_psd_dbm_hz: ev.noise_psd_dbm_hz,
            antenna_efficiency: ev.antenna_efficiency,
            distance_m: 1.0,
        }
        .validate()?;
        let timing = self.timing();
        if timing.microslot.is_zero() {
            return Err(invalid("evaluation.microslot_us must be positive"));
        }
        timing.training(self.n_beams())?;
        Ok(())
    }
}

fn kop_dir_name(k: f64) -> String {
    format!("kop_{k}")
}

/// File locations under one output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn scene(&self) -> PathBuf {
        self.root.join("scene.toml")
    }

    pub fn kop_dir(&self, k_op: f64) -> PathBuf {
        self.root.join(kop_dir_name(k_op))
    }

    pub fn measurements(&self, k_op: f64) -> PathBuf {
        self.kop_dir(k_op).join("measurements.csv")
    }

    pub fn completed(&self, k_op: f64) -> PathBuf {
        self.kop_dir(k_op).join("completed.csv")
    }

    pub fn diagnostics(&self, k_op: f64) -> PathBuf {
        self.kop_dir(k_op).join("diagnostics.csv")
    }

    pub fn recommendations(&self, k_op: f64) -> PathBuf {
        self.kop_dir(k_op).join("recommendations.csv")
    }

    pub fn results_ppl(&self) -> PathBuf {
        self.root.join("results_ppl.csv")
    }

    pub fn results_se(&self) -> PathBuf {
        self.root.join("results_se.csv")
    }
}

/// Files a stage is producing. They are written under temporary names and
/// only renamed into place by [`Outputs::commit`]; dropping an uncommitted
/// set removes them.
struct Outputs {
    pending: Vec<(PathBuf, PathBuf)>,
    committed: bool,
}

impl Outputs {
    fn new() -> Self {
        Self { pending: Vec::new(), committed: false }
    }

    fn file(&mut self, target: PathBuf) -> PathBuf {
        let name = target.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let tmp = target.with_file_name(format!(".{name}.partial"));
        self.pending.push((tmp.clone(), target));
        tmp
    }

    fn commit(mut self) -> Result<()> {
        for (tmp, target) in &self.pending {
            fs::rename(tmp, target).map_err(|source| Error::Io { path: target.clone(), source })?;
        }
        self.committed = true;
        Ok(())
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.committed {
            for (tmp, _) in &self.pending {
                let _ = fs::remove_file(tmp);
            }
        }
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            reason: "scene file not found; run scene-gen first".into(),
        });
    }
    let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    Scene::from_toml(&text).map_err(|message| Error::Parse { path: path.to_path_buf(), message })
}

pub fn scene_gen(cfg: &ExperimentConfig, layout: &Layout) -> Result<Scene> {
    create_dir(layout.root())?;
    let scene = Scene::generate(cfg.area.clone(), &cfg.scene)?;
    let mut out = Outputs::new();
    write_text(&out.file(layout.scene()), &scene.to_toml())?;
    out.commit()?;
    Ok(scene)
}

pub fn survey(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let scene = load_scene(&layout.scene())?;
    let codebook = cfg.codebook()?;
    let grid = GridSpec::new(&scene.area, cfg.grid.delta_s)?;
    let mut out = Outputs::new();
    for &k in &cfg.survey.k_op {
        create_dir(&layout.kop_dir(k))?;
        let observed = sample_observed_positions(&grid, k, cfg.survey.seed)?;
        let mut db = MeasurementDatabase::new();
        db.ingest_survey(
            &scene,
            &codebook,
            &grid,
            &observed,
            cfg.survey.top_fraction,
            dbm_to_watts(cfg.survey.p_t_dbm),
            cfg.survey.noise_var,
            cfg.survey.seed,
        )?;
        db.write_csv(&out.file(layout.measurements(k)))?;
    }
    out.commit()
}

fn tensor_shape(cfg: &ExperimentConfig, grid: &GridSpec) -> [usize; 4] {
    [grid.l_x, grid.l_y, cfg.codebook.c_theta, cfg.codebook.c_phi]
}

pub fn complete_stage(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let scene = load_scene(&layout.scene())?;
    let codebook = cfg.codebook()?;
    let grid = GridSpec::new(&scene.area, cfg.grid.delta_s)?;
    let mut out = Outputs::new();
    for &k in &cfg.survey.k_op {
        let db = MeasurementDatabase::read_csv(&layout.measurements(k))?;
        if db.is_empty() {
            return Err(Error::NoData(format!("{} holds no measurements", layout.measurements(k).display())));
        }
        let tensor = db.to_tensor(&grid, &codebook, Domain::Db);
        let done = complete(&tensor, &cfg.completion_config())?;
        done.write_csv(&out.file(layout.completed(k)))?;
        done.write_diagnostics_csv(&out.file(layout.diagnostics(k)))?;
    }
    out.commit()
}

fn read_completed(cfg: &ExperimentConfig, layout: &Layout, grid: &GridSpec, k: f64) -> Result<CompletedTensor> {
    let tensor = PowerTensor::read_csv(&layout.completed(k), tensor_shape(cfg, grid))?;
    Ok(CompletedTensor { tensor, stage1_mask: Vec::new(), diagnostics: Vec::new() })
}

fn max_n_tr(cfg: &ExperimentConfig) -> usize {
    cfg.evaluation.n_tr_fractions.iter().map(|&f| cfg.n_tr(f)).max().unwrap_or(1)
}

/// Ranked lists of the largest evaluated length for every label; shorter
/// budgets are prefixes.
pub fn recommend_stage(cfg: &ExperimentConfig, layout: &Layout) -> Result<()> {
    let scene = load_scene(&layout.scene())?;
    let grid = GridSpec::new(&scene.area, cfg.grid.delta_s)?;
    let n = max_n_tr(cfg);
    let mut out = Outputs::new();
    for &k in &cfg.survey.k_op {
        let db = MeasurementDatabase::read_csv(&layout.measurements(k))?;
        let t_hat = read_completed(cfg, layout, &grid, k)?;
        let mut sets = Vec::with_capacity(2 * grid.n_positions());
        for p in grid.labels() {
            sets.push(select_beams(&t_hat, p, n)?);
        }
        for p in grid.labels() {
            sets.push(fingerprint_baseline(&db, &grid, p, n)?);
        }
        write_recommendations_csv(&sets, &out.file(layout.recommendations(k)))?;
    }
    out.commit()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PplRow {
    pub k_op: f64,
    pub n_tr_fraction: f64,
    pub method: Source,
    pub p_pl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeRow {
    pub p_t_dbm: f64,
    pub method: Source,
    pub k_op: f64,
    pub n_tr: usize,
    pub se_bps_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Evaluation {
    pub ppl: Vec<PplRow>,
    pub se: Vec<SeRow>,
}

impl Evaluation {
    pub fn p_pl(&self, k_op: f64, fraction: f64, method: Source) -> Option<f64> {
        self.ppl.iter().find(|r| r.k_op == k_op && r.n_tr_fraction == fraction && r.method == method).map(|r| r.p_pl)
    }
}

/// Ground truth at one reference coordinate.
struct Truth {
    label: PositionLabel,
    /// Noiseless unit-power beam powers, row-major over `(i, j)`.
    powers: Vec<f64>,
    /// Channel with its free-space loss divided out.
    h_norm: Vec<Complex64>,
    distance: f64,
}

fn ground_truth(scene: &Scene, codebook: &Codebook, grid: &GridSpec) -> Result<Vec<Truth>> {
    let coords: Vec<Coordinate> = scene.area.reference_coordinates();
    coords
        .par_iter()
        .map(|&g| {
            let h = scene.channel_vector(g, &codebook.geometry)?;
            let scale = 1.0 / scene.free_space_amplitude(g);
            Ok(Truth {
                label: position_label(grid, g)?,
                powers: codebook.noiseless_powers(&h, 1.0),
                h_norm: h.iter().map(|v| v * scale).collect(),
                distance: scene.area.bs_distance(g),
            })
        })
        .collect()
}

/// Beam the UE settles on after training `beams`: the strongest one.
fn trained_choice(truth: &Truth, beams: &[BeamIndex], c_phi: usize) -> BeamIndex {
    let scores: Vec<f64> = beams.iter().map(|b| truth.powers[b.flat(c_phi)]).collect();
    beams[best_beam(&scores, 1).expect("non-empty recommendation").flat(1)]
}

pub fn evaluate_stage(cfg: &ExperimentConfig, layout: &Layout) -> Result<Evaluation> {
    let scene = load_scene(&layout.scene())?;
    let codebook = cfg.codebook()?;
    let grid = GridSpec::new(&scene.area, cfg.grid.delta_s)?;
    let c_phi = codebook.c_phi;
    let n_w = codebook.len();
    let timing = cfg.timing();
    let base_budget = LinkBudget {
        bandwidth_hz: cfg.evaluation.bandwidth_hz,
        carrier_hz: scene.carrier_hz,
        noise_psd_dbm_hz: cfg.evaluation.noise_psd_dbm_hz,
        antenna_efficiency: cfg.evaluation.antenna_efficiency,
        distance_m: 1.0,
    };

    // Read every input before the expensive part so a missing file fails fast.
    let mut inputs = Vec::new();
    for &k in &cfg.survey.k_op {
        let observed = MeasurementDatabase::read_csv(&layout.measurements(k))?.positions();
        let sets = read_recommendations_csv(&layout.recommendations(k))?;
        inputs.push((k, observed, sets));
    }
    let truth = ground_truth(&scene, &codebook, &grid)?;
    let exhaustive_set = exhaustive(PositionLabel::new(1, 1), codebook.c_theta, codebook.c_phi);

    let mut eval = Evaluation::default();
    for (k, observed, sets) in inputs {
        let lookup = |source: Source, p: PositionLabel| -> Result<&RecommendationSet> {
            sets.iter().find(|s| s.source == source && s.position == p).ok_or_else(|| Error::Parse {
                path: layout.recommendations(k),
                message: format!("no {} list for ({}, {})", source.as_str(), p.px, p.py),
            })
        };
        let points: Vec<&Truth> = truth.iter().filter(|t| !observed.contains(&t.label)).collect();
        if points.is_empty() {
            return Err(Error::UndefinedMetric(format!("k_op {k} leaves no unobserved position to evaluate")));
        }
        let planes: Vec<Vec<f64>> = points.iter().map(|t| t.powers.clone()).collect();
        let mut lists: Vec<(Source, Vec<&RecommendationSet>)> = Vec::new();
        for source in [Source::TensorCompletion, Source::Fingerprint] {
            let per_point = points.iter().map(|t| lookup(source, t.label)).collect::<Result<Vec<_>>>()?;
            lists.push((source, per_point));
        }

        for &f in &cfg.evaluation.n_tr_fractions {
            let n = cfg.n_tr(f);
            for (source, per_point) in &lists {
                let recs: Vec<&[BeamIndex]> = per_point.iter().map(|s| &s.beams[..n.min(s.len())]).collect();
                let p_pl = power_loss_probability(&planes, &recs, c_phi)?;
                eval.ppl.push(PplRow { k_op: k, n_tr_fraction: f, method: *source, p_pl });
            }
        }
        let all: Vec<&[BeamIndex]> = vec![&exhaustive_set.beams[..]; points.len()];
        eval.ppl.push(PplRow {
            k_op: k,
            n_tr_fraction: 1.0,
            method: Source::Exhaustive,
            p_pl: power_loss_probability(&planes, &all, c_phi)?,
        });

        // (method, n_tr, chosen beam per point)
        let mut choices: Vec<(Source, usize, Vec<BeamIndex>)> = Vec::new();
        for &f in &cfg.evaluation.n_tr_fractions {
            let n = cfg.n_tr(f);
            for (source, per_point) in &lists {
                let chosen = points
                    .iter()
                    .zip(per_point)
                    .map(|(t, s)| trained_choice(t, &s.beams[..n.min(s.len())], c_phi))
                    .collect();
                choices.push((*source, n, chosen));
            }
        }
        choices.push((
            Source::Exhaustive,
            n_w,
            points.iter().map(|t| best_beam(&t.powers, c_phi)).collect::<Result<_>>()?,
        ));

        for &p_dbm in &cfg.evaluation.p_t_dbm {
            let p_t = dbm_to_watts(p_dbm);
            for (source, n, chosen) in &choices {
                let total = points
                    .par_iter()
                    .zip(chosen)
                    .map(|(t, &b)| {
                        let budget = base_budget.with_distance(t.distance);
                        let r = spectral_efficiency(&budget, &timing, p_t, codebook.vector(b), &t.h_norm, *n)?;
                        Ok(r.spectral_efficiency(budget.bandwidth_hz))
                    })
                    .collect::<Result<Vec<f64>>>()?
                    .iter()
                    .sum::<f64>();
                eval.se.push(SeRow {
                    p_t_dbm: p_dbm,
                    method: *source,
                    k_op: k,
                    n_tr: *n,
                    se_bps_hz: total / points.len() as f64,
                });
            }
        }
    }

    let mut out = Outputs::new();
    write_rows(&eval.ppl, &out.file(layout.results_ppl()))?;
    write_rows(&eval.se, &out.file(layout.results_se()))?;
    out.commit()?;
    Ok(eval)
}

fn write_rows<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let csv_err = |source| Error::Csv { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path, stage: &str) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::MissingArtifact { path: path.to_path_buf(), reason: format!("run the {stage} stage first") });
    }
    let csv_err = |source| Error::Csv { path: path.to_path_buf(), source };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub fn read_results(layout: &Layout) -> Result<Evaluation> {
    Ok(Evaluation {
        ppl: read_rows(&layout.results_ppl(), "evaluate")?,
        se: read_rows(&layout.results_se(), "evaluate")?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    SceneGen,
    Survey,
    Complete,
    Recommend,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::SceneGen, Stage::Survey, Stage::Complete, Stage::Recommend, Stage::Evaluate];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::SceneGen => "scene-gen",
            Stage::Survey => "survey",
            Stage::Complete => "complete",
            Stage::Recommend => "recommend",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("stage {stage} failed: {source}")]
pub struct StageError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

pub fn run_stage(stage: Stage, cfg: &ExperimentConfig, layout: &Layout) -> std::result::Result<(), StageError> {
    let res = match stage {
        Stage::SceneGen => scene_gen(cfg, layout).map(|_| ()),
        Stage::Survey => survey(cfg, layout),
        Stage::Complete => complete_stage(cfg, layout),
        Stage::Recommend => recommend_stage(cfg, layout),
        Stage::Evaluate => evaluate_stage(cfg, layout).map(|_| ()),
    };
    res.map_err(|source| StageError { stage, source })
}

/// Runs every stage in order.
pub fn run(cfg: &ExperimentConfig, layout: &Layout) -> std::result::Result<Evaluation, StageError> {
    for stage in &Stage::ALL[..4] {
        run_stage(*stage, cfg, layout)?;
    }
    evaluate_stage(cfg, layout).map_err(|source| StageError { stage: Stage::Evaluate, source })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.area.ref_grid_n = 11;
        cfg.grid.delta_s = 10.0;
        cfg.codebook = CodebookConfig { c_theta: 4, c_phi: 4, n_x: 4, n_y: 4 };
        cfg.scene.n_paths = 4;
        cfg.scene.n_clusters = 2;
        cfg.survey.k_op = vec![0.3, 0.6];
        cfg.survey.top_fraction = 0.25;
        cfg.stage1.max_iter = 50;
        cfg.stage2.max_iter = 50;
        cfg.evaluation.n_tr_fractions = vec![0.125, 0.25, 0.5];
        cfg.evaluation.p_t_dbm = vec![0.0, 20.0];
        cfg
    }

    #[test]
    fn default_config_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(cfg.n_tr(0.02), 5);
        assert_eq!(cfg.n_tr(0.2), 51);
        assert_eq!(cfg.evaluation.n_tr_fractions[1], 0.04);
    }

    #[test]
    fn partial_config_and_errors() {
        let cfg = ExperimentConfig::from_toml("[survey]\nk_op = [0.2]\n\n[stage2]\ngamma = 0.5\n").unwrap();
        assert_eq!(cfg.survey.k_op, vec![0.2]);
        assert_eq!(cfg.stage2.gamma, 0.5);
        assert_eq!(cfg.stage1, SmcParams::default());

        let err = ExperimentConfig::from_toml("[survey]\nk_op = [0.2]\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = ExperimentConfig::from_toml("[grid]\ndelta_s = -1.0\n").unwrap_err();
        assert!(err.to_string().contains("delta_s"));
        assert!(ExperimentConfig::from_toml("[survey]\nk_op = [0.2, 0.2]\n").is_err());
        assert!(ExperimentConfig::from_toml("[evaluation]\nframe_us = 100\n").is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        fs::write(&path, "[scene]\nseed = \"x\"\n").unwrap();
        match ExperimentConfig::load(&path) {
            Err(Error::Parse { message, .. }) => assert!(message.contains("line 2"), "{message}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_predecessor_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let layout = Layout::new(dir.path());
        let cfg = small_config();
        let err = run_stage(Stage::Survey, &cfg, &layout).unwrap_err();
        assert_eq!(err.stage, Stage::Survey);
        match err.source {
            Error::MissingArtifact { path, .. } => assert_eq!(path, layout.scene()),
            other => panic!("{other:?}"),
        }
        run_stage(Stage::SceneGen, &cfg, &layout).unwrap();
        let err = run_stage(Stage::Complete, &cfg, &layout).unwrap_err();
        assert!(err.to_string().contains("measurements.csv"), "{err}");
        assert!(err.to_string().starts_with("stage complete failed"));
    }

    #[test]
    fn failed_stage_leaves_no_partial_files() {
        let dir = tempfile::tempdir().unwrap();
        let layout = Layout::new(dir.path());
        let cfg = small_config();
        run_stage(Stage::SceneGen, &cfg, &layout).unwrap();
        run_stage(Stage::Survey, &cfg, &layout).unwrap();
        // The second experiment's input disappears, so the stage fails after
        // writing the first one's outputs.
        fs::remove_file(layout.measurements(0.6)).unwrap();
        assert!(run_stage(Stage::Complete, &cfg, &layout).is_err());
        for k in [0.3, 0.6] {
            let names: Vec<String> = fs::read_dir(layout.kop_dir(k))
                .unwrap()
                .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
                .collect();
            assert!(names.iter().all(|n| n == "measurements.csv"), "{names:?}");
        }
    }

    #[test]
    fn small_pipeline_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let layout = Layout::new(dir.path());
        let cfg = small_config();
        let eval = run(&cfg, &layout).unwrap();
        let grid = GridSpec::new(&cfg.area, cfg.grid.delta_s).unwrap();
        assert_eq!(grid.n_positions(), 36);

        let sets = read_recommendations_csv(&layout.recommendations(0.3)).unwrap();
        assert_eq!(sets.len(), 2 * 36);
        assert!(sets.iter().filter(|s| s.source == Source::TensorCompletion).all(|s| s.len() == cfg.n_tr(0.5)));

        // 3 fractions × 2 methods + exhaustive, per k_op.
        assert_eq!(eval.ppl.len(), 2 * 7);
        assert_eq!(eval.se.len(), 2 * 2 * 7);
        for k in [0.3, 0.6] {
            assert_eq!(eval.p_pl(k, 1.0, Source::Exhaustive), Some(0.0));
            let mut prev = 1.0;
            for f in [0.125, 0.25, 0.5] {
                let p = eval.p_pl(k, f, Source::TensorCompletion).unwrap();
                assert!(p <= prev);
                prev = p;
            }
        }
        assert_eq!(read_results(&layout).unwrap(), eval);

        // A second run into a fresh directory gives identical bytes.
        let dir2 = tempfile::tempdir().unwrap();
        let layout2 = Layout::new(dir2.path());
        run(&cfg, &layout2).unwrap();
        for (a, b) in [
            (layout.results_ppl(), layout2.results_ppl()),
            (layout.results_se(), layout2.results_se()),
            (layout.completed(0.3), layout2.completed(0.3)),
        ] {
            assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
        }
    }
}
