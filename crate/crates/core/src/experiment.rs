//! Declarative experiments: configuration, built-in presets and the
//! simulate → features → classify pipeline behind the command line tool.
//!
//! Output layout under the output directory:
//!
//! ```text
//! runs/<design>/<run>.field.csv   simulated magnetometer series
//! runs/<design>/<run>.traj.csv    magnet trajectories (optional)
//! passes/<log>_p<k>.field.csv     ingested passes, plus passes/index.csv
//! features/<design>.csv           one feature table per sensor design
//! reports/accuracy.csv            per-model accuracies
//! reports/stats.csv               ANOVA table and Tukey pairs
//! reports/summary.csv             mean ± std per design and scope
//! plots/accuracy_<scope>.svg      box plots
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{
    extract, read_feature_table, write_feature_table, FeatureVector, LabeledDataset, PipelineParams, RowMeta,
    LAYOUT_VERSION,
};
use crate::ingest::{self, Manifest, PASS_INDEX_HEADER};
use crate::learn::{
    anova_oneway, evaluate, tukey_hsd, write_accuracy_report, write_stats_report, AccuracyDistribution, AccuracyRecord,
    CvPlan, KnnConfig, NormalizeMode,
};
use crate::magnetics::{trajectory_to_field, FieldSeries, MagnetModel, MagnetometerLayout, Provenance};
use crate::mechanics::{simulate_scan, Direction, ElastomerStack, LumpedModel, ScanConfig, TipGeometry};
use crate::plot::box_plot_svg;
use crate::surface::{generate_surface, SineComponent, SurfaceProfile, SurfaceSpec, DEFAULT_RESOLUTION};

pub const RUN_SCHEMA: &str = "tactile-run v1";
pub const PRESETS: [&str; 3] = ["initial-survey", "wavelength-sweep", "amplitude-sweep"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    pub id: String,
    #[serde(default)]
    pub tip: TipGeometry,
    #[serde(default)]
    pub stack: ElastomerStack,
    #[serde(default)]
    pub magnet: MagnetModel,
    #[serde(default)]
    pub layout: MagnetometerLayout,
    #[serde(default)]
    pub model: LumpedModel,
}

impl DesignConfig {
    pub fn new(id: &str, tip: TipGeometry) -> Self {
        Self {
            id: id.to_string(),
            tip,
            stack: ElastomerStack::default(),
            magnet: MagnetModel::default(),
            layout: MagnetometerLayout::default(),
            model: LumpedModel::default(),
        }
    }
}

/// Which surface parameter names the class of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelKey {
    #[default]
    Wavelength,
    Amplitude,
    Surface,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanSettings {
    /// µm
    pub preload_depth: f64,
    /// s
    pub duration: f64,
    /// Hz
    pub sim_rate: f64,
    /// Hz
    pub output_rate: f64,
    /// mm
    pub start_offset: f64,
    /// Surface samples per mm.
    pub resolution: f64,
}

impl Default for ScanSettings {
    fn default() -> Self {
        let scan = ScanConfig::default();
        Self {
            preload_depth: scan.preload_depth,
            duration: scan.duration,
            sim_rate: scan.sim_rate,
            output_rate: scan.output_rate,
            start_offset: scan.start_offset,
            resolution: DEFAULT_RESOLUTION,
        }
    }
}

/// Cartesian sweep grid. Every repetition draws a fresh sine phase and a
/// fresh background micro-roughness, both shared by all designs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// mm
    pub wavelengths: Vec<f64>,
    /// µm
    pub amplitudes: Vec<f64>,
    /// mm/s
    pub velocities: Vec<f64>,
    pub directions: Vec<Direction>,
    pub repetitions: u32,
    /// RMS of the background roughness, µm; 0 disables it.
    pub background_rms: f64,
    /// mm
    pub background_correlation: f64,
    pub random_phase: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            wavelengths: Vec::new(),
            amplitudes: Vec::new(),
            velocities: vec![25.0, 50.0, 100.0],
            directions: vec![Direction::Positive],
            repetitions: 3,
            background_rms: 1.0,
            background_correlation: 0.05,
            random_phase: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvSettings {
    pub folds: usize,
    pub repeats: usize,
    pub k: usize,
    pub normalize: NormalizeMode,
    pub alpha: f64,
    /// Also classify with every velocity pooled.
    pub pooled: bool,
}

impl Default for CvSettings {
    fn default() -> Self {
        let plan = CvPlan::velocity_split(0);
        Self {
            folds: plan.folds,
            repeats: plan.repeats,
            k: KnnConfig::default().k,
            normalize: NormalizeMode::default(),
            alpha: 0.05,
            pooled: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSettings {
    pub trajectories: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub label: LabelKey,
    #[serde(rename = "design", default)]
    pub designs: Vec<DesignConfig>,
    #[serde(default)]
    pub scan: ScanSettings,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub pipeline: PipelineParams,
    #[serde(default)]
    pub cv: CvSettings,
    #[serde(default)]
    pub output: OutputSettings,
    /// Session manifest for `ingest`, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunKey {
    pub design: usize,
    pub wavelength: f64,
    pub amplitude: f64,
    pub velocity: f64,
    pub direction: Direction,
    pub repetition: u32,
}

fn dir_tag(d: Direction) -> &'static str {
    match d {
        Direction::Positive => "px",
        Direction::Negative => "nx",
    }
}

pub fn surface_id(wavelength: f64, amplitude: f64) -> String {
    format!("wl{wavelength}_a{amplitude}")
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Option<ExperimentConfig> {
        let (wavelengths, amplitudes, label) = match name {
            "initial-survey" => (
                vec![0.06, 0.24, 0.30, 0.60, 5.98],
                vec![10.0, 25.0, 50.0, 100.0],
                LabelKey::Surface,
            ),
            "wavelength-sweep" => (
                vec![0.27, 0.33, 0.36, 0.39, 0.42, 0.45, 0.48, 0.51, 0.54, 0.57],
                vec![10.0, 25.0, 50.0],
                LabelKey::Wavelength,
            ),
            "amplitude-sweep" => (
                vec![0.24, 0.30, 0.60],
                vec![15.0, 20.0, 30.0, 35.0, 40.0, 45.0],
                LabelKey::Amplitude,
            ),
            _ => return None,
        };
        Some(ExperimentConfig {
            name: name.to_string(),
            seed: 1,
            label,
            designs: vec![
                DesignConfig::new("flat", TipGeometry::flat()),
                DesignConfig::new("flat-ridged", TipGeometry::flat_ridged()),
            ],
            scan: ScanSettings::default(),
            sweep: SweepConfig {
                wavelengths,
                amplitudes,
                velocities: vec![25.0, 50.0, 100.0],
                ..SweepConfig::default()
            },
            pipeline: PipelineParams::default(),
            cv: CvSettings::default(),
            output: OutputSettings { trajectories: true },
            manifest: None,
        })
    }

    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let at = e.span().map(|s| format!(" (byte {})", s.start)).unwrap_or_default();
            Error::config("<config>", format!("{}{at}", e.message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config { path: key, message } if key == "<config>" => {
                Error::config(path.display().to_string(), message)
            }
            other => other,
        })?;
        if let (Some(m), Some(dir)) = (&cfg.manifest, path.parent()) {
            if m.is_relative() {
                cfg.manifest = Some(dir.join(m));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |key: String, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(key, format!("must be positive and finite, got {v}")))
            }
        };
        let mut ids = std::collections::BTreeSet::new();
        for (i, d) in self.designs.iter().enumerate() {
            if d.id.is_empty() || d.id.contains(['/', '\\', ',']) {
                return Err(Error::config(
                    format!("design[{i}].id"),
                    "must be non-empty without / \\ or ,",
                ));
            }
            if !ids.insert(&d.id) {
                return Err(Error::config(
                    format!("design[{i}].id"),
                    format!("duplicate id `{}`", d.id),
                ));
            }
            d.tip
                .validate()
                .map_err(|e| Error::config(format!("design[{i}].tip"), e.to_string()))?;
            d.stack
                .validate()
                .map_err(|e| Error::config(format!("design[{i}].stack"), e.to_string()))?;
            d.magnet
                .validate()
                .map_err(|e| Error::config(format!("design[{i}].magnet"), e.to_string()))?;
            d.layout
                .validate(&d.magnet)
                .map_err(|e| Error::config(format!("design[{i}].layout"), e.to_string()))?;
        }
        for (i, &w) in self.sweep.wavelengths.iter().enumerate() {
            positive(format!("sweep.wavelengths[{i}]"), w)?;
        }
        for (i, &a) in self.sweep.amplitudes.iter().enumerate() {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::config(
                    format!("sweep.amplitudes[{i}]"),
                    format!("must be non-negative, got {a}"),
                ));
            }
        }
        for (i, &v) in self.sweep.velocities.iter().enumerate() {
            positive(format!("sweep.velocities[{i}]"), v)?;
        }
        if !(self.sweep.background_rms >= 0.0) {
            return Err(Error::config("sweep.background_rms", "must be non-negative"));
        }
        if self.sweep.background_rms > 0.0 {
            positive("sweep.background_correlation".into(), self.sweep.background_correlation)?;
        }
        positive("scan.duration".into(), self.scan.duration)?;
        positive("scan.resolution".into(), self.scan.resolution)?;
        if !(self.scan.preload_depth >= 0.0) {
            return Err(Error::config("scan.preload_depth", "must be non-negative"));
        }
        if let Some(&v) = self.sweep.velocities.first() {
            self.scan_config(v, Direction::Positive)
                .validate()
                .map_err(|e| Error::config("scan", e.to_string()))?;
        }
        let p = &self.pipeline;
        positive("pipeline.target_rate".into(), p.target_rate)?;
        positive("pipeline.resample_rate".into(), p.resample_rate)?;
        if !(p.highpass > 0.0 && p.highpass < p.target_rate / 2.0) {
            return Err(Error::config("pipeline.highpass", "must lie in (0, target_rate / 2)"));
        }
        if !(p.prominence >= 0.0) {
            return Err(Error::config("pipeline.prominence", "must be non-negative"));
        }
        if self.cv.folds < 2 {
            return Err(Error::config("cv.folds", "must be at least 2"));
        }
        if self.cv.repeats == 0 {
            return Err(Error::config("cv.repeats", "must be at least 1"));
        }
        if self.cv.k == 0 {
            return Err(Error::config("cv.k", "must be at least 1"));
        }
        if !(self.cv.alpha > 0.0 && self.cv.alpha < 1.0) {
            return Err(Error::config("cv.alpha", "must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Short digest of the canonical config text.
    pub fn hash(&self) -> String {
        short_digest(self.to_toml().as_bytes())
    }

    pub fn plan(&self) -> CvPlan {
        CvPlan {
            folds: self.cv.folds,
            repeats: self.cv.repeats,
            seed: self.seed,
        }
    }

    pub fn label_for(&self, wavelength: f64, amplitude: f64) -> String {
        match self.label {
            LabelKey::Wavelength => format!("wl{wavelength}"),
            LabelKey::Amplitude => format!("a{amplitude}"),
            LabelKey::Surface => surface_id(wavelength, amplitude),
        }
    }

    /// All runs in (design, wavelength, amplitude, velocity, direction,
    /// repetition) order.
    pub fn runs(&self) -> Vec<RunKey> {
        let s = &self.sweep;
        let mut out = Vec::new();
        for design in 0..self.designs.len() {
            for &wavelength in &s.wavelengths {
                for &amplitude in &s.amplitudes {
                    for &velocity in &s.velocities {
                        for &direction in &s.directions {
                            for repetition in 0..s.repetitions {
                                out.push(RunKey {
                                    design,
                                    wavelength,
                                    amplitude,
                                    velocity,
                                    direction,
                                    repetition,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn scan_config(&self, velocity: f64, direction: Direction) -> ScanConfig {
        ScanConfig {
            velocity,
            direction,
            preload_depth: self.scan.preload_depth,
            duration: self.scan.duration,
            sim_rate: self.scan.sim_rate,
            output_rate: self.scan.output_rate,
            start_offset: self.scan.start_offset,
        }
    }

    /// Surface length covering every design's patch at `velocity`.
    pub fn surface_length(&self, velocity: f64) -> f64 {
        let width = self
            .designs
            .iter()
            .map(|d| d.tip.patch_width(self.scan.preload_depth))
            .fold(0.0, f64::max);
        self.scan_config(velocity, Direction::Positive).required_length(width)
    }

    /// Seed of one repetition; independent of the design so that every
    /// design scans the same surface.
    pub fn run_seed(&self, key: &RunKey) -> u64 {
        let text = format!(
            "{}|{}|{}|{}|{}",
            self.seed,
            surface_id(key.wavelength, key.amplitude),
            key.velocity,
            key.direction.as_str(),
            key.repetition
        );
        let digest = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn run_surface(&self, key: &RunKey) -> Result<(SurfaceProfile, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.run_seed(key));
        let phase = if self.sweep.random_phase {
            rng.random::<f64>() * std::f64::consts::TAU
        } else {
            0.0
        };
        let length = self.surface_length(key.velocity);
        let spec = SurfaceSpec::SumOfSinusoids {
            components: vec![SineComponent {
                wavelength: key.wavelength,
                amplitude: key.amplitude,
                phase,
            }],
        };
        let mut surface = generate_surface(&spec, length, self.scan.resolution)?;
        if self.sweep.background_rms > 0.0 {
            let background = SurfaceSpec::Stochastic {
                seed: rng.random(),
                correlation_length: self.sweep.background_correlation,
                rms_amplitude: self.sweep.background_rms,
            };
            surface = surface.superpose(&generate_surface(&background, length, self.scan.resolution)?)?;
        }
        Ok((surface, phase))
    }

    pub fn run_name(&self, key: &RunKey) -> String {
        format!(
            "{}_v{}_{}_r{}",
            surface_id(key.wavelength, key.amplitude),
            key.velocity,
            dir_tag(key.direction),
            key.repetition
        )
    }

    fn run_digest(&self, key: &RunKey) -> String {
        #[derive(Serialize)]
        struct RunSpec<'a> {
            schema: &'a str,
            seed: u64,
            name: String,
            design: &'a DesignConfig,
            scan: &'a ScanSettings,
            background_rms: f64,
            background_correlation: f64,
            random_phase: bool,
            label: String,
        }
        let spec = RunSpec {
            schema: RUN_SCHEMA,
            seed: self.seed,
            name: self.run_name(key),
            design: &self.designs[key.design],
            scan: &self.scan,
            background_rms: self.sweep.background_rms,
            background_correlation: self.sweep.background_correlation,
            random_phase: self.sweep.random_phase,
            label: self.label_for(key.wavelength, key.amplitude),
        };
        short_digest(toml::to_string(&spec).expect("run spec serialises").as_bytes())
    }
}

fn short_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    format!("{digest:x}")[..16].to_string()
}

/// Writes via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let result = (|| {
        let file = fs::File::create(&tmp)?;
        let mut w = std::io::BufWriter::new(file);
        fill(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()?;
        drop(w);
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// Runs `f` on a pool of `jobs` threads (all cores when `None`).
pub fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        builder = builder.num_threads(j.max(1));
    }
    let pool = builder.build().map_err(|e| Error::config("--jobs", e.to_string()))?;
    Ok(pool.install(f))
}

fn comment_map(comments: &[String]) -> BTreeMap<String, String> {
    comments
        .iter()
        .filter_map(|c| c.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

fn read_header_value(path: &Path, key: &str) -> Option<String> {
    use std::io::BufRead;
    let file = fs::File::open(path).ok()?;
    for line in BufReader::new(file).lines() {
        let line = line.ok()?;
        let Some(c) = line.strip_prefix('#') else { break };
        if let Some((k, v)) = c.trim().split_once('=') {
            if k.trim() == key {
                return Some(v.trim().to_string());
            }
        }
    }
    None
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimulateSummary {
    pub computed: usize,
    pub skipped: usize,
    pub warnings: Vec<String>,
}

/// Simulated trajectory and field of one run plus its provenance comments.
pub fn simulate_run(
    config: &ExperimentConfig,
    key: &RunKey,
) -> Result<(crate::mechanics::MagnetTrajectory, FieldSeries, Vec<String>)> {
    let design = &config.designs[key.design];
    let (surface, phase) = config.run_surface(key)?;
    let scan = config.scan_config(key.velocity, key.direction);
    let traj = simulate_scan(
        &design.tip,
        &design.stack,
        design.magnet.edge,
        &surface,
        &scan,
        &design.model,
    )?;
    let field = trajectory_to_field(&traj, &design.magnet, &design.layout)?;
    let comments = vec![
        format!("schema={RUN_SCHEMA}"),
        format!("config={}", config.hash()),
        format!("run={}", config.run_digest(key)),
        format!("seed={}", config.run_seed(key)),
        format!("design={}", design.id),
        format!("surface={}", surface_id(key.wavelength, key.amplitude)),
        format!("label={}", config.label_for(key.wavelength, key.amplitude)),
        format!("wavelength_mm={}", key.wavelength),
        format!("amplitude_um={}", key.amplitude),
        format!("phase_rad={phase}"),
        format!("velocity={}", key.velocity),
        format!("direction={}", key.direction.as_str()),
        format!("repetition={}", key.repetition),
        format!("saturated={}", field.saturated),
    ];
    Ok((traj, field, comments))
}

/// Runs the full sweep, skipping runs whose outputs already match.
pub fn cmd_simulate(config: &ExperimentConfig, out: &Path, force: bool) -> Result<SimulateSummary> {
    let runs = config.runs();
    let mut summary = SimulateSummary::default();
    if runs.is_empty() {
        summary.warnings.push("scan grid is empty; nothing to simulate".into());
        return Ok(summary);
    }
    let results: Vec<Result<bool>> = runs
        .par_iter()
        .map(|key| {
            let design = &config.designs[key.design];
            let dir = out.join("runs").join(&design.id);
            let name = config.run_name(key);
            let field_path = dir.join(format!("{name}.field.csv"));
            let digest = config.run_digest(key);
            let traj_ok = !config.output.trajectories || dir.join(format!("{name}.traj.csv")).exists();
            if !force && traj_ok && read_header_value(&field_path, "run").as_deref() == Some(digest.as_str()) {
                return Ok(false);
            }
            let (traj, field, comments) = simulate_run(config, key)?;
            if config.output.trajectories {
                write_atomic(&dir.join(format!("{name}.traj.csv")), |w| {
                    for c in &comments {
                        writeln!(w, "# {c}")?;
                    }
                    traj.write_csv(w)
                })?;
            }
            write_atomic(&field_path, |w| field.write_csv(w, &comments))?;
            Ok(true)
        })
        .collect();
    for (key, r) in runs.iter().zip(results) {
        match r {
            Ok(true) => summary.computed += 1,
            Ok(false) => summary.skipped += 1,
            Err(e) => {
                return Err(match e {
                    Error::Io { .. } | Error::Diverged { .. } | Error::SingularPosition { .. } => e,
                    other => Error::config(
                        format!("run {}/{}", config.designs[key.design].id, config.run_name(key)),
                        other.to_string(),
                    ),
                })
            }
        }
    }
    Ok(summary)
}

fn field_files(root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let Ok(entries) = fs::read_dir(root) else {
        return Ok(());
    };
    for entry in entries {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if path.is_dir() {
            field_files(&path, out)?;
        } else if path.to_str().is_some_and(|p| p.ends_with(".field.csv")) {
            out.push(path);
        }
    }
    Ok(())
}

#[derive(Debug, Default)]
pub struct FeaturesSummary {
    pub tables: Vec<PathBuf>,
    pub rows: usize,
    pub failures: Vec<(PathBuf, Error)>,
}

fn feature_row(path: &Path, pipeline: &PipelineParams) -> Result<(String, FeatureVector, String, RowMeta)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let (field, comments) = FieldSeries::read_csv(BufReader::new(file), path, Provenance::Simulated)?;
    let meta = comment_map(&comments);
    let get = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| Error::data(path, format!("missing `{k}` header comment")))
    };
    let num = |k: &str| -> Result<u32> {
        meta.get(k).map_or(Ok(0), |v| {
            v.parse()
                .map_err(|_| Error::data(path, format!("bad `{k}` value `{v}`")))
        })
    };
    let velocity: f64 = get("velocity")?
        .parse()
        .map_err(|_| Error::data(path, "bad `velocity` value"))?;
    let features = extract(&field, pipeline).map_err(|e| Error::data(path, e.to_string()))?;
    let row = RowMeta {
        design: get("design")?,
        surface: get("surface")?,
        velocity,
        direction: get("direction")?,
        repetition: num("repetition")?,
        trial: num("trial")?,
        pass: num("pass")?,
    };
    Ok((row.design.clone(), features, get("label")?, row))
}

/// Extracts features from every field CSV under `input`, writing one table
/// per design into `out/features`.
pub fn cmd_features(config: &ExperimentConfig, input: &Path, out: &Path) -> Result<FeaturesSummary> {
    let mut files = Vec::new();
    field_files(input, &mut files)?;
    files.sort();
    let results: Vec<Result<(String, FeatureVector, String, RowMeta)>> =
        files.par_iter().map(|p| feature_row(p, &config.pipeline)).collect();

    let mut summary = FeaturesSummary::default();
    let mut by_design: BTreeMap<String, Vec<(FeatureVector, String, RowMeta)>> = BTreeMap::new();
    for (path, r) in files.iter().zip(results) {
        match r {
            Ok((design, f, label, meta)) => by_design.entry(design).or_default().push((f, label, meta)),
            Err(e) => summary.failures.push((path.clone(), e)),
        }
    }
    if by_design.is_empty() && !summary.failures.is_empty() {
        let (path, first) = summary.failures.remove(0);
        return Err(Error::data(path, format!("no field file could be processed: {first}")));
    }
    let comments = vec![
        format!("config={}", config.hash()),
        format!(
            "pipeline={}",
            toml::to_string(&config.pipeline)
                .unwrap_or_default()
                .replace('\n', " ")
                .trim()
        ),
    ];
    for (design, rows) in by_design {
        summary.rows += rows.len();
        let ds = LabeledDataset::from_named(rows)?;
        let path = out.join("features").join(format!("{design}.csv"));
        let mut c = comments.clone();
        c.push(format!("design={design}"));
        write_atomic(&path, |w| write_feature_table(w, &ds, &c))?;
        summary.tables.push(path);
    }
    Ok(summary)
}

pub fn load_feature_tables(out: &Path) -> Result<BTreeMap<String, LabeledDataset>> {
    let dir = out.join("features");
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    let mut out = BTreeMap::new();
    for p in paths {
        let file = fs::File::open(&p).map_err(|e| Error::io(&p, e))?;
        let ds = read_feature_table(BufReader::new(file), &p)?;
        let design = p.file_stem().and_then(|s| s.to_str()).unwrap_or("unknown").to_string();
        out.insert(design, ds);
    }
    Ok(out)
}

/// Accuracy distributions for one design and velocity scope.
#[derive(Debug, Clone, PartialEq)]
pub struct ScopeResult {
    pub design: String,
    /// Velocity in mm/s, or `pooled`.
    pub scope: String,
    pub mode: NormalizeMode,
    pub accuracy: AccuracyDistribution,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonResult {
    pub scope: String,
    pub designs: Vec<String>,
    pub anova: crate::learn::AnovaResult,
    pub tukey: Vec<crate::learn::TukeyResult>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassifyReport {
    pub results: Vec<ScopeResult>,
    pub comparisons: Vec<ComparisonResult>,
}

impl ClassifyReport {
    pub fn get(&self, design: &str, scope: &str, mode: NormalizeMode) -> Option<&AccuracyDistribution> {
        self.results
            .iter()
            .find(|r| r.design == design && r.scope == scope && r.mode == mode)
            .map(|r| &r.accuracy)
    }
}

fn scopes(ds: &LabeledDataset, pooled: bool) -> Vec<(String, LabeledDataset)> {
    let mut velocities: Vec<f64> = ds.rows.iter().map(|r| r.meta.velocity).collect();
    velocities.sort_by(f64::total_cmp);
    velocities.dedup();
    let mut out: Vec<(String, LabeledDataset)> = velocities
        .iter()
        .map(|&v| (v.to_string(), ds.filter(|r| r.meta.velocity == v)))
        .collect();
    if pooled && velocities.len() > 1 {
        out.push(("pooled".into(), ds.clone()));
    }
    out
}

/// Cross-validated accuracy per design and velocity (plus pooled), in
/// both normalisation modes, and design comparisons in the configured mode.
pub fn classify_tables(config: &ExperimentConfig, tables: &BTreeMap<String, LabeledDataset>) -> Result<ClassifyReport> {
    let plan = config.plan();
    let knn = KnnConfig { k: config.cv.k };
    let mut jobs = Vec::new();
    for (design, ds) in tables {
        if ds.class_count() < 2 {
            return Err(Error::data(
                format!("features/{design}.csv"),
                format!("classification needs at least 2 classes, found {}", ds.class_count()),
            ));
        }
        for (scope, subset) in scopes(ds, config.cv.pooled) {
            for mode in [NormalizeMode::Full, NormalizeMode::FoldSafe] {
                jobs.push((design.clone(), scope.clone(), mode, subset.clone()));
            }
        }
    }
    let results = jobs
        .into_iter()
        .map(|(design, scope, mode, subset)| {
            let accuracy = evaluate(&subset, &plan, &knn, mode).map_err(|e| match e {
                Error::ClassTooSmall { label, count, folds } => Error::data(
                    format!("features/{design}.csv"),
                    format!(
                        "class `{}` has {count} rows at velocity {scope}, fewer than {folds} folds",
                        subset.classes.get(label).cloned().unwrap_or_default()
                    ),
                ),
                other => other,
            })?;
            Ok(ScopeResult {
                design,
                scope,
                mode,
                accuracy,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut report = ClassifyReport {
        results,
        comparisons: Vec::new(),
    };
    if tables.len() >= 2 {
        let mut scope_names: Vec<String> = Vec::new();
        for r in &report.results {
            if !scope_names.contains(&r.scope) {
                scope_names.push(r.scope.clone());
            }
        }
        for scope in scope_names {
            let members: Vec<&ScopeResult> = report
                .results
                .iter()
                .filter(|r| r.scope == scope && r.mode == config.cv.normalize)
                .collect();
            if members.len() < 2 {
                continue;
            }
            let groups: Vec<Vec<f64>> = members.iter().map(|r| r.accuracy.accuracies()).collect();
            report.comparisons.push(ComparisonResult {
                scope: scope.clone(),
                designs: members.iter().map(|r| r.design.clone()).collect(),
                anova: anova_oneway(&groups)?,
                tukey: tukey_hsd(&groups, config.cv.alpha)?,
            });
        }
    }
    Ok(report)
}

pub fn write_classify_report(config: &ExperimentConfig, report: &ClassifyReport, out: &Path) -> Result<Vec<PathBuf>> {
    let reports = out.join("reports");
    let header = vec![
        format!("config={}", config.hash()),
        format!("layout={LAYOUT_VERSION}"),
        format!(
            "plan=folds:{} repeats:{} seed:{} k:{}",
            config.cv.folds, config.cv.repeats, config.seed, config.cv.k
        ),
    ];
    let records: Vec<AccuracyRecord> = report
        .results
        .iter()
        .map(|r| AccuracyRecord {
            design: &r.design,
            velocity: &r.scope,
            mode: r.mode,
            distribution: &r.accuracy,
        })
        .collect();
    let acc_path = reports.join("accuracy.csv");
    write_atomic(&acc_path, |w| write_accuracy_report(w, &records, &header))?;

    let stats_path = reports.join("stats.csv");
    write_atomic(&stats_path, |w| {
        for c in &header {
            writeln!(w, "# {c}")?;
        }
        writeln!(w, "# normalize={}", config.cv.normalize.as_str())?;
        for c in &report.comparisons {
            let groups: Vec<Vec<f64>> = c
                .designs
                .iter()
                .map(|d| {
                    report
                        .get(d, &c.scope, config.cv.normalize)
                        .map(|a| a.accuracies())
                        .unwrap_or_default()
                })
                .collect();
            write_stats_report(&mut *w, &c.scope, &c.designs, &groups, &c.anova, &c.tukey)?;
        }
        Ok(())
    })?;

    let summary_path = reports.join("summary.csv");
    write_atomic(&summary_path, |w| {
        for c in &header {
            writeln!(w, "# {c}")?;
        }
        writeln!(w, "design,velocity,normalize,models,mean,std")?;
        for r in &report.results {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.design,
                r.scope,
                r.mode.as_str(),
                r.accuracy.models.len(),
                r.accuracy.mean(),
                r.accuracy.std()
            )?;
        }
        Ok(())
    })?;

    let mut written = vec![acc_path, stats_path, summary_path];
    written.extend(write_plots(config, report, out)?);
    Ok(written)
}

fn write_plots(config: &ExperimentConfig, report: &ClassifyReport, out: &Path) -> Result<Vec<PathBuf>> {
    let mut scopes: Vec<&str> = Vec::new();
    for r in &report.results {
        if !scopes.contains(&r.scope.as_str()) {
            scopes.push(&r.scope);
        }
    }
    let mut written = Vec::new();
    for scope in scopes {
        let groups: Vec<(String, Vec<f64>)> = report
            .results
            .iter()
            .filter(|r| r.scope == scope && r.mode == config.cv.normalize)
            .map(|r| (r.design.clone(), r.accuracy.accuracies()))
            .collect();
        let title = if scope == "pooled" {
            "accuracy, all velocities".to_string()
        } else {
            format!("accuracy at {scope} mm/s")
        };
        let svg = box_plot_svg(&title, "accuracy", &groups);
        let path = out.join("plots").join(format!("accuracy_{scope}.svg"));
        write_atomic(&path, |w| w.write_all(svg.as_bytes()))?;
        written.push(path);
    }
    Ok(written)
}

pub fn cmd_classify(config: &ExperimentConfig, out: &Path) -> Result<ClassifyReport> {
    let tables = load_feature_tables(out)?;
    if tables.is_empty() {
        return Err(Error::data(out.join("features"), "no feature tables found"));
    }
    let report = classify_tables(config, &tables)?;
    write_classify_report(config, &report, out)?;
    Ok(report)
}

/// Re-renders plots and the summary from an existing accuracy report.
pub fn cmd_report(config: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let path = out.join("reports").join("accuracy.csv");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut results: Vec<ScopeResult> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.starts_with("design,") || line.trim().is_empty() {
            continue;
        }
        let bad = || Error::data(&path, format!("malformed line {}", i + 1));
        let c: Vec<&str> = line.split(',').collect();
        if c.len() != 6 {
            return Err(bad());
        }
        let mode = match c[2] {
            "full" => NormalizeMode::Full,
            "fold-safe" => NormalizeMode::FoldSafe,
            _ => return Err(bad()),
        };
        let m = crate::learn::ModelAccuracy {
            repeat: c[3].parse().map_err(|_| bad())?,
            fold: c[4].parse().map_err(|_| bad())?,
            accuracy: c[5].parse().map_err(|_| bad())?,
        };
        match results
            .iter_mut()
            .find(|r| r.design == c[0] && r.scope == c[1] && r.mode == mode)
        {
            Some(r) => r.accuracy.models.push(m),
            None => results.push(ScopeResult {
                design: c[0].to_string(),
                scope: c[1].to_string(),
                mode,
                accuracy: AccuracyDistribution { models: vec![m] },
            }),
        }
    }
    let report = ClassifyReport {
        results,
        comparisons: Vec::new(),
    };
    write_plots(config, &report, out)
}

#[derive(Debug, Default)]
pub struct IngestSummary {
    /// (log file, passes written, flags)
    pub processed: Vec<(PathBuf, usize, Vec<String>)>,
    pub failures: Vec<(PathBuf, Error)>,
}

/// Segments every log in the manifest into pass field CSVs and an index.
pub fn cmd_ingest(config: &ExperimentConfig, manifest: &Manifest, out: &Path) -> Result<IngestSummary> {
    let dir = out.join("passes");
    let results: Vec<Result<(Vec<ingest::Pass>, Vec<String>)>> = manifest
        .session
        .par_iter()
        .map(|s| {
            let text = fs::read_to_string(&s.path).map_err(|e| Error::io(&s.path, e))?;
            let parsed = ingest::parse_log(&text).map_err(|e| Error::data(&s.path, e.to_string()))?;
            let seg =
                ingest::ingest_records(&parsed.records, &s.meta).map_err(|e| Error::data(&s.path, e.to_string()))?;
            let mut flags = seg.flags;
            flags.extend(parsed.diagnostics.iter().map(|(l, m)| format!("line {l}: {m}")));
            Ok((seg.passes, flags))
        })
        .collect();

    let mut summary = IngestSummary::default();
    let mut index = Vec::new();
    for (entry, r) in manifest.session.iter().zip(results) {
        match r {
            Ok((passes, flags)) => {
                let stem = entry
                    .path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("log")
                    .to_string();
                for p in &passes {
                    let name = format!("{stem}_p{}.field.csv", p.index);
                    let comments = vec![
                        format!("schema={RUN_SCHEMA}"),
                        format!("config={}", config.hash()),
                        format!("source={}", entry.path.display()),
                        format!("design={}", p.meta.design),
                        format!("surface={}", p.meta.material),
                        format!("label={}", p.meta.material),
                        format!("velocity={}", p.meta.velocity),
                        format!("velocity_measured={}", p.velocity),
                        format!("direction={}", p.direction.as_str()),
                        format!("repetition={}", p.meta.repetition),
                        format!("trial={}", p.meta.trial),
                        format!("pass={}", p.index),
                    ];
                    write_atomic(&dir.join(&name), |w| p.field.write_csv(w, &comments))?;
                    let mut row = Vec::new();
                    ingest::write_pass_index_row(&mut row, &name, p).map_err(|e| Error::io(&dir, e))?;
                    index.push(String::from_utf8_lossy(&row).into_owned());
                }
                summary.processed.push((entry.path.clone(), passes.len(), flags));
            }
            Err(e) => summary.failures.push((entry.path.clone(), e)),
        }
    }
    if !manifest.session.is_empty() && summary.processed.is_empty() {
        let (_, e) = summary.failures.remove(0);
        return Err(e);
    }
    if !manifest.session.is_empty() {
        let hash = config.hash();
        write_atomic(&dir.join("index.csv"), |w| {
            writeln!(w, "# config={hash}")?;
            writeln!(w, "{PASS_INDEX_HEADER}")?;
            for line in &index {
                w.write_all(line.as_bytes())?;
            }
            Ok(())
        })?;
    }
    Ok(summary)
}
