//! Time- and frequency-domain features of a triaxial field recording.
//!
//! Each axis contributes 22 slots in a fixed order:
//!
//! | slots | family | contents |
//! |-------|--------|----------|
//! | 0..5  | time | mean, peak-to-peak, std, skewness, kurtosis |
//! | 5..13 | spectrum | centroid/std/skew/kurt along frequency (power weighted), then mean/std/skew/kurt of the power values |
//! | 13..22 | peaks | count, mean/std/skew/kurt of peak frequencies, mean/std/skew/kurt of peak powers |
//!
//! Axes are laid out x, y, z for 66 slots in total. Kurtosis is Pearson
//! (a Gaussian reads 3). Degenerate moments are 0, never NaN.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::{self, PowerSpectrum, SpectralPeak, UniformSeries};
use crate::error::{Error, Result};
use crate::magnetics::{estimate_rate, FieldSeries};

pub const LAYOUT_VERSION: &str = "tf66-v1";
pub const AXIS_SLOTS: usize = 22;
pub const FEATURE_COUNT: usize = 3 * AXIS_SLOTS;

const AXES: [&str; 3] = ["bx", "by", "bz"];
const SLOT_NAMES: [&str; AXIS_SLOTS] = [
    "mean",
    "p2p",
    "std",
    "skew",
    "kurt",
    "spec_centroid_f",
    "spec_std_f",
    "spec_skew_f",
    "spec_kurt_f",
    "spec_centroid_p",
    "spec_std_p",
    "spec_skew_p",
    "spec_kurt_p",
    "peak_count",
    "peak_mean_f",
    "peak_std_f",
    "peak_skew_f",
    "peak_kurt_f",
    "peak_mean_p",
    "peak_std_p",
    "peak_skew_p",
    "peak_kurt_p",
];
const SLOT_UNITS: [UnitGroup; AXIS_SLOTS] = {
    use UnitGroup::*;
    [
        FieldLsb,
        FieldLsb,
        FieldLsb,
        Dimensionless,
        Dimensionless, //
        FrequencyHz,
        FrequencyHz,
        Dimensionless,
        Dimensionless, //
        PowerLsb,
        PowerLsb,
        Dimensionless,
        Dimensionless, //
        Count,         //
        FrequencyHz,
        FrequencyHz,
        Dimensionless,
        Dimensionless, //
        PowerLsb,
        PowerLsb,
        Dimensionless,
        Dimensionless,
    ]
};

// Below this the variance is treated as zero.
const VARIANCE_FLOOR: f64 = 1e-20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum UnitGroup {
    FieldLsb,
    FrequencyHz,
    PowerLsb,
    Dimensionless,
    Count,
}

impl UnitGroup {
    pub const ALL: [UnitGroup; 5] = [
        UnitGroup::FieldLsb,
        UnitGroup::FrequencyHz,
        UnitGroup::PowerLsb,
        UnitGroup::Dimensionless,
        UnitGroup::Count,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UnitGroup::FieldLsb => "field-LSB",
            UnitGroup::FrequencyHz => "frequency-Hz",
            UnitGroup::PowerLsb => "power-LSB",
            UnitGroup::Dimensionless => "dimensionless",
            UnitGroup::Count => "count",
        }
    }

    /// Slot indices belonging to this group.
    pub fn members(self) -> Vec<usize> {
        (0..FEATURE_COUNT)
            .filter(|&i| SLOT_UNITS[i % AXIS_SLOTS] == self)
            .collect()
    }
}

pub fn unit_of(slot: usize) -> UnitGroup {
    SLOT_UNITS[slot % AXIS_SLOTS]
}

pub fn feature_names() -> Vec<String> {
    AXES.iter()
        .flat_map(|a| SLOT_NAMES.iter().map(move |s| format!("{a}_{s}")))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub version: String,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != FEATURE_COUNT {
            return Err(Error::DimensionMismatch {
                expected: FEATURE_COUNT,
                got: values.len(),
            });
        }
        Ok(Self {
            values,
            version: LAYOUT_VERSION.to_string(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineParams {
    /// Uniform grid for sources faster than `target_rate`, Hz.
    pub resample_rate: f64,
    /// Hz
    pub target_rate: f64,
    /// Hz
    pub highpass: f64,
    /// Minimum peak prominence, LSB.
    pub prominence: f64,
    pub max_peaks: usize,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            resample_rate: 5000.0,
            target_rate: 330.0,
            highpass: 2.0,
            prominence: 2.0,
            max_peaks: 20,
        }
    }
}

/// Population moments: mean, std, skewness, Pearson kurtosis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
    pub skew: f64,
    pub kurt: f64,
}

impl Moments {
    pub const ZERO: Moments = Moments {
        mean: 0.0,
        std: 0.0,
        skew: 0.0,
        kurt: 0.0,
    };

    pub fn of(values: &[f64]) -> Moments {
        if values.is_empty() {
            return Moments::ZERO;
        }
        Self::weighted(values.iter().map(|&v| (v, 1.0)))
    }

    /// Moments of `(value, weight)` pairs; weights need not be normalised.
    pub fn weighted(pairs: impl Iterator<Item = (f64, f64)> + Clone) -> Moments {
        let total: f64 = pairs.clone().map(|(_, w)| w).sum();
        if !(total > 0.0) {
            return Moments::ZERO;
        }
        let mean = pairs.clone().map(|(v, w)| v * w).sum::<f64>() / total;
        let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
        for (v, w) in pairs {
            let d = v - mean;
            let d2 = d * d;
            m2 += w * d2;
            m3 += w * d2 * d;
            m4 += w * d2 * d2;
        }
        m2 /= total;
        m3 /= total;
        m4 /= total;
        if m2 <= VARIANCE_FLOOR * (1.0 + mean * mean) {
            return Moments { mean, ..Moments::ZERO };
        }
        Moments {
            mean,
            std: m2.sqrt(),
            skew: m3 / m2.powf(1.5),
            kurt: m4 / (m2 * m2),
        }
    }
}

/// `[mean, p2p, std, skewness, kurtosis]`.
pub fn time_features(series: &UniformSeries) -> Result<[f64; 5]> {
    if series.len() < 4 {
        return Err(Error::TooShort {
            len: series.len(),
            min: 4,
        });
    }
    let v = &series.values;
    let m = Moments::of(v);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    Ok([m.mean, max - min, m.std, m.skew, m.kurt])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectrumFeatures {
    pub values: [f64; 8],
    /// Set when the spectrum carried no power; values are then all zero.
    pub zero_power: bool,
}

pub fn spectrum_features(spec: &PowerSpectrum) -> SpectrumFeatures {
    let total: f64 = spec.power.iter().sum();
    if spec.power.is_empty() || !(total > 0.0) {
        return SpectrumFeatures {
            values: [0.0; 8],
            zero_power: true,
        };
    }
    let f = Moments::weighted(spec.freqs.iter().copied().zip(spec.power.iter().copied()));
    let p = Moments::of(&spec.power);
    SpectrumFeatures {
        values: [f.mean, f.std, f.skew, f.kurt, p.mean, p.std, p.skew, p.kurt],
        zero_power: false,
    }
}

/// `[count, mean/std/skew/kurt of freq, mean/std/skew/kurt of power]`.
/// Higher moments need at least four peaks.
pub fn peak_features(peaks: &[SpectralPeak]) -> [f64; 9] {
    if peaks.is_empty() {
        return [0.0; 9];
    }
    let freqs: Vec<f64> = peaks.iter().map(|p| p.freq).collect();
    let powers: Vec<f64> = peaks.iter().map(|p| p.power).collect();
    let (mut f, mut p) = (Moments::of(&freqs), Moments::of(&powers));
    if peaks.len() < 4 {
        f.skew = 0.0;
        f.kurt = 0.0;
        p.skew = 0.0;
        p.kurt = 0.0;
    }
    [
        peaks.len() as f64,
        f.mean,
        f.std,
        f.skew,
        f.kurt,
        p.mean,
        p.std,
        p.skew,
        p.kurt,
    ]
}

/// Conditions one axis onto the uniform `target_rate` grid and removes drift.
pub fn condition_axis(times: &[f64], values: &[f64], params: &PipelineParams) -> Result<UniformSeries> {
    let native = estimate_rate(times);
    let uniform = if native > params.target_rate {
        let grid = dsp::resample(times, values, params.resample_rate.max(params.target_rate))?;
        if grid.rate > params.target_rate {
            dsp::downsample(&grid, params.target_rate)?
        } else {
            grid
        }
    } else {
        dsp::resample(times, values, params.target_rate)?
    };
    if uniform.duration() < 1.0 - 1e-9 {
        return Err(Error::TooShort {
            len: uniform.len(),
            min: params.target_rate.ceil() as usize + 1,
        });
    }
    dsp::highpass(&uniform, params.highpass)
}

/// Full per-recording feature extraction.
pub fn extract(field: &FieldSeries, params: &PipelineParams) -> Result<FeatureVector> {
    let mut values = Vec::with_capacity(FEATURE_COUNT);
    for axis in 0..3 {
        let raw: Vec<f64> = field.axis(axis).iter().map(|&c| c as f64).collect();
        let series = condition_axis(&field.times, &raw, params)?;
        values.extend(time_features(&series)?);
        let spec = dsp::power_spectrum(&series)?;
        values.extend(spectrum_features(&spec).values);
        let peaks = dsp::find_peaks(&spec, params.prominence, params.max_peaks);
        values.extend(peak_features(&peaks));
    }
    FeatureVector::new(values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowMeta {
    pub design: String,
    pub surface: String,
    pub velocity: f64,
    pub direction: String,
    pub repetition: u32,
    pub trial: u32,
    /// Pass number within an ingested log; 0 for simulated runs.
    pub pass: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRow {
    pub features: FeatureVector,
    pub label: usize,
    pub meta: RowMeta,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledDataset {
    pub rows: Vec<LabeledRow>,
    /// Class names indexed by label id.
    pub classes: Vec<String>,
}

impl LabeledDataset {
    /// Builds a dataset from `(features, class name, meta)` rows. Class ids
    /// are assigned in sorted name order.
    pub fn from_named(rows: Vec<(FeatureVector, String, RowMeta)>) -> Result<Self> {
        let names: BTreeMap<String, usize> = rows
            .iter()
            .map(|(_, n, _)| n.clone())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .enumerate()
            .map(|(i, n)| (n, i))
            .collect();
        let classes = names.keys().cloned().collect();
        let rows = rows
            .into_iter()
            .map(|(features, name, meta)| LabeledRow {
                label: names[&name],
                features,
                meta,
            })
            .collect();
        let ds = LabeledDataset { rows, classes };
        ds.check_layout()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.label).collect()
    }

    pub fn class_count(&self) -> usize {
        self.rows
            .iter()
            .map(|r| r.label)
            .collect::<std::collections::BTreeSet<_>>()
            .len()
    }

    pub fn check_layout(&self) -> Result<()> {
        let Some(first) = self.rows.first() else {
            return Ok(());
        };
        for r in &self.rows {
            if r.features.version != first.features.version {
                return Err(Error::SchemaMismatch {
                    expected: first.features.version.clone(),
                    got: r.features.version.clone(),
                });
            }
            if r.features.values.len() != first.features.values.len() {
                return Err(Error::DimensionMismatch {
                    expected: first.features.values.len(),
                    got: r.features.values.len(),
                });
            }
        }
        Ok(())
    }

    /// Rows whose predicate holds, keeping class ids.
    pub fn filter(&self, keep: impl Fn(&LabeledRow) -> bool) -> LabeledDataset {
        LabeledDataset {
            rows: self.rows.iter().filter(|r| keep(r)).cloned().collect(),
            classes: self.classes.clone(),
        }
    }
}

/// Per-unit-group min/max scaling fitted on a subset of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    /// (min, max) per slot, shared across each group's members.
    ranges: Vec<(f64, f64)>,
}

impl Normalizer {
    pub fn fit(dataset: &LabeledDataset, fit_rows: &[usize]) -> Result<Normalizer> {
        if fit_rows.is_empty() {
            return Err(Error::InvalidDataset("normalization needs at least one fit row".into()));
        }
        let dim = dataset.rows[fit_rows[0]].features.values.len();
        let mut group_range: BTreeMap<UnitGroup, (f64, f64)> = BTreeMap::new();
        for &r in fit_rows {
            let v = &dataset.rows[r].features.values;
            for (slot, &x) in v.iter().enumerate() {
                let e = group_range
                    .entry(unit_of(slot))
                    .or_insert((f64::INFINITY, f64::NEG_INFINITY));
                e.0 = e.0.min(x);
                e.1 = e.1.max(x);
            }
        }
        Ok(Normalizer {
            ranges: (0..dim).map(|s| group_range[&unit_of(s)]).collect(),
        })
    }

    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .zip(&self.ranges)
            .map(|(&x, &(lo, hi))| if hi > lo { (x - lo) / (hi - lo) } else { 0.5 })
            .collect()
    }
}

/// Returns a copy of `dataset` with every row scaled by ranges fitted on `fit_rows`.
pub fn normalize(dataset: &LabeledDataset, fit_rows: &[usize]) -> Result<LabeledDataset> {
    let norm = Normalizer::fit(dataset, fit_rows)?;
    let mut out = dataset.clone();
    for row in &mut out.rows {
        row.features.values = norm.apply(&row.features.values);
    }
    Ok(out)
}

const META_COLUMNS: [&str; 8] = [
    "design",
    "surface",
    "label",
    "velocity",
    "direction",
    "repetition",
    "trial",
    "pass",
];

/// Writes a feature table; `comments` become `# ` header lines.
pub fn write_feature_table<W: Write>(mut w: W, dataset: &LabeledDataset, comments: &[String]) -> std::io::Result<()> {
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    writeln!(w, "# layout={LAYOUT_VERSION}")?;
    let mut header: Vec<String> = META_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(feature_names());
    writeln!(w, "{}", header.join(","))?;
    for row in &dataset.rows {
        let m = &row.meta;
        let mut cols = vec![
            m.design.clone(),
            m.surface.clone(),
            dataset.classes[row.label].clone(),
            m.velocity.to_string(),
            m.direction.clone(),
            m.repetition.to_string(),
            m.trial.to_string(),
            m.pass.to_string(),
        ];
        cols.extend(row.features.values.iter().map(|v| v.to_string()));
        writeln!(w, "{}", cols.join(","))?;
    }
    Ok(())
}

pub fn read_feature_table<R: BufRead>(r: R, source: &Path) -> Result<LabeledDataset> {
    let mut version = None;
    let mut header_seen = false;
    let mut rows = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(c) = line.strip_prefix('#') {
            if let Some(v) = c.trim().strip_prefix("layout=") {
                version = Some(v.to_string());
            }
            continue;
        }
        if !header_seen {
            let cols: Vec<&str> = line.split(',').collect();
            let names = feature_names();
            if cols.len() != META_COLUMNS.len() + FEATURE_COUNT
                || cols[..META_COLUMNS.len()] != META_COLUMNS
                || cols[META_COLUMNS.len()..] != names.iter().map(|s| s.as_str()).collect::<Vec<_>>()[..]
            {
                return Err(Error::SchemaMismatch {
                    expected: LAYOUT_VERSION.into(),
                    got: "unrecognised column header".into(),
                });
            }
            header_seen = true;
            continue;
        }
        let version = version.clone().unwrap_or_default();
        if version != LAYOUT_VERSION {
            return Err(Error::SchemaMismatch {
                expected: LAYOUT_VERSION.into(),
                got: version,
            });
        }
        let bad = || Error::data(source, format!("malformed row at line {}", lineno + 1));
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != META_COLUMNS.len() + FEATURE_COUNT {
            return Err(bad());
        }
        let meta = RowMeta {
            design: cols[0].to_string(),
            surface: cols[1].to_string(),
            velocity: cols[3].parse().map_err(|_| bad())?,
            direction: cols[4].to_string(),
            repetition: cols[5].parse().map_err(|_| bad())?,
            trial: cols[6].parse().map_err(|_| bad())?,
            pass: cols[7].parse().map_err(|_| bad())?,
        };
        let values = cols[META_COLUMNS.len()..]
            .iter()
            .map(|c| c.parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        rows.push((FeatureVector::new(values)?, cols[2].to_string(), meta));
    }
    LabeledDataset::from_named(rows)
}
