//! Recorded sensor logs: parsing, contact detection and pass segmentation.
//!
//! Log lines are `t_s,x_um,z_um,bx,by,bz` with `#` comment lines. The
//! first comment line of a file written here is [`LOG_SCHEMA`].

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dsp::ema;
use crate::error::{Error, Result};
use crate::magnetics::{estimate_rate, FieldSeries, Provenance};
use crate::mechanics::Direction;

pub const LOG_SCHEMA: &str = "tactile-log v1";
pub const LOG_HEADER: &str = "t_s,x_um,z_um,bx,by,bz";

pub const CONTACT_ALPHA: f64 = 0.12;
/// LSB
pub const CONTACT_THRESHOLD: f64 = 10.0;
pub const BASELINE_SAMPLES: usize = 50;
/// µm of travel that separates two passes.
pub const MIN_TRAVEL_UM: f64 = 1000.0;
/// s
pub const MIN_PASS_DURATION: f64 = 0.2;
/// Allowed relative deviation of measured from nominal speed.
pub const VELOCITY_TOLERANCE: f64 = 0.2;
/// Largest tolerated fraction of malformed data lines.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    /// s
    pub t: f64,
    /// µm
    pub x_enc: f64,
    /// µm
    pub z_enc: f64,
    pub bx: i32,
    pub by: i32,
    pub bz: i32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParsedLog {
    pub records: Vec<LogRecord>,
    /// Comment lines without the leading `#`.
    pub comments: Vec<String>,
    /// (1-based line number, problem)
    pub diagnostics: Vec<(usize, String)>,
}

fn parse_line(line: &str) -> std::result::Result<LogRecord, String> {
    let cols: Vec<&str> = line.split(',').map(str::trim).collect();
    if cols.len() != 6 {
        return Err(format!("expected 6 fields, found {}", cols.len()));
    }
    let real = |i: usize| -> std::result::Result<f64, String> {
        match cols[i].parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(format!("field {} `{}` is not a finite number", i + 1, cols[i])),
        }
    };
    let count = |i: usize| -> std::result::Result<i32, String> {
        cols[i]
            .parse::<i32>()
            .map_err(|_| format!("field {} `{}` is not an integer count", i + 1, cols[i]))
    };
    Ok(LogRecord {
        t: real(0)?,
        x_enc: real(1)?,
        z_enc: real(2)?,
        bx: count(3)?,
        by: count(4)?,
        bz: count(5)?,
    })
}

/// Parses a log. Bad lines, including ones that step back in time, are
/// collected as diagnostics; more than 1% of them rejects the file.
pub fn parse_log(text: &str) -> Result<ParsedLog> {
    let mut out = ParsedLog::default();
    let mut data_lines = 0;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(c) = line.strip_prefix('#') {
            out.comments.push(c.trim().to_string());
            continue;
        }
        if line == LOG_HEADER {
            continue;
        }
        data_lines += 1;
        match parse_line(line) {
            Ok(r) => {
                if out.records.last().is_some_and(|p| r.t < p.t) {
                    out.diagnostics.push((i + 1, format!("time {} steps backwards", r.t)));
                } else {
                    out.records.push(r);
                }
            }
            Err(e) => out.diagnostics.push((i + 1, e)),
        }
    }
    let bad = out.diagnostics.len();
    if bad as f64 > MAX_MALFORMED_FRACTION * data_lines as f64 {
        return Err(Error::MalformedLog {
            bad,
            total: data_lines,
            lines: out.diagnostics.iter().map(|d| d.0).take(20).collect(),
        });
    }
    Ok(out)
}

pub fn write_log<W: Write>(mut w: W, records: &[LogRecord], comments: &[String]) -> std::io::Result<()> {
    writeln!(w, "# {LOG_SCHEMA}")?;
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    writeln!(w, "{LOG_HEADER}")?;
    for r in records {
        writeln!(w, "{},{},{},{},{},{}", r.t, r.x_enc, r.z_enc, r.bx, r.by, r.bz)?;
    }
    Ok(())
}

/// First index where the smoothed signal departs from the resting baseline
/// by at least `threshold`, in either direction.
pub fn detect_contact(signal: &[f64], alpha: f64, threshold: f64) -> Result<usize> {
    if signal.len() < BASELINE_SAMPLES {
        return Err(Error::TooShort {
            len: signal.len(),
            min: BASELINE_SAMPLES,
        });
    }
    let baseline = signal[..BASELINE_SAMPLES].iter().sum::<f64>() / BASELINE_SAMPLES as f64;
    ema(signal, alpha)?
        .iter()
        .position(|v| (v - baseline).abs() >= threshold)
        .ok_or(Error::NoContact)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub design: String,
    pub material: String,
    /// mm/s
    pub velocity: f64,
    pub direction: String,
    #[serde(default)]
    pub repetition: u32,
    #[serde(default)]
    pub trial: u32,
    /// Number of passes the session should contain, when known.
    #[serde(default)]
    pub expected_passes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pass {
    /// Field samples with time rebased to the first sample.
    pub field: FieldSeries,
    pub meta: SessionMeta,
    pub index: usize,
    pub direction: Direction,
    /// Least-squares slope of encoder x over time, mm/s (signed).
    pub velocity: f64,
    /// Log time of the first sample, s.
    pub t_start: f64,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Segmentation {
    pub passes: Vec<Pass>,
    /// Session-level problems (short passes, missing passes, no travel).
    pub flags: Vec<String>,
}

/// Indices where encoder x turns around after at least `min_travel`.
/// The first and last entries bound the moving part of the record.
fn turning_points(x: &[f64], min_travel: f64) -> Vec<usize> {
    let mut points = Vec::new();
    let (mut lo, mut hi) = (0, 0);
    let mut dir = 0i8;
    let mut ext = 0;
    for i in 1..x.len() {
        match dir {
            0 => {
                if x[i] < x[lo] {
                    lo = i;
                }
                if x[i] > x[hi] {
                    hi = i;
                }
                if x[i] - x[lo] >= min_travel {
                    points.push(lo);
                    dir = 1;
                    ext = i;
                } else if x[hi] - x[i] >= min_travel {
                    points.push(hi);
                    dir = -1;
                    ext = i;
                }
            }
            1 => {
                if x[i] > x[ext] {
                    ext = i;
                } else if x[ext] - x[i] >= min_travel {
                    points.push(ext);
                    dir = -1;
                    ext = i;
                }
            }
            _ => {
                if x[i] < x[ext] {
                    ext = i;
                } else if x[i] - x[ext] >= min_travel {
                    points.push(ext);
                    dir = 1;
                    ext = i;
                }
            }
        }
    }
    if dir != 0 {
        points.push(ext);
    }
    points
}

fn slope(t: &[f64], x: &[f64]) -> f64 {
    let n = t.len() as f64;
    let (tm, xm) = (t.iter().sum::<f64>() / n, x.iter().sum::<f64>() / n);
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, b) in t.iter().zip(x) {
        num += (a - tm) * (b - xm);
        den += (a - tm) * (a - tm);
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// Splits a record stream (already in contact) into constant-direction passes.
///
/// A pass spans the samples that arrived by moving: stationary samples at
/// either end are dropped. Times in each pass start at zero.
pub fn segment_passes(records: &[LogRecord], meta: &SessionMeta) -> Segmentation {
    let mut seg = Segmentation::default();
    let x: Vec<f64> = records.iter().map(|r| r.x_enc).collect();
    let turns = turning_points(&x, MIN_TRAVEL_UM);
    if turns.len() < 2 {
        seg.flags.push("no travel of at least 1 mm".into());
    }
    for w in turns.windows(2) {
        let (a, b) = (w[0], w[1]);
        let moved = |i: &usize| x[*i] != x[*i - 1];
        let Some(start) = (a + 1..=b).find(moved) else { continue };
        let end = (a + 1..=b).rev().find(moved).unwrap_or(start);
        let slice = &records[start..=end];
        let duration = slice[slice.len() - 1].t - slice[0].t;
        let index = seg.passes.len() + seg.flags.iter().filter(|f| f.starts_with("dropped")).count();
        if duration <= MIN_PASS_DURATION {
            seg.flags
                .push(format!("dropped pass {index}: {duration:.3} s is too short"));
            continue;
        }
        let t0 = slice[0].t;
        let times: Vec<f64> = slice.iter().map(|r| r.t - t0).collect();
        let xs: Vec<f64> = slice.iter().map(|r| r.x_enc).collect();
        let velocity = slope(&times, &xs) / 1000.0;
        let mut flags = Vec::new();
        if meta.velocity > 0.0 && (velocity.abs() - meta.velocity).abs() > VELOCITY_TOLERANCE * meta.velocity {
            flags.push(format!(
                "measured {:.2} mm/s vs nominal {} mm/s",
                velocity.abs(),
                meta.velocity
            ));
        }
        let rate = estimate_rate(&times);
        seg.passes.push(Pass {
            field: FieldSeries {
                bx: slice.iter().map(|r| r.bx).collect(),
                by: slice.iter().map(|r| r.by).collect(),
                bz: slice.iter().map(|r| r.bz).collect(),
                times,
                rate,
                provenance: Provenance::Ingested,
                saturated: false,
            },
            meta: meta.clone(),
            index,
            direction: if x[end] >= x[start] {
                Direction::Positive
            } else {
                Direction::Negative
            },
            velocity,
            t_start: t0,
            flags,
        });
    }
    if let Some(expected) = meta.expected_passes {
        if seg.passes.len() < expected {
            seg.flags
                .push(format!("found {} of {} expected passes", seg.passes.len(), expected));
        }
    }
    seg
}

/// Contact detection on bz followed by segmentation of the remainder.
pub fn ingest_records(records: &[LogRecord], meta: &SessionMeta) -> Result<Segmentation> {
    let bz: Vec<f64> = records.iter().map(|r| r.bz as f64).collect();
    let contact = detect_contact(&bz, CONTACT_ALPHA, CONTACT_THRESHOLD)?;
    Ok(segment_passes(&records[contact..], meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    #[serde(flatten)]
    pub meta: SessionMeta,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub session: Vec<ManifestEntry>,
}

impl Manifest {
    /// Parses a TOML manifest of `[[session]]` tables. Relative paths are
    /// resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Manifest> {
        let mut m: Manifest = toml::from_str(text).map_err(|e| Error::config("manifest", e.to_string()))?;
        for (i, s) in m.session.iter_mut().enumerate() {
            if s.path.is_relative() {
                s.path = base.join(&s.path);
            }
            if Direction::parse(&s.meta.direction).is_none() {
                return Err(Error::config(
                    format!("session[{i}].direction"),
                    format!("`{}` is not +x or -x", s.meta.direction),
                ));
            }
            if !(s.meta.velocity > 0.0) {
                return Err(Error::config(format!("session[{i}].velocity"), "must be positive"));
            }
        }
        Ok(m)
    }
}

pub const PASS_INDEX_HEADER: &str =
    "file,pass,design,material,velocity_nominal,velocity_measured,direction,repetition,trial,t_start,samples,flags";

pub fn write_pass_index_row<W: Write>(mut w: W, file: &str, pass: &Pass) -> std::io::Result<()> {
    writeln!(
        w,
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        file,
        pass.index,
        pass.meta.design,
        pass.meta.material,
        pass.meta.velocity,
        pass.velocity,
        pass.direction.as_str(),
        pass.meta.repetition,
        pass.meta.trial,
        pass.t_start,
        pass.field.len(),
        pass.flags.join("; ").replace(',', ";")
    )
}
