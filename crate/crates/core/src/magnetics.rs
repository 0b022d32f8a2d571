//! Point-dipole field of the embedded magnet and magnetometer quantization.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechanics::MagnetTrajectory;

/// µ0 / 4π in T·m/A.
const MU0_OVER_4PI: f64 = 1e-7;
const MU0: f64 = 4.0 * std::f64::consts::PI * 1e-7;
/// Closest allowed approach of magnet centre to the sensor die, mm.
const MIN_DISTANCE_MM: f64 = 0.5;

pub const FIELD_CSV_HEADER: &str = "t_s,bx_lsb,by_lsb,bz_lsb";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MagnetModel {
    /// Cube edge, mm.
    pub edge: f64,
    /// T
    pub remanence: f64,
    /// Rest orientation of the moment.
    pub axis: [f64; 3],
}

impl Default for MagnetModel {
    /// 2 mm N50 cube magnetised along +z.
    fn default() -> Self {
        Self {
            edge: 2.0,
            remanence: 1.43,
            axis: [0.0, 0.0, 1.0],
        }
    }
}

impl MagnetModel {
    /// Dipole moment magnitude in A·m².
    pub fn moment(&self) -> f64 {
        self.remanence * (self.edge * 1e-3).powi(3) / MU0
    }

    pub fn validate(&self) -> Result<()> {
        let norm = self.axis.iter().map(|a| a * a).sum::<f64>().sqrt();
        if !(self.moment() > 0.0) {
            return Err(Error::InvalidSpec("magnet moment must be positive".into()));
        }
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSpec(format!(
                "magnet axis not unit length (|a| = {norm})"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MagnetometerLayout {
    /// Die position relative to the magnet rest centre, mm.
    pub position: [f64; 3],
    /// µT per LSB
    pub conversion: f64,
    pub resolution_bits: u32,
}

impl Default for MagnetometerLayout {
    fn default() -> Self {
        Self {
            position: [0.0, 0.0, -3.0],
            conversion: 1.0,
            resolution_bits: 18,
        }
    }
}

impl MagnetometerLayout {
    pub fn validate(&self, magnet: &MagnetModel) -> Result<()> {
        let dist = self.position.iter().map(|a| a * a).sum::<f64>().sqrt();
        if !(self.conversion > 0.0) {
            return Err(Error::InvalidSpec("conversion must be positive".into()));
        }
        if dist <= magnet.edge / 2.0 {
            return Err(Error::InvalidSpec("magnetometer inside the magnet".into()));
        }
        if self.resolution_bits == 0 || self.resolution_bits > 30 {
            return Err(Error::InvalidSpec("resolution_bits must be in 1..=30".into()));
        }
        Ok(())
    }

    pub fn max_count(&self) -> i32 {
        ((1i64 << self.resolution_bits) - 1) as i32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Simulated,
    Ingested,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSeries {
    pub times: Vec<f64>,
    pub bx: Vec<i32>,
    pub by: Vec<i32>,
    pub bz: Vec<i32>,
    pub rate: f64,
    pub provenance: Provenance,
    pub saturated: bool,
}

/// Magnet rigid-body pose: centre offset (µm) and rotation about y (mrad).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub z: f64,
    pub theta: f64,
}

/// Field in µT at `sensor_pos` (mm) from the magnet displaced to `pose`.
pub fn dipole_field(magnet: &MagnetModel, pose: Pose, sensor_pos: [f64; 3]) -> Result<[f64; 3]> {
    let r_mm = [
        sensor_pos[0] - pose.x * 1e-3,
        sensor_pos[1],
        sensor_pos[2] - pose.z * 1e-3,
    ];
    let dist_mm = r_mm.iter().map(|a| a * a).sum::<f64>().sqrt();
    if !(dist_mm >= MIN_DISTANCE_MM) {
        return Err(Error::SingularPosition { distance_mm: dist_mm });
    }

    let (s, c) = (pose.theta * 1e-3).sin_cos();
    let [ax, ay, az] = magnet.axis;
    let m0 = magnet.moment();
    let m = [m0 * (ax * c + az * s), m0 * ay, m0 * (az * c - ax * s)];

    let d = dist_mm * 1e-3;
    let unit = [r_mm[0] / dist_mm, r_mm[1] / dist_mm, r_mm[2] / dist_mm];
    let m_dot = m[0] * unit[0] + m[1] * unit[1] + m[2] * unit[2];
    let scale = MU0_OVER_4PI / (d * d * d) * 1e6;
    Ok([
        scale * (3.0 * unit[0] * m_dot - m[0]),
        scale * (3.0 * unit[1] * m_dot - m[1]),
        scale * (3.0 * unit[2] * m_dot - m[2]),
    ])
}

/// Rounds each component to the nearest count, saturating at the ADC range.
/// The flag reports whether any component saturated.
pub fn quantize(b: [f64; 3], layout: &MagnetometerLayout) -> ([i32; 3], bool) {
    let max = layout.max_count() as f64;
    let mut saturated = false;
    let mut out = [0i32; 3];
    for (o, v) in out.iter_mut().zip(b) {
        let counts = (v / layout.conversion).round();
        if counts.abs() > max {
            saturated = true;
        }
        *o = counts.clamp(-max, max) as i32;
    }
    (out, saturated)
}

pub fn trajectory_to_field(
    traj: &MagnetTrajectory,
    magnet: &MagnetModel,
    layout: &MagnetometerLayout,
) -> Result<FieldSeries> {
    magnet.validate()?;
    layout.validate(magnet)?;
    let n = traj.len();
    let mut series = FieldSeries {
        times: traj.times.clone(),
        bx: Vec::with_capacity(n),
        by: Vec::with_capacity(n),
        bz: Vec::with_capacity(n),
        rate: traj.rate,
        provenance: Provenance::Simulated,
        saturated: false,
    };
    for i in 0..n {
        let pose = Pose {
            x: traj.x_disp[i],
            z: traj.z_disp[i],
            theta: traj.rotation[i],
        };
        let b = dipole_field(magnet, pose, layout.position)?;
        let ([x, y, z], sat) = quantize(b, layout);
        series.bx.push(x);
        series.by.push(y);
        series.bz.push(z);
        series.saturated |= sat;
    }
    Ok(series)
}

impl FieldSeries {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn axis(&self, index: usize) -> &[i32] {
        match index {
            0 => &self.bx,
            1 => &self.by,
            _ => &self.bz,
        }
    }

    /// Writes `# `-prefixed comment lines, the header, then one row per sample.
    pub fn write_csv<W: Write>(&self, mut w: W, comments: &[String]) -> std::io::Result<()> {
        for c in comments {
            writeln!(w, "# {c}")?;
        }
        writeln!(w, "{FIELD_CSV_HEADER}")?;
        for i in 0..self.len() {
            writeln!(w, "{},{},{},{}", self.times[i], self.bx[i], self.by[i], self.bz[i])?;
        }
        Ok(())
    }

    /// Parses a field CSV, returning the series and its comment lines
    /// (without the leading `# `).
    pub fn read_csv<R: BufRead>(r: R, source: &Path, provenance: Provenance) -> Result<(FieldSeries, Vec<String>)> {
        let mut comments = Vec::new();
        let mut series = FieldSeries {
            times: Vec::new(),
            bx: Vec::new(),
            by: Vec::new(),
            bz: Vec::new(),
            rate: 0.0,
            provenance,
            saturated: false,
        };
        let mut seen_header = false;
        for (lineno, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::io(source, e))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(c) = line.strip_prefix('#') {
                comments.push(c.trim().to_string());
                continue;
            }
            if !seen_header {
                if line != FIELD_CSV_HEADER {
                    return Err(Error::data(source, format!("unexpected header `{line}`")));
                }
                seen_header = true;
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            let parsed = (|| {
                if cols.len() != 4 {
                    return None;
                }
                Some((
                    cols[0].parse::<f64>().ok()?,
                    cols[1].parse::<i32>().ok()?,
                    cols[2].parse::<i32>().ok()?,
                    cols[3].parse::<i32>().ok()?,
                ))
            })();
            let (t, x, y, z) = parsed.ok_or_else(|| Error::data(source, format!("malformed line {}", lineno + 1)))?;
            series.times.push(t);
            series.bx.push(x);
            series.by.push(y);
            series.bz.push(z);
        }
        if !seen_header {
            return Err(Error::data(source, "missing field header"));
        }
        series.rate = estimate_rate(&series.times);
        Ok((series, comments))
    }
}

/// Mean sample rate from first and last timestamps; 0 for fewer than two samples.
pub fn estimate_rate(times: &[f64]) -> f64 {
    match (times.first(), times.last()) {
        (Some(a), Some(b)) if times.len() > 1 && b > a => (times.len() - 1) as f64 / (b - a),
        _ => 0.0,
    }
}
