//! One-dimensional surface height profiles and profile roughness metrics.
//!
//! Lengths are in millimetres, heights in micrometres. A profile stores
//! `n` uniformly spaced samples spanning `[0, length]` inclusive.

use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum generator resolution in samples/mm.
pub const MIN_RESOLUTION: f64 = 50.0;
pub const DEFAULT_RESOLUTION: f64 = 200.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceProfile {
    length: f64,
    resolution: f64,
    heights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SineComponent {
    /// mm
    pub wavelength: f64,
    /// µm
    pub amplitude: f64,
    /// rad
    #[serde(default)]
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SurfaceSpec {
    Sinusoid {
        wavelength: f64,
        amplitude: f64,
    },
    SumOfSinusoids {
        components: Vec<SineComponent>,
    },
    Stochastic {
        seed: u64,
        /// mm
        correlation_length: f64,
        /// µm
        rms_amplitude: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoughnessMetrics {
    pub ra: f64,
    pub rt: f64,
    pub rp: f64,
}

impl SurfaceSpec {
    pub fn validate(&self) -> Result<()> {
        let check = |wavelength: f64, amplitude: f64| {
            if !(wavelength > 0.0 && wavelength.is_finite()) {
                return Err(Error::InvalidSpec(format!(
                    "wavelength must be positive, got {wavelength}"
                )));
            }
            if !(amplitude >= 0.0 && amplitude.is_finite()) {
                return Err(Error::InvalidSpec(format!(
                    "amplitude must be non-negative, got {amplitude}"
                )));
            }
            Ok(())
        };
        match self {
            SurfaceSpec::Sinusoid { wavelength, amplitude } => check(*wavelength, *amplitude),
            SurfaceSpec::SumOfSinusoids { components } => {
                for c in components {
                    check(c.wavelength, c.amplitude)?;
                }
                Ok(())
            }
            SurfaceSpec::Stochastic {
                correlation_length,
                rms_amplitude,
                ..
            } => check(*correlation_length, *rms_amplitude),
        }
    }

    /// Dominant wavelength in mm, if the spec is periodic.
    pub fn wavelength(&self) -> Option<f64> {
        match self {
            SurfaceSpec::Sinusoid { wavelength, .. } => Some(*wavelength),
            SurfaceSpec::SumOfSinusoids { components } => components
                .iter()
                .max_by(|a, b| a.amplitude.total_cmp(&b.amplitude))
                .map(|c| c.wavelength),
            SurfaceSpec::Stochastic { .. } => None,
        }
    }

    pub fn amplitude(&self) -> f64 {
        match self {
            SurfaceSpec::Sinusoid { amplitude, .. } => *amplitude,
            SurfaceSpec::SumOfSinusoids { components } => components.iter().map(|c| c.amplitude).fold(0.0, f64::max),
            SurfaceSpec::Stochastic { rms_amplitude, .. } => *rms_amplitude,
        }
    }
}

/// Builds a profile of `length` mm sampled at `resolution` samples/mm.
pub fn generate_surface(spec: &SurfaceSpec, length: f64, resolution: f64) -> Result<SurfaceProfile> {
    spec.validate()?;
    if !(length > 0.0 && length.is_finite()) {
        return Err(Error::InvalidSpec(format!("length must be positive, got {length}")));
    }
    if !(resolution >= MIN_RESOLUTION && resolution.is_finite()) {
        return Err(Error::InvalidSpec(format!(
            "resolution {resolution} samples/mm below minimum {MIN_RESOLUTION}"
        )));
    }
    let n = sample_count(length, resolution)?;
    let dx = length / (n - 1) as f64;

    let heights = match spec {
        SurfaceSpec::Sinusoid { wavelength, amplitude } => (0..n)
            .map(|i| amplitude * (2.0 * PI * i as f64 * dx / wavelength).sin())
            .collect(),
        SurfaceSpec::SumOfSinusoids { components } => (0..n)
            .map(|i| {
                let x = i as f64 * dx;
                components
                    .iter()
                    .map(|c| c.amplitude * (2.0 * PI * x / c.wavelength + c.phase).sin())
                    .sum()
            })
            .collect(),
        SurfaceSpec::Stochastic {
            seed,
            correlation_length,
            rms_amplitude,
        } => stochastic_heights(n, dx, *seed, *correlation_length, *rms_amplitude),
    };

    Ok(SurfaceProfile {
        length,
        resolution,
        heights,
    })
}

fn sample_count(length: f64, resolution: f64) -> Result<usize> {
    let n = (length * resolution).round();
    if n < 2.0 {
        return Err(Error::InvalidSpec(format!(
            "profile of {length} mm at {resolution} samples/mm has fewer than 2 samples"
        )));
    }
    Ok(n as usize)
}

// Gaussian white noise smoothed by a boxcar of the correlation length,
// then re-centred and scaled to the requested RMS.
fn stochastic_heights(n: usize, dx: f64, seed: u64, corr: f64, rms: f64) -> Vec<f64> {
    let width = ((corr / dx).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..n + width - 1).map(|_| StandardNormal.sample(&mut rng)).collect();

    let mut out = Vec::with_capacity(n);
    let mut acc: f64 = noise[..width].iter().sum();
    out.push(acc / width as f64);
    for i in 1..n {
        acc += noise[i + width - 1] - noise[i - 1];
        out.push(acc / width as f64);
    }

    let mean = out.iter().sum::<f64>() / n as f64;
    let current = (out.iter().map(|h| (h - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let scale = if current > 0.0 { rms / current } else { 0.0 };
    out.iter().map(|h| (h - mean) * scale).collect()
}

impl SurfaceProfile {
    /// Wraps raw samples spanning `[0, length]`.
    pub fn from_heights(length: f64, heights: Vec<f64>) -> Result<Self> {
        if !(length > 0.0 && length.is_finite()) {
            return Err(Error::InvalidSpec(format!("length must be positive, got {length}")));
        }
        if heights.len() < 2 {
            return Err(Error::InvalidSpec("profile needs at least 2 samples".into()));
        }
        if heights.iter().any(|h| !h.is_finite()) {
            return Err(Error::InvalidSpec("non-finite height".into()));
        }
        Ok(Self {
            length,
            resolution: heights.len() as f64 / length,
            heights,
        })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn heights(&self) -> &[f64] {
        &self.heights
    }

    /// Distance between adjacent samples in mm.
    pub fn spacing(&self) -> f64 {
        self.length / (self.heights.len() - 1) as f64
    }

    pub fn x_at(&self, index: usize) -> f64 {
        index as f64 * self.spacing()
    }

    /// Height at `x` mm by linear interpolation.
    pub fn sample_height(&self, x: f64) -> Result<f64> {
        let slack = 1e-9 * self.length.max(1.0);
        if !(x >= -slack && x <= self.length + slack) {
            return Err(Error::OutOfRange { x, length: self.length });
        }
        Ok(self.interpolate(x.clamp(0.0, self.length)))
    }

    /// Interpolation without range checking; `x` must already be in range.
    pub(crate) fn interpolate(&self, x: f64) -> f64 {
        let last = self.heights.len() - 1;
        let pos = x / self.spacing();
        let i = (pos.floor() as usize).min(last);
        if i == last {
            return self.heights[last];
        }
        let frac = pos - i as f64;
        if frac == 0.0 {
            return self.heights[i];
        }
        self.heights[i] + frac * (self.heights[i + 1] - self.heights[i])
    }

    /// Pointwise sum with another profile of identical sampling.
    pub fn superpose(&self, other: &SurfaceProfile) -> Result<SurfaceProfile> {
        if self.heights.len() != other.heights.len() || self.length != other.length {
            return Err(Error::InvalidSpec(
                "superposed profiles must share length and sample count".into(),
            ));
        }
        Ok(SurfaceProfile {
            length: self.length,
            resolution: self.resolution,
            heights: self.heights.iter().zip(&other.heights).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "x_mm,height_um")?;
        for (i, h) in self.heights.iter().enumerate() {
            writeln!(w, "{},{}", self.x_at(i), h)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R, source: &Path) -> Result<SurfaceProfile> {
        let mut xs = Vec::new();
        let mut hs = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::io(source, e))?;
            let line = line.trim();
            if lineno == 0 || line.is_empty() {
                continue;
            }
            let mut cols = line.split(',');
            let parsed = (|| {
                let x: f64 = cols.next()?.trim().parse().ok()?;
                let h: f64 = cols.next()?.trim().parse().ok()?;
                Some((x, h))
            })();
            let (x, h) = parsed.ok_or_else(|| Error::data(source, format!("malformed line {}", lineno + 1)))?;
            xs.push(x);
            hs.push(h);
        }
        let length = xs.last().copied().unwrap_or(0.0) - xs.first().copied().unwrap_or(0.0);
        SurfaceProfile::from_heights(length, hs)
    }
}

pub fn roughness(profile: &SurfaceProfile) -> RoughnessMetrics {
    let h = profile.heights();
    let n = h.len() as f64;
    let mean = h.iter().sum::<f64>() / n;
    let ra = h.iter().map(|v| (v - mean).abs()).sum::<f64>() / n;
    let max = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = h.iter().copied().fold(f64::INFINITY, f64::min);
    RoughnessMetrics {
        ra,
        rt: max - min,
        rp: (max - mean).max(0.0),
    }
}
