//! Time-series conditioning and spectral analysis.
//!
//! Filters are 4th-order Butterworth sections run forward and backward, so
//! the effective response is the squared Butterworth magnitude with zero
//! phase. Spectra are Hann-windowed with amplitude correction: a sine of
//! amplitude A centred on a bin reads A.

use std::f64::consts::PI;
use std::io::Write;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

pub const MIN_SPECTRAL_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct UniformSeries {
    pub rate: f64,
    pub values: Vec<f64>,
}

impl UniformSeries {
    pub fn new(rate: f64, values: Vec<f64>) -> Result<Self> {
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::InvalidRate(format!("rate must be positive, got {rate}")));
        }
        Ok(Self { rate, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.values.len().saturating_sub(1) as f64 / self.rate
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrum {
    pub freqs: Vec<f64>,
    /// Amplitude-corrected magnitude per bin.
    pub power: Vec<f64>,
    /// Length of the transformed series.
    pub n: usize,
    /// Sum of the window coefficients.
    pub window_sum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralPeak {
    pub freq: f64,
    pub power: f64,
    pub prominence: f64,
}

/// Linear interpolation of `(times, values)` onto a uniform grid at
/// `target_rate` starting at `times[0]`.
pub fn resample(times: &[f64], values: &[f64], target_rate: f64) -> Result<UniformSeries> {
    if times.len() != values.len() {
        return Err(Error::DimensionMismatch {
            expected: times.len(),
            got: values.len(),
        });
    }
    if times.len() < 2 {
        return Err(Error::TooShort {
            len: times.len(),
            min: 2,
        });
    }
    if !(target_rate > 0.0 && target_rate.is_finite()) {
        return Err(Error::InvalidRate(format!(
            "target rate must be positive, got {target_rate}"
        )));
    }
    if let Some(i) = times.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(Error::NonMonotonicTimes { index: i + 1 });
    }

    let t0 = times[0];
    let span = times[times.len() - 1] - t0;
    let count = (span * target_rate + 1e-9).floor() as usize + 1;
    let mut out = Vec::with_capacity(count);
    let mut j = 0;
    for i in 0..count {
        let t = t0 + i as f64 / target_rate;
        while j + 2 < times.len() && times[j + 1] <= t {
            j += 1;
        }
        let (ta, tb) = (times[j], times[j + 1]);
        let frac = ((t - ta) / (tb - ta)).clamp(0.0, 1.0);
        out.push(if frac == 0.0 {
            values[j]
        } else if frac == 1.0 {
            values[j + 1]
        } else {
            values[j] + frac * (values[j + 1] - values[j])
        });
    }
    UniformSeries::new(target_rate, out)
}

#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    // Transposed direct form II; state initialised to the steady state for
    // a constant input `x0`.
    fn run(&self, data: &mut [f64]) {
        let Some(&x0) = data.first() else { return };
        let y0 = self.dc_gain() * x0;
        let mut z2 = self.b[2] * x0 - self.a[1] * y0;
        let mut z1 = self.b[1] * x0 - self.a[0] * y0 + z2;
        for v in data.iter_mut() {
            let x = *v;
            let y = self.b[0] * x + z1;
            z1 = self.b[1] * x - self.a[0] * y + z2;
            z2 = self.b[2] * x - self.a[1] * y;
            *v = y;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Band {
    Low,
    High,
}

// 4th-order Butterworth as two bilinear-transformed biquads with prewarped
// cutoff. Pole-pair quality factors are 1 / (2 sin((2k-1)π/8)).
fn butterworth4(band: Band, cutoff: f64, rate: f64) -> [Biquad; 2] {
    let w0 = 2.0 * PI * cutoff / rate;
    let (sin_w, cos_w) = w0.sin_cos();
    [PI / 8.0, 3.0 * PI / 8.0].map(|angle| {
        let q = 1.0 / (2.0 * angle.sin());
        let alpha = sin_w / (2.0 * q);
        let a0 = 1.0 + alpha;
        let (b0, b1) = match band {
            Band::Low => ((1.0 - cos_w) / 2.0, 1.0 - cos_w),
            Band::High => ((1.0 + cos_w) / 2.0, -(1.0 + cos_w)),
        };
        Biquad {
            b: [b0 / a0, b1 / a0, b0 / a0],
            a: [-2.0 * cos_w / a0, (1.0 - alpha) / a0],
        }
    })
}

fn filtfilt(sections: &[Biquad], values: &[f64], padlen: usize) -> Vec<f64> {
    let n = values.len();
    if n == 0 {
        return Vec::new();
    }
    let pad = padlen.min(n - 1);
    // odd extension about both end points
    let mut ext = Vec::with_capacity(n + 2 * pad);
    let (first, last) = (values[0], values[n - 1]);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - values[i]));
    ext.extend_from_slice(values);
    ext.extend((1..=pad).map(|i| 2.0 * last - values[n - 1 - i]));

    for s in sections {
        s.run(&mut ext);
    }
    ext.reverse();
    for s in sections {
        s.run(&mut ext);
    }
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

fn padlen_for(rate: f64, cutoff: f64) -> usize {
    ((3.0 * rate / cutoff).round() as usize).max(15)
}

/// Zero-phase 4th-order high-pass.
pub fn highpass(series: &UniformSeries, cutoff: f64) -> Result<UniformSeries> {
    if !(cutoff > 0.0 && cutoff < series.rate / 2.0) {
        return Err(Error::InvalidRate(format!(
            "cutoff {cutoff} Hz must lie in (0, {}) Hz",
            series.rate / 2.0
        )));
    }
    let sections = butterworth4(Band::High, cutoff, series.rate);
    let values = filtfilt(&sections, &series.values, padlen_for(series.rate, cutoff));
    UniformSeries::new(series.rate, values)
}

/// Zero-phase 4th-order low-pass.
pub fn lowpass(series: &UniformSeries, cutoff: f64) -> Result<UniformSeries> {
    if !(cutoff > 0.0 && cutoff < series.rate / 2.0) {
        return Err(Error::InvalidRate(format!(
            "cutoff {cutoff} Hz must lie in (0, {}) Hz",
            series.rate / 2.0
        )));
    }
    let sections = butterworth4(Band::Low, cutoff, series.rate);
    let values = filtfilt(&sections, &series.values, padlen_for(series.rate, cutoff));
    UniformSeries::new(series.rate, values)
}

/// Anti-aliased rate reduction: low-pass at 0.45 × `target_rate`, then
/// linear interpolation onto the target grid.
pub fn downsample(series: &UniformSeries, target_rate: f64) -> Result<UniformSeries> {
    if !(target_rate > 0.0 && target_rate < series.rate) {
        return Err(Error::InvalidRate(format!(
            "target rate {target_rate} Hz must be below source rate {} Hz",
            series.rate
        )));
    }
    if series.len() < 2 {
        return Err(Error::TooShort {
            len: series.len(),
            min: 2,
        });
    }
    let smooth = lowpass(series, 0.45 * target_rate)?;
    let times: Vec<f64> = (0..smooth.len()).map(|i| i as f64 / series.rate).collect();
    resample(&times, &smooth.values, target_rate)
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Mean-removed, Hann-windowed samples as fed to the FFT.
pub fn windowed_signal(series: &UniformSeries) -> Vec<f64> {
    let n = series.len();
    let mean = series.values.iter().sum::<f64>() / n.max(1) as f64;
    hann(n)
        .iter()
        .zip(&series.values)
        .map(|(w, v)| w * (v - mean))
        .collect()
}

/// One-sided amplitude spectrum of the whole series, bins at `k · rate / n`.
pub fn power_spectrum(series: &UniformSeries) -> Result<PowerSpectrum> {
    let n = series.len();
    if n < MIN_SPECTRAL_LEN {
        return Err(Error::TooShort {
            len: n,
            min: MIN_SPECTRAL_LEN,
        });
    }
    let mut buf: Vec<Complex<f64>> = windowed_signal(series)
        .into_iter()
        .map(|v| Complex::new(v, 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);

    let window_sum: f64 = hann(n).iter().sum();
    let half = n / 2;
    let mut freqs = Vec::with_capacity(half + 1);
    let mut power = Vec::with_capacity(half + 1);
    for (k, c) in buf.iter().take(half + 1).enumerate() {
        let one_sided = if k == 0 || (n.is_multiple_of(2) && k == half) {
            1.0
        } else {
            2.0
        };
        freqs.push(k as f64 * series.rate / n as f64);
        power.push(one_sided * c.norm() / window_sum);
    }
    Ok(PowerSpectrum {
        freqs,
        power,
        n,
        window_sum,
    })
}

impl PowerSpectrum {
    pub fn bin_width(&self) -> f64 {
        if self.freqs.len() > 1 {
            self.freqs[1] - self.freqs[0]
        } else {
            0.0
        }
    }

    /// Energy of the windowed signal recovered from the spectrum (Parseval).
    pub fn windowed_energy(&self) -> f64 {
        let half = self.n / 2;
        let mut energy = 0.0;
        for (k, m) in self.power.iter().enumerate() {
            let edge = k == 0 || (self.n.is_multiple_of(2) && k == half);
            let (one_sided, copies) = if edge { (1.0, 1.0) } else { (2.0, 2.0) };
            let mag = m * self.window_sum / one_sided;
            energy += copies * mag * mag;
        }
        energy / self.n as f64
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "freq_hz,power")?;
        for (f, p) in self.freqs.iter().zip(&self.power) {
            writeln!(w, "{f},{p}")?;
        }
        Ok(())
    }
}

/// Local maxima with topographic prominence at least `min_prominence`,
/// largest first, at most `max_count`.
pub fn find_peaks(spec: &PowerSpectrum, min_prominence: f64, max_count: usize) -> Vec<SpectralPeak> {
    let mut peaks: Vec<SpectralPeak> = local_maxima(&spec.power)
        .into_iter()
        .map(|i| SpectralPeak {
            freq: spec.freqs[i],
            power: spec.power[i],
            prominence: prominence(&spec.power, i),
        })
        .filter(|p| p.prominence >= min_prominence)
        .collect();
    peaks.sort_by(|a, b| b.power.total_cmp(&a.power).then(a.freq.total_cmp(&b.freq)));
    peaks.truncate(max_count);
    peaks
}

// Indices of strict local maxima; a flat-topped maximum is reported at the
// middle of its plateau. End points never count.
fn local_maxima(x: &[f64]) -> Vec<usize> {
    let mut out = Vec::new();
    let n = x.len();
    let mut i = 1;
    while i + 1 < n {
        if x[i - 1] < x[i] {
            let mut ahead = i + 1;
            while ahead + 1 < n && x[ahead] == x[i] {
                ahead += 1;
            }
            if x[ahead] < x[i] {
                out.push((i + ahead - 1) / 2);
                i = ahead;
            }
        }
        i += 1;
    }
    out
}

fn prominence(x: &[f64], peak: usize) -> f64 {
    let h = x[peak];
    let mut left_min = h;
    for &v in x[..peak].iter().rev() {
        if v > h {
            break;
        }
        left_min = left_min.min(v);
    }
    let mut right_min = h;
    for &v in &x[peak + 1..] {
        if v > h {
            break;
        }
        right_min = right_min.min(v);
    }
    h - left_min.max(right_min)
}

/// Exponential moving average seeded with the first sample.
pub fn ema(values: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidAlpha(alpha));
    }
    let mut out = Vec::with_capacity(values.len());
    let mut prev = match values.first() {
        Some(&v) => v,
        None => return Ok(out),
    };
    for &v in values {
        prev = alpha * v + (1.0 - alpha) * prev;
        out.push(prev);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn tone(rate: f64, n: usize, freq: f64, amp: f64) -> UniformSeries {
        UniformSeries::new(
            rate,
            (0..n)
                .map(|i| amp * (2.0 * PI * freq * i as f64 / rate).sin())
                .collect(),
        )
        .unwrap()
    }

    fn rms(v: &[f64]) -> f64 {
        (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
    }

    fn spectrum_of(values: Vec<f64>) -> PowerSpectrum {
        let n = values.len();
        PowerSpectrum {
            freqs: (0..n).map(|i| i as f64).collect(),
            power: values,
            n: 2 * (n - 1),
            window_sum: 1.0,
        }
    }

    // Squared Butterworth magnitude, analog prototype with the bilinear
    // prewarp mapping; independent of the biquad coefficients.
    fn filtfilt_gain(band: Band, f: f64, cutoff: f64, rate: f64) -> f64 {
        let warp = |v: f64| (PI * v / rate).tan();
        let ratio = warp(f) / warp(cutoff);
        let r8 = ratio.powi(8);
        match band {
            Band::Low => 1.0 / (1.0 + r8),
            Band::High => r8 / (1.0 + r8),
        }
    }

    #[test]
    fn resample_constant_and_ramp() {
        let times = [0.0, 0.013, 0.02, 0.041, 0.1];
        let c = resample(&times, &[3.0; 5], 1000.0).unwrap();
        assert_eq!(c.len(), 101);
        assert!(c.values.iter().all(|&v| v == 3.0));

        let ramp: Vec<f64> = times.iter().map(|t| 2.0 * t + 1.0).collect();
        let r = resample(&times, &ramp, 1000.0).unwrap();
        for (i, v) in r.values.iter().enumerate() {
            assert_relative_eq!(*v, 2.0 * (i as f64 / 1000.0) + 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn resample_irregular_sine() {
        // jittered ~2 kHz sampling of a 10 Hz sine
        let mut times = Vec::new();
        let mut t = 0.0;
        let mut k = 0u32;
        while t < 1.0 {
            times.push(t);
            k = k.wrapping_mul(1_103_515_245).wrapping_add(12_345);
            t += 0.0004 + 0.0004 * ((k >> 16) % 1000) as f64 / 1000.0;
        }
        let values: Vec<f64> = times.iter().map(|t| (2.0 * PI * 10.0 * t).sin()).collect();
        let r = resample(&times, &values, 1000.0).unwrap();
        for (i, v) in r.values.iter().enumerate() {
            let exact = (2.0 * PI * 10.0 * i as f64 / 1000.0).sin();
            assert!((v - exact).abs() < 0.01);
        }
    }

    #[test]
    fn resample_rejects_non_monotonic() {
        assert!(matches!(
            resample(&[0.0, 0.2, 0.1], &[0.0; 3], 10.0),
            Err(Error::NonMonotonicTimes { index: 2 })
        ));
        assert!(resample(&[0.0, 0.0], &[0.0; 2], 10.0).is_err());
    }

    #[test]
    fn filter_gain_matches_prototype() {
        for (band, cutoff, rate, f) in [
            (Band::High, 2.0, 330.0, 1.0),
            (Band::High, 2.0, 330.0, 3.0),
            (Band::Low, 148.5, 5000.0, 140.0),
            (Band::Low, 148.5, 5000.0, 180.0),
        ] {
            let s = tone(rate, (rate * 40.0) as usize, f, 1.0);
            let sections = butterworth4(band, cutoff, rate);
            let out = filtfilt(&sections, &s.values, padlen_for(rate, cutoff));
            let mid = out.len() / 4..3 * out.len() / 4;
            let measured = rms(&out[mid.clone()]) / rms(&s.values[mid]);
            let expected = filtfilt_gain(band, f, cutoff, rate);
            assert!(
                (measured - expected).abs() < 0.01,
                "{band:?} {f}: {measured} vs {expected}"
            );
        }
    }

    #[test]
    fn downsample_dc_passband_stopband() {
        let dc = UniformSeries::new(5000.0, vec![42.0; 5000]).unwrap();
        let d = downsample(&dc, 330.0).unwrap();
        assert!(d.values.iter().all(|v| (v - 42.0).abs() < 1e-9));

        let s = tone(5000.0, 10_000, 50.0, 1.0);
        let d = downsample(&s, 330.0).unwrap();
        assert_eq!(d.rate, 330.0);
        let amp = rms(&d.values[100..560]) * 2f64.sqrt();
        assert!((amp - 1.0).abs() < 0.02, "{amp}");

        let s = tone(5000.0, 10_000, 200.0, 1.0);
        let d = downsample(&s, 330.0).unwrap();
        assert!(rms(&d.values) < 0.1 * rms(&s.values));

        assert!(downsample(&s, 5000.0).is_err());
    }

    #[test]
    fn highpass_contract() {
        let dc = UniformSeries::new(330.0, vec![100.0; 660]).unwrap();
        assert!(highpass(&dc, 2.0).unwrap().values.iter().all(|v| v.abs() < 1e-4));

        // away from the edge transients
        let s = tone(330.0, 3300, 100.0, 1.0);
        let out = highpass(&s, 2.0).unwrap();
        let ratio = rms(&out.values[660..2640]) / rms(&s.values[660..2640]);
        assert!((ratio - 1.0).abs() < 0.01, "{ratio}");

        let s = tone(330.0, 3300, 0.5, 1.0);
        let out = highpass(&s, 2.0).unwrap();
        assert!(rms(&out.values) < 0.05 * rms(&s.values));

        assert!(highpass(&s, 165.0).is_err());
    }

    #[test]
    fn highpass_is_idempotent_in_passband() {
        let s = tone(330.0, 990, 12.0, 1.0);
        let once = highpass(&s, 2.0).unwrap();
        let twice = highpass(&once, 2.0).unwrap();
        let mid = 100..890;
        let ratio = rms(&twice.values[mid.clone()]) / rms(&once.values[mid]);
        assert!((ratio - 1.0).abs() < 0.02);
    }

    #[test]
    fn spectrum_of_bin_centred_sine() {
        // 1000 samples at 1 kHz: 1 Hz bins, 50 Hz sits on bin 50
        let s = tone(1000.0, 1000, 50.0, 10.0);
        let p = power_spectrum(&s).unwrap();
        assert_eq!(p.freqs[50], 50.0);
        assert!((p.power[50] - 10.0).abs() < 0.2);
        let (imax, _) = p.power.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        assert_eq!(imax, 50);
    }

    #[test]
    fn spectrum_of_zero_and_pair() {
        let z = power_spectrum(&UniformSeries::new(100.0, vec![0.0; 64]).unwrap()).unwrap();
        assert!(z.power.iter().all(|&v| v == 0.0));

        let a = tone(1000.0, 1000, 40.0, 3.0);
        let b = tone(1000.0, 1000, 200.0, 5.0);
        let sum = UniformSeries::new(1000.0, a.values.iter().zip(&b.values).map(|(x, y)| x + y).collect()).unwrap();
        let p = power_spectrum(&sum).unwrap();
        let peaks = find_peaks(&p, 0.5, 5);
        assert_eq!(peaks.len(), 2);
        assert_eq!((peaks[0].freq, peaks[1].freq), (200.0, 40.0));

        assert!(matches!(
            power_spectrum(&UniformSeries::new(1.0, vec![1.0; 7]).unwrap()),
            Err(Error::TooShort { .. })
        ));
    }

    #[test]
    fn parseval_holds() {
        for n in [64usize, 101, 1000] {
            let s = UniformSeries::new(
                200.0,
                (0..n).map(|i| ((i * 37 % 11) as f64).sin() + 0.1 * i as f64).collect(),
            )
            .unwrap();
            let energy: f64 = windowed_signal(&s).iter().map(|v| v * v).sum();
            let p = power_spectrum(&s).unwrap();
            assert_relative_eq!(p.windowed_energy(), energy, max_relative = 1e-6);
        }
    }

    #[test]
    fn peaks_simple_cases() {
        let p = find_peaks(&spectrum_of(vec![0.0, 5.0, 0.0]), 0.0, 20);
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].power, p[0].prominence), (5.0, 5.0));

        assert!(find_peaks(&spectrum_of(vec![0.0, 1.0, 2.0, 3.0]), 0.0, 20).is_empty());

        let p = find_peaks(&spectrum_of(vec![0.0, 3.0, 1.0, 5.0, 0.0]), 2.0, 20);
        let got: Vec<(f64, f64)> = p.iter().map(|p| (p.power, p.prominence)).collect();
        assert_eq!(got, vec![(5.0, 5.0), (3.0, 2.0)]);

        let p = find_peaks(&spectrum_of(vec![0.0, 3.0, 1.0, 5.0, 0.0]), 2.5, 20);
        assert_eq!(p.len(), 1);
        let p = find_peaks(&spectrum_of(vec![0.0, 3.0, 1.0, 5.0, 0.0]), 0.0, 1);
        assert_eq!(p.len(), 1);
    }

    #[test]
    fn plateau_reported_once() {
        let p = find_peaks(&spectrum_of(vec![0.0, 2.0, 2.0, 2.0, 0.0]), 0.0, 20);
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].freq, 2.0);
    }

    #[test]
    fn ema_cases() {
        assert_eq!(ema(&[4.0; 6], 0.3).unwrap(), vec![4.0; 6]);
        let x = [1.0, -2.0, 5.0];
        assert_eq!(ema(&x, 1.0).unwrap(), x.to_vec());
        assert!(ema(&x, 0.0).is_err());
        assert!(ema(&x, 1.5).is_err());
        assert!(ema(&[], 0.5).unwrap().is_empty());

        // unit step seen from its onset: y[0] = α, y[n] = 1 − (1 − α)^(n+1)
        let mut step = vec![0.0];
        step.extend(vec![1.0; 11]);
        let y = ema(&step, 0.12).unwrap();
        assert_relative_eq!(y[1], 0.12, epsilon = 1e-12);
        assert_relative_eq!(y[10], 1.0 - 0.88f64.powi(10), epsilon = 1e-12);
        assert_relative_eq!(y[10], 0.7215, epsilon = 1e-4);
    }

    proptest! {
        #[test]
        fn peaks_offset_invariant(
            values in prop::collection::vec(0.0f64..50.0, 3..80),
            offset in -100.0f64..100.0,
        ) {
            let a = find_peaks(&spectrum_of(values.clone()), 2.0, 20);
            let shifted: Vec<f64> = values.iter().map(|v| v + offset).collect();
            let b = find_peaks(&spectrum_of(shifted), 2.0, 20);
            prop_assert_eq!(a.len(), b.len());
            let min = values.iter().copied().fold(f64::INFINITY, f64::min);
            for (p, q) in a.iter().zip(&b) {
                prop_assert_eq!(p.freq, q.freq);
                prop_assert!((p.prominence - q.prominence).abs() < 1e-9);
                prop_assert!(p.prominence <= p.power - min + 1e-12);
            }
        }
    }
}
