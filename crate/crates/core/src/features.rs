//! EEG-style feature extraction: fixed-length segmentation, per-channel
//! normalisation, Welch power spectral density, Simpson-rule band power and
//! pairwise channel asymmetry.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiChannelSignal {
    /// `samples[channel][time]`.
    pub samples: Vec<Vec<f64>>,
    pub sample_rate: f64,
    pub channel_names: Vec<String>,
}

impl MultiChannelSignal {
    pub fn new(samples: Vec<Vec<f64>>, sample_rate: f64, channel_names: Vec<String>) -> Result<Self> {
        let s = MultiChannelSignal {
            samples,
            sample_rate,
            channel_names,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::invalid("signal needs at least one channel"));
        }
        if self.channel_names.len() != self.samples.len() {
            return Err(Error::LengthMismatch {
                what: "channel names",
                expected: self.samples.len(),
                found: self.channel_names.len(),
            });
        }
        let len = self.samples[0].len();
        if len < 2 {
            return Err(Error::invalid("signal needs at least two samples"));
        }
        if self.samples.iter().any(|c| c.len() != len) {
            return Err(Error::invalid("channels differ in length"));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(Error::invalid(format!("sample rate must be positive, got {}", self.sample_rate)));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.samples.len()
    }

    pub fn len(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.sample_rate
    }

    /// Keeps the named channels, in the order given.
    pub fn select_channels(&self, names: &[&str]) -> Result<MultiChannelSignal> {
        let samples = names
            .iter()
            .map(|n| {
                self.channel_names
                    .iter()
                    .position(|c| c == n)
                    .map(|i| self.samples[i].clone())
                    .ok_or_else(|| Error::invalid(format!("unknown channel {n}")))
            })
            .collect::<Result<Vec<_>>>()?;
        MultiChannelSignal::new(samples, self.sample_rate, names.iter().map(|s| s.to_string()).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub low: f64,
    pub high: f64,
}

impl Band {
    pub const fn new(low: f64, high: f64) -> Self {
        Band { low, high }
    }
}

pub const ALPHA: Band = Band::new(8.0, 13.0);
/// Normalising band for relative power (delta through beta).
pub const TOTAL: Band = Band::new(0.5, 30.0);

/// Non-overlapping windows in temporal order; the trailing remainder is dropped.
pub fn segment(signal: &MultiChannelSignal, window_seconds: f64) -> Result<Vec<MultiChannelSignal>> {
    signal.validate()?;
    let window = (window_seconds * signal.sample_rate).round();
    if !(window >= 2.0) {
        return Err(Error::invalid(format!(
            "window of {window_seconds} s holds fewer than two samples"
        )));
    }
    let window = window as usize;
    let count = signal.len() / window;
    if count == 0 {
        return Err(Error::invalid(format!(
            "signal of {:.3} s is shorter than one {window_seconds} s window",
            signal.duration()
        )));
    }
    Ok((0..count)
        .map(|s| MultiChannelSignal {
            samples: signal
                .samples
                .iter()
                .map(|c| c[s * window..(s + 1) * window].to_vec())
                .collect(),
            sample_rate: signal.sample_rate,
            channel_names: signal.channel_names.clone(),
        })
        .collect())
}

/// Maps each channel affinely onto [0, 1]; constant channels become zeros.
pub fn minmax_normalize(signal: &MultiChannelSignal) -> MultiChannelSignal {
    let samples = signal
        .samples
        .iter()
        .map(|c| {
            let lo = c.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = hi - lo;
            if span > 0.0 {
                c.iter().map(|x| (x - lo) / span).collect()
            } else {
                vec![0.0; c.len()]
            }
        })
        .collect();
    MultiChannelSignal {
        samples,
        sample_rate: signal.sample_rate,
        channel_names: signal.channel_names.clone(),
    }
}

/// Column-wise standardisation with population standard deviation;
/// zero-variance columns become zeros. `rows[i][j]` is feature `j` of row `i`.
pub fn zscore(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    if rows.is_empty() {
        return Vec::new();
    }
    let n = rows.len() as f64;
    let cols = rows[0].len();
    let mut out = rows.to_vec();
    for j in 0..cols {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        for r in &mut out {
            r[j] = if std > 0.0 { (r[j] - mean) / std } else { 0.0 };
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsdEstimate {
    /// From 0 Hz to Nyquist in steps of `sample_rate / segment_length`.
    pub frequencies: Vec<f64>,
    /// Power per Hz.
    pub power: Vec<f64>,
}

impl PsdEstimate {
    pub fn resolution(&self) -> f64 {
        self.frequencies.get(1).map_or(0.0, |f| f - self.frequencies[0])
    }

    /// Rectangle-rule total power, for sanity checks against the variance.
    pub fn total_power(&self) -> f64 {
        self.power.iter().sum::<f64>() * self.resolution()
    }

    pub fn peak_frequency(&self) -> f64 {
        let (i, _) = self
            .power
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &p)| if p > acc.1 { (i, p) } else { acc });
        self.frequencies[i]
    }
}

/// Periodic Hann window.
fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Averaged one-sided periodograms of Hann-windowed, mean-removed segments.
pub fn welch_psd(series: &[f64], sample_rate: f64, segment_length: usize, overlap_fraction: f64) -> Result<PsdEstimate> {
    if segment_length < 2 || segment_length > series.len() {
        return Err(Error::invalid(format!(
            "segment length {segment_length} must lie in [2, {}]",
            series.len()
        )));
    }
    if !(0.0..1.0).contains(&overlap_fraction) {
        return Err(Error::invalid(format!("overlap fraction must lie in [0, 1), got {overlap_fraction}")));
    }
    if !(sample_rate > 0.0) {
        return Err(Error::invalid("sample rate must be positive"));
    }
    let n = segment_length;
    let overlap = (overlap_fraction * n as f64).round() as usize;
    let step = (n - overlap.min(n - 1)).max(1);
    let window = hann(n);
    let window_power: f64 = window.iter().map(|w| w * w).sum();
    let scale = 1.0 / (sample_rate * window_power);

    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let bins = n / 2 + 1;
    let mut acc = vec![0.0; bins];
    let mut count = 0usize;
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut start = 0;
    while start + n <= series.len() {
        let seg = &series[start..start + n];
        let mean = seg.iter().sum::<f64>() / n as f64;
        for ((b, x), w) in buf.iter_mut().zip(seg).zip(&window) {
            *b = Complex::new((x - mean) * w, 0.0);
        }
        fft.process(&mut buf);
        for (k, a) in acc.iter_mut().enumerate() {
            *a += buf[k].norm_sqr();
        }
        count += 1;
        start += step;
    }
    let power = acc
        .iter()
        .enumerate()
        .map(|(k, &a)| {
            let one_sided = if k == 0 || (n % 2 == 0 && k == n / 2) { 1.0 } else { 2.0 };
            a / count as f64 * scale * one_sided
        })
        .collect();
    let frequencies = (0..bins).map(|k| k as f64 * sample_rate / n as f64).collect();
    Ok(PsdEstimate { frequencies, power })
}

/// Composite Simpson rule on equally spaced samples. An even sample count
/// closes the last interval with a three-point correction that is exact for
/// quadratics.
pub fn simpson(y: &[f64], dx: f64) -> f64 {
    match y.len() {
        0 | 1 => 0.0,
        2 => 0.5 * dx * (y[0] + y[1]),
        n if n % 2 == 1 => {
            let mut s = y[0] + y[n - 1];
            for (i, v) in y.iter().enumerate().take(n - 1).skip(1) {
                s += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
            }
            s * dx / 3.0
        }
        n => {
            let head = simpson(&y[..n - 1], dx);
            let tail = dx * (5.0 * y[n - 1] + 8.0 * y[n - 2] - y[n - 3]) / 12.0;
            head + tail
        }
    }
}

fn band_integral(psd: &PsdEstimate, band: Band) -> Result<f64> {
    let nyquist = *psd.frequencies.last().unwrap_or(&0.0);
    if !(band.low >= 0.0 && band.low < band.high && band.high <= nyquist) {
        return Err(Error::invalid(format!(
            "band [{}, {}] Hz outside the grid [0, {nyquist}] Hz",
            band.low, band.high
        )));
    }
    let values: Vec<f64> = psd
        .frequencies
        .iter()
        .zip(&psd.power)
        .filter(|(f, _)| **f >= band.low && **f <= band.high)
        .map(|(_, p)| *p)
        .collect();
    Ok(simpson(&values, psd.resolution()))
}

/// Simpson integral over `band` divided by the integral over `total_band`.
pub fn band_relative_power(psd: &PsdEstimate, band: Band, total_band: Band) -> Result<f64> {
    let total = band_integral(psd, total_band)?;
    if !(total > 0.0) {
        return Err(Error::Degenerate("zero power in the normalising band".into()));
    }
    Ok(band_integral(psd, band)? / total)
}

/// Antisymmetric matrix `values[i][j] = rp[i] - rp[j]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsymmetryMatrix {
    pub values: Vec<Vec<f64>>,
}

impl AsymmetryMatrix {
    /// Entries strictly above the diagonal, row by row.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let n = self.values.len();
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| self.values[i][j])
            .collect()
    }
}

pub fn asymmetry_matrix(relative_powers: &[f64]) -> AsymmetryMatrix {
    AsymmetryMatrix {
        values: relative_powers
            .iter()
            .map(|a| relative_powers.iter().map(|b| a - b).collect())
            .collect(),
    }
}

/// Welch settings used by [`segment_features`]: one-second segments, 50% overlap.
pub fn default_welch(series: &[f64], sample_rate: f64) -> Result<PsdEstimate> {
    let seg = (sample_rate.round() as usize).min(series.len());
    welch_psd(series, sample_rate, seg, 0.5)
}

/// Per-channel relative band power followed by the upper triangle of the
/// asymmetry matrix.
pub fn segment_features(segment: &MultiChannelSignal, band: Band, total_band: Band) -> Result<Vec<f64>> {
    let rp = segment
        .samples
        .iter()
        .map(|c| band_relative_power(&default_welch(c, segment.sample_rate)?, band, total_band))
        .collect::<Result<Vec<f64>>>()?;
    let mut out = rp.clone();
    out.extend(asymmetry_matrix(&rp).upper_triangle());
    Ok(out)
}

pub fn segment_feature_dim(channels: usize) -> usize {
    channels + channels * (channels - 1) / 2
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, amp: f64, fs: f64, seconds: f64) -> Vec<f64> {
        let n = (fs * seconds) as usize;
        (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / fs).sin()).collect()
    }

    fn single(samples: Vec<f64>, fs: f64) -> MultiChannelSignal {
        MultiChannelSignal::new(vec![samples], fs, vec!["c0".into()]).unwrap()
    }

    #[test]
    fn segment_counts() {
        let s = single(vec![0.0; 300 * 256], 256.0);
        let segs = segment(&s, 4.0).unwrap();
        assert_eq!(segs.len(), 75);
        assert!(segs.iter().all(|x| x.len() == 1024));
        let s = single(vec![0.0; 300 * 250], 250.0);
        assert_eq!(segment(&s, 1.0).unwrap().len(), 300);
    }

    #[test]
    fn short_signal_errors() {
        let s = single(vec![0.0; 128], 256.0);
        assert!(segment(&s, 1.0).is_err());
    }

    #[test]
    fn segments_concatenate_back() {
        let data: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let s = single(data.clone(), 100.0);
        let segs = segment(&s, 0.3).unwrap();
        let joined: Vec<f64> = segs.iter().flat_map(|x| x.samples[0].clone()).collect();
        assert_eq!(joined[..], data[..joined.len()]);
        assert_eq!(joined.len(), 990);
    }

    #[test]
    fn minmax_cases() {
        let s = MultiChannelSignal::new(
            vec![vec![0.0, 2.0, 4.0], vec![0.0, 1.0, 0.5], vec![3.0, 3.0, 3.0]],
            1.0,
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap();
        let n = minmax_normalize(&s);
        assert_eq!(n.samples[0], vec![0.0, 0.5, 1.0]);
        assert_eq!(n.samples[1], vec![0.0, 1.0, 0.5]);
        assert_eq!(n.samples[2], vec![0.0, 0.0, 0.0]);
        assert_eq!(minmax_normalize(&n), n);
    }

    #[test]
    fn zscore_cases() {
        let z = zscore(&[vec![1.0, 5.0], vec![3.0, 5.0]]);
        assert_eq!(z, vec![vec![-1.0, 0.0], vec![1.0, 0.0]]);
        let again = zscore(&z);
        for (a, b) in again.iter().flatten().zip(z.iter().flatten()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn sinusoid_psd_peak_and_power() {
        let x = sine(10.0, 1.0, 256.0, 4.0);
        let psd = welch_psd(&x, 256.0, 256, 0.5).unwrap();
        assert_eq!(psd.peak_frequency(), 10.0);
        assert_eq!(psd.resolution(), 1.0);
        assert_eq!(psd.frequencies.len(), 129);
        assert!((psd.total_power() - 0.5).abs() < 0.05, "{}", psd.total_power());
    }

    #[test]
    fn zero_and_dc_series_have_zero_psd() {
        let psd = welch_psd(&[0.0; 512], 256.0, 256, 0.5).unwrap();
        assert!(psd.power.iter().all(|&p| p == 0.0));
        let psd = welch_psd(&[3.5; 512], 256.0, 256, 0.5).unwrap();
        assert!(psd.power.iter().all(|&p| p.abs() < 1e-20));
    }

    #[test]
    fn oversized_segment_rejected() {
        assert!(welch_psd(&[0.0; 100], 256.0, 256, 0.5).is_err());
        assert!(welch_psd(&[0.0; 300], 256.0, 256, 1.0).is_err());
    }

    #[test]
    fn simpson_exact_for_quadratics() {
        // integral of x^2 over [0, 1] with 5 and 6 points.
        for n in [5usize, 6] {
            let dx = 1.0 / (n - 1) as f64;
            let y: Vec<f64> = (0..n).map(|i| (i as f64 * dx).powi(2)).collect();
            assert!((simpson(&y, dx) - 1.0 / 3.0).abs() < 1e-14, "n = {n}");
        }
    }

    #[test]
    fn alpha_sinusoid_relative_power() {
        let x = sine(10.0, 1.0, 256.0, 4.0);
        let psd = welch_psd(&x, 256.0, 1024, 0.5).unwrap();
        assert!(band_relative_power(&psd, ALPHA, TOTAL).unwrap() >= 0.95);
    }

    #[test]
    fn one_second_segments_match_reference_values() {
        // On a 1 Hz grid the Hann main lobe spans three bins and Simpson's
        // alternating weights count them differently in the two integrals.
        // scipy.signal.welch + scipy.integrate.simpson give the same numbers.
        let a = sine(10.0, 1.0, 256.0, 4.0);
        let b = sine(20.0, 1.0, 256.0, 4.0);
        let psd = welch_psd(&a, 256.0, 256, 0.5).unwrap();
        let r = band_relative_power(&psd, ALPHA, TOTAL).unwrap();
        assert!((r - 0.7875).abs() < 1e-9, "{r}");
        let x: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p + q).collect();
        let psd = welch_psd(&x, 256.0, 256, 0.5).unwrap();
        let r = band_relative_power(&psd, ALPHA, TOTAL).unwrap();
        assert!((r - 0.39375).abs() < 1e-9, "{r}");
    }

    #[test]
    fn two_sinusoids_split_power() {
        let a = sine(10.0, 1.0, 256.0, 4.0);
        let b = sine(20.0, 1.0, 256.0, 4.0);
        let x: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p + q).collect();
        let psd = welch_psd(&x, 256.0, 1024, 0.5).unwrap();
        let r = band_relative_power(&psd, ALPHA, TOTAL).unwrap();
        assert!((r - 0.5).abs() < 0.05, "{r}");
    }

    #[test]
    fn flat_psd_ratio_is_width_ratio() {
        let psd = PsdEstimate {
            frequencies: (0..=64).map(f64::from).collect(),
            power: vec![2.5; 65],
        };
        let r = band_relative_power(&psd, Band::new(0.0, 16.0), Band::new(0.0, 32.0)).unwrap();
        assert!((r - 0.5).abs() < 1e-6);
        let r = band_relative_power(&psd, Band::new(4.0, 13.0), Band::new(0.0, 32.0)).unwrap();
        assert!((r - 9.0 / 32.0).abs() < 1e-6);
    }

    #[test]
    fn zero_total_power_is_degenerate() {
        let psd = welch_psd(&[0.0; 512], 256.0, 256, 0.5).unwrap();
        assert!(matches!(band_relative_power(&psd, ALPHA, TOTAL), Err(Error::Degenerate(_))));
    }

    #[test]
    fn asymmetry_cases() {
        let m = asymmetry_matrix(&[0.2, 0.5]);
        assert!((m.values[0][1] + 0.3).abs() < 1e-15);
        assert!((m.values[1][0] - 0.3).abs() < 1e-15);
        assert_eq!(m.values[0][0], 0.0);
        let flat = asymmetry_matrix(&[0.4; 4]);
        assert!(flat.values.iter().flatten().all(|&v| v == 0.0));
        assert_eq!(flat.upper_triangle().len(), 6);
    }

    #[test]
    fn channel_subset_by_name() {
        let s = MultiChannelSignal::new(
            vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]],
            10.0,
            vec!["Fp1".into(), "Fp2".into(), "Cz".into()],
        )
        .unwrap();
        let sub = s.select_channels(&["Cz", "Fp1"]).unwrap();
        assert_eq!(sub.samples, vec![vec![5.0, 6.0], vec![1.0, 2.0]]);
        assert!(s.select_channels(&["O1"]).is_err());
    }
}
