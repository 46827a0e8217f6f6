//! Audio ingestion and speech-feature extraction.
//!
//! Raw clips become per-frame feature vectors (log Mel-filterbank energies,
//! MFCCs, or imported recognizer logits), which are resampled to the video
//! rate and cut into overlapping windows for the network. DSP runs in f64;
//! features are stored in the working scalar type.

use std::io::{BufReader, Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Result, VocaError};
use crate::io_util;
use crate::mat::Mat;
use crate::scalar::{sc, Scalar};

pub const VIDEO_FPS: f32 = 60.0;
pub const FEATURE_FPS: f32 = 50.0;
pub const DEFAULT_WINDOW: usize = 16;
pub const DEFAULT_FRAME_LEN: f64 = 0.02;
pub const DEFAULT_FRAME_STEP: f64 = 0.02;
pub const DEFAULT_N_FILTERS: usize = 26;

const LOG_ENERGY_FLOOR: f64 = 1e-10;

/// Mono audio clip with amplitudes in [-1, 1].
#[derive(Debug, Clone)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(VocaError::EmptyInput("audio clip has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(VocaError::Parameter("sample rate must be positive".into()));
        }
        Ok(AudioClip { samples, sample_rate })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Root-mean-square amplitude, accumulated in f64.
    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }
}

fn rms(samples: &[f32]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let sum: f64 = samples.iter().map(|&s| (s as f64) * (s as f64)).sum();
    (sum / samples.len() as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Fbank,
    Mfcc,
    ImportedLogits,
}

impl std::fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FeatureKind::Fbank => "fbank",
            FeatureKind::Mfcc => "mfcc",
            FeatureKind::ImportedLogits => "imported-logits",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = VocaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fbank" => Ok(FeatureKind::Fbank),
            "mfcc" => Ok(FeatureKind::Mfcc),
            "imported-logits" => Ok(FeatureKind::ImportedLogits),
            other => Err(VocaError::Parameter(format!("unknown feature kind {:?}", other))),
        }
    }
}

/// Per-frame feature vectors at a fixed frame rate.
#[derive(Debug, Clone)]
pub struct FeatureSequence<S> {
    pub frames: Mat<S>,
    pub fps: f32,
    pub kind: FeatureKind,
}

impl<S: Scalar> FeatureSequence<S> {
    pub fn new(frames: Mat<S>, fps: f32, kind: FeatureKind) -> Result<Self> {
        if frames.rows() == 0 {
            return Err(VocaError::EmptyInput("feature sequence has no frames".into()));
        }
        if frames.cols() == 0 {
            return Err(VocaError::Format("feature dimension must be positive".into()));
        }
        if !(fps > 0.0) {
            return Err(VocaError::Format(format!("fps must be positive, got {}", fps)));
        }
        Ok(FeatureSequence { frames, fps, kind })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

/// Overlapping feature windows, one per 60 fps output frame.
#[derive(Debug, Clone)]
pub struct WindowSequence<S> {
    windows: Vec<Mat<S>>,
    fps: f32,
}

impl<S: Scalar> WindowSequence<S> {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn window(&self, i: usize) -> &Mat<S> {
        &self.windows[i]
    }

    pub fn fps(&self) -> f32 {
        self.fps
    }

    pub fn window_len(&self) -> usize {
        self.windows.first().map_or(0, |w| w.rows())
    }

    pub fn dim(&self) -> usize {
        self.windows.first().map_or(0, |w| w.cols())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Mat<S>> {
        self.windows.iter()
    }
}

/// Read a RIFF/WAVE file (PCM16 or float32, 1-2 channels) as a mono clip.
pub fn load_wav(path: &Path) -> Result<AudioClip> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => VocaError::Io(io),
        other => VocaError::Format(format!("malformed WAV file: {}", other)),
    })?;
    let spec = reader.spec();
    if spec.channels == 0 || spec.channels > 2 {
        return Err(VocaError::Unsupported(format!(
            "{} channels; only mono and stereo are supported",
            spec.channels
        )));
    }

    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| VocaError::Format(format!("truncated WAV payload: {}", e)))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| VocaError::Format(format!("truncated WAV payload: {}", e)))?,
        (fmt, bits) => {
            return Err(VocaError::Unsupported(format!(
                "WAV encoding {:?}/{} bits; only PCM16 and float32 are supported",
                fmt, bits
            )))
        }
    };

    let samples = if spec.channels == 2 {
        interleaved
            .chunks_exact(2)
            .map(|pair| 0.5 * (pair[0] + pair[1]))
            .collect()
    } else {
        interleaved
    };
    AudioClip::new(samples, spec.sample_rate)
}

fn hann(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular Mel filters evaluated at the n_fft/2 + 1 real-spectrum bins.
/// Filter m rises from mel point m to m+1 and falls to m+2, linear in Hz.
fn mel_filterbank(n_filters: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let nyquist = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let points: Vec<f64> = (0..n_filters + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_filters + 1) as f64))
        .collect();

    let n_bins = n_fft / 2 + 1;
    let bin_hz = |k: usize| k as f64 * sample_rate as f64 / n_fft as f64;
    (0..n_filters)
        .map(|m| {
            let (lo, mid, hi) = (points[m], points[m + 1], points[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = bin_hz(k);
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

fn frame_counts(n_samples: usize, rate: u32, frame_len: f64, frame_step: f64) -> Result<(usize, usize, usize)> {
    let len = (frame_len * rate as f64).round() as usize;
    let step = (frame_step * rate as f64).round() as usize;
    if len == 0 || step == 0 {
        return Err(VocaError::Parameter("frame length and step must cover at least one sample".into()));
    }
    if n_samples < len {
        return Err(VocaError::EmptyInput(format!(
            "clip of {} samples is shorter than one {}-sample frame",
            n_samples, len
        )));
    }
    let n_frames = (n_samples - len) / step + 1;
    Ok((len, step, n_frames))
}

/// Log Mel-filterbank energies per frame.
pub fn compute_fbank<S: Scalar>(
    clip: &AudioClip,
    n_filters: usize,
    frame_len: f64,
    frame_step: f64,
) -> Result<FeatureSequence<S>> {
    if n_filters == 0 {
        return Err(VocaError::Parameter("need at least one Mel filter".into()));
    }
    let (len, step, n_frames) = frame_counts(clip.samples.len(), clip.sample_rate, frame_len, frame_step)?;
    let n_fft = len.next_power_of_two();
    let window = hann(len);
    let filters = mel_filterbank(n_filters, n_fft, clip.sample_rate);

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];

    let mut frames = Mat::zeros(n_frames, n_filters);
    for i in 0..n_frames {
        let start = i * step;
        for (j, slot) in buf.iter_mut().enumerate() {
            let s = if j < len { clip.samples[start + j] as f64 * window[j] } else { 0.0 };
            *slot = Complex::new(s, 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect();
        let row = frames.row_mut(i);
        for (m, filt) in filters.iter().enumerate() {
            let energy: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            row[m] = sc(energy.max(LOG_ENERGY_FLOOR).ln());
        }
    }
    FeatureSequence::new(frames, (1.0 / frame_step) as f32, FeatureKind::Fbank)
}

/// Type-II DCT by direct summation: out_j = sum_k in_k * cos(pi*j*(k+0.5)/K).
pub fn dct2_rows<S: Scalar>(mat: &Mat<S>, n_coeffs: usize) -> Mat<S> {
    let k_total = mat.cols();
    Mat::from_fn(mat.rows(), n_coeffs, |r, j| {
        let row = mat.row(r);
        let sum: f64 = row
            .iter()
            .enumerate()
            .map(|(k, &e)| {
                e.to_f64_c() * (std::f64::consts::PI * j as f64 * (k as f64 + 0.5) / k_total as f64).cos()
            })
            .sum();
        sc(sum)
    })
}

/// MFCCs: the first n_coeffs DCT-II coefficients of the log filterbank energies.
pub fn compute_mfcc<S: Scalar>(
    clip: &AudioClip,
    n_coeffs: usize,
    n_filters: usize,
    frame_len: f64,
    frame_step: f64,
) -> Result<FeatureSequence<S>> {
    if n_coeffs > n_filters {
        return Err(VocaError::Parameter(format!(
            "requested {} coefficients from {} filters",
            n_coeffs, n_filters
        )));
    }
    let fbank = compute_fbank::<S>(clip, n_filters, frame_len, frame_step)?;
    let frames = dct2_rows(&fbank.frames, n_coeffs);
    FeatureSequence::new(frames, fbank.fps, FeatureKind::Mfcc)
}

const FEATURE_MAGIC: &[u8; 4] = b"VFEA";
const FEATURE_VERSION: u32 = 1;

/// Write a feature sequence to the "VFEA" container (32-bit payload).
pub fn export_features<S: Scalar>(seq: &FeatureSequence<S>, path: &Path) -> Result<()> {
    io_util::atomic_write(path, |w| write_features(seq, w))
}

fn write_features<S: Scalar>(seq: &FeatureSequence<S>, w: &mut dyn Write) -> Result<()> {
    w.write_all(FEATURE_MAGIC)?;
    io_util::write_u32(w, FEATURE_VERSION)?;
    io_util::write_u32(w, seq.frames.rows() as u32)?;
    io_util::write_u32(w, seq.frames.cols() as u32)?;
    io_util::write_f32(w, seq.fps)?;
    for v in seq.frames.as_slice() {
        io_util::write_f32(w, v.to_f64_c() as f32)?;
    }
    Ok(())
}

/// Read a "VFEA" container. The payload carries no kind tag, so the result is
/// tagged as imported logits.
pub fn import_features<S: Scalar>(path: &Path) -> Result<FeatureSequence<S>> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    read_features(&mut r)
}

fn read_features<S: Scalar, R: Read + ?Sized>(r: &mut R) -> Result<FeatureSequence<S>> {
    io_util::expect_magic(r, FEATURE_MAGIC, "feature container")?;
    let version = io_util::read_u32(r)?;
    if version != FEATURE_VERSION {
        return Err(VocaError::Format(format!("unsupported feature container version {}", version)));
    }
    let rows = io_util::read_u32(r)? as usize;
    let cols = io_util::read_u32(r)? as usize;
    let fps = io_util::read_f32(r)?;
    if rows == 0 {
        return Err(VocaError::EmptyInput("feature container holds zero frames".into()));
    }
    if cols == 0 || !(fps > 0.0) {
        return Err(VocaError::Format(format!("bad feature dims {}x{} at {} fps", rows, cols, fps)));
    }
    let data = io_util::read_f32_vec(r, rows * cols)
        .map_err(|_| VocaError::Format("feature payload is truncated".into()))?;
    let frames = Mat::from_vec(rows, cols, data.into_iter().map(|v| sc(v as f64)).collect())?;
    FeatureSequence::new(frames, fps, FeatureKind::ImportedLogits)
}

/// Linearly resample a feature sequence to a new frame rate. The output spans
/// the same time interval: frame j sits at source position j*(n_in-1)/(n_out-1).
pub fn resample_features<S: Scalar>(seq: &FeatureSequence<S>, target_fps: f32) -> Result<FeatureSequence<S>> {
    if seq.n_frames() < 2 {
        return Err(VocaError::InsufficientData(
            "resampling needs at least two frames to interpolate".into(),
        ));
    }
    if !(target_fps > 0.0) {
        return Err(VocaError::Parameter(format!("target fps must be positive, got {}", target_fps)));
    }
    let n_in = seq.n_frames();
    let n_out = ((n_in as f64 * target_fps as f64 / seq.fps as f64).round() as usize).max(1);
    let d = seq.dim();

    let mut frames = Mat::zeros(n_out, d);
    for j in 0..n_out {
        let pos = if n_out == 1 {
            0.0
        } else {
            j as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        };
        let i0 = (pos.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let frac = pos - i0 as f64;
        let (a, b) = (seq.frames.row(i0), seq.frames.row(i1));
        let row = frames.row_mut(j);
        for c in 0..d {
            // a + frac*(b - a) keeps constant signals bit-exact: equal
            // neighbors subtract to zero before the weight ever applies.
            let (av, bv) = (a[c].to_f64_c(), b[c].to_f64_c());
            row[c] = sc(av + frac * (bv - av));
        }
    }
    FeatureSequence::new(frames, target_fps, seq.kind)
}

/// Cut a 60 fps sequence into one centered W-frame window per frame.
/// Window i covers frames [i - W/2, i + W/2 - 1] (even W takes one extra past
/// frame); out-of-range rows replicate the nearest edge frame.
pub fn window_features<S: Scalar>(seq: &FeatureSequence<S>, w: usize) -> Result<WindowSequence<S>> {
    if w == 0 {
        return Err(VocaError::Parameter("window length must be at least 1".into()));
    }
    if (seq.fps - VIDEO_FPS).abs() > 1e-3 {
        return Err(VocaError::Parameter(format!(
            "windows are defined at {} fps; got {} fps (resample first)",
            VIDEO_FPS, seq.fps
        )));
    }
    let n = seq.n_frames();
    let d = seq.dim();
    let half = w / 2;
    let windows = (0..n)
        .map(|i| {
            Mat::from_fn(w, d, |r, c| {
                let idx = (i + r).saturating_sub(half).min(n - 1);
                seq.frames[(idx, c)]
            })
        })
        .collect();
    Ok(WindowSequence { windows, fps: seq.fps })
}

/// Add noise to a signal at a relative level: the mixed-in noise RMS equals
/// (signal RMS) * 10^(gain_db/20). Noise is looped or truncated to the signal
/// length; the output is clipped to [-1, 1].
pub fn mix_noise(signal: &AudioClip, noise: &AudioClip, gain_db: f64) -> Result<AudioClip> {
    if signal.sample_rate != noise.sample_rate {
        return Err(VocaError::Parameter(format!(
            "sample-rate mismatch: signal {} Hz, noise {} Hz",
            signal.sample_rate, noise.sample_rate
        )));
    }
    if gain_db > 0.0 {
        return Err(VocaError::Parameter(format!("noise gain must be <= 0 dB, got {}", gain_db)));
    }
    let n = signal.samples.len();
    let looped: Vec<f32> = (0..n).map(|i| noise.samples[i % noise.samples.len()]).collect();
    let noise_rms = rms(&looped);
    if noise_rms == 0.0 {
        return Err(VocaError::Parameter("noise clip has zero RMS".into()));
    }
    let scale = signal.rms() / noise_rms * 10f64.powf(gain_db / 20.0);
    let samples = signal
        .samples
        .iter()
        .zip(&looped)
        .map(|(&s, &z)| ((s as f64 + scale * z as f64).clamp(-1.0, 1.0)) as f32)
        .collect();
    AudioClip::new(samples, signal.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn sine(freq: f64, secs: f64, rate: u32, amp: f64) -> AudioClip {
        let n = (secs * rate as f64).round() as usize;
        let samples = (0..n)
            .map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin()) as f32)
            .collect();
        AudioClip::new(samples, rate).unwrap()
    }

    #[test]
    fn wav_pcm16_scaling_and_mono() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 22050,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        // Frame 1: full-scale left, zero right. Frame 2: opposite half-scale pair.
        for v in [32767i16, 0, 16384, -16384] {
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();

        let clip = load_wav(&path).unwrap();
        assert_eq!(clip.sample_rate, 22050);
        assert_eq!(clip.samples.len(), 2);
        assert_abs_diff_eq!(clip.samples[0], 0.5 * 32767.0 / 32768.0, epsilon = 1e-7);
        assert_abs_diff_eq!(clip.samples[1], 0.0, epsilon = 1e-7);
    }

    #[test]
    fn wav_float32_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for v in [0.25f32, -0.75, 1.0] {
            w.write_sample(v).unwrap();
        }
        w.finalize().unwrap();
        let clip = load_wav(&path).unwrap();
        assert_eq!(clip.samples, vec![0.25, -0.75, 1.0]);
    }

    #[test]
    fn fbank_shape_and_rate() {
        let clip = sine(440.0, 1.0, 22050, 0.5);
        let seq = compute_fbank::<f32>(&clip, DEFAULT_N_FILTERS, DEFAULT_FRAME_LEN, DEFAULT_FRAME_STEP).unwrap();
        assert_eq!(seq.n_frames(), 50);
        assert_eq!(seq.dim(), 26);
        assert_eq!(seq.fps, 50.0);
        assert_eq!(seq.kind, FeatureKind::Fbank);
    }

    #[test]
    fn fbank_silence_hits_log_floor() {
        let clip = AudioClip::new(vec![0.0; 22050], 22050).unwrap();
        let seq = compute_fbank::<f64>(&clip, 26, DEFAULT_FRAME_LEN, DEFAULT_FRAME_STEP).unwrap();
        let expected = LOG_ENERGY_FLOOR.ln();
        for r in 0..seq.n_frames() {
            for &v in seq.frames.row(r) {
                assert_abs_diff_eq!(v, expected, epsilon = 1e-12);
            }
        }
    }

    /// Oracle: brute-force DFT magnitude peak of one windowed frame, mapped to
    /// the filter with the largest weight at that bin.
    fn expected_peak_filter(clip: &AudioClip) -> usize {
        let rate = clip.sample_rate;
        let len = (DEFAULT_FRAME_LEN * rate as f64).round() as usize;
        let n_fft = len.next_power_of_two();
        let window = hann(len);
        let frame: Vec<f64> = (0..len).map(|i| clip.samples[i] as f64 * window[i]).collect();
        let mut best_bin = 0;
        let mut best_mag = -1.0;
        for k in 0..=n_fft / 2 {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &x) in frame.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * k as f64 * n as f64 / n_fft as f64;
                re += x * ang.cos();
                im += x * ang.sin();
            }
            let mag = re * re + im * im;
            if mag > best_mag {
                best_mag = mag;
                best_bin = k;
            }
        }
        let filters = mel_filterbank(26, n_fft, rate);
        (0..filters.len())
            .max_by(|&a, &b| filters[a][best_bin].partial_cmp(&filters[b][best_bin]).unwrap())
            .unwrap()
    }

    #[test]
    fn fbank_tone_peak_tracks_frequency() {
        let lo = sine(440.0, 0.2, 22050, 0.5);
        let hi = sine(880.0, 0.2, 22050, 0.5);
        let argmax = |clip: &AudioClip| {
            let seq = compute_fbank::<f64>(clip, 26, DEFAULT_FRAME_LEN, DEFAULT_FRAME_STEP).unwrap();
            let row = seq.frames.row(seq.n_frames() / 2);
            (0..row.len()).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()).unwrap()
        };
        let (a_lo, a_hi) = (argmax(&lo), argmax(&hi));
        assert_eq!(a_lo, expected_peak_filter(&lo));
        assert_eq!(a_hi, expected_peak_filter(&hi));
        assert!(a_hi > a_lo, "880 Hz peak filter {} not above 440 Hz peak filter {}", a_hi, a_lo);
    }

    #[test]
    fn dct_matches_direct_summation() {
        use rand::Rng;
        let mut rng = crate::rng::seeded_rng(11, "dct-oracle");
        let row: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mat = Mat::from_vec(1, 8, row.clone()).unwrap();
        let out = dct2_rows(&mat, 8);
        for j in 0..8 {
            let brute: f64 = (0..8)
                .map(|k| row[k] * (std::f64::consts::PI * j as f64 * (k as f64 + 0.5) / 8.0).cos())
                .sum();
            assert_abs_diff_eq!(out[(0, j)], brute, epsilon = 1e-10);
        }
    }

    #[test]
    fn dct_of_constant_concentrates_in_coefficient_zero() {
        let mat = Mat::from_vec(1, 8, vec![0.7f64; 8]).unwrap();
        let out = dct2_rows(&mat, 8);
        assert_abs_diff_eq!(out[(0, 0)], 8.0 * 0.7, epsilon = 1e-12);
        for j in 1..8 {
            assert_abs_diff_eq!(out[(0, j)], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn mfcc_is_dct_of_fbank() {
        let clip = sine(300.0, 0.3, 22050, 0.4);
        let fbank = compute_fbank::<f32>(&clip, 26, DEFAULT_FRAME_LEN, DEFAULT_FRAME_STEP).unwrap();
        let mfcc = compute_mfcc::<f32>(&clip, 13, 26, DEFAULT_FRAME_LEN, DEFAULT_FRAME_STEP).unwrap();
        assert_eq!(mfcc.dim(), 13);
        assert_eq!(mfcc.kind, FeatureKind::Mfcc);
        let expected = dct2_rows(&fbank.frames, 13);
        for r in 0..mfcc.n_frames() {
            for c in 0..13 {
                assert_abs_diff_eq!(mfcc.frames[(r, c)], expected[(r, c)], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn mfcc_rejects_too_many_coefficients() {
        let clip = sine(300.0, 0.1, 22050, 0.4);
        let err = compute_mfcc::<f32>(&clip, 27, 26, DEFAULT_FRAME_LEN, DEFAULT_FRAME_STEP).unwrap_err();
        assert!(matches!(err, VocaError::Parameter(_)));
    }

    #[test]
    fn feature_container_round_trip_is_bit_exact() {
        use rand::Rng;
        let mut rng = crate::rng::seeded_rng(3, "vfea");
        let frames = Mat::from_fn(150, 29, |_, _| rng.gen_range(-10.0f32..10.0));
        let seq = FeatureSequence::new(frames, 50.0, FeatureKind::Fbank).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.vfea");
        export_features(&seq, &path).unwrap();
        let back = import_features::<f32>(&path).unwrap();
        assert_eq!(back.kind, FeatureKind::ImportedLogits);
        assert_eq!(back.fps, 50.0);
        assert_eq!(back.frames.as_slice(), seq.frames.as_slice());
    }

    #[test]
    fn feature_container_rejects_bad_input() {
        let dir = tempfile::tempdir().unwrap();

        let zero_rows = dir.path().join("zero.vfea");
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(b"VFEA");
        for v in [1u32, 0, 29] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&50.0f32.to_le_bytes());
        std::fs::write(&zero_rows, &buf).unwrap();
        assert!(matches!(import_features::<f32>(&zero_rows).unwrap_err(), VocaError::EmptyInput(_)));

        let bad_magic = dir.path().join("bad.vfea");
        std::fs::write(&bad_magic, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(import_features::<f32>(&bad_magic).unwrap_err(), VocaError::Format(_)));

        let truncated = dir.path().join("trunc.vfea");
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(b"VFEA");
        for v in [1u32, 10, 29] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&50.0f32.to_le_bytes());
        buf.extend_from_slice(&0.0f32.to_le_bytes());
        std::fs::write(&truncated, &buf).unwrap();
        assert!(matches!(import_features::<f32>(&truncated).unwrap_err(), VocaError::Format(_)));
    }

    #[test]
    fn resample_preserves_constants_exactly() {
        let frames = Mat::from_fn(100, 3, |_, c| (c as f32) + 0.5);
        let seq = FeatureSequence::new(frames, 50.0, FeatureKind::Fbank).unwrap();
        let out = resample_features(&seq, 60.0).unwrap();
        assert_eq!(out.n_frames(), 120);
        assert_eq!(out.fps, 60.0);
        for r in 0..out.n_frames() {
            for c in 0..3 {
                assert_eq!(out.frames[(r, c)], (c as f32) + 0.5);
            }
        }

        // Exactness must not depend on rounding slack in a wider scalar.
        let frames = Mat::from_fn(100, 2, |_, c| 0.7 + 0.1 * c as f64);
        let seq = FeatureSequence::new(frames, 50.0, FeatureKind::Fbank).unwrap();
        let out = resample_features(&seq, 60.0).unwrap();
        for r in 0..out.n_frames() {
            assert_eq!(out.frames[(r, 0)], 0.7);
            assert_eq!(out.frames[(r, 1)], 0.7 + 0.1);
        }
    }

    #[test]
    fn resample_ramp_matches_closed_form() {
        let n_in = 100usize;
        let frames = Mat::from_fn(n_in, 1, |r, _| r as f64);
        let seq = FeatureSequence::new(frames, 50.0, FeatureKind::Fbank).unwrap();
        let out = resample_features(&seq, 60.0).unwrap();
        let n_out = out.n_frames();
        assert_eq!(n_out, 120);
        for j in 0..n_out {
            let expected = j as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
            assert_abs_diff_eq!(out.frames[(j, 0)], expected, epsilon = 1e-6);
        }
        assert_eq!(out.frames[(0, 0)], 0.0);
        assert_eq!(out.frames[(n_out - 1, 0)], (n_in - 1) as f64);
    }

    #[test]
    fn resample_needs_two_frames() {
        let seq = FeatureSequence::new(Mat::<f32>::from_fn(1, 4, |_, _| 1.0), 50.0, FeatureKind::Fbank).unwrap();
        assert!(matches!(resample_features(&seq, 60.0).unwrap_err(), VocaError::InsufficientData(_)));
    }

    #[test]
    fn windows_cover_and_replicate_edges() {
        let frames = Mat::from_fn(12, 2, |r, _| r as f32);
        let seq = FeatureSequence::new(frames, 60.0, FeatureKind::ImportedLogits).unwrap();
        let ws = window_features(&seq, 3).unwrap();
        assert_eq!(ws.len(), 12);
        assert_eq!(ws.window_len(), 3);
        // Middle window i=5 holds frames 4,5,6.
        let mid = ws.window(5);
        assert_eq!((mid[(0, 0)], mid[(1, 0)], mid[(2, 0)]), (4.0, 5.0, 6.0));
        // First window replicates frame 0.
        let first = ws.window(0);
        assert_eq!((first[(0, 0)], first[(1, 0)], first[(2, 0)]), (0.0, 0.0, 1.0));
        // Last window replicates frame 11.
        let last = ws.window(11);
        assert_eq!((last[(0, 0)], last[(1, 0)], last[(2, 0)]), (10.0, 11.0, 11.0));
    }

    #[test]
    fn single_frame_window_is_all_replication() {
        let seq = FeatureSequence::new(Mat::<f32>::from_fn(1, 2, |_, c| c as f32), 60.0, FeatureKind::Fbank).unwrap();
        let ws = window_features(&seq, 3).unwrap();
        assert_eq!(ws.len(), 1);
        let w = ws.window(0);
        for r in 0..3 {
            assert_eq!(w[(r, 0)], 0.0);
            assert_eq!(w[(r, 1)], 1.0);
        }
    }

    #[test]
    fn even_window_takes_one_extra_past_frame() {
        let frames = Mat::from_fn(40, 1, |r, _| r as f32);
        let seq = FeatureSequence::new(frames, 60.0, FeatureKind::ImportedLogits).unwrap();
        let ws = window_features(&seq, 16).unwrap();
        let w = ws.window(20);
        assert_eq!(w[(0, 0)], 12.0);
        assert_eq!(w[(15, 0)], 27.0);
    }

    #[test]
    fn mix_noise_hits_requested_level() {
        let signal = sine(220.0, 0.5, 22050, 0.3);
        let noise = {
            use rand::Rng;
            let mut rng = crate::rng::seeded_rng(5, "noise");
            let samples: Vec<f32> = (0..4410).map(|_| rng.gen_range(-0.1f32..0.1)).collect();
            AudioClip::new(samples, 22050).unwrap()
        };
        for gain_db in [-36.0, -24.0, -18.0, -12.0] {
            let mixed = mix_noise(&signal, &noise, gain_db).unwrap();
            let residual: Vec<f32> = mixed
                .samples
                .iter()
                .zip(&signal.samples)
                .map(|(&m, &s)| m - s)
                .collect();
            let measured_db = 20.0 * (rms(&residual) / signal.rms()).log10();
            assert!(
                (measured_db - gain_db).abs() < 0.1,
                "gain {} dB measured {} dB",
                gain_db,
                measured_db
            );
        }
    }

    #[test]
    fn mix_noise_vanishes_at_negative_300_db() {
        let signal = sine(220.0, 0.1, 22050, 0.3);
        let noise = sine(700.0, 0.1, 22050, 0.5);
        let mixed = mix_noise(&signal, &noise, -300.0).unwrap();
        for (m, s) in mixed.samples.iter().zip(&signal.samples) {
            assert!((m - s).abs() < 1e-10);
        }
    }

    #[test]
    fn mix_noise_rejects_degenerate_inputs() {
        let a = sine(220.0, 0.1, 22050, 0.3);
        let b = sine(220.0, 0.1, 16000, 0.3);
        assert!(matches!(mix_noise(&a, &b, -12.0).unwrap_err(), VocaError::Parameter(_)));
        let silent = AudioClip::new(vec![0.0; 100], 22050).unwrap();
        assert!(matches!(mix_noise(&a, &silent, -12.0).unwrap_err(), VocaError::Parameter(_)));
    }
}
