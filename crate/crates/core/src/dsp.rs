//! Log gammatone spectrogram ("Log-GTs") features.
//!
//! Pipeline: Hamming STFT power → gammatone weighting → natural log →
//! regression delta over the whole clip → 128-frame segments with 50%
//! overlap, static and delta stacked as two channels.

use std::path::Path;

use rustfft::{num_complex::Complex, FftPlanner};

use crate::audio::AudioClip;
use crate::error::{arg_err, shape_err, Error, Result};
use crate::tensor::{gemm, Layout};

pub const DEFAULT_WINDOW: usize = 1024;
pub const DEFAULT_HOP: usize = 512;
pub const DEFAULT_BANDS: usize = 128;
pub const DEFAULT_F_MIN_HZ: f64 = 20.0;
pub const LOG_EPS: f64 = 1e-10;
pub const DELTA_HALF_WINDOW: usize = 2;
pub const SEGMENT_FRAMES: usize = 128;
pub const SEGMENT_OVERLAP: f64 = 0.5;
/// Lower bound applied to fitted standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            window_len: DEFAULT_WINDOW,
            hop: DEFAULT_HOP,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len < 2 || self.hop == 0 || self.hop > self.window_len {
            return Err(arg_err!(
                "STFT needs 0 < hop <= window_len (window {}, hop {})",
                self.window_len,
                self.hop
            ));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.window_len / 2 + 1
    }

    pub fn num_frames(&self, len: usize) -> usize {
        if len < self.window_len {
            0
        } else {
            (len - self.window_len) / self.hop + 1
        }
    }
}

/// Dense row-major `rows × cols` matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err!("{rows}x{cols} matrix from {} values", data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Symmetric Hamming window.
pub fn hamming(n: usize) -> Vec<f64> {
    let denom = (n - 1) as f64;
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / denom).cos())
        .collect()
}

/// Squared-magnitude STFT, one row per frame. Frame `t` covers samples
/// `[t·hop, t·hop + window_len)`.
pub fn stft_power(clip: &AudioClip, cfg: &StftConfig) -> Result<Matrix> {
    cfg.validate()?;
    let frames = cfg.num_frames(clip.samples.len());
    if frames == 0 {
        return Err(Error::EmptyInput(format!(
            "clip of {} samples is shorter than one {}-sample window",
            clip.samples.len(),
            cfg.window_len
        )));
    }
    let n = cfg.window_len;
    let bins = cfg.num_bins();
    let window = hamming(n);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut out = Matrix::zeros(frames, bins);
    for t in 0..frames {
        let frame = &clip.samples[t * cfg.hop..t * cfg.hop + n];
        for ((b, &s), &w) in buf.iter_mut().zip(frame).zip(&window) {
            *b = Complex::new(s as f64 * w, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (o, c) in out.data[t * bins..(t + 1) * bins].iter_mut().zip(&buf) {
            *o = c.norm_sqr();
        }
    }
    Ok(out)
}

/// Glasberg–Moore equivalent rectangular bandwidth in Hz.
pub fn erb_hz(f: f64) -> f64 {
    24.7 * (4.37 * f / 1000.0 + 1.0)
}

/// ERB-rate (number of ERBs below `f`).
pub fn erb_rate(f: f64) -> f64 {
    21.4 * (4.37 * f / 1000.0 + 1.0).log10()
}

pub fn erb_rate_inverse(e: f64) -> f64 {
    (10f64.powf(e / 21.4) - 1.0) * 1000.0 / 4.37
}

/// Spectrogram-domain gammatone filterbank.
#[derive(Clone, Debug, PartialEq)]
pub struct GammatoneBank {
    pub num_bands: usize,
    pub sample_rate_hz: u32,
    /// `num_bands × num_bins`.
    pub weights: Matrix,
    pub center_freqs_hz: Vec<f64>,
}

impl GammatoneBank {
    pub fn num_bins(&self) -> usize {
        self.weights.cols
    }
}

/// Centers sit at the midpoints of `num_bands` equal ERB-rate cells spanning
/// `[f_min, fs/2]`. Row `b` is the squared magnitude of a 4th-order gammatone
/// (bandwidth `1.019·ERB(fc)`) sampled at the FFT bin frequencies,
/// normalized to a peak of exactly 1.
pub fn make_gammatone_bank(
    num_bands: usize,
    num_bins: usize,
    sample_rate_hz: u32,
    f_min_hz: f64,
) -> Result<GammatoneBank> {
    let nyquist = sample_rate_hz as f64 / 2.0;
    if num_bands < 2 || num_bins < 2 || !(f_min_hz > 0.0 && f_min_hz < nyquist) {
        return Err(arg_err!(
            "gammatone bank needs >= 2 bands and bins and 0 < f_min < fs/2 \
             (bands {num_bands}, bins {num_bins}, f_min {f_min_hz}, fs {sample_rate_hz})"
        ));
    }
    let (lo, hi) = (erb_rate(f_min_hz), erb_rate(nyquist));
    let cell = (hi - lo) / num_bands as f64;
    let centers: Vec<f64> = (0..num_bands)
        .map(|b| erb_rate_inverse(lo + (b as f64 + 0.5) * cell))
        .collect();
    // bins span 0..=fs/2
    let n_fft = 2 * (num_bins - 1);
    let bin_hz = sample_rate_hz as f64 / n_fft as f64;
    let mut weights = Matrix::zeros(num_bands, num_bins);
    for (b, &fc) in centers.iter().enumerate() {
        let bw = 1.019 * erb_hz(fc);
        let row = &mut weights.data[b * num_bins..(b + 1) * num_bins];
        for (k, w) in row.iter_mut().enumerate() {
            let x = (k as f64 * bin_hz - fc) / bw;
            *w = (1.0 + x * x).powi(-4);
        }
        let peak = row.iter().copied().fold(0.0, f64::max);
        row.iter_mut().for_each(|w| *w /= peak);
    }
    Ok(GammatoneBank {
        num_bands,
        sample_rate_hz,
        weights,
        center_freqs_hz: centers,
    })
}

/// Frames × bands spectrogram in the energy or log domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub values: Matrix,
    pub log_domain: bool,
    pub frame_rate_hz: f64,
}

impl Spectrogram {
    pub fn num_frames(&self) -> usize {
        self.values.rows
    }

    pub fn num_bands(&self) -> usize {
        self.values.cols
    }
}

/// `out[t,b] = Σ_k weights[b,k] · power[t,k]`.
pub fn apply_bank(power: &Matrix, bank: &GammatoneBank, frame_rate_hz: f64) -> Result<Spectrogram> {
    if power.cols != bank.num_bins() {
        return Err(shape_err!(
            "power has {} bins, bank expects {}",
            power.cols,
            bank.num_bins()
        ));
    }
    let mut out = Matrix::zeros(power.rows, bank.num_bands);
    gemm(
        power.rows,
        power.cols,
        bank.num_bands,
        &power.data,
        Layout::Normal,
        &bank.weights.data,
        Layout::Transposed,
        0.0,
        &mut out.data,
    );
    Ok(Spectrogram {
        values: out,
        log_domain: false,
        frame_rate_hz,
    })
}

/// `ln(x + eps)` elementwise.
pub fn log_compress(spec: &Spectrogram, eps: f64) -> Result<Spectrogram> {
    if spec.log_domain {
        return Err(arg_err!("spectrogram is already in the log domain"));
    }
    let mut values = spec.values.clone();
    values.data.iter_mut().for_each(|v| *v = (*v + eps).ln());
    Ok(Spectrogram {
        values,
        log_domain: true,
        frame_rate_hz: spec.frame_rate_hz,
    })
}

/// Regression delta over time with replicate-padded edges:
/// `d[t] = Σ_{n=1..N} n·(x[t+n] − x[t−n]) / (2·Σ n²)`.
pub fn compute_delta(spec: &Spectrogram, half_window: usize) -> Result<Spectrogram> {
    if half_window == 0 {
        return Err(arg_err!("delta half-window must be >= 1"));
    }
    let (frames, bands) = (spec.num_frames(), spec.num_bands());
    if frames == 0 {
        return Err(Error::EmptyInput("delta of an empty spectrogram".into()));
    }
    let norm = 2.0 * (1..=half_window).map(|n| (n * n) as f64).sum::<f64>();
    let clamp = |t: isize| t.clamp(0, frames as isize - 1) as usize;
    let mut out = Matrix::zeros(frames, bands);
    for t in 0..frames {
        for n in 1..=half_window {
            let next = spec.values.row(clamp(t as isize + n as isize));
            let prev = spec.values.row(clamp(t as isize - n as isize));
            let w = n as f64 / norm;
            for (b, o) in out.data[t * bands..(t + 1) * bands].iter_mut().enumerate() {
                *o += w * (next[b] - prev[b]);
            }
        }
    }
    Ok(Spectrogram {
        values: out,
        log_domain: spec.log_domain,
        frame_rate_hz: spec.frame_rate_hz,
    })
}

/// One `frames × bands × 2` network input, stored time-major, band-next,
/// channel-last (channel 0 static, channel 1 delta).
#[derive(Clone, Debug, PartialEq)]
pub struct LogGtSegment {
    pub frames: usize,
    pub bands: usize,
    pub segment_index: usize,
    pub data: Vec<f32>,
}

pub const CHANNELS: usize = 2;

impl LogGtSegment {
    pub fn new(frames: usize, bands: usize, segment_index: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * bands * CHANNELS {
            return Err(shape_err!("segment {frames}x{bands}x2 from {} values", data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature value".into()));
        }
        Ok(LogGtSegment {
            frames,
            bands,
            segment_index,
            data,
        })
    }

    pub fn at(&self, t: usize, b: usize, c: usize) -> f32 {
        self.data[(t * self.bands + b) * CHANNELS + c]
    }
}

/// Segment hop in frames for a given overlap.
pub fn segment_hop(frames_per_segment: usize, overlap: f64) -> usize {
    ((frames_per_segment as f64 * (1.0 - overlap)).round() as usize).max(1)
}

/// Number of full segments that fit in `frames`.
pub fn segment_count(frames: usize, frames_per_segment: usize, overlap: f64) -> usize {
    if frames < frames_per_segment {
        0
    } else {
        (frames - frames_per_segment) / segment_hop(frames_per_segment, overlap) + 1
    }
}

/// Cuts full-length windows (trailing partial window dropped).
pub fn segment(
    spec_static: &Spectrogram,
    spec_delta: &Spectrogram,
    frames_per_segment: usize,
    overlap: f64,
) -> Result<Vec<LogGtSegment>> {
    if spec_static.values.rows != spec_delta.values.rows || spec_static.values.cols != spec_delta.values.cols {
        return Err(shape_err!("static and delta spectrograms differ in shape"));
    }
    if frames_per_segment == 0 || !(0.0..1.0).contains(&overlap) {
        return Err(arg_err!(
            "segment length {frames_per_segment} / overlap {overlap} invalid"
        ));
    }
    let frames = spec_static.num_frames();
    let bands = spec_static.num_bands();
    let count = segment_count(frames, frames_per_segment, overlap);
    if count == 0 {
        return Err(Error::EmptyInput(format!(
            "{frames} frames is shorter than one {frames_per_segment}-frame segment"
        )));
    }
    let hop = segment_hop(frames_per_segment, overlap);
    (0..count)
        .map(|s| {
            let start = s * hop;
            let mut data = Vec::with_capacity(frames_per_segment * bands * CHANNELS);
            for t in start..start + frames_per_segment {
                for (&a, &d) in spec_static.values.row(t).iter().zip(spec_delta.values.row(t)) {
                    data.push(a as f32);
                    data.push(d as f32);
                }
            }
            LogGtSegment::new(frames_per_segment, bands, s, data)
        })
        .collect()
}

/// Per-channel global mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl Default for NormStats {
    fn default() -> Self {
        NormStats {
            mean: [0.0; CHANNELS],
            std: [1.0; CHANNELS],
        }
    }
}

impl NormStats {
    /// Text form: `mean0 mean1 std0 std1`.
    pub fn to_text(&self) -> String {
        format!(
            "{:e} {:e} {:e} {:e}\n",
            self.mean[0], self.mean[1], self.std[0], self.std[1]
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let vals: Vec<f64> = text
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                row: 1,
                msg: format!("norm stats: {e}"),
            })?;
        if vals.len() != 4 {
            return Err(Error::Parse {
                row: 1,
                msg: format!("norm stats need 4 values, got {}", vals.len()),
            });
        }
        if !(vals[2] > 0.0 && vals[3] > 0.0) {
            return Err(Error::Parse {
                row: 1,
                msg: "norm stats std must be positive".into(),
            });
        }
        Ok(NormStats {
            mean: [vals[0], vals[1]],
            std: [vals[2], vals[3]],
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

pub fn fit_norm<'a, I>(segments: I) -> Result<NormStats>
where
    I: IntoIterator<Item = &'a LogGtSegment>,
{
    let mut sum = [0.0f64; CHANNELS];
    let mut sum_sq = [0.0f64; CHANNELS];
    let mut count = 0usize;
    let segs: Vec<&LogGtSegment> = segments.into_iter().collect();
    if segs.is_empty() {
        return Err(arg_err!("cannot fit normalization on zero segments"));
    }
    for s in &segs {
        for px in s.data.chunks_exact(CHANNELS) {
            for c in 0..CHANNELS {
                sum[c] += px[c] as f64;
            }
        }
        count += s.data.len() / CHANNELS;
    }
    let mean = [sum[0] / count as f64, sum[1] / count as f64];
    for s in &segs {
        for px in s.data.chunks_exact(CHANNELS) {
            for c in 0..CHANNELS {
                let d = px[c] as f64 - mean[c];
                sum_sq[c] += d * d;
            }
        }
    }
    let std = [
        (sum_sq[0] / count as f64).sqrt().max(STD_FLOOR),
        (sum_sq[1] / count as f64).sqrt().max(STD_FLOOR),
    ];
    Ok(NormStats { mean, std })
}

pub fn apply_norm(segment: &LogGtSegment, stats: &NormStats) -> LogGtSegment {
    let mut out = segment.clone();
    for px in out.data.chunks_exact_mut(CHANNELS) {
        for c in 0..CHANNELS {
            px[c] = ((px[c] as f64 - stats.mean[c]) / stats.std[c]) as f32;
        }
    }
    out
}

/// Full feature pipeline for one clip.
pub fn extract_features(clip: &AudioClip, bank: &GammatoneBank, cfg: &StftConfig) -> Result<Vec<LogGtSegment>> {
    if bank.sample_rate_hz != clip.sample_rate_hz {
        return Err(arg_err!(
            "bank built for {} Hz, clip is {} Hz",
            bank.sample_rate_hz,
            clip.sample_rate_hz
        ));
    }
    let power = stft_power(clip, cfg)?;
    let frame_rate = clip.sample_rate_hz as f64 / cfg.hop as f64;
    let energy = apply_bank(&power, bank, frame_rate)?;
    let log = log_compress(&energy, LOG_EPS)?;
    let delta = compute_delta(&log, DELTA_HALF_WINDOW)?;
    segment(&log, &delta, SEGMENT_FRAMES, SEGMENT_OVERLAP)
}

/// Bank matching the default STFT at the canonical rate.
pub fn default_bank(sample_rate_hz: u32) -> Result<GammatoneBank> {
    make_gammatone_bank(
        DEFAULT_BANDS,
        StftConfig::default().num_bins(),
        sample_rate_hz,
        DEFAULT_F_MIN_HZ,
    )
}
