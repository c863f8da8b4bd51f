//! Training-set augmentation: phase-vocoder time stretch and pitch shift on
//! raw audio, and mixup on feature segments.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::{resample, AudioClip};
use crate::dsp::LogGtSegment;
use crate::error::{arg_err, shape_err, Result};
use crate::tensor::Real;

pub const VOCODER_FFT: usize = 2048;
pub const VOCODER_HOP: usize = 512;
pub const MIN_RATE: f64 = 0.5;
pub const MAX_RATE: f64 = 2.0;
pub const MAX_SEMITONES: f64 = 12.0;

fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

fn wrap_phase(x: f64) -> f64 {
    x - 2.0 * PI * ((x + PI) / (2.0 * PI)).floor()
}

/// Centered STFT (zero padding of half a window on both sides), one row of
/// `n/2 + 1` bins per frame.
fn vocoder_stft(x: &[f64], window: &[f64], planner: &mut FftPlanner<f64>) -> Vec<Vec<Complex<f64>>> {
    let n = window.len();
    let half = n / 2;
    let mut padded = vec![0.0; x.len() + n];
    padded[half..half + x.len()].copy_from_slice(x);
    let frames = 1 + (padded.len() - n) / VOCODER_HOP;
    let fft = planner.plan_fft_forward(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    (0..frames)
        .map(|t| {
            let seg = &padded[t * VOCODER_HOP..t * VOCODER_HOP + n];
            for ((b, &s), &w) in buf.iter_mut().zip(seg).zip(window) {
                *b = Complex::new(s * w, 0.0);
            }
            fft.process(&mut buf);
            buf[..=half].to_vec()
        })
        .collect()
}

/// Inverse of [`vocoder_stft`]: overlap-add with window-sum-square
/// normalization, trimmed to `out_len`.
fn vocoder_istft(
    frames: &[Vec<Complex<f64>>],
    window: &[f64],
    out_len: usize,
    planner: &mut FftPlanner<f64>,
) -> Vec<f64> {
    let n = window.len();
    let half = n / 2;
    let total = n + VOCODER_HOP * frames.len().saturating_sub(1);
    let mut out = vec![0.0; total];
    let mut wss = vec![0.0; total];
    let ifft = planner.plan_fft_inverse(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for (t, spec) in frames.iter().enumerate() {
        buf[..=half].copy_from_slice(spec);
        for k in 1..half {
            buf[n - k] = spec[k].conj();
        }
        ifft.process(&mut buf);
        let o = t * VOCODER_HOP;
        for i in 0..n {
            out[o + i] += buf[i].re / n as f64 * window[i];
            wss[o + i] += window[i] * window[i];
        }
    }
    for (v, &w) in out.iter_mut().zip(&wss) {
        if w > 1e-8 {
            *v /= w;
        }
    }
    let mut y: Vec<f64> = out.into_iter().skip(half).take(out_len).collect();
    y.resize(out_len, 0.0);
    y
}

fn stretch_samples(x: &[f64], rate: f64) -> Vec<f64> {
    let out_len = (x.len() as f64 / rate).round() as usize;
    let window = hann_periodic(VOCODER_FFT);
    let mut planner = FftPlanner::new();
    let spec = vocoder_stft(x, &window, &mut planner);
    let bins = VOCODER_FFT / 2 + 1;
    let advance: Vec<f64> = (0..bins)
        .map(|k| 2.0 * PI * k as f64 * VOCODER_HOP as f64 / VOCODER_FFT as f64)
        .collect();
    let zero = vec![Complex::new(0.0, 0.0); bins];
    let frame = |i: usize| spec.get(i).unwrap_or(&zero);
    let mut phase: Vec<f64> = spec[0].iter().map(|c| c.arg()).collect();
    let mut out = Vec::new();
    let mut step = 0.0f64;
    while step < spec.len() as f64 {
        let i = step.floor() as usize;
        let alpha = step - i as f64;
        let (a, b) = (frame(i), frame(i + 1));
        out.push(
            (0..bins)
                .map(|k| {
                    let mag = (1.0 - alpha) * a[k].norm() + alpha * b[k].norm();
                    Complex::from_polar(mag, phase[k])
                })
                .collect::<Vec<_>>(),
        );
        for k in 0..bins {
            let dphi = wrap_phase(b[k].arg() - a[k].arg() - advance[k]);
            phase[k] += advance[k] + dphi;
        }
        step += rate;
    }
    vocoder_istft(&out, &window, out_len, &mut planner)
}

/// Phase-vocoder time stretch; the output has `round(len / rate)` samples
/// and the same pitch.
pub fn time_stretch(clip: &AudioClip, rate: f64) -> Result<AudioClip> {
    if !(MIN_RATE..=MAX_RATE).contains(&rate) {
        return Err(arg_err!("stretch rate {rate} outside [{MIN_RATE}, {MAX_RATE}]"));
    }
    let x: Vec<f64> = clip.samples.iter().map(|&v| v as f64).collect();
    let y = stretch_samples(&x, rate);
    AudioClip::new(y.into_iter().map(|v| v as f32).collect(), clip.sample_rate_hz)
}

/// Shifts pitch by `semitones` while keeping the sample count: resample to
/// `len / p` samples (`p = 2^(s/12)`), then stretch back at rate `1/p`.
pub fn pitch_shift(clip: &AudioClip, semitones: f64) -> Result<AudioClip> {
    if !(semitones.abs() <= MAX_SEMITONES) {
        return Err(arg_err!(
            "pitch shift of {semitones} semitones exceeds ±{MAX_SEMITONES}"
        ));
    }
    let p = 2f64.powf(semitones / 12.0);
    let x: Vec<f64> = clip.samples.iter().map(|&v| v as f64).collect();
    let squeezed = resample(&x, p, 1.0);
    let mut y = stretch_samples(&squeezed, 1.0 / p);
    y.resize(x.len(), 0.0);
    AudioClip::new(y.into_iter().map(|v| v as f32).collect(), clip.sample_rate_hz)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixupConfig {
    pub enabled: bool,
    pub alpha: f64,
}

impl Default for MixupConfig {
    fn default() -> Self {
        MixupConfig {
            enabled: true,
            alpha: 0.2,
        }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(arg_err!("mixup alpha must be positive, got {}", self.alpha));
        }
        Ok(())
    }
}

/// `λ ~ Beta(α, α)` as `g1 / (g1 + g2)` with `g1, g2 ~ Gamma(α, 1)`.
pub fn sample_lambda<R: Rng + ?Sized>(cfg: &MixupConfig, rng: &mut R) -> Result<f64> {
    cfg.validate()?;
    let gamma = Gamma::new(cfg.alpha, 1.0).map_err(|e| arg_err!("mixup alpha: {e}"))?;
    loop {
        let (a, b) = (gamma.sample(rng), gamma.sample(rng));
        // both draws can underflow for tiny alpha
        if a + b > 0.0 {
            return Ok(a / (a + b));
        }
    }
}

/// `(λ·x_i + (1−λ)·x_j, λ·y_i + (1−λ)·y_j)`.
pub fn mixup(
    x_i: &LogGtSegment,
    y_i: &[f64],
    x_j: &LogGtSegment,
    y_j: &[f64],
    lambda: f64,
) -> Result<(LogGtSegment, Vec<f64>)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(arg_err!("mixup lambda {lambda} outside [0, 1]"));
    }
    if (x_i.frames, x_i.bands) != (x_j.frames, x_j.bands) || y_i.len() != y_j.len() {
        return Err(shape_err!("mixup operands differ in shape"));
    }
    let (a, b) = (lambda as f32, (1.0 - lambda) as f32);
    let data = x_i.data.iter().zip(&x_j.data).map(|(&p, &q)| a * p + b * q).collect();
    let y = y_i
        .iter()
        .zip(y_j)
        .map(|(&p, &q)| lambda * p + (1.0 - lambda) * q)
        .collect();
    Ok((LogGtSegment { data, ..x_i.clone() }, y))
}

/// Partner permutation and per-pair mixing weights for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MixupDraw {
    pub partner: Vec<usize>,
    pub lambda: Vec<f64>,
}

/// Draws partners and weights, or `None` when mixup is off or the batch has
/// a single element.
pub fn draw_mixup<R: Rng + ?Sized>(n: usize, cfg: &MixupConfig, rng: &mut R) -> Result<Option<MixupDraw>> {
    if !cfg.enabled || n < 2 {
        return Ok(None);
    }
    let mut partner: Vec<usize> = (0..n).collect();
    partner.shuffle(rng);
    let lambda = (0..n).map(|_| sample_lambda(cfg, rng)).collect::<Result<_>>()?;
    Ok(Some(MixupDraw { partner, lambda }))
}

/// Applies a draw to flat row-major inputs `[B, row_x]` and targets
/// `[B, row_y]`.
pub fn mix_rows<T: Real>(x: &[T], row_x: usize, y: &[T], row_y: usize, draw: &MixupDraw) -> (Vec<T>, Vec<T>) {
    let mut mx = Vec::with_capacity(x.len());
    let mut my = Vec::with_capacity(y.len());
    for (i, (&j, &lam)) in draw.partner.iter().zip(&draw.lambda).enumerate() {
        let (a, b) = (T::of(lam), T::of(1.0 - lam));
        mx.extend(
            x[i * row_x..][..row_x]
                .iter()
                .zip(&x[j * row_x..][..row_x])
                .map(|(&p, &q)| a * p + b * q),
        );
        my.extend(
            y[i * row_y..][..row_y]
                .iter()
                .zip(&y[j * row_y..][..row_y])
                .map(|(&p, &q)| a * p + b * q),
        );
    }
    (mx, my)
}

pub fn apply_mixup_draw(batch: &[(LogGtSegment, Vec<f64>)], draw: &MixupDraw) -> Result<Vec<(LogGtSegment, Vec<f64>)>> {
    if draw.partner.len() != batch.len() {
        return Err(shape_err!(
            "mixup draw for {} items, batch has {}",
            draw.partner.len(),
            batch.len()
        ));
    }
    batch
        .iter()
        .zip(draw.partner.iter().zip(&draw.lambda))
        .map(|((x, y), (&j, &lam))| mixup(x, y, &batch[j].0, &batch[j].1, lam))
        .collect()
}

pub fn build_mixup_batch<R: Rng + ?Sized>(
    batch: &[(LogGtSegment, Vec<f64>)],
    cfg: &MixupConfig,
    rng: &mut R,
) -> Result<Vec<(LogGtSegment, Vec<f64>)>> {
    match draw_mixup(batch.len(), cfg, rng)? {
        Some(draw) => apply_mixup_draw(batch, &draw),
        None => Ok(batch.to_vec()),
    }
}

/// One raw-audio transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Transform {
    Stretch(f64),
    Pitch(f64),
}

impl Transform {
    pub fn apply(&self, clip: &AudioClip) -> Result<AudioClip> {
        match *self {
            Transform::Stretch(r) => time_stretch(clip, r),
            Transform::Pitch(s) => pitch_shift(clip, s),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            Transform::Stretch(r) => format!("stretch {r:.4}"),
            Transform::Pitch(s) => format!("pitch {s:+.4}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPlan {
    pub stretch_range: [f64; 2],
    pub pitch_range_semitones: [f64; 2],
    pub copies_per_clip: usize,
    pub seed: u64,
}

impl Default for AugmentPlan {
    fn default() -> Self {
        AugmentPlan {
            stretch_range: [0.8, 1.3],
            pitch_range_semitones: [-3.5, 3.5],
            copies_per_clip: 2,
            seed: 0,
        }
    }
}

impl AugmentPlan {
    pub fn validate(&self) -> Result<()> {
        let [s0, s1] = self.stretch_range;
        let [p0, p1] = self.pitch_range_semitones;
        if !(MIN_RATE <= s0 && s0 <= s1 && s1 <= MAX_RATE) {
            return Err(arg_err!("stretch range [{s0}, {s1}] outside [{MIN_RATE}, {MAX_RATE}]"));
        }
        if !(-MAX_SEMITONES <= p0 && p0 <= p1 && p1 <= MAX_SEMITONES) {
            return Err(arg_err!("pitch range [{p0}, {p1}] outside ±{MAX_SEMITONES}"));
        }
        Ok(())
    }

    /// Transforms for one clip. Even copies stretch, odd copies shift pitch.
    /// Depends only on the plan seed and `clip_id`, never on call order.
    pub fn transforms_for(&self, clip_id: u32) -> Vec<Transform> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(clip_id as u64 + 1);
        let uniform = |rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]| {
            if lo == hi {
                lo
            } else {
                rng.gen_range(lo..=hi)
            }
        };
        (0..self.copies_per_clip)
            .map(|k| {
                if k % 2 == 0 {
                    Transform::Stretch(uniform(&mut rng, self.stretch_range))
                } else {
                    Transform::Pitch(uniform(&mut rng, self.pitch_range_semitones))
                }
            })
            .collect()
    }
}
