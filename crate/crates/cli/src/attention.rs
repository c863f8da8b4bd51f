//! `attn-viz`: per-step attention weights of one clip as CSV and a PGM
//! heatmap (Log-GT spectrogram above a strip of attention weights).

use std::fmt::Write as _;

use acrnn_core::audio::{load_clip, AudioClip};
use acrnn_core::checkpoint::Checkpoint;
use acrnn_core::dsp::{default_bank, extract_features, LogGtSegment, StftConfig};
use acrnn_core::model::{segments_to_input, AttentionSite};
use acrnn_core::tensor::Tensor;
use anyhow::{Context, Result};

use crate::error::{path_error, usage};
use crate::{create_dir, AttnArgs, Common};

const INFER_CHUNK: usize = 32;
const GAP_ROWS: usize = 2;
const WEIGHT_ROWS: usize = 16;

/// Attention of every segment of a clip.
#[derive(Clone, Debug)]
pub struct ClipAttention {
    /// Input frames covered by one attention step.
    pub frames_per_step: usize,
    /// `weights[segment][step]`.
    pub weights: Vec<Vec<f64>>,
    /// Unnormalized segments, for display.
    pub segments: Vec<LogGtSegment>,
}

impl ClipAttention {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("segment_id,t,weight\n");
        for (s, row) in self.weights.iter().enumerate() {
            for (t, w) in row.iter().enumerate() {
                writeln!(out, "{s},{t},{w:.8}").unwrap();
            }
        }
        out
    }
}

pub fn clip_attention(ckpt: &Checkpoint, clip: &AudioClip) -> Result<ClipAttention> {
    let cfg = ckpt.config();
    if cfg.attention_site == AttentionSite::None {
        return Err(usage(
            "checkpoint was trained without attention (attention_site = \"none\"); there is nothing to visualize",
        ));
    }
    let frames_per_step = cfg.frames_per_attention_step().expect("attention site is set");
    let bank = default_bank(clip.sample_rate_hz)?;
    let segments = extract_features(clip, &bank, &StftConfig::default())?;
    let mut weights = Vec::with_capacity(segments.len());
    for chunk in segments.chunks(INFER_CHUNK) {
        let refs: Vec<&LogGtSegment> = chunk.iter().collect();
        let x: Tensor<f32> = segments_to_input(&refs, Some(&ckpt.norm))?;
        let inf = ckpt.model.infer(&x)?;
        weights.extend(inf.attention.expect("attention model reports weights"));
    }
    Ok(ClipAttention {
        frames_per_step,
        weights,
        segments,
    })
}

fn to_byte(v: f64, lo: f64, hi: f64) -> u8 {
    if hi > lo {
        (255.0 * ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).round() as u8
    } else {
        0
    }
}

/// Binary PGM: segments side by side, lowest band at the bottom of the
/// spectrogram, then a white gap, then the weight strip (white = largest
/// weight in the clip).
pub fn render_heatmap(att: &ClipAttention) -> Vec<u8> {
    let Some(first) = att.segments.first() else {
        return b"P5\n0 0\n255\n".to_vec();
    };
    let (frames, bands) = (first.frames, first.bands);
    let width = frames * att.segments.len();
    let height = bands + GAP_ROWS + WEIGHT_ROWS;
    let statics = att
        .segments
        .iter()
        .flat_map(|s| s.data.iter().step_by(2).map(|&v| v as f64));
    let (lo, hi) = statics.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let wmax = att.weights.iter().flatten().cloned().fold(0.0, f64::max);

    let mut pixels = vec![255u8; width * height];
    for (s, seg) in att.segments.iter().enumerate() {
        for t in 0..frames {
            let x = s * frames + t;
            for b in 0..bands {
                pixels[(bands - 1 - b) * width + x] = to_byte(seg.at(t, b, 0) as f64, lo, hi);
            }
            let w = att.weights[s].get(t / att.frames_per_step).copied().unwrap_or(0.0);
            let level = to_byte(w, 0.0, wmax);
            for r in 0..WEIGHT_ROWS {
                pixels[(bands + GAP_ROWS + r) * width + x] = level;
            }
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    out
}

pub fn run(common: &Common, args: &AttnArgs) -> Result<()> {
    let ckpt_path = common.checkpoint(&args.checkpoint)?;
    if !args.clip.is_file() {
        return Err(path_error(&args.clip, "audio file not found"));
    }
    let out = common.out_dir()?;
    let stem = args
        .clip
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "clip".into());
    let csv_path = out.join(format!("{stem}_attention.csv"));
    let pgm_path = out.join(format!("{stem}_attention.pgm"));
    common.check_clobber(&[csv_path.clone(), pgm_path.clone()])?;

    let ckpt = Checkpoint::load(&ckpt_path)?;
    let clip = load_clip(&args.clip, common.cfg.prepare.sample_rate_hz)
        .with_context(|| format!("loading {}", args.clip.display()))?;
    let att = clip_attention(&ckpt, &clip)?;
    create_dir(&out)?;
    std::fs::write(&csv_path, att.to_csv()).with_context(|| format!("writing {}", csv_path.display()))?;
    std::fs::write(&pgm_path, render_heatmap(&att)).with_context(|| format!("writing {}", pgm_path.display()))?;
    for (s, row) in att.weights.iter().enumerate() {
        let (peak, w) = row.iter().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |best, (t, &w)| if w > best.1 { (t, w) } else { best },
        );
        println!(
            "segment {s}: peak step {peak} (frames {}..{}), weight {w:.3}",
            peak * att.frames_per_step,
            (peak + 1) * att.frames_per_step
        );
    }
    println!("wrote {} and {}", csv_path.display(), pgm_path.display());
    Ok(())
}
