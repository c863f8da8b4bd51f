//! Analytic parameter and FLOP counts.
//!
//! A multiply-accumulate counts as two FLOPs. Convolutions count only taps
//! that land inside the input (zero padding is free), plus one add per
//! output for the bias. Batch norm counts two per element, ReLU one,
//! pooling zero.

use super::{AcrnnConfig, AttentionSite, RnnScore};
use crate::tensor::same_padding;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerFlops {
    pub name: String,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopReport {
    /// Every layer except attention.
    pub layers: Vec<LayerFlops>,
    /// Attention overhead, zero without attention.
    pub attention: u64,
    pub total: u64,
}

pub fn count_params(cfg: &AcrnnConfig) -> usize {
    let conv: usize = cfg
        .conv_specs()
        .iter()
        .map(|s| s.kernel.0 * s.kernel.1 * s.cin * s.cout + 3 * s.cout)
        .sum();
    let h = cfg.gru_hidden;
    let gru = |d: usize| 2 * (3 * (d + h) * h + 3 * h);
    let att = match cfg.attention_site {
        AttentionSite::None => 0,
        AttentionSite::L10 => match cfg.rnn_score {
            RnnScore::Mlp => 2 * h * cfg.attention_hidden + 2 * cfg.attention_hidden,
            RnnScore::Linear => 2 * h,
        },
        _ => 9 * cfg.attention_channels().unwrap() + 1,
    };
    let head = cfg.head_input() * cfg.num_classes + cfg.num_classes;
    conv + gru(cfg.gru_input()) + gru(2 * h) + att + head
}

/// Sum over outputs of the in-bounds taps along one 'same'-padded axis.
fn valid_taps(n: usize, k: usize) -> u64 {
    let (out, pad) = same_padding(n, k, 1);
    (0..out)
        .map(|o| {
            (0..k)
                .filter(|&j| {
                    let i = (o + j) as isize - pad as isize;
                    i >= 0 && (i as usize) < n
                })
                .count() as u64
        })
        .sum()
}

/// FLOPs of a stride-1 'same' convolution with bias.
pub fn conv_flops(h: usize, w: usize, kernel: (usize, usize), cin: usize, cout: usize) -> u64 {
    2 * valid_taps(h, kernel.0) * valid_taps(w, kernel.1) * (cin * cout) as u64 + (h * w * cout) as u64
}

fn gru_flops(steps: usize, d: usize, h: usize) -> u64 {
    let per_step = 6 * (d + h) * h + 7 * h;
    (2 * steps * per_step) as u64
}

pub fn count_flops(cfg: &AcrnnConfig) -> FlopReport {
    let mut layers = Vec::new();
    let mut attention = 0u64;
    for (i, s) in cfg.conv_specs().iter().enumerate() {
        let (f, t) = s.input;
        let elems = (f * t * s.cout) as u64;
        layers.push(LayerFlops {
            name: format!("l{}", i + 1),
            flops: conv_flops(f, t, s.kernel, s.cin, s.cout) + 2 * elems + elems,
        });
        if cfg.attention_site.conv_layer() == Some(i + 1) {
            let (ft, tt) = ((f * t) as u64, t as u64);
            attention = conv_flops(f, t, (3, 3), s.cout, 1) + ft + 3 * tt + elems;
        }
    }
    let (_, steps) = cfg.final_grid();
    let h = cfg.gru_hidden;
    layers.push(LayerFlops {
        name: "l9".into(),
        flops: gru_flops(steps, cfg.gru_input(), h),
    });
    layers.push(LayerFlops {
        name: "l10".into(),
        flops: gru_flops(steps, 2 * h, h),
    });
    if cfg.attention_site == AttentionSite::L10 {
        let (t, d, ha) = (steps as u64, (2 * h) as u64, cfg.attention_hidden as u64);
        let score = match cfg.rnn_score {
            RnnScore::Mlp => t * (2 * d * ha + ha + 2 * ha),
            RnnScore::Linear => t * 2 * d,
        };
        attention = score + 3 * t + 2 * t * d;
    }
    let (d, c) = (cfg.head_input() as u64, cfg.num_classes as u64);
    layers.push(LayerFlops {
        name: "head".into(),
        flops: 2 * d * c + c,
    });
    let total = layers.iter().map(|l| l.flops).sum::<u64>() + attention;
    FlopReport {
        layers,
        attention,
        total,
    }
}
