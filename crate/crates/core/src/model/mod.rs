//! Attention convolutional recurrent network.
//!
//! Eight conv → batchnorm → ReLU layers (pooling after every second one),
//! two bidirectional GRU layers, optional frame-level attention either on a
//! CNN feature map or on the recurrent output sequence, and a dense head.
//!
//! Inputs are NHWC `[B, F, T, C]`: frequency bands, time frames, channels
//! (static, delta). [`segments_to_input`] transposes stored segments into
//! this layout.

mod complexity;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{apply_norm, LogGtSegment, NormStats, CHANNELS};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{BiGruVars, Graph, GruVars, Mode, ParamStore, Real, Tensor, Var};

pub use complexity::{conv_flops, count_flops, count_params, FlopReport, LayerFlops};

pub const BN_EPS: f64 = 1e-5;
pub const NUM_CONV: usize = 8;
pub const PUBLISHED_PARAMS_M: f64 = 3.81;
pub const PUBLISHED_FLOPS_M: f64 = 9.18;

/// Where frame-level attention is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum AttentionSite {
    None,
    L2,
    L4,
    L6,
    L8,
    L10,
}

impl AttentionSite {
    /// Conv layer index (1-based) for CNN sites.
    pub fn conv_layer(self) -> Option<usize> {
        match self {
            AttentionSite::L2 => Some(2),
            AttentionSite::L4 => Some(4),
            AttentionSite::L6 => Some(6),
            AttentionSite::L8 => Some(8),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AttentionSite::None => "none",
            AttentionSite::L2 => "l2",
            AttentionSite::L4 => "l4",
            AttentionSite::L6 => "l6",
            AttentionSite::L8 => "l8",
            AttentionSite::L10 => "l10",
        }
    }
}

/// Normalization of CNN attention scores over time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Scaling {
    Softmax,
    Sigmoid,
}

/// Score function of the recurrent attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum RnnScore {
    /// `w·tanh(U·h + b)`.
    Mlp,
    /// `w·h`.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcrnnConfig {
    pub num_classes: usize,
    pub attention_site: AttentionSite,
    pub cnn_attention_scaling: Scaling,
    pub rnn_score: RnnScore,
    pub attention_hidden: usize,
    pub dropout_p: f64,
    pub gru_hidden: usize,
    /// Filters of l1–l2, l3–l4, l5–l6, l7–l8.
    pub conv_widths: [usize; 4],
    pub bn_momentum: f64,
    pub input_bands: usize,
    pub input_frames: usize,
}

impl Default for AcrnnConfig {
    fn default() -> Self {
        AcrnnConfig {
            num_classes: 50,
            attention_site: AttentionSite::L10,
            cnn_attention_scaling: Scaling::Softmax,
            rnn_score: RnnScore::Mlp,
            attention_hidden: 128,
            dropout_p: 0.5,
            gru_hidden: 256,
            conv_widths: [32, 64, 128, 256],
            bn_momentum: 0.99,
            input_bands: 128,
            input_frames: 128,
        }
    }
}

/// Static description of one conv layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub cin: usize,
    pub cout: usize,
    /// Pool applied after this layer (size = stride), over (F, T).
    pub pool: Option<(usize, usize)>,
    /// Input (F, T) of this layer.
    pub input: (usize, usize),
}

const KERNELS: [(usize, usize); 4] = [(3, 5), (3, 1), (1, 5), (3, 3)];
const POOLS: [(usize, usize); 4] = [(4, 3), (4, 1), (1, 3), (2, 2)];

impl AcrnnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p must be in [0, 1), got {}", self.dropout_p));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return bad(format!("bn_momentum must be in [0, 1), got {}", self.bn_momentum));
        }
        if self.gru_hidden == 0 || self.attention_hidden == 0 || self.conv_widths.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        let (f, t) = self.final_grid();
        if f == 0 || t == 0 {
            return bad(format!(
                "input {}x{} is too small for the pooling stack",
                self.input_bands, self.input_frames
            ));
        }
        Ok(())
    }

    pub fn conv_specs(&self) -> [ConvSpec; NUM_CONV] {
        let mut specs = [ConvSpec {
            kernel: (0, 0),
            cin: 0,
            cout: 0,
            pool: None,
            input: (0, 0),
        }; NUM_CONV];
        let (mut f, mut t, mut cin) = (self.input_bands, self.input_frames, CHANNELS);
        for (i, spec) in specs.iter_mut().enumerate() {
            let block = i / 2;
            let pool = (i % 2 == 1).then_some(POOLS[block]);
            *spec = ConvSpec {
                kernel: KERNELS[block],
                cin,
                cout: self.conv_widths[block],
                pool,
                input: (f, t),
            };
            cin = self.conv_widths[block];
            if let Some((pf, pt)) = pool {
                f /= pf;
                t /= pt;
            }
        }
        specs
    }

    /// (F, T) after the last pool.
    pub fn final_grid(&self) -> (usize, usize) {
        POOLS
            .iter()
            .fold((self.input_bands, self.input_frames), |(f, t), &(pf, pt)| {
                (f / pf, t / pt)
            })
    }

    /// Feature width of each recurrent input step.
    pub fn gru_input(&self) -> usize {
        self.final_grid().0 * self.conv_widths[3]
    }

    /// Input width of the dense head.
    pub fn head_input(&self) -> usize {
        2 * self.gru_hidden
    }

    /// Channels seen by CNN attention at `site`.
    pub fn attention_channels(&self) -> Option<usize> {
        self.attention_site.conv_layer().map(|l| self.conv_widths[(l - 1) / 2])
    }

    /// Input frames covered by one step of the attention axis, for
    /// mapping weights back onto the spectrogram.
    pub fn frames_per_attention_step(&self) -> Option<usize> {
        let specs = self.conv_specs();
        match self.attention_site {
            AttentionSite::None => None,
            AttentionSite::L10 => Some(self.input_frames / self.final_grid().1),
            site => {
                let l = site.conv_layer().unwrap();
                Some(self.input_frames / specs[l - 1].input.1)
            }
        }
    }
}

/// The 11 configurations of the attention ablation: no attention, each CNN
/// site with both scalings, and l10 with both score functions.
pub fn ablation_grid(base: &AcrnnConfig) -> Vec<(String, AcrnnConfig)> {
    let mut out = vec![(
        "none".to_string(),
        AcrnnConfig {
            attention_site: AttentionSite::None,
            ..base.clone()
        },
    )];
    for site in [
        AttentionSite::L2,
        AttentionSite::L4,
        AttentionSite::L6,
        AttentionSite::L8,
    ] {
        for scaling in [Scaling::Softmax, Scaling::Sigmoid] {
            let name = format!(
                "{}-{}",
                site.label(),
                if scaling == Scaling::Softmax {
                    "softmax"
                } else {
                    "sigmoid"
                }
            );
            out.push((
                name,
                AcrnnConfig {
                    attention_site: site,
                    cnn_attention_scaling: scaling,
                    ..base.clone()
                },
            ));
        }
    }
    for (name, score) in [("l10-softmax", RnnScore::Mlp), ("l10-linear", RnnScore::Linear)] {
        out.push((
            name.to_string(),
            AcrnnConfig {
                attention_site: AttentionSite::L10,
                rnn_score: score,
                ..base.clone()
            },
        ));
    }
    out
}

/// Running batch-norm statistics of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Model parameters plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Acrnn<T> {
    pub config: AcrnnConfig,
    pub params: ParamStore<T>,
    pub bn: Vec<BnStats<T>>,
}

/// One recorded stage of the forward pass (batch dimension omitted).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub stage: String,
    pub shape: Vec<usize>,
}

/// Result of [`Acrnn::forward`].
pub struct Forward<T> {
    pub logits: Var,
    /// `[B, T_site]` attention weights when attention is enabled.
    pub attention: Option<Var>,
    /// Per conv layer batch (mean, var); empty in eval mode.
    pub batch_stats: Vec<(Vec<T>, Vec<T>)>,
    pub trace: Vec<TraceEntry>,
}

/// Eval-mode inference output.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference<T> {
    pub logits: Tensor<T>,
    /// Per batch element, one weight per attention step.
    pub attention: Option<Vec<Vec<f64>>>,
}

struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    fn get<T: Real>(&self, params: &ParamStore<T>, name: &str) -> Var {
        self.vars[params
            .position(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))]
    }
}

impl<T: Real> Acrnn<T> {
    /// Allocates all parameters: weights zero, BN gamma one, everything else
    /// zero. Running stats start at mean 0, variance 1.
    pub fn new(config: AcrnnConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut bn = Vec::new();
        for (i, s) in config.conv_specs().iter().enumerate() {
            let l = i + 1;
            params.add(
                &format!("l{l}.conv.w"),
                Tensor::zeros(&[s.kernel.0, s.kernel.1, s.cin, s.cout]),
                true,
            )?;
            params.add(&format!("l{l}.conv.b"), Tensor::zeros(&[s.cout]), false)?;
            params.add(&format!("l{l}.bn.gamma"), Tensor::full(&[s.cout], T::one()), false)?;
            params.add(&format!("l{l}.bn.beta"), Tensor::zeros(&[s.cout]), false)?;
            bn.push(BnStats {
                mean: vec![T::zero(); s.cout],
                var: vec![T::one(); s.cout],
            });
        }
        let h = config.gru_hidden;
        for (layer, d) in [(9, config.gru_input()), (10, 2 * h)] {
            for dir in ["fwd", "bwd"] {
                for gate in ["z", "r", "h"] {
                    params.add(&format!("l{layer}.{dir}.w_{gate}"), Tensor::zeros(&[d + h, h]), true)?;
                }
                for gate in ["z", "r", "h"] {
                    params.add(&format!("l{layer}.{dir}.b_{gate}"), Tensor::zeros(&[h]), false)?;
                }
            }
        }
        if let Some(c) = config.attention_channels() {
            params.add("att.conv.w", Tensor::zeros(&[3, 3, c, 1]), true)?;
            params.add("att.conv.b", Tensor::zeros(&[1]), false)?;
        } else if config.attention_site == AttentionSite::L10 {
            let (d, ha) = (2 * h, config.attention_hidden);
            match config.rnn_score {
                RnnScore::Mlp => {
                    params.add("att.u", Tensor::zeros(&[d, ha]), true)?;
                    params.add("att.b", Tensor::zeros(&[ha]), false)?;
                    params.add("att.w", Tensor::zeros(&[ha, 1]), true)?;
                }
                RnnScore::Linear => {
                    params.add("att.w", Tensor::zeros(&[d, 1]), true)?;
                }
            }
        }
        params.add(
            "head.w",
            Tensor::zeros(&[config.head_input(), config.num_classes]),
            true,
        )?;
        params.add("head.b", Tensor::zeros(&[config.num_classes]), false)?;
        Ok(Acrnn { config, params, bn })
    }

    /// Builds the forward pass on `g` over bound parameters `vars` (as
    /// returned by `self.params.bind`).
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Forward<T>> {
        let cfg = &self.config;
        let want = [cfg.input_bands, cfg.input_frames, CHANNELS];
        let sx = g.shape(x).to_vec();
        if sx.len() != 4 || sx[1..] != want {
            return Err(shape_err!("model input {sx:?}, expected [B, {want:?}]"));
        }
        if vars.len() != self.params.len() {
            return Err(shape_err!(
                "{} bound vars for {} parameters",
                vars.len(),
                self.params.len()
            ));
        }
        let p = Bound { vars: vars.to_vec() };
        let ps = &self.params;
        let mut trace = Vec::new();
        let mut batch_stats = Vec::new();
        let mut attention = None;
        let record = |trace: &mut Vec<TraceEntry>, g: &Graph<T>, stage: &str, v: Var| {
            trace.push(TraceEntry {
                stage: stage.to_string(),
                shape: g.shape(v)[1..].to_vec(),
            });
        };

        let mut h = x;
        for (i, spec) in cfg.conv_specs().iter().enumerate() {
            let l = i + 1;
            let w = p.get(ps, &format!("l{l}.conv.w"));
            let b = p.get(ps, &format!("l{l}.conv.b"));
            h = g.conv2d(h, w, b, (1, 1))?;
            let gamma = p.get(ps, &format!("l{l}.bn.gamma"));
            let beta = p.get(ps, &format!("l{l}.bn.beta"));
            h = match mode {
                Mode::Train => {
                    let (out, mean, var) = g.batchnorm_train(h, gamma, beta, BN_EPS)?;
                    batch_stats.push((mean, var));
                    out
                }
                Mode::Eval => {
                    let s = &self.bn[i];
                    g.batchnorm_eval(h, gamma, beta, &s.mean, &s.var, BN_EPS)?
                }
            };
            h = g.relu(h)?;
            record(&mut trace, g, &format!("l{l}"), h);
            if cfg.attention_site.conv_layer() == Some(l) {
                let (m, a) = cnn_attention(
                    g,
                    h,
                    p.get(ps, "att.conv.w"),
                    p.get(ps, "att.conv.b"),
                    cfg.cnn_attention_scaling,
                )?;
                h = m;
                attention = Some(a);
                record(&mut trace, g, &format!("l{l}.att"), h);
            }
            if let Some(pool) = spec.pool {
                h = g.maxpool2d(h, pool, pool)?;
                record(&mut trace, g, &format!("l{l}.pool"), h);
            }
        }

        let seq = g.freq_time_to_seq(h)?;
        record(&mut trace, g, "seq", seq);
        let mut r = seq;
        for layer in [9, 10] {
            let vars = BiGruVars {
                fwd: gru_vars(&p, ps, layer, "fwd"),
                bwd: gru_vars(&p, ps, layer, "bwd"),
            };
            r = g.bidirectional(r, &vars)?;
            r = g.dropout(r, cfg.dropout_p, mode, rng)?;
            record(&mut trace, g, &format!("l{layer}"), r);
        }

        let pooled = if cfg.attention_site == AttentionSite::L10 {
            let (v, beta) = match cfg.rnn_score {
                RnnScore::Mlp => {
                    rnn_attention(g, r, Some((p.get(ps, "att.u"), p.get(ps, "att.b"))), p.get(ps, "att.w"))?
                }
                RnnScore::Linear => rnn_attention(g, r, None, p.get(ps, "att.w"))?,
            };
            attention = Some(beta);
            v
        } else {
            head_without_attention(g, r)?
        };
        record(&mut trace, g, "pooled", pooled);
        let logits = g.matmul(pooled, p.get(ps, "head.w"))?;
        let logits = g.add_bias(logits, p.get(ps, "head.b"))?;
        record(&mut trace, g, "logits", logits);
        Ok(Forward {
            logits,
            attention,
            batch_stats,
            trace,
        })
    }

    /// Blends batch statistics from a training forward pass into the
    /// running estimates.
    pub fn update_bn(&mut self, batch_stats: &[(Vec<T>, Vec<T>)]) -> Result<()> {
        if batch_stats.len() != self.bn.len() {
            return Err(shape_err!(
                "{} batch stats for {} bn layers",
                batch_stats.len(),
                self.bn.len()
            ));
        }
        let m = T::of(self.config.bn_momentum);
        let k = T::one() - m;
        for (run, (mean, var)) in self.bn.iter_mut().zip(batch_stats) {
            for (r, &b) in run.mean.iter_mut().zip(mean) {
                *r = m * *r + k * b;
            }
            for (r, &b) in run.var.iter_mut().zip(var) {
                *r = m * *r + k * b;
            }
        }
        Ok(())
    }

    /// Eval-mode forward on a fresh graph without gradient tracking.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Inference<T>> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let out = self.forward(&mut g, &vars, xv, Mode::Eval, &mut rng)?;
        let attention = out.attention.map(|a| {
            let t = g.shape(a)[1];
            g.value(a).to_f64().chunks(t).map(|c| c.to_vec()).collect()
        });
        Ok(Inference {
            logits: g.value(out.logits).clone(),
            attention,
        })
    }
}

fn gru_vars<T: Real>(p: &Bound, ps: &ParamStore<T>, layer: usize, dir: &str) -> GruVars {
    let n = |s: &str| p.get(ps, &format!("l{layer}.{dir}.{s}"));
    GruVars {
        w_z: n("w_z"),
        w_r: n("w_r"),
        w_h: n("w_h"),
        b_z: n("b_z"),
        b_r: n("b_r"),
        b_h: n("b_h"),
    }
}

/// CNN frame attention on `m: [B,F,T,C]`: a 3×3 conv to one channel,
/// averaged over frequency, scaled over time, then broadcast back over
/// frequency and channels. Returns the weighted map and `A: [B,T]`.
pub fn cnn_attention<T: Real>(g: &mut Graph<T>, m: Var, w: Var, b: Var, scaling: Scaling) -> Result<(Var, Var)> {
    let s = g.conv2d(m, w, b, (1, 1))?;
    let s = g.avg_pool_freq(s)?;
    let a = match scaling {
        Scaling::Softmax => g.softmax_last(s)?,
        Scaling::Sigmoid => g.sigmoid(s)?,
    };
    let out = g.scale_frames(m, a)?;
    Ok((out, a))
}

/// Recurrent attention over `h: [B,T,D]`. With `hidden = Some((U, b))` the
/// score is `w·tanh(U·h_t + b)`, otherwise `w·h_t`. Returns `v: [B,D]` and
/// `β: [B,T]`.
pub fn rnn_attention<T: Real>(g: &mut Graph<T>, h: Var, hidden: Option<(Var, Var)>, w: Var) -> Result<(Var, Var)> {
    let sh = g.shape(h).to_vec();
    if sh.len() != 3 {
        return Err(shape_err!("rnn_attention expects [B,T,D], got {sh:?}"));
    }
    let (bsz, t, d) = (sh[0], sh[1], sh[2]);
    let flat = g.reshape(h, &[bsz * t, d])?;
    let u = match hidden {
        Some((u, b)) => {
            let z = g.matmul(flat, u)?;
            let z = g.add_bias(z, b)?;
            g.tanh(z)?
        }
        None => flat,
    };
    let scores = g.matmul(u, w)?;
    let scores = g.reshape(scores, &[bsz, t])?;
    let beta = g.softmax_last(scores)?;
    let v = g.weighted_sum_time(h, beta)?;
    Ok((v, beta))
}

/// `[→h_T, ←h_1]` from a bidirectional output `[B,T,2H]`.
pub fn head_without_attention<T: Real>(g: &mut Graph<T>, h: Var) -> Result<Var> {
    let sh = g.shape(h).to_vec();
    if sh.len() != 3 || sh[2] % 2 != 0 {
        return Err(shape_err!("expected [B,T,2H], got {sh:?}"));
    }
    let half = sh[2] / 2;
    let last = g.select_time(h, sh[1] - 1)?;
    let fwd = g.slice_last(last, 0, half)?;
    let first = g.select_time(h, 0)?;
    let bwd = g.slice_last(first, half, 2 * half)?;
    g.concat_last(fwd, bwd)
}

/// Stacks segments into a `[B, bands, frames, 2]` model input, optionally
/// normalizing each one first.
pub fn segments_to_input<T: Real>(segments: &[&LogGtSegment], norm: Option<&NormStats>) -> Result<Tensor<T>> {
    let Some(first) = segments.first() else {
        return Err(shape_err!("empty segment batch"));
    };
    let (frames, bands) = (first.frames, first.bands);
    let mut data = Vec::with_capacity(segments.len() * frames * bands * CHANNELS);
    for seg in segments {
        if (seg.frames, seg.bands) != (frames, bands) {
            return Err(shape_err!(
                "segment {}x{} in a batch of {frames}x{bands}",
                seg.frames,
                seg.bands
            ));
        }
        let normed;
        let s = match norm {
            Some(n) => {
                normed = apply_norm(seg, n);
                &normed
            }
            None => *seg,
        };
        for b in 0..bands {
            for t in 0..frames {
                let o = (t * bands + b) * CHANNELS;
                for c in 0..CHANNELS {
                    data.push(T::of(s.data[o + c] as f64));
                }
            }
        }
    }
    Tensor::new(vec![segments.len(), bands, frames, CHANNELS], data)
}

#[cfg(test)]
mod tests;
