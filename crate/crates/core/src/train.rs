//! Training loop, segment-vote evaluation and k-fold cross validation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::{draw_mixup, mix_rows, MixupConfig};
use crate::checkpoint::Checkpoint;
use crate::dsp::{fit_norm, LogGtSegment, NormStats};
use crate::error::{arg_err, Error, Result};
use crate::model::{segments_to_input, Acrnn, AcrnnConfig};
use crate::store::FeatureStore;
use crate::tensor::{Graph, Mode, Real, SgdNesterov, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    /// The learning rate is divided by this factor every `lr_decay_every`
    /// epochs.
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub momentum: f64,
    pub l2: f64,
    pub init_std: f64,
    pub seed: u64,
    pub mixup: MixupConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 64,
            lr_initial: 0.01,
            lr_decay_factor: 10.0,
            lr_decay_every: 100,
            momentum: 0.9,
            l2: 1e-4,
            init_std: 0.05,
            seed: 0,
            mixup: MixupConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs as f64),
            ("batch_size", self.batch_size as f64),
            ("lr_initial", self.lr_initial),
            ("lr_decay_factor", self.lr_decay_factor),
            ("lr_decay_every", self.lr_decay_every as f64),
            ("init_std", self.init_std),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.l2 >= 0.0) {
            return Err(Error::Config("momentum must be in [0, 1) and l2 >= 0".into()));
        }
        self.mixup.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// Piecewise-constant schedule: `lr_initial / factor^(epoch / every)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(arg_err!("epoch {epoch} outside 0..{}", cfg.epochs));
    }
    Ok(cfg.lr_initial / cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every) as i32))
}

/// Kernels and weight matrices ~ N(0, std²); biases and BN beta zero; BN
/// gamma one. Running statistics are reset.
pub fn init_weights<T: Real, R: Rng + ?Sized>(model: &mut Acrnn<T>, std: f64, rng: &mut R) -> Result<()> {
    let normal = Normal::new(0.0, std).map_err(|e| arg_err!("init std {std}: {e}"))?;
    for p in model.params.iter_mut() {
        let fill = |v: &mut T, rng: &mut R| {
            *v = if p.weight_decay {
                T::of(normal.sample(rng))
            } else if p.name.ends_with(".gamma") {
                T::one()
            } else {
                T::zero()
            }
        };
        for v in p.tensor.data_mut() {
            fill(v, rng);
        }
    }
    for s in &mut model.bn {
        s.mean.iter_mut().for_each(|v| *v = T::zero());
        s.var.iter_mut().for_each(|v| *v = T::one());
    }
    Ok(())
}

/// One labelled training segment.
#[derive(Clone, Copy, Debug)]
pub struct TrainItem<'a> {
    pub segment: &'a LogGtSegment,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub loss_trace: Vec<EpochStat>,
}

/// Trains a fresh model. `observer` sees each epoch as it completes.
pub fn train_fold(
    items: &[TrainItem<'_>],
    norm: &NormStats,
    train_cfg: &TrainConfig,
    model_cfg: &AcrnnConfig,
    mut observer: Option<&mut dyn FnMut(&EpochStat)>,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    if items.is_empty() {
        return Err(arg_err!("no training segments"));
    }
    let classes = model_cfg.num_classes;
    if let Some(bad) = items.iter().find(|i| i.class_id >= classes) {
        return Err(arg_err!("class id {} with {classes} classes", bad.class_id));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut model = Acrnn::<f32>::new(model_cfg.clone())?;
    init_weights(&mut model, train_cfg.init_std, &mut rng)?;
    let mut opt = SgdNesterov::new(&model.params, train_cfg.momentum);

    let segs: Vec<&LogGtSegment> = items.iter().map(|i| i.segment).collect();
    let inputs: Tensor<f32> = segments_to_input(&segs, Some(norm))?;
    let row = inputs.numel() / items.len();
    let in_shape = inputs.shape()[1..].to_vec();
    let xs = inputs.into_data();

    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut trace = Vec::with_capacity(train_cfg.epochs);
    for epoch in 0..train_cfg.epochs {
        let lr = lr_at(epoch, train_cfg)?;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (bi, batch) in order.chunks(train_cfg.batch_size).enumerate() {
            let diverged = |e: Error| match e {
                Error::Numeric(msg) => Error::Diverged { epoch, batch: bi, msg },
                other => other,
            };
            let b = batch.len();
            let mut x = Vec::with_capacity(b * row);
            let mut y = vec![0f32; b * classes];
            for (k, &i) in batch.iter().enumerate() {
                x.extend_from_slice(&xs[i * row..(i + 1) * row]);
                y[k * classes + items[i].class_id] = 1.0;
            }
            if let Some(draw) = draw_mixup(b, &train_cfg.mixup, &mut rng)? {
                (x, y) = mix_rows(&x, row, &y, classes, &draw);
            }
            let mut shape = vec![b];
            shape.extend_from_slice(&in_shape);
            let mut g = Graph::new();
            let vars = model.params.bind(&mut g, true);
            let xv = g.constant(Tensor::new(shape, x)?);
            let out = model
                .forward(&mut g, &vars, xv, Mode::Train, &mut rng)
                .map_err(diverged)?;
            let loss = g
                .cross_entropy(out.logits, &Tensor::new(vec![b, classes], y)?)
                .map_err(diverged)?;
            let lv = g.value(loss).data()[0] as f64;
            let mut grads = g.backward(loss)?;
            let grads: Vec<Vec<f32>> = vars
                .iter()
                .zip(model.params.iter())
                .map(|(&v, p)| grads.take(v).unwrap_or_else(|| vec![0.0; p.tensor.numel()]))
                .collect();
            if grads.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    batch: bi,
                    msg: "non-finite gradient".into(),
                });
            }
            opt.step(&mut model.params, &grads, lr, train_cfg.l2)?;
            model.update_bn(&out.batch_stats)?;
            loss_sum += lv * b as f64;
        }
        let stat = EpochStat {
            epoch,
            lr,
            loss: loss_sum / items.len() as f64,
        };
        if let Some(obs) = observer.as_mut() {
            obs(&stat);
        }
        trace.push(stat);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model,
            norm: *norm,
            epoch: train_cfg.epochs as u32,
        },
        loss_trace: trace,
    })
}

/// Mean of per-segment distributions and its argmax (lowest index on
/// ties).
pub fn vote(segment_probs: &[Vec<f64>]) -> Result<(Vec<f64>, usize)> {
    let Some(first) = segment_probs.first() else {
        return Err(arg_err!("cannot vote over zero segments"));
    };
    let mut mean = vec![0.0; first.len()];
    for p in segment_probs {
        for (m, &v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    let n = segment_probs.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let mut best = 0;
    for (i, &v) in mean.iter().enumerate() {
        if v > mean[best] {
            best = i;
        }
    }
    Ok((mean, best))
}

fn softmax_rows(logits: &Tensor<f32>) -> Vec<Vec<f64>> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let e: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect()
}

/// Per-segment softmax distributions, evaluated in chunks.
pub fn segment_probabilities(ckpt: &Checkpoint, segments: &[&LogGtSegment]) -> Result<Vec<Vec<f64>>> {
    const CHUNK: usize = 32;
    let mut out = Vec::with_capacity(segments.len());
    for chunk in segments.chunks(CHUNK) {
        let x: Tensor<f32> = segments_to_input(chunk, Some(&ckpt.norm))?;
        out.extend(softmax_rows(&ckpt.model.infer(&x)?.logits));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipPrediction {
    pub probs: Vec<f64>,
    pub class_id: usize,
}

pub fn predict_clip(ckpt: &Checkpoint, segments: &[&LogGtSegment]) -> Result<ClipPrediction> {
    if segments.is_empty() {
        return Err(arg_err!("clip has no segments"));
    }
    let (probs, class_id) = vote(&segment_probabilities(ckpt, segments)?)?;
    Ok(ClipPrediction { probs, class_id })
}

/// A test clip: its true class and segments.
#[derive(Clone, Debug)]
pub struct EvalClip<'a> {
    pub clip_id: u32,
    pub class_id: usize,
    pub segments: Vec<&'a LogGtSegment>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipResult {
    pub clip_id: u32,
    pub true_class: usize,
    pub predicted: usize,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_classes: usize,
    pub accuracy: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    pub predictions: Vec<ClipResult>,
    #[serde(default)]
    pub loss_trace: Vec<EpochStat>,
}

impl EvalReport {
    pub fn from_results(num_classes: usize, predictions: Vec<ClipResult>) -> Result<Self> {
        if predictions.is_empty() {
            return Err(arg_err!("empty test set"));
        }
        let mut confusion = vec![vec![0u64; num_classes]; num_classes];
        for p in &predictions {
            if p.true_class >= num_classes || p.predicted >= num_classes {
                return Err(arg_err!("class index out of range in predictions"));
            }
            confusion[p.true_class][p.predicted] += 1;
        }
        let correct: u64 = (0..num_classes).map(|c| confusion[c][c]).sum();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| row[c] as f64 / n as f64)
            })
            .collect();
        Ok(EvalReport {
            num_classes,
            accuracy: correct as f64 / predictions.len() as f64,
            per_class_accuracy,
            confusion,
            predictions,
            loss_trace: Vec::new(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(format!("report: {e}")))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// Header row of class names, then one row per true class.
    pub fn write_confusion_csv(&self, path: &Path, class_names: &[String]) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
        let names: Vec<String> = (0..self.num_classes)
            .map(|c| class_names.get(c).cloned().unwrap_or_else(|| c.to_string()))
            .collect();
        let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
        let mut header = vec!["true\\predicted".to_string()];
        header.extend(names.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for (name, row) in names.iter().zip(&self.confusion) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn evaluate(ckpt: &Checkpoint, clips: &[EvalClip<'_>]) -> Result<EvalReport> {
    if clips.is_empty() {
        return Err(arg_err!("empty test set"));
    }
    let all: Vec<&LogGtSegment> = clips.iter().flat_map(|c| c.segments.iter().copied()).collect();
    let probs = segment_probabilities(ckpt, &all)?;
    let mut offset = 0;
    let mut results = Vec::with_capacity(clips.len());
    for clip in clips {
        let n = clip.segments.len();
        let (mean, predicted) = vote(&probs[offset..offset + n])?;
        offset += n;
        results.push(ClipResult {
            clip_id: clip.clip_id,
            true_class: clip.class_id,
            predicted,
            probs: mean,
        });
    }
    EvalReport::from_results(ckpt.model.config.num_classes, results)
}

/// Training segments (originals and augmented copies) outside `fold`.
pub fn train_items(store: &FeatureStore, fold: usize) -> Vec<TrainItem<'_>> {
    store
        .records
        .iter()
        .filter(|r| r.fold as usize != fold)
        .map(|r| TrainItem {
            segment: &r.segment,
            class_id: r.class_id as usize,
        })
        .collect()
}

/// Original (non-augmented) clips of `fold`.
pub fn test_clips(store: &FeatureStore, fold: usize) -> Vec<EvalClip<'_>> {
    store
        .clip_groups()
        .into_iter()
        .filter(|g| g.fold as usize == fold && !g.augmented)
        .map(|g| EvalClip {
            clip_id: g.clip_id,
            class_id: g.class_id as usize,
            segments: g.segments,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub norm: [f64; 4],
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub mean_accuracy: f64,
}

/// Trains and evaluates one fold held out.
pub fn run_fold(
    store: &FeatureStore,
    fold: usize,
    train_cfg: &TrainConfig,
    model_cfg: &AcrnnConfig,
    observer: Option<&mut dyn FnMut(&EpochStat)>,
) -> Result<(TrainOutcome, EvalReport)> {
    if fold == 0 || fold > store.meta.num_folds {
        return Err(arg_err!("fold {fold} outside 1..={}", store.meta.num_folds));
    }
    let items = train_items(store, fold);
    let clips = test_clips(store, fold);
    if items.is_empty() || clips.is_empty() {
        return Err(arg_err!("fold {fold} leaves an empty train or test split"));
    }
    let norm = fit_norm(items.iter().map(|i| i.segment))?;
    let outcome = train_fold(&items, &norm, train_cfg, model_cfg, observer)?;
    let mut report = evaluate(&outcome.checkpoint, &clips)?;
    report.loss_trace = outcome.loss_trace.clone();
    Ok((outcome, report))
}

/// k-fold cross validation over every fold of the store.
pub fn cross_validate(
    store: &FeatureStore,
    train_cfg: &TrainConfig,
    model_cfg: &AcrnnConfig,
    mut on_fold: Option<&mut dyn FnMut(&FoldResult, &TrainOutcome)>,
) -> Result<CvReport> {
    if store.records.is_empty() {
        return Err(arg_err!("feature store is empty"));
    }
    if store.meta.num_folds < 2 {
        return Err(arg_err!("cross validation needs at least 2 folds"));
    }
    let mut folds = Vec::new();
    for fold in 1..=store.meta.num_folds {
        let (outcome, report) = run_fold(store, fold, train_cfg, model_cfg, None)?;
        let n = outcome.checkpoint.norm;
        let result = FoldResult {
            fold,
            norm: [n.mean[0], n.mean[1], n.std[0], n.std[1]],
            report,
        };
        if let Some(cb) = on_fold.as_mut() {
            cb(&result, &outcome);
        }
        folds.push(result);
    }
    let mean_accuracy = folds.iter().map(|f| f.report.accuracy).sum::<f64>() / folds.len() as f64;
    Ok(CvReport { folds, mean_accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AttentionSite;

    #[test]
    fn schedule_breakpoints() {
        let cfg = TrainConfig::default();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-15;
        assert!(close(lr_at(0, &cfg).unwrap(), 0.01));
        assert!(close(lr_at(99, &cfg).unwrap(), 0.01));
        assert!(close(lr_at(100, &cfg).unwrap(), 0.001));
        assert!(close(lr_at(199, &cfg).unwrap(), 0.001));
        assert!(close(lr_at(200, &cfg).unwrap(), 0.0001));
        assert!(close(lr_at(299, &cfg).unwrap(), 0.0001));
        assert!(matches!(lr_at(300, &cfg), Err(Error::Argument(_))));
    }

    #[test]
    fn init_statistics() {
        let cfg = AcrnnConfig {
            num_classes: 10,
            ..AcrnnConfig::default()
        };
        let mut model = Acrnn::<f64>::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        init_weights(&mut model, 0.05, &mut rng).unwrap();
        // l8 kernel: 3·3·256·256 = 589824 values
        let w = model.params.get("l8.conv.w").unwrap().tensor.data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 0.05).abs() < 0.001, "{std}");
        for p in model.params.iter() {
            if p.name.ends_with(".gamma") {
                assert!(p.tensor.data().iter().all(|&v| v == 1.0));
            } else if !p.weight_decay {
                assert!(p.tensor.data().iter().all(|&v| v == 0.0), "{}", p.name);
            }
        }
        let mut again = Acrnn::<f64>::new(cfg).unwrap();
        init_weights(&mut again, 0.05, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(again, model);
    }

    #[test]
    fn voting_examples() {
        let (mean, c) = vote(&[vec![0.6, 0.4], vec![0.2, 0.8]]).unwrap();
        assert!((mean[0] - 0.4).abs() < 1e-15 && (mean[1] - 0.6).abs() < 1e-15);
        assert_eq!(c, 1);
        assert_eq!(vote(&[vec![0.5, 0.5]]).unwrap().1, 0);
        assert_eq!(vote(&[vec![0.2, 0.7, 0.1]]).unwrap().1, 1);
        let (m1, c1) = vote(&[vec![0.1, 0.9], vec![0.7, 0.3], vec![0.5, 0.5]]).unwrap();
        let (m2, c2) = vote(&[vec![0.5, 0.5], vec![0.1, 0.9], vec![0.7, 0.3]]).unwrap();
        assert_eq!(c1, c2);
        assert!(m1.iter().zip(&m2).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(vote(&[]).is_err());
    }

    #[test]
    fn report_invariants() {
        let preds = vec![
            ClipResult {
                clip_id: 0,
                true_class: 0,
                predicted: 0,
                probs: vec![],
            },
            ClipResult {
                clip_id: 1,
                true_class: 0,
                predicted: 1,
                probs: vec![],
            },
            ClipResult {
                clip_id: 2,
                true_class: 1,
                predicted: 1,
                probs: vec![],
            },
            ClipResult {
                clip_id: 3,
                true_class: 2,
                predicted: 2,
                probs: vec![],
            },
        ];
        let r = EvalReport::from_results(3, preds).unwrap();
        assert_eq!(r.confusion, vec![vec![1, 1, 0], vec![0, 1, 0], vec![0, 0, 1]]);
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.per_class_accuracy, vec![Some(0.5), Some(1.0), Some(1.0)]);
        let back: EvalReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(EvalReport::from_results(3, vec![]).is_err());
    }

    fn tiny_model() -> AcrnnConfig {
        AcrnnConfig {
            num_classes: 3,
            attention_site: AttentionSite::L10,
            attention_hidden: 4,
            gru_hidden: 4,
            conv_widths: [2, 2, 2, 2],
            input_bands: 32,
            input_frames: 18,
            ..AcrnnConfig::default()
        }
    }

    fn segs(n: usize) -> Vec<LogGtSegment> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (0..n)
            .map(|i| {
                let data = (0..18 * 32 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
                LogGtSegment::new(18, 32, i, data).unwrap()
            })
            .collect()
    }

    #[test]
    fn training_is_deterministic_and_round_trips() {
        let s = segs(6);
        let items: Vec<TrainItem> = s
            .iter()
            .enumerate()
            .map(|(i, seg)| TrainItem {
                segment: seg,
                class_id: i % 3,
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            lr_decay_every: 2,
            ..TrainConfig::default()
        };
        let norm = fit_norm(&s).unwrap();
        let mut seen = Vec::new();
        let mut obs = |e: &EpochStat| seen.push(e.epoch);
        let a = train_fold(&items, &norm, &cfg, &tiny_model(), Some(&mut obs)).unwrap();
        assert_eq!(seen, vec![0, 1, 2]);
        let b = train_fold(&items, &norm, &cfg, &tiny_model(), None).unwrap();
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.loss_trace[2].lr, 0.001);
        let bytes = a.checkpoint.to_bytes().unwrap();
        assert_eq!(bytes, b.checkpoint.to_bytes().unwrap());
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, a.checkpoint);
        let refs: Vec<&LogGtSegment> = s.iter().collect();
        let p1 = segment_probabilities(&a.checkpoint, &refs).unwrap();
        let p2 = segment_probabilities(&back, &refs).unwrap();
        assert_eq!(p1, p2);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad, Path::new("m")),
            Err(Error::Corrupt { .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1], Path::new("m")),
            Err(Error::Corrupt { .. })
        ));
    }

    #[test]
    fn single_segment_prediction_is_its_argmax() {
        let s = segs(2);
        let items: Vec<TrainItem> = s
            .iter()
            .enumerate()
            .map(|(i, seg)| TrainItem {
                segment: seg,
                class_id: i,
            })
            .collect();
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let out = train_fold(&items, &fit_norm(&s).unwrap(), &cfg, &tiny_model(), None).unwrap();
        let p = segment_probabilities(&out.checkpoint, &[&s[0]]).unwrap();
        let pred = predict_clip(&out.checkpoint, &[&s[0]]).unwrap();
        assert_eq!(pred.probs, p[0]);
        assert!(predict_clip(&out.checkpoint, &[]).is_err());
    }

    #[test]
    fn bad_labels_and_empty_sets_are_rejected() {
        let s = segs(1);
        let items = [TrainItem {
            segment: &s[0],
            class_id: 7,
        }];
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        assert!(train_fold(&items, &NormStats::default(), &cfg, &tiny_model(), None).is_err());
        assert!(train_fold(&[], &NormStats::default(), &cfg, &tiny_model(), None).is_err());
    }
}
