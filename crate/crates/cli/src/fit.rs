//! `train`, `cv` and `eval`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use acrnn_core::audio::load_clip;
use acrnn_core::checkpoint::Checkpoint;
use acrnn_core::dsp::{default_bank, extract_features, StftConfig};
use acrnn_core::model::{ablation_grid, AcrnnConfig};
use acrnn_core::store::FeatureStore;
use acrnn_core::train::{cross_validate, evaluate, predict_clip, run_fold, test_clips, EpochStat, EvalReport};
use anyhow::{Context, Result};

use crate::error::{path_error, usage};
use crate::{create_dir, Common, CvArgs, EvalArgs, TrainArgs};

fn open_store(common: &Common, flag: &Option<PathBuf>) -> Result<FeatureStore> {
    let dir = common.store_dir(flag)?;
    if !dir.is_dir() {
        return Err(path_error(&dir, "feature store not found (run `acrnn prepare` first)"));
    }
    FeatureStore::open(&dir).with_context(|| format!("opening feature store {}", dir.display()))
}

fn model_config(common: &Common, store: &FeatureStore) -> Result<AcrnnConfig> {
    let cfg = AcrnnConfig {
        num_classes: store.meta.num_classes,
        ..common.cfg.model.clone()
    };
    cfg.validate()?;
    common.cfg.train.validate()?;
    Ok(cfg)
}

fn progress(total: usize) -> impl FnMut(&EpochStat) {
    move |e: &EpochStat| eprintln!("epoch {:>4}/{total}  lr {:.0e}  loss {:.4}", e.epoch + 1, e.lr, e.loss)
}

fn write_report(report: &EvalReport, json: &Path, csv: &Path, class_names: &[String]) -> Result<()> {
    report.write_json(json)?;
    report.write_confusion_csv(csv, class_names)?;
    Ok(())
}

fn correct(report: &EvalReport) -> u64 {
    (0..report.num_classes).map(|c| report.confusion[c][c]).sum()
}

pub fn train(common: &Common, args: &TrainArgs) -> Result<()> {
    let store = open_store(common, &args.store)?;
    let k = store.meta.num_folds;
    if args.fold == 0 || args.fold > k {
        return Err(usage(format!(
            "fold {} out of range; the store has folds 1..={k}",
            args.fold
        )));
    }
    let mcfg = model_config(common, &store)?;
    let tcfg = &common.cfg.train;
    let out = common.out_dir()?;
    let fold = args.fold;
    let files = [
        out.join(format!("fold{fold}.acrn")),
        out.join(format!("fold{fold}.json")),
        out.join(format!("fold{fold}_confusion.csv")),
    ];
    common.check_clobber(&files)?;
    create_dir(&out)?;

    let mut observer = progress(tcfg.epochs);
    let (outcome, report) = run_fold(&store, fold, tcfg, &mcfg, Some(&mut observer))?;
    outcome.checkpoint.save(&files[0])?;
    write_report(&report, &files[1], &files[2], &store.meta.class_names)?;
    println!(
        "fold {fold}: accuracy {:.2}% ({}/{})",
        100.0 * report.accuracy,
        correct(&report),
        report.predictions.len()
    );
    println!("checkpoint {}", files[0].display());
    Ok(())
}

pub fn cv(common: &Common, args: &CvArgs) -> Result<()> {
    let store = open_store(common, &args.store)?;
    let mcfg = model_config(common, &store)?;
    let tcfg = &common.cfg.train;
    let out = common.out_dir()?;
    let k = store.meta.num_folds;

    if args.ablation {
        let grid = ablation_grid(&mcfg);
        let csv_path = out.join("ablation.csv");
        let mut files = vec![csv_path.clone()];
        files.extend(grid.iter().map(|(name, _)| out.join(format!("ablation_{name}.json"))));
        common.check_clobber(&files)?;
        create_dir(&out)?;
        let mut csv = String::from("config");
        for f in 1..=k {
            write!(csv, ",fold{f}").unwrap();
        }
        csv.push_str(",mean\n");
        for (name, cfg) in &grid {
            eprintln!("{name}");
            let report = cross_validate(&store, tcfg, cfg, None)?;
            std::fs::write(
                out.join(format!("ablation_{name}.json")),
                serde_json::to_string_pretty(&report)?,
            )
            .with_context(|| format!("writing report for {name}"))?;
            csv.push_str(name);
            for f in &report.folds {
                write!(csv, ",{:.4}", f.report.accuracy).unwrap();
            }
            writeln!(csv, ",{:.4}", report.mean_accuracy).unwrap();
            println!("{name:<14} {:6.2}%", 100.0 * report.mean_accuracy);
        }
        std::fs::write(&csv_path, csv).with_context(|| format!("writing {}", csv_path.display()))?;
        println!("wrote {}", csv_path.display());
        return Ok(());
    }

    let mut files = vec![out.join("cv.json")];
    for f in 1..=k {
        files.push(out.join(format!("fold{f}.acrn")));
        files.push(out.join(format!("fold{f}_confusion.csv")));
    }
    common.check_clobber(&files)?;
    create_dir(&out)?;
    let mut saved: Result<()> = Ok(());
    let mut on_fold = |fr: &acrnn_core::train::FoldResult, outcome: &acrnn_core::train::TrainOutcome| {
        eprintln!("fold {} done: {:.2}%", fr.fold, 100.0 * fr.report.accuracy);
        if saved.is_ok() {
            saved = outcome
                .checkpoint
                .save(&out.join(format!("fold{}.acrn", fr.fold)))
                .and_then(|_| {
                    fr.report.write_confusion_csv(
                        &out.join(format!("fold{}_confusion.csv", fr.fold)),
                        &store.meta.class_names,
                    )
                })
                .map_err(Into::into);
        }
    };
    let report = cross_validate(&store, tcfg, &mcfg, Some(&mut on_fold))?;
    saved?;
    let json = out.join("cv.json");
    std::fs::write(&json, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", json.display()))?;
    println!("fold  accuracy");
    for f in &report.folds {
        println!("{:<5} {:6.2}%", f.fold, 100.0 * f.report.accuracy);
    }
    println!("mean  {:6.2}%", 100.0 * report.mean_accuracy);
    Ok(())
}

pub fn eval(common: &Common, args: &EvalArgs) -> Result<()> {
    if args.fold.is_none() && args.clips.is_empty() {
        return Err(usage("nothing to evaluate: pass --fold or audio files"));
    }
    let ckpt_path = common.checkpoint(&args.checkpoint)?;
    let ckpt = Checkpoint::load(&ckpt_path)?;

    let mut names: Vec<String> = Vec::new();
    if let Some(fold) = args.fold {
        let store = open_store(common, &args.store)?;
        if fold == 0 || fold > store.meta.num_folds {
            return Err(usage(format!(
                "fold {fold} out of range; the store has folds 1..={}",
                store.meta.num_folds
            )));
        }
        if store.meta.num_classes != ckpt.config().num_classes {
            return Err(usage(format!(
                "checkpoint predicts {} classes, store has {}",
                ckpt.config().num_classes,
                store.meta.num_classes
            )));
        }
        names = store.meta.class_names.clone();
        let report = evaluate(&ckpt, &test_clips(&store, fold))?;
        if let Some(out) = common.out.clone().or_else(|| common.cfg.paths.out.clone()) {
            let files = [
                out.join(format!("eval_fold{fold}.json")),
                out.join(format!("eval_fold{fold}_confusion.csv")),
            ];
            common.check_clobber(&files)?;
            create_dir(&out)?;
            write_report(&report, &files[0], &files[1], &names)?;
        }
        println!(
            "fold {fold}: accuracy {:.2}% ({}/{})",
            100.0 * report.accuracy,
            correct(&report),
            report.predictions.len()
        );
    } else if let Some(dir) = args.store.clone().or_else(|| common.cfg.paths.store.clone()) {
        if let Ok(meta) = acrnn_core::store::read_store_meta(&dir) {
            names = meta.class_names;
        }
    }

    if !args.clips.is_empty() {
        let rate = common.cfg.prepare.sample_rate_hz;
        let bank = default_bank(rate)?;
        for path in &args.clips {
            let clip = load_clip(path, rate).with_context(|| format!("loading {}", path.display()))?;
            let segs = extract_features(&clip, &bank, &StftConfig::default())
                .with_context(|| format!("extracting features of {}", path.display()))?;
            let refs: Vec<_> = segs.iter().collect();
            let pred = predict_clip(&ckpt, &refs)?;
            let name = names.get(pred.class_id).map_or(String::new(), |n| format!(" {n}"));
            println!(
                "{}: class {}{name} (p = {:.3})",
                path.display(),
                pred.class_id,
                pred.probs[pred.class_id]
            );
        }
    }
    Ok(())
}
