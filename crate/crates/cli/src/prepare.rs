//! `prepare`: dataset manifest to feature store.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use acrnn_core::audio::{load_clip, load_manifest, ClipMeta, ManifestFormat};
use acrnn_core::augment::{AugmentPlan, Transform};
use acrnn_core::dsp::{default_bank, extract_features, GammatoneBank, StftConfig};
use acrnn_core::store::{
    read_store_meta, store_status, SegmentRecord, StoreMeta, StoreStatus, StoreWriter, StoredClip,
};
use anyhow::{Context, Result};

use crate::config::Subset;
use crate::error::{path_error, usage};
use crate::{Common, PrepareArgs};

const STORE_FORMAT_VERSION: u32 = 1;

/// One stored clip: the original (`transform == None`) or an augmented copy.
struct Entry {
    stored: StoredClip,
    transform: Option<Transform>,
}

/// All entries derived from one source file; the unit of parallel work.
struct Unit<'a> {
    source: &'a ClipMeta,
    entries: Vec<Entry>,
}

fn plan_units<'a>(clips: &'a [ClipMeta], plan: Option<&AugmentPlan>) -> Vec<Unit<'a>> {
    let n = clips.len() as u32;
    let copies = plan.map_or(0, |p| p.copies_per_clip) as u32;
    clips
        .iter()
        .enumerate()
        .map(|(i, clip)| {
            let id = i as u32;
            let source = clip
                .path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let stored = |clip_id, origin_clip, provenance| StoredClip {
                clip_id,
                fold: clip.fold as u32,
                class_id: clip.class_id as u32,
                source: source.clone(),
                origin_clip,
                provenance,
                segments: 0,
            };
            let mut entries = vec![Entry {
                stored: stored(id, None, String::new()),
                transform: None,
            }];
            if let Some(plan) = plan {
                for (k, t) in plan.transforms_for(id).into_iter().enumerate() {
                    entries.push(Entry {
                        stored: stored(
                            n + id * copies + k as u32,
                            Some(id),
                            format!("origin {id}: {}", t.describe()),
                        ),
                        transform: Some(t),
                    });
                }
            }
            Unit { source: clip, entries }
        })
        .collect()
}

fn extract_unit(unit: &Unit<'_>, bank: &GammatoneBank, rate: u32) -> Result<Vec<(StoredClip, Vec<SegmentRecord>)>> {
    let path = &unit.source.path;
    let audio = load_clip(path, rate).with_context(|| format!("loading {}", path.display()))?;
    let mut out = Vec::with_capacity(unit.entries.len());
    for entry in &unit.entries {
        let segments = match &entry.transform {
            None => extract_features(&audio, bank, &StftConfig::default()),
            // A copy sped up below one segment simply contributes nothing.
            Some(t) => match t
                .apply(&audio)
                .and_then(|a| extract_features(&a, bank, &StftConfig::default()))
            {
                Err(acrnn_core::Error::EmptyInput(_)) => Ok(Vec::new()),
                other => other,
            },
        }
        .with_context(|| {
            let what = entry.transform.as_ref().map_or("features".into(), |t| t.describe());
            format!("extracting {what} of {}", path.display())
        })?;
        let mut stored = entry.stored.clone();
        stored.segments = segments.len() as u32;
        let records = segments
            .into_iter()
            .map(|segment| SegmentRecord {
                clip_id: stored.clip_id,
                class_id: stored.class_id,
                fold: stored.fold,
                provenance: stored.provenance.clone(),
                segment,
            })
            .collect();
        out.push((stored, records));
    }
    Ok(out)
}

/// Runs `extract_unit` over `units` on `jobs` threads, in order-preserving
/// chunks so memory stays bounded and output order never depends on `jobs`.
fn extract_all(
    units: &[Unit<'_>],
    bank: &GammatoneBank,
    rate: u32,
    jobs: usize,
    mut sink: impl FnMut(Vec<(StoredClip, Vec<SegmentRecord>)>) -> Result<()>,
) -> Result<()> {
    for chunk in units.chunks(jobs * 4) {
        let slots: Vec<Mutex<Option<Result<_>>>> = chunk.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..jobs.min(chunk.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= chunk.len() {
                        break;
                    }
                    let r = extract_unit(&chunk[i], bank, rate);
                    *slots[i].lock().unwrap() = Some(r);
                });
            }
        });
        for slot in slots {
            sink(slot.into_inner().unwrap().expect("every slot is filled")?)?;
        }
    }
    Ok(())
}

fn same_layout(meta: &StoreMeta, expected: &[StoredClip], rate: u32) -> bool {
    meta.sample_rate_hz == rate
        && meta.clips.len() == expected.len()
        && meta.clips.iter().zip(expected).all(|(a, b)| {
            (a.clip_id, a.fold, a.class_id, &a.source, a.origin_clip, &a.provenance)
                == (b.clip_id, b.fold, b.class_id, &b.source, b.origin_clip, &b.provenance)
        })
}

pub fn run(common: &Common, args: &PrepareArgs) -> Result<()> {
    let cfg = &common.cfg;
    let root = args
        .dataset
        .clone()
        .or_else(|| cfg.paths.dataset.clone())
        .ok_or_else(|| usage("no dataset root (pass --dataset or set paths.dataset)"))?;
    if !root.is_dir() {
        return Err(path_error(&root, "dataset root not found"));
    }
    let store_dir = common
        .out
        .clone()
        .or_else(|| cfg.paths.store.clone())
        .ok_or_else(|| usage("no store directory (pass --out or set paths.store)"))?;
    let format = if args.esc10 || cfg.prepare.subset == Subset::Esc10 {
        ManifestFormat::Esc10Subset
    } else {
        ManifestFormat::EscCsv
    };
    let manifest = load_manifest(&root, format)?;
    if manifest.clips.is_empty() {
        return Err(usage(format!("manifest under {} lists no clips", root.display())));
    }
    if let Some(missing) = manifest.clips.iter().find(|c| !c.path.is_file()) {
        return Err(path_error(
            &missing.path,
            "audio file listed in the manifest is missing",
        ));
    }
    let rate = cfg.prepare.sample_rate_hz;
    let augment = args.augment || cfg.prepare.augment;
    let units = plan_units(&manifest.clips, augment.then_some(&cfg.augment));
    let expected: Vec<StoredClip> = units
        .iter()
        .flat_map(|u| u.entries.iter().map(|e| e.stored.clone()))
        .collect();

    match store_status(&store_dir) {
        StoreStatus::Complete if !common.force => {
            let meta = read_store_meta(&store_dir)?;
            if same_layout(&meta, &expected, rate) {
                println!(
                    "{}: up to date ({} clips, {} segments)",
                    store_dir.display(),
                    meta.clips.len(),
                    meta.num_records
                );
                return Ok(());
            }
            return Err(usage(format!(
                "{} holds a store built from different inputs; pass --force to rebuild",
                store_dir.display()
            )));
        }
        StoreStatus::Partial => eprintln!("{}: discarding incomplete store", store_dir.display()),
        _ => {}
    }

    let jobs = common
        .jobs
        .or(cfg.prepare.jobs)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let bank = default_bank(rate)?;
    let mut writer = StoreWriter::create(&store_dir)?;
    let mut clips = Vec::with_capacity(expected.len());
    let mut per_fold = vec![(0usize, 0usize); manifest.num_folds];
    eprintln!(
        "extracting {} clips ({} stored entries) with {jobs} worker(s)",
        manifest.clips.len(),
        expected.len()
    );
    let mut empty_copies = 0usize;
    extract_all(&units, &bank, rate, jobs, |batch| {
        for (stored, records) in batch {
            if records.is_empty() {
                empty_copies += 1;
            }
            let counts = &mut per_fold[stored.fold as usize - 1];
            if stored.origin_clip.is_some() {
                counts.1 += records.len();
            } else {
                counts.0 += records.len();
            }
            for rec in &records {
                writer.write(rec)?;
            }
            clips.push(stored);
        }
        Ok(())
    })?;
    let total = writer.written();
    writer.finish(StoreMeta {
        format_version: STORE_FORMAT_VERSION,
        sample_rate_hz: rate,
        num_classes: manifest.num_classes,
        num_folds: manifest.num_folds,
        class_names: manifest.class_names(),
        num_records: total,
        clips,
    })?;
    for (i, (orig, aug)) in per_fold.iter().enumerate() {
        if augment {
            println!("fold {}: {orig} segments (+{aug} augmented)", i + 1);
        } else {
            println!("fold {}: {orig} segments", i + 1);
        }
    }
    if empty_copies > 0 {
        println!("{empty_copies} augmented copies were shorter than one segment and hold no segments");
    }
    println!("wrote {total} segments to {}", store_dir.display());
    Ok(())
}
