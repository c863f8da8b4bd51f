//! WAV decoding, resampling and ESC-style dataset manifests.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use crate::error::{arg_err, Error, Result};

/// ESC recordings ship at 44.1 kHz; everything downstream assumes it.
pub const CANONICAL_RATE_HZ: u32 = 44_100;

/// Mono PCM clip with amplitudes in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyInput("audio clip has no samples".into()));
        }
        if sample_rate_hz == 0 {
            return Err(arg_err!("sample rate must be positive"));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite audio sample".into()));
        }
        Ok(AudioClip {
            samples,
            sample_rate_hz,
        })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

/// Decodes a PCM WAV (16-bit integer or 32-bit float), averages channels to
/// mono and resamples to `target_rate_hz`.
pub fn load_clip(path: &Path, target_rate_hz: u32) -> Result<AudioClip> {
    if target_rate_hz == 0 {
        return Err(arg_err!("target sample rate must be positive"));
    }
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Format(format!("{}: zero channels", path.display())));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>(),
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>(),
        (fmt, bits) => {
            return Err(Error::Format(format!(
                "{}: {bits}-bit {fmt:?} samples are not supported",
                path.display()
            )))
        }
    }
    .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if interleaved.len() < channels {
        return Err(Error::EmptyInput(format!("{} has no audio frames", path.display())));
    }
    let mono: Vec<f64> = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    let resampled = if spec.sample_rate == target_rate_hz {
        mono
    } else {
        resample(&mono, spec.sample_rate as f64, target_rate_hz as f64)
    };
    let samples = resampled.iter().map(|&v| v.clamp(-1.0, 1.0) as f32).collect();
    AudioClip::new(samples, target_rate_hz)
}

/// Writes a mono clip as 32-bit float WAV.
pub fn write_clip(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate_hz,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let to_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(other.to_string()),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(to_err)?;
    for &s in &clip.samples {
        w.write_sample(s).map_err(to_err)?;
    }
    w.finalize().map_err(to_err)
}

const SINC_TAPS: usize = 64;
const KAISER_BETA: f64 = 8.0;

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Kaiser-windowed sinc resampling with a 64-tap kernel. The output holds
/// `round(len · out_rate / in_rate)` samples.
pub fn resample(input: &[f64], in_rate: f64, out_rate: f64) -> Vec<f64> {
    if input.is_empty() || in_rate <= 0.0 || out_rate <= 0.0 {
        return Vec::new();
    }
    let ratio = out_rate / in_rate;
    let out_len = ((input.len() as f64) * ratio).round().max(1.0) as usize;
    // anti-aliasing cutoff relative to the input Nyquist
    let cutoff = ratio.min(1.0);
    let half = (SINC_TAPS / 2) as f64;
    let i0_beta = bessel_i0(KAISER_BETA);
    let step = in_rate / out_rate;
    (0..out_len)
        .map(|n| {
            let t = n as f64 * step;
            let center = t.floor() as isize;
            let mut acc = 0.0;
            for k in (center - half as isize + 1)..=(center + half as isize) {
                if k < 0 || k as usize >= input.len() {
                    continue;
                }
                let d = t - k as f64;
                let x = d / half;
                if x.abs() > 1.0 {
                    continue;
                }
                let window = bessel_i0(KAISER_BETA * (1.0 - x * x).sqrt()) / i0_beta;
                acc += input[k as usize] * cutoff * sinc(cutoff * d) * window;
            }
            acc
        })
        .collect()
}

/// One clip of a dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipMeta {
    pub path: PathBuf,
    pub fold: usize,
    pub class_id: usize,
    pub class_name: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub clips: Vec<ClipMeta>,
    pub num_classes: usize,
    pub num_folds: usize,
}

impl DatasetManifest {
    /// Class names indexed by class id.
    pub fn class_names(&self) -> Vec<String> {
        let mut names = vec![String::new(); self.num_classes];
        for c in &self.clips {
            if names[c.class_id].is_empty() {
                names[c.class_id] = c.class_name.clone();
            }
        }
        names
    }
}

/// Manifest layouts understood by [`load_manifest`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ManifestFormat {
    /// ESC-50 style CSV with `filename,fold,target,category` columns.
    EscCsv,
    /// Same CSV restricted to rows whose `esc10` column is true.
    Esc10Subset,
}

/// Finds the metadata CSV under an ESC-style dataset root: `meta/esc50.csv`,
/// else the only CSV in `meta/`, else the only CSV in the root itself.
pub fn find_manifest_csv(root: &Path) -> Result<PathBuf> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory"),
        ));
    }
    let preferred = root.join("meta").join("esc50.csv");
    if preferred.is_file() {
        return Ok(preferred);
    }
    for dir in [root.join("meta"), root.to_path_buf()] {
        let Ok(entries) = std::fs::read_dir(&dir) else {
            continue;
        };
        let mut csvs: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        csvs.sort();
        match csvs.len() {
            0 => continue,
            1 => return Ok(csvs.remove(0)),
            _ => {
                return Err(Error::Manifest(format!(
                    "several CSV files in {}; expected exactly one",
                    dir.display()
                )))
            }
        }
    }
    Err(Error::Manifest(format!("no metadata CSV under {}", root.display())))
}

/// Reads an ESC-style dataset. Audio is looked up in `root/audio/` first and
/// then in `root/`. Targets are remapped to dense ids in ascending order so
/// subsets such as ESC-10 get ids `0..num_classes`.
pub fn load_manifest(root: &Path, format: ManifestFormat) -> Result<DatasetManifest> {
    let csv_path = find_manifest_csv(root)?;
    let audio_dir = if root.join("audio").is_dir() {
        root.join("audio")
    } else {
        root.to_path_buf()
    };
    load_manifest_csv(&csv_path, &audio_dir, format)
}

pub fn load_manifest_csv(csv_path: &Path, audio_dir: &Path, format: ManifestFormat) -> Result<DatasetManifest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(csv_path)
        .map_err(|e| Error::Parse {
            row: 0,
            msg: format!("{}: {e}", csv_path.display()),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            row: 1,
            msg: e.to_string(),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(i_file), Some(i_fold), Some(i_target), Some(i_cat)) =
        (col("filename"), col("fold"), col("target"), col("category"))
    else {
        return Err(Error::Parse {
            row: 1,
            msg: "header must contain filename,fold,target,category".into(),
        });
    };
    let i_esc10 = col("esc10");
    if format == ManifestFormat::Esc10Subset && i_esc10.is_none() {
        return Err(Error::Parse {
            row: 1,
            msg: "ESC-10 subset requested but there is no esc10 column".into(),
        });
    }

    struct Row {
        path: PathBuf,
        fold: usize,
        target: usize,
        category: String,
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        // header is row 1
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Parse {
            row,
            msg: e.to_string(),
        })?;
        let field = |j: usize| {
            rec.get(j).ok_or_else(|| Error::Parse {
                row,
                msg: format!("missing column {}", headers.get(j).unwrap_or("?")),
            })
        };
        if let (ManifestFormat::Esc10Subset, Some(j)) = (format, i_esc10) {
            let flag = field(j)?.to_ascii_lowercase();
            if !matches!(flag.as_str(), "true" | "1") {
                continue;
            }
        }
        let filename = field(i_file)?;
        if filename.is_empty() {
            return Err(Error::Parse {
                row,
                msg: "empty filename".into(),
            });
        }
        let fold: usize = field(i_fold)?.parse().map_err(|e| Error::Parse {
            row,
            msg: format!("fold: {e}"),
        })?;
        if fold == 0 {
            return Err(Error::Parse {
                row,
                msg: "folds are numbered from 1".into(),
            });
        }
        let target: usize = field(i_target)?.parse().map_err(|e| Error::Parse {
            row,
            msg: format!("target: {e}"),
        })?;
        rows.push(Row {
            path: audio_dir.join(filename),
            fold,
            target,
            category: field(i_cat)?.to_string(),
        });
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            row: 1,
            msg: format!("{} has no data rows", csv_path.display()),
        });
    }

    let dense: BTreeMap<usize, usize> = rows
        .iter()
        .map(|r| r.target)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, t)| (t, i))
        .collect();
    let mut seen = HashSet::new();
    let mut clips = Vec::with_capacity(rows.len());
    for r in rows {
        if !r.path.is_file() {
            return Err(Error::Manifest(format!("missing audio file {}", r.path.display())));
        }
        if !seen.insert(r.path.clone()) {
            return Err(Error::Manifest(format!("duplicate entry {}", r.path.display())));
        }
        clips.push(ClipMeta {
            path: r.path,
            fold: r.fold,
            class_id: dense[&r.target],
            class_name: r.category,
        });
    }
    let num_folds = clips.iter().map(|c| c.fold).max().unwrap_or(0);
    Ok(DatasetManifest {
        clips,
        num_classes: dense.len(),
        num_folds,
    })
}

/// `(train, test)` where test holds exactly the clips of `test_fold`.
pub fn split_folds(manifest: &DatasetManifest, test_fold: usize) -> Result<(Vec<ClipMeta>, Vec<ClipMeta>)> {
    if test_fold == 0 || test_fold > manifest.num_folds {
        return Err(arg_err!("test fold {test_fold} outside 1..={}", manifest.num_folds));
    }
    Ok(manifest.clips.iter().cloned().partition(|c| c.fold != test_fold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_f32(path: &Path, rate: u32, channels: u16, data: &[f32]) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &s in data {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    fn write_i16(path: &Path, rate: u32, data: &[i16]) {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &s in data {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn five_second_clip_keeps_length() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let data: Vec<i16> = (0..220_500).map(|i| ((i % 100) as i16 - 50) * 100).collect();
        write_i16(&p, 44_100, &data);
        let clip = load_clip(&p, 44_100).unwrap();
        assert_eq!(clip.samples.len(), 220_500);
        assert_eq!(clip.samples[0], -5000.0 / 32768.0);
    }

    #[test]
    fn upsampling_matches_length_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.wav");
        let data: Vec<f32> = (0..22_050).map(|i| (i as f32 * 0.01).sin() * 0.5).collect();
        write_f32(&p, 22_050, 1, &data);
        let clip = load_clip(&p, 44_100).unwrap();
        let expect = 22_050.0 * 44_100.0 / 22_050.0;
        assert!((clip.samples.len() as f64 - expect).abs() <= 2.0);
    }

    #[test]
    fn opposite_stereo_channels_cancel() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.wav");
        let data: Vec<f32> = (0..1000)
            .flat_map(|i| {
                let v = (i as f32 * 0.05).sin() * 0.7;
                [v, -v]
            })
            .collect();
        write_f32(&p, 44_100, 2, &data);
        let clip = load_clip(&p, 44_100).unwrap();
        assert_eq!(clip.samples.len(), 1000);
        assert!(clip.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_errors_are_typed() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_clip(&dir.path().join("missing.wav"), 44_100),
            Err(Error::Io { .. })
        ));
        let junk = dir.path().join("junk.wav");
        std::fs::File::create(&junk)
            .unwrap()
            .write_all(b"not a wav file at all")
            .unwrap();
        assert!(matches!(load_clip(&junk, 44_100), Err(Error::Format(_))));

        let p8 = dir.path().join("u8.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 8000,
            bits_per_sample: 8,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&p8, spec).unwrap();
        w.write_sample(3i8).unwrap();
        w.finalize().unwrap();
        assert!(matches!(load_clip(&p8, 8000), Err(Error::Format(_))));

        let empty = dir.path().join("empty.wav");
        write_i16(&empty, 44_100, &[]);
        assert!(matches!(load_clip(&empty, 44_100), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn float_mixdown_is_linear() {
        let dir = tempfile::tempdir().unwrap();
        let base: Vec<f32> = (0..4000).map(|i| ((i * 7919) % 1000) as f32 / 2000.0 - 0.25).collect();
        let a = 1.7f32;
        let p1 = dir.path().join("x.wav");
        let p2 = dir.path().join("ax.wav");
        write_f32(&p1, 22_050, 2, &base);
        write_f32(&p2, 22_050, 2, &base.iter().map(|v| v * a).collect::<Vec<_>>());
        let x = load_clip(&p1, 44_100).unwrap();
        let ax = load_clip(&p2, 44_100).unwrap();
        for (u, v) in x.samples.iter().zip(&ax.samples) {
            assert!((u * a - v).abs() < 1e-6);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn resampling_preserves_duration(len in 1usize..3000, in_rate in 4000u32..96_000, out_rate in 4000u32..96_000) {
            let x: Vec<f64> = (0..len).map(|i| (i as f64 * 0.3).sin()).collect();
            let y = resample(&x, in_rate as f64, out_rate as f64);
            let d = (y.len() as f64 / out_rate as f64 - len as f64 / in_rate as f64).abs();
            prop_assert!(d < 2.0 / out_rate as f64);
        }
    }

    fn write_manifest(dir: &Path, rows: &[(&str, usize, usize, &str)], touch: bool) -> PathBuf {
        let audio = dir.join("audio");
        std::fs::create_dir_all(&audio).unwrap();
        let meta = dir.join("meta");
        std::fs::create_dir_all(&meta).unwrap();
        let mut csv = String::from("filename,fold,target,category,esc10\n");
        for (f, fold, t, c) in rows {
            csv.push_str(&format!("{f},{fold},{t},{c},{}\n", *t < 2));
            if touch {
                write_i16(&audio.join(f), 44_100, &[0, 1, 2]);
            }
        }
        let p = meta.join("esc50.csv");
        std::fs::write(&p, csv).unwrap();
        p
    }

    #[test]
    fn manifest_counts_and_subset() {
        let dir = tempfile::tempdir().unwrap();
        let names: Vec<String> = (0..30).map(|i| format!("{i}.wav")).collect();
        let rows: Vec<(&str, usize, usize, &str)> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i % 5 + 1, (i / 5) * 3, "cls"))
            .collect();
        write_manifest(dir.path(), &rows, true);
        let m = load_manifest(dir.path(), ManifestFormat::EscCsv).unwrap();
        assert_eq!(m.clips.len(), 30);
        assert_eq!(m.num_classes, 6);
        assert_eq!(m.num_folds, 5);
        assert!(m.clips.iter().all(|c| c.class_id < 6));

        let sub = load_manifest(dir.path(), ManifestFormat::Esc10Subset).unwrap();
        // targets 0 only (target < 2)
        assert_eq!(sub.clips.len(), 5);
        assert_eq!(sub.num_classes, 1);
    }

    #[test]
    fn manifest_errors() {
        let dir = tempfile::tempdir().unwrap();
        write_manifest(dir.path(), &[("a.wav", 1, 0, "dog")], false);
        match load_manifest(dir.path(), ManifestFormat::EscCsv) {
            Err(Error::Manifest(msg)) => assert!(msg.contains("a.wav")),
            other => panic!("{other:?}"),
        }

        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("meta")).unwrap();
        std::fs::write(dir.path().join("meta/esc50.csv"), "").unwrap();
        assert!(matches!(
            load_manifest(dir.path(), ManifestFormat::EscCsv),
            Err(Error::Parse { .. })
        ));

        std::fs::write(
            dir.path().join("meta/esc50.csv"),
            "filename,fold,target,category\na.wav,1,0,dog\nb.wav,x,0,dog\n",
        )
        .unwrap();
        match load_manifest(dir.path(), ManifestFormat::EscCsv) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn split_partitions_by_fold() {
        let clip = |fold| ClipMeta {
            path: PathBuf::from(format!("{fold}-{}.wav", rand::random::<u32>())),
            fold,
            class_id: 0,
            class_name: "x".into(),
        };
        let m = DatasetManifest {
            clips: (0..20).map(|i| clip(i % 5 + 1)).collect(),
            num_classes: 1,
            num_folds: 5,
        };
        for k in 1..=5 {
            let (train, test) = split_folds(&m, k).unwrap();
            assert_eq!(train.len() + test.len(), 20);
            assert_eq!(test.len(), 4);
            assert!(test.iter().all(|c| c.fold == k));
            assert!(train.iter().all(|c| c.fold != k));
        }
        assert!(matches!(split_folds(&m, 6), Err(Error::Argument(_))));
        assert!(split_folds(&m, 0).is_err());

        let single = DatasetManifest {
            clips: (0..3).map(|_| clip(1)).collect(),
            num_classes: 1,
            num_folds: 1,
        };
        let (train, test) = split_folds(&single, 1).unwrap();
        assert!(train.is_empty());
        assert_eq!(test.len(), 3);
    }
}
