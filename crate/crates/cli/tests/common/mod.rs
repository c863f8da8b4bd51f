//! Synthetic four-class dataset shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;
use std::path::Path;

use acrnn_core::audio::{write_clip, AudioClip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FS: u32 = 44_100;
/// 1.5 s: exactly one 128-frame segment.
pub const TOY_LEN: usize = 66_150;
pub const CLASSES: [&str; 4] = ["tone", "noise_burst", "chirp", "am_noise"];
const FLOOR: f64 = 1e-4;

/// Event waveform of `class` with `len` samples.
pub fn event(class: usize, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let amp = rng.gen_range(0.2..0.5);
    let t = |i: usize| i as f64 / FS as f64;
    match class {
        0 => {
            let f = rng.gen_range(300.0..3000.0);
            (0..len).map(|i| amp * (2.0 * PI * f * t(i)).sin()).collect()
        }
        1 => {
            let bursts = rng.gen_range(2..=4);
            let mut gate = vec![0.0; len];
            for _ in 0..bursts {
                let w = rng.gen_range(len / 10..len / 4);
                let s = rng.gen_range(0..len - w);
                gate[s..s + w].iter_mut().for_each(|g| *g = 1.0);
            }
            gate.into_iter().map(|g| g * amp * rng.gen_range(-1.0..1.0)).collect()
        }
        2 => {
            let (f0, f1) = (rng.gen_range(200.0..1000.0), rng.gen_range(2000.0..6000.0));
            let (f0, f1) = if rng.gen_bool(0.5) { (f0, f1) } else { (f1, f0) };
            let dur = len as f64 / FS as f64;
            let k = (f1 - f0) / dur;
            (0..len)
                .map(|i| amp * (2.0 * PI * (f0 * t(i) + 0.5 * k * t(i) * t(i))).sin())
                .collect()
        }
        _ => {
            let fm = rng.gen_range(3.0..8.0);
            (0..len)
                .map(|i| amp * 0.5 * (1.0 + (2.0 * PI * fm * t(i)).sin()) * rng.gen_range(-1.0..1.0))
                .collect()
        }
    }
}

fn with_floor(samples: Vec<f64>, rng: &mut ChaCha8Rng) -> AudioClip {
    let s = samples
        .into_iter()
        .map(|v| (v + FLOOR * rng.gen_range(-1.0..1.0)) as f32)
        .collect();
    AudioClip::new(s, FS).unwrap()
}

/// Toy clip: an event of random onset and duration over a quiet floor.
pub fn toy_clip(class: usize, seed: u64) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dur = rng.gen_range(TOY_LEN / 3..=TOY_LEN * 3 / 4);
    let onset = rng.gen_range(0..=TOY_LEN - dur);
    let mut x = vec![0.0; TOY_LEN];
    let e = event(class, dur, &mut rng);
    x[onset..onset + dur].copy_from_slice(&e);
    with_floor(x, &mut rng)
}

/// Silence for the first `onset` samples, then an event to the end.
pub fn silence_then_event(class: usize, onset: usize, seed: u64) -> AudioClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = vec![0.0; TOY_LEN];
    let e = event(class, TOY_LEN - onset, &mut rng);
    x[onset..].copy_from_slice(&e);
    with_floor(x, &mut rng)
}

/// Writes `audio/*.wav` plus `meta/esc50.csv` in the ESC-50 layout.
pub fn write_toy_dataset(root: &Path, clips_per_class: usize, folds: usize, seed: u64) {
    std::fs::create_dir_all(root.join("audio")).unwrap();
    std::fs::create_dir_all(root.join("meta")).unwrap();
    let mut csv = String::from("filename,fold,target,category,esc10,src_file,take\n");
    for class in 0..CLASSES.len() {
        for i in 0..clips_per_class {
            let fold = 1 + i % folds;
            let name = format!("{fold}-{class}{i:03}-A-{class}.wav");
            let clip = toy_clip(class, seed * 1_000_003 + (class * 10_000 + i) as u64);
            write_clip(&root.join("audio").join(&name), &clip).unwrap();
            csv.push_str(&format!(
                "{name},{fold},{class},{},False,{class}{i:03},A\n",
                CLASSES[class]
            ));
        }
    }
    std::fs::write(root.join("meta/esc50.csv"), csv).unwrap();
}
