//! `augment`: writes stretched / pitch-shifted copies of audio files.

use acrnn_core::audio::{load_clip, write_clip};
use anyhow::{Context, Result};

use crate::error::path_error;
use crate::{create_dir, AugmentArgs, Common};

pub fn run(common: &Common, args: &AugmentArgs) -> Result<()> {
    let plan = &common.cfg.augment;
    plan.validate()?;
    let out = common.out_dir()?;
    if let Some(missing) = args.inputs.iter().find(|p| !p.is_file()) {
        return Err(path_error(missing, "audio file not found"));
    }
    let mut jobs = Vec::new();
    for (i, input) in args.inputs.iter().enumerate() {
        let stem = input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("clip{i}"));
        for (k, t) in plan.transforms_for(i as u32).into_iter().enumerate() {
            jobs.push((input, out.join(format!("{stem}.aug{k}.wav")), t));
        }
    }
    common.check_clobber(&jobs.iter().map(|j| j.1.clone()).collect::<Vec<_>>())?;
    create_dir(&out)?;
    let rate = common.cfg.prepare.sample_rate_hz;
    let mut current: Option<(&std::path::Path, acrnn_core::audio::AudioClip)> = None;
    for (input, target, t) in &jobs {
        if current.as_ref().map(|c| c.0) != Some(input.as_path()) {
            let clip = load_clip(input, rate).with_context(|| format!("loading {}", input.display()))?;
            current = Some((input.as_path(), clip));
        }
        let clip = &current.as_ref().unwrap().1;
        let augmented = t
            .apply(clip)
            .with_context(|| format!("{} of {}", t.describe(), input.display()))?;
        write_clip(target, &augmented)?;
        println!("{} <- {} ({})", target.display(), input.display(), t.describe());
    }
    Ok(())
}
