//! Seeded synthetic clips, their on-disk form, and loading them for a run.
//!
//! Clips are generated in f64 and stored as f32, so a run that synthesises
//! its inputs in memory sees exactly the values `gen-fixtures` writes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use omnixfer::latents::{decode_array, encode_array, TaskKind};
use omnixfer::{Array, Rng, Scalar};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ClipExtent, RunConfig};
use crate::error::CliError;

pub const PROMPT_TOKENS: usize = 4;
pub const FIRST_FRAME_FILE: &str = "first_frame.oxl";
pub const PROMPT_FILE: &str = "prompt.oxl";

pub fn reference_file(kind: TaskKind) -> String {
    format!("reference_{kind}.oxl")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Drifting plane waves per colour channel plus a little noise; `[frames, H, W, 3]`.
fn wave_clip(seed: u64, label: &str, frames: usize, extent: ClipExtent) -> Array<f32> {
    let mut rng = Rng::for_label(seed, label);
    let waves: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            [
                rng.uniform_range(-0.8, 0.8),
                rng.uniform_range(-0.4, 0.4),
                rng.uniform_range(-0.4, 0.4),
                rng.uniform_range(0.0, std::f64::consts::TAU),
            ]
        })
        .collect();
    let (h, w) = (extent.height, extent.width);
    Array::from_fn([frames, h, w, 3], |i| {
        let c = i % 3;
        let x = (i / 3) % w;
        let y = (i / (3 * w)) % h;
        let t = i / (3 * w * h);
        let [ft, fy, fx, phase] = waves[c];
        let v = (ft * t as f64 + fy * y as f64 + fx * x as f64 + phase).sin();
        (v + 0.05 * rng.normal()) as f32
    })
}

pub fn reference_clip(seed: u64, kind: TaskKind, extent: ClipExtent) -> Array<f32> {
    wave_clip(seed, &format!("fixture.reference.{kind}"), extent.frames, extent)
}

/// `[1, H, W, 3]`.
pub fn first_frame(seed: u64, extent: ClipExtent) -> Array<f32> {
    wave_clip(seed, "fixture.first_frame", 1, extent)
}

/// Pre-pooled prompt token summaries, stored as `[1, 1, PROMPT_TOKENS, n]`.
pub fn prompt(seed: u64, n: usize) -> Array<f32> {
    let mut rng = Rng::for_label(seed, "fixture.prompt");
    Array::from_fn([1, 1, PROMPT_TOKENS, n], |_| rng.normal() as f32)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixtureRecord {
    pub file: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

/// Where an input came from: a file digest, or `synthetic` when generated in memory.
pub fn source_label(bytes: Option<&[u8]>) -> String {
    match bytes {
        Some(b) => format!("sha256:{}", sha256_hex(b)),
        None => "synthetic".to_string(),
    }
}

/// Writes every fixture a run over `tasks` can read and returns one record per file.
pub fn write_fixtures(cfg: &RunConfig, tasks: &[TaskKind], dir: &Path) -> Result<Vec<FixtureRecord>, CliError> {
    fs::create_dir_all(dir)?;
    let n = cfg.model.latent_channels;
    let mut files = vec![
        (FIRST_FRAME_FILE.to_string(), first_frame(cfg.seed, cfg.clip)),
        (PROMPT_FILE.to_string(), prompt(cfg.seed, n)),
    ];
    for &kind in tasks {
        files.push((reference_file(kind), reference_clip(cfg.seed, kind, cfg.clip)));
    }
    files
        .into_iter()
        .map(|(file, a)| {
            let bytes = encode_array(&a)?;
            fs::write(dir.join(&file), &bytes)?;
            Ok(FixtureRecord {
                shape: a.shape().to_vec(),
                sha256: sha256_hex(&bytes),
                file,
            })
        })
        .collect()
}

/// Raw inputs for one run, in the run's precision.
pub struct RunInputs<T> {
    pub first_frame: Array<T>,
    /// `[PROMPT_TOKENS, n]` (or whatever the fixture holds).
    pub prompt: Array<T>,
    pub references: BTreeMap<TaskKind, Array<T>>,
    pub sources: BTreeMap<String, String>,
}

fn load<T: Scalar>(
    path: Option<&Path>,
    what: &str,
    sources: &mut BTreeMap<String, String>,
    synth: impl FnOnce() -> Array<f32>,
) -> Result<Array<T>, CliError> {
    match path {
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
            let a = decode_array::<T>(&bytes).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
            sources.insert(what.to_string(), source_label(Some(&bytes)));
            Ok(a)
        }
        None => {
            sources.insert(what.to_string(), source_label(None));
            Ok(synth().cast())
        }
    }
}

pub fn load_inputs<T: Scalar>(cfg: &RunConfig, tasks: &[TaskKind]) -> Result<RunInputs<T>, CliError> {
    let n = cfg.model.latent_channels;
    let mut sources = BTreeMap::new();
    let fx = &cfg.fixtures;
    let first_frame = load(fx.first_frame.as_deref(), "first_frame", &mut sources, || first_frame(cfg.seed, cfg.clip))?;
    if first_frame.shape()[0] != 1 || first_frame.shape()[3] != 3 {
        return Err(CliError::Input(format!("first frame must be [1, H, W, 3], got {:?}", first_frame.shape())));
    }
    let prompt4 = load(fx.prompt.as_deref(), "prompt", &mut sources, || prompt(cfg.seed, n))?;
    let shape = prompt4.shape().to_vec();
    if shape[3] != n {
        return Err(CliError::Input(format!("prompt must have {n} channels, got {shape:?}")));
    }
    let prompt = prompt4.reshape([shape[0] * shape[1] * shape[2], n])?;
    let mut references = BTreeMap::new();
    for &kind in tasks {
        let path = fx.references.get(&kind).map(|p| p.as_path());
        let clip = load(path, &format!("reference.{kind}"), &mut sources, || reference_clip(cfg.seed, kind, cfg.clip))?;
        if clip.shape()[3] != 3 {
            return Err(CliError::Input(format!("{kind} reference must be [F, H, W, 3], got {:?}", clip.shape())));
        }
        references.insert(kind, clip);
    }
    Ok(RunInputs {
        first_frame,
        prompt,
        references,
        sources,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{parse_config_str, FlagOverrides};

    #[test]
    fn written_fixtures_load_to_the_synthetic_values() {
        let dir = tempfile::tempdir().unwrap();
        let base = parse_config_str(r#"{"task": "camera", "seed": 5}"#, dir.path(), &FlagOverrides::default()).unwrap();
        let records = write_fixtures(&base, &[TaskKind::Camera], dir.path()).unwrap();
        assert_eq!(records.len(), 3);
        let with_files = parse_config_str(
            r#"{"task": "camera", "seed": 5, "fixtures": {"first_frame": "first_frame.oxl",
                "prompt": "prompt.oxl", "references": {"camera": "reference_camera.oxl"}}}"#,
            dir.path(),
            &FlagOverrides::default(),
        )
        .unwrap();
        let a = load_inputs::<f64>(&base, &[TaskKind::Camera]).unwrap();
        let b = load_inputs::<f64>(&with_files, &[TaskKind::Camera]).unwrap();
        assert_eq!(a.first_frame, b.first_frame);
        assert_eq!(a.prompt, b.prompt);
        assert_eq!(a.references, b.references);
        assert_eq!(a.sources["first_frame"], "synthetic");
        assert_eq!(b.sources["first_frame"], format!("sha256:{}", records[0].sha256));
    }

    #[test]
    fn clips_depend_on_seed_and_task() {
        let e = ClipExtent::default();
        assert_eq!(reference_clip(1, TaskKind::Id, e), reference_clip(1, TaskKind::Id, e));
        assert_ne!(reference_clip(1, TaskKind::Id, e), reference_clip(2, TaskKind::Id, e));
        assert_ne!(reference_clip(1, TaskKind::Id, e), reference_clip(1, TaskKind::Style, e));
        assert!(reference_clip(3, TaskKind::Motion, e).max_abs() < 1.5);
    }

    #[test]
    fn garbage_fixture_is_an_input_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("bad.oxl"), b"not a container").unwrap();
        let cfg = parse_config_str(
            r#"{"task": "id", "seed": 1, "fixtures": {"references": {"id": "bad.oxl"}}}"#,
            dir.path(),
            &FlagOverrides::default(),
        )
        .unwrap();
        assert!(matches!(load_inputs::<f32>(&cfg, &[TaskKind::Id]), Err(CliError::Input(_))));
    }
}
