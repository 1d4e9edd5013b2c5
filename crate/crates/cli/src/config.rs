//! Run configuration: a JSON file, flag overrides, and validation.
//!
//! Precedence is defaults < file < flags. Unknown keys are rejected and the
//! seed is mandatory.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use omnixfer::dit::DitConfig;
use omnixfer::latents::TaskKind;
use omnixfer::DType;
use serde::{Deserialize, Serialize};

/// Every problem found while resolving a configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub Vec<String>);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "config error: {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

impl ConfigError {
    fn one(msg: impl Into<String>) -> Self {
        Self(vec![msg.into()])
    }
}

/// Raw pixel extents of synthetic clips; the stub encoder pools them 4x in time, 8x in space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipExtent {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for ClipExtent {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 32,
            width: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixturePaths {
    pub first_frame: Option<PathBuf>,
    pub prompt: Option<PathBuf>,
    pub references: BTreeMap<TaskKind, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TmaSection {
    pub query_tokens: usize,
    pub provider_dim: usize,
    pub allow_multiple_appearance: bool,
}

impl Default for TmaSection {
    fn default() -> Self {
        Self {
            query_tokens: 64,
            provider_dim: 256,
            allow_multiple_appearance: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub target_grid: [usize; 3],
    pub reference_grid: [usize; 3],
    pub sweep_steps: Vec<usize>,
    pub repeats: usize,
    pub warmup: usize,
    pub tolerance: f64,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            target_grid: [2, 4, 8],
            reference_grid: [2, 4, 8],
            sweep_steps: vec![1, 5, 20],
            repeats: 3,
            warmup: 1,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub decoupling_instances: usize,
    pub causality_perturbations: usize,
    pub rope_draws: usize,
    pub cache_steps: Vec<usize>,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            decoupling_instances: 100,
            causality_perturbations: 50,
            rope_draws: 1000,
            cache_steps: vec![1, 5, 20],
        }
    }
}

/// On-disk schema; everything optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    task: Option<TaskKind>,
    tasks: Option<Vec<TaskKind>>,
    seed: Option<u64>,
    steps: Option<usize>,
    out: Option<PathBuf>,
    precision: Option<DType>,
    model: Option<DitConfig>,
    tma: Option<TmaSection>,
    clip: Option<ClipExtent>,
    fixtures: Option<FixturePaths>,
    bench: Option<BenchSection>,
    verify: Option<VerifySection>,
}

/// Values given on the command line.
#[derive(Debug, Clone, Default)]
pub struct FlagOverrides {
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub tasks: Option<Vec<TaskKind>>,
    pub out: Option<PathBuf>,
    pub precision: Option<DType>,
    pub ref_cross_attention: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub tasks: Vec<TaskKind>,
    pub seed: u64,
    pub steps: usize,
    pub out: PathBuf,
    pub precision: DType,
    pub model: DitConfig,
    pub tma: TmaSection,
    pub clip: ClipExtent,
    pub fixtures: FixturePaths,
    pub bench: BenchSection,
    pub verify: VerifySection,
}

pub const DEFAULT_STEPS: usize = 20;

/// Reads `path` (if any), applies `flags` and validates the result.
pub fn parse_config(path: Option<&Path>, flags: &FlagOverrides) -> Result<RunConfig, ConfigError> {
    let (file, base) = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| ConfigError::one(format!("cannot read {}: {e}", p.display())))?;
            let file: ConfigFile =
                serde_json::from_str(&text).map_err(|e| ConfigError::one(format!("{}: {e}", p.display())))?;
            (file, p.parent().map(Path::to_path_buf).unwrap_or_default())
        }
        None => (ConfigFile::default(), PathBuf::new()),
    };
    resolve(file, &base, flags)
}

/// Like [`parse_config`] for an in-memory document; relative fixture paths resolve against `base`.
pub fn parse_config_str(text: &str, base: &Path, flags: &FlagOverrides) -> Result<RunConfig, ConfigError> {
    let file: ConfigFile = serde_json::from_str(text).map_err(|e| ConfigError::one(e.to_string()))?;
    resolve(file, base, flags)
}

fn resolve(file: ConfigFile, base: &Path, flags: &FlagOverrides) -> Result<RunConfig, ConfigError> {
    let mut errors = Vec::new();
    if file.task.is_some() && file.tasks.is_some() {
        errors.push("give either \"task\" or \"tasks\", not both".to_string());
    }
    let tasks = flags
        .tasks
        .clone()
        .or(file.tasks)
        .or(file.task.map(|t| vec![t]))
        .unwrap_or_default();
    let seed = flags.seed.or(file.seed);
    if seed.is_none() {
        errors.push("a seed is required (\"seed\" in the file or --seed)".to_string());
    }
    let steps = flags.steps.or(file.steps).unwrap_or(DEFAULT_STEPS);
    if steps == 0 {
        errors.push("steps must be at least 1".to_string());
    }
    let mut model = file.model.unwrap_or_default();
    if let Some(on) = flags.ref_cross_attention {
        model.ref_cross_attention = on;
    }
    if let Err(e) = model.validate() {
        errors.push(format!("model: {e}"));
    }
    let tma = file.tma.unwrap_or_default();
    if tma.query_tokens == 0 || tma.provider_dim == 0 {
        errors.push("tma: query_tokens and provider_dim must be at least 1".to_string());
    }
    let clip = file.clip.unwrap_or_default();
    if clip.frames == 0 || clip.height == 0 || clip.width == 0 {
        errors.push("clip extents must be at least 1".to_string());
    }
    let mut fixtures = file.fixtures.unwrap_or_default();
    let resolve_path = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
    fixtures.first_frame = fixtures.first_frame.as_ref().map(resolve_path);
    fixtures.prompt = fixtures.prompt.as_ref().map(resolve_path);
    for p in fixtures.references.values_mut() {
        *p = resolve_path(p);
    }
    let all_paths = fixtures
        .first_frame
        .iter()
        .chain(&fixtures.prompt)
        .chain(fixtures.references.values());
    for p in all_paths {
        if !p.is_file() {
            errors.push(format!("fixture {} does not exist", p.display()));
        }
    }
    let bench = file.bench.unwrap_or_default();
    if bench.repeats == 0 || bench.sweep_steps.contains(&0) || bench.sweep_steps.is_empty() {
        errors.push("bench: repeats and every sweep step must be at least 1".to_string());
    }
    let verify = file.verify.unwrap_or_default();
    if !errors.is_empty() {
        return Err(ConfigError(errors));
    }
    Ok(RunConfig {
        tasks,
        seed: seed.expect("checked above"),
        steps,
        out: flags.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from("out")),
        precision: flags.precision.or(file.precision).unwrap_or(DType::F32),
        model,
        tma,
        clip,
        fixtures,
        bench,
        verify,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        parse_config_str(text, Path::new(""), &FlagOverrides::default())
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse(r#"{"task": "motion", "seed": 7}"#).unwrap();
        assert_eq!(c.tasks, vec![TaskKind::Motion]);
        assert_eq!(c.seed, 7);
        assert_eq!(c.steps, DEFAULT_STEPS);
        assert_eq!(c.model, DitConfig::default());
        assert_eq!(c.precision, DType::F32);
    }

    #[test]
    fn unknown_key_is_named() {
        let e = parse(r#"{"task": "motion", "seed": 7, "foo": 1}"#).unwrap_err();
        assert!(e.to_string().contains("foo"), "{e}");
        let nested = parse(r#"{"seed": 7, "model": {"layerz": 2}}"#).unwrap_err();
        assert!(nested.to_string().contains("layerz"));
    }

    #[test]
    fn flags_beat_file() {
        let flags = FlagOverrides {
            steps: Some(3),
            ref_cross_attention: Some(true),
            ..FlagOverrides::default()
        };
        let c = parse_config_str(r#"{"task": "camera", "seed": 1, "steps": 9}"#, Path::new(""), &flags).unwrap();
        assert_eq!(c.steps, 3);
        assert!(c.model.ref_cross_attention);
    }

    #[test]
    fn errors_are_itemised() {
        let e = parse(r#"{"task": "id", "tasks": ["style"], "steps": 0}"#).unwrap_err();
        assert_eq!(e.0.len(), 3, "{e}");
        assert!(parse(r#"{"task": "dance", "seed": 1}"#).is_err());
        assert!(parse(r#"{"seed": 1, "steps": -4}"#).is_err());
        let missing = parse(r#"{"seed": 1, "fixtures": {"first_frame": "/nonexistent/x.oxl"}}"#).unwrap_err();
        assert!(missing.to_string().contains("does not exist"));
    }
}
