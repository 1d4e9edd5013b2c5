//! The five subcommands. Each writes a deterministic manifest plus a
//! `timing.json` sidecar holding everything that reads the clock.

use std::fs;
use std::path::Path;
use std::time::Instant;

use omnixfer::bench::{emit_report, sweep, BenchConfig, CostModel, Flops, MachineFingerprint};
use omnixfer::dit::{sample, Conditioning, DitConfig, DitModel, ForwardCounts};
use omnixfer::invariants::{run_suite, Fault, SuiteOptions, SuiteReport};
use omnixfer::latents::{
    build_reference_latent, build_target_latent, build_unconditioned_target_latent, encode_array, EncoderFactors,
    LatentBlock, StubEncoder, TaskCategory, TaskKind, TaskSpec,
};
use omnixfer::rope::task_bias;
use omnixfer::tma::{compose_tasks, template_tokens, ComposeOptions, ProviderInputs, TaskInput, Tma, TmaConfig};
use omnixfer::numerics::seeded_normal;
use omnixfer::{Array, DType, Rng, Scalar};
use serde::Serialize;
use serde_json::json;

use crate::config::{ClipExtent, ConfigError, RunConfig, TmaSection};
use crate::error::CliError;
use crate::fixtures::{self, load_inputs, sha256_hex, FixtureRecord, RunInputs};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMING_FILE: &str = "timing.json";
pub const OUTPUT_FILE: &str = "output.oxl";

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_timing(dir: &Path, command: &str, wall_ms: serde_json::Value) -> Result<(), CliError> {
    write_json(
        &dir.join(TIMING_FILE),
        &json!({ "command": command, "wall_ms": wall_ms, "machine": MachineFingerprint::current() }),
    )
}

fn ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

fn hex64(v: u64) -> String {
    format!("{v:016x}")
}

#[derive(Debug, Clone, Serialize)]
pub struct TaskRecord {
    pub task: TaskKind,
    pub category: TaskCategory,
    pub mask_flag: f64,
    /// `(Δ_T, Δ_W, Δ_H)` added to reference token positions.
    pub bias: [i64; 3],
    pub reference_grid: [usize; 3],
    pub reference_tokens: usize,
    pub context_tokens: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct TargetRecord {
    pub grid: [usize; 3],
    pub tokens: usize,
    pub channels: usize,
    /// False for text-to-video targets (no preserved first frame).
    pub first_frame_conditioned: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CacheRecord {
    pub layers: usize,
    pub tokens: usize,
    pub kv_tokens_per_layer: Vec<usize>,
    pub context_tokens: usize,
    pub fingerprint: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputRecord {
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub sha256: String,
    pub max_abs: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub precision: DType,
    pub steps: usize,
    pub ref_cross_attention: bool,
    pub model: DitConfig,
    pub model_id: String,
    pub tma: TmaConfig,
    pub encoder: EncoderFactors,
    pub clip: ClipExtent,
    pub inputs: std::collections::BTreeMap<String, String>,
    pub tasks: Vec<TaskRecord>,
    pub target: TargetRecord,
    pub cache: CacheRecord,
    pub forward_passes: ForwardCounts,
    /// Compose only: max |difference| after sampling again with the task order reversed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub order_swap_max_abs_diff: Option<f64>,
    pub output: OutputRecord,
}

fn tma_config(section: &TmaSection, model: &DitConfig) -> TmaConfig {
    TmaConfig {
        query_tokens: section.query_tokens,
        provider_dim: section.provider_dim,
        input_dim: model.latent_channels,
        seed: model.seed,
        allow_multiple_appearance: section.allow_multiple_appearance,
    }
}

fn tokens_of<T: Scalar>(latent: &Array<T>) -> Result<Array<T>, CliError> {
    let s = latent.shape();
    Ok(latent.reshape([s[0] * s[1] * s[2], s[3]])?)
}

/// Shared state of demo and compose: encoded inputs, model, TMA and the target latent.
struct Stage<T: Scalar> {
    model: DitModel<T>,
    tma: Tma<T>,
    target: LatentBlock<T>,
    z_init: Array<T>,
    first_frame: Option<Array<T>>,
    references: Vec<(TaskSpec, Array<T>, LatentBlock<T>)>,
    prompt: Array<T>,
    sources: std::collections::BTreeMap<String, String>,
}

impl<T: Scalar> Stage<T> {
    fn new(cfg: &RunConfig, kinds: &[TaskKind]) -> Result<Self, CliError> {
        let RunInputs { first_frame, prompt, references, sources } = load_inputs::<T>(cfg, kinds)?;
        let n = cfg.model.latent_channels;
        let factors = EncoderFactors::default();
        let encoder = StubEncoder::<T>::new(cfg.model.seed, n, factors)?;
        let model = DitModel::<T>::new(cfg.model.clone())?;
        let tma = Tma::<T>::seeded(tma_config(&cfg.tma, &cfg.model), cfg.model.model_dim)?;
        let grid = [
            cfg.clip.frames.div_ceil(factors.temporal),
            cfg.clip.height.div_ceil(factors.spatial),
            cfg.clip.width.div_ceil(factors.spatial),
        ];
        let z_init: Array<T> = seeded_normal([grid[0], grid[1], grid[2], n], &mut Rng::for_label(cfg.seed, "run.noise"));
        let conditioned = kinds.iter().any(|k| k.category().is_image_conditioned());
        let (target, first_frame) = if conditioned {
            let cond = encoder.encode(&first_frame)?;
            if cond.shape()[1..3] != grid[1..3] {
                return Err(CliError::Input(format!(
                    "first frame encodes to {:?} but the clip extent gives a {}x{} target",
                    &cond.shape()[1..3],
                    grid[1],
                    grid[2]
                )));
            }
            (build_target_latent(&cond, &z_init)?, Some(cond))
        } else {
            (build_unconditioned_target_latent(&z_init)?, None)
        };
        let references = kinds
            .iter()
            .map(|&k| {
                let spec = TaskSpec::new(k);
                let r = encoder.encode(&references[&k])?;
                let l = build_reference_latent(&r, &spec)?;
                Ok((spec, r, l))
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        Ok(Self { model, tma, target, z_init, first_frame, references, prompt, sources })
    }

    fn features(&self, i: usize) -> Result<Array<T>, CliError> {
        let (spec, r, _) = &self.references[i];
        let n = self.model.config().latent_channels;
        let inputs = ProviderInputs {
            first_frame: match &self.first_frame {
                Some(c) => tokens_of(c)?,
                None => Array::zeros([0, n]),
            },
            reference: tokens_of(r)?,
            template: template_tokens(self.tma.config.seed, spec.kind, n),
            prompt: self.prompt.clone(),
        };
        Ok(self.tma.features(spec, &inputs)?)
    }

    fn task_record(&self, i: usize, context_tokens: usize) -> TaskRecord {
        let (spec, _, l) = &self.references[i];
        let (f, _, w) = self.target.grid();
        TaskRecord {
            task: spec.kind,
            category: spec.category,
            mask_flag: spec.mask_flag,
            bias: task_bias(spec, f, w).triple(),
            reference_grid: [l.frames(), l.height(), l.width()],
            reference_tokens: l.tokens(),
            context_tokens,
        }
    }

    fn manifest(
        &self,
        command: &str,
        cfg: &RunConfig,
        tasks: Vec<TaskRecord>,
        cache: CacheRecord,
        output: OutputRecord,
    ) -> RunManifest {
        let (f, h, w) = self.target.grid();
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.seed,
            precision: T::DTYPE,
            steps: cfg.steps,
            ref_cross_attention: cfg.model.ref_cross_attention,
            model: cfg.model.clone(),
            model_id: hex64(self.model.id()),
            tma: self.tma.config.clone(),
            encoder: EncoderFactors::default(),
            clip: cfg.clip,
            inputs: self.sources.clone(),
            tasks,
            target: TargetRecord {
                grid: [f, h, w],
                tokens: self.target.tokens(),
                channels: self.target.channels(),
                first_frame_conditioned: self.first_frame.is_some(),
            },
            cache,
            forward_passes: self.model.counters().snapshot(),
            order_swap_max_abs_diff: None,
            output,
        }
    }
}

fn write_output<T: Scalar>(dir: &Path, z: &Array<T>) -> Result<OutputRecord, CliError> {
    let bytes = encode_array(z)?;
    fs::write(dir.join(OUTPUT_FILE), &bytes)?;
    Ok(OutputRecord {
        file: OUTPUT_FILE.to_string(),
        shape: z.shape().to_vec(),
        dtype: T::DTYPE,
        sha256: sha256_hex(&bytes),
        max_abs: z.max_abs(),
    })
}

fn cache_record<T: Scalar>(cache: &omnixfer::attention::RefCache<T>, context_tokens: usize) -> CacheRecord {
    CacheRecord {
        layers: cache.num_layers(),
        tokens: cache.tokens(),
        kv_tokens_per_layer: cache.layers.iter().map(|l| l.kv.tokens()).collect(),
        context_tokens,
        fingerprint: hex64(cache.fingerprint.digest),
    }
}

/// One task: a single reference pass at t = 0, then `steps` target passes.
pub fn demo(cfg: &RunConfig) -> Result<RunManifest, CliError> {
    match cfg.precision {
        DType::F32 => demo_typed::<f32>(cfg),
        DType::F64 => demo_typed::<f64>(cfg),
    }
}

fn single_task(cfg: &RunConfig) -> Result<TaskKind, CliError> {
    match cfg.tasks.as_slice() {
        [k] => Ok(*k),
        [] => Err(ConfigError(vec!["demo needs a task (\"task\" in the file or --task)".into()]).into()),
        _ => Err(ConfigError(vec!["demo runs one task; use `compose` for several".into()]).into()),
    }
}

fn demo_typed<T: Scalar>(cfg: &RunConfig) -> Result<RunManifest, CliError> {
    let kind = single_task(cfg)?;
    let start = Instant::now();
    let stage = Stage::<T>::new(cfg, &[kind])?;
    let features = stage.features(0)?;
    let context = stage.model.context_kv(&features)?;
    let (spec, _, l_ref) = &stage.references[0];
    let prep_ms = ms(start);

    let t0 = Instant::now();
    let cache = stage.model.ref_branch_forward(l_ref, spec, stage.target.grid(), Some(&context))?;
    let ref_ms = ms(t0);
    let t1 = Instant::now();
    let cond = Conditioning { cache: &cache, context: Some(&context) };
    let z = sample(&stage.model, &stage.target, cond, cfg.steps, &stage.z_init)?;
    let sample_ms = ms(t1);

    fs::create_dir_all(&cfg.out)?;
    let output = write_output(&cfg.out, &z)?;
    let manifest = stage.manifest(
        "demo",
        cfg,
        vec![stage.task_record(0, features.rows())],
        cache_record(&cache, context.tokens()),
        output,
    );
    write_json(&cfg.out.join(MANIFEST_FILE), &manifest)?;
    write_timing(
        &cfg.out,
        "demo",
        json!({ "prepare": prep_ms, "reference_pass": ref_ms, "sampling": sample_ms, "total": ms(start) }),
    )?;
    Ok(manifest)
}

/// Several tasks over one concatenated reference cache.
pub fn compose(cfg: &RunConfig) -> Result<RunManifest, CliError> {
    match cfg.precision {
        DType::F32 => compose_typed::<f32>(cfg),
        DType::F64 => compose_typed::<f64>(cfg),
    }
}

fn compose_typed<T: Scalar>(cfg: &RunConfig) -> Result<RunManifest, CliError> {
    if cfg.tasks.len() < 2 {
        return Err(ConfigError(vec![format!(
            "compose needs at least two tasks, got {}; use `demo` for a single task",
            cfg.tasks.len()
        )])
        .into());
    }
    let start = Instant::now();
    let stage = Stage::<T>::new(cfg, &cfg.tasks)?;
    let features = (0..cfg.tasks.len()).map(|i| stage.features(i)).collect::<Result<Vec<_>, _>>()?;
    let parts: Vec<TaskInput<'_, T>> = stage
        .references
        .iter()
        .zip(&features)
        .map(|((spec, _, l), f)| TaskInput { task: *spec, reference: l, features: f })
        .collect();
    let opts = ComposeOptions { allow_multiple_appearance: cfg.tma.allow_multiple_appearance };
    let grid = stage.target.grid();
    let run = |parts: &[TaskInput<'_, T>]| -> Result<_, CliError> {
        let c = compose_tasks(&stage.model, parts, grid, opts)?;
        let cond = Conditioning { cache: &c.cache, context: Some(&c.context) };
        let z = sample(&stage.model, &stage.target, cond, cfg.steps, &stage.z_init)?;
        Ok((c, z))
    };
    let (composition, z) = run(&parts)?;
    let counts = stage.model.counters().snapshot();
    let run_ms = ms(start);

    let t1 = Instant::now();
    let reversed: Vec<_> = parts.iter().rev().copied().collect();
    let (_, z_rev) = run(&reversed)?;
    let swap_ms = ms(t1);

    fs::create_dir_all(&cfg.out)?;
    let output = write_output(&cfg.out, &z)?;
    let tasks = features.iter().enumerate().map(|(i, f)| stage.task_record(i, f.rows())).collect();
    let mut manifest = stage.manifest(
        "compose",
        cfg,
        tasks,
        cache_record(&composition.cache, composition.context.tokens()),
        output,
    );
    manifest.forward_passes = counts;
    manifest.order_swap_max_abs_diff = Some(z.max_abs_diff(&z_rev)?);
    write_json(&cfg.out.join(MANIFEST_FILE), &manifest)?;
    write_timing(&cfg.out, "compose", json!({ "run": run_ms, "order_swap_run": swap_ms, "total": ms(start) }))?;
    Ok(manifest)
}

pub const VERIFY_FILE: &str = "verify.json";

/// Runs the invariant suite; any failed check is an [`CliError::Invariant`].
pub fn verify(cfg: &RunConfig, fault: Option<Fault>) -> Result<SuiteReport, CliError> {
    let opts = SuiteOptions {
        seed: cfg.seed,
        fault,
        decoupling_instances: cfg.verify.decoupling_instances,
        causality_perturbations: cfg.verify.causality_perturbations,
        rope_draws: cfg.verify.rope_draws,
        cache_steps: cfg.verify.cache_steps.clone(),
        model: cfg.model.clone(),
    };
    let start = Instant::now();
    let report = run_suite(&opts);
    fs::create_dir_all(&cfg.out)?;
    write_json(&cfg.out.join(VERIFY_FILE), &report)?;
    write_timing(&cfg.out, "verify", json!({ "total": ms(start) }))?;
    for r in &report.results {
        println!(
            "{} {:<26} metric={:.3e} threshold={:.3e}  {}",
            if r.outcome.pass { "PASS" } else { "FAIL" },
            r.id,
            r.outcome.metric,
            r.outcome.threshold,
            r.outcome.detail
        );
    }
    if !report.passed {
        let failed: Vec<_> = report.failures().map(|r| r.id.as_str()).collect();
        return Err(CliError::Invariant(failed.join(", ")));
    }
    Ok(report)
}

pub const BENCH_MANIFEST_FILE: &str = "bench_manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct BenchEntry {
    pub steps: usize,
    pub cost: CostModel,
    pub flops: Flops,
    pub attention_ratio: f64,
    pub total_ratio: f64,
    pub equivalence_max_abs_diff: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchManifest {
    pub command: String,
    pub version: String,
    pub config: BenchConfig,
    pub entries: Vec<BenchEntry>,
}

/// Joint vs. decoupled sampling over a step sweep. Timings go to
/// `bench_report.json`, `bench_sweep.csv` and the timing sidecar.
pub fn bench(cfg: &RunConfig, steps_override: Option<usize>) -> Result<BenchManifest, CliError> {
    if cfg.precision != DType::F32 {
        return Err(ConfigError(vec!["bench times 32-bit runs only; drop --precision f64".into()]).into());
    }
    let b = &cfg.bench;
    let steps = steps_override.map_or_else(|| b.sweep_steps.clone(), |s| vec![s]);
    let base = BenchConfig {
        model: cfg.model.clone(),
        target_grid: b.target_grid,
        reference_grid: b.reference_grid,
        steps: steps[0],
        repeats: b.repeats,
        warmup: b.warmup,
        seed: cfg.seed,
        task: cfg.tasks.first().copied().unwrap_or(TaskKind::Motion),
        tolerance: b.tolerance,
    };
    let start = Instant::now();
    let reports = sweep(&base, &steps)?;
    fs::create_dir_all(&cfg.out)?;
    emit_report(&reports, &cfg.out)?;
    let entries = reports
        .iter()
        .map(|r| BenchEntry {
            steps: r.cost.steps,
            cost: r.cost,
            flops: r.flops,
            attention_ratio: r.flops.attention_ratio(),
            total_ratio: r.flops.total_ratio(),
            equivalence_max_abs_diff: r.equivalence_max_abs_diff,
        })
        .collect();
    let manifest = BenchManifest {
        command: "bench".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: base,
        entries,
    };
    write_json(&cfg.out.join(BENCH_MANIFEST_FILE), &manifest)?;
    let rows: Vec<_> = reports
        .iter()
        .map(|r| json!({ "steps": r.cost.steps, "joint_ms": r.joint.median_ms, "decoupled_ms": r.decoupled.median_ms,
            "measured_reduction": r.measured_reduction }))
        .collect();
    write_timing(&cfg.out, "bench", json!({ "sweep": rows, "total": ms(start) }))?;
    for r in &reports {
        println!(
            "S={:<3} joint {:>9.2} ms  decoupled {:>9.2} ms  measured reduction {:>5.1}%  analytic attention ratio {:.3}",
            r.cost.steps,
            r.joint.median_ms,
            r.decoupled.median_ms,
            100.0 * r.measured_reduction,
            r.flops.attention_ratio()
        );
    }
    Ok(manifest)
}

pub const FIXTURES_MANIFEST_FILE: &str = "fixtures.json";
pub const FIXTURES_CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, Serialize)]
pub struct FixturesManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub clip: ClipExtent,
    pub latent_channels: usize,
    pub files: Vec<FixtureRecord>,
}

/// Writes seeded clips for the configured tasks (all five if none) and a
/// `config.json` that points at them.
pub fn gen_fixtures(cfg: &RunConfig) -> Result<FixturesManifest, CliError> {
    let kinds = if cfg.tasks.is_empty() { TaskKind::ALL.to_vec() } else { cfg.tasks.clone() };
    let start = Instant::now();
    let files = fixtures::write_fixtures(cfg, &kinds, &cfg.out)?;
    let references: std::collections::BTreeMap<_, _> =
        kinds.iter().map(|&k| (k.name(), fixtures::reference_file(k))).collect();
    let mut run_config = json!({
        "seed": cfg.seed,
        "steps": cfg.steps,
        "clip": cfg.clip,
        "model": cfg.model,
        "fixtures": {
            "first_frame": fixtures::FIRST_FRAME_FILE,
            "prompt": fixtures::PROMPT_FILE,
            "references": references,
        },
    });
    run_config["tasks"] = json!(kinds);
    write_json(&cfg.out.join(FIXTURES_CONFIG_FILE), &run_config)?;
    let manifest = FixturesManifest {
        command: "gen-fixtures".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        clip: cfg.clip,
        latent_channels: cfg.model.latent_channels,
        files,
    };
    write_json(&cfg.out.join(FIXTURES_MANIFEST_FILE), &manifest)?;
    write_timing(&cfg.out, "gen-fixtures", json!({ "total": ms(start) }))?;
    Ok(manifest)
}
