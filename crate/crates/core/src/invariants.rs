//! Property checks shared by the `verify` command and the acceptance tests.
//!
//! Every check has a stable id and returns its worst observed value next to
//! the threshold it was held to. Nothing here reads the clock, so a report
//! is a pure function of its options.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{joint_baseline, project_branch, ref_self_attn, tgt_causal_attn, Mask, ProjectionSet};
use crate::bench::CostModel;
use crate::dit::{sample, sample_recompute, Conditioning, DitConfig, DitModel, ForwardCounts};
use crate::error::Result;
use crate::gradcheck::{check_path, random_problem, AttnPath, DEFAULT_STEP, DEFAULT_TOLERANCE};
use crate::latents::{
    build_reference_latent, build_target_latent, build_unconditioned_target_latent, EncoderFactors, LatentBlock,
    StubEncoder, TaskCategory, TaskKind, TaskSpec,
};
use crate::numerics::{concat, seeded_normal, Array, Rng};
use crate::rope::{apply_rope, position_grid, task_bias, Coord, PositionBias, RopeConfig};
use crate::tma::{compose_tasks, template_tokens, ComposeOptions, ProviderInputs, TaskInput, Tma, TmaConfig};

/// Deliberate defects used to show a check can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// The joint oracle stacks tokens `[ref; tgt]` while its mask still assumes `[tgt; ref]`.
    SwapKvOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteOptions {
    pub seed: u64,
    pub fault: Option<Fault>,
    pub decoupling_instances: usize,
    pub causality_perturbations: usize,
    pub rope_draws: usize,
    pub cache_steps: Vec<usize>,
    pub model: DitConfig,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            fault: None,
            decoupling_instances: 100,
            causality_perturbations: 50,
            rope_draws: 1000,
            cache_steps: vec![1, 5, 20],
            model: DitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub pass: bool,
    /// Worst value observed (error, or count of violations).
    pub metric: f64,
    pub threshold: f64,
    pub detail: String,
}

impl Outcome {
    fn below(metric: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            pass: metric < threshold,
            metric,
            threshold,
            detail: detail.into(),
        }
    }

    fn violations(count: usize, detail: impl Into<String>) -> Self {
        Self {
            pass: count == 0,
            metric: count as f64,
            threshold: 0.0,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantResult {
    pub id: String,
    #[serde(flatten)]
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub options: SuiteOptions,
    pub results: Vec<InvariantResult>,
    pub passed: bool,
}

impl SuiteReport {
    pub fn failures(&self) -> impl Iterator<Item = &InvariantResult> {
        self.results.iter().filter(|r| !r.outcome.pass)
    }
}

type Check = fn(&SuiteOptions) -> Result<Outcome>;

/// Stable ids in report order.
pub const INVARIANTS: [(&str, Check); 9] = [
    ("decoupling-equivalence", |o| decoupling_equivalence(o.seed, o.decoupling_instances, o.fault)),
    ("causality", |o| causality(o.seed, o.causality_perturbations)),
    ("rope-shift-invariance", |o| rope_shift_invariance(o.seed, o.rope_draws)),
    ("task-bias-placement", |_| task_bias_placement()),
    ("cache-consistency", |o| cache_consistency(o.seed, &o.model, &o.cache_steps)),
    ("gradient-check", |o| gradient_check(o.seed)),
    ("latent-construction", |o| latent_construction(o.seed, o.model.latent_channels)),
    ("composition-permutation", |o| composition_permutation(o.seed, &o.model)),
    ("complexity-model", |_| complexity_model()),
];

pub fn ids() -> impl Iterator<Item = &'static str> {
    INVARIANTS.iter().map(|(id, _)| *id)
}

/// Runs every check, concurrently, reporting in [`INVARIANTS`] order.
pub fn run_suite(options: &SuiteOptions) -> SuiteReport {
    let results: Vec<InvariantResult> = INVARIANTS
        .par_iter()
        .map(|(id, check)| InvariantResult {
            id: id.to_string(),
            outcome: check(options).unwrap_or_else(|e| Outcome {
                pass: false,
                metric: f64::NAN,
                threshold: 0.0,
                detail: format!("error: {e}"),
            }),
        })
        .collect();
    SuiteReport {
        passed: results.iter().all(|r| r.outcome.pass),
        options: options.clone(),
        results,
    }
}

fn random_coords(rng: &mut Rng, n: usize, bias: [i64; 3]) -> Vec<Coord> {
    (0..n)
        .map(|_| [rng.int_range(0, 7) + bias[0], rng.int_range(0, 7) + bias[1], rng.int_range(0, 7) + bias[2]])
        .collect()
}

/// Split branches vs. the masked joint oracle on random instances, 64-bit.
pub fn decoupling_equivalence(seed: u64, instances: usize, fault: Option<Fault>) -> Result<Outcome> {
    let mut rng = Rng::for_label(seed, "invariants.decoupling");
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let n_ref = rng.int_range(1, 64) as usize;
        let n_tgt = rng.int_range(1, 64) as usize;
        let heads = [1, 2, 4][rng.index(3)];
        let d = [4, 8, 16][rng.index(3)];
        let dim = heads * d;
        let proj = ProjectionSet::<f64>::seeded(seed ^ i as u64, "invariants.decoupling", dim, heads)?;
        let rope = RopeConfig::new(d)?;
        let x_tgt = seeded_normal::<f64>([n_tgt, dim], &mut rng);
        let x_ref = seeded_normal::<f64>([n_ref, dim], &mut rng);
        let c_tgt = random_coords(&mut rng, n_tgt, [0; 3]);
        let c_ref = random_coords(&mut rng, n_ref, [0, 8, 0]);

        let ref_out = ref_self_attn(&x_ref, &c_ref, &proj, &rope)?;
        let (_, kv) = project_branch(&x_ref, &c_ref, &proj, &rope)?;
        let tgt_out = tgt_causal_attn(&x_tgt, &c_tgt, &kv, &proj, &rope)?;

        let (x_all, c_all) = match fault {
            None => (concat(0, &[&x_tgt, &x_ref])?, [c_tgt.as_slice(), &c_ref].concat()),
            Some(Fault::SwapKvOrder) => (concat(0, &[&x_ref, &x_tgt])?, [c_ref.as_slice(), &c_tgt].concat()),
        };
        let joint = joint_baseline(&x_all, &c_all, &Mask::block_causal(n_tgt, n_ref), &proj, &rope)?;
        let split = concat(0, &[&tgt_out, &ref_out])?;
        let rel = split.max_abs_diff(&joint)? / joint.max_abs().max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
    }
    Ok(Outcome::below(
        worst,
        1e-8,
        format!("{instances} instances, worst relative deviation {worst:.3e}"),
    ))
}

/// Perturbing target tokens leaves reference outputs and the reference cache untouched.
pub fn causality(seed: u64, perturbations: usize) -> Result<Outcome> {
    let mut rng = Rng::for_label(seed, "invariants.causality");
    let (n_tgt, n_ref, heads, d) = (12, 9, 2, 8);
    let dim = heads * d;
    let proj = ProjectionSet::<f64>::seeded(seed, "invariants.causality", dim, heads)?;
    let rope = RopeConfig::new(d)?;
    let x_tgt = seeded_normal::<f64>([n_tgt, dim], &mut rng);
    let x_ref = seeded_normal::<f64>([n_ref, dim], &mut rng);
    let coords: Vec<Coord> = [random_coords(&mut rng, n_tgt, [0; 3]), random_coords(&mut rng, n_ref, [0, 8, 0])].concat();
    let mask = Mask::block_causal(n_tgt, n_ref);
    let base = joint_baseline(&concat(0, &[&x_tgt, &x_ref])?, &coords, &mask, &proj, &rope)?.slice_axis(0, n_tgt..n_tgt + n_ref)?;

    let cfg = DitConfig {
        layers: 2,
        model_dim: 16,
        heads: 2,
        ffn_dim: 32,
        latent_channels: 4,
        time_embed_dim: 16,
        seed,
        ..DitConfig::default()
    };
    let model = DitModel::<f64>::new(cfg)?;
    let task = TaskSpec::new(TaskKind::Motion);
    let l_ref = build_reference_latent(&seeded_normal([2, 2, 3, 4], &mut rng), &task)?;
    let cond = seeded_normal::<f64>([1, 2, 3, 4], &mut rng);
    let z = seeded_normal::<f64>([2, 2, 3, 4], &mut rng);
    let target = build_target_latent(&cond, &z)?;
    let cache = model.ref_branch_forward(&l_ref, &task, target.grid(), None)?;
    let bytes = cache.to_bytes();

    let mut violations = 0;
    for _ in 0..perturbations {
        let bump = seeded_normal::<f64>([n_tgt, dim], &mut rng);
        let moved = x_tgt.add(&bump)?;
        let out = joint_baseline(&concat(0, &[&moved, &x_ref])?, &coords, &mask, &proj, &rope)?.slice_axis(0, n_tgt..n_tgt + n_ref)?;
        if out != base {
            violations += 1;
        }
        let z2 = z.add(&seeded_normal([2, 2, 3, 4], &mut rng))?;
        let tgt2 = target.with_noise_part(&z2)?;
        sample(&model, &tgt2, Conditioning { cache: &cache, context: None }, 2, &z2)?;
        if cache.to_bytes() != bytes || model.ref_branch_forward(&l_ref, &task, tgt2.grid(), None)?.to_bytes() != bytes {
            violations += 1;
        }
    }
    Ok(Outcome::violations(
        violations,
        format!("{perturbations} target perturbations, {violations} changed reference state"),
    ))
}

fn logit(q: &Array<f64>, k: &Array<f64>, pq: Coord, pk: Coord, rope: &RopeConfig) -> Result<f64> {
    let a = apply_rope(q, &[pq], rope)?;
    let b = apply_rope(k, &[pk], rope)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum())
}

/// Logits depend only on coordinate differences, on every axis.
pub fn rope_shift_invariance(seed: u64, draws: usize) -> Result<Outcome> {
    let mut rng = Rng::for_label(seed, "invariants.rope");
    let rope = RopeConfig::new(16)?;
    let mut worst: f64 = 0.0;
    for axis in 0..3 {
        for _ in 0..draws {
            let q = seeded_normal::<f64>([1, 16], &mut rng);
            let k = seeded_normal::<f64>([1, 16], &mut rng);
            let pq: Coord = [rng.int_range(-50, 50), rng.int_range(-50, 50), rng.int_range(-50, 50)];
            let pk: Coord = [rng.int_range(-50, 50), rng.int_range(-50, 50), rng.int_range(-50, 50)];
            let s = rng.int_range(-100, 100);
            let (mut sq, mut sk) = (pq, pk);
            sq[axis] += s;
            sk[axis] += s;
            let diff = (logit(&q, &k, pq, pk, &rope)? - logit(&q, &k, sq, sk, &rope)?).abs();
            worst = worst.max(diff);
        }
    }
    Ok(Outcome::below(worst, 1e-8, format!("3 axes x {draws} draws, worst |logit diff| {worst:.3e}")))
}

/// Biased reference grids equal explicitly placed coordinates, bit for bit.
pub fn task_bias_placement() -> Result<Outcome> {
    let rope = RopeConfig::new(8)?;
    let (f_tgt, w_tgt) = (3usize, 5usize);
    let (rf, rh, rw) = (2usize, 3usize, 4usize);
    let keys = Array::<f64>::from_fn([rf * rh * rw, 8], |i| (i as f64 * 0.37).sin());
    let mut violations = 0;
    for kind in TaskKind::ALL {
        let task = TaskSpec::new(kind);
        let bias = task_bias(&task, f_tgt, w_tgt);
        let expected_bias = match kind.category() {
            TaskCategory::Temporal => PositionBias { temporal: 0, width: w_tgt as i64, height: 0 },
            TaskCategory::Appearance => PositionBias { temporal: f_tgt as i64, width: 0, height: 0 },
        };
        violations += usize::from(bias != expected_bias);
        let mut explicit = Vec::new();
        for t in 0..rf as i64 {
            for h in 0..rh as i64 {
                for w in 0..rw as i64 {
                    explicit.push(match kind.category() {
                        TaskCategory::Temporal => [t, h, w + w_tgt as i64],
                        TaskCategory::Appearance => [t + f_tgt as i64, h, w],
                    });
                }
            }
        }
        let grid = position_grid(rf, rh, rw, bias);
        violations += usize::from(grid != explicit);
        let a = apply_rope(&keys, &grid, &rope)?;
        let b = apply_rope(&keys, &explicit, &rope)?;
        violations += usize::from(a.to_le_bytes() != b.to_le_bytes());
    }
    Ok(Outcome::violations(violations, format!("5 task kinds, {violations} placement mismatches")))
}

/// Cached sampling equals per-step recomputation bit for bit, with 1 reference and S target passes.
pub fn cache_consistency(seed: u64, cfg: &DitConfig, steps: &[usize]) -> Result<Outcome> {
    let model = DitModel::<f32>::new(DitConfig { seed, ..cfg.clone() })?;
    let n = cfg.latent_channels;
    let mut rng = Rng::for_label(seed, "invariants.cache");
    let task = TaskSpec::new(TaskKind::Camera);
    let l_ref = build_reference_latent(&seeded_normal([2, 2, 4, n], &mut rng), &task)?;
    let z = seeded_normal::<f32>([2, 2, 4, n], &mut rng);
    let target = build_target_latent(&seeded_normal([1, 2, 4, n], &mut rng), &z)?;
    let mut violations = Vec::new();
    for &s in steps {
        model.counters().reset();
        let cache = model.ref_branch_forward(&l_ref, &task, target.grid(), None)?;
        let cached = sample(&model, &target, Conditioning { cache: &cache, context: None }, s, &z)?;
        let counts = model.counters().snapshot();
        if counts != (ForwardCounts { reference: 1, target: s, joint: 0 }) {
            violations.push(format!("S={s}: counters {counts:?}"));
        }
        let recomputed = sample_recompute(&model, &target, &l_ref, &task, None, s, &z)?;
        if cached.to_le_bytes() != recomputed.to_le_bytes() {
            violations.push(format!("S={s}: outputs differ"));
        }
    }
    let detail = if violations.is_empty() {
        format!("S in {steps:?}: bit-identical, 1 reference pass and S target passes each")
    } else {
        violations.join("; ")
    };
    Ok(Outcome::violations(violations.len(), detail))
}

/// Analytic attention gradients vs. central differences at shapes up to 8 tokens, 2 heads, width 8.
pub fn gradient_check(seed: u64) -> Result<Outcome> {
    let shapes = [(3, 2, 2, 4), (4, 4, 2, 8), (6, 2, 1, 8), (1, 7, 2, 4)];
    let mut worst: f64 = 0.0;
    let mut failing = Vec::new();
    for (i, &(nt, nr, heads, d)) in shapes.iter().enumerate() {
        let p = random_problem(seed.wrapping_add(i as u64), nt, nr, heads, d, [0, 4, 0])?;
        for path in [AttnPath::Target, AttnPath::Reference] {
            for r in check_path(&p, path, DEFAULT_STEP, DEFAULT_TOLERANCE)? {
                worst = worst.max(r.max_rel_err);
                if !r.pass {
                    failing.push(r.parameter);
                }
            }
        }
    }
    let mut o = Outcome::below(worst, DEFAULT_TOLERANCE, format!("{} shapes, both paths, worst relative error {worst:.3e}", shapes.len()));
    if !failing.is_empty() {
        o.detail = format!("{}; failing: {}", o.detail, failing.join(", "));
    }
    Ok(o)
}

/// Channel layout, mask flags, noise-free reference and slice round trips for every task.
pub fn latent_construction(seed: u64, n: usize) -> Result<Outcome> {
    let enc = StubEncoder::<f32>::new(seed, n, EncoderFactors::default())?;
    let mut rng = Rng::for_label(seed, "invariants.latents");
    let mut problems = Vec::new();
    for kind in TaskKind::ALL {
        let task = TaskSpec::new(kind);
        let ref_clip = seeded_normal::<f32>([9, 32, 48, 3], &mut rng);
        let r = enc.encode(&ref_clip)?;
        let l_ref = build_reference_latent(&r, &task)?;
        let (f, h, w) = (r.shape()[0], r.shape()[1], r.shape()[2]);
        let z = seeded_normal::<f32>([f, h, w, n], &mut rng);
        let target = if kind.category().is_image_conditioned() {
            let first = enc.encode(&seeded_normal::<f32>([1, 32, 48, 3], &mut rng))?;
            build_target_latent(&first, &z)?
        } else {
            build_unconditioned_target_latent(&z)?
        };
        let mut check = |ok: bool, what: &str| {
            if !ok {
                problems.push(format!("{kind}: {what}"));
            }
        };
        check(l_ref.channels() == 2 * n + 4 && target.channels() == 2 * n + 4, "channel count");
        check(l_ref.mask()?.data().iter().all(|&v| v as f64 == kind.mask_flag()), "reference mask flag");
        check(l_ref.noise_part()? == l_ref.condition()?, "reference noise part is not the clean latent");
        check(l_ref.condition()? == r, "reference condition part");
        let frame = h * w * 4;
        let target_mask_ok = target.mask()?.data().iter().enumerate().all(|(i, &v)| {
            let preserved = kind.category().is_image_conditioned() && i < frame;
            v == if preserved { 1.0 } else { 0.0 }
        });
        check(target_mask_ok, "target mask");
        for l in [&l_ref, &target] {
            let rebuilt = concat(3, &[&l.condition()?, &l.mask()?, &l.noise_part()?])?;
            check(&rebuilt == l.data(), "slice round trip");
        }
        check(target.with_noise_part(&z)?.noise_part()? == z, "noise replacement");
    }
    Ok(Outcome::violations(problems.len(), if problems.is_empty() { "5 task kinds well formed".into() } else { problems.join("; ") }))
}

fn composition_inputs(seed: u64, n: usize, kind: TaskKind, rng: &mut Rng) -> ProviderInputs<f32> {
    ProviderInputs {
        first_frame: seeded_normal([4, n], rng),
        reference: seeded_normal([8, n], rng),
        template: template_tokens(seed, kind, n),
        prompt: Array::zeros([1, n]),
    }
}

/// Two-task compositions: sizes add up and swapping task order leaves the sample unchanged (32-bit).
pub fn composition_permutation(seed: u64, cfg: &DitConfig) -> Result<Outcome> {
    let model = DitModel::<f32>::new(DitConfig { seed, ..cfg.clone() })?;
    let n = cfg.latent_channels;
    let tma = Tma::<f32>::seeded(TmaConfig { seed, input_dim: n, ..TmaConfig::default() }, cfg.model_dim)?;
    let mut rng = Rng::for_label(seed, "invariants.compose");
    let grid = (2, 2, 4);
    let z = seeded_normal::<f32>([2, 2, 4, n], &mut rng);
    let target = build_target_latent(&seeded_normal([1, 2, 4, n], &mut rng), &z)?;
    let mut worst: f64 = 0.0;
    let mut size_errors = 0;
    for pair in [[TaskKind::Camera, TaskKind::Id], [TaskKind::Motion, TaskKind::Style], [TaskKind::Effect, TaskKind::Camera]] {
        let refs: Vec<LatentBlock<f32>> = pair
            .iter()
            .map(|&k| build_reference_latent(&seeded_normal([2, 2, 4, n], &mut rng), &TaskSpec::new(k)))
            .collect::<Result<_>>()?;
        let feats: Vec<Array<f32>> = pair
            .iter()
            .map(|&k| tma.features(&TaskSpec::new(k), &composition_inputs(seed, n, k, &mut rng)))
            .collect::<Result<_>>()?;
        let inputs: Vec<TaskInput<'_, f32>> = (0..2)
            .map(|i| TaskInput { task: TaskSpec::new(pair[i]), reference: &refs[i], features: &feats[i] })
            .collect();
        let ab = compose_tasks(&model, &inputs, grid, ComposeOptions::default())?;
        let ba = compose_tasks(&model, &[inputs[1], inputs[0]], grid, ComposeOptions::default())?;
        let want_tokens: usize = refs.iter().map(LatentBlock::tokens).sum();
        let want_ctx: usize = feats.iter().map(Array::rows).sum();
        for c in [&ab, &ba] {
            if c.cache.tokens() != want_tokens
                || c.cache.layers.iter().any(|l| l.kv.tokens() != want_tokens)
                || c.context.tokens() != want_ctx
            {
                size_errors += 1;
            }
        }
        let run = |c: &crate::tma::Composition<f32>| {
            sample(&model, &target, Conditioning { cache: &c.cache, context: Some(&c.context) }, 4, &z)
        };
        worst = worst.max(run(&ab)?.max_abs_diff(&run(&ba)?)?);
    }
    let mut o = Outcome::below(worst, 1e-6, format!("3 task pairs, worst |order-swap diff| {worst:.3e}, {size_errors} size errors"));
    o.pass &= size_errors == 0;
    Ok(o)
}

/// Analytic decoupled/joint attention ratio: 0.75 at one step, 0.5 in the limit, decreasing in between.
pub fn complexity_model() -> Result<Outcome> {
    let cm = |steps| CostModel { n_ref: 64, n_tgt: 64, model_dim: 128, ffn_dim: 512, layers: 4, steps };
    let at_one = (cm(1).flops().attention_ratio() - 0.75).abs();
    let limit = (cm(1_000_000_000).flops().attention_ratio() - 0.5).abs();
    let monotone = (1..100).all(|s| cm(s + 1).flops().attention_ratio() < cm(s).flops().attention_ratio());
    let worst = at_one.max(limit);
    let mut o = Outcome::below(worst, 1e-9, format!("|ratio(S=1) - 0.75| = {at_one:.1e}, |ratio(S=1e9) - 0.5| = {limit:.1e}, monotone: {monotone}"));
    o.pass &= monotone;
    Ok(o)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_are_unique() {
        let mut v: Vec<_> = ids().collect();
        v.sort();
        v.dedup();
        assert_eq!(v.len(), INVARIANTS.len());
    }

    #[test]
    fn decoupling_passes_and_fault_is_caught() {
        assert!(decoupling_equivalence(1, 10, None).unwrap().pass);
        let faulty = decoupling_equivalence(1, 10, Some(Fault::SwapKvOrder)).unwrap();
        assert!(!faulty.pass, "{faulty:?}");
    }

    #[test]
    fn cheap_checks_pass() {
        assert!(task_bias_placement().unwrap().pass);
        assert!(complexity_model().unwrap().pass);
        assert!(rope_shift_invariance(2, 50).unwrap().pass);
        assert!(causality(3, 3).unwrap().pass);
        assert!(latent_construction(4, 4).unwrap().pass);
    }
}
