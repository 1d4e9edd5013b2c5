//! Task-adaptive conditioning of the target branch.
//!
//! Each task kind owns a bank of query tokens. A [`SemanticProvider`] reads
//! pooled input summaries through those queries; a three-layer connector
//! lifts the result to model width, and the per-layer cross-attention
//! projections turn it into external K/V for the target branch only.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::attention::RefCache;
use crate::dit::{ContextKv, DitModel};
use crate::error::{invalid, Result};
use crate::latents::{LatentBlock, TaskCategory, TaskKind, TaskSpec};
use crate::numerics::{concat, gelu, linear, seeded_normal, Array, Rng, Scalar};

/// Version of the provider contract: pooled summaries in, `[Q, provider_dim]` out.
pub const PROVIDER_CONTRACT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TmaConfig {
    pub query_tokens: usize,
    pub provider_dim: usize,
    /// Width of every pooled input summary.
    pub input_dim: usize,
    pub seed: u64,
    /// Permit more than one appearance task in a composition.
    pub allow_multiple_appearance: bool,
}

impl Default for TmaConfig {
    fn default() -> Self {
        Self {
            query_tokens: 64,
            provider_dim: 256,
            input_dim: 16,
            seed: 0,
            allow_multiple_appearance: false,
        }
    }
}

impl TmaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.query_tokens == 0 || self.provider_dim == 0 || self.input_dim == 0 {
            return Err(invalid("TmaConfig", "query_tokens, provider_dim and input_dim must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryBank<T> {
    pub kind: TaskKind,
    pub tokens: Array<T>,
}

impl<T: Scalar> QueryBank<T> {
    pub fn seeded(seed: u64, kind: TaskKind, query_tokens: usize, dim: usize) -> Self {
        let mut rng = Rng::for_label(seed, &format!("tma.bank.{kind}"));
        let std = 1.0 / (dim as f64).sqrt();
        Self {
            kind,
            tokens: seeded_normal::<f64>([query_tokens, dim], &mut rng).scale(std).cast(),
        }
    }

    pub fn query_tokens(&self) -> usize {
        self.tokens.rows()
    }
}

/// One bank per task kind, in [`TaskKind::ALL`] order.
#[derive(Debug, Clone)]
pub struct QueryBanks<T> {
    banks: Vec<QueryBank<T>>,
}

impl<T: Scalar> QueryBanks<T> {
    pub fn seeded(cfg: &TmaConfig) -> Self {
        Self {
            banks: TaskKind::ALL
                .iter()
                .map(|&k| QueryBank::seeded(cfg.seed, k, cfg.query_tokens, cfg.provider_dim))
                .collect(),
        }
    }

    pub fn select(&self, task: &TaskSpec) -> &QueryBank<T> {
        let kind = task.query_bank.0;
        self.banks
            .iter()
            .find(|b| b.kind == kind)
            .expect("a bank exists for every kind")
    }

    pub fn iter(&self) -> impl Iterator<Item = &QueryBank<T>> {
        self.banks.iter()
    }
}

/// Token sets the provider reads, each `[tokens, input_dim]`. Empty sets pool to zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct ProviderInputs<T> {
    pub first_frame: Array<T>,
    pub reference: Array<T>,
    pub template: Array<T>,
    pub prompt: Array<T>,
}

impl<T: Scalar> ProviderInputs<T> {
    /// Pooled summaries concatenated as `[1, 4 * input_dim]`:
    /// first frame, reference, template, prompt.
    pub fn pooled(&self, input_dim: usize) -> Result<Array<T>> {
        let parts = [
            ("first_frame", &self.first_frame),
            ("reference", &self.reference),
            ("template", &self.template),
            ("prompt", &self.prompt),
        ];
        let mut out = Vec::with_capacity(4 * input_dim);
        for (name, a) in parts {
            if a.ndim() != 2 || a.row_len() != input_dim {
                return Err(invalid(
                    "provider",
                    format!("{name} tokens {:?} must be [tokens, {input_dim}]", a.shape()),
                ));
            }
            out.extend(mean_rows(a));
        }
        Array::new([1, 4 * input_dim], out)
    }
}

fn mean_rows<T: Scalar>(a: &Array<T>) -> Vec<T> {
    let rows = a.rows();
    let mut acc = vec![0.0f64; a.row_len()];
    for i in 0..rows {
        for (s, &v) in acc.iter_mut().zip(a.row(i)) {
            *s += v.as_f64();
        }
    }
    let div = rows.max(1) as f64;
    acc.into_iter().map(|s| T::of(s / div)).collect()
}

/// Per-task constant template summary, `[1, input_dim]`.
pub fn template_tokens<T: Scalar>(seed: u64, kind: TaskKind, input_dim: usize) -> Array<T> {
    let mut rng = Rng::for_label(seed, &format!("tma.template.{kind}"));
    seeded_normal::<f64>([1, input_dim], &mut rng).cast()
}

/// Stand-in for a multimodal encoder read out through a query bank.
pub trait SemanticProvider<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;
    fn contract_version(&self) -> u32;
    fn output_dim(&self) -> usize;
    /// Must return `[bank.query_tokens(), output_dim()]`, deterministically.
    fn features(&self, inputs: &ProviderInputs<T>, bank: &QueryBank<T>) -> Result<Array<T>>;
}

/// Mean-pools the inputs, maps them linearly and adds the result to every query token.
#[derive(Debug, Clone)]
pub struct StubProvider<T> {
    input_dim: usize,
    pub map: Array<T>,
}

impl<T: Scalar> StubProvider<T> {
    pub fn seeded(cfg: &TmaConfig) -> Self {
        let rows = 4 * cfg.input_dim;
        let mut rng = Rng::for_label(cfg.seed, "tma.provider.map");
        Self {
            input_dim: cfg.input_dim,
            map: seeded_normal::<f64>([rows, cfg.provider_dim], &mut rng)
                .scale(1.0 / (rows as f64).sqrt())
                .cast(),
        }
    }
}

impl<T: Scalar> SemanticProvider<T> for StubProvider<T> {
    fn name(&self) -> &str {
        "stub-linear"
    }

    fn contract_version(&self) -> u32 {
        PROVIDER_CONTRACT_VERSION
    }

    fn output_dim(&self) -> usize {
        self.map.row_len()
    }

    fn features(&self, inputs: &ProviderInputs<T>, bank: &QueryBank<T>) -> Result<Array<T>> {
        if bank.tokens.row_len() != self.output_dim() {
            return Err(invalid(
                "stub_provider",
                format!("bank width {} but provider emits {}", bank.tokens.row_len(), self.output_dim()),
            ));
        }
        let summary = crate::numerics::matmul(&inputs.pooled(self.input_dim)?, &self.map)?;
        let p = self.output_dim();
        Ok(Array::from_fn(bank.tokens.shape().to_vec(), |i| {
            bank.tokens.data()[i] + summary.data()[i % p]
        }))
    }
}

/// Checks a provider against the contract on every bank.
pub fn validate_provider<T: Scalar>(
    provider: &dyn SemanticProvider<T>,
    banks: &QueryBanks<T>,
    inputs: &ProviderInputs<T>,
) -> Result<()> {
    if provider.contract_version() != PROVIDER_CONTRACT_VERSION {
        return Err(invalid(
            "validate_provider",
            format!(
                "{} speaks contract v{}, expected v{PROVIDER_CONTRACT_VERSION}",
                provider.name(),
                provider.contract_version()
            ),
        ));
    }
    for bank in banks.iter() {
        let a = provider.features(inputs, bank)?;
        let want = [bank.query_tokens(), provider.output_dim()];
        if a.shape() != want {
            return Err(invalid(
                "validate_provider",
                format!("{} returned {:?} for {}, expected {want:?}", provider.name(), a.shape(), bank.kind),
            ));
        }
        if !a.is_finite() {
            return Err(invalid("validate_provider", format!("{} returned non-finite features", provider.name())));
        }
        if provider.features(inputs, bank)? != a {
            return Err(invalid("validate_provider", format!("{} is not deterministic", provider.name())));
        }
    }
    Ok(())
}

/// Three affine layers with GELU between them: `provider_dim -> model_dim -> model_dim -> model_dim`.
#[derive(Debug, Clone)]
pub struct Connector<T> {
    pub layers: [(Array<T>, Array<T>); 3],
}

impl<T: Scalar> Connector<T> {
    pub fn seeded(seed: u64, provider_dim: usize, model_dim: usize) -> Self {
        let layer = |i: usize, fan_in: usize| {
            let mut rng = Rng::for_label(seed, &format!("tma.connector.{i}.weight"));
            let w = seeded_normal::<f64>([fan_in, model_dim], &mut rng).scale(1.0 / (fan_in as f64).sqrt());
            (w.cast(), Array::zeros([model_dim]))
        };
        Self {
            layers: [layer(0, provider_dim), layer(1, model_dim), layer(2, model_dim)],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[2].0.row_len()
    }

    /// `(name, shape)` of every parameter.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, (w, b))| {
                [
                    (format!("connector.{i}.weight"), w.shape().to_vec()),
                    (format!("connector.{i}.bias"), b.shape().to_vec()),
                ]
            })
            .collect()
    }

    pub fn forward(&self, features: &Array<T>) -> Result<Array<T>> {
        if features.ndim() != 2 || features.row_len() != self.input_dim() {
            return Err(invalid(
                "connector",
                format!("features {:?} must be [tokens, {}]", features.shape(), self.input_dim()),
            ));
        }
        let mut x = features.clone();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            x = linear(&x, w, Some(b))?;
            if i < 2 {
                x = x.map(gelu);
            }
        }
        Ok(x)
    }
}

/// Banks, provider and connector for one model width.
pub struct Tma<T: Scalar> {
    pub config: TmaConfig,
    pub banks: QueryBanks<T>,
    pub provider: Box<dyn SemanticProvider<T>>,
    pub connector: Connector<T>,
}

impl<T: Scalar> Tma<T> {
    pub fn seeded(config: TmaConfig, model_dim: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            banks: QueryBanks::seeded(&config),
            provider: Box::new(StubProvider::seeded(&config)),
            connector: Connector::seeded(config.seed, config.provider_dim, model_dim),
            config,
        })
    }

    /// Connector output `[Q, model_dim]` for one task.
    pub fn features(&self, task: &TaskSpec, inputs: &ProviderInputs<T>) -> Result<Array<T>> {
        let raw = self.provider.features(inputs, self.banks.select(task))?;
        self.connector.forward(&raw)
    }
}

/// One task's reference latent and connector features.
#[derive(Debug, Clone, Copy)]
pub struct TaskInput<'a, T> {
    pub task: TaskSpec,
    pub reference: &'a LatentBlock<T>,
    pub features: &'a Array<T>,
}

#[derive(Debug, Clone)]
pub struct Composition<T> {
    pub cache: RefCache<T>,
    /// Connector features of all tasks, concatenated row-wise in input order.
    pub features: Array<T>,
    pub context: ContextKv<T>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComposeOptions {
    pub allow_multiple_appearance: bool,
}

/// Builds each task's cache with its own bias and concatenates caches and
/// external features in input order.
pub fn compose_tasks<T: Scalar>(
    model: &DitModel<T>,
    parts: &[TaskInput<'_, T>],
    target_grid: (usize, usize, usize),
    opts: ComposeOptions,
) -> Result<Composition<T>> {
    if parts.is_empty() {
        return Err(invalid("compose_tasks", "no tasks given"));
    }
    let mut seen = BTreeSet::new();
    for p in parts {
        if !seen.insert(p.task.kind) {
            return Err(invalid("compose_tasks", format!("task {} appears twice; its query bank is ambiguous", p.task.kind)));
        }
    }
    let appearance = parts
        .iter()
        .filter(|p| p.task.category == TaskCategory::Appearance)
        .count();
    if appearance > 1 && !opts.allow_multiple_appearance {
        return Err(invalid(
            "compose_tasks",
            format!("{appearance} appearance tasks would share one temporal offset"),
        ));
    }
    let caches = parts
        .iter()
        .map(|p| model.ref_branch_forward(p.reference, &p.task, target_grid, None))
        .collect::<Result<Vec<_>>>()?;
    let cache = RefCache::concat(&caches.iter().collect::<Vec<_>>())?;
    let features = concat(0, &parts.iter().map(|p| p.features).collect::<Vec<_>>())?;
    let context = model.context_kv(&features)?;
    Ok(Composition { cache, features, context })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{cross_attn, tgt_causal_attn, KvSegment};
    use crate::dit::{block_coords, Conditioning, DitConfig};
    use crate::latents::build_reference_latent;
    use crate::rope::PositionBias;

    fn small() -> TmaConfig {
        TmaConfig {
            query_tokens: 8,
            provider_dim: 12,
            input_dim: 4,
            seed: 3,
            ..TmaConfig::default()
        }
    }

    fn inputs(seed: u64) -> ProviderInputs<f64> {
        let mut rng = Rng::new(seed);
        ProviderInputs {
            first_frame: seeded_normal([5, 4], &mut rng),
            reference: seeded_normal([7, 4], &mut rng),
            template: template_tokens(3, TaskKind::Motion, 4),
            prompt: Array::zeros([1, 4]),
        }
    }

    #[test]
    fn banks_are_distinct_and_stable() {
        let a = QueryBanks::<f64>::seeded(&small());
        let b = QueryBanks::<f64>::seeded(&small());
        for kind in TaskKind::ALL {
            let t = TaskSpec::new(kind);
            assert_eq!(a.select(&t).kind, kind);
            assert_eq!(a.select(&t), b.select(&t));
        }
        let kinds: Vec<_> = a.iter().map(|b| b.tokens.clone()).collect();
        for i in 0..kinds.len() {
            for j in i + 1..kinds.len() {
                assert_ne!(kinds[i], kinds[j]);
            }
        }
    }

    #[test]
    fn stub_provider_examples() {
        let cfg = TmaConfig::default();
        let p = StubProvider::<f64>::seeded(&cfg);
        let banks = QueryBanks::seeded(&cfg);
        let mut rng = Rng::new(1);
        let base = ProviderInputs {
            first_frame: seeded_normal([3, 16], &mut rng),
            reference: seeded_normal([3, 16], &mut rng),
            template: template_tokens(0, TaskKind::Id, 16),
            prompt: Array::zeros([2, 16]),
        };
        let bank = banks.select(&TaskSpec::new(TaskKind::Id));
        let a = p.features(&base, bank).unwrap();
        assert_eq!(a.shape(), &[64, 256]);
        assert_eq!(a, p.features(&base, bank).unwrap());

        let mut other = base.clone();
        other.reference = other.reference.map(|v| v + 1.0);
        assert_ne!(a, p.features(&other, bank).unwrap());

        let mut zeros_again = base.clone();
        zeros_again.prompt = Array::zeros([5, 16]);
        assert_eq!(a, p.features(&zeros_again, bank).unwrap());

        validate_provider(&p, &banks, &base).unwrap();
    }

    struct Truncating;

    impl SemanticProvider<f64> for Truncating {
        fn name(&self) -> &str {
            "truncating"
        }
        fn contract_version(&self) -> u32 {
            PROVIDER_CONTRACT_VERSION
        }
        fn output_dim(&self) -> usize {
            12
        }
        fn features(&self, _: &ProviderInputs<f64>, bank: &QueryBank<f64>) -> Result<Array<f64>> {
            bank.tokens.slice_axis(0, 0..1)
        }
    }

    #[test]
    fn validation_catches_wrong_length() {
        let banks = QueryBanks::seeded(&small());
        let err = validate_provider(&Truncating, &banks, &inputs(2)).unwrap_err();
        assert!(err.to_string().contains("truncating"));
    }

    #[test]
    fn connector_examples() {
        let c = Connector::<f64>::seeded(5, 12, 8);
        let weights = c.manifest().into_iter().filter(|(n, s)| n.ends_with("weight") && s.len() == 2).count();
        assert_eq!(weights, 3);
        assert!(c.forward(&Array::zeros([4, 12])).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(c.forward(&Array::zeros([4, 11])).is_err());

        let x = seeded_normal::<f64>([1, 12], &mut Rng::new(6));
        let got = c.forward(&x).unwrap();
        let step = |v: &[f64], w: &Array<f64>| -> Vec<f64> {
            let cols = w.row_len();
            (0..cols)
                .map(|j| v.iter().enumerate().map(|(i, a)| a * w.data()[i * cols + j]).sum())
                .collect()
        };
        let g = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh());
        let h1: Vec<f64> = step(x.data(), &c.layers[0].0).into_iter().map(g).collect();
        let h2: Vec<f64> = step(&h1, &c.layers[1].0).into_iter().map(g).collect();
        let want = step(&h2, &c.layers[2].0);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    fn model() -> DitModel<f64> {
        DitModel::new(DitConfig {
            layers: 2,
            model_dim: 8,
            heads: 2,
            ffn_dim: 16,
            latent_channels: 4,
            time_embed_dim: 8,
            seed: 21,
            ..DitConfig::default()
        })
        .unwrap()
    }

    fn reference(kind: TaskKind, seed: u64) -> LatentBlock<f64> {
        let r = seeded_normal([2, 2, 2, 4], &mut Rng::new(seed));
        build_reference_latent(&r, &TaskSpec::new(kind)).unwrap()
    }

    #[test]
    fn singleton_composition_matches_direct_path() {
        let m = model();
        let tma = Tma::<f64>::seeded(small(), 8).unwrap();
        let task = TaskSpec::new(TaskKind::Camera);
        let r = reference(TaskKind::Camera, 1);
        let feats = tma.features(&task, &inputs(4)).unwrap();
        let comp = compose_tasks(&m, &[TaskInput { task, reference: &r, features: &feats }], (2, 2, 2), ComposeOptions::default()).unwrap();
        let direct = m.ref_branch_forward(&r, &task, (2, 2, 2), None).unwrap();
        assert_eq!(comp.cache, direct);
        assert_eq!(comp.context, m.context_kv(&feats).unwrap());
    }

    #[test]
    fn composition_rules() {
        let m = model();
        let f = Array::<f64>::zeros([3, 8]);
        let (id, style, motion) = (reference(TaskKind::Id, 1), reference(TaskKind::Style, 2), reference(TaskKind::Motion, 3));
        let inp = |kind, r| TaskInput { task: TaskSpec::new(kind), reference: r, features: &f };
        let dup = [inp(TaskKind::Id, &id), inp(TaskKind::Id, &id)];
        assert!(compose_tasks(&m, &dup, (2, 2, 2), ComposeOptions::default()).is_err());
        let two_app = [inp(TaskKind::Id, &id), inp(TaskKind::Style, &style)];
        assert!(compose_tasks(&m, &two_app, (2, 2, 2), ComposeOptions::default()).is_err());
        assert!(compose_tasks(&m, &two_app, (2, 2, 2), ComposeOptions { allow_multiple_appearance: true }).is_ok());
        assert!(compose_tasks::<f64>(&m, &[], (2, 2, 2), ComposeOptions::default()).is_err());

        let mixed = [inp(TaskKind::Motion, &motion), inp(TaskKind::Id, &id)];
        let comp = compose_tasks(&m, &mixed, (2, 2, 2), ComposeOptions::default()).unwrap();
        assert_eq!(comp.cache.tokens(), 16);
        assert_eq!(comp.context.tokens(), 6);
        let biases: Vec<_> = comp.cache.segments.iter().map(|s| s.bias.triple()).collect();
        assert_eq!(biases, vec![[0, 2, 0], [2, 0, 0]]);
        // slicing recovers each part
        let a = m.ref_branch_forward(&motion, &TaskSpec::new(TaskKind::Motion), (2, 2, 2), None).unwrap();
        let b = m.ref_branch_forward(&id, &TaskSpec::new(TaskKind::Id), (2, 2, 2), None).unwrap();
        for l in 0..2 {
            assert_eq!(comp.cache.layers[l].kv.k.slice_axis(0, 0..8).unwrap(), a.layers[l].kv.k);
            assert_eq!(comp.cache.layers[l].kv.v.slice_axis(0, 8..16).unwrap(), b.layers[l].kv.v);
        }
    }

    #[test]
    fn order_swap_leaves_target_output_unchanged() {
        let m = model();
        let tma = Tma::<f64>::seeded(small(), 8).unwrap();
        let (cam, id) = (TaskSpec::new(TaskKind::Camera), TaskSpec::new(TaskKind::Id));
        let (rc, ri) = (reference(TaskKind::Camera, 5), reference(TaskKind::Id, 6));
        let (fc, fi) = (tma.features(&cam, &inputs(7)).unwrap(), tma.features(&id, &inputs(8)).unwrap());
        let ab = [TaskInput { task: cam, reference: &rc, features: &fc }, TaskInput { task: id, reference: &ri, features: &fi }];
        let ba = [ab[1], ab[0]];
        let c1 = compose_tasks(&m, &ab, (2, 2, 2), ComposeOptions::default()).unwrap();
        let c2 = compose_tasks(&m, &ba, (2, 2, 2), ComposeOptions::default()).unwrap();
        assert_ne!(c1.cache.layers[0].kv.k, c2.cache.layers[0].kv.k);

        let target = crate::latents::build_unconditioned_target_latent(&seeded_normal([2, 2, 2, 4], &mut Rng::new(9))).unwrap();
        let x = m.patch_embed(&target).unwrap();
        let coords = block_coords(&target, PositionBias::ZERO);
        let blk = &m.blocks[0];
        let s1 = tgt_causal_attn(&x, &coords, &c1.cache.layers[0].kv, &blk.self_attn, m.rope()).unwrap();
        let s2 = tgt_causal_attn(&x, &coords, &c2.cache.layers[0].kv, &blk.self_attn, m.rope()).unwrap();
        assert!(s1.max_abs_diff(&s2).unwrap() < 1e-8);
        let KvSegment { k: k1, v: v1 } = &c1.context.layers[0];
        let KvSegment { k: k2, v: v2 } = &c2.context.layers[0];
        let x1 = cross_attn(&x, k1, v1, &blk.cross_attn).unwrap();
        let x2 = cross_attn(&x, k2, v2, &blk.cross_attn).unwrap();
        assert!(x1.max_abs_diff(&x2).unwrap() < 1e-8);

        let p1 = m.model_forward(&target, Conditioning { cache: &c1.cache, context: Some(&c1.context) }, 0.5).unwrap();
        let p2 = m.model_forward(&target, Conditioning { cache: &c2.cache, context: Some(&c2.context) }, 0.5).unwrap();
        assert!(p1.max_abs_diff(&p2).unwrap() < 1e-8);
    }

    #[test]
    fn reference_branch_ignores_conditioning() {
        let m = model();
        let r = reference(TaskKind::Effect, 10);
        let task = TaskSpec::new(TaskKind::Effect);
        let ctx = m.context_kv(&seeded_normal([4, 8], &mut Rng::new(11))).unwrap();
        let a = m.ref_branch_forward(&r, &task, (2, 2, 2), None).unwrap();
        let b = m.ref_branch_forward(&r, &task, (2, 2, 2), Some(&ctx)).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }
}
