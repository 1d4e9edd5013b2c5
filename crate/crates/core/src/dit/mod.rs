//! Toy DiT with a decoupled reference branch.
//!
//! Each block is adaLN-modulated self-attention, un-modulated
//! cross-attention and a modulated GELU feed-forward, all residual. The
//! target branch runs every sampling step at the current timestep; the
//! reference branch runs once at `t = 0` and leaves its rotated keys and
//! values in a [`RefCache`].

mod checkpoint;
mod sampler;

pub use checkpoint::{read_manifest, Checkpoint, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use sampler::{sample, sample_joint, sample_recompute};

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::attention::{
    cross_attn, joint_baseline, project_external, ref_self_attn_kv, tgt_causal_attn, CacheFingerprint,
    CacheLayer, CacheSegment, KvSegment, Mask, ProjectionSet, RefCache,
};
use crate::error::{invalid, Error, Result};
use crate::latents::{LatentBlock, TaskSpec};
use crate::numerics::{concat, gelu, label_hash, layer_norm, linear, seeded_normal, silu, Array, Rng, Scalar};
use crate::rope::{position_grid, task_bias, Coord, PositionBias, RopeConfig};

const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DitConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// `n`: channels of one latent part; patch embedding reads `2n + 4`.
    pub latent_channels: usize,
    pub time_embed_dim: usize,
    pub seed: u64,
    /// Whether the reference branch also cross-attends to the external context.
    pub ref_cross_attention: bool,
    pub rope_base: f64,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            model_dim: 128,
            heads: 4,
            ffn_dim: 512,
            latent_channels: 16,
            time_embed_dim: 128,
            seed: 0,
            ref_cross_attention: false,
            rope_base: 10_000.0,
        }
    }
}

impl DitConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("latent_channels", self.latent_channels),
            ("time_embed_dim", self.time_embed_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(invalid("DitConfig", format!("{name} must be at least 1")));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(invalid(
                "DitConfig",
                format!("model_dim {} is not divisible by heads {}", self.model_dim, self.heads),
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(invalid("DitConfig", format!("head dim {} must be even for RoPE", self.head_dim())));
        }
        if !self.time_embed_dim.is_multiple_of(2) {
            return Err(invalid("DitConfig", "time_embed_dim must be even"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn in_channels(&self) -> usize {
        2 * self.latent_channels + 4
    }

    /// Stable digest of the configuration, weight seed included.
    pub fn model_id(&self) -> u64 {
        label_hash(&serde_json::to_string(self).expect("config serialises"))
    }
}

/// Forward-pass tallies for one model instance.
#[derive(Debug, Default)]
pub struct ForwardCounters {
    reference: AtomicUsize,
    target: AtomicUsize,
    joint: AtomicUsize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ForwardCounts {
    pub reference: usize,
    pub target: usize,
    pub joint: usize,
}

impl ForwardCounters {
    pub fn snapshot(&self) -> ForwardCounts {
        ForwardCounts {
            reference: self.reference.load(Ordering::Relaxed),
            target: self.target.load(Ordering::Relaxed),
            joint: self.joint.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        self.reference.store(0, Ordering::Relaxed);
        self.target.store(0, Ordering::Relaxed);
        self.joint.store(0, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone)]
pub struct TimeEmbedding<T> {
    pub t: f64,
    pub vector: Array<T>,
}

/// `[sin(s w_0), .., sin(s w_{k-1}), cos(s w_0), .., cos(s w_{k-1})]` with
/// `s = 1000 t` and log-spaced `w_i = 10000^(-i/k)`, `k = dim / 2`.
pub fn sinusoidal_features(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let s = 1000.0 * t;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    freqs
        .iter()
        .map(|w| (s * w).sin())
        .chain(freqs.iter().map(|w| (s * w).cos()))
        .collect()
}

#[derive(Debug, Clone)]
pub struct FeedForward<T> {
    pub w1: Array<T>,
    pub b1: Array<T>,
    pub w2: Array<T>,
    pub b2: Array<T>,
}

impl<T: Scalar> FeedForward<T> {
    pub fn forward(&self, x: &Array<T>) -> Result<Array<T>> {
        let h = linear(x, &self.w1, Some(&self.b1))?.map(gelu);
        linear(&h, &self.w2, Some(&self.b2))
    }
}

#[derive(Debug, Clone)]
pub struct DitBlock<T> {
    /// `silu(temb) -> 6 * model_dim` modulation: shift/scale/gate for attention, then for the FFN.
    pub ada_w: Array<T>,
    pub ada_b: Array<T>,
    pub self_attn: ProjectionSet<T>,
    pub cross_attn: ProjectionSet<T>,
    pub ffn: FeedForward<T>,
}

/// Shift/scale/gate vectors of one block for one branch.
#[derive(Debug, Clone)]
pub struct Modulation<T> {
    pub shift_attn: Vec<T>,
    pub scale_attn: Vec<T>,
    pub gate_attn: Vec<T>,
    pub shift_ffn: Vec<T>,
    pub scale_ffn: Vec<T>,
    pub gate_ffn: Vec<T>,
}

/// Per-layer external keys/values for target cross-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextKv<T> {
    pub layers: Vec<KvSegment<T>>,
}

impl<T: Scalar> ContextKv<T> {
    pub fn tokens(&self) -> usize {
        self.layers.first().map_or(0, KvSegment::tokens)
    }
}

/// What the target branch reads besides its own tokens.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a, T> {
    pub cache: &'a RefCache<T>,
    pub context: Option<&'a ContextKv<T>>,
}

enum Init {
    Normal(f64),
    Const(f64),
    /// Zero except the two gate chunks of a `6 * dim` modulation bias.
    GateBias { dim: usize },
}

#[derive(Debug)]
pub struct DitModel<T> {
    cfg: DitConfig,
    rope: RopeConfig,
    id: u64,
    pub patch_embed: Array<T>,
    pub time_w1: Array<T>,
    pub time_b1: Array<T>,
    pub time_w2: Array<T>,
    pub time_b2: Array<T>,
    pub blocks: Vec<DitBlock<T>>,
    pub final_ada_w: Array<T>,
    pub final_ada_b: Array<T>,
    pub head: Array<T>,
    counters: ForwardCounters,
}

impl<T: Scalar> DitModel<T> {
    /// Seeded weights; every tensor draws from its own named stream.
    pub fn new(cfg: DitConfig) -> Result<Self> {
        let seed = cfg.seed;
        Self::build(cfg, |name, shape, init| {
            let mut rng = Rng::for_label(seed, name);
            let a = match init {
                Init::Normal(std) => seeded_normal::<f64>(shape.to_vec(), &mut rng).scale(std),
                Init::Const(v) => Array::full(shape.to_vec(), v),
                Init::GateBias { dim } => Array::from_fn(shape.to_vec(), |i| {
                    // gates (chunks 2 and 5) start at 1 so every sublayer contributes
                    if matches!(i / dim, 2 | 5) { 1.0 } else { 0.0 }
                }),
            };
            Ok(a.cast())
        })
    }

    fn build(cfg: DitConfig, mut get: impl FnMut(&str, &[usize], Init) -> Result<Array<T>>) -> Result<Self> {
        cfg.validate()?;
        let (d, e, f, cin, n) = (cfg.model_dim, cfg.time_embed_dim, cfg.ffn_dim, cfg.in_channels(), cfg.latent_channels);
        let inv = |k: usize| 1.0 / (k as f64).sqrt();
        let patch_embed = get("patch_embed.weight", &[cin, d], Init::Normal(inv(cin)))?;
        let time_w1 = get("time.w1", &[e, e], Init::Normal(inv(e)))?;
        let time_b1 = get("time.b1", &[e], Init::Const(0.0))?;
        let time_w2 = get("time.w2", &[e, e], Init::Normal(inv(e)))?;
        let time_b2 = get("time.b2", &[e], Init::Const(0.0))?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            let mut proj = |prefix: &str| -> Result<ProjectionSet<T>> {
                let w = ["w_q", "w_k", "w_v", "w_o"]
                    .iter()
                    .map(|m| get(&p(&format!("{prefix}.{m}")), &[d, d], Init::Normal(inv(d))))
                    .collect::<Result<Vec<_>>>()?;
                let [q, k, v, o]: [Array<T>; 4] = w.try_into().expect("four matrices");
                ProjectionSet::new(q, k, v, o, cfg.heads)
            };
            let self_attn = proj("self_attn")?;
            let cross_attn = proj("cross_attn")?;
            blocks.push(DitBlock {
                ada_w: get(&p("ada.weight"), &[e, 6 * d], Init::Normal(0.5 * inv(e)))?,
                ada_b: get(&p("ada.bias"), &[6 * d], Init::GateBias { dim: d })?,
                self_attn,
                cross_attn,
                ffn: FeedForward {
                    w1: get(&p("ffn.w1"), &[d, f], Init::Normal(inv(d)))?,
                    b1: get(&p("ffn.b1"), &[f], Init::Const(0.0))?,
                    w2: get(&p("ffn.w2"), &[f, d], Init::Normal(inv(f)))?,
                    b2: get(&p("ffn.b2"), &[d], Init::Const(0.0))?,
                },
            });
        }
        let final_ada_w = get("final.ada.weight", &[e, 2 * d], Init::Normal(0.5 * inv(e)))?;
        let final_ada_b = get("final.ada.bias", &[2 * d], Init::Const(0.0))?;
        let head = get("head.weight", &[d, n], Init::Normal(inv(d)))?;
        let rope = RopeConfig::with_partition(
            cfg.head_dim(),
            crate::rope::PairPartition::balanced(cfg.head_dim() / 2),
            cfg.rope_base,
        )?;
        Ok(Self {
            id: cfg.model_id(),
            cfg,
            rope,
            patch_embed,
            time_w1,
            time_b1,
            time_w2,
            time_b2,
            blocks,
            final_ada_w,
            final_ada_b,
            head,
            counters: ForwardCounters::default(),
        })
    }

    pub fn config(&self) -> &DitConfig {
        &self.cfg
    }

    pub fn rope(&self) -> &RopeConfig {
        &self.rope
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn counters(&self) -> &ForwardCounters {
        &self.counters
    }

    /// Every weight tensor with its canonical name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Array<T>)> {
        let mut out: Vec<(String, &Array<T>)> = vec![
            ("patch_embed.weight".into(), &self.patch_embed),
            ("time.w1".into(), &self.time_w1),
            ("time.b1".into(), &self.time_b1),
            ("time.w2".into(), &self.time_w2),
            ("time.b2".into(), &self.time_b2),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{l}.self_attn.w_q"), &b.self_attn.w_q));
            out.push((format!("blocks.{l}.self_attn.w_k"), &b.self_attn.w_k));
            out.push((format!("blocks.{l}.self_attn.w_v"), &b.self_attn.w_v));
            out.push((format!("blocks.{l}.self_attn.w_o"), &b.self_attn.w_o));
            out.push((format!("blocks.{l}.cross_attn.w_q"), &b.cross_attn.w_q));
            out.push((format!("blocks.{l}.cross_attn.w_k"), &b.cross_attn.w_k));
            out.push((format!("blocks.{l}.cross_attn.w_v"), &b.cross_attn.w_v));
            out.push((format!("blocks.{l}.cross_attn.w_o"), &b.cross_attn.w_o));
            out.push((format!("blocks.{l}.ada.weight"), &b.ada_w));
            out.push((format!("blocks.{l}.ada.bias"), &b.ada_b));
            out.push((format!("blocks.{l}.ffn.w1"), &b.ffn.w1));
            out.push((format!("blocks.{l}.ffn.b1"), &b.ffn.b1));
            out.push((format!("blocks.{l}.ffn.w2"), &b.ffn.w2));
            out.push((format!("blocks.{l}.ffn.b2"), &b.ffn.b2));
        }
        out.push(("final.ada.weight".into(), &self.final_ada_w));
        out.push(("final.ada.bias".into(), &self.final_ada_b));
        out.push(("head.weight".into(), &self.head));
        out
    }

    pub fn time_embed(&self, t: f64) -> Result<TimeEmbedding<T>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(invalid("time_embed", format!("timestep {t} outside [0, 1]")));
        }
        let feats = Array::<f64>::new([1, self.cfg.time_embed_dim], sinusoidal_features(t, self.cfg.time_embed_dim))?.cast();
        let h = linear(&feats, &self.time_w1, Some(&self.time_b1))?.map(silu);
        let v = linear(&h, &self.time_w2, Some(&self.time_b2))?;
        Ok(TimeEmbedding {
            t,
            vector: v.reshape([self.cfg.time_embed_dim])?,
        })
    }

    /// Per-cell linear lift of `[f, h, w, 2n + 4]` to `[f*h*w, model_dim]`.
    pub fn patch_embed(&self, l: &LatentBlock<T>) -> Result<Array<T>> {
        if l.channels() != self.cfg.in_channels() {
            return Err(invalid(
                "patch_embed",
                format!("latent has {} channels, model expects {}", l.channels(), self.cfg.in_channels()),
            ));
        }
        crate::numerics::matmul(&l.token_matrix(), &self.patch_embed)
    }

    pub fn modulation(&self, layer: usize, temb: &TimeEmbedding<T>) -> Result<Modulation<T>> {
        let block = &self.blocks[layer];
        let m = self.project_time(temb, &block.ada_w, &block.ada_b)?;
        let d = self.cfg.model_dim;
        let chunk = |i: usize| m[i * d..(i + 1) * d].to_vec();
        Ok(Modulation {
            shift_attn: chunk(0),
            scale_attn: chunk(1),
            gate_attn: chunk(2),
            shift_ffn: chunk(3),
            scale_ffn: chunk(4),
            gate_ffn: chunk(5),
        })
    }

    fn project_time(&self, temb: &TimeEmbedding<T>, w: &Array<T>, b: &Array<T>) -> Result<Vec<T>> {
        let s = temb.vector.map(silu).reshape([1, self.cfg.time_embed_dim])?;
        Ok(linear(&s, w, Some(b))?.into_data())
    }

    /// External keys/values for every layer's cross-attention.
    pub fn context_kv(&self, features: &Array<T>) -> Result<ContextKv<T>> {
        if features.ndim() != 2 || features.row_len() != self.cfg.model_dim {
            return Err(invalid(
                "context_kv",
                format!("features {:?} must be [tokens, {}]", features.shape(), self.cfg.model_dim),
            ));
        }
        let layers = self
            .blocks
            .iter()
            .map(|b| project_external(features, &b.cross_attn))
            .collect::<Result<_>>()?;
        Ok(ContextKv { layers })
    }

    /// Self-attention input of a branch: modulated layer norm.
    fn attn_input(&self, x: &Array<T>, m: &Modulation<T>) -> Array<T> {
        modulate(&layer_norm(x, NORM_EPS), &m.shift_attn, &m.scale_attn)
    }

    fn cross_and_ffn(&self, layer: usize, mut x: Array<T>, m: &Modulation<T>, ext: Option<&KvSegment<T>>) -> Result<Array<T>> {
        let block = &self.blocks[layer];
        if let Some(ext) = ext.filter(|e| e.tokens() > 0) {
            let c = cross_attn(&layer_norm(&x, NORM_EPS), &ext.k, &ext.v, &block.cross_attn)?;
            x = x.add(&c)?;
        }
        let h = modulate(&layer_norm(&x, NORM_EPS), &m.shift_ffn, &m.scale_ffn);
        let f = block.ffn.forward(&h)?;
        add_gated(&x, &f, &m.gate_ffn)
    }

    /// One target block: causal self-attention over `[target; cached reference]`,
    /// cross-attention to `ext`, then the FFN.
    pub fn block_forward(
        &self,
        layer: usize,
        x_tgt: &Array<T>,
        tgt_coords: &[Coord],
        cache_layer: &KvSegment<T>,
        temb_tgt: &TimeEmbedding<T>,
        ext: Option<&KvSegment<T>>,
    ) -> Result<Array<T>> {
        let block = self
            .blocks
            .get(layer)
            .ok_or_else(|| invalid("block_forward", format!("layer {layer} out of range")))?;
        let m = self.modulation(layer, temb_tgt)?;
        let a = tgt_causal_attn(&self.attn_input(x_tgt, &m), tgt_coords, cache_layer, &block.self_attn, &self.rope)?;
        let x = add_gated(x_tgt, &a, &m.gate_attn)?;
        self.cross_and_ffn(layer, x, &m, ext)
    }

    /// One reference block; returns the new hidden state and the rotated K/V it attended with.
    pub fn ref_block_forward(
        &self,
        layer: usize,
        x_ref: &Array<T>,
        ref_coords: &[Coord],
        temb_ref: &TimeEmbedding<T>,
        ext: Option<&KvSegment<T>>,
    ) -> Result<(Array<T>, KvSegment<T>)> {
        let block = &self.blocks[layer];
        let m = self.modulation(layer, temb_ref)?;
        let (a, kv) = ref_self_attn_kv(&self.attn_input(x_ref, &m), ref_coords, &block.self_attn, &self.rope)?;
        let x = add_gated(x_ref, &a, &m.gate_attn)?;
        let ext = if self.cfg.ref_cross_attention { ext } else { None };
        Ok((self.cross_and_ffn(layer, x, &m, ext)?, kv))
    }

    /// Runs the reference branch once at `t = 0` and records its per-layer state.
    ///
    /// `target_grid` is the target latent's `(f, h, w)`; it fixes the offset.
    pub fn ref_branch_forward(
        &self,
        l_ref: &LatentBlock<T>,
        task: &TaskSpec,
        target_grid: (usize, usize, usize),
        context: Option<&ContextKv<T>>,
    ) -> Result<RefCache<T>> {
        check_reference_latent(l_ref, task)?;
        let bias = task_bias(task, target_grid.0, target_grid.2);
        let coords = block_coords(l_ref, bias);
        let temb = self.time_embed(0.0)?;
        let mut x = self.patch_embed(l_ref)?;
        let mut layers = Vec::with_capacity(self.cfg.layers);
        for l in 0..self.cfg.layers {
            let ext = context.map(|c| &c.layers[l]);
            let (next, kv) = self.ref_block_forward(l, &x, &coords, &temb, ext)?;
            x = next;
            layers.push(CacheLayer { kv, hidden: x.clone() });
        }
        self.counters.reference.fetch_add(1, Ordering::Relaxed);
        let segments = vec![CacheSegment {
            task: task.kind,
            bias,
            grid: [l_ref.frames(), l_ref.height(), l_ref.width()],
        }];
        let target_extent = [target_grid.0, target_grid.2];
        Ok(RefCache {
            fingerprint: CacheFingerprint::compute(self.id, &segments, target_extent, &T::DTYPE.to_string()),
            layers,
            segments,
            target_extent,
        })
    }

    pub fn check_cache(&self, cache: &RefCache<T>, l_tgt: &LatentBlock<T>) -> Result<()> {
        if cache.fingerprint.model != self.id {
            return Err(Error::CacheMismatch(format!(
                "cache built for model {:016x}, this model is {:016x}",
                cache.fingerprint.model, self.id
            )));
        }
        if cache.layers.len() != self.cfg.layers {
            return Err(Error::CacheMismatch(format!(
                "cache has {} layers, model has {}",
                cache.layers.len(),
                self.cfg.layers
            )));
        }
        if cache.target_extent != [l_tgt.frames(), l_tgt.width()] {
            return Err(Error::CacheMismatch(format!(
                "cache offsets assume target (f, w) = {:?}, got ({}, {})",
                cache.target_extent,
                l_tgt.frames(),
                l_tgt.width()
            )));
        }
        let expected = CacheFingerprint::compute(self.id, &cache.segments, cache.target_extent, &T::DTYPE.to_string());
        if expected != cache.fingerprint {
            return Err(Error::CacheMismatch("fingerprint does not match cache segments".into()));
        }
        Ok(())
    }

    /// Velocity prediction `[f, h, w, n]` for the target latent at timestep `t`.
    pub fn model_forward(&self, l_tgt: &LatentBlock<T>, cond: Conditioning<'_, T>, t: f64) -> Result<Array<T>> {
        self.check_cache(cond.cache, l_tgt)?;
        let temb = self.time_embed(t)?;
        let coords = block_coords(l_tgt, PositionBias::ZERO);
        let mut x = self.patch_embed(l_tgt)?;
        for l in 0..self.cfg.layers {
            let ext = cond.context.map(|c| &c.layers[l]);
            x = self.block_forward(l, &x, &coords, &cond.cache.layers[l].kv, &temb, ext)?;
        }
        self.counters.target.fetch_add(1, Ordering::Relaxed);
        self.head_forward(&x, &temb, l_tgt)
    }

    fn head_forward(&self, x: &Array<T>, temb: &TimeEmbedding<T>, l_tgt: &LatentBlock<T>) -> Result<Array<T>> {
        let m = self.project_time(temb, &self.final_ada_w, &self.final_ada_b)?;
        let d = self.cfg.model_dim;
        let h = modulate(&layer_norm(x, NORM_EPS), &m[..d], &m[d..]);
        let (f, hh, w) = l_tgt.grid();
        crate::numerics::matmul(&h, &self.head)?.reshape([f, hh, w, self.cfg.latent_channels])
    }

    /// Baseline topology: both branches pass through every block together
    /// under the block-causal mask, recomputed at every call.
    pub fn joint_forward(
        &self,
        l_tgt: &LatentBlock<T>,
        l_ref: &LatentBlock<T>,
        task: &TaskSpec,
        t: f64,
        context: Option<&ContextKv<T>>,
    ) -> Result<Array<T>> {
        check_reference_latent(l_ref, task)?;
        let bias = task_bias(task, l_tgt.frames(), l_tgt.width());
        let coords_t = block_coords(l_tgt, PositionBias::ZERO);
        let coords_r = block_coords(l_ref, bias);
        let coords_all: Vec<Coord> = coords_t.iter().chain(&coords_r).copied().collect();
        let (n_t, n_r) = (coords_t.len(), coords_r.len());
        let mask = Mask::block_causal(n_t, n_r);
        let temb_t = self.time_embed(t)?;
        let temb_r = self.time_embed(0.0)?;
        let mut x_t = self.patch_embed(l_tgt)?;
        let mut x_r = self.patch_embed(l_ref)?;
        for l in 0..self.cfg.layers {
            let block = &self.blocks[l];
            let m_t = self.modulation(l, &temb_t)?;
            let m_r = self.modulation(l, &temb_r)?;
            let h_all = concat(0, &[&self.attn_input(&x_t, &m_t), &self.attn_input(&x_r, &m_r)])?;
            let a = joint_baseline(&h_all, &coords_all, &mask, &block.self_attn, &self.rope)?;
            let a_t = a.slice_axis(0, 0..n_t)?;
            let a_r = a.slice_axis(0, n_t..n_t + n_r)?;
            let ext = context.map(|c| &c.layers[l]);
            let ext_r = if self.cfg.ref_cross_attention { ext } else { None };
            x_t = self.cross_and_ffn(l, add_gated(&x_t, &a_t, &m_t.gate_attn)?, &m_t, ext)?;
            x_r = self.cross_and_ffn(l, add_gated(&x_r, &a_r, &m_r.gate_attn)?, &m_r, ext_r)?;
        }
        self.counters.joint.fetch_add(1, Ordering::Relaxed);
        self.head_forward(&x_t, &temb_t, l_tgt)
    }
}

/// Alias of [`DitModel::ref_branch_forward`].
pub fn build_ref_cache<T: Scalar>(
    model: &DitModel<T>,
    l_ref: &LatentBlock<T>,
    task: &TaskSpec,
    target_grid: (usize, usize, usize),
    context: Option<&ContextKv<T>>,
) -> Result<RefCache<T>> {
    model.ref_branch_forward(l_ref, task, target_grid, context)
}

/// Token coordinates of a latent: its grid, shifted by its origin and `bias`.
pub fn block_coords<T: Scalar>(l: &LatentBlock<T>, bias: PositionBias) -> Vec<Coord> {
    let o = l.grid_origin;
    position_grid(l.frames(), l.height(), l.width(), bias)
        .into_iter()
        .map(|c| [c[0] + o[0], c[1] + o[1], c[2] + o[2]])
        .collect()
}

fn check_reference_latent<T: Scalar>(l_ref: &LatentBlock<T>, task: &TaskSpec) -> Result<()> {
    if !task.is_consistent() {
        return Err(invalid("build_ref_cache", format!("inconsistent task spec {task:?}")));
    }
    let flag = T::of(task.mask_flag);
    if l_ref.mask()?.data().iter().any(|&v| v != flag) {
        return Err(invalid(
            "build_ref_cache",
            format!("reference mask does not carry the {} flag {}", task.kind, task.mask_flag),
        ));
    }
    Ok(())
}

/// `x * (1 + scale) + shift`, broadcast over rows.
pub fn modulate<T: Scalar>(x: &Array<T>, shift: &[T], scale: &[T]) -> Array<T> {
    let d = x.row_len();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        for ((v, &sh), &sc) in row.iter_mut().zip(shift).zip(scale) {
            *v = *v * (T::one() + sc) + sh;
        }
    }
    Array::new(x.shape().to_vec(), out).expect("shape preserved")
}

/// `x + gate * y`, gate broadcast over rows.
fn add_gated<T: Scalar>(x: &Array<T>, y: &Array<T>, gate: &[T]) -> Result<Array<T>> {
    let d = x.row_len();
    x.zip_map(y, "residual", |a, b| a + b).and_then(|_| {
        let mut out = x.data().to_vec();
        for (i, (o, &b)) in out.iter_mut().zip(y.data()).enumerate() {
            *o = *o + gate[i % d] * b;
        }
        Array::new(x.shape().to_vec(), out)
    })
}

#[cfg(test)]
mod tests;
