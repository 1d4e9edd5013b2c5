use super::*;
use crate::latents::{build_reference_latent, build_target_latent, TaskKind};
use crate::numerics::{matmul, seeded_normal, Rng};

fn small_cfg() -> DitConfig {
    DitConfig {
        layers: 2,
        model_dim: 16,
        heads: 2,
        ffn_dim: 32,
        latent_channels: 4,
        time_embed_dim: 16,
        seed: 11,
        ..DitConfig::default()
    }
}

struct Scene {
    target: LatentBlock<f64>,
    reference: LatentBlock<f64>,
    task: TaskSpec,
    z_init: Array<f64>,
}

fn scene(cfg: &DitConfig, kind: TaskKind, grid: (usize, usize, usize), seed: u64) -> Scene {
    let (f, h, w) = grid;
    let n = cfg.latent_channels;
    let mut rng = Rng::new(seed);
    let cond = seeded_normal([1, h, w, n], &mut rng);
    let z_init = seeded_normal([f, h, w, n], &mut rng);
    let r = seeded_normal([f, h, w, n], &mut rng);
    let task = TaskSpec::new(kind);
    Scene {
        target: build_target_latent(&cond, &z_init).unwrap(),
        reference: build_reference_latent(&r, &task).unwrap(),
        task,
        z_init,
    }
}

fn context(model: &DitModel<f64>, tokens: usize, seed: u64) -> ContextKv<f64> {
    let feats = seeded_normal([tokens, model.config().model_dim], &mut Rng::new(seed));
    model.context_kv(&feats).unwrap()
}

#[test]
fn config_validation() {
    assert!(DitConfig::default().validate().is_ok());
    let bad = DitConfig { heads: 3, ..DitConfig::default() };
    assert!(bad.validate().is_err());
    let zero = DitConfig { layers: 0, ..DitConfig::default() };
    assert!(zero.validate().unwrap_err().to_string().contains("layers"));
    assert_ne!(small_cfg().model_id(), DitConfig { seed: 12, ..small_cfg() }.model_id());
}

#[test]
fn sinusoid_at_zero() {
    let s = sinusoidal_features(0.0, 16);
    assert!(s[..8].iter().all(|&v| v == 0.0));
    assert!(s[8..].iter().all(|&v| v == 1.0));
}

#[test]
fn time_embedding_behaviour() {
    let m = DitModel::<f64>::new(small_cfg()).unwrap();
    let a = m.time_embed(0.0).unwrap();
    let b = m.time_embed(0.0).unwrap();
    assert_eq!(a.vector, b.vector);
    assert_ne!(a.vector, m.time_embed(0.5).unwrap().vector);
    assert!(m.time_embed(1.5).is_err());
    assert!(m.time_embed(-0.1).is_err());
}

#[test]
fn patch_embed_examples() {
    let cfg = small_cfg();
    let m = DitModel::<f64>::new(cfg.clone()).unwrap();
    let zero = LatentBlock::new(Array::zeros([2, 3, 4, cfg.in_channels()])).unwrap();
    let t = m.patch_embed(&zero).unwrap();
    assert_eq!(t.shape(), &[24, cfg.model_dim]);
    assert!(t.data().iter().all(|&v| v == 0.0));

    let cell = seeded_normal::<f64>([1, 1, 1, cfg.in_channels()], &mut Rng::new(3));
    let tok = m.patch_embed(&LatentBlock::new(cell.clone()).unwrap()).unwrap();
    for j in 0..cfg.model_dim {
        let mut s = 0.0;
        for c in 0..cfg.in_channels() {
            s += cell.data()[c] * m.patch_embed.data()[c * cfg.model_dim + j];
        }
        assert!((tok.data()[j] - s).abs() < 1e-12);
    }

    let wrong = LatentBlock::new(Array::zeros([1, 1, 1, 7])).unwrap();
    assert!(m.patch_embed(&wrong).is_err());
}

fn zero_like(a: &Array<f64>) -> Array<f64> {
    Array::zeros(a.shape().to_vec())
}

#[test]
fn zeroed_output_weights_make_block_identity() {
    let mut m = DitModel::<f64>::new(small_cfg()).unwrap();
    for b in &mut m.blocks {
        b.self_attn.w_o = zero_like(&b.self_attn.w_o);
        b.cross_attn.w_o = zero_like(&b.cross_attn.w_o);
        b.ffn.w2 = zero_like(&b.ffn.w2);
        b.ffn.b2 = zero_like(&b.ffn.b2);
    }
    let s = scene(m.config(), TaskKind::Motion, (2, 2, 3), 1);
    let ctx = context(&m, 5, 2);
    let cache = m.ref_branch_forward(&s.reference, &s.task, s.target.grid(), None).unwrap();
    let x = m.patch_embed(&s.target).unwrap();
    let coords = block_coords(&s.target, PositionBias::ZERO);
    let temb = m.time_embed(0.7).unwrap();
    let y = m
        .block_forward(0, &x, &coords, &cache.layers[0].kv, &temb, Some(&ctx.layers[0]))
        .unwrap();
    assert_eq!(x, y);
}

#[test]
fn block_reads_only_its_own_cache_layer() {
    let m = DitModel::<f64>::new(small_cfg()).unwrap();
    let s = scene(m.config(), TaskKind::Camera, (2, 2, 2), 4);
    let cache = m.ref_branch_forward(&s.reference, &s.task, s.target.grid(), None).unwrap();
    let x = m.patch_embed(&s.target).unwrap();
    let coords = block_coords(&s.target, PositionBias::ZERO);
    let temb = m.time_embed(0.3).unwrap();
    let base = m.block_forward(0, &x, &coords, &cache.layers[0].kv, &temb, None).unwrap();

    let mut perturbed = cache.layers[0].kv.clone();
    perturbed.v = perturbed.v.map(|v| v + 0.25);
    let moved = m.block_forward(0, &x, &coords, &perturbed, &temb, None).unwrap();
    assert!(moved.max_abs_diff(&base).unwrap() > 1e-6);

    // model-level: changing layer 1 leaves the layer-0 block input/output path untouched
    let mut other = cache.clone();
    other.layers[1].kv.v = other.layers[1].kv.v.map(|v| v + 0.25);
    let again = m.block_forward(0, &x, &coords, &other.layers[0].kv, &temb, None).unwrap();
    assert_eq!(again, base);
}

mod oracle {
    pub fn ln(x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        x.iter().map(|v| (v - mean) / (var + 1e-6).sqrt()).collect()
    }

    /// Row vector times a row-major `[rows, cols]` matrix.
    pub fn vecmat(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
        (0..cols)
            .map(|j| x.iter().enumerate().map(|(i, v)| v * w[i * cols + j]).sum())
            .collect()
    }

    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    pub fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    pub fn silu(x: f64) -> f64 {
        x / (1.0 + (-x).exp())
    }
}

#[test]
fn single_token_block_matches_composed_oracle() {
    use oracle::*;
    let cfg = DitConfig {
        layers: 1,
        model_dim: 4,
        heads: 1,
        ffn_dim: 6,
        latent_channels: 2,
        time_embed_dim: 4,
        seed: 5,
        ..DitConfig::default()
    };
    let m = DitModel::<f64>::new(cfg).unwrap();
    let b = &m.blocks[0];
    let d = 4;
    let mut rng = Rng::new(8);
    let x = seeded_normal::<f64>([1, d], &mut rng);
    let cached = KvSegment {
        k: seeded_normal([1, d], &mut rng),
        v: seeded_normal([1, d], &mut rng),
    };
    let ext = KvSegment {
        k: seeded_normal([1, d], &mut rng),
        v: seeded_normal([1, d], &mut rng),
    };
    let temb = m.time_embed(0.4).unwrap();
    // origin coordinate: RoPE is the identity on the target token
    let got = m.block_forward(0, &x, &[[0, 0, 0]], &cached, &temb, Some(&ext)).unwrap();

    let s: Vec<f64> = temb.vector.data().iter().map(|&v| silu(v)).collect();
    let mut mods = vecmat(&s, b.ada_w.data(), 6 * d);
    for (mv, bv) in mods.iter_mut().zip(b.ada_b.data()) {
        *mv += bv;
    }
    let chunk = |i: usize| mods[i * d..(i + 1) * d].to_vec();
    let (sh1, sc1, g1, sh2, sc2, g2) = (chunk(0), chunk(1), chunk(2), chunk(3), chunk(4), chunk(5));

    let x0 = x.data().to_vec();
    let h: Vec<f64> = ln(&x0).iter().enumerate().map(|(i, v)| v * (1.0 + sc1[i]) + sh1[i]).collect();
    let q = vecmat(&h, b.self_attn.w_q.data(), d);
    let k_t = vecmat(&h, b.self_attn.w_k.data(), d);
    let v_t = vecmat(&h, b.self_attn.w_v.data(), d);
    let scale = 1.0 / (d as f64).sqrt();
    let (l0, l1) = (dot(&q, &k_t) * scale, dot(&q, cached.k.data()) * scale);
    let mx = l0.max(l1);
    let (e0, e1) = ((l0 - mx).exp(), (l1 - mx).exp());
    let (p0, p1) = (e0 / (e0 + e1), e1 / (e0 + e1));
    let mix: Vec<f64> = (0..d).map(|i| p0 * v_t[i] + p1 * cached.v.data()[i]).collect();
    let a = vecmat(&mix, b.self_attn.w_o.data(), d);
    let x1: Vec<f64> = (0..d).map(|i| x0[i] + g1[i] * a[i]).collect();

    // one external token: softmax weight is 1 whatever the query, so the output is its value through W_O
    let c = vecmat(ext.v.data(), b.cross_attn.w_o.data(), d);
    let x2: Vec<f64> = (0..d).map(|i| x1[i] + c[i]).collect();

    let h2: Vec<f64> = ln(&x2).iter().enumerate().map(|(i, v)| v * (1.0 + sc2[i]) + sh2[i]).collect();
    let mut u = vecmat(&h2, b.ffn.w1.data(), 6);
    for (uv, bv) in u.iter_mut().zip(b.ffn.b1.data()) {
        *uv = gelu(*uv + bv);
    }
    let mut f = vecmat(&u, b.ffn.w2.data(), d);
    for (fv, bv) in f.iter_mut().zip(b.ffn.b2.data()) {
        *fv += bv;
    }
    let want: Vec<f64> = (0..d).map(|i| x2[i] + g2[i] * f[i]).collect();
    for (g, w) in got.data().iter().zip(&want) {
        assert!((g - w).abs() < 1e-9, "{g} vs {w}");
    }
}

#[test]
fn reference_branch_cache_shape_and_validation() {
    let m = DitModel::<f64>::new(small_cfg()).unwrap();
    let s = scene(m.config(), TaskKind::Id, (2, 2, 3), 9);
    let cache = m.ref_branch_forward(&s.reference, &s.task, s.target.grid(), None).unwrap();
    assert_eq!(cache.num_layers(), m.config().layers);
    assert_eq!(cache.tokens(), 12);
    assert_eq!(cache.segments[0].bias, PositionBias { temporal: 2, width: 0, height: 0 });
    assert_eq!(cache.target_extent, [2, 3]);

    // reference latent built for ID, presented as Style
    let style = TaskSpec::new(TaskKind::Style);
    assert!(m.ref_branch_forward(&s.reference, &style, s.target.grid(), None).is_err());
}

#[test]
fn model_forward_basics() {
    let mut m = DitModel::<f64>::new(small_cfg()).unwrap();
    let s = scene(m.config(), TaskKind::Effect, (2, 2, 2), 10);
    let cache = m.ref_branch_forward(&s.reference, &s.task, s.target.grid(), None).unwrap();
    let cond = Conditioning { cache: &cache, context: None };
    let a = m.model_forward(&s.target, cond, 0.6).unwrap();
    let b = m.model_forward(&s.target, cond, 0.6).unwrap();
    assert_eq!(a.shape(), &[2, 2, 2, 4]);
    assert_eq!(a, b);
    assert!(a.max_abs() > 0.0);

    m.head = zero_like(&m.head);
    let z = m.model_forward(&s.target, cond, 0.6).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn model_forward_rejects_foreign_caches() {
    let m = DitModel::<f64>::new(small_cfg()).unwrap();
    let other = DitModel::<f64>::new(DitConfig { seed: 99, ..small_cfg() }).unwrap();
    let s = scene(m.config(), TaskKind::Motion, (2, 2, 2), 12);
    let foreign = other.ref_branch_forward(&s.reference, &s.task, s.target.grid(), None).unwrap();
    let err = m
        .model_forward(&s.target, Conditioning { cache: &foreign, context: None }, 0.5)
        .unwrap_err();
    assert!(matches!(err, Error::CacheMismatch(_)));

    // cache whose offsets were derived for a wider target
    let wide = m.ref_branch_forward(&s.reference, &s.task, (2, 2, 5), None).unwrap();
    assert!(m.model_forward(&s.target, Conditioning { cache: &wide, context: None }, 0.5).is_err());

    let mut tampered = m.ref_branch_forward(&s.reference, &s.task, s.target.grid(), None).unwrap();
    tampered.segments[0].bias.width += 1;
    assert!(m.model_forward(&s.target, Conditioning { cache: &tampered, context: None }, 0.5).is_err());
}

#[test]
fn single_step_sample_is_one_euler_update() {
    let m = DitModel::<f64>::new(small_cfg()).unwrap();
    let s = scene(m.config(), TaskKind::Motion, (2, 2, 2), 13);
    let cache = m.ref_branch_forward(&s.reference, &s.task, s.target.grid(), None).unwrap();
    let cond = Conditioning { cache: &cache, context: None };
    let v = m.model_forward(&s.target.with_noise_part(&s.z_init).unwrap(), cond, 1.0).unwrap();
    m.counters().reset();
    let z = sample(&m, &s.target, cond, 1, &s.z_init).unwrap();
    assert_eq!(m.counters().snapshot(), ForwardCounts { reference: 0, target: 1, joint: 0 });
    assert_eq!(z, s.z_init.sub(&v).unwrap());
    assert!(sample(&m, &s.target, cond, 0, &s.z_init).is_err());
}

#[test]
fn cached_sampling_equals_recompute_and_counts_passes() {
    let m = DitModel::<f64>::new(small_cfg()).unwrap();
    let s = scene(m.config(), TaskKind::Camera, (2, 2, 3), 14);
    let ctx = context(&m, 3, 15);
    for steps in [1, 4] {
        m.counters().reset();
        let cache = m.ref_branch_forward(&s.reference, &s.task, s.target.grid(), None).unwrap();
        let cond = Conditioning { cache: &cache, context: Some(&ctx) };
        let cached = sample(&m, &s.target, cond, steps, &s.z_init).unwrap();
        assert_eq!(m.counters().snapshot(), ForwardCounts { reference: 1, target: steps, joint: 0 });
        let recomputed = sample_recompute(&m, &s.target, &s.reference, &s.task, Some(&ctx), steps, &s.z_init).unwrap();
        assert_eq!(cached, recomputed);
    }
}

#[test]
fn joint_topology_matches_decoupled() {
    let m = DitModel::<f64>::new(small_cfg()).unwrap();
    for kind in TaskKind::ALL {
        let s = scene(m.config(), kind, (2, 2, 2), 16);
        let ctx = context(&m, 4, 17);
        let cache = m.ref_branch_forward(&s.reference, &s.task, s.target.grid(), None).unwrap();
        let cond = Conditioning { cache: &cache, context: Some(&ctx) };
        let a = sample(&m, &s.target, cond, 3, &s.z_init).unwrap();
        let b = sample_joint(&m, &s.target, &s.reference, &s.task, Some(&ctx), 3, &s.z_init).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-10, "{kind}");
    }
}

#[test]
fn reference_cache_is_independent_of_schedule() {
    let m = DitModel::<f64>::new(small_cfg()).unwrap();
    let s = scene(m.config(), TaskKind::Style, (2, 2, 2), 18);
    let before = m.ref_branch_forward(&s.reference, &s.task, s.target.grid(), None).unwrap();
    let cond = Conditioning { cache: &before, context: None };
    sample(&m, &s.target, cond, 2, &s.z_init).unwrap();
    sample(&m, &s.target, cond, 7, &s.z_init).unwrap();
    let after = m.ref_branch_forward(&s.reference, &s.task, s.target.grid(), None).unwrap();
    assert_eq!(before.to_bytes(), after.to_bytes());
}

#[test]
fn reference_cross_attention_flag() {
    let off = DitModel::<f64>::new(small_cfg()).unwrap();
    let on = DitModel::<f64>::new(DitConfig { ref_cross_attention: true, ..small_cfg() }).unwrap();
    let s = scene(off.config(), TaskKind::Motion, (1, 2, 2), 19);
    let ctx_off = context(&off, 3, 20);
    let ctx_on = context(&on, 3, 20);
    let plain = off.ref_branch_forward(&s.reference, &s.task, s.target.grid(), None).unwrap();
    let with_ctx = off.ref_branch_forward(&s.reference, &s.task, s.target.grid(), Some(&ctx_off)).unwrap();
    assert_eq!(plain.layers, with_ctx.layers);
    let a = on.ref_branch_forward(&s.reference, &s.task, s.target.grid(), None).unwrap();
    let b = on.ref_branch_forward(&s.reference, &s.task, s.target.grid(), Some(&ctx_on)).unwrap();
    assert_ne!(a.layers, b.layers);
}

#[test]
fn checkpoint_round_trip() {
    let m = DitModel::<f32>::new(small_cfg()).unwrap();
    let bytes = m.to_checkpoint_bytes();
    let back = DitModel::<f32>::from_checkpoint_bytes(&bytes).unwrap();
    assert_eq!(back.config(), m.config());
    for ((na, a), (nb, b)) in m.named_tensors().into_iter().zip(back.named_tensors()) {
        assert_eq!(na, nb);
        assert_eq!(a.to_le_bytes(), b.to_le_bytes());
    }
    assert_eq!(back.to_checkpoint_bytes(), bytes);

    let manifest = read_manifest(&bytes).unwrap();
    let first_block = manifest.tensors.iter().filter(|t| t.name.starts_with("blocks.0.")).count();
    assert_eq!(first_block, 14);

    let wide = DitModel::<f64>::from_checkpoint_bytes(&bytes).unwrap();
    assert_eq!(wide.head.data()[0], m.head.data()[0] as f64);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(DitModel::<f32>::from_checkpoint_bytes(&bad).is_err());
    assert!(DitModel::<f32>::from_checkpoint_bytes(&bytes[..bytes.len() - 4]).is_err());
}

#[test]
fn seeded_construction_is_deterministic() {
    let a = DitModel::<f64>::new(small_cfg()).unwrap();
    let b = DitModel::<f64>::new(small_cfg()).unwrap();
    assert_eq!(a.to_checkpoint_bytes(), b.to_checkpoint_bytes());
    let tokens = matmul(&Array::eye(small_cfg().in_channels()), &a.patch_embed).unwrap();
    assert_eq!(tokens, a.patch_embed);
}
