//! FLOP model and wall-clock comparison of the joint and decoupled topologies.
//!
//! Counting convention: one multiply-add is 2 FLOPs. Per attended
//! (query, key) pair and layer, scores and value mixing each cost `2 D`,
//! so the pair constant is `c = 4 D`. Per token and layer the dense work is
//! `8 D^2` for the four self-attention projections plus `4 D F` for the
//! feed-forward. Cross-attention and modulation are ignored; they are the
//! same for the target branch in both topologies.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dit::{sample, sample_joint, Conditioning, DitConfig, DitModel};
use crate::error::{invalid, Error, Result};
use crate::latents::{build_reference_latent, build_target_latent, LatentBlock, TaskKind, TaskSpec};
use crate::numerics::{parallel_enabled, seeded_normal, Array, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub n_ref: usize,
    pub n_tgt: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub layers: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopologyFlops {
    pub attention: f64,
    pub tokens: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Flops {
    pub joint: TopologyFlops,
    pub decoupled: TopologyFlops,
}

impl Flops {
    pub fn attention_ratio(&self) -> f64 {
        self.decoupled.attention / self.joint.attention
    }

    pub fn total_ratio(&self) -> f64 {
        self.decoupled.total / self.joint.total
    }

    /// Share of the total saving that comes from attention; the rest is per-token work.
    pub fn attention_share_of_saving(&self) -> f64 {
        let saved = self.joint.total - self.decoupled.total;
        if saved == 0.0 {
            0.0
        } else {
            (self.joint.attention - self.decoupled.attention) / saved
        }
    }
}

impl CostModel {
    pub fn pair_constant(&self) -> f64 {
        4.0 * self.model_dim as f64
    }

    pub fn token_constant(&self) -> f64 {
        let (d, f) = (self.model_dim as f64, self.ffn_dim as f64);
        8.0 * d * d + 4.0 * d * f
    }

    pub fn flops(&self) -> Flops {
        let (nr, nt) = (self.n_ref as f64, self.n_tgt as f64);
        let (s, l) = (self.steps as f64, self.layers as f64);
        let (c, k) = (self.pair_constant(), self.token_constant());
        let topo = |attention: f64, tokens: f64| TopologyFlops {
            attention,
            tokens,
            total: attention + tokens,
        };
        Flops {
            joint: topo(s * l * c * (nr + nt) * (nr + nt), s * l * k * (nr + nt)),
            decoupled: topo(s * l * c * nt * (nt + nr) + l * c * nr * nr, s * l * k * nt + l * k * nr),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub model: DitConfig,
    /// Target latent grid `(f, h, w)`.
    pub target_grid: [usize; 3],
    /// Reference latent grid `(f, h, w)`.
    pub reference_grid: [usize; 3],
    pub steps: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
    pub task: TaskKind,
    /// Largest admissible `max |joint - decoupled|` before timing.
    pub tolerance: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            model: DitConfig::default(),
            target_grid: [2, 4, 8],
            reference_grid: [2, 4, 8],
            steps: 20,
            repeats: 3,
            warmup: 1,
            seed: 0,
            task: TaskKind::Motion,
            tolerance: 1e-6,
        }
    }
}

impl BenchConfig {
    pub fn cost_model(&self) -> CostModel {
        CostModel {
            n_ref: self.reference_grid.iter().product(),
            n_tgt: self.target_grid.iter().product(),
            model_dim: self.model.model_dim,
            ffn_dim: self.model.ffn_dim,
            layers: self.model.layers,
            steps: self.steps,
        }
    }

    fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.steps == 0 || self.repeats == 0 {
            return Err(invalid("bench", "steps and repeats must be at least 1"));
        }
        if self.target_grid.contains(&0) || self.reference_grid.contains(&0) {
            return Err(invalid("bench", "grids must be non-empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineFingerprint {
    pub os: String,
    pub arch: String,
    pub logical_cpus: usize,
    pub parallel_matmul: bool,
    pub threads: usize,
}

impl MachineFingerprint {
    pub fn current() -> Self {
        Self {
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            parallel_matmul: parallel_enabled(),
            threads: if parallel_enabled() { rayon::current_num_threads() } else { 1 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub median_ms: f64,
    pub samples_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub cost: CostModel,
    pub flops: Flops,
    pub joint: Timing,
    pub decoupled: Timing,
    /// `decoupled / joint` wall-clock.
    pub measured_ratio: f64,
    /// `1 - measured_ratio`.
    pub measured_reduction: f64,
    pub equivalence_max_abs_diff: f64,
    pub machine: MachineFingerprint,
}

struct Setup {
    model: DitModel<f32>,
    target: LatentBlock<f32>,
    reference: LatentBlock<f32>,
    task: TaskSpec,
    z_init: Array<f32>,
}

fn setup(cfg: &BenchConfig) -> Result<Setup> {
    let model = DitModel::<f32>::new(cfg.model.clone())?;
    let n = cfg.model.latent_channels;
    let [f, h, w] = cfg.target_grid;
    let [rf, rh, rw] = cfg.reference_grid;
    let mut rng = Rng::for_label(cfg.seed, "bench.inputs");
    let cond = seeded_normal([1, h, w, n], &mut rng);
    let z_init = seeded_normal([f, h, w, n], &mut rng);
    let task = TaskSpec::new(cfg.task);
    let reference = build_reference_latent(&seeded_normal([rf, rh, rw, n], &mut rng), &task)?;
    Ok(Setup {
        target: build_target_latent(&cond, &z_init)?,
        model,
        reference,
        task,
        z_init,
    })
}

fn run_decoupled(s: &Setup, steps: usize) -> Result<Array<f32>> {
    let cache = s.model.ref_branch_forward(&s.reference, &s.task, s.target.grid(), None)?;
    sample(&s.model, &s.target, Conditioning { cache: &cache, context: None }, steps, &s.z_init)
}

fn run_joint(s: &Setup, steps: usize) -> Result<Array<f32>> {
    sample_joint(&s.model, &s.target, &s.reference, &s.task, None, steps, &s.z_init)
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

fn time(warmup: usize, repeats: usize, mut f: impl FnMut() -> Result<Array<f32>>) -> Result<Timing> {
    for _ in 0..warmup {
        f()?;
    }
    let mut samples_ms = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        std::hint::black_box(f()?);
        samples_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok(Timing {
        median_ms: median(&samples_ms),
        samples_ms,
    })
}

/// Checks that both topologies agree, then times each with median-of-`repeats`.
pub fn timed_run(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let s = setup(cfg)?;
    let a = run_decoupled(&s, cfg.steps)?;
    let b = run_joint(&s, cfg.steps)?;
    let diff = a.max_abs_diff(&b)?;
    if !(diff <= cfg.tolerance) {
        return Err(Error::TopologyMismatch {
            max_abs_diff: diff,
            tolerance: cfg.tolerance,
        });
    }
    let joint = time(cfg.warmup, cfg.repeats, || run_joint(&s, cfg.steps))?;
    let decoupled = time(cfg.warmup, cfg.repeats, || run_decoupled(&s, cfg.steps))?;
    let cost = cfg.cost_model();
    let measured_ratio = decoupled.median_ms / joint.median_ms;
    Ok(BenchReport {
        config: cfg.clone(),
        cost,
        flops: cost.flops(),
        joint,
        decoupled,
        measured_ratio,
        measured_reduction: 1.0 - measured_ratio,
        equivalence_max_abs_diff: diff,
        machine: MachineFingerprint::current(),
    })
}

/// Runs `base` once per step count.
pub fn sweep(base: &BenchConfig, steps: &[usize]) -> Result<Vec<BenchReport>> {
    steps
        .iter()
        .map(|&s| timed_run(&BenchConfig { steps: s, ..base.clone() }))
        .collect()
}

pub const CSV_COLUMNS: [&str; 6] = ["N_ref", "N_tgt", "S", "topology", "analytic_flops", "wall_ms"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    #[serde(rename = "N_ref")]
    pub n_ref: usize,
    #[serde(rename = "N_tgt")]
    pub n_tgt: usize,
    #[serde(rename = "S")]
    pub steps: usize,
    pub topology: String,
    pub analytic_flops: f64,
    pub wall_ms: f64,
}

pub fn csv_rows(reports: &[BenchReport]) -> Vec<CsvRow> {
    reports
        .iter()
        .flat_map(|r| {
            [("joint", r.flops.joint.total, r.joint.median_ms), ("decoupled", r.flops.decoupled.total, r.decoupled.median_ms)]
                .map(|(topology, flops, ms)| CsvRow {
                    n_ref: r.cost.n_ref,
                    n_tgt: r.cost.n_tgt,
                    steps: r.cost.steps,
                    topology: topology.to_string(),
                    analytic_flops: flops,
                    wall_ms: ms,
                })
        })
        .collect()
}

/// Writes `bench_report.json` and `bench_sweep.csv` into `dir`.
pub fn emit_report(reports: &[BenchReport], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("bench_report.json"), serde_json::to_string_pretty(reports)?)?;
    let mut w = csv::Writer::from_path(dir.join("bench_sweep.csv"))?;
    for row in csv_rows(reports) {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<BenchReport>> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(n_ref: usize, n_tgt: usize, steps: usize) -> CostModel {
        CostModel {
            n_ref,
            n_tgt,
            model_dim: 128,
            ffn_dim: 512,
            layers: 4,
            steps,
        }
    }

    #[test]
    fn attention_ratio_closed_forms() {
        assert!((cm(64, 64, 1).flops().attention_ratio() - 0.75).abs() < 1e-12);
        let far = cm(64, 64, 1_000_000).flops().attention_ratio();
        assert!((far - 0.5).abs() < 1e-6);
        let f = cm(0, 64, 7).flops();
        assert_eq!(f.joint, f.decoupled);
    }

    #[test]
    fn ratio_decreases_with_steps() {
        let mut prev = f64::INFINITY;
        for s in 1..50 {
            let r = cm(40, 64, s).flops();
            assert!(r.total_ratio() < prev);
            prev = r.total_ratio();
        }
    }

    #[test]
    fn token_work_counts() {
        let c = cm(10, 20, 3);
        let f = c.flops();
        assert_eq!(f.joint.tokens, 3.0 * 4.0 * 30.0 * c.token_constant());
        assert_eq!(f.decoupled.tokens, 3.0 * 4.0 * 20.0 * c.token_constant() + 4.0 * 10.0 * c.token_constant());
        assert!(f.attention_share_of_saving() > 0.0 && f.attention_share_of_saving() < 1.0);
    }

    fn tiny() -> BenchConfig {
        BenchConfig {
            model: DitConfig {
                layers: 2,
                model_dim: 16,
                heads: 2,
                ffn_dim: 32,
                latent_channels: 4,
                time_embed_dim: 16,
                ..DitConfig::default()
            },
            target_grid: [1, 2, 2],
            reference_grid: [1, 2, 2],
            steps: 2,
            repeats: 1,
            warmup: 0,
            ..BenchConfig::default()
        }
    }

    #[test]
    fn report_round_trip_and_csv() {
        let reports = sweep(&tiny(), &[1, 2]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        emit_report(&reports, dir.path()).unwrap();
        assert_eq!(read_report(dir.path().join("bench_report.json")).unwrap(), reports);
        let mut rd = csv::Reader::from_path(dir.path().join("bench_sweep.csv")).unwrap();
        assert_eq!(rd.headers().unwrap().iter().collect::<Vec<_>>(), CSV_COLUMNS);
        let rows: Vec<CsvRow> = rd.deserialize().map(|r| r.unwrap()).collect();
        assert_eq!(rows.len(), 4);
        for (row, r) in rows.chunks(2).zip(&reports) {
            assert_eq!(row[0].analytic_flops, r.cost.flops().joint.total);
            assert_eq!(row[1].analytic_flops, r.cost.flops().decoupled.total);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(timed_run(&BenchConfig { steps: 0, ..tiny() }).is_err());
        assert!(timed_run(&BenchConfig { target_grid: [0, 1, 1], ..tiny() }).is_err());
    }

    #[test]
    fn mismatch_invalidates_run() {
        let err = timed_run(&BenchConfig { tolerance: -1.0, ..tiny() }).unwrap_err();
        assert!(matches!(err, Error::TopologyMismatch { .. }));
    }
}
