//! Wall-clock measurements: forward+backward cost of one dual or single block,
//! and per-stage timings of a pipeline run. Records only; nothing here gates
//! correctness.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use mmdc_tensor::{NdArray, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{BlockKind, ModelConfig};
use crate::error::{Error, Result};
use crate::forward::{block_forward, BlockVars, Hidden, LayerState};
use crate::model::{Block, StreamWeights};
use crate::pipeline::{read_summaries, Stage};

const WARMUP: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub op: String,
    /// Width settings and batch size the timing was taken at.
    pub config: String,
    pub iterations: usize,
    pub median_s: f64,
    pub p90_s: f64,
    pub tokens_per_s: f64,
}

impl BenchRecord {
    pub const CSV_HEADER: &'static str = "op,config,iterations,median_s,p90_s,tokens_per_s";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.op, self.config, self.iterations, self.median_s, self.p90_s, self.tokens_per_s
        )
    }
}

pub fn records_csv(records: &[BenchRecord]) -> String {
    let mut out = format!("{}\n", BenchRecord::CSV_HEADER);
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Value at quantile `q` of sorted samples (nearest rank).
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let i = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[i]
}

fn fingerprint(cfg: &ModelConfig, batch: usize) -> String {
    format!(
        "d{}-h{}-mlp{}-seq{}-b{batch}",
        cfg.d_model,
        cfg.n_heads,
        cfg.mlp_hidden,
        cfg.seq_len()
    )
}

/// Median and p90 of `iters` timed forward+backward passes through one block
/// on random input, after a short warmup.
pub fn bench_block(kind: BlockKind, cfg: &ModelConfig, batch: usize, iters: usize) -> Result<BenchRecord> {
    if iters < 10 {
        return Err(Error::config("bench.iters", ">= 10", iters));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let block = match kind {
        BlockKind::Dual => Block::Dual {
            text: StreamWeights::init(cfg, &mut rng),
            image: StreamWeights::init(cfg, &mut rng),
        },
        BlockKind::Single => Block::Single {
            shared: StreamWeights::init(cfg, &mut rng),
        },
    };
    let d = cfg.d_model;
    let text = NdArray::randn(&[batch, cfg.text_len, d], 1.0, &mut rng);
    let image = NdArray::randn(&[batch, cfg.n_patches(), d], 1.0, &mut rng);
    let cond = NdArray::randn(&[batch, d], 1.0, &mut rng);
    let dual: LayerState = Hidden::Dual { text, image };
    let fused = dual.fused();
    let mut times = Vec::with_capacity(iters);
    for i in 0..WARMUP + iters {
        let start = Instant::now();
        let mut tape = Tape::<f32>::new();
        let vars = BlockVars::bind(&mut tape, 0, &block, true);
        let c = tape.constant(cond.clone());
        let state = match kind {
            BlockKind::Dual => dual.map(|a| tape.constant(a.clone())),
            BlockKind::Single => Hidden::Fused(tape.constant(fused.clone())),
        };
        let out = block_forward(&mut tape, cfg, &vars, state, c)?;
        let parts: Vec<_> = match out {
            Hidden::Dual { text, image } => vec![text, image],
            Hidden::Fused(x) => vec![x],
        };
        let mut loss = tape.mean(parts[0])?;
        for &p in &parts[1..] {
            let m = tape.mean(p)?;
            loss = tape.add(loss, m)?;
        }
        tape.backward(loss)?;
        if i >= WARMUP {
            times.push(start.elapsed().as_secs_f64());
        }
    }
    times.sort_by(f64::total_cmp);
    let median = quantile(&times, 0.5);
    Ok(BenchRecord {
        op: format!(
            "{}_block_fwd_bwd",
            match kind {
                BlockKind::Dual => "dual",
                BlockKind::Single => "single",
            }
        ),
        config: fingerprint(cfg, batch),
        iterations: iters,
        median_s: median,
        p90_s: quantile(&times, 0.9),
        tokens_per_s: (batch * cfg.seq_len()) as f64 / median,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub rows: Vec<(Stage, f64)>,
    pub total_s: f64,
}

impl StageTimings {
    /// The stage with the largest wall-clock.
    pub fn dominant(&self) -> Option<Stage> {
        self.rows.iter().max_by(|a, b| a.1.total_cmp(&b.1)).map(|r| r.0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,wall_clock_s\n");
        for (s, t) in &self.rows {
            let _ = writeln!(out, "{},{t}", s.name());
        }
        let _ = writeln!(out, "total,{}", self.total_s);
        out
    }
}

/// Per-stage wall-clock from the summaries under `root`.
pub fn stage_timings(root: &Path) -> Result<StageTimings> {
    let rows: Vec<(Stage, f64)> = read_summaries(root)?
        .into_iter()
        .map(|s| (s.stage, s.wall_clock_s))
        .collect();
    Ok(StageTimings {
        total_s: rows.iter().map(|r| r.1).sum(),
        rows,
    })
}
