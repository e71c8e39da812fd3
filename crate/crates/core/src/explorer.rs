//! The optimize loop.
//!
//! Each round evaluates the current graph, lists its critical buffers from
//! the largest down and, for the first buffer that admits an improving
//! tiling, applies the best config found. A round that improves nothing ends
//! the loop. Candidates of one buffer are evaluated independently, in
//! parallel with the `parallel` feature, and the winner is picked by a total
//! order so parallelism never changes the result.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::discovery::{enumerate_configs, find_critical_buffers, DiscoveryOptions, TilingConfig};
use crate::exec::{execute, max_relative_deviation, outputs_match, random_inputs, ExecError};
use crate::fusion::FusedGroup;
use crate::ir::Graph;
use crate::pipeline::{Evaluation, LayoutEntry, Pipeline, PipelineError};
use crate::schedule::Schedule;
use crate::transform::apply_tiling;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fdt,
    Ffmt,
    Both,
    None,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Fdt => "fdt",
            Method::Ffmt => "ffmt",
            Method::Both => "both",
            Method::None => "none",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Method, String> {
        [Method::Fdt, Method::Ffmt, Method::Both, Method::None]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method `{s}` (expected fdt, ffmt, both or none)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Sequential,
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifyOptions {
    pub seed: u64,
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExplorerOptions {
    pub method: Method,
    pub max_partitions: usize,
    pub pipeline: Pipeline,
    pub eval_mode: EvalMode,
    /// Rounds after which the loop stops even if it still improves.
    pub max_rounds: usize,
    pub verify: Option<VerifyOptions>,
}

impl Default for ExplorerOptions {
    fn default() -> Self {
        ExplorerOptions {
            method: Method::Both,
            max_partitions: 25,
            pipeline: exploration_pipeline(Duration::from_secs(30)),
            eval_mode: if cfg!(feature = "parallel") {
                EvalMode::Parallel
            } else {
                EvalMode::Sequential
            },
            max_rounds: 64,
            verify: None,
        }
    }
}

/// Solver budgets for exploration. Every candidate goes through both exact
/// solvers, so their node budgets are kept small; the time limit still
/// applies on top.
pub fn exploration_pipeline(timeout: Duration) -> Pipeline {
    let mut p = Pipeline::with_timeout(timeout);
    p.schedule.max_states = 2_000;
    p.plan.max_nodes = 2_000;
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Metrics {
    pub peak_bytes: usize,
    pub macs: u64,
}

/// Outcome of evaluating one candidate config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CandidateRecord {
    pub config: TilingConfig,
    pub result: Result<Metrics, String>,
}

/// One attempt to tile a critical buffer.
#[derive(Debug, Clone, Serialize)]
pub struct RoundRecord {
    pub critical_buffer: String,
    pub configs_evaluated: usize,
    pub peak_before: usize,
    /// Peak after the accepted config, if one was accepted.
    pub peak_after: Option<usize>,
    pub accepted: Option<TilingConfig>,
    #[serde(skip)]
    pub candidates: Vec<CandidateRecord>,
    #[serde(skip)]
    pub elapsed: Duration,
}

#[derive(Debug, Clone, Default)]
pub struct StageTimings {
    pub evaluation: Duration,
    pub discovery: Duration,
    pub candidates: Duration,
    pub verification: Duration,
}

#[derive(Debug, Clone, Serialize)]
pub struct Verification {
    pub samples: usize,
    pub seed: u64,
    pub passed: bool,
    pub max_relative_deviation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExplorationReport {
    pub method: Method,
    pub baseline: Metrics,
    pub optimized: Metrics,
    pub rounds: Vec<RoundRecord>,
    pub schedule: Schedule,
    pub layout: Vec<LayoutEntry>,
    pub groups: Vec<FusedGroup>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verification: Option<Verification>,
    #[serde(skip)]
    pub timings: StageTimings,
}

impl ExplorationReport {
    /// Configs accepted, in order.
    pub fn accepted(&self) -> impl Iterator<Item = &TilingConfig> {
        self.rounds.iter().filter_map(|r| r.accepted.as_ref())
    }

    pub fn savings_pct(&self) -> f64 {
        pct(
            self.baseline.peak_bytes as f64 - self.optimized.peak_bytes as f64,
            self.baseline.peak_bytes as f64,
        )
    }

    pub fn mac_overhead_pct(&self) -> f64 {
        pct(
            self.optimized.macs as f64 - self.baseline.macs as f64,
            self.baseline.macs as f64,
        )
    }
}

fn pct(delta: f64, base: f64) -> f64 {
    if base == 0.0 {
        0.0
    } else {
        100.0 * delta / base
    }
}

struct Candidate {
    graph: Graph,
    eval: Evaluation,
}

/// Applies `config` and evaluates the result.
pub fn evaluate_config(
    graph: &Graph,
    config: &TilingConfig,
    pipeline: &Pipeline,
) -> Result<(Graph, Evaluation), PipelineError> {
    let tiled = apply_tiling(graph, config)?;
    let eval = pipeline.evaluate(&tiled)?;
    Ok((tiled, eval))
}

fn evaluate_all(
    graph: &Graph,
    configs: &[TilingConfig],
    opts: &ExplorerOptions,
) -> Vec<Result<Candidate, String>> {
    let run = |c: &TilingConfig| {
        evaluate_config(graph, c, &opts.pipeline)
            .map(|(graph, eval)| Candidate { graph, eval })
            .map_err(|e| e.to_string())
    };
    match opts.eval_mode {
        #[cfg(feature = "parallel")]
        EvalMode::Parallel => {
            use rayon::prelude::*;
            configs.par_iter().map(run).collect()
        }
        _ => configs.iter().map(run).collect(),
    }
}

/// Runs the optimize loop on a valid graph.
pub fn optimize(
    graph: &Graph,
    opts: &ExplorerOptions,
) -> Result<(Graph, ExplorationReport), PipelineError> {
    let mut timings = StageTimings::default();
    let t = Instant::now();
    let mut eval = opts.pipeline.evaluate(graph)?;
    timings.evaluation += t.elapsed();
    let baseline = Metrics {
        peak_bytes: eval.peak(),
        macs: eval.macs,
    };
    let mut current = graph.clone();
    let mut rounds = Vec::new();
    let discovery = DiscoveryOptions {
        depthwise: matches!(opts.method, Method::Fdt | Method::Both),
        feature_map: matches!(opts.method, Method::Ffmt | Method::Both),
        max_partitions: opts.max_partitions,
    };

    let mut accepted_rounds = 0;
    while opts.method != Method::None && accepted_rounds < opts.max_rounds {
        let t = Instant::now();
        let crits = find_critical_buffers(
            &eval.layout,
            &eval.lifetimes,
            &eval.conflicts,
            &opts.pipeline.plan,
        );
        timings.discovery += t.elapsed();
        let mut improved = None;
        for crit in crits {
            let start = Instant::now();
            let configs = enumerate_configs(&current, &crit.tensor, &discovery).unwrap_or_default();
            timings.discovery += start.elapsed();
            let t = Instant::now();
            let results = evaluate_all(&current, &configs, opts);
            timings.candidates += t.elapsed();

            let peak_before = eval.peak();
            let mut best: Option<(usize, (usize, u64, usize))> = None;
            for (i, (c, r)) in configs.iter().zip(&results).enumerate() {
                let Ok(cand) = r else { continue };
                let (peak, macs) = (cand.eval.peak(), cand.eval.macs);
                if peak >= peak_before || (opts.method == Method::Fdt && macs > eval.macs) {
                    continue;
                }
                let key = (peak, macs, c.n_partitions());
                if best.is_none_or(|(_, k)| key < k) {
                    best = Some((i, key));
                }
            }
            let candidates: Vec<CandidateRecord> = configs
                .iter()
                .zip(&results)
                .map(|(c, r)| CandidateRecord {
                    config: c.clone(),
                    result: r
                        .as_ref()
                        .map(|cand| Metrics {
                            peak_bytes: cand.eval.peak(),
                            macs: cand.eval.macs,
                        })
                        .map_err(Clone::clone),
                })
                .collect();
            let mut record = RoundRecord {
                critical_buffer: crit.tensor.clone(),
                configs_evaluated: configs.len(),
                peak_before,
                peak_after: None,
                accepted: None,
                candidates,
                elapsed: start.elapsed(),
            };
            if let Some((i, _)) = best {
                let mut results = results;
                let Ok(cand) = results.swap_remove(i) else {
                    unreachable!("best candidate evaluated")
                };
                log::info!(
                    "tiling `{}` with {:?} x{}: {} -> {} bytes",
                    crit.tensor,
                    configs[i].kind,
                    configs[i].partitions,
                    peak_before,
                    cand.eval.peak()
                );
                record.peak_after = Some(cand.eval.peak());
                record.accepted = Some(configs[i].clone());
                rounds.push(record);
                improved = Some(cand);
                break;
            }
            rounds.push(record);
        }
        match improved {
            Some(c) => {
                current = c.graph;
                eval = c.eval;
                accepted_rounds += 1;
            }
            None => break,
        }
    }

    let verification = match opts.verify {
        Some(v) => {
            let t = Instant::now();
            let result = verify(graph, &current, v).unwrap_or(Verification {
                samples: v.samples,
                seed: v.seed,
                passed: false,
                max_relative_deviation: f64::INFINITY,
            });
            timings.verification += t.elapsed();
            Some(result)
        }
        None => None,
    };
    let report = ExplorationReport {
        method: opts.method,
        baseline,
        optimized: Metrics {
            peak_bytes: eval.peak(),
            macs: eval.macs,
        },
        rounds,
        schedule: eval.schedule.clone(),
        layout: eval.layout_entries(),
        groups: eval.groups.clone(),
        verification,
        timings,
    };
    Ok((current, report))
}

/// Executes both graphs on `samples` seeded random inputs and compares the
/// model outputs.
pub fn verify(
    original: &Graph,
    tiled: &Graph,
    opts: VerifyOptions,
) -> Result<Verification, ExecError> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut passed = true;
    let mut worst: f64 = 0.0;
    for _ in 0..opts.samples {
        let inputs = random_inputs(original, &mut rng);
        let a = execute(original, &inputs)?;
        let b = execute(tiled, &inputs)?;
        passed &= outputs_match(&a, &b);
        for (id, x) in &a {
            let dev = b
                .get(id)
                .and_then(|y| max_relative_deviation(x, y))
                .unwrap_or(f64::INFINITY);
            worst = worst.max(dev);
        }
    }
    Ok(Verification {
        samples: opts.samples,
        seed: opts.seed,
        passed,
        max_relative_deviation: worst,
    })
}
