//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the test
//! harness so the lines are always printed.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeSet;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use deeptile::discovery::{
    enumerate_configs, find_critical_buffers, DiscoveryOptions, PartitionKind,
};
use deeptile::exec::{count_macs, execute, outputs_match, random_inputs};
use deeptile::explorer::{optimize, ExplorationReport, ExplorerOptions, Method};
use deeptile::fusion::fuse;
use deeptile::layout::{plan_exact, plan_heuristic, ConflictSet, PlanOptions};
use deeptile::modelgen::{generate, generate_with, random_dag, GenOptions, Template};
use deeptile::schedule::{
    compute_lifetimes, schedule_cost, schedule_exact, schedule_hill_valley, ScheduleOptions,
};
use deeptile::transform::apply_tiling;
use deeptile::Graph;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    ensure(start.elapsed() < limit, || {
        format!("took {:.1?}, limit {limit:?}", start.elapsed())
    })
}

/// Every template at default scale, plus the 8-bit variants.
fn models() -> Vec<(String, Graph)> {
    let mut out: Vec<(String, Graph)> = Template::ALL
        .iter()
        .map(|&t| (t.name().to_owned(), generate(t, 1).unwrap()))
        .collect();
    for t in Template::ALL.into_iter().filter(|t| t.supports_int8()) {
        out.push((
            format!("{t}-int8"),
            generate_with(
                t,
                1,
                &GenOptions {
                    scale: 1,
                    int8: true,
                },
            )
            .unwrap(),
        ));
    }
    out
}

fn run(g: &Graph, method: Method) -> (Graph, ExplorationReport) {
    optimize(
        g,
        &ExplorerOptions {
            method,
            ..ExplorerOptions::default()
        },
    )
    .unwrap()
}

/// Replays the explored rounds, calling `visit(graph_before_round, round)`.
fn replay(
    g: &Graph,
    report: &ExplorationReport,
    mut visit: impl FnMut(&Graph, &deeptile::explorer::RoundRecord) -> Result<(), String>,
) -> Result<(), String> {
    let mut current = g.clone();
    for round in &report.rounds {
        visit(&current, round)?;
        if let Some(c) = &round.accepted {
            current = apply_tiling(&current, c).map_err(|e| e.to_string())?;
        }
    }
    Ok(())
}

fn equivalence() -> Outcome {
    let start = Instant::now();
    let (mut configs, mut runs) = (0, 0);
    for (name, g) in models() {
        let (_, report) = run(&g, Method::Both);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<_> = (0..20).map(|_| random_inputs(&g, &mut rng)).collect();
        let expected: Vec<_> = samples.iter().map(|s| execute(&g, s).unwrap()).collect();
        replay(&g, &report, |current, round| {
            for cand in round.candidates.iter().filter(|c| c.result.is_ok()) {
                let tiled =
                    apply_tiling(current, &cand.config).map_err(|e| format!("{name}: {e}"))?;
                for (s, want) in samples.iter().zip(&expected) {
                    let got = execute(&tiled, s).map_err(|e| format!("{name}: {e}"))?;
                    ensure(outputs_match(want, &got), || {
                        format!("{name}: {:?} deviates", cand.config)
                    })?;
                    runs += 1;
                }
                configs += 1;
            }
            Ok(())
        })?;
    }
    ensure(configs > 0, || "no configs explored".into())?;
    within(Duration::from_secs(60), start)?;
    Ok(format!(
        "{configs} configs, {runs} executions in {:.1?}",
        start.elapsed()
    ))
}

fn fdt_overhead() -> Outcome {
    let mut accepted = 0;
    for (name, g) in models() {
        let (_, report) = run(&g, Method::Both);
        replay(&g, &report, |current, round| {
            if let Some(c) = round
                .accepted
                .as_ref()
                .filter(|c| c.kind == PartitionKind::PdD)
            {
                let tiled = apply_tiling(current, c).map_err(|e| e.to_string())?;
                let (a, b) = (count_macs(current).total, count_macs(&tiled).total);
                ensure(a == b, || format!("{name}: {a} -> {b} macs"))?;
                accepted += 1;
            }
            Ok(())
        })?;
    }
    let g = generate(Template::CnnChain, 1).unwrap();
    let (_, report) = run(&g, Method::Ffmt);
    let first = report
        .accepted()
        .next()
        .ok_or("ffmt accepted nothing on cnn")?;
    let convs = first
        .path
        .iter()
        .filter(|n| {
            matches!(
                g.node(n).map(|n| &n.op),
                Some(deeptile::ir::OpKind::Conv2d { kernel: [3, 3], .. })
            )
        })
        .count();
    ensure(convs >= 2, || format!("ffmt path has {convs} 3x3 convs"))?;
    ensure(report.optimized.macs > report.baseline.macs, || {
        "ffmt did not add macs".into()
    })?;
    Ok(format!(
        "{accepted} fdt acceptances without overhead; ffmt on cnn {} -> {} macs",
        report.baseline.macs, report.optimized.macs
    ))
}

fn fdt_only() -> Outcome {
    let mut notes = Vec::new();
    for t in [Template::KwsLike, Template::TxtLike] {
        let g = generate(t, 1).unwrap();
        let pipeline = ExplorerOptions::default().pipeline;
        let eval = pipeline.evaluate(&g).unwrap();
        let fm = DiscoveryOptions {
            depthwise: false,
            feature_map: true,
            max_partitions: 25,
        };
        // every buffer, not only the critical ones
        let ffmt_configs: usize = eval
            .lifetimes
            .buffers
            .iter()
            .map(|b| enumerate_configs(&g, &b.tensor, &fm).map_or(0, |c| c.len()))
            .sum();
        ensure(ffmt_configs == 0, || {
            format!("{t}: {ffmt_configs} ffmt configs")
        })?;
        ensure(
            !find_critical_buffers(
                &eval.layout,
                &eval.lifetimes,
                &eval.conflicts,
                &pipeline.plan,
            )
            .is_empty(),
            || format!("{t}: no critical buffers"),
        )?;
        let (_, ffmt) = run(&g, Method::Ffmt);
        ensure(
            ffmt.optimized.peak_bytes == ffmt.baseline.peak_bytes,
            || format!("{t}: ffmt changed the peak"),
        )?;
        let (_, fdt) = run(&g, Method::Fdt);
        let savings = fdt.savings_pct();
        ensure(savings > 0.0, || format!("{t}: fdt saved nothing"))?;
        if t == Template::TxtLike {
            ensure(savings >= 50.0, || {
                format!("txt: fdt saved only {savings:.1}%")
            })?;
        }
        notes.push(format!("{t} fdt {savings:.1}%"));
    }
    Ok(notes.join(", "))
}

fn random_layout(rng: &mut ChaCha8Rng) -> (Vec<usize>, ConflictSet) {
    let n = rng.random_range(1..=8);
    let sizes: Vec<usize> = (0..n).map(|_| rng.random_range(1..=64)).collect();
    let density = rng.random_range(0.2..=1.0);
    let mut c = ConflictSet::new(n);
    for u in 0..n {
        for v in u + 1..n {
            if rng.random_bool(density) {
                c.insert(u, v);
            }
        }
    }
    (sizes, c)
}

fn layout_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut gaps = 0;
    for i in 0..200 {
        let (sizes, c) = random_layout(&mut rng);
        let exact = plan_exact(&sizes, &c, &PlanOptions::default())
            .map_err(|e| format!("instance {i}: {e}"))?;
        let oracle = common::layout_brute_force(&sizes, &c);
        ensure(exact.is_valid(&c) && exact.peak == oracle, || {
            format!("instance {i}: exact {} oracle {oracle}", exact.peak)
        })?;
        let h = plan_heuristic(&sizes, &c);
        ensure(h.peak >= exact.peak, || {
            format!("instance {i}: heuristic {} below exact", h.peak)
        })?;
        gaps += usize::from(h.peak > exact.peak);
    }
    within(Duration::from_secs(30), start)?;
    Ok(format!(
        "200 instances in {:.1?}; heuristic above optimum on {gaps}",
        start.elapsed()
    ))
}

fn schedule_exactness() -> Outcome {
    let start = Instant::now();
    let mut gaps = 0;
    for seed in 0..200 {
        let g = random_dag(seed, 10);
        let view = fuse(&g, &BTreeSet::new());
        let peak = |s| schedule_cost(&compute_lifetimes(&view, s, false).unwrap()).peak_live;
        let exact = schedule_exact(&view, &ScheduleOptions::default())
            .map_err(|e| format!("dag {seed}: {e}"))?;
        let oracle = common::schedule_brute_force(&g);
        ensure(peak(&exact) == oracle, || {
            format!("dag {seed}: exact {} oracle {oracle}", peak(&exact))
        })?;
        let hv = peak(&schedule_hill_valley(&view, false));
        ensure(hv >= oracle, || {
            format!("dag {seed}: hill-valley {hv} below optimum")
        })?;
        gaps += usize::from(hv > oracle);
    }
    within(Duration::from_secs(60), start)?;
    Ok(format!(
        "200 dags in {:.1?}; hill-valley above optimum on {gaps}",
        start.elapsed()
    ))
}

fn monotonicity() -> Outcome {
    let mut improved = 0;
    for seed in 0..100 {
        let g = generate(Template::RandomSp, seed).unwrap();
        let (_, report) = run(&g, Method::Both);
        let mut last = report.baseline.peak_bytes;
        for r in report.rounds.iter().filter(|r| r.accepted.is_some()) {
            let after = r.peak_after.ok_or("accepted round without peak")?;
            ensure(after < last && r.peak_before == last, || {
                format!("seed {seed}: {last} -> {after}")
            })?;
            last = after;
        }
        ensure(report.optimized.peak_bytes == last, || {
            format!("seed {seed}: final peak mismatch")
        })?;
        improved += usize::from(last < report.baseline.peak_bytes);
        let (same, _) = run(&g, Method::None);
        ensure(same.to_json().unwrap() == g.to_json().unwrap(), || {
            format!("seed {seed}: none changed the graph")
        })?;
    }
    Ok(format!("100 graphs, {improved} improved"))
}

fn lower_bounds() -> Outcome {
    let mut graphs = models();
    graphs.extend((0..20).map(|s| {
        (
            format!("random-sp-{s}"),
            generate(Template::RandomSp, s).unwrap(),
        )
    }));
    let mut checked = 0;
    for (name, g) in graphs {
        for method in [Method::None, Method::Fdt, Method::Both] {
            let (tiled, report) = run(&g, method);
            let view = fuse(&tiled, &BTreeSet::new());
            let live = schedule_cost(&compute_lifetimes(&view, &report.schedule, false).unwrap())
                .peak_live;
            let biggest = report.layout.iter().map(|e| e.size).max().unwrap_or(0);
            let peak = report.optimized.peak_bytes;
            ensure(peak >= biggest && peak >= live, || {
                format!("{name}/{method}: peak {peak}, buffer {biggest}, live {live}")
            })?;
            ensure(
                report.layout.iter().all(|e| e.offset + e.size <= peak),
                || format!("{name}/{method}: buffer past peak"),
            )?;
            checked += 1;
        }
    }
    Ok(format!("{checked} final layouts"))
}

fn determinism() -> Outcome {
    let dir = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let cli = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_deeptile"))
            .current_dir(dir.path())
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(matches!(out.status.code(), Some(0 | 2)), || {
            format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr))
        })
    };
    let read = |f: &str| std::fs::read(dir.path().join(f)).map_err(|e| e.to_string());
    let mut files = 0;
    for t in Template::ALL {
        let model = format!("{t}.dnn.json");
        cli(&["gen", t.name(), "--seed", "3", "-o", &model])?;
        for run in ["a", "b"] {
            let (graph, json) = (format!("{t}-{run}.json"), format!("{t}-{run}.report.json"));
            cli(&[
                "optimize",
                &model,
                "--verify",
                "--seed",
                "5",
                "-o",
                &graph,
                "--json-out",
                &json,
            ])?;
        }
        for kind in ["", ".report"] {
            let (a, b) = (
                read(&format!("{t}-a{kind}.json"))?,
                read(&format!("{t}-b{kind}.json"))?,
            );
            ensure(a == b, || format!("{t}{kind} differs between runs"))?;
            files += 1;
        }
    }
    Ok(format!("{files} file pairs identical"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("1 equivalence of every explored config", equivalence),
        ("2 fdt mac invariance, ffmt overhead", fdt_overhead),
        ("3 fdt-only tileability", fdt_only),
        ("4 layout exactness", layout_exactness),
        ("5 scheduling exactness", schedule_exactness),
        ("6 explorer monotonicity", monotonicity),
        ("7 lower bounds", lower_bounds),
        ("8 cli determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS  criterion {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  criterion {name}: {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
