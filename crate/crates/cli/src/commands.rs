use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use deeptile::exec::{
    execute, max_relative_deviation, outputs_match, random_inputs, read_tensor, write_tensor,
    TensorValue,
};
use deeptile::explorer::{
    exploration_pipeline, optimize, ExplorationReport, ExplorerOptions, Method, Metrics,
    RoundRecord, Verification, VerifyOptions,
};
use deeptile::fusion::FusedGroup;
use deeptile::ir::infer_shapes;
use deeptile::modelgen::{generate_with, GenOptions};
use deeptile::pipeline::{LayoutEntry, Pipeline};
use deeptile::schedule::Schedule;
use deeptile::Graph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::args::{CheckArgs, Cli, Command, GenArgs, OptimizeArgs, ReportArgs, SolverArgs};
use crate::Status;

/// The JSON document written by `optimize` and `report`.
#[derive(Serialize)]
struct Report<'a> {
    method: Method,
    baseline: Metrics,
    optimized: Metrics,
    /// Arena size of the final layout.
    peak_bytes: usize,
    savings_pct: f64,
    mac_overhead_pct: f64,
    iterations: &'a [RoundRecord],
    schedule: &'a Schedule,
    layout: &'a [LayoutEntry],
    groups: &'a [FusedGroup],
    #[serde(skip_serializing_if = "Option::is_none")]
    verification: Option<&'a Verification>,
}

impl<'a> From<&'a ExplorationReport> for Report<'a> {
    fn from(r: &'a ExplorationReport) -> Self {
        Report {
            method: r.method,
            baseline: r.baseline,
            optimized: r.optimized,
            peak_bytes: r.optimized.peak_bytes,
            savings_pct: r.savings_pct(),
            mac_overhead_pct: r.mac_overhead_pct(),
            iterations: &r.rounds,
            schedule: &r.schedule,
            layout: &r.layout,
            groups: &r.groups,
            verification: r.verification.as_ref(),
        }
    }
}

pub fn run(cli: Cli) -> Result<Status> {
    match cli.command {
        Command::Optimize(a) => run_optimize(a),
        Command::Gen(a) => run_gen(a),
        Command::Check(a) => run_check(a),
        Command::Report(a) => run_report(a),
    }
}

fn load(path: &Path) -> Result<Graph> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let graph = Graph::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
    graph
        .check()
        .with_context(|| format!("validating {}", path.display()))?;
    let graph =
        infer_shapes(&graph).with_context(|| format!("inferring shapes of {}", path.display()))?;
    Ok(graph)
}

fn save_graph(graph: &Graph, path: &Path) -> Result<()> {
    let text = graph.to_json()?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Pretty JSON to `path`, or to standard output without one.
fn emit<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn pipeline(s: &SolverArgs) -> Pipeline {
    let mut p = exploration_pipeline(Duration::from_secs(s.exact_timeout_secs));
    p.schedule.align4 = s.align4;
    p
}

fn default_output(input: &Path) -> PathBuf {
    let name = input
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("model");
    let stem = name
        .strip_suffix(".dnn.json")
        .or_else(|| name.strip_suffix(".json"))
        .unwrap_or(name);
    input.with_file_name(format!("{stem}.tiled.dnn.json"))
}

fn run_optimize(a: OptimizeArgs) -> Result<Status> {
    let graph = load(&a.input)?;
    let opts = ExplorerOptions {
        method: a.method,
        max_partitions: a.max_partitions as usize,
        pipeline: pipeline(&a.solver),
        verify: a.verify.then_some(VerifyOptions {
            seed: a.seed,
            samples: a.samples as usize,
        }),
        ..ExplorerOptions::default()
    };
    let (tiled, report) = optimize(&graph, &opts)?;
    let output = a.output.unwrap_or_else(|| default_output(&a.input));
    save_graph(&tiled, &output)?;
    emit(&Report::from(&report), a.json_out.as_deref())?;
    log::info!(
        "peak {} -> {} bytes ({:.1}% saved), macs {} -> {}",
        report.baseline.peak_bytes,
        report.optimized.peak_bytes,
        report.savings_pct(),
        report.baseline.macs,
        report.optimized.macs
    );

    if report.verification.as_ref().is_some_and(|v| !v.passed) {
        eprintln!("verification failed: tiled outputs differ from the original");
        return Ok(Status::VerificationFailed);
    }
    if report.optimized.peak_bytes >= report.baseline.peak_bytes {
        eprintln!(
            "no tiling lowered the peak of {} bytes",
            report.baseline.peak_bytes
        );
        return Ok(Status::NoImprovement);
    }
    Ok(Status::Ok)
}

fn run_report(a: ReportArgs) -> Result<Status> {
    let graph = load(&a.input)?;
    let opts = ExplorerOptions {
        method: Method::None,
        pipeline: pipeline(&a.solver),
        ..ExplorerOptions::default()
    };
    let (_, report) = optimize(&graph, &opts)?;
    emit(&Report::from(&report), a.json_out.as_deref())?;
    Ok(Status::Ok)
}

fn run_gen(a: GenArgs) -> Result<Status> {
    let graph = generate_with(
        a.template,
        a.seed,
        &GenOptions {
            scale: a.scale,
            int8: a.int8,
        },
    )?;
    save_graph(&graph, &a.output)?;
    Ok(Status::Ok)
}

fn read_inputs(
    reference: &Graph,
    bindings: &[(String, PathBuf)],
) -> Result<BTreeMap<String, TensorValue>> {
    let mut out = BTreeMap::new();
    for (name, path) in bindings {
        if !reference.model_inputs().any(|t| &t.id == name) {
            bail!("`{name}` is not a model input");
        }
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let value = read_tensor(BufReader::new(file))
            .with_context(|| format!("reading {}", path.display()))?;
        out.insert(name.clone(), value);
    }
    if let Some(t) = reference.model_inputs().find(|t| !out.contains_key(&t.id)) {
        bail!("no value given for model input `{}`", t.id);
    }
    Ok(out)
}

fn run_check(a: CheckArgs) -> Result<Status> {
    let model = load(&a.model)?;
    let reference = load(&a.against)?;
    let samples: Vec<BTreeMap<String, TensorValue>> = if a.inputs.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        (0..a.samples)
            .map(|_| random_inputs(&reference, &mut rng))
            .collect()
    } else {
        vec![read_inputs(&reference, &a.inputs)?]
    };

    let mut passed = true;
    let mut worst: f64 = 0.0;
    let mut last = BTreeMap::new();
    for inputs in &samples {
        let expected = execute(&reference, inputs).context("executing the reference model")?;
        let actual = execute(&model, inputs).context("executing the model under test")?;
        passed &= outputs_match(&expected, &actual);
        for (id, x) in &expected {
            let dev = actual
                .get(id)
                .and_then(|y| max_relative_deviation(x, y))
                .unwrap_or(f64::INFINITY);
            worst = worst.max(dev);
        }
        last = actual;
    }
    if let Some(dir) = &a.outputs_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (id, value) in &last {
            let path = dir.join(format!("{id}.bin"));
            let file =
                File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            let mut w = BufWriter::new(file);
            write_tensor(&mut w, value)?;
            w.flush()?;
        }
    }

    let result = Verification {
        samples: samples.len(),
        seed: a.seed,
        passed,
        max_relative_deviation: worst,
    };
    eprintln!("max relative deviation: {worst:e}");
    emit(&result, a.json_out.as_deref())?;
    Ok(if passed {
        Status::Ok
    } else {
        Status::VerificationFailed
    })
}
