mod common;

use deeptile::discovery::{
    enumerate_configs, find_critical_buffers, DiscoveryOptions, PartitionKind, TilingConfig,
};
use deeptile::exec::{count_macs, execute, outputs_match, random_inputs};
use deeptile::explorer::exploration_pipeline;
use deeptile::ir::{buffer_size, TensorKind};
use deeptile::modelgen::{generate, generate_with, GenOptions, Template};
use deeptile::transform::apply_tiling;
use deeptile::Graph;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Every config discovery offers for the critical buffers of `graph`.
fn all_configs(graph: &Graph, max_partitions: usize) -> Vec<TilingConfig> {
    let pipeline = exploration_pipeline(std::time::Duration::from_secs(5));
    let eval = pipeline.evaluate(graph).unwrap();
    let opts = DiscoveryOptions {
        depthwise: true,
        feature_map: true,
        max_partitions,
    };
    find_critical_buffers(
        &eval.layout,
        &eval.lifetimes,
        &eval.conflicts,
        &pipeline.plan,
    )
    .iter()
    .flat_map(|c| enumerate_configs(graph, &c.tensor, &opts).unwrap_or_default())
    .collect()
}

/// Weight bytes and the plain sum of weight values.
fn weight_totals(graph: &Graph) -> (usize, f64) {
    graph
        .tensors()
        .filter(|t| t.kind == TensorKind::Weight)
        .fold((0, 0.0), |(b, s), t| {
            (
                b + buffer_size(t).unwrap(),
                s + t.weight_values().unwrap().iter().sum::<f64>(),
            )
        })
}

/// Checks every property of one applied config; returns a description of the
/// first violation.
fn check_config(
    graph: &Graph,
    config: &TilingConfig,
    samples: usize,
    seed: u64,
) -> Result<(), String> {
    let tiled = apply_tiling(graph, config).map_err(|e| format!("{config:?}: {e}"))?;
    tiled.check().map_err(|e| e.to_string())?;

    let (wb, ws) = weight_totals(graph);
    let (tb, ts) = weight_totals(&tiled);
    if wb != tb || (ws - ts).abs() > 1e-6 * ws.abs().max(1.0) {
        return Err(format!(
            "weights not conserved: {wb} B / {ws} vs {tb} B / {ts}"
        ));
    }

    let (before, after) = (count_macs(graph).total, count_macs(&tiled).total);
    if after != common::macs_oracle(&tiled) {
        return Err("mac counter disagrees with the oracle".into());
    }
    match config.kind {
        PartitionKind::PdD if after != before => {
            return Err(format!("depthwise tiling changed macs {before} -> {after}"))
        }
        PartitionKind::PdFm if after < before => {
            return Err(format!("feature-map tiling lost macs {before} -> {after}"))
        }
        _ => {}
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..samples {
        let inputs = random_inputs(graph, &mut rng);
        let a = execute(graph, &inputs).map_err(|e| e.to_string())?;
        let b = execute(&tiled, &inputs).map_err(|e| e.to_string())?;
        if !outputs_match(&a, &b) {
            return Err(format!("outputs differ for {config:?}"));
        }
    }
    Ok(())
}

#[test]
fn every_template_config_preserves_semantics() {
    let mut graphs: Vec<(String, Graph)> = Template::ALL
        .iter()
        .map(|&t| (t.name().to_owned(), generate(t, 1).unwrap()))
        .collect();
    for t in Template::ALL.into_iter().filter(|t| t.supports_int8()) {
        graphs.push((
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
    for (name, g) in &graphs {
        let configs = all_configs(g, 25);
        assert!(!configs.is_empty(), "{name} offers no tiling");
        for c in &configs {
            check_config(g, c, 3, 11).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }
}

#[test]
fn feature_map_halos_cost_macs_on_conv_chains() {
    let g = generate(Template::CnnChain, 1).unwrap();
    let fm: Vec<_> = all_configs(&g, 25)
        .into_iter()
        .filter(|c| c.kind == PartitionKind::PdFm)
        .collect();
    assert!(!fm.is_empty());
    let base = count_macs(&g).total;
    // a chain through two 3x3 convs recomputes the overlapping halo
    let deep = fm
        .iter()
        .find(|c| {
            c.path
                .iter()
                .filter(|n| n.starts_with("conv") && !n.contains('.'))
                .count()
                >= 2
        })
        .unwrap();
    assert!(count_macs(&apply_tiling(&g, deep).unwrap()).total > base);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_series_parallel_configs_preserve_semantics(seed in any::<u64>()) {
        let g = generate(Template::RandomSp, seed).unwrap();
        for c in all_configs(&g, 8) {
            prop_assert!(check_config(&g, &c, 2, seed).is_ok(), "{:?}", check_config(&g, &c, 2, seed));
        }
    }
}
