//! One pass/fail line per acceptance criterion. Exits non-zero if any fails.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use hit_cli::bench::{self, logit_count, wall_ratios};
use hit_cli::commands::cmd_generate;
use hit_cli::config::{BenchConfig, RunConfig, TrainConfig};
use hit_cli::verify::{self, Suite, VerifyOptions};
use hit_core::attention::AttentionMode;
use hit_core::generator::preset;
use hit_core::training::{train_toy, GanHyper, Trace, VqHitWeights};

const HIT_B_256_STRUCTURE: &str = include_str!("../../core/tests/golden/hit_b_256.txt");
const HYPERPARAMETERS: &str = include_str!("fixtures/hyperparameters.toml");
const TOY_TRACE: &str = include_str!("fixtures/toy_trace.csv");

/// Runs the properties of `suite` whose names contain any of `names` and
/// fails unless every one passes and at least `expected` ran.
fn properties(suite: Suite, names: &[&str], expected: usize) -> Result<String> {
    let report = verify::run(suite, &VerifyOptions::default());
    let selected: Vec<_> = report.properties.iter().filter(|p| names.iter().any(|n| p.name.contains(n))).collect();
    ensure!(selected.len() >= expected, "{} of {expected} properties ran", selected.len());
    let failed: Vec<&str> = selected.iter().filter(|p| !p.passed()).map(|p| p.name.as_str()).collect();
    ensure!(failed.is_empty(), "failed: {}", failed.join(" "));
    let worst = selected.iter().fold(0.0f64, |a, p| a.max(p.max_error));
    Ok(format!("{} properties, worst error {worst:.2e}", selected.len()))
}

fn within(elapsed: Duration, limit: Duration, detail: String) -> Result<String> {
    ensure!(elapsed < limit, "{detail}; took {elapsed:.1?}, limit {limit:?}");
    Ok(format!("{detail} in {elapsed:.1?}"))
}

fn oracle_equivalence() -> Result<String> {
    let start = Instant::now();
    let detail = properties(Suite::Equivalence, &["equivalence/multi_axis_vs_masked_oracle"], 1)?;
    within(start.elapsed(), Duration::from_secs(60), detail)
}

fn degenerate_equivalence() -> Result<String> {
    properties(
        Suite::Equivalence,
        &["single_patch_regional_is_full", "unit_patch_dilated_is_full", "axial_vs_row_column_oracle"],
        3,
    )
}

fn round_trips() -> Result<String> {
    properties(Suite::Roundtrip, &["unblock_after_block", "depth_to_space_after_space_to_depth"], 2)
}

fn gradcheck() -> Result<String> {
    let start = Instant::now();
    let detail = properties(Suite::Gradcheck, &["gradcheck/"], 30)?;
    within(start.elapsed(), Duration::from_secs(300), detail)
}

fn complexity() -> Result<String> {
    for n in [256usize, 1024, 4096] {
        let full = logit_count(AttentionMode::Full, n, 2)?;
        let ma = logit_count(AttentionMode::MultiAxis, n, 2)?;
        let root = (n as f64).sqrt() as u64;
        ensure!(full == root * ma, "N={n}: {full} / {ma} is not {root}");
    }
    let rows = bench::run(&BenchConfig::default())?;
    let ratios = wall_ratios(&rows);
    ensure!(ratios.len() == 3, "only {} sizes were timed", ratios.len());
    let shown: Vec<String> = ratios.iter().map(|(n, r)| format!("{n}:{r:.1}")).collect();
    ensure!(ratios.windows(2).all(|w| w[1].1 > w[0].1), "wall ratios not increasing: {}", shown.join(" "));
    Ok(format!("logit ratios 16/32/64, wall ratios {}", shown.join(" ")))
}

fn loss_spot_values() -> Result<String> {
    properties(Suite::Equivalence, &["equivalence/loss/"], 3)
}

fn hyperparameter_snapshot() -> String {
    let gan = GanHyper::default();
    let vq = VqHitWeights::default();
    format!(
        "gamma = {}\nlr = {}\nbeta1 = {}\nbeta2 = {}\nperceptual = {}\nadversarial = {}\n",
        gan.gamma, gan.lr, gan.beta1, gan.beta2, vq.perceptual, vq.adversarial
    )
}

fn hyperparameters() -> Result<String> {
    let snapshot = hyperparameter_snapshot();
    ensure!(snapshot == HYPERPARAMETERS, "defaults drifted:\n{snapshot}");
    ensure!(RunConfig::default().train.hyper == GanHyper::default(), "run config overrides defaults");
    properties(Suite::Equivalence, &["equivalence/defaults/"], 1)
}

fn presets() -> Result<String> {
    let structure = preset("hit_b_256")?.structure();
    ensure!(structure == HIT_B_256_STRUCTURE, "hit_b_256 structure differs from the golden dump");
    properties(Suite::Equivalence, &["equivalence/presets/"], 2)
}

fn toy_training() -> Result<String> {
    let start = Instant::now();
    let setup = TrainConfig::default().setup(0)?;
    let outcome = train_toy(&setup)?;
    let elapsed = start.elapsed();
    let distances = outcome.trace.moment_distances();
    let (first, last) = (distances[0].1, distances[distances.len() - 1].1);
    ensure!(setup.hyper.steps == 2000, "configured for {} steps", setup.hyper.steps);
    ensure!(last < 0.5 * first, "moment distance {first:.3} -> {last:.3}");
    let frozen = Trace::from_csv(TOY_TRACE).context("reading frozen trace")?;
    ensure!(outcome.trace == frozen, "trace differs from the frozen fixture");
    within(
        elapsed,
        Duration::from_secs(600),
        format!("moment distance {first:.3} -> {last:.3} ({:.1}%), trace matches fixture", 100.0 * last / first),
    )
}

fn generate_in_pool(threads: usize, out: &Path) -> Result<Vec<Vec<u8>>> {
    let cfg = RunConfig { seed: 11, ..RunConfig::default() }.resolved()?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    let entries = pool.install(|| cmd_generate(&cfg, 3, None, out))?;
    entries.iter().map(|e| Ok(fs::read(out.join(&e.file))?)).collect()
}

fn determinism() -> Result<String> {
    let root = std::env::temp_dir().join(format!("hit-acceptance-{}", std::process::id()));
    let runs: Vec<Vec<Vec<u8>>> = [1usize, 1, 4]
        .iter()
        .enumerate()
        .map(|(i, &threads)| generate_in_pool(threads, &root.join(i.to_string())))
        .collect::<Result<_>>()?;
    fs::remove_dir_all(&root).ok();
    ensure!(runs[0] == runs[1], "two runs differ");
    ensure!(runs[0] == runs[2], "1 and 4 threads differ");
    Ok(format!("{} images identical across runs and thread counts", runs[0].len()))
}

type Criterion = (&'static str, fn() -> Result<String>);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("oracle equivalence", oracle_equivalence),
        ("degenerate-case equivalence", degenerate_equivalence),
        ("round-trips", round_trips),
        ("gradcheck", gradcheck),
        ("complexity", complexity),
        ("loss spot values", loss_spot_values),
        ("hyperparameter defaults", hyperparameters),
        ("preset fidelity", presets),
        ("toy training", toy_training),
        ("determinism", determinism),
    ];
    let mut all = true;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let (verdict, detail) = match check() {
            Ok(d) => ("PASS", d),
            Err(e) => {
                all = false;
                ("FAIL", format!("{e:#}"))
            }
        };
        println!("criterion {:>2} {verdict} {name}: {detail}", i + 1);
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
