//! Subcommand implementations. Every file the tool writes is written here.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use hit_core::generator::{
    build_generator, reference_param_millions, sample_latent, stage_param_counts, Generator, GeneratorConfig,
};
use hit_core::training::{train_toy, TrainOutcome};
use hit_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bench::{self, BenchRow};
use crate::checkpoint::Checkpoint;
use crate::config::{resolve_preset, RunConfig};
use crate::ppm;
use crate::verify::{self, Report, Suite, VerifyOptions};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const CHECKPOINT_FILE: &str = "generator.json";
pub const BENCH_FILE: &str = "bench.csv";

/// `# config: {json}` line that heads every text report.
pub fn config_header(cfg: &RunConfig) -> Result<String> {
    Ok(format!("# config: {}\n", cfg.to_json_line()?))
}

fn prepare_out(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join(RESOLVED_CONFIG_FILE), cfg.to_toml()?.as_bytes())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// The generator described by `cfg`, or the one stored at `weights`.
pub fn load_generator(cfg: &RunConfig, weights: Option<&Path>) -> Result<Generator> {
    match weights {
        Some(path) => Checkpoint::load(path)?.into_generator(),
        None => {
            let gc = cfg.generator.resolve()?;
            Ok(build_generator(&gc, gc.seed)?)
        }
    }
}

/// The latent code drawn for image seed `seed`.
pub fn latent_for_seed(config: &GeneratorConfig, seed: u64) -> Tensor {
    sample_latent(config, 1, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn first_image(batch: &Tensor) -> Result<Vec<u8>> {
    let mut files = ppm::encode_batch(batch)?;
    Ok(files.remove(0))
}

#[derive(Debug, Clone, Serialize)]
pub struct ImageEntry {
    pub file: String,
    pub seed: Option<u64>,
    /// Position along the interpolation segment.
    pub t: Option<f64>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    config: &'a RunConfig,
    weights: Option<String>,
    images: &'a [ImageEntry],
}

fn write_manifest(cfg: &RunConfig, weights: Option<&Path>, images: &[ImageEntry], out: &Path) -> Result<()> {
    let manifest = Manifest { config: cfg, weights: weights.map(|p| p.display().to_string()), images };
    write(&out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())
}

/// Writes `count` images for seeds `seed, seed + 1, …` plus a manifest.
pub fn cmd_generate(cfg: &RunConfig, count: usize, weights: Option<&Path>, out: &Path) -> Result<Vec<ImageEntry>> {
    let gen = load_generator(cfg, weights)?;
    prepare_out(cfg, out)?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let seed = cfg.seed.wrapping_add(i as u64);
        let img = gen.generate(&latent_for_seed(&gen.config, seed))?;
        let file = format!("seed_{seed}.ppm");
        write(&out.join(&file), &first_image(&img)?)?;
        entries.push(ImageEntry { file, seed: Some(seed), t: None });
    }
    write_manifest(cfg, weights, &entries, out)?;
    Ok(entries)
}

/// Writes `steps` frames along the latent segment between two image seeds.
pub fn cmd_interpolate(
    cfg: &RunConfig,
    seed_a: u64,
    seed_b: u64,
    steps: usize,
    weights: Option<&Path>,
    out: &Path,
) -> Result<Vec<ImageEntry>> {
    if steps < 2 {
        bail!("interpolation needs at least 2 steps, got {steps}");
    }
    let gen = load_generator(cfg, weights)?;
    prepare_out(cfg, out)?;
    let za = latent_for_seed(&gen.config, seed_a);
    let zb = latent_for_seed(&gen.config, seed_b);
    let frames = gen.interpolate(&za, &zb, steps)?;
    let mut entries = Vec::with_capacity(steps);
    for (i, frame) in frames.iter().enumerate() {
        let file = format!("frame_{i:03}.ppm");
        write(&out.join(&file), &first_image(frame)?)?;
        let seed = match i {
            0 => Some(seed_a),
            _ if i == steps - 1 => Some(seed_b),
            _ => None,
        };
        entries.push(ImageEntry { file, seed, t: Some(i as f64 / (steps - 1) as f64) });
    }
    write_manifest(cfg, weights, &entries, out)?;
    Ok(entries)
}

/// Toy adversarial training; writes the trace and the final generator.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    let setup = cfg.train.setup(cfg.seed)?;
    prepare_out(cfg, out)?;
    let outcome = train_toy(&setup)?;
    let csv = config_header(cfg)? + &outcome.trace.to_csv();
    write(&out.join(TRACE_FILE), csv.as_bytes())?;
    Checkpoint::from_generator(&outcome.generator).save(&out.join(CHECKPOINT_FILE))?;
    Ok(outcome)
}

pub fn cmd_bench(cfg: &RunConfig, out: &Path) -> Result<(Vec<BenchRow>, String)> {
    let rows = bench::run(&cfg.bench)?;
    let csv = config_header(cfg)? + &bench::to_csv(&rows);
    prepare_out(cfg, out)?;
    write(&out.join(BENCH_FILE), csv.as_bytes())?;
    Ok((rows, csv))
}

pub fn cmd_verify(cfg: &RunConfig, suite: Suite, opts: &VerifyOptions) -> Result<(Report, String)> {
    let report = verify::run(suite, opts);
    let text = config_header(cfg)? + &report.to_csv();
    Ok((report, text))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTable {
    pub name: String,
    pub shared: usize,
    pub stages: Vec<usize>,
    pub total: usize,
    pub reference_millions: Option<f64>,
}

impl ParamTable {
    pub fn deviation(&self) -> Option<f64> {
        self.reference_millions.map(|r| (self.total as f64 / 1e6 - r) / r)
    }

    pub fn render(&self) -> String {
        let mut out = format!("# parameters of {}\ncomponent,params\nlatent,{}\n", self.name, self.shared);
        for (i, n) in self.stages.iter().enumerate() {
            let _ = writeln!(out, "stage{},{n}", i + 1);
        }
        let _ = writeln!(out, "total,{}", self.total);
        let _ = writeln!(out, "total_millions,{:.2}", self.total as f64 / 1e6);
        if let (Some(r), Some(dev)) = (self.reference_millions, self.deviation()) {
            let _ = writeln!(out, "reference_millions,{r:.2}");
            let _ = writeln!(out, "relative_deviation,{dev:+.4}");
        }
        out
    }
}

/// Parameter counts of a named preset, or of the configured generator.
pub fn cmd_params(cfg: &RunConfig, preset: Option<&str>) -> Result<ParamTable> {
    let gc = match preset {
        Some(name) => resolve_preset(name)?,
        None => cfg.generator.resolve()?,
    };
    let (shared, stages) = stage_param_counts(&gc)?;
    let total = shared + stages.iter().sum::<usize>();
    Ok(ParamTable { reference_millions: reference_param_millions(&gc.name), name: gc.name, shared, stages, total })
}

/// Paths of the images listed in a manifest entry list.
pub fn image_paths(out: &Path, entries: &[ImageEntry]) -> Vec<PathBuf> {
    entries.iter().map(|e| out.join(&e.file)).collect()
}
