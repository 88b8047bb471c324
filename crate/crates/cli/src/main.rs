use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use locagg::attention::{params_from_container, params_to_container};
use locagg::bench::{bench_compare, BenchConfig};
use locagg::harness::{experiment_csv, run_experiments, ExperimentConfig, Pipeline, SceneSpec};
use locagg::io::{cost_volume_to_container, flow_to_color, read_flo, write_flo, write_ppm, TensorContainer};
use locagg::{
    build_cost_volume, lsa_aggregate_costvol_oracle, lsa_aggregate_features, slsa_aggregate, slsa_costvol_oracle,
    CostVolume4D, FeatureMap, LocalRegion, LsaConfig, ProjectionParams, Real, Rng, SlsaConfig,
};

#[derive(Parser)]
#[command(name = "locagg", version, about = "Local cost-volume aggregation kernels and experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a seeded cost volume and write it as a tensor container.
    Costvol {
        #[arg(long, default_value_t = 8)]
        h: usize,
        #[arg(long, default_value_t = 8)]
        w: usize,
        #[arg(long, default_value_t = 8)]
        c: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Multiplies every entry, e.g. 1/sqrt(C).
        #[arg(long)]
        scale: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run LSA, SLSA or both on seeded features.
    Aggregate {
        #[arg(long, value_enum, default_value_t = Mode::Lsa)]
        mode: Mode,
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Overrides alpha in every block.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        h: usize,
        #[arg(long, default_value_t = 8)]
        w: usize,
        #[arg(long, default_value_t = 8)]
        c: usize,
        /// Context channels.
        #[arg(long, default_value_t = 4)]
        cc: usize,
        /// Parameter container with `lsa.*` and/or `slsa.*` groups.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Write the parameters actually used.
        #[arg(long)]
        save_params: Option<PathBuf>,
        /// Compare against the materialized-volume oracle.
        #[arg(long)]
        check_oracle: bool,
        #[arg(long, value_enum, default_value_t = Prec::Single)]
        precision: Prec,
    },
    /// Score pipelines on a synthetic scene, one CSV row per pipeline and seed.
    Eval {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value = "raw,lsa,slsa,lsa+slsa")]
        pipelines: String,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 8)]
        channels: usize,
        /// Also write every predicted flow as `<pipeline>_<seed>.flo`.
        #[arg(long)]
        flo_dir: Option<PathBuf>,
    },
    /// Time fast paths against oracles.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "8,16,24,32")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 9)]
        reps: usize,
        #[arg(long, default_value_t = 16)]
        c: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Worker threads; 0 uses all cores.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Render a .flo file with the standard color wheel.
    Viz {
        #[arg(long)]
        flo: PathBuf,
        #[arg(long)]
        ppm: PathBuf,
        #[arg(long)]
        max_norm: Option<f32>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Lsa,
    Slsa,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum Prec {
    Single,
    Double,
}

fn module<T>(name: &str, r: locagg::Result<T>) -> anyhow::Result<T> {
    r.map_err(|e| anyhow!("{name}: {e}"))
}

fn write_out(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn costvol(h: usize, w: usize, c: usize, seed: u64, scale: Option<f64>, out: &Path) -> anyhow::Result<()> {
    let mut rng = Rng::new(seed);
    let f1 = module("tensor_core", FeatureMap::<f32>::seeded_uniform(h, w, c, &mut rng, -1.0, 1.0))?;
    let f2 = module("tensor_core", FeatureMap::<f32>::seeded_uniform(h, w, c, &mut rng, -1.0, 1.0))?;
    let cv = module("cost_volume", build_cost_volume(&f1, &f2, scale))?;
    let bytes = module("io_formats", cost_volume_to_container(&cv, Some(seed)).to_bytes())?;
    fs::write(out, bytes).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {:?} cost volume to {}", cv.dims(), out.display());
    Ok(())
}

struct Blocks {
    lsa: ProjectionParams<f32>,
    slsa: ProjectionParams<f32>,
}

fn max_dev<T: Real>(a: &CostVolume4D<T>, b: &CostVolume4D<T>) -> anyhow::Result<f64> {
    module("cost_volume", a.max_abs_diff(b))
}

/// Returns the max oracle deviation when requested.
fn run_aggregate<T: Real>(
    mode: Mode,
    region: LocalRegion,
    blocks: &Blocks,
    feats: [&FeatureMap<f32>; 3],
    check: bool,
) -> anyhow::Result<Option<f64>> {
    let [f1, f2, fc] = feats.map(|f| f.cast::<T>());
    let lsa = LsaConfig::new(region, blocks.lsa.cast::<T>());
    let slsa = SlsaConfig::new(region, blocks.slsa.cast::<T>());
    let mut dev: Option<f64> = None;
    let mut note = |d: f64| dev = Some(dev.map_or(d, |x| x.max(d)));
    match mode {
        Mode::Lsa => {
            let f2a = module("lsa_op", lsa_aggregate_features(&f2, &fc, &lsa))?;
            let fast = module("cost_volume", build_cost_volume(&f1, &f2a, None))?;
            if check {
                let cv = module("cost_volume", build_cost_volume(&f1, &f2, None))?;
                let oracle = module("lsa_op", lsa_aggregate_costvol_oracle(&cv, &f1, &f2, &fc, &lsa))?;
                note(max_dev(&fast, &oracle)?);
            }
        }
        Mode::Slsa => {
            let fast = module("slsa_op", slsa_aggregate(&f1, &f2, &fc, &slsa))?;
            if check {
                let cv = module("cost_volume", build_cost_volume(&f1, &f2, None))?;
                let oracle = module("slsa_op", slsa_costvol_oracle(&cv, &f1, &f2, &fc, &slsa))?;
                note(max_dev(&fast, &oracle)?);
            }
        }
        Mode::Both => {
            let f2a = module("lsa_op", lsa_aggregate_features(&f2, &fc, &lsa))?;
            let fast = module("slsa_op", slsa_aggregate(&f1, &f2a, &fc, &slsa))?;
            if check {
                let cv = module("cost_volume", build_cost_volume(&f1, &f2, None))?;
                let lsa_fast = module("cost_volume", build_cost_volume(&f1, &f2a, None))?;
                let lsa_oracle = module("lsa_op", lsa_aggregate_costvol_oracle(&cv, &f1, &f2, &fc, &lsa))?;
                note(max_dev(&lsa_fast, &lsa_oracle)?);
                let oracle = module("slsa_op", slsa_costvol_oracle(&lsa_oracle, &f1, &f2a, &fc, &slsa))?;
                note(max_dev(&fast, &oracle)?);
            }
        }
    }
    Ok(dev)
}

#[allow(clippy::too_many_arguments)]
fn aggregate(
    mode: Mode,
    k: usize,
    alpha: Option<f64>,
    seed: u64,
    dims: (usize, usize, usize, usize),
    params: Option<&Path>,
    save_params: Option<&Path>,
    check_oracle: bool,
    precision: Prec,
) -> anyhow::Result<()> {
    let (h, w, c, cc) = dims;
    let region = module("local_attention", LocalRegion::new(k))?;
    let mut rng = Rng::new(seed);
    let f1 = module("tensor_core", FeatureMap::<f32>::seeded_uniform(h, w, c, &mut rng, -1.0, 1.0))?;
    let f2 = module("tensor_core", FeatureMap::<f32>::seeded_uniform(h, w, c, &mut rng, -1.0, 1.0))?;
    let fc = module("tensor_core", FeatureMap::<f32>::seeded_uniform(h, w, cc, &mut rng, -1.0, 1.0))?;
    let mut blocks = match params {
        Some(path) => {
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let container = module("io_formats", TensorContainer::from_bytes(&bytes))?;
            let lsa = params_from_container(&container, "lsa");
            let slsa = params_from_container(&container, "slsa");
            let (lsa, slsa) = match (lsa, slsa) {
                (Ok(a), Ok(b)) => (a, b),
                (Ok(a), Err(_)) => (a.clone(), a),
                (Err(_), Ok(b)) => (b.clone(), b),
                (Err(e), Err(_)) => return module("local_attention", Err(e)),
            };
            Blocks { lsa, slsa }
        }
        None => Blocks {
            lsa: module("local_attention", ProjectionParams::seeded(c, cc, cc, false, &mut rng))?,
            slsa: module("local_attention", ProjectionParams::seeded(c, cc, cc, false, &mut rng))?,
        },
    };
    if let Some(a) = alpha {
        blocks.lsa.alpha = a as f32;
        blocks.slsa.alpha = a as f32;
    }
    if let Some(path) = save_params {
        let container = params_to_container(&[("lsa", &blocks.lsa), ("slsa", &blocks.slsa)], Some(seed));
        fs::write(path, module("io_formats", container.to_bytes())?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let feats = [&f1, &f2, &fc];
    let dev = match precision {
        Prec::Single => run_aggregate::<f32>(mode, region, &blocks, feats, check_oracle)?,
        Prec::Double => run_aggregate::<f64>(mode, region, &blocks, feats, check_oracle)?,
    };
    println!("aggregated {h}x{w}x{c} features, k={k}");
    if let Some(d) = dev {
        println!("max abs deviation vs oracle: {d:e}");
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    spec: &Path,
    pipelines: &str,
    seeds: u64,
    csv: Option<&Path>,
    k: usize,
    channels: usize,
    flo_dir: Option<&Path>,
) -> anyhow::Result<()> {
    let text = fs::read_to_string(spec).with_context(|| format!("reading {}", spec.display()))?;
    let scene = module("flow_harness", SceneSpec::from_json(&text))?;
    let pipelines = pipelines
        .split(',')
        .map(|p| module("flow_harness", p.parse::<Pipeline>()))
        .collect::<anyhow::Result<Vec<_>>>()?;
    if seeds == 0 {
        bail!("flow_harness: --seeds must be positive");
    }
    let cfg = module("flow_harness", ExperimentConfig::designed(k, channels))?;
    let rows = module("flow_harness", run_experiments(&scene, &pipelines, &cfg, seeds))?;
    write_out(csv, &experiment_csv(&rows))?;
    if let Some(dir) = flo_dir {
        fs::create_dir_all(dir)?;
        for r in &rows {
            let name = format!("{}_{}.flo", r.pipeline.to_string().replace('+', "_"), r.seed);
            fs::write(dir.join(name), write_flo(&r.prediction))?;
        }
    }
    for p in &pipelines {
        let sel: Vec<_> = rows.iter().filter(|r| r.pipeline == *p).collect();
        let epe = sel.iter().map(|r| r.report.epe).sum::<f64>() / sel.len() as f64;
        let flat: Vec<f64> = sel.iter().filter_map(|r| r.report.epe_textureless).collect();
        match flat.is_empty() {
            true => eprintln!("{p}: mean epe {epe:.4}"),
            false => eprintln!(
                "{p}: mean epe {epe:.4}, textureless {:.4}",
                flat.iter().sum::<f64>() / flat.len() as f64
            ),
        }
    }
    Ok(())
}

fn bench(sizes: Vec<usize>, k: usize, reps: usize, c: usize, csv: Option<&Path>, threads: usize) -> anyhow::Result<()> {
    let cfg = BenchConfig {
        sizes,
        k,
        reps,
        channels: c,
        threads,
        ..BenchConfig::default()
    };
    let report = module("bench_cli", bench_compare(&cfg))?;
    write_out(csv, &report.csv())?;
    for r in &report.ratios {
        eprintln!(
            "{} H=W={}: oracle/fast time {:.2}x, bytes {:.1}x",
            r.op, r.size, r.time_ratio, r.bytes_ratio
        );
    }
    Ok(())
}

fn viz(flo: &Path, ppm: &Path, max_norm: Option<f32>) -> anyhow::Result<()> {
    let bytes = fs::read(flo).with_context(|| format!("reading {}", flo.display()))?;
    let flow = module("io_formats", read_flo(&bytes))?;
    fs::write(ppm, write_ppm(&flow_to_color(&flow, max_norm)))
        .with_context(|| format!("writing {}", ppm.display()))?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Costvol { h, w, c, seed, scale, out } => costvol(h, w, c, seed, scale, &out),
        Command::Aggregate {
            mode,
            k,
            alpha,
            seed,
            h,
            w,
            c,
            cc,
            params,
            save_params,
            check_oracle,
            precision,
        } => aggregate(
            mode,
            k,
            alpha,
            seed,
            (h, w, c, cc),
            params.as_deref(),
            save_params.as_deref(),
            check_oracle,
            precision,
        ),
        Command::Eval {
            spec,
            pipelines,
            seeds,
            csv,
            k,
            channels,
            flo_dir,
        } => eval(&spec, &pipelines, seeds, csv.as_deref(), k, channels, flo_dir.as_deref()),
        Command::Bench {
            sizes,
            k,
            reps,
            c,
            csv,
            threads,
        } => bench(sizes, k, reps, c, csv.as_deref(), threads),
        Command::Viz { flo, ppm, max_norm } => viz(&flo, &ppm, max_norm),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap exits with 2 on usage errors.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
