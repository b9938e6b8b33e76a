//! Command-line front end: `run`, `sweep` and `safeset`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::Config;
use crate::safeset::{build_safe_set, SafeSetCache};
use crate::sim::{self, Diagnostics, SweepRow};
use crate::v2v::write_delivery_log;
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "platoon", version, about = "Platoon MPC simulations over a delayed V2V network")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one scenario and write its trajectories.
    Run(RunArgs),
    /// Simulate one scenario per trust horizon and tabulate throughput.
    Sweep(SweepArgs),
    /// Export the boundary of one safe set.
    Safeset(SafesetArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created if needed.
    #[arg(long)]
    pub out: PathBuf,
    /// Safe-set cache file, reused when its braking spec matches.
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: Common,
    /// Trust horizon F; overrides `mpc.trust`.
    #[arg(long)]
    pub trust_horizon: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    /// Comma-separated trust horizons; overrides `scenario.trust_values`.
    #[arg(long, value_delimiter = ',')]
    pub trust_horizon: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct SafesetArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Predecessor speed (m/s).
    #[arg(long)]
    pub v0: f64,
    /// Output CSV with columns `v,h`.
    #[arg(long)]
    pub out: PathBuf,
}

/// Record of one invocation, written as `manifest.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    /// Output files relative to the output directory.
    pub outputs: Vec<String>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

/// Exit status for an error: 2 for bad input, 1 for runtime failures.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        _ => 1,
    }
}

pub fn execute(cli: &Cli) -> Result<RunManifest> {
    match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Safeset(args) => cmd_safeset(args),
    }
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p),
        None => Ok(Config::default()),
    }
}

fn load_cache(cfg: &Config, path: Option<&Path>) -> Result<SafeSetCache> {
    let spec = cfg.braking_spec();
    match path {
        Some(p) => SafeSetCache::load_or_build(p, spec, cfg.mpc.v_min),
        None => SafeSetCache::build(spec, cfg.mpc.v_min),
    }
}

struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        self.files.push(name.to_string());
        Ok(BufWriter::new(File::create(self.dir.join(name))?))
    }

    fn finish(mut self, command: &str, cfg: &Config, timings: BTreeMap<String, f64>) -> Result<RunManifest> {
        self.files.push("manifest.json".into());
        let manifest = RunManifest {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: cfg.hash(),
            outputs: self.files,
            timings,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(self.dir.join("manifest.json"), text)?;
        Ok(manifest)
    }
}

fn write_json<T: Serialize>(out: &mut Outputs, name: &str, value: &T) -> Result<()> {
    let w = out.create(name)?;
    serde_json::to_writer_pretty(w, value).map_err(|e| Error::Io(e.into()))
}

fn cmd_run(args: &RunArgs) -> Result<RunManifest> {
    let mut cfg = load_config(args.common.config.as_deref())?;
    if let Some(f) = args.trust_horizon {
        cfg.mpc.trust = f;
        cfg.validate()?;
    }
    let mut timings = BTreeMap::new();
    let mut out = Outputs::new(&args.common.out)?;
    std::fs::write(out.dir.join("config.toml"), cfg.to_toml())?;
    out.files.push("config.toml".into());

    let t = Instant::now();
    let cache = load_cache(&cfg, args.common.cache.as_deref())?;
    timings.insert("safe_sets".into(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let run = sim::run(&cfg, &cache)?;
    timings.insert("simulation".into(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    run.log.write_csv(out.create("trajectory.csv")?)?;
    let mut w = csv::Writer::from_writer(out.create("controller.csv")?);
    for r in &run.controller {
        w.serialize(r)?;
    }
    w.flush()?;
    write_delivery_log(&run.deliveries, cfg.mpc.horizon, out.create("deliveries.csv")?)?;
    write_json(&mut out, "diagnostics.json", &run.diagnostics)?;
    timings.insert("write".into(), t.elapsed().as_secs_f64());

    let d = &run.diagnostics;
    log::info!(
        "F = {}: min h {:.4} m, max slack {:.3e}, {} fallbacks, {} violations",
        cfg.mpc.trust,
        d.min_headway,
        d.max_slack,
        d.fallbacks,
        d.violations.len()
    );
    out.finish("run", &cfg, timings)
}

#[derive(Serialize)]
struct SweepEntry<'a> {
    #[serde(rename = "F")]
    trust: usize,
    diagnostics: &'a Diagnostics,
}

fn cmd_sweep(args: &SweepArgs) -> Result<RunManifest> {
    let cfg = load_config(args.common.config.as_deref())?;
    let trust_values = args.trust_horizon.clone().unwrap_or_else(|| cfg.scenario.trust_values.clone());
    if trust_values.is_empty() {
        return Err(Error::Config("the trust-horizon list is empty".into()));
    }
    if let Some(&f) = trust_values.iter().find(|&&f| f > cfg.mpc.horizon) {
        return Err(Error::Config(format!("trust horizon {f} exceeds the horizon {}", cfg.mpc.horizon)));
    }
    let mut timings = BTreeMap::new();
    let mut out = Outputs::new(&args.common.out)?;
    std::fs::write(out.dir.join("config.toml"), cfg.to_toml())?;
    out.files.push("config.toml".into());

    let t = Instant::now();
    let cache = load_cache(&cfg, args.common.cache.as_deref())?;
    timings.insert("safe_sets".into(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let results = sim::sweep_trust(&cfg, &trust_values, &cache)?;
    timings.insert("simulation".into(), t.elapsed().as_secs_f64());

    let rows: Vec<SweepRow> = results.iter().map(|(r, _)| *r).collect();
    sim::write_sweep_csv(&rows, out.create("sweep.csv")?)?;
    let entries: Vec<SweepEntry> = results.iter().map(|(r, d)| SweepEntry { trust: r.trust, diagnostics: d }).collect();
    write_json(&mut out, "diagnostics.json", &entries)?;
    for r in &rows {
        log::info!("F = {:2}: {:.1} vph", r.trust, r.vph);
    }
    out.finish("sweep", &cfg, timings)
}

fn cmd_safeset(args: &SafesetArgs) -> Result<RunManifest> {
    let cfg = load_config(args.config.as_deref())?;
    if !(cfg.mpc.v_min..=cfg.mpc.v_max).contains(&args.v0) {
        return Err(Error::Config(format!(
            "v0 = {} outside [{}, {}]",
            args.v0, cfg.mpc.v_min, cfg.mpc.v_max
        )));
    }
    let t = Instant::now();
    let set = build_safe_set(args.v0, &cfg.braking_spec());
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(&args.out)?;
    w.write_record(["v", "h"])?;
    for &(v, h) in set.boundary() {
        w.write_record([v.to_string(), h.to_string()])?;
    }
    w.flush()?;
    log::info!("v0 = {} (k_s = {}, ṽ0 = {:.5}): {} vertices", args.v0, set.k_s, set.v0_tilde, set.boundary().len());
    let mut timings = BTreeMap::new();
    timings.insert("safe_set".into(), t.elapsed().as_secs_f64());
    Ok(RunManifest {
        command: "safeset".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: cfg.hash(),
        outputs: vec![args.out.display().to_string()],
        timings,
    })
}
