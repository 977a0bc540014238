//! The `rfscope` command-line front end.
//!
//! Every run writes a [`RunManifest`]: next to the primary output file when
//! there is one, to `--manifest PATH` when given, otherwise as one JSON line
//! on stderr.
//!
//! Exit codes: 0 success, 1 gradient check above tolerance or I/O failure
//! while writing, 2 usage or validation error, 3 degenerate data (an
//! all-zero gradient map).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::arch_graph::{parse_arch, serialize_arch, ArchGraph, Dim2, InputShape, NodeKind};
use crate::damping::{DampingMatrix, DampingMode, DampingSpec};
use crate::erf_probe::{self, ErfError, HeatmapFormat, ProbeSpec};
use crate::family_gen::{self, Family, FamilyConfig, RhoSpec};
use crate::rf_analysis::{count_params, max_rf, rf_window};
use crate::tensor_engine::{grad_check, init_weights, EvalOptions, Tensor, WeightSet};
use crate::tensor_io::{input_from_csv, input_from_tensors, read_tensors, weights_from_tensors};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DEGENERATE: i32 = 3;

/// Damping coefficient used by `--damp` unless `--m` overrides it.
pub const DEFAULT_DAMPING: f64 = 0.9;

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "rfscope",
    version,
    about = "Receptive field analysis for CNN architecture graphs"
)]
pub struct Cli {
    /// Worker threads for gradient computation. Results do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Where to write the run manifest.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(untagged)]
pub enum Command {
    /// Per-node receptive fields, parameter count and probe summary.
    Analyze(AnalyzeArgs),
    /// Generate a CP_ResNet or CP_DenseNet architecture file.
    Gen(GenArgs),
    /// The rho to maximum receptive field table of a family.
    Table(TableArgs),
    /// Emit a damping factor grid as CSV plus a JSON sidecar.
    Damp(DampArgs),
    /// Measure the effective receptive field of a randomly initialized network.
    Erf(ErfArgs),
    /// Compare analytic input gradients against central differences.
    Gradcheck(GradcheckArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Analyze(_) => "analyze",
            Command::Gen(_) => "gen",
            Command::Table(_) => "table",
            Command::Damp(_) => "damp",
            Command::Erf(_) => "erf",
            Command::Gradcheck(_) => "gradcheck",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyArg {
    #[value(name = "cp_resnet")]
    CpResnet,
    #[value(name = "cp_densenet")]
    CpDensenet,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Family {
        match f {
            FamilyArg::CpResnet => Family::CpResnet,
            FamilyArg::CpDensenet => Family::CpDensenet,
        }
    }
}

/// Which axes `--damp` attenuates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DampAxes {
    None,
    Freq,
    Time,
    Both,
}

impl DampAxes {
    pub fn spec(self, m: f64) -> Option<DampingSpec> {
        match self {
            DampAxes::None => None,
            DampAxes::Freq => Some(DampingSpec::new(0.0, m)),
            DampAxes::Time => Some(DampingSpec::new(m, 0.0)),
            DampAxes::Both => Some(DampingSpec::new(m, m)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Literal,
    Centered,
}

impl From<ModeArg> for DampingMode {
    fn from(m: ModeArg) -> DampingMode {
        match m {
            ModeArg::Literal => DampingMode::Literal,
            ModeArg::Centered => DampingMode::Centered,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatArg {
    Pgm,
    Csv,
}

impl From<FormatArg> for HeatmapFormat {
    fn from(f: FormatArg) -> HeatmapFormat {
        match f {
            FormatArg::Pgm => HeatmapFormat::Pgm,
            FormatArg::Csv => HeatmapFormat::Csv,
        }
    }
}

/// Parses `f,t`.
pub fn parse_dim2(s: &str) -> Result<Dim2, String> {
    let (f, t) = s
        .split_once(',')
        .ok_or_else(|| format!("expected F,T but got '{s}'"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("'{v}': {e}"));
    Ok(Dim2::new(parse(f)?, parse(t)?))
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    pub arch: PathBuf,
    /// Also report the input window of unit F,T of the analyzed node.
    #[arg(long, value_parser = parse_dim2)]
    pub window: Option<Dim2>,
    /// Node for `--window` (default: the probe).
    #[arg(long)]
    pub node: Option<String>,
    /// Emit JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {
    pub family: FamilyArg,
    #[arg(long, conflicts_with_all = ["rho_f", "rho_t"], required_unless_present_all = ["rho_f", "rho_t"])]
    pub rho: Option<u8>,
    #[arg(long, requires = "rho_t")]
    pub rho_f: Option<u8>,
    #[arg(long, requires = "rho_f")]
    pub rho_t: Option<u8>,
    #[arg(long, default_value_t = family_gen::DEFAULT_BASE_CHANNELS)]
    pub base_channels: usize,
    /// Dense-layer growth rate (CP_DenseNet only).
    #[arg(long)]
    pub growth_rate: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub groups: usize,
    #[arg(long, default_value_t = 0)]
    pub extra_pools: usize,
    #[arg(long, default_value_t = 1)]
    pub in_channels: usize,
    #[arg(long, default_value_t = family_gen::DEFAULT_FREQ_BINS)]
    pub freq_bins: usize,
    #[arg(long, default_value_t = family_gen::DEFAULT_TIME_FRAMES)]
    pub time_frames: usize,
    #[arg(long, value_enum, default_value_t = DampAxes::None)]
    pub damp: DampAxes,
    /// Damping coefficient for the axes selected by `--damp`.
    #[arg(long, default_value_t = DEFAULT_DAMPING)]
    pub m: f64,
    #[arg(long)]
    pub shake_shake: bool,
    #[arg(long)]
    pub frequency_aware: bool,
    /// Output file (default: stdout).
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TableArgs {
    pub family: FamilyArg,
    /// Print CSV instead of aligned text.
    #[arg(long)]
    pub csv: bool,
    /// Directory for `<family>_rho_table.txt` and `.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct DampArgs {
    /// Kernel size along time.
    #[arg(long)]
    pub time: usize,
    /// Kernel size along frequency.
    #[arg(long)]
    pub freq: usize,
    #[arg(long, default_value_t = DEFAULT_DAMPING)]
    pub m_t: f64,
    #[arg(long, default_value_t = DEFAULT_DAMPING)]
    pub m_f: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Literal)]
    pub mode: ModeArg,
    /// Output stem; writes `<stem>.csv` and `<stem>.json` (default: CSV on stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ErfArgs {
    pub arch: PathBuf,
    #[arg(long, env = "RFSCOPE_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Number of generated noise inputs (ignored with `--input-file`).
    #[arg(long, default_value_t = 16)]
    pub n_inputs: usize,
    /// RFSW input container or single-channel CSV; repeatable.
    #[arg(long = "input-file")]
    pub input_files: Vec<PathBuf>,
    /// RFSW weights file (default: seeded random init).
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Override damping on every conv node.
    #[arg(long, value_enum)]
    pub damp: Option<DampAxes>,
    #[arg(long, default_value_t = DEFAULT_DAMPING)]
    pub m: f64,
    /// Probe unit F,T (default: center of the probe map).
    #[arg(long, value_parser = parse_dim2)]
    pub probe: Option<Dim2>,
    /// Treat relu nodes as identity.
    #[arg(long)]
    pub linear: bool,
    #[arg(long, value_enum, default_value_t = FormatArg::Pgm)]
    pub format: FormatArg,
    #[arg(long, default_value = "erf_out")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    pub arch: PathBuf,
    #[arg(long, env = "RFSCOPE_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Input to check at (default: seeded noise).
    #[arg(long = "input-file")]
    pub input_file: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub n_probes: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    /// Treat relu nodes as identity.
    #[arg(long)]
    pub linear: bool,
    /// Replace all weights with zeros.
    #[arg(long)]
    pub zero_weights: bool,
}

/// Record of one invocation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub flags: serde_json::Value,
    pub seed: Option<u64>,
    pub tool_version: String,
    /// Input path to hex SHA-256 of its contents.
    pub input_digests: BTreeMap<String, String>,
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(e: impl Display) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: e.to_string(),
        }
    }

    fn failure(e: impl Display) -> Self {
        CliError {
            code: EXIT_FAILURE,
            message: e.to_string(),
        }
    }
}

fn erf_error(e: ErfError) -> CliError {
    match e {
        ErfError::ZeroMass => CliError {
            code: EXIT_DEGENERATE,
            message: "gradient map is all zero; no ERF to measure".into(),
        },
        ErfError::Write { .. } => CliError::failure(e),
        e => CliError::usage(e),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

struct Ctx {
    /// Stdout text, written once the command finishes.
    out: String,
    digests: BTreeMap<String, String>,
    manifest_path: Option<PathBuf>,
}

impl Ctx {
    fn read(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = fs::read(path)
            .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
        self.digests
            .insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    fn read_arch(&mut self, path: &Path) -> Result<ArchGraph, CliError> {
        let bytes = self.read(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        parse_arch(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }

    fn read_weights(
        &mut self,
        graph: &ArchGraph,
        path: Option<&Path>,
        seed: u64,
    ) -> Result<WeightSet, CliError> {
        match path {
            Some(p) => {
                let bytes = self.read(p)?;
                let tensors = read_tensors(bytes.as_slice())
                    .map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?;
                weights_from_tensors(graph, tensors)
                    .map_err(|e| CliError::usage(format!("{}: {e}", p.display())))
            }
            None => init_weights(graph, seed).map_err(CliError::usage),
        }
    }

    fn read_input(&mut self, path: &Path) -> Result<Tensor, CliError> {
        let bytes = self.read(path)?;
        let ctx =
            |e: crate::tensor_io::IoError| CliError::usage(format!("{}: {e}", path.display()));
        if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
        {
            let text = String::from_utf8_lossy(&bytes);
            input_from_csv(&text).map_err(ctx)
        } else {
            input_from_tensors(read_tensors(bytes.as_slice()).map_err(ctx)?).map_err(ctx)
        }
    }

    fn emit(&mut self, s: &str) -> Result<(), CliError> {
        self.out.push_str(s);
        Ok(())
    }

    /// Sets the manifest location unless `--manifest` already did.
    fn manifest_beside(&mut self, path: PathBuf) {
        self.manifest_path.get_or_insert(path);
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::failure(format!("cannot create {}: {e}", dir.display())))?;
    }
    fs::write(path, contents)
        .map_err(|e| CliError::failure(format!("cannot write {}: {e}", path.display())))
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = write!(err, "{}", e.render());
            return code;
        }
    };
    match execute(&cli, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

/// Runs a parsed command line.
pub fn execute(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let mut ctx = Ctx {
        out: String::new(),
        digests: BTreeMap::new(),
        manifest_path: cli.manifest.clone(),
    };
    let seed = match &cli.command {
        Command::Erf(a) => Some(a.seed),
        Command::Gradcheck(a) => Some(a.seed),
        _ => None,
    };
    let mut body = || -> Result<(), CliError> {
        match &cli.command {
            Command::Analyze(a) => cmd_analyze(&mut ctx, a),
            Command::Gen(a) => cmd_gen(&mut ctx, a),
            Command::Table(a) => cmd_table(&mut ctx, a),
            Command::Damp(a) => cmd_damp(&mut ctx, a),
            Command::Erf(a) => cmd_erf(&mut ctx, a),
            Command::Gradcheck(a) => cmd_gradcheck(&mut ctx, a),
        }
    };
    let result = match cli.workers {
        Some(0) => return Err(CliError::usage("--workers must be at least 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(CliError::failure)?
            .install(body),
        None => body(),
    };

    out.write_all(ctx.out.as_bytes())
        .map_err(CliError::failure)?;
    let manifest = RunManifest {
        subcommand: cli.command.name().to_string(),
        flags: serde_json::to_value(cli).expect("flags serialize"),
        seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        input_digests: std::mem::take(&mut ctx.digests),
    };
    match (&ctx.manifest_path, &result) {
        (Some(p), Ok(())) => {
            let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
            json.push('\n');
            write_file(p, &json)?;
        }
        _ => {
            let _ = writeln!(
                err,
                "{}",
                serde_json::to_string(&manifest).expect("manifest serializes")
            );
        }
    }
    result
}

fn cmd_analyze(ctx: &mut Ctx, a: &AnalyzeArgs) -> Result<(), CliError> {
    let graph = ctx.read_arch(&a.arch)?;
    let report = max_rf(&graph).map_err(CliError::usage)?;
    let shapes = graph.shapes().map_err(CliError::usage)?;
    let order = crate::arch_graph::topo_order(&graph).map_err(CliError::usage)?;
    let probe_id = report.probe_id().unwrap_or_default().to_string();
    let params = count_params(&graph);

    let window = match a.window {
        Some(coord) => {
            let node = a.node.clone().unwrap_or_else(|| probe_id.clone());
            Some((
                node.clone(),
                coord,
                rf_window(&graph, &node, coord).map_err(CliError::usage)?,
            ))
        }
        None => None,
    };

    if a.json {
        let mut v = serde_json::json!({
            "nodes": serde_json::to_value(&report).expect("report serializes"),
            "probe": probe_id,
            "probe_rf": report.probe_rf(),
            "params": params,
        });
        if let Some((node, coord, w)) = &window {
            v["window"] = serde_json::json!({ "node": node, "coord": coord, "box": w });
        }
        let mut s = serde_json::to_string_pretty(&v).expect("json");
        s.push('\n');
        return ctx.emit(&s);
    }

    let width = order.iter().map(String::len).max().unwrap_or(4).max(4);
    let mut s = format!(
        "{:<width$}  {:<12}  {:>16}  {:>11}  {:>9}  {:>12}\n",
        "node", "kind", "shape", "max RF", "stride", "offset"
    );
    for id in &order {
        let n = &report.nodes[id];
        let kind = graph.node(id).map(|n| n.kind).unwrap_or(NodeKind::Input);
        s.push_str(&format!(
            "{:<width$}  {:<12}  {:>16}  {:>11}  {:>9}  {:>12}\n",
            id,
            kind.name(),
            shapes[id].to_string(),
            n.rf.to_string(),
            n.cum_stride.to_string(),
            format!("{}, {}", n.window_offset[0], n.window_offset[1]),
        ));
    }
    s.push_str(&format!("conv params: {params}\n"));
    s.push_str(&format!("probe max RF: {}\n", report.probe_rf()));
    if let Some((node, coord, w)) = window {
        s.push_str(&format!(
            "window of {node} at ({}, {}): freq {} time {} (clipped: freq {} time {})\n",
            coord.freq, coord.time, w.freq, w.time, w.freq_clipped, w.time_clipped
        ));
    }
    ctx.emit(&s)
}

fn gen_config(a: &GenArgs) -> FamilyConfig {
    let rho = match (a.rho, a.rho_f, a.rho_t) {
        (Some(r), _, _) => RhoSpec::Uniform(r),
        (None, Some(f), Some(t)) => RhoSpec::PerAxis { freq: f, time: t },
        _ => unreachable!("clap enforces --rho or --rho-f/--rho-t"),
    };
    let mut cfg = FamilyConfig::new(a.family.into(), rho)
        .with_base_channels(a.base_channels)
        .with_groups(a.groups)
        .with_extra_pools(a.extra_pools)
        .with_input_shape(InputShape::new(a.in_channels, a.freq_bins, a.time_frames))
        .with_damping(a.damp.spec(a.m))
        .with_shake_shake(a.shake_shake)
        .with_frequency_aware(a.frequency_aware);
    if let Some(g) = a.growth_rate {
        cfg = cfg.with_growth_rate(g);
    }
    cfg
}

fn cmd_gen(ctx: &mut Ctx, a: &GenArgs) -> Result<(), CliError> {
    let graph = family_gen::generate(&gen_config(a)).map_err(CliError::usage)?;
    let text = serialize_arch(&graph).map_err(CliError::usage)?;
    match &a.out {
        Some(p) => {
            write_file(p, &text)?;
            ctx.manifest_beside(p.with_extension("manifest.json"));
            Ok(())
        }
        None => ctx.emit(&text),
    }
}

fn cmd_table(ctx: &mut Ctx, a: &TableArgs) -> Result<(), CliError> {
    let family: Family = a.family.into();
    let rows = family_gen::rho_table(family).map_err(CliError::failure)?;
    let text = family_gen::rho_table_text(family, &rows);
    let csv = family_gen::rho_table_csv(&rows);
    if let Some(dir) = &a.out {
        write_file(&dir.join(format!("{}_rho_table.txt", family.name())), &text)?;
        write_file(&dir.join(format!("{}_rho_table.csv", family.name())), &csv)?;
        ctx.manifest_beside(dir.join("manifest.json"));
    }
    ctx.emit(if a.csv { &csv } else { &text })
}

fn cmd_damp(ctx: &mut Ctx, a: &DampArgs) -> Result<(), CliError> {
    let c = DampingMatrix::with_mode(a.time, a.freq, a.m_t, a.m_f, a.mode.into())
        .map_err(CliError::usage)?;
    match &a.out {
        Some(stem) => {
            write_file(&stem.with_extension("csv"), &c.to_csv())?;
            let mut json = serde_json::to_string_pretty(&c.sidecar_json()).expect("json");
            json.push('\n');
            write_file(&stem.with_extension("json"), &json)?;
            ctx.manifest_beside(stem.with_extension("manifest.json"));
            Ok(())
        }
        None => ctx.emit(&c.to_csv()),
    }
}

/// Replaces the damping of every conv node.
pub fn apply_damping(
    graph: &ArchGraph,
    spec: Option<DampingSpec>,
) -> Result<ArchGraph, crate::arch_graph::GraphError> {
    let nodes = graph.nodes().cloned().map(|mut n| {
        if n.kind == NodeKind::Conv {
            n.damping = spec;
        }
        n
    });
    ArchGraph::validated(graph.input_shape, nodes.collect::<Vec<_>>())
}

fn eval_options(linear: bool) -> EvalOptions {
    if linear {
        EvalOptions::identity()
    } else {
        EvalOptions::default()
    }
}

fn fmt_pair(v: [f64; 2]) -> String {
    format!("freq {:.16e}  time {:.16e}", v[0], v[1])
}

fn cmd_erf(ctx: &mut Ctx, a: &ErfArgs) -> Result<(), CliError> {
    let mut graph = ctx.read_arch(&a.arch)?;
    if let Some(d) = a.damp {
        graph = apply_damping(&graph, d.spec(a.m)).map_err(CliError::usage)?;
    }
    let weights = ctx.read_weights(&graph, a.weights.as_deref(), a.seed)?;
    let s = graph.input_shape;
    let inputs = if a.input_files.is_empty() {
        if a.n_inputs == 0 {
            return Err(CliError::usage("--n-inputs must be at least 1"));
        }
        erf_probe::noise_inputs([s.channels, s.freq, s.time], a.seed, a.n_inputs)
    } else {
        a.input_files
            .iter()
            .map(|p| ctx.read_input(p))
            .collect::<Result<_, _>>()?
    };
    let probe = a.probe.map_or(ProbeSpec::Center, ProbeSpec::At);
    let map = erf_probe::gradient_map(&graph, &weights, &inputs, probe, eval_options(a.linear))
        .map_err(erf_error)?;
    let probe_id = graph.probe_node().map(|n| n.id.clone()).unwrap_or_default();
    let window = rf_window(&graph, &probe_id, map.probe).map_err(CliError::usage)?;

    fs::create_dir_all(&a.out)
        .map_err(|e| CliError::failure(format!("cannot create {}: {e}", a.out.display())))?;
    let (paths, sc) = erf_probe::export_heatmap(
        &map,
        &window,
        &a.out.join("heatmap"),
        a.format.into(),
        Some(a.seed),
    )
    .map_err(erf_error)?;
    ctx.manifest_beside(a.out.join("manifest.json"));

    let mut s = String::new();
    s.push_str(&format!(
        "probe {} at ({}, {}), {} inputs\n",
        probe_id, sc.probe[0], sc.probe[1], sc.n_inputs
    ));
    s.push_str(&format!("mu     {}\n", fmt_pair(sc.mu)));
    s.push_str(&format!("sigma  {}\n", fmt_pair(sc.sigma)));
    s.push_str(&format!("E      {}\n", fmt_pair(sc.e)));
    s.push_str(&format!(
        "ERF within max RF: {}\n",
        if sc.erf_within_max_rf() { "yes" } else { "no" }
    ));
    s.push_str(&format!(
        "wrote {} and {}\n",
        paths.heatmap.display(),
        paths.sidecar.display()
    ));
    ctx.emit(&s)
}

fn cmd_gradcheck(ctx: &mut Ctx, a: &GradcheckArgs) -> Result<(), CliError> {
    if !(a.h > 0.0 && a.h.is_finite()) {
        return Err(CliError::usage("--h must be positive"));
    }
    let graph = ctx.read_arch(&a.arch)?;
    let weights = if a.zero_weights {
        WeightSet::constant(&graph, 0.0)
    } else {
        ctx.read_weights(&graph, a.weights.as_deref(), a.seed)?
    };
    let s = graph.input_shape;
    let input = match &a.input_file {
        Some(p) => ctx.read_input(p)?,
        None => erf_probe::noise_inputs([s.channels, s.freq, s.time], a.seed, 1).remove(0),
    };
    let report = grad_check(
        &graph,
        &weights,
        &input,
        a.n_probes,
        a.h,
        a.seed,
        eval_options(a.linear),
    )
    .map_err(CliError::usage)?;
    let pass = report.max_rel_error <= a.tol;
    ctx.emit(&format!(
        "max relative error: {:.16e} over {} samples (tolerance {:e}): {}\n",
        report.max_rel_error,
        report.samples.len(),
        a.tol,
        if pass { "PASS" } else { "FAIL" }
    ))?;
    if pass {
        Ok(())
    } else {
        Err(CliError {
            code: EXIT_FAILURE,
            message: "gradient check above tolerance".into(),
        })
    }
}
