//! Command-line front end: scene generation, map search, network runs,
//! configuration sweeps, and oracle verification.

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use spocta::driver::{run_network, RunConfig};
use spocta::formats::{
    read_network, read_scene, write_map, write_scene, SceneFile,
};
use spocta::gen::{gen_scene, gen_weights, SceneKind};
use spocta::mapsearch::{search_bruteforce, search_traced};
use spocta::mem::EnergyTable;
use spocta::oracle::{dense_oracle_conv, MAX_ORACLE_EXTENT};
use spocta::sim::{
    simulate_search, PipelineConfig, PipelineMode, SearchMode,
};
use spocta::types::{Coordinate, LayerSpec, OpKind, QuantParams};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "spocta", about = "Sparse 3D convolution engine with octree map search")]
struct Cli {
    /// Write a machine-readable error JSON here on failure.
    #[arg(long, global = true)]
    error_json: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a network over a scene and emit output + reports.
    Run(RunArgs),
    /// Search the IN-OUT map for one operator and report modeled cycles.
    Search(SearchArgs),
    /// Generate a synthetic scene file.
    Gen(GenArgs),
    /// Cross-product sweep over cache/FIFO/penalty knobs; CSV out.
    Sweep(SweepArgs),
    /// Check engine maps and outputs against the brute-force/dense oracles.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum PipelineArg {
    Fine,
    Coarse,
}

#[derive(Clone, Copy, ValueEnum)]
enum OpArg {
    Subm3,
    Gconv2,
    Gconv3,
}

impl From<OpArg> for OpKind {
    fn from(o: OpArg) -> OpKind {
        match o {
            OpArg::Subm3 => OpKind::Subm3,
            OpArg::Gconv2 => OpKind::Gconv2,
            OpArg::Gconv3 => OpKind::Gconv3,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    network: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// Output scene path.
    #[arg(long)]
    output: Option<PathBuf>,
    /// JSON run report path.
    #[arg(long)]
    report: Option<PathBuf>,
    /// JSON energy report path.
    #[arg(long)]
    energy_report: Option<PathBuf>,
    #[arg(long)]
    energy_table: Option<PathBuf>,
    /// Cross-check every layer against the dense oracle.
    #[arg(long)]
    oracle: bool,
    /// Disable sparsity-aware gather (output is unchanged; cycles differ).
    #[arg(long)]
    dense_compute: bool,
    #[arg(long, value_enum, default_value = "fine")]
    pipeline: PipelineArg,
    /// Total weight-cache bytes; omit to disable the cache model.
    #[arg(long)]
    cache_bytes: Option<usize>,
    /// Equal per-partition split instead of the prioritized allocation.
    #[arg(long)]
    uniform_cache: bool,
    #[arg(long, default_value_t = 16)]
    fifo_depth: usize,
    #[arg(long, default_value_t = 4)]
    cross_block_penalty: u32,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, value_enum)]
    op: OpArg,
    /// Map file output path.
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    cross_block_penalty: u32,
}

#[derive(Args)]
struct GenArgs {
    /// Grid extent as X,Y,Z.
    #[arg(long, value_delimiter = ',')]
    extent: Vec<u16>,
    /// Occupancy probability for the uniform distribution, in (0, 1].
    #[arg(long, default_value_t = 0.05)]
    density: f64,
    #[arg(long, value_enum, default_value = "uniform")]
    distribution: DistArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    /// Int8 features instead of f32.
    #[arg(long)]
    int8: bool,
    #[arg(long)]
    output: PathBuf,
    /// Also emit a random demo network here (requires --weights).
    #[arg(long, requires = "weights")]
    network: Option<PathBuf>,
    /// Weight file for the demo network.
    #[arg(long, requires = "network")]
    weights: Option<PathBuf>,
    /// Demo network layers as op:c_out pairs, e.g. subm3:16,gconv2:32.
    /// tconv2 pairs with the most recent gconv2.
    #[arg(long, value_delimiter = ',', default_value = "subm3:16")]
    net_spec: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DistArg {
    Uniform,
    Surface,
}

fn demo_network(
    spec: &[String],
    c_in0: usize,
    float: bool,
    seed: u64,
) -> Result<(spocta::formats::NetworkFile, Vec<u8>), CmdError> {
    use spocta::formats::{append_weights, NetworkFile, NetworkLayer};
    use spocta::types::PostprocessStep;
    let mut blob = Vec::new();
    let mut layers = Vec::new();
    let mut c_in = c_in0;
    let mut last_gconv2 = None;
    for (i, item) in spec.iter().enumerate() {
        let (op_s, cout_s) = item
            .split_once(':')
            .ok_or_else(|| CmdError::new("bad-net-spec", format!("expected op:c_out, got {item}")))?;
        let op = match op_s {
            "subm3" => OpKind::Subm3,
            "gconv2" => OpKind::Gconv2,
            "gconv3" => OpKind::Gconv3,
            "tconv2" => OpKind::Tconv2,
            other => return Err(CmdError::new("bad-net-spec", format!("unknown op {other}"))),
        };
        let c_out: usize = cout_s
            .parse()
            .map_err(|_| CmdError::new("bad-net-spec", format!("bad channel count {cout_s}")))?;
        let mut layer = LayerSpec::new(op, c_in, c_out);
        if op == OpKind::Tconv2 {
            layer.paired_layer = Some(last_gconv2.ok_or_else(|| {
                CmdError::new("bad-net-spec", "tconv2 needs an earlier gconv2")
            })?);
        }
        if op == OpKind::Gconv2 {
            last_gconv2 = Some(i);
        }
        if !float {
            layer.postprocess.push(PostprocessStep::Requantize);
        }
        let w = gen_weights(op.kernel(), c_out, c_in, float, seed ^ (i as u64 + 1));
        let offset = append_weights(&mut blob, &w);
        layers.push(NetworkLayer {
            spec: layer,
            weight_offset: offset,
            quant: (!float).then(|| QuantParams {
                input_scale: 0.05,
                weight_scale: 1.0 / 127.0,
                output_scale: 0.05,
            }),
        });
        c_in = c_out;
    }
    Ok((NetworkFile { float, layers }, blob))
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    network: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// Comma list of total cache sizes in bytes.
    #[arg(long, value_delimiter = ',')]
    cache_bytes: Vec<usize>,
    /// Comma list of FIFO depths.
    #[arg(long, value_delimiter = ',', default_value = "16")]
    fifo_depth: Vec<usize>,
    /// Comma list of cross-block penalties.
    #[arg(long, value_delimiter = ',', default_value = "4")]
    cross_block_penalty: Vec<u32>,
    #[arg(long)]
    energy_table: Option<PathBuf>,
    /// CSV output path.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Restrict to one operator; all three searchable ops by default.
    #[arg(long, value_enum)]
    op: Option<OpArg>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Serialize)]
struct ErrorJson {
    kind: &'static str,
    message: String,
}

struct CmdError {
    kind: &'static str,
    message: String,
}

impl CmdError {
    fn new(kind: &'static str, message: impl Into<String>) -> Self {
        CmdError { kind, message: message.into() }
    }
}

macro_rules! impl_from_err {
    ($ty:ty, $kind:literal) => {
        impl From<$ty> for CmdError {
            fn from(e: $ty) -> Self {
                CmdError::new($kind, e.to_string())
            }
        }
    };
}

impl_from_err!(spocta::formats::FormatError, "format");
impl_from_err!(spocta::driver::DriverError, "run");
impl_from_err!(spocta::sim::SimError, "sim");
impl_from_err!(std::io::Error, "io");
impl_from_err!(serde_json::Error, "json");
impl_from_err!(spocta::mem::MemError, "mem");

fn load_energy_table(path: &Option<PathBuf>) -> Result<EnergyTable, CmdError> {
    match path {
        None => Ok(EnergyTable::default()),
        Some(p) => EnergyTable::parse(&std::fs::read_to_string(p)?)
            .map_err(|e| CmdError::new("energy-table", e.to_string())),
    }
}

fn write_json<T: Serialize>(path: &Option<PathBuf>, value: &T) -> Result<(), CmdError> {
    if let Some(p) = path {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        std::fs::write(p, bytes)?;
    }
    Ok(())
}

fn pipeline_cfg(fifo_depth: usize, penalty: u32) -> PipelineConfig {
    PipelineConfig { fifo_depth, cross_block_penalty: penalty, ..Default::default() }
}

fn cmd_run(a: &RunArgs) -> Result<(), CmdError> {
    let scene = read_scene(&a.scene)?;
    let net = read_network(&a.network)?;
    let blob = std::fs::read(&a.weights)?;
    let cfg = RunConfig {
        pipeline: pipeline_cfg(a.fifo_depth, a.cross_block_penalty),
        mode: match a.pipeline {
            PipelineArg::Fine => PipelineMode::Fine,
            PipelineArg::Coarse => PipelineMode::Coarse,
        },
        sparse_compute: !a.dense_compute,
        cache_total_bytes: a.cache_bytes,
        uniform_cache: a.uniform_cache,
        oracle: a.oracle,
        energy: load_energy_table(&a.energy_table)?,
    };
    let r = run_network(&scene, &net, &blob, &cfg)?;
    if let Some(out) = &a.output {
        write_scene(out, &r.output)?;
    }
    write_json(&a.report, &r.report)?;
    write_json(&a.energy_report, &r.report.energy)?;
    println!(
        "ran {} layers: {} output voxels, {} cycles, {:.1} pJ",
        net.layers.len(),
        r.output.tensor.len(),
        r.report.total_cycles,
        r.report.energy.total_pj
    );
    Ok(())
}

#[derive(Serialize)]
struct SearchReport {
    op: OpKind,
    voxels: usize,
    entries: usize,
    parallel: spocta::sim::SearchCycles,
    serial: spocta::sim::SearchCycles,
    avg_candidates: f64,
    speedup: f64,
}

fn cmd_search(a: &SearchArgs) -> Result<(), CmdError> {
    let scene = read_scene(&a.scene)?;
    let out = search_traced(&scene.tensor, a.op.into());
    let cfg = pipeline_cfg(16, a.cross_block_penalty);
    let parallel = simulate_search(&out.trace, SearchMode::Parallel, &cfg);
    let serial = simulate_search(&out.trace, SearchMode::Serial, &cfg);
    let voxels = out.trace.voxels.len();
    let candidates: u64 = out.trace.voxels.iter().map(|v| v.candidates as u64).sum();
    let report = SearchReport {
        op: a.op.into(),
        voxels,
        entries: out.map.entries.len(),
        parallel,
        serial,
        avg_candidates: if voxels == 0 { 0.0 } else { candidates as f64 / voxels as f64 },
        speedup: if parallel.total == 0 { 1.0 } else { serial.total as f64 / parallel.total as f64 },
    };
    if let Some(p) = &a.map {
        write_map(p, &out.map)?;
    }
    write_json(&a.report, &report)?;
    println!(
        "{} voxels -> {} entries; {} parallel vs {} serial cycles",
        voxels, report.entries, parallel.total, serial.total
    );
    Ok(())
}

fn cmd_gen(a: &GenArgs) -> Result<(), CmdError> {
    if !(a.density > 0.0 && a.density <= 1.0) {
        return Err(CmdError::new("bad-density", format!("density {} not in (0, 1]", a.density)));
    }
    if a.extent.len() != 3 || a.extent.contains(&0) {
        return Err(CmdError::new("bad-extent", "--extent needs three positive values X,Y,Z"));
    }
    let extent = [a.extent[0], a.extent[1], a.extent[2]];
    let kind = match a.distribution {
        DistArg::Uniform => SceneKind::Uniform { density_millis: (a.density * 1000.0).round() as u32 },
        DistArg::Surface => SceneKind::Surface,
    };
    let tensor = gen_scene(extent, a.channels, kind, !a.int8, a.seed);
    let n = tensor.len();
    write_scene(&a.output, &SceneFile { tensor, extent })?;
    if let (Some(net_path), Some(w_path)) = (&a.network, &a.weights) {
        let (net, blob) = demo_network(&a.net_spec, a.channels, !a.int8, a.seed)?;
        spocta::formats::write_network(net_path, &net)?;
        std::fs::write(w_path, blob)?;
    }
    println!("wrote {} voxels to {}", n, a.output.display());
    Ok(())
}

fn sweep_threads() -> usize {
    std::env::var("SPOCTA_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

fn cmd_sweep(a: &SweepArgs) -> Result<(), CmdError> {
    let scene = read_scene(&a.scene)?;
    let net = read_network(&a.network)?;
    let blob = std::fs::read(&a.weights)?;
    let energy = load_energy_table(&a.energy_table)?;

    let mut points = Vec::new();
    for &cache in &a.cache_bytes {
        for &depth in &a.fifo_depth {
            for &penalty in &a.cross_block_penalty {
                points.push((cache, depth, penalty));
            }
        }
    }

    let run_point = |&(cache, depth, penalty): &(usize, usize, u32)| {
        let cfg = RunConfig {
            pipeline: pipeline_cfg(depth, penalty),
            cache_total_bytes: Some(cache),
            energy: energy.clone(),
            ..Default::default()
        };
        run_network(&scene, &net, &blob, &cfg).map(|r| {
            format!(
                "{},{},{},{},{},{},{:.1}\n",
                cache,
                depth,
                penalty,
                r.report.total_cycles,
                r.report.ledger.dram_read_bytes,
                r.report.ledger.dram_write_bytes,
                r.report.energy.total_pj
            )
        })
    };

    // Fan out across points, capped by SPOCTA_THREADS; rows keep point order.
    let workers = sweep_threads().min(points.len().max(1));
    let mut rows: Vec<Option<Result<String, spocta::driver::DriverError>>> =
        (0..points.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let rows_shared = std::sync::Mutex::new(&mut rows);
    std::thread::scope(|s| {
        let (next, rows, points, run_point) = (&next, &rows_shared, &points, &run_point);
        for _ in 0..workers {
            s.spawn(move || loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= points.len() {
                    break;
                }
                let row = run_point(&points[i]);
                rows.lock().unwrap()[i] = Some(row);
            });
        }
    });

    let mut csv =
        String::from("cache_bytes,fifo_depth,cross_block_penalty,total_cycles,dram_read_bytes,dram_write_bytes,total_pj\n");
    for row in rows {
        csv.push_str(&row.expect("all points visited")?);
    }
    std::fs::write(&a.output, csv)?;
    println!("wrote {} sweep rows to {}", points.len(), a.output.display());
    Ok(())
}

#[derive(Serialize)]
struct VerifyReport {
    ops: Vec<OpKind>,
    voxels: usize,
    map_checks: usize,
    conv_checks: usize,
    ok: bool,
}

fn cmd_verify(a: &VerifyArgs) -> Result<(), CmdError> {
    let scene = read_scene(&a.scene)?;
    let ops: Vec<OpKind> = match a.op {
        Some(op) => vec![op.into()],
        None => vec![OpKind::Subm3, OpKind::Gconv2, OpKind::Gconv3],
    };

    let mut map_checks = 0;
    let mut conv_checks = 0;
    for &op in &ops {
        let engine = search_traced(&scene.tensor, op);
        let brute = search_bruteforce(&scene.tensor, op);
        if !engine.map.same_map(&brute) {
            return Err(CmdError::new(
                "verify",
                format!("{op:?} map disagrees with the brute-force oracle"),
            ));
        }
        map_checks += 1;

        let ext = scene.extent;
        if scene.tensor.features.is_float() && ext.iter().all(|&e| e <= MAX_ORACLE_EXTENT) {
            let spec = LayerSpec::new(op, scene.tensor.channels, 8);
            let w = gen_weights(op.kernel(), 8, scene.tensor.channels, true, a.seed);
            let opts = spocta::exec::ExecOptions::default();
            let got = spocta::exec::execute_layer(
                &scene.tensor,
                &w,
                &engine.map,
                &spec,
                &QuantParams::default(),
                &opts,
            )
            .map_err(|e| CmdError::new("verify", e.to_string()))?;
            let want =
                dense_oracle_conv(&scene.tensor, &w, &spec, Coordinate::new(ext[0], ext[1], ext[2]))
                    .map_err(|e| CmdError::new("verify", e.to_string()))?;
            // Oracle output order is scan order, engine order is canonical;
            // compare site-by-site.
            if got.len() != want.len() {
                return Err(CmdError::new("verify", format!("{op:?} output site counts differ")));
            }
            for (i, c) in got.coords.iter().enumerate() {
                let Some(j) = want.coords.iter().position(|w| w == c) else {
                    return Err(CmdError::new("verify", format!("{op:?} unexpected site {c:?}")));
                };
                for (x, y) in got.row_f32(i).iter().zip(want.row_f32(j)) {
                    if (x - y).abs() > 1e-4 * y.abs().max(1.0) {
                        return Err(CmdError::new(
                            "verify",
                            format!("{op:?} site {c:?}: engine {x} vs oracle {y}"),
                        ));
                    }
                }
            }
            conv_checks += 1;
        }
    }

    let report =
        VerifyReport { ops, voxels: scene.tensor.len(), map_checks, conv_checks, ok: true };
    write_json(&a.report, &report)?;
    println!("verified: {} map checks, {} conv checks", map_checks, conv_checks);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Run(a) => cmd_run(a),
        Cmd::Search(a) => cmd_search(a),
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error ({}): {}", e.kind, e.message);
            if let Some(p) = &cli.error_json {
                let payload = ErrorJson { kind: e.kind, message: e.message };
                if let Ok(json) = serde_json::to_vec_pretty(&payload) {
                    let _ = std::fs::write(p, json);
                }
            }
            ExitCode::FAILURE
        }
    }
}
