use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use miniio::codec::{Codec, CodecSpec};
use miniio::container::consolidate;
use miniio::harness::{
    bench_sweep, preset, run, run_rank, verify, Cell, Launch, RunConfig, VerifyOutcome,
};
use miniio::modes::stitch;
use miniio::staging::{dataplane_bench, BENCH_CSV_HEADER};
use miniio::types::{DataplaneKind, Mode, QueueFullPolicy};
use miniio::Error;

#[derive(Parser)]
#[command(name = "miniio", version, about = "Step-based parallel I/O and staging toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the synthetic workload once.
    Run {
        #[command(flatten)]
        flags: RunFlags,
        /// Verify the output against the field generator afterwards.
        #[arg(long)]
        verify: bool,
    },
    /// Check a container, flat file, part directory or capture bit for bit.
    Verify {
        path: PathBuf,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Merge file-per-process parts into one canonical file.
    Stitch { parts: PathBuf, out: PathBuf },
    /// Rewrite a container as one canonical file.
    Consolidate { container: PathBuf, out: PathBuf },
    /// Run a matrix of configurations with repetitions.
    BenchSweep {
        #[command(flatten)]
        flags: RunFlags,
        /// table-one, ratio, codec, burst-buffer or modes.
        #[arg(long, default_value = "table-one")]
        preset: String,
        /// JSON list of cells; overrides --preset.
        #[arg(long)]
        matrix: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        reps: u32,
        /// Smallest relative gap between consecutive rows counted as ordered.
        #[arg(long, default_value_t = 0.15)]
        min_gap: f64,
    },
    /// Compare the tcp and shm dataplanes.
    DataplaneBench {
        /// Payload sizes in bytes.
        #[arg(long, value_delimiter = ',', default_value = "0,65536,1048576")]
        sizes: Vec<u64>,
        #[arg(long, default_value_t = 100)]
        blocks: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    #[command(hide = true)]
    RankWorker {
        #[arg(long)]
        coordinator: SocketAddr,
        #[arg(long)]
        rank: u32,
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args, Clone, Default)]
struct RunFlags {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    ranks: Option<u32>,
    #[arg(long)]
    ranks_per_node: Option<u32>,
    #[arg(long)]
    ratio: Option<u32>,
    /// none, lz4, zstd or zlib, optionally with a level as `zstd:5`.
    #[arg(long)]
    codec: Option<String>,
    #[arg(long)]
    shuffle: bool,
    #[arg(long)]
    queue_limit: Option<u32>,
    /// block or discard.
    #[arg(long)]
    queue_policy: Option<String>,
    /// tcp or shm.
    #[arg(long)]
    dataplane: Option<String>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    bb_dir: Option<PathBuf>,
    #[arg(long)]
    bb_capacity_mb: Option<f64>,
    #[arg(long)]
    pfs_dir: Option<PathBuf>,
    #[arg(long)]
    pfs_bw_mbps: Option<f64>,
    #[arg(long)]
    pfs_op_us: Option<u64>,
    #[arg(long)]
    comm_latency_us: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    /// Global grid as NXxNYxNZ.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    nvars: Option<u32>,
    #[arg(long)]
    compute_ms: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run ranks as threads of this process instead of child processes.
    #[arg(long)]
    threads: bool,
}

fn parse_codec(s: &str, shuffle: bool) -> miniio::Result<CodecSpec> {
    let (name, level) = match s.split_once(':') {
        Some((n, l)) => (
            n,
            Some(l.parse::<i32>().map_err(|_| Error::Config(format!("bad codec level {l:?}")))?),
        ),
        None => (s, None),
    };
    let codec = Codec::parse(name)?;
    let spec = match level {
        Some(l) => CodecSpec::new(codec, l, shuffle),
        None => CodecSpec::with_default_level(codec, shuffle),
    };
    spec.validate()?;
    Ok(spec)
}

impl RunFlags {
    fn load(&self) -> miniio::Result<RunConfig> {
        let mut cfg: RunConfig = match &self.config {
            Some(p) => std::fs::read(p)
                .map_err(|e| e.to_string())
                .and_then(|b| serde_json::from_slice(&b).map_err(|e| e.to_string()))
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => RunConfig::default(),
        };
        let (w, e) = (&mut cfg.workload, &mut cfg.engine);
        if let Some(m) = &self.mode {
            e.mode = Mode::parse(m)?;
        }
        if let Some(r) = self.ranks {
            w.ranks = r;
        }
        if let Some(r) = self.ranks_per_node {
            w.ranks_per_node = r;
        }
        if self.ratio.is_some() {
            e.aggregation_ratio = self.ratio;
        }
        if let Some(c) = &self.codec {
            e.codec = parse_codec(c, self.shuffle)?;
        } else if self.shuffle {
            e.codec.shuffle = true;
        }
        if let Some(q) = self.queue_limit {
            e.queue_limit = q;
        }
        if let Some(p) = &self.queue_policy {
            e.queue_full_policy = match p.as_str() {
                "block" => QueueFullPolicy::Block,
                "discard" => QueueFullPolicy::Discard,
                _ => return Err(Error::Config(format!("unknown queue policy {p:?}"))),
            };
        }
        if let Some(d) = &self.dataplane {
            e.dataplane = match d.as_str() {
                "tcp" => DataplaneKind::Tcp,
                "shm" => DataplaneKind::Shm,
                _ => return Err(Error::Config(format!("unknown dataplane {d:?}"))),
            };
        }
        if self.endpoint.is_some() {
            e.control_endpoint = self.endpoint.clone();
        }
        if let Some(b) = &self.bb_dir {
            e.bb_dir = Some(b.clone());
            e.drain = true;
        }
        if self.bb_capacity_mb.is_some() {
            e.bb_capacity_mb = self.bb_capacity_mb;
        }
        if self.pfs_bw_mbps.is_some() {
            e.pfs_bw_mbps = self.pfs_bw_mbps;
        }
        if self.pfs_op_us.is_some() {
            e.pfs_op_us = self.pfs_op_us;
        }
        if self.comm_latency_us.is_some() {
            e.comm_latency_us = self.comm_latency_us;
        }
        if let Some(s) = self.seed {
            w.seed = s;
        }
        if let Some(s) = self.steps {
            w.steps = s;
        }
        if let Some(g) = &self.grid {
            let dims: Vec<u64> = g
                .split('x')
                .map(|d| d.parse().map_err(|_| Error::Config(format!("bad grid {g:?}"))))
                .collect::<miniio::Result<_>>()?;
            w.global_shape = dims
                .try_into()
                .map_err(|_| Error::Config(format!("grid {g:?} needs three dimensions")))?;
        }
        if let Some(n) = self.nvars {
            w.nvars = n;
        }
        if let Some(c) = self.compute_ms {
            w.compute_ms = c;
        }
        if let Some(o) = &self.out {
            // keep pfs under the run directory unless placed elsewhere
            if self.pfs_dir.is_none() && cfg.engine.pfs_dir == cfg.out.join("pfs") {
                cfg.engine.pfs_dir = o.join("pfs");
            }
            cfg.out = o.clone();
        }
        if let Some(p) = &self.pfs_dir {
            cfg.engine.pfs_dir = p.clone();
        }
        Ok(cfg)
    }

    fn launch(&self) -> miniio::Result<Launch> {
        if self.threads {
            Ok(Launch::Threads)
        } else {
            Ok(Launch::Processes(std::env::current_exe()?))
        }
    }
}

const EXIT_MISMATCH: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(match e {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    })
}

fn report_verify(path: &Path, o: &VerifyOutcome) -> ExitCode {
    match o {
        VerifyOutcome::Pass { steps } => {
            println!("verify ok: {} ({steps} steps)", path.display());
            ExitCode::SUCCESS
        }
        VerifyOutcome::Fail(m) => {
            println!("verify FAILED: {}: {m}", path.display());
            ExitCode::from(EXIT_MISMATCH)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = (|| -> miniio::Result<ExitCode> {
        match cli.cmd {
            Cmd::Run { flags, verify: check } => {
                let cfg = flags.load()?;
                let report = run(&cfg, &flags.launch()?)?;
                println!(
                    "{} steps, io {:.4} s, wall {:.3} s, report in {}",
                    report.steps.len(),
                    report.totals.io_sum_s,
                    report.totals.wall_s,
                    cfg.out.join("report.json").display()
                );
                if let Some(f) = &report.failure {
                    eprintln!("run failed: {f}");
                    return Ok(ExitCode::from(EXIT_RUNTIME));
                }
                if check {
                    let path = PathBuf::from(&report.artifact);
                    return Ok(report_verify(&path, &verify(&path, &cfg.workload)?));
                }
                Ok(ExitCode::SUCCESS)
            }
            Cmd::Verify { path, flags } => {
                let cfg = flags.load()?;
                cfg.workload.validate()?;
                Ok(report_verify(&path, &verify(&path, &cfg.workload)?))
            }
            Cmd::Stitch { parts, out } => {
                let r = stitch(&parts, &out)?;
                println!("{}", serde_json::to_string(&r)?);
                Ok(ExitCode::SUCCESS)
            }
            Cmd::Consolidate { container, out } => {
                let r = consolidate(&container, &out)?;
                println!("{}", serde_json::to_string(&r)?);
                Ok(ExitCode::SUCCESS)
            }
            Cmd::BenchSweep {
                flags,
                preset: name,
                matrix,
                reps,
                min_gap,
            } => {
                let cfg = flags.load()?;
                let cells: Vec<Cell> = match matrix {
                    Some(p) => serde_json::from_slice(&std::fs::read(p)?)?,
                    None => preset(&name, &cfg)?,
                };
                let out = cfg.out.clone();
                let r = bench_sweep(&cfg, &cells, reps, &flags.launch()?, &out, min_gap)?;
                for row in &r.rows {
                    println!("{:<24} {:>10.4} s/step  (min {:.4}, max {:.4})", row.label, row.mean_s, row.min_s, row.max_s);
                }
                println!("strictly decreasing by {min_gap}: {}", r.strictly_decreasing);
                Ok(ExitCode::SUCCESS)
            }
            Cmd::DataplaneBench { sizes, blocks, out } => {
                let rows = dataplane_bench(&sizes, blocks)?;
                let mut csv = format!("{BENCH_CSV_HEADER}\n");
                for r in &rows {
                    csv.push_str(&r.csv());
                    csv.push('\n');
                }
                print!("{csv}");
                for pair in rows.chunks(2) {
                    if let [tcp, shm] = pair {
                        if shm.throughput_mib_s < tcp.throughput_mib_s {
                            eprintln!("note: shm slower than tcp at {} bytes", tcp.payload_bytes);
                        }
                    }
                }
                if let Some(p) = out {
                    std::fs::write(p, csv)?;
                }
                Ok(ExitCode::SUCCESS)
            }
            Cmd::RankWorker {
                coordinator,
                rank,
                config,
            } => {
                let cfg: RunConfig = serde_json::from_slice(&std::fs::read(config)?)?;
                run_rank(coordinator, rank, &cfg)?;
                Ok(ExitCode::SUCCESS)
            }
        }
    })();
    res.unwrap_or_else(|e| fail(&e))
}
