use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use etrace::encoder::{encode_blocks, EncoderConfig};
use etrace::harness::pipeline::expected_pcs;
use etrace::harness::{
    compute_compression, generate_workload, run_pipeline, FifoOptions, PipelineOptions,
    WorkloadParams,
};
use etrace::instruction::{
    format_retirement_log, parse_instruction_map, parse_retirement_log, InstructionMap,
    RetirementBlock,
};
use etrace::transport::{read_stream, send_frames, serve_collector, write_stream, Frame};
use etrace::{decode_packet, decode_stream, TracePacket};

#[derive(Parser)]
#[command(name = "trace", version, about = "Processor-trace encoder, decoder and test harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic program and its retirement log.
    Gen {
        #[command(flatten)]
        workload: WorkloadArgs,
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        log: PathBuf,
    },
    /// Encode a retirement log into a packet stream file.
    Encode {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Rebuild the PC sequence from a stream file.
    Decode {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        map: PathBuf,
        /// One hex address per line.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Generate (or load), encode, transport, decode and verify in one go.
    Roundtrip {
        #[command(flatten)]
        workload: WorkloadArgs,
        /// Use this log instead of generating one; needs --map.
        #[arg(long, requires = "map")]
        log: Option<PathBuf>,
        #[arg(long, requires = "log")]
        map: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
        /// Put a bounded FIFO of this many frames between encoder and sink.
        #[arg(long)]
        fifo_capacity: Option<usize>,
        #[arg(long, default_value_t = 1, requires = "fifo_capacity")]
        drain_per_cycle: usize,
        #[arg(long)]
        stream_out: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Receive one stream over TCP and store it.
    Collect {
        #[arg(long)]
        listen: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        timeout: u64,
    },
    /// Send a stream file to a collector.
    Send {
        #[arg(long)]
        to: String,
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Args)]
struct WorkloadArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    instructions: usize,
    #[arg(long, default_value_t = 0.1)]
    branch_density: f64,
    #[arg(long, default_value_t = 0.05)]
    jump_density: f64,
    #[arg(long, default_value_t = 0.3)]
    uninferable_fraction: f64,
    /// Traps per 10^4 instructions.
    #[arg(long, default_value_t = 2.0)]
    trap_rate: f64,
    #[arg(long, default_value_t = 1)]
    workload_lanes: u32,
    #[arg(long, default_value_t = 0.5)]
    loop_bias: f64,
}

impl WorkloadArgs {
    fn params(&self) -> WorkloadParams {
        WorkloadParams {
            seed: self.seed,
            instruction_count: self.instructions,
            branch_density: self.branch_density,
            jump_density: self.jump_density,
            uninferable_fraction: self.uninferable_fraction,
            trap_rate: self.trap_rate,
            lanes: self.workload_lanes,
            loop_bias: self.loop_bias,
        }
    }
}

/// Config file plus per-key overrides.
#[derive(Args)]
struct ConfigArgs {
    /// key=value file; flags below take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    enabled: Option<String>,
    #[arg(long)]
    lanes: Option<String>,
    /// Comma-separated privilege levels, e.g. 0,3.
    #[arg(long)]
    priv_allow: Option<String>,
    /// Comma-separated LO-HI ranges, e.g. 0x1000-0x2000.
    #[arg(long)]
    addr_ranges: Option<String>,
    /// `packets` or `cycles`.
    #[arg(long)]
    resync_mode: Option<String>,
    #[arg(long)]
    resync_threshold: Option<String>,
}

impl ConfigArgs {
    fn load(&self, default_lanes: u32) -> Result<EncoderConfig> {
        let mut config = match &self.config {
            Some(path) => EncoderConfig::parse(&read_text(path)?)
                .with_context(|| format!("config {}", path.display()))?,
            None => EncoderConfig {
                lanes: default_lanes,
                ..EncoderConfig::default()
            },
        };
        let overrides = [
            ("enabled", &self.enabled),
            ("lanes", &self.lanes),
            ("priv_allow", &self.priv_allow),
            ("addr_ranges", &self.addr_ranges),
            ("resync_mode", &self.resync_mode),
            ("resync_threshold", &self.resync_threshold),
        ];
        for (key, value) in overrides {
            if let Some(v) = value {
                config.set(key, v).with_context(|| format!("--{}", key.replace('_', "-")))?;
            }
        }
        config.validate()?;
        Ok(config)
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn load_map(path: &Path) -> Result<InstructionMap> {
    parse_instruction_map(&read_text(path)?).with_context(|| format!("map {}", path.display()))
}

fn load_log(path: &Path) -> Result<Vec<RetirementBlock>> {
    parse_retirement_log(&read_text(path)?).with_context(|| format!("log {}", path.display()))
}

fn max_lane(blocks: &[RetirementBlock]) -> u32 {
    blocks.iter().map(|b| b.lane + 1).max().unwrap_or(1)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

/// Writes to `path`, or stdout when there is none.
fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write_file(p, text.as_bytes()),
        None => io::stdout().write_all(text.as_bytes()).map_err(Into::into),
    }
}

fn read_packets(path: &Path) -> Result<Vec<TracePacket>> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    let frames = read_stream(&bytes[..]).with_context(|| format!("stream {}", path.display()))?;
    let packets = frames
        .iter()
        .enumerate()
        .map(|(i, f)| decode_packet(f).with_context(|| format!("frame {i}")))
        .collect::<Result<_>>()?;
    Ok(packets)
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Gen { workload, map, log } => {
            let w = generate_workload(&workload.params())?;
            write_file(&map, w.map.to_string().as_bytes())?;
            write_file(&log, format_retirement_log(&w.blocks).as_bytes())?;
            println!("blocks={}", w.blocks.len());
            println!("retired_instructions={}", w.retired());
        }
        Command::Encode {
            log,
            map,
            out,
            config,
            report,
        } => {
            let blocks = load_log(&log)?;
            let map = load_map(&map)?;
            let config = config.load(max_lane(&blocks))?;
            let (pcs, _) = expected_pcs(&map, &blocks, &config)?;
            let packets = encode_blocks(&config, &blocks)?;
            let mut stream = Vec::new();
            write_stream(&packets, &mut stream)?;
            write_file(&out, &stream)?;
            let r = compute_compression(pcs.len() as u64, stream.len() as u64, &packets, 0)?;
            emit(report.as_deref(), &r.to_string())?;
        }
        Command::Decode {
            input,
            map,
            out,
            report,
        } => {
            let map = load_map(&map)?;
            let packets = read_packets(&input)?;
            let (pcs, decoded) = decode_stream(&packets, &map)?;
            let file = File::create(&out).with_context(|| format!("cannot write {}", out.display()))?;
            let mut w = BufWriter::new(file);
            for pc in &pcs {
                writeln!(w, "{pc:#x}")?;
            }
            w.flush()?;
            emit(report.as_deref(), &decoded.to_string())?;
        }
        Command::Roundtrip {
            workload,
            log,
            map,
            config,
            fifo_capacity,
            drain_per_cycle,
            stream_out,
            report,
        } => {
            let (map, blocks) = match (log, map) {
                (Some(log), Some(map)) => (load_map(&map)?, load_log(&log)?),
                _ => {
                    let w = generate_workload(&workload.params())?;
                    (w.map, w.blocks)
                }
            };
            let options = PipelineOptions {
                config: config.load(max_lane(&blocks))?,
                fifo: fifo_capacity.map(|capacity| FifoOptions {
                    capacity,
                    drain_per_cycle,
                }),
            };
            let out = run_pipeline(&map, &blocks, &options)?;
            if let Some(path) = stream_out {
                write_file(&path, &out.stream)?;
            }
            let mut text = out.report.to_string();
            text.push_str(&format!("dropped_frames={}\n", out.dropped));
            text.push_str(&format!("verified_segments={}\n", out.segments.len()));
            text.push_str(&format!("verified_pcs={}\n", out.pcs.len()));
            emit(report.as_deref(), &text)?;
        }
        Command::Collect {
            listen,
            out,
            timeout,
        } => {
            let file = File::create(&out).with_context(|| format!("cannot write {}", out.display()))?;
            let summary = serve_collector(&listen, BufWriter::new(file), Duration::from_secs(timeout))?;
            println!("frames={}", summary.frames);
            println!("bytes={}", summary.bytes);
        }
        Command::Send { to, input } => {
            let bytes = fs::read(&input).with_context(|| format!("cannot read {}", input.display()))?;
            let frames = read_stream(&bytes[..])?
                .into_iter()
                .map(Frame::new)
                .collect::<Result<Vec<_>, _>>()?;
            if frames.is_empty() {
                bail!("{} holds no frames", input.display());
            }
            let n = send_frames(&to, &frames)?;
            println!("frames={n}");
            println!("bytes={}", bytes.len());
        }
    }
    Ok(())
}
