//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

use std::process::ExitCode;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use etrace::encoder::{EncoderConfig, ResyncMode};
use etrace::harness::pipeline::expected_pcs;
use etrace::harness::{
    generate_workload, loop_workload, run_pipeline, serialize_lanes, FifoOptions, PipelineOptions, WorkloadParams,
};
use etrace::instruction::IType;
use etrace::packet::{
    compress_signed, decode_packet, decompress_signed, encode_packet, BranchBits, QualStatus, TracePacket,
};
use etrace::transport::{send_frames, write_stream, Collector, Frame};

const ROUND_TRIP_SEEDS: u64 = 1000;
const ROUND_TRIP_MIN_INSNS: f64 = 1e3;
const ROUND_TRIP_MAX_INSNS: f64 = 1e5;
const ROUND_TRIP_MAX_DENSITY: f64 = 0.3;
const ROUND_TRIP_BUDGET: Duration = Duration::from_secs(120);
const CODEC_PACKETS: usize = 20_000;
const DHRYSTONE_FLOOR: f64 = 90.0;
const DHRYSTONE_BUDGET: Duration = Duration::from_secs(5);
const LOOP_FLOOR: f64 = 99.0 - 0.5;
const BRANCH_MAP_LIMIT: u8 = 31;
const RESYNC_THRESHOLDS: [u64; 3] = [10, 100, 1000];
const LANE_SEEDS: u64 = 100;
const LOSS_INSNS: usize = 10_000;
const TRANSPORT_FIXTURES: u64 = 10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn dhrystone_like(seed: u64) -> WorkloadParams {
    WorkloadParams {
        seed,
        instruction_count: 100_000,
        branch_density: 0.1,
        loop_bias: 0.9,
        ..WorkloadParams::default()
    }
}

fn suite_params(seed: u64) -> WorkloadParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
    let count = ROUND_TRIP_MIN_INSNS * (ROUND_TRIP_MAX_INSNS / ROUND_TRIP_MIN_INSNS).powf(rng.gen::<f64>());
    WorkloadParams {
        seed,
        instruction_count: count.round() as usize,
        branch_density: rng.gen_range(0.0..=ROUND_TRIP_MAX_DENSITY),
        jump_density: rng.gen_range(0.0..=ROUND_TRIP_MAX_DENSITY),
        uninferable_fraction: rng.gen(),
        trap_rate: rng.gen_range(0.0..=20.0),
        lanes: rng.gen_range(1..=4),
        loop_bias: rng.gen(),
    }
}

struct SeedResult {
    seed: u64,
    error: Option<String>,
    max_bits: u8,
    bits: u64,
    branch_blocks: u64,
}

fn run_seed(seed: u64) -> SeedResult {
    let params = suite_params(seed);
    let mut result = SeedResult {
        seed,
        error: None,
        max_bits: 0,
        bits: 0,
        branch_blocks: 0,
    };
    let w = match generate_workload(&params) {
        Ok(w) => w,
        Err(e) => {
            result.error = Some(e.to_string());
            return result;
        }
    };
    let options = PipelineOptions {
        config: EncoderConfig {
            lanes: params.lanes,
            ..EncoderConfig::default()
        },
        fifo: None,
    };
    match run_pipeline(&w.map, &w.blocks, &options) {
        Ok(out) => {
            // independent check on top of the pipeline's own verification
            let (want, _) = expected_pcs(&w.map, &w.blocks, &options.config).unwrap();
            if out.pcs != want {
                result.error = Some("PC sequence differs".into());
            }
            result.max_bits = out.packets.iter().map(|p| p.branch_count()).max().unwrap_or(0);
            result.bits = out.packets.iter().map(|p| u64::from(p.branch_count())).sum();
        }
        Err(e) => result.error = Some(e.to_string()),
    }
    result.branch_blocks = w
        .blocks
        .iter()
        .filter(|b| matches!(b.itype, IType::BranchTaken | IType::BranchNotTaken))
        .count() as u64;
    result
}

fn round_trip_and_branch_map() -> (Outcome, Outcome) {
    let start = Instant::now();
    let results: Vec<SeedResult> = (0..ROUND_TRIP_SEEDS).into_par_iter().map(run_seed).collect();
    let elapsed = start.elapsed();
    let failures: Vec<&SeedResult> = results.iter().filter(|r| r.error.is_some()).collect();
    let lossless = match failures.first() {
        None => outcome(
            elapsed <= ROUND_TRIP_BUDGET,
            format!("{ROUND_TRIP_SEEDS} seeds exact in {:.1}s", elapsed.as_secs_f64()),
        ),
        Some(r) => outcome(
            false,
            format!("{} seeds failed, first seed {}: {}", failures.len(), r.seed, r.error.as_ref().unwrap()),
        ),
    };
    let max_bits = results.iter().map(|r| r.max_bits).max().unwrap_or(0);
    let mismatched: Vec<u64> = results
        .iter()
        .filter(|r| r.error.is_none() && r.bits != r.branch_blocks)
        .map(|r| r.seed)
        .collect();
    let total: u64 = results.iter().map(|r| r.bits).sum();
    let bound = outcome(
        max_bits <= BRANCH_MAP_LIMIT && mismatched.is_empty() && failures.is_empty(),
        format!(
            "max {max_bits} bits per packet, {total} bits delivered, {} seeds with bit/branch mismatch",
            mismatched.len()
        ),
    );
    (lossless, bound)
}

fn random_packet(rng: &mut ChaCha8Rng) -> TracePacket {
    const EDGES: [i64; 7] = [0, 1, -1, i64::MAX, -i64::MAX, i64::MIN, i64::MAX - 1];
    let delta = |rng: &mut ChaCha8Rng| match rng.gen_range(0..4) {
        0 => EDGES[rng.gen_range(0..EDGES.len())],
        1 => rng.gen(),
        _ => rng.gen::<i64>() >> rng.gen_range(0..64),
    };
    match rng.gen_range(0..6) {
        0 => TracePacket::SyncStart {
            privilege: rng.gen_range(0..4),
            address: delta(rng) as u64,
        },
        1 => TracePacket::Trap {
            interrupt: rng.gen(),
            privilege: rng.gen_range(0..4),
            cause: rng.gen(),
            tval: rng.gen(),
            handler: delta(rng) as u64,
        },
        2 => TracePacket::Support {
            enabled: rng.gen(),
            qual_status: [QualStatus::NoChange, QualStatus::EndedReported, QualStatus::TraceLost][rng.gen_range(0..3)],
        },
        3 => TracePacket::AddrOnly { delta: delta(rng) },
        4 => TracePacket::BranchMap {
            branches: BranchBits::new(rng.gen_range(1..31), rng.gen()).unwrap(),
            delta: Some(delta(rng)),
        },
        _ => TracePacket::BranchMap {
            branches: BranchBits::new(31, rng.gen()).unwrap(),
            delta: None,
        },
    }
}

/// Minimal width by counting redundant sign bits.
fn oracle_width(value: i64, offset: usize) -> usize {
    let significant = if value < 0 { 64 - (!value).leading_zeros() } else { 64 - value.leading_zeros() };
    let needed = significant as usize + 1;
    (1..).find(|n| n >= &needed.min(64) && (offset + n) % 8 == 0).unwrap()
}

fn codec_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xc0dec);
    let mut failures = 0;
    for _ in 0..CODEC_PACKETS {
        let p = random_packet(&mut rng);
        match encode_packet(&p).and_then(|bytes| decode_packet(&bytes)) {
            Ok(back) if back == p => {}
            _ => failures += 1,
        }
    }
    let mut compress_failures = 0;
    let mut checked = 0;
    for offset in 0..8 {
        for i in 0..2000 {
            let v: i64 = match i {
                0 => 0,
                1 => i64::MAX,
                2 => i64::MIN,
                3 => -i64::MAX,
                _ => rng.gen::<i64>() >> rng.gen_range(0..64),
            };
            let f = compress_signed(v, offset);
            checked += 1;
            if f.width != oracle_width(v, offset) || decompress_signed(f.raw, f.width) != v {
                compress_failures += 1;
            }
        }
    }
    outcome(
        failures == 0 && compress_failures == 0,
        format!(
            "{CODEC_PACKETS} packets, {failures} mismatches; {checked} sign-compressed values over 8 offsets, {compress_failures} mismatches"
        ),
    )
}

fn dhrystone_compression() -> Outcome {
    let start = Instant::now();
    let w = generate_workload(&dhrystone_like(1)).unwrap();
    let options = PipelineOptions {
        config: EncoderConfig {
            resync_mode: ResyncMode::PacketCount,
            resync_threshold: 1000,
            ..EncoderConfig::default()
        },
        fifo: None,
    };
    match run_pipeline(&w.map, &w.blocks, &options) {
        Ok(out) => {
            let elapsed = start.elapsed();
            let rate = out.report.compression_rate_percent;
            outcome(
                rate >= DHRYSTONE_FLOOR && elapsed <= DHRYSTONE_BUDGET,
                format!(
                    "{rate:.2}% ({} bytes for {} instructions) in {:.2}s",
                    out.report.payload_bytes,
                    out.report.retired_instructions,
                    elapsed.as_secs_f64()
                ),
            )
        }
        Err(e) => outcome(false, e.to_string()),
    }
}

fn loop_compression() -> Outcome {
    let w = loop_workload(10, 31 * 1000);
    match run_pipeline(&w.map, &w.blocks, &PipelineOptions::default()) {
        Ok(out) => {
            let rate = out.report.compression_rate_percent;
            outcome(rate >= LOOP_FLOOR, format!("{rate:.3}% over {} instructions", out.report.retired_instructions))
        }
        Err(e) => outcome(false, e.to_string()),
    }
}

fn resync_bound() -> Outcome {
    // dense enough that even R=1000 forces several resyncs
    let w = generate_workload(&WorkloadParams {
        seed: 2,
        instruction_count: 100_000,
        branch_density: 0.2,
        jump_density: 0.2,
        uninferable_fraction: 0.5,
        ..WorkloadParams::default()
    })
    .unwrap();
    let mut details = Vec::new();
    let mut pass = true;
    for r in RESYNC_THRESHOLDS {
        let options = PipelineOptions {
            config: EncoderConfig {
                resync_mode: ResyncMode::PacketCount,
                resync_threshold: r,
                ..EncoderConfig::default()
            },
            fifo: None,
        };
        match run_pipeline(&w.map, &w.blocks, &options) {
            Ok(out) => {
                let mut worst = 0;
                let mut run = 0u64;
                let mut syncs = 0;
                for p in &out.packets {
                    if matches!(p, TracePacket::SyncStart { .. }) {
                        syncs += 1;
                        run = 0;
                    } else {
                        run += 1;
                        worst = worst.max(run);
                    }
                }
                pass &= worst <= r && syncs > 1;
                details.push(format!("R={r}: max {worst} between {syncs} syncs"));
            }
            Err(e) => {
                pass = false;
                details.push(format!("R={r}: {e}"));
            }
        }
    }
    outcome(pass, details.join(", "))
}

fn multi_lane() -> Outcome {
    let failures: Vec<u64> = (0..LANE_SEEDS)
        .into_par_iter()
        .filter(|&seed| {
            let params = WorkloadParams {
                seed,
                lanes: 2,
                instruction_count: 10_000,
                ..WorkloadParams::default()
            };
            let w = generate_workload(&params).unwrap();
            let two = PipelineOptions {
                config: EncoderConfig {
                    lanes: 2,
                    ..EncoderConfig::default()
                },
                fifo: None,
            };
            let flat = serialize_lanes(&w.blocks);
            let a = run_pipeline(&w.map, &w.blocks, &two);
            let b = run_pipeline(&w.map, &flat, &PipelineOptions::default());
            !matches!((a, b), (Ok(a), Ok(b)) if a.pcs == b.pcs)
        })
        .collect();
    outcome(
        failures.is_empty(),
        format!("{LANE_SEEDS} seeds, {} differ (first: {:?})", failures.len(), failures.first()),
    )
}

fn loss_recovery() -> Outcome {
    let params = WorkloadParams {
        seed: 5,
        instruction_count: LOSS_INSNS,
        ..WorkloadParams::default()
    };
    let w = generate_workload(&params).unwrap();
    let options = PipelineOptions {
        config: EncoderConfig::default(),
        fifo: Some(FifoOptions::with_capacity(1)),
    };
    let out = match run_pipeline(&w.map, &w.blocks, &options) {
        Ok(out) => out,
        Err(e) => return outcome(false, e.to_string()),
    };
    let lost = TracePacket::Support {
        enabled: true,
        qual_status: QualStatus::TraceLost,
    };
    let markers: Vec<usize> = out.packets.iter().enumerate().filter(|(_, p)| **p == lost).map(|(i, _)| i).collect();
    let followed = markers
        .iter()
        .all(|&i| matches!(out.packets.get(i + 1), Some(TracePacket::SyncStart { .. })));
    // every segment, re-checked against the block walk
    let (want, starts) = expected_pcs(&w.map, &w.blocks, &options.config).unwrap();
    let segments_ok = out.segments.iter().all(|s| {
        let got = &out.pcs[s.first_pc..s.first_pc + s.pcs];
        want.get(starts[s.block]..starts[s.block] + s.pcs) == Some(got)
    });
    let verified: usize = out.segments.iter().map(|s| s.pcs).sum();
    outcome(
        out.loss_runs > 0 && markers.len() as u64 == out.loss_runs && followed && segments_ok,
        format!(
            "{} loss runs, {} frames dropped, {} TraceLost markers each followed by a sync, {verified} PCs verified in {} segments",
            out.loss_runs,
            out.dropped,
            markers.len(),
            out.segments.len()
        ),
    )
}

fn transport_transparency() -> Outcome {
    let dir = std::env::temp_dir().join(format!("etrace-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let mut identical = 0;
    let mut notes = Vec::new();
    for seed in 0..TRANSPORT_FIXTURES {
        let w = generate_workload(&WorkloadParams {
            seed,
            instruction_count: 5_000,
            ..WorkloadParams::default()
        })
        .unwrap();
        let out = run_pipeline(&w.map, &w.blocks, &PipelineOptions::default()).unwrap();
        let path = dir.join(format!("fixture{seed}.etp"));
        write_stream(&out.packets, std::fs::File::create(&path).unwrap()).unwrap();
        let file_bytes = std::fs::read(&path).unwrap();

        let frames: Vec<Frame> = out.packets.iter().map(|p| Frame::from_packet(p).unwrap()).collect();
        let collector = Collector::bind("127.0.0.1:0").unwrap();
        let addr = collector.local_addr().unwrap();
        let sender = thread::spawn(move || send_frames(addr, &frames));
        let mut collected = Vec::new();
        let served = collector.serve(&mut collected, Duration::from_secs(10));
        let sent = sender.join().unwrap();
        match (served, sent) {
            (Ok(_), Ok(_)) if collected == file_bytes => identical += 1,
            (Ok(_), Ok(_)) => notes.push(format!("fixture {seed} differs")),
            (a, b) => notes.push(format!("fixture {seed}: {:?} / {:?}", a.err(), b.err())),
        }
    }
    let _ = std::fs::remove_dir_all(&dir);
    outcome(
        identical == TRANSPORT_FIXTURES,
        format!("{identical}/{TRANSPORT_FIXTURES} fixtures byte-identical {}", notes.join("; ")),
    )
}

fn main() -> ExitCode {
    let (lossless, bound) = round_trip_and_branch_map();
    let results = [
        ("lossless round trip", lossless),
        ("codec identity", codec_identity()),
        ("dhrystone-like compression >= 90%", dhrystone_compression()),
        ("loop best case >= 99% (-0.5)", loop_compression()),
        ("branch-map bound", bound),
        ("resync bound", resync_bound()),
        ("multi-lane equivalence", multi_lane()),
        ("loss recovery", loss_recovery()),
        ("transport transparency", transport_transparency()),
    ];
    let mut all = true;
    for (name, o) in &results {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail.trim_end());
        all &= o.pass;
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
