//! Synthetic programs and the retirement streams they produce.
//!
//! The generator lays out a random static program, then executes it with a
//! seeded RNG deciding branch outcomes, indirect targets and traps. The
//! result is consistent by construction: every block walks cleanly over the
//! map it ships with.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::instruction::{IType, Instruction, InstructionKind, InstructionMap, RetirementBlock};

const CODE_BASE: u64 = 0x8000_0000;
const MAX_SLOTS: usize = 2048;
const BRANCH_REACH: usize = 16;
const JUMP_REACH: usize = 64;
const HANDLER_LEN: usize = 4;
const CALL_DEPTH: usize = 64;
const MAX_SEQ_RUN: usize = 8;
const CALIBRATION_ROUNDS: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct WorkloadParams {
    pub seed: u64,
    pub instruction_count: usize,
    pub branch_density: f64,
    pub jump_density: f64,
    pub uninferable_fraction: f64,
    /// Traps per 10^4 instructions.
    pub trap_rate: f64,
    pub lanes: u32,
    pub loop_bias: f64,
}

impl Default for WorkloadParams {
    fn default() -> Self {
        Self {
            seed: 0,
            instruction_count: 10_000,
            branch_density: 0.1,
            jump_density: 0.05,
            uninferable_fraction: 0.3,
            trap_rate: 2.0,
            lanes: 1,
            loop_bias: 0.5,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum WorkloadError {
    #[error("infeasible workload parameters: {0}")]
    InfeasibleParams(String),
}

impl WorkloadParams {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |what: String| Err(WorkloadError::InfeasibleParams(what));
        let fractions = [
            ("branch_density", self.branch_density),
            ("jump_density", self.jump_density),
            ("uninferable_fraction", self.uninferable_fraction),
            ("loop_bias", self.loop_bias),
        ];
        for (name, v) in fractions {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name}={v} is outside [0, 1]"));
            }
        }
        if self.branch_density + self.jump_density > 1.0 {
            return bad("branch_density + jump_density exceeds 1".into());
        }
        if !(0.0..=10_000.0).contains(&self.trap_rate) {
            return bad(format!("trap_rate={} is outside [0, 10000]", self.trap_rate));
        }
        if self.lanes == 0 {
            return bad("lanes must be at least 1".into());
        }
        if self.instruction_count == 0 {
            return bad("instruction_count must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Workload {
    pub map: InstructionMap,
    pub blocks: Vec<RetirementBlock>,
}

impl Workload {
    pub fn retired(&self) -> u64 {
        self.blocks.iter().map(|b| u64::from(block_len(&self.map, b))).sum()
    }
}

fn block_len(map: &InstructionMap, b: &RetirementBlock) -> u32 {
    let mut addr = b.iaddr;
    let mut n = 0;
    while addr < b.end_addr() {
        n += 1;
        addr += map.get(addr).map_or(2, |i| u64::from(i.size));
    }
    n
}

struct Layout {
    slots: Vec<u64>,
    handler: u64,
    map: InstructionMap,
}

fn layout(params: &WorkloadParams, rng: &mut ChaCha8Rng) -> Layout {
    let n = params.instruction_count.clamp(2, MAX_SLOTS);
    let sizes: Vec<u8> = (0..n).map(|_| if rng.gen_bool(0.3) { 2 } else { 4 }).collect();
    let mut slots = Vec::with_capacity(n);
    let mut addr = CODE_BASE;
    for &size in &sizes {
        slots.push(addr);
        addr += u64::from(size);
    }
    let mut entries = Vec::with_capacity(n + HANDLER_LEN + 1);
    for i in 0..n {
        let kind = if i + 1 == n {
            InstructionKind::UninferableJump
        } else {
            pick_kind(params, rng, &slots, i)
        };
        entries.push((slots[i], Instruction { size: sizes[i], kind }));
    }
    let handler = (addr + 3) & !3;
    for k in 0..=HANDLER_LEN {
        let kind = if k == HANDLER_LEN {
            InstructionKind::TrapReturn
        } else {
            InstructionKind::Sequential
        };
        entries.push((handler + 4 * k as u64, Instruction { size: 4, kind }));
    }
    let map = InstructionMap::new(entries, Some(CODE_BASE)).expect("generated map is valid");
    Layout {
        slots,
        handler,
        map,
    }
}

fn pick_kind(params: &WorkloadParams, rng: &mut ChaCha8Rng, slots: &[u64], i: usize) -> InstructionKind {
    let n = slots.len();
    let u: f64 = rng.gen();
    // Inferable transfers only go forward so that every cycle in the
    // control-flow graph passes a branch or an uninferable transfer.
    let forward = |rng: &mut ChaCha8Rng, reach: usize| slots[rng.gen_range(i + 1..=(i + reach).min(n - 1))];
    if u < params.branch_density {
        let target = if rng.gen_bool(params.loop_bias) {
            slots[rng.gen_range(i.saturating_sub(BRANCH_REACH)..=i)]
        } else {
            forward(rng, BRANCH_REACH)
        };
        InstructionKind::Branch(target)
    } else if u < params.branch_density + params.jump_density {
        if rng.gen_bool(params.uninferable_fraction) {
            match rng.gen_range(0..10) {
                0..=4 => InstructionKind::UninferableJump,
                5..=7 => InstructionKind::Return,
                _ => InstructionKind::UninferableCall,
            }
        } else if rng.gen_bool(0.6) {
            InstructionKind::InferableJump(forward(rng, JUMP_REACH))
        } else {
            InstructionKind::Call(forward(rng, JUMP_REACH))
        }
    } else {
        InstructionKind::Sequential
    }
}

/// A block under construction.
struct OpenBlock {
    iaddr: u64,
    halfwords: u32,
    last_size: u8,
    len: usize,
    max_len: usize,
}

impl OpenBlock {
    fn at(iaddr: u64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            iaddr,
            halfwords: 0,
            last_size: 2,
            len: 0,
            max_len: rng.gen_range(1..=MAX_SEQ_RUN),
        }
    }

    fn close(&self, itype: IType, cause: u16, tval: u64) -> RetirementBlock {
        RetirementBlock {
            cycle: 0,
            lane: 0,
            iaddr: self.iaddr,
            iretire: self.halfwords,
            ilastsize: self.last_size,
            itype,
            privilege: 3,
            cause,
            tval,
        }
    }
}

/// Generates a program and runs it for exactly `instruction_count`
/// instructions.
///
/// Loops re-execute their own branches, so the static branch density is
/// tuned until the executed fraction of branches matches `branch_density`.
pub fn generate_workload(params: &WorkloadParams) -> Result<Workload, WorkloadError> {
    params.validate()?;
    let target = params.branch_density;
    let ceiling = 1.0 - params.jump_density;
    let measure = |w: &Workload| {
        let branches = w.blocks.iter().filter(|b| b.itype.branch_taken().is_some()).count();
        branches as f64 / params.instruction_count as f64
    };
    let mut best = execute(params);
    if target == 0.0 {
        return Ok(best);
    }
    let mut best_static = target;
    let mut best_err = (measure(&best) - target).abs();
    for _ in 0..CALIBRATION_ROUNDS {
        if best_err <= target * 0.01 {
            break;
        }
        let measured = measure(&best).max(target / 4.0);
        let trial = WorkloadParams {
            branch_density: (best_static * target / measured).min(ceiling),
            ..params.clone()
        };
        let candidate = execute(&trial);
        let err = (measure(&candidate) - target).abs();
        if err >= best_err {
            break;
        }
        best = candidate;
        best_static = trial.branch_density;
        best_err = err;
    }
    Ok(best)
}

fn execute(params: &WorkloadParams) -> Workload {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let Layout { slots, handler, map } = layout(params, &mut rng);
    let trap_p = params.trap_rate / 10_000.0;

    let mut blocks = Vec::new();
    let mut calls: Vec<u64> = Vec::new();
    let mut resume: Option<u64> = None;
    let mut pc = CODE_BASE;
    let mut open = OpenBlock::at(pc, &mut rng);
    let mut retired = 0;
    while retired < params.instruction_count {
        let insn = *map.get(pc).expect("execution stays inside the map");
        if resume.is_none() && insn.kind == InstructionKind::Sequential && trap_p > 0.0 && rng.gen_bool(trap_p) {
            let (itype, cause, tval, back) = if rng.gen_bool(0.5) {
                (IType::Interrupt, 7, 0, pc)
            } else {
                (IType::Exception, 2, pc, pc + u64::from(insn.size))
            };
            blocks.push(open.close(itype, cause, tval));
            resume = Some(back);
            pc = handler;
            open = OpenBlock::at(pc, &mut rng);
            continue;
        }
        open.halfwords += u32::from(insn.size / 2);
        open.last_size = insn.size / 2;
        open.len += 1;
        retired += 1;
        let fallthrough = pc + u64::from(insn.size);
        let random_slot = |rng: &mut ChaCha8Rng| *slots.choose(rng).expect("at least two slots");
        let (next, itype) = match insn.kind {
            InstructionKind::Sequential => (fallthrough, IType::None),
            InstructionKind::Branch(target) => {
                let p = if target <= pc { 0.9 } else { 0.5 };
                if rng.gen_bool(p) {
                    (target, IType::BranchTaken)
                } else {
                    (fallthrough, IType::BranchNotTaken)
                }
            }
            InstructionKind::InferableJump(target) => (target, IType::InferableJump),
            InstructionKind::Call(target) => {
                push_call(&mut calls, fallthrough);
                (target, IType::InferableJump)
            }
            InstructionKind::UninferableJump => (random_slot(&mut rng), IType::UninferableJump),
            InstructionKind::UninferableCall => {
                push_call(&mut calls, fallthrough);
                (random_slot(&mut rng), IType::UninferableJump)
            }
            InstructionKind::Return => {
                let target = calls.pop().unwrap_or_else(|| random_slot(&mut rng));
                (target, IType::UninferableJump)
            }
            InstructionKind::TrapReturn => {
                let back = resume.take().expect("mret only runs inside the handler");
                (back, IType::TrapReturn)
            }
        };
        let ends = itype != IType::None || open.len >= open.max_len;
        if ends || retired == params.instruction_count {
            blocks.push(open.close(itype, 0, 0));
            open = OpenBlock::at(next, &mut rng);
        }
        pc = next;
    }
    pack_lanes(&mut blocks, params.lanes, &mut rng);
    Workload { map, blocks }
}

fn push_call(calls: &mut Vec<u64>, ret: u64) {
    if calls.len() == CALL_DEPTH {
        calls.remove(0);
    }
    calls.push(ret);
}

/// Assigns cycles and lanes: each cycle takes 1..=lanes consecutive blocks,
/// and cycles advance by one or two.
fn pack_lanes(blocks: &mut [RetirementBlock], lanes: u32, rng: &mut ChaCha8Rng) {
    let mut cycle = 0;
    let mut i = 0;
    while i < blocks.len() {
        let take = rng.gen_range(1..=lanes as usize).min(blocks.len() - i);
        for (lane, b) in blocks[i..i + take].iter_mut().enumerate() {
            b.cycle = cycle;
            b.lane = lane as u32;
        }
        i += take;
        cycle += rng.gen_range(1..=2);
    }
}

/// The same blocks, one per cycle on lane 0.
pub fn serialize_lanes(blocks: &[RetirementBlock]) -> Vec<RetirementBlock> {
    blocks
        .iter()
        .enumerate()
        .map(|(i, b)| RetirementBlock {
            cycle: i as u64,
            lane: 0,
            ..*b
        })
        .collect()
}

/// A single loop of `body` instructions (the last a backward branch) run
/// `iterations` times, one iteration per block.
pub fn loop_workload(body: usize, iterations: usize) -> Workload {
    assert!(body >= 1 && iterations >= 1);
    let entries = (0..body).map(|k| {
        let kind = if k + 1 == body {
            InstructionKind::Branch(CODE_BASE)
        } else {
            InstructionKind::Sequential
        };
        (CODE_BASE + 4 * k as u64, Instruction { size: 4, kind })
    });
    let exit = CODE_BASE + 4 * body as u64;
    let entries = entries.chain([(exit, Instruction {
        size: 4,
        kind: InstructionKind::UninferableJump,
    })]);
    let map = InstructionMap::new(entries, Some(CODE_BASE)).expect("loop map is valid");
    let blocks = (0..iterations)
        .map(|i| RetirementBlock {
            cycle: i as u64,
            lane: 0,
            iaddr: CODE_BASE,
            iretire: 2 * body as u32,
            ilastsize: 2,
            itype: if i + 1 == iterations {
                IType::BranchNotTaken
            } else {
                IType::BranchTaken
            },
            privilege: 3,
            cause: 0,
            tval: 0,
        })
        .collect();
    Workload { map, blocks }
}
