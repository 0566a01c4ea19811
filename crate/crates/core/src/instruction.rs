//! Retirement records, static instruction map, and their text formats.
//!
//! The retirement log is one block per line:
//! `cycle,lane,iaddr,iretire,ilastsize,itype,priv,cause,tval` with `iaddr` and
//! `tval` written as `0x`-prefixed hex. The instruction map is
//! `addr,size,kind[,target]` lines plus an optional `entry,<addr>` line.
//! `#` starts a comment in both formats.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::ops::Bound;

use thiserror::Error;

/// Type of the last instruction in a retirement block.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum IType {
    None = 0,
    Exception = 1,
    Interrupt = 2,
    TrapReturn = 3,
    BranchNotTaken = 4,
    BranchTaken = 5,
    UninferableJump = 6,
    InferableJump = 7,
}

impl IType {
    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Self::None,
            1 => Self::Exception,
            2 => Self::Interrupt,
            3 => Self::TrapReturn,
            4 => Self::BranchNotTaken,
            5 => Self::BranchTaken,
            6 => Self::UninferableJump,
            7 => Self::InferableJump,
            _ => return None,
        })
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn is_trap(self) -> bool {
        matches!(self, Self::Exception | Self::Interrupt)
    }

    /// Branch outcome, if this is a branch.
    pub fn branch_taken(self) -> Option<bool> {
        match self {
            Self::BranchTaken => Some(true),
            Self::BranchNotTaken => Some(false),
            _ => None,
        }
    }

    /// The block ends on a transfer whose target only the trace can supply.
    pub fn is_uninferable(self) -> bool {
        matches!(self, Self::UninferableJump | Self::TrapReturn)
    }
}

/// One retired block on one lane in one cycle.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct RetirementBlock {
    pub cycle: u64,
    pub lane: u32,
    pub iaddr: u64,
    /// Retired halfwords.
    pub iretire: u32,
    /// Size of the last instruction in halfwords.
    pub ilastsize: u8,
    pub itype: IType,
    pub privilege: u8,
    pub cause: u16,
    pub tval: u64,
}

impl RetirementBlock {
    pub fn validate(&self) -> Result<(), String> {
        if self.iaddr & 1 != 0 {
            return Err(format!("iaddr {:#x} is not halfword aligned", self.iaddr));
        }
        if !(1..=2).contains(&self.ilastsize) {
            return Err(format!("ilastsize {} not in 1..=2", self.ilastsize));
        }
        if self.iretire == 0 && !self.itype.is_trap() {
            return Err("iretire is 0 on a non-trap block".into());
        }
        if self.iretire != 0 && u32::from(self.ilastsize) > self.iretire {
            return Err(format!(
                "ilastsize {} exceeds iretire {}",
                self.ilastsize, self.iretire
            ));
        }
        if self.privilege > 3 {
            return Err(format!("priv {} not in 0..=3", self.privilege));
        }
        if !self.itype.is_trap() && (self.cause != 0 || self.tval != 0) {
            return Err("cause/tval set on a non-trap block".into());
        }
        Ok(())
    }

    /// Address one past the last retired byte.
    pub fn end_addr(&self) -> u64 {
        self.iaddr.wrapping_add(2 * u64::from(self.iretire))
    }

    /// Address of the last retired instruction, if any retired.
    pub fn last_addr(&self) -> Option<u64> {
        (self.iretire > 0)
            .then(|| self.end_addr().wrapping_sub(2 * u64::from(self.ilastsize)))
    }
}

impl fmt::Display for RetirementBlock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{:#x},{},{},{},{},{},{:#x}",
            self.cycle,
            self.lane,
            self.iaddr,
            self.iretire,
            self.ilastsize,
            self.itype.code(),
            self.privilege,
            self.cause,
            self.tval
        )
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LogError {
    #[error("line {0}: malformed retirement record")]
    MalformedLine(usize),
    #[error("line {0}: {1}")]
    InvariantViolation(usize, String),
    #[error("line {0}: cycle goes backwards or repeats a lane")]
    NonMonotonicCycle(usize),
}

fn parse_hex(field: &str) -> Option<u64> {
    let digits = field.strip_prefix("0x").or_else(|| field.strip_prefix("0X"))?;
    u64::from_str_radix(digits, 16).ok()
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, line)| {
        let line = line.split('#').next().unwrap_or("").trim();
        (!line.is_empty()).then_some((i + 1, line))
    })
}

fn parse_block(line: &str) -> Option<(RetirementBlock, u8)> {
    let f: Vec<&str> = line.split(',').map(str::trim).collect();
    if f.len() != 9 {
        return None;
    }
    let itype_code: u8 = f[5].parse().ok()?;
    let block = RetirementBlock {
        cycle: f[0].parse().ok()?,
        lane: f[1].parse().ok()?,
        iaddr: parse_hex(f[2])?,
        iretire: f[3].parse().ok()?,
        ilastsize: f[4].parse().ok()?,
        itype: IType::None,
        privilege: f[6].parse().ok()?,
        cause: f[7].parse().ok()?,
        tval: parse_hex(f[8])?,
    };
    Some((block, itype_code))
}

/// Parses a retirement log. Blocks sharing a cycle must appear in ascending
/// lane order.
pub fn parse_retirement_log(text: &str) -> Result<Vec<RetirementBlock>, LogError> {
    let mut blocks: Vec<RetirementBlock> = Vec::new();
    for (lineno, line) in content_lines(text) {
        let (mut block, code) = parse_block(line).ok_or(LogError::MalformedLine(lineno))?;
        block.itype = IType::from_code(code).ok_or_else(|| {
            LogError::InvariantViolation(lineno, format!("itype {code} not in 0..=7"))
        })?;
        block
            .validate()
            .map_err(|reason| LogError::InvariantViolation(lineno, reason))?;
        if let Some(prev) = blocks.last() {
            let ordered = block.cycle > prev.cycle
                || (block.cycle == prev.cycle && block.lane > prev.lane);
            if !ordered {
                return Err(LogError::NonMonotonicCycle(lineno));
            }
        }
        blocks.push(block);
    }
    Ok(blocks)
}

/// Canonical text form; `parse_retirement_log` reads it back unchanged.
pub fn format_retirement_log(blocks: &[RetirementBlock]) -> String {
    let mut out = String::new();
    for b in blocks {
        let _ = writeln!(out, "{b}");
    }
    out
}

/// Static control-flow class of one instruction.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum InstructionKind {
    Sequential,
    Branch(u64),
    InferableJump(u64),
    UninferableJump,
    Call(u64),
    UninferableCall,
    Return,
    TrapReturn,
}

impl InstructionKind {
    pub fn mnemonic(self) -> &'static str {
        match self {
            Self::Sequential => "seq",
            Self::Branch(_) => "br",
            Self::InferableJump(_) => "jal",
            Self::UninferableJump => "jalr",
            Self::Call(_) => "call",
            Self::UninferableCall => "callr",
            Self::Return => "ret",
            Self::TrapReturn => "mret",
        }
    }

    pub fn target(self) -> Option<u64> {
        match self {
            Self::Branch(t) | Self::InferableJump(t) | Self::Call(t) => Some(t),
            _ => None,
        }
    }

    /// Target comes from the packet stream, not the program image.
    pub fn is_uninferable(self) -> bool {
        matches!(
            self,
            Self::UninferableJump | Self::UninferableCall | Self::Return | Self::TrapReturn
        )
    }

    /// Block type for a block ending on this instruction. `taken` is only
    /// consulted for branches.
    pub fn itype(self, taken: bool) -> IType {
        match self {
            Self::Sequential => IType::None,
            Self::Branch(_) if taken => IType::BranchTaken,
            Self::Branch(_) => IType::BranchNotTaken,
            Self::InferableJump(_) | Self::Call(_) => IType::InferableJump,
            Self::UninferableJump | Self::UninferableCall | Self::Return => {
                IType::UninferableJump
            }
            Self::TrapReturn => IType::TrapReturn,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Instruction {
    pub size: u8,
    pub kind: InstructionKind,
}

impl Instruction {
    pub fn halfwords(&self) -> u32 {
        u32::from(self.size / 2)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MapError {
    #[error("line {0}: malformed instruction map entry")]
    MalformedLine(usize),
    #[error("line {0}: unknown instruction kind")]
    UnknownKind(usize),
    #[error("instruction at {0:#x} overlaps its predecessor")]
    OverlappingEntries(u64),
    #[error("instruction at {0:#x} needs a target")]
    MissingTarget(u64),
    #[error("instruction at {0:#x} targets an address that is not an instruction")]
    DanglingTarget(u64),
    #[error("instruction at {0:#x} is misaligned or has an invalid size")]
    InvalidEntry(u64),
    #[error("entry point {0:#x} is not an instruction")]
    BadEntryPoint(u64),
}

/// Program image: address to instruction, plus the entry point.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InstructionMap {
    entries: BTreeMap<u64, Instruction>,
    entry_point: u64,
}

impl InstructionMap {
    /// Builds and validates a map.
    pub fn new(
        entries: impl IntoIterator<Item = (u64, Instruction)>,
        entry_point: Option<u64>,
    ) -> Result<Self, MapError> {
        let mut map = BTreeMap::new();
        for (addr, insn) in entries {
            if map.insert(addr, insn).is_some() {
                return Err(MapError::OverlappingEntries(addr));
            }
        }
        let entry_point = entry_point.or_else(|| map.keys().next().copied()).unwrap_or(0);
        let map = Self {
            entries: map,
            entry_point,
        };
        map.validate()?;
        Ok(map)
    }

    fn validate(&self) -> Result<(), MapError> {
        let mut prev_end: Option<u64> = None;
        for (&addr, insn) in &self.entries {
            if addr & 1 != 0 || !matches!(insn.size, 2 | 4) {
                return Err(MapError::InvalidEntry(addr));
            }
            if prev_end.is_some_and(|end| addr < end) {
                return Err(MapError::OverlappingEntries(addr));
            }
            prev_end = Some(addr + u64::from(insn.size));
        }
        if let (Some(lo), Some(hi)) = (self.entries.keys().next(), prev_end) {
            for (&addr, insn) in &self.entries {
                if let Some(t) = insn.kind.target() {
                    if t & 1 != 0 || ((*lo..hi).contains(&t) && !self.entries.contains_key(&t)) {
                        return Err(MapError::DanglingTarget(addr));
                    }
                }
            }
            if !self.entries.contains_key(&self.entry_point) {
                return Err(MapError::BadEntryPoint(self.entry_point));
            }
        }
        Ok(())
    }

    pub fn entry_point(&self) -> u64 {
        self.entry_point
    }

    pub fn get(&self, addr: u64) -> Option<&Instruction> {
        self.entries.get(&addr)
    }

    pub fn contains(&self, addr: u64) -> bool {
        self.entries.contains_key(&addr)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &Instruction)> {
        self.entries.iter().map(|(a, i)| (*a, i))
    }

    /// First instruction at or after `addr`.
    pub fn at_or_after(&self, addr: u64) -> Option<(u64, &Instruction)> {
        self.entries
            .range((Bound::Included(addr), Bound::Unbounded))
            .next()
            .map(|(a, i)| (*a, i))
    }
}

impl fmt::Display for InstructionMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "entry,{:#x}", self.entry_point)?;
        for (addr, insn) in &self.entries {
            write!(f, "{:#x},{},{}", addr, insn.size, insn.kind.mnemonic())?;
            if let Some(t) = insn.kind.target() {
                write!(f, ",{t:#x}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Parses the instruction-map text format.
pub fn parse_instruction_map(text: &str) -> Result<InstructionMap, MapError> {
    let mut entry_point = None;
    let mut entries = Vec::new();
    for (lineno, line) in content_lines(text) {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f[0] == "entry" {
            match (f.len(), f.get(1).and_then(|a| parse_hex(a))) {
                (2, Some(addr)) if entry_point.is_none() => entry_point = Some(addr),
                _ => return Err(MapError::MalformedLine(lineno)),
            }
            continue;
        }
        if !(3..=4).contains(&f.len()) {
            return Err(MapError::MalformedLine(lineno));
        }
        let addr = parse_hex(f[0]).ok_or(MapError::MalformedLine(lineno))?;
        let size: u8 = f[1].parse().map_err(|_| MapError::MalformedLine(lineno))?;
        let target = match f.get(3) {
            Some(t) => Some(parse_hex(t).ok_or(MapError::MalformedLine(lineno))?),
            None => None,
        };
        let with_target = |make: fn(u64) -> InstructionKind| {
            target.map(make).ok_or(MapError::MissingTarget(addr))
        };
        let kind = match f[2] {
            "seq" => InstructionKind::Sequential,
            "br" => with_target(InstructionKind::Branch)?,
            "jal" => with_target(InstructionKind::InferableJump)?,
            "call" => with_target(InstructionKind::Call)?,
            "jalr" => InstructionKind::UninferableJump,
            "callr" => InstructionKind::UninferableCall,
            "ret" => InstructionKind::Return,
            "mret" => InstructionKind::TrapReturn,
            _ => return Err(MapError::UnknownKind(lineno)),
        };
        if kind.target().is_none() && target.is_some() {
            return Err(MapError::MalformedLine(lineno));
        }
        entries.push((addr, Instruction { size, kind }));
    }
    InstructionMap::new(entries, entry_point)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WalkError {
    #[error("no instruction at {0:#x}")]
    UnknownAddress(u64),
    #[error("control-flow instruction at {0:#x} inside a block")]
    NonSequentialInterior(u64),
    #[error("block at {0:#x} ends in the middle of an instruction")]
    SizeMismatch(u64),
}

/// Block fields for `count` instructions starting at `start`.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct WalkedBlock {
    pub iretire: u32,
    pub ilastsize: u8,
    pub itype: IType,
}

/// Derives `iretire`, `ilastsize` and `itype` for a straight run of `count`
/// instructions. `taken` picks the outcome when the run ends on a branch.
pub fn block_from_walk(
    map: &InstructionMap,
    start: u64,
    count: usize,
    taken: bool,
) -> Result<WalkedBlock, WalkError> {
    let mut addr = start;
    let mut iretire = 0;
    let mut last = None;
    for i in 0..count {
        let insn = map.get(addr).ok_or(WalkError::UnknownAddress(addr))?;
        if i + 1 < count && insn.kind != InstructionKind::Sequential {
            return Err(WalkError::NonSequentialInterior(addr));
        }
        iretire += insn.halfwords();
        last = Some(*insn);
        addr += u64::from(insn.size);
    }
    let last = last.ok_or(WalkError::UnknownAddress(start))?;
    Ok(WalkedBlock {
        iretire,
        ilastsize: last.size / 2,
        itype: last.kind.itype(taken),
    })
}

/// Addresses of the instructions retired by `block`.
pub fn block_pcs(map: &InstructionMap, block: &RetirementBlock) -> Result<Vec<u64>, WalkError> {
    let mut pcs = Vec::new();
    let mut addr = block.iaddr;
    let end = block.end_addr();
    while addr < end {
        let insn = map.get(addr).ok_or(WalkError::UnknownAddress(addr))?;
        pcs.push(addr);
        addr += u64::from(insn.size);
    }
    if addr != end {
        return Err(WalkError::SizeMismatch(block.iaddr));
    }
    Ok(pcs)
}
