//! Theoretical occupancy.
//!
//! The number of resident blocks per multiprocessor is the smallest of three
//! limits (warp slots, registers, shared memory), and occupancy is the
//! resulting number of active warps over the architecture's maximum.
//!
//! Two evaluation modes exist. [`Mode::Corrected`] allocates registers per
//! block in chunks of the allocation granularity and divides shared memory
//! with a floor. [`Mode::PaperLiteral`] evaluates an unclamped literal closed
//! form (ceiling division for shared memory) whose register term collapses
//! to zero blocks on realistic inputs; it is kept for comparison.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::ArchSpec;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OccupancyError {
    #[error("illegal launch: {threads} threads per block (allowed 1..={max})")]
    IllegalLaunch { threads: u32, max: u32 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    PaperLiteral,
    #[default]
    Corrected,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::PaperLiteral => "paper-literal",
            Mode::Corrected => "corrected",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "paper-literal" | "literal" => Ok(Mode::PaperLiteral),
            "corrected" => Ok(Mode::Corrected),
            _ => Err(format!("unknown mode `{s}` (expected `corrected` or `paper-literal`)")),
        }
    }
}

/// Launch parameters. Zero registers or zero shared memory means the value
/// was not given and imposes no limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaunchInput {
    pub threads_per_block: u32,
    pub regs_per_thread: u32,
    pub shared_per_block: u32,
}

impl LaunchInput {
    pub fn new(threads_per_block: u32, regs_per_thread: u32, shared_per_block: u32) -> Self {
        LaunchInput {
            threads_per_block,
            regs_per_thread,
            shared_per_block,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Limiter {
    Warps,
    Registers,
    SharedMemory,
    Illegal,
}

impl fmt::Display for Limiter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Limiter::Warps => "warps",
            Limiter::Registers => "registers",
            Limiter::SharedMemory => "shared memory",
            Limiter::Illegal => "illegal",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyResult {
    pub input: LaunchInput,
    pub warps_per_block: u32,
    pub limit_warps: u32,
    pub limit_regs: u32,
    pub limit_smem: u32,
    pub active_blocks: u32,
    pub active_warps: u32,
    pub occupancy: f64,
    pub limiter: Limiter,
    pub mode: Mode,
}

fn check_threads(arch: &ArchSpec, threads: u32) -> Result<(), OccupancyError> {
    if threads == 0 || threads > arch.max_threads_per_block {
        return Err(OccupancyError::IllegalLaunch {
            threads,
            max: arch.max_threads_per_block,
        });
    }
    Ok(())
}

/// Blocks allowed by warp slots and the per-multiprocessor block cap.
pub fn limit_by_warps(arch: &ArchSpec, threads: u32) -> Result<u32, OccupancyError> {
    check_threads(arch, threads)?;
    let warps = arch.warps_for(threads);
    Ok(arch.max_blocks_per_mp.min(arch.max_warps_per_mp / warps))
}

/// Blocks allowed by the register file.
pub fn limit_by_registers(arch: &ArchSpec, threads: u32, regs: u32, mode: Mode) -> Result<u32, OccupancyError> {
    check_threads(arch, threads)?;
    if regs > arch.max_regs_per_thread {
        return Ok(0);
    }
    if regs == 0 {
        return Ok(arch.max_blocks_per_mp);
    }
    let warps = u64::from(arch.warps_for(threads));
    let warp_size = u64::from(arch.warp_size);
    let granule = u64::from(arch.register_alloc_granularity);
    let file = u64::from(arch.register_file_size);
    let blocks = match mode {
        Mode::PaperLiteral => {
            let regs_per_sm = granule / (u64::from(regs) * warp_size);
            regs_per_sm.div_ceil(warps) * file.div_ceil(granule)
        }
        Mode::Corrected => {
            let per_block = (u64::from(regs) * warps * warp_size).next_multiple_of(granule);
            (file / per_block).min(u64::from(arch.max_blocks_per_mp))
        }
    };
    Ok(u32::try_from(blocks).unwrap_or(u32::MAX))
}

/// Blocks allowed by shared memory. The multiprocessor is assumed to hold as
/// much shared memory as one block may use.
pub fn limit_by_smem(arch: &ArchSpec, shared: u32, mode: Mode) -> u32 {
    let capacity = arch.shared_mem_per_block;
    if shared > capacity {
        return 0;
    }
    if shared == 0 {
        return arch.max_blocks_per_mp;
    }
    match mode {
        Mode::PaperLiteral => capacity.div_ceil(shared),
        Mode::Corrected => (capacity / shared).min(arch.max_blocks_per_mp),
    }
}

pub fn occupancy(arch: &ArchSpec, input: LaunchInput, mode: Mode) -> Result<OccupancyResult, OccupancyError> {
    let limit_warps = limit_by_warps(arch, input.threads_per_block)?;
    let limit_regs = limit_by_registers(arch, input.threads_per_block, input.regs_per_thread, mode)?;
    let limit_smem = limit_by_smem(arch, input.shared_per_block, mode);
    let active_blocks = limit_warps.min(limit_regs).min(limit_smem);
    let limiter = if active_blocks == 0 {
        Limiter::Illegal
    } else if limit_warps == active_blocks {
        Limiter::Warps
    } else if limit_regs == active_blocks {
        Limiter::Registers
    } else {
        Limiter::SharedMemory
    };
    let warps_per_block = arch.warps_for(input.threads_per_block);
    let active_warps = (active_blocks * warps_per_block).min(arch.max_warps_per_mp);
    Ok(OccupancyResult {
        input,
        warps_per_block,
        limit_warps,
        limit_regs,
        limit_smem,
        active_blocks,
        active_warps,
        occupancy: f64::from(active_warps) / f64::from(arch.max_warps_per_mp),
        limiter,
        mode,
    })
}

/// Block sizes whose warp count alone can fill every warp slot.
pub fn thread_candidates(arch: &ArchSpec) -> Vec<u32> {
    (1..=arch.max_threads_per_block / arch.warp_size)
        .filter(|&warps| warps * arch.max_blocks_per_mp.min(arch.max_warps_per_mp / warps) == arch.max_warps_per_mp)
        .map(|warps| warps * arch.warp_size)
        .collect()
}

/// Suggested launch parameters for a kernel's register and shared memory
/// usage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuggestionReport {
    /// T*: block sizes that can reach full warp occupancy.
    pub thread_candidates: Vec<u32>,
    pub regs_used: u32,
    /// R*: registers per thread that could be added at the best occupancy.
    pub reg_headroom: u32,
    /// S*: shared memory per block available at the best configuration.
    pub smem_budget: u32,
    /// occ*: best occupancy over all block sizes.
    pub best_occupancy: f64,
    pub best_threads: u32,
    pub best_blocks: u32,
    pub best_warps: u32,
    pub mode: Mode,
}

/// Searches every warp-multiple block size for the highest occupancy (the
/// smallest block size wins ties) and derives register and shared memory
/// headroom at that configuration.
pub fn suggest(arch: &ArchSpec, regs: u32, shared: u32, mode: Mode) -> SuggestionReport {
    let mut best: Option<OccupancyResult> = None;
    for threads in (arch.warp_size..=arch.max_threads_per_block).step_by(arch.warp_size as usize) {
        let result = occupancy(arch, LaunchInput::new(threads, regs, shared), mode).expect("threads in range");
        if best.as_ref().is_none_or(|b| result.active_warps > b.active_warps) {
            best = Some(result);
        }
    }
    let best = best.expect("at least one warp-sized block");

    let (reg_headroom, smem_budget) = if best.active_warps == 0 {
        (0, 0)
    } else {
        let per_thread = arch.register_file_size / (best.active_warps * arch.warp_size);
        (per_thread.saturating_sub(regs), arch.shared_mem_per_block / best.active_blocks)
    };
    SuggestionReport {
        thread_candidates: thread_candidates(arch),
        regs_used: regs,
        reg_headroom,
        smem_budget,
        best_occupancy: best.occupancy,
        best_threads: if best.active_warps == 0 { 0 } else { best.input.threads_per_block },
        best_blocks: best.active_blocks,
        best_warps: best.active_warps,
        mode,
    }
}
