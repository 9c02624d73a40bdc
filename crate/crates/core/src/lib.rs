//! Static analysis of compiled GPU kernels: theoretical occupancy, instruction
//! mix, a throughput-weighted cost estimate and autotuning search-space
//! pruning, all computed from captured compiler output without running the
//! kernel.

pub mod arch;
pub mod disasm;
pub mod mix;
pub mod occupancy;
pub mod prune;
pub mod report;

pub use arch::{ArchDb, ArchSpec, Family};
pub use disasm::{parse_disassembly, parse_resource_report, Function, Instruction, KernelResources};
pub use mix::{Classifier, InstructionMix, OpClass, ThroughputTable};
pub use occupancy::{occupancy, suggest, LaunchInput, Limiter, Mode, OccupancyResult, SuggestionReport};
pub use prune::{rule_prune, static_prune, PruneReport, TuningSpace};
pub use report::{analyze_kernel, AnalysisOptions, AnalysisReport, Report};
