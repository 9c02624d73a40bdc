//! Per-kernel analysis reports and their JSON / text renderings.
//!
//! The JSON layout is documented in `docs/report-schema.md`. Field order is
//! fixed by the struct definitions below, so the same inputs always produce
//! byte-identical output.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::arch::ArchSpec;
use crate::disasm::{Function, KernelResources};
use crate::mix::{pipeline_utilization, Classifier, CostBreakdown, InstructionMix, PipelineShares, ThroughputTable};
use crate::occupancy::{occupancy, suggest, LaunchInput, Limiter, Mode, OccupancyError, OccupancyResult, SuggestionReport};
use crate::prune::{rule_prune, static_prune, PruneReport, TuningSpace};

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Serde helpers for ratios that may be infinite. Finite values are plain
/// numbers; infinity is written as the string `"inf"`.
pub mod ratio {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &f64, s: S) -> Result<S::Ok, S::Error> {
        if value.is_infinite() && *value > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*value)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Raw::Str(s) => Err(de::Error::custom(format!("expected a number or \"inf\", got \"{s}\""))),
        }
    }
}

/// [`ratio`] for optional values; `None` is `null`.
pub mod opt_ratio {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match value {
            Some(v) => super::ratio::serialize(v, s),
            None => s.serialize_none(),
        }
    }

    #[derive(Deserialize)]
    struct Wrap(#[serde(with = "super::ratio")] f64);

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
    }
}

/// Settings shared by every kernel of one analysis run.
#[derive(Debug, Clone)]
pub struct AnalysisOptions {
    pub mode: Mode,
    /// Added to the static shared memory of every kernel.
    pub dynamic_smem: u32,
    pub scale_n: f64,
    /// Block size for the occupancy section; defaults to the best suggested
    /// block size.
    pub threads: Option<u32>,
    pub space: TuningSpace,
    pub classifier: Classifier,
    pub table: ThroughputTable,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            mode: Mode::default(),
            dynamic_smem: 0,
            scale_n: 1.0,
            threads: None,
            space: TuningSpace::default(),
            classifier: Classifier::builtin(),
            table: ThroughputTable::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneSection {
    #[serde(rename = "static")]
    pub static_rule: PruneReport,
    pub intensity: PruneReport,
    /// Where the intensity fed to the rule came from. Always `"static"`.
    pub intensity_source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub kernel: String,
    pub arch: String,
    pub mode: Mode,
    pub resources: KernelResources,
    pub dynamic_smem: u32,
    /// Static plus dynamic shared memory per block.
    pub shared_per_block: u32,
    pub mix: InstructionMix,
    #[serde(with = "ratio")]
    pub intensity: f64,
    /// Absent when the architecture has no throughput data.
    pub cost: Option<CostBreakdown>,
    pub pipeline: Option<PipelineShares>,
    pub occupancy: OccupancyResult,
    pub suggestion: SuggestionReport,
    pub prune: Option<PruneSection>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Top-level JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub tool_version: String,
    pub kernels: Vec<AnalysisReport>,
}

impl Report {
    pub fn new(kernels: Vec<AnalysisReport>) -> Self {
        Report {
            schema_version: SCHEMA_VERSION,
            tool_version: TOOL_VERSION.to_string(),
            kernels,
        }
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("report is always serializable");
        out.push('\n');
        out
    }
}

pub fn analyze_kernel(
    arch: &ArchSpec,
    resources: &KernelResources,
    function: &Function,
    opts: &AnalysisOptions,
) -> Result<AnalysisReport, OccupancyError> {
    let mut warnings = Vec::new();
    if let Some(cc) = resources.target_cc {
        if cc.major != arch.compute_capability.major {
            warnings.push(format!(
                "kernel was compiled for {cc} but is analyzed as {} ({})",
                arch.name, arch.compute_capability
            ));
        }
    }

    if function.instructions.is_empty() {
        warnings.push("kernel has no instructions".to_string());
    }
    let mix = opts.classifier.aggregate(&function.instructions);
    if !mix.unclassified_opcodes.is_empty() {
        let names: Vec<&str> = mix.unclassified_opcodes.iter().map(String::as_str).collect();
        warnings.push(format!("{} unclassified instructions ({})", mix.unclassified(), names.join(", ")));
    }
    let intensity = mix.intensity();
    let cc = arch.compute_capability;
    let (cost, pipeline) = match (
        CostBreakdown::compute(&opts.table, &mix, cc, opts.scale_n),
        pipeline_utilization(&opts.table, &mix, cc),
    ) {
        (Ok(c), Ok(p)) => (Some(c), Some(p)),
        (Err(e), _) | (_, Err(e)) => {
            warnings.push(format!("cost model unavailable: {e}"));
            (None, None)
        }
    };

    let regs = resources.registers_per_thread;
    let shared = resources.static_shared_mem.saturating_add(opts.dynamic_smem);
    let suggestion = suggest(arch, regs, shared, opts.mode);
    let threads = opts.threads.unwrap_or(if suggestion.best_threads > 0 {
        suggestion.best_threads
    } else {
        suggestion.thread_candidates.first().copied().unwrap_or(arch.warp_size)
    });
    let occ = occupancy(arch, LaunchInput::new(threads, regs, shared), opts.mode)?;
    if occ.limiter == Limiter::Illegal {
        warnings.push(format!("no block of {threads} threads fits on {}", arch.name));
    }

    let prune = match (static_prune(&opts.space, &suggestion), rule_prune(&opts.space, &suggestion, intensity)) {
        (Ok(s), Ok(i)) => Some(PruneSection {
            static_rule: s,
            intensity: i,
            intensity_source: "static".to_string(),
        }),
        (Err(e), _) | (_, Err(e)) => {
            warnings.push(format!("search space not pruned: {e}"));
            None
        }
    };

    Ok(AnalysisReport {
        kernel: function.name.clone(),
        arch: arch.name.clone(),
        mode: opts.mode,
        resources: resources.clone(),
        dynamic_smem: opts.dynamic_smem,
        shared_per_block: shared,
        mix,
        intensity,
        cost,
        pipeline,
        occupancy: occ,
        suggestion,
        prune,
        warnings,
    })
}

pub fn format_ratio(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.2}")
    }
}

pub fn join_u32(values: &[u32]) -> String {
    values.iter().map(u32::to_string).collect::<Vec<_>>().join(", ")
}

/// Column header of the suggestion table.
pub const SUGGESTION_HEADER: &str = "Kernel  Arch  T*  [Ru : R*]  S*  occ*";

/// One suggestion row: block sizes, register usage and headroom, shared
/// memory budget, best occupancy.
pub fn suggestion_row(kernel: &str, arch: &str, s: &SuggestionReport) -> String {
    format!(
        "{kernel}  {arch}  {}  [{} : {}]  {}  {:.2}",
        join_u32(&s.thread_candidates),
        s.regs_used,
        s.reg_headroom,
        s.smem_budget,
        s.best_occupancy
    )
}

pub fn occupancy_hint(result: &OccupancyResult) -> &'static str {
    match result.limiter {
        Limiter::Warps => "bounded by warps per block and the block cap; block sizes in T* reach full warp occupancy",
        Limiter::Registers => "reducing registers per thread could increase occupancy",
        Limiter::SharedMemory => "reducing S per T could increase occupancy",
        Limiter::Illegal => "launch cannot be scheduled",
    }
}

pub fn render_occupancy(out: &mut String, r: &OccupancyResult) {
    let i = &r.input;
    let _ = writeln!(
        out,
        "  launch: T={} R={} S={} ({} warps/block)",
        i.threads_per_block, i.regs_per_thread, i.shared_per_block, r.warps_per_block
    );
    let _ = writeln!(
        out,
        "  block limits: warps {}  registers {}  shared memory {}",
        r.limit_warps, r.limit_regs, r.limit_smem
    );
    let _ = writeln!(
        out,
        "  active: {} blocks, {} warps, occupancy {:.2} (limiter {})",
        r.active_blocks, r.active_warps, r.occupancy, r.limiter
    );
    let _ = writeln!(out, "  hint: {}", occupancy_hint(r));
}

pub fn render_prune(out: &mut String, label: &str, p: &PruneReport) {
    let _ = writeln!(
        out,
        "  {label}: {} -> {} variants ({:.2}% reduction), TC = [{}]",
        p.original_size,
        p.pruned_size,
        p.reduction * 100.0,
        join_u32(&p.kept_tc)
    );
}

pub fn render_text(report: &Report) -> String {
    let mut out = String::new();
    for k in &report.kernels {
        let _ = writeln!(out, "kernel {} on {} ({} mode)", k.kernel, k.arch, k.mode);
        let m = &k.mix;
        let _ = writeln!(
            out,
            "  mix: {} instructions, O_fl {} O_mem {} O_ctrl {} O_reg {}, unclassified {}",
            m.instructions,
            m.flops(),
            m.mem(),
            m.ctrl(),
            m.registers,
            m.unclassified()
        );
        let _ = writeln!(out, "  intensity: {}", format_ratio(k.intensity));
        if let (Some(c), Some(p)) = (&k.cost, &k.pipeline) {
            let _ = writeln!(out, "  cost: {:.4} cycles (row-weighted {:.4})", c.total, c.row_weighted);
            let _ = writeln!(
                out,
                "  pipeline: flops {:.1}%  mem {:.1}%  ctrl {:.1}%  reg {:.1}%",
                p.flops * 100.0,
                p.mem * 100.0,
                p.ctrl * 100.0,
                p.reg * 100.0
            );
        }
        render_occupancy(&mut out, &k.occupancy);
        let _ = writeln!(out, "  {SUGGESTION_HEADER}");
        let _ = writeln!(out, "  {}", suggestion_row(&k.kernel, &k.arch, &k.suggestion));
        if let Some(p) = &k.prune {
            render_prune(&mut out, "static prune", &p.static_rule);
            render_prune(&mut out, "intensity prune", &p.intensity);
        }
        for w in &k.warnings {
            let _ = writeln!(out, "  warning: {w}");
        }
    }
    out
}
