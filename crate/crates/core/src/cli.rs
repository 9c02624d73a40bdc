use std::fs;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use sasstune::arch::{load_arch_file, ArchDb, ArchSpec};
use sasstune::disasm::{parse_disassembly, parse_resource_report};
use sasstune::mix::Classifier;
use sasstune::occupancy::{occupancy, suggest, LaunchInput, Mode, SuggestionReport};
use sasstune::prune::{rule_prune, static_prune, PruneError, PruneReport, PruneRule, TuningSpace};
use sasstune::report::{self, analyze_kernel, AnalysisOptions, AnalysisReport, Report};

/// Exit status used when a command succeeded but had to fall back.
pub const EXIT_WARNING: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "sasstune", version, about = "Static occupancy and search-space analysis for GPU kernels")]
pub struct Cli {
    /// Extra architecture definitions (TOML) layered over the built-ins.
    #[arg(long, global = true, env = "SASSTUNE_ARCH_DB")]
    pub arch_db: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Analyze captured disassembly and resource-usage reports.
    Analyze(AnalyzeArgs),
    /// Theoretical occupancy of one launch configuration.
    Occupancy(OccupancyArgs),
    /// Suggested block sizes, register headroom and shared memory budget.
    Suggest(SuggestArgs),
    /// Prune an autotuning search space.
    Prune(PruneArgs),
    /// List known architectures.
    ArchList,
}

#[derive(Debug, Args)]
pub struct ModeArg {
    /// `corrected` or `paper-literal`.
    #[arg(long, default_value_t = Mode::Corrected)]
    pub mode: Mode,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub arch: String,
    /// Disassembly listing; repeat together with --resources for several
    /// inputs.
    #[arg(long, short = 'd', required = true)]
    pub disasm: Vec<PathBuf>,
    /// Captured `ptxas -v` output matching each --disasm.
    #[arg(long, short = 'r', required = true)]
    pub resources: Vec<PathBuf>,
    #[command(flatten)]
    pub mode: ModeArg,
    /// Dynamic shared memory per block in bytes, added to the static amount.
    #[arg(long, default_value_t = 0)]
    pub dynamic_smem: u32,
    /// Block size for the occupancy section (default: best suggested).
    #[arg(long)]
    pub threads: Option<u32>,
    /// Opcode classification table replacing the built-in one.
    #[arg(long)]
    pub classes: Option<PathBuf>,
    /// Multiplier applied to the cost estimate.
    #[arg(long, default_value_t = 1.0)]
    pub scale_n: f64,
    /// Tuning-space file (default: the standard grid).
    #[arg(long)]
    pub space: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long, short = 'o')]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OccupancyArgs {
    #[arg(long)]
    pub arch: String,
    #[arg(long)]
    pub threads: u32,
    #[arg(long, default_value_t = 0)]
    pub regs: u32,
    /// Shared memory per block in bytes.
    #[arg(long, default_value_t = 0)]
    pub smem: u32,
    #[command(flatten)]
    pub mode: ModeArg,
}

#[derive(Debug, Args)]
pub struct SuggestArgs {
    #[arg(long)]
    pub arch: String,
    #[arg(long, default_value_t = 0)]
    pub regs: u32,
    #[arg(long, default_value_t = 0)]
    pub smem: u32,
    #[command(flatten)]
    pub mode: ModeArg,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    /// Tuning-space file (default: the standard grid).
    pub space: Option<PathBuf>,
    /// Required unless the report names the architecture.
    #[arg(long)]
    pub arch: Option<String>,
    /// Take registers, shared memory and intensity from an analysis report.
    #[arg(long, conflicts_with_all = ["regs", "smem", "intensity"])]
    pub from_report: Option<PathBuf>,
    /// Kernel to pick from --from-report (default: the first).
    #[arg(long, requires = "from_report")]
    pub kernel: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub regs: u32,
    #[arg(long, default_value_t = 0)]
    pub smem: u32,
    #[arg(long)]
    pub intensity: Option<f64>,
    /// `static` or `intensity`.
    #[arg(long, default_value_t = PruneRule::StaticOnly)]
    pub rule: PruneRule,
    #[command(flatten)]
    pub mode: ModeArg,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn load_db(path: Option<&Path>) -> Result<ArchDb> {
    let mut db = ArchDb::default();
    if let Some(p) = path {
        db.extend(load_arch_file(p).with_context(|| format!("in architecture file {}", p.display()))?);
    }
    Ok(db)
}

fn load_space(path: Option<&Path>) -> Result<TuningSpace> {
    match path {
        None => Ok(TuningSpace::default()),
        Some(p) => TuningSpace::parse(&read(p)?).map_err(|e| anyhow!("{}: {e}", p.display())),
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

/// Runs the command and returns the text for stdout plus the exit status.
pub fn run(cli: Cli) -> Result<(String, i32)> {
    let db = load_db(cli.arch_db.as_deref())?;
    match cli.command {
        Command::Analyze(args) => analyze(&db, cli.format, args).map(|s| (s, 0)),
        Command::Occupancy(args) => cmd_occupancy(&db, cli.format, args).map(|s| (s, 0)),
        Command::Suggest(args) => cmd_suggest(&db, cli.format, args).map(|s| (s, 0)),
        Command::Prune(args) => cmd_prune(&db, cli.format, args),
        Command::ArchList => Ok((arch_list(&db, cli.format), 0)),
    }
}

fn analyze_pair(arch: &ArchSpec, disasm: &Path, resources: &Path, opts: &AnalysisOptions) -> Result<Vec<AnalysisReport>> {
    let functions = parse_disassembly(&read(disasm)?).map_err(|e| anyhow!("{}: {e}", disasm.display()))?;
    let entries = parse_resource_report(&read(resources)?).map_err(|e| anyhow!("{}: {e}", resources.display()))?;
    for e in &entries {
        if !functions.iter().any(|f| f.name == e.entry_name) && !(functions.len() == 1 && entries.len() == 1) {
            eprintln!("warning: {}: no disassembly for kernel {}", resources.display(), e.entry_name);
        }
    }
    functions
        .iter()
        .map(|f| {
            let res = entries
                .iter()
                .find(|e| e.entry_name == f.name)
                .or_else(|| (functions.len() == 1 && entries.len() == 1).then(|| &entries[0]))
                .ok_or_else(|| anyhow!("{}: no resource usage for kernel `{}`", resources.display(), f.name))?;
            Ok(analyze_kernel(arch, res, f, opts)?)
        })
        .collect()
}

fn analyze(db: &ArchDb, format: Format, args: AnalyzeArgs) -> Result<String> {
    if args.disasm.len() != args.resources.len() {
        bail!(
            "got {} --disasm files but {} --resources files; they are paired in order",
            args.disasm.len(),
            args.resources.len()
        );
    }
    let arch = db.resolve(&args.arch)?;
    let classifier = match &args.classes {
        Some(p) => Classifier::load(p)?,
        None => Classifier::builtin(),
    };
    let opts = AnalysisOptions {
        mode: args.mode.mode,
        dynamic_smem: args.dynamic_smem,
        scale_n: args.scale_n,
        threads: args.threads,
        space: load_space(args.space.as_deref())?,
        classifier,
        ..Default::default()
    };
    let per_file: Vec<Vec<AnalysisReport>> = args
        .disasm
        .par_iter()
        .zip(args.resources.par_iter())
        .map(|(d, r)| analyze_pair(arch, d, r, &opts))
        .collect::<Result<_>>()?;
    let doc = Report::new(per_file.into_iter().flatten().collect());
    for k in &doc.kernels {
        for w in &k.warnings {
            eprintln!("warning: {}: {w}", k.kernel);
        }
    }
    let out = match format {
        Format::Json => doc.to_json(),
        Format::Text => report::render_text(&doc),
    };
    match &args.output {
        Some(p) => {
            fs::write(p, &out).with_context(|| format!("cannot write {}", p.display()))?;
            Ok(String::new())
        }
        None => Ok(out),
    }
}

fn cmd_occupancy(db: &ArchDb, format: Format, args: OccupancyArgs) -> Result<String> {
    let arch = db.resolve(&args.arch)?;
    let r = occupancy(arch, LaunchInput::new(args.threads, args.regs, args.smem), args.mode.mode)?;
    Ok(match format {
        Format::Json => to_json(&r),
        Format::Text => {
            let mut out = format!("{} ({} mode)\n", arch.name, r.mode);
            report::render_occupancy(&mut out, &r);
            out
        }
    })
}

fn cmd_suggest(db: &ArchDb, format: Format, args: SuggestArgs) -> Result<String> {
    let arch = db.resolve(&args.arch)?;
    let s = suggest(arch, args.regs, args.smem, args.mode.mode);
    Ok(match format {
        Format::Json => to_json(&s),
        Format::Text => format!(
            "{}\n{}\n",
            report::SUGGESTION_HEADER,
            report::suggestion_row("-", &arch.name, &s)
        ),
    })
}

/// Inputs to pruning gathered from flags or from a saved report.
struct PruneInputs<'a> {
    arch: &'a ArchSpec,
    regs: u32,
    smem: u32,
    intensity: Option<f64>,
}

fn prune_inputs<'a>(db: &'a ArchDb, args: &PruneArgs) -> Result<PruneInputs<'a>> {
    let Some(path) = &args.from_report else {
        let name = args.arch.as_deref().ok_or_else(|| anyhow!("--arch is required without --from-report"))?;
        return Ok(PruneInputs {
            arch: db.resolve(name)?,
            regs: args.regs,
            smem: args.smem,
            intensity: args.intensity,
        });
    };
    let doc: Report = serde_json::from_str(&read(path)?).with_context(|| format!("{} is not a report", path.display()))?;
    let kernel = match &args.kernel {
        Some(name) => doc.kernels.iter().find(|k| &k.kernel == name),
        None => doc.kernels.first(),
    }
    .ok_or_else(|| anyhow!("{}: kernel not found", path.display()))?;
    let name = args.arch.as_deref().unwrap_or(&kernel.arch);
    Ok(PruneInputs {
        arch: db.resolve(name)?,
        regs: kernel.resources.registers_per_thread,
        smem: kernel.shared_per_block,
        intensity: Some(kernel.intensity),
    })
}

fn cmd_prune(db: &ArchDb, format: Format, args: PruneArgs) -> Result<(String, i32)> {
    let space = load_space(args.space.as_deref())?;
    let inputs = prune_inputs(db, &args)?;
    let mut suggestion = suggest(inputs.arch, inputs.regs, inputs.smem, args.mode.mode);
    let apply = |s: &SuggestionReport| -> Result<PruneReport, PruneError> {
        match args.rule {
            PruneRule::StaticOnly => static_prune(&space, s),
            PruneRule::StaticPlusIntensity => {
                let intensity = inputs.intensity.ok_or(PruneError::InvalidIntensity)?;
                rule_prune(&space, s, intensity)
            }
        }
    };
    if args.rule == PruneRule::StaticPlusIntensity && inputs.intensity.is_none() {
        bail!("--rule intensity needs --intensity or --from-report");
    }
    let mut status = 0;
    let result = match apply(&suggestion) {
        Err(PruneError::NoCandidates { suggested }) => {
            eprintln!(
                "warning: no suggested block size ({}) is in the tuning space; keeping every TC value",
                report::join_u32(&suggested)
            );
            status = EXIT_WARNING;
            suggestion.thread_candidates = space.tc.clone();
            apply(&suggestion)?
        }
        other => other?,
    };
    let out = match format {
        Format::Json => to_json(&result),
        Format::Text => {
            let kept = space.with_tc(result.kept_tc.clone());
            let mut out = String::new();
            report::render_prune(&mut out, &format!("{} rule on {}", result.rule_applied, inputs.arch.name), &result);
            out.push_str(&kept.to_string());
            out
        }
    };
    Ok((out, status))
}

fn arch_list(db: &ArchDb, format: Format) -> String {
    match format {
        Format::Json => to_json(&db.specs()),
        Format::Text => {
            let mut out = String::new();
            for s in db.specs() {
                let _ = writeln!(
                    out,
                    "{:<14} {:<8} cc {}  {} SMs  {} warps/SM  {} blocks/SM  {} regs  {} B smem/block",
                    s.name,
                    s.family,
                    s.compute_capability,
                    s.multiprocessors,
                    s.max_warps_per_mp,
                    s.max_blocks_per_mp,
                    s.register_file_size,
                    s.shared_mem_per_block
                );
            }
            out
        }
    }
}
