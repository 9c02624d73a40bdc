//! Instruction-mix characterisation and the throughput-weighted cost model.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::ops::{Add, AddAssign};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::ComputeCapability;
use crate::disasm::Instruction;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MixError {
    #[error("no throughput data for compute capability {0}")]
    UnsupportedArch(ComputeCapability),
    #[error("{0:?} has no throughput entry")]
    NoThroughput(OpClass),
    #[error("scale must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("line {line}: {message}")]
    ClassTable { line: usize, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// Instruction classes, one per row of the throughput table, plus
/// `Unclassified` for opcodes the classifier does not know.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpClass {
    FPIns32,
    FPIns64,
    CompMinMax,
    ShiftExtractShuffleSAD,
    Conv64,
    Conv32,
    LogSinCos,
    IntAdd32,
    TexIns,
    LdStIns,
    SurfIns,
    PredIns,
    CtrlIns,
    MoveIns,
    Regs,
    Unclassified,
}

/// The four terms of the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Category {
    Flops,
    Mem,
    Ctrl,
    Reg,
}

impl OpClass {
    pub const ALL: [OpClass; 16] = [
        OpClass::FPIns32,
        OpClass::FPIns64,
        OpClass::CompMinMax,
        OpClass::ShiftExtractShuffleSAD,
        OpClass::Conv64,
        OpClass::Conv32,
        OpClass::LogSinCos,
        OpClass::IntAdd32,
        OpClass::TexIns,
        OpClass::LdStIns,
        OpClass::SurfIns,
        OpClass::PredIns,
        OpClass::CtrlIns,
        OpClass::MoveIns,
        OpClass::Regs,
        OpClass::Unclassified,
    ];

    /// Classes that carry a throughput entry.
    pub const TABLE_ROWS: [OpClass; 15] = [
        OpClass::FPIns32,
        OpClass::FPIns64,
        OpClass::CompMinMax,
        OpClass::ShiftExtractShuffleSAD,
        OpClass::Conv64,
        OpClass::Conv32,
        OpClass::LogSinCos,
        OpClass::IntAdd32,
        OpClass::TexIns,
        OpClass::LdStIns,
        OpClass::SurfIns,
        OpClass::PredIns,
        OpClass::CtrlIns,
        OpClass::MoveIns,
        OpClass::Regs,
    ];

    fn index(self) -> usize {
        self as usize
    }

    pub fn category(self) -> Option<Category> {
        use OpClass::*;
        match self {
            FPIns32 | FPIns64 | CompMinMax | ShiftExtractShuffleSAD | Conv64 | Conv32 | LogSinCos | IntAdd32 => {
                Some(Category::Flops)
            }
            TexIns | LdStIns | SurfIns => Some(Category::Mem),
            PredIns | CtrlIns | MoveIns => Some(Category::Ctrl),
            Regs => Some(Category::Reg),
            Unclassified => None,
        }
    }
}

impl fmt::Display for OpClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for OpClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpClass::ALL
            .into_iter()
            .find(|c| c.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown class `{s}`"))
    }
}

/// Column of the throughput table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SmKey {
    Sm20,
    Sm35,
    Sm52,
    Sm60,
}

impl SmKey {
    pub const ALL: [SmKey; 4] = [SmKey::Sm20, SmKey::Sm35, SmKey::Sm52, SmKey::Sm60];

    /// Selects the column by major version: 2.x, 3.x, 5.x, 6.x.
    pub fn from_cc(cc: ComputeCapability) -> Result<SmKey, MixError> {
        match cc.major {
            2 => Ok(SmKey::Sm20),
            3 => Ok(SmKey::Sm35),
            5 => Ok(SmKey::Sm52),
            6 => Ok(SmKey::Sm60),
            _ => Err(MixError::UnsupportedArch(cc)),
        }
    }
}

/// Instructions per cycle per multiprocessor, by class and architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputTable {
    ipc: [[u32; 4]; 15],
}

impl Default for ThroughputTable {
    fn default() -> Self {
        ThroughputTable {
            //     SM20 SM35 SM52 SM60
            ipc: [
                [32, 192, 128, 64], // FPIns32
                [16, 64, 4, 32],    // FPIns64
                [32, 160, 64, 32],  // CompMinMax
                [16, 32, 64, 32],   // ShiftExtractShuffleSAD
                [16, 8, 4, 16],     // Conv64
                [16, 128, 32, 16],  // Conv32
                [4, 32, 32, 16],    // LogSinCos
                [32, 160, 64, 32],  // IntAdd32
                [16, 32, 64, 16],   // TexIns
                [16, 32, 64, 16],   // LdStIns
                [16, 32, 64, 16],   // SurfIns
                [16, 32, 64, 16],   // PredIns
                [16, 32, 64, 16],   // CtrlIns
                [32, 32, 32, 32],   // MoveIns
                [16, 32, 32, 16],   // Regs
            ],
        }
    }
}

impl ThroughputTable {
    pub fn ipc(&self, class: OpClass, key: SmKey) -> Option<u32> {
        let row = self.ipc.get(class.index())?;
        Some(row[key as usize])
    }

    /// Cycles per instruction: the reciprocal of the tabulated IPC.
    pub fn cpi(&self, class: OpClass, cc: ComputeCapability) -> Result<f64, MixError> {
        let key = SmKey::from_cc(cc)?;
        let ipc = self.ipc(class, key).ok_or(MixError::NoThroughput(class))?;
        Ok(1.0 / f64::from(ipc))
    }
}

/// Maps opcodes to classes.
#[derive(Debug, Clone, Default)]
pub struct Classifier {
    by_opcode: HashMap<String, OpClass>,
    by_modifier: HashMap<(String, String), OpClass>,
}

const BUILTIN_CLASSES: &str = include_str!("opclasses.txt");

impl Classifier {
    pub fn builtin() -> Self {
        Classifier::parse(BUILTIN_CLASSES).expect("built-in class table parses")
    }

    /// Parses `OPCODE[.MOD] -> Class` rules; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, MixError> {
        let mut table = Classifier::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| MixError::ClassTable { line: idx + 1, message };
            let (lhs, rhs) = line
                .split_once("->")
                .ok_or_else(|| err(format!("expected `OPCODE -> Class`, got `{line}`")))?;
            let class: OpClass = rhs.trim().parse().map_err(err)?;
            if matches!(class, OpClass::Regs | OpClass::Unclassified) {
                return Err(err(format!("{class} cannot be assigned to an opcode")));
            }
            let lhs = lhs.trim();
            match lhs.split_once('.') {
                Some((op, m)) if !op.is_empty() && !m.is_empty() => {
                    table.by_modifier.insert((op.to_string(), format!(".{m}")), class);
                }
                None if !lhs.is_empty() => {
                    table.by_opcode.insert(lhs.to_string(), class);
                }
                _ => return Err(err(format!("malformed opcode `{lhs}`"))),
            }
        }
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MixError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| MixError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Classifier::parse(&text)
    }

    pub fn classify(&self, instr: &Instruction) -> OpClass {
        instr
            .modifiers
            .iter()
            .find_map(|m| self.by_modifier.get(&(instr.opcode.clone(), m.clone())))
            .or_else(|| self.by_opcode.get(&instr.opcode))
            .copied()
            .unwrap_or(OpClass::Unclassified)
    }

    /// Counts classes and register operands over a static instruction stream.
    ///
    /// A guarded instruction whose own class is not a control class also adds
    /// one `PredIns` for the guard.
    pub fn aggregate<'a>(&self, instrs: impl IntoIterator<Item = &'a Instruction>) -> InstructionMix {
        let mut mix = InstructionMix::default();
        for instr in instrs {
            let class = self.classify(instr);
            mix.counts[class.index()] += 1;
            mix.instructions += 1;
            mix.registers += instr.register_operands() as u64;
            if instr.predicate.is_some() && class.category() != Some(Category::Ctrl) {
                mix.counts[OpClass::PredIns.index()] += 1;
            }
            if class == OpClass::Unclassified {
                mix.unclassified_opcodes.insert(instr.opcode.clone());
            }
        }
        mix
    }
}

/// Static instruction counts of one kernel.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "MixRepr", try_from = "MixRepr")]
pub struct InstructionMix {
    counts: [u64; 16],
    /// Register operand occurrences, sources and destinations.
    pub registers: u64,
    pub instructions: u64,
    pub unclassified_opcodes: BTreeSet<String>,
}

impl InstructionMix {
    /// Builds a mix directly from class counts.
    pub fn from_counts(counts: impl IntoIterator<Item = (OpClass, u64)>, registers: u64) -> Self {
        let mut mix = InstructionMix {
            registers,
            ..Default::default()
        };
        for (class, n) in counts {
            if class != OpClass::Regs {
                mix.counts[class.index()] += n;
                mix.instructions += n;
            }
        }
        mix
    }

    pub fn count(&self, class: OpClass) -> u64 {
        if class == OpClass::Regs {
            self.registers
        } else {
            self.counts[class.index()]
        }
    }

    pub fn category_total(&self, category: Category) -> u64 {
        if category == Category::Reg {
            return self.registers;
        }
        OpClass::ALL
            .into_iter()
            .filter(|c| *c != OpClass::Regs && c.category() == Some(category))
            .map(|c| self.counts[c.index()])
            .sum()
    }

    pub fn flops(&self) -> u64 {
        self.category_total(Category::Flops)
    }

    pub fn mem(&self) -> u64 {
        self.category_total(Category::Mem)
    }

    pub fn ctrl(&self) -> u64 {
        self.category_total(Category::Ctrl)
    }

    pub fn unclassified(&self) -> u64 {
        self.counts[OpClass::Unclassified.index()]
    }

    /// Ratio of floating-point to memory operations. Infinite when there are
    /// flops but no memory operations, zero when there are neither.
    pub fn intensity(&self) -> f64 {
        let (fl, mem) = (self.flops(), self.mem());
        match (fl, mem) {
            (0, 0) => 0.0,
            (_, 0) => f64::INFINITY,
            _ => fl as f64 / mem as f64,
        }
    }
}

impl AddAssign<&InstructionMix> for InstructionMix {
    fn add_assign(&mut self, rhs: &InstructionMix) {
        for (a, b) in self.counts.iter_mut().zip(rhs.counts) {
            *a += b;
        }
        self.registers += rhs.registers;
        self.instructions += rhs.instructions;
        self.unclassified_opcodes.extend(rhs.unclassified_opcodes.iter().cloned());
    }
}

impl Add for InstructionMix {
    type Output = InstructionMix;

    fn add(mut self, rhs: InstructionMix) -> InstructionMix {
        self += &rhs;
        self
    }
}

#[derive(Serialize, Deserialize)]
struct MixRepr {
    counts: BTreeMap<OpClass, u64>,
    o_fl: u64,
    o_mem: u64,
    o_ctrl: u64,
    o_reg: u64,
    unclassified: u64,
    instructions: u64,
    #[serde(default)]
    unclassified_opcodes: BTreeSet<String>,
}

impl From<InstructionMix> for MixRepr {
    fn from(mix: InstructionMix) -> Self {
        MixRepr {
            counts: OpClass::ALL
                .into_iter()
                .filter(|c| *c != OpClass::Regs)
                .map(|c| (c, mix.counts[c.index()]))
                .collect(),
            o_fl: mix.flops(),
            o_mem: mix.mem(),
            o_ctrl: mix.ctrl(),
            o_reg: mix.registers,
            unclassified: mix.unclassified(),
            instructions: mix.instructions,
            unclassified_opcodes: mix.unclassified_opcodes,
        }
    }
}

impl TryFrom<MixRepr> for InstructionMix {
    type Error = String;

    fn try_from(repr: MixRepr) -> Result<Self, Self::Error> {
        let mut mix = InstructionMix::from_counts(repr.counts, repr.o_reg);
        mix.instructions = repr.instructions;
        mix.unclassified_opcodes = repr.unclassified_opcodes;
        if (mix.flops(), mix.mem(), mix.ctrl()) != (repr.o_fl, repr.o_mem, repr.o_ctrl) {
            return Err("category totals disagree with class counts".to_string());
        }
        Ok(mix)
    }
}

/// Per-category coefficients (cycles per instruction) used by the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub c_f: f64,
    pub c_m: f64,
    pub c_b: f64,
    pub c_r: f64,
}

impl Coefficients {
    /// `c_m`, `c_b`, `c_r` come from the LdStIns, CtrlIns and Regs rows.
    /// `c_f` is the count-weighted mean over the flop rows present in the
    /// mix, or the FPIns32 row when there are none.
    pub fn for_mix(table: &ThroughputTable, mix: &InstructionMix, cc: ComputeCapability) -> Result<Self, MixError> {
        let flops = mix.flops();
        let c_f = if flops == 0 {
            table.cpi(OpClass::FPIns32, cc)?
        } else {
            let mut weighted = 0.0;
            for class in OpClass::TABLE_ROWS.into_iter().filter(|c| c.category() == Some(Category::Flops)) {
                weighted += mix.count(class) as f64 * table.cpi(class, cc)?;
            }
            weighted / flops as f64
        };
        Ok(Coefficients {
            c_f,
            c_m: table.cpi(OpClass::LdStIns, cc)?,
            c_b: table.cpi(OpClass::CtrlIns, cc)?,
            c_r: table.cpi(OpClass::Regs, cc)?,
        })
    }
}

/// The cost estimate split into its terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub coefficients: Coefficients,
    pub flops: f64,
    pub mem: f64,
    pub ctrl: f64,
    pub reg: f64,
    pub scale_n: f64,
    /// `scale_n * (flops + mem + ctrl + reg)`.
    pub total: f64,
    /// Same sum with every class weighted by its own row.
    pub row_weighted: f64,
}

impl CostBreakdown {
    pub fn compute(
        table: &ThroughputTable,
        mix: &InstructionMix,
        cc: ComputeCapability,
        scale_n: f64,
    ) -> Result<Self, MixError> {
        if !(scale_n.is_finite() && scale_n > 0.0) {
            return Err(MixError::InvalidScale(scale_n));
        }
        let coefficients = Coefficients::for_mix(table, mix, cc)?;
        let flops = coefficients.c_f * mix.flops() as f64;
        let mem = coefficients.c_m * mix.mem() as f64;
        let ctrl = coefficients.c_b * mix.ctrl() as f64;
        let reg = coefficients.c_r * mix.registers as f64;
        let mut row_weighted = 0.0;
        for class in OpClass::TABLE_ROWS {
            row_weighted += mix.count(class) as f64 * table.cpi(class, cc)?;
        }
        Ok(CostBreakdown {
            coefficients,
            flops,
            mem,
            ctrl,
            reg,
            scale_n,
            total: scale_n * (flops + mem + ctrl + reg),
            row_weighted: scale_n * row_weighted,
        })
    }
}

/// Throughput-weighted cycle estimate, meant for ranking variants.
pub fn cost_estimate(
    table: &ThroughputTable,
    mix: &InstructionMix,
    cc: ComputeCapability,
    scale_n: f64,
) -> Result<f64, MixError> {
    CostBreakdown::compute(table, mix, cc, scale_n).map(|c| c.total)
}

/// Share of weighted cycles spent in each category.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PipelineShares {
    pub flops: f64,
    pub mem: f64,
    pub ctrl: f64,
    pub reg: f64,
}

impl PipelineShares {
    pub fn get(&self, category: Category) -> f64 {
        match category {
            Category::Flops => self.flops,
            Category::Mem => self.mem,
            Category::Ctrl => self.ctrl,
            Category::Reg => self.reg,
        }
    }
}

pub fn pipeline_utilization(
    table: &ThroughputTable,
    mix: &InstructionMix,
    cc: ComputeCapability,
) -> Result<PipelineShares, MixError> {
    let cost = CostBreakdown::compute(table, mix, cc, 1.0)?;
    let total = cost.flops + cost.mem + cost.ctrl + cost.reg;
    if total == 0.0 {
        return Ok(PipelineShares::default());
    }
    Ok(PipelineShares {
        flops: cost.flops / total,
        mem: cost.mem / total,
        ctrl: cost.ctrl / total,
        reg: cost.reg / total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disasm::Instruction;
    use proptest::prelude::*;

    const SM20: ComputeCapability = ComputeCapability::new(2, 0);
    const SM35: ComputeCapability = ComputeCapability::new(3, 5);
    const SM52: ComputeCapability = ComputeCapability::new(5, 2);

    fn instr(line: &str) -> Instruction {
        Instruction::parse(line).unwrap().unwrap()
    }

    #[test]
    fn classify_examples() {
        let c = Classifier::builtin();
        assert_eq!(c.classify(&instr("FFMA R4, R2, R3, R4 ;")), OpClass::FPIns32);
        assert_eq!(c.classify(&instr("LDG.E R0, [R2] ;")), OpClass::LdStIns);
        assert_eq!(c.classify(&instr("BRA 0x90 ;")), OpClass::CtrlIns);
        assert_eq!(c.classify(&instr("DFMA R4, R2, R6, R4 ;")), OpClass::FPIns64);
        assert_eq!(c.classify(&instr("I2F.F64.S32 R2, R0 ;")), OpClass::Conv64);
        assert_eq!(c.classify(&instr("I2F.F32.S32 R2, R0 ;")), OpClass::Conv32);
        assert_eq!(c.classify(&instr("FOOBAR R1 ;")), OpClass::Unclassified);
    }

    #[test]
    fn class_table_errors() {
        assert!(matches!(Classifier::parse("FFMA FPIns32"), Err(MixError::ClassTable { line: 1, .. })));
        assert!(matches!(Classifier::parse("\nFFMA -> Bogus"), Err(MixError::ClassTable { line: 2, .. })));
        assert!(Classifier::parse("FFMA -> Regs").is_err());
        let custom = Classifier::parse("# c\nFOO -> MoveIns\nFOO.W -> LdStIns\n").unwrap();
        assert_eq!(custom.classify(&instr("FOO R1 ;")), OpClass::MoveIns);
        assert_eq!(custom.classify(&instr("FOO.W R1 ;")), OpClass::LdStIns);
    }

    #[test]
    fn aggregate_examples() {
        let c = Classifier::builtin();
        assert_eq!(c.aggregate(&[]), InstructionMix::default());

        let mix = c.aggregate(&[instr("FFMA R4, R2, R3, R4 ;"), instr("BRA 0x90 ;")]);
        assert_eq!((mix.flops(), mix.ctrl(), mix.mem(), mix.registers), (1, 1, 0, 4));

        let ldg = vec![instr("LDG R0, [R2] ;"); 10];
        let mix = c.aggregate(&ldg);
        assert_eq!((mix.mem(), mix.registers), (10, 20));
    }

    #[test]
    fn guard_counts_once() {
        let c = Classifier::builtin();
        let mix = c.aggregate(&[instr("@P0 FADD R1, R2, R3 ;"), instr("@P0 BRA 0x10 ;"), instr("@!P1 MOV R1, R2 ;")]);
        assert_eq!(mix.count(OpClass::FPIns32), 1);
        assert_eq!(mix.count(OpClass::PredIns), 1);
        assert_eq!(mix.count(OpClass::CtrlIns), 1);
        assert_eq!(mix.ctrl(), 3);
    }

    #[test]
    fn unclassified_reported() {
        let mix = Classifier::builtin().aggregate(&[instr("WIBBLE R1 ;"), instr("WIBBLE R2 ;")]);
        assert_eq!(mix.unclassified(), 2);
        assert_eq!(mix.unclassified_opcodes.iter().collect::<Vec<_>>(), ["WIBBLE"]);
        assert_eq!(mix.flops() + mix.mem() + mix.ctrl(), 0);
    }

    #[test]
    fn cpi_examples() {
        let t = ThroughputTable::default();
        assert_eq!(t.cpi(OpClass::FPIns32, SM35).unwrap(), 1.0 / 192.0);
        assert_eq!(t.cpi(OpClass::LdStIns, SM52).unwrap(), 1.0 / 64.0);
        assert_eq!(t.cpi(OpClass::Regs, SM20).unwrap(), 1.0 / 16.0);
        assert_eq!(t.cpi(OpClass::Unclassified, SM20), Err(MixError::NoThroughput(OpClass::Unclassified)));
        assert!(matches!(t.cpi(OpClass::FPIns32, ComputeCapability::new(7, 0)), Err(MixError::UnsupportedArch(_))));
    }

    fn four_term_mix() -> InstructionMix {
        InstructionMix::from_counts([(OpClass::FPIns32, 192), (OpClass::LdStIns, 32), (OpClass::CtrlIns, 32)], 32)
    }

    #[test]
    fn cost_examples() {
        let t = ThroughputTable::default();
        assert_eq!(cost_estimate(&t, &InstructionMix::default(), SM35, 1.0).unwrap(), 0.0);
        assert_eq!(cost_estimate(&t, &four_term_mix(), SM35, 1.0).unwrap(), 4.0);
        let doubled = four_term_mix() + four_term_mix();
        assert_eq!(cost_estimate(&t, &doubled, SM35, 1.0).unwrap(), 8.0);
        assert_eq!(cost_estimate(&t, &four_term_mix(), SM35, 2.5).unwrap(), 10.0);
        assert!(matches!(cost_estimate(&t, &four_term_mix(), SM35, 0.0), Err(MixError::InvalidScale(_))));
    }

    #[test]
    fn flop_coefficient_is_weighted_mean() {
        let t = ThroughputTable::default();
        let mix = InstructionMix::from_counts([(OpClass::FPIns32, 128), (OpClass::FPIns64, 4)], 0);
        let c = Coefficients::for_mix(&t, &mix, SM52).unwrap();
        assert!((c.c_f - (128.0 / 128.0 + 4.0 / 4.0) / 132.0).abs() < 1e-15);
        let empty = Coefficients::for_mix(&t, &InstructionMix::default(), SM52).unwrap();
        assert_eq!(empty.c_f, 1.0 / 128.0);
    }

    #[test]
    fn row_weighted_differs_for_moves() {
        let t = ThroughputTable::default();
        let mix = InstructionMix::from_counts([(OpClass::MoveIns, 32)], 0);
        let cost = CostBreakdown::compute(&t, &mix, SM20, 1.0).unwrap();
        assert_eq!(cost.total, 2.0);
        assert_eq!(cost.row_weighted, 1.0);
    }

    #[test]
    fn intensity_examples() {
        let ex14 = InstructionMix::from_counts([(OpClass::FPIns32, 127), (OpClass::LdStIns, 10)], 0);
        assert!((ex14.intensity() - 12.7).abs() < 1e-12);
        let mem_only = InstructionMix::from_counts([(OpClass::LdStIns, 5)], 0);
        assert_eq!(mem_only.intensity(), 0.0);
        let atax = InstructionMix::from_counts([(OpClass::FPIns32, 34), (OpClass::LdStIns, 10)], 0);
        assert!((atax.intensity() - 3.4).abs() < 1e-12);
        let flop_only = InstructionMix::from_counts([(OpClass::FPIns32, 1)], 0);
        assert_eq!(flop_only.intensity(), f64::INFINITY);
        assert_eq!(InstructionMix::default().intensity(), 0.0);
    }

    #[test]
    fn pipeline_examples() {
        let t = ThroughputTable::default();
        assert_eq!(pipeline_utilization(&t, &InstructionMix::default(), SM35).unwrap(), PipelineShares::default());
        let mem = InstructionMix::from_counts([(OpClass::LdStIns, 7)], 0);
        assert_eq!(pipeline_utilization(&t, &mem, SM35).unwrap().mem, 1.0);
        let shares = pipeline_utilization(&t, &four_term_mix(), SM35).unwrap();
        for cat in [Category::Flops, Category::Mem, Category::Ctrl, Category::Reg] {
            assert_eq!(shares.get(cat), 0.25);
        }
    }

    #[test]
    fn mix_serde_round_trip() {
        let mix = Classifier::builtin().aggregate(&[instr("FFMA R1, R2, R3, R4 ;"), instr("ZZZ ;")]);
        let json = serde_json::to_string(&mix).unwrap();
        assert!(json.contains("\"o_fl\":1"));
        assert_eq!(serde_json::from_str::<InstructionMix>(&json).unwrap(), mix);
    }

    fn mix_strategy() -> impl Strategy<Value = InstructionMix> {
        (proptest::collection::vec(0u64..10_000, 14), 0u64..100_000).prop_map(|(counts, regs)| {
            InstructionMix::from_counts(OpClass::TABLE_ROWS.into_iter().zip(counts), regs)
        })
    }

    proptest! {
        #[test]
        fn cost_is_linear(mix in mix_strategy(), k in 1u64..8) {
            let t = ThroughputTable::default();
            for cc in [SM20, SM35, SM52, ComputeCapability::new(6, 0)] {
                let base = cost_estimate(&t, &mix, cc, 1.0).unwrap();
                let mut scaled = InstructionMix::default();
                for _ in 0..k { scaled += &mix; }
                let big = cost_estimate(&t, &scaled, cc, 1.0).unwrap();
                prop_assert!((big - k as f64 * base).abs() <= 1e-9 * big.max(1.0));
            }
        }

        #[test]
        fn cost_is_monotone(mix in mix_strategy(), row in 0usize..15) {
            let t = ThroughputTable::default();
            let class = OpClass::TABLE_ROWS[row];
            let bumped = mix.clone() + InstructionMix::from_counts([(class, 1)], u64::from(class == OpClass::Regs));
            for cc in [SM20, SM35, SM52, ComputeCapability::new(6, 0)] {
                prop_assert!(cost_estimate(&t, &bumped, cc, 1.0).unwrap() >= cost_estimate(&t, &mix, cc, 1.0).unwrap());
            }
        }

        #[test]
        fn shares_sum_to_one(mix in mix_strategy()) {
            let t = ThroughputTable::default();
            let s = pipeline_utilization(&t, &mix, SM35).unwrap();
            let sum = s.flops + s.mem + s.ctrl + s.reg;
            if mix.instructions + mix.registers > 0 {
                prop_assert!((sum - 1.0).abs() <= 1e-12);
            }
        }
    }
}
