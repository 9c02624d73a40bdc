//! Readers for the two captured compiler artifacts: the verbose resource
//! report printed by `ptxas -v` and the machine-code listing printed by the
//! disassembler.

use std::fmt;

use once_cell::sync::Lazy;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::ComputeCapability;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DisasmError {
    #[error("{0}")]
    EmptyInput(&'static str),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Compile-time resource usage of one kernel.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelResources {
    pub entry_name: String,
    pub registers_per_thread: u32,
    /// Static shared memory in bytes.
    pub static_shared_mem: u32,
    /// `(bank, bytes)` for each `cmem[bank]` clause.
    #[serde(default)]
    pub const_mem_banks: Vec<(u32, u32)>,
    #[serde(default)]
    pub spill_loads: u32,
    #[serde(default)]
    pub spill_stores: u32,
    #[serde(default)]
    pub stack_frame: u32,
    #[serde(default)]
    pub target_cc: Option<ComputeCapability>,
}

static ENTRY: Lazy<Regex> =
    Lazy::new(|| Regex::new(r"Compiling entry function '([^']+)'(?: for '([^']+)')?").unwrap());
static PROPERTIES: Lazy<Regex> = Lazy::new(|| Regex::new(r"Function properties for (\S+)").unwrap());
static USED: Lazy<Regex> = Lazy::new(|| Regex::new(r"^Used\s+(\d+)\s+registers?$").unwrap());
static BYTES: Lazy<Regex> = Lazy::new(|| Regex::new(r"^(\d+)\s+bytes\s+(.+)$").unwrap());
static CMEM: Lazy<Regex> = Lazy::new(|| Regex::new(r"^cmem\[(\d+)\]$").unwrap());

fn parse_u32(text: &str, line: usize) -> Result<u32, DisasmError> {
    text.parse().map_err(|_| DisasmError::Parse {
        line,
        message: format!("number `{text}` out of range"),
    })
}

/// Parses the captured standard error of a `--ptxas-options=-v` compile.
/// Yields one entry per `Compiling entry function` stanza.
pub fn parse_resource_report(text: &str) -> Result<Vec<KernelResources>, DisasmError> {
    let mut kernels: Vec<KernelResources> = Vec::new();
    // name of the function whose stack/spill line comes next
    let mut properties_of: Option<String> = None;

    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        // drop the `ptxas info    :` style prefix
        let body = match raw.split_once(" : ").or_else(|| raw.split_once(": ")) {
            Some((prefix, rest)) if prefix.trim_start().starts_with("ptxas") => rest.trim(),
            _ => raw.trim(),
        };

        if let Some(caps) = ENTRY.captures(body) {
            let target_cc = caps.get(2).and_then(|m| ComputeCapability::from_sm(m.as_str()));
            kernels.push(KernelResources {
                entry_name: caps[1].to_string(),
                target_cc,
                ..KernelResources::default()
            });
            properties_of = None;
            continue;
        }
        if let Some(caps) = PROPERTIES.captures(body) {
            properties_of = Some(caps[1].to_string());
            continue;
        }
        let Some(current) = kernels.last_mut() else {
            continue;
        };

        if body.starts_with("Used") {
            let mut clauses = body.split(',').map(str::trim);
            let head = clauses.next().unwrap_or_default();
            let caps = USED.captures(head).ok_or_else(|| DisasmError::Parse {
                line: lineno,
                message: format!("malformed register clause `{head}`"),
            })?;
            current.registers_per_thread = parse_u32(&caps[1], lineno)?;
            for clause in clauses {
                let Some(caps) = BYTES.captures(clause) else {
                    // e.g. "used 1 barriers"
                    continue;
                };
                let bytes = parse_u32(&caps[1], lineno)?;
                let what = caps[2].trim();
                if what == "smem" {
                    current.static_shared_mem = bytes;
                } else if let Some(bank) = CMEM.captures(what) {
                    current.const_mem_banks.push((parse_u32(&bank[1], lineno)?, bytes));
                }
            }
            continue;
        }

        if body.contains("stack frame") || body.contains("spill") {
            if properties_of.as_deref() != Some(current.entry_name.as_str()) {
                continue;
            }
            for clause in body.split(',').map(str::trim) {
                let Some(caps) = BYTES.captures(clause) else { continue };
                let bytes = parse_u32(&caps[1], lineno)?;
                match caps[2].trim() {
                    "stack frame" => current.stack_frame = bytes,
                    "spill stores" => current.spill_stores = bytes,
                    "spill loads" => current.spill_loads = bytes,
                    _ => {}
                }
            }
        }
    }

    if kernels.is_empty() {
        return Err(DisasmError::EmptyInput("no `Compiling entry function` stanza found"));
    }
    Ok(kernels)
}

/// Syntactic class of an operand token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperandKind {
    Register,
    PredicateRegister,
    ConstantBank,
    Immediate,
    Memory,
    Special,
}

fn is_numbered(core: &str, prefix: char) -> bool {
    let Some(rest) = core.strip_prefix(prefix) else {
        return false;
    };
    let digits = rest.split('.').next().unwrap_or_default();
    !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit())
}

impl OperandKind {
    /// Tags a token by its spelling. Negation, inversion and absolute-value
    /// decorations are looked through, so `-R2` and `|R3|` are registers.
    pub fn of(token: &str) -> OperandKind {
        let core = token.trim_start_matches(['-', '!', '~', '|', '+']).trim_end_matches('|');
        if is_numbered(core, 'R') {
            OperandKind::Register
        } else if is_numbered(core, 'P') {
            OperandKind::PredicateRegister
        } else if core.starts_with("c[") {
            OperandKind::ConstantBank
        } else if core.starts_with('[') {
            OperandKind::Memory
        } else if core.starts_with(|c: char| c.is_ascii_digit()) {
            OperandKind::Immediate
        } else {
            OperandKind::Special
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Operand {
    pub text: String,
    pub kind: OperandKind,
}

impl Operand {
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        let kind = OperandKind::of(&text);
        Operand { text, kind }
    }
}

/// One decoded line of a disassembly listing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub address: Option<u64>,
    /// Guard such as `@P0` or `@!P1`.
    pub predicate: Option<String>,
    pub opcode: String,
    /// Dot-suffixes in source order, each including its leading dot.
    pub modifiers: Vec<String>,
    pub operands: Vec<Operand>,
}

impl Instruction {
    /// Register references, counting registers used inside memory
    /// addresses (`[R2+0x4]`) as well as plain register operands.
    pub fn register_operands(&self) -> usize {
        self.operands
            .iter()
            .map(|o| match o.kind {
                OperandKind::Register => 1,
                OperandKind::Memory => o
                    .text
                    .split(|c: char| !c.is_ascii_alphanumeric() && c != '.')
                    .filter(|tok| is_numbered(tok, 'R'))
                    .count(),
                _ => 0,
            })
            .sum()
    }

    /// Parses a single listing line. `Ok(None)` means the line carries no
    /// instruction (blank, comment, directive, label, brace).
    pub fn parse(line: &str) -> Result<Option<Instruction>, String> {
        match classify_line(line)? {
            Line::Instruction(instr) => Ok(Some(instr)),
            _ => Ok(None),
        }
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(addr) = self.address {
            write!(f, "/*{addr:04x}*/ ")?;
        }
        if let Some(pred) = &self.predicate {
            write!(f, "{pred} ")?;
        }
        f.write_str(&self.opcode)?;
        for m in &self.modifiers {
            f.write_str(m)?;
        }
        for (i, op) in self.operands.iter().enumerate() {
            f.write_str(if i == 0 { " " } else { ", " })?;
            f.write_str(&op.text)?;
        }
        f.write_str(" ;")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Function {
    pub name: String,
    pub instructions: Vec<Instruction>,
}

enum Line {
    Skip,
    Header(String),
    Instruction(Instruction),
}

fn is_opcode(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_uppercase())
        && chars.all(|c| c.is_ascii_uppercase() || c.is_ascii_digit())
}

fn is_word(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn header_name(t: &str) -> Option<String> {
    if let Some(rest) = t.strip_prefix("Function") {
        let name = rest.trim_start().strip_prefix(':')?.trim();
        return (!name.is_empty() && !name.contains(char::is_whitespace)).then(|| name.to_string());
    }
    if let Some(rest) = t.strip_prefix(".section") {
        let section = rest.trim_start().split([',', ' ', '\t']).next()?.trim_matches('"');
        return section.strip_prefix(".text.").filter(|n| !n.is_empty()).map(str::to_string);
    }
    let label = t.strip_prefix(".text.")?.strip_suffix(':')?;
    (!label.is_empty() && !label.contains(char::is_whitespace)).then(|| label.to_string())
}

fn split_operands(text: &str) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, c) in text.char_indices() {
        match c {
            '[' | '(' | '{' => depth += 1,
            ']' | ')' | '}' => depth -= 1,
            ',' if depth <= 0 => {
                parts.push(text[start..i].trim());
                start = i + 1;
            }
            _ => {}
        }
    }
    parts.push(text[start..].trim());
    parts
}

fn classify_line(line: &str) -> Result<Line, String> {
    let mut t = line.trim();
    if t.is_empty() {
        return Ok(Line::Skip);
    }
    if let Some(name) = header_name(t) {
        return Ok(Line::Header(name));
    }
    if t.starts_with("//") || t.starts_with('#') || t.starts_with('.') {
        return Ok(Line::Skip);
    }

    let mut address = None;
    while let Some(rest) = t.strip_prefix("/*") {
        let Some(end) = rest.find("*/") else {
            return Ok(Line::Skip);
        };
        let content = rest[..end].trim();
        let hex = content.strip_prefix("0x").unwrap_or(content);
        if address.is_none() && !hex.is_empty() && hex.len() <= 16 {
            address = u64::from_str_radix(hex, 16).ok();
        }
        t = rest[end + 2..].trim_start();
    }
    t = t.strip_prefix('{').unwrap_or(t).trim_start();
    if t.is_empty() || t.starts_with('}') {
        return Ok(Line::Skip);
    }

    let first = t.split_whitespace().next().unwrap_or_default();
    let first = first.split(';').next().unwrap_or_default();
    if first.ends_with(':') {
        return Ok(Line::Skip);
    }
    let looks_like_instruction = first.starts_with('@') || is_opcode(first.split('.').next().unwrap_or_default());
    if !looks_like_instruction {
        return Ok(Line::Skip);
    }

    let Some(semi) = t.find(';') else {
        return Err(format!("instruction `{t}` has no terminating `;`"));
    };
    let mut body = t[..semi].trim();

    let mut predicate = None;
    if body.starts_with('@') {
        let (guard, rest) = body.split_once(char::is_whitespace).unwrap_or((body, ""));
        let reg = guard[1..].strip_prefix('!').unwrap_or(&guard[1..]);
        if !is_word(reg) {
            return Err(format!("malformed predicate guard `{guard}`"));
        }
        predicate = Some(guard.to_string());
        body = rest.trim_start();
    }

    let (mnemonic, rest) = body.split_once(char::is_whitespace).unwrap_or((body, ""));
    if mnemonic.is_empty() {
        return Err("missing opcode".to_string());
    }
    let mut pieces = mnemonic.split('.');
    let opcode = pieces.next().unwrap_or_default();
    if !is_opcode(opcode) {
        return Err(format!("invalid opcode `{opcode}`"));
    }
    let mut modifiers = Vec::new();
    for m in pieces {
        if !is_word(m) {
            return Err(format!("invalid modifier in `{mnemonic}`"));
        }
        modifiers.push(format!(".{m}"));
    }

    let rest = rest.trim();
    let mut operands = Vec::new();
    if !rest.is_empty() {
        for token in split_operands(rest) {
            if token.is_empty() {
                return Err(format!("empty operand in `{rest}`"));
            }
            operands.push(Operand::new(token));
        }
    }

    Ok(Line::Instruction(Instruction {
        address,
        predicate,
        opcode: opcode.to_string(),
        modifiers,
        operands,
    }))
}

/// Parses a disassembly listing into functions, in file order.
///
/// Functions start at `.section .text.NAME`, `.text.NAME:` or `Function : NAME`
/// lines. Instructions that appear before any header are collected under an
/// unnamed function.
pub fn parse_disassembly(text: &str) -> Result<Vec<Function>, DisasmError> {
    let mut functions: Vec<Function> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = classify_line(raw).map_err(|message| DisasmError::Parse { line: idx + 1, message })?;
        match line {
            Line::Skip => {}
            Line::Header(name) => {
                let repeated = functions
                    .last()
                    .is_some_and(|f| f.name == name && f.instructions.is_empty());
                if !repeated {
                    functions.push(Function {
                        name,
                        instructions: Vec::new(),
                    });
                }
            }
            Line::Instruction(instr) => {
                if functions.is_empty() {
                    functions.push(Function {
                        name: String::new(),
                        instructions: Vec::new(),
                    });
                }
                functions.last_mut().unwrap().instructions.push(instr);
            }
        }
    }
    if functions.is_empty() {
        return Err(DisasmError::EmptyInput("no functions found"));
    }
    Ok(functions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn resource_report_basic() {
        let text = "ptxas info    : Compiling entry function '_Z4ataxPfS_' for 'sm_35'\n\
                    ptxas info    : Used 27 registers, 344 bytes cmem[0]\n";
        let ks = parse_resource_report(text).unwrap();
        assert_eq!(ks.len(), 1);
        let k = &ks[0];
        assert_eq!(k.entry_name, "_Z4ataxPfS_");
        assert_eq!(k.registers_per_thread, 27);
        assert_eq!(k.static_shared_mem, 0);
        assert_eq!(k.const_mem_banks, vec![(0, 344)]);
        assert_eq!(k.target_cc, Some(ComputeCapability::new(3, 5)));
    }

    #[test]
    fn resource_report_smem_and_spills() {
        let text = "\
ptxas info    : 0 bytes gmem
ptxas info    : Compiling entry function 'bicg' for 'sm_20'
ptxas info    : Function properties for bicg
    8 bytes stack frame, 4 bytes spill stores, 12 bytes spill loads
ptxas info    : Used 21 registers, 6144 bytes smem, 48 bytes cmem[0], 4 bytes cmem[16]
ptxas info    : Compiling entry function 'other' for 'sm_52'
ptxas info    : Function properties for other
    0 bytes stack frame, 0 bytes spill stores, 0 bytes spill loads
ptxas info    : Used 30 registers, used 1 barriers, 320 bytes cmem[0]
";
        let ks = parse_resource_report(text).unwrap();
        assert_eq!(ks.len(), 2);
        assert_eq!((ks[0].registers_per_thread, ks[0].static_shared_mem), (21, 6144));
        assert_eq!((ks[0].stack_frame, ks[0].spill_stores, ks[0].spill_loads), (8, 4, 12));
        assert_eq!(ks[0].const_mem_banks, vec![(0, 48), (16, 4)]);
        assert_eq!(ks[0].target_cc, Some(ComputeCapability::new(2, 0)));
        assert_eq!(ks[1].registers_per_thread, 30);
        assert_eq!(ks[1].target_cc, Some(ComputeCapability::new(5, 2)));
    }

    #[test]
    fn resource_report_errors() {
        assert_eq!(parse_resource_report(""), Err(DisasmError::EmptyInput("no `Compiling entry function` stanza found")));
        let bad = "ptxas info : Compiling entry function 'k' for 'sm_35'\nptxas info : Used many registers\n";
        assert!(matches!(parse_resource_report(bad), Err(DisasmError::Parse { line: 2, .. })));
    }

    #[test]
    fn ffma_line() {
        let i = Instruction::parse("/*0050*/ FFMA R4, R2, R3, R4 ;").unwrap().unwrap();
        assert_eq!(i.opcode, "FFMA");
        assert_eq!(i.address, Some(0x50));
        assert_eq!(i.operands.len(), 4);
        assert!(i.operands.iter().all(|o| o.kind == OperandKind::Register));
        assert_eq!(i.register_operands(), 4);
        let ld = Instruction::parse("LDG.E.64 R4, [R2.64+0x10] ;").unwrap().unwrap();
        assert_eq!(ld.register_operands(), 2);
    }

    #[test]
    fn predicated_branch() {
        let i = Instruction::parse("/*0060*/ @P0 BRA 0x90 ;").unwrap().unwrap();
        assert_eq!(i.predicate.as_deref(), Some("@P0"));
        assert_eq!(i.opcode, "BRA");
        assert_eq!(i.operands.len(), 1);
        assert_eq!(i.operands[0].kind, OperandKind::Immediate);
    }

    #[test]
    fn constant_bank_operand() {
        let i = Instruction::parse("/*0008*/ MOV R1, c[0x0][0x44] ;").unwrap().unwrap();
        let kinds: Vec<_> = i.operands.iter().map(|o| o.kind).collect();
        assert_eq!(kinds, vec![OperandKind::Register, OperandKind::ConstantBank]);
    }

    #[test]
    fn operand_tags() {
        assert_eq!(OperandKind::of("R12.reuse"), OperandKind::Register);
        assert_eq!(OperandKind::of("-R2"), OperandKind::Register);
        assert_eq!(OperandKind::of("|R3|"), OperandKind::Register);
        assert_eq!(OperandKind::of("RZ"), OperandKind::Special);
        assert_eq!(OperandKind::of("P3"), OperandKind::PredicateRegister);
        assert_eq!(OperandKind::of("!P1"), OperandKind::PredicateRegister);
        assert_eq!(OperandKind::of("PT"), OperandKind::Special);
        assert_eq!(OperandKind::of("[R2+0x4]"), OperandKind::Memory);
        assert_eq!(OperandKind::of("-0.5"), OperandKind::Immediate);
        assert_eq!(OperandKind::of("0x3f800000"), OperandKind::Immediate);
        assert_eq!(OperandKind::of("SR_CTAID.X"), OperandKind::Special);
        assert_eq!(OperandKind::of("`(.L_1)"), OperandKind::Special);
    }

    #[test]
    fn modifiers_and_negated_guard() {
        let i = Instruction::parse("  /*0110*/  @!P1 F2I.S32.F32.TRUNC R0, R5 ; /* 0x5cb0000000570a00 */").unwrap().unwrap();
        assert_eq!(i.predicate.as_deref(), Some("@!P1"));
        assert_eq!(i.opcode, "F2I");
        assert_eq!(i.modifiers, vec![".S32", ".F32", ".TRUNC"]);
    }

    #[test]
    fn non_instruction_lines() {
        for line in [
            "",
            "   ",
            "/* 0x001c7c00e22007f6 */",
            "        .align 4",
            ".L_1:",
            "_Z4ataxPfS_:",
            "// comment",
            "{",
            "}",
            "code for sm_35",
            "\t\t..........",
        ] {
            assert_eq!(Instruction::parse(line), Ok(None), "{line:?}");
        }
    }

    #[test]
    fn missing_semicolon_is_error() {
        assert!(Instruction::parse("/*0060*/ EXIT").is_err());
        let text = ".section .text.k,\"ax\",@progbits\n/*0000*/ MOV R1, R2 ;\n/*0008*/ EXIT\n";
        assert!(matches!(parse_disassembly(text), Err(DisasmError::Parse { line: 3, .. })));
    }

    #[test]
    fn listing_with_headers() {
        let text = "\
\t.headerflags\t@\"EF_CUDA_SM35 EF_CUDA_PTX_SM(EF_CUDA_SM35)\"
.section\t.text._Z4ataxPfS_,\"ax\",@progbits
\t.sectioninfo\t@\"SHI_REGISTERS=27\"
        .global         _Z4ataxPfS_
_Z4ataxPfS_:
.text._Z4ataxPfS_:
        /*0008*/                   MOV R1, c[0x0][0x44];         /* 0x64c03c00089c0006 */
        /*0010*/                   S2R R0, SR_CTAID.X;           /* 0x86400000129c0002 */
                                                                 /* 0x08a0bc80c0a08cc0 */
        /*0018*/               @P0 EXIT;
.L_1:
        /*0020*/                   BRA `(.L_1);
Function : second
        /*0000*/                   EXIT ;
";
        let fs = parse_disassembly(text).unwrap();
        assert_eq!(fs.len(), 2);
        assert_eq!(fs[0].name, "_Z4ataxPfS_");
        assert_eq!(fs[0].instructions.len(), 4);
        assert_eq!(fs[1].name, "second");
        let semicolon_lines = text.lines().filter(|l| l.contains(';') && !l.trim_start().starts_with(".")).count();
        assert_eq!(fs.iter().map(|f| f.instructions.len()).sum::<usize>(), semicolon_lines);
    }

    #[test]
    fn empty_listing() {
        assert_eq!(parse_disassembly(""), Err(DisasmError::EmptyInput("no functions found")));
        assert_eq!(parse_disassembly("// nothing\n\n"), Err(DisasmError::EmptyInput("no functions found")));
    }

    fn operand_strategy() -> impl Strategy<Value = String> {
        prop_oneof![
            (0u32..256).prop_map(|r| format!("R{r}")),
            (0u32..8).prop_map(|p| format!("P{p}")),
            (0u32..4096).prop_map(|x| format!("0x{x:x}")),
            (0u32..4, 0u32..512).prop_map(|(b, o)| format!("c[0x{b:x}][0x{o:x}]")),
            (0u32..256, 0u32..64).prop_map(|(r, o)| format!("[R{r}+0x{o:x}]")),
            Just("RZ".to_string()),
            Just("SR_TID.X".to_string()),
            Just("-R7".to_string()),
        ]
    }

    fn instruction_strategy() -> impl Strategy<Value = Instruction> {
        (
            proptest::option::of(0u64..0x10000),
            proptest::option::of(prop_oneof![Just("@P0"), Just("@!P1"), Just("@PT")]),
            "[A-Z][A-Z0-9]{0,6}",
            proptest::collection::vec("[A-Z0-9_]{1,5}", 0..3),
            proptest::collection::vec(operand_strategy(), 0..5),
        )
            .prop_map(|(address, predicate, opcode, modifiers, operands)| Instruction {
                address,
                predicate: predicate.map(str::to_string),
                opcode,
                modifiers: modifiers.into_iter().map(|m| format!(".{m}")).collect(),
                operands: operands.into_iter().map(Operand::new).collect(),
            })
    }

    proptest! {
        #[test]
        fn display_then_parse_is_identity(instr in instruction_strategy()) {
            let text = instr.to_string();
            prop_assert_eq!(Instruction::parse(&text).unwrap(), Some(instr));
        }

        #[test]
        fn never_panics(text in "\\PC*") {
            let _ = parse_disassembly(&text);
            let _ = parse_resource_report(&text);
        }
    }
}
