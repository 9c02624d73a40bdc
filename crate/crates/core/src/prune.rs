//! Autotuning parameter grids and static search-space pruning.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::occupancy::SuggestionReport;

/// Intensities above this favour the larger half of the suggested block
/// sizes; at or below it, the smaller half.
pub const INTENSITY_THRESHOLD: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PruneError {
    #[error("none of the suggested block sizes {suggested:?} are in the tuning space")]
    NoCandidates { suggested: Vec<u32> },
    #[error("intensity must not be NaN")]
    InvalidIntensity,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid tuning space: {0}")]
    Invalid(String),
}

/// A user-supplied dimension beyond the five standard ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtraParam {
    pub name: String,
    pub values: Vec<i64>,
}

/// Cartesian grid of tuning parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TuningSpace {
    /// Threads per block.
    pub tc: Vec<u32>,
    /// Block counts.
    pub bc: Vec<u32>,
    /// Loop unroll factors.
    pub uif: Vec<u32>,
    /// Preferred L1 size in KB.
    pub pl: Vec<u32>,
    pub cflags: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra: Vec<ExtraParam>,
}

impl Default for TuningSpace {
    fn default() -> Self {
        TuningSpace {
            tc: (32..=1024).step_by(32).collect(),
            bc: (24..=192).step_by(24).collect(),
            uif: (1..=5).collect(),
            pl: vec![16, 48],
            cflags: vec![String::new(), "-use_fast_math".to_string()],
            extra: Vec::new(),
        }
    }
}

fn check_distinct<T: std::hash::Hash + Eq + fmt::Debug>(name: &str, values: &[T]) -> Result<(), PruneError> {
    if values.is_empty() {
        return Err(PruneError::Invalid(format!("{name} has no values")));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = values.iter().find(|v| !seen.insert(*v)) {
        return Err(PruneError::Invalid(format!("{name} repeats {dup:?}")));
    }
    Ok(())
}

impl TuningSpace {
    pub fn validate(&self) -> Result<(), PruneError> {
        check_distinct("TC", &self.tc)?;
        check_distinct("BC", &self.bc)?;
        check_distinct("UIF", &self.uif)?;
        check_distinct("PL", &self.pl)?;
        check_distinct("CFLAGS", &self.cflags)?;
        for p in &self.extra {
            check_distinct(&p.name, &p.values)?;
        }
        if let Some(bad) = self.tc.iter().find(|&&t| t == 0 || t % 32 != 0) {
            return Err(PruneError::Invalid(format!("TC value {bad} is not a positive multiple of 32")));
        }
        Ok(())
    }

    /// Number of points in the grid.
    pub fn grid_size(&self) -> u64 {
        self.radices().iter().map(|&n| n as u64).product()
    }

    /// Grid size without the thread dimension.
    fn other_dims(&self) -> u64 {
        self.radices()[1..].iter().map(|&n| n as u64).product()
    }

    fn radices(&self) -> Vec<usize> {
        let mut r = vec![self.tc.len(), self.bc.len(), self.uif.len(), self.pl.len(), self.cflags.len()];
        r.extend(self.extra.iter().map(|p| p.values.len()));
        r
    }

    /// All grid points in lexicographic order over (TC, BC, UIF, PL, CFLAGS,
    /// extra...).
    pub fn enumerate(&self) -> Variants<'_> {
        Variants {
            space: self,
            radices: self.radices(),
            next: 0,
            len: self.grid_size(),
        }
    }

    pub fn with_tc(&self, tc: Vec<u32>) -> TuningSpace {
        TuningSpace { tc, ..self.clone() }
    }

    /// Parses a tuning specification made of `param NAME[] = ...;` lines.
    /// Values are either `range(start, stop[, step])` (stop excluded) or a
    /// bracketed list of integers or quoted strings. Other lines are ignored.
    /// Standard dimensions that are not mentioned keep their defaults.
    pub fn parse(text: &str) -> Result<TuningSpace, PruneError> {
        let mut space = TuningSpace::default();
        let mut seen = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let t = raw.trim();
            let Some(decl) = t.strip_prefix("param").filter(|r| r.starts_with(char::is_whitespace)) else {
                continue;
            };
            let err = |message: String| PruneError::Parse { line, message };
            let decl = decl.trim().trim_end_matches(';').trim();
            let (name, value) = decl
                .split_once('=')
                .ok_or_else(|| err(format!("expected `param NAME[] = VALUE`, got `{t}`")))?;
            let name = name.trim().trim_end_matches("[]").trim();
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(err(format!("invalid parameter name `{name}`")));
            }
            if !seen.insert(name.to_string()) {
                return Err(err(format!("parameter {name} declared twice")));
            }
            let values = parse_values(value.trim()).map_err(err)?;
            let ints = || -> Result<Vec<i64>, PruneError> {
                values
                    .iter()
                    .map(|v| match v {
                        Value::Int(i) => Ok(*i),
                        Value::Str(s) => Err(err(format!("{name} expects integers, got '{s}'"))),
                    })
                    .collect()
            };
            let unsigned = || -> Result<Vec<u32>, PruneError> {
                ints()?
                    .into_iter()
                    .map(|i| u32::try_from(i).map_err(|_| err(format!("{name} value {i} out of range"))))
                    .collect()
            };
            match name {
                "TC" => space.tc = unsigned()?,
                "BC" => space.bc = unsigned()?,
                "UIF" => space.uif = unsigned()?,
                "PL" => space.pl = unsigned()?,
                "CFLAGS" => {
                    space.cflags = values
                        .iter()
                        .map(|v| match v {
                            Value::Str(s) => Ok(s.clone()),
                            Value::Int(i) => Err(err(format!("CFLAGS expects strings, got {i}"))),
                        })
                        .collect::<Result<_, _>>()?
                }
                _ => space.extra.push(ExtraParam {
                    name: name.to_string(),
                    values: ints()?,
                }),
            }
        }
        space.validate()?;
        Ok(space)
    }
}

impl fmt::Display for TuningSpace {
    /// Writes the space back in the `param` syntax accepted by
    /// [`TuningSpace::parse`].
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let list = |v: &mut dyn Iterator<Item = String>| v.collect::<Vec<_>>().join(", ");
        writeln!(f, "param TC[] = [{}];", list(&mut self.tc.iter().map(u32::to_string)))?;
        writeln!(f, "param BC[] = [{}];", list(&mut self.bc.iter().map(u32::to_string)))?;
        writeln!(f, "param UIF[] = [{}];", list(&mut self.uif.iter().map(u32::to_string)))?;
        writeln!(f, "param PL[] = [{}];", list(&mut self.pl.iter().map(u32::to_string)))?;
        for p in &self.extra {
            writeln!(f, "param {}[] = [{}];", p.name, list(&mut p.values.iter().map(i64::to_string)))?;
        }
        writeln!(f, "param CFLAGS[] = [{}];", list(&mut self.cflags.iter().map(|s| format!("'{s}'"))))
    }
}

enum Value {
    Int(i64),
    Str(String),
}

fn parse_int(s: &str) -> Result<i64, String> {
    s.trim().parse().map_err(|_| format!("expected an integer, got `{}`", s.trim()))
}

fn parse_values(text: &str) -> Result<Vec<Value>, String> {
    if let Some(args) = text.strip_prefix("range(").and_then(|r| r.strip_suffix(')')) {
        let args: Vec<i64> = args.split(',').map(parse_int).collect::<Result<_, _>>()?;
        let (start, stop, step) = match args[..] {
            [stop] => (0, stop, 1),
            [start, stop] => (start, stop, 1),
            [start, stop, step] => (start, stop, step),
            _ => return Err("range takes one to three arguments".to_string()),
        };
        if step <= 0 {
            return Err(format!("range step must be positive, got {step}"));
        }
        let values: Vec<Value> = (start..stop).step_by(step as usize).map(Value::Int).collect();
        if values.is_empty() {
            return Err(format!("range({start}, {stop}, {step}) is empty"));
        }
        return Ok(values);
    }
    let inner = text
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .ok_or_else(|| format!("expected `range(...)` or `[...]`, got `{text}`"))?;
    let mut values = Vec::new();
    let mut rest = inner.trim();
    while !rest.is_empty() {
        let (value, tail) = if let Some(q) = rest.chars().next().filter(|c| *c == '\'' || *c == '"') {
            let body = &rest[1..];
            let end = body.find(q).ok_or_else(|| format!("unterminated string in `{inner}`"))?;
            (Value::Str(body[..end].to_string()), body[end + 1..].trim_start())
        } else {
            let end = rest.find(',').unwrap_or(rest.len());
            (Value::Int(parse_int(&rest[..end])?), &rest[end..])
        };
        values.push(value);
        rest = match tail.strip_prefix(',') {
            Some(r) => r.trim_start(),
            None if tail.is_empty() => tail,
            None => return Err(format!("expected `,` before `{tail}`")),
        };
    }
    Ok(values)
}

/// One grid point.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Variant<'a> {
    pub tc: u32,
    pub bc: u32,
    pub uif: u32,
    pub pl: u32,
    pub cflags: &'a str,
    pub extra: Vec<(&'a str, i64)>,
}

/// Restartable iterator over a [`TuningSpace`].
#[derive(Debug, Clone)]
pub struct Variants<'a> {
    space: &'a TuningSpace,
    radices: Vec<usize>,
    next: u64,
    len: u64,
}

impl<'a> Variants<'a> {
    fn at(&self, mut index: u64) -> Variant<'a> {
        let mut digits = vec![0usize; self.radices.len()];
        for (digit, &radix) in digits.iter_mut().zip(&self.radices).rev() {
            *digit = (index % radix as u64) as usize;
            index /= radix as u64;
        }
        let s = self.space;
        Variant {
            tc: s.tc[digits[0]],
            bc: s.bc[digits[1]],
            uif: s.uif[digits[2]],
            pl: s.pl[digits[3]],
            cflags: &s.cflags[digits[4]],
            extra: s
                .extra
                .iter()
                .zip(&digits[5..])
                .map(|(p, &d)| (p.name.as_str(), p.values[d]))
                .collect(),
        }
    }
}

impl<'a> Iterator for Variants<'a> {
    type Item = Variant<'a>;

    fn next(&mut self) -> Option<Variant<'a>> {
        if self.next >= self.len {
            return None;
        }
        let v = self.at(self.next);
        self.next += 1;
        Some(v)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.len - self.next) as usize;
        (left, Some(left))
    }

    fn nth(&mut self, n: usize) -> Option<Variant<'a>> {
        self.next = self.next.saturating_add(n as u64).min(self.len);
        self.next()
    }
}

impl ExactSizeIterator for Variants<'_> {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneRule {
    StaticOnly,
    StaticPlusIntensity,
}

impl fmt::Display for PruneRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PruneRule::StaticOnly => "static",
            PruneRule::StaticPlusIntensity => "intensity",
        })
    }
}

impl FromStr for PruneRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "static" => Ok(PruneRule::StaticOnly),
            "intensity" => Ok(PruneRule::StaticPlusIntensity),
            _ => Err(format!("unknown rule `{s}` (expected `static` or `intensity`)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub original_size: u64,
    pub pruned_size: u64,
    pub kept_tc: Vec<u32>,
    pub rule_applied: PruneRule,
    pub reduction: f64,
    /// Intensity that drove the rule, when one was applied. Always the
    /// static estimate from the instruction mix.
    #[serde(default, with = "crate::report::opt_ratio")]
    pub intensity: Option<f64>,
}

impl PruneReport {
    fn new(space: &TuningSpace, kept_tc: Vec<u32>, rule_applied: PruneRule, intensity: Option<f64>) -> Self {
        let original_size = space.grid_size();
        let pruned_size = kept_tc.len() as u64 * space.other_dims();
        PruneReport {
            original_size,
            pruned_size,
            kept_tc,
            rule_applied,
            reduction: 1.0 - pruned_size as f64 / original_size as f64,
            intensity,
        }
    }
}

/// Keeps only the thread counts that were suggested.
pub fn static_prune(space: &TuningSpace, suggestion: &SuggestionReport) -> Result<PruneReport, PruneError> {
    let kept: Vec<u32> = space
        .tc
        .iter()
        .copied()
        .filter(|t| suggestion.thread_candidates.contains(t))
        .collect();
    if kept.is_empty() {
        return Err(PruneError::NoCandidates {
            suggested: suggestion.thread_candidates.clone(),
        });
    }
    Ok(PruneReport::new(space, kept, PruneRule::StaticOnly, None))
}

/// Static pruning followed by the intensity rule: keep the larger half of
/// the surviving thread counts for compute-heavy kernels and the smaller
/// half otherwise (odd counts round the half up).
pub fn rule_prune(space: &TuningSpace, suggestion: &SuggestionReport, intensity: f64) -> Result<PruneReport, PruneError> {
    if intensity.is_nan() {
        return Err(PruneError::InvalidIntensity);
    }
    let mut kept = static_prune(space, suggestion)?.kept_tc;
    kept.sort_unstable();
    let half = kept.len().div_ceil(2);
    let kept = if intensity > INTENSITY_THRESHOLD {
        kept.split_off(kept.len() - half)
    } else {
        kept.truncate(half);
        kept
    };
    Ok(PruneReport::new(space, kept, PruneRule::StaticPlusIntensity, Some(intensity)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::occupancy::Mode;
    use proptest::prelude::*;

    fn with_candidates(candidates: &[u32]) -> SuggestionReport {
        SuggestionReport {
            thread_candidates: candidates.to_vec(),
            regs_used: 0,
            reg_headroom: 0,
            smem_budget: 0,
            best_occupancy: 1.0,
            best_threads: candidates[0],
            best_blocks: 1,
            best_warps: 1,
            mode: Mode::Corrected,
        }
    }

    const KEPLER: [u32; 4] = [128, 256, 512, 1024];
    const FERMI: [u32; 5] = [192, 256, 384, 512, 768];

    #[test]
    fn grid_sizes() {
        let space = TuningSpace::default();
        assert_eq!(space.grid_size(), 5120);
        assert_eq!(space.with_tc(vec![128, 256, 512, 1024]).grid_size(), 640);
        let single = TuningSpace {
            tc: vec![64],
            bc: vec![24],
            uif: vec![1],
            pl: vec![16],
            cflags: vec![String::new()],
            extra: vec![],
        };
        assert_eq!(single.grid_size(), 1);
        assert_eq!(single.enumerate().count(), 1);
    }

    #[test]
    fn static_pruning() {
        let space = TuningSpace::default();
        let r = static_prune(&space, &with_candidates(&KEPLER)).unwrap();
        assert_eq!((r.pruned_size, r.reduction), (640, 0.875));
        let r = static_prune(&space, &with_candidates(&FERMI)).unwrap();
        assert_eq!((r.pruned_size, r.reduction), (800, 0.84375));
        let r = static_prune(&space, &with_candidates(&space.tc.clone())).unwrap();
        assert_eq!(r.reduction, 0.0);
        assert!(matches!(static_prune(&space, &with_candidates(&[48])), Err(PruneError::NoCandidates { .. })));
    }

    #[test]
    fn intensity_pruning() {
        let space = TuningSpace::default();
        let r = rule_prune(&space, &with_candidates(&KEPLER), 12.7).unwrap();
        assert_eq!((r.kept_tc.as_slice(), r.pruned_size, r.reduction), (&[512, 1024][..], 320, 0.9375));
        let r = rule_prune(&space, &with_candidates(&KEPLER), 1.8).unwrap();
        assert_eq!(r.kept_tc, [128, 256]);
        let r = rule_prune(&space, &with_candidates(&KEPLER), 4.0).unwrap();
        assert_eq!(r.kept_tc, [128, 256]);
        let r = rule_prune(&space, &with_candidates(&FERMI), f64::INFINITY).unwrap();
        assert_eq!(r.kept_tc, [384, 512, 768]);
        for intensity in [0.5, 9.0] {
            assert_eq!(rule_prune(&space, &with_candidates(&[256]), intensity).unwrap().kept_tc, [256]);
        }
        assert_eq!(rule_prune(&space, &with_candidates(&KEPLER), f64::NAN), Err(PruneError::InvalidIntensity));
    }

    #[test]
    fn enumeration_order() {
        let space = TuningSpace::default();
        let mut it = space.enumerate();
        assert_eq!(it.len(), 5120);
        let first = it.next().unwrap();
        assert_eq!((first.tc, first.bc, first.uif, first.pl, first.cflags), (32, 24, 1, 16, ""));
        let second = it.next().unwrap();
        assert_eq!(second.cflags, "-use_fast_math");
        let last = space.enumerate().last().unwrap();
        assert_eq!((last.tc, last.bc, last.uif, last.pl, last.cflags), (1024, 192, 5, 48, "-use_fast_math"));
        let all: HashSet<_> = space.enumerate().collect();
        assert_eq!(all.len(), 5120);
        assert_eq!(space.enumerate().nth(2).unwrap(), space.enumerate().collect::<Vec<_>>()[2]);
    }

    #[test]
    fn parses_tuning_block() {
        let text = r#"
/*@ begin PerfTuning (
  def performance_params {
    param TC[]  = range(32,1025,32);
    param BC[]  = range(24,193,24);
    param UIF[] = range(1,6);
    param PL[]  = [16,48];
    param SC[]  = range(1,6);
    param CFLAGS[] = ['', '-use_fast_math'];
  }
) @*/
"#;
        let space = TuningSpace::parse(text).unwrap();
        assert_eq!(space.tc.len(), 32);
        assert_eq!(space.bc, [24, 48, 72, 96, 120, 144, 168, 192]);
        assert_eq!(space.uif, [1, 2, 3, 4, 5]);
        assert_eq!(space.extra, vec![ExtraParam { name: "SC".into(), values: vec![1, 2, 3, 4, 5] }]);
        assert_eq!(space.grid_size(), 5120 * 5);
        let without_sc = TuningSpace { extra: vec![], ..space.clone() };
        assert_eq!(without_sc, TuningSpace::default());
        assert_eq!(TuningSpace::parse(&space.to_string()).unwrap(), space);
        let r = static_prune(&space, &with_candidates(&KEPLER)).unwrap();
        assert_eq!(r.reduction, 0.875);
    }

    #[test]
    fn parse_errors() {
        let cases = [
            ("param TC[] = range(32,1025,0);", 1),
            ("\nparam TC[] = [32, 48];", 0),
            ("\nparam TC[] = [32, x];", 2),
            ("param TC[] = [64, 64];", 0),
            ("param TC[] = [];", 0),
            ("param CFLAGS[] = [1];", 1),
            ("param UIF[] = ['a'];", 1),
            ("param TC[] = 32;", 1),
            ("param TC[] = [32];\nparam TC[] = [64];", 2),
            ("param X[] = ['unterminated];", 1),
        ];
        for (text, line) in cases {
            match TuningSpace::parse(text) {
                Err(PruneError::Parse { line: l, .. }) => assert_eq!(l, line, "{text}"),
                Err(PruneError::Invalid(_)) => assert_eq!(line, 0, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn singleton_tc_space() {
        let space = TuningSpace::parse("param TC[] = [256];").unwrap();
        let r = static_prune(&space, &with_candidates(&KEPLER)).unwrap();
        assert_eq!((r.original_size, r.pruned_size, r.reduction), (160, 160, 0.0));
    }

    fn candidates_strategy() -> impl Strategy<Value = Vec<u32>> {
        proptest::collection::btree_set(1u32..=32, 1..12).prop_map(|s| s.into_iter().map(|w| w * 32).collect())
    }

    proptest! {
        #[test]
        fn pruning_invariants(candidates in candidates_strategy(), intensity in 0.0f64..20.0) {
            let space = TuningSpace::default();
            let sugg = with_candidates(&candidates);
            let st = static_prune(&space, &sugg).unwrap();
            let ru = rule_prune(&space, &sugg, intensity).unwrap();
            prop_assert!(st.kept_tc.iter().all(|t| space.tc.contains(t)));
            prop_assert!(ru.kept_tc.iter().all(|t| st.kept_tc.contains(t)));
            prop_assert_eq!(ru.kept_tc.len(), st.kept_tc.len().div_ceil(2));
            for r in [&st, &ru] {
                prop_assert!(r.reduction >= 0.0 && r.reduction < 1.0);
                prop_assert!(r.pruned_size >= 8 * 5 * 2 * 2);
                prop_assert_eq!(r.pruned_size, space.with_tc(r.kept_tc.clone()).grid_size());
                prop_assert_eq!(r.reduction, 1.0 - r.pruned_size as f64 / r.original_size as f64);
            }
        }
    }
}
