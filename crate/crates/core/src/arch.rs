//! GPU architecture descriptors.
//!
//! Each [`ArchSpec`] carries the per-generation hardware limits consumed by
//! the occupancy model. Four generations ship built in; more can be loaded
//! from a TOML file with one section per architecture:
//!
//! ```toml
//! [kepler-k20]
//! family = "Kepler"
//! compute_capability = "3.5"
//! multiprocessors = 13
//! warp_size = 32
//! max_threads_per_mp = 2048
//! max_threads_per_block = 1024
//! max_blocks_per_mp = 16
//! max_warps_per_mp = 64
//! register_file_size = 65536
//! register_alloc_granularity = 256
//! max_regs_per_thread = 255
//! shared_mem_per_block = 49152
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ArchError {
    #[error("unknown architecture `{name}` (known: {})", known.join(", "))]
    NotFound { name: String, known: Vec<String> },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("architecture `{arch}`: invalid `{field}`: {reason}")]
    Invalid {
        arch: String,
        field: &'static str,
        reason: String,
    },
}

/// GPU generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    Fermi,
    Kepler,
    Maxwell,
    Pascal,
    Other,
}

impl Family {
    pub const BUILTIN: [Family; 4] = [Family::Fermi, Family::Kepler, Family::Maxwell, Family::Pascal];
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fermi" => Ok(Family::Fermi),
            "kepler" => Ok(Family::Kepler),
            "maxwell" => Ok(Family::Maxwell),
            "pascal" => Ok(Family::Pascal),
            "other" => Ok(Family::Other),
            _ => Err(format!("unknown family `{s}`")),
        }
    }
}

/// A compute capability such as `3.5`, kept as integers so that it compares
/// and prints exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ComputeCapability {
    pub major: u32,
    pub minor: u32,
}

impl ComputeCapability {
    pub const fn new(major: u32, minor: u32) -> Self {
        ComputeCapability { major, minor }
    }

    /// Parses an `sm_XY` target name (`sm_35` is 3.5, `sm_100` is 10.0).
    pub fn from_sm(target: &str) -> Option<Self> {
        let digits = target.strip_prefix("sm_")?;
        let digits: String = digits.chars().take_while(|c| c.is_ascii_digit()).collect();
        if digits.len() < 2 {
            return None;
        }
        let (major, minor) = digits.split_at(digits.len() - 1);
        Some(ComputeCapability::new(major.parse().ok()?, minor.parse().ok()?))
    }
}

impl fmt::Display for ComputeCapability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.major, self.minor)
    }
}

impl FromStr for ComputeCapability {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Some(cc) = ComputeCapability::from_sm(s) {
            return Ok(cc);
        }
        let (major, minor) = s.split_once('.').unwrap_or((s, "0"));
        match (major.parse(), minor.parse()) {
            (Ok(major), Ok(minor)) if minor < 10 => Ok(ComputeCapability::new(major, minor)),
            _ => Err(format!("invalid compute capability `{s}`")),
        }
    }
}

impl Serialize for ComputeCapability {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ComputeCapability {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Int(u32),
            Float(f64),
        }
        let text = match Raw::deserialize(deserializer)? {
            Raw::Text(s) => s,
            Raw::Int(i) => i.to_string(),
            // one decimal digit is all a capability ever carries
            Raw::Float(x) => format!("{x:.1}"),
        };
        text.parse().map_err(serde::de::Error::custom)
    }
}

/// Table-only facts that no formula consumes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ArchInfo {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_mem_mb: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cores_per_mp: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gpu_clock_mhz: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mem_clock_mhz: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l2_cache_mb: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constant_mem: Option<u32>,
}

/// Hardware limits of one GPU generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    pub family: Family,
    pub compute_capability: ComputeCapability,
    pub multiprocessors: u32,
    pub warp_size: u32,
    pub max_threads_per_mp: u32,
    pub max_threads_per_block: u32,
    pub max_blocks_per_mp: u32,
    pub max_warps_per_mp: u32,
    /// 32-bit registers per multiprocessor.
    pub register_file_size: u32,
    /// Registers are handed out in chunks of this size.
    pub register_alloc_granularity: u32,
    pub max_regs_per_thread: u32,
    /// Bytes of shared memory a block may use. The multiprocessor total is
    /// taken to be the same figure.
    pub shared_mem_per_block: u32,
    #[serde(default)]
    pub info: ArchInfo,
}

impl ArchSpec {
    /// Warps needed to hold `threads` threads.
    pub fn warps_for(&self, threads: u32) -> u32 {
        threads.div_ceil(self.warp_size)
    }

    pub fn validate(&self) -> Result<(), ArchError> {
        let invalid = |field: &'static str, reason: String| ArchError::Invalid {
            arch: self.name.clone(),
            field,
            reason,
        };
        if self.name.trim().is_empty() {
            return Err(invalid("name", "must not be empty".into()));
        }
        let counts = [
            ("multiprocessors", self.multiprocessors),
            ("warp_size", self.warp_size),
            ("max_threads_per_mp", self.max_threads_per_mp),
            ("max_threads_per_block", self.max_threads_per_block),
            ("max_blocks_per_mp", self.max_blocks_per_mp),
            ("max_warps_per_mp", self.max_warps_per_mp),
            ("register_file_size", self.register_file_size),
            ("register_alloc_granularity", self.register_alloc_granularity),
            ("max_regs_per_thread", self.max_regs_per_thread),
            ("shared_mem_per_block", self.shared_mem_per_block),
        ];
        for (field, value) in counts {
            if value == 0 {
                return Err(invalid(field, "must be strictly positive".into()));
            }
        }
        if !self.max_threads_per_block.is_multiple_of(self.warp_size) {
            return Err(invalid(
                "max_threads_per_block",
                format!("{} is not a multiple of warp_size {}", self.max_threads_per_block, self.warp_size),
            ));
        }
        if u64::from(self.max_warps_per_mp) * u64::from(self.warp_size) != u64::from(self.max_threads_per_mp) {
            return Err(invalid(
                "max_warps_per_mp",
                format!(
                    "{} warps x {} threads != max_threads_per_mp {}",
                    self.max_warps_per_mp, self.warp_size, self.max_threads_per_mp
                ),
            ));
        }
        if self.max_regs_per_thread > self.register_file_size {
            return Err(invalid(
                "max_regs_per_thread",
                format!("{} exceeds register_file_size {}", self.max_regs_per_thread, self.register_file_size),
            ));
        }
        Ok(())
    }
}

/// The built-in descriptor for one of the four shipped families.
pub fn builtin_arch(family: Family) -> Result<ArchSpec, ArchError> {
    let (name, cc, mp, threads_mp, blocks_mp, warps_mp, regs, granule, regs_thread, info) = match family {
        Family::Fermi => (
            "fermi-m2050",
            ComputeCapability::new(2, 0),
            14,
            1536,
            8,
            48,
            32768,
            64,
            63,
            (3072, 32, 1147, 1546, 0.786),
        ),
        Family::Kepler => (
            "kepler-k20",
            ComputeCapability::new(3, 5),
            13,
            2048,
            16,
            64,
            65536,
            256,
            255,
            (11520, 192, 824, 2505, 1.572),
        ),
        Family::Maxwell => (
            "maxwell-m40",
            ComputeCapability::new(5, 2),
            24,
            2048,
            32,
            64,
            65536,
            256,
            255,
            (12288, 128, 1140, 5000, 3.146),
        ),
        Family::Pascal => (
            "pascal-p100",
            ComputeCapability::new(6, 0),
            56,
            2048,
            32,
            64,
            65536,
            256,
            255,
            (17066, 64, 405, 715, 4.194),
        ),
        Family::Other => {
            return Err(ArchError::NotFound {
                name: family.to_string(),
                known: Family::BUILTIN.iter().map(|f| f.to_string()).collect(),
            })
        }
    };
    let (global_mem_mb, cores_per_mp, gpu_clock_mhz, mem_clock_mhz, l2_cache_mb) = info;
    Ok(ArchSpec {
        name: name.to_string(),
        family,
        compute_capability: cc,
        multiprocessors: mp,
        warp_size: 32,
        max_threads_per_mp: threads_mp,
        max_threads_per_block: 1024,
        max_blocks_per_mp: blocks_mp,
        max_warps_per_mp: warps_mp,
        register_file_size: regs,
        register_alloc_granularity: granule,
        max_regs_per_thread: regs_thread,
        shared_mem_per_block: 49152,
        info: ArchInfo {
            global_mem_mb: Some(global_mem_mb),
            cores_per_mp: Some(cores_per_mp),
            gpu_clock_mhz: Some(gpu_clock_mhz),
            mem_clock_mhz: Some(mem_clock_mhz),
            l2_cache_mb: Some(l2_cache_mb),
            constant_mem: Some(65536),
        },
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchEntry {
    family: String,
    compute_capability: ComputeCapability,
    multiprocessors: u32,
    warp_size: u32,
    max_threads_per_mp: u32,
    max_threads_per_block: u32,
    max_blocks_per_mp: u32,
    max_warps_per_mp: u32,
    register_file_size: u32,
    register_alloc_granularity: u32,
    max_regs_per_thread: u32,
    shared_mem_per_block: u32,
    global_mem_mb: Option<u32>,
    cores_per_mp: Option<u32>,
    gpu_clock_mhz: Option<u32>,
    mem_clock_mhz: Option<u32>,
    l2_cache_mb: Option<f64>,
    constant_mem: Option<u32>,
}

/// Parses an architecture file. Every entry is validated before anything
/// is returned.
pub fn parse_arch_file(text: &str) -> Result<Vec<ArchSpec>, ArchError> {
    let sections: IndexMap<String, ArchEntry> = toml::from_str(text).map_err(|e| {
        let line = e
            .span()
            .map(|span| text[..span.start.min(text.len())].matches('\n').count() + 1)
            .unwrap_or(0);
        ArchError::Parse {
            line,
            message: e.message().to_string(),
        }
    })?;
    let mut specs = Vec::with_capacity(sections.len());
    for (name, entry) in sections {
        let family = entry.family.parse().map_err(|reason| ArchError::Invalid {
            arch: name.clone(),
            field: "family",
            reason,
        })?;
        let spec = ArchSpec {
            name,
            family,
            compute_capability: entry.compute_capability,
            multiprocessors: entry.multiprocessors,
            warp_size: entry.warp_size,
            max_threads_per_mp: entry.max_threads_per_mp,
            max_threads_per_block: entry.max_threads_per_block,
            max_blocks_per_mp: entry.max_blocks_per_mp,
            max_warps_per_mp: entry.max_warps_per_mp,
            register_file_size: entry.register_file_size,
            register_alloc_granularity: entry.register_alloc_granularity,
            max_regs_per_thread: entry.max_regs_per_thread,
            shared_mem_per_block: entry.shared_mem_per_block,
            info: ArchInfo {
                global_mem_mb: entry.global_mem_mb,
                cores_per_mp: entry.cores_per_mp,
                gpu_clock_mhz: entry.gpu_clock_mhz,
                mem_clock_mhz: entry.mem_clock_mhz,
                l2_cache_mb: entry.l2_cache_mb,
                constant_mem: entry.constant_mem,
            },
        };
        spec.validate()?;
        specs.push(spec);
    }
    Ok(specs)
}

pub fn load_arch_file(path: impl AsRef<Path>) -> Result<Vec<ArchSpec>, ArchError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ArchError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_arch_file(&text)
}

/// Built-in architectures overlaid with user-defined ones.
#[derive(Debug, Clone)]
pub struct ArchDb {
    specs: Vec<ArchSpec>,
}

impl Default for ArchDb {
    fn default() -> Self {
        ArchDb {
            specs: Family::BUILTIN
                .iter()
                .map(|&f| builtin_arch(f).expect("built-in family"))
                .collect(),
        }
    }
}

impl ArchDb {
    /// Adds `user` specs; a spec with an existing name replaces it in place.
    pub fn extend(&mut self, user: Vec<ArchSpec>) {
        for spec in user {
            match self.specs.iter_mut().find(|s| s.name == spec.name) {
                Some(slot) => *slot = spec,
                None => self.specs.push(spec),
            }
        }
    }

    pub fn specs(&self) -> &[ArchSpec] {
        &self.specs
    }

    pub fn names(&self) -> Vec<String> {
        self.specs.iter().map(|s| s.name.clone()).collect()
    }

    /// Looks up by exact name, then by family name (`kepler`), both
    /// case-insensitive.
    pub fn resolve(&self, name: &str) -> Result<&ArchSpec, ArchError> {
        let wanted = name.trim();
        self.specs
            .iter()
            .find(|s| s.name.eq_ignore_ascii_case(wanted))
            .or_else(|| {
                let family: Family = wanted.parse().ok()?;
                self.specs.iter().find(|s| s.family == family)
            })
            .ok_or_else(|| ArchError::NotFound {
                name: wanted.to_string(),
                known: self.names(),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const K20: &str = r#"
[kepler-k20]
family = "Kepler"
compute_capability = 3.5
multiprocessors = 13
warp_size = 32
max_threads_per_mp = 2048
max_threads_per_block = 1024
max_blocks_per_mp = 16
max_warps_per_mp = 64
register_file_size = 65536
register_alloc_granularity = 256
max_regs_per_thread = 255
shared_mem_per_block = 49152
global_mem_mb = 11520
cores_per_mp = 192
gpu_clock_mhz = 824
mem_clock_mhz = 2505
l2_cache_mb = 1.572
constant_mem = 65536
"#;

    #[test]
    fn kepler_matches_table() {
        let k = builtin_arch(Family::Kepler).unwrap();
        assert_eq!(k.max_blocks_per_mp, 16);
        assert_eq!(k.max_warps_per_mp, 64);
        assert_eq!(k.register_file_size, 65536);
        assert_eq!(k.register_alloc_granularity, 256);
        assert_eq!(k.max_regs_per_thread, 255);
        assert_eq!(k.shared_mem_per_block, 49152);
        assert_eq!(k.max_threads_per_block, 1024);
        assert_eq!(k.compute_capability, ComputeCapability::new(3, 5));
    }

    #[test]
    fn fermi_and_pascal_match_table() {
        let f = builtin_arch(Family::Fermi).unwrap();
        assert_eq!(
            (f.max_blocks_per_mp, f.max_warps_per_mp, f.register_file_size, f.register_alloc_granularity, f.max_regs_per_thread),
            (8, 48, 32768, 64, 63)
        );
        let p = builtin_arch(Family::Pascal).unwrap();
        assert_eq!((p.multiprocessors, p.max_warps_per_mp, p.max_blocks_per_mp), (56, 64, 32));
    }

    #[test]
    fn builtins_are_valid_and_pure() {
        for family in Family::BUILTIN {
            let a = builtin_arch(family).unwrap();
            a.validate().unwrap();
            assert_eq!(a, builtin_arch(family).unwrap());
        }
        assert!(matches!(builtin_arch(Family::Other), Err(ArchError::NotFound { .. })));
    }

    #[test]
    fn file_round_trips_builtin() {
        let specs = parse_arch_file(K20).unwrap();
        assert_eq!(specs, vec![builtin_arch(Family::Kepler).unwrap()]);
    }

    #[test]
    fn zero_warp_size_is_rejected_by_name() {
        let text = K20.replace("warp_size = 32", "warp_size = 0");
        let err = parse_arch_file(&text).unwrap_err();
        assert!(matches!(err, ArchError::Invalid { field: "warp_size", .. }), "{err}");
    }

    #[test]
    fn inconsistent_warp_totals_are_rejected() {
        let text = K20.replace("max_warps_per_mp = 64", "max_warps_per_mp = 48");
        let err = parse_arch_file(&text).unwrap_err();
        assert!(matches!(err, ArchError::Invalid { field: "max_warps_per_mp", .. }));
    }

    #[test]
    fn empty_file_is_empty_list() {
        assert!(parse_arch_file("").unwrap().is_empty());
        assert!(parse_arch_file("# nothing here\n").unwrap().is_empty());
    }

    #[test]
    fn syntax_error_reports_line() {
        let err = parse_arch_file("[a]\nfamily = \"Kepler\"\nwarp_size = = 3\n").unwrap_err();
        match err {
            ArchError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn loading_is_atomic() {
        let bad = format!("{K20}\n{}", K20.replace("[kepler-k20]", "[bad]").replace("warp_size = 32", "warp_size = 0"));
        assert!(parse_arch_file(&bad).is_err());
    }

    #[test]
    fn user_spec_shadows_builtin() {
        let mut spec = builtin_arch(Family::Kepler).unwrap();
        spec.multiprocessors = 15;
        let mut db = ArchDb::default();
        db.extend(vec![spec]);
        assert_eq!(db.resolve("kepler-k20").unwrap().multiprocessors, 15);
        assert_eq!(db.resolve("KEPLER").unwrap().multiprocessors, 15);
        assert_eq!(db.specs().len(), 4);
        let err = db.resolve("volta").unwrap_err().to_string();
        assert!(err.contains("fermi-m2050") && err.contains("pascal-p100"), "{err}");
    }

    #[test]
    fn capability_parsing() {
        assert_eq!(ComputeCapability::from_sm("sm_35"), Some(ComputeCapability::new(3, 5)));
        assert_eq!(ComputeCapability::from_sm("sm_100"), Some(ComputeCapability::new(10, 0)));
        assert_eq!(ComputeCapability::from_sm("sm_5"), None);
        assert_eq!("5.2".parse::<ComputeCapability>().unwrap(), ComputeCapability::new(5, 2));
        assert_eq!("6".parse::<ComputeCapability>().unwrap(), ComputeCapability::new(6, 0));
        assert!("x.y".parse::<ComputeCapability>().is_err());
    }
}
