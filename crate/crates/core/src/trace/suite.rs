//! Generated bad/good scenario pairs for six memory-error classes, each
//! carrying per-mode expectation directives on the probing access.
//!
//! Bad cases overflow by `depth` bytes past the end of an object of `size`
//! bytes, underflow by `depth` bytes before it, or touch it after `free`.
//! Redzones are two tokens wide so every depth in 1..=16 lands in poison.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::mode::Mode;
use crate::oracle::AccessClass;
use crate::runtime::{padding_for, RuntimeConfig};
use crate::token::TOKEN_BYTES;

use super::exec::{execute_trace, ExecConfig, ExecError, Outcome};
use super::parse::{Expectation, Expected, Instruction, TraceProgram};

pub const SUITE_REDZONE_TOKENS: usize = 2;
pub const SUITE_ARENA_SIZE: usize = 1 << 20;
pub const SIZES: std::ops::RangeInclusive<usize> = 1..=24;
pub const DEPTHS: std::ops::RangeInclusive<usize> = 1..=16;
/// Depths probed below the first object of the heap (into its guard word).
pub const GUARD_DEPTHS: std::ops::RangeInclusive<usize> = 1..=8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Cwe {
    #[serde(rename = "121")]
    StackOverflow,
    #[serde(rename = "122")]
    HeapOverflow,
    #[serde(rename = "124")]
    Underwrite,
    #[serde(rename = "126")]
    Overread,
    #[serde(rename = "127")]
    Underread,
    #[serde(rename = "416")]
    UseAfterFree,
}

impl Cwe {
    pub const ALL: [Cwe; 6] = [
        Cwe::StackOverflow,
        Cwe::HeapOverflow,
        Cwe::Underwrite,
        Cwe::Overread,
        Cwe::Underread,
        Cwe::UseAfterFree,
    ];

    pub fn number(self) -> u32 {
        match self {
            Cwe::StackOverflow => 121,
            Cwe::HeapOverflow => 122,
            Cwe::Underwrite => 124,
            Cwe::Overread => 126,
            Cwe::Underread => 127,
            Cwe::UseAfterFree => 416,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub name: String,
    pub cwe: Cwe,
    pub bad: bool,
    pub size: usize,
    pub depth: usize,
    pub program: TraceProgram,
}

impl Scenario {
    /// Index of the instruction carrying the directive.
    pub fn probe(&self) -> usize {
        self.program
            .steps
            .iter()
            .position(|s| s.expect.is_some())
            .expect("suite scenarios carry a directive")
    }

    pub fn expectation(&self) -> &Expectation {
        self.program.steps[self.probe()].expect.as_ref().expect("probe has a directive")
    }
}

fn bad_expectation(class: AccessClass) -> Expectation {
    let lite = if class == AccessClass::OverflowPad {
        Expected::Ok
    } else {
        Expected::Violation
    };
    Expectation {
        fine: Some(Expected::Violation),
        lite: Some(lite),
        shadow: Some(Expected::Violation),
        class: Some(class),
    }
}

fn good_expectation() -> Expectation {
    Expectation {
        fine: Some(Expected::Ok),
        lite: Some(Expected::Ok),
        shadow: Some(Expected::Ok),
        class: Some(AccessClass::Valid),
    }
}

fn overflow_class(size: usize, depth: usize) -> AccessClass {
    if depth <= padding_for(size, TOKEN_BYTES) {
        AccessClass::OverflowPad
    } else {
        AccessClass::OverflowRedzone
    }
}

fn access(cwe: Cwe, id: &str, offset: i64, size: usize) -> Instruction {
    let id = id.to_string();
    match cwe {
        Cwe::StackOverflow | Cwe::HeapOverflow | Cwe::Underwrite => Instruction::Write {
            id,
            offset,
            size,
            value: None,
        },
        Cwe::Overread | Cwe::Underread | Cwe::UseAfterFree => Instruction::Read { id, offset, size },
    }
}

fn alloc(id: &str, size: usize) -> Instruction {
    Instruction::Alloc {
        id: id.into(),
        size,
    }
}

fn scenario(cwe: Cwe, bad: bool, tag: &str, size: usize, depth: usize, program: TraceProgram) -> Scenario {
    let kind = if bad { "bad" } else { "good" };
    Scenario {
        name: format!("cwe{}_{tag}{kind}_s{size}_d{depth}", cwe.number()),
        cwe,
        bad,
        size,
        depth,
        program,
    }
}

fn pair(cwe: Cwe, size: usize, depth: usize) -> [Scenario; 2] {
    let mut bad = TraceProgram::default();
    let mut good = TraceProgram::default();
    let s = size as i64;
    let d = depth as i64;
    match cwe {
        Cwe::HeapOverflow | Cwe::Overread => {
            for p in [&mut bad, &mut good] {
                p.push(alloc("pre", 8));
                p.push(alloc("a", size));
            }
            bad.push_expect(access(cwe, "a", s - 1 + d, 1), bad_expectation(overflow_class(size, depth)));
            good.push_expect(access(cwe, "a", s - 1 - (d - 1) % s, 1), good_expectation());
        }
        Cwe::StackOverflow => {
            for p in [&mut bad, &mut good] {
                p.push(Instruction::Push {
                    objects: vec![("pre".into(), 8), ("a".into(), size)],
                });
            }
            bad.push_expect(access(cwe, "a", s - 1 + d, 1), bad_expectation(overflow_class(size, depth)));
            good.push_expect(access(cwe, "a", s - 1 - (d - 1) % s, 1), good_expectation());
        }
        Cwe::Underwrite | Cwe::Underread => {
            for p in [&mut bad, &mut good] {
                p.push(alloc("pre", 8));
                p.push(alloc("a", size));
            }
            bad.push_expect(access(cwe, "a", -d, 1), bad_expectation(AccessClass::Underflow));
            good.push_expect(access(cwe, "a", (d - 1) % s, 1), good_expectation());
        }
        Cwe::UseAfterFree => {
            let off = (depth - 1) % size;
            let len = (size - off).min(TOKEN_BYTES - off % TOKEN_BYTES);
            bad.push(alloc("a", size));
            bad.push(Instruction::Free { id: "a".into() });
            bad.push_expect(access(cwe, "a", off as i64, len), bad_expectation(AccessClass::UseAfterFree));
            good.push(alloc("a", size));
            good.push_expect(access(cwe, "a", off as i64, len), good_expectation());
            good.push(Instruction::Free { id: "a".into() });
        }
    }
    [
        scenario(cwe, true, "", size, depth, bad),
        scenario(cwe, false, "", size, depth, good),
    ]
}

/// Underflow of the first heap object, caught by the region guard word.
fn guard_pair(cwe: Cwe, size: usize, depth: usize) -> [Scenario; 2] {
    let mut bad = TraceProgram::default();
    let mut good = TraceProgram::default();
    bad.push(alloc("a", size));
    good.push(alloc("a", size));
    bad.push_expect(access(cwe, "a", -(depth as i64), 1), bad_expectation(AccessClass::Underflow));
    good.push_expect(access(cwe, "a", ((depth - 1) % size) as i64, 1), good_expectation());
    [
        scenario(cwe, true, "first_", size, depth, bad),
        scenario(cwe, false, "first_", size, depth, good),
    ]
}

/// Every scenario of the suite, in a fixed order.
pub fn build_cwe_suite() -> Vec<Scenario> {
    let mut out = Vec::new();
    for cwe in Cwe::ALL {
        for size in SIZES {
            for depth in DEPTHS {
                out.extend(pair(cwe, size, depth));
            }
            if matches!(cwe, Cwe::Underwrite | Cwe::Underread) {
                for depth in GUARD_DEPTHS {
                    out.extend(guard_pair(cwe, size, depth));
                }
            }
        }
    }
    out
}

/// Execution config used for the suite under `mode`.
pub fn suite_config(mode: Mode, seed: u64, token_bits: Option<u32>, runtime: RuntimeConfig) -> ExecConfig {
    let mut cfg = ExecConfig::new(mode, seed);
    cfg.arena_size = SUITE_ARENA_SIZE;
    cfg.token_bits = token_bits;
    cfg.runtime = RuntimeConfig {
        redzone_tokens: runtime.redzone_tokens.max(SUITE_REDZONE_TOKENS),
        ..runtime
    };
    cfg
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScenarioResult {
    pub name: String,
    pub cwe: Cwe,
    pub bad: bool,
    pub class: Option<AccessClass>,
    pub outcome: Outcome,
    pub predicted: Option<bool>,
    pub violations: usize,
    pub expectations_failed: usize,
    pub disagreements: usize,
    /// Token loads performed by one access -> number of accesses.
    pub token_loads: BTreeMap<u64, u64>,
}

impl ScenarioResult {
    pub fn detected(&self) -> bool {
        self.outcome.is_detection()
    }
}

pub fn run_scenario(s: &Scenario, cfg: &ExecConfig) -> Result<ScenarioResult, ExecError> {
    let r = execute_trace(&s.program, cfg)?;
    let last = &r.instructions[s.probe()];
    Ok(ScenarioResult {
        name: s.name.clone(),
        cwe: s.cwe,
        bad: s.bad,
        class: last.class,
        outcome: last.outcome,
        predicted: last.predicted,
        violations: r.violations.len(),
        expectations_failed: r.expectations.failed.len(),
        disagreements: r.disagreements.len(),
        token_loads: r.token_loads_per_access,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CaseCounts {
    pub total: usize,
    pub detected: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ModeSummary {
    pub bad: CaseCounts,
    pub good: CaseCounts,
    /// Percentage of bad cases detected.
    pub bad_detection_rate: f64,
    /// Percentage of good cases run without a violation.
    pub good_pass_rate: f64,
    pub by_cwe: BTreeMap<u32, CaseCounts>,
    pub missed_by_class: BTreeMap<String, usize>,
    pub expectations_failed: usize,
    pub disagreements: usize,
    pub token_loads_per_access: BTreeMap<u64, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub redzone_tokens: usize,
    pub scenarios: usize,
    pub modes: BTreeMap<Mode, ModeSummary>,
    /// Names of bad cases lite mode missed.
    pub lite_misses: Vec<String>,
    /// Names of bad cases whose oracle class is `overflow_pad`.
    pub pad_confined: Vec<String>,
    pub lite_misses_equal_pad_confined: bool,
}

pub fn summarize(results: &[ScenarioResult]) -> ModeSummary {
    let mut m = ModeSummary::default();
    for r in results {
        let counts = if r.bad { &mut m.bad } else { &mut m.good };
        counts.total += 1;
        let detected = if r.bad { r.detected() } else { r.violations > 0 || r.detected() };
        if detected {
            counts.detected += 1;
        }
        if r.bad {
            let c = m.by_cwe.entry(r.cwe.number()).or_default();
            c.total += 1;
            if detected {
                c.detected += 1;
            } else {
                let class = r.class.map_or("none", AccessClass::as_str);
                *m.missed_by_class.entry(class.to_string()).or_default() += 1;
            }
        }
        m.expectations_failed += r.expectations_failed;
        m.disagreements += r.disagreements;
        for (&k, &v) in &r.token_loads {
            *m.token_loads_per_access.entry(k).or_default() += v;
        }
    }
    let pct = |n: usize, d: usize| if d == 0 { 100.0 } else { (n as f64 * 10000.0 / d as f64).round() / 100.0 };
    m.bad_detection_rate = pct(m.bad.detected, m.bad.total);
    m.good_pass_rate = pct(m.good.total - m.good.detected, m.good.total);
    m
}

/// Runs the whole suite under each of `modes`.
pub fn run_suite(
    modes: &[Mode],
    seed: u64,
    token_bits: Option<u32>,
    runtime: RuntimeConfig,
) -> Result<(SuiteReport, BTreeMap<Mode, Vec<ScenarioResult>>), ExecError> {
    let suite = build_cwe_suite();
    let mut all = BTreeMap::new();
    let mut summaries = BTreeMap::new();
    for &mode in modes {
        let cfg = suite_config(mode, seed, token_bits, runtime);
        let results = suite
            .iter()
            .map(|s| run_scenario(s, &cfg))
            .collect::<Result<Vec<_>, _>>()?;
        summaries.insert(mode, summarize(&results));
        all.insert(mode, results);
    }
    let pad_confined: Vec<String> = suite
        .iter()
        .filter(|s| s.bad && s.expectation().class == Some(AccessClass::OverflowPad))
        .map(|s| s.name.clone())
        .collect();
    let lite_misses: Vec<String> = all
        .get(&Mode::Lite)
        .map(|rs: &Vec<ScenarioResult>| rs.iter().filter(|r| r.bad && !r.detected()).map(|r| r.name.clone()).collect())
        .unwrap_or_default();
    let equal = all.contains_key(&Mode::Lite)
        && lite_misses.iter().collect::<BTreeSet<_>>() == pad_confined.iter().collect::<BTreeSet<_>>();
    let report = SuiteReport {
        seed,
        redzone_tokens: runtime.redzone_tokens.max(SUITE_REDZONE_TOKENS),
        scenarios: suite.len(),
        modes: summaries,
        lite_misses,
        pad_confined,
        lite_misses_equal_pad_confined: equal,
    };
    Ok((report, all))
}
