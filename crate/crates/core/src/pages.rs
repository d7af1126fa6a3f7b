//! Fixed synthetic workloads comparing the pages each mode dirties.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::mode::Mode;
use crate::runtime::RuntimeConfig;
use crate::trace::{execute_trace, ExecConfig, ExecError, Instruction, TraceProgram};

/// `count` allocations of `size` bytes, each followed by one 8-byte write.
fn alloc_and_touch(count: usize, size: usize) -> TraceProgram {
    let mut p = TraceProgram::default();
    for i in 0..count {
        let id = format!("o{i}");
        p.push(Instruction::Alloc { id: id.clone(), size });
        p.push(Instruction::Write {
            id,
            offset: 0,
            size: 8.min(size),
            value: None,
        });
    }
    p
}

/// 128 page-sized allocations, one word written in each.
pub fn scattered() -> TraceProgram {
    alloc_and_touch(128, 4096)
}

/// 512 small allocations, one word written in each.
pub fn dense() -> TraceProgram {
    alloc_and_touch(512, 16)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PageCounts {
    pub dirty_pages: u64,
    pub application_pages: u64,
    pub metadata_pages: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorkloadReport {
    pub modes: BTreeMap<Mode, PageCounts>,
    /// Pages shadow mode dirties beyond native.
    pub shadow_extra: i64,
    /// Pages fine mode dirties beyond native.
    pub ret_extra: i64,
    /// `shadow_extra / max(ret_extra, 1)`.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PagesReport {
    pub seed: u64,
    pub workloads: BTreeMap<String, WorkloadReport>,
}

pub fn measure(program: &TraceProgram, seed: u64, token_bits: Option<u32>, runtime: RuntimeConfig) -> Result<WorkloadReport, ExecError> {
    let mut modes = BTreeMap::new();
    for mode in Mode::ALL {
        let mut cfg = ExecConfig::new(mode, seed);
        cfg.token_bits = if mode.embeds_tokens() { token_bits } else { None };
        cfg.runtime = runtime;
        let m = execute_trace(program, &cfg)?.metrics;
        modes.insert(
            mode,
            PageCounts {
                dirty_pages: m.dirty_pages,
                application_pages: m.application_pages,
                metadata_pages: m.metadata_pages,
            },
        );
    }
    let dirty = |m: Mode| modes[&m].dirty_pages as i64;
    let shadow_extra = dirty(Mode::Shadow) - dirty(Mode::Native);
    let ret_extra = dirty(Mode::Fine) - dirty(Mode::Native);
    Ok(WorkloadReport {
        shadow_extra,
        ret_extra,
        ratio: shadow_extra as f64 / ret_extra.max(1) as f64,
        modes,
    })
}

pub fn run_pages(seed: u64, token_bits: Option<u32>, runtime: RuntimeConfig) -> Result<PagesReport, ExecError> {
    let mut workloads = BTreeMap::new();
    workloads.insert("scattered".to_string(), measure(&scattered(), seed, token_bits, runtime)?);
    workloads.insert("dense".to_string(), measure(&dense(), seed, token_bits, runtime)?);
    Ok(PagesReport { seed, workloads })
}
