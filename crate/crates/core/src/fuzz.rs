//! Fork-server style fuzzing loop. The arena is initialised and snapshotted
//! once; every execution restores the snapshot, runs one generated or
//! mutated trace in continue mode, and folds its metrics into the campaign.
//! Token violations are re-executed under a fresh nonce to separate real
//! errors from nonce collisions.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::arena::{Arena, Snapshot};
use crate::mode::Mode;
use crate::runtime::{Runtime, RuntimeConfig};
use crate::token::{Nonce, TokenConfig, TokenContext};
use crate::trace::{run_program, ExecConfig, ExecError, Instruction, Machine, Outcome, RunReport, TraceProgram};

/// Generator stream for fresh confirmation nonces.
pub const CONFIRM_STREAM: u64 = 1;
/// Generator stream for trace generation and mutation.
pub const GENERATION_STREAM: u64 = 3;

pub const FUZZ_ARENA_SIZE: usize = 1 << 20;

const CORPUS_CAPACITY: usize = 16;
const MUTATION_ATTEMPTS: usize = 32;
const MAX_LIVE_HEAP: usize = 16;
const MAX_FRAMES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenParams {
    pub max_instructions: usize,
    pub min_alloc: usize,
    pub max_alloc: usize,
    /// Probability that an access targets a boundary-adjacent offset.
    pub overflow_bias: f64,
    /// Probability that a write carries an explicit random value.
    pub literal_write_prob: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            max_instructions: 24,
            min_alloc: 1,
            max_alloc: 64,
            overflow_bias: 0.3,
            literal_write_prob: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfirmPolicy {
    /// Re-execute every token violation.
    Always,
    /// Re-execute only below the mode's default token width.
    ReducedWidth,
    Never,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FuzzConfig {
    pub seed: u64,
    pub executions: u64,
    pub mode: Mode,
    pub token_bits: Option<u32>,
    pub runtime: RuntimeConfig,
    pub params: GenParams,
    /// Globals registered before the snapshot.
    pub globals: Vec<(String, usize)>,
    /// Probability of mutating a corpus entry instead of generating afresh.
    pub mutate_prob: f64,
    pub confirm: ConfirmPolicy,
    pub arena_size: usize,
    pub page_size: usize,
}

impl FuzzConfig {
    pub fn new(mode: Mode, seed: u64, executions: u64) -> Self {
        let exec = ExecConfig::new(mode, seed);
        Self {
            seed,
            executions,
            mode,
            token_bits: None,
            runtime: RuntimeConfig::default(),
            params: GenParams::default(),
            globals: vec![("g0".into(), 16), ("g1".into(), 5)],
            mutate_prob: 0.5,
            confirm: ConfirmPolicy::Always,
            arena_size: FUZZ_ARENA_SIZE,
            page_size: exec.page_size,
        }
    }

    pub fn exec_config(&self) -> ExecConfig {
        ExecConfig {
            token_bits: self.token_bits,
            runtime: self.runtime,
            continue_on_violation: true,
            arena_size: self.arena_size,
            page_size: self.page_size,
            ..ExecConfig::new(self.mode, self.seed)
        }
    }
}

#[derive(Debug, Default)]
struct GenState {
    heap_live: Vec<(String, usize)>,
    heap_freed: Vec<(String, usize)>,
    frames: Vec<Vec<(String, usize)>>,
    globals: Vec<(String, usize)>,
    next_id: usize,
}

impl GenState {
    fn fresh(&mut self, prefix: &str) -> String {
        let id = format!("{prefix}{}", self.next_id);
        self.next_id += 1;
        id
    }

    fn addressable(&self) -> Vec<(String, usize)> {
        let mut v: Vec<_> = self.heap_live.iter().chain(&self.globals).cloned().collect();
        v.extend(self.frames.iter().flatten().cloned());
        v
    }
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T]) -> &'a T {
    &items[rng.random_range(0..items.len())]
}

/// Offset and size of a generated access into an object of `size` bytes.
fn access_shape(rng: &mut ChaCha8Rng, params: &GenParams, size: usize) -> (i64, usize) {
    let len = rng.random_range(1..=8usize);
    if rng.random_bool(params.overflow_bias) {
        let k = rng.random_range(1..=8i64);
        let off = match rng.random_range(0..3) {
            0 => size as i64 - 1 + k,
            1 => -k,
            _ => size as i64 - len as i64 + k.min(2) - 1,
        };
        (off, len)
    } else if size == 0 {
        (0, len)
    } else {
        let off = rng.random_range(0..size);
        (off as i64, len.min(size - off))
    }
}

/// A straight-line program of allocations, frees, frames and accesses.
/// `predefined` names globals that exist before the program starts.
pub fn random_trace(rng: &mut ChaCha8Rng, params: &GenParams, predefined: &[(String, usize)]) -> TraceProgram {
    let mut p = TraceProgram::default();
    if params.max_instructions == 0 {
        return p;
    }
    let n = rng.random_range(1..=params.max_instructions);
    let mut st = GenState {
        globals: predefined.to_vec(),
        ..GenState::default()
    };
    while p.len() < n {
        let targets = st.addressable();
        let roll = rng.random_range(0..100u32);
        let instr = match roll {
            0..=24 if st.heap_live.len() < MAX_LIVE_HEAP => {
                let size = rng.random_range(params.min_alloc..=params.max_alloc);
                let id = st.fresh("h");
                st.heap_live.push((id.clone(), size));
                Instruction::Alloc { id, size }
            }
            25..=49 if !targets.is_empty() => {
                let (id, size) = pick(rng, &targets).clone();
                let (offset, len) = access_shape(rng, params, size);
                let value = rng.random_bool(params.literal_write_prob).then(|| rng.random());
                Instruction::Write { id, offset, size: len, value }
            }
            50..=74 if !targets.is_empty() => {
                let (id, size) = pick(rng, &targets).clone();
                let (offset, len) = access_shape(rng, params, size);
                Instruction::Read { id, offset, size: len }
            }
            75..=79 if !st.heap_freed.is_empty() => {
                let (id, size) = pick(rng, &st.heap_freed).clone();
                let offset = rng.random_range(0..size.max(1));
                let len = rng.random_range(1..=8usize);
                Instruction::Read { id, offset: offset as i64, size: len }
            }
            80..=86 if !st.heap_live.is_empty() => {
                let i = rng.random_range(0..st.heap_live.len());
                let (id, size) = st.heap_live.remove(i);
                st.heap_freed.push((id.clone(), size));
                Instruction::Free { id }
            }
            87..=89 if !st.heap_live.is_empty() => {
                let i = rng.random_range(0..st.heap_live.len());
                let size = rng.random_range(params.min_alloc..=params.max_alloc);
                st.heap_live[i].1 = size;
                Instruction::Realloc {
                    id: st.heap_live[i].0.clone(),
                    size,
                }
            }
            90..=93 if st.frames.len() < MAX_FRAMES => {
                let count = rng.random_range(1..=2);
                let objects: Vec<_> = (0..count)
                    .map(|_| (st.fresh("s"), rng.random_range(params.min_alloc..=params.max_alloc)))
                    .collect();
                st.frames.push(objects.clone());
                Instruction::Push { objects }
            }
            94..=96 if !st.frames.is_empty() => {
                st.frames.pop();
                Instruction::Pop
            }
            97..=99 if !targets.is_empty() => {
                let (id, size) = pick(rng, &targets).clone();
                Instruction::Fill {
                    id,
                    offset: 0,
                    len: rng.random_range(1..=size + 8),
                }
            }
            _ => continue,
        };
        p.push(instr);
    }
    p
}

/// Sizes bound to each id just before instruction `upto`.
fn static_sizes(p: &TraceProgram, upto: usize, predefined: &[(String, usize)]) -> BTreeMap<String, usize> {
    let mut sizes: BTreeMap<String, usize> = predefined.iter().cloned().collect();
    for step in &p.steps[..upto] {
        match &step.instruction {
            Instruction::Alloc { id, size } | Instruction::Realloc { id, size } | Instruction::Global { id, size } => {
                sizes.insert(id.clone(), *size);
            }
            Instruction::Push { objects } => sizes.extend(objects.iter().cloned()),
            _ => {}
        }
    }
    sizes
}

fn mutate_once(p: &TraceProgram, rng: &mut ChaCha8Rng, predefined: &[(String, usize)]) -> TraceProgram {
    let mut out = p.clone();
    let n = out.len();
    let i = rng.random_range(0..n);
    match rng.random_range(0..5) {
        // offset nudge
        0 => {
            let sizes = static_sizes(p, i, predefined);
            match &mut out.steps[i].instruction {
                Instruction::Read { id, offset, .. } | Instruction::Write { id, offset, .. } | Instruction::Fill { id, offset, .. } => {
                    if rng.random_bool(0.25) {
                        *offset = sizes.get(id.as_str()).copied().unwrap_or(0) as i64;
                    } else {
                        *offset += rng.random_range(1..=3) * if rng.random_bool(0.5) { 1 } else { -1 };
                    }
                }
                _ => {}
            }
        }
        // size change
        1 => match &mut out.steps[i].instruction {
            Instruction::Alloc { size, .. } | Instruction::Realloc { size, .. } | Instruction::Global { size, .. } => {
                let delta = rng.random_range(1..=8);
                *size = if rng.random_bool(0.5) { *size + delta } else { size.saturating_sub(delta) };
            }
            Instruction::Push { objects } => {
                let j = rng.random_range(0..objects.len());
                objects[j].1 += rng.random_range(1..=8);
            }
            Instruction::Read { size, .. } | Instruction::Write { size, .. } => {
                *size = rng.random_range(1..=8);
            }
            Instruction::Fill { len, .. } => *len += rng.random_range(1..=8),
            Instruction::Free { .. } | Instruction::Pop => {}
        },
        // duplication of a non-defining instruction
        2 => {
            let instr = &out.steps[i].instruction;
            if !matches!(
                instr,
                Instruction::Alloc { .. } | Instruction::Global { .. } | Instruction::Push { .. } | Instruction::Pop
            ) {
                let step = out.steps[i].clone();
                out.steps.insert(i + 1, step);
            }
        }
        // truncation
        3 => {
            if n >= 2 {
                out.steps.truncate(rng.random_range(1..n));
            }
        }
        // move a free one step earlier
        _ => {
            let frees: Vec<usize> = (1..n)
                .filter(|&j| matches!(out.steps[j].instruction, Instruction::Free { .. }))
                .collect();
            if !frees.is_empty() {
                let j = *pick(rng, &frees);
                out.steps.swap(j - 1, j);
            }
        }
    }
    out
}

/// A well-formed program differing from `p` in at least one instruction.
pub fn mutate_trace(p: &TraceProgram, rng: &mut ChaCha8Rng, params: &GenParams, predefined: &[(String, usize)]) -> TraceProgram {
    let names: Vec<&str> = predefined.iter().map(|(n, _)| n.as_str()).collect();
    if p.is_empty() {
        let mut out = TraceProgram::default();
        out.push(Instruction::Alloc {
            id: "m0".into(),
            size: rng.random_range(params.min_alloc..=params.max_alloc),
        });
        return out;
    }
    for _ in 0..MUTATION_ATTEMPTS {
        let out = mutate_once(p, rng, predefined);
        if out != *p && out.check_defined(&names).is_ok() {
            return out;
        }
    }
    // Fall back to appending a one-byte probe past the end of some object.
    let mut out = p.clone();
    let sizes = static_sizes(p, p.len(), predefined);
    match sizes.iter().next() {
        Some((id, &size)) => out.push(Instruction::Read {
            id: id.clone(),
            offset: size as i64,
            size: 1,
        }),
        None => out.push(Instruction::Alloc { id: "m0".into(), size: 1 }),
    }
    out
}

/// Initialised runtime plus the snapshot every execution starts from.
#[derive(Debug)]
pub struct ForkServer {
    arena: Arena,
    runtime: Runtime,
    tokens: TokenContext,
    config: ExecConfig,
    snapshot: Snapshot,
}

impl ForkServer {
    pub fn new(config: &ExecConfig, globals: &[(String, usize)]) -> Result<Self, ExecError> {
        let mut m = Machine::new(config)?;
        for (name, size) in globals {
            m.runtime.register_global(&mut m.arena, name, *size)?;
        }
        if !globals.is_empty() {
            m.runtime.seal_globals();
        }
        let snapshot = m.arena.snapshot();
        Ok(Self {
            arena: m.arena,
            runtime: m.runtime,
            tokens: m.tokens,
            config: m.config,
            snapshot,
        })
    }

    pub fn tokens(&self) -> &TokenContext {
        &self.tokens
    }

    pub fn arena(&self) -> &Arena {
        &self.arena
    }

    pub fn snapshot(&self) -> &Snapshot {
        &self.snapshot
    }

    /// Restores the snapshot and runs `program` on a copy of the initial
    /// runtime state.
    pub fn execute(&mut self, program: &TraceProgram) -> Result<RunReport, ExecError> {
        self.arena.restore(&self.snapshot)?;
        let mut runtime = self.runtime.clone();
        Ok(run_program(&mut self.arena, &mut runtime, &self.tokens, &self.config, program))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Confirmation {
    Confirmed,
    CollisionCleared,
}

fn reexecute(
    program: &TraceProgram,
    config: &ExecConfig,
    globals: &[(String, usize)],
    fresh: Nonce,
) -> Result<RunReport, ExecError> {
    let cfg = ExecConfig {
        nonce: Some(fresh),
        continue_on_violation: true,
        ..config.clone()
    };
    let mut m = Machine::new(&cfg)?;
    for (name, size) in globals {
        m.runtime.register_global(&mut m.arena, name, *size)?;
    }
    if !globals.is_empty() {
        m.runtime.seal_globals();
    }
    m.arena.checkpoint();
    Ok(m.run(program))
}

/// Re-executes `program` from scratch under `fresh` and checks whether
/// instruction `index` violates again.
pub fn confirm_violation(
    program: &TraceProgram,
    index: usize,
    config: &ExecConfig,
    globals: &[(String, usize)],
    fresh: Nonce,
) -> Result<Confirmation, ExecError> {
    let r = reexecute(program, config, globals, fresh)?;
    Ok(confirmation_of(&r, index))
}

fn confirmation_of(report: &RunReport, index: usize) -> Confirmation {
    match report.instructions.get(index) {
        Some(i) if i.outcome == Outcome::Violation => Confirmation::Confirmed,
        _ => Confirmation::CollisionCleared,
    }
}

/// Independent nonces drawn from the confirmation stream of a campaign
/// seed. A draw may repeat the nonce under test; at `r` random bits that
/// happens with probability about `2^-r`.
#[derive(Debug, Clone)]
pub struct FreshNonces {
    rng: ChaCha8Rng,
    config: TokenConfig,
}

impl FreshNonces {
    pub fn new(config: TokenConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(CONFIRM_STREAM);
        Self { rng, config }
    }

    pub fn next_nonce(&mut self) -> Nonce {
        let mask = self.config.random_mask();
        if self.config.random_bits < 2 {
            return Nonce::from_raw(1);
        }
        loop {
            let v = self.rng.random::<u64>() & mask;
            if v != 0 && v != mask {
                return Nonce::from_raw(v);
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ViolationCounts {
    pub total: u64,
    pub by_class: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DirtyPageStats {
    pub mean: f64,
    pub max: u64,
    /// Application pages dirtied, summed over executions.
    pub application: u64,
    /// Non-application (shadow) pages dirtied, summed over executions.
    pub metadata: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TokenLoadStats {
    pub p50: u64,
    pub max: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CampaignMetrics {
    pub seed: u64,
    pub mode: Option<Mode>,
    pub executions: u64,
    pub violations: ViolationCounts,
    pub suspected_collisions: u64,
    pub confirmed: u64,
    pub re_executed: u64,
    pub runtime_errors: u64,
    pub dirty_pages: DirtyPageStats,
    pub token_loads_per_access: TokenLoadStats,
    /// Informational only; excluded from determinism checks.
    pub wall_time_ms: u64,
    #[serde(skip)]
    dirty_sum: u64,
    #[serde(skip)]
    load_histogram: BTreeMap<u64, u64>,
}

impl CampaignMetrics {
    fn empty(seed: u64, mode: Mode) -> Self {
        Self {
            seed,
            mode: Some(mode),
            ..Self::default()
        }
    }

    fn refresh(&mut self) {
        self.dirty_pages.mean = if self.executions == 0 {
            0.0
        } else {
            self.dirty_sum as f64 / self.executions as f64
        };
        let total: u64 = self.load_histogram.values().sum();
        let mut seen = 0;
        self.token_loads_per_access.p50 = 0;
        for (&loads, &count) in &self.load_histogram {
            seen += count;
            if seen * 2 >= total {
                self.token_loads_per_access.p50 = loads;
                break;
            }
        }
        self.token_loads_per_access.max = self.load_histogram.keys().next_back().copied().unwrap_or(0);
    }

    fn absorb(&mut self, report: &RunReport) {
        self.executions += 1;
        for i in &report.instructions {
            match i.outcome {
                Outcome::Violation => {
                    self.violations.total += 1;
                    let class = i.class.map_or("none", |c| c.as_str());
                    *self.violations.by_class.entry(class.into()).or_default() += 1;
                }
                Outcome::DoubleFree => {
                    self.violations.total += 1;
                    *self.violations.by_class.entry("double_free".into()).or_default() += 1;
                }
                Outcome::Error => self.runtime_errors += 1,
                Outcome::Ok | Outcome::NotReached => {}
            }
        }
        let m = report.metrics;
        self.dirty_sum += m.dirty_pages;
        self.dirty_pages.max = self.dirty_pages.max.max(m.dirty_pages);
        self.dirty_pages.application += m.application_pages;
        self.dirty_pages.metadata += m.metadata_pages;
        for (&k, &v) in &report.token_loads_per_access {
            *self.load_histogram.entry(k).or_default() += v;
        }
        self.refresh();
    }

    /// Folds two campaigns' metrics. Associative; the seed and mode of
    /// `self` are kept.
    pub fn merge(mut self, other: &CampaignMetrics) -> Self {
        self.mode = self.mode.or(other.mode);
        self.executions += other.executions;
        self.violations.total += other.violations.total;
        for (k, v) in &other.violations.by_class {
            *self.violations.by_class.entry(k.clone()).or_default() += v;
        }
        self.suspected_collisions += other.suspected_collisions;
        self.confirmed += other.confirmed;
        self.re_executed += other.re_executed;
        self.runtime_errors += other.runtime_errors;
        self.dirty_sum += other.dirty_sum;
        self.dirty_pages.max = self.dirty_pages.max.max(other.dirty_pages.max);
        self.dirty_pages.application += other.dirty_pages.application;
        self.dirty_pages.metadata += other.dirty_pages.metadata;
        for (&k, &v) in &other.load_histogram {
            *self.load_histogram.entry(k).or_default() += v;
        }
        self.wall_time_ms = self.wall_time_ms.max(other.wall_time_ms);
        self.refresh();
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }
}

/// One fuzzing campaign.
#[derive(Debug)]
pub struct Campaign {
    config: FuzzConfig,
    exec: ExecConfig,
    server: ForkServer,
    rng: ChaCha8Rng,
    fresh: FreshNonces,
    corpus: Vec<TraceProgram>,
    metrics: CampaignMetrics,
    default_bits: u32,
}

impl Campaign {
    pub fn new(config: FuzzConfig) -> Result<Self, ExecError> {
        let exec = config.exec_config();
        let server = ForkServer::new(&exec, &config.globals)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(GENERATION_STREAM);
        let fresh = FreshNonces::new(server.tokens.config, config.seed);
        let default_bits = ExecConfig {
            token_bits: None,
            ..exec.clone()
        }
        .token_config()?
        .random_bits;
        Ok(Self {
            metrics: CampaignMetrics::empty(config.seed, config.mode),
            config,
            exec,
            server,
            rng,
            fresh,
            corpus: Vec::new(),
            default_bits,
        })
    }

    pub fn server(&self) -> &ForkServer {
        &self.server
    }

    pub fn metrics(&self) -> &CampaignMetrics {
        &self.metrics
    }

    /// Generates a fresh program or mutates a corpus entry.
    pub fn next_program(&mut self) -> TraceProgram {
        let globals = &self.config.globals;
        if !self.corpus.is_empty() && self.rng.random_bool(self.config.mutate_prob) {
            let i = self.rng.random_range(0..self.corpus.len());
            let parent = self.corpus[i].clone();
            mutate_trace(&parent, &mut self.rng, &self.config.params, globals)
        } else {
            random_trace(&mut self.rng, &self.config.params, globals)
        }
    }

    fn should_confirm(&self) -> bool {
        self.config.mode.embeds_tokens()
            && match self.config.confirm {
                ConfirmPolicy::Always => true,
                ConfirmPolicy::ReducedWidth => self.server.tokens.config.random_bits < self.default_bits,
                ConfirmPolicy::Never => false,
            }
    }

    /// Runs one execution of `program` and folds it into the metrics.
    pub fn execute(&mut self, program: &TraceProgram) -> Result<RunReport, ExecError> {
        let report = self.server.execute(program)?;
        self.metrics.absorb(&report);
        let violating: Vec<usize> = report
            .instructions
            .iter()
            .filter(|i| i.outcome == Outcome::Violation)
            .map(|i| i.index)
            .collect();
        if !violating.is_empty() && self.should_confirm() {
            let nonce = self.fresh.next_nonce();
            let again = reexecute(program, &self.exec, &self.config.globals, nonce)?;
            for index in violating {
                self.metrics.re_executed += 1;
                match confirmation_of(&again, index) {
                    Confirmation::Confirmed => self.metrics.confirmed += 1,
                    Confirmation::CollisionCleared => self.metrics.suspected_collisions += 1,
                }
            }
        }
        if self.corpus.len() == CORPUS_CAPACITY {
            self.corpus.remove(0);
        }
        self.corpus.push(program.clone());
        Ok(report)
    }

    pub fn run(mut self) -> Result<CampaignMetrics, ExecError> {
        let start = Instant::now();
        for _ in 0..self.config.executions {
            let program = self.next_program();
            self.execute(&program)?;
        }
        self.metrics.wall_time_ms = start.elapsed().as_millis() as u64;
        Ok(self.metrics)
    }
}

pub fn fuzz_loop(config: &FuzzConfig) -> Result<CampaignMetrics, ExecError> {
    Campaign::new(config.clone())?.run()
}

/// Runs `jobs` isolated campaigns with seeds `seed, seed+1, ...` in parallel
/// and folds their metrics.
pub fn fuzz_parallel(config: &FuzzConfig, jobs: usize) -> Result<CampaignMetrics, ExecError> {
    let results: Vec<Result<CampaignMetrics, ExecError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs.max(1) as u64)
            .map(|j| {
                let cfg = FuzzConfig {
                    seed: config.seed.wrapping_add(j),
                    ..config.clone()
                };
                s.spawn(move || fuzz_loop(&cfg))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("campaign thread")).collect()
    });
    let mut iter = results.into_iter();
    let first = iter.next().expect("at least one job")?;
    iter.try_fold(first, |acc, r| Ok(acc.merge(&r?)))
}
