use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::arena::{Arena, ArenaError, ExecutionMetrics, DEFAULT_ARENA_SIZE, DEFAULT_PAGE_SIZE};
use crate::checker::{Access, AccessKind, AccessOutcome, Violation};
use crate::mode::Mode;
use crate::oracle::AccessClass;
use crate::runtime::{Runtime, RuntimeConfig, RuntimeError};
use crate::token::{generate_nonce_in_stream, Nonce, TokenConfig, TokenContext, TokenError, NONCE_STREAM, TOKEN_BYTES};

use super::parse::{Expectation, Expected, Instruction, TraceProgram};

/// Upper bound on re-draws when steering a default write value away from
/// the nonce.
const SANITIZE_ATTEMPTS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecError {
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error(transparent)]
    Arena(#[from] ArenaError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecConfig {
    pub mode: Mode,
    /// Seeds the nonce and the default write pattern.
    pub seed: u64,
    /// Overrides the nonce; used when re-executing with a fresh one.
    pub nonce: Option<Nonce>,
    /// Nonce width; `None` picks 61 for fine and 64 for lite.
    pub token_bits: Option<u32>,
    pub runtime: RuntimeConfig,
    pub continue_on_violation: bool,
    pub arena_size: usize,
    pub page_size: usize,
}

impl ExecConfig {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            mode,
            seed,
            nonce: None,
            token_bits: None,
            runtime: RuntimeConfig::default(),
            continue_on_violation: false,
            arena_size: DEFAULT_ARENA_SIZE,
            page_size: DEFAULT_PAGE_SIZE,
        }
    }

    pub fn token_config(&self) -> Result<TokenConfig, TokenError> {
        match self.mode {
            Mode::Lite => TokenConfig::new(self.token_bits.unwrap_or(64), 0),
            _ => TokenConfig::new(self.token_bits.unwrap_or(61), 3),
        }
    }

    pub fn token_context(&self) -> Result<TokenContext, TokenError> {
        let config = self.token_config()?;
        let nonce = self
            .nonce
            .unwrap_or_else(|| generate_nonce_in_stream(&config, self.seed, NONCE_STREAM));
        Ok(TokenContext { nonce, config })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ok,
    Violation,
    DoubleFree,
    Error,
    NotReached,
}

impl Outcome {
    pub fn is_detection(self) -> bool {
        matches!(self, Outcome::Violation | Outcome::DoubleFree)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InstructionReport {
    pub index: usize,
    pub op: String,
    pub outcome: Outcome,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class: Option<AccessClass>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub predicted: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// A checker verdict that differs from the oracle's prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Disagreement {
    pub index: usize,
    pub base: usize,
    pub size: usize,
    pub class: AccessClass,
    pub predicted: bool,
    pub observed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExpectationFailure {
    pub index: usize,
    pub key: String,
    pub expected: String,
    pub observed: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ExpectationSummary {
    pub passed: usize,
    pub failed: Vec<ExpectationFailure>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunReport {
    pub mode: Mode,
    pub seed: u64,
    pub token_config: Option<TokenConfig>,
    pub runtime: RuntimeConfig,
    #[serde(rename = "continue")]
    pub continue_on_violation: bool,
    pub instructions: Vec<InstructionReport>,
    pub violations: Vec<Violation>,
    pub disagreements: Vec<Disagreement>,
    pub expectations: ExpectationSummary,
    pub metrics: ExecutionMetrics,
    /// Histogram: token loads performed by one access -> number of accesses.
    pub token_loads_per_access: BTreeMap<u64, u64>,
    pub halted_at: Option<usize>,
}

impl RunReport {
    pub fn has_runtime_error(&self) -> bool {
        self.instructions.iter().any(|i| i.outcome == Outcome::Error)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Default value written by `write`/`fill` without an explicit operand.
pub fn write_pattern(seed: u64, id: &str, offset: i64) -> u64 {
    let mut h = splitmix(seed);
    for b in id.bytes() {
        h = splitmix(h ^ u64::from(b));
    }
    splitmix(h ^ offset as u64)
}

/// Re-draws `value` until writing its low `size` bytes at `addr` leaves no
/// word holding the nonce.
fn sanitize(arena: &Arena, tokens: &TokenContext, addr: usize, size: usize, mut value: u64) -> u64 {
    let first = addr - addr % TOKEN_BYTES;
    let last = (addr + size - 1) - (addr + size - 1) % TOKEN_BYTES;
    for _ in 0..SANITIZE_ATTEMPTS {
        let bytes = value.to_le_bytes();
        let clean = (first..=last).step_by(TOKEN_BYTES).all(|w| {
            let Ok(old) = arena.peek(w, TOKEN_BYTES) else {
                return true;
            };
            let mut word = [0u8; TOKEN_BYTES];
            word.copy_from_slice(old);
            for (i, slot) in word.iter_mut().enumerate() {
                let a = w + i;
                if (addr..addr + size).contains(&a) {
                    *slot = bytes[a - addr];
                }
            }
            !tokens.is_poisoned(u64::from_le_bytes(word))
        });
        if clean {
            return value;
        }
        value = splitmix(value);
    }
    value
}

/// An arena with an initialised runtime, ready to run programs.
#[derive(Debug, Clone)]
pub struct Machine {
    pub arena: Arena,
    pub runtime: Runtime,
    pub tokens: TokenContext,
    pub config: ExecConfig,
}

impl Machine {
    pub fn new(config: &ExecConfig) -> Result<Self, ExecError> {
        let tokens = config.token_context()?;
        let mut arena = Arena::new(config.arena_size, config.page_size)?;
        let runtime = Runtime::new(&mut arena, config.mode, tokens, config.runtime)?;
        Ok(Self {
            arena,
            runtime,
            tokens,
            config: config.clone(),
        })
    }

    /// Runs `program` from the current state. Metrics cover everything since
    /// the arena's last checkpoint, snapshot or restore.
    pub fn run(&mut self, program: &TraceProgram) -> RunReport {
        run_program(&mut self.arena, &mut self.runtime, &self.tokens, &self.config, program)
    }
}

/// Parses nothing, allocates a fresh machine, and runs `program` on it.
/// Runtime set-up is excluded from the metrics.
pub fn execute_trace(program: &TraceProgram, config: &ExecConfig) -> Result<RunReport, ExecError> {
    let mut m = Machine::new(config)?;
    m.arena.checkpoint();
    Ok(m.run(program))
}

struct Step {
    outcome: Outcome,
    class: Option<AccessClass>,
    predicted: Option<bool>,
    error: Option<String>,
}

impl Step {
    fn plain(outcome: Outcome) -> Self {
        Self {
            outcome,
            class: None,
            predicted: None,
            error: None,
        }
    }
}

struct Executor<'a> {
    arena: &'a mut Arena,
    runtime: &'a mut Runtime,
    tokens: &'a TokenContext,
    config: &'a ExecConfig,
    violations: Vec<Violation>,
    disagreements: Vec<Disagreement>,
    histogram: BTreeMap<u64, u64>,
}

impl Executor<'_> {
    /// One checked access of 1..=8 bytes. `Ok(None)` when it was performed.
    fn access(
        &mut self,
        index: usize,
        class: AccessClass,
        id: &str,
        offset: i64,
        access: Access,
        value: u64,
    ) -> Result<Option<Violation>, RuntimeError> {
        if !self.arena.contains(access.base, access.size) {
            return Err(RuntimeError::OutOfRange { name: id.into(), offset });
        }
        let mode = self.config.mode;
        let predicted = self.runtime.ledger().predict(access.lb(), access.ub(), mode);
        let before = self.arena.counters().token_loads;
        let outcome = self.runtime.access(self.arena, &access, value)?;
        *self
            .histogram
            .entry(self.arena.counters().token_loads - before)
            .or_default() += 1;
        let observed = matches!(outcome, AccessOutcome::Violation(_));
        if predicted != observed {
            self.disagreements.push(Disagreement {
                index,
                base: access.base,
                size: access.size,
                class,
                predicted,
                observed,
            });
        }
        match outcome {
            AccessOutcome::Ok(_) => {
                if access.kind == AccessKind::Write {
                    self.runtime.note_write(access.base..access.base + access.size);
                }
                Ok(None)
            }
            AccessOutcome::Violation(v) => Ok(Some(v.at_instruction(index))),
        }
    }

    /// Splits `len` bytes at `offset` into word-bounded pieces and writes them
    /// in order, stopping at the first violation.
    fn ranged(
        &mut self,
        index: usize,
        id: &str,
        offset: i64,
        len: usize,
        explicit: Option<u64>,
    ) -> Result<Step, RuntimeError> {
        let class = self.runtime.ledger().classify(id, offset, len).class;
        let base = self.runtime.resolve(id, offset)?;
        let mut predicted_any = false;
        let mut done = 0;
        while done < len {
            let addr = base + done;
            let size = (TOKEN_BYTES - addr % TOKEN_BYTES).min(len - done);
            let piece_offset = offset + done as i64;
            let access = Access::write(addr, size).expect("size in 1..=8");
            let value = match explicit {
                Some(v) => v,
                None => {
                    let v = write_pattern(self.config.seed, id, piece_offset);
                    if self.config.mode.embeds_tokens() && self.arena.contains(addr, size) {
                        sanitize(self.arena, self.tokens, addr, size, v)
                    } else {
                        v
                    }
                }
            };
            if self.arena.contains(addr, size) {
                predicted_any |= self
                    .runtime
                    .ledger()
                    .predict(access.lb(), access.ub(), self.config.mode);
            }
            if let Some(v) = self.access(index, class, id, piece_offset, access, value)? {
                self.violations.push(v);
                return Ok(Step {
                    outcome: Outcome::Violation,
                    class: Some(class),
                    predicted: Some(predicted_any),
                    error: None,
                });
            }
            done += size;
        }
        Ok(Step {
            outcome: Outcome::Ok,
            class: Some(class),
            predicted: Some(predicted_any),
            error: None,
        })
    }

    fn step(&mut self, index: usize, instr: &Instruction) -> Result<Step, RuntimeError> {
        match instr {
            Instruction::Alloc { id, size } => {
                self.runtime.heap_alloc(self.arena, id, *size)?;
                Ok(Step::plain(Outcome::Ok))
            }
            Instruction::Free { id } => {
                self.runtime.heap_free(self.arena, id)?;
                Ok(Step::plain(Outcome::Ok))
            }
            Instruction::Realloc { id, size } => {
                self.runtime.heap_realloc(self.arena, id, *size)?;
                Ok(Step::plain(Outcome::Ok))
            }
            Instruction::Push { objects } => {
                self.runtime.push_frame(self.arena, objects)?;
                Ok(Step::plain(Outcome::Ok))
            }
            Instruction::Pop => {
                self.runtime.pop_frame(self.arena)?;
                Ok(Step::plain(Outcome::Ok))
            }
            Instruction::Global { id, size } => {
                self.runtime.register_global(self.arena, id, *size)?;
                Ok(Step::plain(Outcome::Ok))
            }
            Instruction::Read { id, offset, size } => {
                let class = self.runtime.ledger().classify(id, *offset, *size).class;
                let addr = self.runtime.resolve(id, *offset)?;
                let access = Access::read(addr, *size).expect("parser bounds size");
                let predicted = self.arena.contains(addr, *size)
                    && self.runtime.ledger().predict(access.lb(), access.ub(), self.config.mode);
                let outcome = match self.access(index, class, id, *offset, access, 0)? {
                    Some(v) => {
                        self.violations.push(v);
                        Outcome::Violation
                    }
                    None => Outcome::Ok,
                };
                Ok(Step {
                    outcome,
                    class: Some(class),
                    predicted: Some(predicted),
                    error: None,
                })
            }
            Instruction::Write { id, offset, size, value } => self.ranged(index, id, *offset, *size, *value),
            Instruction::Fill { id, offset, len } => self.ranged(index, id, *offset, *len, None),
        }
    }
}

fn check_expectation(
    mode: Mode,
    index: usize,
    expect: &Expectation,
    step: &InstructionReport,
    summary: &mut ExpectationSummary,
) {
    if let Some(expected) = expect.for_mode(mode) {
        let observed = match step.outcome {
            Outcome::Ok => Some(Expected::Ok),
            o if o.is_detection() => Some(Expected::Violation),
            _ => None,
        };
        if observed == Some(expected) {
            summary.passed += 1;
        } else {
            summary.failed.push(ExpectationFailure {
                index,
                key: mode.as_str().into(),
                expected: expected.as_str().into(),
                observed: observed.map_or_else(|| outcome_name(step.outcome), |o| o.as_str().into()),
            });
        }
    }
    if let Some(class) = expect.class {
        if step.class == Some(class) {
            summary.passed += 1;
        } else {
            summary.failed.push(ExpectationFailure {
                index,
                key: "class".into(),
                expected: class.as_str().into(),
                observed: step.class.map_or_else(|| outcome_name(step.outcome), |c| c.as_str().into()),
            });
        }
    }
}

fn outcome_name(o: Outcome) -> String {
    serde_json::to_value(o)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Executes `program` against an initialised runtime.
pub fn run_program(
    arena: &mut Arena,
    runtime: &mut Runtime,
    tokens: &TokenContext,
    config: &ExecConfig,
    program: &TraceProgram,
) -> RunReport {
    let mut ex = Executor {
        arena,
        runtime,
        tokens,
        config,
        violations: Vec::new(),
        disagreements: Vec::new(),
        histogram: BTreeMap::new(),
    };
    let mut instructions = Vec::with_capacity(program.len());
    let mut expectations = ExpectationSummary::default();
    let mut halted_at = None;
    for (index, s) in program.steps.iter().enumerate() {
        let report = if halted_at.is_some() {
            InstructionReport {
                index,
                op: s.instruction.to_string(),
                outcome: Outcome::NotReached,
                class: None,
                predicted: None,
                error: None,
            }
        } else {
            let step = match ex.step(index, &s.instruction) {
                Ok(step) => step,
                Err(RuntimeError::DoubleFree(_)) => Step::plain(Outcome::DoubleFree),
                Err(e) => Step {
                    error: Some(e.to_string()),
                    ..Step::plain(Outcome::Error)
                },
            };
            let halt = match step.outcome {
                Outcome::Error => true,
                o => o.is_detection() && !config.continue_on_violation,
            };
            if halt {
                halted_at = Some(index);
            }
            InstructionReport {
                index,
                op: s.instruction.to_string(),
                outcome: step.outcome,
                class: step.class,
                predicted: step.predicted,
                error: step.error,
            }
        };
        if let Some(e) = &s.expect {
            check_expectation(config.mode, index, e, &report, &mut expectations);
        }
        instructions.push(report);
    }
    RunReport {
        mode: config.mode,
        seed: config.seed,
        token_config: config.mode.embeds_tokens().then_some(tokens.config),
        runtime: config.runtime,
        continue_on_violation: config.continue_on_violation,
        instructions,
        violations: ex.violations,
        disagreements: ex.disagreements,
        expectations,
        metrics: ex.arena.execution_metrics(),
        token_loads_per_access: ex.histogram,
        halted_at,
    }
}
