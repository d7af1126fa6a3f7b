//! Allocation runtime: heap with trailing redzones and a FIFO quarantine,
//! stack frames, and globals. Poison is written either as nonce tokens into
//! the object memory itself or as shadow bytes, depending on the mode.
//!
//! Every region starts with one guard word so that an underflow of the first
//! object lands in poisoned memory. Objects are placed contiguously at 8-byte
//! alignment: `[body][padding][redzone]`, with the first redzone word
//! carrying `size mod 8` in its boundary bits.

use std::collections::{BTreeMap, VecDeque};
use std::ops::Range;

use serde::Serialize;
use thiserror::Error;

use crate::arena::{Arena, ArenaError, RegionKind};
use crate::checker::{self, Access, AccessOutcome};
use crate::mode::Mode;
use crate::oracle::{LedgerEvent, ObjectId, ObjectLedger};
use crate::shadow::{ShadowCode, ShadowError, ShadowMap};
use crate::token::{TokenContext, TokenError, TOKEN_BYTES};

pub const DEFAULT_QUARANTINE: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RuntimeError {
    #[error("id `{0}` is already bound to a live object")]
    DuplicateId(String),
    #[error("unknown id `{0}`")]
    UnknownId(String),
    #[error("double free of `{0}`")]
    DoubleFree(String),
    #[error("`{0}` is not a live heap object")]
    InvalidFree(String),
    #[error("{0:?} region exhausted")]
    Exhausted(RegionKind),
    #[error("offset {offset} from `{name}` is outside the arena")]
    OutOfRange { name: String, offset: i64 },
    #[error("no stack frame to pop")]
    EmptyStack,
    #[error("global registration is closed")]
    RegistrationClosed,
    #[error("invalid runtime config: {0}")]
    Config(String),
    #[error("realloc copy of `{0}` hit poisoned memory")]
    CopyViolation(String),
    #[error(transparent)]
    Arena(#[from] ArenaError),
    #[error(transparent)]
    Shadow(#[from] ShadowError),
    #[error(transparent)]
    Token(#[from] TokenError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct RuntimeConfig {
    /// Redzone words after each object: 1, 2 or 4.
    pub redzone_tokens: usize,
    /// Quarantine capacity in freed objects.
    pub quarantine: usize,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            redzone_tokens: 1,
            quarantine: DEFAULT_QUARANTINE,
        }
    }
}

/// Padding that rounds `size` up to a multiple of `token_bytes`.
pub fn padding_for(size: usize, token_bytes: usize) -> usize {
    debug_assert!(token_bytes.is_power_of_two());
    (token_bytes - size % token_bytes) % token_bytes
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectState {
    Live,
    Quarantined,
    Recycled,
    Popped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AllocationRecord {
    pub object: ObjectId,
    pub name: String,
    pub region: RegionKind,
    pub base: usize,
    pub size: usize,
    pub padding: usize,
    pub redzone_base: usize,
    pub redzone_len: usize,
    /// End of the memory handed to this allocation (redzone plus any
    /// poisoned tail of a reused chunk).
    pub footprint_end: usize,
    pub state: ObjectState,
}

#[derive(Debug, Clone)]
enum Poisoner {
    None,
    Tokens(TokenContext),
    Shadow(ShadowMap),
}

impl Poisoner {
    /// Zeroes the object and its padding and marks it addressable.
    fn body(&self, arena: &mut Arena, base: usize, size: usize, padding: usize) -> Result<(), RuntimeError> {
        arena.zero(base, size + padding)?;
        if let Poisoner::Shadow(map) = self {
            map.unpoison_object(arena, base, size)?;
        }
        Ok(())
    }

    fn redzone(&self, arena: &mut Arena, start: usize, len: usize, first_boundary: u8) -> Result<(), RuntimeError> {
        if len == 0 {
            return Ok(());
        }
        match self {
            Poisoner::None => arena.zero(start, len)?,
            Poisoner::Tokens(t) => {
                let first = t.token(first_boundary)?;
                let rest = t.token(0)?;
                let bytes: Vec<u8> = (0..len / TOKEN_BYTES)
                    .flat_map(|i| if i == 0 { first } else { rest }.to_le_bytes())
                    .collect();
                arena.write_bytes(start, &bytes)?;
            }
            Poisoner::Shadow(map) => map.poison(arena, start..start + len, ShadowCode::Redzone)?,
        }
        Ok(())
    }

    fn freed(&self, arena: &mut Arena, range: Range<usize>) -> Result<(), RuntimeError> {
        if range.is_empty() {
            return Ok(());
        }
        match self {
            Poisoner::None => {}
            Poisoner::Tokens(t) => {
                let word = t.token(0)?.to_le_bytes();
                let bytes: Vec<u8> = word.iter().copied().cycle().take(range.len()).collect();
                arena.write_bytes(range.start, &bytes)?;
            }
            Poisoner::Shadow(map) => map.poison(arena, range, ShadowCode::Freed)?,
        }
        Ok(())
    }

    /// Zeroes memory and marks it addressable again.
    fn clear(&self, arena: &mut Arena, range: Range<usize>) -> Result<(), RuntimeError> {
        if range.is_empty() {
            return Ok(());
        }
        arena.zero(range.start, range.len())?;
        if let Poisoner::Shadow(map) = self {
            map.poison(arena, range, ShadowCode::Addressable)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Bump {
    region: RegionKind,
    cursor: usize,
    limit: usize,
}

impl Bump {
    fn take(&mut self, len: usize) -> Result<usize, RuntimeError> {
        let base = self.cursor;
        match base.checked_add(len) {
            Some(end) if end <= self.limit => {
                self.cursor = end;
                Ok(base)
            }
            _ => Err(RuntimeError::Exhausted(self.region)),
        }
    }
}

#[derive(Debug, Clone)]
struct Frame {
    start: usize,
    objects: Vec<ObjectId>,
}

#[derive(Debug, Clone)]
pub struct Runtime {
    mode: Mode,
    poisoner: Poisoner,
    config: RuntimeConfig,
    boundary_encoding: bool,
    heap: Bump,
    quarantine: VecDeque<ObjectId>,
    recycled: Vec<Range<usize>>,
    stack: Bump,
    frames: Vec<Frame>,
    globals: Bump,
    globals_sealed: bool,
    records: Vec<AllocationRecord>,
    bindings: BTreeMap<String, ObjectId>,
    ledger: ObjectLedger,
}

impl Runtime {
    /// Lays out the regions of `arena` and writes their guard words.
    pub fn new(arena: &mut Arena, mode: Mode, tokens: TokenContext, config: RuntimeConfig) -> Result<Self, RuntimeError> {
        if !matches!(config.redzone_tokens, 1 | 2 | 4) {
            return Err(RuntimeError::Config(format!(
                "redzone_tokens must be 1, 2 or 4, got {}",
                config.redzone_tokens
            )));
        }
        if mode == Mode::Fine && !tokens.config.has_boundary() {
            return Err(RuntimeError::Config("fine mode needs boundary bits".into()));
        }
        let poisoner = match mode {
            Mode::Native => Poisoner::None,
            Mode::Lite | Mode::Fine => Poisoner::Tokens(tokens),
            Mode::Shadow => Poisoner::Shadow(ShadowMap::new(arena.regions())),
        };
        let regions = arena.regions().clone();
        let mut rt = Self {
            mode,
            poisoner,
            config,
            boundary_encoding: mode == Mode::Fine,
            heap: Bump {
                region: RegionKind::Heap,
                cursor: regions.heap.start,
                limit: regions.heap.end,
            },
            quarantine: VecDeque::new(),
            recycled: Vec::new(),
            stack: Bump {
                region: RegionKind::Stack,
                cursor: regions.stack.start,
                limit: regions.stack.end,
            },
            frames: Vec::new(),
            globals: Bump {
                region: RegionKind::Global,
                cursor: regions.global.start,
                limit: regions.global.end,
            },
            globals_sealed: false,
            records: Vec::new(),
            bindings: BTreeMap::new(),
            ledger: ObjectLedger::for_mode(arena.len(), mode),
        };
        for kind in [RegionKind::Global, RegionKind::Stack, RegionKind::Heap] {
            let bump = rt.bump_mut(kind);
            if bump.limit - bump.cursor < TOKEN_BYTES {
                continue;
            }
            let guard = bump.take(TOKEN_BYTES)?;
            rt.poisoner.redzone(arena, guard, TOKEN_BYTES, 0)?;
            rt.ledger.record(LedgerEvent::Guard { addr: guard });
        }
        Ok(rt)
    }

    fn bump_mut(&mut self, kind: RegionKind) -> &mut Bump {
        match kind {
            RegionKind::Global => &mut self.globals,
            RegionKind::Stack => &mut self.stack,
            RegionKind::Heap | RegionKind::Shadow => &mut self.heap,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn config(&self) -> RuntimeConfig {
        self.config
    }

    pub fn ledger(&self) -> &ObjectLedger {
        &self.ledger
    }

    pub fn records(&self) -> &[AllocationRecord] {
        &self.records
    }

    pub fn record(&self, name: &str) -> Option<&AllocationRecord> {
        self.bindings.get(name).map(|&id| &self.records[id])
    }

    pub fn live_records(&self) -> impl Iterator<Item = &AllocationRecord> {
        self.records.iter().filter(|r| r.state == ObjectState::Live)
    }

    pub fn quarantine_len(&self) -> usize {
        self.quarantine.len()
    }

    pub fn heap_cursor(&self) -> usize {
        self.heap.cursor
    }

    pub fn stack_cursor(&self) -> usize {
        self.stack.cursor
    }

    pub fn seal_globals(&mut self) {
        self.globals_sealed = true;
    }

    /// Address of `offset` bytes into the object bound to `name`.
    pub fn resolve(&self, name: &str, offset: i64) -> Result<usize, RuntimeError> {
        let rec = self.record(name).ok_or_else(|| RuntimeError::UnknownId(name.into()))?;
        usize::try_from(rec.base as i64 + offset).map_err(|_| RuntimeError::OutOfRange {
            name: name.into(),
            offset,
        })
    }

    /// Informs the ledger of a program data write.
    pub fn note_write(&mut self, range: Range<usize>) {
        self.ledger.record(LedgerEvent::Write { range });
    }

    fn check_unbound(&self, name: &str) -> Result<(), RuntimeError> {
        match self.record(name) {
            Some(r) if r.state == ObjectState::Live => Err(RuntimeError::DuplicateId(name.into())),
            _ => Ok(()),
        }
    }

    fn first_boundary(&self, size: usize) -> u8 {
        if self.boundary_encoding {
            (size % TOKEN_BYTES) as u8
        } else {
            0
        }
    }

    /// Writes body, padding, redzone and tail for a new object and records it.
    fn place(
        &mut self,
        arena: &mut Arena,
        name: &str,
        region: RegionKind,
        base: usize,
        size: usize,
        footprint_end: usize,
    ) -> Result<ObjectId, RuntimeError> {
        let padding = padding_for(size, TOKEN_BYTES);
        let redzone_base = base + size + padding;
        let redzone_len = self.config.redzone_tokens * TOKEN_BYTES;
        let redzone_end = redzone_base + redzone_len;
        debug_assert!(redzone_end <= footprint_end);
        self.poisoner.body(arena, base, size, padding)?;
        self.poisoner
            .redzone(arena, redzone_base, redzone_len, self.first_boundary(size))?;
        self.poisoner
            .redzone(arena, redzone_end, footprint_end - redzone_end, 0)?;
        let object = self.records.len();
        self.records.push(AllocationRecord {
            object,
            name: name.to_string(),
            region,
            base,
            size,
            padding,
            redzone_base,
            redzone_len,
            footprint_end,
            state: ObjectState::Live,
        });
        self.bindings.insert(name.to_string(), object);
        self.ledger.record(LedgerEvent::Alloc {
            object,
            name: name.to_string(),
            region,
            base,
            size,
            redzone_len,
            footprint_end,
        });
        Ok(object)
    }

    fn footprint(&self, size: usize) -> usize {
        size + padding_for(size, TOKEN_BYTES) + self.config.redzone_tokens * TOKEN_BYTES
    }

    fn heap_alloc_unchecked(&mut self, arena: &mut Arena, name: &str, size: usize) -> Result<ObjectId, RuntimeError> {
        let need = self.footprint(size);
        let (base, end) = match self.recycled.iter().position(|c| c.len() >= need) {
            Some(i) => {
                let chunk = self.recycled.remove(i);
                (chunk.start, chunk.end)
            }
            None => {
                let base = self.heap.take(need)?;
                (base, base + need)
            }
        };
        self.place(arena, name, RegionKind::Heap, base, size, end)
    }

    pub fn heap_alloc(&mut self, arena: &mut Arena, name: &str, size: usize) -> Result<usize, RuntimeError> {
        self.check_unbound(name)?;
        let id = self.heap_alloc_unchecked(arena, name, size)?;
        Ok(self.records[id].base)
    }

    fn live_heap_object(&self, name: &str) -> Result<ObjectId, RuntimeError> {
        let &id = self
            .bindings
            .get(name)
            .ok_or_else(|| RuntimeError::UnknownId(name.into()))?;
        let rec = &self.records[id];
        if rec.region != RegionKind::Heap {
            return Err(RuntimeError::InvalidFree(name.into()));
        }
        if rec.state != ObjectState::Live {
            return Err(RuntimeError::DoubleFree(name.into()));
        }
        Ok(id)
    }

    fn free_object(&mut self, arena: &mut Arena, id: ObjectId) -> Result<(), RuntimeError> {
        let (base, rz) = (self.records[id].base, self.records[id].redzone_base);
        self.poisoner.freed(arena, base..rz)?;
        self.records[id].state = ObjectState::Quarantined;
        self.ledger.record(LedgerEvent::Free { object: id });
        self.quarantine.push_back(id);
        while self.quarantine.len() > self.config.quarantine {
            let old = self.quarantine.pop_front().expect("non-empty");
            let rec = &self.records[old];
            let (body, chunk) = (rec.base..rec.redzone_base, rec.base..rec.footprint_end);
            self.poisoner.clear(arena, body)?;
            self.records[old].state = ObjectState::Recycled;
            self.ledger.record(LedgerEvent::Recycle { object: old });
            self.recycled.push(chunk);
        }
        Ok(())
    }

    pub fn heap_free(&mut self, arena: &mut Arena, name: &str) -> Result<(), RuntimeError> {
        let id = self.live_heap_object(name)?;
        self.free_object(arena, id)
    }

    /// Allocates `new_size` bytes, copies the common prefix with checked
    /// word accesses, then frees the old object. `name` is rebound.
    pub fn heap_realloc(
        &mut self,
        arena: &mut Arena,
        name: &str,
        new_size: usize,
    ) -> Result<usize, RuntimeError> {
        let old = self.live_heap_object(name)?;
        let (old_base, old_size) = (self.records[old].base, self.records[old].size);
        let new = self.heap_alloc_unchecked(arena, name, new_size)?;
        let new_base = self.records[new].base;
        let n = old_size.min(new_size);
        for off in (0..n).step_by(TOKEN_BYTES) {
            let len = TOKEN_BYTES.min(n - off);
            let value = self
                .checked(arena, Access::read(old_base + off, len).expect("len in 1..=8"), 0)?
                .ok_or_else(|| RuntimeError::CopyViolation(name.into()))?;
            self.checked(arena, Access::write(new_base + off, len).expect("len in 1..=8"), value)?
                .ok_or_else(|| RuntimeError::CopyViolation(name.into()))?;
        }
        self.free_object(arena, old)?;
        Ok(new_base)
    }

    /// Runs one access under this runtime's mode: check, then perform.
    pub fn access(&self, arena: &mut Arena, access: &Access, value: u64) -> Result<AccessOutcome, RuntimeError> {
        match &self.poisoner {
            Poisoner::Tokens(t) => {
                let mode = self.mode.check_mode().expect("token modes check");
                Ok(checker::checked_access(arena, t, mode, access, value)?)
            }
            Poisoner::Shadow(map) => match map.check(arena, access)? {
                Some(v) => Ok(AccessOutcome::Violation(v)),
                None => Ok(AccessOutcome::Ok(checker::raw_access(arena, access, value)?)),
            },
            Poisoner::None => Ok(AccessOutcome::Ok(checker::raw_access(arena, access, value)?)),
        }
    }

    fn checked(&self, arena: &mut Arena, access: Access, value: u64) -> Result<Option<u64>, RuntimeError> {
        match self.access(arena, &access, value)? {
            AccessOutcome::Ok(v) => Ok(Some(v)),
            AccessOutcome::Violation(_) => Ok(None),
        }
    }

    pub fn push_frame(&mut self, arena: &mut Arena, objects: &[(String, usize)]) -> Result<Vec<usize>, RuntimeError> {
        for (i, (name, _)) in objects.iter().enumerate() {
            self.check_unbound(name)?;
            if objects[..i].iter().any(|(n, _)| n == name) {
                return Err(RuntimeError::DuplicateId(name.clone()));
            }
        }
        let total: usize = objects.iter().map(|(_, s)| self.footprint(*s)).sum();
        let start = self.stack.take(total)?;
        let mut cursor = start;
        let mut ids = Vec::with_capacity(objects.len());
        let mut bases = Vec::with_capacity(objects.len());
        for (name, size) in objects {
            let end = cursor + self.footprint(*size);
            ids.push(self.place(arena, name, RegionKind::Stack, cursor, *size, end)?);
            bases.push(cursor);
            cursor = end;
        }
        self.frames.push(Frame { start, objects: ids });
        Ok(bases)
    }

    pub fn pop_frame(&mut self, arena: &mut Arena) -> Result<(), RuntimeError> {
        let frame = self.frames.pop().ok_or(RuntimeError::EmptyStack)?;
        let range = frame.start..self.stack.cursor;
        self.poisoner.clear(arena, range.clone())?;
        self.stack.cursor = frame.start;
        for &id in &frame.objects {
            self.records[id].state = ObjectState::Popped;
            let name = &self.records[id].name;
            if self.bindings.get(name) == Some(&id) {
                self.bindings.remove(name);
            }
        }
        self.ledger.record(LedgerEvent::Pop {
            range,
            objects: frame.objects,
        });
        Ok(())
    }

    pub fn register_global(&mut self, arena: &mut Arena, name: &str, size: usize) -> Result<usize, RuntimeError> {
        if self.globals_sealed {
            return Err(RuntimeError::RegistrationClosed);
        }
        self.check_unbound(name)?;
        let need = self.footprint(size);
        let base = self.globals.take(need)?;
        let id = self.place(arena, name, RegionKind::Global, base, size, base + need)?;
        Ok(self.records[id].base)
    }
}
