//! Ground truth for every access, kept apart from the poisoning machinery.
//!
//! The ledger is an append-only log of layout events reported by the
//! runtime: where objects were placed, when they were freed, recycled or
//! popped. From those events alone it derives the state of every byte and
//! answers two questions: what an access truly is ([`ObjectLedger::classify`])
//! and what each checker should report for it ([`ObjectLedger::predict`]).
//! Arena contents are never consulted.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use serde::Serialize;

use crate::arena::RegionKind;
use crate::mode::Mode;
use crate::token::TOKEN_BYTES;

pub type ObjectId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Liveness {
    Live,
    Quarantined,
    Recycled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ObjectView {
    pub name: String,
    pub region: RegionKind,
    pub base: usize,
    pub size: usize,
    pub padding: usize,
    pub redzone_len: usize,
    pub liveness: Liveness,
}

impl ObjectView {
    pub fn redzone_base(&self) -> usize {
        self.base + self.size + self.padding
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LedgerEvent {
    /// A guard token word at the start of a region.
    Guard { addr: usize },
    /// An object placed at `base`. Memory up to `footprint_end` beyond its
    /// redzone is owned by the allocation and poisoned.
    Alloc {
        object: ObjectId,
        name: String,
        region: RegionKind,
        base: usize,
        size: usize,
        redzone_len: usize,
        footprint_end: usize,
    },
    Free { object: ObjectId },
    /// A quarantined object leaves the quarantine; its body is zeroed.
    Recycle { object: ObjectId },
    /// A stack frame is popped and zeroed.
    Pop { range: Range<usize>, objects: Vec<ObjectId> },
    /// Data written by the program.
    Write { range: Range<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ByteState {
    Body,
    Padding,
    Redzone(u8),
    Freed,
    Guard,
    Cleared,
    Clobbered,
}

impl ByteState {
    fn token_boundary(self) -> Option<u8> {
        match self {
            ByteState::Redzone(b) => Some(b),
            ByteState::Freed | ByteState::Guard => Some(0),
            _ => None,
        }
    }

    fn addressable(self) -> bool {
        matches!(self, ByteState::Body | ByteState::Cleared | ByteState::Clobbered)
    }
}

#[derive(Debug, Clone)]
struct Extent {
    range: Range<usize>,
    state: ByteState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessClass {
    Valid,
    OverflowPad,
    OverflowRedzone,
    Underflow,
    UseAfterFree,
    UnknownRegion,
}

impl AccessClass {
    pub fn as_str(self) -> &'static str {
        match self {
            AccessClass::Valid => "valid",
            AccessClass::OverflowPad => "overflow_pad",
            AccessClass::OverflowRedzone => "overflow_redzone",
            AccessClass::Underflow => "underflow",
            AccessClass::UseAfterFree => "use_after_free",
            AccessClass::UnknownRegion => "unknown_region",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            AccessClass::Valid,
            AccessClass::OverflowPad,
            AccessClass::OverflowRedzone,
            AccessClass::Underflow,
            AccessClass::UseAfterFree,
            AccessClass::UnknownRegion,
        ]
        .into_iter()
        .find(|c| c.as_str() == s)
    }

    pub fn is_error(self) -> bool {
        self != AccessClass::Valid
    }
}

impl fmt::Display for AccessClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Classification {
    pub class: AccessClass,
    pub owner: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ObjectLedger {
    arena_len: usize,
    embedded_tokens: bool,
    boundary_encoding: bool,
    events: Vec<LedgerEvent>,
    objects: Vec<ObjectView>,
    bindings: BTreeMap<String, ObjectId>,
    extents: Vec<Extent>,
}

fn padding_of(size: usize) -> usize {
    (TOKEN_BYTES - size % TOKEN_BYTES) % TOKEN_BYTES
}

impl ObjectLedger {
    /// `embedded_tokens`: poison lives in application memory, so program
    /// writes over a token erase it. `boundary_encoding`: the first redzone
    /// token carries `size mod 8`.
    pub fn new(arena_len: usize, embedded_tokens: bool, boundary_encoding: bool) -> Self {
        Self {
            arena_len,
            embedded_tokens,
            boundary_encoding,
            events: Vec::new(),
            objects: Vec::new(),
            bindings: BTreeMap::new(),
            extents: Vec::new(),
        }
    }

    pub fn for_mode(arena_len: usize, mode: Mode) -> Self {
        Self::new(arena_len, mode.embeds_tokens(), mode == Mode::Fine)
    }

    pub fn events(&self) -> &[LedgerEvent] {
        &self.events
    }

    /// Id the next `Alloc` event must carry.
    pub fn next_object_id(&self) -> ObjectId {
        self.objects.len()
    }

    pub fn object(&self, id: ObjectId) -> Option<&ObjectView> {
        self.objects.get(id)
    }

    pub fn binding(&self, name: &str) -> Option<&ObjectView> {
        self.bindings.get(name).map(|&id| &self.objects[id])
    }

    /// Names currently bound to live objects, with their views.
    pub fn live_objects(&self) -> impl Iterator<Item = &ObjectView> {
        self.bindings
            .values()
            .map(|&id| &self.objects[id])
            .filter(|o| o.liveness == Liveness::Live)
    }

    fn push_extent(&mut self, range: Range<usize>, state: ByteState) {
        if !range.is_empty() {
            self.extents.push(Extent { range, state });
        }
    }

    pub fn record(&mut self, event: LedgerEvent) {
        match &event {
            LedgerEvent::Guard { addr } => {
                self.push_extent(*addr..*addr + TOKEN_BYTES, ByteState::Guard);
            }
            LedgerEvent::Alloc {
                object,
                name,
                region,
                base,
                size,
                redzone_len,
                footprint_end,
            } => {
                assert_eq!(*object, self.objects.len(), "object ids are dense");
                let padding = padding_of(*size);
                let view = ObjectView {
                    name: name.clone(),
                    region: *region,
                    base: *base,
                    size: *size,
                    padding,
                    redzone_len: *redzone_len,
                    liveness: Liveness::Live,
                };
                let rz = view.redzone_base();
                let first_boundary = if self.boundary_encoding {
                    (*size % TOKEN_BYTES) as u8
                } else {
                    0
                };
                self.push_extent(*base..*base + *size, ByteState::Body);
                self.push_extent(*base + *size..rz, ByteState::Padding);
                if *redzone_len > 0 {
                    self.push_extent(rz..rz + TOKEN_BYTES, ByteState::Redzone(first_boundary));
                }
                self.push_extent(rz + TOKEN_BYTES.min(*redzone_len)..*footprint_end, ByteState::Redzone(0));
                self.objects.push(view);
                self.bindings.insert(name.clone(), *object);
            }
            LedgerEvent::Free { object } => {
                let o = &mut self.objects[*object];
                o.liveness = Liveness::Quarantined;
                let range = o.base..o.redzone_base();
                self.push_extent(range, ByteState::Freed);
            }
            LedgerEvent::Recycle { object } => {
                let o = &mut self.objects[*object];
                o.liveness = Liveness::Recycled;
                let range = o.base..o.redzone_base();
                self.push_extent(range, ByteState::Cleared);
            }
            LedgerEvent::Pop { range, objects } => {
                for &id in objects {
                    let name = self.objects[id].name.clone();
                    if self.bindings.get(&name) == Some(&id) {
                        self.bindings.remove(&name);
                    }
                }
                self.push_extent(range.clone(), ByteState::Cleared);
            }
            LedgerEvent::Write { range } => {
                if self.embedded_tokens && !range.is_empty() {
                    let first = range.start / TOKEN_BYTES;
                    let last = (range.end - 1) / TOKEN_BYTES;
                    for w in first..=last {
                        let addr = w * TOKEN_BYTES;
                        if self.word_token(addr).is_some() {
                            self.push_extent(addr..addr + TOKEN_BYTES, ByteState::Clobbered);
                        }
                    }
                }
            }
        }
        self.events.push(event);
    }

    fn byte_state(&self, addr: usize) -> ByteState {
        self.extents
            .iter()
            .rev()
            .find(|e| e.range.contains(&addr))
            .map_or(ByteState::Cleared, |e| e.state)
    }

    /// Boundary value of the token at word address `addr`, if the word is one.
    fn word_token(&self, addr: usize) -> Option<u8> {
        self.byte_state(addr).token_boundary()
    }

    /// Resolves a trace-level `(name, offset)` to an absolute address.
    pub fn resolve(&self, name: &str, offset: i64) -> Option<usize> {
        let o = self.binding(name)?;
        let addr = o.base as i64 + offset;
        usize::try_from(addr).ok()
    }

    /// True class of a `size`-byte access at `offset` into the object bound
    /// to `name`, by interval arithmetic only.
    pub fn classify(&self, name: &str, offset: i64, size: usize) -> Classification {
        let Some(o) = self.binding(name) else {
            return Classification {
                class: AccessClass::UnknownRegion,
                owner: None,
            };
        };
        let end = offset + size as i64;
        let class = if o.liveness != Liveness::Live {
            AccessClass::UseAfterFree
        } else if offset < 0 {
            AccessClass::Underflow
        } else if end <= o.size as i64 {
            AccessClass::Valid
        } else if end <= (o.size + o.padding) as i64 {
            AccessClass::OverflowPad
        } else {
            AccessClass::OverflowRedzone
        };
        Classification {
            class,
            owner: Some(o.name.clone()),
        }
    }

    /// What the checker for `mode` should report for an access covering
    /// `lb..=ub`, modelled from the layout.
    pub fn predict(&self, lb: usize, ub: usize, mode: Mode) -> bool {
        match mode {
            Mode::Native => false,
            Mode::Shadow => (lb..=ub).any(|a| !self.byte_state(a).addressable()),
            Mode::Lite | Mode::Fine => {
                let word = ub - ub % TOKEN_BYTES;
                if self.word_token(word).is_some() {
                    return true;
                }
                if mode == Mode::Lite {
                    return false;
                }
                let next = word + TOKEN_BYTES;
                if next + TOKEN_BYTES > self.arena_len {
                    return false;
                }
                match self.word_token(next) {
                    Some(b) => b != 0 && (ub % TOKEN_BYTES) as u8 >= b,
                    None => false,
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ledger_with_13(mode: Mode) -> ObjectLedger {
        let mut l = ObjectLedger::for_mode(1 << 20, mode);
        l.record(LedgerEvent::Guard { addr: 0 });
        l.record(LedgerEvent::Alloc {
            object: 0,
            name: "a".into(),
            region: RegionKind::Heap,
            base: 8,
            size: 13,
            redzone_len: 8,
            footprint_end: 32,
        });
        l
    }

    #[test]
    fn classification() {
        let mut l = ledger_with_13(Mode::Fine);
        assert_eq!(l.classify("a", 5, 4).class, AccessClass::Valid);
        assert_eq!(l.classify("a", 13, 1).class, AccessClass::OverflowPad);
        assert_eq!(l.classify("a", 12, 4).class, AccessClass::OverflowPad);
        assert_eq!(l.classify("a", 15, 2).class, AccessClass::OverflowRedzone);
        assert_eq!(l.classify("a", -1, 1).class, AccessClass::Underflow);
        assert_eq!(l.classify("b", 0, 1).class, AccessClass::UnknownRegion);
        l.record(LedgerEvent::Free { object: 0 });
        let c = l.classify("a", 0, 8);
        assert_eq!(c.class, AccessClass::UseAfterFree);
        assert_eq!(c.owner.as_deref(), Some("a"));
    }

    #[test]
    fn predictions() {
        let fine = ledger_with_13(Mode::Fine);
        let lite = ledger_with_13(Mode::Lite);
        let shadow = ledger_with_13(Mode::Shadow);
        // offset 12 ok, 13..15 pad, 16 redzone (base 8)
        for (off, f, l, s) in [(12, false, false, false), (13, true, false, true), (15, true, false, true), (16, true, true, true)] {
            let a = 8 + off;
            assert_eq!(fine.predict(a, a, Mode::Fine), f, "fine {off}");
            assert_eq!(lite.predict(a, a, Mode::Lite), l, "lite {off}");
            assert_eq!(shadow.predict(a, a, Mode::Shadow), s, "shadow {off}");
            assert!(!fine.predict(a, a, Mode::Native));
        }
        // underflow into the guard
        assert!(fine.predict(7, 7, Mode::Fine));
        // ub-straddle: lb in guard, ub in body is missed by RET but not shadow
        assert!(!fine.predict(4, 11, Mode::Fine));
        assert!(shadow.predict(4, 11, Mode::Shadow));
    }

    #[test]
    fn clobbered_tokens_stop_predicting() {
        let mut l = ledger_with_13(Mode::Fine);
        assert!(l.predict(0, 0, Mode::Fine));
        l.record(LedgerEvent::Write { range: 6..10 });
        assert!(!l.predict(0, 0, Mode::Fine));
        let mut s = ledger_with_13(Mode::Shadow);
        s.record(LedgerEvent::Write { range: 6..10 });
        assert!(s.predict(0, 0, Mode::Shadow));
    }

    #[test]
    fn recycle_and_pop_clear() {
        let mut l = ledger_with_13(Mode::Fine);
        l.record(LedgerEvent::Free { object: 0 });
        assert!(l.predict(8, 8, Mode::Fine));
        l.record(LedgerEvent::Recycle { object: 0 });
        assert!(!l.predict(8, 8, Mode::Fine));
        assert_eq!(l.classify("a", 0, 1).class, AccessClass::UseAfterFree);
        // redzone survives recycling
        assert!(l.predict(24, 24, Mode::Fine));

        l.record(LedgerEvent::Alloc {
            object: 1,
            name: "s".into(),
            region: RegionKind::Stack,
            base: 100 * 8,
            size: 8,
            redzone_len: 8,
            footprint_end: 100 * 8 + 16,
        });
        l.record(LedgerEvent::Pop { range: 800..816, objects: vec![1] });
        assert_eq!(l.classify("s", 0, 1).class, AccessClass::UnknownRegion);
        assert!(!l.predict(808, 808, Mode::Fine));
    }

    #[test]
    fn boundary_check_skipped_at_arena_end() {
        let mut l = ObjectLedger::for_mode(64, Mode::Fine);
        l.record(LedgerEvent::Alloc {
            object: 0,
            name: "x".into(),
            region: RegionKind::Heap,
            base: 40,
            size: 5,
            redzone_len: 8,
            footprint_end: 56,
        });
        assert!(l.predict(45, 45, Mode::Fine));
        l.record(LedgerEvent::Alloc {
            object: 1,
            name: "y".into(),
            region: RegionKind::Heap,
            base: 56,
            size: 5,
            redzone_len: 0,
            footprint_end: 64,
        });
        assert!(!l.predict(61, 61, Mode::Fine));
        assert!(l.predict(61, 61, Mode::Shadow));
    }
}
