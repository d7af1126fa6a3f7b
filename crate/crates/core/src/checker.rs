//! Instrumentation semantics: the RET check and the refined boundary check
//! run before every modelled load or store.

use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::arena::{Arena, ArenaError, LoadKind};
use crate::token::{DecodedToken, TokenContext, TOKEN_BYTES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessKind {
    Read,
    Write,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("access size {0} not in 1..=8")]
pub struct BadAccessSize(pub usize);

/// A primitive load or store of 1..=8 bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Access {
    pub base: usize,
    pub size: usize,
    pub kind: AccessKind,
}

impl Access {
    pub fn new(base: usize, size: usize, kind: AccessKind) -> Result<Self, BadAccessSize> {
        if !(1..=TOKEN_BYTES).contains(&size) {
            return Err(BadAccessSize(size));
        }
        Ok(Self { base, size, kind })
    }

    pub fn read(base: usize, size: usize) -> Result<Self, BadAccessSize> {
        Self::new(base, size, AccessKind::Read)
    }

    pub fn write(base: usize, size: usize) -> Result<Self, BadAccessSize> {
        Self::new(base, size, AccessKind::Write)
    }

    /// First byte accessed.
    pub fn lb(&self) -> usize {
        self.base
    }

    /// Last byte accessed.
    pub fn ub(&self) -> usize {
        self.base + self.size - 1
    }

    /// Token pointer: `ub` rounded down to the token size.
    pub fn token_ptr(&self) -> usize {
        let ub = self.ub();
        ub - ub % TOKEN_BYTES
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckMode {
    Lite,
    Fine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    RetToken,
    Boundary,
    Shadow,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub access: Access,
    /// Token word that triggered the report; for shadow reports, the shadow byte.
    pub token_addr: usize,
    pub token: Option<DecodedToken>,
    pub shadow_code: Option<u8>,
    pub instruction_index: Option<usize>,
}

impl Violation {
    pub fn at_instruction(mut self, index: usize) -> Self {
        self.instruction_index = Some(index);
        self
    }
}

#[derive(Serialize)]
struct ViolationRecord {
    kind: ViolationKind,
    base: usize,
    size: usize,
    access_kind: AccessKind,
    token_addr: usize,
    boundary: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    shadow_code: Option<u8>,
    instruction_index: Option<usize>,
}

impl Serialize for Violation {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        ViolationRecord {
            kind: self.kind,
            base: self.access.base,
            size: self.access.size,
            access_kind: self.access.kind,
            token_addr: self.token_addr,
            boundary: self.token.map(|t| t.boundary),
            shadow_code: self.shadow_code,
            instruction_index: self.instruction_index,
        }
        .serialize(serializer)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AccessOutcome {
    /// The access was performed; carries the value read (or written).
    Ok(u64),
    /// The access was suppressed.
    Violation(Violation),
}

impl AccessOutcome {
    pub fn violation(&self) -> Option<&Violation> {
        match self {
            AccessOutcome::Violation(v) => Some(v),
            AccessOutcome::Ok(_) => None,
        }
    }
}

fn token_violation(kind: ViolationKind, access: &Access, token_addr: usize, token: DecodedToken) -> Violation {
    Violation {
        kind,
        access: *access,
        token_addr,
        token: Some(token),
        shadow_code: None,
        instruction_index: None,
    }
}

/// Loads the token word containing `ub` and flags the access if it holds the nonce.
pub fn ret_check(arena: &mut Arena, tokens: &TokenContext, access: &Access) -> Result<Option<Violation>, ArenaError> {
    if !arena.contains(access.base, access.size) {
        return Err(ArenaError::Fault {
            addr: access.base,
            len: access.size,
        });
    }
    let tptr = access.token_ptr();
    let word = arena.read_word(tptr, LoadKind::Token)?;
    if tokens.is_poisoned(word) {
        return Ok(Some(token_violation(
            ViolationKind::RetToken,
            access,
            tptr,
            tokens.decode(word),
        )));
    }
    Ok(None)
}

/// Examines the word after the one holding `ub`. If it is a token with a
/// non-zero boundary `b`, the current word holds an object end and the
/// access is in error iff `ub mod 8 >= b`. A boundary of 0 means the whole
/// preceding word is valid. Skipped when the next word leaves the arena.
pub fn boundary_check(arena: &mut Arena, tokens: &TokenContext, access: &Access) -> Result<Option<Violation>, ArenaError> {
    let next = access.token_ptr() + TOKEN_BYTES;
    if !arena.contains(next, TOKEN_BYTES) {
        return Ok(None);
    }
    let word = arena.read_word(next, LoadKind::Token)?;
    if !tokens.is_poisoned(word) {
        return Ok(None);
    }
    let token = tokens.decode(word);
    let offset = (access.ub() % TOKEN_BYTES) as u8;
    if token.boundary != 0 && offset >= token.boundary {
        return Ok(Some(token_violation(ViolationKind::Boundary, access, next, token)));
    }
    Ok(None)
}

/// Runs the checks for `mode`, then performs the access only if they pass.
/// Writes store the low `access.size` bytes of `value`.
pub fn checked_access(
    arena: &mut Arena,
    tokens: &TokenContext,
    mode: CheckMode,
    access: &Access,
    value: u64,
) -> Result<AccessOutcome, ArenaError> {
    debug_assert!(mode == CheckMode::Lite || tokens.config.has_boundary());
    if let Some(v) = ret_check(arena, tokens, access)? {
        return Ok(AccessOutcome::Violation(v));
    }
    if mode == CheckMode::Fine {
        if let Some(v) = boundary_check(arena, tokens, access)? {
            return Ok(AccessOutcome::Violation(v));
        }
    }
    Ok(AccessOutcome::Ok(raw_access(arena, access, value)?))
}

/// The uninstrumented access itself.
pub fn raw_access(arena: &mut Arena, access: &Access, value: u64) -> Result<u64, ArenaError> {
    match access.kind {
        AccessKind::Read => {
            let bytes = arena.read_bytes(access.base, access.size, LoadKind::Data)?;
            let mut buf = [0u8; 8];
            buf[..access.size].copy_from_slice(bytes);
            Ok(u64::from_le_bytes(buf))
        }
        AccessKind::Write => {
            let bytes = value.to_le_bytes();
            arena.write_bytes(access.base, &bytes[..access.size])?;
            Ok(value)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token::TokenConfig;

    fn setup(config: TokenConfig) -> (Arena, TokenContext) {
        let arena = Arena::new(4 * 4096, 4096).unwrap();
        (arena, TokenContext::new(config, 11))
    }

    // 13-byte object at 0, token with b=5 at 16.
    fn fig2(arena: &mut Arena, t: &TokenContext) {
        arena.write_word(16, t.token(5).unwrap().0).unwrap();
    }

    #[test]
    fn access_bounds() {
        let a = Access::read(14, 4).unwrap();
        assert_eq!((a.lb(), a.ub(), a.token_ptr()), (14, 17, 16));
        assert_eq!(Access::read(0, 1).unwrap().token_ptr(), 0);
        assert!(Access::read(0, 0).is_err());
        assert!(Access::read(0, 9).is_err());
    }

    #[test]
    fn ret_check_cases() {
        let (mut a, t) = setup(TokenConfig::fine());
        fig2(&mut a, &t);
        a.write_word(8, 0x1122_3344_5566_7788).unwrap();
        assert_eq!(ret_check(&mut a, &t, &Access::read(8, 8).unwrap()).unwrap(), None);
        let v = ret_check(&mut a, &t, &Access::read(14, 4).unwrap()).unwrap().unwrap();
        assert_eq!(v.kind, ViolationKind::RetToken);
        assert_eq!(v.token_addr, 16);
        assert_eq!(a.counters().token_loads, 2);
        assert!(ret_check(&mut a, &t, &Access::read(4 * 4096 - 4, 8).unwrap()).is_err());
    }

    #[test]
    fn boundary_check_fig2() {
        let (mut a, t) = setup(TokenConfig::fine());
        fig2(&mut a, &t);
        let hit = |a: &mut Arena, base, size| boundary_check(a, &t, &Access::read(base, size).unwrap()).unwrap();
        assert_eq!(hit(&mut a, 13, 1).unwrap().kind, ViolationKind::Boundary);
        assert!(hit(&mut a, 12, 1).is_none());
        assert!(hit(&mut a, 8, 8).is_some());
        assert!(hit(&mut a, 8, 5).is_none());
        // Word 0..7 is followed by data, not a token.
        assert!(hit(&mut a, 0, 8).is_none());
    }

    #[test]
    fn boundary_zero_means_full_word_valid() {
        let (mut a, t) = setup(TokenConfig::fine());
        a.write_word(16, t.token(0).unwrap().0).unwrap();
        assert!(boundary_check(&mut a, &t, &Access::read(8, 8).unwrap()).unwrap().is_none());
    }

    #[test]
    fn boundary_check_skipped_at_arena_end() {
        let (mut a, t) = setup(TokenConfig::fine());
        let last = a.len() - 8;
        let before = a.counters().token_loads;
        assert!(boundary_check(&mut a, &t, &Access::read(last, 8).unwrap()).unwrap().is_none());
        assert_eq!(a.counters().token_loads, before);
    }

    #[test]
    fn checked_access_modes() {
        let (mut a, fine) = setup(TokenConfig::fine());
        fig2(&mut a, &fine);
        let off_by_one = Access::read(13, 1).unwrap();
        let out = checked_access(&mut a, &fine, CheckMode::Fine, &off_by_one, 0).unwrap();
        assert!(matches!(out, AccessOutcome::Violation(ref v) if v.kind == ViolationKind::Boundary));

        let (mut b, lite) = setup(TokenConfig::lite());
        b.write_word(16, lite.token(0).unwrap().0).unwrap();
        let out = checked_access(&mut b, &lite, CheckMode::Lite, &off_by_one, 0).unwrap();
        assert_eq!(out, AccessOutcome::Ok(0));
        assert_eq!(b.counters().token_loads, 1);
    }

    #[test]
    fn violating_write_is_suppressed() {
        let (mut a, t) = setup(TokenConfig::fine());
        fig2(&mut a, &t);
        let token = a.peek_word(16).unwrap();
        let w = Access::write(16, 4).unwrap();
        let out = checked_access(&mut a, &t, CheckMode::Fine, &w, 0xdead_beef).unwrap();
        assert!(out.violation().is_some());
        assert_eq!(a.peek_word(16).unwrap(), token);

        let ok = Access::write(0, 8).unwrap();
        a.snapshot();
        let out = checked_access(&mut a, &t, CheckMode::Fine, &ok, 0x0102_0304_0506_0708).unwrap();
        assert_eq!(out, AccessOutcome::Ok(0x0102_0304_0506_0708));
        assert_eq!(a.peek_word(0).unwrap(), 0x0102_0304_0506_0708);
        assert_eq!(a.execution_metrics().dirty_pages, 1);
    }

    #[test]
    fn violation_json_fields() {
        let (mut a, t) = setup(TokenConfig::fine());
        fig2(&mut a, &t);
        let v = ret_check(&mut a, &t, &Access::write(16, 1).unwrap())
            .unwrap()
            .unwrap()
            .at_instruction(3);
        let json = serde_json::to_value(&v).unwrap();
        assert_eq!(json["kind"], "ret_token");
        assert_eq!(json["base"], 16);
        assert_eq!(json["size"], 1);
        assert_eq!(json["access_kind"], "write");
        assert_eq!(json["token_addr"], 16);
        assert_eq!(json["boundary"], 5);
        assert_eq!(json["instruction_index"], 3);
    }
}
