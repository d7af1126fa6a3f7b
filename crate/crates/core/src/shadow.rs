//! Disjoint shadow-memory baseline in the style of AddressSanitizer.
//!
//! Each 8-byte application word maps to one shadow byte at
//! `offset_shadow + addr / 8`. A shadow byte of 0 means all 8 bytes are
//! addressable, `k` in 1..=7 means the first `k` bytes are, and the poison
//! codes mark redzones and freed memory.

use std::ops::Range;

use serde::Serialize;
use thiserror::Error;

use crate::arena::{Arena, ArenaError, LoadKind, RegionMap};
use crate::checker::{Access, Violation, ViolationKind};

pub const REDZONE_CODE: u8 = 0xfa;
pub const FREED_CODE: u8 = 0xfd;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShadowError {
    #[error("address {0:#x} has no shadow")]
    NoShadow(usize),
    #[error("range {start:#x}..{end:#x} is not word aligned for code {code:?}")]
    Misaligned { start: usize, end: usize, code: ShadowCode },
    #[error(transparent)]
    Arena(#[from] ArenaError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ShadowCode {
    Addressable,
    Partial(u8),
    Redzone,
    Freed,
}

impl ShadowCode {
    pub fn byte(self) -> u8 {
        match self {
            ShadowCode::Addressable => 0,
            ShadowCode::Partial(k) => k,
            ShadowCode::Redzone => REDZONE_CODE,
            ShadowCode::Freed => FREED_CODE,
        }
    }
}

fn addressable(code: u8, offset_in_word: usize) -> bool {
    code == 0 || (code < 8 && offset_in_word < usize::from(code))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShadowMap {
    offset: usize,
    app_end: usize,
}

impl ShadowMap {
    pub fn new(regions: &RegionMap) -> Self {
        Self {
            offset: regions.shadow.start,
            app_end: regions.application_end(),
        }
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn shadow_address(&self, addr: usize) -> Result<usize, ShadowError> {
        if addr >= self.app_end {
            return Err(ShadowError::NoShadow(addr));
        }
        Ok(self.offset + addr / 8)
    }

    /// Sets the shadow of `range` to `code`. The range must be word aligned;
    /// `Partial(k)` applies to exactly one word.
    pub fn poison(&self, arena: &mut Arena, range: Range<usize>, code: ShadowCode) -> Result<(), ShadowError> {
        let misaligned = || ShadowError::Misaligned {
            start: range.start,
            end: range.end,
            code,
        };
        if range.start % 8 != 0 || range.end % 8 != 0 {
            return Err(misaligned());
        }
        if let ShadowCode::Partial(k) = code {
            if range.len() != 8 || !(1..8).contains(&k) {
                return Err(misaligned());
            }
        }
        if range.is_empty() {
            return Ok(());
        }
        let first = self.shadow_address(range.start)?;
        self.shadow_address(range.end - 1)?;
        let bytes = vec![code.byte(); range.len() / 8];
        arena.write_bytes(first, &bytes)?;
        Ok(())
    }

    /// Marks `size` bytes at `base` addressable, with a trailing partial word.
    pub fn unpoison_object(&self, arena: &mut Arena, base: usize, size: usize) -> Result<(), ShadowError> {
        let full = size / 8 * 8;
        self.poison(arena, base..base + full, ShadowCode::Addressable)?;
        if size % 8 != 0 {
            self.poison(arena, base + full..base + full + 8, ShadowCode::Partial((size % 8) as u8))?;
        }
        Ok(())
    }

    /// Byte-precise check of every byte in `lb..=ub`.
    pub fn check(&self, arena: &mut Arena, access: &Access) -> Result<Option<Violation>, ShadowError> {
        let first_word = access.lb() / 8;
        let last_word = access.ub() / 8;
        let shadow_first = self.shadow_address(access.lb())?;
        self.shadow_address(access.ub())?;
        let codes = arena
            .read_bytes(shadow_first, last_word - first_word + 1, LoadKind::Token)?
            .to_vec();
        for addr in access.lb()..=access.ub() {
            let code = codes[addr / 8 - first_word];
            if !addressable(code, addr % 8) {
                return Ok(Some(Violation {
                    kind: ViolationKind::Shadow,
                    access: *access,
                    token_addr: self.offset + addr / 8,
                    token: None,
                    shadow_code: Some(code),
                    instruction_index: None,
                }));
            }
        }
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Arena, ShadowMap) {
        let arena = Arena::new(36 * 4096, 4096).unwrap();
        let map = ShadowMap::new(arena.regions());
        (arena, map)
    }

    #[test]
    fn address_formula() {
        let (a, m) = setup();
        let off = m.offset();
        assert_eq!(off, a.regions().shadow.start);
        assert_eq!(m.shadow_address(0).unwrap(), off);
        assert_eq!(m.shadow_address(16).unwrap(), off + 2);
        assert_eq!(m.shadow_address(4096).unwrap(), off + 512);
        assert!(m.shadow_address(off).is_err());
    }

    #[test]
    fn poison_encoding_of_size_13_object() {
        let (mut a, m) = setup();
        m.unpoison_object(&mut a, 0, 13).unwrap();
        m.poison(&mut a, 16..24, ShadowCode::Redzone).unwrap();
        assert_eq!(a.peek(m.offset(), 3).unwrap(), &[0, 5, REDZONE_CODE]);
        assert!(m.poison(&mut a, 3..8, ShadowCode::Redzone).is_err());
        assert!(m.poison(&mut a, 0..16, ShadowCode::Partial(5)).is_err());
    }

    #[test]
    fn poison_dirties_shadow_pages_only() {
        let (mut a, m) = setup();
        a.snapshot();
        m.poison(&mut a, 16..24, ShadowCode::Redzone).unwrap();
        let pages = a.dirty_pages();
        assert_eq!(pages.len(), 1);
        assert!(!a.is_application_page(pages[0]));
    }

    #[test]
    fn byte_precise_checks() {
        let (mut a, m) = setup();
        m.unpoison_object(&mut a, 0, 13).unwrap();
        m.poison(&mut a, 16..24, ShadowCode::Redzone).unwrap();
        let chk = |a: &mut Arena, base, size| m.check(a, &Access::read(base, size).unwrap()).unwrap();
        let v = chk(&mut a, 13, 1).unwrap();
        assert_eq!(v.shadow_code, Some(5));
        assert!(chk(&mut a, 12, 1).is_none());
        assert!(chk(&mut a, 5, 8).is_none());
        assert!(chk(&mut a, 10, 4).is_some());
        assert_eq!(chk(&mut a, 16, 1).unwrap().shadow_code, Some(REDZONE_CODE));

        m.poison(&mut a, 0..16, ShadowCode::Freed).unwrap();
        assert_eq!(chk(&mut a, 0, 8).unwrap().shadow_code, Some(FREED_CODE));
        m.poison(&mut a, 0..16, ShadowCode::Addressable).unwrap();
        assert_eq!(a.peek(m.offset(), 2).unwrap(), &[0, 0]);
        assert!(chk(&mut a, 0, 8).is_none());
    }
}
