//! Token layout, nonce generation and the poisoned-word predicate.
//!
//! A token is one little-endian 64-bit word. The low `boundary_bits` bits
//! hold the boundary encoding (object size modulo the token size), the next
//! `random_bits` bits hold the per-execution nonce. Any bits above
//! `random_bits + boundary_bits` are ignored, which is what makes the
//! reduced-width configurations used for collision statistics work.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Size of one token in bytes.
pub const TOKEN_BYTES: usize = 8;

/// Number of boundary bits needed to represent every offset inside a token.
pub const BOUNDARY_BITS: u32 = TOKEN_BYTES.trailing_zeros();

/// ChaCha stream used for the execution nonce.
pub const NONCE_STREAM: u64 = 0;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TokenError {
    #[error("invalid token config: random_bits={random_bits}, boundary_bits={boundary_bits}")]
    InvalidConfig { random_bits: u32, boundary_bits: u32 },
    #[error("boundary {boundary} does not fit in {boundary_bits} boundary bits")]
    BoundaryOutOfRange { boundary: u8, boundary_bits: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenConfig {
    pub random_bits: u32,
    pub boundary_bits: u32,
    pub token_bytes: usize,
}

impl TokenConfig {
    /// RET check plus byte-precise boundary encoding: 61 nonce bits, 3 boundary bits.
    pub const fn fine() -> Self {
        Self {
            random_bits: 64 - BOUNDARY_BITS,
            boundary_bits: BOUNDARY_BITS,
            token_bytes: TOKEN_BYTES,
        }
    }

    /// RET check only: the whole word is nonce.
    pub const fn lite() -> Self {
        Self {
            random_bits: 64,
            boundary_bits: 0,
            token_bytes: TOKEN_BYTES,
        }
    }

    pub fn new(random_bits: u32, boundary_bits: u32) -> Result<Self, TokenError> {
        let config = Self {
            random_bits,
            boundary_bits,
            token_bytes: TOKEN_BYTES,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), TokenError> {
        let ok = self.token_bytes == TOKEN_BYTES
            && (self.boundary_bits == 0 || self.boundary_bits == BOUNDARY_BITS)
            && self.random_bits >= 1
            && self.random_bits + self.boundary_bits <= 64;
        if ok {
            Ok(())
        } else {
            Err(TokenError::InvalidConfig {
                random_bits: self.random_bits,
                boundary_bits: self.boundary_bits,
            })
        }
    }

    pub fn has_boundary(&self) -> bool {
        self.boundary_bits > 0
    }

    pub fn random_mask(&self) -> u64 {
        low_mask(self.random_bits)
    }

    pub fn boundary_mask(&self) -> u64 {
        low_mask(self.boundary_bits)
    }

    /// Total number of meaningful bits in a token word.
    pub fn width(&self) -> u32 {
        self.random_bits + self.boundary_bits
    }
}

fn low_mask(bits: u32) -> u64 {
    if bits >= 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

/// Per-execution random constant compared against token random fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Nonce(u64);

impl Nonce {
    pub fn value(self) -> u64 {
        self.0
    }

    /// Wraps a raw value without the degenerate-value checks. Test use only.
    pub fn from_raw(value: u64) -> Self {
        Self(value)
    }
}

/// Draws the nonce for `seed` from the dedicated nonce stream.
pub fn generate_nonce(config: &TokenConfig, seed: u64) -> Nonce {
    generate_nonce_in_stream(config, seed, NONCE_STREAM)
}

/// Draws a nonce from stream `stream` of the ChaCha8 generator seeded with
/// `seed`. All-zero and all-one values are rejected and re-drawn from the
/// same stream, since zeroed or 0xff-filled memory would otherwise always
/// read as poisoned.
pub fn generate_nonce_in_stream(config: &TokenConfig, seed: u64, stream: u64) -> Nonce {
    let mask = config.random_mask();
    // With a single random bit both values are degenerate.
    if config.random_bits < 2 {
        return Nonce(1);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    loop {
        let candidate = rng.random::<u64>() & mask;
        if candidate != 0 && candidate != mask {
            return Nonce(candidate);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodedToken {
    pub random: u64,
    pub boundary: u8,
}

/// One 64-bit memory word viewed as a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TokenWord(pub u64);

impl TokenWord {
    pub fn encode(nonce: Nonce, boundary: u8, config: &TokenConfig) -> Result<Self, TokenError> {
        if u64::from(boundary) > config.boundary_mask() {
            return Err(TokenError::BoundaryOutOfRange {
                boundary,
                boundary_bits: config.boundary_bits,
            });
        }
        let random = nonce.value() & config.random_mask();
        let shifted = if config.boundary_bits == 0 {
            random
        } else {
            random << config.boundary_bits
        };
        Ok(Self(shifted | u64::from(boundary)))
    }

    pub fn decode(self, config: &TokenConfig) -> DecodedToken {
        let random = if config.boundary_bits == 0 {
            self.0
        } else {
            self.0 >> config.boundary_bits
        } & config.random_mask();
        DecodedToken {
            random,
            boundary: (self.0 & config.boundary_mask()) as u8,
        }
    }

    pub fn is_poisoned(self, nonce: Nonce, config: &TokenConfig) -> bool {
        self.decode(config).random == nonce.value() & config.random_mask()
    }

    pub fn to_le_bytes(self) -> [u8; TOKEN_BYTES] {
        self.0.to_le_bytes()
    }

    pub fn from_le_bytes(bytes: [u8; TOKEN_BYTES]) -> Self {
        Self(u64::from_le_bytes(bytes))
    }
}

/// Nonce and layout bundled together; everything the checkers need to
/// recognise a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenContext {
    pub nonce: Nonce,
    pub config: TokenConfig,
}

impl TokenContext {
    pub fn new(config: TokenConfig, seed: u64) -> Self {
        Self {
            nonce: generate_nonce(&config, seed),
            config,
        }
    }

    pub fn token(&self, boundary: u8) -> Result<TokenWord, TokenError> {
        TokenWord::encode(self.nonce, boundary, &self.config)
    }

    pub fn is_poisoned(&self, word: u64) -> bool {
        TokenWord(word).is_poisoned(self.nonce, &self.config)
    }

    pub fn decode(&self, word: u64) -> DecodedToken {
        TokenWord(word).decode(&self.config)
    }
}
