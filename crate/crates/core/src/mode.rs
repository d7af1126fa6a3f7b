use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::checker::CheckMode;

/// How an execution is instrumented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// No poisoning and no checks.
    Native,
    /// RET check only.
    Lite,
    /// RET check plus boundary check.
    Fine,
    /// Disjoint shadow memory.
    Shadow,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Native, Mode::Lite, Mode::Fine, Mode::Shadow];

    pub fn check_mode(self) -> Option<CheckMode> {
        match self {
            Mode::Lite => Some(CheckMode::Lite),
            Mode::Fine => Some(CheckMode::Fine),
            Mode::Native | Mode::Shadow => None,
        }
    }

    /// True when poison lives in application memory as tokens.
    pub fn embeds_tokens(self) -> bool {
        self.check_mode().is_some()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Native => "native",
            Mode::Lite => "lite",
            Mode::Fine => "fine",
            Mode::Shadow => "shadow",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "native" => Ok(Mode::Native),
            "lite" => Ok(Mode::Lite),
            "fine" => Ok(Mode::Fine),
            "shadow" => Ok(Mode::Shadow),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}
