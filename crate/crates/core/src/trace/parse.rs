use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::mode::Mode;
use crate::oracle::AccessClass;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Instruction {
    Alloc { id: String, size: usize },
    Free { id: String },
    Realloc { id: String, size: usize },
    Read { id: String, offset: i64, size: usize },
    Write { id: String, offset: i64, size: usize, value: Option<u64> },
    Fill { id: String, offset: i64, len: usize },
    Push { objects: Vec<(String, usize)> },
    Pop,
    Global { id: String, size: usize },
}

impl Instruction {
    /// Ids this instruction reads (must already be defined).
    fn uses(&self) -> Vec<&str> {
        match self {
            Instruction::Free { id }
            | Instruction::Realloc { id, .. }
            | Instruction::Read { id, .. }
            | Instruction::Write { id, .. }
            | Instruction::Fill { id, .. } => vec![id.as_str()],
            _ => Vec::new(),
        }
    }

    /// Ids this instruction defines.
    fn defines(&self) -> Vec<&str> {
        match self {
            Instruction::Alloc { id, .. } | Instruction::Global { id, .. } => vec![id.as_str()],
            Instruction::Push { objects } => objects.iter().map(|(id, _)| id.as_str()).collect(),
            _ => Vec::new(),
        }
    }

    pub fn is_access(&self) -> bool {
        matches!(
            self,
            Instruction::Read { .. } | Instruction::Write { .. } | Instruction::Fill { .. }
        )
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Instruction::Alloc { id, size } => write!(f, "alloc {id} {size}"),
            Instruction::Free { id } => write!(f, "free {id}"),
            Instruction::Realloc { id, size } => write!(f, "realloc {id} {size}"),
            Instruction::Read { id, offset, size } => write!(f, "read {id} {offset} {size}"),
            Instruction::Write { id, offset, size, value } => {
                write!(f, "write {id} {offset} {size}")?;
                if let Some(v) = value {
                    write!(f, " {v:#018x}")?;
                }
                Ok(())
            }
            Instruction::Fill { id, offset, len } => write!(f, "fill {id} {offset} {len}"),
            Instruction::Push { objects } => {
                f.write_str("push")?;
                for (id, size) in objects {
                    write!(f, " {id}:{size}")?;
                }
                Ok(())
            }
            Instruction::Pop => f.write_str("pop"),
            Instruction::Global { id, size } => write!(f, "global {id} {size}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expected {
    Ok,
    Violation,
}

impl Expected {
    pub fn as_str(self) -> &'static str {
        match self {
            Expected::Ok => "ok",
            Expected::Violation => "violation",
        }
    }
}

/// Expected outcome of the next instruction, per mode.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Expectation {
    pub fine: Option<Expected>,
    pub lite: Option<Expected>,
    pub shadow: Option<Expected>,
    pub class: Option<AccessClass>,
}

impl Expectation {
    pub fn for_mode(&self, mode: Mode) -> Option<Expected> {
        match mode {
            Mode::Fine => self.fine,
            Mode::Lite => self.lite,
            Mode::Shadow => self.shadow,
            Mode::Native => None,
        }
    }
}

impl fmt::Display for Expectation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("expect")?;
        for (key, val) in [("fine", self.fine), ("lite", self.lite), ("shadow", self.shadow)] {
            if let Some(v) = val {
                write!(f, " {key}={}", v.as_str())?;
            }
        }
        if let Some(c) = self.class {
            write!(f, " class={c}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub instruction: Instruction,
    pub expect: Option<Expectation>,
}

/// A straight-line sequence of memory operations.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraceProgram {
    pub steps: Vec<Step>,
}

impl TraceProgram {
    pub fn parse(text: &str) -> Result<Self, ParseError> {
        parse_trace(text, &[])
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn push(&mut self, instruction: Instruction) {
        self.steps.push(Step {
            instruction,
            expect: None,
        });
    }

    pub fn push_expect(&mut self, instruction: Instruction, expect: Expectation) {
        self.steps.push(Step {
            instruction,
            expect: Some(expect),
        });
    }

    /// Checks that every id is defined before it is used.
    pub fn check_defined(&self, predefined: &[&str]) -> Result<(), ParseError> {
        let mut defined: BTreeSet<&str> = predefined.iter().copied().collect();
        for (i, step) in self.steps.iter().enumerate() {
            for id in step.instruction.uses() {
                if !defined.contains(id) {
                    return Err(ParseError {
                        line: i + 1,
                        message: format!("id `{id}` used before definition"),
                    });
                }
            }
            defined.extend(step.instruction.defines());
        }
        Ok(())
    }
}

impl fmt::Display for TraceProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for step in &self.steps {
            if let Some(e) = &step.expect {
                writeln!(f, "{e}")?;
            }
            writeln!(f, "{}", step.instruction)?;
        }
        Ok(())
    }
}

fn valid_id(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

struct LineParser<'a> {
    line: usize,
    words: std::slice::Iter<'a, &'a str>,
}

impl<'a> LineParser<'a> {
    fn err(&self, message: impl Into<String>) -> ParseError {
        ParseError {
            line: self.line,
            message: message.into(),
        }
    }

    fn next(&mut self, what: &str) -> Result<&'a str, ParseError> {
        self.words
            .next()
            .copied()
            .ok_or_else(|| self.err(format!("missing {what}")))
    }

    fn id(&mut self) -> Result<String, ParseError> {
        let w = self.next("id")?;
        if !valid_id(w) {
            return Err(self.err(format!("malformed id `{w}`")));
        }
        Ok(w.to_string())
    }

    fn unsigned(&mut self, what: &str) -> Result<usize, ParseError> {
        let w = self.next(what)?;
        w.parse().map_err(|_| self.err(format!("malformed {what} `{w}`")))
    }

    fn signed(&mut self, what: &str) -> Result<i64, ParseError> {
        let w = self.next(what)?;
        w.parse().map_err(|_| self.err(format!("malformed {what} `{w}`")))
    }

    fn access_size(&mut self) -> Result<usize, ParseError> {
        let size = self.unsigned("size")?;
        if !(1..=8).contains(&size) {
            return Err(self.err(format!("access size {size} not in 1..=8")));
        }
        Ok(size)
    }

    fn finish(&mut self) -> Result<(), ParseError> {
        match self.words.next() {
            Some(extra) => Err(self.err(format!("unexpected operand `{extra}`"))),
            None => Ok(()),
        }
    }
}

fn parse_hex(w: &str) -> Option<u64> {
    let digits = w.strip_prefix("0x").or_else(|| w.strip_prefix("0X")).unwrap_or(w);
    if digits.is_empty() || digits.len() > 16 {
        return None;
    }
    u64::from_str_radix(digits, 16).ok()
}

fn parse_expectation(p: &mut LineParser<'_>) -> Result<Expectation, ParseError> {
    let mut e = Expectation::default();
    let mut any = false;
    while let Some(&w) = p.words.next() {
        let (key, val) = w
            .split_once('=')
            .ok_or_else(|| p.err(format!("malformed directive operand `{w}`")))?;
        let outcome = || match val {
            "ok" => Ok(Expected::Ok),
            "violation" => Ok(Expected::Violation),
            _ => Err(p.err(format!("unknown outcome `{val}`"))),
        };
        match key {
            "fine" => e.fine = Some(outcome()?),
            "lite" => e.lite = Some(outcome()?),
            "shadow" => e.shadow = Some(outcome()?),
            "class" => {
                e.class = Some(AccessClass::parse(val).ok_or_else(|| p.err(format!("unknown class `{val}`")))?)
            }
            _ => return Err(p.err(format!("unknown directive key `{key}`"))),
        }
        any = true;
    }
    if !any {
        return Err(p.err("empty expect directive"));
    }
    Ok(e)
}

fn parse_instruction(op: &str, p: &mut LineParser<'_>) -> Result<Instruction, ParseError> {
    let instr = match op {
        "alloc" => Instruction::Alloc {
            id: p.id()?,
            size: p.unsigned("size")?,
        },
        "free" => Instruction::Free { id: p.id()? },
        "realloc" => Instruction::Realloc {
            id: p.id()?,
            size: p.unsigned("size")?,
        },
        "read" => Instruction::Read {
            id: p.id()?,
            offset: p.signed("offset")?,
            size: p.access_size()?,
        },
        "write" => {
            let id = p.id()?;
            let offset = p.signed("offset")?;
            let size = p.access_size()?;
            let value = match p.words.next() {
                Some(w) => Some(parse_hex(w).ok_or_else(|| p.err(format!("malformed value `{w}`")))?),
                None => None,
            };
            Instruction::Write { id, offset, size, value }
        }
        "fill" => Instruction::Fill {
            id: p.id()?,
            offset: p.signed("offset")?,
            len: p.unsigned("length")?,
        },
        "push" => {
            let mut objects = Vec::new();
            while let Some(&w) = p.words.next() {
                let (id, size) = w
                    .split_once(':')
                    .ok_or_else(|| p.err(format!("malformed frame object `{w}`")))?;
                if !valid_id(id) {
                    return Err(p.err(format!("malformed id `{id}`")));
                }
                let size = size
                    .parse()
                    .map_err(|_| p.err(format!("malformed size `{size}`")))?;
                objects.push((id.to_string(), size));
            }
            if objects.is_empty() {
                return Err(p.err("push needs at least one object"));
            }
            Instruction::Push { objects }
        }
        "pop" => Instruction::Pop,
        "global" => Instruction::Global {
            id: p.id()?,
            size: p.unsigned("size")?,
        },
        other => return Err(p.err(format!("unknown opcode `{other}`"))),
    };
    p.finish()?;
    Ok(instr)
}

/// Parses a trace. Ids in `predefined` (e.g. globals registered by a fuzz
/// harness) may be used without a defining instruction.
pub fn parse_trace(text: &str, predefined: &[&str]) -> Result<TraceProgram, ParseError> {
    let mut program = TraceProgram::default();
    let mut pending: Option<(usize, Expectation)> = None;
    let mut lines = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("");
        let words: Vec<&str> = content.split_whitespace().collect();
        if words.is_empty() {
            continue;
        }
        let mut p = LineParser {
            line,
            words: words[1..].iter(),
        };
        if words[0] == "expect" {
            if pending.is_some() {
                return Err(p.err("directive not followed by an instruction"));
            }
            pending = Some((line, parse_expectation(&mut p)?));
            continue;
        }
        let instruction = parse_instruction(words[0], &mut p)?;
        program.steps.push(Step {
            instruction,
            expect: pending.take().map(|(_, e)| e),
        });
        lines.push(line);
    }
    if let Some((line, _)) = pending {
        return Err(ParseError {
            line,
            message: "directive not followed by an instruction".into(),
        });
    }
    program.check_defined(predefined).map_err(|e| ParseError {
        line: lines[e.line - 1],
        message: e.message,
    })?;
    Ok(program)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simple_program() {
        let p = TraceProgram::parse("alloc a 13\nread a 0 8").unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(
            p.steps[1].instruction,
            Instruction::Read {
                id: "a".into(),
                offset: 0,
                size: 8
            }
        );
    }

    #[test]
    fn unknown_opcode() {
        let e = TraceProgram::parse("frob a 1").unwrap_err();
        assert_eq!(e.line, 1);
        assert!(e.message.contains("unknown opcode"));
    }

    #[test]
    fn directive_binds_to_next_instruction() {
        let p = TraceProgram::parse("alloc a 13\n# comment\nexpect fine=violation lite=ok\nwrite a 13 1").unwrap();
        let e = p.steps[1].expect.as_ref().unwrap();
        assert_eq!(e.fine, Some(Expected::Violation));
        assert_eq!(e.lite, Some(Expected::Ok));
        assert_eq!(e.shadow, None);
        assert!(p.steps[0].expect.is_none());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let cases = [
            ("alloc a 13\nread a x 8", 2),
            ("alloc a 13\n\nread b 0 1", 3),
            ("alloc a 1\nread a 0 9", 2),
            ("alloc a 1\nexpect fine=maybe\nread a 0 1", 2),
            ("expect fine=ok\nexpect lite=ok\nalloc a 1", 2),
            ("alloc a 1\nexpect fine=ok", 2),
            ("alloc a 1 2", 1),
            ("alloc 1a 1", 1),
            ("push a", 1),
            ("alloc a 1\nwrite a 0 1 0xzz", 2),
        ];
        for (text, line) in cases {
            let e = TraceProgram::parse(text).unwrap_err();
            assert_eq!(e.line, line, "{text:?}: {e}");
        }
    }

    #[test]
    fn all_opcodes_roundtrip() {
        let text = "global g 5\npush s:3 t:16\nalloc a 13\nexpect fine=violation lite=ok shadow=violation class=overflow_pad\nwrite a 13 1\nwrite a -1 2 0x00000000deadbeef\nfill a 0 20\nrealloc a 40\nread g 4 1\nfree a\npop\n";
        let p = TraceProgram::parse(text).unwrap();
        assert_eq!(p.to_string(), text);
        assert_eq!(TraceProgram::parse(&p.to_string()).unwrap(), p);
    }

    #[test]
    fn predefined_ids() {
        assert!(TraceProgram::parse("read g0 0 1").is_err());
        assert!(parse_trace("read g0 0 1", &["g0"]).is_ok());
    }
}
