//! Trace programs: a line-oriented language of memory operations, its
//! executor, and the generated CWE-analog scenario suite.

mod exec;
mod parse;
pub mod suite;

pub use exec::{
    execute_trace, run_program, write_pattern, Disagreement, ExecConfig, ExecError, ExpectationFailure,
    ExpectationSummary, InstructionReport, Machine, Outcome, RunReport,
};
pub use parse::{parse_trace, Expectation, Expected, Instruction, ParseError, Step, TraceProgram};
pub use suite::build_cwe_suite;
