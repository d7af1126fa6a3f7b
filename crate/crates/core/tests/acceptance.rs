//! Acceptance criteria, one line each. Runs without the libtest harness so
//! the verdict lines are always printed.

use std::collections::{BTreeMap, BTreeSet};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use retsan::arena::Arena;
use retsan::fuzz::{confirm_violation, Campaign, Confirmation, FreshNonces, FuzzConfig};
use retsan::oracle::AccessClass;
use retsan::pages::{measure, scattered};
use retsan::runtime::{padding_for, RuntimeConfig};
use retsan::stats::{collision_experiment, expected_years};
use retsan::trace::suite::run_suite;
use retsan::trace::{execute_trace, parse_trace, ExecConfig, Instruction, Outcome, TraceProgram};
use retsan::Mode;

type Verdict = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn statistics() -> Verdict {
    let y64 = expected_years(64, 1e9);
    let y61 = expected_years(61, 1e9);
    ensure((y64 - 584.9).abs() <= 0.1, format!("64 bits: {y64}"))?;
    ensure((y61 - 73.1).abs() <= 0.1, format!("61 bits: {y61}"))?;
    let printed: f64 = 584.9 / 73.1;
    ensure((printed - 8.0).abs() < 0.01, format!("printed ratio {printed}"))?;
    ensure((y64 / y61 - 8.0).abs() < 1e-12, "exact ratio")?;
    Ok(format!("{y64:.2} and {y61:.2} years, ratio {:.4}", y64 / y61))
}

fn single(mode: Mode, offset: i64) -> Result<Outcome, String> {
    let p = TraceProgram::parse(&format!("alloc a 13\nread a {offset} 1")).map_err(|e| e.to_string())?;
    let r = execute_trace(&p, &ExecConfig::new(mode, 1)).map_err(|e| e.to_string())?;
    Ok(r.instructions[1].outcome)
}

fn boundary_geometry() -> Verdict {
    ensure(padding_for(13, 8) == 3, "padding")?;
    let cfg = ExecConfig::new(Mode::Fine, 1);
    let mut m = retsan::trace::Machine::new(&cfg).map_err(|e| e.to_string())?;
    let base = m.runtime.heap_alloc(&mut m.arena, "a", 13).map_err(|e| e.to_string())?;
    let word = m.arena.peek_word(base + 16).map_err(|e| e.to_string())?;
    ensure(m.tokens.is_poisoned(word), "redzone token missing")?;
    ensure(m.tokens.decode(word).boundary == 5, "stored boundary")?;
    let expect = [
        (12, Outcome::Ok, Outcome::Ok),
        (13, Outcome::Violation, Outcome::Ok),
        (14, Outcome::Violation, Outcome::Ok),
        (15, Outcome::Violation, Outcome::Ok),
        (16, Outcome::Violation, Outcome::Violation),
    ];
    for (off, fine, lite) in expect {
        ensure(single(Mode::Fine, off)? == fine, format!("fine offset {off}"))?;
        ensure(single(Mode::Lite, off)? == lite, format!("lite offset {off}"))?;
    }
    Ok("padding 3, boundary 5, offsets 12..16 as expected".into())
}

fn cwe_matrix() -> Verdict {
    let (report, results) = run_suite(&Mode::ALL, 0, None, RuntimeConfig::default()).map_err(|e| e.to_string())?;
    let fine = &report.modes[&Mode::Fine];
    ensure(fine.bad.total >= 500 && fine.good.total >= 500, "suite too small")?;
    ensure(fine.bad.detected == fine.bad.total, format!("fine missed {}", fine.bad.total - fine.bad.detected))?;
    // The set of pad-confined cases is recomputed here from geometry alone.
    let pad: BTreeSet<String> = results[&Mode::Lite]
        .iter()
        .filter(|r| r.bad && r.class == Some(AccessClass::OverflowPad))
        .map(|r| r.name.clone())
        .collect();
    let geometric: BTreeSet<String> = retsan::trace::suite::build_cwe_suite()
        .iter()
        .filter(|s| {
            use retsan::trace::suite::Cwe;
            s.bad && matches!(s.cwe, Cwe::StackOverflow | Cwe::HeapOverflow | Cwe::Overread) && s.depth <= padding_for(s.size, 8)
        })
        .map(|s| s.name.clone())
        .collect();
    ensure(pad == geometric, "oracle pad class differs from geometry")?;
    let misses: BTreeSet<String> = results[&Mode::Lite]
        .iter()
        .filter(|r| r.bad && !r.detected())
        .map(|r| r.name.clone())
        .collect();
    ensure(!misses.is_empty() && misses == pad, "lite misses differ from the pad-confined set")?;
    for (mode, m) in &report.modes {
        ensure(m.good.detected == 0, format!("{mode}: {} good cases flagged", m.good.detected))?;
    }
    for mode in [Mode::Lite, Mode::Fine, Mode::Shadow] {
        ensure(report.modes[&mode].expectations_failed == 0, format!("{mode}: expectation failures"))?;
    }
    Ok(format!(
        "{} bad / {} good; fine {:.2}%, lite {:.2}% ({} misses = pad-confined), good 100% in all modes",
        fine.bad.total,
        fine.good.total,
        fine.bad_detection_rate,
        report.modes[&Mode::Lite].bad_detection_rate,
        misses.len()
    ))
}

/// Random layouts of heap, stack and global objects with random frees,
/// followed by random accesses around object boundaries.
fn random_layout_program(rng: &mut ChaCha8Rng) -> (TraceProgram, usize) {
    let mut p = TraceProgram::default();
    let mut objects: Vec<(String, usize)> = Vec::new();
    let mut heap: Vec<String> = Vec::new();
    for i in 0..rng.random_range(1..=3) {
        let (id, size) = (format!("g{i}"), rng.random_range(0..=40));
        p.push(Instruction::Global { id: id.clone(), size });
        objects.push((id, size));
    }
    let frame: Vec<(String, usize)> = (0..rng.random_range(1..=3))
        .map(|i| (format!("s{i}"), rng.random_range(0..=40)))
        .collect();
    p.push(Instruction::Push { objects: frame.clone() });
    objects.extend(frame);
    for i in 0..rng.random_range(1..=8) {
        let (id, size) = (format!("h{i}"), rng.random_range(0..=40));
        p.push(Instruction::Alloc { id: id.clone(), size });
        objects.push((id.clone(), size));
        heap.push(id);
    }
    for id in &heap {
        if rng.random_bool(0.3) {
            p.push(Instruction::Free { id: id.clone() });
        }
    }
    let accesses = 12;
    for _ in 0..accesses {
        let (id, size) = objects[rng.random_range(0..objects.len())].clone();
        let offset = rng.random_range(-8..=(size as i64 + 20));
        let len = rng.random_range(1..=8);
        p.push(if rng.random_bool(0.5) {
            Instruction::Read { id, offset, size: len }
        } else {
            Instruction::Write { id, offset, size: len, value: None }
        });
    }
    (p, accesses)
}

fn oracle_equivalence() -> Verdict {
    let mut cases = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for mode in [Mode::Lite, Mode::Fine] {
        let mut n = 0usize;
        let mut seed = 0;
        while n < 100_000 {
            let (p, _) = random_layout_program(&mut rng);
            let mut cfg = ExecConfig::new(mode, seed);
            cfg.arena_size = 64 << 10;
            cfg.continue_on_violation = true;
            seed += 1;
            let r = execute_trace(&p, &cfg).map_err(|e| e.to_string())?;
            ensure(!r.has_runtime_error(), format!("runtime error in:\n{p}"))?;
            ensure(r.disagreements.is_empty(), format!("{mode}: {:?}\n{p}", r.disagreements))?;
            for i in &r.instructions {
                if let Some(pred) = i.predicted {
                    ensure(pred == (i.outcome == Outcome::Violation), format!("{mode}: instruction {}", i.index))?;
                    n += 1;
                }
            }
        }
        cases.insert(mode, n);
    }
    Ok(format!("{} lite and {} fine accesses, 0 disagreements", cases[&Mode::Lite], cases[&Mode::Fine]))
}

fn locality() -> Verdict {
    let w = measure(&scattered(), 0, None, RuntimeConfig::default()).map_err(|e| e.to_string())?;
    let native = w.modes[&Mode::Native].dirty_pages;
    let shadow = w.modes[&Mode::Shadow].dirty_pages;
    ensure(shadow >= native + 16, format!("shadow {shadow} vs native {native}"))?;
    for mode in [Mode::Lite, Mode::Fine] {
        ensure(w.modes[&mode].metadata_pages == 0, format!("{mode} dirtied non-application pages"))?;
    }
    ensure(w.ratio >= 4.0, format!("ratio {}", w.ratio))?;
    Ok(format!(
        "native {native}, fine {}, shadow {shadow} pages; ratio {:.1}",
        w.modes[&Mode::Fine].dirty_pages,
        w.ratio
    ))
}

fn token_loads() -> Verdict {
    let (report, _) = run_suite(&[Mode::Lite, Mode::Fine], 0, None, RuntimeConfig::default()).map_err(|e| e.to_string())?;
    let lite = &report.modes[&Mode::Lite].token_loads_per_access;
    let fine = &report.modes[&Mode::Fine].token_loads_per_access;
    ensure(lite.keys().all(|&k| k == 1) && !lite.is_empty(), format!("lite histogram {lite:?}"))?;
    ensure(fine.keys().all(|&k| k <= 2) && !fine.is_empty(), format!("fine histogram {fine:?}"))?;
    Ok(format!("lite {lite:?}, fine {fine:?}"))
}

fn fork_emulation() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut arena = Arena::new(32 * 4096, 4096).map_err(|e| e.to_string())?;
    for _ in 0..64 {
        let addr = rng.random_range(0..arena.len() - 64);
        arena.write_bytes(addr, &[0xab; 64]).map_err(|e| e.to_string())?;
    }
    let snap = arena.snapshot();
    for case in 0..1000 {
        for _ in 0..rng.random_range(0..40) {
            let len = rng.random_range(1..=300);
            let addr = rng.random_range(0..arena.len() - len);
            let data: Vec<u8> = (0..len).map(|_| rng.random()).collect();
            arena.write_bytes(addr, &data).map_err(|e| e.to_string())?;
        }
        arena.restore(&snap).map_err(|e| e.to_string())?;
        ensure(arena.peek(0, arena.len()).map_err(|e| e.to_string())? == snap.image(), format!("case {case}"))?;
        ensure(arena.dirty_pages().is_empty(), "dirty after restore")?;
    }

    let canary = parse_trace("alloc c 13\nwrite c 0 8\nwrite c 13 1\nread c 16 1\nfree c\nread c 0 4\nread g1 5 1", &["g0", "g1"])
        .map_err(|e| e.to_string())?;
    let executions = 10_000;
    let mut campaign = Campaign::new(FuzzConfig::new(Mode::Fine, 11, executions)).map_err(|e| e.to_string())?;
    let first = campaign.execute(&canary).map_err(|e| e.to_string())?;
    for _ in 1..executions - 1 {
        let p = campaign.next_program();
        campaign.execute(&p).map_err(|e| e.to_string())?;
    }
    let last = campaign.execute(&canary).map_err(|e| e.to_string())?;
    ensure(campaign.metrics().executions == executions, "execution count")?;
    ensure(first.to_json() == last.to_json(), "canary reports differ")?;
    ensure(first.violations.len() == 4, format!("canary violations {}", first.violations.len()))?;
    Ok(format!("1000 restore cases exact; canary identical at executions 1 and {executions}"))
}

fn collisions() -> Verdict {
    let r = collision_experiment(16, 1_000_000, 0);
    ensure(r.z_score.abs() <= 4.0, format!("z = {}", r.z_score))?;
    let mut summary = vec![format!("16-bit: {} hits, z = {:.2}", r.hits, r.z_score)];
    for mode in [Mode::Fine, Mode::Lite] {
        let m = retsan::fuzz::fuzz_loop(&FuzzConfig::new(mode, 21, 10_000)).map_err(|e| e.to_string())?;
        ensure(m.re_executed > 0, "no confirmations ran")?;
        ensure(m.suspected_collisions == 0, format!("{mode}: {} suspected collisions", m.suspected_collisions))?;
        summary.push(format!("{mode}: {} re-executed, 0 suspected", m.re_executed));
    }
    Ok(summary.join("; "))
}

fn reexecution() -> Verdict {
    let true_errors = [
        "alloc a 13\nwrite a 16 1",
        "alloc a 13\nread a 13 1",
        "alloc p 8\nalloc a 5\nwrite a -1 1",
        "alloc a 24\nfree a\nread a 8 8",
        "push a:7\nwrite a 7 1",
        "global g 3\nread g 3 1",
    ];
    let mut confirmed = 0;
    for bits in [None, Some(16), Some(8)] {
        for mode in [Mode::Fine, Mode::Lite] {
            for (k, text) in true_errors.iter().enumerate() {
                let p = TraceProgram::parse(text).map_err(|e| e.to_string())?;
                let mut cfg = ExecConfig::new(mode, k as u64);
                cfg.token_bits = bits;
                cfg.continue_on_violation = true;
                let r = execute_trace(&p, &cfg).map_err(|e| e.to_string())?;
                let last = r.instructions.len() - 1;
                if mode == Mode::Lite && r.instructions[last].class == Some(AccessClass::OverflowPad) {
                    continue;
                }
                ensure(r.instructions[last].outcome == Outcome::Violation, format!("{mode} {text:?} not detected"))?;
                let tokens = cfg.token_config().map_err(|e| e.to_string())?;
                let mut fresh = FreshNonces::new(tokens, 1000 + k as u64);
                for _ in 0..5 {
                    let c = confirm_violation(&p, last, &cfg, &[], fresh.next_nonce()).map_err(|e| e.to_string())?;
                    ensure(c == Confirmation::Confirmed, format!("{mode} {text:?} cleared"))?;
                    confirmed += 1;
                }
            }
        }
    }

    let trials = 100;
    let mut cleared = 0;
    for t in 0..trials {
        let mut cfg = FuzzConfig::new(Mode::Lite, t, 1);
        cfg.token_bits = Some(8);
        let mut campaign = Campaign::new(cfg).map_err(|e| e.to_string())?;
        let nonce = campaign.server().tokens().nonce.value();
        let mut rng = ChaCha8Rng::seed_from_u64(t);
        let literal = (rng.random::<u64>() << 8) | nonce;
        let p = TraceProgram::parse(&format!("alloc a 16\nwrite a 0 8 {literal:#x}\nread a 0 8")).map_err(|e| e.to_string())?;
        let r = campaign.execute(&p).map_err(|e| e.to_string())?;
        ensure(r.instructions[2].outcome == Outcome::Violation, "collision not injected")?;
        ensure(campaign.metrics().re_executed == 1, "collision not re-executed")?;
        cleared += campaign.metrics().suspected_collisions;
    }
    let rate = cleared as f64 / trials as f64;
    ensure(rate >= 0.95, format!("cleared {cleared}/{trials}"))?;
    Ok(format!("{confirmed} true-error confirmations; {cleared}/{trials} injected collisions cleared"))
}

fn run_cli(args: &[&str], out: &std::path::Path) -> Result<String, String> {
    let status = Command::new(env!("CARGO_BIN_EXE_retsan"))
        .args(args)
        .arg("--json")
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(status.status.success(), format!("{args:?} exited {:?}", status.status.code()))?;
    let text = std::fs::read_to_string(out).map_err(|e| e.to_string())?;
    let mut v: Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("wall_time_ms");
    }
    Ok(v.to_string())
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let trace = dir.path().join("overflow.trace");
    std::fs::write(
        &trace,
        "alloc a 13\nexpect fine=violation lite=ok shadow=violation class=overflow_pad\nwrite a 13 1\n",
    )
    .map_err(|e| e.to_string())?;
    let trace = trace.to_string_lossy().to_string();
    let invocations: [Vec<&str>; 4] = [
        vec!["suite", "--seed", "3"],
        vec!["fuzz", "--seed", "5", "--executions", "2000"],
        vec!["fuzz", "--seed", "5", "--executions", "500", "--jobs", "3", "--mode", "lite"],
        vec!["run", &trace, "--seed", "9"],
    ];
    for args in &invocations {
        let a = run_cli(args, &dir.path().join("a.json"))?;
        let b = run_cli(args, &dir.path().join("b.json"))?;
        ensure(a == b, format!("{args:?} differs between runs"))?;
    }
    Ok("suite, fuzz (serial and parallel) and run outputs byte-identical".into())
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("statistics exactness", statistics),
        ("boundary geometry", boundary_geometry),
        ("CWE suite matrix", cwe_matrix),
        ("oracle equivalence", oracle_equivalence),
        ("page locality", locality),
        ("token-load bounds", token_loads),
        ("fork emulation", fork_emulation),
        ("collision statistics", collisions),
        ("re-execution policy", reexecution),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let verdict = f();
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({secs:.1}s) {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({secs:.1}s) {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 10 acceptance criteria passed");
}
