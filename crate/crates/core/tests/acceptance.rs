//! Acceptance run. Prints one pass/fail line per criterion and exits
//! nonzero if any fails. Tolerances are pinned here, not configurable.
//!
//! The trained criteria use the desk configuration in `desk_config`; the
//! whole run takes tens of minutes on one core.

use std::io::Write as _;
use std::time::Instant;

use duplex_core::config::RunConfig;
use duplex_core::data::{generate_corpus, split_by_hash, CorpusSpec, Difficulty, ParallelPair};
use duplex_core::eval::{evaluate_direction, greedy_accuracy, roundtrip_eval, RoundTrip};
use duplex_core::rdc::Direction;
use duplex_core::selftest::{self, Check};
use duplex_core::train::{Stage, Trainer};
use duplex_core::Result;

const INVERT_DRAWS: usize = 100;
const INVERT_SECONDS: f64 = 60.0;
const GRAD_SECONDS: f64 = 300.0;
const STAGE1_ACCURACY: f64 = 0.90;
const DDM_DROP: f64 = 0.5;
const STAGE3_SLACK: f64 = 0.01;
const BEAM: usize = 10;
const REPR_CYCLE: f64 = 1e-4;
const ROUNDTRIP_EXACT: f64 = 0.95;

struct Line {
    id: u8,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn report(line: &Line) {
    let tag = if line.passed { "PASS" } else { "FAIL" };
    println!("[{tag}] {} {}: {}", line.id, line.name, line.detail);
    std::io::stdout().flush().ok();
}

fn checks_line(id: u8, name: &'static str, checks: &[Check], extra: Option<(bool, String)>) -> Line {
    let mut passed = checks.iter().all(|c| c.passed);
    let mut parts: Vec<String> = checks
        .iter()
        .map(|c| format!("{} {:.3e} <= {:.0e} ({})", c.name, c.value, c.tolerance, c.detail))
        .collect();
    if let Some((ok, text)) = extra {
        passed &= ok;
        parts.push(text);
    }
    Line { id, name, passed, detail: parts.join("; ") }
}

fn failed(id: u8, name: &'static str, e: duplex_core::Error) -> Line {
    Line { id, name, passed: false, detail: format!("error: {e}") }
}

fn invertibility() -> Result<Line> {
    let start = Instant::now();
    let checks = selftest::invertibility_suite(INVERT_DRAWS)?;
    let secs = start.elapsed().as_secs_f64();
    Ok(checks_line(1, "invertibility", &checks, Some((secs < INVERT_SECONDS, format!("{secs:.1} s < {INVERT_SECONDS} s")))))
}

fn palindrome() -> Result<Line> {
    let check = selftest::palindrome_suite(&[2, 4, 6, 8, 12, 18])?;
    let (f, r) = selftest::chains(4)?;
    let detail = format!("{}; L=4 forward \"{f}\" reverse \"{r}\"", check.detail);
    Ok(Line { id: 2, name: "palindrome", passed: check.passed, detail })
}

fn ctc() -> Result<Line> {
    Ok(checks_line(3, "ctc", &[selftest::ctc_suite()?], None))
}

fn gradients() -> Result<Line> {
    let start = Instant::now();
    let checks = selftest::gradient_suite()?;
    let secs = start.elapsed().as_secs_f64();
    Ok(checks_line(4, "gradients", &checks, Some((secs < GRAD_SECONDS, format!("{secs:.1} s < {GRAD_SECONDS} s")))))
}

fn diffusion() -> Result<Line> {
    let mut checks = vec![selftest::schedule_suite()?];
    checks.extend(selftest::diffusion_suite()?);
    Ok(checks_line(5, "diffusion", &checks, None))
}

/// The desk run used by the trained criteria.
fn desk_config(k1: usize, k2: usize, k3: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 1;
    cfg.train.k1 = k1;
    cfg.train.k2 = k2;
    cfg.train.k3 = k3;
    cfg.train.lr = 1e-3;
    cfg.train.weights.w5 = 0.1;
    cfg.train.weights.w6 = 0.1;
    cfg.train.log_interval = 50;
    cfg.train.eval_interval = 500;
    cfg
}

fn corpus(difficulty: Difficulty, pairs: usize) -> Result<(Vec<ParallelPair>, Vec<ParallelPair>, Vec<ParallelPair>)> {
    let pairs = generate_corpus(&CorpusSpec { pairs, vocab: 12, max_len: 24, difficulty, seed: 7 })?;
    let s = split_by_hash(&pairs, 50, 50)?;
    Ok((s.train, s.dev, s.test))
}

fn held_out(t: &Trainer, test: &[ParallelPair]) -> Result<(f64, f64)> {
    let b = t.store.bind_frozen();
    Ok((
        greedy_accuracy(&t.model, &b, test, Direction::Forward)?,
        greedy_accuracy(&t.model, &b, test, Direction::Reverse)?,
    ))
}

fn dev_ddm(t: &Trainer) -> Vec<f64> {
    t.history.iter().filter(|r| r.stage == 2 && r.kind == "eval").filter_map(|r| r.dev_ddm).collect()
}

/// Criteria 6 and 7 share the three-stage reverse-shift run.
fn staged_training() -> Result<(Line, Line, Trainer)> {
    let (train, dev, test) = corpus(Difficulty::ReverseShift, 20_000)?;
    let mut t = Trainer::new(desk_config(3000, 2000, 1000), train, dev)?;
    let start = Instant::now();

    t.run_stage(Stage::Rdc)?;
    let (f1, r1) = held_out(&t, &test)?;
    t.run_stage(Stage::Ddm)?;
    let ddm = dev_ddm(&t);
    let (d0, d1) = (ddm.first().copied().unwrap_or(f64::NAN), ddm.last().copied().unwrap_or(f64::NAN));
    t.run_stage(Stage::Finetune)?;
    let (f3, r3) = held_out(&t, &test)?;

    let s1 = f1 >= STAGE1_ACCURACY && r1 >= STAGE1_ACCURACY;
    let s2 = d1 <= (1.0 - DDM_DROP) * d0;
    let s3 = f3 >= f1 - STAGE3_SLACK && r3 >= r1 - STAGE3_SLACK;
    let six = Line {
        id: 6,
        name: "staged training",
        passed: s1 && s2 && s3,
        detail: format!(
            "stage 1 test acc fwd {f1:.4} rev {r1:.4} (>= {STAGE1_ACCURACY}); \
             stage 2 dev L_DDM {d0:.4} -> {d1:.4} (drop >= {:.0}%); \
             stage 3 acc fwd {f3:.4} rev {r3:.4} (>= stage 1 - {STAGE3_SLACK}); {} test pairs, {:.0} s",
            DDM_DROP * 100.0,
            test.len(),
            start.elapsed().as_secs_f64()
        ),
    };

    let b = t.store.bind_frozen();
    let mut ok = true;
    let mut parts = Vec::new();
    for dir in [Direction::Forward, Direction::Reverse] {
        let r = evaluate_direction(&t.model, &b, &test, dir, BEAM)?;
        ok &= r.bleu_beam >= r.bleu_greedy;
        parts.push(format!("{} beam-{BEAM} {:.3} vs greedy {:.3}", r.direction, r.bleu_beam, r.bleu_greedy));
    }
    drop(b);
    let seven = Line { id: 7, name: "beam vs greedy bleu", passed: ok, detail: parts.join("; ") };
    Ok((six, seven, t))
}

fn roundtrip(reverse_shift: Option<&Trainer>) -> Result<Line> {
    let (train, dev, test) = corpus(Difficulty::Copy, 20_000)?;
    let mut t = Trainer::new(desk_config(500, 0, 0), train, dev)?;
    t.run_stage(Stage::Rdc)?;

    let mut repr = 0.0f64;
    let mut exact = f64::INFINITY;
    let mut parts = Vec::new();
    let seqs: Vec<Vec<usize>> = test.iter().map(|p| p.src.clone()).collect();
    let b = t.store.bind_frozen();
    for order in [RoundTrip::Xyx, RoundTrip::Yxy] {
        let r = roundtrip_eval(&t.model, &b, &seqs, order)?;
        repr = repr.max(r.representation_error);
        exact = exact.min(r.token_exact_match);
        parts.push(format!("copy {order:?} exact {:.4}", r.token_exact_match));
    }
    if let Some(other) = reverse_shift {
        let b = other.store.bind_frozen();
        for order in [RoundTrip::Xyx, RoundTrip::Yxy] {
            repr = repr.max(roundtrip_eval(&other.model, &b, &seqs, order)?.representation_error);
        }
    }
    let passed = repr <= REPR_CYCLE && exact >= ROUNDTRIP_EXACT;
    parts.insert(0, format!("representation cycle {repr:.3e} <= {REPR_CYCLE:.0e} (single)"));
    parts.push(format!("min exact >= {ROUNDTRIP_EXACT}, {} sequences", seqs.len()));
    Ok(Line { id: 8, name: "duplex round trip", passed, detail: parts.join("; ") })
}

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 5;
    cfg.model.stack.hidden = 16;
    cfg.model.stack.layers = 2;
    cfg.model.stack.heads = 2;
    cfg.model.stack.max_rel = 16;
    cfg.train.k1 = 20;
    cfg.train.k2 = 20;
    cfg.train.k3 = 20;
    cfg.train.batch_tokens = 128;
    cfg.train.log_interval = 5;
    cfg.train.eval_interval = 10;
    cfg.train.eval_pairs = 16;
    cfg.diffusion.eval_draws = 2;
    cfg
}

fn determinism() -> Result<Line> {
    let (train, dev, _) = corpus(Difficulty::ReverseShift, 600)?;
    let root = tempfile::tempdir()?;
    let run = |name: &str| -> Result<(Trainer, Vec<u8>)> {
        let dir = root.path().join(name);
        let mut t = Trainer::new(small_config(), train.clone(), dev.clone())?.with_output(&dir)?;
        t.run(&Stage::ALL)?;
        let bytes = std::fs::read(dir.join("metrics.jsonl"))?;
        Ok((t, bytes))
    };
    let (a, bytes_a) = run("a")?;
    let (_, bytes_b) = run("b")?;
    let identical = !bytes_a.is_empty() && bytes_a == bytes_b;

    // Resume from the mid-stage-1 checkpoint of run `a` and finish.
    let ckpt = root.path().join("a").join("checkpoints").join("step-0000010");
    let mut c = Trainer::resume(small_config(), train, dev, &ckpt)?;
    c.run(&Stage::ALL)?;
    let tail = |t: &Trainer| -> Vec<String> { t.history.iter().filter(|r| r.step > 10).map(|r| r.to_json()).collect() };
    let same_metrics = tail(&a) == tail(&c);
    let same_params = a.store.to_named() == c.store.to_named();
    Ok(Line {
        id: 9,
        name: "determinism",
        passed: identical && same_metrics && same_params,
        detail: format!(
            "metrics.jsonl identical {identical} ({} bytes); resume from step 10: metrics {same_metrics}, parameters {same_params}",
            bytes_a.len()
        ),
    })
}

fn main() {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut push = |line: Line| {
        report(&line);
        lines.push(line.passed);
    };
    push(invertibility().unwrap_or_else(|e| failed(1, "invertibility", e)));
    push(palindrome().unwrap_or_else(|e| failed(2, "palindrome", e)));
    push(ctc().unwrap_or_else(|e| failed(3, "ctc", e)));
    push(gradients().unwrap_or_else(|e| failed(4, "gradients", e)));
    push(diffusion().unwrap_or_else(|e| failed(5, "diffusion", e)));
    let trained = match staged_training() {
        Ok((six, seven, t)) => {
            push(six);
            push(seven);
            Some(t)
        }
        Err(e) => {
            push(failed(6, "staged training", e));
            push(Line { id: 7, name: "beam vs greedy bleu", passed: false, detail: "no trained model".into() });
            None
        }
    };
    push(roundtrip(trained.as_ref()).unwrap_or_else(|e| failed(8, "duplex round trip", e)));
    push(determinism().unwrap_or_else(|e| failed(9, "determinism", e)));

    let passed = lines.iter().filter(|p| **p).count();
    println!("acceptance: {passed}/{} passed in {:.0} s", lines.len(), start.elapsed().as_secs_f64());
    if passed != lines.len() {
        std::process::exit(1);
    }
}
