use std::fs;
use std::path::Path;
use std::process::ExitCode;

use duplex_core::config::RunConfig;
use duplex_core::data::{self, CorpusSpec, Difficulty, ParallelPair};
use duplex_core::diffusion::{ancestral_sample, ScheduleKind, ScheduleSpec};
use duplex_core::eval::{evaluate_direction, roundtrip_eval, RoundTrip};
use duplex_core::model::{DuplexModel, Side};
use duplex_core::params::{Bound, Ctx};
use duplex_core::rdc::{AttnSource, Direction, SplitState};
use duplex_core::rng::RngStreams;
use duplex_core::train::{load_model, resolve_checkpoint, Stage, Trainer, TrainScalar};
use duplex_core::{selftest, Error, Result, Tensor};
use serde_json::json;

use crate::{
    Command, DifficultyArg, DirectionArg, EvalArgs, GenDataArgs, InspectArgs, OrderArg, RoundtripArgs, SampleArgs, SampleDirection,
    ScheduleArg, SplitArg, StageArg, TrainArgs,
};

pub fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sample(a) => sample(a),
        Command::Roundtrip(a) => roundtrip(a),
        Command::Inspect(a) => inspect(a),
        Command::Selftest => run_selftest(),
    }?;
    Ok(ExitCode::SUCCESS)
}

/// `println!` that ends the process quietly when stdout is a closed pipe.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        if let Err(e) = writeln!(std::io::stdout(), $($arg)*) {
            if e.kind() == std::io::ErrorKind::BrokenPipe {
                std::process::exit(0);
            }
            return Err(e.into());
        }
    }};
}

fn emit(value: &serde_json::Value, to: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match to {
        Some(p) => fs::write(p, text + "\n")?,
        None => out!("{text}"),
    }
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let difficulty = match a.difficulty {
        DifficultyArg::Copy => Difficulty::Copy,
        DifficultyArg::Shift => Difficulty::Shift,
        DifficultyArg::ReverseShift => Difficulty::ReverseShift,
        DifficultyArg::LocalSwapStretch => Difficulty::LocalSwapStretch,
    };
    let spec = CorpusSpec {
        pairs: a.pairs,
        vocab: a.vocab,
        max_len: a.max_len,
        difficulty,
        seed: a.seed.seed.unwrap_or(0),
    };
    let pairs = data::generate_corpus(&spec)?;
    data::write_jsonl(&a.out, &pairs)?;
    out!("{}", json!({"pairs": pairs.len(), "difficulty": difficulty.name(), "out": a.out}));
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed.seed {
        cfg.seed = s;
    }
    if let Some(v) = a.vocab {
        cfg.model.vocab_x = v;
        cfg.model.vocab_y = v;
    }
    let t = &mut cfg.train;
    for (flag, slot) in [(a.k1, &mut t.k1), (a.k2, &mut t.k2), (a.k3, &mut t.k3), (a.batch_tokens, &mut t.batch_tokens)] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    if let Some(lr) = a.lr {
        t.lr = lr;
    }
    cfg.validate()?;

    let pairs = data::read_jsonl(&a.data)?;
    data::verify_corpus(&pairs, cfg.model.vocab_x.max(cfg.model.vocab_y), None)?;
    let splits = data::split_by_hash(&pairs, cfg.data.dev_permille, cfg.data.test_permille)?;
    let stages: Vec<Stage> = match a.stage {
        StageArg::One => vec![Stage::Rdc],
        StageArg::Two => vec![Stage::Ddm],
        StageArg::Three => vec![Stage::Finetune],
        StageArg::All => Stage::ALL.to_vec(),
    };
    let trainer = match &a.resume {
        Some(p) => Trainer::resume(cfg, splits.train, splits.dev, &resolve_checkpoint(p)?)?,
        None => Trainer::new(cfg, splits.train, splits.dev)?,
    };
    let mut trainer = trainer.with_output(&a.out_dir)?;
    trainer.run(&stages)?;
    let last_eval = trainer.history.iter().rev().find(|r| r.kind == "eval");
    out!(
        "{}",
        json!({
            "out_dir": a.out_dir,
            "steps": trainer.progress.step,
            "stage_steps": trainer.progress.stage_steps,
            "acc_fwd": last_eval.and_then(|r| r.acc_fwd),
            "acc_rev": last_eval.and_then(|r| r.acc_rev),
        })
    );
    Ok(())
}

fn load_split(path: &Path, cfg: &RunConfig, split: SplitArg) -> Result<Vec<ParallelPair>> {
    let pairs = data::read_jsonl(path)?;
    data::verify_corpus(&pairs, cfg.model.vocab_x.max(cfg.model.vocab_y), None)?;
    let s = data::split_by_hash(&pairs, cfg.data.dev_permille, cfg.data.test_permille)?;
    let chosen = match split {
        SplitArg::All => pairs,
        SplitArg::Train => s.train,
        SplitArg::Dev => s.dev,
        SplitArg::Test => s.test,
    };
    if chosen.is_empty() {
        return Err(Error::Data("the selected split is empty".into()));
    }
    Ok(chosen)
}

fn eval(a: EvalArgs) -> Result<()> {
    let (cfg, model, store) = load_model(&a.checkpoint)?;
    let pairs = load_split(&a.data, &cfg, a.split)?;
    let b = store.bind_frozen();
    let dirs = match a.direction {
        DirectionArg::Fwd => vec![Direction::Forward],
        DirectionArg::Rev => vec![Direction::Reverse],
        DirectionArg::Both => vec![Direction::Forward, Direction::Reverse],
    };
    let mut reports = Vec::new();
    let mut trips = Vec::new();
    for dir in dirs {
        reports.push(evaluate_direction(&model, &b, &pairs, dir, a.beam)?);
        let (order, seqs): (RoundTrip, Vec<Vec<usize>>) = match dir {
            Direction::Forward => (RoundTrip::Xyx, pairs.iter().map(|p| p.src.clone()).collect()),
            Direction::Reverse => (RoundTrip::Yxy, pairs.iter().map(|p| p.tgt.clone()).collect()),
        };
        trips.push(roundtrip_eval(&model, &b, &seqs, order)?);
    }
    let report = json!({
        "checkpoint": resolve_checkpoint(&a.checkpoint)?,
        "pairs": pairs.len(),
        "beam": a.beam,
        "directions": reports,
        "roundtrip": trips,
    });
    emit(&report, a.report.as_deref())
}

/// Per position, the unit whose constant-sequence canvas is closest to the
/// sampled frames. A readable proxy for a sampled canvas.
fn nearest_units(model: &DuplexModel, b: &Bound<TrainScalar>, side: Side, canvas: &Tensor<TrainScalar>, len: usize) -> Result<Vec<usize>> {
    let h = model.hidden();
    let v = model.cfg.vocab(side);
    let mut refs = Vec::with_capacity(v);
    for u in 0..v {
        let seq = vec![u; len];
        refs.push(model.canvas(b, side, &[seq.as_slice()])?.0.to_f64_vec());
    }
    let x = canvas.to_f64_vec();
    Ok((0..len)
        .map(|i| {
            let span = 2 * i * h..(2 * i + 2) * h;
            let dist = |r: &Vec<f64>| -> f64 { span.clone().map(|k| (r[k] - x[k]).powi(2)).sum() };
            (0..v)
                .min_by(|&p, &q| dist(&refs[p]).total_cmp(&dist(&refs[q])))
                .expect("non-empty vocabulary")
        })
        .collect())
}

fn sample(a: SampleArgs) -> Result<()> {
    let (cfg, model, store) = load_model(&a.checkpoint)?;
    let pairs = data::read_jsonl(&a.data)?;
    let dir = match a.direction {
        SampleDirection::Fwd => Direction::Forward,
        SampleDirection::Rev => Direction::Reverse,
    };
    let (src_side, tgt_side) = (Side::source_of(dir), Side::target_of(dir));
    let trained = match tgt_side {
        Side::X => cfg.diffusion.schedule_x,
        Side::Y => cfg.diffusion.schedule_y,
    };
    let spec = ScheduleSpec {
        kind: match a.schedule {
            Some(ScheduleArg::Linear) => ScheduleKind::Linear,
            Some(ScheduleArg::ScaledLinear) => ScheduleKind::ScaledLinear,
            None => trained.kind,
        },
        steps: a.steps.unwrap_or(trained.steps),
        ..trained
    };
    let sched = spec.build()?;
    let seed = a.seed.seed.unwrap_or(cfg.seed);
    let mut rng = RngStreams::new(seed).stream("sample");
    let b = store.bind_frozen();
    for (i, p) in pairs.iter().take(a.count).enumerate() {
        let (source, reference) = match dir {
            Direction::Forward => (&p.src, &p.tgt),
            Direction::Reverse => (&p.tgt, &p.src),
        };
        let (memory, mem_segs) = model.canvas(&b, src_side, &[source.as_slice()])?;
        let (clean, tgt_segs) = model.canvas(&b, tgt_side, &[reference.as_slice()])?;
        let out = ancestral_sample(&model, &b, &sched, dir, &memory, &mem_segs, tgt_segs, &mut rng)?;
        let mse = out.sub(&clean)?.square().mean().item() as f64;
        let units = nearest_units(&model, &b, tgt_side, &out, reference.len())?;
        out!(
            "{}",
            json!({
                "index": i,
                "direction": dir.name(),
                "schedule": spec.kind,
                "steps": spec.steps,
                "seed": seed,
                "source": source,
                "reference": reference,
                "units_nearest": units,
                "canvas_mse": mse,
            })
        );
    }
    Ok(())
}

fn roundtrip(a: RoundtripArgs) -> Result<()> {
    let (_, model, store) = load_model(&a.checkpoint)?;
    let pairs = data::read_jsonl(&a.data)?;
    let b = store.bind_frozen();
    let orders = match a.order {
        OrderArg::Xyx => vec![RoundTrip::Xyx],
        OrderArg::Yxy => vec![RoundTrip::Yxy],
        OrderArg::Both => vec![RoundTrip::Xyx, RoundTrip::Yxy],
    };
    let mut reports = Vec::new();
    for order in orders {
        let seqs: Vec<Vec<usize>> = match order {
            RoundTrip::Xyx => pairs.iter().map(|p| p.src.clone()).collect(),
            RoundTrip::Yxy => pairs.iter().map(|p| p.tgt.clone()).collect(),
        };
        reports.push(roundtrip_eval(&model, &b, &seqs, order)?);
    }
    emit(&json!({ "roundtrip": reports }), a.report.as_deref())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let (model, store) = match &a.checkpoint {
        Some(p) => {
            let (_, m, s) = load_model(p)?;
            (m, s)
        }
        None => {
            let mut cfg = RunConfig::default().model;
            cfg.stack.layers = a.layers;
            cfg.stack.hidden = a.hidden;
            DuplexModel::new::<TrainScalar>(&cfg, a.seed.seed.unwrap_or(0))?
        }
    };
    let stack = &model.stack;
    let h = model.hidden();
    let b = store.bind_frozen();
    let x = duplex_core::gradcheck::rand_tensor(&[16, h], &mut RngStreams::new(a.seed.seed.unwrap_or(0)).stream("inspect"));
    let x = SplitState::split(&Tensor::<TrainScalar>::from_f64(&[16, h], &x.to_f64_vec())?)?;

    let ctx = Ctx::eval().with_trace();
    let y = stack.map(&b, &ctx, x.clone(), Direction::Forward)?;
    let fwd = duplex_core::rdc::chain_string(&ctx.take_trace());
    let back = stack.map(&b, &ctx, y, Direction::Reverse)?;
    let rev = duplex_core::rdc::chain_string(&ctx.take_trace());

    let plain = Ctx::eval();
    let mut per_layer = Vec::new();
    for layer in &stack.layers {
        let out = layer.forward(&b, &plain, &x, AttnSource::Own)?;
        let rec = layer.reverse(&b, &plain, &out, AttnSource::Own)?;
        per_layer.push(rec.max_abs_diff(&x));
    }
    let mut report = json!({
        "layers": stack.depth(),
        "hidden": h,
        "precision": "f32",
        "layer_roundtrip_error": per_layer,
        "stack_roundtrip_error": back.max_abs_diff(&x),
    });
    if a.chain {
        report["chain"] = json!({
            "forward": fwd,
            "reverse": rev,
            "palindrome": selftest::is_mirror(&fwd, &rev),
        });
    }
    emit(&report, None)
}

fn run_selftest() -> Result<()> {
    let checks = selftest::run_all()?;
    out!("{:<26} {:>6} {:>12} {:>10}  detail", "suite", "result", "worst", "bound");
    for c in &checks {
        out!(
            "{:<26} {:>6} {:>12.3e} {:>10.1e}  {}",
            c.name,
            if c.passed { "pass" } else { "FAIL" },
            c.value,
            c.tolerance,
            c.detail
        );
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Data(format!("self-test failed: {}", failed.join(", "))))
    }
}
