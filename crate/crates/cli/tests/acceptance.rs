//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use beat_core::eval::{eval_model, score, AblationData};
use beat_core::model::{
    check_gradients, decode_checkpoint, decode_tokens, encode_checkpoint, forward, init_model, parse_tokens,
    serialize_tokens, tokenize, BeatConfig, BeatParams, Code, GradCheckOptions, QuantMode, TokenSequence,
};
use beat_core::preprocess::{clean, quality_score, resample, select_window, NormStats, Segment};
use beat_core::quantizer::{dvq_quantize, Codebook};
use beat_core::signal_io::{decode_segment, encode_segment};
use beat_core::synth::{make_dataset, synth_record, SynthConfig};
use beat_core::trainer::{train, AdamW, TrainConfig};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Small model used by the training criteria.
fn desk_config(levels: usize, k: usize) -> BeatConfig {
    BeatConfig {
        leads: 2,
        dim: 32,
        queries: 8,
        enc_layers: 1,
        dec_layers: 1,
        heads: 4,
        ffn_mult: 2,
        k1: k,
        k2: k,
        levels,
        ..BeatConfig::default()
    }
}

fn desk_training(epochs: usize, batch_size: usize, lr: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size,
        optimizer: AdamW {
            lr,
            ..AdamW::default()
        },
        seed,
        ..TrainConfig::default()
    }
}

fn score_rows() -> Outcome {
    let (br, bp) = (0.3355, 0.8113);
    let rows = [
        ("Original Model", 72.82, 0.3355, 0.8113, 94.56),
        ("w/o DVQ Structure", 62.53, 0.5305, 0.8955, 74.04),
        ("Larger Codebook", 39.45, 0.2978, 0.8571, 90.82),
        ("Smaller Codebook", 75.66, 0.3652, 0.8279, 91.08),
        ("Longer Input", 59.77, 0.6059, 0.9220, 69.30),
        ("Shorter Input", 46.48, 0.3249, 0.8592, 88.37),
    ];
    let mut worst: f64 = 0.0;
    for (label, util, lr, lp, want) in rows {
        let got = score(util, lr, lp, br, bp).map_err(err)?;
        let diff = (got - want).abs();
        ensure(diff <= 0.01, || format!("{label}: {got:.4} vs {want}"))?;
        worst = worst.max(diff);
    }
    Ok(format!("6 rows, max |diff| {worst:.4} (tol 0.01)"))
}

fn argmin_row(book: &Array2<f64>, v: &Array1<f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, row) in book.rows().into_iter().enumerate() {
        let d: f64 = row.iter().zip(v.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

fn dvq_oracle() -> Outcome {
    let (k, c, n) = (16, 8, 10_000);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut normal = |r: usize, cols: usize| Array2::from_shape_fn((r, cols), |_| rng.random_range(-2.0..2.0));
    let c1 = normal(k, c);
    let mut c2 = normal(k, c) * 0.5;
    let vs = normal(n, c);
    let core = Codebook::new(c1.clone(), 1).map_err(err)?;
    let residual = Codebook::new(c2.clone(), 2).map_err(err)?;
    for (idx, v) in vs.rows().into_iter().enumerate() {
        let got = dvq_quantize(&core, Some(&residual), v, None).map_err(err)?;
        let v = v.to_owned();
        let i = argmin_row(&c1, &v);
        let r = &v - &c1.row(i);
        let j = argmin_row(&c2, &r);
        let want = &c1.row(i) + &c2.row(j);
        ensure(got.core_index == i && got.residual_index == Some(j), || {
            format!("vector {idx}: indices ({}, {:?}) vs ({i}, {j})", got.core_index, got.residual_index)
        })?;
        ensure(got.quantized == want, || format!("vector {idx}: quantized vector differs"))?;
    }
    c2.row_mut(0).fill(0.0);
    let residual = Codebook::new(c2, 2).map_err(err)?;
    let norm = |a: &Array1<f64>| a.dot(a).sqrt();
    for (idx, v) in vs.rows().into_iter().enumerate() {
        let got = dvq_quantize(&core, Some(&residual), v, None).map_err(err)?;
        let after_core = norm(&(&v - &got.q1));
        let after_both = norm(&(&v - &got.q1 - &got.q2));
        ensure(after_both <= after_core, || {
            format!("vector {idx}: {after_both} > {after_core} with a zero residual code")
        })?;
    }
    Ok(format!("{n} vectors, exact index and value match; residual never increases error"))
}

fn gradient_check() -> Outcome {
    let cfg = BeatConfig {
        context_len: 20,
        leads: 1,
        patch: 5,
        dim: 8,
        queries: 2,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        ffn_mult: 2,
        k1: 4,
        k2: 4,
        levels: 2,
        pred_len: 10,
        ..BeatConfig::default()
    };
    let params: BeatParams<f64> = init_model(&cfg, 3).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Array2::from_shape_fn((cfg.context_len, cfg.leads), |_| rng.random_range(-1.5..1.5));
    let future = Array2::from_shape_fn((cfg.pred_len, cfg.leads), |_| rng.random_range(-1.5..1.5));
    let opts = GradCheckOptions::default();
    let report = check_gradients(&params, &x, &future, opts).map_err(err)?;
    ensure(report.checked == params.n_params(), || {
        format!("checked {} of {} entries", report.checked, params.n_params())
    })?;
    if let Some(m) = report.mismatches.first() {
        return Err(format!(
            "{} mismatches, first {}[{}]: analytic {:e} numeric {:e}",
            report.mismatches.len(),
            m.array,
            m.index,
            m.analytic,
            m.numeric
        ));
    }
    Ok(format!(
        "{} entries, max rel err {:.2e} (tol {:e}, abs floor {:e})",
        report.checked, report.max_rel_error, opts.rel_tol, opts.abs_floor
    ))
}

fn mask_leakage() -> Outcome {
    let cfg = desk_config(2, 32);
    let pairs = make_dataset(100, &SynthConfig::with_leads(cfg.leads), cfg.context_len, cfg.pred_len, 12)
        .map_err(err)?;
    let (params, _) = train(&cfg, &desk_training(0, 8, 1e-3, 11), &pairs, &pairs).map_err(err)?;
    let mut distinct = std::collections::HashSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut max_dist: f32 = 0.0;
    for (n, pair) in pairs.iter().enumerate() {
        let a = &pair.context.samples;
        let tokens = tokenize(&params, a.view(), None).map_err(err)?;
        distinct.insert(tokens.indices());
        let noise = Array2::from_shape_fn(a.dim(), |_| rng.random_range(-1.0f32..1.0));
        let mut eps = 0.5f32;
        let b = loop {
            let b = a + &(&noise * eps);
            if b != *a && tokenize(&params, b.view(), None).map_err(err)? == tokens {
                break b;
            }
            eps *= 0.5;
            ensure(eps > 1e-6, || format!("pair {n}: no distinct segment shares the tokens"))?;
        };
        max_dist = max_dist.max((&b - a).iter().fold(0.0f32, |m, v| m.max(v.abs())));
        let (_, ca) = forward(&params, a.view(), pair.future.view(), QuantMode::Live).map_err(err)?;
        let (_, cb) = forward(&params, b.view(), pair.future.view(), QuantMode::Live).map_err(err)?;
        ensure(ca.recon == cb.recon, || format!("pair {n}: forward reconstructions differ"))?;
        let dec = decode_tokens(&params, &tokens).map_err(err)?;
        ensure(dec == ca.recon, || format!("pair {n}: decode_tokens disagrees with forward"))?;
    }
    Ok(format!(
        "100 pairs bit-identical over {} distinct token lines, largest input difference {max_dist:.3e}",
        distinct.len()
    ))
}

fn dvq_ablation() -> Outcome {
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let mut losses = Vec::new();
        for (levels, k) in [(2, 128), (1, 256)] {
            let cfg = desk_config(levels, k);
            let data = AblationData {
                synth: SynthConfig::with_leads(cfg.leads),
                n_train: 512,
                n_eval: 128,
                seed,
            };
            let (train_set, eval_set) = data.generate(&cfg).map_err(err)?;
            let (params, _) = train(&cfg, &desk_training(40, 16, 3e-3, seed), &train_set, &eval_set).map_err(err)?;
            losses.push(eval_model(&params, &eval_set).map_err(err)?.loss_r);
        }
        lines.push(format!("seed {seed}: {:.4} vs {:.4}", losses[0], losses[1]));
        ensure(losses[0] < losses[1], || {
            format!("levels=2 not better ({})", lines.join("; "))
        })?;
    }
    Ok(format!("levels=2/K=128 vs levels=1/K=256 eval loss_r: {}", lines.join("; ")))
}

fn training_sanity() -> Outcome {
    let cfg = desk_config(2, 32);
    let synth = SynthConfig::with_leads(cfg.leads);
    let train_set = make_dataset(200, &synth, cfg.context_len, cfg.pred_len, 21).map_err(err)?;
    let eval_set = make_dataset(64, &synth, cfg.context_len, cfg.pred_len, 22).map_err(err)?;
    let (_, hist) = train(&cfg, &desk_training(30, 8, 1e-2, 21), &train_set, &eval_set).map_err(err)?;
    let first = hist.epochs.first().ok_or("empty history")?;
    let last = hist.epochs.last().ok_or("empty history")?;
    let ratio = last.train.total / first.train.total;
    let util = last.utilization_pct;
    let parts = |l: &beat_core::model::LossBundle| format!("{:.3}/{:.3}/{:.3}", l.recon, l.pred, l.vq);
    let detail = format!(
        "L_total {:.4} -> {:.4} ({:.1}% of epoch 1; recon/pred/vq {} -> {}), utilization {util:.1}%",
        first.train.total,
        last.train.total,
        ratio * 100.0,
        parts(&first.train),
        parts(&last.train)
    );
    ensure(ratio < 0.5 && util >= 50.0, || detail.clone())?;
    Ok(detail)
}

fn random_segment(rng: &mut ChaCha8Rng) -> Segment {
    let rows = rng.random_range(1..600);
    let leads = rng.random_range(1..13);
    Segment {
        samples: Array2::from_shape_fn((rows, leads), |_| f32::from_bits(rng.random::<u32>() & 0xbfff_ffff)),
        fs: rng.random_range(1.0f32..2000.0),
        norm_stats: (0..leads)
            .map(|_| NormStats {
                mean: rng.random_range(-5.0f32..5.0),
                std: rng.random_range(0.0f32..3.0),
            })
            .collect(),
        source_offset: 0,
    }
}

fn random_tiny_config(rng: &mut ChaCha8Rng) -> BeatConfig {
    let patch = rng.random_range(1..5);
    let heads = rng.random_range(1..3);
    let levels = rng.random_range(1..3);
    BeatConfig {
        context_len: patch * rng.random_range(1..5),
        leads: rng.random_range(1..4),
        patch,
        dim: heads * rng.random_range(1..4),
        queries: rng.random_range(1..4),
        enc_layers: rng.random_range(0..2),
        dec_layers: rng.random_range(0..2),
        heads,
        ffn_mult: rng.random_range(1..3),
        k1: rng.random_range(1..6),
        k2: if levels == 2 { rng.random_range(1..6) } else { 0 },
        levels,
        pred_len: rng.random_range(1..8),
        pred_from_quantized: rng.random(),
        ..BeatConfig::default()
    }
}

fn round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for i in 0..1000 {
        let seg = random_segment(&mut rng);
        let bytes = encode_segment(&seg);
        let back = decode_segment(&bytes).map_err(err)?;
        let same_bits = back.samples.iter().zip(seg.samples.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(back == seg && same_bits && encode_segment(&back) == bytes, || {
            format!("segment {i} changed")
        })?;
    }
    for i in 0..1000 {
        let cfg = random_tiny_config(&mut rng);
        cfg.validate().map_err(|e| format!("generated config {i}: {e}"))?;
        let params: BeatParams<f32> = init_model(&cfg, rng.random()).map_err(err)?;
        let bytes = encode_checkpoint(&params);
        let back = decode_checkpoint(&bytes).map_err(err)?;
        ensure(back == params && encode_checkpoint(&back) == bytes, || format!("checkpoint {i} changed"))?;
    }
    for i in 0..1000 {
        let levels = rng.random_range(1..3);
        let k1 = rng.random_range(1..600);
        let k2 = if levels == 2 { rng.random_range(1..600) } else { 0 };
        let codes = (0..rng.random_range(0..40))
            .map(|_| Code {
                core: rng.random_range(0..k1),
                residual: (levels == 2).then(|| rng.random_range(0..k2)),
            })
            .collect();
        let seq = TokenSequence { codes, k1, k2 };
        let text = serialize_tokens(&seq);
        let back = parse_tokens(&text, k1, k2, levels).map_err(err)?;
        ensure(back == seq && serialize_tokens(&back) == text, || format!("token sequence {i} changed"))?;
    }
    Ok("1000 segments, 1000 checkpoints, 1000 token lines; zero mismatches".into())
}

fn bin_amplitude(x: &[f64], bin: usize) -> f64 {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf[bin].norm()
}

fn preprocessing_physics() -> Outcome {
    let fs = 250.0;
    let n = 2500;
    let tone = |f: f64| Array1::from_shape_fn(n, |i| (2.0 * std::f64::consts::PI * f * i as f64 / fs).sin());
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let raw = Array2::from_shape_fn((10_000, 3), |_| rng.random_range(-1.0..1.0));
    let down = resample(raw.view(), 500.0, 250.0).map_err(err)?;
    ensure(down.dim() == (5000, 3), || format!("500->250 Hz gave {:?}", down.dim()))?;

    let (drift, ten) = (tone(0.2), tone(10.0));
    let mixed = (&drift + &ten).insert_axis(ndarray::Axis(1));
    let out = clean(mixed.view(), fs, 50.0).map_err(err)?;
    let out: Vec<f64> = out.column(0).to_vec();
    // 0.2 Hz and 10 Hz fall on bins 2 and 100 of a 10 s transform.
    let db = |after: f64, before: f64| 20.0 * (after / before).log10();
    let drift_db = db(bin_amplitude(&out, 2), bin_amplitude(drift.as_slice().unwrap(), 2));
    let ten_db = db(bin_amplitude(&out, 100), bin_amplitude(ten.as_slice().unwrap(), 100));
    ensure(drift_db <= -20.0, || format!("0.2 Hz only {drift_db:.2} dB down"))?;
    ensure(ten_db >= -1.0, || format!("10 Hz lost {:.2} dB", -ten_db))?;

    let mut synth = SynthConfig::with_leads(2);
    synth.duration = 12.0;
    synth.fs = fs;
    synth.seed = 42;
    let mut signal = synth_record(&synth).map_err(err)?.samples;
    for start in [300, 1400, 2200] {
        signal
            .slice_mut(s![start..start + 200, ..])
            .mapv_inplace(|v| v + rng.random_range(-2.0..2.0));
    }
    let win = select_window(signal.view(), fs, 500).map_err(err)?;
    let mut best = (0, f64::NEG_INFINITY);
    for off in (0..=signal.nrows() - 500).step_by(125) {
        let q = quality_score(signal.slice(s![off..off + 500, ..]), fs);
        if q > best.1 {
            best = (off, q);
        }
    }
    ensure(win.samples.nrows() == 500, || format!("window has {} samples", win.samples.nrows()))?;
    ensure(win.offset == best.0 && win.samples == signal.slice(s![best.0..best.0 + 500, ..]), || {
        format!("window at {} vs brute-force best {}", win.offset, best.0)
    })?;
    Ok(format!(
        "10000->5000 samples; 0.2 Hz {drift_db:.1} dB, 10 Hz {ten_db:.2} dB; window offset {} of {} candidates",
        win.offset,
        (signal.nrows() - 500) / 125 + 1
    ))
}

fn run_train(dir: &Path, tag: &str) -> Result<(Vec<u8>, Vec<u8>), String> {
    let ckpt = dir.join(format!("{tag}.ckpt"));
    let hist = dir.join(format!("{tag}.csv"));
    let out = Command::new(env!("CARGO_BIN_EXE_beat"))
        .args(["train", "--synth", "24", "--eval-synth", "8", "--epochs", "3", "--batch-size", "8"])
        .args(["--leads", "2", "--dim", "16", "--queries", "4", "--heads", "2", "--k1", "16", "--k2", "16"])
        .args(["--enc-layers", "1", "--dec-layers", "1", "--lr", "3e-3", "--seed", "5", "--threads", "1"])
        .arg("--out")
        .arg(&ckpt)
        .arg("--history")
        .arg(&hist)
        .output()
        .map_err(err)?;
    ensure(out.status.success(), || {
        format!("train exited {}: {}", out.status, String::from_utf8_lossy(&out.stderr))
    })?;
    Ok((std::fs::read(ckpt).map_err(err)?, std::fs::read(hist).map_err(err)?))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let (c1, h1) = run_train(dir.path(), "a")?;
    let (c2, h2) = run_train(dir.path(), "b")?;
    ensure(c1 == c2, || "checkpoints differ".into())?;
    ensure(h1 == h2, || "history CSVs differ".into())?;
    Ok(format!("checkpoint {} bytes and history {} bytes identical", c1.len(), h1.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("score formula on published rows", score_rows),
        ("quantizer matches two-stage argmin", dvq_oracle),
        ("gradients match finite differences", gradient_check),
        ("decoder sees only the tokens", mask_leakage),
        ("two levels beat one at equal budget", dvq_ablation),
        ("training reduces loss, keeps codes alive", training_sanity),
        ("bit-exact round trips", round_trips),
        ("preprocessing physics", preprocessing_physics),
        ("train is deterministic at one thread", determinism),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut stdout = std::io::stdout();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t0.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        let _ = writeln!(stdout, "[{tag}] {}. {name}: {detail} ({secs:.1}s)", i + 1);
    }
    let _ = stdout.flush();
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        let _ = writeln!(stdout, "{failed} criteria failed");
        ExitCode::FAILURE
    }
}
