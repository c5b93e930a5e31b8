use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use ndarray::Array2;

use beat_core::eval::{ablation_csv, eval_model, run_ablation, score, standard_variants, AblationData};
use beat_core::model::{decode_tokens, load_checkpoint, parse_tokens, save_checkpoint, serialize_tokens, tokenize};
use beat_core::preprocess::{preprocess_record, NormStats, Segment, SegmentPair};
use beat_core::signal_io::{
    read_csv_record, read_pair_dir, read_segment_file, read_wfdb_record, write_csv_record, write_pair_files,
    write_segment_file, write_wfdb_record, EcgRecord,
};
use beat_core::synth::{make_dataset, make_records, SynthConfig};
use beat_core::trainer::train_with;

use crate::settings::{usage, Settings};

const DEFAULT_EVAL_SYNTH: usize = 64;

fn set_threads(s: &Settings) -> anyhow::Result<()> {
    let n = s.threads()?;
    if n == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    // A second call in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn read_record(path: &Path, csv_fs: Option<f64>) -> anyhow::Result<EcgRecord> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("hea") => read_wfdb_record(path).with_context(|| format!("reading {}", path.display())),
        Some("csv") => {
            let fs_hz = csv_fs.ok_or_else(|| usage("CSV input needs --fs"))?;
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            read_csv_record(&text, fs_hz, &[]).with_context(|| format!("parsing {}", path.display()))
        }
        _ => Err(usage(format!("{}: expected a .hea or .csv file", path.display()))),
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("record")
        .to_string()
}

pub fn synth(s: &Settings) -> anyhow::Result<()> {
    set_threads(s)?;
    let out_dir: PathBuf = s.require("out-dir")?;
    let count: usize = s.get_or("count", 10)?;
    let mut cfg = SynthConfig::with_leads(s.get_or("leads", 12)?);
    cfg.fs = s.get_or("fs", cfg.fs)?;
    cfg.duration = s.get_or("duration", cfg.duration)?;
    cfg.heart_rate = s.get_or("heart-rate", cfg.heart_rate)?;
    cfg.noise_std = s.get_or("noise-std", cfg.noise_std)?;
    fs::create_dir_all(&out_dir)?;
    let records = make_records(count, &cfg, s.seed()?)?;
    for (i, rec) in records.iter().enumerate() {
        write_wfdb_record(rec, &out_dir, &format!("syn{i:05}"))?;
    }
    eprintln!("wrote {count} records to {}", out_dir.display());
    Ok(())
}

pub fn ingest(s: &Settings) -> anyhow::Result<()> {
    let input: PathBuf = s.require("in")?;
    let out: PathBuf = s.require("out")?;
    let rec = read_record(&input, s.get("fs")?)?;
    fs::write(&out, write_csv_record(&rec))?;
    println!(
        "{} leads={} samples={} fs={}",
        stem(&input),
        rec.n_leads(),
        rec.len(),
        rec.fs
    );
    Ok(())
}

fn record_inputs(input: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if !input.is_dir() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("hea" | "csv")))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no .hea or .csv records in {}", input.display());
    }
    Ok(files)
}

pub fn preprocess(s: &Settings) -> anyhow::Result<()> {
    set_threads(s)?;
    let input: PathBuf = s.require("in")?;
    let out_dir: PathBuf = s.require("out-dir")?;
    let cfg = s.prep_config()?;
    let csv_fs = s.get("fs")?;
    fs::create_dir_all(&out_dir)?;
    let files = record_inputs(&input)?;
    for path in &files {
        let rec = read_record(path, csv_fs)?;
        let pair = preprocess_record(&rec, &cfg).with_context(|| format!("preprocessing {}", path.display()))?;
        write_pair_files(&pair, &out_dir, &stem(path))?;
    }
    eprintln!("wrote {} pairs to {}", files.len(), out_dir.display());
    Ok(())
}

fn load_pairs(dir: &Path) -> anyhow::Result<Vec<SegmentPair>> {
    let pairs = read_pair_dir(dir).with_context(|| format!("reading pairs from {}", dir.display()))?;
    if pairs.is_empty() {
        bail!("no segment pairs in {}", dir.display());
    }
    Ok(pairs)
}

pub fn train(s: &Settings) -> anyhow::Result<()> {
    set_threads(s)?;
    let cfg = s.model_config()?;
    let opts = s.train_config()?;
    let out: PathBuf = s.require("out")?;
    let history: Option<PathBuf> = s.path("history")?;
    let synth = SynthConfig::with_leads(cfg.leads);
    let seed = opts.seed;
    let train_set = match (s.path("data")?, s.get::<usize>("synth")?) {
        (Some(dir), None) => load_pairs(&dir)?,
        (None, Some(n)) => make_dataset(n, &synth, cfg.context_len, cfg.pred_len, seed)?,
        (Some(_), Some(_)) => return Err(usage("give either --data or --synth, not both")),
        (None, None) => return Err(usage("missing training data: --data DIR or --synth N")),
    };
    let eval_set = match s.path("eval-data")? {
        Some(dir) => load_pairs(&dir)?,
        None => make_dataset(
            s.get_or("eval-synth", DEFAULT_EVAL_SYNTH)?,
            &synth,
            cfg.context_len,
            cfg.pred_len,
            seed.wrapping_add(1),
        )?,
    };
    let (params, hist) = train_with(&cfg, &opts, &train_set, &eval_set, |r| {
        eprintln!(
            "epoch {:>3}  total {:.5}  recon {:.5}  pred {:.5}  vq {:.5}  eval_r {:.5}  eval_p {:.5}  util {:.1}%",
            r.epoch, r.train.total, r.train.recon, r.train.pred, r.train.vq, r.eval_loss_r, r.eval_loss_p, r.utilization_pct
        );
    })?;
    save_checkpoint(&params, &out)?;
    if let Some(path) = history {
        hist.write_csv(&path)?;
    }
    eprintln!("saved {}", out.display());
    Ok(())
}

pub fn eval(s: &Settings) -> anyhow::Result<()> {
    set_threads(s)?;
    let ckpt: PathBuf = s.require("ckpt")?;
    let params = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let cfg = &params.config;
    let set = match (s.path("data")?, s.get::<usize>("synth")?) {
        (Some(dir), None) => load_pairs(&dir)?,
        (None, Some(n)) => make_dataset(
            n,
            &SynthConfig::with_leads(cfg.leads),
            cfg.context_len,
            cfg.pred_len,
            s.seed()?.wrapping_add(1),
        )?,
        _ => return Err(usage("give exactly one of --data DIR or --synth N")),
    };
    let m = eval_model(&params, &set)?;
    let base_r = s.get_or("baseline-r", m.loss_r)?;
    let base_p = s.get_or("baseline-p", m.loss_p)?;
    let sc = score(m.utilization_pct, m.loss_r, m.loss_p, base_r, base_p)?;
    println!(
        "loss_r={:.6} loss_p={:.6} utilization_pct={:.2} score={:.2}",
        m.loss_r, m.loss_p, m.utilization_pct, sc
    );
    Ok(())
}

pub fn encode(s: &Settings) -> anyhow::Result<()> {
    let ckpt: PathBuf = s.require("ckpt")?;
    let input: PathBuf = s.require("in")?;
    let params = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let seg = read_segment_file(&input).with_context(|| format!("reading {}", input.display()))?;
    let seq = tokenize(&params, seg.samples.view(), None)?;
    let line = serialize_tokens(&seq);
    match s.path("out")? {
        Some(path) => fs::write(path, format!("{line}\n"))?,
        None => writeln!(std::io::stdout(), "{line}")?,
    }
    Ok(())
}

pub fn decode(s: &Settings) -> anyhow::Result<()> {
    let ckpt: PathBuf = s.require("ckpt")?;
    let tokens: PathBuf = s.require("tokens")?;
    let out: PathBuf = s.require("out")?;
    let params = load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let cfg = &params.config;
    let text = fs::read_to_string(&tokens)?;
    let seq = parse_tokens(&text, cfg.k1, cfg.residual_size(), cfg.levels)?;
    let recon: Array2<f32> = decode_tokens(&params, &seq)?;
    let seg = Segment {
        samples: recon,
        fs: beat_core::preprocess::TARGET_FS as f32,
        norm_stats: vec![NormStats { mean: 0.0, std: 1.0 }; cfg.leads],
        source_offset: 0,
    };
    write_segment_file(&seg, &out)?;
    Ok(())
}

pub fn ablate(s: &Settings) -> anyhow::Result<()> {
    set_threads(s)?;
    let base = s.model_config()?;
    let opts = s.train_config()?;
    let out: PathBuf = s.require("out")?;
    let data = AblationData {
        synth: SynthConfig::with_leads(base.leads),
        n_train: s.get_or("n-train", 512)?,
        n_eval: s.get_or("n-eval", 128)?,
        seed: opts.seed,
    };
    let reports = run_ablation(&base, &opts, &data, &standard_variants(&base))?;
    fs::write(&out, ablation_csv(&reports))?;
    eprintln!("wrote {} rows to {}", reports.len(), out.display());
    Ok(())
}
