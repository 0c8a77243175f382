use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sparseffn::bench::{run_bench, BenchConfig};
use sparseffn::ffn::Variant;
use sparseffn::formats::{
    dense_to_twell_with, hybrid_to_dense_matrix, peek_header, read_hybrid_bytes, read_twell_bytes, twell_to_dense,
    twell_to_hybrid, write_hybrid_bytes, write_twell_bytes, FileKind, HybridCapacity, HybridMatrix, PackPredicate,
    TwellConfig,
};
use sparseffn::statkit::{
    correlate, write_alog, write_layer_csv, write_log_csv, write_position_csv, write_token_csv, LogStream,
    StatsAccumulator,
};
use sparseffn::tensor::{read_dense_bytes, write_dense_bytes, DType, DenseFile};
use sparseffn::trainer::{train_toy_run, TrainConfig, TrainReport};
use sparseffn::{DenseMatrix, Scalar};

use crate::{BenchArgs, Cli, Command, ConvertArgs, Keep, LogKind, Statistic, StatsArgs, Target, TrainArgs};

/// A result that is well formed but numerically unacceptable.
#[derive(Debug)]
struct NumericalFailure(String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<NumericalFailure>().is_some() {
            return 4;
        }
        if let Some(err) = cause.downcast_ref::<sparseffn::Error>() {
            return match err {
                sparseffn::Error::NonFinite { .. } => 4,
                err if err.is_capacity() => 3,
                _ => 2,
            };
        }
    }
    2
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(sparseffn::Error::InvalidConfig {
                key: "threads".into(),
                reason: "must be at least 1".into()
            });
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot configure the worker pool")?;
    }
    match cli.command {
        Command::Convert(a) => convert(&a),
        Command::Validate { path } => validate(&path),
        Command::Bench(a) => bench(&a, cli.seed),
        Command::TrainToy(a) => train(&a, cli.seed),
        Command::Stats(a) => stats(&a),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path)
        .map_err(sparseffn::Error::from)
        .with_context(|| format!("cannot read {}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes)
        .map_err(sparseffn::Error::from)
        .with_context(|| format!("cannot write {}", path.display()))
}

fn dense_as<T: Scalar>(file: DenseFile) -> DenseMatrix<T> {
    match file {
        DenseFile::F32(m, _) => m.cast(),
        DenseFile::F64(m) => m.cast(),
    }
}

fn convert(a: &ConvertArgs) -> Result<()> {
    let bytes = read_file(&a.input)?;
    let (kind, dtype) = peek_header(&bytes)?;
    let out = match dtype {
        DType::F64 => convert_as::<f64>(&bytes, kind, dtype, a)?,
        _ => convert_as::<f32>(&bytes, kind, dtype, a)?,
    };
    write_file(&a.output, &out)
}

fn convert_as<T: Scalar>(bytes: &[u8], kind: FileKind, dtype: DType, a: &ConvertArgs) -> Result<Vec<u8>> {
    // Dense sources are packed per --keep; sparse sources keep every
    // stored non-zero.
    let (dense, pred) = match kind {
        FileKind::Dense => (
            dense_as::<T>(read_dense_bytes(bytes)?),
            match a.keep {
                Keep::Positive => PackPredicate::Positive,
                Keep::Nonzero => PackPredicate::NonZero,
            },
        ),
        FileKind::Twell => {
            let (tw, _) = read_twell_bytes::<T>(bytes)?;
            if a.to == Target::Hybrid {
                let cap = a.dense_cap.unwrap_or(tw.rows());
                let (h, _) = twell_to_hybrid(&tw, a.ell_width, cap, false);
                h.check_capacity()?;
                return Ok(write_hybrid_bytes(&h, dtype)?);
            }
            (twell_to_dense(&tw)?, PackPredicate::NonZero)
        }
        FileKind::Hybrid => {
            let (h, _) = read_hybrid_bytes::<T>(bytes)?;
            (hybrid_to_dense_matrix(&h)?, PackPredicate::NonZero)
        }
    };
    Ok(match a.to {
        Target::Dense => write_dense_bytes(&dense, dtype)?,
        Target::Twell => {
            let tw = dense_to_twell_with(&dense, TwellConfig::new(a.tile, a.compress)?, pred)?;
            write_twell_bytes(&tw, dtype)?
        }
        Target::Hybrid => {
            let cap = HybridCapacity::new(a.ell_width, a.dense_cap.unwrap_or(dense.rows()));
            let h = HybridMatrix::from_dense(&dense, cap, pred);
            h.check_capacity()?;
            write_hybrid_bytes(&h, dtype)?
        }
    })
}

fn validate(path: &Path) -> Result<()> {
    let bytes = read_file(path)?;
    let (kind, dtype) = peek_header(&bytes)?;
    let summary = match dtype {
        DType::F64 => describe::<f64>(&bytes, kind)?,
        _ => describe::<f32>(&bytes, kind)?,
    };
    println!("ok: {summary} {}", dtype.name());
    Ok(())
}

fn describe<T: Scalar>(bytes: &[u8], kind: FileKind) -> Result<String> {
    Ok(match kind {
        FileKind::Dense => {
            let d = dense_as::<T>(read_dense_bytes(bytes)?);
            format!("DNSE {}x{}", d.rows(), d.cols())
        }
        FileKind::Twell => {
            let (tw, _) = read_twell_bytes::<T>(bytes)?;
            let c = tw.config();
            format!(
                "TWLL {}x{} T={} C={} nnz={}",
                tw.rows(),
                tw.cols(),
                c.tile_width(),
                c.compression(),
                tw.total_nnz()
            )
        }
        FileKind::Hybrid => {
            let (h, _) = read_hybrid_bytes::<T>(bytes)?;
            let cap = h.capacity();
            format!(
                "HYBR {}x{} ell_width={} dense_cap={} dense_rows={} nnz={} overflow={}",
                h.rows(),
                h.cols(),
                cap.ell_width,
                cap.dense_cap,
                h.pattern().dense_row_count(),
                h.pattern().total_nnz(),
                h.overflowed()
            )
        }
    })
}

fn bench(a: &BenchArgs, seed: Option<u64>) -> Result<()> {
    let cfg = BenchConfig {
        m: a.m,
        k: a.k,
        n: a.n,
        sparsity: a.sparsity,
        tile_width: a.tile,
        compression: a.compress,
        reps: a.reps,
        seed: seed.unwrap_or(0),
        variant: a.variant.parse::<Variant>()?,
        ell_width: a.ell_width,
    };
    let r = run_bench(&cfg)?;
    if a.json {
        println!("{}", r.to_json()?);
    } else {
        println!(
            "M={} K={} N={} {} target_sparsity={} realized_sparsity={:.6}",
            cfg.m,
            cfg.k,
            cfg.n,
            cfg.variant.name(),
            cfg.sparsity,
            r.realized_sparsity
        );
        println!(
            "dense {:.3} ms  sparse {:.3} ms  speedup {:.3}x (median of {})",
            r.dense_ms, r.sparse_ms, r.speedup, cfg.reps
        );
        println!(
            "MACs dense {}  sparse {} (gate {} + up/down {})  ratio {:.6}  theoretical {:.6}",
            r.dense_macs, r.sparse_macs, r.gate_macs, r.up_down_macs, r.mac_ratio, r.theoretical_ratio
        );
        if let Some(rows) = r.hybrid_dense_rows {
            println!("hybrid rows over ell_width: {rows}");
        }
        println!("rel_error {:.3e}", r.rel_error);
    }
    if !r.outputs_agree {
        return Err(NumericalFailure(format!(
            "sparse output differs from the dense reference: rel_error {:.3e}",
            r.rel_error
        ))
        .into());
    }
    Ok(())
}

fn train_config(a: &TrainArgs, seed: Option<u64>) -> Result<TrainConfig> {
    let mut text = match &a.config {
        Some(p) => fs::read_to_string(p)
            .map_err(sparseffn::Error::from)
            .with_context(|| format!("cannot read {}", p.display()))?,
        None => String::new(),
    };
    for kv in &a.overrides {
        text.push('\n');
        text.push_str(kv);
    }
    let mut cfg = TrainConfig::from_kv(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn train(a: &TrainArgs, seed: Option<u64>) -> Result<()> {
    let cfg = train_config(a, seed)?;
    let coeffs = if a.l1.is_empty() {
        vec![cfg.l1_coefficient]
    } else {
        a.l1.clone()
    };
    fs::create_dir_all(&a.out_dir)
        .map_err(sparseffn::Error::from)
        .with_context(|| format!("cannot create {}", a.out_dir.display()))?;
    let mut finals = Vec::new();
    for &c in &coeffs {
        let run_cfg = TrainConfig {
            l1_coefficient: c,
            ..cfg.clone()
        };
        run_cfg.validate()?;
        let suffix = if coeffs.len() == 1 {
            String::new()
        } else {
            format!("_l1_{c}")
        };
        let run = train_toy_run(&run_cfg).with_context(|| format!("training with l1_coefficient {c}"))?;
        let r = &run.report;
        let json = a.out_dir.join(format!("report{suffix}.json"));
        write_file(&json, r.to_json()?.as_bytes())?;
        let mut csv = Vec::new();
        r.write_csv(&mut csv)?;
        write_file(&a.out_dir.join(format!("report{suffix}.csv")), &csv)?;
        if let Some(kind) = a.log {
            let log = run.activation_log()?;
            let mut buf = Vec::new();
            let ext = match kind {
                LogKind::Alog => {
                    write_alog(&mut buf, &log)?;
                    "alog"
                }
                LogKind::Csv => {
                    write_log_csv(&mut buf, &log)?;
                    "csv"
                }
            };
            write_file(&a.out_dir.join(format!("activations{suffix}.{ext}")), &buf)?;
        }
        println!(
            "l1={c} steps={} final_mean_nnz={:.4} eval_loss={:.6e} dead_frac={:.4} retries={} report={}",
            r.metrics.len(),
            r.final_mean_nnz(),
            r.summary.eval_loss,
            r.final_dead_frac(),
            r.summary.total_retries,
            json.display()
        );
        finals.push((c, r.final_mean_nnz()));
    }
    if finals.len() > 1 {
        finals.sort_by(|a, b| a.0.total_cmp(&b.0));
        let monotone = finals.windows(2).all(|w| w[1].1 <= w[0].1);
        println!(
            "final mean nnz non-increasing in l1: {}",
            if monotone { "yes" } else { "no" }
        );
    }
    Ok(())
}

fn read_values(path: &Path) -> Result<Vec<f64>> {
    let text = String::from_utf8(read_file(path)?).context("values file is not UTF-8")?;
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty()).peekable();
    // Optional CSV with a `value` column.
    let column = match lines.peek() {
        Some(h) if h.split(',').any(|c| c.trim() == "value") => {
            let idx = h.split(',').position(|c| c.trim() == "value");
            lines.next();
            idx
        }
        _ => None,
    };
    lines
        .map(|l| {
            let field = l.split(',').nth(column.unwrap_or(0)).unwrap_or("").trim();
            field
                .parse::<f64>()
                .map_err(|_| sparseffn::Error::Format(format!("{}: cannot parse {field:?}", path.display())).into())
        })
        .collect()
}

fn stats(a: &StatsArgs) -> Result<()> {
    let stream = LogStream::open(&a.log).with_context(|| format!("cannot read log {}", a.log.display()))?;
    let acc = StatsAccumulator::from_stream(stream).with_context(|| format!("cannot read log {}", a.log.display()))?;
    let mut out: Box<dyn Write> = match &a.output {
        Some(p) => Box::new(
            fs::File::create(p)
                .map_err(sparseffn::Error::from)
                .with_context(|| format!("cannot write {}", p.display()))?,
        ),
        None => Box::new(io::stdout().lock()),
    };
    match a.statistic {
        Statistic::Layer => {
            let dead = match &a.report {
                Some(p) => {
                    let text = String::from_utf8(read_file(p)?).context("report is not UTF-8")?;
                    Some(TrainReport::from_json(&text)?.summary.dead_frac)
                }
                None => None,
            };
            write_layer_csv(&mut out, &acc.layer_stats()?, dead.as_deref())?;
        }
        Statistic::Position => write_position_csv(&mut out, &acc.position_stats())?,
        Statistic::Token => write_token_csv(&mut out, &acc.token_extremes(a.min_freq, a.top))?,
        Statistic::Correlate => {
            let path: &PathBuf = a.against.as_ref().ok_or_else(|| sparseffn::Error::InvalidConfig {
                key: "against".into(),
                reason: "correlate needs --against with one value per layer".into(),
            })?;
            let ys = read_values(path)?;
            let xs: Vec<f64> = acc.layer_stats()?.iter().map(|s| s.mean_nnz).collect();
            let r = correlate(&xs, &ys)?;
            writeln!(out, "statistic,value\npearson,{r}").map_err(sparseffn::Error::from)?;
        }
    }
    out.flush().map_err(sparseffn::Error::from)?;
    Ok(())
}
