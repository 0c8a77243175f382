use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sparseffn::bench::BenchReport;
use sparseffn::formats::{hybrid_to_dense_matrix, read_hybrid_bytes, read_twell_bytes};
use sparseffn::tensor::{randn, read_dense_bytes, write_dense_bytes, DType, DenseFile};
use sparseffn::trainer::TrainReport;
use sparseffn::{DenseMatrix, SeededRng};
use tempfile::TempDir;

fn sparseffn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparseffn"))
        .args(args)
        .env_remove("SPARSEFFN_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

/// Non-negative matrix with roughly `density` of its entries positive.
fn sparse_nonneg(rows: usize, cols: usize, density: f64, seed: u64) -> DenseMatrix<f32> {
    let mut rng = SeededRng::new(seed);
    DenseMatrix::from_fn(rows, cols, |_, _| {
        if rng.uniform() < density {
            rng.uniform() as f32 + 0.5
        } else {
            0.0
        }
    })
}

fn write_dense_file(path: &str, m: &DenseMatrix<f32>) {
    fs::write(path, write_dense_bytes(m, DType::F32).unwrap()).unwrap();
}

fn dense_of(path: &str) -> DenseMatrix<f32> {
    match read_dense_bytes(&fs::read(path).unwrap()).unwrap() {
        DenseFile::F32(m, _) => m,
        DenseFile::F64(_) => panic!("unexpected f64"),
    }
}

#[test]
fn dense_twell_dense_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    let src = p(&dir, "a.dnse");
    write_dense_file(&src, &sparse_nonneg(37, 128, 0.2, 1));
    let tw = p(&dir, "a.twll");
    let back = p(&dir, "b.dnse");
    let o = sparseffn(&["convert", &src, &tw, "--to", "twell", "--tile", "64", "--compress", "2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = sparseffn(&["convert", &tw, &back, "--to", "dense"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(&src).unwrap(), fs::read(&back).unwrap());
}

#[test]
fn tile_overflow_exits_3() {
    let dir = TempDir::new().unwrap();
    let src = p(&dir, "full.dnse");
    write_dense_file(&src, &DenseMatrix::filled(4, 64, 1.0));
    let o = sparseffn(&[
        "convert",
        &src,
        &p(&dir, "x.twll"),
        "--to",
        "twell",
        "--tile",
        "64",
        "--compress",
        "8",
    ]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("OverflowTile"), "{}", stderr(&o));
    let o = sparseffn(&[
        "convert",
        &src,
        &p(&dir, "x.hybr"),
        "--to",
        "hybrid",
        "--ell-width",
        "8",
        "--dense-cap",
        "1",
    ]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("DenseCapacityExceeded"), "{}", stderr(&o));
}

#[test]
fn twell_to_hybrid_densifies_to_the_source() {
    let dir = TempDir::new().unwrap();
    let src = p(&dir, "a.dnse");
    // Mixed row densities so both ELL and backup rows occur.
    let mut m = sparse_nonneg(48, 256, 0.05, 2);
    let dense_rows = sparse_nonneg(6, 256, 0.6, 3);
    for r in 0..6 {
        m.row_mut(r * 8).copy_from_slice(dense_rows.row(r));
    }
    write_dense_file(&src, &m);
    let tw = p(&dir, "a.twll");
    let hy = p(&dir, "a.hybr");
    assert_eq!(
        code(&sparseffn(&["convert", &src, &tw, "--to", "twell", "--tile", "128"])),
        0
    );
    let o = sparseffn(&[
        "convert",
        &tw,
        &hy,
        "--to",
        "hybrid",
        "--ell-width",
        "32",
        "--dense-cap",
        "8",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (h, _) = read_hybrid_bytes::<f32>(&fs::read(&hy).unwrap()).unwrap();
    assert!(h.pattern().dense_row_count() >= 6);
    assert_eq!(hybrid_to_dense_matrix(&h).unwrap(), m);
    let (t, _) = read_twell_bytes::<f32>(&fs::read(&tw).unwrap()).unwrap();
    assert_eq!(t.total_nnz(), m.count_positive());
}

#[test]
fn validate_reports_the_broken_rule() {
    let dir = TempDir::new().unwrap();
    let src = p(&dir, "a.dnse");
    let mut m = DenseMatrix::zeros(2, 8);
    m.set(0, 1, 1.0);
    write_dense_file(&src, &m);
    let tw = p(&dir, "a.twll");
    assert_eq!(
        code(&sparseffn(&["convert", &src, &tw, "--to", "twell", "--tile", "4"])),
        0
    );
    let o = sparseffn(&["validate", &tw]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("ok: TWLL 2x8"));

    // Header is 38 bytes, then 2x2 tile counts, then the indices; point
    // row 0, tile 0, slot 0 at column 6, which lives in tile 1.
    let mut bytes = fs::read(&tw).unwrap();
    let idx = 38 + 4 * 4;
    bytes[idx..idx + 4].copy_from_slice(&6u32.to_le_bytes());
    let bad = p(&dir, "bad.twll");
    fs::write(&bad, bytes).unwrap();
    let o = sparseffn(&["validate", &bad]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("IndexOutOfTile"), "{}", stderr(&o));

    fs::write(&bad, b"NOPE").unwrap();
    assert_eq!(code(&sparseffn(&["validate", &bad])), 2);
}

#[test]
fn bench_json_round_trips_and_counts_macs() {
    let o = sparseffn(&[
        "bench",
        "--m",
        "64",
        "--k",
        "32",
        "--n",
        "256",
        "--tile",
        "64",
        "--compress",
        "1",
        "--sparsity",
        "1.0",
        "--reps",
        "1",
        "--json",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = BenchReport::from_json(&stdout(&o)).unwrap();
    assert_eq!(r.up_down_macs, 0);
    assert_eq!(r.sparse_macs, 64 * 32 * 256);
    assert_eq!(serde_json::to_string_pretty(&r).unwrap(), stdout(&o).trim_end());

    let o = sparseffn(&[
        "bench",
        "--m",
        "64",
        "--k",
        "32",
        "--n",
        "256",
        "--tile",
        "64",
        "--compress",
        "1",
        "--sparsity",
        "0.7",
        "--reps",
        "1",
        "--json",
    ]);
    let r = BenchReport::from_json(&stdout(&o)).unwrap();
    assert_eq!(r.up_down_macs, 2 * 32 * r.total_nnz);
    assert!(r.rel_error <= 1e-5);
}

#[test]
fn bench_invalid_dims_exit_2() {
    let o = sparseffn(&["bench", "--m", "8", "--k", "8", "--n", "100", "--tile", "64"]);
    assert_eq!(code(&o), 2);
    let o = sparseffn(&["bench", "--sparsity", "2"]);
    assert_eq!(code(&o), 2);
    assert_eq!(code(&sparseffn(&["bench", "--m", "lots"])), 2);
}

const SMALL: [&str; 12] = [
    "--set",
    "steps=60",
    "--set",
    "batch=32",
    "--set",
    "model_dim=16",
    "--set",
    "hidden=64",
    "--set",
    "tile_width=64",
    "--set",
    "vocab=64",
];

fn train(dir: &TempDir, sub: &str, extra: &[&str]) -> Output {
    let out = p(dir, sub);
    let mut args = vec!["train-toy", "--out-dir", &out];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(extra);
    sparseffn(&args)
}

#[test]
fn training_is_deterministic_given_seed() {
    let dir = TempDir::new().unwrap();
    let a = train(&dir, "a", &["--seed", "5"]);
    let b = train(&dir, "b", &["--seed", "5"]);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert_eq!(code(&b), 0);
    let csv_a = fs::read(dir.path().join("a/report.csv")).unwrap();
    assert_eq!(csv_a, fs::read(dir.path().join("b/report.csv")).unwrap());
    let c = train(&dir, "c", &["--seed", "6"]);
    assert_eq!(code(&c), 0);
    assert_ne!(csv_a, fs::read(dir.path().join("c/report.csv")).unwrap());

    let text = fs::read_to_string(dir.path().join("a/report.json")).unwrap();
    let r = TrainReport::from_json(&text).unwrap();
    assert_eq!(r.config.seed, 5);
    assert_eq!(r.metrics.len(), 60);
}

#[test]
fn l1_ladder_gives_non_increasing_sparsity() {
    let dir = TempDir::new().unwrap();
    let out = p(&dir, "ladder");
    let o = sparseffn(&[
        "train-toy",
        "--out-dir",
        &out,
        "--set",
        "steps=300",
        "--set",
        "batch=64",
        "--set",
        "model_dim=32",
        "--set",
        "hidden=128",
        "--set",
        "tile_width=128",
        "--set",
        "dense_cap=64",
        "--l1",
        "0.01,0.1,1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let nnz: Vec<f64> = ["0.01", "0.1", "1"]
        .iter()
        .map(|c| {
            let text = fs::read_to_string(dir.path().join(format!("ladder/report_l1_{c}.json"))).unwrap();
            TrainReport::from_json(&text).unwrap().final_mean_nnz()
        })
        .collect();
    assert!(nnz.windows(2).all(|w| w[1] <= w[0]), "{nnz:?}");
    assert!(stdout(&o).contains("non-increasing in l1: yes"));
}

#[test]
fn config_errors_exit_2_naming_the_key() {
    let dir = TempDir::new().unwrap();
    let cfg = p(&dir, "bad.cfg");
    fs::write(&cfg, "steps = 3\nlearning_rate = 0.1\n").unwrap();
    let o = sparseffn(&["train-toy", "--config", &cfg, "--out-dir", &p(&dir, "o")]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
    let o = sparseffn(&["train-toy", "--set", "lr=-1", "--out-dir", &p(&dir, "o")]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("`lr`"), "{}", stderr(&o));
}

#[test]
fn config_file_is_honored() {
    let dir = TempDir::new().unwrap();
    let cfg = p(&dir, "toy.cfg");
    fs::write(
        &cfg,
        "# tiny run\nsteps = 4\nbatch = 16\nmodel_dim = 8\nhidden = 32\ntile_width = 32\nvariant = non_gated\n",
    )
    .unwrap();
    let o = sparseffn(&["train-toy", "--config", &cfg, "--out-dir", &p(&dir, "o")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = TrainReport::from_json(&fs::read_to_string(dir.path().join("o/report.json")).unwrap()).unwrap();
    assert_eq!(r.metrics.len(), 4);
    assert_eq!(r.config.hidden, 32);
}

#[test]
fn non_finite_training_exits_4() {
    let dir = TempDir::new().unwrap();
    let o = train(&dir, "o", &["--set", "lr=1e30"]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("last finite step"), "{}", stderr(&o));
}

/// Independent recount of a CSV activation log.
fn brute_force(path: &Path) -> (Vec<f64>, Vec<u32>, BTreeMap<u32, f64>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let layers = lines.next().unwrap().split(',').count() - 3;
    let rows: Vec<Vec<u32>> = lines
        .map(|l| l.split(',').map(|f| f.parse().unwrap_or(u32::MAX)).collect())
        .collect();
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..layers)
        .map(|l| rows.iter().map(|r| r[3 + l] as f64).sum::<f64>() / n)
        .collect();
    let max: Vec<u32> = (0..layers)
        .map(|l| rows.iter().map(|r| r[3 + l]).max().unwrap())
        .collect();
    let mut by_pos: BTreeMap<u32, (u64, u64)> = BTreeMap::new();
    for r in &rows {
        let e = by_pos.entry(r[1]).or_default();
        e.0 += r[3..].iter().map(|&c| c as u64).sum::<u64>();
        e.1 += 1;
    }
    let pos = by_pos
        .into_iter()
        .map(|(k, (s, c))| (k, s as f64 / (c as f64 * layers as f64)))
        .collect();
    (mean, max, pos)
}

#[test]
fn stats_on_trainer_output() {
    let dir = TempDir::new().unwrap();
    let o = train(&dir, "t", &["--log", "csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = dir.path().join("t/activations.csv");
    let log_s = log.to_string_lossy().into_owned();
    let report = p(&dir, "t/report.json");

    let o = sparseffn(&["stats", &log_s, "layer", "--report", &report]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "layer,mean_nnz,max_nnz,dead_frac");
    let (mean, max, pos) = brute_force(&log);
    for (l, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[0].parse::<usize>().unwrap(), l);
        assert_eq!(f[1].parse::<f64>().unwrap(), mean[l]);
        assert_eq!(f[2].parse::<u32>().unwrap(), max[l]);
        assert!(f[3].parse::<f64>().is_ok());
    }

    let out = p(&dir, "pos.csv");
    let o = sparseffn(&["stats", &log_s, "position", "-o", &out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "position,mean_nnz");
    let got: BTreeMap<u32, f64> = lines
        .map(|l| {
            let (a, b) = l.split_once(',').unwrap();
            (a.parse().unwrap(), b.parse().unwrap())
        })
        .collect();
    assert_eq!(got, pos);

    let o = sparseffn(&["stats", &log_s, "token", "--top", "3"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).starts_with("kind,rank,token,frequency,mean_nnz\n"));
}

#[test]
fn stats_correlate_and_alog_input() {
    let dir = TempDir::new().unwrap();
    let o = train(&dir, "t", &["--log", "alog", "--set", "layers=3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = p(&dir, "t/activations.alog");
    let vals = p(&dir, "speedups.csv");
    fs::write(&vals, "layer,value\n0,1.0\n1,2.0\n2,4.5\n").unwrap();
    let o = sparseffn(&["stats", &log, "correlate", "--against", &vals]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    let r: f64 = text
        .lines()
        .nth(1)
        .unwrap()
        .strip_prefix("pearson,")
        .unwrap()
        .parse()
        .unwrap();
    assert!((-1.0..=1.0).contains(&r));
    assert_eq!(code(&sparseffn(&["stats", &log, "correlate"])), 2);
}

#[test]
fn unreadable_log_exits_2() {
    let dir = TempDir::new().unwrap();
    let bad = p(&dir, "junk.csv");
    fs::write(&bad, "hello,world\n1,2\n").unwrap();
    assert_eq!(code(&sparseffn(&["stats", &bad, "layer"])), 2);
    assert_eq!(code(&sparseffn(&["stats", &p(&dir, "missing"), "layer"])), 2);
}

#[test]
fn thread_count_falls_back_to_the_environment() {
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_sparseffn"))
            .args([
                "bench", "--m", "16", "--k", "16", "--n", "64", "--tile", "64", "--reps", "1",
            ])
            .env("SPARSEFFN_THREADS", threads)
            .output()
            .unwrap()
    };
    assert_eq!(code(&run("2")), 0);
    assert_eq!(code(&run("0")), 2);
}

#[test]
fn seeded_bench_is_deterministic_in_everything_but_time() {
    let args = [
        "bench",
        "--m",
        "32",
        "--k",
        "16",
        "--n",
        "128",
        "--tile",
        "64",
        "--compress",
        "1",
        "--sparsity",
        "0.8",
        "--reps",
        "1",
        "--json",
        "--seed",
        "9",
    ];
    let a = BenchReport::from_json(&stdout(&sparseffn(&args))).unwrap();
    let b = BenchReport::from_json(&stdout(&sparseffn(&args))).unwrap();
    assert_eq!(
        (a.total_nnz, a.sparse_macs, a.rel_error),
        (b.total_nnz, b.sparse_macs, b.rel_error)
    );
    assert_eq!(a.config.seed, 9);
}

#[test]
fn random_matrix_round_trips_through_every_format() {
    let dir = TempDir::new().unwrap();
    let mut rng = SeededRng::new(11);
    let m = randn::<f32>(20, 64, 1.0, &mut rng).map(|v| v.max(0.0));
    let src = p(&dir, "r.dnse");
    write_dense_file(&src, &m);
    let hy = p(&dir, "r.hybr");
    let tw = p(&dir, "r.twll");
    let back = p(&dir, "r2.dnse");
    assert_eq!(
        code(&sparseffn(&[
            "convert",
            &src,
            &hy,
            "--to",
            "hybrid",
            "--ell-width",
            "16"
        ])),
        0
    );
    assert_eq!(
        code(&sparseffn(&["convert", &hy, &tw, "--to", "twell", "--tile", "32"])),
        0
    );
    assert_eq!(code(&sparseffn(&["convert", &tw, &back, "--to", "dense"])), 0);
    assert_eq!(dense_of(&back), m);
}
