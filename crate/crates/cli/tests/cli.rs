use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lesion_core::imageio;
use lesion_core::metrics::{extract_features, FeatureExtractor};
use lesion_oracle::reference;
use sha2::{Digest, Sha256};

fn lesion(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lesion"))
        .args(args)
        .current_dir(dir)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn sha(p: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(p).unwrap()))
}

/// Hash of every file under `dir` except training logs, which carry wall
/// time, and the resolved config, which records the output path.
fn tree_hash(dir: &Path) -> Vec<(PathBuf, String)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !["run.csv", "config.resolved"].contains(&p.file_name().unwrap().to_str().unwrap()) {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), sha(&p)));
            }
        }
    }
    out.sort();
    out
}

const TINY_VAE: &[&str] = &[
    "--set", "vae.width=8",
    "--set", "vae.steps=12",
    "--set", "vae.warmup=2",
    "--set", "vae.batch=4",
    "--set", "vae.calibrate_images=8",
    "--set", "vae.checkpoint_every=0",
];

const TINY_DIFFUSION: &[&str] = &[
    "--set", "diffusion.base_width=8",
    "--set", "diffusion.time_embed_dim=16",
    "--set", "diffusion.steps=6",
    "--set", "diffusion.warmup=2",
    "--set", "diffusion.batch=2",
    "--set", "diffusion.checkpoint_every=0",
    "--set", "sample.steps=2",
];

fn with(base: &[&str], extra: &[&'static str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn run(dir: &Path, args: Vec<String>) -> Output {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    lesion(&refs, dir)
}

/// Corpus plus tiny VAE and denoiser checkpoints.
fn tiny_pipeline(dir: &Path) {
    ok(lesion(&["synth", "--n", "24", "--out", "corpus"], dir));
    ok(run(dir, with(&["train", "vae", "--corpus", "corpus", "--out", "vae"], TINY_VAE)));
    ok(run(
        dir,
        with(
            &["train", "diffusion", "--corpus", "corpus", "--vae", "vae/vae.pgck", "--out", "diff"],
            TINY_DIFFUSION,
        ),
    ));
}

#[test]
fn usage_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&lesion(&[], d.path())), 2);
    assert_eq!(code(&lesion(&["frobnicate"], d.path())), 2);
    let o = lesion(&["synth", "--out", "c", "--set", "sample.guidence=2"], d.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("sample.guidence"));
    assert_eq!(code(&lesion(&["synth", "--out", "c", "--set", "synth.n=many"], d.path())), 2);
    assert_eq!(code(&lesion(&["synth", "--out", "c", "--style", "zebra-like"], d.path())), 2);
    assert_eq!(code(&lesion(&["synth"], d.path())), 2, "missing --out");
    fs::write(d.path().join("bad.cfg"), "steps = 3\n").unwrap();
    assert_eq!(code(&lesion(&["synth", "--out", "c", "--config", "bad.cfg"], d.path())), 2);
    assert_eq!(code(&lesion(&["--help"], d.path())), 0);
}

#[test]
fn io_and_missing_artifacts() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&lesion(&["synth", "--out", "c", "--config", "nope.cfg"], d.path())), 3);
    assert_eq!(code(&lesion(&["eval", "--real", "nope", "--gen", "nope"], d.path())), 3);
    ok(lesion(&["synth", "--n", "12", "--out", "corpus"], d.path()));
    let o = lesion(&["train", "diffusion", "--corpus", "corpus", "--vae", "absent.pgck", "--out", "x"], d.path());
    assert_eq!(code(&o), 4);
    let o = lesion(
        &["bench", "--corpus", "corpus", "--out", "b", "--strategies", "pathogen", "--vae", "absent.pgck", "--diffusion", "absent.pgck"],
        d.path(),
    );
    assert_eq!(code(&o), 4);
    assert!(!d.path().join("b").join("report.csv").exists());
}

#[test]
fn bench_with_every_cell_failing_exits_5() {
    let d = tempfile::tempdir().unwrap();
    ok(lesion(&["synth", "--n", "12", "--out", "corpus"], d.path()));
    // fewer steps than the warmup: every cell's trainer refuses to start
    let o = lesion(
        &["bench", "--corpus", "corpus", "--out", "b", "--strategies", "none", "--real-counts", "4", "--seeds", "0,1", "--set", "bench.seg_steps=5"],
        d.path(),
    );
    assert_eq!(code(&o), 5, "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(d.path().join("b/report.csv")).unwrap();
    assert_eq!(report.lines().count(), 3);
    assert!(report.lines().skip(1).all(|l| l.contains(",,") && l.contains("error")));
}

#[test]
fn synth_is_deterministic_and_records_its_config() {
    let d = tempfile::tempdir().unwrap();
    ok(lesion(&["synth", "--n", "10", "--out", "a", "--seed", "7"], d.path()));
    ok(lesion(&["synth", "--n", "10", "--out", "b", "--seed", "7"], d.path()));
    ok(lesion(&["synth", "--n", "10", "--out", "c", "--seed", "8"], d.path()));
    let (a, b, c) = (tree_hash(&d.path().join("a")), tree_hash(&d.path().join("b")), tree_hash(&d.path().join("c")));
    assert_eq!(a, b);
    assert_ne!(a, c);
    let resolved = fs::read_to_string(d.path().join("a/config.resolved")).unwrap();
    assert!(resolved.contains("seed = 7"));
    assert!(resolved.contains("n = 10"));

    // replaying the recorded config reproduces the corpus
    fs::copy(d.path().join("a/config.resolved"), d.path().join("replay.cfg")).unwrap();
    ok(lesion(&["synth", "--config", "replay.cfg", "--out", "r"], d.path()));
    assert_eq!(tree_hash(&d.path().join("r")), a);
}

#[test]
fn defaults_lists_every_key() {
    let d = tempfile::tempdir().unwrap();
    let out = String::from_utf8(ok(lesion(&["defaults"], d.path())).stdout).unwrap();
    for key in ["general.seed", "sample.guidance", "bench.strategies", "diffusion.dropout"] {
        assert!(out.contains(key), "{key}");
    }
}

#[test]
fn oracle_fixtures_pass() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
    let o = ok(lesion(&["oracle", "--dir", root.to_str().unwrap()], Path::new(".")));
    assert!(!o.stdout.is_empty());
}

fn eval_rows(dir: &Path, real: &str, generated: &str) -> Vec<csv::StringRecord> {
    let o = ok(lesion(&["eval", "--real", real, "--gen", generated], dir));
    let mut r = csv::Reader::from_reader(o.stdout.as_slice());
    r.records().map(|x| x.unwrap()).collect()
}

#[test]
fn eval_identical_and_distinct_sets() {
    let d = tempfile::tempdir().unwrap();
    ok(lesion(&["synth", "--n", "200", "--out", "kpi"], d.path()));
    ok(lesion(&["synth", "--n", "20", "--out", "ring", "--style", "ring-like", "--seed", "3"], d.path()));

    let same = eval_rows(d.path(), "kpi", "kpi");
    assert_eq!(same.len(), 2);
    assert_eq!(&same[0][0], "fid");
    assert_eq!(&same[1][0], "kid");
    let fid: f64 = same[0][5].parse().unwrap();
    assert!(fid.abs() < 1e-6, "fid {fid}");

    // the diagonal drops out of the within-set sums but not the cross sum, so
    // identical sets land slightly below zero; pin the value to brute force
    let imgs = lesion_cli_images(&d.path().join("kpi"));
    let f = extract_features(&imgs, &FeatureExtractor::default()).unwrap();
    let k = f.dim(1);
    let rows: Vec<Vec<f64>> = f.data().chunks(k).map(|r| r.iter().map(|&v| v as f64).collect()).collect();
    let expected = reference::kid(&rows, &rows);
    let kid: f64 = same[1][5].parse().unwrap();
    // a difference of near-equal O(1) sums, so compare absolutely
    assert!((kid - expected).abs() < 1e-12, "{kid} vs {expected}");
    // the offset scales as 1/m; at corpus size it is below 1e-6
    assert!(kid.abs() < 1e-6, "kid {kid}");

    let cross = eval_rows(d.path(), "kpi", "ring");
    let cfid: f64 = cross[0][5].parse().unwrap();
    let ckid: f64 = cross[1][5].parse().unwrap();
    assert!(cfid > 1e-3 && ckid > kid, "fid {cfid} kid {ckid}");

    ok(lesion(&["eval", "--real", "kpi", "--gen", "ring", "--out", "m/metrics.csv"], d.path()));
    assert_eq!(fs::read_to_string(d.path().join("m/metrics.csv")).unwrap().lines().count(), 3);
    assert!(d.path().join("m/config.resolved").exists());
}

fn lesion_cli_images(dir: &Path) -> Vec<lesion_tensor::Tensor> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir.join("images")).unwrap().map(|e| e.unwrap().path()).collect();
    files.retain(|p| p.extension().is_some_and(|x| x == "png"));
    files.sort();
    files.iter().map(|p| imageio::load_rgb(p).unwrap()).collect()
}

#[test]
fn training_resumes_where_it_stopped() {
    let d = tempfile::tempdir().unwrap();
    ok(lesion(&["synth", "--n", "16", "--out", "corpus"], d.path()));
    let base = &["train", "vae", "--corpus", "corpus", "--set", "vae.checkpoint_every=6"];
    ok(run(d.path(), with(&[base as &[&str], &["--out", "full"]].concat(), TINY_VAE)));
    // the 6-step run stands in for one killed at its step-6 checkpoint
    ok(run(d.path(), with(&[base as &[&str], &["--out", "part", "--steps", "6"]].concat(), TINY_VAE)));
    let log = |dir: &str| -> Vec<(u64, f64, f64)> {
        let mut r = csv::Reader::from_path(d.path().join(dir).join("run.csv")).unwrap();
        r.records()
            .map(|x| {
                let x = x.unwrap();
                (x[0].parse().unwrap(), x[1].parse().unwrap(), x[2].parse().unwrap())
            })
            .collect()
    };
    let killed = log("part");
    assert_eq!(killed.len(), 6);
    ok(run(d.path(), with(&[base as &[&str], &["--out", "part", "--resume"]].concat(), TINY_VAE)));
    let resumed = log("part");
    let full = log("full");
    assert_eq!(resumed.len(), 12);
    assert_eq!(&resumed[..6], &killed[..]);
    assert!(resumed.iter().map(|r| r.0).eq(0..12));
    // picks up from the trained state, not from a fresh model
    let fresh = full[0].1;
    let (before, after) = (resumed[5].1, resumed[6].1);
    assert!((after - before).abs() < 0.5 * (fresh - before).abs().max(1e-3) + 0.05, "{before} -> {after}, fresh {fresh}");
    assert!(after < fresh);
    // same parameter names and shapes as the uninterrupted run
    let names = |dir: &str| {
        let a = lesion_tensor::Archive::load(&d.path().join(dir).join("vae.pgck")).unwrap();
        a.entries.iter().map(|(k, t)| (k.to_string(), t.shape().to_vec())).collect::<Vec<_>>()
    };
    assert_eq!(names("part"), names("full"));
}

#[test]
fn inpaint_end_to_end() {
    let d = tempfile::tempdir().unwrap();
    tiny_pipeline(d.path());
    let img = |i: usize| format!("corpus/images/{:05}.png", i);
    let benign = img(0);
    let reference = img(1);
    // a mask from the corpus itself
    let mask = "corpus/masks/00001.png";
    assert!(d.path().join(mask).exists(), "corpus mask layout");
    let args = |out: &str, diffusion: &str, mask: &str| -> Vec<String> {
        [
            "inpaint", "--benign", &benign, "--reference", &reference, "--mask", mask, "--vae", "vae/vae.pgck",
            "--diffusion", diffusion, "--steps", "3", "--seed", "4", "--out", out,
        ]
        .into_iter()
        .map(String::from)
        .collect()
    };
    ok(run(d.path(), args("o1/x.png", "diff/diffusion.pgck", mask)));
    ok(run(d.path(), args("o2/x.png", "diff/diffusion.pgck", mask)));
    assert_eq!(sha(&d.path().join("o1/x.png")), sha(&d.path().join("o2/x.png")));
    let m_in = imageio::load_mask(&d.path().join(mask)).unwrap();
    let m_out = imageio::load_mask(&d.path().join("o1/x_mask.png")).unwrap();
    assert_eq!(m_in, m_out);
    let out = imageio::load_rgb(&d.path().join("o1/x.png")).unwrap();
    assert_eq!(out.shape(), &[3, 32, 32]);
    assert!(d.path().join("o1/config.resolved").exists());

    assert_eq!(code(&run(d.path(), args("o3/x.png", "absent.pgck", mask))), 4);

    // a 16-pixel mask against a 32-pixel image
    imageio::save_mask(&lesion_tensor::Tensor::zeros(&[16, 16]), &d.path().join("small.png")).unwrap();
    let o = run(d.path(), args("o4/x.png", "diff/diffusion.pgck", "small.png"));
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("resolution mismatch"));
}

#[test]
fn bench_runs_all_arms_on_tiny_models() {
    let d = tempfile::tempdir().unwrap();
    tiny_pipeline(d.path());
    let o = ok(lesion(
        &[
            "bench", "--corpus", "corpus", "--vae", "vae/vae.pgck", "--diffusion", "diff/diffusion.pgck", "--out", "b",
            "--strategies", "none,flip,pathogen", "--real-counts", "4", "--seeds", "0",
            "--set", "bench.seg_steps=25", "--set", "bench.synth_ratio=1", "--set", "sample.steps=2",
        ],
        d.path(),
    ));
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 3);
    let report = fs::read_to_string(d.path().join("b/report.csv")).unwrap();
    assert_eq!(report.lines().next().unwrap(), lesion_core::segbench::REPORT_HEADER);
    assert_eq!(report.lines().count(), 4);
    assert!(report.lines().skip(1).all(|l| l.ends_with(",ok")), "{report}");
    assert!(d.path().join("b/curves_kpi-like.svg").exists());
    assert!(d.path().join("b/config.resolved").exists());
}
