use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const FAST: &str = "steps = 20\nstage1_steps = 40\nstage2_steps = 30\nk = 256\n";

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

fn vovc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vovc"))
        .args(args)
        .output()
        .unwrap()
}

fn vovc_env(args: &[&str], threads: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vovc"))
        .args(args)
        .env("VOVC_THREADS", threads)
        .output()
        .unwrap()
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small corpus, a briefly trained base and a fast codec config, built once.
fn fixture() -> &'static Path {
    static F: OnceLock<Fixture> = OnceLock::new();
    &F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        ok(&vovc(&[
            "gen-corpus",
            "--count",
            "4",
            "--out",
            s(&root.join("corpus")),
        ]));
        std::fs::write(root.join("recipe.txt"), "steps = 100\n").unwrap();
        ok(&vovc(&[
            "train-base",
            "--corpus",
            s(&root.join("corpus")),
            "--config",
            s(&root.join("recipe.txt")),
            "--out",
            s(&root.join("base.vfnn")),
        ]));
        std::fs::write(root.join("fast.txt"), FAST).unwrap();
        Fixture { _dir: dir, root }
    })
    .root
}

fn sig(i: usize) -> PathBuf {
    fixture().join(format!("corpus/sig_{i:05}.vsig"))
}

fn encode(out: &Path, extra: &[&str]) -> String {
    let (ckpt, cfg) = (fixture().join("base.vfnn"), fixture().join("fast.txt"));
    let mut args = vec![
        "encode",
        "--ckpt",
        s(&ckpt),
        "--config",
        s(&cfg),
        "--out",
        s(out),
    ];
    args.extend_from_slice(extra);
    ok(&vovc(&args))
}

fn field(line: &str, after: &str) -> f64 {
    let rest = &line[line.find(after).unwrap() + after.len()..];
    rest.split_whitespace()
        .next()
        .unwrap()
        .trim_end_matches([';', ')'])
        .parse()
        .unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(vovc(&["--help"]).status.code(), Some(0));
    assert_eq!(vovc(&["--version"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(vovc(&[]).status.code(), Some(1));
    assert_eq!(vovc(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(vovc(&["encode", "--ckpt", "x"]).status.code(), Some(1));
    let o = vovc(&["gen-corpus", "--count", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--count"));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = vovc(&[
        "decode",
        "--ckpt",
        s(&dir.path().join("missing.vfnn")),
        "--stream",
        "missing.vovb",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.vfnn"));
}

#[test]
fn missing_corpus_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no_corpus_here");
    let o = vovc(&[
        "train-base",
        "--corpus",
        s(&missing),
        "--out",
        s(&dir.path().join("b.vfnn")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_corpus_here"));
}

#[test]
fn bad_thread_count_is_usage_error() {
    assert_eq!(
        vovc_env(
            &["gen-corpus", "--count", "1", "--out", "/nonexistent/x"],
            "zero"
        )
        .status
        .code(),
        Some(1)
    );
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.txt");
    std::fs::write(&cfg, "k = 256\nlamda = 0.01\n").unwrap();
    let o = vovc(&[
        "encode",
        "--ckpt",
        s(&fixture().join("base.vfnn")),
        "--config",
        s(&cfg),
        "--signal",
        s(&sig(0)),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("lamda"), "{err}");
}

#[test]
fn corpus_and_checkpoint_have_manifests() {
    let f = fixture();
    let m = std::fs::read_to_string(f.join("corpus/manifest.txt")).unwrap();
    assert!(m.contains("command = gen-corpus"));
    assert!(m.contains("seed.corpus = 1"));
    let m = std::fs::read_to_string(f.join("base.vfnn.manifest")).unwrap();
    assert!(m.contains("command = train-base"));
    assert!(m.contains("tool_version = "));
    let loss = std::fs::read_to_string(f.join("base.vfnn.loss.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("step,loss,loss_ma50"));
    assert_eq!(loss.lines().count(), 101);
}

#[test]
fn gen_corpus_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&vovc(&[
        "gen-corpus",
        "--count",
        "2",
        "--seed",
        "9",
        "--out",
        s(&a),
    ]));
    ok(&vovc(&[
        "gen-corpus",
        "--count",
        "2",
        "--seed",
        "9",
        "--out",
        s(&b),
    ]));
    for name in ["sig_00000.vsig", "sig_00001.vsig"] {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap()
        );
    }
    assert_ne!(
        std::fs::read(a.join("sig_00000.vsig")).unwrap(),
        std::fs::read(a.join("sig_00001.vsig")).unwrap()
    );
}

#[test]
fn printed_psnr_matches_decode() {
    let dir = tempfile::tempdir().unwrap();
    let stream = dir.path().join("a.vovb");
    let out = encode(&stream, &["--signal", s(&sig(0))]);
    let f = fixture();
    let dec = ok(&vovc(&[
        "decode",
        "--ckpt",
        s(&f.join("base.vfnn")),
        "--config",
        s(&f.join("fast.txt")),
        "--stream",
        s(&stream),
        "--reference",
        s(&sig(0)),
        "--out",
        s(&dir.path().join("a.vsig")),
    ]));
    assert_eq!(field(&out, "PSNR "), field(&dec, "PSNR "));
    let total = field(&out, "total ");
    let bytes = std::fs::metadata(&stream).unwrap().len() as f64;
    assert_eq!(total, 8.0 * bytes);
    assert!(field(&out, "scaling ") == 0.0);
    assert!(std::fs::metadata(dir.path().join("a.vsig")).is_ok());
}

#[test]
fn scaling_adds_exactly_the_index_bits() {
    let dir = tempfile::tempdir().unwrap();
    let plain = dir.path().join("plain.vovb");
    let scaled = dir.path().join("scaled.vovb");
    let a = encode(&plain, &["--signal", s(&sig(1))]);
    let b = encode(
        &scaled,
        &["--signal", s(&sig(1)), "--scale", "100", "1024", "5"],
    );
    let pa = std::fs::read(&plain).unwrap();
    let pb = std::fs::read(&scaled).unwrap();
    // 100 indices of 10 bits, plus the flag/N/M/seed block header.
    assert_eq!(pb.len() - pa.len(), 1000 / 8 + 17);
    assert_eq!(&pb[..pa.len()], &pa[..]);
    assert_eq!(field(&b, "indices "), 1000.0);
    assert_eq!(field(&a, "indices "), 0.0);
}

#[test]
fn digest_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let stream = dir.path().join("a.vovb");
    encode(&stream, &["--signal", s(&sig(2))]);
    let o = vovc(&[
        "decode",
        "--ckpt",
        s(&fixture().join("base.vfnn")),
        "--stream",
        s(&stream),
        "--out",
        s(&dir.path().join("a.vsig")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("digest"));
}

#[test]
fn multi_signal_output_is_thread_count_independent() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let run = |threads: &str, out: &Path| {
        ok(&vovc_env(
            &[
                "encode",
                "--ckpt",
                s(&f.join("base.vfnn")),
                "--config",
                s(&f.join("fast.txt")),
                "--seed",
                "7",
                "--out",
                s(out),
                "--signal",
                s(&sig(0)),
                s(&sig(1)),
                s(&sig(2)),
            ],
            threads,
        ))
    };
    let one = dir.path().join("one");
    let four = dir.path().join("four");
    let a = run("1", &one);
    let b = run("4", &four);
    let strip = |t: &str, d: &Path| t.replace(s(d), "");
    assert_eq!(strip(&a, &one), strip(&b, &four));
    for i in 0..3 {
        let name = format!("sig_{i:05}.vovb");
        assert_eq!(
            std::fs::read(one.join(&name)).unwrap(),
            std::fs::read(four.join(&name)).unwrap()
        );
    }
    let m = std::fs::read_to_string(one.join("manifest.txt")).unwrap();
    assert!(m.contains("seed.2.sampler"));
}

#[test]
fn eval_writes_csvs() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    ok(&vovc(&[
        "eval",
        "--mode",
        "sweep-tau",
        "bound",
        "is-check",
        "marginal",
        "--ckpt",
        s(&f.join("base.vfnn")),
        "--config",
        s(&f.join("fast.txt")),
        "--signal",
        s(&sig(0)),
        "--cases",
        "2",
        "--trials",
        "50",
        "--particles",
        "500",
        "--out",
        s(dir.path()),
    ]));
    for name in [
        "sweep_tau.csv",
        "bound.csv",
        "is_check.csv",
        "marginal.csv",
        "manifest.txt",
    ] {
        let text = std::fs::read_to_string(dir.path().join(name)).unwrap();
        assert!(text.lines().count() >= 2, "{name}");
    }
    // One row per grid boundary of the 20-step fast config.
    let sweep = std::fs::read_to_string(dir.path().join("sweep_tau.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 21);
    let bound = std::fs::read_to_string(dir.path().join("bound.csv")).unwrap();
    assert!(bound.starts_with("case,signal,tau,measured_delta,bound_value,l_hat,e_integral,e_tau,"));
    assert_eq!(bound.lines().count(), 1 + 2);
    let o = vovc(&["eval", "--mode", "bound", "--signal", s(&sig(0))]);
    assert_eq!(o.status.code(), Some(1));
}
