use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn oogan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oogan"))
        .args(args)
        .env("RAYON_NUM_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn oogan")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json_lines(out: &Output) -> Vec<serde_json::Value> {
    serde_json::Deserializer::from_slice(&out.stdout)
        .into_iter::<serde_json::Value>()
        .map(Result::unwrap)
        .collect()
}

struct Trained {
    run: PathBuf,
    ckpt: PathBuf,
}

/// One tiny probabilistic-Q run shared by the tests below.
fn trained() -> &'static Trained {
    static RUN: OnceLock<Trained> = OnceLock::new();
    RUN.get_or_init(|| {
        let run = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-shared-run");
        let _ = std::fs::remove_dir_all(&run);
        let out = oogan(&[
            "train", "--desk-scale", "--iters", "4", "--batch", "4", "--q-mode", "prob", "--out", s(&run),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let ckpt = run.join("checkpoints").join("ckpt-00000004.safetensors");
        Trained { run, ckpt }
    })
}

#[test]
fn synth_archive_round_trips_through_verify() {
    let dir = tempfile::tempdir().unwrap();
    let npz = dir.path().join("synth.npz");
    let out = oogan(&["data", "synth", "--out", s(&npz)]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).starts_with("1024 images"));

    let out = oogan(&["data", "verify", s(&npz)]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("images: 1024"));
    assert!(text.contains("full_factorial: true"));
    assert!(text.contains("sha256: "));
}

#[test]
fn truncated_archive_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    let npz = dir.path().join("synth.npz");
    assert_eq!(code(&oogan(&["data", "synth", "--out", s(&npz)])), 0);
    let bytes = std::fs::read(&npz).unwrap();
    std::fs::write(&npz, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(code(&oogan(&["data", "verify", s(&npz)])), 1);
}

#[test]
fn missing_archive_is_a_usage_error() {
    assert_eq!(code(&oogan(&["data", "verify", "/nonexistent/a.npz"])), 2);
}

#[test]
fn fetch_rejects_a_checksum_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("source.npz");
    std::fs::write(&src, b"not really an archive").unwrap();
    let dest = dir.path().join("fetched.npz");
    let source = format!("file://{}", s(&src));
    let out = oogan(&[
        "data", "fetch-dsprites", "--out", s(&dest), "--source", &source, "--sha256", &"0".repeat(64),
    ]);
    assert_eq!(code(&out), 1);
    assert!(!dest.exists());
}

#[test]
fn train_writes_the_run_layout() {
    let t = trained();
    assert!(t.run.join("config.toml").is_file());
    assert!(t.run.join("metrics.csv").is_file());
    assert!(t.ckpt.is_file());
    assert!(t.ckpt.with_extension("json").is_file());
    assert!(t.run.join("traversals").join("traverse-00000004.png").is_file());
    let csv = std::fs::read_to_string(t.run.join("metrics.csv")).unwrap();
    assert!(csv.lines().count() >= 2);
}

#[test]
fn train_refuses_a_non_empty_directory() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("keep"), b"x").unwrap();
    let out = oogan(&["train", "--desk-scale", "--iters", "1", "--batch", "2", "--out", s(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(dir.path().join("keep").exists());
}

#[test]
fn traverse_is_deterministic() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.png");
    let b = dir.path().join("b.png");
    for p in [&a, &b] {
        let out = oogan(&["traverse", "--ckpt", s(&t.ckpt), "--dims", "0,2", "--steps", "5", "--z-seed", "7", "--out", s(p)]);
        assert_eq!(code(&out), 0);
    }
    let (pa, pb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(pa, pb);
    // PNG IHDR: width and height as big-endian u32 at bytes 16..24.
    let width = u32::from_be_bytes(pa[16..20].try_into().unwrap());
    let height = u32::from_be_bytes(pa[20..24].try_into().unwrap());
    // Five 32px steps by two dimensions, with 2px separators.
    assert_eq!((width, height), (5 * 32 + 4 * 2, 2 * 32 + 2));
}

#[test]
fn traverse_rejects_missing_checkpoint_and_bad_dims() {
    assert_eq!(code(&oogan(&["traverse", "--ckpt", "/nonexistent/ckpt.safetensors"])), 1);
    let t = trained();
    assert_eq!(code(&oogan(&["traverse", "--ckpt", s(&t.ckpt), "--dims", "99"])), 2);
}

#[test]
fn oracle_encoder_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("m.csv");
    let out = oogan(&["eval", "--metric", "kim", "--oracle-encoder", "--n", "200", "--out", s(&csv)]);
    assert_eq!(code(&out), 0);
    let r = &json_lines(&out)[0];
    assert_eq!(r["score"].as_f64().unwrap(), 1.0);
    assert!(std::fs::read_to_string(&csv).unwrap().contains("kim"));
}

#[test]
fn pdiv_is_reproducible_for_a_seed() {
    let t = trained();
    let run = |seed: &str| {
        let out = oogan(&["eval", "--metric", "pdiv", "--ckpt", s(&t.ckpt), "--n", "20", "--seed", seed]);
        assert_eq!(code(&out), 0);
        json_lines(&out)[0]["score"].as_f64().unwrap()
    };
    let a = run("3");
    assert_eq!(a, run("3"));
    assert!(a > 0.0);
    assert!(t.run.join("reports").join("metrics.csv").is_file());
}

#[test]
fn tc_needs_a_probabilistic_q() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("det.toml");
    std::fs::write(&cfg, "q_mode = \"deterministic\"\nimg_size = 32\nimg_channels = 1\n").unwrap();
    let out = oogan(&["eval", "--metric", "tc", "--fresh", "--config", s(&cfg)]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));

    let t = trained();
    let out = oogan(&["eval", "--metric", "tc", "--ckpt", s(&t.ckpt), "--n", "64"]);
    assert_eq!(code(&out), 0);
    assert!(json_lines(&out)[0]["score"].as_f64().unwrap().is_finite());
}

#[test]
fn fresh_q_kernels_are_nearly_orthogonal() {
    // Independent symmetric kernels of length n have E|cos| ~ sqrt(2 / (pi n)).
    // The grouped Q layers use n >= 9, so the mean stays well below 0.3.
    let out = oogan(&["eval", "--metric", "cosq", "--fresh"]);
    assert_eq!(code(&out), 0);
    let r = &json_lines(&out)[0];
    let score = r["score"].as_f64().unwrap();
    assert!(score > 0.0 && score < 0.3, "{score}");
    assert!(r["n_samples"].as_u64().unwrap() > 0);
}

#[test]
fn l1probe_reports_both_code_distributions() {
    let t = trained();
    let out = oogan(&["eval", "--metric", "l1probe", "--ckpt", s(&t.ckpt), "--n", "16"]);
    assert_eq!(code(&out), 0);
    let names: Vec<String> = json_lines(&out).iter().map(|r| r["name"].as_str().unwrap().to_string()).collect();
    assert_eq!(names, ["l1probe_uniform", "l1probe_onehot"]);
}

#[test]
fn resume_extends_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = oogan(&["train", "--desk-scale", "--iters", "2", "--batch", "2", "--out", s(&run)]);
    assert_eq!(code(&out), 0);
    let ckpt = run.join("checkpoints").join("ckpt-00000002.safetensors");
    let out = oogan(&["train", "--resume", s(&ckpt), "--iters", "3", "--batch", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("checkpoints").join("ckpt-00000003.safetensors").is_file());
}
