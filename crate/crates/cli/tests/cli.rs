use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vidiff_core::tensor::atns;
use vidiff_core::train::Checkpoint;
use vidiff_core::Tensor;

const TINY: &str = "\
# small enough for debug builds
base_channels = 8
head_channels = 8
norm_groups = 4
cond_embed_dim = 8
channel_multipliers = [1, 2]
attention_levels = [1]
num_frames = 5
resolution = 12
clips_per_class = 2
max_speed = 0.8
batch_size = 2
steps = 4
sample_steps = 3
eval_per_class = 1
";

fn vidiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vidiff")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = vidiff(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join(format!("run{}.cfg", extra.len()));
    std::fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn make_data_writes_manifest_and_clips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let out = dir.path().join("data");
    ok(&["make-data", "--config", s(&cfg), "--out", s(&out)]);
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    let lines: Vec<&str> = manifest.lines().collect();
    assert_eq!(lines.len(), 12);
    for (i, line) in lines.iter().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(f.len(), 3);
        assert_eq!(f[1].parse::<usize>().unwrap(), i / 2);
        assert_eq!(f[2], "2");
        let t: Tensor<f32> = atns::load(out.join(f[0])).unwrap();
        assert_eq!(t.shape(), &[5, 4, 12, 12]);
    }
}

#[test]
fn make_data_is_deterministic_given_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        ok(&["make-data", "--config", s(&cfg), "--seed", seed, "--out", s(&out)]);
        std::fs::read(out.join("clip_00003.atns")).unwrap()
    };
    assert_eq!(run("a", "7"), run("b", "7"));
    assert_ne!(run("a", "7"), run("c", "8"));
}

#[test]
fn resumed_training_is_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let ten = config(dir.path(), "steps = 10\n");
    let five = config(dir.path(), "steps = 5\nseed = 0\n");
    let full = dir.path().join("full");
    let half = dir.path().join("half");
    let resumed = dir.path().join("resumed");
    ok(&["train", "--config", s(&ten), "--out", s(&full)]);
    ok(&["train", "--config", s(&five), "--out", s(&half)]);
    let half_ckpt = half.join("checkpoint.ckpt");
    ok(&["train", "--config", s(&ten), "--resume", s(&half_ckpt), "--out", s(&resumed)]);
    let a = std::fs::read(full.join("checkpoint.ckpt")).unwrap();
    let b = std::fs::read(resumed.join("checkpoint.ckpt")).unwrap();
    assert_eq!(a, b);
    assert_eq!(Checkpoint::<f32>::from_bytes(&a).unwrap().step, 10);
}

#[test]
fn sample_interpolate_and_eval_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let data = dir.path().join("data");
    let ckpt_dir = dir.path().join("ckpt");
    ok(&["make-data", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ckpt_dir)]);
    let ckpt = ckpt_dir.join("checkpoint.ckpt");

    let clip: Tensor<f32> = atns::load(data.join("clip_00000.atns")).unwrap();
    let center = dir.path().join("center.atns");
    atns::save(&center, &clip.index0(2)).unwrap();
    let sample = |name: &str| {
        let out = dir.path().join(name);
        let args = ["sample", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--center-frame", s(&center)];
        ok(&[&args[..], &["--cond", "1", "--cfg", "2", "--seed", "3", "--out", s(&out)]].concat());
        out
    };
    let (a, b) = (sample("s1"), sample("s2"));
    let clip_a = std::fs::read(a.join("clip.atns")).unwrap();
    assert_eq!(clip_a, std::fs::read(b.join("clip.atns")).unwrap());
    let t: Tensor<f32> = atns::decode(&clip_a).unwrap();
    assert_eq!(t.shape(), &[5, 4, 12, 12]);
    let ppm = std::fs::read(a.join("clip_frame_04.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n12 12\n255\n"));
    assert_eq!(ppm.len(), "P6\n12 12\n255\n".len() + 12 * 12 * 3);

    let tsr_dir = dir.path().join("tsr");
    let tsr_cfg = config(dir.path(), "mode = tsr\ncond_drop_rate = 1\n");
    ok(&["train", "--config", s(&tsr_cfg), "--out", s(&tsr_dir)]);
    let first = dir.path().join("first.atns");
    let last = dir.path().join("last.atns");
    atns::save(&first, &clip.index0(0)).unwrap();
    atns::save(&last, &clip.index0(4)).unwrap();
    let out = dir.path().join("interp");
    let tsr_ckpt = tsr_dir.join("checkpoint.ckpt");
    ok(&["interpolate", "--checkpoint", s(&tsr_ckpt), "--first", s(&first), "--last", s(&last), "--out", s(&out)]);
    let t: Tensor<f32> = atns::load(out.join("clip.atns")).unwrap();
    assert_eq!(t.shape(), &[5, 4, 12, 12]);

    let eval = |name: &str| {
        let out = dir.path().join(name);
        let args = ["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--data", s(&data), "--seed", "5"];
        ok(&[&args[..], &["--dump", "1", "--out", s(&out)]].concat());
        std::fs::read_to_string(out.join("report.txt")).unwrap()
    };
    let r1 = eval("e1");
    assert_eq!(r1, eval("e2"));
    for key in ["mode = base", "samples = 6", "frechet = ", "temporal_consistency = ", "center_mse = "] {
        assert!(r1.contains(key), "{key} missing from\n{r1}");
    }
    assert!(dir.path().join("e1/sample_000_frame_00.ppm").exists());
}

#[test]
fn verify_reports_and_sets_exit_code() {
    let out = vidiff(&["verify", "schedule"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("schedule.alpha_bar_decreasing = PASS"));
    assert!(text.trim_end().ends_with("result = PASS"));

    let bad = vidiff(&["verify", "nonsense"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("nonsense"));
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "no_such_key = 1\n");
    let out = vidiff(&["make-data", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));

    let missing = dir.path().join("missing.ckpt");
    let out = vidiff(&["eval", "--checkpoint", s(&missing), "--data", s(dir.path()), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    // An f32 checkpoint runs at f64 precision after conversion.
    let good = config(dir.path(), "");
    let ck = dir.path().join("ck");
    ok(&["train", "--config", s(&good), "--out", s(&ck)]);
    let ckpt = ck.join("checkpoint.ckpt");
    let center = dir.path().join("c.atns");
    atns::save(&center, &Tensor::<f64>::zeros(&[4, 12, 12])).unwrap();
    let out = dir.path().join("wide");
    let args = ["sample", "--config", s(&good), "--precision", "f64", "--checkpoint", s(&ckpt)];
    ok(&[&args[..], &["--center-frame", s(&center), "--cond", "0", "--out", s(&out)]].concat());
    let bytes = std::fs::read(out.join("clip.atns")).unwrap();
    assert_eq!(bytes[5], 0, "dtype byte of an f64 tensor");

    // A center frame of the wrong size is a clean error.
    atns::save(&center, &Tensor::<f64>::zeros(&[4, 8, 8])).unwrap();
    let args = ["sample", "--config", s(&good), "--checkpoint", s(&ckpt), "--center-frame", s(&center)];
    let bad = vidiff(&[&args[..], &["--cond", "0", "--out", s(&out)]].concat());
    assert_eq!(bad.status.code(), Some(2));
}
