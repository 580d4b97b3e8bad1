use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use talkhead::geometry::{decompose_sequence, load_sequence, rotation_angle_between, standard_template};

fn talkhead(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_talkhead")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = talkhead(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Trained {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Trained {
    fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }
    fn manifest(&self) -> PathBuf {
        self.corpus().join("manifest.tsv")
    }
    fn content_ckpt(&self) -> PathBuf {
        self.root.join("content.json")
    }
    fn speaker_ckpt(&self) -> PathBuf {
        self.root.join("speaker.json")
    }
    fn clip(&self, suffix: &str) -> PathBuf {
        self.corpus().join(format!("s00_c000.{suffix}"))
    }
}

fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let t = Trained { _dir: dir, root };
        ok(&["synth-corpus", "--out", s(&t.corpus()), "--speakers", "2", "--clips", "3", "--frames", "96", "--content-dim", "8", "--seed", "3"]);
        ok(&["train-content", "--manifest", s(&t.manifest()), "--out", s(&t.content_ckpt()), "--steps", "6", "--batch-size", "8"]);
        ok(&[
            "train-speaker",
            "--manifest",
            s(&t.manifest()),
            "--out",
            s(&t.speaker_ckpt()),
            "--content-checkpoint",
            s(&t.content_ckpt()),
            "--steps",
            "4",
            "--batch-size",
            "2",
        ]);
        t
    })
}

fn animate(t: &Trained, out: &Path, extra: &[&str]) -> Output {
    let (content, speaker) = (t.clip("content.arr"), t.clip("speaker.arr"));
    let (cc, sc) = (t.content_ckpt(), t.speaker_ckpt());
    let mut args = vec![
        "animate",
        "--content",
        s(&content),
        "--speaker",
        s(&speaker),
        "--content-checkpoint",
        s(&cc),
        "--speaker-checkpoint",
        s(&sc),
        "--synthetic-size",
        "96",
        "--out",
        s(out),
    ];
    args.extend_from_slice(extra);
    talkhead(&args)
}

#[test]
fn training_writes_checkpoints_and_loss_logs() {
    let t = trained();
    for ckpt in [t.content_ckpt(), t.speaker_ckpt()] {
        assert!(ckpt.is_file());
        let log = std::fs::read_to_string(ckpt.with_extension("losses.tsv")).unwrap();
        assert!(log.starts_with("step\tloss"));
    }
    let log = std::fs::read_to_string(t.speaker_ckpt().with_extension("losses.tsv")).unwrap();
    assert!(log.lines().next().unwrap().ends_with("disc_loss"));
}

#[test]
fn eval_reports_metrics_for_model_and_baseline() {
    let t = trained();
    let model = ok(&[
        "eval",
        "--manifest",
        s(&t.manifest()),
        "--content-checkpoint",
        s(&t.content_ckpt()),
        "--speaker-checkpoint",
        s(&t.speaker_ckpt()),
        "--split",
        "all",
    ]);
    let base = ok(&["eval", "--manifest", s(&t.manifest()), "--baseline", "random-id", "--split", "all"]);
    for report in [model, base] {
        for name in ["d_ll_pct", "d_vl_pct", "d_a_pct", "d_rot_deg", "d_pos_pct"] {
            assert!(report.contains(name), "{name} missing from:\n{report}");
        }
    }
}

#[test]
fn animate_is_reproducible() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = animate(t, out, &["--seed", "5"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("animate.json")).unwrap()).unwrap();
    let frames = manifest["frames"].as_array().unwrap();
    assert_eq!(frames.len(), manifest["frame_count"].as_u64().unwrap() as usize);
    assert!(frames.len() > 10);
    let roles: Vec<&str> = manifest["inputs"].as_array().unwrap().iter().map(|r| r[0].as_str().unwrap()).collect();
    assert!(roles.contains(&"content") && roles.contains(&"speaker_checkpoint"));
    for f in frames.iter().map(|f| f.as_str().unwrap()).chain(["landmarks.txt"]) {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn yaw_override_rotates_every_output_pose() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let (plain, turned) = (dir.path().join("plain"), dir.path().join("turned"));
    assert!(animate(t, &plain, &[]).status.success());
    assert!(animate(t, &turned, &["--yaw", "10"]).status.success());
    let template = standard_template();
    let p0 = decompose_sequence(&load_sequence(plain.join("landmarks.txt")).unwrap(), &template).unwrap();
    let p1 = decompose_sequence(&load_sequence(turned.join("landmarks.txt")).unwrap(), &template).unwrap();
    assert_eq!(p0.len(), p1.len());
    for (a, b) in p0.iter().zip(&p1) {
        let angle = rotation_angle_between(&a.rotation(), &b.rotation());
        assert!((angle - 10.0).abs() < 1e-6, "rotation changed by {angle} degrees");
    }
}

#[test]
fn pose_edit_command_matches_library() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("edited.txt");
    ok(&["pose-edit", "--input", s(&t.clip("landmarks.txt")), "--out", s(&out), "--yaw", "-10"]);
    let template = standard_template();
    let before = decompose_sequence(&load_sequence(t.clip("landmarks.txt")).unwrap(), &template).unwrap();
    let after = decompose_sequence(&load_sequence(&out).unwrap(), &template).unwrap();
    for (a, b) in before.iter().zip(&after) {
        assert!((rotation_angle_between(&a.rotation(), &b.rotation()) - 10.0).abs() < 1e-6);
    }
}

#[test]
fn missing_input_file_exits_2() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let o = talkhead(&[
        "animate",
        "--content",
        s(&dir.path().join("nope.arr")),
        "--content-checkpoint",
        s(&t.content_ckpt()),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_speaker_embedding_names_the_flag() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let o = talkhead(&[
        "animate",
        "--content",
        s(&t.clip("content.arr")),
        "--content-checkpoint",
        s(&t.content_ckpt()),
        "--speaker-checkpoint",
        s(&t.speaker_ckpt()),
        "--synthetic-size",
        "96",
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--speaker"));
}

#[test]
fn translate_mode_needs_generator_checkpoint() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let o = animate(t, &dir.path().join("o"), &["--mode", "translate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--i2i-checkpoint"));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("animate.toml");
    std::fs::write(&cfg, "fps = 25.0\nsynthetic_size = 64\n").unwrap();
    let out = dir.path().join("o");
    let o = animate(t, &out, &["--config", s(&cfg), "--fps", "30"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("animate.json")).unwrap()).unwrap();
    assert_eq!(m["fps"].as_f64(), Some(30.0));
    assert_eq!(m["config"]["synthetic_size"].as_u64(), Some(96));
}

#[test]
fn divergent_training_exits_3() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let o = talkhead(&[
        "train-content",
        "--manifest",
        s(&t.manifest()),
        "--out",
        s(&dir.path().join("c.json")),
        "--steps",
        "20",
        "--lr",
        "1e200",
        "--batch-size",
        "8",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn unreadable_corpus_exits_4_and_bad_flags_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = talkhead(&["eval", "--manifest", s(&dir.path().join("missing.tsv")), "--baseline", "same-id"]);
    assert_eq!(o.status.code(), Some(4));
    let o = talkhead(&["eval", "--manifest", "m.tsv", "--baseline", "nearest"]);
    assert_eq!(o.status.code(), Some(2));
}
