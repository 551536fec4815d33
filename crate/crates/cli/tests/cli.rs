use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use vidsynth::data::{read_dataset, read_png_rgb};
use vidsynth::trainer::load_checkpoint;
use vidsynth_cli::commands::{CHECKPOINT_FILE, TRAIN_LOG};
use vidsynth_cli::config::RESOLVED_CONFIG;
use vidsynth_cli::{resolve, Cli, RunConfig};
use clap::Parser;

const TINY: &str = r#"
[dataset]
train = 4
val = 3

[dataset.scene]
num_frames = 8
width = 16
height = 16
num_shapes = 2
min_size = 3
max_size = 6
max_speed = 1

[train]
seed = 1
phases = [
    { resolution = 8, frames = 4, steps = 3 },
    { resolution = 16, frames = 6, steps = 3 },
]

[train.generator]
base_channels = 4
downsamples = 2
res_blocks = 1
local_res_blocks = 1

[train.discriminator]
ndf = 4
n_layers = 2
spatial_scales = 1

[features]
components = 2
frame_stride = 2

[eval.clips]
length = 7
stride = 1
"#;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn vidsynth(args: &[&str]) -> Run {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let mut full = vec!["vidsynth"];
    full.extend_from_slice(args);
    let code = vidsynth_cli::run(full, &mut out, &mut err);
    Run {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Tiny dataset plus a trained checkpoint shared by several tests.
struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Fixture {
    fn new(multimodal: bool) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let config = root.join("tiny.toml");
        fs::write(&config, TINY).unwrap();
        let r = vidsynth(&["--config", s(&config), "--out", s(&root.join("data")), "make-data"]);
        assert_eq!(r.code, 0, "{}", r.stderr);
        let run = root.join("run");
        let data = root.join("data/train");
        let mut args = vec!["--config", s(&config), "--out", s(&run), "train", "--data", s(&data)];
        if multimodal {
            args.push("--multimodal");
        }
        let r = vidsynth(&args);
        assert_eq!(r.code, 0, "{}", r.stderr);
        Fixture {
            _tmp: tmp,
            root,
            config,
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

#[test]
fn default_make_data_config() {
    let cli = Cli::try_parse_from(["vidsynth", "--out", "x", "make-data"]).unwrap();
    let (cfg, _) = resolve(cli).unwrap();
    assert_eq!((cfg.dataset.train, cfg.dataset.val), (200, 50));
    assert_eq!((cfg.dataset.scene.width, cfg.dataset.scene.height, cfg.dataset.scene.num_frames), (64, 64, 12));
}

#[test]
fn make_data_is_reproducible_and_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        let r = vidsynth(&["--config", s(&config), "--seed", "7", "--out", s(dir), "make-data"]);
        assert_eq!(r.code, 0, "{}", r.stderr);
        assert!(r.stdout.contains("\"train\": 4"), "{}", r.stdout);
    }
    let (mut ta, mut tb) = (tree(&a), tree(&b));
    // The resolved config records the output directory; everything else must match.
    ta.remove(Path::new(RESOLVED_CONFIG));
    tb.remove(Path::new(RESOLVED_CONFIG));
    assert!(ta.len() > 10);
    assert!(ta == tb, "datasets differ");
    assert_eq!(read_dataset(&a.join("val")).unwrap().len(), 3);
    let c = tmp.path().join("c");
    vidsynth(&["--config", s(&config), "--seed", "8", "--out", s(&c), "make-data"]);
    assert!(tree(&a) != tree(&c));

    let bad = vidsynth(&["--out", s(&tmp.path().join("bad")), "make-data", "--size", "63"]);
    assert_eq!(bad.code, 1);
    assert!(bad.stderr.contains("divisible"), "{}", bad.stderr);
}

#[test]
fn exit_codes() {
    assert_eq!(vidsynth(&["--help"]).code, 0);
    assert_eq!(vidsynth(&["frobnicate"]).code, 1);
    assert_eq!(vidsynth(&["train"]).code, 1);
    let tmp = tempfile::tempdir().unwrap();
    let r = vidsynth(&["--out", s(tmp.path()), "train", "--data", s(&tmp.path().join("nothing"))]);
    assert_eq!(r.code, 2, "{}", r.stderr);
    assert!(r.stderr.contains("no manifest"), "{}", r.stderr);
    let cfg = tmp.path().join("broken.toml");
    fs::write(&cfg, "[train\n").unwrap();
    assert_eq!(vidsynth(&["--config", s(&cfg), "--out", "x", "make-data"]).code, 1);
}

#[test]
fn diverging_training_exits_with_numerical_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("tiny.toml");
    fs::write(&config, format!("{TINY}\n[train.losses]\nlambda_w = 1e300\n").replace("[train]\n", "[train]\nlr = 1e30\n")).unwrap();
    let r = vidsynth(&["--config", s(&config), "--out", s(&tmp.path().join("data")), "make-data"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let r = vidsynth(&[
        "--config",
        s(&config),
        "--out",
        s(&tmp.path().join("run")),
        "train",
        "--data",
        s(&tmp.path().join("data/train")),
    ]);
    assert_eq!(r.code, 3, "{}", r.stderr);
    assert!(r.stderr.contains("non-finite"), "{}", r.stderr);
}

#[test]
fn train_infer_eval_pipeline() {
    let f = Fixture::new(false);
    let run = f.path("run");
    let log = fs::read_to_string(run.join(TRAIN_LOG)).unwrap();
    assert_eq!(log.lines().count(), 6);
    let ckpt = load_checkpoint(&run.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ckpt.progress.step, 6);
    assert!(ckpt.feature_model.is_none());

    // The resolved config alone reproduces the run.
    let resolved = RunConfig::load(&run.join(RESOLVED_CONFIG)).unwrap();
    assert_eq!(resolved.train.phases.len(), 2);
    let again = f.path("again");
    let r = vidsynth(&["--config", s(&run.join(RESOLVED_CONFIG)), "--out", s(&again), "train"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(fs::read(again.join(CHECKPOINT_FILE)).unwrap(), fs::read(run.join(CHECKPOINT_FILE)).unwrap());

    let ck = run.join(CHECKPOINT_FILE);
    let val = f.path("data/val");
    let infer = |out: &str, extra: &[&str]| {
        let mut args = vec!["--out", out, "infer", "--checkpoint", s(&ck), "--data", s(&val)];
        args.extend_from_slice(extra);
        vidsynth(&args)
    };
    let (o1, o2) = (f.path("i1"), f.path("i2"));
    let r = infer(s(&o1), &["--sequence", "seq_0001", "--video"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stdout.contains("\"flicker\""));
    assert!(r.stdout.contains("video.mp4") || r.stderr.contains("notice"), "{}{}", r.stdout, r.stderr);
    assert_eq!(infer(s(&o2), &["--sequence", "seq_0001"]).code, 0);
    let frames = tree(&o1.join("frames"));
    assert_eq!(frames.len(), 8);
    assert_eq!(frames, tree(&o2.join("frames")));
    assert!(o1.join(RESOLVED_CONFIG).is_file());
    assert_eq!(read_png_rgb(&o1.join("frames/0000.png")).unwrap().width, 16);
    assert_eq!(infer(s(&f.path("i3")), &["--sequence", "nope"]).code, 2);
    assert_eq!(infer(s(&f.path("i4")), &["--multimodal"]).code, 1);

    let report = f.path("reports/eval.jsonl");
    for _ in 0..2 {
        let r = vidsynth(&["--config", s(&f.config), "eval", "--checkpoint", s(&ck), "--data", s(&val), "--report", s(&report)]);
        assert_eq!(r.code, 0, "{}", r.stderr);
    }
    let lines: Vec<serde_json::Value> = fs::read_to_string(&report)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], lines[1]);
    for key in ["fid", "flicker", "real_warp_error", "options", "checkpoint", "step"] {
        assert!(lines[0].get(key).is_some(), "missing {key}: {}", lines[0]);
    }
    assert_eq!(lines[0]["options"]["extractor"]["seed"], 1234);
    assert_eq!(lines[0]["options"]["clips"]["length"], 7);
}

#[test]
fn multimodal_seeds_select_appearance() {
    let f = Fixture::new(true);
    let ck = f.path("run").join(CHECKPOINT_FILE);
    assert!(load_checkpoint(&ck).unwrap().feature_model.is_some());
    let val = f.path("data/val");
    let infer = |seed: &str, out: &Path| {
        let r = vidsynth(&["--seed", seed, "--out", s(out), "infer", "--multimodal", "--checkpoint", s(&ck), "--data", s(&val)]);
        assert_eq!(r.code, 0, "{}", r.stderr);
        tree(&out.join("frames"))
    };
    let a = infer("1", &f.path("a"));
    let b = infer("1", &f.path("b"));
    let c = infer("2", &f.path("c"));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn manipulate_relabels_sources() {
    let f = Fixture::new(false);
    let data = f.path("data/val");
    let same = f.path("same");
    let r = vidsynth(&["--out", s(&same), "manipulate", "--data", s(&data)]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let orig = read_dataset(&data).unwrap().load_all().unwrap();
    let copy = read_dataset(&same).unwrap().load_all().unwrap();
    assert_eq!(orig, copy);

    // Circle (1) <-> rectangle (2): pure relabeling, geometry unchanged.
    let swapped = f.path("swapped");
    assert_eq!(vidsynth(&["--out", s(&swapped), "manipulate", "--data", s(&data), "--map", "1=2", "--map", "2=1"]).code, 0);
    let sw = read_dataset(&swapped).unwrap().load_all().unwrap();
    for (a, b) in orig.iter().zip(&sw) {
        for t in 0..a.len() {
            for (p, q) in a.source.labels[t].data.iter().zip(&b.source.labels[t].data) {
                let expect = match p {
                    1 => 2,
                    2 => 1,
                    v => *v,
                };
                assert_eq!(*q, expect);
            }
            assert_eq!(a.source.instances[t], b.source.instances[t]);
        }
    }

    // Foreground class 3 to background: the background mask grows by exactly those pixels.
    let bg = f.path("bg");
    assert_eq!(vidsynth(&["--out", s(&bg), "manipulate", "--data", s(&data), "--map", "3=0"]).code, 0);
    let moved = read_dataset(&bg).unwrap().load_all().unwrap();
    for (a, b) in orig.iter().zip(&moved) {
        for t in 0..a.len() {
            let before = a.source.background_mask(t).unwrap();
            let after = b.source.background_mask(t).unwrap();
            for (i, (&x, &y)) in before.data.iter().zip(&after.data).enumerate() {
                let was_three = a.source.labels[t].data[i] == 3;
                assert_eq!(y, x || was_three);
                if was_three {
                    assert_eq!(b.source.instances[t].data[i], 0);
                }
            }
        }
    }
    assert_eq!(vidsynth(&["--out", s(&f.path("x")), "manipulate", "--data", s(&data), "--map", "1=9"]).code, 2);
}

#[test]
fn predict_future_writes_horizon_frames() {
    let f = Fixture::new(false);
    let ck = f.path("run").join(CHECKPOINT_FILE);
    let data = f.path("data/val");
    let out = f.path("future");
    let r = vidsynth(&[
        "--out", s(&out), "predict-future", "--checkpoint", s(&ck), "--data", s(&data), "--observed", "3", "--horizon", "3",
    ]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(tree(&out.join("frames")).len(), 3);
    assert_eq!(tree(&out.join("labels")).len(), 3);
    let r = vidsynth(&[
        "--out", s(&f.path("f0")), "predict-future", "--checkpoint", s(&ck), "--data", s(&data), "--horizon", "0",
    ]);
    assert_eq!(r.code, 1, "{}", r.stderr);
    assert!(r.stderr.contains("horizon"));
}
