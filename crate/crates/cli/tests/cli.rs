use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 4

[model]
image_height = 32
image_width = 32
feature_height = 8
feature_width = 8
motion_dim = 8
channels = 16
coarse_grid = 2
encoder_width = 8
pose_hidden = 16

[diffusion]
chunk_len = 8
steps = 10
hidden = 16
blocks = 1

[stage1]
steps = 6
batch = 2
pyramid = [32, 16]
local_size = 8

[stage2]
steps = 6
batch = 4

[data]
clips = 2
duration_s = 2.0
"#;

fn run(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gesturegen"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn invalid_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[model]\nimage_height = 30\nfeature_height = 8\n").unwrap();
    let o = run(&cfg, &dir.path().join("out"), &["gen-data"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not an integer multiple"));

    fs::write(&cfg, "[model]\nno_such_key = 1\n").unwrap();
    assert_eq!(code(&run(&cfg, &dir.path().join("out"), &["gen-data"])), 2);
    assert_eq!(
        code(&run(
            &dir.path().join("missing.toml"),
            &dir.path().join("out"),
            &["gen-data"]
        )),
        2
    );
}

#[test]
fn missing_data_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let missing = dir.path().join("nowhere");
    let o = run(
        &cfg,
        &dir.path().join("out"),
        &["train-stage1", "--data", missing.to_str().unwrap()],
    );
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let o = run(
        &cfg,
        &dir.path().join("out"),
        &["train-stage1", "--data", empty.to_str().unwrap()],
    );
    assert_eq!(code(&o), 3);
}

#[test]
fn end_to_end_run() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s);
    fs::write(p("small.toml"), SMALL).unwrap();
    let cfg = p("small.toml");
    let s = |path: &Path| path.to_str().unwrap().to_string();
    let ok = |o: Output| assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    ok(run(&cfg, &p("data"), &["gen-data"]));
    assert!(p("data/clip_0000/manifest.txt").is_file());
    ok(run(
        &cfg,
        &p("train"),
        &["train-stage1", "--data", &s(&p("data"))],
    ));
    ok(run(
        &cfg,
        &p("train"),
        &["train-stage2", "--data", &s(&p("data"))],
    ));
    for f in ["stage1.ckpt", "stage2.ckpt", "run_manifest.json"] {
        assert!(p("train").join(f).is_file(), "{f}");
    }
    ok(run(
        &cfg,
        &p("gen"),
        &[
            "infer",
            "--data",
            &s(&p("data")),
            "--stage1",
            &s(&p("train/stage1.ckpt")),
            "--stage2",
            &s(&p("train/stage2.ckpt")),
            "--dump-deviation",
        ],
    ));
    assert!(p("gen/clip_0001/frames/00019.png").is_file());
    assert!(p("gen/deviation/clip_0000/00000.png").is_file());
    let o = run(
        &cfg,
        &p("eval"),
        &[
            "eval",
            "--generated",
            &s(&p("gen")),
            "--reference",
            &s(&p("data")),
        ],
    );
    let stdout = String::from_utf8_lossy(&o.stdout).to_string();
    ok(o);
    let report = fs::read_to_string(p("eval/eval_report.csv")).unwrap();
    assert_eq!(report, stdout);
    assert!(report.starts_with("clip,FGD,Div.,BAS,FVD,PSNR,SSIM"));

    // Mismatched ids are a data error.
    fs::remove_dir_all(p("gen/clip_0001")).unwrap();
    let o = run(
        &cfg,
        &p("eval"),
        &[
            "eval",
            "--generated",
            &s(&p("gen")),
            "--reference",
            &s(&p("data")),
        ],
    );
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("clip_0001"));
}
