use std::path::Path;
use std::process::{Command, Output};

fn semfuse(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_semfuse"))
        .args(args)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "semfuse {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

#[test]
fn gen_paint_train_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let text = stdout(&semfuse(&[
        "gen",
        "--out",
        path(&data),
        "--scenes",
        "3",
        "--seed",
        "4",
    ]));
    assert_eq!(text.lines().count(), 3);
    let scene = data.join("scene_0000");
    for f in [
        "cloud.bin",
        "calib.txt",
        "boxes.txt",
        "sem2d.sem",
        "sem3d.sem",
    ] {
        assert!(scene.join(f).is_file(), "missing {f}");
    }

    let again = tmp.path().join("again");
    semfuse(&["gen", "--out", path(&again), "--scenes", "3", "--seed", "4"]);
    for f in ["cloud.bin", "sem2d.sem"] {
        assert_eq!(
            std::fs::read(scene.join(f)).unwrap(),
            std::fs::read(again.join("scene_0000").join(f)).unwrap()
        );
    }

    let text = stdout(&semfuse(&["paint", "--scene", path(&scene)]));
    assert!(text.contains("in view"), "{text}");
    assert_eq!(
        &std::fs::read(scene.join("painted_background.sem")).unwrap()[..4],
        b"SEM2"
    );

    let ckpt = tmp.path().join("ckpt");
    let text = stdout(&semfuse(&[
        "train",
        "--data",
        path(&data),
        "--strategy",
        "aaf-dff",
        "--steps",
        "8",
        "--out",
        path(&ckpt),
    ]));
    assert!(
        text.starts_with("trained aaf-dff / score for 8 steps on 3 scenes"),
        "{text}"
    );
    for f in ["config.toml", "fusion.aaf", "dff.dff"] {
        assert!(ckpt.join(f).is_file(), "missing {f}");
    }

    let report = tmp.path().join("report.csv");
    let text = stdout(&semfuse(&[
        "eval",
        "--ckpt",
        path(&ckpt),
        "--data",
        path(&data),
        "--report",
        path(&report),
    ]));
    assert!(text.contains("acc "), "{text}");
    let csv = std::fs::read_to_string(&report).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("strategy,repr,seed,acc,fg_acc,fp_rate,steps,wall_ms")
    );
    assert!(lines.next().unwrap().starts_with("aaf-dff,score,0,"));
    assert_eq!(lines.next(), None);
}

#[test]
fn gradcheck_passes() {
    let text = stdout(&semfuse(&["gradcheck", "--module", "aaf"]));
    assert!(text.starts_with("aaf"), "{text}");
    assert!(text.trim_end().ends_with("ok"), "{text}");
}

#[test]
fn ablate_writes_csv_and_chart() {
    let tmp = tempfile::tempdir().unwrap();
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.toml");
    let out = tmp.path().join("ablation");
    semfuse(&["ablate", "--config", config, "--out", path(&out)]);
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(
        rows[0].starts_with("sem2d,score,0,") && rows[1].starts_with("aaf,score,0,"),
        "{csv}"
    );
    let svg = std::fs::read_to_string(out.join("ablation.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
}

#[test]
fn bad_input_is_reported() {
    let out = Command::new(env!("CARGO_BIN_EXE_semfuse"))
        .args([
            "eval",
            "--ckpt",
            "/nonexistent/ckpt",
            "--data",
            "/nonexistent/data",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
