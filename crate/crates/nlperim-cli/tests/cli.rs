use std::path::Path;
use std::process::{Command, Output};

fn nlperim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nlperim")).current_dir(dir).args(args).output().unwrap()
}

fn write_square(dir: &Path, name: &str, n: usize, f: impl Fn(usize, usize) -> bool) {
    let mut pbm = format!("P1\n{n} {n}\n");
    for y in (0..n).rev() {
        let row: Vec<&str> = (0..n).map(|x| if f(x, y) { "1" } else { "0" }).collect();
        pbm.push_str(&row.join(" "));
        pbm.push('\n');
    }
    std::fs::write(dir.join(format!("{name}.pbm")), pbm).unwrap();
    let h = 2.0 / n as f64;
    let side = serde_json::json!({"h": h, "origin": [-1.0 + h / 2.0, -1.0 + h / 2.0], "shape": [n, n]});
    std::fs::write(dir.join(format!("{name}.json")), side.to_string()).unwrap();
}

fn setup() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    write_square(d.path(), "half", 24, |_, y| y < 12);
    write_square(d.path(), "ones", 24, |_, _| true);
    std::fs::write(d.path().join("frac05.json"), r#"{"family":"fractional","dim":2,"s":0.5}"#).unwrap();
    d
}

#[test]
fn perimeter_prints_a_csv_row() {
    let d = setup();
    let o = nlperim(d.path(), &["perimeter", "--set", "half.pbm", "--kernel", "frac05.json", "--omega", "ball:0,0,1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("set_id,"));
    let total: f64 = lines[1].split(',').nth(6).unwrap().parse().unwrap();
    assert!(total > 0.0);
}

#[test]
fn minimize_fills_omega() {
    let d = setup();
    let o = nlperim(d.path(), &["minimize", "--exterior", "ones.pbm", "--kernel", "frac05.json", "--omega", "ball:0,0,0.5", "--out", "m"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let pbm = std::fs::read_to_string(d.path().join("m/e_min.pbm")).unwrap();
    assert!(!pbm.lines().skip(2).any(|l| l.contains('0')));
    let row = String::from_utf8(o.stdout).unwrap();
    let energy: f64 = row.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse().unwrap();
    assert_eq!(energy, 0.0);
}

#[test]
fn validation_errors_exit_2() {
    let d = setup();
    for args in [
        vec!["perimeter", "--set", "half.pbm", "--kernel", "frac05.json", "--omega", "ball:0,1"],
        vec!["perimeter", "--set", "missing.pbm", "--kernel", "frac05.json"],
        vec!["perimeter", "--set", "half.pbm", "--kernel", "frac05.json", "--unknown-flag"],
        vec!["experiment", "nope"],
        vec!["flow", "--initial", "half.pbm", "--kernel", "fractional:0.5", "--tau", "1e-6", "--schedule", "custom"],
    ] {
        let o = nlperim(d.path(), &args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(!o.stderr.is_empty());
    }
}

#[test]
fn flow_writes_trajectory() {
    let d = setup();
    let o = nlperim(d.path(), &["flow", "--initial", "half.pbm", "--kernel", "fractional:0.5", "--tau", "1e-6", "--steps", "3", "--cutoff", "4", "--out", "f"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(d.path().join("f/trajectory.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn experiment_is_deterministic_and_writes_manifest() {
    let d = setup();
    let cfg = r#"{"id":"bitmap","kernel":{"family":"fractional","dim":2,"s":0.5},"resolutions":[],"radii":[],
        "rhos":[0.0625,0.03125,0.015625,0.0078125],"trials":1,"seed":3,"cutoff_cells":8.0}"#;
    std::fs::write(d.path().join("bitmap.json"), cfg).unwrap();
    let mut csvs = Vec::new();
    for out in ["a", "b"] {
        let o = nlperim(d.path(), &["experiment", "bitmap", "--config", "bitmap.json", "--out", out, "--threads", "1"]);
        assert!(matches!(o.status.code(), Some(0) | Some(1)));
        assert!(d.path().join(out).join("bitmap_manifest.json").exists());
        csvs.push(std::fs::read(d.path().join(out).join("bitmap.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn audit_kernel_passes_for_fractional() {
    let d = setup();
    let o = nlperim(d.path(), &["audit-kernel", "--kernel", "fractional:0.5", "--samples", "200"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["kstar"]["pass"], true);
}
