use std::fs;
use std::path::Path;
use std::process::Command;

fn tfc(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_tfc")).args(args).output().expect("runs");
    let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap_or(-1), text)
}

fn serve(dir: &Path, extra: &[&str]) {
    let d = dir.to_str().unwrap();
    let mut args = vec!["serve", "--servers", "4", "--requests", "25", "--items-per-shard", "50", "--out", d];
    args.extend(extra);
    let (code, text) = tfc(&args);
    assert_eq!(code, 0, "{text}");
}

fn logs(dir: &Path) -> Vec<String> {
    (0..4).map(|i| dir.join(format!("server-{i}.log")).to_str().unwrap().to_string()).collect()
}

fn audit(files: &[String]) -> (i32, String) {
    let mut args = vec!["audit"];
    args.extend(files.iter().map(String::as_str));
    tfc(&args)
}

#[test]
fn clean_logs_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    serve(dir.path(), &[]);
    let (code, text) = audit(&logs(dir.path()));
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("no findings"));
}

#[test]
fn one_truncated_copy_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    serve(dir.path(), &[]);
    let files = logs(dir.path());
    let text = fs::read_to_string(&files[2]).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let kept = lines.len() - 3;
    lines.truncate(kept);
    fs::write(&files[2], lines.join("\n") + "\n").unwrap();
    let (code, out) = audit(&files);
    assert_eq!(code, 1, "{out}");
    // The header line is not a block.
    assert!(out.contains(&format!("LogTruncation servers=2 index={}", kept - 1)), "{out}");
}

#[test]
fn no_valid_copy_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    serve(dir.path(), &[]);
    let files = logs(dir.path());
    for f in &files {
        let text = fs::read_to_string(f).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.remove(1);
        fs::write(f, lines.join("\n") + "\n").unwrap();
    }
    let (code, out) = audit(&files);
    assert_eq!(code, 2, "{out}");
}

#[test]
fn fault_scenario_exits_one_with_the_finding() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = dir.path().join("f3.txt");
    fs::write(&scenario, "[fault]\nkind = F3\ntarget = 2\nblock = 7\n").unwrap();
    let report = dir.path().join("report.json");
    let (code, out) =
        tfc(&["audit", "--faults", scenario.to_str().unwrap(), "--json", "--out", report.to_str().unwrap()]);
    assert_eq!(code, 1, "{out}");
    let json = fs::read_to_string(report).unwrap();
    assert!(json.contains("\"kind\":\"DataCorruption\"") && json.contains("\"index\":7"), "{json}");
}

#[test]
fn unreadable_input_exits_three() {
    let (code, _) = audit(&["/nonexistent/server-0.log".to_string()]);
    assert_eq!(code, 3);
}
