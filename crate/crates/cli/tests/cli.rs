use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

const SCENARIO: &str = "[scene]\nseed = 4\n[acquisition]\nimage_px = 32\n\
    [[acquisition.tasked]]\ntime_s = 100\noff_nadir_deg = 10\n\
    [[acquisition.tasked]]\ntime_s = 200\noff_nadir_deg = 25\nazimuth_deg = 180\n";

fn synthsat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_synthsat")).args(args).env_remove("SYNTHSAT_BACKEND_URL").output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("scenario.toml");
    std::fs::write(&p, body).unwrap();
    p.display().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn validate_and_plan() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SCENARIO);
    let v = synthsat(&["validate", &cfg]);
    assert!(v.status.success());
    assert!(stdout(&v).contains(": ok"));
    let p = synthsat(&["plan", &cfg]);
    assert!(p.status.success());
    let text = stdout(&p);
    assert!(text.contains("2 events"), "{text}");
    assert!(text.contains("2 synthesis calls"), "{text}");
}

#[test]
fn user_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(synthsat(&["validate", "/nonexistent/x.toml"]).status.code(), Some(1));
    let bad = write_config(dir.path(), "[scene]\nseed = 1\nmystery = true\n");
    let o = synthsat(&["plan", &bad]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
    let range = write_config(dir.path(), "[scene]\nseed = 1\n[[acquisition.tasked]]\ntime_s = 1\noff_nadir_deg = 80\n");
    assert_eq!(synthsat(&["generate", &range]).status.code(), Some(1));
}

#[test]
fn unwritable_output_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SCENARIO);
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"").unwrap();
    let out = blocker.join("out").display().to_string();
    assert_eq!(synthsat(&["generate", &cfg, "--output", &out]).status.code(), Some(2));
}

#[test]
fn generate_is_repeatable_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SCENARIO);
    let digest = |out: &str, workers: &str| {
        let o = synthsat(&["generate", &cfg, "--output", out, "--workers", workers]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read_to_string(Path::new(out).join("manifest.sha256")).unwrap()
    };
    let a = dir.path().join("a").display().to_string();
    let b = dir.path().join("b").display().to_string();
    assert_eq!(digest(&a, "1"), digest(&b, "4"));
    let again = synthsat(&["generate", &cfg, "--output", &a]);
    assert!(stdout(&again).contains("2 reused"), "{}", stdout(&again));
}

#[test]
fn http_mock_matches_in_process_mock() {
    let mut server = Command::new(env!("CARGO_BIN_EXE_synthsat"))
        .args(["serve-mock", "--port", "0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let url = line.trim().rsplit(' ').next().unwrap().to_owned();

    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SCENARIO);
    let local = dir.path().join("local").display().to_string();
    let remote = dir.path().join("remote").display().to_string();
    assert!(synthsat(&["generate", &cfg, "--output", &local]).status.success());
    let o = Command::new(env!("CARGO_BIN_EXE_synthsat"))
        .args(["generate", &cfg, "--output", &remote])
        .env("SYNTHSAT_BACKEND_URL", &url)
        .output()
        .unwrap();
    server.kill().ok();
    server.wait().ok();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("0 failed"), "{}", stdout(&o));

    // backend strings differ in the config digest only; compare products
    let products = |root: &str| {
        let m: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(Path::new(root).join("manifest.json")).unwrap()).unwrap();
        m["events"]
            .as_array()
            .unwrap()
            .iter()
            .map(|e| e["synthesis"][0]["final"]["digest"].as_str().unwrap().to_owned())
            .collect::<Vec<_>>()
    };
    assert_eq!(products(&local), products(&remote));
}

#[test]
fn bind_failure_exits_2() {
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    assert_eq!(synthsat(&["serve-mock", "--port", &port]).status.code(), Some(2));
}

#[test]
fn shipped_scenarios_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path().display().to_string();
        let o = synthsat(&["validate", &path]);
        assert!(o.status.success(), "{path}: {}", String::from_utf8_lossy(&o.stderr));
    }
}
