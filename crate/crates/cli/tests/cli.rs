use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};

fn bench() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bench"))
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn bench");
    assert!(
        out.status.success(),
        "bench failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn data_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(String::from)
        .collect()
}

#[test]
fn in_process_sweep_writes_one_file_per_algorithm() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("res");
    run(bench()
        .args([
            "sweep",
            "--collective",
            "rs",
            "--grid",
            "2x2,1x4",
            "--sizes",
            "16K,64K",
            "--trials",
            "10",
        ])
        .args(["--verify", "--warmup", "--out", out.to_str().unwrap()]));
    for alg in ["ring", "recursive", "hierarchical-auto"] {
        let lines = data_lines(&out.join(format!("inprocess_rs_{alg}.csv")));
        assert_eq!(lines.len(), 2 * 2 * 10);
        assert!(lines.iter().all(|l| l.ends_with(",true")));
    }
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.toml");
    let out = dir.path().join("res");
    std::fs::write(
        &cfg,
        format!(
            "backend = \"sim\"\ncollective = \"ag\"\nalgo = \"ring\"\nsizes = \"16M\"\ngrid = [\"2x8\", \"4x8\"]\nout = \"{}\"\n",
            out.display()
        ),
    )
    .unwrap();
    run(bench().args(["--config", cfg.to_str().unwrap(), "sweep", "--sizes", "16M,32M"]));
    let lines = data_lines(&out.join("simulated_ag_ring.csv"));
    assert_eq!(lines.len(), 4);
    assert!(!out.join("simulated_ag_recursive.csv").exists());
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "colective = \"ag\"\n").unwrap();
    let out = bench()
        .args(["--config", cfg.to_str().unwrap(), "sweep"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn indivisible_size_is_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let out = bench()
        .args(["sweep", "--grid", "3x2", "--algo", "ring", "--sizes", "4K", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn verify_reports_every_case() {
    let out = run(bench().args([
        "verify",
        "--grid",
        "2x2,2x1",
        "--elems",
        "8",
        "--backend",
        "inprocess,sim",
    ]));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("32 cases, 0 failed"), "{text}");
}

#[test]
fn heatmap_of_identical_series_is_flat() {
    let dir = tempfile::tempdir().unwrap();
    run(bench()
        .args([
            "sweep",
            "--backend",
            "sim",
            "--algo",
            "ring",
            "--sizes",
            "16M,64M",
            "--grid",
            "2x8,4x8",
            "--out",
        ])
        .arg(dir.path()));
    let f = dir.path().join("simulated_ag_ring.csv");
    let heat = dir.path().join("heat.csv");
    run(bench().arg("heatmap").arg(&f).arg(&f).arg("--out").arg(&heat));
    let lines = data_lines(&heat);
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().all(|l| l.ends_with(",1.0")), "{lines:?}");
}

#[test]
fn calibrate_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("cal.csv");
    run(bench()
        .args(["calibrate", "--nodes", "4,128", "--sizes", "16M,1G", "--out"])
        .arg(&table));
    let text = std::fs::read_to_string(&table).unwrap();
    assert!(text.starts_with("N,m_bytes,ring_seconds,recursive_seconds,winner\n"));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn simulate_exports_trace_and_counters() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("trace.jsonl");
    let counters = dir.path().join("nics.csv");
    run(bench()
        .args([
            "simulate",
            "--nodes",
            "2",
            "--gpus-per-node",
            "8",
            "--algo",
            "ring",
            "--size",
            "1M",
            "--nic-policy",
            "single_nic",
        ])
        .arg("--trace")
        .arg(&trace)
        .arg("--counters")
        .arg(&counters));
    assert_eq!(std::fs::read_to_string(&trace).unwrap().lines().count(), 15);
    let rows = data_lines(&counters);
    assert_eq!(rows.len(), 4);
    assert!(rows[1].starts_with("1,0,0,"));
}

#[test]
fn socket_sweep_across_processes() {
    let p = 4;
    let ports: Vec<u16> = (0..p)
        .map(|_| TcpListener::bind("127.0.0.1:0").unwrap())
        .collect::<Vec<_>>()
        .iter()
        .map(|l| l.local_addr().unwrap().port())
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let hosts = dir.path().join("hosts");
    let text: String = ports
        .iter()
        .enumerate()
        .map(|(r, port)| format!("{r} 127.0.0.1 {port}\n"))
        .collect();
    std::fs::write(&hosts, text).unwrap();
    let out = dir.path().join("res");
    let children: Vec<_> = (0..p)
        .map(|rank| {
            bench()
                .args([
                    "sweep",
                    "--backend",
                    "socket",
                    "--grid",
                    "2x2",
                    "--sizes",
                    "64K",
                    "--trials",
                    "3",
                    "--verify",
                ])
                .arg("--out")
                .arg(&out)
                .env("HIERCOLL_RANK", rank.to_string())
                .env("HIERCOLL_HOSTFILE", &hosts)
                .env("HIERCOLL_CONNECT_TIMEOUT", "30")
                .spawn()
                .unwrap()
        })
        .collect();
    for mut c in children {
        assert!(c.wait().unwrap().success());
    }
    for alg in ["ring", "recursive", "hierarchical-auto"] {
        let lines = data_lines(&out.join(format!("socket_ag_{alg}.csv")));
        assert_eq!(lines.len(), 3);
        assert!(lines
            .iter()
            .all(|l| l.starts_with("socket,all_gather,") && l.ends_with(",true")));
    }
}
