//! End-to-end tests of the `sprnn` binary: every subcommand, the exit-code
//! contract (1 usage, 2 format/io, 3 verification), report JSON, and the
//! reproducibility manifests.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sprnn_core::{fnv1a64, load_dense, load_sparse};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sprnn"))
}

fn run_args(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary spawns")
}

/// Runs a command that must succeed and returns its stdout.
fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run_args(dir, args);
    assert!(
        out.status.success(),
        "command {args:?} failed with {:?}:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("stdout is utf-8")
}

/// Runs a command that must fail with the given exit code.
fn fails(dir: &Path, args: &[&str], code: i32) -> String {
    let out = run_args(dir, args);
    assert_eq!(
        out.status.code(),
        Some(code),
        "command {args:?} should exit {code}:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn json(stdout: &str) -> serde_json::Value {
    serde_json::from_str(stdout).expect("report is valid JSON")
}

fn v100_profile() -> String {
    concat!(env!("CARGO_MANIFEST_DIR"), "/../../profiles/v100.json").to_string()
}

#[test]
fn gen_is_deterministic_and_checksummed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--rows", "48", "--cols", "48", "--seed", "42", "--out", "a.dnsm"]);
    ok(d, &["gen", "--rows", "48", "--cols", "48", "--seed", "42", "--out", "b.dnsm"]);
    let a = fs::read(d.join("a.dnsm")).unwrap();
    let b = fs::read(d.join("b.dnsm")).unwrap();
    assert_eq!(a, b, "same seed must give byte-identical matrices");

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("a.dnsm.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "gen");
    assert_eq!(manifest["seed"], 42);
    assert_eq!(manifest["schema_version"], 1);
    let recorded = manifest["outputs"][0]["checksum_fnv1a64"].as_str().unwrap();
    assert_eq!(
        recorded,
        format!("{:016x}", fnv1a64(&a)),
        "manifest checksum must match the written bytes"
    );

    // A different seed must change the bytes.
    ok(d, &["gen", "--rows", "48", "--cols", "48", "--seed", "43", "--out", "c.dnsm"]);
    assert_ne!(a, fs::read(d.join("c.dnsm")).unwrap());
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let msg = fails(
        d,
        &["gen", "--rows", "0", "--cols", "8", "--seed", "1", "--out", "z.dnsm"],
        1,
    );
    assert!(msg.contains("at least 1"), "got: {msg}");

    // gen and run refuse to fabricate inputs without an explicit seed.
    fails(d, &["gen", "--rows", "4", "--cols", "4", "--out", "z.dnsm"], 1);
    fails(d, &["run", "--in", "z.sprn"], 1);

    // Vector widths other than 1, 2, 4 are rejected at parse time.
    ok(d, &["gen", "--rows", "8", "--cols", "8", "--seed", "1", "--out", "m.dnsm"]);
    ok(d, &["prune", "--in", "m.dnsm", "-d", "0.5", "--out", "l.sprn"]);
    let msg = fails(d, &["layout", "--in", "l.sprn", "-w", "3", "--out", "x.sprn"], 1);
    assert!(msg.contains("1, 2, or 4"), "got: {msg}");

    // Densities outside (0, 1] are parameter errors.
    fails(d, &["prune", "--in", "m.dnsm", "-d", "0.0", "--out", "x.sprn"], 1);
    fails(d, &["prune", "--in", "m.dnsm", "-d", "1.5", "--out", "x.sprn"], 1);
}

#[test]
fn format_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.dnsm"), b"garbage bytes").unwrap();
    let msg = fails(d, &["prune", "--in", "bad.dnsm", "-d", "0.5", "--out", "x.sprn"], 2);
    assert!(msg.contains("bad.dnsm"), "error names the file: {msg}");

    fails(d, &["prune", "--in", "missing.dnsm", "-d", "0.5", "--out", "x.sprn"], 2);

    // A malformed run config is a file problem, not a usage problem.
    ok(d, &["gen", "--rows", "8", "--cols", "8", "--seed", "1", "--out", "m.dnsm"]);
    ok(d, &["prune", "--in", "m.dnsm", "-d", "0.5", "--out", "l.sprn"]);
    fs::write(d.join("cfg.json"), b"{ not json").unwrap();
    fails(
        d,
        &["run", "--in", "l.sprn", "--seed", "1", "--config", "cfg.json"],
        2,
    );
    // Unknown config fields are rejected rather than silently ignored.
    fs::write(d.join("cfg2.json"), br#"{"timestep": 4}"#).unwrap();
    fails(
        d,
        &["run", "--in", "l.sprn", "--seed", "1", "--config", "cfg2.json"],
        2,
    );
}

#[test]
fn full_density_prune_reconstructs_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--rows", "32", "--cols", "32", "--seed", "7", "--out", "m.dnsm"]);
    ok(d, &["prune", "--in", "m.dnsm", "-d", "1.0", "--mode", "naive", "--out", "l.sprn"]);

    let dense = load_dense(d.join("m.dnsm")).unwrap();
    let layer = load_sparse(d.join("l.sprn")).unwrap();
    let rebuilt = layer.reconstruct_dense();
    assert_eq!(dense.rows(), rebuilt.rows());
    for (a, b) in dense.data().iter().zip(rebuilt.data()) {
        assert_eq!(a.to_bits(), b.to_bits(), "full-density prune must round-trip bits");
    }

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("l.sprn.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["inputs"][0]["path"], "m.dnsm");
    assert_eq!(manifest["parameters"]["density"], 1.0);
}

#[test]
fn naive_prune_reports_padding_inflation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &["gen", "--rows", "64", "--cols", "64", "--seed", "13", "--dist", "normal", "--out", "m.dnsm"],
    );
    let report = json(&ok(
        d,
        &["prune", "--in", "m.dnsm", "-d", "0.05", "--mode", "naive", "--out", "l.sprn", "--json"],
    ));
    let pre = report["report"]["pre_padding_density"].as_f64().unwrap();
    let post = report["report"]["post_padding_density"].as_f64().unwrap();
    let padding = report["report"]["padding_pairs"].as_u64().unwrap();
    assert!(padding > 0, "global top-k on a random matrix leaves uneven rows");
    assert!(post > pre, "padding must inflate the stored density: {pre} -> {post}");

    // Row-balanced pruning pads nothing by construction.
    let report = json(&ok(
        d,
        &["prune", "--in", "m.dnsm", "-d", "0.05", "--mode", "row-balanced", "--out", "r.sprn", "--json"],
    ));
    assert_eq!(report["report"]["padding_pairs"], 0);
    assert_eq!(
        report["report"]["pre_padding_density"],
        report["report"]["post_padding_density"]
    );
}

#[test]
fn layout_and_simulate_rank_layouts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--rows", "512", "--cols", "512", "--seed", "21", "--out", "m.dnsm"]);
    ok(d, &["prune", "--in", "m.dnsm", "-d", "0.10", "--out", "ap.sprn"]);
    let layout = json(&ok(
        d,
        &["layout", "--in", "ap.sprn", "-w", "4", "--out", "ba.sprn", "--json"],
    ));
    assert_eq!(layout["report"]["layout_before"], "as-pruned");
    assert_eq!(layout["report"]["layout_after"], "bank-aware(w=4)");

    let penalty = |file: &str| -> f64 {
        let report = json(&ok(d, &["simulate", "--in", file, "-w", "4", "--json"]));
        assert_eq!(report["schema_version"], 1);
        assert!(report["manifest"]["inputs"][0]["checksum_fnv1a64"].is_string());
        report["report"]["penalty"].as_f64().unwrap()
    };
    let as_pruned = penalty("ap.sprn");
    let bank_aware = penalty("ba.sprn");
    assert!(
        bank_aware < as_pruned,
        "bank-aware order must cut conflict cycles here: {bank_aware} vs {as_pruned}"
    );
}

#[test]
fn run_verifies_and_is_deterministic_across_sync_modes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &["gen", "--rows", "64", "--cols", "64", "--seed", "11", "--dist", "normal", "--out", "m.dnsm"],
    );
    ok(d, &["prune", "--in", "m.dnsm", "-d", "0.1", "--out", "ap.sprn"]);
    ok(d, &["layout", "--in", "ap.sprn", "-w", "2", "--out", "l.sprn"]);

    let base = [
        "run", "--in", "l.sprn", "--seed", "3", "-T", "6", "-B", "2", "--verify", "--json",
    ];
    let checksum_of = |extra: &[&str]| -> (String, serde_json::Value) {
        let mut args: Vec<&str> = base.to_vec();
        args.extend_from_slice(extra);
        let report = json(&ok(d, &args));
        let run = &report["report"];
        assert!(run["verify"]["passed"].as_bool().unwrap());
        assert!(run["verify"]["max_rel_err"].as_f64().unwrap() <= 1e-5);
        (
            run["final_checksum"].as_str().unwrap().to_string(),
            report.clone(),
        )
    };

    let (lamport1, full) = checksum_of(&["--sync", "lamport", "--workers", "2"]);
    let (lamport2, _) = checksum_of(&["--sync", "lamport", "--workers", "2"]);
    let (barrier, _) = checksum_of(&["--sync", "global-barrier", "--workers", "4"]);
    assert_eq!(lamport1, lamport2, "reruns must be bit-identical");
    assert_eq!(lamport1, barrier, "sync mode and workers must not change results");

    // 64 outputs x 2 samples x 6 steps published exactly once each.
    assert_eq!(full["report"]["stats"]["publishes"], 64 * 2 * 6);
}

#[test]
fn impossible_tolerance_is_a_verification_failure() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &["gen", "--rows", "64", "--cols", "64", "--seed", "11", "--dist", "normal", "--out", "m.dnsm"],
    );
    ok(d, &["prune", "--in", "m.dnsm", "-d", "0.1", "--out", "ap.sprn"]);
    ok(d, &["layout", "--in", "ap.sprn", "-w", "2", "--out", "l.sprn"]);
    let msg = fails(
        d,
        &[
            "run", "--in", "l.sprn", "--seed", "3", "-T", "6", "-B", "2", "--verify",
            "--tolerance", "1e-30",
        ],
        3,
    );
    assert!(msg.contains("exceeds tolerance"), "got: {msg}");
}

#[test]
fn run_config_file_merges_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--rows", "32", "--cols", "32", "--seed", "2", "--out", "m.dnsm"]);
    ok(d, &["prune", "--in", "m.dnsm", "-d", "0.2", "--out", "l.sprn"]);
    fs::write(
        d.join("cfg.json"),
        br#"{"timesteps": 5, "workers": 2, "activation": "sigmoid", "sync_mode": "global-barrier"}"#,
    )
    .unwrap();

    let report = json(&ok(
        d,
        &["run", "--in", "l.sprn", "--seed", "9", "--config", "cfg.json", "--json"],
    ));
    assert_eq!(report["report"]["timesteps"], 5);
    assert_eq!(report["manifest"]["parameters"]["workers"], 2);
    assert_eq!(report["manifest"]["parameters"]["activation"], "sigmoid");
    assert_eq!(report["manifest"]["parameters"]["sync"], "global-barrier");

    let report = json(&ok(
        d,
        &["run", "--in", "l.sprn", "--seed", "9", "--config", "cfg.json", "-T", "3", "--json"],
    ));
    assert_eq!(report["report"]["timesteps"], 3, "flags beat config fields");
}

#[test]
fn lstm_runs_verify_and_write_state() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // 256 rows = 4 gate rows for each of 64 units.
    ok(
        d,
        &["gen", "--rows", "256", "--cols", "64", "--seed", "5", "--dist", "normal", "--out", "g.dnsm"],
    );
    ok(d, &["prune", "--in", "g.dnsm", "-d", "0.2", "--out", "g.sprn"]);
    ok(
        d,
        &[
            "run", "--in", "g.sprn", "--cell", "lstm", "--seed", "5", "-T", "4", "-B", "2",
            "--verify", "--out", "state.json",
        ],
    );

    let state: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("state.json")).unwrap()).unwrap();
    assert_eq!(state["hidden"]["data"].as_array().unwrap().len(), 64 * 2);
    assert_eq!(state["cell"]["data"].as_array().unwrap().len(), 64 * 2);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("state.json.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["command"], "run");
    assert_eq!(manifest["seed"], 5);

    // Gate nonlinearities are fixed, so picking one is a usage error.
    fails(
        d,
        &["run", "--in", "g.sprn", "--cell", "lstm", "--seed", "5", "--activation", "relu"],
        1,
    );
    // 255 rows cannot stack into 4-gate units.
    ok(d, &["gen", "--rows", "255", "--cols", "64", "--seed", "5", "--out", "odd.dnsm"]);
    ok(d, &["prune", "--in", "odd.dnsm", "-d", "0.2", "--out", "odd.sprn"]);
    fails(d, &["run", "--in", "odd.sprn", "--cell", "lstm", "--seed", "5"], 1);
}

#[test]
fn feasibility_finds_the_register_wall() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let arch = v100_profile();

    let out = ok(
        d,
        &["feasibility", "--arch", &arch, "-H", "5632", "-d", "0.10", "--algo", "sparse-persistent"],
    );
    assert!(out.contains("infeasible: Registers"), "got: {out}");

    let out = ok(d, &["feasibility", "--arch", &arch, "-H", "1792", "--algo", "dense-persistent"]);
    assert!(out.contains("feasible") && !out.contains("infeasible"), "got: {out}");

    // Without --algo the table covers every algorithm.
    let report = json(&ok(d, &["feasibility", "--arch", &arch, "-H", "1152", "-d", "0.10", "--json"]));
    let verdicts = report["verdicts"].as_array().unwrap();
    assert_eq!(verdicts.len(), 4);
    assert!(verdicts.iter().all(|v| v["feasible"].as_bool().unwrap()));

    // Missing profile files are format errors.
    fails(d, &["feasibility", "--arch", "nope.json", "-H", "64"], 2);
}

#[test]
fn state_files_land_next_to_their_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--rows", "32", "--cols", "32", "--seed", "2", "--out", "m.dnsm"]);
    ok(d, &["prune", "--in", "m.dnsm", "-d", "0.2", "--out", "l.sprn"]);
    ok(d, &["run", "--in", "l.sprn", "--seed", "4", "-T", "2", "--out", "out/state.json"]);
    // Outputs in a subdirectory get their manifest in the same place.
    assert!(PathBuf::from(d.join("out/state.json")).exists());
    assert!(PathBuf::from(d.join("out/state.json.manifest.json")).exists());
}
