// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(rel)
}

/// Runs the binary against the synthetic test model with `out` as output
/// directory.
fn svtrace(out: &Path, extra: &[&str]) -> Output {
    svtrace_with(&data("fixtures/tiny_gpt2.safetensors"), out, extra)
}

fn svtrace_with(weights: &Path, out: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svtrace"))
        .env_remove("SVT_WEIGHTS")
        .arg("--weights")
        .arg(weights)
        .arg("--vocab")
        .arg(data("vocab.json"))
        .arg("--merges")
        .arg(data("merges.txt"))
        .arg("--out")
        .arg(out)
        .args(["--fold-ids", "--start-heads", "2.0,2.1", "--workers", "2"])
        .args(extra)
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn json(p: PathBuf) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn trace_writes_graphs_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        ok(&svtrace(d.path(), &["--n-prompts", "3", "trace"]));
    }
    for f in [
        "graph.json",
        "graph.dot",
        "skeleton.json",
        "skeleton.dot",
        "summary.json",
        "traces.jsonl",
        "prompts.jsonl",
        "manifest.json",
    ] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        assert_eq!(x, std::fs::read(b.path().join(f)).unwrap(), "{f} differs between runs");
    }
    let s = json(a.path().join("summary.json"));
    assert_eq!(s["n_prompts"], 3);
    // 65 * 3 / 256 and 170 * 3 / 256, rounded up
    assert_eq!(s["edge_min"], 1);
    assert_eq!(s["skeleton_min"], 2);
    let m = json(a.path().join("manifest.json"));
    assert_eq!(m["command"], "trace");
    assert_eq!(m["weights_digest"].as_str().unwrap().len(), 64);
    assert!(std::fs::read_to_string(a.path().join("graph.dot"))
        .unwrap()
        .starts_with("digraph"));
}

#[test]
fn single_prompt_trace() {
    let d = tempfile::tempdir().unwrap();
    let o = svtrace(d.path(), &["--n-prompts", "1", "trace"]);
    ok(&o);
    let s = json(d.path().join("summary.json"));
    assert_eq!((s["edge_min"].as_u64(), s["skeleton_min"].as_u64()), (Some(1), Some(1)));
}

#[test]
fn out_of_range_start_head_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let o = svtrace(d.path(), &["--n-prompts", "1", "--start-heads", "12.0", "trace"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("out of range"));
}

#[test]
fn missing_weights_and_bad_flags_are_usage_errors() {
    let d = tempfile::tempdir().unwrap();
    let o = svtrace_with(Path::new("/nonexistent/model.safetensors"), d.path(), &["trace"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--weights"));
    let o = svtrace(d.path(), &["--firing-threshold", "1.5", "trace"]);
    assert_eq!(o.status.code(), Some(2));
    let o = svtrace(d.path(), &["--no-such-flag", "trace"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn corrupt_weights_are_a_data_error() {
    let d = tempfile::tempdir().unwrap();
    let bad = d.path().join("bad.safetensors");
    std::fs::write(&bad, b"not a safetensors file").unwrap();
    let o = svtrace_with(&bad, d.path(), &["trace"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn sparsity_on_empty_and_generic_text() {
    let d = tempfile::tempdir().unwrap();
    let empty = d.path().join("empty.txt");
    std::fs::write(&empty, "").unwrap();
    ok(&svtrace(d.path(), &["sparsity", "--input", empty.to_str().unwrap()]));
    assert_eq!(
        std::fs::read_to_string(d.path().join("sparsity.csv")).unwrap(),
        "size,count\n"
    );
    assert_eq!(json(d.path().join("sparsity.json"))["firings"], 0);

    let text = d.path().join("text.txt");
    std::fs::write(
        &text,
        "The quick brown fox jumps over the lazy dog.\n\nA second line of text.\n",
    )
    .unwrap();
    ok(&svtrace(d.path(), &["sparsity", "--input", text.to_str().unwrap()]));
    let s = json(d.path().join("sparsity.json"));
    assert!(s["firings"].as_u64().unwrap() > 0);
    assert_eq!(json(d.path().join("manifest.json"))["n_prompts"], 2);

    ok(&svtrace(d.path(), &["--n-prompts", "2", "sparsity"]));
    assert!(json(d.path().join("sparsity.json"))["firings"].as_u64().unwrap() > 0);
}

fn top_selector(dir: &Path) -> String {
    let g = json(dir.join("graph.json"));
    let e = &g["edges"][0];
    let head = |v: &serde_json::Value| format!("{}.{}", v["layer"], v["head"]);
    format!(
        "{}-{}:{}:{}:{}",
        head(&e["upstream"]),
        head(&e["downstream"]),
        e["side"].as_str().unwrap(),
        e["dest_role"].as_str().unwrap(),
        e["src_role"].as_str().unwrap()
    )
}

#[test]
fn intervene_selectors_and_random_basis_determinism() {
    let t = tempfile::tempdir().unwrap();
    ok(&svtrace(t.path(), &["--n-prompts", "3", "trace"]));
    let sel = top_selector(t.path());
    let trace_dir = t.path().to_str().unwrap();

    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = svtrace(
            d.path(),
            &[
                "--n-prompts",
                "3",
                "intervene",
                "--trace-dir",
                trace_dir,
                "--edge",
                &sel,
                "--basis",
                "random",
                "--random-seed",
                "1",
            ],
        );
        ok(&o);
    }
    let csv = std::fs::read_to_string(a.path().join("interventions.csv")).unwrap();
    assert_eq!(
        csv,
        std::fs::read_to_string(b.path().join("interventions.csv")).unwrap()
    );
    assert!(csv.lines().count() >= 2);
    assert!(csv.starts_with("prompt,upstream,downstream"));
    let s = json(a.path().join("interventions.json"));
    assert_eq!(s["basis"], "random:1");
    assert!(s["summary"]["n"].as_u64().unwrap() >= 1);

    // signal basis, local site, joint intervention through the top selector form
    let c = tempfile::tempdir().unwrap();
    let g = json(t.path().join("graph.json"));
    let down = &g["edges"][0]["downstream"];
    let top = format!(
        "top:{}.{}:{}",
        down["layer"],
        down["head"],
        written_role(&g["edges"][0])
    );
    ok(&svtrace(
        c.path(),
        &[
            "--n-prompts",
            "3",
            "intervene",
            "--trace-dir",
            trace_dir,
            "--edge",
            &sel,
            "--edge",
            &top,
            "--site",
            "local",
            "--direction",
            "boost",
        ],
    ));
    let s = json(c.path().join("interventions.json"));
    assert_eq!(s["site"], "local");
    assert_eq!(s["direction"], "boost");
}

fn written_role(e: &serde_json::Value) -> String {
    let key = if e["side"] == "dest" { "dest_role" } else { "src_role" };
    e[key].as_str().unwrap().to_string()
}

#[test]
fn unknown_edge_lists_nearest_matches() {
    let t = tempfile::tempdir().unwrap();
    ok(&svtrace(t.path(), &["--n-prompts", "2", "trace"]));
    let o = svtrace(
        t.path(),
        &["--n-prompts", "2", "intervene", "--edge", "0.0-0.1:dest:end:io"],
    );
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("nearest edges"), "{err}");
    let o = svtrace(t.path(), &["intervene", "--edge", "garbage"]);
    assert_eq!(o.status.code(), Some(2));
    let empty = tempfile::tempdir().unwrap();
    let o = svtrace(empty.path(), &["intervene", "--edge", "top:2.0:end"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("svtrace trace"));
}

#[test]
fn heatmap_writes_both_modes() {
    let d = tempfile::tempdir().unwrap();
    let o = svtrace(
        d.path(),
        &["--n-prompts", "3", "heatmap", "--downstream", "2.0", "--role", "end"],
    );
    ok(&o);
    for mode in ["signal", "all_slices"] {
        let csv = std::fs::read_to_string(d.path().join(format!("heatmap_2_0_end_{mode}.csv"))).unwrap();
        // header plus one row per (layer, head) of the 3x4 model
        assert_eq!(csv.lines().count(), 13);
    }
    let s = json(d.path().join("heatmap_2_0_end.json"));
    assert!(s["signal"]["entropy"].is_number() && s["all_slices"]["entropy"].is_number());
    let o = svtrace(d.path(), &["heatmap", "--downstream", "5.0"]);
    assert_eq!(o.status.code(), Some(2));
    let o = svtrace(d.path(), &["heatmap", "--downstream", "2.0", "--role", "nowhere"]);
    assert_eq!(o.status.code(), Some(2));
}
