use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedsim_core::graph::{adjusted_homophily, Graph};
use fedsim_core::partition::PartitionPlan;
use serde_json::Value;
use tempfile::TempDir;

fn fedsim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedsim"))
        .args(args)
        .current_dir(dir)
        .env("FEDSIM_LOG", "quiet")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const GEN_CONFIG: &str =
    "[csbm]\nn = 100\nc = 2\nd = 4\np_in = 0.9\np_out = 0.05\nmu = 1.0\nsigma_f = 1.0\nseed = 5\n";

fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("gen.toml"), GEN_CONFIG).unwrap();
    dir
}

fn generate(dir: &Path, out: &str) -> PathBuf {
    let res = fedsim(dir, &["gen", "--config", "gen.toml", "--out", out]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    dir.join(out).join("graph.json")
}

fn train_config(mode: &str, rounds: usize) -> String {
    let client = |seed: u64, p_in: f64, p_out: f64| {
        format!(
            "[[data.clients]]\nn = 80\nc = 2\nd = 4\np_in = {p_in}\np_out = {p_out}\nmu = 1.0\nsigma_f = 1.0\nseed = {seed}\n"
        )
    };
    format!(
        "[federation]\nclients = 3\nrounds = {rounds}\nmode = \"{mode}\"\ngamma = 0.01\n\n[data]\n\n{}{}{}",
        client(1, 0.12, 0.02),
        client(2, 0.03, 0.1),
        client(3, 0.1, 0.03)
    )
}

#[test]
fn gen_is_byte_identical_and_homophilic() {
    let dir = workspace();
    let a = std::fs::read(generate(dir.path(), "a")).unwrap();
    let b = std::fs::read(generate(dir.path(), "b")).unwrap();
    assert_eq!(a, b);
    let g = Graph::from_json(std::str::from_utf8(&a).unwrap()).unwrap();
    assert!(adjusted_homophily(&g).unwrap() > 0.5);

    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 1);
}

#[test]
fn gen_rejects_invalid_probability() {
    let dir = workspace();
    let res = fedsim(
        dir.path(),
        &[
            "gen",
            "--config",
            "gen.toml",
            "--csbm.p_in=1.5",
            "--out",
            "x",
        ],
    );
    assert_eq!(code(&res), 1);
    assert!(stderr(&res).contains("p_in"));
}

#[test]
fn seed_flag_and_overrides_reach_the_generator() {
    let dir = workspace();
    let res = fedsim(
        dir.path(),
        &[
            "gen",
            "--config",
            "gen.toml",
            "--seed",
            "9",
            "--csbm.n=50",
            "--out",
            "s",
        ],
    );
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let g = Graph::load(dir.path().join("s/graph.json")).unwrap();
    assert_eq!(g.num_nodes(), 50);
    let base = std::fs::read(generate(dir.path(), "base")).unwrap();
    assert_ne!(
        std::fs::read(dir.path().join("s/graph.json")).unwrap(),
        base
    );
}

#[test]
fn partition_modes_and_usage_errors() {
    let dir = workspace();
    generate(dir.path(), "g");
    let res = fedsim(
        dir.path(),
        &[
            "partition",
            "--graph",
            "g/graph.json",
            "--clients",
            "4",
            "--out",
            "p",
        ],
    );
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let g = Graph::load(dir.path().join("g/graph.json")).unwrap();
    let plan = PartitionPlan::load(dir.path().join("p/partition.json"), &g).unwrap();
    assert_eq!(plan.sets.len(), 4);
    assert_eq!(plan.sets.iter().map(Vec::len).sum::<usize>(), 100);

    let res = fedsim(
        dir.path(),
        &[
            "partition",
            "--graph",
            "g/graph.json",
            "--mode",
            "overlapping",
            "--clients",
            "10",
            "--out",
            "o",
        ],
    );
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let plan = PartitionPlan::load(dir.path().join("o/partition.json"), &g).unwrap();
    assert_eq!(plan.sets.len(), 10);

    let res = fedsim(
        dir.path(),
        &[
            "partition",
            "--graph",
            "g/graph.json",
            "--clients",
            "0",
            "--out",
            "z",
        ],
    );
    assert_eq!(code(&res), 1);
    let res = fedsim(
        dir.path(),
        &[
            "partition",
            "--graph",
            "missing.json",
            "--clients",
            "2",
            "--out",
            "z",
        ],
    );
    assert_eq!(code(&res), 2);
}

#[test]
fn train_is_reproducible_across_thread_caps() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("t.toml"), train_config("fedgsp", 4)).unwrap();
    for (out, threads) in [("r1", "1"), ("r2", "1"), ("r3", "4")] {
        let res = fedsim(
            dir.path(),
            &[
                "train",
                "--config",
                "t.toml",
                "--out",
                out,
                "--threads",
                threads,
            ],
        );
        assert_eq!(code(&res), 0, "{}", stderr(&res));
    }
    for file in ["rounds.jsonl", "report.json", "models.json"] {
        let a = std::fs::read(dir.path().join("r1").join(file)).unwrap();
        for other in ["r2", "r3"] {
            assert_eq!(
                a,
                std::fs::read(dir.path().join(other).join(file)).unwrap(),
                "{other}/{file}"
            );
        }
    }
    let rounds = std::fs::read_to_string(dir.path().join("r1/rounds.jsonl")).unwrap();
    assert_eq!(rounds.lines().count(), 4);
}

#[test]
fn aggregation_only_changes_later_rounds() {
    let dir = tempfile::tempdir().unwrap();
    for mode in ["none", "fedgsp"] {
        std::fs::write(
            dir.path().join(format!("{mode}.toml")),
            train_config(mode, 5),
        )
        .unwrap();
        let res = fedsim(
            dir.path(),
            &["train", "--config", &format!("{mode}.toml"), "--out", mode],
        );
        assert_eq!(code(&res), 0, "{}", stderr(&res));
    }
    let read = |mode: &str| -> Vec<Value> {
        std::fs::read_to_string(dir.path().join(mode).join("rounds.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    };
    let none = read("none");
    let fed = read("fedgsp");
    assert_eq!(none[0]["clients"], fed[0]["clients"]);
    assert!((1..5).any(|r| none[r]["clients"] != fed[r]["clients"]));
}

#[test]
fn dumps_are_written_on_request() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("t.toml"), train_config("fedgsp", 3)).unwrap();
    let res = fedsim(
        dir.path(),
        &[
            "train",
            "--config",
            "t.toml",
            "--out",
            "r",
            "--dump-bases",
            "--dump-collab",
        ],
    );
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let bases: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("r/bases.json")).unwrap())
            .unwrap();
    assert_eq!(bases.as_array().unwrap().len(), 3);
    let collab = std::fs::read_to_string(dir.path().join("r/collab.jsonl")).unwrap();
    assert_eq!(collab.lines().count(), 2);
    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("r/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 5);
}

#[test]
fn missing_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let text = train_config("none", 2).replace("rounds = 2\n", "");
    std::fs::write(dir.path().join("t.toml"), text).unwrap();
    let res = fedsim(dir.path(), &["train", "--config", "t.toml", "--out", "r"]);
    assert_eq!(code(&res), 1);
    assert!(stderr(&res).contains("rounds"), "{}", stderr(&res));
}

#[test]
fn analyze_homophily_on_the_four_cycle() {
    let dir = tempfile::tempdir().unwrap();
    let graph = r#"{"num_nodes":4,"num_classes":2,"edges":[[0,1],[1,2],[2,3],[3,0]],"features":[[1.0],[1.0],[1.0],[1.0]],"labels":[0,0,1,1],"masks":{"train":[0,1,2,3],"val":[],"test":[]}}"#;
    std::fs::write(dir.path().join("c4.json"), graph).unwrap();
    let res = fedsim(dir.path(), &["analyze", "homophily", "--graph", "c4.json"]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let report: Value = serde_json::from_slice(&res.stdout).unwrap();
    assert!(report["adjusted"].as_f64().unwrap().abs() < 1e-12);
    assert_eq!(report["edge"], 0.5);
}

#[test]
fn analyze_ratios_on_identical_clients() {
    let dir = tempfile::tempdir().unwrap();
    let client = "[[data.clients]]\nn = 60\nc = 2\nd = 4\np_in = 0.1\np_out = 0.02\nmu = 1.0\nsigma_f = 1.0\nseed = 4\n";
    std::fs::write(
        dir.path().join("t.toml"),
        format!("[data]\n{client}{client}{client}"),
    )
    .unwrap();
    let res = fedsim(
        dir.path(),
        &["analyze", "ratios", "--config", "t.toml", "--out", "a"],
    );
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a/ratios.json")).unwrap())
            .unwrap();
    assert_eq!(report["r_c"], 0.0);
    assert_eq!(report["r_s"], 1.0);
}

#[test]
fn analyze_profile_and_heterogeneity_after_training() {
    let dir = workspace();
    generate(dir.path(), "g");
    let res = fedsim(
        dir.path(),
        &[
            "partition",
            "--graph",
            "g/graph.json",
            "--clients",
            "2",
            "--out",
            "p",
            "--write-clients",
        ],
    );
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let config = "[federation]\nclients = 2\nrounds = 3\nmode = \"uniform\"\n\n[data]\ngraph = \"g/graph.json\"\npartition = \"p/partition.json\"\n";
    std::fs::write(dir.path().join("t.toml"), config).unwrap();
    let res = fedsim(dir.path(), &["train", "--config", "t.toml", "--out", "r"]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));

    let res = fedsim(
        dir.path(),
        &[
            "analyze",
            "profile",
            "--graph",
            "p/client_1.json",
            "--models",
            "r/models.json",
            "--client",
            "1",
        ],
    );
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let csv = String::from_utf8(res.stdout).unwrap();
    assert!(csv.starts_with("lambda,magnitude\n"));
    let total: f64 = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((total - 1.0).abs() < 1e-9);

    let res = fedsim(
        dir.path(),
        &["analyze", "heterogeneity", "--models", "r/models.json"],
    );
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let report: Value = serde_json::from_slice(&res.stdout).unwrap();
    let f = report["frequency_component"].as_f64().unwrap();
    let h = report["heterogeneity"].as_f64().unwrap();
    assert!((4.0 * f - h).abs() <= 1e-9 * (1.0 + h));
}

#[test]
fn profile_on_empty_graph_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let empty = r#"{"num_nodes":0,"num_classes":2,"edges":[],"features":[],"labels":[],"masks":{"train":[],"val":[],"test":[]}}"#;
    std::fs::write(dir.path().join("e.json"), empty).unwrap();
    std::fs::write(
        dir.path().join("m.json"),
        r#"[{"coeffs":[1.0],"w_mlp":[0.1,0.2],"tau":0.5,"K":0}]"#,
    )
    .unwrap();
    let res = fedsim(
        dir.path(),
        &[
            "analyze", "profile", "--graph", "e.json", "--models", "m.json",
        ],
    );
    assert_eq!(code(&res), 2);
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&fedsim(dir.path(), &["bogus"])), 1);
    assert_eq!(
        code(&fedsim(
            dir.path(),
            &["train", "--config", "nope.toml", "--out", "r"]
        )),
        1
    );
    assert_eq!(
        code(&fedsim(
            dir.path(),
            &["--threads", "0", "analyze", "homophily", "--graph", "x"]
        )),
        1
    );
    assert_eq!(code(&fedsim(dir.path(), &["--help"])), 0);
}
