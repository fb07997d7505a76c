mod common;

use std::fs;

use common::*;
use toprokit::policy::PruningPlan;
use toprokit::stats::{scale_profile, EntropyMap};
use toprokit::toy::GenerationTrace;

#[test]
fn missing_input_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["entropy", "--q", "missing.tprv", "--k", "k", "--v", "v", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "input not found");
}

#[test]
fn usage_errors_are_json_and_exit_2() {
    let out = run(&["bench", "--reps", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "invalid usage");
    let out = run(&["generate", "--out", "x", "--alpha-min", "0.9", "--alpha-max", "0.5"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "invalid usage");
    let out = run(&["bounds", "--preset", "nope"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"policy": {"taux": 1}}"#).unwrap();
    let out = run(&["--config", s(&cfg), "bounds", "--trials", "10"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "invalid input");
}

#[test]
fn naive_and_fae_summaries_agree() {
    let dir = tempfile::tempdir().unwrap();
    let [q, k, v] = write_qkv(dir.path(), 130, 16, 2, false);
    let mut stats = Vec::new();
    for engine in ["naive", "fae"] {
        let o = dir.path().join(engine);
        ok(&run(&["entropy", "--q", s(&q), "--k", s(&k), "--v", s(&v), "--out", s(&o), "--engine", engine]));
        let j = read_json(o.join("summary.json"));
        assert_eq!(j["bound_check"]["passed"], true);
        stats.push(j["entropy"].clone());
    }
    for key in ["min", "max", "mean"] {
        let (a, b) = (stats[0][key].as_f64().unwrap(), stats[1][key].as_f64().unwrap());
        assert!((a - b).abs() < 1e-4, "{key}: {a} vs {b}");
    }
}

#[test]
fn zero_queries_give_ln_n() {
    let dir = tempfile::tempdir().unwrap();
    let [q, k, v] = write_qkv(dir.path(), 77, 8, 1, true);
    let o = dir.path().join("o");
    ok(&run(&["entropy", "--q", s(&q), "--k", s(&k), "--v", s(&v), "--out", s(&o)]));
    let j = read_json(o.join("summary.json"));
    let mean = j["entropy"]["mean"].as_f64().unwrap();
    assert!((mean - 77f64.ln()).abs() < 1e-6);
    assert_eq!(j["config"]["engine"], "fae");
    let e = toprokit::tprv::vector_from_file(o.join("entropy.tprv")).unwrap();
    assert_eq!(e.len(), 77);
}

#[test]
fn naive_guard_refuses_large_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let [q, k, v] = write_qkv(dir.path(), 40, 4, 1, false);
    let o = dir.path().join("o");
    let args = ["entropy", "--q", s(&q), "--k", s(&k), "--v", s(&v), "--out", s(&o), "--engine", "naive"];
    let out = run(&[&args[..], &["--naive-guard", "32"]].concat());
    assert_eq!(out.status.code(), Some(2));
    ok(&run(&args));
}

#[test]
fn flash_engine_writes_no_entropy() {
    let dir = tempfile::tempdir().unwrap();
    let [q, k, v] = write_qkv(dir.path(), 20, 4, 1, false);
    let o = dir.path().join("o");
    ok(&run(&["entropy", "--q", s(&q), "--k", s(&k), "--v", s(&v), "--out", s(&o), "--engine", "flash"]));
    assert!(!o.join("entropy.tprv").exists());
    assert!(read_json(o.join("summary.json"))["entropy"].is_null());
}

#[test]
fn baseline_only_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&run(&["generate", "--baseline-only", "--out", s(&a)]));
    ok(&run(&["generate", "--baseline-only", "--out", s(&b)]));
    assert!(!a.join("compare.json").exists());
    assert_eq!(snapshot(&a.join("baseline")), snapshot(&b.join("baseline")));
}

#[test]
fn zero_alpha_max_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let policy = dir.path().join("policy.json");
    fs::write(&policy, r#"{"alpha_max": 0.0}"#).unwrap();
    let o = dir.path().join("o");
    ok(&run(&["generate", "--policy", s(&policy), "--out", s(&o)]));
    let j = read_json(o.join("compare.json"));
    assert_eq!(j["config"]["policy"]["alpha_min"], 0.0);
    let c = &j["comparison"];
    assert_eq!(c["token_reduction"], 0.0);
    for sc in c["scales"].as_array().unwrap() {
        assert_eq!(sc["ssim"], 1.0);
    }
}

#[test]
fn default_policy_reduces_and_reconciles() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("o");
    ok(&run(&["generate", "--out", s(&o)]));
    let j = read_json(o.join("compare.json"));
    assert!(j["comparison"]["token_reduction"].as_f64().unwrap() > 0.0);
    assert_eq!(j["tokens_reconcile"], true);

    let plan = PruningPlan::load(o.join("plan")).unwrap();
    let pruned = GenerationTrace::load(o.join("pruned")).unwrap();
    for (i, row) in pruned.tokens_processed.iter().enumerate() {
        for (l, &n) in row.iter().enumerate() {
            assert_eq!(n, plan.decision(i + 1, l).unwrap().kept());
        }
    }
    let csv = fs::read_to_string(o.join("compare.csv")).unwrap();
    assert!(csv.starts_with("scale,ssim,baseline_tokens,pruned_tokens\n"));
    assert!(read_json(o.join("timing.json"))["wall_time_ratio"].is_number());
}

#[test]
fn saved_plan_can_be_replayed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&run(&["generate", "--out", s(&a)]));
    ok(&run(&["generate", "--out", s(&b), "--plan", s(&a.join("plan"))]));
    assert_eq!(snapshot(&a.join("pruned")), snapshot(&b.join("pruned")));
    let out = run(&["generate", "--out", s(&b), "--plan", s(&a.join("plan")), "--layers", "3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"policy": {"tau": 0.3, "beta": 2.0}, "toy": {"prompt_seed": 7}}"#).unwrap();
    let o = dir.path().join("o");
    ok(&run(&["--config", s(&cfg), "generate", "--out", s(&o), "--tau", "0.5"]));
    let c = &read_json(o.join("compare.json"))["config"];
    assert_eq!(c["policy"]["tau"], 0.5);
    assert_eq!(c["policy"]["beta"], 2.0);
    assert_eq!(c["policy"]["alpha_max"], 0.9);
    assert_eq!(c["toy"]["prompt_seed"], 7);
}

#[test]
fn calibrate_single_map_matches_scale_stats() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().join("o");
    ok(&run(&["generate", "--baseline-only", "--out", s(&o)]));
    let report: serde_json::Value = serde_json::from_str(&ok(&run(&["calibrate", s(&o)]))).unwrap();
    let map = EntropyMap::load(o.join("baseline/entropy")).unwrap();
    let stats = scale_profile(&map, map.layers() - 1).unwrap();
    for (c, st) in report["scales"].as_array().unwrap().iter().zip(&stats) {
        assert_eq!(c["rho"][0].as_f64().unwrap(), st.low_entropy_ratio);
        assert_eq!(c["mean_entropy"][0].as_f64().unwrap(), st.mean_entropy);
    }

    let two: serde_json::Value = serde_json::from_str(&ok(&run(&["calibrate", s(&o), s(&o)]))).unwrap();
    assert!(two["scales"].as_array().unwrap().iter().all(|c| c["rho_spread"] == 0.0));
    assert_eq!(two["recommended"]["scale"], 2);

    let csv = ok(&run(&["calibrate", s(&o), "--format", "csv"]));
    assert!(csv.starts_with("scale,tokens,run,mean_entropy,rho\n"));
}

#[test]
fn bench_table_shape() {
    let csv = ok(&run(&["bench", "--n", "1,16", "--d", "4", "--blocks", "8x8,4x16", "--reps", "2"]));
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("engine,N,d,B_r,B_c,median_ms,reps"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    // Per N: one naive row and one row per block for each blocked engine.
    assert_eq!(rows.len(), 2 * 5);
    let n1: Vec<_> = rows.iter().filter(|r| r[1] == "1").collect();
    assert!(!n1.is_empty());
    assert!(n1.iter().all(|r| r[5].parse::<f64>().unwrap() > 0.0));
    assert!(rows.iter().filter(|r| r[0] == "naive").all(|r| r[3] == "0" && r[4] == "0"));
}

#[test]
fn bounds_presets() {
    let closed: serde_json::Value = serde_json::from_str(&ok(&run(&["bounds", "--preset", "closed"]))).unwrap();
    assert_eq!(closed["measured_total"], 0.0);
    assert_eq!(closed["bound_total"], 0.0);

    let default: serde_json::Value = serde_json::from_str(&ok(&run(&["bounds"]))).unwrap();
    assert_eq!(default["bound_satisfied"], true);
    assert_eq!(default["assumptions_satisfied"], true);
    assert!(default["layers"].as_array().unwrap().iter().all(|l| l["within_tolerance"] == true));
    assert_eq!(default["token"]["within_tolerance"], true);

    let corr: serde_json::Value = serde_json::from_str(&ok(&run(&["bounds", "--preset", "correlated"]))).unwrap();
    assert_eq!(corr["assumptions_satisfied"], false);
}

#[test]
fn bounds_scenario_file() {
    let dir = tempfile::tempdir().unwrap();
    let sc = dir.path().join("sc.json");
    fs::write(&sc, r#"{"name": "custom", "trials": 100, "seed": 4}"#).unwrap();
    let j: serde_json::Value = serde_json::from_str(&ok(&run(&["bounds", "--scenario", s(&sc)]))).unwrap();
    assert_eq!(j["scenario"]["name"], "custom");
    assert_eq!(j["scenario"]["trials"], 100);
    fs::write(&sc, r#"{"trails": 100}"#).unwrap();
    assert_eq!(run(&["bounds", "--scenario", s(&sc)]).status.code(), Some(2));
}

#[test]
fn threads_env_var_is_honored() {
    let a = bin().env("TOPROKIT_THREADS", "0").args(["bounds", "--trials", "10"]).output().unwrap();
    assert_eq!(a.status.code(), Some(2));
    let b = bin().env("TOPROKIT_THREADS", "2").args(["bounds", "--trials", "10"]).output().unwrap();
    assert!(b.status.success());
}

#[test]
fn every_subcommand_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let first = all_subcommands(&dir.path().join("one"), 1);
    let second = all_subcommands(&dir.path().join("two"), 1);
    let wide = all_subcommands(&dir.path().join("four"), 4);
    assert_eq!(first, second);
    assert_eq!(first, wide);
}
