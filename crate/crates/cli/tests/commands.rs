use std::fs;
use std::path::Path;
use std::process::Command as Process;

use c2r_cli::commands::{cmd_profile, cmd_route, cmd_simulate, cmd_sweep_t, cmd_table3};
use c2r_cli::{Cli, Command, RunConfig};
use c2r_core::{CollaborationMatrix, Error, FractionSource, PlacementMap, RoutingDecision};
use clap::Parser;

fn config(out: &Path, extra: &[&str]) -> RunConfig {
    let mut argv = vec!["c2r", "simulate", "--out", out.to_str().unwrap()];
    argv.extend_from_slice(extra);
    let cli = Cli::parse_from(argv);
    RunConfig::from_args(cli.command.args()).unwrap()
}

const CLUSTERED: [&str; 4] = ["--cluster-strength", "10", "--noise", "0.1"];

fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn cfg_of(out: &Path, args: &[String]) -> RunConfig {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    config(out, &refs)
}

fn c2r_bin(args: &[&str]) -> (i32, String, String) {
    let out = Process::new(env!("CARGO_BIN_EXE_c2r")).args(args).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8(out.stdout).unwrap(),
        String::from_utf8(out.stderr).unwrap(),
    )
}

#[test]
fn uniform_profile_reaches_max_degree() {
    let dir = tempfile::tempdir().unwrap();
    let out = cmd_profile(&config(dir.path(), &["--tokens", "100000"])).unwrap();
    let d = out.layers[0].1.layer_degree.unwrap();
    assert!((d - 7f64.ln()).abs() < 0.05, "{d}");
    assert!(dir.path().join("heatmap_layer0.csv").exists());
    for ext in ["csv", "txt", "json"] {
        assert!(dir.path().join(format!("profile.{ext}")).exists());
        assert!(dir.path().join(format!("profile_experts.{ext}")).exists());
    }
}

#[test]
fn clustered_profile_is_far_below_max_degree() {
    let dir = tempfile::tempdir().unwrap();
    let out = cmd_profile(&cfg_of(dir.path(), &with(&CLUSTERED, &[]))).unwrap();
    assert!(out.layers[0].1.layer_degree.unwrap() < 7f64.ln() - 0.5);
}

#[test]
fn zero_tokens_is_an_empty_workload() {
    let dir = tempfile::tempdir().unwrap();
    let argv = ["c2r", "profile", "--tokens", "0", "--out", dir.path().to_str().unwrap()];
    let err = RunConfig::from_args(Cli::parse_from(argv).command.args()).unwrap_err();
    assert!(matches!(&err, Error::Config(m) if m.contains("empty workload")));
    let (code, _, stderr) = c2r_bin(&argv[1..]);
    assert_eq!(code, 2);
    assert!(stderr.contains("empty workload"));
}

#[test]
fn full_table_route_equals_topk_trace() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    cmd_route(&config(a.path(), &["--layers", "2", "--tokens", "3000"])).unwrap();
    cmd_route(&config(b.path(), &["--layers", "2", "--tokens", "3000", "--strategy", "c2r", "--top-t", "7"])).unwrap();
    let ta = fs::read(a.path().join("decisions.tsv")).unwrap();
    assert!(!ta.is_empty());
    assert_eq!(ta, fs::read(b.path().join("decisions.tsv")).unwrap());
}

#[test]
fn random_c2r_tables_are_seeded() {
    let run = |seed: &str| {
        let dir = tempfile::tempdir().unwrap();
        let out = cmd_route(&config(
            dir.path(),
            &["--strategy", "random-c2r", "--top-t", "3", "--seed", seed, "--tokens", "100"],
        ))
        .unwrap();
        out.layers[0].table.clone().unwrap()
    };
    let table = run("9");
    assert_eq!(table, run("9"));
    assert_ne!(table, run("10"));
    for (e, row) in table.rows().iter().enumerate() {
        assert_eq!(row.len(), 3);
        assert!(!row.contains(&e));
    }
}

#[test]
fn c2r_keeps_the_topk_primary() {
    let dir = tempfile::tempdir().unwrap();
    let base = ["--tokens", "5000", "--cluster-strength", "1", "--top-k", "3"];
    let topk = cmd_route(&config(dir.path(), &base)).unwrap();
    let c2r = cmd_route(&cfg_of(dir.path(), &with(&base, &["--strategy", "c2r", "--top-t", "2"]))).unwrap();
    let table = c2r.layers[0].table.as_ref().unwrap();
    for (a, b) in topk.layers[0].decisions.iter().zip(&c2r.layers[0].decisions) {
        assert_eq!(a.primary(), b.primary());
        // T = K - 1: the whole set follows from the primary expert
        let mut want: Vec<usize> = std::iter::once(b.primary()).chain(table.row(b.primary()).iter().copied()).collect();
        let mut got: Vec<usize> = b.experts().collect();
        want.sort();
        got.sort();
        assert_eq!(got, want);
    }
}

#[test]
fn too_few_collaborators_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let argv = ["route", "--top-k", "4", "--strategy", "c2r", "--top-t", "2", "--out", dir.path().to_str().unwrap()];
    let (code, _, stderr) = c2r_bin(&argv);
    assert_eq!(code, 2);
    assert!(stderr.contains("K - 1"));
}

#[test]
fn table3_matches_reported_speedups() {
    let dir = tempfile::tempdir().unwrap();
    let out = cmd_table3(&config(dir.path(), &[])).unwrap();
    let col = out.report.column("abs_diff_pp").unwrap();
    assert_eq!(out.report.rows.len(), 5);
    for row in &out.report.rows {
        match row[col] {
            c2r_cli::report::Cell::Float(v) => assert!(v <= 0.15, "{v}"),
            ref other => panic!("{other:?}"),
        }
    }
}

#[test]
fn single_device_redundancy_is_k_minus_one_over_k() {
    let dir = tempfile::tempdir().unwrap();
    for k in ["2", "3", "4"] {
        let out = cmd_simulate(&config(dir.path(), &["--ep", "1", "--top-k", k, "--tokens", "2000"])).unwrap();
        let k: f64 = k.parse().unwrap();
        assert!((out.summary[0].redundancy - (k - 1.0) / k).abs() < 1e-15);
        assert_eq!(out.summary[0].speedup, None);
    }
}

#[test]
fn c2r_with_greedy_beats_topk_with_identity() {
    let dir = tempfile::tempdir().unwrap();
    let c2r = cmd_simulate(&cfg_of(
        dir.path(),
        &with(&CLUSTERED, &["--ep", "4", "--strategy", "c2r", "--top-t", "1"]),
    ))
    .unwrap();
    let topk = cmd_simulate(&cfg_of(dir.path(), &with(&CLUSTERED, &["--ep", "4", "--placement", "identity"]))).unwrap();
    assert!(c2r.summary[0].redundancy > topk.summary[0].redundancy);
}

#[test]
fn simulate_reports_agree_across_formats() {
    let dir = tempfile::tempdir().unwrap();
    let out = cmd_simulate(&config(dir.path(), &["--layers", "2", "--tokens", "1000"])).unwrap();
    let csv = fs::read_to_string(dir.path().join("simulate.csv")).unwrap();
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("simulate.json")).unwrap()).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|&c| c == "redundancy").unwrap();
    for (i, line) in csv.lines().skip(1).enumerate() {
        let v: f64 = line.split(',').nth(col).unwrap().parse().unwrap();
        assert_eq!(v, out.summary[i].redundancy);
        assert_eq!(json[i]["redundancy"].as_f64().unwrap(), v);
    }
    let text = fs::read_to_string(dir.path().join("simulate.txt")).unwrap();
    assert_eq!(text, out.report.to_text());
    for l in 0..2 {
        for ep in [2, 4] {
            let p = PlacementMap::load(&dir.path().join(format!("placement_layer{l}_ep{ep}.csv"))).unwrap();
            assert_eq!(p, out.per_layer[l][ep / 2 - 1].placement);
        }
    }
}

#[test]
fn sweep_t_orders_degrees_and_degenerates_at_full_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = cmd_sweep_t(&config(dir.path(), &["--cluster-strength", "2", "--layers", "2", "--tokens", "5000"])).unwrap();
    let rows = &out.rows;
    assert_eq!(rows[0].t, None);
    assert_eq!(rows.iter().skip(1).map(|r| r.t.unwrap()).collect::<Vec<_>>(), (1..8).collect::<Vec<_>>());
    for w in rows[1..].windows(2) {
        assert!(w[0].mean_degree.unwrap() <= w[1].mean_degree.unwrap());
    }
    let last = rows.last().unwrap();
    assert_eq!(last.layer_degrees, rows[0].layer_degrees);
    assert_eq!(last.redundancy, rows[0].redundancy);
    // the T = K - 1 row has the smallest routing space
    assert_eq!(rows[1].mean_degree, Some(0.0));
}

#[test]
fn routed_trace_feeds_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let routed = cmd_route(&config(dir.path(), &["--tokens", "2000", "--layers", "2"])).unwrap();
    let trace = dir.path().join("decisions.tsv");
    let sim_dir = dir.path().join("sim");
    let from_trace = cmd_simulate(&config(&sim_dir, &["--trace", trace.to_str().unwrap()])).unwrap();
    let direct = cmd_simulate(&config(&sim_dir, &["--tokens", "2000", "--layers", "2"])).unwrap();
    assert_eq!(from_trace.summary, direct.summary);
    let decisions: Vec<RoutingDecision> = routed.layers[1].decisions.clone();
    let mut m = CollaborationMatrix::new(8, 1);
    m.accumulate_all(&decisions).unwrap();
    assert_eq!(m.upper_triangle_sum(), 2000);

    // routed layers cannot be re-routed with c2r
    let (code, _, stderr) = c2r_bin(&[
        "simulate", "--trace", trace.to_str().unwrap(), "--strategy", "c2r", "--top-t", "2",
        "--out", sim_dir.to_str().unwrap(),
    ]);
    assert_eq!(code, 2, "{stderr}");
}

#[test]
fn trace_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let write = |name: &str, body: &str| {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        p.to_str().unwrap().to_string()
    };
    let malformed = write("bad.tsv", "0\t1,2,3,4,5,6,7,8\nzero\t1,2\n");
    let (code, _, stderr) = c2r_bin(&["profile", "--trace", &malformed, "--out", out]);
    assert_eq!(code, 2);
    assert!(stderr.contains("line 2"), "{stderr}");

    let narrow = write("narrow.tsv", "0\t1,2,3\n");
    assert_eq!(c2r_bin(&["profile", "--trace", &narrow, "--out", out]).0, 2);

    let mixed = write("mixed.tsv", "0\t1,2,3,4,5,6,7,8\n0\t@1:0.5,2:0.5\n");
    let (code, _, stderr) = c2r_bin(&["profile", "--trace", &mixed, "--out", out]);
    assert_eq!(code, 2);
    assert!(stderr.contains("mixes"));

    assert_eq!(c2r_bin(&["profile", "--trace", "/no/such/trace.tsv", "--out", out]).0, 3);
    assert_eq!(c2r_bin(&["profile", "--bogus-flag"]).0, 2);
    let (code, stdout, _) = c2r_bin(&["table3", "--out", out]);
    assert_eq!(code, 0);
    assert!(stdout.starts_with("ep"));
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    let (code, _, _) = c2r_bin(&["table3", "--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(code, 3);
}

#[test]
fn placement_file_and_measured_fractions() {
    let dir = tempfile::tempdir().unwrap();
    let placement = dir.path().join("placement.csv");
    fs::write(&placement, "expert_id,device_id\n0,0\n1,1\n2,0\n3,1\n4,0\n5,1\n6,0\n7,1\n").unwrap();
    let fractions = dir.path().join("fractions.csv");
    fs::write(&fractions, "ep,fraction\n2,0.5\n").unwrap();
    let cfg = config(
        dir.path(),
        &[
            "--placement", placement.to_str().unwrap(),
            "--comm-fractions", fractions.to_str().unwrap(),
            "--tokens", "1000",
        ],
    );
    assert_eq!(cfg.eps, vec![2]);
    assert_eq!(cfg.fractions.source(), &FractionSource::MeasuredExternal);
    let out = cmd_simulate(&cfg).unwrap();
    assert_eq!(out.per_layer[0][0].placement.assignment(), &[0, 1, 0, 1, 0, 1, 0, 1]);
    assert_eq!(out.summary[0].speedup, Some(out.summary[0].redundancy * 0.5));
    let csv = fs::read_to_string(dir.path().join("simulate.csv")).unwrap();
    assert!(csv.contains("measured-external"));
}

#[test]
fn subcommands_parse() {
    for sub in ["profile", "route", "simulate", "sweep-t", "table3"] {
        let cli = Cli::parse_from(["c2r", sub]);
        let expected = matches!(
            (&cli.command, sub),
            (Command::Profile(_), "profile")
                | (Command::Route(_), "route")
                | (Command::Simulate(_), "simulate")
                | (Command::SweepT(_), "sweep-t")
                | (Command::Table3(_), "table3")
        );
        assert!(expected, "{sub}");
    }
}
