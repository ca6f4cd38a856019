use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn shiftnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shiftnet"))
        .args(args)
        .env_remove("SHIFTNET_DATA")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = shiftnet(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

#[test]
fn count_reports_parameters() {
    let out = ok(&["count", "--arch", "shiftresnet56", "--expansion", "3"]);
    assert!(out.contains("params: 291802 (0.29M)"), "{out}");
    let csv = ok(&["count", "--arch", "resnet56", "--csv"]);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("model,params,macs,flops_2x"));
    assert!(lines.next().unwrap().starts_with("resnet56,853018,"));
}

#[test]
fn lone_shift_layer_costs_nothing() {
    let csv = ok(&["count", "--arch", "shift_layer", "--expansion", "1", "--csv"]);
    assert_eq!(csv, "model,params,macs,flops_2x\nshift_layer,0,0,0\n");
}

#[test]
fn per_layer_csv_has_stable_columns() {
    let csv = ok(&["count", "--arch", "shiftresnet20", "--expansion", "3", "--layers", "--csv"]);
    assert!(csv.starts_with("layer,kind,params,macs,ai_ratio\n"));
    assert!(csv.lines().any(|l| l.starts_with("g1.b0.shift,shift,0,0,")));
}

#[test]
fn reduced_baseline_counts() {
    let csv = ok(&["count", "--arch", "resnet110", "--reduce", "module", "--target-params", "203000", "--csv"]);
    assert!(csv.contains(",200014,"), "{csv}");
    let o = shiftnet(&["count", "--arch", "shiftresnet20", "--reduce", "net", "--target-params", "1000"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn table_lists_twelve_rows() {
    let csv = ok(&["table", "--csv"]);
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "model,expansion,params,flops_2x,param_rate,flop_rate");
    assert_eq!(lines.len(), 13);
}

#[test]
fn exit_codes() {
    assert_eq!(shiftnet(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(shiftnet(&["count"]).status.code(), Some(2));
    assert_eq!(shiftnet(&["count", "--arch", "x", "--bogus"]).status.code(), Some(2));
    let o = shiftnet(&["count", "--arch", "nonsense"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    assert!(o.stdout.is_empty());
    assert_eq!(shiftnet(&["--help"]).status.code(), Some(0));
    assert_eq!(shiftnet(&["eval", "--ckpt", "/nonexistent/ckpt.json", "--data", "synth"]).status.code(), Some(1));
    assert_eq!(shiftnet(&["train", "--arch", "resnet20", "--iters", "1", "--out", "/tmp/never.json"]).status.code(), Some(1));
}

#[test]
fn arch_dump_and_check_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&["arch", "dump", "--arch", "shiftnetb"]);
    assert!(text.contains("[[stage]]"));
    let file = dir.path().join("b.toml");
    fs::write(&file, &text).unwrap();
    let csv = ok(&["arch", "check", file.to_str().unwrap(), "--csv"]);
    assert_eq!(csv, "name,modules,params\nshiftnetb,17,1153464\n");
    let counted = ok(&["count", "--arch-file", file.to_str().unwrap(), "--csv"]);
    assert!(counted.contains("shiftnetb,1153464,"));
    fs::write(&file, text.replace("out_channels = 32", "out_channels = 33")).unwrap();
    assert_eq!(shiftnet(&["arch", "check", file.to_str().unwrap()]).status.code(), Some(1));
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_eval_analyze_on_synthetic_data() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.json");
    let log = dir.path().join("log.csv");
    let synth = ["--synth-size", "32", "--synth-side", "8", "--synth-classes", "4"];
    let mut args = vec![
        "train", "--arch", "shiftresnet20", "--expansion", "9", "--classes", "4", "--data", "synth", "--iters", "12",
        "--batch", "8", "--decay", "6", "--seed", "3", "--log-every", "4", "--csv", "--out", path(&ckpt),
        "--log-csv", path(&log),
    ];
    args.extend(synth);
    let out = ok(&args);
    assert!(out.starts_with("model,iters,loss,acc,checkpoint\nshiftresnet20-9,12,"), "{out}");
    let log = fs::read_to_string(&log).unwrap();
    assert!(log.starts_with("iter,lr,loss,acc\n0,0.1,"));
    assert_eq!(log.lines().count(), 1 + 4);

    let mut eval = vec!["eval", "--ckpt", path(&ckpt), "--data", "synth", "--csv"];
    eval.extend(synth);
    let first = ok(&eval);
    assert!(first.starts_with("model,iteration,split,examples,top1,loss\nshiftresnet20-9,12,"));
    assert_eq!(first, ok(&eval), "evaluation is deterministic");

    let corr = dir.path().join("corr.csv");
    let mut analyze = vec!["analyze", "--ckpt", path(&ckpt), "--data", "synth", "--module", "g1.b0", "--out", path(&corr)];
    analyze.extend(synth);
    let summary = ok(&analyze);
    assert!(summary.contains("groups: 9") && summary.contains("channels: 144"), "{summary}");
    let corr_text = fs::read_to_string(&corr).unwrap();
    assert!(corr_text.starts_with("group,row,col,value\n0,0,0,1\n"));
    assert_eq!(corr_text.lines().count(), 1 + 9 * 16 * 16);
    let contrib = fs::read_to_string(dir.path().join("corr.csv.contrib.csv")).unwrap();
    assert!(contrib.starts_with("channel,group,dy,dx,contribution\n"));
    assert_eq!(contrib.lines().count(), 145);

    let mut bad = vec!["analyze", "--ckpt", path(&ckpt), "--data", "synth", "--module", "g9.b9", "--out", path(&corr)];
    bad.extend(synth);
    assert_eq!(shiftnet(&bad).status.code(), Some(1));
}

#[test]
fn data_directory_defaults_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("e.json");
    let o = Command::new(env!("CARGO_BIN_EXE_shiftnet"))
        .args([
            "train", "--arch", "shiftresnet20", "--classes", "4", "--iters", "2", "--batch", "4", "--synth-size", "8",
            "--synth-side", "8", "--synth-classes", "4", "--out", path(&ckpt),
        ])
        .env("SHIFTNET_DATA", "synth")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(ckpt.exists());
}

#[test]
fn bench_runs_a_suite_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("suite.toml");
    fs::write(
        &cfg,
        "seed = 1\nmin_sample_ns = 1\n[[case]]\nm = 8\nn = 8\nd_f = 8\nd_k = 3\nrepetitions = 3\nwarmup = 0\nvariants = [\"fused\", \"unfused\"]\n",
    )
    .unwrap();
    let out_file = dir.path().join("bench.csv");
    let csv = ok(&["bench", "--config", path(&cfg), "--out", path(&out_file)]);
    let lines: Vec<_> = csv.lines().collect();
    assert!(lines[0].starts_with("kind,dims,variant,median_ns,model_bytes,model_flops"));
    assert_eq!(lines.len(), 3);
    assert!(lines[1].contains(",fused,") && lines[2].contains(",unfused,"));
    assert_eq!(fs::read_to_string(&out_file).unwrap(), csv);
    fs::write(&cfg, "[[case]]\nm = 8\n").unwrap();
    assert_eq!(shiftnet(&["bench", "--config", path(&cfg)]).status.code(), Some(1));
}
