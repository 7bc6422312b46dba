use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use logit_gfn::config::{ConfigError, RunConfig};
use logit_gfn::run::{self, CHECKPOINT_FILE, EVAL_FILE, METRICS_FILE, MODES_FILE};
use logit_gfn::{Checkpoint, CheckpointError, RunError, TrainerState};
use logit_gfn_core::{EvalPlan, MetricsRecord};
use tempfile::TempDir;

const GRID: &str = r#"
seed = 7

[env]
kind = "hypergrid"
ndim = 2
side = 3

[env.reward.oracle]
kind = "hypergrid"

[model]
policy_hidden = [16]
beta_hidden = 8
embed_dim = 4

[train.online]
rounds = 6
trajectories_per_round = 8
batch_size = 8
metrics_interval = 2
lr_policy = 1e-3

[schedule.train]
kind = "uniform"
a = 1.0
b = 3.0

[eval]
exact_betas = [1.0, 2.0]
betas = [1.0, 2.0]
samples = 64

[eval.modes]
kind = "threshold"
fraction = 0.2
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_logit-gfn"))
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn invoke(args: &[&str], config: &Path, out: &Path) -> Output {
    let mut cmd = bin();
    cmd.args(args).arg("--config").arg(config).arg("--out").arg(out);
    cmd.output().unwrap()
}

fn ok(output: &Output) {
    assert!(
        output.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        output.status.code(),
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

fn resolved(text: &str) -> logit_gfn::Resolved {
    RunConfig::from_toml_str(text, None).unwrap().resolve().unwrap()
}

fn with(text: &str, from: &str, to: &str) -> String {
    assert!(text.contains(from), "{from:?} not in config");
    text.replacen(from, to, 1)
}

fn invalid_key(text: &str) -> String {
    match RunConfig::from_toml_str(text, None).and_then(|c| c.resolve()) {
        Err(ConfigError::Invalid { key, .. }) => key,
        other => panic!("expected a validation error, got {other:?}"),
    }
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(str::to_owned).collect()).collect()
}

fn csv_header(path: &Path) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.headers().unwrap().iter().map(str::to_owned).collect()
}

#[test]
fn config_round_trips_through_toml() {
    for text in [GRID.to_owned(), with(GRID, "kind = \"threshold\"\nfraction = 0.2", "kind = \"predefined\"\nstates = [\"2,2\"]")] {
        let cfg = RunConfig::from_toml_str(&text, None).unwrap();
        let again = RunConfig::from_toml_str(&cfg.to_toml_string(), None).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.clone().resolve().unwrap().config, again.resolve().unwrap().config);
    }
}

#[test]
fn defaults_fill_missing_blocks() {
    let cfg = RunConfig::from_toml_str(
        "[env]\nkind = \"sequence\"\nalphabet = \"ACGT\"\nlength = 4\n[env.reward.oracle]\nkind = \"synthetic\"\nseed = 1\n",
        None,
    )
    .unwrap();
    assert_eq!(cfg.eval.samples, 2048);
    assert_eq!(cfg.eval.betas, vec![1.0, 5.0, 10.0, 50.0, 100.0, 500.0, 1000.0]);
    assert_eq!(cfg.train.online.metrics_interval, 100);
    assert_eq!(cfg.output_dir, PathBuf::from("out"));
    cfg.resolve().unwrap();
}

#[test]
fn validation_errors_name_the_key() {
    assert_eq!(invalid_key(&with(GRID, "ndim = 2\n", "")), "env.ndim");
    assert_eq!(invalid_key(&with(GRID, "ndim = 2\n", "ndim = 2\nlength = 3\n")), "env.length");
    assert_eq!(invalid_key(&with(GRID, "[model]\n", "[train]\nloss = \"subtb\"\nlambda = 0.9\n\n[model]\nstate_flow = false\n")), "train.loss");
    assert_eq!(invalid_key(&with(GRID, "a = 1.0\nb = 3.0", "a = 3.0\nb = 1.0")), "schedule.train");
    assert_eq!(invalid_key(&with(GRID, "samples = 64", "samples = 0")), "eval.samples");
    assert_eq!(invalid_key(&with(GRID, "fraction = 0.2", "fraction = 1.5")), "eval.modes");
    assert_eq!(invalid_key(&with(GRID, "kind = \"threshold\"\nfraction = 0.2", "kind = \"hamming\"")), "eval.modes.kind");
    assert_eq!(invalid_key(&with(GRID, "[env.reward.oracle]\nkind = \"hypergrid\"", "[env.reward.oracle]\nkind = \"synthetic\"\nseed = 3")), "env.reward.oracle.kind");
    assert_eq!(invalid_key(&with(GRID, "[train.online]\n", "[train]\nprotocol = \"offline\"\n[train.online]\n")), "train.dataset");
    assert!(matches!(RunConfig::from_toml_str(&with(GRID, "seed = 7", "seed = 7\ncolour = 1"), None), Err(ConfigError::Parse(_))));
}

#[test]
fn db_loss_without_state_flow_exits_2() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), &with(GRID, "[model]\n", "[train]\nloss = \"db\"\n\n[model]\n"));
    let output = invoke(&["train"], &config, &dir.path().join("out"));
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("train.loss") && stderr.contains("state-flow"), "{stderr}");
    assert!(!dir.path().join("out").join(METRICS_FILE).exists());
}

#[test]
fn missing_config_file_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let output = invoke(&["train"], &dir.path().join("absent.toml"), &dir.path().join("out"));
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn one_round_writes_one_record() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), &with(GRID, "rounds = 6", "rounds = 1"));
    let out = dir.path().join("out");
    ok(&invoke(&["train"], &config, &out));
    let text = fs::read_to_string(out.join(METRICS_FILE)).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1);
    let record: MetricsRecord = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(record.round, 0);
    assert_eq!(record.exact.len(), 2);
    assert!(record.loss_mean.is_some());
    assert!(out.join(CHECKPOINT_FILE).exists());
    assert_eq!(csv_header(&out.join(MODES_FILE)), ["round", "modes_found", "threshold"]);
    assert_eq!(read_csv(&out.join(MODES_FILE)).len(), 1);
    let saved = RunConfig::load(&out.join(run::CONFIG_FILE)).unwrap();
    assert_eq!(saved.train.online.rounds, 1);
}

#[test]
fn metrics_follow_the_configured_cadence() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), &with(GRID, "rounds = 6", "rounds = 7"));
    let out = dir.path().join("out");
    ok(&invoke(&["train"], &config, &out));
    let rounds: Vec<u64> = fs::read_to_string(out.join(METRICS_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<MetricsRecord>(l).unwrap().round)
        .collect();
    assert_eq!(rounds, [0, 2, 4, 6]);
    assert_eq!(fs::read_to_string(out.join(run::TIMINGS_FILE)).unwrap().lines().count(), 4);
}

#[test]
fn same_seed_gives_byte_identical_metrics() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), GRID);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&invoke(&["train"], &config, &a));
    ok(&invoke(&["train"], &config, &b));
    let bytes = fs::read(a.join(METRICS_FILE)).unwrap();
    assert!(!bytes.is_empty());
    assert_eq!(bytes, fs::read(b.join(METRICS_FILE)).unwrap());
    assert_eq!(fs::read(a.join(CHECKPOINT_FILE)).unwrap(), fs::read(b.join(CHECKPOINT_FILE)).unwrap());

    let c = dir.path().join("c");
    let mut cmd = bin();
    cmd.args(["train", "--seed", "8", "--config"]).arg(&config).arg("--out").arg(&c);
    ok(&cmd.output().unwrap());
    assert_ne!(bytes, fs::read(c.join(METRICS_FILE)).unwrap());
}

#[test]
fn checkpoint_resume_continues_bit_identically() {
    let dir = TempDir::new().unwrap();
    let short = resolved(&with(GRID, "rounds = 6", "rounds = 3"));
    let long = resolved(GRID);
    run::train(&short, &dir.path().join("short")).unwrap();
    let full = run::train(&long, &dir.path().join("long")).unwrap();

    let saved = Checkpoint::load(&dir.path().join("short").join(CHECKPOINT_FILE)).unwrap();
    let TrainerState::Online(mut trainer) = saved.state else { panic!("online run saved an offline state") };
    assert_eq!(trainer.round, 3);
    let cfg = &long.config;
    let plan = EvalPlan { exact_betas: cfg.eval.exact_betas.clone(), cap: cfg.eval.cap, modes: long.modes.clone() };
    trainer
        .run(&long.env, &long.reward, &long.loss, &cfg.train.online, &cfg.schedule.train, &cfg.schedule.exploration, &plan, |_| {})
        .unwrap();
    assert_eq!(TrainerState::Online(trainer), full.checkpoint.state);
}

#[test]
fn checkpoint_round_trip_is_lossless() {
    let dir = TempDir::new().unwrap();
    let run = resolved(GRID);
    let outcome = run::train(&run, dir.path()).unwrap();
    let loaded = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(loaded, outcome.checkpoint);
}

#[test]
fn checkpoint_header_and_compatibility_are_checked() {
    let dir = TempDir::new().unwrap();
    let run = resolved(GRID);
    run::train(&run, dir.path()).unwrap();
    let path = dir.path().join(CHECKPOINT_FILE);
    let mut json: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    json["version"] = 99.into();
    let bumped = dir.path().join("bumped.json");
    fs::write(&bumped, serde_json::to_vec(&json).unwrap()).unwrap();
    assert!(matches!(Checkpoint::load(&bumped), Err(CheckpointError::Version { found: 99, .. })));
    fs::write(&bumped, b"{\"format\": \"something-else\", \"version\": 1}").unwrap();
    assert!(matches!(Checkpoint::load(&bumped), Err(CheckpointError::Decode { .. })));

    let wider = resolved(&with(GRID, "side = 3", "side = 4"));
    let err = run::evaluate(&wider, &path, &[1.0], 8, dir.path()).unwrap_err();
    assert!(matches!(err, RunError::Checkpoint(CheckpointError::Mismatch(_))));
    assert_eq!(err.exit_code(), 2);
    let other_model = resolved(&with(GRID, "policy_hidden = [16]", "policy_hidden = [12]"));
    assert_eq!(run::evaluate(&other_model, &path, &[1.0], 8, dir.path()).unwrap_err().exit_code(), 2);
}

#[test]
fn eval_on_mismatched_checkpoint_exits_2() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), GRID);
    let out = dir.path().join("out");
    ok(&invoke(&["train"], &config, &out));
    let other = dir.path().join("other.toml");
    fs::write(&other, with(GRID, "side = 3", "side = 4")).unwrap();
    let mut cmd = bin();
    cmd.args(["eval", "--config"]).arg(&other).arg("--out").arg(&out).arg("--checkpoint").arg(out.join(CHECKPOINT_FILE));
    assert_eq!(cmd.output().unwrap().status.code(), Some(2));
}

#[test]
fn eval_writes_percentiles_l1_and_temperatures() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), GRID);
    let out = dir.path().join("out");
    ok(&invoke(&["train"], &config, &out));
    let output = invoke(&["eval", "--betas", "1,5,10", "--samples", "100"], &config, &out);
    ok(&output);
    let header = csv_header(&out.join(EVAL_FILE));
    assert_eq!(header, ["beta", "p25", "median", "mean", "max", "l1", "l1_mean", "temperature"]);
    let rows = read_csv(&out.join(EVAL_FILE));
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["1", "5", "10"]);
    for r in &rows {
        let l1: f64 = r[5].parse().unwrap();
        let mean: f64 = r[6].parse().unwrap();
        assert!((0.0..=2.0).contains(&l1));
        assert!((mean * 9.0 - l1).abs() < 1e-12);
        assert!(r[7].parse::<f64>().unwrap() > 0.0);
    }
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("temperature"), "{stdout}");
    assert_eq!(read_csv(&out.join("marginal_beta_5.csv")).len(), 9);
}

#[test]
fn unconditional_checkpoint_gives_equal_rows_at_any_beta() {
    let dir = TempDir::new().unwrap();
    let run = resolved(&with(GRID, "[model]\n", "[model]\nmode = \"unconditional\"\n"));
    run::train(&run, dir.path()).unwrap();
    let outcome = run::evaluate(&run, &dir.path().join(CHECKPOINT_FILE), &[1.0, 50.0], 256, dir.path()).unwrap();
    let (a, b) = (&outcome.rows[0], &outcome.rows[1]);
    assert_eq!((a.p25, a.median, a.mean, a.max), (b.p25, b.median, b.mean, b.max));
    assert!(a.temperature.is_none());
    assert!(!csv_header(&dir.path().join(EVAL_FILE)).contains(&"temperature".to_owned()));
}

#[test]
fn large_space_omits_l1_with_a_notice() {
    let dir = TempDir::new().unwrap();
    let text = with(with(GRID, "samples = 64", "samples = 16\ncap = 4").as_str(), "exact_betas = [1.0, 2.0]", "exact_betas = []");
    let config = write_config(dir.path(), &text);
    let out = dir.path().join("out");
    ok(&invoke(&["train"], &with_rounds(&config, 1), &out));
    let output = invoke(&["eval"], &config, &out);
    ok(&output);
    assert!(String::from_utf8_lossy(&output.stdout).contains("L1 column omitted"));
    let header = csv_header(&out.join(EVAL_FILE));
    assert!(!header.contains(&"l1".to_owned()));
    assert_eq!(read_csv(&out.join(EVAL_FILE)).len(), 2);
}

fn with_rounds(config: &Path, rounds: u64) -> PathBuf {
    let text = fs::read_to_string(config).unwrap().replacen("rounds = 6", &format!("rounds = {rounds}"), 1);
    let path = config.with_file_name("short.toml");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn enumerate_uniform_target_at_beta_zero() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), GRID);
    let out = dir.path().join("out");
    ok(&invoke(&["enumerate", "--betas", "0"], &config, &out));
    let rows = read_csv(&out.join("target_beta_0.csv"));
    assert_eq!(rows.len(), 9);
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r[0], i.to_string());
        assert!((r[2].parse::<f64>().unwrap() - 1.0 / 9.0).abs() < 1e-15);
    }
    let states: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    assert!(states.contains(&"0,0") && states.contains(&"2,2"));
}

#[test]
fn enumerate_writes_one_normalized_file_per_beta() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), &with(GRID, "side = 3", "side = 8"));
    let out = dir.path().join("out");
    ok(&invoke(&["enumerate", "--betas", "1,1000"], &config, &out));
    let files: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert_eq!(files.iter().filter(|f| f.starts_with("target_beta_")).count(), 2);
    for beta in ["1", "1000"] {
        let probs: Vec<f64> = read_csv(&out.join(format!("target_beta_{beta}.csv"))).iter().map(|r| r[2].parse().unwrap()).collect();
        assert_eq!(probs.len(), 64);
        let total: f64 = probs.iter().sum();
        assert!((total - 1.0).abs() < 1e-9, "beta {beta}: {total}");
        let renormalized: f64 = probs.iter().map(|p| p / total).sum();
        assert!((renormalized - 1.0).abs() < 1e-9);
    }
}

#[test]
fn enumerate_past_the_cap_fails_at_runtime() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), &with(GRID, "samples = 64", "samples = 64\ncap = 4"));
    let output = invoke(&["enumerate", "--betas", "1"], &config, &dir.path().join("out"));
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn offline_run_reads_a_dataset_file() {
    let dir = TempDir::new().unwrap();
    fs::write(dir.path().join("data.tsv"), "# state\treward\n0,0\t0.5\n1,2\t1.5\n2,1\t0.25\n").unwrap();
    let text = with(
        GRID,
        "[train.online]\n",
        "[train]\nprotocol = \"offline\"\n\n[train.dataset]\npath = \"data.tsv\"\n\n[train.offline]\nsteps = 5\nbatch_size = 4\nmetrics_interval = 2\n\n[train.online]\n",
    );
    let config = write_config(dir.path(), &text);
    let out = dir.path().join("out");
    ok(&invoke(&["train"], &config, &out));
    let rounds: Vec<u64> = fs::read_to_string(out.join(METRICS_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<MetricsRecord>(l).unwrap().round)
        .collect();
    assert_eq!(rounds, [0, 2, 4]);
    assert!(!out.join(MODES_FILE).exists());

    let run = RunConfig::load(&config).unwrap().resolve().unwrap();
    let data = run.dataset.as_ref().unwrap();
    assert_eq!(data.len(), 3);
    assert_eq!(data.max_reward(), 1.5);
    assert!((run::offline_scale(&run).log_offset + 1.5f64.ln()).abs() < 1e-15);
    let loaded = Checkpoint::load(&out.join(CHECKPOINT_FILE)).unwrap();
    assert!(matches!(loaded.state, TrainerState::Offline(ref t) if t.step == 5));

    fs::write(dir.path().join("data.tsv"), "0,0\t0.5\n0,0\t0.7\n").unwrap();
    assert_eq!(invalid_key_at(&config), "train.dataset.path");
    fs::write(dir.path().join("data.tsv"), "0,0\t-1\n").unwrap();
    assert_eq!(invalid_key_at(&config), "train.dataset.path");
    fs::write(dir.path().join("data.tsv"), "3,0\t1\n").unwrap();
    assert_eq!(invalid_key_at(&config), "train.dataset.path");
}

fn invalid_key_at(config: &Path) -> String {
    match RunConfig::load(config).and_then(|c| c.resolve()) {
        Err(ConfigError::Invalid { key, .. }) => key,
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn reward_table_oracle_is_loaded_in_terminal_order() {
    let dir = TempDir::new().unwrap();
    let mut table = String::new();
    for x in 0..3 {
        for y in 0..3 {
            table.push_str(&format!("{x},{y}\t{}\n", 1 + x + 3 * y));
        }
    }
    fs::write(dir.path().join("table.tsv"), &table).unwrap();
    let text = with(GRID, "[env.reward.oracle]\nkind = \"hypergrid\"", "[env.reward.oracle]\nkind = \"table\"\npath = \"table.tsv\"");
    let config = write_config(dir.path(), &text);
    let out = dir.path().join("out");
    ok(&invoke(&["enumerate", "--betas", "1"], &config, &out));
    for r in read_csv(&out.join("target_beta_1.csv")) {
        let coords: Vec<u32> = r[1].split(',').map(|c| c.parse().unwrap()).collect();
        let expected = f64::from(1 + coords[0] + 3 * coords[1]) / 45.0;
        assert!((r[2].parse::<f64>().unwrap() - expected).abs() < 1e-15, "{r:?}");
    }
    fs::write(dir.path().join("table.tsv"), table.lines().skip(1).collect::<Vec<_>>().join("\n")).unwrap();
    assert_eq!(invalid_key_at(&config), "env.reward.oracle.path");
}

#[test]
fn corrupted_buffer_entries_are_rejected() {
    let dir = TempDir::new().unwrap();
    run::train(&resolved(GRID), dir.path()).unwrap();
    let path = dir.path().join(CHECKPOINT_FILE);
    let json: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
    assert!(json["online"]["buffer"].as_array().is_some_and(|b| !b.is_empty()));

    let mut broken = json.clone();
    broken["online"]["buffer"][0]["states"][1] = 999_999.into();
    fs::write(&path, serde_json::to_vec(&broken).unwrap()).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(CheckpointError::Decode { message, .. }) if message.contains("buffer entry 0")));

    let mut both = json;
    both["offline"] = both["online"]["trainer"].clone();
    fs::write(&path, serde_json::to_vec(&both).unwrap()).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(CheckpointError::Decode { .. })));
}
