use std::path::{Path, PathBuf};
use std::process::Command;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use urbanflow::config_flow::GenerationStep;
use urbanflow::synthdata::read_dataset;
use urbanflow::Error;
use urbanflow_cli::bundle::{ModelBundle, Stage};
use urbanflow_cli::checkpoint::{self, CheckpointError};
use urbanflow_cli::commands::*;
use urbanflow_cli::config::RunConfig;
use urbanflow_cli::render::ppm_bytes;

fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.apply_text(
        "n = 4\nm = 2\np = 3\nzone_blocks = 2\nconfig_blocks = 1\nhidden_width = 8\nhidden_layers = 1\n\
         batch_size = 8\nzone_steps = 5\nconfig_steps = 3\nchannels = 2\nconvnext_depth = 2\nseed = 11\n",
    )
    .unwrap();
    c.validate().unwrap();
    c
}

struct Workspace {
    dir: tempfile::TempDir,
    config: RunConfig,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
            config: small_config(),
        };
        cmd_synth(&ws.config, 20, &ws.path("data.jsonl")).unwrap();
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn data(&self) -> PathBuf {
        self.path("data.jsonl")
    }

    fn train_both(&self, tag: &str) -> (PathBuf, PathBuf) {
        let zone = self.path(&format!("{tag}_zone.ckpt"));
        let full = self.path(&format!("{tag}_full.ckpt"));
        cmd_train_zone(&self.config, &self.data(), &zone, None).unwrap();
        cmd_train_config(&self.config, &self.data(), &zone, &full, None).unwrap();
        (zone, full)
    }
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// A full bundle with every tensor randomized.
fn random_bundle(config: &RunConfig, seed: u64) -> ModelBundle {
    let mut b = ModelBundle::full(config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let named = b
        .tensors()
        .into_iter()
        .map(|(name, mut t)| {
            let positive = name.ends_with("running_var");
            for v in t.data_mut() {
                *v = if positive {
                    rng.random_range(0.5..1.5)
                } else {
                    rng.random_range(-1.0..1.0)
                };
            }
            (name, t)
        })
        .collect();
    b.load_tensors(named).unwrap();
    b.rng.next_u64();
    b
}

#[test]
fn synth_writes_a_reproducible_dataset() {
    let ws = Workspace::new();
    let d = read_dataset(&ws.data()).unwrap();
    let h = d.header.unwrap();
    assert_eq!((h.n, h.m, h.p), (4, 2, 3));
    assert_eq!(d.samples.len(), 20);
    for (i, s) in d.samples.iter().enumerate() {
        assert_eq!(s.id, i as u64);
        assert_eq!(s.green_level, i % 5);
    }
    let again = ws.path("again.jsonl");
    cmd_synth(&ws.config, 20, &again).unwrap();
    assert_eq!(read(&ws.data()), read(&again));
}

#[test]
fn dataset_dimensions_must_match_the_config() {
    let ws = Workspace::new();
    let mut other = ws.config.clone();
    other.n = 6;
    assert!(matches!(
        load_dataset(&other, &ws.data()),
        Err(CliError::Core(Error::Config(_)))
    ));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let config = small_config();
    for bundle in [random_bundle(&config, 1), ModelBundle::zone_only(&config).unwrap()] {
        let bytes = checkpoint::encode(&bundle);
        let mut back = checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.stage(), bundle.stage());
        assert_eq!(back.config, bundle.config);
        let (a, b) = (bundle.tensors(), back.tensors());
        assert_eq!(a.len(), b.len());
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape(), tb.shape());
            assert!(
                ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits()),
                "{na}"
            );
        }
        assert_eq!(checkpoint::encode(&back), bytes);
        let mut original_rng = bundle.rng.clone();
        assert_eq!(back.rng.next_u64(), original_rng.next_u64());
    }
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let bytes = checkpoint::encode(&random_bundle(&small_config(), 2));

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(checkpoint::decode(&bad), Err(CheckpointError::BadMagic)));
    assert!(matches!(checkpoint::decode(b"UF"), Err(CheckpointError::BadMagic)));

    let mut bad = bytes.clone();
    bad[7] = 9;
    assert!(matches!(
        checkpoint::decode(&bad),
        Err(CheckpointError::Version { found: 9, expected: 1 })
    ));

    assert!(matches!(
        checkpoint::decode(&bytes[..10]),
        Err(CheckpointError::Truncated(_))
    ));
    assert!(matches!(
        checkpoint::decode(&bytes[..40]),
        Err(CheckpointError::Truncated(_))
    ));
    assert!(matches!(
        checkpoint::decode(&bytes[..bytes.len() - 8]),
        Err(CheckpointError::LengthMismatch { .. })
    ));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(
        checkpoint::decode(&long),
        Err(CheckpointError::LengthMismatch { .. })
    ));

    let mut bad = bytes.clone();
    bad[16] = b'!';
    assert!(matches!(checkpoint::decode(&bad), Err(CheckpointError::Header(_))));

    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(
        checkpoint::load(&dir.path().join("missing")),
        Err(CheckpointError::Io(_))
    ));
}

#[test]
fn stage_names_parse() {
    assert_eq!(Stage::parse("zone").unwrap(), Stage::Zone);
    assert_eq!(Stage::parse(Stage::Full.as_str()).unwrap(), Stage::Full);
    assert!(matches!(Stage::parse("both"), Err(Error::Format(_))));
}

#[test]
fn zero_step_training_saves_the_identity_model() {
    let ws = Workspace::new();
    let mut config = ws.config.clone();
    config.zone_steps = 0;
    let out = ws.path("zero.ckpt");
    let report = cmd_train_zone(&config, &ws.data(), &out, None).unwrap();
    assert_eq!(report.initial_nll, report.final_nll);
    assert!(report.losses.is_empty());
    assert_eq!(
        read(&out),
        checkpoint::encode(&ModelBundle::zone_only(&config).unwrap())
    );
}

#[test]
fn training_generation_and_evaluation_are_deterministic() {
    let ws = Workspace::new();
    let (zone_a, full_a) = ws.train_both("a");
    let (zone_b, full_b) = ws.train_both("b");
    assert_eq!(read(&zone_a), read(&zone_b));
    assert_eq!(read(&full_a), read(&full_b));
    assert_eq!(read(&ws.path("a_zone.ckpt.log")), read(&ws.path("b_zone.ckpt.log")));
    assert_eq!(read(&ws.path("a_full.ckpt.log")), read(&ws.path("b_full.ckpt.log")));

    let request = GenerateRequest {
        green_level: 3,
        context: ContextSource::Sample {
            dataset: ws.data(),
            id: 4,
        },
        count: 2,
        trace: true,
        seed: 5,
    };
    cmd_generate(&full_a, &request, &ws.path("gen_a")).unwrap();
    cmd_generate(&full_b, &request, &ws.path("gen_b")).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(ws.path("gen_a"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(!names.is_empty());
    for name in &names {
        assert_eq!(read(&ws.path("gen_a").join(name)), read(&ws.path("gen_b").join(name)));
    }

    let ra = cmd_evaluate(&full_a, &ws.data(), &ws.path("report_a.txt")).unwrap();
    cmd_evaluate(&full_b, &ws.data(), &ws.path("report_b.txt")).unwrap();
    assert_eq!(read(&ws.path("report_a.txt")), read(&ws.path("report_b.txt")));
    assert_eq!(ra.rows.len(), 5);
    assert!(ra.avg_hd.is_finite() && ra.avg_kl >= 0.0);

    let other = GenerateRequest { seed: 6, ..request };
    let gens = cmd_generate(&full_a, &other, &ws.path("gen_c")).unwrap();
    assert_ne!(
        read(&ws.path("gen_a/sample_0.json")),
        read(&ws.path("gen_c/sample_0.json"))
    );
    assert_eq!(gens.len(), 2);
}

#[test]
fn training_logs_record_the_configuration() {
    let ws = Workspace::new();
    let mut config = ws.config.clone();
    config.lambda_zone = 0.0;
    let zone = ws.path("zone.ckpt");
    let full = ws.path("full.ckpt");
    let zlog = ws.path("zone.log");
    cmd_train_zone(&config, &ws.data(), &zone, Some(&zlog)).unwrap();
    let text = String::from_utf8(read(&zlog)).unwrap();
    assert!(text.contains("# zone_steps = 5\n"));
    assert!(text.contains("step\tnll\n"));
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 1 + 5);
    assert!(text.contains("# eval_nll_final = "));

    cmd_train_config(&config, &ws.data(), &zone, &full, None).unwrap();
    let text = String::from_utf8(read(&ws.path("full.ckpt.log"))).unwrap();
    assert!(text.contains("# lambda_zone = 0\n"), "{text}");
    let rows: Vec<_> = text.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.ends_with("\t-")));
}

#[test]
fn stage_two_needs_a_zone_checkpoint() {
    let ws = Workspace::new();
    let err = cmd_train_config(
        &ws.config,
        &ws.data(),
        &ws.path("nope.ckpt"),
        &ws.path("full.ckpt"),
        None,
    )
    .unwrap_err();
    assert!(matches!(err, CliError::Core(Error::Pipeline(_))), "{err:?}");
    assert!(!ws.path("full.ckpt").exists());

    let zone = ws.path("zone.ckpt");
    cmd_train_zone(&ws.config, &ws.data(), &zone, None).unwrap();
    let mut wider = ws.config.clone();
    wider.hidden_width = 16;
    let err = cmd_train_config(&wider, &ws.data(), &zone, &ws.path("full.ckpt"), None).unwrap_err();
    assert!(matches!(err, CliError::Core(Error::Config(_))), "{err:?}");

    let request = GenerateRequest {
        green_level: 0,
        context: ContextSource::Seed(1),
        count: 1,
        trace: false,
        seed: 0,
    };
    let err = cmd_generate(&zone, &request, &ws.path("gen")).unwrap_err();
    assert!(matches!(err, CliError::Core(Error::Pipeline(_))), "{err:?}");
}

#[test]
fn trace_writes_one_step_per_layer() {
    let ws = Workspace::new();
    let (_, full) = ws.train_both("t");
    let request = GenerateRequest {
        green_level: 1,
        context: ContextSource::Seed(3),
        count: 1,
        trace: true,
        seed: 1,
    };
    let gens = cmd_generate(&full, &request, &ws.path("trace")).unwrap();
    let bundle = checkpoint::load(&full).unwrap();
    let depth = bundle.stage_two().unwrap().1.stack().depth();
    let text = String::from_utf8(read(&ws.path("trace/sample_0.trace.jsonl"))).unwrap();
    let steps: Vec<GenerationStep> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(steps.len(), depth + 1);
    assert_eq!(steps.last().unwrap().histogram, gens[0].config.config.histogram());
    for k in 0..=depth {
        let img = read(&ws.path(&format!("trace/sample_0_step{k:02}.ppm")));
        assert!(img.starts_with(b"P6\n32 32\n255\n"));
    }

    let record: serde_json::Value = serde_json::from_slice(&read(&ws.path("trace/sample_0.json"))).unwrap();
    assert_eq!(record["green_level"], 1);
    assert_eq!(record["config"]["seed"], "11");
    assert_eq!(record["counts"].as_array().unwrap().len(), 4 * 4 * 3);

    let bad = GenerateRequest {
        green_level: 5,
        ..request
    };
    assert!(matches!(
        cmd_generate(&full, &bad, &ws.path("bad")),
        Err(CliError::Core(Error::Data(_)))
    ));
}

#[test]
fn evaluating_the_data_against_itself_scores_zero() {
    let ws = Workspace::new();
    let samples = load_dataset(&ws.config, &ws.data()).unwrap();
    let configs: Vec<_> = samples.iter().map(|s| s.config.clone()).collect();
    let report = evaluate_pairs(&samples, &configs).unwrap();
    assert_eq!(report.rows.len(), 5);
    assert!(report.warnings.is_empty());
    for v in [report.avg_kl, report.avg_hd, report.avg_wd] {
        assert!(v.abs() < 1e-9);
    }
    let text = report.to_text(&ws.config);
    assert_eq!(text.lines().filter(|l| l.starts_with("AVG_")).count(), 3);

    let greenless: Vec<_> = samples.iter().filter(|s| s.green_level != 2).cloned().collect();
    let configs: Vec<_> = greenless.iter().map(|s| s.config.clone()).collect();
    let report = evaluate_pairs(&greenless, &configs).unwrap();
    assert_eq!(report.rows.len(), 4);
    assert_eq!(report.warnings.len(), 1);
    assert!(report.to_text(&ws.config).contains("# warning: green level 2"));

    assert!(evaluate_pairs(&samples, &configs).is_err());
}

#[test]
fn rendering_is_sized_by_the_grid() {
    let samples = synth_samples(&small_config(), 1).unwrap();
    let img = ppm_bytes(&samples[0].config).unwrap();
    let header = b"P6\n32 32\n255\n";
    assert!(img.starts_with(header));
    assert_eq!(img.len(), header.len() + 32 * 32 * 3);
}

#[test]
fn config_files_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, "# comment\nn = 6\n\nlambda_zone = 0.5 # trailing\n").unwrap();
    let mut c = RunConfig::from_file(&path).unwrap();
    assert_eq!((c.n, c.lambda_zone), (6, 0.5));
    c.apply_overrides(&["seed=9".into()]).unwrap();
    assert_eq!(c.seed, 9);
    assert_eq!(RunConfig::from_entries(&c.entries()).unwrap(), c);
    assert!(matches!(c.apply_overrides(&["bogus=1".into()]), Err(Error::Config(_))));
    assert!(matches!(c.apply_overrides(&["seed".into()]), Err(Error::Config(_))));
    std::fs::write(&path, "n 6\n").unwrap();
    assert!(matches!(RunConfig::from_file(&path), Err(Error::Parse { line: 1, .. })));
    std::fs::write(&path, "n = 5\n").unwrap();
    assert!(matches!(RunConfig::from_file(&path), Err(Error::Config(_))));
}

#[test]
fn binary_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_urbanflow");
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    let status = Command::new(exe)
        .args([
            "--set", "n=4", "--set", "m=2", "--set", "p=3", "synth", "--count", "5", "--out",
        ])
        .arg(&data)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(read_dataset(&data).unwrap().samples.len(), 5);

    let out = Command::new(exe)
        .args(["--set", "bogus=1", "synth", "--count", "5", "--out"])
        .arg(dir.path().join("x.jsonl"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    let out = Command::new(exe)
        .args(["--set", "n=4", "--set", "m=2", "--set", "p=3", "train-config", "--data"])
        .arg(&data)
        .arg("--zone")
        .arg(dir.path().join("missing.ckpt"))
        .arg("--out")
        .arg(dir.path().join("full.ckpt"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));

    let out = Command::new(exe)
        .args(["generate", "--green", "1", "--out-dir"])
        .arg(dir.path())
        .arg("--ckpt")
        .arg(dir.path().join("missing.ckpt"))
        .arg("--context-seed")
        .arg("1")
        .output()
        .unwrap();
    assert!(!out.status.success());
}
