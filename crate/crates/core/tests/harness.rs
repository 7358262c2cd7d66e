//! Training loop, config files, gradient check and the command line tool.

use std::fs;
use std::path::Path;
use std::process::Command;

use mstdt::checkpoint::{encode_checkpoint, load_checkpoint};
use mstdt::config::{parse_synth_spec, synth_spec_to_text, RunConfig, RUN_KEYS};
use mstdt::data::{generate_synthetic, SynthSpec};
use mstdt::encoder::Init;
use mstdt::eval::TieBreak;
use mstdt::gradcheck::grad_check;
use mstdt::model::Mstdt;
use mstdt::temporal::FusionParams;
use mstdt::train::{evaluate, train, History, CHECKPOINT_FILE, CONFIG_FILE, HISTORY_FILE};
use mstdt::Error;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn quick() -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.set("dim", "8").unwrap();
    cfg.set("synth.num_videos", "8").unwrap();
    cfg.set("synth.cluster_count", "8").unwrap();
    cfg.batch_size = 4;
    cfg.epochs = 3;
    cfg
}

#[test]
fn training_is_bitwise_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = quick();
    let ra = train(&cfg, Some(a.path())).unwrap();
    let rb = train(&cfg, Some(b.path())).unwrap();
    let losses = |h: &History| h.steps.iter().map(|s| s.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&ra.history), losses(&rb.history));
    assert_eq!(ra.history.steps.len(), 6);
    for f in [CHECKPOINT_FILE, HISTORY_FILE, CONFIG_FILE] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    assert_eq!(load_checkpoint(&a.path().join(CHECKPOINT_FILE)).unwrap(), ra.params);

    let other = train(&RunConfig { seed: 1, ..cfg }, None).unwrap();
    assert_ne!(encode_checkpoint(&other.params), encode_checkpoint(&ra.params));
}

#[test]
fn zero_epochs_keeps_the_initialisation() {
    let cfg = RunConfig { epochs: 0, ..quick() };
    let out = train(&cfg, None).unwrap();
    let model = Mstdt::new(cfg.model.clone()).unwrap();
    let init = model.init_params(cfg.init, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
    assert_eq!(encode_checkpoint(&out.params), encode_checkpoint(&init));
    assert!(out.history.steps.is_empty());
    let ds = generate_synthetic(&cfg.synth).unwrap();
    assert_eq!(out.history.epochs.len(), 1);
    assert_eq!(out.history.epochs[0].validation, evaluate(&model, &init, &ds, cfg.tie).unwrap());
}

#[test]
fn max_steps_caps_training() {
    let out = train(&RunConfig { max_steps: 4, ..quick() }, None).unwrap();
    assert_eq!(out.history.steps.len(), 4);
    assert_eq!(out.history.steps.last().unwrap().step, 3);
}

#[test]
fn diverging_loss_aborts_with_the_step() {
    let mut cfg = quick();
    cfg.init = Init::Random;
    cfg.optim.lr_temporal = 1e300;
    match train(&cfg, None) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("step"), "{msg}"),
        other => panic!("expected a numeric error, got {other:?}"),
    }
}

#[test]
fn untrained_long_term_path_beats_chance_on_noiseless_data() {
    let mut cfg = RunConfig::desk();
    cfg.synth = SynthSpec { num_videos: 64, cluster_count: 64, noise_sigma: 0.0, ..cfg.synth };
    cfg.model.fusion = FusionParams::new(0.0).unwrap();
    let out = train(&RunConfig { epochs: 0, ..cfg }, None).unwrap();
    let r1 = out.history.epochs[0].validation.t2v.r1;
    assert!(r1 > 5.0 * 100.0 / 64.0, "R@1 {r1}");
}

#[test]
fn single_pair_dataset_is_found() {
    let mut cfg = RunConfig::desk();
    cfg.synth = SynthSpec { num_videos: 1, cluster_count: 1, ..cfg.synth };
    let model = Mstdt::new(cfg.model.clone()).unwrap();
    let params = model.init_params(Init::Random, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let s = evaluate(&model, &params, &generate_synthetic(&cfg.synth).unwrap(), TieBreak::Pessimistic).unwrap();
    assert_eq!((s.t2v.r1, s.v2t.r1), (100.0, 100.0));
}

#[test]
fn shuffled_pairs_give_chance_mean_rank() {
    let cfg = RunConfig::desk();
    let b = 32;
    let model = Mstdt::new(cfg.model.clone()).unwrap();
    let mut total = 0.0;
    let seeds = 20;
    for seed in 0..seeds {
        let mut ds =
            generate_synthetic(&SynthSpec { seed, num_videos: b, cluster_count: b, ..cfg.synth.clone() }).unwrap();
        let mut owners: Vec<usize> = ds.pairs.iter().map(|p| p.1).collect();
        owners.shuffle(&mut ChaCha8Rng::seed_from_u64(seed + 100));
        for (p, o) in ds.pairs.iter_mut().zip(owners) {
            p.1 = o;
        }
        let params = model.init_params(cfg.init, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        total += evaluate(&model, &params, &ds, cfg.tie).unwrap().t2v.mean_r;
    }
    let mean = total / seeds as f64;
    let chance = (b as f64 + 1.0) / 2.0;
    assert!((mean - chance).abs() <= 0.2 * chance, "mean rank {mean} vs {chance}");
}

#[test]
fn config_text_round_trips() {
    let mut cfg = RunConfig::desk();
    for (k, v) in [
        ("alpha", "0.25"),
        ("fusion", "attention"),
        ("kl_reduction", "sum"),
        ("scales", "2,3,6"),
        ("short.norm", "post"),
        ("tie", "pessimistic"),
    ] {
        cfg.set(k, v).unwrap();
    }
    let text = cfg.to_text();
    assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    for (key, _) in RUN_KEYS.iter().filter(|(k, _)| *k != "preset") {
        assert!(text.contains(&format!("\n{key} = ")), "{key}");
    }
    let spec = SynthSpec { seed: 9, noise_sigma: 0.25, motion_signal: true, cluster_count: 4, ..SynthSpec::default() };
    assert_eq!(parse_synth_spec(&synth_spec_to_text(&spec)).unwrap(), spec);
}

#[test]
fn bad_config_is_rejected() {
    for text in [
        "bogus = 1",
        "alpha = 1.5",
        "alpha = x",
        "dim = 8\ndim = 8",
        "no equals sign",
        "preset = huge",
        "batch_size = 1",
        "scales = 5",
        "use_difference = maybe",
    ] {
        assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text:?}");
    }
    let cfg = RunConfig::parse("# comment\n\nalpha = 0.5\npreset = full\n").unwrap();
    assert_eq!(cfg.model.dim, 512);
    assert_eq!(cfg.model.fusion.alpha(), 0.5);
}

#[test]
fn gradient_check_variants_pass() {
    for extra in [
        "",
        "beta = 0",
        "use_difference = false\nfusion = concat",
        "short.norm = post\nlong.norm = post\nvideo_projection = true\ncaption_projection = true",
        "strict_diff_mask = true\nliteral_normalization = true\nkl_swap = true\nkl_reduction = sum",
    ] {
        let text = format!("dim = 4\nscales = 3,4\nbatch_size = 3\ninit = random\nshort.ff_dim = 8\nlong.ff_dim = 8\nsynth.num_videos = 3\nsynth.cluster_count = 3\n{extra}");
        let report = grad_check(&RunConfig::parse(&text).unwrap()).unwrap();
        assert_eq!(report.batch, 3);
        assert!(report.passes(1e-5), "{extra:?}\n{}", report.to_text());
    }
}

fn mstdt(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_mstdt")).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8(out.stdout).unwrap(), String::from_utf8(out.stderr).unwrap())
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn command_line_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.txt"), "num_videos = 8\ncluster_count = 8\ndim = 8\n").unwrap();
    let (code, out, err) = mstdt(&["synth", "--spec", path(&d.join("spec.txt")), "--out", path(&d.join("data"))]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("8 videos"));

    let config = format!("data = {}\ndim = 8\nbatch_size = 4\nepochs = 2\n", path(&d.join("data")));
    fs::write(d.join("run.txt"), config).unwrap();
    let (code, out, err) = mstdt(&["train", "--config", path(&d.join("run.txt")), "--out", path(&d.join("run"))]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("final step"));

    let ckpt = d.join("run").join(CHECKPOINT_FILE);
    let json = d.join("metrics.json");
    let (code, out, err) =
        mstdt(&["eval", "--checkpoint", path(&ckpt), "--data", path(&d.join("data")), "--json", path(&json)]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("rsum"));
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert!(metrics["t2v"]["r1"].is_number());

    let (code, out, _) = mstdt(&["report", "--history", path(&d.join("run").join(HISTORY_FILE))]);
    assert_eq!(code, 0);
    assert!(out.contains("final step"));

    fs::write(
        d.join("gc.txt"),
        "dim = 4\nbatch_size = 3\nsynth.num_videos = 3\nsynth.cluster_count = 3\ninit = random\n",
    )
    .unwrap();
    let (code, out, _) = mstdt(&["gradcheck", "--config", path(&d.join("gc.txt"))]);
    assert_eq!(code, 0);
    assert!(out.contains("pass at tolerance"));
}

#[test]
fn command_line_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.txt"), "nonsense_key = 3\n").unwrap();
    let (code, _, err) = mstdt(&["gradcheck", "--config", path(&d.join("bad.txt"))]);
    assert_eq!(code, 2);
    assert!(err.contains("nonsense_key"));

    fs::write(
        d.join("nan.txt"),
        "dim = 8\nbatch_size = 4\nsynth.num_videos = 8\nsynth.cluster_count = 8\ninit = random\nlr.temporal = 1e300\n",
    )
    .unwrap();
    let (code, _, err) = mstdt(&["train", "--config", path(&d.join("nan.txt")), "--out", path(&d.join("nan"))]);
    assert_eq!(code, 3, "{err}");

    fs::write(d.join("history.json"), "{not json").unwrap();
    let (code, _, _) = mstdt(&["report", "--history", path(&d.join("history.json"))]);
    assert_eq!(code, 4);

    fs::create_dir(d.join("data")).unwrap();
    for f in ["videos.emb", "captions.emb", "pairs.prs"] {
        fs::write(d.join("data").join(f), b"garbage").unwrap();
    }
    fs::write(d.join("ok.txt"), "dim = 8\n").unwrap();
    fs::write(d.join("ckpt.bin"), encode_checkpoint(&Default::default())).unwrap();
    let (code, _, _) = mstdt(&[
        "eval",
        "--checkpoint",
        path(&d.join("ckpt.bin")),
        "--data",
        path(&d.join("data")),
        "--config",
        path(&d.join("ok.txt")),
    ]);
    assert_eq!(code, 4);
}
