//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fail.

mod common;

use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mstdt::autograd::Graph;
use mstdt::checkpoint::encode_checkpoint;
use mstdt::config::RunConfig;
use mstdt::data::{decode_dataset, encode_captions, encode_pairs, encode_videos, generate_synthetic, EmbeddingDataset};
use mstdt::encoder::Init;
use mstdt::eval::{rank_of_truth, retrieval_metrics, Direction, TieBreak};
use mstdt::gradcheck::grad_check;
use mstdt::model::{ModelConfig, Mstdt};
use mstdt::objective::{
    binary_similarity_loss, symmetric_cross_entropy, Entity, KlReduction, LossParams, SimilarityMatrix,
};
use mstdt::temporal::{
    compute_differences, fuse_video, partition_subsets, FrameFeatureSequence, FusionParams, FusionStrategy,
};
use mstdt::tensor::Tensor;
use mstdt::train::{train, TrainOutcome};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{brute_bs, brute_ce, brute_cosine, random_rows, sort_rank};

const GRADCHECK: &str = include_str!("../../../configs/gradcheck.txt");
const MECHANISM: &str = include_str!("../../../configs/mechanism.txt");
const OVERFIT: &str = include_str!("../../../configs/overfit.txt");

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// A shipped config with `key = value` overrides from `extra`.
fn config(text: &str, extra: &str) -> RunConfig {
    let mut cfg = RunConfig::parse(text).expect("shipped config parses");
    for line in extra.lines() {
        let (key, value) = line.split_once('=').expect("override is key = value");
        cfg.set(key.trim(), value.trim()).expect("override applies");
    }
    cfg.validate().expect("overridden config is valid");
    cfg
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for extra in ["", "fusion = concat\nshort.norm = post\nlong.norm = post", "use_difference = false\nbeta = 0"] {
        let report = grad_check(&config(GRADCHECK, extra)).map_err(|e| e.to_string())?;
        if report.batch != 3 {
            failures.push(format!("batch {}", report.batch));
        }
        if !report.passes(1e-5) {
            let w = report.worst().expect("parameters exist");
            failures.push(format!("{} at {:.3e}", w.name, w.rel_error));
        }
        worst = worst.max(report.max_rel_error());
    }
    let elapsed = start.elapsed();
    check(
        failures.is_empty() && elapsed < Duration::from_secs(60),
        format!(
            "max rel err {worst:.2e} over 3 variants, {:.1}s{}",
            elapsed.as_secs_f64(),
            failures.iter().map(|f| format!("; {f}")).collect::<String>()
        ),
    )
}

fn sim(rows: &[Vec<f64>], r: Entity, c: Entity) -> SimilarityMatrix {
    SimilarityMatrix::new(Tensor::from_rows(rows), r, c).unwrap()
}

fn loss_oracles() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random_rows(&mut rng, 3, 5);
        let c = random_rows(&mut rng, 3, 5);
        let (vc, vv, cc) = (brute_cosine(&v, &c), brute_cosine(&v, &v), brute_cosine(&c, &c));
        let scale = [1.0, 10.0, 100.0][seed as usize % 3];
        let lp = LossParams {
            beta: 0.3,
            logit_scale: scale,
            kl_swap: seed % 2 == 1,
            kl_reduction: if seed % 4 < 2 { KlReduction::Mean } else { KlReduction::Sum },
        };
        let m = (
            sim(&vc, Entity::Video, Entity::Caption),
            sim(&vv, Entity::Video, Entity::Video),
            sim(&cc, Entity::Caption, Entity::Caption),
        );
        let bs = binary_similarity_loss(&m.0, &m.1, &m.2, &lp).map_err(|e| e.to_string())?;
        let ce = symmetric_cross_entropy(&m.0, scale).map_err(|e| e.to_string())?;
        worst = worst.max((bs - brute_bs(&vc, &vv, &cc, &lp)).abs()).max((ce - brute_ce(&vc, scale)).abs());
    }
    let mut identical = 0.0f64;
    let mut b2 = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_rows(&mut rng, 4, 5);
        let m = sim(&brute_cosine(&x, &x), Entity::Video, Entity::Caption);
        identical = identical.max(binary_similarity_loss(&m, &m, &m, &LossParams::default()).unwrap().abs());
        let (v, c) = (random_rows(&mut rng, 2, 5), random_rows(&mut rng, 2, 5));
        let l = binary_similarity_loss(
            &sim(&brute_cosine(&v, &c), Entity::Video, Entity::Caption),
            &sim(&brute_cosine(&v, &v), Entity::Video, Entity::Video),
            &sim(&brute_cosine(&c, &c), Entity::Caption, Entity::Caption),
            &LossParams::default(),
        )
        .unwrap();
        b2 = b2.max(l.abs());
    }
    check(
        worst <= 1e-10 && identical <= 1e-12 && b2 == 0.0,
        format!("100 b=3 instances max diff {worst:.1e}; identical-input L_bs {identical:.1e}; b=2 L_bs {b2:e}"),
    )
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    let count = 1000;
    for _ in 0..count {
        let b = rng.random_range(1..=6);
        let coarse = rng.random_bool(0.5);
        let m: Vec<Vec<f64>> = (0..b)
            .map(|_| {
                (0..b)
                    .map(|_| if coarse { rng.random_range(0..3) as f64 } else { rng.random_range(-1.0..1.0) })
                    .collect()
            })
            .collect();
        let s = sim(&m, Entity::Video, Entity::Caption);
        for tie in [TieBreak::Optimistic, TieBreak::Pessimistic] {
            let v2t = rank_of_truth(&s, Direction::V2t, tie).unwrap();
            let t2v = rank_of_truth(&s, Direction::T2v, tie).unwrap();
            for q in 0..b {
                let col: Vec<f64> = (0..b).map(|r| m[r][q]).collect();
                if v2t[q] != sort_rank(&m[q], q, tie) || t2v[q] != sort_rank(&col, q, tie) {
                    mismatches += 1;
                }
            }
        }
    }
    let r = retrieval_metrics(&[1, 2, 6, 11], Direction::T2v).unwrap();
    let example = (r.r1, r.r5, r.r10, r.med_r, r.mean_r) == (25.0, 50.0, 75.0, 4.0, 5.0);
    check(
        mismatches == 0 && example,
        format!(
            "{count} matrices, {mismatches} rank mismatches; [1,2,6,11] -> R@1 {} R@5 {} R@10 {} MedR {} MeanR {}",
            r.r1, r.r5, r.r10, r.med_r, r.mean_r
        ),
    )
}

fn random_video(rng: &mut ChaCha8Rng, n: usize, d: usize, valid: usize) -> FrameFeatureSequence {
    FrameFeatureSequence::new(Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()), valid)
        .unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn structural_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut padding = 0.0f64;
    for (i, diff) in [true, false].into_iter().enumerate() {
        for fusion in [FusionStrategy::Mean, FusionStrategy::Concat, FusionStrategy::Attention] {
            let mut cfg = ModelConfig::desk(8, 12);
            cfg.short.use_difference = diff;
            cfg.short.fusion = fusion;
            let model = Mstdt::new(cfg).unwrap();
            let params = model.init_params(Init::Random, &mut rng).unwrap();
            for valid in 1..12 {
                let clean = random_video(&mut rng, 12, 8, valid);
                let mut dirty = clean.clone();
                for v in &mut dirty.frames_mut().values_mut()[valid * 8..] {
                    *v = rng.random_range(-50.0..50.0) * (i + 1) as f64;
                }
                let a = model.embed_videos_eval(&params, &[&clean]).unwrap();
                let b = model.embed_videos_eval(&params, &[&dirty]).unwrap();
                padding = padding.max(max_diff(&a[0], &b[0]));
            }
        }
    }

    let mut telescope = 0.0f64;
    for k in 2..=8 {
        let v = random_video(&mut rng, k, 6, k);
        let d = compute_differences(&partition_subsets(&v, k).unwrap().subsets[0], false).unwrap();
        for j in 0..6 {
            telescope = telescope.max((1..=k).map(|i| d.tokens.at(i, j)).sum::<f64>().abs());
        }
    }

    let mut cfg = ModelConfig::desk(8, 12);
    cfg.short.use_difference = false;
    cfg.short.scales = vec![3, 4, 6];
    let model = Mstdt::new(cfg).unwrap();
    let params = model.init_params(Init::ResidualIdentity, &mut rng).unwrap();
    let mut identity = 0.0f64;
    for valid in [12, 7] {
        let v = random_video(&mut rng, 12, 8, valid);
        let mut g = Graph::new();
        let (s, l) = model.branches(&mut g, &params, &[&v]).unwrap();
        for branch in [s, l] {
            identity = identity.max(max_diff(g.value(branch).values(), &v.mean_frame()));
        }
    }

    let counts = model.config().short.subset_counts(12);

    let s: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let l: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let alpha_ok = fuse_video(&s, &l, FusionParams::new(1.0).unwrap()).unwrap() == s
        && fuse_video(&s, &l, FusionParams::new(0.0).unwrap()).unwrap() == l;

    check(
        padding <= 1e-10 && telescope <= 1e-12 && identity <= 1e-12 && counts == [4, 3, 2] && alpha_ok,
        format!(
            "padding {padding:.1e}; telescoping {telescope:.1e}; identity-init vs frame mean {identity:.1e}; subset counts {counts:?}; alpha boundaries {}",
            if alpha_ok { "exact" } else { "wrong" }
        ),
    )
}

fn run(cfg: &RunConfig) -> Result<TrainOutcome, String> {
    train(cfg, None).map_err(|e| e.to_string())
}

fn mechanism() -> Outcome {
    let start = Instant::now();
    let on = run(&config(MECHANISM, ""))?;
    let off = run(&config(MECHANISM, "use_difference = false"))?;
    let elapsed = start.elapsed();
    let r1 = |o: &TrainOutcome| o.history.epochs.last().unwrap().validation.t2v.r1;
    let steps = on.history.steps.len().max(off.history.steps.len());
    check(
        r1(&on) >= 90.0 && r1(&off) <= 60.0 && steps <= 500 && elapsed < Duration::from_secs(300),
        format!(
            "held-out T2V R@1 with differences {:.1}, without {:.1}; {steps} steps; {:.1}s",
            r1(&on),
            r1(&off),
            elapsed.as_secs_f64()
        ),
    )
}

fn overfit(first: &TrainOutcome, second: &TrainOutcome) -> Outcome {
    let last = first.history.epochs.last().unwrap();
    let loss = first.history.steps.last().unwrap().loss;
    let initial = first.history.steps[0].loss;
    let steps = first.history.steps.len();
    let same = encode_checkpoint(&first.params) == encode_checkpoint(&second.params)
        && first.history.steps.iter().zip(&second.history.steps).all(|(a, b)| a.loss.to_bits() == b.loss.to_bits());
    let r1 = last.validation.t2v.r1.min(last.validation.v2t.r1);
    check(
        r1 == 100.0 && loss < 0.05 && loss < initial && steps <= 200 && same,
        format!(
            "train R@1 {r1} (min of both directions), loss {initial:.4} -> {loss:.4} in {steps} steps, rerun {}",
            if same { "identical" } else { "differs" }
        ),
    )
}

fn determinism(first: &TrainOutcome, second: &TrainOutcome) -> Outcome {
    let a = encode_checkpoint(&first.params);
    let identical_ckpt = a == encode_checkpoint(&second.params);

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ds = generate_synthetic(&config(MECHANISM, "").synth).map_err(|e| e.to_string())?;
    ds.write_dir(dir.path()).map_err(|e| e.to_string())?;
    let loaded = EmbeddingDataset::load_dir(dir.path()).map_err(|e| e.to_string())?;
    let bytes = |d: &EmbeddingDataset| {
        (encode_videos(&d.videos, d.n_max, d.dim), encode_captions(&d.captions, d.dim), encode_pairs(&d.pairs))
    };
    let on_disk = (
        fs::read(dir.path().join("videos.emb")).unwrap(),
        fs::read(dir.path().join("captions.emb")).unwrap(),
        fs::read(dir.path().join("pairs.prs")).unwrap(),
    );
    let written = bytes(&loaded);
    let lossless = written == on_disk && decode_dataset(&written.0, &written.1, &written.2).is_ok_and(|d| d == loaded);
    check(
        identical_ckpt && lossless,
        format!(
            "checkpoints {} ({} bytes); embedding files {} after read and rewrite",
            if identical_ckpt { "bitwise identical" } else { "differ" },
            a.len(),
            if lossless { "bitwise identical" } else { "changed" }
        ),
    )
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |name: &str, outcome: Outcome| match outcome {
        Ok(detail) => println!("PASS {name}: {detail}"),
        Err(detail) => {
            failed += 1;
            println!("FAIL {name}: {detail}");
        }
    };
    report("gradient suite", gradient_suite());
    report("loss oracles", loss_oracles());
    report("metric oracle", metric_oracle());
    report("structural invariants", structural_invariants());
    report("mechanism experiment", mechanism());
    let cfg = config(OVERFIT, "");
    match (run(&cfg), run(&cfg)) {
        (Ok(a), Ok(b)) => {
            report("overfit experiment", overfit(&a, &b));
            report("determinism", determinism(&a, &b));
        }
        (Err(e), _) | (_, Err(e)) => {
            report("overfit experiment", Err(e.clone()));
            report("determinism", Err(e));
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
