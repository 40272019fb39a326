use std::collections::HashMap;
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use restd::attention::{PoolingMode, RegionGrid};
use restd::decoder::{restd_lstm_step, DecoderParams, DecoderState, ModelConfig, Variant};
use restd::decoding::{beam_decode, greedy_decode, masked_log_probs, BeamOptions, LengthNorm};
use restd::experiment::{ablate, median, ABLATION_VARIANTS};
use restd::features::FeatureRecord;
use restd::gradcheck::{check_block, check_config, Block};
use restd::io::{self, IoError};
use restd::metrics::{cider, corpus_bleu, meteor_lite, rouge_l, TokenizedPair};
use restd::planted::{calibrate_sigma, planted_signal_benchmark, PlantedConfig};
use restd::synth::{generate_dataset, SynthConfig};
use restd::training::{evaluate_teacher_forced, fit, TrainConfig};
use restd::vocab::{tokenize, Vocabulary, BOS, EOS};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn run(id: u32, name: &str, budget: Duration, check: impl FnOnce() -> Outcome) -> bool {
    let started = Instant::now();
    let o = check();
    let took = started.elapsed();
    let pass = o.pass && took < budget;
    println!(
        "criterion {id} {name}: {} ({}; {:.1} s of {} s)",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        took.as_secs_f64(),
        budget.as_secs()
    );
    pass
}

const GRAD_TOLERANCE: f64 = 1e-4;

fn gradient_fidelity() -> Outcome {
    let config = check_config();
    let mut worst = (0.0f64, Block::ALL[0], 0);
    for block in Block::ALL {
        for seed in 0..5 {
            let err = check_block(&config, block, seed).expect("gradient check runs");
            if err.is_nan() || err > worst.0 {
                worst = (err, block, seed);
            }
        }
    }
    outcome(
        worst.0 < GRAD_TOLERANCE,
        format!("max relative error {:.3e} ({} seed {}) < {GRAD_TOLERANCE:e}", worst.0, worst.1, worst.2),
    )
}

fn pair(id: &str, cand: &str, refs: &[&str]) -> TokenizedPair {
    TokenizedPair::new(id, cand, refs)
}

/// Counted n-grams keyed by their joined text.
fn ngram_counts(tokens: &[String], n: usize) -> HashMap<String, f64> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.join(" ")).or_insert(0.0) += 1.0;
        }
    }
    out
}

/// tf-idf cosine similarity averaged over references and n = 1..4, scaled
/// by 10, then by 100 for reporting.
fn cider_oracle(pairs: &[TokenizedPair]) -> f64 {
    let images = pairs.len() as f64;
    let mut score = 0.0;
    for p in pairs {
        let mut by_n = 0.0;
        for n in 1..=4 {
            let mut df: HashMap<String, f64> = HashMap::new();
            for q in pairs {
                let mut seen: Vec<String> = q.references.iter().flat_map(|r| ngram_counts(r, n).into_keys()).collect();
                seen.sort();
                seen.dedup();
                for g in seen {
                    *df.entry(g).or_insert(0.0) += 1.0;
                }
            }
            let weigh = |counts: HashMap<String, f64>| -> HashMap<String, f64> {
                counts
                    .into_iter()
                    .map(|(g, tf)| {
                        let d = df.get(&g).copied().unwrap_or(0.0).max(1.0);
                        let w = tf * (images.ln() - d.ln());
                        (g, w)
                    })
                    .collect()
            };
            let c = weigh(ngram_counts(&p.candidate, n));
            let norm = |v: &HashMap<String, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
            let mut sim = 0.0;
            for r in &p.references {
                let rv = weigh(ngram_counts(r, n));
                let dot: f64 = c.iter().map(|(g, a)| a * rv.get(g).copied().unwrap_or(0.0)).sum();
                let (na, nb) = (norm(&c), norm(&rv));
                if na > 0.0 && nb > 0.0 {
                    sim += dot / (na * nb);
                }
            }
            by_n += sim / p.references.len() as f64;
        }
        score += 10.0 * by_n / 4.0;
    }
    100.0 * score / images
}

const FIXTURE_TOLERANCE: f64 = 1e-6;
const CIDER_TOLERANCE: f64 = 1e-9;

fn metric_oracles() -> Outcome {
    let bleu1 = corpus_bleu(&[pair("a", "a man riding a horse", &["a man is riding a horse"])], 1).unwrap();
    let rouge = rouge_l(&[pair("a", "a b c d", &["a c b d"])]).unwrap();
    let meteor = meteor_lite(&[pair("a", "a b c", &["a b c"])]).unwrap();
    let corpus = vec![
        pair("img1", "a man rides a red bike", &["a man rides a bike", "a person riding a red bike"]),
        pair("img2", "a dog runs on grass", &["a dog runs", "the dog is running on the grass"]),
    ];
    let (got, want) = (cider(&corpus).unwrap(), cider_oracle(&corpus));
    let checks = [
        (bleu1, 81.873075307798, FIXTURE_TOLERANCE),
        (rouge, 75.0, FIXTURE_TOLERANCE),
        (meteor, 98.148148148148, FIXTURE_TOLERANCE),
        (got, want, CIDER_TOLERANCE),
    ];
    outcome(
        checks.iter().all(|&(a, b, tol)| (a - b).abs() < tol),
        format!(
            "BLEU-1 {bleu1:.10}, ROUGE-L {rouge:.10}, METEOR-lite {meteor:.10} within {FIXTURE_TOLERANCE:e}; \
             CIDEr {got:.12} vs oracle {want:.12} within {CIDER_TOLERANCE:e}"
        ),
    )
}

const ABLATION_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const ABLATION_EPOCHS: usize = 20;

fn variant_trend() -> Outcome {
    let data = generate_dataset(&SynthConfig {
        count: 1200,
        ratios: [1000.0 / 1200.0, 0.0, 200.0 / 1200.0],
        seed: 1,
        ..SynthConfig::default()
    })
    .unwrap();
    let base = TrainConfig {
        epochs: ABLATION_EPOCHS,
        ..TrainConfig::default()
    };
    let a = ablate(
        &data.train.dataset,
        &data.test.dataset,
        &base,
        &ABLATION_VARIANTS,
        &ABLATION_SEEDS,
        &BeamOptions::new(3, 19),
    )
    .unwrap();
    let cider_of = |v| a.row(v).unwrap().median.cider;
    let (bu, td, res) = (cider_of(Variant::BuOnly), cider_of(Variant::BuTd), cider_of(Variant::BuResTd));
    outcome(
        res > bu && res >= td,
        format!(
            "median CIDEr BU_Only {bu:.2}, BU+Td {td:.2}, BU+ResTd {res:.2}; need ResTd > BU_Only and ResTd >= Td; \
             {} train / {} test scenes, V={}, {ABLATION_EPOCHS} epochs, beam 3",
            data.train.dataset.len(),
            data.test.dataset.len(),
            data.vocab().len()
        ),
    )
}

const PLANTED_TRIALS: usize = 500;
const PLANTED_SEEDS: std::ops::Range<u64> = 100..105;

fn planted_surrogate() -> Outcome {
    let base = PlantedConfig::default();
    let (sigma, calibrated) = calibrate_sigma(&base, PLANTED_TRIALS, 0.6, 14).unwrap();
    let mut avg = Vec::new();
    let mut gaps = Vec::new();
    let mut between = 0;
    for seed in PLANTED_SEEDS {
        let cfg = PlantedConfig {
            noise_sigma: sigma,
            seed,
            ..base.clone()
        };
        let acc = |m| 100.0 * planted_signal_benchmark(m, PLANTED_TRIALS, &cfg).unwrap();
        let (a, t, r) = (
            acc(PoolingMode::Average),
            acc(PoolingMode::Attention),
            acc(PoolingMode::ResidualAttention),
        );
        avg.push(a);
        gaps.push(r - a);
        between += usize::from(a <= t && t <= r);
    }
    let (avg_med, gap_med) = (median(&mut avg), median(&mut gaps));
    outcome(
        (55.0..=65.0).contains(&avg_med) && gap_med >= 10.0 && between >= 3,
        format!(
            "sigma {sigma:.4} (calibration {:.1}%); average median {avg_med:.1}% in [55, 65]; \
             residual minus average median {gap_med:.1} >= 10 points; attention between in {between}/5 >= 3",
            100.0 * calibrated
        ),
    )
}

fn random_record(rng: &mut Xoshiro256PlusPlus, dim: usize) -> FeatureRecord {
    let grids = (0..3)
        .map(|_| RegionGrid::new(2, 2, dim, (0..4 * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
        .collect();
    FeatureRecord::new("x", (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(), grids).unwrap()
}

fn random_model(rng: &mut Xoshiro256PlusPlus, vocab: usize) -> DecoderParams {
    let mut c = ModelConfig::new(6, vocab);
    c.embed_dim = 5;
    c.hidden1 = 6;
    c.hidden2 = 6;
    c.joint_dim = 5;
    c.mlp_hidden = 4;
    let mut p = DecoderParams::init(c, rng).unwrap();
    for v in p.out_w.data_mut() {
        *v *= 3.0;
    }
    for v in p.out_b.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    p
}

/// Best sequence by plain enumeration of every token path up to `max_len`.
fn enumerate_best(f: &FeatureRecord, p: &DecoderParams, max_len: usize) -> (Vec<usize>, f64) {
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut frontier = vec![(Vec::new(), 0.0, DecoderState::zeros(&p.config), BOS)];
    while let Some((prefix, lp, state, prev)) = frontier.pop() {
        let (next, logits, _) = restd_lstm_step(&state, prev, f, p).unwrap();
        for (t, l) in masked_log_probs(&logits).into_iter().enumerate() {
            if l == f64::NEG_INFINITY {
                continue;
            }
            let mut seq = prefix.clone();
            seq.push(t);
            let score = lp + l;
            if t == EOS || seq.len() == max_len {
                let better = match &best {
                    None => true,
                    Some((bs, b)) => score > *b || (score == *b && seq < *bs),
                };
                if better {
                    best = Some((seq, score));
                }
            } else {
                frontier.push((seq, score, next.clone(), t));
            }
        }
    }
    best.unwrap()
}

fn decoding_equivalence() -> Outcome {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
    let mut greedy_matches = 0;
    for _ in 0..100 {
        let vocab = rng.random_range(5..12);
        let p = random_model(&mut rng, vocab);
        let f = random_record(&mut rng, 6);
        let g = greedy_decode(&f, &p, 8).unwrap();
        let b = beam_decode(&f, &p, &BeamOptions::new(1, 8)).unwrap();
        greedy_matches += usize::from(b[0].caption() == g);
    }
    let mut exhaustive_matches = 0;
    let mut cases = 0;
    for vocab in [5, 8] {
        for _ in 0..5 {
            let p = random_model(&mut rng, vocab);
            let f = random_record(&mut rng, 6);
            let opts = BeamOptions {
                width: 625,
                max_len: 4,
                length_norm: LengthNorm::Off,
            };
            let beam = &beam_decode(&f, &p, &opts).unwrap()[0];
            let (tokens, _) = enumerate_best(&f, &p, 4);
            exhaustive_matches += usize::from(beam.tokens == tokens);
            cases += 1;
        }
    }
    outcome(
        greedy_matches == 100 && exhaustive_matches == cases,
        format!(
            "width 1 equals greedy on {greedy_matches}/100 models; width 625, max_len 4 equals enumeration on \
             {exhaustive_matches}/{cases} models (V=5 and V=8)"
        ),
    )
}

const LEARNABILITY_TARGET: f64 = 0.95;
const LEARNABILITY_EPOCHS: usize = 50;

fn learnability() -> Outcome {
    let data = generate_dataset(&SynthConfig {
        count: 200,
        ratios: [1.0, 0.0, 0.0],
        seed: 1,
        ..SynthConfig::default()
    })
    .unwrap();
    let train = data.train.dataset.first_reference_only();
    let config = TrainConfig {
        epochs: LEARNABILITY_EPOCHS,
        variant: Variant::BuResTd,
        ..TrainConfig::default()
    };
    let (params, _) = fit(&train, &config).unwrap();
    let (_, acc) = evaluate_teacher_forced(&params, &train).unwrap();
    outcome(
        acc >= LEARNABILITY_TARGET,
        format!(
            "teacher-forced token accuracy {:.2}% >= {:.0}% on {} scenes after {LEARNABILITY_EPOCHS} epochs",
            100.0 * acc,
            100.0 * LEARNABILITY_TARGET,
            train.len()
        ),
    )
}

const FLIP_TRIALS: usize = 100;

fn round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(9);

    let record = random_record(&mut rng, 6);
    let path = dir.path().join("x.rtdf");
    io::write_rtdf(&record, &path).unwrap();
    let back = io::read_rtdf(&path).unwrap();
    let f32_exact = |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (*x as f32) as f64 == *y);
    let rtdf_ok = back.image_id() == record.image_id()
        && f32_exact(record.global(), back.global())
        && record.grids().len() == back.grids().len()
        && record.grids().iter().zip(back.grids()).all(|(a, b)| f32_exact(a.data(), b.data()));

    let params = random_model(&mut rng, 9);
    let ckpt = dir.path().join("m.rtdc");
    io::save_checkpoint(&params, &ckpt).unwrap();
    let loaded = io::load_checkpoint(&ckpt, &params.config).unwrap();
    let ckpt_ok = params.tensors().iter().zip(loaded.tensors()).all(|(a, b)| {
        a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
    });

    let texts = ["a man rides a bike", "there is a creature swinging a blade"].map(tokenize);
    let vocab = Vocabulary::from_corpus(texts.iter().map(Vec::as_slice));
    let vpath = dir.path().join("v.txt");
    io::save_vocab(&vocab, &vpath).unwrap();
    let vocab_ok = io::load_vocab(&vpath).unwrap() == vocab;

    let bytes = std::fs::read(&ckpt).unwrap();
    let (mut detected, mut by_crc) = (0, 0);
    for _ in 0..FLIP_TRIALS {
        let mut bad = bytes.clone();
        let at = rng.random_range(0..bad.len());
        bad[at] ^= rng.random_range(1..=255u8);
        match io::decode_checkpoint(&bad) {
            Ok(_) => {}
            Err(e) => {
                detected += 1;
                by_crc += usize::from(matches!(e, IoError::Crc { .. }));
            }
        }
    }
    outcome(
        rtdf_ok && ckpt_ok && vocab_ok && detected == FLIP_TRIALS,
        format!(
            "RTDF f32-exact {rtdf_ok}, checkpoint bit-exact {ckpt_ok}, vocab exact {vocab_ok}; \
             {detected}/{FLIP_TRIALS} byte flips rejected ({by_crc} of them by the CRC check)"
        ),
    )
}

fn restd(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_restd"))
        .args(args)
        .env("RUST_LOG", "warn")
        .stdout(Stdio::null())
        .status()
        .unwrap();
    assert!(status.success(), "restd {args:?} exited with {status}");
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let at = |p: &str| dir.path().join(p).to_str().unwrap().to_string();
    restd(&["gen-data", "--count", "60", "--seed", "3", "--out", &at("data")]);
    for out in ["a", "b"] {
        restd(&["train", "--data", &at("data"), "--epochs", "3", "--seed", "11", "--out", &at(out)]);
    }
    let same = |name: &str| {
        let read = |d: &str| std::fs::read(Path::new(&at(d)).join(name)).unwrap();
        read("a") == read("b")
    };
    let (log, ckpt) = (same("train_log.csv"), same("model.rtdc"));
    outcome(log && ckpt, format!("train log identical {log}, checkpoint identical {ckpt}"))
}

fn main() {
    let secs = Duration::from_secs;
    let results = [
        run(1, "gradient fidelity", secs(30), gradient_fidelity),
        run(2, "metric oracles", secs(5), metric_oracles),
        run(3, "variant trend", secs(600), variant_trend),
        run(4, "planted-signal pooling", secs(180), planted_surrogate),
        run(5, "decoding equivalence", secs(60), decoding_equivalence),
        run(6, "learnability", secs(120), learnability),
        run(7, "round trips", secs(60), round_trips),
        run(8, "determinism", secs(120), determinism),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
