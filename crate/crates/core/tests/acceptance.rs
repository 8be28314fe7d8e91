//! Acceptance checks, one verdict line per criterion.
//!
//! Runs every check by default. `DEMIXKIT_ACCEPTANCE=1,2,10` restricts the
//! run to the listed criteria while iterating locally.

use std::panic::catch_unwind;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use demixkit::audio::{Corpus, Split, SynthParams, Waveform};
use demixkit::autodiff::{Tape, Tensor, POOL_EPSILON};
use demixkit::config::{BankConfig, CorpusSource, ExperimentConfig, GridConfig, Seeds};
use demixkit::demix::{test_set, train_head, training_pools, DemixVariant, Direction, FinalActivation, MixtureSet, StepTwoConfig};
use demixkit::embedding::{build_bank, train_step_one, EmbeddingBank, ExtractorConfig, StepOneConfig, StepOneModel};
use demixkit::eval::{cosine, evaluate_before, evaluate_clean, evaluate_head, Judge};
use demixkit::mixer::{measure_snr, mix_at_snr, sample_pairs, snr_scale};
use demixkit::pipeline::{gradient_suite, run_grid};
use demixkit::store::Archive;
use demixkit::Error;

// Tolerances and budgets, one per criterion.
const GRAD_TOLERANCE: f64 = 1e-4;
const GRAD_POINTS: usize = 10;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const MIXER_PAIRS: usize = 100;
const MIXER_TOLERANCE_DB: f64 = 1e-9;
const STEP_ONE_MIN_ACCURACY: f64 = 0.95;
const STEP_ONE_MAX_EPOCHS: usize = 20;
const STEP_ONE_BUDGET: Duration = Duration::from_secs(15 * 60);
const DEMIX_MIN_GAIN: f64 = 0.25;
const DEMIX_MIN_COSINE: f64 = 0.75;
const HEAD_BUDGET: Duration = Duration::from_secs(10 * 60);
const ORDER_MARGIN: f64 = 0.10;
const ORDER_SEEDS: [u64; 3] = [1, 2, 3];
const ORDER_MIN_HOLDING: usize = 2;
const DIRECTION_MAX_RATIO: f64 = 2.0;
const FUZZ_ITERATIONS: usize = 1000;
const ORACLE_TOLERANCE: f64 = 1e-12;
const ORACLE_TRIALS: usize = 200;
const PREMISE_MIN_FRACTION: f64 = 0.80;

const SNRS_DB: [f64; 3] = [-5.0, 0.0, 5.0];
const TEST_PAIRS: usize = 200;
const SEED: u64 = 0;

struct Verdicts {
    failed: Vec<String>,
}

impl Verdicts {
    fn record(&mut self, id: &str, pass: bool, text: String) {
        println!("[{}] {id} {text}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(id.to_string());
        }
    }

    fn info(&self, id: &str, text: String) {
        println!("[INFO] {id} {text}");
    }
}

fn minutes(d: Duration) -> f64 {
    d.as_secs_f64() / 60.0
}

// ---------------------------------------------------------------- C1

fn c1_gradients(v: &mut Verdicts) {
    let start = Instant::now();
    let reports = gradient_suite(SEED, GRAD_POINTS).expect("gradient suite runs");
    let elapsed = start.elapsed();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failing: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed(GRAD_TOLERANCE))
        .map(|r| r.name.as_str())
        .collect();
    v.record(
        "C1",
        failing.is_empty() && elapsed < GRAD_BUDGET,
        format!(
            "gradient suite: {} checks at {GRAD_POINTS} points, worst rel err {worst:.2e} (< {GRAD_TOLERANCE:e}), \
             failing {failing:?}, {:.1} s (< {} s)",
            reports.len(),
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    );
}

// ---------------------------------------------------------------- C2

fn random_wave(rng: &mut ChaCha8Rng) -> Waveform {
    let n = rng.gen_range(800..16_000);
    let amp = rng.gen_range(0.01..0.9);
    Waveform::new((0..n).map(|_| amp * rng.gen_range(-1.0..1.0)).collect(), 16_000).unwrap()
}

fn power(x: &[f64]) -> f64 {
    let mut s = 0.0;
    for v in x {
        s += v * v;
    }
    s / x.len() as f64
}

fn c2_mixer(v: &mut Verdicts) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst: f64 = 0.0;
    for _ in 0..MIXER_PAIRS {
        let (a, b) = (random_wave(&mut rng), random_wave(&mut rng));
        let n = a.len().min(b.len());
        for snr in SNRS_DB {
            let m = mix_at_snr(&a, &b, snr).unwrap();
            let scaled: Vec<f64> = b.samples[..n].iter().map(|s| s * m.scale).collect();
            let by_loop = 10.0 * (power(&a.samples[..n]) / power(&scaled)).log10();
            let by_lib = measure_snr(&a.samples[..n], &scaled).unwrap();
            worst = worst.max((by_loop - snr).abs()).max((by_lib - snr).abs());
        }
    }
    v.record(
        "C2",
        worst <= MIXER_TOLERANCE_DB,
        format!("mixer: {MIXER_PAIRS} pairs x {SNRS_DB:?} dB, worst |measured - requested| {worst:.2e} dB (<= {MIXER_TOLERANCE_DB:e})"),
    );
}

// ---------------------------------------------------------------- C9

fn random_archive(rng: &mut ChaCha8Rng) -> Archive {
    let mut a = Archive::new("checkpoint", "fuzz", rng.gen());
    for t in 0..rng.gen_range(1..4) {
        let (r, c) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let data = (0..r * c).map(|_| rng.gen_range(-1e3..1e3)).collect();
        a.push(format!("t{t}"), Tensor::matrix(r, c, data).unwrap());
    }
    a.set_meta("epochs", rng.gen_range(0..100u32)).unwrap();
    a.set_meta("snr_db", rng.gen_range(-10.0..10.0)).unwrap();
    a
}

/// Mutations that must always be refused.
fn corrupt(bytes: &[u8], kind: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut b = bytes.to_vec();
    let header_len = u64::from_le_bytes(b[8..16].try_into().unwrap()) as usize;
    let payload_start = 16 + header_len;
    match kind {
        0 => b.truncate(rng.gen_range(0..b.len())),
        1 => {
            let i = rng.gen_range(payload_start..b.len());
            b[i] ^= 1 << rng.gen_range(0..8);
        }
        2 => b[rng.gen_range(0..4)] ^= 0x20,
        3 => b[4] = b[4].wrapping_add(rng.gen_range(1..=255)),
        4 => b.extend((0..rng.gen_range(1..32)).map(|_| rng.gen::<u8>())),
        _ => {
            let too_long = (b.len() as u64 * 2).to_le_bytes();
            b[8..16].copy_from_slice(&too_long);
        }
    }
    b
}

fn c9_persistence(v: &mut Verdicts) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fuzz.sedm");
    let (mut crashes, mut mismatches, mut accepted_corrupt, mut arbitrary_ok) = (0, 0, 0, 0);
    for i in 0..FUZZ_ITERATIONS {
        let a = random_archive(&mut rng);
        let bytes = a.to_bytes().unwrap();
        a.save(&path).unwrap();
        match catch_unwind(|| Archive::load(&path).and_then(|b| b.to_bytes())) {
            Ok(Ok(again)) if again == bytes => {}
            Ok(_) => mismatches += 1,
            Err(_) => crashes += 1,
        }
        let bad = corrupt(&bytes, i % 6, &mut rng);
        match catch_unwind(|| Archive::from_bytes(&bad)) {
            Ok(Err(Error::Corrupt(_))) => {}
            Ok(_) => accepted_corrupt += 1,
            Err(_) => crashes += 1,
        }
        // Arbitrary single-byte edits may land in harmless header text, so
        // only a clean outcome is required here.
        let mut edit = bytes.clone();
        let j = rng.gen_range(0..edit.len());
        edit[j] = rng.gen();
        match catch_unwind(|| {
            let a = Archive::from_bytes(&edit)?;
            let _ = StepOneModel::from_archive(&a);
            let _ = EmbeddingBank::from_archive(&a);
            Ok::<_, Error>(())
        }) {
            Ok(Ok(())) => arbitrary_ok += 1,
            Ok(Err(_)) => {}
            Err(_) => crashes += 1,
        }
    }
    let wrong_kind = Archive::new("checkpoint", "x", 0);
    let kind_refused = EmbeddingBank::from_archive(&wrong_kind).is_err() && StepOneModel::from_archive(&Archive::new("bank", "x", 0)).is_err();
    let missing = Archive::load(&dir.path().join("absent.sedm")).is_err();
    v.record(
        "C9",
        crashes == 0 && mismatches == 0 && accepted_corrupt == 0 && kind_refused && missing,
        format!(
            "persistence: {FUZZ_ITERATIONS} iterations, {crashes} crashes, {mismatches} round-trip mismatches, \
             {accepted_corrupt} corrupt files accepted (all must be 0); wrong kind refused {kind_refused}, \
             missing file refused {missing}; {arbitrary_ok} arbitrary edits still parsed"
        ),
    );
}

// ---------------------------------------------------------------- C10

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= ORACLE_TOLERANCE * b.abs().max(1.0)
}

fn c10_oracles(v: &mut Verdicts) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let (mut pool_ok, mut mae_ok, mut cos_ok, mut snr_ok) = (0, 0, 0, 0);
    for _ in 0..ORACLE_TRIALS {
        // Statistics pooling: per-segment mean and sqrt(variance + eps).
        let (segs, frames, d) = (rng.gen_range(1..4), rng.gen_range(1..12), rng.gen_range(1..7));
        let x: Vec<f64> = (0..segs * frames * d).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::matrix(segs * frames, d, x.clone()).unwrap());
        let pv = tape.stats_pool(xv, segs).unwrap();
        let got = tape.value(pv).clone();
        let mut all = true;
        for s in 0..segs {
            for c in 0..d {
                let mut sum = 0.0;
                for f in 0..frames {
                    sum += x[(s * frames + f) * d + c];
                }
                let mean = sum / frames as f64;
                let mut sq = 0.0;
                for f in 0..frames {
                    let dev = x[(s * frames + f) * d + c] - mean;
                    sq += dev * dev;
                }
                let std = (sq / frames as f64 + POOL_EPSILON).sqrt();
                all &= close(got.get(s, c), mean) && close(got.get(s, d + c), std);
            }
        }
        pool_ok += all as usize;

        // Mean absolute error.
        let (r, c) = (rng.gen_range(1..5), rng.gen_range(1..9));
        let p: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let pv = tape.constant(Tensor::matrix(r, c, p.clone()).unwrap());
        let tv = tape.constant(Tensor::matrix(r, c, t.clone()).unwrap());
        let lv = tape.mae_loss(pv, tv).unwrap();
        let mut sum = 0.0;
        for i in 0..r * c {
            sum += (p[i] - t[i]).abs();
        }
        mae_ok += close(tape.value(lv).item(), sum / (r * c) as f64) as usize;

        // Cosine similarity.
        let n = rng.gen_range(1..64);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for i in 0..n {
            dot += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        cos_ok += close(cosine(&a, &b).unwrap(), dot / (na.sqrt() * nb.sqrt())) as usize;

        // Interferer gain for a requested SNR.
        let (wa, wb) = (random_wave(&mut rng), random_wave(&mut rng));
        let snr = rng.gen_range(-20.0..20.0);
        let m = wa.len().min(wb.len());
        let (pa, pb) = (power(&wa.samples[..m]), power(&wb.samples[..m]));
        let gain = (pa / (pb * 10f64.powf(snr / 10.0))).sqrt();
        let mix = mix_at_snr(&wa, &wb, snr).unwrap();
        let mut samples = true;
        for i in 0..m {
            samples &= close(mix.waveform.samples[i], wa.samples[i] + gain * wb.samples[i]);
        }
        snr_ok += (close(mix.scale, gain) && close(snr_scale(pa, pb, snr), gain) && samples) as usize;
    }
    let all = [pool_ok, mae_ok, cos_ok, snr_ok].iter().all(|&k| k == ORACLE_TRIALS);
    v.record(
        "C10",
        all,
        format!(
            "loop oracles at {ORACLE_TOLERANCE:e}: stats_pool {pool_ok}/{ORACLE_TRIALS}, MAE {mae_ok}/{ORACLE_TRIALS}, \
             cosine {cos_ok}/{ORACLE_TRIALS}, SNR scaling {snr_ok}/{ORACLE_TRIALS}"
        ),
    );
}

// ---------------------------------------------------------------- C4 to C7

struct StepOne {
    corpus: Corpus,
    model: StepOneModel,
    bank: EmbeddingBank,
}

fn c4_step_one(v: &mut Verdicts, check: bool) -> StepOne {
    let start = Instant::now();
    let corpus = Corpus::synthetic(&SynthParams::default()).unwrap();
    let cfg = StepOneConfig::default();
    let (model, log) = train_step_one(&corpus, &ExtractorConfig::default(), &cfg, SEED, |r| {
        log::info!("epoch {} loss {:.4} holdout {:?}", r.epoch, r.loss, r.holdout_accuracy)
    })
    .unwrap();
    let elapsed = start.elapsed();
    let acc = log.last().and_then(|r| r.holdout_accuracy).unwrap_or(0.0);
    if check {
        let p = SynthParams::default();
        v.record(
            "C4",
            acc >= STEP_ONE_MIN_ACCURACY && log.len() <= STEP_ONE_MAX_EPOCHS && elapsed <= STEP_ONE_BUDGET,
            format!(
                "step one on {} speakers x {} utts x {} s: held-out accuracy {:.1}% (>= {:.0}%) after {} epochs (<= {STEP_ONE_MAX_EPOCHS}), \
                 {:.1} min (<= {:.0} min)",
                p.speakers,
                p.utts_per_speaker,
                p.duration_s,
                100.0 * acc,
                100.0 * STEP_ONE_MIN_ACCURACY,
                log.len(),
                minutes(elapsed),
                minutes(STEP_ONE_BUDGET)
            ),
        );
    }
    let b = BankConfig::default();
    let fp = model.fingerprint().unwrap();
    let bank = build_bank(&model.extractor, &fp, &corpus, b.segments_per_speaker, b.crop_frames, SEED).unwrap();
    StepOne { corpus, model, bank }
}

/// Step-two settings for C5 to C7. The output ReLU of the concat heads is
/// dropped: it cannot produce the negative components of the bank
/// embeddings, which caps cosine below the C5 floor (see `relu_ceiling`).
fn step_two_cfg() -> StepTwoConfig {
    StepTwoConfig {
        final_activation: FinalActivation::None,
        ..StepTwoConfig::default()
    }
}

/// Best mean cosine any non-negative output can reach against the bank:
/// the mean over speakers of |t+| / |t|.
fn relu_ceiling(bank: &EmbeddingBank) -> f64 {
    let mut sum = 0.0;
    for spk in &bank.speakers {
        let (mut pos, mut all) = (0.0, 0.0);
        for x in bank.get(spk).unwrap() {
            pos += x.max(0.0) * x.max(0.0);
            all += x * x;
        }
        sum += (pos / all).sqrt();
    }
    sum / bank.len() as f64
}

struct SnrSetup {
    test: MixtureSet,
    pools: Vec<MixtureSet>,
    pools_time: Duration,
}

fn setup(s: &StepOne, snr: f64, seed: u64, cfg: &StepTwoConfig) -> SnrSetup {
    let pairs = sample_pairs(&s.corpus.manifest, Split::Test, TEST_PAIRS, snr, seed).unwrap();
    let test = test_set(&s.model.extractor, &s.corpus, &pairs).unwrap();
    let start = Instant::now();
    let pools = training_pools(&s.model.extractor, &s.corpus, snr, cfg, seed).unwrap();
    SnrSetup {
        test,
        pools,
        pools_time: start.elapsed(),
    }
}

fn judge(s: &StepOne) -> Judge<'_> {
    Judge {
        classifier: &s.model.classifier,
        labels: &s.model.speakers,
        bank: &s.bank,
    }
}

/// The mixture embedding should sit nearer both of its speakers' bank
/// entries than a random third speaker's.
fn premise(v: &mut Verdicts, s: &StepOne, set: &MixtureSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut held = 0;
    for (r, (t, i)) in set.speakers.iter().enumerate() {
        let e = set.embeddings.row_slice(r);
        let others: Vec<&String> = s.bank.speakers.iter().filter(|x| *x != t && *x != i).collect();
        let third = others[rng.gen_range(0..others.len())];
        let cos = |spk: &str| cosine(e, s.bank.get(spk).unwrap()).unwrap();
        let c3 = cos(third);
        held += (cos(t) > c3 && cos(i) > c3) as usize;
    }
    let frac = held as f64 / set.len() as f64;
    v.record(
        "P1",
        frac >= PREMISE_MIN_FRACTION,
        format!(
            "mixture embedding at 0 dB nearer both speakers than a random third: {held}/{} pairs = {:.1}% (>= {:.0}%)",
            set.len(),
            100.0 * frac,
            100.0 * PREMISE_MIN_FRACTION
        ),
    );
}

fn c5_c7_zero_db(v: &mut Verdicts, s: &StepOne, run5: bool, run7: bool) {
    let cfg = step_two_cfg();
    let set = setup(s, 0.0, SEED, &cfg);
    let j = judge(s);
    let d = Direction::KnownInterferer;
    let start = Instant::now();
    let (head, ki_log) = train_head(DemixVariant::SeparateConcat, &set.pools, &s.bank, d, &cfg, SEED).unwrap();
    let head_time = set.pools_time + start.elapsed();
    if run5 {
        premise(v, s, &set.test);
        let before = evaluate_before(&set.test, d, &j).unwrap();
        let after = evaluate_head(&head, &set.test, d, &j).unwrap();
        let clean = evaluate_clean(&s.model.extractor, &s.corpus, &set.test, d, &j).unwrap();
        let gain = after.accuracy - before.accuracy;
        v.record(
            "C5",
            gain >= DEMIX_MIN_GAIN && after.cosine >= DEMIX_MIN_COSINE && head_time <= HEAD_BUDGET,
            format!(
                "Separate-Concat (linear output) at 0 dB ({} pairs): accuracy {:.1}% vs Before {:.1}% (+{:.1} points, need >= {:.0}), \
                 cosine {:.3} (>= {DEMIX_MIN_COSINE}), {:.1} min incl. mixture embedding (<= {:.0} min)",
                after.n_examples,
                100.0 * after.accuracy,
                100.0 * before.accuracy,
                100.0 * gain,
                100.0 * DEMIX_MIN_GAIN,
                after.cosine,
                minutes(head_time),
                minutes(HEAD_BUDGET)
            ),
        );
        v.info(
            "C5",
            format!(
                "Before cosine {:.3}; Clean accuracy {:.1}%",
                before.cosine,
                100.0 * clean.accuracy
            ),
        );
        // Same pools with the output ReLU kept, for comparison only.
        let relu = StepTwoConfig {
            final_activation: FinalActivation::Relu,
            ..cfg.clone()
        };
        let (h, _) = train_head(DemixVariant::SeparateConcat, &set.pools, &s.bank, d, &relu, SEED).unwrap();
        let c = evaluate_head(&h, &set.test, d, &j).unwrap();
        v.info(
            "C5",
            format!(
                "with output ReLU: accuracy {:.1}%, cosine {:.3}; cosine ceiling for non-negative outputs on this bank {:.3}",
                100.0 * c.accuracy,
                c.cosine,
                relu_ceiling(&s.bank)
            ),
        );
    }
    if run7 {
        let (_, kt_log) = train_head(DemixVariant::SeparateConcat, &set.pools, &s.bank, Direction::KnownTarget, &cfg, SEED).unwrap();
        let ratio = kt_log.final_mae.max(ki_log.final_mae) / kt_log.final_mae.min(ki_log.final_mae);
        let trained = kt_log.final_mae < kt_log.initial_mae && kt_log.final_mae.is_finite();
        v.record(
            "C7",
            trained && ratio <= DIRECTION_MAX_RATIO,
            format!(
                "Separate-Concat (linear output) at 0 dB: known-target MAE {:.4} -> {:.4}, known-interferer final MAE {:.4}, \
                 ratio {ratio:.3} (<= {DIRECTION_MAX_RATIO})",
                kt_log.initial_mae, kt_log.final_mae, ki_log.final_mae
            ),
        );
    }
}

fn c6_ordering(v: &mut Verdicts, s: &StepOne) {
    let cfg = step_two_cfg();
    let j = judge(s);
    let d = Direction::KnownInterferer;
    let mut holding = 0;
    let mut details = Vec::new();
    for seed in ORDER_SEEDS {
        let set = setup(s, 5.0, seed, &cfg);
        let acc = |variant| {
            let (h, _) = train_head(variant, &set.pools, &s.bank, d, &cfg, seed).unwrap();
            evaluate_head(&h, &set.test, d, &j).unwrap().accuracy
        };
        let before = evaluate_before(&set.test, d, &j).unwrap().accuracy;
        let (sub, concat1, sep) = (acc(DemixVariant::Sub), acc(DemixVariant::Concat1), acc(DemixVariant::SeparateConcat));
        let ok = sep - concat1 >= ORDER_MARGIN && sub - before >= ORDER_MARGIN;
        holding += ok as usize;
        details.push(format!(
            "seed {seed}: Separate-Concat {:.1} / Concat1 {:.1} / Sub {:.1} / Before {:.1} {}",
            100.0 * sep,
            100.0 * concat1,
            100.0 * sub,
            100.0 * before,
            if ok { "holds" } else { "fails" }
        ));
    }
    v.record(
        "C6",
        holding >= ORDER_MIN_HOLDING,
        format!(
            "ordering at 5 dB (Separate-Concat with linear output), margin {:.0} points: holds for {holding}/{} seeds (need >= {ORDER_MIN_HOLDING}); {}",
            100.0 * ORDER_MARGIN,
            ORDER_SEEDS.len(),
            details.join("; ")
        ),
    );
}

// ---------------------------------------------------------------- C8

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// A scaled-down grid: every stage, variant, SNR and direction, with small
/// layers and few epochs so two full runs fit in the suite.
fn reduced_config() -> ExperimentConfig {
    ExperimentConfig {
        corpus: CorpusSource::Synthetic(SynthParams {
            speakers: 6,
            utts_per_speaker: 4,
            duration_s: 1.0,
            seed: SEED,
        }),
        extractor: ExtractorConfig {
            frame_dim: 32,
            residual_blocks: 1,
            pool_dim: 48,
            segment_dim: 32,
            embedding_dim: 24,
            ..ExtractorConfig::default()
        },
        step_one: StepOneConfig {
            epochs: 3,
            batch_size: 8,
            crop_frames: 50,
            classifier_hidden: 32,
            holdout_crops: 2,
            ..StepOneConfig::default()
        },
        bank: BankConfig {
            segments_per_speaker: 10,
            crop_frames: 50,
        },
        step_two: StepTwoConfig {
            epochs: 3,
            batch_size: 8,
            mixture_pools: 2,
            crops_per_mixture: 2,
            crop_frames: 50,
            ..StepTwoConfig::default()
        },
        grid: GridConfig {
            test_pairs: 20,
            ..GridConfig::default()
        },
        seeds: Seeds::all(SEED),
    }
}

fn c8_determinism(v: &mut Verdicts) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = reduced_config();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_grid(&cfg, &a).unwrap();
    run_grid(&cfg, &b).unwrap();
    let (fa, fb) = (files(&a), files(&b));
    let differing: Vec<&str> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let count = |pred: &dyn Fn(&str) -> bool| fa.iter().filter(|(n, _)| pred(n)).count();
    let heads = count(&|n| n.starts_with("heads"));
    let has = |name: &str| fa.iter().any(|(n, _)| n == name);
    let complete = has("extractor.sedm") && has("bank.sedm") && has("report.json") && has("report.csv") && heads == 36;
    v.record(
        "C8",
        fa.len() == fb.len() && differing.is_empty() && complete,
        format!(
            "reduced grid run twice: {} files, {heads} heads, checkpoint/bank/reports present {complete}, differing {differing:?}",
            fa.len()
        ),
    );
}

// ----------------------------------------------------------------

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let only: Option<Vec<u32>> = std::env::var("DEMIXKIT_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let run = |c: u32| only.as_ref().map_or(true, |o| o.contains(&c));
    let mut v = Verdicts { failed: Vec::new() };
    let start = Instant::now();

    if run(10) {
        c10_oracles(&mut v);
    }
    if run(2) {
        c2_mixer(&mut v);
    }
    if run(9) {
        c9_persistence(&mut v);
    }
    if run(1) {
        c1_gradients(&mut v);
    }
    if run(3) {
        v.info(
            "C3",
            "published table figures need licensed corpora and are not reproduced; C4 to C7 check the corresponding properties".into(),
        );
    }
    if run(8) {
        c8_determinism(&mut v);
    }
    if run(4) || run(5) || run(6) || run(7) {
        let s = c4_step_one(&mut v, run(4));
        if run(5) || run(7) {
            c5_c7_zero_db(&mut v, &s, run(5), run(7));
        }
        if run(6) {
            c6_ordering(&mut v, &s);
        }
    }

    println!("acceptance finished in {:.1} min", minutes(start.elapsed()));
    if v.failed.is_empty() {
        println!("all criteria passed");
    } else {
        println!("failed: {}", v.failed.join(", "));
        std::process::exit(1);
    }
}
