use super::*;
use crate::audio::{Corpus, Split, SynthParams};
use crate::autodiff::gradcheck::{uniform, SUITE_TOLERANCE};
use crate::autodiff::{Mode, Tape, Tensor};
use crate::embedding::{build_bank, EmbeddingBank, Extractor, ExtractorConfig};
use crate::error::Error;
use crate::mixer::{sample_pairs, MixSpec};
use crate::rng::{stream, Purpose};
use crate::store::Archive;

struct Fixture {
    corpus: Corpus,
    extractor: Extractor,
    bank: EmbeddingBank,
}

fn fixture() -> Fixture {
    let corpus = Corpus::synthetic(&SynthParams {
        speakers: 4,
        utts_per_speaker: 4,
        duration_s: 0.5,
        seed: 5,
    })
    .unwrap();
    let cfg = ExtractorConfig {
        frame_dim: 8,
        residual_blocks: 1,
        pool_dim: 6,
        segment_dim: 8,
        embedding_dim: 6,
        ..ExtractorConfig::default()
    };
    let extractor = Extractor::new(cfg, &mut stream(0, Purpose::ExtractorInit, 0)).unwrap();
    let bank = build_bank(&extractor, "ex", &corpus, 10, 25, 1).unwrap();
    Fixture {
        corpus,
        extractor,
        bank,
    }
}

fn small_cfg() -> StepTwoConfig {
    StepTwoConfig {
        epochs: 40,
        batch_size: 8,
        mixture_pools: 2,
        crops_per_mixture: 3,
        crop_frames: 25,
        ..StepTwoConfig::default()
    }
}

#[test]
fn variant_gradients_ten_points_each() {
    let reports = variant_suite(&mut stream(7, Purpose::GradCheck, 0), 10).unwrap();
    assert_eq!(reports.len(), 8);
    for r in reports {
        assert!(r.passed(SUITE_TOLERANCE), "{r:?}");
        assert!(r.checked > 0);
    }
}

#[test]
fn whole_mixture_row_matches_direct_embedding() {
    let f = fixture();
    let pairs = sample_pairs(&f.corpus.manifest, Split::Test, 3, 0.0, 2).unwrap();
    let set = embed_mixtures(&f.extractor, &f.corpus, &pairs, 3, 25, 9, 0).unwrap();
    assert_eq!(set.len(), 9);
    assert_eq!(set.pairs[0], pairs[0]);
    assert_eq!(set.pairs[3], pairs[1]);
    let direct = embed_mixture(&f.extractor, &f.corpus, &pairs[1]).unwrap();
    for (a, b) in set.embeddings.row_slice(3).iter().zip(&direct) {
        assert!((a - b).abs() < 1e-12);
    }
    let again = embed_mixtures(&f.extractor, &f.corpus, &pairs, 3, 25, 9, 0).unwrap();
    assert_eq!(again, set);
    let whole = test_set(&f.extractor, &f.corpus, &pairs).unwrap();
    assert_eq!(whole.len(), 3);
}

#[test]
fn bank_targets_follow_direction() {
    let f = fixture();
    let pairs = vec![MixSpec {
        target_utt: "spk000_u00".into(),
        interferer_utt: "spk002_u00".into(),
        snr_db: 5.0,
    }];
    let set = test_set(&f.extractor, &f.corpus, &pairs).unwrap();
    let (k, p) = set.bank_targets(&f.bank, Direction::KnownInterferer).unwrap();
    assert_eq!(k.data(), f.bank.get("spk002").unwrap());
    assert_eq!(p.data(), f.bank.get("spk000").unwrap());
    let (k, p) = set.bank_targets(&f.bank, Direction::KnownTarget).unwrap();
    assert_eq!(k.data(), f.bank.get("spk000").unwrap());
    assert_eq!(p.data(), f.bank.get("spk002").unwrap());
}

#[test]
fn training_lowers_mae_for_every_variant() {
    let f = fixture();
    let cfg = small_cfg();
    let pools = training_pools(&f.extractor, &f.corpus, 0.0, &cfg, 3).unwrap();
    for v in DemixVariant::ALL {
        for d in Direction::ALL {
            let (_, log) = train_head(v, &pools, &f.bank, d, &cfg, 3).unwrap();
            assert!(log.final_mae < log.initial_mae, "{v} {d}: {log:?}");
            assert_eq!(log.epoch_mae.len(), cfg.epochs);
        }
    }
}

#[test]
fn head_training_is_seed_deterministic() {
    let f = fixture();
    let cfg = StepTwoConfig {
        epochs: 5,
        ..small_cfg()
    };
    let pools = training_pools(&f.extractor, &f.corpus, 5.0, &cfg, 3).unwrap();
    let again = training_pools(&f.extractor, &f.corpus, 5.0, &cfg, 3).unwrap();
    assert_eq!(pools, again);
    let (a, la) = train_head(DemixVariant::SeparateConcat, &pools, &f.bank, Direction::KnownInterferer, &cfg, 3).unwrap();
    let (b, lb) = train_head(DemixVariant::SeparateConcat, &pools, &f.bank, Direction::KnownInterferer, &cfg, 3).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a.archive(3).unwrap().to_bytes().unwrap(), b.archive(3).unwrap().to_bytes().unwrap());
    let (c, _) = train_head(DemixVariant::SeparateConcat, &pools, &f.bank, Direction::KnownInterferer, &cfg, 4).unwrap();
    assert_ne!(a.params, c.params);
}

/// Swapping the inputs and the row halves of the output weight leaves the
/// prediction unchanged only while both branches apply the same transform.
#[test]
fn share_concat_branches_stay_tied_after_updates() {
    let f = fixture();
    let cfg = StepTwoConfig {
        epochs: 10,
        final_activation: FinalActivation::None,
        ..small_cfg()
    };
    let pools = training_pools(&f.extractor, &f.corpus, 0.0, &cfg, 3).unwrap();
    let (head, _) = train_head(DemixVariant::ShareConcat, &pools, &f.bank, Direction::KnownInterferer, &cfg, 3).unwrap();
    let names: Vec<&str> = head.params.names().iter().map(|s| s.as_str()).collect();
    assert_eq!(names, ["branch.w", "branch.b", "out.w", "out.b"]);
    let d = head.dim;
    let w = head.params.tensors()[2].clone();
    let mut swapped_w = w.data()[d * d..].to_vec();
    swapped_w.extend_from_slice(&w.data()[..d * d]);
    let mut swapped = head.clone();
    swapped.params.assign("out.w", Tensor::matrix(2 * d, d, swapped_w).unwrap()).unwrap();
    let mut rng = stream(8, Purpose::GradCheck, 0);
    let a = uniform(&mut rng, 4, d, -1.0, 1.0);
    let b = uniform(&mut rng, 4, d, -1.0, 1.0);
    let x = head.predict(&a, &b).unwrap();
    let y = swapped.predict(&b, &a).unwrap();
    for (p, q) in x.data().iter().zip(y.data()) {
        assert!((p - q).abs() < 1e-12);
    }
}

#[test]
fn extractor_and_bank_are_frozen() {
    let f = fixture();
    let bank_before = f.bank.fingerprint().unwrap();
    let mut ex_archive = Archive::new("x", "x", 0);
    f.extractor.to_archive(&mut ex_archive, "").unwrap();
    let ex_before = ex_archive.payload_sha256();

    let cfg = StepTwoConfig {
        epochs: 3,
        ..small_cfg()
    };
    let pools = training_pools(&f.extractor, &f.corpus, 0.0, &cfg, 3).unwrap();
    train_head(DemixVariant::Concat2, &pools, &f.bank, Direction::KnownTarget, &cfg, 3).unwrap();
    assert_eq!(f.bank.fingerprint().unwrap(), bank_before);
    let mut after = Archive::new("x", "x", 0);
    f.extractor.to_archive(&mut after, "").unwrap();
    assert_eq!(after.payload_sha256(), ex_before);

    // The mixture embedding enters the head graph detached, so the loss
    // sends nothing back into extractor parameters even when they are
    // recorded as trainable on the same tape.
    let mix = crate::demix::mixture_features(&f.corpus, &pools[0].pairs[0], &crate::audio::Mfcc::new()).unwrap();
    let mut tape = Tape::new();
    let bx = f.extractor.params.bind(&mut tape, true);
    let mut stats = f.extractor.stats.clone();
    let mut pass = crate::embedding::Pass {
        p: &bx,
        stats: &mut stats,
        mode: Mode::Eval,
    };
    let xv = tape.constant(mix.frames().clone());
    let e = f.extractor.forward(&mut tape, &mut pass, xv, 1).unwrap();
    let e_mix = tape.detach(e);
    let head = DemixHead::new(DemixVariant::Concat2, 6, FinalActivation::Relu, &mut stream(0, Purpose::DemixInit, 0)).unwrap();
    let ph = head.params.bind(&mut tape, true);
    let known = tape.constant(Tensor::row(f.bank.get("spk000").unwrap().to_vec()).unwrap());
    let target = tape.constant(Tensor::row(f.bank.get("spk001").unwrap().to_vec()).unwrap());
    let y = head.forward(&mut tape, &ph, e_mix, known).unwrap();
    let loss = tape.mae_loss(y, target).unwrap();
    tape.backward(loss).unwrap();
    for g in bx.grads(&tape) {
        assert!(g.data().iter().all(|v| *v == 0.0));
    }
    assert!(ph.grads(&tape).iter().any(|g| g.data().iter().any(|v| *v != 0.0)));
}

#[test]
fn trained_head_round_trip_and_provenance() {
    let f = fixture();
    let cfg = StepTwoConfig {
        epochs: 2,
        ..small_cfg()
    };
    let pools = training_pools(&f.extractor, &f.corpus, -5.0, &cfg, 3).unwrap();
    let (head, log) = train_head(DemixVariant::Mul, &pools, &f.bank, Direction::KnownInterferer, &cfg, 3).unwrap();
    let trained = TrainedHead {
        head,
        direction: Direction::KnownInterferer,
        snr_db: -5.0,
        seed: 3,
        extractor_fingerprint: "ex".into(),
        bank_fingerprint: f.bank.fingerprint().unwrap(),
        log,
    };
    let bytes = trained.to_bytes().unwrap();
    let back = TrainedHead::from_archive(&Archive::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(back.to_bytes().unwrap(), bytes);
    assert_eq!(back.direction, Direction::KnownInterferer);
    assert_eq!(back.snr_db, -5.0);
    assert!(back.check_provenance("ex", &f.bank.fingerprint().unwrap()).is_ok());
    assert!(matches!(back.check_provenance("other", &f.bank.fingerprint().unwrap()), Err(Error::ProvenanceMismatch(_))));
    assert!(matches!(back.check_provenance("ex", "other"), Err(Error::ProvenanceMismatch(_))));
    assert_eq!(
        TrainedHead::file_name(DemixVariant::ShareConcat, -5.0, Direction::KnownTarget),
        "share-concat_-5_known-target.sedm"
    );
}

#[test]
fn missing_bank_entry_is_reported() {
    let f = fixture();
    let cfg = StepTwoConfig {
        epochs: 1,
        ..small_cfg()
    };
    let pools = training_pools(&f.extractor, &f.corpus, 0.0, &cfg, 3).unwrap();
    let mut bank = f.bank.clone();
    bank.speakers[1] = "nobody".into();
    let err = train_head(DemixVariant::Sub, &pools, &bank, Direction::KnownTarget, &cfg, 3).unwrap_err();
    assert!(matches!(err, Error::MissingBankEntry(_)));
}
