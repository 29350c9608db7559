use fairrec_core::data::{split_leave_latest, DataSplit, DatasetBuilder, GroupVocab};
use fairrec_core::evaluation::{errors_on, fairness_f};
use fairrec_core::recommenders::MfParams;
use rand::SeedableRng;
use fairrec_core::recommenders::{write_model, Model, ModelHeader, Predictor};
use fairrec_core::synthetic::{generate, SynthConfig};
use fairrec_core::training::{
    batch_entries, config_hash, grid_search, total_loss, train_mf, train_model, train_poisson, GridSpec, Kappa, LossConfig, LossVariant, ModelSpec,
    TrainConfig, TrainError,
};

fn rank_one_dataset() -> fairrec_core::data::Dataset {
    let mut b = DatasetBuilder::new(
        GroupVocab::with_labels("u", ["A", "B"]).unwrap(),
        GroupVocab::with_labels("p", ["X", "Y"]).unwrap(),
    );
    let (nu, ni) = (30, 30);
    for u in 0..nu {
        for i in 0..ni {
            let a = (u as f64 / nu as f64) - 0.5;
            let c = (i as f64 / ni as f64) - 0.5;
            let r = 3.0 + 2.0 * a * c * 4.0;
            b.push(&format!("u{u}"), &format!("i{i}"), r, i as i64, ["A", "B"][u % 2], ["X", "Y"][i % 2], None);
        }
    }
    b.build().unwrap()
}

fn all_train(ds: &fairrec_core::data::Dataset) -> DataSplit {
    DataSplit { train: ds.all_indices(), validation: Vec::new(), test: Vec::new() }
}

#[test]
fn fits_noiseless_rank_one_data() {
    let ds = rank_one_dataset();
    let split = all_train(&ds);
    let cfg = TrainConfig { learning_rate: 0.01, batch_size: 64, d: 2, max_epochs: 200, patience: 200, seed: 1 };
    let (params, history) = train_mf(&ds, &split, &LossConfig::plain(0.0), &cfg).unwrap();
    let (errors, _) = errors_on(&params, &ds, &split.train);
    let mse = errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64;
    assert!(mse < 0.01, "train mse {mse} after {} epochs", history.epochs.len());
}

#[test]
fn smoothed_training_loss_does_not_rise() {
    let ds = rank_one_dataset();
    let split = all_train(&ds);
    let cfg = TrainConfig { learning_rate: 0.01, batch_size: 64, d: 2, max_epochs: 60, patience: 60, seed: 2 };
    let (_, history) = train_mf(&ds, &split, &LossConfig::plain(0.0), &cfg).unwrap();
    let mut ema = history.epochs[0].train_loss;
    let mut prev = ema;
    for e in &history.epochs[1..] {
        ema = 0.7 * ema + 0.3 * e.train_loss;
        assert!(ema <= prev + 1e-4, "EMA rose at epoch {}: {prev} -> {ema}", e.epoch);
        prev = ema;
    }
}

#[test]
fn training_is_bitwise_deterministic() {
    let ds = generate(&SynthConfig { n_users: 60, n_items: 40, interactions_per_user: 8, ..Default::default() }).unwrap();
    let split = split_leave_latest(&ds);
    let cfg = TrainConfig { max_epochs: 5, seed: 9, ..Default::default() };
    let loss = LossConfig { variant: LossVariant::CorrError, alpha: 1.0, kappa: Kappa::new(true, true, true), lambda: 0.1 };
    let spec = ModelSpec::Mf { loss };
    let bytes = |m: &Model| {
        let mut out = Vec::new();
        write_model(&mut out, &ModelHeader::for_model(m, cfg.seed, config_hash(&(spec, cfg))), m).unwrap();
        out
    };
    let (a, ha) = train_model(&ds, &split, &spec, &cfg).unwrap();
    let (b, hb) = train_model(&ds, &split, &spec, &cfg).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    assert_eq!(ha, hb);
    let (c, _) = train_model(&ds, &split, &spec, &TrainConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(bytes(&a), bytes(&c));
}

#[test]
fn keeps_best_validation_epoch() {
    let ds = generate(&SynthConfig { n_users: 80, n_items: 40, interactions_per_user: 10, ..Default::default() }).unwrap();
    let split = split_leave_latest(&ds);
    let cfg = TrainConfig { learning_rate: 0.05, batch_size: 32, max_epochs: 40, patience: 3, seed: 4, ..Default::default() };
    let (params, history) = train_mf(&ds, &split, &LossConfig::plain(0.0), &cfg).unwrap();
    let best = history.best().unwrap();
    assert!(history.epochs.iter().all(|e| e.validation_mse >= best.validation_mse));
    let (errors, _) = errors_on(&params, &ds, &split.validation);
    let mse = errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64;
    assert!((mse - best.validation_mse).abs() < 1e-12);
    if history.stopped_early {
        assert_eq!(history.epochs.len(), history.best_epoch + cfg.patience);
    }
}

#[test]
fn overflowing_ratings_abort_training() {
    let mut b = DatasetBuilder::new(GroupVocab::with_labels("u", ["A"]).unwrap(), GroupVocab::with_labels("p", ["X"]).unwrap());
    b.push("u0", "i0", 1e200, 0, "A", "X", None);
    b.push("u0", "i1", -1e200, 1, "A", "X", None);
    let ds = b.build().unwrap();
    let split = all_train(&ds);
    let err = train_mf(&ds, &split, &LossConfig::plain(0.0), &TrainConfig::default()).unwrap_err();
    assert!(matches!(err, TrainError::NonFiniteLoss { epoch: 1, batch: 0 }));
}

#[test]
fn empty_train_is_rejected() {
    let ds = rank_one_dataset();
    let split = DataSplit::default();
    assert_eq!(train_mf(&ds, &split, &LossConfig::default(), &TrainConfig::default()).unwrap_err(), TrainError::EmptyTrain);
}

#[test]
fn poisson_predictions_stay_positive() {
    let ds = generate(&SynthConfig { n_users: 50, n_items: 30, interactions_per_user: 6, ..Default::default() }).unwrap();
    let split = split_leave_latest(&ds);
    let (p, _) = train_poisson(&ds, &split, 0.1, &TrainConfig { max_epochs: 5, ..Default::default() }).unwrap();
    for u in 0..p.n_users() {
        for i in 0..p.n_items() {
            assert!(p.score(u, i) > 0.0);
        }
    }
}

#[test]
fn grid_search_is_thread_count_independent() {
    let ds = generate(&SynthConfig { n_users: 60, n_items: 30, interactions_per_user: 8, seed: 3, ..Default::default() }).unwrap();
    let split = split_leave_latest(&ds);
    let mut spec = GridSpec::new(LossVariant::CorrError);
    spec.lambdas = vec![0.01, 1.0];
    spec.alphas = vec![0.5, 5.0];
    spec.kappas = vec![Kappa::new(true, false, false), Kappa::new(false, false, true)];
    let cfg = TrainConfig { max_epochs: 3, ..Default::default() };
    let one = grid_search(&ds, &split, &spec, &cfg, 1).unwrap();
    let four = grid_search(&ds, &split, &spec, &cfg, 4).unwrap();
    assert_eq!(one, four);
    assert_eq!(one.rows.len(), 8);
    assert_eq!(one.per_kappa.len(), 2);
    assert!(one.per_kappa.contains(&one.selected));
    for &w in &one.per_kappa {
        let kappa = one.rows[w].config.kappa;
        assert!(one.rows.iter().filter(|r| r.config.kappa == kappa).all(|r| r.val_mse >= one.rows[w].val_mse));
    }
    let plain = grid_search(&ds, &split, &GridSpec::new(LossVariant::Plain), &cfg, 2).unwrap();
    assert_eq!(plain.rows.len(), 4);
}

#[test]
fn fairness_f_is_computable_on_trained_errors() {
    let ds = generate(&SynthConfig { n_users: 60, n_items: 30, interactions_per_user: 8, ..Default::default() }).unwrap();
    let split = split_leave_latest(&ds);
    let (params, _) = train_mf(&ds, &split, &LossConfig::plain(0.1), &TrainConfig { max_epochs: 3, ..Default::default() }).unwrap();
    let (errors, segments) = errors_on(&params, &ds, &split.test);
    let f = fairness_f(&errors, &segments).unwrap();
    assert!(f.f.is_finite() && (0.0..=1.0).contains(&f.p_value));
}

#[test]
fn corr_error_training_lowers_the_penalty() {
    let mut sc = SynthConfig { seed: 2, ..SynthConfig::balanced(2, 2) };
    sc.segment_shift = vec![vec![0.5, -0.5], vec![-0.5, 0.5]];
    let ds = generate(&sc).unwrap();
    let split = split_leave_latest(&ds);
    let loss = LossConfig { variant: LossVariant::CorrError, alpha: 1.0, kappa: Kappa::new(false, false, true), lambda: 0.1 };
    let cfg = TrainConfig { seed: 2, ..Default::default() };
    let train = batch_entries(&ds, &split.train);
    let mean = train.iter().map(|x| x.rating).sum::<f64>() / train.len() as f64;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = MfParams::init(ds.n_users(), ds.n_items(), cfg.d, mean, &mut rng);
    let (trained, _) = train_mf(&ds, &split, &loss, &cfg).unwrap();
    let before = total_loss(&train, &init, &loss).unwrap().penalty;
    let after = total_loss(&train, &trained, &loss).unwrap().penalty;
    assert!(after < before, "penalty {before} -> {after}");
}
