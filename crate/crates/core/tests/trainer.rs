mod common;

use common::calibrate_log_sigma;
use ren_core::config::DatasetFamily;
use ren_core::datasets::{load_experiment_data, toy_split, Split};
use ren_core::networks::checkpoint::sha256_hex;
use ren_core::rng::SeedTree;
use ren_core::trainer::{compute_step, write_record, Phase};
use ren_core::{
    build_model, train, Error, ExperimentConfig, ParamGroup, RenModel, Tensor, Trainer,
};

fn small_cfg(epochs: usize, burnin: usize, r: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::defaults(DatasetFamily::OneMoon);
    cfg.dataset.n_train = 512;
    cfg.dataset.n_test = 128;
    cfg.model.hidden = vec![16, 16];
    cfg.model.flow_hidden = vec![16, 16];
    cfg.model.relevance_hidden = vec![16];
    cfg.model.relevance_features = 16;
    cfg.train.epochs = epochs;
    cfg.train.burnin = burnin;
    cfg.train.r = r;
    cfg.train.batch_size = 64;
    cfg
}

fn group_hash(model: &RenModel, group: ParamGroup) -> String {
    let store = model.params();
    let mut bytes = Vec::new();
    for id in store.ids_in(group) {
        for v in store.get(id).data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    sha256_hex(&bytes)
}

#[test]
fn identical_seeds_give_identical_logs_and_parameters() {
    let cfg = small_cfg(6, 2, 4);
    let run = || {
        let mut model = build_model(&cfg).unwrap();
        let (data, _) = load_experiment_data(&cfg).unwrap();
        let log = train(&mut model, &data, &cfg.train).unwrap();
        let records: Vec<_> = log.records.iter().map(|r| r.without_timing()).collect();
        (
            records,
            group_hash(&model, ParamGroup::Model),
            group_hash(&model, ParamGroup::Relevance),
            model.current_alpha,
        )
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_eq!(a.0.len(), 6);
    assert_eq!(
        a.0.iter().map(|r| r.epoch).collect::<Vec<_>>(),
        vec![1, 2, 3, 4, 5, 6]
    );

    let mut other = cfg.clone();
    other.train.seed = 43;
    let mut model = build_model(&other).unwrap();
    let (data, _) = load_experiment_data(&cfg).unwrap();
    train(&mut model, &data, &other.train).unwrap();
    assert_ne!(group_hash(&model, ParamGroup::Model), a.1);
}

#[test]
fn relevance_encoder_is_untouched_until_burn_in_ends() {
    let cfg = small_cfg(4, 3, 4);
    let mut model = build_model(&cfg).unwrap();
    let (data, _) = load_experiment_data(&cfg).unwrap();
    let initial_psi = group_hash(&model, ParamGroup::Relevance);
    let initial_model = group_hash(&model, ParamGroup::Model);
    let mut trainer = Trainer::new(cfg.train.clone()).unwrap();
    for epoch in 1..=3 {
        trainer.run_epoch(&mut model, &data, epoch).unwrap();
        assert_eq!(
            group_hash(&model, ParamGroup::Relevance),
            initial_psi,
            "epoch {epoch}"
        );
        assert_eq!(model.current_alpha, vec![1.0, 1.0]);
    }
    assert_ne!(group_hash(&model, ParamGroup::Model), initial_model);
    let rec = trainer.run_epoch(&mut model, &data, 4).unwrap();
    assert_ne!(group_hash(&model, ParamGroup::Relevance), initial_psi);
    assert!(rec.alpha.iter().all(|&a| a > 0.0 && a.is_finite()));
    assert_ne!(rec.alpha, vec![1.0, 1.0]);
    assert!(rec.neg_entropy_q_alpha != 0.0 && rec.prior_alpha != 0.0);
}

#[test]
fn step_counts_follow_the_batch_split() {
    for r in [1, 4] {
        let cfg = small_cfg(2, 1, r);
        let mut model = build_model(&cfg).unwrap();
        let (data, _) = load_experiment_data(&cfg).unwrap();
        let mut trainer = Trainer::new(cfg.train.clone()).unwrap();
        let id = model.log_sigma_dec_id();
        let psi = model.params().ids_in(ParamGroup::Relevance)[0];
        let batches = (512 / 64) as u64;
        trainer.run_epoch(&mut model, &data, 1).unwrap();
        assert_eq!(trainer.optimizer.vae.steps(id), batches * r as u64);
        assert_eq!(trainer.optimizer.ren.steps(psi), 0);
        trainer.run_epoch(&mut model, &data, 2).unwrap();
        assert_eq!(trainer.optimizer.vae.steps(id), 2 * batches * r as u64);
        assert_eq!(trainer.optimizer.ren.steps(psi), batches);
        assert_eq!(trainer.optimizer.ren.steps(id), batches);
    }
}

#[test]
fn trailing_partial_batch_is_dropped() {
    let cfg = small_cfg(2, 1, 2);
    let mut model = build_model(&cfg).unwrap();
    let (data, _) = load_experiment_data(&cfg).unwrap();
    let data = data.select_rows(&(0..200).collect::<Vec<_>>());
    let mut trainer = Trainer::new(cfg.train.clone()).unwrap();
    trainer.run_epoch(&mut model, &data, 1).unwrap();
    assert_eq!(trainer.optimizer.vae.steps(model.log_sigma_dec_id()), 3 * 2);
}

#[test]
fn inner_phase_gives_the_relevance_encoder_no_gradient() {
    let cfg = small_cfg(2, 1, 4);
    let model = build_model(&cfg).unwrap();
    let (data, _) = load_experiment_data(&cfg).unwrap();
    let batch = data.select_rows(&(0..16).collect::<Vec<_>>());
    let psi = model.params().ids_in(ParamGroup::Relevance);
    let mut rng = SeedTree::new(1).rng();
    let inner = compute_step(&model, &batch, &mut rng, Phase::Inner).unwrap();
    assert!(!inner.grads.is_empty());
    assert!(inner.grads.iter().all(|(id, _)| !psi.contains(id)));
    assert!(inner.alpha_mean.is_none());
    assert_eq!(
        (
            inner.breakdown.neg_entropy_q_alpha,
            inner.breakdown.prior_alpha
        ),
        (0.0, 0.0)
    );

    let full = compute_step(&model, &batch, &mut rng, Phase::Relevance).unwrap();
    let touched: Vec<_> = full
        .grads
        .iter()
        .filter(|(id, _)| psi.contains(id))
        .collect();
    assert_eq!(touched.len(), psi.len());
    assert!(touched
        .iter()
        .any(|(_, g)| g.data().iter().any(|&v| v != 0.0)));
}

#[test]
fn non_finite_terms_abort_with_epoch_and_term() {
    let cfg = small_cfg(3, 1, 4);
    let mut model = build_model(&cfg).unwrap();
    let (mut data, _) = load_experiment_data(&cfg).unwrap();
    data.data_mut()[10] = f64::NAN;
    let err = train(&mut model, &data, &cfg.train).unwrap_err();
    let Error::NonFinite { context } = &err else {
        panic!("unexpected error {err}")
    };
    assert!(context.starts_with("epoch 1: "), "{context}");
    assert!(context.contains("term recon"), "{context}");

    let mut model = build_model(&cfg).unwrap();
    let (data, _) = load_experiment_data(&cfg).unwrap();
    let id = model.log_sigma_dec_id();
    *model.params_mut().get_mut(id) = Tensor::scalar(f64::INFINITY);
    let err = train(&mut model, &data, &cfg.train).unwrap_err();
    assert!(err.to_string().contains("epoch 1"), "{err}");
}

#[test]
fn invalid_training_setups_are_rejected() {
    let cfg = small_cfg(3, 3, 4);
    assert!(matches!(
        Trainer::new(cfg.train.clone()),
        Err(Error::Config(_))
    ));
    let cfg = small_cfg(3, 1, 3);
    assert!(matches!(
        Trainer::new(cfg.train.clone()),
        Err(Error::Config(_))
    ));

    let cfg = small_cfg(3, 1, 4);
    let mut model = build_model(&cfg).unwrap();
    let tiny = toy_split(&cfg, Split::Test)
        .unwrap()
        .select_rows(&(0..10).collect::<Vec<_>>());
    assert!(matches!(
        train(&mut model, &tiny, &cfg.train),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let cfg = small_cfg(6, 2, 4);
    let (data, _) = load_experiment_data(&cfg).unwrap();
    let mut straight = build_model(&cfg).unwrap();
    let full = train(&mut straight, &data, &cfg.train).unwrap();

    let mut split = build_model(&cfg).unwrap();
    let mut first = Trainer::new(cfg.train.clone()).unwrap();
    let mut partial = cfg.train.clone();
    partial.epochs = 3;
    first.cfg = partial;
    let head = first
        .train_with(&mut split, &data, &mut |_| Ok(()))
        .unwrap();
    let mut second = Trainer::resume(
        cfg.train.clone(),
        first.optimizer.clone(),
        first.epochs_completed,
    )
    .unwrap();
    let tail = second
        .train_with(&mut split, &data, &mut |_| Ok(()))
        .unwrap();

    let joined: Vec<_> = head
        .records
        .iter()
        .chain(&tail.records)
        .map(|r| r.without_timing())
        .collect();
    let whole: Vec<_> = full.records.iter().map(|r| r.without_timing()).collect();
    assert_eq!(joined, whole);
    assert_eq!(
        group_hash(&split, ParamGroup::Model),
        group_hash(&straight, ParamGroup::Model)
    );
}

#[test]
fn training_improves_the_bound() {
    let cfg = small_cfg(30, 3, 4);
    let mut model = build_model(&cfg).unwrap();
    let (data, _) = load_experiment_data(&cfg).unwrap();
    let log = train(&mut model, &data, &cfg.train).unwrap();
    let first = log.records[0].total;
    let last: f64 = log.records[27..].iter().map(|r| r.total).sum::<f64>() / 3.0;
    assert!(last > first, "first epoch {first}, last 10% {last}");
    assert!(log
        .records
        .iter()
        .skip(3)
        .all(|r| r.alpha.iter().all(|&a| a > 0.0)));
}

#[test]
fn records_serialize_as_json_lines() {
    let cfg = small_cfg(2, 1, 4);
    let mut model = build_model(&cfg).unwrap();
    let (data, _) = load_experiment_data(&cfg).unwrap();
    let log = train(&mut model, &data, &cfg.train).unwrap();
    let mut out = Vec::new();
    for r in &log.records {
        write_record(&mut out, r).unwrap();
    }
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    for (line, rec) in lines.iter().zip(&log.records) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["epoch"].as_u64().unwrap() as usize, rec.epoch);
        assert_eq!(v["total"].as_f64().unwrap(), rec.total);
        assert_eq!(v["alpha"].as_array().unwrap().len(), 2);
    }
}

#[test]
fn decoder_scale_calibrates_to_the_mean_squared_residual() {
    let cfg = small_cfg(5, 1, 4);
    let mut model = build_model(&cfg).unwrap();
    let (data, _) = load_experiment_data(&cfg).unwrap();
    train(&mut model, &data, &cfg.train).unwrap();
    let batch = data.select_rows(&(0..128).collect::<Vec<_>>());
    let (s2, msr) = calibrate_log_sigma(&mut model, &batch, 4000, cfg.train.lr_vae);
    assert!(
        (s2 - msr).abs() <= 0.01 * msr,
        "σ² {s2} vs mean squared residual {msr}"
    );
}
