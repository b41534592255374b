use tabr::checkpoint::Checkpoint;
use tabr::config::RunConfig;
use tabr::data::synthetic;
use tabr::experiments;
use tabr::model::Model;
use tabr::training::predict;

fn small(kind: &str) -> RunConfig {
    RunConfig::parse(&format!(
        "model.kind = {kind}\nmodel.d = 12\nmodel.retrieval.m = 6\nmodel.mlp.width = 16\n\
         train.batch_size = 24\ntrain.max_epochs = 4\ntrain.patience = 3\n"
    ))
    .unwrap()
}

#[test]
fn restored_checkpoint_predicts_bitwise_identically() {
    let ds = synthetic::classification(200, 4, 3, 9);
    for kind in ["tabr", "mlp"] {
        let cfg = small(kind);
        let prep = experiments::prepare(&ds, &cfg).unwrap();
        let out = experiments::fit(&cfg, &prep).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        experiments::checkpoint(&cfg, &prep, &out).write(&path).unwrap();

        let ck = Checkpoint::read(&path).unwrap();
        assert_eq!(ck.config, cfg);
        let model = ck.model().unwrap();
        let store = match &model {
            Model::Tabr(m) => Some(ck.candidates.as_ref().unwrap().restore(m).unwrap()),
            Model::Mlp(_) => None,
        };
        let preds = predict(&model, store.as_ref(), &prep, &prep.test).unwrap();
        assert_eq!(preds, out.test_preds, "{kind}");
    }
}

#[test]
fn frozen_training_encodes_fewer_candidates() {
    let ds = synthetic::regression(240, 3, 2);
    let mut cfg = small("tabr-s");
    cfg.train.max_epochs = Some(5);
    cfg.train.patience = 10;
    let prep = experiments::prepare(&ds, &cfg).unwrap();
    let reference = experiments::fit(&cfg, &prep).unwrap();
    let (rows, outs) = experiments::freeze_experiment(&cfg, &prep, &reference, &[2]).unwrap();
    let log = &outs[0].trained.log;
    assert_eq!(rows[1].epochs_run, 5);
    for e in &log.epochs {
        assert_eq!(e.frozen, e.epoch > 2);
        let full = reference.trained.log.epochs[e.epoch - 1].candidate_encodings;
        if e.frozen {
            assert!(e.candidate_encodings < full);
            assert!(e.similarity_evals < reference.trained.log.epochs[e.epoch - 1].similarity_evals);
        } else {
            assert_eq!(e.candidate_encodings, full);
        }
    }
    // identical until the freeze takes effect
    assert_eq!(log.epochs[0].train_loss, reference.trained.log.epochs[0].train_loss);
    assert_eq!(log.epochs[1].train_loss, reference.trained.log.epochs[1].train_loss);
}
