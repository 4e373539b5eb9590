use slotfill_core::labelspace::Strategy;
use slotfill_core::model::{HeadKind, ViewOptions};
use slotfill_core::toy::{generate, ToySpec};
use slotfill_core::trainer::{evaluate, train, Resources, TrainConfig};

#[test]
fn onehot_softmax_overfits_small_corpus() {
    let data = generate(&ToySpec::default());
    let mut cfg = TrainConfig::default();
    cfg.strategy = Strategy::OneHot;
    cfg.head = HeadKind::Softmax;
    cfg.embed_dim = 20;
    cfg.hidden = 20;
    cfg.epochs = 50;
    cfg.batch_size = 5;
    cfg.seed = 3;
    let started = std::time::Instant::now();
    let train_set = &data.target_train;
    let (model, report) = train(&cfg, train_set, Some(train_set), &data.target_knowledge, &Resources::default()).unwrap();
    eprintln!("trained 50 epochs x 200 sentences in {:.1?}", started.elapsed());
    for e in report.epochs.iter().step_by(5) {
        eprintln!("  epoch {:2}: loss {:8.4}  f1 {:.4}", e.epoch, e.train_loss, e.valid_f1);
    }
    eprintln!("best epoch {} f1 {:.4}", report.best_epoch, report.best_valid_f1);
    let (metrics, _) = evaluate(&model, train_set, &[&data.target_knowledge], &ViewOptions::default()).unwrap();
    eprintln!("final train F1 = {:.4}", metrics.f1);
    assert!(metrics.f1 > 0.9, "got {}", metrics.f1);
}
