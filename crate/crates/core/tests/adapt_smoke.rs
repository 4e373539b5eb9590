use slotfill_core::labelspace::Strategy;
use slotfill_core::model::{HeadKind, ViewOptions};
use slotfill_core::toy::{generate, ToySpec};
use slotfill_core::trainer::{evaluate, pretrain, Resources, TrainConfig};

#[test]
fn atomic_pretrain_zero_shot() {
    let data = generate(&ToySpec::default());
    let mut cfg = TrainConfig::default();
    cfg.strategy = Strategy::AtomicConcept;
    cfg.head = HeadKind::Softmax;
    cfg.embed_dim = 20;
    cfg.hidden = 20;
    cfg.epochs = 20;
    cfg.batch_size = 5;
    cfg.seed = 3;
    let started = std::time::Instant::now();
    let sources = [
        (data.travel.clone(), &data.travel_knowledge),
        (data.person.clone(), &data.person_knowledge),
    ];
    let (model, report) = pretrain(&cfg, &sources, &Resources::default()).unwrap();
    eprintln!("pretrained in {:.1?}; best source-valid f1 {:.4}", started.elapsed(), report.best_valid_f1);
    // zero-shot on biography
    let opts = ViewOptions { zero_shot: true, exemplar_cap: None };
    let (metrics, _) = evaluate(&model, &data.target_test, &[&data.target_knowledge], &opts).unwrap();
    eprintln!("atomic zero-shot target F1 = {:.4}", metrics.f1);
    for (slot, m) in &metrics.per_slot {
        eprintln!("  {slot}: P {:.3} R {:.3} F1 {:.3} (gold {} pred {})", m.precision, m.recall, m.f1, m.gold, m.predicted);
    }

    // onehot zero-shot must be structurally zero
    let mut cfg1 = cfg.clone();
    cfg1.strategy = Strategy::OneHot;
    let (m1, _) = pretrain(&cfg1, &sources, &Resources::default()).unwrap();
    let (metrics1, preds) = evaluate(&m1, &data.target_test, &[&data.target_knowledge], &opts).unwrap();
    eprintln!("onehot zero-shot target F1 = {:.4}", metrics1.f1);
    let non_o = preds.iter().flatten().filter(|t| !t.is_outside()).count();
    eprintln!("onehot non-O predictions: {non_o}");
    assert_eq!(metrics1.f1, 0.0);
}
