use toll_core::config::RunConfig;
use toll_core::scene::build_dataset;
use toll_core::train::Trainer;

#[test]
fn desk_run_lowers_generation_loss_without_collapse() {
    let cfg = RunConfig::desk();
    let data = build_dataset(&cfg.data, cfg.run.seed).unwrap();
    let mut t = Trainer::new(&cfg, data).unwrap();
    t.run(None).unwrap();
    assert!(t.finished());
    let (first, last) = (t.losses.first().unwrap(), t.losses.last().unwrap());
    assert_eq!(last.epoch, 30);
    assert!(last.losses.gen < first.losses.gen, "{} vs {}", last.losses.gen, first.losses.gen);
    // Epoch 0 plus every tenth epoch.
    assert_eq!(t.metrics.iter().map(|m| m.epoch).collect::<Vec<_>>(), [0, 10, 20, 30]);
    let ev = t.evaluate(0).unwrap();
    assert!(ev.object_prototypes_used >= 10, "{} prototypes used", ev.object_prototypes_used);
}
