use mvd_core::backbone::BackboneConfig;
use mvd_core::corruption::CorruptionPool;
use mvd_core::dataio::Split;
use mvd_core::trainer::{init_state, run, DataSource, Schema, TrainConfig};

#[test]
fn med_loss_falls_over_two_thousand_steps() {
    let cfg = TrainConfig {
        schema: Schema::Med,
        iters: 2000,
        batch: 4,
        patch: 32,
        lr: 1e-3,
        seed: 3,
        pool: CorruptionPool::gaussian(25.0, 25.0),
        backbone: BackboneConfig::conv_small(2, 8),
        data: Some(DataSource::Toy {
            count: 10,
            size: 64,
            seed: 1,
        }),
        ..TrainConfig::default()
    };
    let data = cfg.data.as_ref().unwrap().load(Split::Train).unwrap();
    let mut totals = Vec::new();
    run(&cfg, &data, init_state(&cfg).unwrap(), None, &mut |r| {
        totals.push(r.total)
    })
    .unwrap();
    assert_eq!(totals.len(), 2000);
    assert!(totals.iter().all(|t| t.is_finite()));
    let first = totals[..100].iter().sum::<f64>() / 100.0;
    let last = totals[1900..].iter().sum::<f64>() / 100.0;
    assert!(last < first, "first 100 steps {first:.4}, last 100 steps {last:.4}");
}
