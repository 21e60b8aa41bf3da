use mixlm_core::checkpoint;
use mixlm_core::data::{gen_dataset, gen_eval_set};
use mixlm_core::optim::OptimConfig;
use mixlm_core::train::{eval_fulltext, train_stage2_teacher, StepRecord, TrainConfig};

#[test]
fn teacher_loss_decreases_over_most_of_training() {
    let cfg = TrainConfig::desk(1);
    let data = gen_dataset(cfg.data_seed, cfg.dataset_size);
    let mut log: Vec<StepRecord> = Vec::new();
    let teacher = train_stage2_teacher(&cfg, &data, &mut |r| log.push(r.clone())).unwrap();
    assert_eq!(log.len(), cfg.teacher_optim.total_steps);
    // Block means over a fifth of the run each.
    let window = log.len() / 5;
    let blocks: Vec<f64> = log[..4 * window]
        .chunks(window)
        .map(|c| c.iter().map(|r| r.sft).sum::<f64>() / c.len() as f64)
        .collect();
    for w in blocks.windows(2) {
        assert!(w[1] < w[0], "smoothed loss rose: {blocks:?}");
    }
    let ndcg = eval_fulltext(&teacher, &gen_eval_set(cfg.eval_seed, cfg.eval_queries)).unwrap();
    assert!(ndcg >= 0.90, "teacher ndcg {ndcg}");
}

#[test]
fn teacher_training_is_deterministic() {
    let mut cfg = TrainConfig::desk(5);
    cfg.teacher_optim = OptimConfig::with_steps(15, 3e-3);
    let data = gen_dataset(cfg.data_seed, 500);
    let run = || {
        let mut losses = Vec::new();
        let p = train_stage2_teacher(&cfg, &data, &mut |r| losses.push(r.sft.to_bits())).unwrap();
        (checkpoint::to_bytes(&p).unwrap(), losses)
    };
    assert_eq!(run(), run());
}
