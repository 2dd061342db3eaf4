use moe_upcycle::model::{cross_entropy, forward, ForwardOptions, Positional};
use moe_upcycle::train::{
    ablate_from, eval_perplexity, pretrain_dense, train, write_ablation_csvs, AblationAxis,
    AblationConfig, Batch, DataConfig, FixedCorpus, SyntheticData,
};
use moe_upcycle::upcycle::upcycle_full;
use moe_upcycle::{
    CapacityFactor, DenseCheckpoint, GateConfig, ModelConfig, RouterType, TrainConfig,
};

fn tiny() -> ModelConfig {
    ModelConfig {
        vocab: 32,
        hidden: 16,
        layers: 2,
        heads: 2,
        kv_heads: 1,
        ffn_hidden: 32,
        seq_len: 16,
        positional: Positional::None,
    }
}

fn short(steps: usize) -> TrainConfig {
    let mut t = TrainConfig::toy(steps);
    t.batch = 4;
    t.seq_len = 16;
    t.schedule.lr_max = 3e-3;
    t.schedule.lr_min = 3e-4;
    t.schedule.warmup_steps = 2.min(steps - 1);
    t
}

fn held_out(vocab: usize) -> Vec<Batch> {
    let mut d = SyntheticData::with_stream(&DataConfig::new(4), vocab, 9).unwrap();
    (0..4).map(|_| d.next_batch(4, 16)).collect()
}

fn small_ablation(steps: usize) -> AblationConfig {
    let mut cfg = AblationConfig::desk(1);
    cfg.model = tiny();
    cfg.pretrain = Some(short(30));
    cfg.train = short(steps);
    cfg.data.epoch_batches = Some(5);
    cfg
}

#[test]
fn moe_training_is_bitwise_reproducible() {
    let run = || {
        let dense = DenseCheckpoint::init(tiny(), 3).unwrap();
        let gate = GateConfig::new(4, 2)
            .with_noise(true)
            .with_cf(CapacityFactor::Finite(1.0));
        let mut moe = upcycle_full(&dense, gate, &[0, 1], 4).unwrap();
        let mut data = SyntheticData::new(&DataConfig::new(5), 32).unwrap();
        let mut cfg = short(6);
        cfg.noise_seed = 6;
        let m = train(moe.view_mut(), &mut data, &cfg, "r").unwrap();
        (m, moe)
    };
    let (m1, a) = run();
    let (m2, b) = run();
    assert_eq!(m1, m2);
    assert!(a
        .tensors
        .values()
        .zip(b.tensors.values())
        .all(|(x, y)| x.bitwise_eq(y)));
}

#[test]
fn zero_head_gives_perplexity_equal_to_vocab() {
    let cfg = ModelConfig::toy();
    let mut dense = DenseCheckpoint::init(cfg.clone(), 0).unwrap();
    dense.tensors["lm_head"].data_mut().fill(0.0);
    let mut data = SyntheticData::new(&DataConfig::new(0), cfg.vocab).unwrap();
    let batches = vec![data.next_batch(2, 32)];
    let ppl = eval_perplexity(dense.view(), &batches).unwrap();
    assert!((ppl - 512.0).abs() <= 1e-9 * 512.0, "{ppl}");
}

#[test]
fn training_lowers_held_out_perplexity() {
    let mut dense = DenseCheckpoint::init(tiny(), 1).unwrap();
    let held = held_out(32);
    let before = eval_perplexity(dense.view(), &held).unwrap();
    let mut data = SyntheticData::new(&DataConfig::new(4), 32).unwrap();
    train(dense.view_mut(), &mut data, &short(60), "dense").unwrap();
    let after = eval_perplexity(dense.view(), &held).unwrap();
    assert!(after < 0.9 * before, "{before} -> {after}");
}

#[test]
fn step_zero_loss_matches_dense_only_for_mixtral() {
    let cfg = small_ablation(1);
    let dense = pretrain_dense(&cfg).unwrap();
    let axis = AblationAxis::RouterType(vec![RouterType::Mixtral, RouterType::St]);
    let runs = ablate_from(&axis, &cfg, &dense).unwrap();

    let mut data = SyntheticData::with_stream(&cfg.data, 32, 2).unwrap();
    let batch = FixedCorpus::draw(&mut data, 1, 4, 16).unwrap().batches()[0].clone();
    let opts = ForwardOptions {
        batch: 4,
        ..ForwardOptions::default()
    };
    let logits = forward(dense.view(), &batch.inputs, opts, None)
        .unwrap()
        .logits;
    let dense_loss = cross_entropy(&logits, &batch.targets).unwrap();

    let mixtral = runs[0].metrics.steps[0].loss;
    let st = runs[1].metrics.steps[0].loss;
    assert!(
        (mixtral - dense_loss).abs() <= 1e-9 * dense_loss,
        "{mixtral} vs {dense_loss}"
    );
    assert!(st - dense_loss > 1e-3, "st {st} dense {dense_loss}");
}

#[test]
fn larger_capacity_drops_fewer_tokens() {
    let cfg = small_ablation(4);
    let dense = pretrain_dense(&cfg).unwrap();
    let values = vec![
        CapacityFactor::Finite(0.5),
        CapacityFactor::Finite(1.0),
        CapacityFactor::Finite(2.0),
        CapacityFactor::Dropless,
    ];
    let runs = ablate_from(&AblationAxis::Cf(values), &cfg, &dense).unwrap();
    let step0: Vec<f64> = runs
        .iter()
        .map(|r| r.metrics.steps[0].drop_rate())
        .collect();
    assert!(step0.windows(2).all(|w| w[0] >= w[1]), "{step0:?}");
    assert!(step0[0] > 0.0);
    assert!(runs[3].metrics.steps.iter().all(|s| s.drop_rate() == 0.0));
    assert_eq!(runs[3].label, "dropless");
}

#[test]
fn ablation_csvs_are_written_once_per_value() {
    let cfg = small_ablation(2);
    let dense = pretrain_dense(&cfg).unwrap();
    let axis = AblationAxis::parse("router_type", "mixtral,st").unwrap();
    let runs = ablate_from(&axis, &cfg, &dense).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = write_ablation_csvs(dir.path(), &axis, &runs, false).unwrap();
    let names: Vec<String> = paths
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(
        names,
        [
            "ablate_router_type_mixtral.csv",
            "ablate_router_type_st.csv"
        ]
    );
    let text = std::fs::read_to_string(&paths[1]).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,run_id,loss,lr,drop_rate,load_entropy"
    );
    assert!(lines.next().unwrap().starts_with("0,router_type=st,"));
    assert!(write_ablation_csvs(dir.path(), &axis, &runs, false).is_err());
    assert!(write_ablation_csvs(dir.path(), &axis, &runs, true).is_ok());
}

#[test]
fn unknown_axis_is_a_config_error() {
    assert!(AblationAxis::parse("lr", "1,2").is_err());
    assert!(AblationAxis::parse("cf", "").is_err());
    assert!(AblationAxis::parse("cf", "0").is_err());
}
