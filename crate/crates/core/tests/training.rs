use metasvdd::encoder::{encode_eval, init_encoder, Architecture, EncoderParams};
use metasvdd::episodes::{
    sample_meta_batch, synthetic_tasks, ClassIndexedDataset, EpisodeConfig, SplitTag,
};
use metasvdd::heads::HeadKind;
use metasvdd::metrics::{accuracy_protocol, HeadScorer};
use metasvdd::train::{
    meta_train, train_step, OptimizerState, TrainConfig, TrainState, TRAIN_LOG_HEADER,
};
use metasvdd::Tensor;

fn splits() -> (ClassIndexedDataset, ClassIndexedDataset) {
    let all = synthetic_tasks(12, 20, 6, 0.2, 4).unwrap();
    let train = all
        .select_classes(&(0..8).collect::<Vec<_>>(), SplitTag::Train)
        .unwrap();
    let val = all
        .select_classes(&(8..12).collect::<Vec<_>>(), SplitTag::Validation)
        .unwrap();
    (train, val)
}

fn short_config() -> TrainConfig {
    TrainConfig {
        episode: EpisodeConfig {
            shot: 3,
            query_per_side: 4,
            meta_batch: 4,
        },
        eval_every: 5,
        patience: 3,
        validation_tasks: 20,
        max_steps: Some(30),
        ..TrainConfig::default()
    }
}

fn init() -> EncoderParams {
    init_encoder(&Architecture::Mlp { hidden: vec![16] }, &[6], 8, 2).unwrap()
}

fn run(kind: HeadKind) -> (TrainState, String) {
    let (train, val) = splits();
    let mut log = Vec::new();
    let state = meta_train(
        &train,
        &val,
        kind,
        init(),
        &short_config(),
        9,
        Some(&mut log),
    )
    .unwrap();
    (state, String::from_utf8(log).unwrap())
}

#[test]
fn meta_training_is_reproducible() {
    for kind in [HeadKind::MetaSvdd, HeadKind::OcProtonet] {
        let (a, log_a) = run(kind);
        let (b, log_b) = run(kind);
        assert_eq!(a.history, b.history);
        assert_eq!(a.best_params, b.best_params);
        assert_eq!(a.params, b.params);
        assert_eq!(log_a, log_b);
    }
}

#[test]
fn log_has_one_line_per_evaluation() {
    let (state, log) = run(HeadKind::MetaSvdd);
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], TRAIN_LOG_HEADER);
    assert_eq!(lines.len(), state.history.len() + 1);
    assert!(lines[1].starts_with("0,,"));
    for (line, record) in lines[1..].iter().zip(&state.history) {
        assert_eq!(*line, record.csv_line());
        assert_eq!(record.step % 5, 0);
    }
}

#[test]
fn best_record_is_never_replaced_by_a_worse_one() {
    let (state, _) = run(HeadKind::OcProtonet);
    let best = state.best_validation.unwrap();
    let mut expected = state.history[0];
    for r in &state.history[1..] {
        if r.validation.beats(&expected.validation) {
            expected = *r;
        }
    }
    assert_eq!(best, expected);
    let last = state.history.last().unwrap();
    if last.step != best.step {
        assert_ne!(state.params, state.best_params);
    }
}

#[test]
fn training_stops_at_the_step_limit() {
    let (state, _) = run(HeadKind::MetaSvdd);
    assert!(state.steps <= 30);
    let mut config = short_config();
    config.max_steps = Some(7);
    let (train, val) = splits();
    let state = meta_train(&train, &val, HeadKind::MetaSvdd, init(), &config, 9, None).unwrap();
    assert_eq!(state.steps, 7);
}

#[test]
fn repeated_steps_lower_the_loss_on_a_fixed_batch() {
    let (train, _) = splits();
    let config = short_config();
    let episodes = sample_meta_batch(&train, &config.episode, 21).unwrap();
    for kind in [HeadKind::MetaSvdd, HeadKind::OcProtonet] {
        let params = init();
        let tensors: Vec<Tensor<f64>> = params.tensors.iter().map(|t| t.value.clone()).collect();
        let mut adam = config.adam;
        adam.learning_rate = 1e-2;
        let mut state = TrainState {
            optimizer: OptimizerState::new(&tensors, adam),
            best_params: params.clone(),
            params,
            best_validation: None,
            evals_since_improvement: 0,
            history: Vec::new(),
            steps: 0,
            skipped_episodes: 0,
        };
        let first = train_step(&mut state, kind, &train, &episodes)
            .unwrap()
            .loss;
        let mut last = first;
        for _ in 0..10 {
            last = train_step(&mut state, kind, &train, &episodes)
                .unwrap()
                .loss;
        }
        assert!(last < first, "{kind}: {first} -> {last}");
    }
}

#[test]
fn thread_count_does_not_change_training() {
    let pool = |n| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .unwrap()
    };
    let single = pool(1).install(|| run(HeadKind::MetaSvdd));
    let many = pool(4).install(|| run(HeadKind::MetaSvdd));
    assert_eq!(single.0.best_params, many.0.best_params);
    assert_eq!(single.1, many.1);
}

#[test]
fn eval_encoding_is_row_equivariant() {
    let params = init_encoder(
        &Architecture::Conv {
            blocks: 2,
            filters: 3,
        },
        &[8, 8, 1],
        0,
        5,
    )
    .unwrap();
    let data: Vec<f64> = (0..4 * 64)
        .map(|i| ((i * 37) % 101) as f64 / 101.0)
        .collect();
    let batch = Tensor::new(vec![4, 8, 8, 1], data.clone()).unwrap();
    let order = [2usize, 0, 3, 1];
    let shuffled: Vec<f64> = order
        .iter()
        .flat_map(|&i| data[i * 64..(i + 1) * 64].to_vec())
        .collect();
    let shuffled = Tensor::new(vec![4, 8, 8, 1], shuffled).unwrap();
    let a = encode_eval(&params, &batch).unwrap();
    let b = encode_eval(&params, &shuffled).unwrap();
    for (k, &i) in order.iter().enumerate() {
        assert_eq!(b.row(k), a.row(i));
    }
    let single = encode_eval(
        &params,
        &Tensor::new(vec![1, 8, 8, 1], data[64..128].to_vec()).unwrap(),
    )
    .unwrap();
    assert_eq!(single.row(0), a.row(1));
}

#[test]
fn accuracy_protocol_is_deterministic() {
    let (_, val) = splits();
    let params = init();
    let scorer = HeadScorer {
        head: HeadKind::MetaSvdd.into(),
        params: &params,
    };
    let a = accuracy_protocol(&scorer, &val, 3, 40, 17).unwrap();
    let b = accuracy_protocol(&scorer, &val, 3, 40, 17).unwrap();
    assert_eq!(a, b);
    assert!((0.0..=1.0).contains(&a.mean));
}
