use fdsim_core::aggregation::AggregatedLogits;
use fdsim_core::channel::{ChannelModelConfig, ChannelState};
use fdsim_core::data::{synthetic_dataset_gen, SyntheticSpec};
use fdsim_core::distill::DistillConfig;
use fdsim_core::federation::*;
use fdsim_core::lora::ProjectionBundle;
use fdsim_core::model::{Activation, ModelSpec, ModelState, TrainConfig};
use fdsim_core::rng::{stream_rng, Stream};
use fdsim_core::wire::{TeacherPayload, HEADER_BYTES};
use fdsim_core::Error;

const PUBLIC: usize = 120;
const CLASSES: usize = 4;
const RANK: usize = 4;

fn tiny(strategy: Strategy, seed: u64) -> FedConfig {
    FedConfig {
        num_clients: 6,
        clients_per_round: 3,
        rounds: 3,
        strategy,
        seed,
        data: SyntheticSpec {
            num_classes: CLASSES,
            feature_dim: 8,
            samples_per_class: 40,
            test_samples_per_class: 20,
            public_set_size: PUBLIC,
            cluster_spread: 1.0,
        },
        client_model: ModelSpec::mlp(&[8, 16, CLASSES], Activation::Relu, RANK, 32.0),
        server_model: ModelSpec::mlp(&[8, 24, CLASSES], Activation::Relu, RANK, 32.0),
        ..FedConfig::default()
    }
}

#[test]
fn runs_are_pure_functions_of_the_config() {
    let cfg = tiny(Strategy::Adald, 3);
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.events_jsonl(), b.events_jsonl());
    let c = run_experiment(&tiny(Strategy::Adald, 4)).unwrap();
    assert_ne!(a.records, c.records);
}

#[test]
fn round_zero_is_a_free_bootstrap() {
    let log = run_experiment(&tiny(Strategy::Adaptive, 0)).unwrap();
    assert_eq!(log.records.len(), 4);
    let r0 = &log.records[0];
    assert_eq!((r0.round, r0.uplink_bytes, r0.downlink_bytes, r0.cumulative_bytes), (0, 0, 0, 0));
    let total: u64 = log.records.iter().map(|r| r.uplink_bytes + r.downlink_bytes).sum();
    assert_eq!(log.records.last().unwrap().cumulative_bytes, total);
}

#[test]
fn all_logits_bytes_follow_the_size_formula() {
    let cfg = tiny(Strategy::AllLogits, 1);
    let log = run_experiment(&cfg).unwrap();
    let m = cfg.clients_per_round as u64;
    let (n, c) = (PUBLIC as u64, CLASSES as u64);
    for r in &log.records[1..] {
        assert_eq!(r.uplink_bytes, m * (HEADER_BYTES as u64 + n * c * 8));
        // Teacher blob: dense f32 logits, no projections for this strategy.
        assert_eq!(r.downlink_bytes, m * (HEADER_BYTES as u64 + n * c * 4));
    }
}

#[test]
fn adald_broadcasts_projections_and_baselines_do_not() {
    let n = PUBLIC as u64;
    let teacher = |s: Strategy| run_experiment(&tiny(s, 2)).unwrap().records[1].downlink_bytes / 3;
    assert_eq!(teacher(Strategy::Adald), HEADER_BYTES as u64 + n * CLASSES as u64 * 4 + n * RANK as u64 * 4);
    for s in [Strategy::Adaptive, Strategy::Zeropad] {
        assert_eq!(teacher(s), HEADER_BYTES as u64 + n * CLASSES as u64 * 4);
    }
}

#[test]
fn all_logits_uplink_dominates_when_budgets_bind() {
    // Two bits of budget per round at most, so every client has k < c.
    let mut adaptive = tiny(Strategy::Adaptive, 5);
    adaptive.channel = ChannelModelConfig { time_budget_s: 2.0e-5, ..ChannelModelConfig::default() };
    let all = FedConfig { strategy: Strategy::AllLogits, ..adaptive.clone() };
    let (a, b) = (run_experiment(&adaptive).unwrap(), run_experiment(&all).unwrap());
    for (x, y) in a.records[1..].iter().zip(&b.records[1..]) {
        assert!(y.uplink_bytes > x.uplink_bytes, "round {}: {} vs {}", x.round, y.uplink_bytes, x.uplink_bytes);
    }
}

#[test]
fn same_channel_draws_give_same_uplinks_across_topk_strategies() {
    let a = run_experiment(&tiny(Strategy::Adaptive, 6)).unwrap();
    let z = run_experiment(&tiny(Strategy::Zeropad, 6)).unwrap();
    let up = |l: &RunLog| l.records.iter().map(|r| r.uplink_bytes).collect::<Vec<_>>();
    assert_eq!(up(&a), up(&z));
}

#[test]
fn empty_rounds_leave_the_server_alone() {
    let cfg = FedConfig { clients_per_round: 0, ..tiny(Strategy::Adald, 0) };
    let log = run_experiment(&cfg).unwrap();
    for r in &log.records {
        assert_eq!((r.uplink_bytes, r.downlink_bytes), (0, 0));
        assert_eq!(r.server_accuracy, log.records[0].server_accuracy);
    }
}

#[test]
fn degenerate_channel_sends_nothing() {
    let mut cfg = tiny(Strategy::Adald, 8);
    cfg.channel.time_budget_s = 1e-6;
    let log = run_experiment(&cfg).unwrap();
    assert!(log.records.iter().all(|r| r.uplink_bytes == 0));
    assert!(log.records.iter().all(|r| r.server_accuracy == log.records[0].server_accuracy));
    assert!(log.events.iter().any(|e| e.stage == Stage::ClientSkip));
    assert!(!log.events.iter().any(|e| e.stage == Stage::ClientUpload));
}

#[test]
fn public_labels_are_never_read() {
    let cfg = tiny(Strategy::Adald, 9);
    let data = synthetic_dataset_gen(&cfg.data, cfg.seed).unwrap();
    run_experiment_with_data(&cfg, &data).unwrap();
    assert_eq!(data.public_labels.reads(), 0);
}

#[test]
fn event_order_within_a_round() {
    let log = run_experiment(&tiny(Strategy::Adald, 1)).unwrap();
    let round1: Vec<Stage> = log.events.iter().filter(|e| e.round == 1).map(|e| e.stage).collect();
    assert_eq!(round1.first(), Some(&Stage::Broadcast));
    let pos = |s: Stage| round1.iter().position(|&x| x == s);
    let last_client = round1.iter().rposition(|s| matches!(s, Stage::ClientUpload | Stage::ClientSkip)).unwrap();
    assert!(pos(Stage::ClientDistill).unwrap() < pos(Stage::ClientTrain).unwrap());
    if let Some(agg) = pos(Stage::ServerAggregate) {
        assert!(last_client < agg);
        assert!(agg < pos(Stage::ServerDistill).unwrap());
    }
    assert_eq!(round1.iter().filter(|&&s| s == Stage::ClientDistill).count(), 3);
}

#[test]
fn failures_carry_the_round() {
    let cfg = tiny(Strategy::Adald, 0);
    let wrong = SyntheticSpec { feature_dim: 5, ..cfg.data };
    let data = synthetic_dataset_gen(&wrong, 0).unwrap();
    match run_experiment_with_data(&cfg, &data) {
        Err(Error::Round { round: 0, source }) => assert!(matches!(*source, Error::Shape { .. })),
        other => panic!("expected a round-0 shape error, got {other:?}"),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let base = tiny(Strategy::Adald, 0);
    for bad in [
        FedConfig { clients_per_round: 7, ..base.clone() },
        FedConfig { rounds: 0, ..base.clone() },
        FedConfig { dirichlet_gamma: 0.0, ..base.clone() },
        FedConfig { server_model: ModelSpec::mlp(&[8, 24, CLASSES], Activation::Relu, 2, 32.0), ..base.clone() },
        FedConfig { client_model: ModelSpec::mlp(&[9, 16, CLASSES], Activation::Relu, RANK, 32.0), ..base.clone() },
    ] {
        assert!(matches!(run_experiment(&bad), Err(Error::Input { .. })), "{bad:?}");
    }
}

fn fresh_client() -> ModelState {
    let mut m = ModelState::new(ModelSpec::mlp(&[8, 16, CLASSES], Activation::Tanh, RANK, 8.0), 1, 2).unwrap();
    let mut rng = stream_rng(0, Stream::Adapter, &[77]);
    for l in 0..2 {
        let ad = m.adapter_mut(l).unwrap();
        let (r, c) = ad.b.shape();
        ad.b = fdsim_core::tensor::Tensor2D::gaussian(r, c, 0.2, &mut rng);
    }
    m
}

#[test]
fn self_distillation_without_training_changes_nothing() {
    let cfg = tiny(Strategy::Adald, 0);
    let data = synthetic_dataset_gen(&cfg.data, 0).unwrap();
    let mut client = fresh_client();
    let before = client.clone();
    let out = client.forward(data.public.features()).unwrap();
    let broadcast = TeacherPayload::new(1, out.logits.clone(), client.projection_bundle(&out).unwrap()).unwrap();
    let zero_epochs = FedConfig { train: TrainConfig { local_epochs: 0, ..cfg.train }, ..cfg };
    let channel = ChannelState { bandwidth_hz: 1e6, snr_linear: 15.0, eta: 0.5, time_budget_s: 1e-4, bits_per_entry: 64 };
    let shard = data.pool.subset(&[0, 1, 2]);
    let settings = RoundSettings { round: 1, strategy: Strategy::Adald, cfg: &zero_epochs };
    let mut rng = stream_rng(0, Stream::Shuffle, &[0]);
    let outcome = client_round(&mut client, 0, &broadcast, &shard, &data.public, &channel, settings, &mut rng).unwrap();
    for l in 0..2 {
        assert_eq!(client.adapter(l).unwrap(), before.adapter(l).unwrap());
    }
    // Budget 0.5 * 4e6 * 1e-4 = 200 bits -> k = 3.
    assert_eq!(outcome.k, Some(3));
    assert_eq!(outcome.upload.unwrap().k(), 3);
    assert_eq!(outcome.projections.unwrap().num_layers(), 1);
}

#[test]
fn distillation_moves_the_student_toward_the_teacher() {
    let cfg = tiny(Strategy::Adaptive, 0);
    let data = synthetic_dataset_gen(&cfg.data, 0).unwrap();
    let mut student = fresh_client();
    let teacher_model = ModelState::new(ModelSpec::mlp(&[8, 16, CLASSES], Activation::Tanh, RANK, 8.0), 5, 6).unwrap();
    let t_logits = AggregatedLogits::from_dense(teacher_model.logits(data.public.features()).unwrap(), 1);
    let teacher = Teacher { logits: &t_logits, projections: None };
    let dcfg = DistillConfig::default();
    let train = TrainConfig { learning_rate: 0.05, weight_decay: 0.0, ..TrainConfig::default() };
    let mut rng = stream_rng(0, Stream::Shuffle, &[1]);
    let first = distill_epochs(&mut student, &teacher, &data.public, &dcfg, &train, 1, &mut rng).unwrap();
    let later = distill_epochs(&mut student, &teacher, &data.public, &dcfg, &train, 20, &mut rng).unwrap();
    assert!(later.loss_logits < first.loss_logits, "{later:?} vs {first:?}");
    assert_eq!(first.loss_h, 0.0);
}

#[test]
fn server_round_without_uploads_is_inference_only() {
    let cfg = tiny(Strategy::Adald, 0);
    let data = synthetic_dataset_gen(&cfg.data, 0).unwrap();
    let mut server = ModelState::new(cfg.server_model.clone(), 1, 2).unwrap();
    let before = server.clone();
    let mut rng = stream_rng(0, Stream::Shuffle, &[2]);
    let settings = RoundSettings { round: 4, strategy: Strategy::Adald, cfg: &cfg };
    let out = server_round(&mut server, &[], &[] as &[ProjectionBundle], &data.public, settings, &mut rng).unwrap();
    assert!(out.aggregate.is_none());
    assert_eq!(out.broadcast.round, 4);
    assert_eq!(out.broadcast.logits, before.logits(data.public.features()).unwrap());
    assert_eq!(server.adapter(1).unwrap(), before.adapter(1).unwrap());
}

#[test]
fn raw_aggregate_broadcast_mode_runs() {
    let cfg = FedConfig { broadcast: BroadcastMode::RawAggregate, ..tiny(Strategy::Adald, 2) };
    let log = run_experiment(&cfg).unwrap();
    assert_eq!(log.records.len(), 4);
}

#[test]
fn strategy_names_round_trip() {
    for s in Strategy::ALL {
        assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{s}\""));
    }
    assert!("bogus".parse::<Strategy>().is_err());
}
