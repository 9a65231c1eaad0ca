//! Round orchestration: bootstrap broadcast, per-client distill / train /
//! sparsify / upload, then server aggregation and distillation.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{adaptive_aggregate, aggregate_projections, dense_mean_aggregate, zero_pad_aggregate, AggregatedLogits};
use crate::channel::{sample_channel_state, top_k_budget, Budget, ChannelModelConfig, ChannelState};
use crate::data::{dirichlet_partition, select_clients, synthetic_dataset_gen, LabeledSet, PublicSet, SyntheticData, SyntheticSpec};
use crate::distill::{total_distill_loss, DistillConfig};
use crate::error::{Error, Result};
use crate::lora::ProjectionBundle;
use crate::model::{accuracy_eval, train_supervised, Activation, ModelSpec, ModelState, TrainConfig};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::telemetry::{RoundMetrics, RoundRecord, RunLedger};
use crate::tensor::Tensor2D;
use crate::wire::{decode_payload, encode_payload, payload_size_bits, sparsify, Payload, ProjectionPayload, SparsePayload, TeacherPayload};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Channel-budgeted Top-k, adaptive aggregation, projection distillation.
    Adald,
    /// Channel-budgeted Top-k with adaptive aggregation only.
    Adaptive,
    /// Channel-budgeted Top-k with zero-padded averaging.
    Zeropad,
    /// Every logit, every round, plain mean.
    AllLogits,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Adald, Strategy::Adaptive, Strategy::Zeropad, Strategy::AllLogits];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Adald => "adald",
            Strategy::Adaptive => "adaptive",
            Strategy::Zeropad => "zeropad",
            Strategy::AllLogits => "all_logits",
        }
    }

    pub fn uses_projections(self) -> bool {
        self == Strategy::Adald
    }

    pub fn respects_channel(self) -> bool {
        self != Strategy::AllLogits
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown strategy {s:?} (expected adald, adaptive, zeropad or all_logits)"))
    }
}

/// What the server sends to clients after its distillation step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BroadcastMode {
    /// The server's own post-distillation logits and projections.
    #[default]
    ServerOutputs,
    /// The raw client aggregate `{K_g, h_g}`.
    RawAggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub rounds: u32,
    pub strategy: Strategy,
    pub dirichlet_gamma: f64,
    pub seed: u64,
    pub data: SyntheticSpec,
    pub client_model: ModelSpec,
    pub server_model: ModelSpec,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    /// Distillation epochs over the public set per round, each side.
    pub distill_epochs: usize,
    /// `seed` here is replaced by one derived from the run seed.
    pub channel: ChannelModelConfig,
    pub broadcast: BroadcastMode,
}

/// Desk-scale configuration: small MLPs on a synthetic Gaussian mixture.
impl Default for FedConfig {
    fn default() -> Self {
        let data = SyntheticSpec {
            num_classes: 10,
            feature_dim: 32,
            samples_per_class: 200,
            test_samples_per_class: 50,
            public_set_size: 1000,
            cluster_spread: 1.0,
        };
        Self {
            num_clients: 20,
            clients_per_round: 10,
            rounds: 30,
            strategy: Strategy::Adald,
            dirichlet_gamma: 0.5,
            seed: 0,
            data,
            client_model: ModelSpec::mlp(&[32, 64, 10], Activation::Relu, 8, 32.0),
            server_model: ModelSpec::mlp(&[32, 128, 10], Activation::Relu, 8, 32.0),
            train: TrainConfig::default(),
            distill: DistillConfig::default(),
            distill_epochs: 1,
            channel: ChannelModelConfig::default(),
            broadcast: BroadcastMode::default(),
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "FedConfig";
        if self.num_clients == 0 {
            return Err(Error::input(OP, "num_clients must be at least 1"));
        }
        if self.clients_per_round > self.num_clients {
            return Err(Error::input(OP, "clients_per_round exceeds num_clients"));
        }
        if self.rounds == 0 {
            return Err(Error::input(OP, "rounds must be at least 1"));
        }
        if !(self.dirichlet_gamma > 0.0 && self.dirichlet_gamma.is_finite()) {
            return Err(Error::input(OP, "dirichlet_gamma must be positive"));
        }
        if self.data.public_set_size == 0 || self.data.test_samples_per_class == 0 {
            return Err(Error::input(OP, "public and test sets must be nonempty"));
        }
        self.train.validate()?;
        self.distill.validate()?;
        self.channel.validate()?;
        for (name, spec) in [("client_model", &self.client_model), ("server_model", &self.server_model)] {
            spec.validate()?;
            if spec.input_dim() != self.data.feature_dim || spec.num_classes != self.data.num_classes {
                return Err(Error::input(OP, format!("{name} does not match the data dimensions")));
            }
        }
        let (c, s) = (&self.client_model, &self.server_model);
        if c.lora_rank != s.lora_rank || c.projection_layers.len() != s.projection_layers.len() {
            return Err(Error::input(OP, "client and server must share LoRA rank and projection layer count"));
        }
        Ok(())
    }

    /// Public-set batch size for distillation and the supervised config with
    /// decay disabled; the regularizer belongs to the supervised objective only.
    fn distill_train(&self) -> TrainConfig {
        TrainConfig { weight_decay: 0.0, ..self.train }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ServerInfer,
    Broadcast,
    ClientDistill,
    ClientTrain,
    ClientInfer,
    ClientUpload,
    ClientSkip,
    ServerAggregate,
    ServerDistill,
}

/// One line of the event log. `client` is `None` for server stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub round: u32,
    pub stage: Stage,
    pub client: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bytes: Option<u64>,
}

impl Event {
    fn server(round: u32, stage: Stage) -> Self {
        Self { round, stage, client: None, k: None, bytes: None }
    }

    fn client(round: u32, stage: Stage, id: u32) -> Self {
        Self { round, stage, client: Some(id), k: None, bytes: None }
    }
}

/// Teacher signal as seen by a student: logits with coverage, and projections
/// when they are being exchanged.
#[derive(Debug, Clone)]
pub struct Teacher<'a> {
    pub logits: &'a AggregatedLogits,
    pub projections: Option<&'a ProjectionBundle>,
}

impl AggregatedLogits {
    fn select_rows(&self, idx: &[usize]) -> AggregatedLogits {
        let c = self.dim_c();
        let coverage = idx.iter().flat_map(|&i| self.coverage_row(i).iter().copied()).collect::<Vec<_>>();
        debug_assert_eq!(coverage.len(), idx.len() * c);
        AggregatedLogits { values: self.values.select_rows(idx), coverage }
    }
}

fn bundle_rows(b: &ProjectionBundle, idx: &[usize]) -> ProjectionBundle {
    ProjectionBundle::new(idx.len(), b.rank(), b.layers().iter().map(|l| l.select_rows(idx)).collect())
        .expect("row selection keeps shape")
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DistillStats {
    pub loss_logits: f64,
    pub loss_h: f64,
    pub batches: usize,
}

/// Minibatch SGD on the combined distillation objective over the public set.
pub fn distill_epochs<R: Rng + ?Sized>(
    model: &mut ModelState,
    teacher: &Teacher<'_>,
    public: &PublicSet,
    distill: &DistillConfig,
    train: &TrainConfig,
    epochs: usize,
    rng: &mut R,
) -> Result<DistillStats> {
    if teacher.logits.num_samples() != public.len() {
        return Err(Error::shape("distill_epochs", "teacher logits do not cover the public set"));
    }
    let use_h = teacher.projections.is_some_and(|b| !b.is_empty());
    let mut order: Vec<usize> = (0..public.len()).collect();
    let mut stats = DistillStats::default();
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(train.batch_size) {
            let x = public.features().select_rows(chunk);
            let t_logits = teacher.logits.select_rows(chunk);
            let out = model.forward(&x)?;
            let student_h = model.projection_bundle(&out)?;
            let t_h = match teacher.projections {
                Some(b) if use_h => bundle_rows(b, chunk),
                _ => ProjectionBundle::empty(chunk.len(), student_h.rank()),
            };
            let loss = total_distill_loss(&t_logits, &t_h, &out.logits, &student_h, distill)?;
            let d_proj = if use_h { Some(loss.d_projections.as_slice()) } else { None };
            let grads = model.backward(&out.cache, &loss.d_logits, d_proj)?;
            model.sgd_step(&grads, train)?;
            stats.loss_logits += loss.logits;
            stats.loss_h += loss.projection;
            stats.batches += 1;
        }
    }
    if stats.batches > 0 {
        stats.loss_logits /= stats.batches as f64;
        stats.loss_h /= stats.batches as f64;
    }
    Ok(stats)
}

/// Everything one participating client produced in a round.
#[derive(Debug, Clone)]
pub struct ClientOutcome {
    pub client_id: u32,
    /// `None` when the channel budget could not fit a single entry.
    pub upload: Option<SparsePayload>,
    /// Full-precision projections on the public set, when exchanged.
    pub projections: Option<ProjectionBundle>,
    pub k: Option<usize>,
    pub distill: DistillStats,
    pub train_loss: f64,
    pub events: Vec<Event>,
}

/// Per-round knobs shared by every party.
#[derive(Debug, Clone, Copy)]
pub struct RoundSettings<'a> {
    pub round: u32,
    pub strategy: Strategy,
    pub cfg: &'a FedConfig,
}

/// Distill toward the broadcast, train on the private shard, infer on the
/// public set and sparsify under the channel budget.
pub fn client_round<R: Rng + ?Sized>(
    client: &mut ModelState,
    client_id: u32,
    broadcast: &TeacherPayload,
    shard: &LabeledSet,
    public: &PublicSet,
    channel: &ChannelState,
    settings: RoundSettings<'_>,
    rng: &mut R,
) -> Result<ClientOutcome> {
    let RoundSettings { round, strategy, cfg } = settings;
    let mut events = Vec::with_capacity(4);
    let teacher_logits = AggregatedLogits::from_dense(broadcast.logits.clone(), 1);
    let teacher = Teacher {
        logits: &teacher_logits,
        projections: strategy.uses_projections().then_some(&broadcast.projections),
    };
    let distill_cfg = strategy_distill(strategy, &cfg.distill);
    let distill = distill_epochs(client, &teacher, public, &distill_cfg, &cfg.distill_train(), cfg.distill_epochs, rng)?;
    events.push(Event::client(round, Stage::ClientDistill, client_id));

    let train_loss = train_supervised(client, shard, &cfg.train, rng)?;
    events.push(Event::client(round, Stage::ClientTrain, client_id));

    let out = client.forward(public.features())?;
    events.push(Event::client(round, Stage::ClientInfer, client_id));
    let dim_c = out.logits.cols();
    let budget = if strategy.respects_channel() { top_k_budget(channel, dim_c)? } else { Budget::TopK(dim_c) };
    let (upload, projections, k) = match budget {
        Budget::Zero => {
            events.push(Event::client(round, Stage::ClientSkip, client_id));
            (None, None, None)
        }
        Budget::TopK(k) => {
            let payload = sparsify(&out.logits, k, client_id, round)?;
            let h = if strategy.uses_projections() { Some(client.projection_bundle(&out)?) } else { None };
            events.push(Event { k: Some(k), ..Event::client(round, Stage::ClientUpload, client_id) });
            (Some(payload), h, Some(k))
        }
    };
    Ok(ClientOutcome { client_id, upload, projections, k, distill, train_loss, events })
}

fn strategy_distill(strategy: Strategy, cfg: &DistillConfig) -> DistillConfig {
    if strategy.uses_projections() {
        *cfg
    } else {
        DistillConfig { lambda_h: 0.0, ..*cfg }
    }
}

#[derive(Debug, Clone)]
pub struct ServerOutcome {
    pub broadcast: TeacherPayload,
    /// `None` when nothing was uploaded this round.
    pub aggregate: Option<AggregatedLogits>,
    pub distill: DistillStats,
    pub events: Vec<Event>,
}

/// Server inference on the public set, packaged as a broadcast.
pub fn server_inference(server: &ModelState, public: &PublicSet, round: u32, strategy: Strategy) -> Result<TeacherPayload> {
    let out = server.forward(public.features())?;
    let h = if strategy.uses_projections() {
        server.projection_bundle(&out)?
    } else {
        ProjectionBundle::empty(public.len(), server.spec().lora_rank)
    };
    TeacherPayload::new(round, out.logits, h)
}

/// Aggregate uploads per strategy.
pub fn aggregate_uploads(strategy: Strategy, uploads: &[SparsePayload]) -> Result<AggregatedLogits> {
    match strategy {
        Strategy::Adald | Strategy::Adaptive => adaptive_aggregate(uploads),
        Strategy::Zeropad => zero_pad_aggregate(uploads),
        Strategy::AllLogits => {
            let dense: Vec<Tensor2D> = uploads
                .iter()
                .map(|p| {
                    if p.k() != p.dim_c() {
                        return Err(Error::input("aggregate_uploads", "all_logits expects dense uploads"));
                    }
                    Ok(p.densify().0)
                })
                .collect::<Result<_>>()?;
            dense_mean_aggregate(&dense)
        }
    }
}

/// Aggregate uploads, distill the server toward them, and build the next
/// broadcast. With no uploads the server is left untouched and rebroadcasts
/// its own inference.
pub fn server_round<R: Rng + ?Sized>(
    server: &mut ModelState,
    uploads: &[SparsePayload],
    bundles: &[ProjectionBundle],
    public: &PublicSet,
    settings: RoundSettings<'_>,
    rng: &mut R,
) -> Result<ServerOutcome> {
    let RoundSettings { round, strategy, cfg } = settings;
    if uploads.is_empty() {
        return Ok(ServerOutcome {
            broadcast: server_inference(server, public, round, strategy)?,
            aggregate: None,
            distill: DistillStats::default(),
            events: vec![Event::server(round, Stage::ServerInfer)],
        });
    }
    let mut events = Vec::with_capacity(3);
    let k_g = aggregate_uploads(strategy, uploads)?;
    let h_g = if strategy.uses_projections() && !bundles.is_empty() {
        Some(aggregate_projections(bundles)?)
    } else {
        None
    };
    events.push(Event::server(round, Stage::ServerAggregate));
    let teacher = Teacher { logits: &k_g, projections: h_g.as_ref() };
    let distill_cfg = strategy_distill(strategy, &cfg.distill);
    let distill = distill_epochs(server, &teacher, public, &distill_cfg, &cfg.distill_train(), cfg.distill_epochs, rng)?;
    events.push(Event::server(round, Stage::ServerDistill));
    let broadcast = match cfg.broadcast {
        BroadcastMode::ServerOutputs => server_inference(server, public, round, strategy)?,
        BroadcastMode::RawAggregate => {
            let h = h_g.clone().unwrap_or_else(|| ProjectionBundle::empty(public.len(), server.spec().lora_rank));
            TeacherPayload::new(round, k_g.values.clone(), h)?
        }
    };
    events.push(Event::server(round, Stage::ServerInfer));
    Ok(ServerOutcome { broadcast, aggregate: Some(k_g), distill, events })
}

/// Records, events and final models of one run.
#[derive(Debug)]
pub struct RunLog {
    pub records: Vec<RoundRecord>,
    pub events: Vec<Event>,
    pub server: ModelState,
}

impl RunLog {
    /// One JSON object per line.
    pub fn events_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.events {
            s.push_str(&serde_json::to_string(e).expect("events serialize"));
            s.push('\n');
        }
        s
    }
}

/// Sends a payload through the codec: returns its exact size and what the
/// receiver decodes.
fn transmit(p: &Payload) -> Result<(u64, Payload)> {
    let blob = encode_payload(p);
    let bits = blob.len() as u64 * 8;
    debug_assert_eq!(bits, payload_size_bits(p));
    Ok((bits, decode_payload(&blob)?))
}

pub fn run_experiment(cfg: &FedConfig) -> Result<RunLog> {
    cfg.validate()?;
    let data = synthetic_dataset_gen(&cfg.data, cfg.seed)?;
    run_experiment_with_data(cfg, &data)
}

/// Runs every round on pre-generated data. A pure function of its inputs.
pub fn run_experiment_with_data(cfg: &FedConfig, data: &SyntheticData) -> Result<RunLog> {
    cfg.validate()?;
    let seed = cfg.seed;
    let strategy = cfg.strategy;
    let channel_cfg = ChannelModelConfig { seed: derive_seed(seed, Stream::Channel, &[]), ..cfg.channel };
    let shards: Vec<LabeledSet> = dirichlet_partition(&data.pool, cfg.num_clients, cfg.dirichlet_gamma, seed)?
        .iter()
        .map(|idx| data.pool.subset(idx))
        .collect();
    let client_backbone = derive_seed(seed, Stream::Backbone, &[0]);
    let server_backbone = derive_seed(seed, Stream::Backbone, &[1]);
    let mut clients = (0..cfg.num_clients)
        .map(|n| ModelState::new(cfg.client_model.clone(), client_backbone, derive_seed(seed, Stream::Adapter, &[n as u64])))
        .collect::<Result<Vec<_>>>()?;
    let mut server = ModelState::new(cfg.server_model.clone(), server_backbone, derive_seed(seed, Stream::Adapter, &[u64::MAX]))?;

    let mut ledger = RunLedger::new(strategy, seed);
    let mut events = vec![Event::server(0, Stage::ServerInfer)];
    let mut broadcast = server_inference(&server, &data.public, 0, strategy).map_err(|e| e.in_round(0))?;
    let all_clients_acc = |clients: &[ModelState]| -> Result<f64> {
        let accs = clients.par_iter().map(|c| accuracy_eval(c, &data.test)).collect::<Result<Vec<_>>>()?;
        Ok(accs.iter().sum::<f64>() / accs.len() as f64)
    };
    ledger.record_round(
        0,
        0,
        0,
        RoundMetrics {
            server_accuracy: accuracy_eval(&server, &data.test).map_err(|e| e.in_round(0))?,
            mean_client_accuracy: all_clients_acc(&clients).map_err(|e| e.in_round(0))?,
            ..Default::default()
        },
    );

    for round in 1..=cfg.rounds {
        let settings = RoundSettings { round, strategy, cfg };
        let mut step = || -> Result<()> {
            let selected = select_clients(cfg.num_clients, cfg.clients_per_round, round, seed)?;
            let (down_bits, received) = transmit(&Payload::Teacher(broadcast.clone()))?;
            let received = match received {
                Payload::Teacher(t) => t,
                _ => unreachable!("teacher blob decodes to a teacher payload"),
            };
            let downlink_bits = down_bits * selected.len() as u64;
            if !selected.is_empty() {
                events.push(Event { bytes: Some(down_bits / 8), ..Event::server(round, Stage::Broadcast) });
            }

            let mut participants: Vec<(usize, &mut ModelState)> =
                clients.iter_mut().enumerate().filter(|(i, _)| selected.binary_search(i).is_ok()).collect();
            let outcomes = participants
                .par_iter_mut()
                .map(|(id, model)| {
                    let id = *id;
                    let state = sample_channel_state(&channel_cfg, id, round);
                    let mut rng = stream_rng(seed, Stream::Shuffle, &[id as u64, u64::from(round)]);
                    client_round(model, id as u32, &received, &shards[id], &data.public, &state, settings, &mut rng)
                })
                .collect::<Result<Vec<_>>>()?;
            drop(participants);

            let mut uplink_bits = 0u64;
            let mut uploads = Vec::new();
            let mut bundles = Vec::new();
            for o in &outcomes {
                events.extend(o.events.iter().cloned());
                if let Some(p) = &o.upload {
                    let (bits, got) = transmit(&Payload::Sparse(p.clone()))?;
                    uplink_bits += bits;
                    if let Some(e) = events.last_mut().filter(|e| e.stage == Stage::ClientUpload) {
                        e.bytes = Some(bits / 8);
                    }
                    match got {
                        Payload::Sparse(s) => uploads.push(s),
                        _ => unreachable!(),
                    }
                }
                if let Some(h) = &o.projections {
                    let p = Payload::Projection(ProjectionPayload { client_id: o.client_id, round, bundle: h.clone() });
                    let (bits, got) = transmit(&p)?;
                    uplink_bits += bits;
                    if let Some(e) = events.last_mut().filter(|e| e.stage == Stage::ClientUpload) {
                        e.bytes = Some(e.bytes.unwrap_or(0) + bits / 8);
                    }
                    match got {
                        Payload::Projection(p) => bundles.push(p.bundle),
                        _ => unreachable!(),
                    }
                }
            }

            let mut rng = stream_rng(seed, Stream::Shuffle, &[u64::MAX, u64::from(round)]);
            let outcome = server_round(&mut server, &uploads, &bundles, &data.public, settings, &mut rng)?;
            events.extend(outcome.events);
            broadcast = outcome.broadcast;

            let mean_client_accuracy = if selected.is_empty() {
                all_clients_acc(&clients)?
            } else {
                let accs = selected
                    .par_iter()
                    .map(|&i| accuracy_eval(&clients[i], &data.test))
                    .collect::<Result<Vec<_>>>()?;
                accs.iter().sum::<f64>() / accs.len() as f64
            };
            ledger.record_round(
                round,
                uplink_bits,
                downlink_bits,
                RoundMetrics {
                    server_accuracy: accuracy_eval(&server, &data.test)?,
                    mean_client_accuracy,
                    loss_logits: outcome.distill.loss_logits,
                    loss_h: outcome.distill.loss_h,
                },
            );
            Ok(())
        };
        step().map_err(|e| e.in_round(round))?;
    }
    Ok(RunLog { records: ledger.into_records(), events, server })
}
