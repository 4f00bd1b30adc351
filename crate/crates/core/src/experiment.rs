//! Assembling a run from a [`Config`]: data, common expert, client shards,
//! test bench and schedule; plus the fixed output-directory layout.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde_json::{json, Value};

use crate::baselines;
use crate::config::{Config, Method, ScenarioMode};
use crate::data::{
    self, make_anchor_shards, make_test_clients, AnchorConfig, ClientShard, LabeledDataset, PartitionConfig,
    ShardKind, Strategy,
};
use crate::error::{Error, Result};
use crate::eval::{self, ScenarioSchedule, TestBench};
use crate::gating::CommonExpert;
use crate::metrics;
use crate::nn::{self, read_checkpoint, write_checkpoint, Batch, CheckpointRecord, Head, NetSpec, OptimizerState, ParamVector};
use crate::runtime::{Federation, RunConfig, RunOutput, ServerState};
use crate::seed;

pub const CONFIG_ECHO: &str = "config.echo.json";
pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const METRICS_CSV: &str = "metrics.csv";
pub const STATE_CKPT: &str = "state.ckpt";
pub const COMM_CSV: &str = "comm.csv";

/// Train and held-out test splits drawn from the same class means.
pub fn datasets(cfg: &Config) -> Result<(LabeledDataset, LabeledDataset)> {
    let d = &cfg.data;
    let full = data::synth_dataset(
        d.num_classes,
        d.dim,
        d.train_per_class + d.test_per_class,
        d.separation,
        cfg.training.seed,
    )?;
    full.split_tail(d.test_per_class)
}

fn mlp(input: usize, hidden: &[usize], output: usize) -> Result<NetSpec> {
    let dims: Vec<usize> = std::iter::once(input)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(output))
        .collect();
    NetSpec::mlp(&dims, Head::Logits)
}

pub fn expert_spec(cfg: &Config) -> Result<NetSpec> {
    mlp(cfg.data.dim, &cfg.model.expert_hidden, cfg.data.num_classes)
}

pub fn common_spec(cfg: &Config) -> Result<NetSpec> {
    mlp(cfg.data.dim, cfg.common_hidden(), cfg.data.num_classes)
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub params: ParamVector,
    /// Held-out accuracy when training stopped.
    pub accuracy: f64,
    pub steps: usize,
    pub epochs: usize,
}

#[derive(Clone, Debug)]
pub struct PretrainSettings {
    /// Stop as soon as held-out accuracy reaches this; run every epoch when
    /// `None`.
    pub target: Option<f64>,
    pub max_epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl PretrainSettings {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            target: Some(cfg.model.common_target_acc),
            max_epochs: cfg.model.common_max_epochs,
            lr: cfg.model.common_lr,
            momentum: cfg.model.common_momentum,
            batch_size: cfg.model.common_batch_size,
            seed: cfg.training.seed,
        }
    }
}

/// Accuracy of `params` on every row of `heldout`.
pub fn heldout_accuracy(spec: &NetSpec, params: &ParamVector, heldout: &LabeledDataset) -> Result<f64> {
    Ok(nn::accuracy(&nn::forward(spec, params, &heldout.inputs)?, &heldout.labels))
}

/// Centralised SGDM until held-out accuracy reaches the target, checked
/// before the first step and after every step.
///
/// Fails with [`Error::TargetUnreached`] after `max_epochs` passes.
pub fn pretrain_common(
    spec: &NetSpec,
    train: &LabeledDataset,
    heldout: &LabeledDataset,
    s: &PretrainSettings,
) -> Result<Pretrained> {
    let mut params = ParamVector::init(spec, &mut seed::stream(s.seed, &[seed::tag::COMMON_INIT]));
    let reached = |acc: f64| s.target.is_some_and(|t| acc >= t);
    let mut accuracy = heldout_accuracy(spec, &params, heldout)?;
    let mut steps = 0;
    if reached(accuracy) {
        return Ok(Pretrained { params, accuracy, steps, epochs: 0 });
    }
    let mut opt = OptimizerState::new(params.len(), s.lr, s.momentum)?;
    let mut rng = seed::stream(s.seed, &[seed::tag::COMMON_TRAIN]);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=s.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(s.batch_size.max(1)) {
            let batch: Batch = train.batch(chunk)?;
            let (_, g) = nn::loss_and_grad(spec, &params, &batch, nn::LossKind::CeOnLogits)
                .map_err(|e| e.within(format!("pretraining step {steps}")))?;
            opt.step(&mut params, &g)?;
            steps += 1;
            accuracy = heldout_accuracy(spec, &params, heldout)?;
            if reached(accuracy) {
                return Ok(Pretrained { params, accuracy, steps, epochs: epoch });
            }
        }
    }
    match s.target {
        Some(target) => Err(Error::TargetUnreached { target, achieved: accuracy }),
        None => Ok(Pretrained { params, accuracy, steps, epochs: s.max_epochs }),
    }
}

pub fn common_record(spec: &NetSpec, p: &Pretrained, seed: u64) -> CheckpointRecord {
    CheckpointRecord::new(spec.clone(), p.params.clone())
        .with_meta("role", "common")
        .with_meta("accuracy", p.accuracy)
        .with_meta("steps", p.steps)
        .with_meta("epochs", p.epochs)
        .with_meta("seed", seed)
}

/// The common expert and its held-out accuracy: loaded from
/// `model.common_checkpoint` when set, pretrained otherwise.
pub fn prepare_common(cfg: &Config, train: &LabeledDataset, heldout: &LabeledDataset) -> Result<(CommonExpert, f64)> {
    let (spec, params) = match &cfg.model.common_checkpoint {
        Some(path) => {
            let recs = read_checkpoint(Path::new(path))?;
            let rec = recs
                .into_iter()
                .find(|r| r.meta.get("role").and_then(Value::as_str).unwrap_or("common") == "common")
                .ok_or_else(|| Error::Protocol(format!("{path} holds no common expert")))?;
            if rec.spec.input_dim() != cfg.data.dim || rec.spec.output_dim() != cfg.data.num_classes {
                return Err(Error::config(format!("{path} does not match the data dimensions")));
            }
            (rec.spec, rec.params)
        }
        None => {
            let spec = common_spec(cfg)?;
            let p = pretrain_common(&spec, train, heldout, &PretrainSettings::from_config(cfg))?;
            (spec, p.params)
        }
    };
    let acc = heldout_accuracy(&spec, &params, heldout)?;
    Ok((CommonExpert::new(spec, params, cfg.model.embed_layer)?, acc))
}

/// Contiguous label ranges, as even as possible.
pub fn label_groups(num_classes: usize, groups: usize) -> Vec<Vec<usize>> {
    (0..groups)
        .map(|g| (g * num_classes / groups..(g + 1) * num_classes / groups).collect())
        .collect()
}

fn relabel(shards: Vec<ClientShard>, first_id: usize, ds: &LabeledDataset, kind: ShardKind) -> Result<Vec<ClientShard>> {
    shards
        .into_iter()
        .enumerate()
        .map(|(i, s)| ClientShard::new(first_id + i, s.indices, ds, kind))
        .collect()
}

fn mean_len(shards: &[ClientShard]) -> usize {
    (shards.iter().map(ClientShard::len).sum::<usize>() / shards.len().max(1)).max(1)
}

/// A fully assembled, ready-to-run experiment.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: Config,
    pub run: RunConfig,
    pub fed: Federation,
    pub bench: TestBench,
    pub common_acc: f64,
    pub schedule: Option<ScenarioSchedule>,
}

pub fn build(cfg: &Config) -> Result<Experiment> {
    cfg.validate()?;
    let (train, test) = datasets(cfg)?;
    let (common, common_acc) = prepare_common(cfg, &train, &test)?;
    build_with_common(cfg, train, test, common, common_acc)
}

/// Client shards and schedules, independent of the common expert.
#[derive(Clone, Debug)]
pub struct Layout {
    pub anchors: Vec<ClientShard>,
    pub normals: Vec<ClientShard>,
    pub test_clients: Vec<ClientShard>,
    /// Label -> expert, when the anchors' label groups are disjoint and cover every class.
    pub truth: Option<BTreeMap<usize, usize>>,
    /// Test client ids per scenario label group.
    pub test_groups: Option<Vec<Vec<usize>>>,
    pub schedule: Option<ScenarioSchedule>,
}

impl Layout {
    /// Every training and test shard, for inspection.
    pub fn all_shards(&self) -> Vec<ClientShard> {
        self.anchors
            .iter()
            .chain(&self.normals)
            .chain(&self.test_clients)
            .cloned()
            .collect()
    }
}

pub fn layout(cfg: &Config, train: &LabeledDataset, test: &LabeledDataset) -> Result<Layout> {
    cfg.validate()?;
    let d = &cfg.data;
    let f = &cfg.federation;
    let s = cfg.training.seed;
    let m = f.num_experts;
    let num_normals = f.num_clients - m;

    let groups = cfg.scenario.as_ref().map(|sc| label_groups(d.num_classes, sc.groups));
    let (normals, normal_groups) = match &groups {
        None => {
            let shards = data::partition(
                train,
                &PartitionConfig {
                    strategy: d.partition,
                    num_clients: num_normals,
                    seed: s,
                    with_replacement: d.with_replacement,
                    shard_size: d.shard_size,
                },
            )?;
            (relabel(shards, m, train, ShardKind::Normal)?, None)
        }
        Some(groups) => {
            let Strategy::Quantity { labels_per_client } = d.partition else {
                return Err(Error::config("scenario runs need the quantity partition"));
            };
            let mut normals = Vec::new();
            let mut ids = Vec::new();
            for (g, labels) in groups.iter().enumerate() {
                let count = num_normals / groups.len() + usize::from(g < num_normals % groups.len());
                let shard_size = d.shard_size.or(Some(train.len() / num_normals));
                let shards = data::partition_quantity_within(
                    train,
                    labels,
                    count,
                    labels_per_client.min(labels.len()),
                    seed::derive(s, &[g as u64]),
                    d.with_replacement,
                    shard_size,
                )?;
                let first = m + normals.len();
                ids.push((first..first + count).collect::<Vec<_>>());
                normals.extend(relabel(shards, first, train, ShardKind::Normal)?);
            }
            (normals, Some(ids))
        }
    };

    let anchor_cfg = AnchorConfig {
        count: m,
        labels_per_anchor: d.anchor_labels,
        disjoint: d.anchor_disjoint,
        alpha: d.anchor_alpha,
        shard_size: d.anchor_shard_size.unwrap_or_else(|| mean_len(&normals)),
    };
    let anchors = make_anchor_shards(train, &anchor_cfg, s)?;
    let training: Vec<ClientShard> = anchors.iter().chain(&normals).cloned().collect();
    let test_strategy = d.test_partition.unwrap_or(d.partition);
    let test_size = d.test_shard_size.unwrap_or_else(|| mean_len(&training));

    let (test_clients, test_groups) = match &groups {
        None => (
            make_test_clients(test, f.num_test_clients, test_strategy, s, &training, test_size, None)?,
            None,
        ),
        Some(groups) => {
            let mut clients = Vec::new();
            let mut ids = Vec::new();
            for (g, labels) in groups.iter().enumerate() {
                let count = (f.num_test_clients / groups.len() + usize::from(g < f.num_test_clients % groups.len())).max(1);
                let made = make_test_clients(test, count, test_strategy, seed::derive(s, &[g as u64]), &training, test_size, Some(labels))?;
                let first = clients.len();
                ids.push((first..first + count).collect::<Vec<_>>());
                clients.extend(relabel(made, first, test, ShardKind::Test)?);
            }
            (clients, Some(ids))
        }
    };

    let truth = data::label_expert_map(&anchors).filter(|map| map.len() == d.num_classes);
    let schedule = match (&cfg.scenario, normal_groups) {
        (Some(sc), Some(groups)) => {
            let always: Vec<usize> = (0..m).collect();
            Some(match sc.mode {
                ScenarioMode::Growing => ScenarioSchedule::growing(&always, &groups, sc.phase_rounds, f.rounds)?,
                ScenarioMode::Cyclic => ScenarioSchedule::cyclic(&always, &groups, sc.phase_rounds, f.rounds)?,
            })
        }
        _ => None,
    };
    Ok(Layout {
        anchors,
        normals,
        test_clients,
        truth,
        test_groups,
        schedule,
    })
}

pub fn build_with_common(
    cfg: &Config,
    train: LabeledDataset,
    test: LabeledDataset,
    common: CommonExpert,
    common_acc: f64,
) -> Result<Experiment> {
    let l = layout(cfg, &train, &test)?;
    let fed = Federation::new(train, l.anchors, l.normals, common.clone(), expert_spec(cfg)?, cfg.model.gate_hidden)?;
    let bench = TestBench::new(test, l.test_clients, &common, l.truth, l.test_groups)?;
    Ok(Experiment {
        config: cfg.clone(),
        run: RunConfig::from_config(cfg),
        fed,
        bench,
        common_acc,
        schedule: l.schedule,
    })
}

impl Experiment {
    pub fn run(&self) -> Result<RunOutput> {
        baselines::run(&self.run, &self.fed, Some(&self.bench), self.schedule.as_ref())
    }

    pub fn common_accuracy_on_test_clients(&self) -> Result<f64> {
        eval::common_expert_accuracy(&self.fed.common, &self.bench)
    }
}

/// Experts, then the gate if any, then the common expert.
pub fn state_records(state: &ServerState, common: &CommonExpert, common_acc: f64, method: Method, seed: u64) -> Vec<CheckpointRecord> {
    let mut recs: Vec<CheckpointRecord> = state
        .experts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            CheckpointRecord::new(state.expert_spec.clone(), p.clone())
                .with_meta("role", "expert")
                .with_meta("index", i)
                .with_meta("method", method.name())
                .with_meta("round", state.round)
                .with_meta("seed", seed)
        })
        .collect();
    if let Some(g) = &state.gate {
        recs.push(
            CheckpointRecord::new(g.spec.clone(), g.params.clone())
                .with_meta("role", "gate")
                .with_meta("method", method.name())
                .with_meta("round", state.round)
                .with_meta("seed", seed),
        );
    }
    recs.push(
        CheckpointRecord::new(common.spec().clone(), common.params().clone())
            .with_meta("role", "common")
            .with_meta("accuracy", common_acc)
            .with_meta("embed_layer", common.embed_layer())
            .with_meta("seed", seed),
    );
    recs
}

#[derive(Clone, Debug)]
pub struct LoadedState {
    pub state: ServerState,
    pub common: CommonExpert,
    pub method: Method,
}

pub fn load_state(records: Vec<CheckpointRecord>) -> Result<LoadedState> {
    let role = |r: &CheckpointRecord| r.meta.get("role").and_then(Value::as_str).unwrap_or("").to_string();
    let mut experts = Vec::new();
    let mut expert_spec = None;
    let mut gate = None;
    let mut common = None;
    let mut method = None;
    let mut round = 0;
    for r in records {
        match role(&r).as_str() {
            "expert" => {
                method = r.meta.get("method").and_then(Value::as_str).map(Method::parse).transpose()?;
                round = r.meta.get("round").and_then(Value::as_u64).unwrap_or(0) as usize;
                if expert_spec.get_or_insert_with(|| r.spec.clone()) != &r.spec {
                    return Err(Error::Protocol("experts disagree on architecture".into()));
                }
                experts.push(r.params);
            }
            "gate" => gate = Some(crate::gating::GateNet::new(r.spec, r.params)?),
            "common" => {
                let layer = r.meta.get("embed_layer").and_then(Value::as_u64).map(|v| v as usize);
                common = Some(CommonExpert::new(r.spec, r.params, layer)?);
            }
            other => return Err(Error::Protocol(format!("unknown checkpoint role {other:?}"))),
        }
    }
    Ok(LoadedState {
        state: ServerState {
            expert_spec: expert_spec.ok_or_else(|| Error::Protocol("state holds no experts".into()))?,
            experts,
            gate,
            round,
        },
        common: common.ok_or_else(|| Error::Protocol("state holds no common expert".into()))?,
        method: method.ok_or_else(|| Error::Protocol("state does not record its method".into()))?,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `config.echo.json`, `metrics.jsonl`, `metrics.csv`, `state.ckpt`
/// and `comm.csv` into `dir`.
pub fn write_outputs(dir: &Path, exp: &Experiment, out: &RunOutput) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let seed = exp.run.seed;
    write(&dir.join(CONFIG_ECHO), &exp.config.to_json_pretty())?;
    write(&dir.join(METRICS_JSONL), &metrics::to_jsonl(&out.history))?;
    write(&dir.join(METRICS_CSV), &metrics::to_csv(&out.history))?;
    write(&dir.join(COMM_CSV), &out.ledger.to_csv(seed))?;
    write_checkpoint(
        &dir.join(STATE_CKPT),
        &state_records(&out.state, &exp.fed.common, exp.common_acc, exp.run.method, seed),
    )
}

/// Zero-shot and routing report for a trained state, as JSON plus the
/// routing CSV table when ground truth exists.
pub fn evaluation_report(exp: &Experiment, loaded: &LoadedState) -> Result<(Value, Option<String>)> {
    let k = exp.run.top_k;
    let ev = eval::evaluate_state(loaded.method, &loaded.state, &exp.bench, k)?;
    let common_acc = exp.common_accuracy_on_test_clients()?;
    let mut report = json!({
        "method": loaded.method.name(),
        "seed": exp.run.seed,
        "round": loaded.state.round,
        "global_acc": ev.global_acc,
        "per_expert_acc": ev.per_expert_acc,
        "routing_acc": ev.routing_acc,
        "common_expert_acc": common_acc,
    });
    let mut csv = None;
    if loaded.state.gate.is_some() && loaded.method == Method::Fedjets {
        let z = eval::zero_shot_eval(&loaded.state, &exp.bench, k)?;
        report["zero_shot"] = json!({
            "client_ids": z.client_ids,
            "client_acc": z.client_acc,
            "average": z.average,
            "selections": z.selections.iter().map(|s| s.indices.clone()).collect::<Vec<_>>(),
        });
        if let Some(truth) = &exp.bench.truth {
            let r = eval::routing_from_choices(&z, &exp.bench, truth)?;
            report["routing"] = json!({
                "average_error": r.average_error,
                "chance_error": 1.0 - 1.0 / exp.run.num_experts as f64,
                "rows": r.rows.iter().map(|row| json!({
                    "client": row.client_id,
                    "incorrect": row.incorrect,
                    "correct": row.correct,
                    "error_rate": row.error_rate,
                })).collect::<Vec<_>>(),
            });
            csv = Some(r.to_csv());
        }
    }
    Ok((report, csv))
}

/// Distinct label sets of a shard list.
pub fn label_sets(shards: &[ClientShard]) -> BTreeSet<BTreeSet<usize>> {
    shards.iter().map(ClientShard::label_set).collect()
}
