//! Round orchestration: client sampling, expert dispatch, local updates,
//! weighted aggregation and communication accounting.
//!
//! Client ids: anchors are `0..M` (anchor `q` owns expert `q`), normal
//! clients are `M..S`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;

use crate::config::{Config, ExpertInit, Method};
use crate::data::{ClientShard, LabeledDataset, ShardKind};
use crate::error::{Error, Result};
use crate::eval::{self, ScenarioSchedule, TestBench};
use crate::gating::{self, CommonExpert, EmbeddingCache, ExpertSelection, GateNet};
use crate::metrics::MetricsRecord;
use crate::nn::{self, LossKind, NetSpec, OptimizerState, ParamVector};
use crate::seed::{self, SimRng};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub method: Method,
    pub rounds: usize,
    pub num_clients: usize,
    pub num_test_clients: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub anchors_per_round: usize,
    pub normals_per_round: usize,
    /// Minibatch steps per activation; one pass over the shard when `None`.
    pub local_iterations: Option<usize>,
    pub lr: f64,
    pub momentum: f64,
    pub gate_lr: f64,
    pub gate_momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub expert_init: ExpertInit,
    pub baseline_init: ExpertInit,
    pub renormalize_gate: bool,
    pub uniform_weights: bool,
    pub eval_interval: usize,
    pub fedprox_mu: f64,
    pub ensemble_size: usize,
}

impl RunConfig {
    pub fn from_config(c: &Config) -> Self {
        let (f, t) = (&c.federation, &c.training);
        Self {
            method: t.method,
            rounds: f.rounds,
            num_clients: f.num_clients,
            num_test_clients: f.num_test_clients,
            num_experts: f.num_experts,
            top_k: f.top_k,
            anchors_per_round: f.anchors_per_round,
            normals_per_round: f.normals_per_round,
            local_iterations: t.local_iterations,
            lr: t.lr,
            momentum: t.momentum,
            gate_lr: t.gate_lr,
            gate_momentum: t.gate_momentum,
            batch_size: t.batch_size,
            seed: t.seed,
            expert_init: t.expert_init,
            baseline_init: t.baseline_init,
            renormalize_gate: t.renormalize_gate,
            uniform_weights: f.uniform_weights,
            eval_interval: c.eval.interval,
            fedprox_mu: t.fedprox_mu,
            ensemble_size: t.ensemble_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.anchors_per_round <= self.num_experts
            && self.anchors_per_round + self.normals_per_round <= self.num_clients
            && self.anchors_per_round + self.normals_per_round >= 1
            && self.top_k >= 1
            && self.top_k <= self.num_experts
            && self.num_clients > self.num_experts
            && self.batch_size >= 1
            && self.eval_interval >= 1;
        if !ok {
            return Err(Error::config("inconsistent federation counts"));
        }
        Ok(())
    }

    pub fn local_steps(&self, shard_len: usize) -> usize {
        self.local_iterations
            .unwrap_or_else(|| shard_len.div_ceil(self.batch_size))
    }
}

/// Everything a run reads but never changes.
#[derive(Clone, Debug)]
pub struct Federation {
    pub train: LabeledDataset,
    pub anchors: Vec<ClientShard>,
    pub normals: Vec<ClientShard>,
    pub common: CommonExpert,
    pub embeddings: EmbeddingCache,
    pub expert_spec: NetSpec,
    pub gate_spec: NetSpec,
}

impl Federation {
    pub fn new(
        train: LabeledDataset,
        anchors: Vec<ClientShard>,
        normals: Vec<ClientShard>,
        common: CommonExpert,
        expert_spec: NetSpec,
        gate_hidden: Option<usize>,
    ) -> Result<Self> {
        let m = anchors.len();
        for (q, a) in anchors.iter().enumerate() {
            if a.client_id != q || a.assigned_expert() != Some(q) {
                return Err(Error::config(format!("anchor {q} must have id {q} and own expert {q}")));
            }
        }
        for (i, s) in normals.iter().enumerate() {
            if s.client_id != m + i || s.kind != ShardKind::Normal {
                return Err(Error::config(format!("normal client {i} must have id {}", m + i)));
            }
        }
        if expert_spec.input_dim() != train.dim() || expert_spec.output_dim() != train.num_classes {
            return Err(Error::config("expert shape does not match the dataset"));
        }
        let all: Vec<ClientShard> = anchors.iter().chain(&normals).cloned().collect();
        let embeddings = EmbeddingCache::build(&common, &all, &train)?;
        let gate_spec = GateNet::spec_for(common.embed_dim(), m.max(1), gate_hidden)?;
        Ok(Self {
            train,
            anchors,
            normals,
            common,
            embeddings,
            expert_spec,
            gate_spec,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.anchors.len()
    }

    pub fn shard(&self, client_id: usize) -> &ClientShard {
        let m = self.anchors.len();
        if client_id < m {
            &self.anchors[client_id]
        } else {
            &self.normals[client_id - m]
        }
    }

    pub fn normal_ids(&self) -> Vec<usize> {
        self.normals.iter().map(|s| s.client_id).collect()
    }

    pub fn anchor_ids(&self) -> Vec<usize> {
        (0..self.anchors.len()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServerState {
    pub expert_spec: NetSpec,
    pub experts: Vec<ParamVector>,
    /// Absent for single-model baselines.
    pub gate: Option<GateNet>,
    pub round: usize,
}

/// A fresh expert: Glorot from its own stream, or a copy of the common expert.
pub fn init_expert(spec: &NetSpec, common: &CommonExpert, init: ExpertInit, seed: u64, index: usize) -> Result<ParamVector> {
    match init {
        ExpertInit::Scratch => Ok(ParamVector::init(spec, &mut seed::stream(seed, &[seed::tag::EXPERT_INIT, index as u64]))),
        ExpertInit::FromCommon => {
            if common.spec() != spec {
                return Err(Error::config("from_common initialisation needs the expert and common architectures to match"));
            }
            Ok(common.params().clone())
        }
    }
}

pub fn init_gate(spec: &NetSpec, seed: u64) -> Result<GateNet> {
    let params = ParamVector::init(spec, &mut seed::stream(seed, &[seed::tag::GATE_INIT]));
    GateNet::new(spec.clone(), params)
}

impl ServerState {
    /// M experts under `cfg.expert_init` plus a fresh gate.
    pub fn init(fed: &Federation, cfg: &RunConfig) -> Result<Self> {
        let experts = (0..fed.num_experts())
            .map(|i| init_expert(&fed.expert_spec, &fed.common, cfg.expert_init, cfg.seed, i))
            .collect::<Result<_>>()?;
        Ok(Self {
            expert_spec: fed.expert_spec.clone(),
            experts,
            gate: Some(init_gate(&fed.gate_spec, cfg.seed)?),
            round: 0,
        })
    }

    fn gate(&self) -> Result<&GateNet> {
        self.gate
            .as_ref()
            .ok_or_else(|| Error::config("this state has no gate"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundPlan {
    pub round: usize,
    pub anchor_ids: Vec<usize>,
    pub normal_ids: Vec<usize>,
    /// Aligned with `normal_ids`; empty for methods that do not route.
    pub selections: Vec<ExpertSelection>,
}

impl RoundPlan {
    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.anchor_ids.iter().chain(&self.normal_ids).copied()
    }

    pub fn len(&self) -> usize {
        self.anchor_ids.len() + self.normal_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn sample_ids(rng: &mut SimRng, pool: &[usize], n: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = index::sample(rng, pool.len(), n.min(pool.len()))
        .into_iter()
        .map(|i| pool[i])
        .collect();
    ids.sort_unstable();
    ids
}

/// Samples the round's anchors and normals uniformly without replacement
/// from the given pools. Selections are attached separately.
pub fn plan_round(round: usize, cfg: &RunConfig, anchor_pool: &[usize], normal_pool: &[usize]) -> RoundPlan {
    let mut rng = seed::stream(cfg.seed, &[seed::tag::ROUND_PLAN, round as u64]);
    let anchor_ids = sample_ids(&mut rng, anchor_pool, cfg.anchors_per_round);
    let normal_ids = sample_ids(&mut rng, normal_pool, cfg.normals_per_round);
    RoundPlan {
        round,
        anchor_ids,
        normal_ids,
        selections: Vec::new(),
    }
}

/// Top-K selection for every normal client in the plan, from the current gate.
pub fn attach_selections(plan: &mut RoundPlan, gate: &GateNet, cache: &EmbeddingCache, top_k: usize) -> Result<()> {
    plan.selections = plan
        .normal_ids
        .par_iter()
        .map(|&id| gating::select_topk(gate, cache.get(id)?, top_k, id))
        .collect::<Result<_>>()?;
    Ok(())
}

/// Per-client minibatch positions: shuffled passes over `0..n`, the last
/// batch of a pass possibly short.
#[derive(Debug)]
pub struct Minibatches {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: SimRng,
}

impl Minibatches {
    pub fn new(n: usize, batch: usize, rng: SimRng) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            batch,
            rng,
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        out
    }
}

/// Stream for one client's activation; `lane` separates independent models
/// trained by the same client (ensembles).
pub fn client_rng(seed: u64, round: usize, client_id: usize, lane: usize) -> SimRng {
    seed::stream(
        seed,
        &[seed::tag::CLIENT, round as u64, client_id as u64, lane as u64],
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdatePacket {
    pub client_id: usize,
    pub kind: ShardKind,
    pub gate: Option<ParamVector>,
    pub experts: BTreeMap<usize, ParamVector>,
    pub sample_count: usize,
}

fn scope(round: usize, client_id: usize) -> String {
    format!("round {round}, client {client_id}")
}

/// Anchor `q`: the private copy of expert `q` takes cross-entropy steps and
/// the private gate copy takes independent-loss steps, one minibatch each.
pub fn anchor_client_update(state: &ServerState, fed: &Federation, client_id: usize, cfg: &RunConfig) -> Result<UpdatePacket> {
    let shard = fed.shard(client_id);
    let q = shard
        .assigned_expert()
        .ok_or_else(|| Error::config(format!("client {client_id} is not an anchor")))?;
    let mut expert = state.experts[q].clone();
    let mut gate = state.gate()?.clone();
    let emb = fed.embeddings.get(client_id)?;
    let mut expert_opt = OptimizerState::new(expert.len(), cfg.lr, cfg.momentum)?;
    let mut gate_opt = OptimizerState::new(gate.params.len(), cfg.gate_lr, cfg.gate_momentum)?;
    let mut batches = Minibatches::new(shard.len(), cfg.batch_size, client_rng(cfg.seed, state.round, client_id, 0));
    let mut run = || -> Result<()> {
        for _ in 0..cfg.local_steps(shard.len()) {
            let pos = batches.next_batch();
            let rows: Vec<usize> = pos.iter().map(|&p| shard.indices[p]).collect();
            let (_, gg) = gating::gate_independent_loss_grad(&gate, &emb.select_rows(&pos), q)?;
            gate_opt.step(&mut gate.params, &gg)?;
            let batch = fed.train.batch(&rows)?;
            let (_, eg) = nn::loss_and_grad(&state.expert_spec, &expert, &batch, LossKind::CeOnLogits)?;
            expert_opt.step(&mut expert, &eg)?;
        }
        Ok(())
    };
    run().map_err(|e| e.within(scope(state.round, client_id)))?;
    Ok(UpdatePacket {
        client_id,
        kind: shard.kind,
        gate: Some(gate.params),
        experts: BTreeMap::from([(q, expert)]),
        sample_count: shard.len(),
    })
}

/// Normal client: the selected experts and the gate move jointly along the
/// gradient of the gated mixture's cross-entropy.
pub fn normal_client_update(
    state: &ServerState,
    fed: &Federation,
    client_id: usize,
    selection: &ExpertSelection,
    cfg: &RunConfig,
) -> Result<UpdatePacket> {
    if selection.indices.len() != cfg.top_k || selection.client_id != client_id {
        return Err(Error::config(format!("client {client_id} needs a selection of {} experts", cfg.top_k)));
    }
    let shard = fed.shard(client_id);
    let emb = fed.embeddings.get(client_id)?;
    let mut gate = state.gate()?.clone();
    let mut experts: Vec<ParamVector> = selection.indices.iter().map(|&i| state.experts[i].clone()).collect();
    let mut gate_opt = OptimizerState::new(gate.params.len(), cfg.gate_lr, cfg.gate_momentum)?;
    let mut opts: Vec<OptimizerState> = experts
        .iter()
        .map(|e| OptimizerState::new(e.len(), cfg.lr, cfg.momentum))
        .collect::<Result<_>>()?;
    let mut batches = Minibatches::new(shard.len(), cfg.batch_size, client_rng(cfg.seed, state.round, client_id, 0));
    let spec = &state.expert_spec;
    let mut run = || -> Result<()> {
        for _ in 0..cfg.local_steps(shard.len()) {
            let pos = batches.next_batch();
            let rows: Vec<usize> = pos.iter().map(|&p| shard.indices[p]).collect();
            let batch = fed.train.batch(&rows)?;
            let members: Vec<nn::Member<'_>> = experts.iter().map(|p| (spec, p)).collect();
            let jg = gating::joint_mixture_loss_grad(
                &members,
                &selection.indices,
                &gate,
                &emb.select_rows(&pos),
                &batch,
                cfg.renormalize_gate,
            )?;
            gate_opt.step(&mut gate.params, &jg.gate_grad)?;
            for ((e, o), g) in experts.iter_mut().zip(&mut opts).zip(&jg.expert_grads) {
                o.step(e, g)?;
            }
        }
        Ok(())
    };
    run().map_err(|e| e.within(scope(state.round, client_id)))?;
    Ok(UpdatePacket {
        client_id,
        kind: shard.kind,
        gate: Some(gate.params),
        experts: selection.indices.iter().copied().zip(experts).collect(),
        sample_count: shard.len(),
    })
}

/// `sum_s (w_s / sum w) * v_s`, folded in the given order.
fn weighted_average(items: &[(&ParamVector, f64)]) -> Vec<f64> {
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    let mut acc = vec![0.0; items[0].0.len()];
    for (v, w) in items {
        let lambda = w / total;
        for (a, x) in acc.iter_mut().zip(v.values()) {
            *a += lambda * x;
        }
    }
    acc
}

/// Weighted FedAvg over one round's packets.
///
/// Packets are folded in ascending client id. Each expert is averaged over
/// the packets that carry it; untouched experts and, without gate packets,
/// the gate are kept.
pub fn aggregate(state: &ServerState, packets: &[UpdatePacket], uniform: bool) -> Result<ServerState> {
    let mut order: Vec<&UpdatePacket> = packets.iter().collect();
    order.sort_by_key(|p| p.client_id);
    let weight = |p: &UpdatePacket| if uniform { 1.0 } else { p.sample_count as f64 };
    let expert_hash = state.expert_spec.spec_hash();
    for p in &order {
        if let Some(g) = &p.gate {
            let gate = state
                .gate
                .as_ref()
                .ok_or_else(|| Error::Protocol(format!("client {} sent a gate to a gateless server", p.client_id)))?;
            if g.spec_hash() != gate.spec.spec_hash() || g.len() != gate.params.len() {
                return Err(Error::Protocol(format!("client {} sent a gate for another network", p.client_id)));
            }
        }
        for (&i, e) in &p.experts {
            if i >= state.experts.len() {
                return Err(Error::Protocol(format!("client {} sent unknown expert {i}", p.client_id)));
            }
            if e.spec_hash() != expert_hash || e.len() != state.experts[i].len() {
                return Err(Error::Protocol(format!(
                    "client {} sent expert {i} for another network",
                    p.client_id
                )));
            }
        }
        if p.sample_count == 0 && !uniform {
            return Err(Error::Protocol(format!("client {} reported no samples", p.client_id)));
        }
    }

    let mut next = state.clone();
    next.round = state.round + 1;
    if let Some(gate) = next.gate.as_mut() {
        let items: Vec<(&ParamVector, f64)> = order
            .iter()
            .filter_map(|p| p.gate.as_ref().map(|g| (g, weight(p))))
            .collect();
        if !items.is_empty() {
            gate.params = ParamVector::from_values(&gate.spec, weighted_average(&items))?;
        }
    }
    for i in 0..next.experts.len() {
        let items: Vec<(&ParamVector, f64)> = order
            .iter()
            .filter_map(|p| p.experts.get(&i).map(|e| (e, weight(p))))
            .collect();
        if !items.is_empty() {
            next.experts[i] = ParamVector::from_values(&state.expert_spec, weighted_average(&items))?;
        }
    }
    Ok(next)
}

/// Parameter counts that travel over the wire.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelSizes {
    pub expert: u64,
    pub gate: u64,
    pub common: u64,
}

impl ModelSizes {
    pub fn of(fed: &Federation) -> Self {
        Self {
            expert: fed.expert_spec.param_count() as u64,
            gate: fed.gate_spec.param_count() as u64,
            common: fed.common.spec().param_count() as u64,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CommCost {
    pub down: u64,
    pub up: u64,
}

/// Floats moved in one round of `plan` under `method`.
pub fn comm_cost(plan: &RoundPlan, cfg: &RunConfig, sizes: &ModelSizes) -> CommCost {
    let anchors = plan.anchor_ids.len() as u64;
    let normals = plan.normal_ids.len() as u64;
    let clients = anchors + normals;
    let per_client = match cfg.method {
        Method::Fedjets => {
            let v = anchors * (sizes.gate + sizes.expert) + normals * (sizes.gate + cfg.top_k as u64 * sizes.expert);
            return CommCost { down: v, up: v };
        }
        Method::Fedavg | Method::Fedprox => sizes.expert,
        Method::AvgEnsemble => cfg.ensemble_size as u64 * sizes.expert,
        Method::Fedmix => cfg.num_experts as u64 * sizes.expert,
    };
    CommCost {
        down: clients * per_client,
        up: clients * per_client,
    }
}

/// One-off downlink before round 0: the common expert to every training
/// client, for methods whose gates read its embeddings.
pub fn setup_cost(cfg: &RunConfig, sizes: &ModelSizes) -> u64 {
    match cfg.method {
        Method::Fedjets | Method::Fedmix => cfg.num_clients as u64 * sizes.common,
        _ => 0,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommRow {
    pub round: usize,
    pub cost: CommCost,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommLedger {
    pub method: Method,
    pub setup_down: u64,
    pub rows: Vec<CommRow>,
}

impl CommLedger {
    pub fn new(method: Method, setup_down: u64) -> Self {
        Self {
            method,
            setup_down,
            rows: Vec::new(),
        }
    }

    pub fn record(&mut self, round: usize, cost: CommCost) {
        self.rows.push(CommRow { round, cost });
    }

    /// Cumulative (down, up), setup included.
    pub fn totals(&self) -> CommCost {
        self.rows.iter().fold(
            CommCost {
                down: self.setup_down,
                up: 0,
            },
            |acc, r| CommCost {
                down: acc.down + r.cost.down,
                up: acc.up + r.cost.up,
            },
        )
    }

    /// The setup row has round `setup`.
    pub fn to_csv(&self, seed: u64) -> String {
        let mut out = String::from("round,method,seed,floats_down,floats_up,floats_down_cum,floats_up_cum\n");
        let name = self.method.name();
        let (mut down, mut up) = (self.setup_down, 0u64);
        let _ = writeln!(out, "setup,{name},{seed},{},0,{down},0", self.setup_down);
        for r in &self.rows {
            down += r.cost.down;
            up += r.cost.up;
            let _ = writeln!(out, "{},{name},{seed},{},{},{down},{up}", r.round, r.cost.down, r.cost.up);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub state: ServerState,
    pub history: Vec<MetricsRecord>,
    pub ledger: CommLedger,
}

/// Whether round `t` (0-based) ends with an evaluation.
pub fn is_eval_round(t: usize, cfg: &RunConfig) -> bool {
    (t + 1) % cfg.eval_interval == 0 || t + 1 == cfg.rounds
}

pub fn make_record(
    cfg: &RunConfig,
    round: usize,
    ev: eval::Evaluation,
    ledger: &CommLedger,
) -> MetricsRecord {
    let totals = ledger.totals();
    MetricsRecord {
        round,
        method: cfg.method,
        seed: cfg.seed,
        global_acc: ev.global_acc,
        per_expert_acc: ev.per_expert_acc,
        routing_acc: ev.routing_acc,
        floats_down_cum: totals.down,
        floats_up_cum: totals.up,
        group_acc: ev.group_acc,
    }
}

/// Anchor and normal pools for round `t`.
pub fn pools_for(fed: &Federation, schedule: Option<&ScenarioSchedule>, t: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    match schedule {
        None => Ok((fed.anchor_ids(), fed.normal_ids())),
        Some(s) => {
            let active = s.active_at(t)?;
            let m = fed.num_experts();
            Ok((
                active.iter().copied().filter(|&id| id < m).collect(),
                active.iter().copied().filter(|&id| id >= m).collect(),
            ))
        }
    }
}

/// The full training loop: plan, parallel client updates, aggregation and
/// periodic evaluation on `bench`.
pub fn run_training(
    cfg: &RunConfig,
    fed: &Federation,
    bench: Option<&TestBench>,
    schedule: Option<&ScenarioSchedule>,
) -> Result<RunOutput> {
    cfg.validate()?;
    if cfg.num_experts != fed.num_experts() {
        return Err(Error::config("num_experts does not match the anchor count"));
    }
    let sizes = ModelSizes::of(fed);
    let mut ledger = CommLedger::new(cfg.method, setup_cost(cfg, &sizes));
    let mut state = ServerState::init(fed, cfg)?;
    let mut history = Vec::new();
    for t in 0..cfg.rounds {
        let (anchor_pool, normal_pool) = pools_for(fed, schedule, t)?;
        let mut plan = plan_round(t, cfg, &anchor_pool, &normal_pool);
        attach_selections(&mut plan, state.gate()?, &fed.embeddings, cfg.top_k)?;
        let snapshot = &state;
        let mut packets: Vec<UpdatePacket> = plan
            .anchor_ids
            .par_iter()
            .map(|&id| anchor_client_update(snapshot, fed, id, cfg))
            .collect::<Result<_>>()?;
        let normal_packets: Vec<UpdatePacket> = plan
            .normal_ids
            .par_iter()
            .zip(&plan.selections)
            .map(|(&id, sel)| normal_client_update(snapshot, fed, id, sel, cfg))
            .collect::<Result<_>>()?;
        packets.extend(normal_packets);
        ledger.record(t, comm_cost(&plan, cfg, &sizes));
        state = aggregate(&state, &packets, cfg.uniform_weights)?;
        if let Some(bench) = bench {
            if is_eval_round(t, cfg) {
                let ev = eval::evaluate_state(cfg.method, &state, bench, cfg.top_k)?;
                history.push(make_record(cfg, t + 1, ev, &ledger));
            }
        }
    }
    Ok(RunOutput {
        state,
        history,
        ledger,
    })
}
