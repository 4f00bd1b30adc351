//! FedAvg, FedProx, averaged ensembles and an all-experts mixture with
//! private client gates, on the same plans, aggregation and ledger as the
//! gated runtime.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::config::Method;
use crate::error::{Error, Result};
use crate::eval::{self, ScenarioSchedule, TestBench};
use crate::gating::{self, GateNet};
use crate::nn::{self, argmax, Batch, LossKind, Matrix, Member, NetSpec, OptimizerState, ParamVector};
use crate::runtime::{
    self, aggregate, client_rng, comm_cost, init_expert, init_gate, make_record, plan_round, pools_for, setup_cost,
    CommLedger, Federation, Minibatches, ModelSizes, RunConfig, RunOutput, ServerState, UpdatePacket,
};

/// Runs `cfg.method` end to end.
pub fn run(cfg: &RunConfig, fed: &Federation, bench: Option<&TestBench>, schedule: Option<&ScenarioSchedule>) -> Result<RunOutput> {
    match cfg.method {
        Method::Fedjets => runtime::run_training(cfg, fed, bench, schedule),
        Method::Fedavg => run_global(cfg, fed, bench, schedule, 0.0, 1),
        Method::Fedprox => run_global(cfg, fed, bench, schedule, cfg.fedprox_mu, 1),
        Method::AvgEnsemble => run_global(cfg, fed, bench, schedule, 0.0, cfg.ensemble_size),
        Method::Fedmix => run_fedmix(cfg, fed, bench, schedule),
    }
}

/// Cross-entropy plus `mu/2 * |w - w_global|^2`, and its gradient.
///
/// `mu == 0` returns the plain cross-entropy gradient bit for bit.
pub fn prox_loss_grad(spec: &NetSpec, w: &ParamVector, global: &ParamVector, batch: &Batch, mu: f64) -> Result<(f64, ParamVector)> {
    let (mut loss, mut g) = nn::loss_and_grad(spec, w, batch, LossKind::CeOnLogits)?;
    if mu > 0.0 {
        let mut sq = 0.0;
        for ((gi, wi), w0) in g.values_mut().iter_mut().zip(w.values()).zip(global.values()) {
            let d = wi - w0;
            *gi += mu * d;
            sq += d * d;
        }
        loss += 0.5 * mu * sq;
    }
    Ok((loss, g))
}

/// Local SGDM on the proximal objective.
fn local_train(
    spec: &NetSpec,
    global: &ParamVector,
    fed: &Federation,
    client_id: usize,
    cfg: &RunConfig,
    round: usize,
    lane: usize,
    mu: f64,
) -> Result<ParamVector> {
    let shard = fed.shard(client_id);
    let mut w = global.clone();
    let mut opt = OptimizerState::new(w.len(), cfg.lr, cfg.momentum)?;
    let mut batches = Minibatches::new(shard.len(), cfg.batch_size, client_rng(cfg.seed, round, client_id, lane));
    for _ in 0..cfg.local_steps(shard.len()) {
        let rows: Vec<usize> = batches.next_batch().iter().map(|&p| shard.indices[p]).collect();
        let batch = fed.train.batch(&rows)?;
        let (_, g) = prox_loss_grad(spec, &w, global, &batch, mu)?;
        opt.step(&mut w, &g)?;
    }
    Ok(w)
}

fn packet(fed: &Federation, client_id: usize, experts: BTreeMap<usize, ParamVector>) -> UpdatePacket {
    let shard = fed.shard(client_id);
    UpdatePacket {
        client_id,
        kind: shard.kind,
        gate: None,
        experts,
        sample_count: shard.len(),
    }
}

pub fn fedavg_client_update(
    spec: &NetSpec,
    global: &ParamVector,
    fed: &Federation,
    client_id: usize,
    cfg: &RunConfig,
    round: usize,
) -> Result<UpdatePacket> {
    let w = local_train(spec, global, fed, client_id, cfg, round, 0, 0.0)
        .map_err(|e| e.within(format!("round {round}, client {client_id}")))?;
    Ok(packet(fed, client_id, BTreeMap::from([(0, w)])))
}

/// `mu == 0` degenerates to [`fedavg_client_update`] exactly.
pub fn fedprox_client_update(
    spec: &NetSpec,
    global: &ParamVector,
    fed: &Federation,
    client_id: usize,
    cfg: &RunConfig,
    round: usize,
    mu: f64,
) -> Result<UpdatePacket> {
    if !(mu >= 0.0 && mu.is_finite()) {
        return Err(Error::config(format!("fedprox mu must be finite and >= 0, got {mu}")));
    }
    let w = local_train(spec, global, fed, client_id, cfg, round, 0, mu)
        .map_err(|e| e.within(format!("round {round}, client {client_id}")))?;
    Ok(packet(fed, client_id, BTreeMap::from([(0, w)])))
}

/// FedAvg-family run with `models` independent global models (an ensemble
/// when more than one); model `m` uses client stream lane `m`.
fn run_global(
    cfg: &RunConfig,
    fed: &Federation,
    bench: Option<&TestBench>,
    schedule: Option<&ScenarioSchedule>,
    mu: f64,
    models: usize,
) -> Result<RunOutput> {
    cfg.validate()?;
    let spec = &fed.expert_spec;
    let sizes = ModelSizes::of(fed);
    let mut ledger = CommLedger::new(cfg.method, setup_cost(cfg, &sizes));
    let mut state = ServerState {
        expert_spec: spec.clone(),
        experts: (0..models)
            .map(|m| init_expert(spec, &fed.common, cfg.baseline_init, cfg.seed, m))
            .collect::<Result<_>>()?,
        gate: None,
        round: 0,
    };
    let mut history = Vec::new();
    for t in 0..cfg.rounds {
        let (anchors, normals) = pools_for(fed, schedule, t)?;
        let plan = plan_round(t, cfg, &anchors, &normals);
        let active: Vec<usize> = plan.active().collect();
        let snapshot = &state;
        let packets: Vec<UpdatePacket> = active
            .par_iter()
            .map(|&id| {
                let experts = (0..models)
                    .map(|m| Ok((m, local_train(spec, &snapshot.experts[m], fed, id, cfg, t, m, mu)?)))
                    .collect::<Result<BTreeMap<_, _>>>()
                    .map_err(|e| e.within(format!("round {t}, client {id}")))?;
                Ok(packet(fed, id, experts))
            })
            .collect::<Result<_>>()?;
        ledger.record(t, comm_cost(&plan, cfg, &sizes));
        state = aggregate(&state, &packets, cfg.uniform_weights)?;
        if let Some(bench) = bench {
            if runtime::is_eval_round(t, cfg) {
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

/// Arg-max of the mean per-model softmax. Each entry's sum runs over the
/// sorted contributions, so model order cannot change the result.
pub fn avg_ensemble_predict(models: &[Member<'_>], inputs: &Matrix) -> Result<Vec<usize>> {
    if models.len() < 2 {
        return Err(Error::config("an ensemble needs at least two models"));
    }
    let probs: Vec<Matrix> = models
        .iter()
        .map(|(spec, params)| Ok(nn::softmax_rows(&nn::forward(spec, params, inputs)?)))
        .collect::<Result<_>>()?;
    let classes = probs[0].cols();
    if probs.iter().any(|p| p.cols() != classes) {
        return Err(Error::config("ensemble members disagree on output width"));
    }
    let mut column = vec![0.0; models.len()];
    Ok((0..inputs.rows())
        .map(|i| {
            let mean: Vec<f64> = (0..classes)
                .map(|c| {
                    for (slot, p) in column.iter_mut().zip(&probs) {
                        *slot = p.get(i, c);
                    }
                    column.sort_by(f64::total_cmp);
                    column.iter().sum::<f64>() / models.len() as f64
                })
                .collect();
            argmax(&mean)
        })
        .collect())
}

/// All-experts mixture prediction through `gate`.
pub fn fedmix_predict(
    spec: &NetSpec,
    experts: &[ParamVector],
    gate: &GateNet,
    embeddings: &Matrix,
    inputs: &Matrix,
) -> Result<Vec<usize>> {
    let weights = gate.scores(embeddings)?;
    let members: Vec<Member<'_>> = experts.iter().map(|p| (spec, p)).collect();
    let logits = nn::mixture_forward(&members, &weights, inputs)?;
    Ok(logits.row_iter().map(argmax).collect())
}

/// One client's mixture training over all M experts through its private
/// gate. The packet carries experts only; the gate stays with the client.
pub fn fedmix_client_update(
    state: &ServerState,
    local_gate: &GateNet,
    fed: &Federation,
    client_id: usize,
    cfg: &RunConfig,
) -> Result<(UpdatePacket, GateNet)> {
    let shard = fed.shard(client_id);
    let emb = fed.embeddings.get(client_id)?;
    let all: Vec<usize> = (0..state.experts.len()).collect();
    let mut gate = local_gate.clone();
    let mut experts = state.experts.clone();
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
            let members: Vec<Member<'_>> = experts.iter().map(|p| (spec, p)).collect();
            let jg = gating::joint_mixture_loss_grad(&members, &all, &gate, &emb.select_rows(&pos), &batch, false)?;
            gate_opt.step(&mut gate.params, &jg.gate_grad)?;
            for ((e, o), g) in experts.iter_mut().zip(&mut opts).zip(&jg.expert_grads) {
                o.step(e, g)?;
            }
        }
        Ok(())
    };
    run().map_err(|e| e.within(format!("round {}, client {client_id}", state.round)))?;
    Ok((packet(fed, client_id, all.into_iter().zip(experts).collect()), gate))
}

/// Private gates, created from the initial server gate on first activation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LocalGates {
    gates: BTreeMap<usize, GateNet>,
}

impl LocalGates {
    pub fn get(&self, client_id: usize) -> Option<&GateNet> {
        self.gates.get(&client_id)
    }

    pub fn len(&self) -> usize {
        self.gates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gates.is_empty()
    }
}

/// One FedMix round: every active client trains all experts; experts are
/// averaged, local gates are stored client-side.
pub fn fedmix_round(
    state: &ServerState,
    gates: &mut LocalGates,
    plan: &runtime::RoundPlan,
    fed: &Federation,
    cfg: &RunConfig,
) -> Result<ServerState> {
    let initial = state
        .gate
        .as_ref()
        .ok_or_else(|| Error::config("fedmix needs an initial gate"))?;
    let active: Vec<usize> = plan.active().collect();
    let results: Vec<(UpdatePacket, GateNet)> = active
        .par_iter()
        .map(|&id| fedmix_client_update(state, gates.get(id).unwrap_or(initial), fed, id, cfg))
        .collect::<Result<_>>()?;
    let mut packets = Vec::with_capacity(results.len());
    for (p, g) in results {
        gates.gates.insert(p.client_id, g);
        packets.push(p);
    }
    aggregate(state, &packets, cfg.uniform_weights)
}

fn run_fedmix(cfg: &RunConfig, fed: &Federation, bench: Option<&TestBench>, schedule: Option<&ScenarioSchedule>) -> Result<RunOutput> {
    cfg.validate()?;
    let sizes = ModelSizes::of(fed);
    let mut ledger = CommLedger::new(cfg.method, setup_cost(cfg, &sizes));
    let mut state = ServerState {
        expert_spec: fed.expert_spec.clone(),
        experts: (0..fed.num_experts())
            .map(|i| init_expert(&fed.expert_spec, &fed.common, cfg.expert_init, cfg.seed, i))
            .collect::<Result<_>>()?,
        gate: Some(init_gate(&fed.gate_spec, cfg.seed)?),
        round: 0,
    };
    let mut gates = LocalGates::default();
    let mut history = Vec::new();
    for t in 0..cfg.rounds {
        let (anchors, normals) = pools_for(fed, schedule, t)?;
        let plan = plan_round(t, cfg, &anchors, &normals);
        state = fedmix_round(&state, &mut gates, &plan, fed, cfg)?;
        ledger.record(t, comm_cost(&plan, cfg, &sizes));
        if let Some(bench) = bench {
            if runtime::is_eval_round(t, cfg) {
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

#[cfg(test)]
mod tests;
