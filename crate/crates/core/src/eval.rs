//! Zero-shot testing on unseen clients, per-sample routing diagnostics and
//! client-pool schedules for incremental scenarios.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::baselines;
use crate::config::Method;
use crate::data::{ClientShard, LabeledDataset};
use crate::error::{Error, Result};
use crate::gating::{self, CommonExpert, EmbeddingCache, ExpertSelection, GateNet};
use crate::metrics::MetricsRecord;
use crate::nn::{self, argmax, Matrix, NetSpec, ParamVector};
use crate::runtime::{Federation, RunConfig, ServerState};

/// Unseen test clients with their cached embeddings.
#[derive(Clone, Debug)]
pub struct TestBench {
    pub test: LabeledDataset,
    pub clients: Vec<ClientShard>,
    pub embeddings: EmbeddingCache,
    /// Label -> expert, when anchors own disjoint label groups.
    pub truth: Option<BTreeMap<usize, usize>>,
    /// Test client ids per label group (scenario runs).
    pub groups: Option<Vec<Vec<usize>>>,
}

impl TestBench {
    pub fn new(
        test: LabeledDataset,
        clients: Vec<ClientShard>,
        common: &CommonExpert,
        truth: Option<BTreeMap<usize, usize>>,
        groups: Option<Vec<Vec<usize>>>,
    ) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::config("a test bench needs at least one client"));
        }
        let embeddings = EmbeddingCache::build(common, &clients, &test)?;
        Ok(Self {
            test,
            clients,
            embeddings,
            truth,
            groups,
        })
    }

    /// Inputs of one client; labels stay with the bench.
    pub fn inputs(&self, shard: &ClientShard) -> Matrix {
        self.test.inputs.select_rows(&shard.indices)
    }

    pub fn labels(&self, shard: &ClientShard) -> Vec<usize> {
        shard.indices.iter().map(|&i| self.test.labels[i]).collect()
    }
}

fn hit_rate(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Zero-shot prediction for one client from inputs alone: top-K experts by
/// aggregated gate score, then per sample the selected expert the gate
/// scores highest.
#[derive(Clone, Debug, PartialEq)]
pub struct ZeroShotPrediction {
    pub selection: ExpertSelection,
    pub chosen: Vec<usize>,
    pub predicted: Vec<usize>,
}

pub fn zero_shot_predict(
    expert_spec: &NetSpec,
    experts: &[ParamVector],
    gate: &GateNet,
    embeddings: &Matrix,
    inputs: &Matrix,
    top_k: usize,
    client_id: usize,
) -> Result<ZeroShotPrediction> {
    if embeddings.rows() != inputs.rows() {
        return Err(Error::config("embeddings and inputs differ in length"));
    }
    let scores = gate.scores(embeddings)?;
    let aggregate_scores = gating::column_sums(&scores);
    if top_k == 0 || top_k > experts.len() {
        return Err(Error::config(format!("K must be in [1, {}]", experts.len())));
    }
    let selection = ExpertSelection {
        client_id,
        indices: gating::topk_indices(&aggregate_scores, top_k),
        aggregate_scores,
    };
    let chosen = gating::per_sample_choice(&scores, &selection.indices);
    let logits: BTreeMap<usize, Matrix> = selection
        .indices
        .iter()
        .map(|&e| Ok((e, nn::forward(expert_spec, &experts[e], inputs)?)))
        .collect::<Result<_>>()?;
    let predicted = chosen
        .iter()
        .enumerate()
        .map(|(i, e)| argmax(logits[e].row(i)))
        .collect();
    Ok(ZeroShotPrediction {
        selection,
        chosen,
        predicted,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZeroShotReport {
    pub client_ids: Vec<usize>,
    pub client_acc: Vec<f64>,
    pub average: f64,
    pub selections: Vec<ExpertSelection>,
    /// Per client, the expert used for every sample.
    pub chosen: Vec<Vec<usize>>,
}

pub fn zero_shot_eval(state: &ServerState, bench: &TestBench, top_k: usize) -> Result<ZeroShotReport> {
    let gate = state
        .gate
        .as_ref()
        .ok_or_else(|| Error::config("zero-shot evaluation needs a gate"))?;
    let preds: Vec<ZeroShotPrediction> = bench
        .clients
        .par_iter()
        .map(|c| {
            zero_shot_predict(
                &state.expert_spec,
                &state.experts,
                gate,
                bench.embeddings.get(c.client_id)?,
                &bench.inputs(c),
                top_k,
                c.client_id,
            )
        })
        .collect::<Result<_>>()?;
    let client_acc: Vec<f64> = bench
        .clients
        .iter()
        .zip(&preds)
        .map(|(c, p)| hit_rate(&p.predicted, &bench.labels(c)))
        .collect();
    Ok(ZeroShotReport {
        client_ids: bench.clients.iter().map(|c| c.client_id).collect(),
        average: mean(&client_acc),
        client_acc,
        selections: preds.iter().map(|p| p.selection.clone()).collect(),
        chosen: preds.into_iter().map(|p| p.chosen).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingRow {
    pub client_id: usize,
    pub incorrect: usize,
    pub correct: usize,
    pub error_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingReport {
    pub rows: Vec<RoutingRow>,
    /// Mean of the per-client error rates.
    pub average_error: f64,
}

impl RoutingReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("client,incorrect,correct,error_rate\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.client_id, r.incorrect, r.correct, r.error_rate);
        }
        out
    }
}

/// Scores per-sample expert choices against the label -> expert map.
pub fn routing_from_choices(report: &ZeroShotReport, bench: &TestBench, truth: &BTreeMap<usize, usize>) -> Result<RoutingReport> {
    let mut rows = Vec::with_capacity(bench.clients.len());
    for (c, chosen) in bench.clients.iter().zip(&report.chosen) {
        let mut correct = 0;
        for (y, e) in bench.labels(c).iter().zip(chosen) {
            let want = truth
                .get(y)
                .ok_or_else(|| Error::config(format!("label {y} has no ground-truth expert")))?;
            correct += usize::from(want == e);
        }
        let incorrect = chosen.len() - correct;
        rows.push(RoutingRow {
            client_id: c.client_id,
            incorrect,
            correct,
            error_rate: incorrect as f64 / chosen.len() as f64,
        });
    }
    let average_error = mean(&rows.iter().map(|r| r.error_rate).collect::<Vec<_>>());
    Ok(RoutingReport { rows, average_error })
}

/// A sample is routed correctly when the expert chosen for it owns its label.
pub fn per_sample_routing_report(
    state: &ServerState,
    bench: &TestBench,
    truth: &BTreeMap<usize, usize>,
    top_k: usize,
) -> Result<RoutingReport> {
    routing_from_choices(&zero_shot_eval(state, bench, top_k)?, bench, truth)
}

/// Accuracy of one network on every test client.
pub fn single_model_client_acc(spec: &NetSpec, params: &ParamVector, bench: &TestBench) -> Result<Vec<f64>> {
    bench
        .clients
        .par_iter()
        .map(|c| {
            let logits = nn::forward(spec, params, &bench.inputs(c))?;
            Ok(nn::accuracy(&logits, &bench.labels(c)))
        })
        .collect()
}

/// Mean test-client accuracy of the common expert on its own.
pub fn common_expert_accuracy(common: &CommonExpert, bench: &TestBench) -> Result<f64> {
    Ok(mean(&single_model_client_acc(common.spec(), common.params(), bench)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub global_acc: f64,
    pub per_expert_acc: Vec<f64>,
    pub routing_acc: Option<f64>,
    pub group_acc: Option<Vec<f64>>,
}

/// Method-appropriate test metrics for a server state.
pub fn evaluate_state(method: Method, state: &ServerState, bench: &TestBench, top_k: usize) -> Result<Evaluation> {
    let per_expert_acc = state
        .experts
        .par_iter()
        .map(|e| Ok(nn::accuracy(&nn::forward(&state.expert_spec, e, &bench.test.inputs)?, &bench.test.labels)))
        .collect::<Result<Vec<f64>>>()?;
    let mut routing_acc = None;
    let client_acc: Vec<f64> = match method {
        Method::Fedjets => {
            let report = zero_shot_eval(state, bench, top_k)?;
            if let Some(truth) = &bench.truth {
                routing_acc = Some(1.0 - routing_from_choices(&report, bench, truth)?.average_error);
            }
            report.client_acc
        }
        Method::Fedavg | Method::Fedprox => single_model_client_acc(&state.expert_spec, &state.experts[0], bench)?,
        Method::AvgEnsemble => {
            let members: Vec<nn::Member<'_>> = state.experts.iter().map(|p| (&state.expert_spec, p)).collect();
            bench
                .clients
                .par_iter()
                .map(|c| Ok(hit_rate(&baselines::avg_ensemble_predict(&members, &bench.inputs(c))?, &bench.labels(c))))
                .collect::<Result<_>>()?
        }
        Method::Fedmix => {
            let gate = state
                .gate
                .as_ref()
                .ok_or_else(|| Error::config("fedmix evaluation needs a gate"))?;
            bench
                .clients
                .par_iter()
                .map(|c| {
                    let pred = baselines::fedmix_predict(
                        &state.expert_spec,
                        &state.experts,
                        gate,
                        bench.embeddings.get(c.client_id)?,
                        &bench.inputs(c),
                    )?;
                    Ok(hit_rate(&pred, &bench.labels(c)))
                })
                .collect::<Result<_>>()?
        }
    };
    let group_acc = bench.groups.as_ref().map(|groups| {
        let by_id: BTreeMap<usize, f64> = bench
            .clients
            .iter()
            .map(|c| c.client_id)
            .zip(client_acc.iter().copied())
            .collect();
        groups
            .iter()
            .map(|ids| mean(&ids.iter().map(|id| by_id[id]).collect::<Vec<_>>()))
            .collect()
    });
    Ok(Evaluation {
        global_acc: mean(&client_acc),
        per_expert_acc,
        routing_acc,
        group_acc,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Phase {
    pub round_start: usize,
    pub round_end: usize,
    pub active: BTreeSet<usize>,
}

/// Which training clients may be sampled in which rounds.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScenarioSchedule {
    phases: Vec<Phase>,
}

impl ScenarioSchedule {
    /// Phases must be ascending, contiguous, cover `[0, rounds)` and have
    /// non-empty active sets.
    pub fn new(phases: Vec<Phase>, rounds: usize) -> Result<Self> {
        let mut next = 0;
        for p in &phases {
            if p.round_start != next || p.round_end <= p.round_start {
                return Err(Error::config(format!(
                    "phase [{}, {}) does not continue at round {next}",
                    p.round_start, p.round_end
                )));
            }
            if p.active.is_empty() {
                return Err(Error::config(format!(
                    "phase [{}, {}) has no active clients",
                    p.round_start, p.round_end
                )));
            }
            next = p.round_end;
        }
        if next != rounds {
            return Err(Error::config(format!("schedule covers [0, {next}) but the run has {rounds} rounds")));
        }
        Ok(Self { phases })
    }

    pub fn single(active: BTreeSet<usize>, rounds: usize) -> Result<Self> {
        Self::new(
            vec![Phase {
                round_start: 0,
                round_end: rounds,
                active,
            }],
            rounds,
        )
    }

    /// Group `g` joins at phase `g`; the final phase runs to the end.
    pub fn growing(always: &[usize], groups: &[Vec<usize>], phase_rounds: usize, rounds: usize) -> Result<Self> {
        Self::phased(always, groups, phase_rounds, rounds, |p, active| {
            for g in &groups[..=p.min(groups.len() - 1)] {
                active.extend(g);
            }
        })
    }

    /// Only group `p mod G` is active during phase `p`.
    pub fn cyclic(always: &[usize], groups: &[Vec<usize>], phase_rounds: usize, rounds: usize) -> Result<Self> {
        Self::phased(always, groups, phase_rounds, rounds, |p, active| {
            active.extend(&groups[p % groups.len()]);
        })
    }

    fn phased(
        always: &[usize],
        groups: &[Vec<usize>],
        phase_rounds: usize,
        rounds: usize,
        fill: impl Fn(usize, &mut BTreeSet<usize>),
    ) -> Result<Self> {
        if groups.is_empty() || phase_rounds == 0 {
            return Err(Error::config("a phased schedule needs groups and a positive phase length"));
        }
        let mut phases = Vec::new();
        let mut start = 0;
        let mut p = 0;
        while start < rounds {
            let end = (start + phase_rounds).min(rounds);
            let mut active: BTreeSet<usize> = always.iter().copied().collect();
            fill(p, &mut active);
            phases.push(Phase {
                round_start: start,
                round_end: end,
                active,
            });
            start = end;
            p += 1;
        }
        Self::new(phases, rounds)
    }

    pub fn phases(&self) -> &[Phase] {
        &self.phases
    }

    pub fn active_at(&self, round: usize) -> Result<&BTreeSet<usize>> {
        self.phases
            .iter()
            .find(|p| p.round_start <= round && round < p.round_end)
            .map(|p| &p.active)
            .ok_or_else(|| Error::config(format!("round {round} is outside the schedule")))
    }
}

/// Training restricted to the schedule's client pools.
pub fn run_scenario(
    cfg: &RunConfig,
    fed: &Federation,
    bench: &TestBench,
    schedule: &ScenarioSchedule,
) -> Result<Vec<MetricsRecord>> {
    let end = schedule.phases().last().map_or(0, |p| p.round_end);
    if end != cfg.rounds {
        return Err(Error::config("schedule does not cover the configured rounds"));
    }
    Ok(baselines::run(cfg, fed, Some(bench), Some(schedule))?.history)
}
