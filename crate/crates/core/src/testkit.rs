//! Small deterministic federations for unit tests.

use crate::config::{ExpertInit, Method};
use crate::data::{self, AnchorConfig, ClientShard, LabeledDataset, ShardKind};
use crate::eval::TestBench;
use crate::gating::CommonExpert;
use crate::nn::{Head, NetSpec, ParamVector};
use crate::runtime::{Federation, RunConfig};
use crate::seed;

pub struct Toy {
    pub fed: Federation,
    pub bench: TestBench,
}

/// `m` disjoint two-label anchors over `2m` classes, `normals` two-label
/// normal clients and three test clients, all on 4-dimensional inputs.
pub fn toy(m: usize, normals: usize, seed: u64) -> Toy {
    let classes = 2 * m;
    let full = data::synth_dataset(classes, 4, 30, 3.0, seed).unwrap();
    let (train, test) = full.split_tail(10).unwrap();
    toy_from(train, test, m, normals, seed)
}

pub fn toy_from(train: LabeledDataset, test: LabeledDataset, m: usize, normals: usize, seed: u64) -> Toy {
    let classes = train.num_classes;
    let common_spec = NetSpec::mlp(&[train.dim(), 6, classes], Head::Logits).unwrap();
    let common_params = ParamVector::init(&common_spec, &mut seed::stream(seed, &[99]));
    let common = CommonExpert::new(common_spec, common_params, None).unwrap();
    let anchors = data::make_anchor_shards(
        &train,
        &AnchorConfig {
            count: m,
            labels_per_anchor: classes / m,
            disjoint: true,
            alpha: 0.1,
            shard_size: 12,
        },
        seed,
    )
    .unwrap();
    let normal_shards: Vec<ClientShard> = data::partition_quantity(&train, normals, 2.min(classes), seed, true)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, s)| ClientShard::new(m + i, s.indices, &train, ShardKind::Normal).unwrap())
        .collect();
    let expert_spec = NetSpec::mlp(&[train.dim(), 5, classes], Head::Logits).unwrap();
    let per = test.len() / 3;
    let clients: Vec<ClientShard> = (0..3)
        .map(|i| ClientShard::new(i, (i * per..(i + 1) * per).collect(), &test, ShardKind::Test).unwrap())
        .collect();
    let truth = data::label_expert_map(&anchors);
    let bench = TestBench::new(test, clients, &common, truth, None).unwrap();
    let fed = Federation::new(train, anchors, normal_shards, common, expert_spec, None).unwrap();
    Toy { fed, bench }
}

pub fn run_config(method: Method, m: usize, normals: usize) -> RunConfig {
    RunConfig {
        method,
        rounds: 3,
        num_clients: m + normals,
        num_test_clients: 3,
        num_experts: m,
        top_k: 1.max(m / 2),
        anchors_per_round: m,
        normals_per_round: normals.min(2),
        local_iterations: Some(2),
        lr: 0.05,
        momentum: 0.9,
        gate_lr: 0.01,
        gate_momentum: 0.0,
        batch_size: 8,
        seed: 7,
        expert_init: ExpertInit::Scratch,
        baseline_init: ExpertInit::Scratch,
        renormalize_gate: false,
        uniform_weights: false,
        eval_interval: 1,
        fedprox_mu: 0.0,
        ensemble_size: 2,
    }
}
