use proptest::prelude::{prop_assert_eq, proptest};
use rand::seq::SliceRandom;
use rand::Rng;

use super::*;
use crate::config::ExpertInit;
use crate::nn::Head;
use crate::runtime::run_training;
use crate::seed;
use crate::testkit::{run_config, toy, Toy};

fn assert_bits_eq(a: &ParamVector, b: &ParamVector) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.values().iter().zip(b.values()) {
        assert_eq!(x.to_bits(), y.to_bits(), "{x} vs {y}");
    }
}

#[test]
fn fedprox_without_pull_is_fedavg() {
    let Toy { fed, bench } = toy(2, 6, 1);
    let cfg = run_config(Method::Fedavg, 2, 6);
    let global = init_expert(&fed.expert_spec, &fed.common, ExpertInit::Scratch, 3, 0).unwrap();
    for id in [0, 3, 7] {
        let a = fedavg_client_update(&fed.expert_spec, &global, &fed, id, &cfg, 2).unwrap();
        let b = fedprox_client_update(&fed.expert_spec, &global, &fed, id, &cfg, 2, 0.0).unwrap();
        assert_bits_eq(&a.experts[&0], &b.experts[&0]);
        assert_eq!(a, b);
    }

    let avg = run(&cfg, &fed, Some(&bench), None).unwrap();
    let mut prox_cfg = cfg.clone();
    prox_cfg.method = Method::Fedprox;
    prox_cfg.fedprox_mu = 0.0;
    let prox = run(&prox_cfg, &fed, Some(&bench), None).unwrap();
    assert_eq!(avg.state, prox.state);
    assert_eq!(avg.ledger.rows, prox.ledger.rows);
    for (a, b) in avg.history.iter().zip(&prox.history) {
        assert_eq!(a.global_acc.to_bits(), b.global_acc.to_bits());
        assert_eq!(a.per_expert_acc, b.per_expert_acc);
    }
}

#[test]
fn negative_mu_is_rejected() {
    let Toy { fed, .. } = toy(2, 2, 1);
    let cfg = run_config(Method::Fedprox, 2, 2);
    let global = ParamVector::zeros(&fed.expert_spec);
    assert!(fedprox_client_update(&fed.expert_spec, &global, &fed, 2, &cfg, 0, -1.0).is_err());
}

#[test]
fn fedavg_single_client_is_centralised() {
    let Toy { fed, .. } = toy(2, 3, 2);
    let mut cfg = run_config(Method::Fedavg, 2, 3);
    cfg.local_iterations = Some(6);
    cfg.batch_size = 4;
    let global = init_expert(&fed.expert_spec, &fed.common, ExpertInit::Scratch, 3, 0).unwrap();
    let shard = fed.shard(3);
    let p = fedavg_client_update(&fed.expert_spec, &global, &fed, 3, &cfg, 5).unwrap();

    let mut rng = client_rng(cfg.seed, 5, 3, 0);
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let (mut w, mut v) = (global.values().to_vec(), vec![0.0; global.len()]);
    let mut pos = shard.len();
    for _ in 0..6 {
        if pos == shard.len() {
            order.shuffle(&mut rng);
            pos = 0;
        }
        let end = (pos + 4).min(shard.len());
        let rows: Vec<usize> = order[pos..end].iter().map(|&i| shard.indices[i]).collect();
        pos = end;
        let cur = ParamVector::from_values(&fed.expert_spec, w.clone()).unwrap();
        let (_, g) = nn::loss_and_grad(&fed.expert_spec, &cur, &fed.train.batch(&rows).unwrap(), LossKind::CeOnLogits).unwrap();
        for ((wi, vi), gi) in w.iter_mut().zip(&mut v).zip(g.values()) {
            *vi = cfg.momentum * *vi + gi;
            *wi -= cfg.lr * *vi;
        }
    }
    assert_bits_eq(&p.experts[&0], &ParamVector::from_values(&fed.expert_spec, w).unwrap());

    // One client, one round: the server adopts its update.
    let mut one = cfg.clone();
    one.rounds = 1;
    one.anchors_per_round = 0;
    one.normals_per_round = 3;
    let out = run(&one, &fed, None, None).unwrap();
    let start = init_expert(&fed.expert_spec, &fed.common, one.baseline_init, one.seed, 0).unwrap();
    let packets: Vec<UpdatePacket> = [2, 3, 4]
        .iter()
        .map(|&id| fedavg_client_update(&fed.expert_spec, &start, &fed, id, &one, 0).unwrap())
        .collect();
    let init = ServerState {
        expert_spec: fed.expert_spec.clone(),
        experts: vec![start],
        gate: None,
        round: 0,
    };
    assert_eq!(out.state, aggregate(&init, &packets, false).unwrap());
}

#[test]
fn huge_mu_pins_local_params() {
    let Toy { fed, .. } = toy(2, 2, 3);
    let mut cfg = run_config(Method::Fedprox, 2, 2);
    let mu = 1e6;
    // Explicit steps on the proximal term contract only while lr * mu < 2.
    cfg.lr = 1.0 / mu;
    cfg.momentum = 0.0;
    cfg.local_iterations = Some(50);
    let global = init_expert(&fed.expert_spec, &fed.common, ExpertInit::Scratch, 9, 0).unwrap();
    let p = fedprox_client_update(&fed.expert_spec, &global, &fed, 2, &cfg, 0, mu).unwrap();
    let drift = p.experts[&0]
        .values()
        .iter()
        .zip(global.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(drift < 1e-3, "{drift}");
}

#[test]
fn prox_gradient_matches_finite_differences() {
    let spec = NetSpec::mlp(&[3, 4, 3], Head::Logits).unwrap();
    let mut rng = seed::stream(5, &[]);
    for mu in [0.0, 0.3, 4.0] {
        let random = |rng: &mut seed::SimRng| {
            ParamVector::from_values(&spec, (0..spec.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let w = random(&mut rng);
        let w0 = random(&mut rng);
        let x = Matrix::from_vec(5, 3, (0..15).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let batch = Batch::new(x, vec![0, 1, 2, 1, 0]).unwrap();
        let (_, g) = prox_loss_grad(&spec, &w, &w0, &batch, mu).unwrap();
        let h = 1e-5;
        for i in 0..w.len() {
            let mut plus = w.clone();
            plus.values_mut()[i] += h;
            let mut minus = w.clone();
            minus.values_mut()[i] -= h;
            let fd = (prox_loss_grad(&spec, &plus, &w0, &batch, mu).unwrap().0
                - prox_loss_grad(&spec, &minus, &w0, &batch, mu).unwrap().0)
                / (2.0 * h);
            let a = g.values()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-4 || (a - fd).abs() < 1e-9, "mu {mu} param {i}: {a} vs {fd}");
        }
    }
}

fn tiny_models(seed: u64) -> (NetSpec, Vec<ParamVector>, Matrix) {
    let spec = NetSpec::mlp(&[3, 5, 4], Head::Logits).unwrap();
    let mut rng = seed::stream(seed, &[]);
    let models = (0..4).map(|_| ParamVector::init(&spec, &mut rng)).collect();
    let x = Matrix::from_vec(20, 3, (0..60).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
    (spec, models, x)
}

#[test]
fn identical_members_predict_like_one_model() {
    let (spec, models, x) = tiny_models(1);
    let single: Vec<usize> = nn::forward(&spec, &models[0], &x).unwrap().row_iter().map(argmax).collect();
    for n in 2..5 {
        let members: Vec<Member<'_>> = (0..n).map(|_| (&spec, &models[0])).collect();
        assert_eq!(avg_ensemble_predict(&members, &x).unwrap(), single);
    }
}

#[test]
fn ensemble_needs_two_members() {
    let (spec, models, x) = tiny_models(2);
    assert!(matches!(avg_ensemble_predict(&[(&spec, &models[0])], &x), Err(Error::Config(_))));
}

#[test]
fn opposite_confident_members_and_an_abstainer() {
    // Single-layer nets on a constant input: the bias is the logit row.
    let spec = NetSpec::mlp(&[1, 3], Head::Logits).unwrap();
    let net = |b: [f64; 3]| ParamVector::from_values(&spec, vec![0.0, 0.0, 0.0, b[0], b[1], b[2]]).unwrap();
    let x = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
    let hand = |rows: &[[f64; 3]]| {
        let mut mean = [0.0; 3];
        for r in rows {
            let z: f64 = r.iter().map(|v| v.exp()).sum();
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v.exp() / z / rows.len() as f64;
            }
        }
        argmax(&mean)
    };

    let cases: [[[f64; 3]; 3]; 3] = [
        [[6.0, 0.0, 0.0], [0.0, 5.0, 0.0], [0.0, 0.0, 0.0]],
        [[4.0, 0.0, 3.9], [0.0, 4.0, 3.9], [0.0, 0.0, 0.0]],
        [[0.0, 5.0, 0.0], [5.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
    ];
    let want = [0, 2, 0];
    for (rows, w) in cases.iter().zip(want) {
        let nets: Vec<ParamVector> = rows.iter().map(|&b| net(b)).collect();
        let members: Vec<Member<'_>> = nets.iter().map(|p| (&spec, p)).collect();
        assert_eq!(hand(rows), w);
        assert_eq!(avg_ensemble_predict(&members, &x).unwrap(), vec![w]);
    }
}

proptest! {
    #[test]
    fn ensemble_ignores_member_order(seed in 0u64..300, shuffle in 0u64..1000) {
        let (spec, models, x) = tiny_models(seed);
        let mut members: Vec<Member<'_>> = models.iter().map(|p| (&spec, p)).collect();
        let base = avg_ensemble_predict(&members, &x).unwrap();
        members.shuffle(&mut seed::stream(shuffle, &[]));
        prop_assert_eq!(avg_ensemble_predict(&members, &x).unwrap(), base);
    }
}

#[test]
fn ensemble_of_clones_scores_like_one_model() {
    let Toy { fed, bench } = toy(2, 4, 4);
    let state = ServerState {
        expert_spec: fed.expert_spec.clone(),
        experts: vec![init_expert(&fed.expert_spec, &fed.common, ExpertInit::Scratch, 1, 0).unwrap(); 2],
        gate: None,
        round: 0,
    };
    let ens = eval::evaluate_state(Method::AvgEnsemble, &state, &bench, 1).unwrap();
    let one = eval::evaluate_state(Method::Fedavg, &state, &bench, 1).unwrap();
    assert_eq!(ens.global_acc, one.global_acc);
}

#[test]
fn single_expert_mixture_is_fedavg() {
    let Toy { fed, bench } = toy(1, 5, 5);
    let mut cfg = run_config(Method::Fedavg, 1, 5);
    cfg.rounds = 4;
    cfg.top_k = 1;
    cfg.normals_per_round = 3;
    let avg = run(&cfg, &fed, Some(&bench), None).unwrap();
    let mut mix_cfg = cfg.clone();
    mix_cfg.method = Method::Fedmix;
    let mix = run(&mix_cfg, &fed, Some(&bench), None).unwrap();
    assert_bits_eq(&avg.state.experts[0], &mix.state.experts[0]);
    assert_eq!(avg.history.len(), mix.history.len());
    for (a, b) in avg.history.iter().zip(&mix.history) {
        assert_eq!((a.round, a.global_acc.to_bits()), (b.round, b.global_acc.to_bits()));
        assert_eq!(a.per_expert_acc, b.per_expert_acc);
    }
}

#[test]
fn fedmix_downlink_ignores_k() {
    let Toy { fed, .. } = toy(3, 4, 6);
    let sizes = runtime::ModelSizes::of(&fed);
    let mut cfg = run_config(Method::Fedmix, 3, 4);
    let plan = plan_round(0, &cfg, &fed.anchor_ids(), &fed.normal_ids());
    let base = comm_cost(&plan, &cfg, &sizes);
    assert_eq!(base.down, plan.len() as u64 * 3 * sizes.expert);
    for k in 1..=3 {
        cfg.top_k = k;
        assert_eq!(comm_cost(&plan, &cfg, &sizes), base);
    }
}

/// Mixture loss over all experts on a fixed batch, as a function of the gate.
fn mixture_loss(spec: &NetSpec, experts: &[ParamVector], gate: &GateNet, emb: &Matrix, batch: &Batch) -> f64 {
    let weights = gate.scores(emb).unwrap();
    let members: Vec<Member<'_>> = experts.iter().map(|p| (spec, p)).collect();
    nn::mixture_loss_grad(&members, &weights, batch).unwrap().loss
}

#[test]
fn fedmix_update_matches_hand_stepped_mixture() {
    let Toy { fed, .. } = toy(2, 2, 7);
    let mut cfg = run_config(Method::Fedmix, 2, 2);
    cfg.local_iterations = Some(3);
    cfg.batch_size = 6;
    cfg.momentum = 0.5;
    cfg.gate_momentum = 0.5;
    let state = ServerState {
        expert_spec: fed.expert_spec.clone(),
        experts: (0..2)
            .map(|i| init_expert(&fed.expert_spec, &fed.common, ExpertInit::Scratch, 11, i))
            .collect::<Result<_>>()
            .unwrap(),
        gate: Some(init_gate(&fed.gate_spec, 11).unwrap()),
        round: 2,
    };
    let id = 2;
    let (packet, new_gate) = fedmix_client_update(&state, state.gate.as_ref().unwrap(), &fed, id, &cfg).unwrap();
    assert!(packet.gate.is_none());
    assert_eq!(packet.experts.len(), 2);

    // Reference: expert gradients from the plain mixture, gate gradient by
    // central differences, SGDM written out.
    let shard = fed.shard(id);
    let emb_all = fed.embeddings.get(id).unwrap();
    let mut batches = Minibatches::new(shard.len(), 6, client_rng(cfg.seed, 2, id, 0));
    let mut experts = state.experts.clone();
    let mut gate = state.gate.clone().unwrap();
    let mut ev = vec![vec![0.0; experts[0].len()]; 2];
    let mut gv = vec![0.0; gate.params.len()];
    for _ in 0..3 {
        let pos = batches.next_batch();
        let rows: Vec<usize> = pos.iter().map(|&p| shard.indices[p]).collect();
        let batch = fed.train.batch(&rows).unwrap();
        let emb = emb_all.select_rows(&pos);
        let weights = gate.scores(&emb).unwrap();
        let members: Vec<Member<'_>> = experts.iter().map(|p| (&fed.expert_spec, p)).collect();
        let mg = nn::mixture_loss_grad(&members, &weights, &batch).unwrap();
        let h = 1e-6;
        let gg: Vec<f64> = (0..gate.params.len())
            .map(|i| {
                let mut plus = gate.clone();
                plus.params.values_mut()[i] += h;
                let mut minus = gate.clone();
                minus.params.values_mut()[i] -= h;
                (mixture_loss(&fed.expert_spec, &experts, &plus, &emb, &batch)
                    - mixture_loss(&fed.expert_spec, &experts, &minus, &emb, &batch))
                    / (2.0 * h)
            })
            .collect();
        for ((p, v), g) in gate.params.values_mut().iter_mut().zip(&mut gv).zip(&gg) {
            *v = cfg.gate_momentum * *v + g;
            *p -= cfg.gate_lr * *v;
        }
        for ((e, v), g) in experts.iter_mut().zip(&mut ev).zip(&mg.expert_grads) {
            for ((p, vi), gi) in e.values_mut().iter_mut().zip(v.iter_mut()).zip(g.values()) {
                *vi = cfg.momentum * *vi + gi;
                *p -= cfg.lr * *vi;
            }
        }
    }
    // The finite-difference gate feeds slightly different weights into
    // later expert steps, so agreement is to rounding, not bit-exact.
    let gap = |a: &ParamVector, b: &ParamVector| a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    for (i, e) in experts.iter().enumerate() {
        assert!(gap(&packet.experts[&i], e) < 1e-8);
    }
    assert!(gap(&new_gate.params, &gate.params) < 1e-8);
}

#[test]
fn fedmix_gates_stay_local() {
    let Toy { fed, .. } = toy(2, 4, 8);
    let cfg = run_config(Method::Fedmix, 2, 4);
    let state = ServerState {
        expert_spec: fed.expert_spec.clone(),
        experts: (0..2)
            .map(|i| init_expert(&fed.expert_spec, &fed.common, ExpertInit::Scratch, 1, i))
            .collect::<Result<_>>()
            .unwrap(),
        gate: Some(init_gate(&fed.gate_spec, 1).unwrap()),
        round: 0,
    };
    let mut gates = LocalGates::default();
    let plan = plan_round(0, &cfg, &fed.anchor_ids(), &fed.normal_ids());
    let next = fedmix_round(&state, &mut gates, &plan, &fed, &cfg).unwrap();
    assert_eq!(next.gate, state.gate);
    assert_eq!(gates.len(), plan.len());
    for id in plan.active() {
        assert_ne!(gates.get(id), state.gate.as_ref());
    }
    // A returning client resumes from its own gate.
    let mut again = plan.clone();
    again.round = 1;
    let before = gates.get(plan.anchor_ids[0]).cloned().unwrap();
    let mut state1 = next.clone();
    state1.round = 1;
    let (_, g) = fedmix_client_update(&state1, &before, &fed, plan.anchor_ids[0], &cfg).unwrap();
    fedmix_round(&state1, &mut gates, &again, &fed, &cfg).unwrap();
    assert_eq!(gates.get(plan.anchor_ids[0]), Some(&g));
}

#[test]
fn every_baseline_logs_the_shared_schema() {
    let Toy { fed, bench } = toy(2, 4, 9);
    for method in [Method::Fedavg, Method::Fedprox, Method::AvgEnsemble, Method::Fedmix, Method::Fedjets] {
        let mut cfg = run_config(method, 2, 4);
        cfg.fedprox_mu = 0.01;
        let out = run(&cfg, &fed, Some(&bench), None).unwrap();
        assert_eq!(out.history.len(), 3);
        assert_eq!(out.ledger.rows.len(), 3);
        for r in &out.history {
            assert_eq!(r.method, method);
            assert!((0.0..=1.0).contains(&r.global_acc));
            assert_eq!(r.per_expert_acc.len(), out.state.experts.len());
        }
        assert_eq!(out.history.last().unwrap().floats_down_cum, out.ledger.totals().down);
        let fresh = run(&cfg, &fed, Some(&bench), None).unwrap();
        assert_eq!(out.history, fresh.history);
    }
    let jets = run_training(&run_config(Method::Fedjets, 2, 4), &fed, Some(&bench), None).unwrap();
    assert!(jets.history[0].routing_acc.is_some());
}
