//! Common-expert embeddings, gate scoring and top-K expert dispatch.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;

use crate::data::{ClientShard, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{
    self, argmax, Batch, Head, Matrix, Member, NetSpec, ParamVector,
};

/// Frozen feature extractor shared by every client.
#[derive(Clone, Debug, PartialEq)]
pub struct CommonExpert {
    spec: NetSpec,
    params: ParamVector,
    embed_layer: usize,
}

impl CommonExpert {
    /// `embed_layer` indexes `layer_dims`; `None` picks the penultimate layer.
    pub fn new(spec: NetSpec, params: ParamVector, embed_layer: Option<usize>) -> Result<Self> {
        params.check_spec(&spec)?;
        let embed_layer = embed_layer.unwrap_or(spec.layer_dims.len() - 2);
        if embed_layer >= spec.layer_dims.len() {
            return Err(Error::config(format!(
                "embed layer {embed_layer} out of range for {} layer dims",
                spec.layer_dims.len()
            )));
        }
        Ok(Self {
            spec,
            params,
            embed_layer,
        })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn embed_layer(&self) -> usize {
        self.embed_layer
    }

    pub fn embed_dim(&self) -> usize {
        self.spec.layer_dims[self.embed_layer]
    }

    pub fn embed(&self, inputs: &Matrix) -> Result<Matrix> {
        nn::activations_at(&self.spec, &self.params, inputs, self.embed_layer)
    }

    pub fn logits(&self, inputs: &Matrix) -> Result<Matrix> {
        nn::forward(&self.spec, &self.params, inputs)
    }
}

pub fn embed_all(common: &CommonExpert, shard: &ClientShard, ds: &LabeledDataset) -> Result<Matrix> {
    if ds.dim() != common.spec.input_dim() {
        return Err(Error::config(format!(
            "dataset dim {} does not match common expert input {}",
            ds.dim(),
            common.spec.input_dim()
        )));
    }
    common.embed(&ds.inputs.select_rows(&shard.indices))
}

/// Per-client embedding matrices, rows aligned with `ClientShard::indices`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingCache {
    entries: BTreeMap<usize, Matrix>,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Embeds every shard once; shards are processed in parallel.
    pub fn build(common: &CommonExpert, shards: &[ClientShard], ds: &LabeledDataset) -> Result<Self> {
        let mats: Vec<Matrix> = shards
            .par_iter()
            .map(|s| embed_all(common, s, ds))
            .collect::<Result<_>>()?;
        let mut entries = BTreeMap::new();
        for (s, m) in shards.iter().zip(mats) {
            if entries.insert(s.client_id, m).is_some() {
                return Err(Error::config(format!("duplicate client id {}", s.client_id)));
            }
        }
        Ok(Self { entries })
    }

    pub fn get_or_embed(&mut self, common: &CommonExpert, shard: &ClientShard, ds: &LabeledDataset) -> Result<&Matrix> {
        if !self.entries.contains_key(&shard.client_id) {
            let m = embed_all(common, shard, ds)?;
            self.entries.insert(shard.client_id, m);
        }
        Ok(&self.entries[&shard.client_id])
    }

    pub fn get(&self, client_id: usize) -> Result<&Matrix> {
        self.entries
            .get(&client_id)
            .ok_or_else(|| Error::config(format!("no cached embeddings for client {client_id}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Softmax-headed MLP `embed -> hidden -> M`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateNet {
    pub spec: NetSpec,
    pub params: ParamVector,
}

impl GateNet {
    pub fn spec_for(embed_dim: usize, num_experts: usize, hidden: Option<usize>) -> Result<NetSpec> {
        let hidden = hidden.unwrap_or(4 * num_experts);
        NetSpec::mlp(&[embed_dim, hidden, num_experts], Head::Softmax)
    }

    pub fn new(spec: NetSpec, params: ParamVector) -> Result<Self> {
        if spec.head != Head::Softmax {
            return Err(Error::config("gate must have a softmax head"));
        }
        params.check_spec(&spec)?;
        Ok(Self { spec, params })
    }

    pub fn init<R: Rng + ?Sized>(embed_dim: usize, num_experts: usize, hidden: Option<usize>, rng: &mut R) -> Result<Self> {
        let spec = Self::spec_for(embed_dim, num_experts, hidden)?;
        let params = ParamVector::init(&spec, rng);
        Ok(Self { spec, params })
    }

    pub fn num_experts(&self) -> usize {
        self.spec.output_dim()
    }

    /// `[n x M]` rows of expert probabilities.
    pub fn scores(&self, embeddings: &Matrix) -> Result<Matrix> {
        gate_scores(self, embeddings)
    }
}

pub fn gate_scores(gate: &GateNet, embeddings: &Matrix) -> Result<Matrix> {
    if embeddings.cols() != gate.spec.input_dim() {
        return Err(Error::config(format!(
            "embedding width {} does not match gate input {}",
            embeddings.cols(),
            gate.spec.input_dim()
        )));
    }
    Ok(nn::softmax_rows(&nn::forward(&gate.spec, &gate.params, embeddings)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertSelection {
    pub client_id: usize,
    /// K distinct expert ids, ascending.
    pub indices: Vec<usize>,
    pub aggregate_scores: Vec<f64>,
}

/// The `k` largest entries; ties go to the lower index. Result is ascending.
pub fn topk_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut top = order[..k.min(scores.len())].to_vec();
    top.sort_unstable();
    top
}

pub fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut sums = vec![0.0; m.cols()];
    for row in m.row_iter() {
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    sums
}

pub fn select_topk(gate: &GateNet, embeddings: &Matrix, k: usize, client_id: usize) -> Result<ExpertSelection> {
    let m = gate.num_experts();
    if k == 0 || k > m {
        return Err(Error::config(format!("K must be in [1, {m}], got {k}")));
    }
    let aggregate_scores = column_sums(&gate.scores(embeddings)?);
    Ok(ExpertSelection {
        client_id,
        indices: topk_indices(&aggregate_scores, k),
        aggregate_scores,
    })
}

/// Per row, the selected expert with the highest score (ties to the lower id).
pub fn per_sample_choice(scores: &Matrix, selection: &[usize]) -> Vec<usize> {
    scores
        .row_iter()
        .map(|row| {
            let restricted: Vec<f64> = selection.iter().map(|&e| row[e]).collect();
            selection[argmax(&restricted)]
        })
        .collect()
}

/// Cross-entropy of the gate against the one-hot of `expert`, and its gradient.
pub fn gate_independent_loss_grad(gate: &GateNet, embeddings: &Matrix, expert: usize) -> Result<(f64, ParamVector)> {
    if expert >= gate.num_experts() {
        return Err(Error::config(format!("expert {expert} out of range")));
    }
    let batch = Batch::new(embeddings.clone(), vec![expert; embeddings.rows()])?;
    nn::loss_and_grad(&gate.spec, &gate.params, &batch, nn::LossKind::CeOnLogits)
}

/// Loss and gradients of the gated mixture with respect to every selected
/// expert and the gate.
#[derive(Clone, Debug)]
pub struct JointGrad {
    pub loss: f64,
    pub expert_grads: Vec<ParamVector>,
    pub gate_grad: ParamVector,
}

/// Mixture weights for the selected experts, taken from gate probabilities.
pub fn selection_weights(scores: &Matrix, selection: &[usize], renormalize: bool) -> Matrix {
    let mut w = Matrix::zeros(scores.rows(), selection.len());
    for i in 0..scores.rows() {
        let row = scores.row(i);
        let total: f64 = if renormalize {
            selection.iter().map(|&e| row[e]).sum()
        } else {
            1.0
        };
        for (k, &e) in selection.iter().enumerate() {
            w.set(i, k, row[e] / total);
        }
    }
    w
}

/// Cross-entropy of `softmax(sum_k w_jk f_k(x_j))` where `w_jk` is the gate
/// probability of selected expert `k` on sample `j`, optionally renormalised
/// over the selection. `experts[k]` is the member for `selection[k]`.
pub fn joint_mixture_loss_grad(
    experts: &[Member<'_>],
    selection: &[usize],
    gate: &GateNet,
    embeddings: &Matrix,
    batch: &Batch,
    renormalize: bool,
) -> Result<JointGrad> {
    if experts.len() != selection.len() {
        return Err(Error::config("one expert per selected index is required"));
    }
    if embeddings.rows() != batch.len() {
        return Err(Error::config("embeddings and batch differ in length"));
    }
    let probs = gate.scores(embeddings)?;
    let weights = selection_weights(&probs, selection, renormalize);
    let mix = nn::mixture_loss_grad(experts, &weights, batch)?;

    let m = gate.num_experts();
    let mut dlogits = Matrix::zeros(batch.len(), m);
    for i in 0..batch.len() {
        let p = probs.row(i);
        let g = mix.weight_grad.row(i);
        let mut dp = vec![0.0; m];
        if renormalize {
            let total: f64 = selection.iter().map(|&e| p[e]).sum();
            let mean: f64 = g.iter().zip(weights.row(i)).map(|(a, b)| a * b).sum();
            for (k, &e) in selection.iter().enumerate() {
                dp[e] = (g[k] - mean) / total;
            }
        } else {
            for (k, &e) in selection.iter().enumerate() {
                dp[e] = g[k];
            }
        }
        let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
        for (j, d) in dlogits.row_mut(i).iter_mut().enumerate() {
            *d = p[j] * (dp[j] - dot);
        }
    }
    let gate_grad = nn::grad_from_logit_grad(&gate.spec, &gate.params, embeddings, dlogits)?;
    Ok(JointGrad {
        loss: mix.loss,
        expert_grads: mix.expert_grads,
        gate_grad,
    })
}
