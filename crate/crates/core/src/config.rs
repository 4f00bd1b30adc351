//! Run configuration: one JSON document, every field defaulted, unknown keys
//! rejected. `--set a.b=value` overrides are applied to the JSON tree before
//! it is typed.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::Strategy;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub federation: FederationConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
    pub scenario: Option<ScenarioConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,
    /// Label skew of the normal clients.
    pub partition: Strategy,
    pub with_replacement: bool,
    /// Samples per normal client (quantity strategy); `len / S` when unset.
    pub shard_size: Option<usize>,
    pub anchor_labels: usize,
    pub anchor_disjoint: bool,
    /// Label-mix concentration for overlapping anchors.
    pub anchor_alpha: f64,
    /// Samples per anchor; the normal shard size when unset.
    pub anchor_shard_size: Option<usize>,
    /// Label skew of the test clients; `partition` when unset.
    pub test_partition: Option<Strategy>,
    /// Samples per test client; the mean training shard size when unset.
    pub test_shard_size: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            dim: 16,
            train_per_class: 600,
            test_per_class: 200,
            separation: 4.0,
            partition: Strategy::Quantity { labels_per_client: 2 },
            with_replacement: true,
            shard_size: None,
            anchor_labels: 2,
            anchor_disjoint: true,
            anchor_alpha: 0.1,
            anchor_shard_size: None,
            test_partition: None,
            test_shard_size: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertInit {
    Scratch,
    FromCommon,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub expert_hidden: Vec<usize>,
    /// Hidden widths of the common expert; `expert_hidden` when unset.
    pub common_hidden: Option<Vec<usize>>,
    /// Gate hidden width; `4 * M` when unset.
    pub gate_hidden: Option<usize>,
    /// Index into the common expert's layer dims; penultimate when unset.
    pub embed_layer: Option<usize>,
    /// Load the common expert instead of pretraining it.
    pub common_checkpoint: Option<String>,
    pub common_target_acc: f64,
    pub common_max_epochs: usize,
    pub common_lr: f64,
    pub common_momentum: f64,
    pub common_batch_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            expert_hidden: vec![32],
            common_hidden: None,
            gate_hidden: None,
            embed_layer: None,
            common_checkpoint: None,
            common_target_acc: 0.9,
            common_max_epochs: 50,
            common_lr: 0.01,
            common_momentum: 0.9,
            common_batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub rounds: usize,
    /// Training clients, anchors included.
    pub num_clients: usize,
    pub num_test_clients: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub anchors_per_round: usize,
    pub normals_per_round: usize,
    /// Average packets uniformly instead of by sample count.
    pub uniform_weights: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rounds: 300,
            num_clients: 60,
            num_test_clients: 10,
            num_experts: 5,
            top_k: 2,
            anchors_per_round: 5,
            normals_per_round: 5,
            uniform_weights: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fedjets,
    Fedavg,
    Fedprox,
    AvgEnsemble,
    Fedmix,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Fedjets => "fedjets",
            Method::Fedavg => "fedavg",
            Method::Fedprox => "fedprox",
            Method::AvgEnsemble => "avg_ensemble",
            Method::Fedmix => "fedmix",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.to_string()))
            .map_err(|_| Error::config(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub method: Method,
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    pub gate_lr: f64,
    pub gate_momentum: f64,
    pub batch_size: usize,
    /// Minibatch steps per activation; one local epoch when unset.
    pub local_iterations: Option<usize>,
    /// Initial experts for fedjets and fedmix.
    pub expert_init: ExpertInit,
    /// Initial global model for fedavg, fedprox and avg_ensemble.
    pub baseline_init: ExpertInit,
    /// Renormalise gate weights over the selected experts in the mixture loss.
    pub renormalize_gate: bool,
    pub fedprox_mu: f64,
    pub ensemble_size: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            method: Method::Fedjets,
            seed: 0,
            lr: 0.01,
            momentum: 0.9,
            gate_lr: 0.001,
            gate_momentum: 0.0,
            batch_size: 256,
            local_iterations: None,
            expert_init: ExpertInit::Scratch,
            baseline_init: ExpertInit::FromCommon,
            renormalize_gate: false,
            fedprox_mu: 0.01,
            ensemble_size: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Rounds between evaluations; the final round is always evaluated.
    pub interval: usize,
    /// Window for best-of-last-k reporting.
    pub last_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            interval: 10,
            last_k: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioMode {
    /// Group `g` joins the normal-client pool at phase `g` and stays.
    Growing,
    /// Only group `g mod groups` is available during phase `g`.
    Cyclic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub mode: ScenarioMode,
    /// Number of label groups; labels are split into contiguous ranges.
    pub groups: usize,
    pub phase_rounds: usize,
}

impl Config {
    pub fn from_json_str(text: &str, origin: &str, overrides: &[String]) -> Result<Self> {
        let mut tree: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
            file: origin.to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: Config = serde_json::from_value(tree)
            .map_err(|e| Error::config(format!("{origin}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, &path.display().to_string(), overrides)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        let f = &self.federation;
        let t = &self.training;
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::config(msg)) };
        check(d.num_classes >= 2 && d.dim >= 2, "data needs at least 2 classes and 2 dims")?;
        check(d.train_per_class >= 2 && d.test_per_class >= 1, "too few samples per class")?;
        check(d.separation >= 0.0 && d.separation.is_finite(), "separation must be finite and >= 0")?;
        check(f.num_experts >= 1, "num_experts must be positive")?;
        check(f.top_k >= 1 && f.top_k <= f.num_experts, "top_k must be in [1, num_experts]")?;
        check(f.anchors_per_round <= f.num_experts, "anchors_per_round must not exceed num_experts")?;
        check(f.num_clients > f.num_experts, "num_clients must exceed the anchor count")?;
        check(
            f.anchors_per_round + f.normals_per_round <= f.num_clients,
            "anchors_per_round + normals_per_round must not exceed num_clients",
        )?;
        check(
            f.normals_per_round <= f.num_clients - f.num_experts,
            "normals_per_round exceeds the number of normal clients",
        )?;
        check(f.anchors_per_round + f.normals_per_round >= 1, "at least one client per round")?;
        check(f.num_test_clients >= 1, "num_test_clients must be positive")?;
        check(t.lr > 0.0 && t.gate_lr > 0.0, "learning rates must be positive")?;
        check((0.0..1.0).contains(&t.momentum), "momentum must be in [0, 1)")?;
        check((0.0..1.0).contains(&t.gate_momentum), "gate_momentum must be in [0, 1)")?;
        check(t.batch_size >= 1, "batch_size must be positive")?;
        check(t.fedprox_mu >= 0.0, "fedprox_mu must be >= 0")?;
        check(t.ensemble_size >= 2, "ensemble_size must be at least 2")?;
        check(self.eval.interval >= 1 && self.eval.last_k >= 1, "eval interval and last_k must be positive")?;
        check(!self.model.expert_hidden.contains(&0), "hidden widths must be positive")?;
        check(
            (0.0..=1.0).contains(&self.model.common_target_acc),
            "common_target_acc must be in [0, 1]",
        )?;
        if let Some(s) = &self.scenario {
            check(s.groups >= 1 && s.groups <= d.num_classes, "scenario groups must be in [1, C]")?;
            check(s.phase_rounds >= 1, "scenario phase_rounds must be positive")?;
        }
        Ok(())
    }

    pub fn common_hidden(&self) -> &[usize] {
        self.model
            .common_hidden
            .as_deref()
            .unwrap_or(&self.model.expert_hidden)
    }
}

/// Parses `value` as JSON, falling back to a plain string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies one `dot.path=value` override, creating intermediate objects.
pub fn apply_override(tree: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(format!("override path {path:?} has an empty segment")));
    }
    let mut node = tree;
    for key in &keys[..keys.len() - 1] {
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("override {path:?} descends into a non-object")))?;
        node = obj.entry(key.to_string()).or_insert(Value::Null);
    }
    if node.is_null() {
        *node = Value::Object(Default::default());
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| Error::config(format!("override {path:?} descends into a non-object")))?;
    obj.insert(keys[keys.len() - 1].to_string(), parse_value(raw));
    Ok(())
}
