//! Versioned JSON checkpoints.
//!
//! Parameter and optimizer arrays are stored as base64 of their
//! little-endian `f64` bytes, one string per layer, so a save/load round
//! trip is bit-exact.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::ensemble::{EnsembleQNetwork, RiskConfig};
use crate::error::{Error, Result};
use crate::nn::{AdamState, DenseNet, GradientSet};
use crate::train::{Trainer, Variant};

pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to resume evaluation of a run at some step.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub variant: Variant,
    pub config_digest: String,
    pub step: u64,
    /// Risk weights the agents select actions with.
    pub risk: RiskConfig,
    pub protagonist: EnsembleQNetwork,
    pub protagonist_target: EnsembleQNetwork,
    /// Online and target adversary networks, for adversarially trained runs.
    pub adversary: Option<(EnsembleQNetwork, EnsembleQNetwork)>,
}

impl Checkpoint {
    /// Snapshot of a run in progress.
    pub fn from_trainer(trainer: &Trainer, config_digest: String) -> Self {
        let p = trainer.protagonist();
        let adversary = trainer.adversary();
        Checkpoint {
            variant: trainer.config().variant,
            config_digest,
            step: trainer.t(),
            risk: RiskConfig::new(p.risk.lambda_p, adversary.map_or(0.0, |a| a.risk.lambda_a)),
            protagonist: p.online.clone(),
            protagonist_target: p.target.clone(),
            adversary: adversary.map(|a| (a.online.clone(), a.target.clone())),
        }
    }

    /// Bitwise equality of every parameter and optimizer array.
    pub fn same_contents(&self, other: &Checkpoint) -> bool {
        fn nets(c: &Checkpoint) -> Vec<&EnsembleQNetwork> {
            let mut v = vec![&c.protagonist, &c.protagonist_target];
            if let Some((a, t)) = &c.adversary {
                v.extend([a, t]);
            }
            v
        }
        let (a, b) = (nets(self), nets(other));
        self.variant == other.variant
            && self.config_digest == other.config_digest
            && self.step == other.step
            && self.risk.lambda_p.to_bits() == other.risk.lambda_p.to_bits()
            && self.risk.lambda_a.to_bits() == other.risk.lambda_a.to_bits()
            && a.len() == b.len()
            && a.iter().zip(&b).all(|(x, y)| to_doc(x) == to_doc(y))
    }

    /// Message to show when the checkpoint came from a different config.
    pub fn digest_warning(&self, expected: &str) -> Option<String> {
        (self.config_digest != expected).then(|| {
            format!(
                "checkpoint was written under config digest {}, current config is {expected}",
                self.config_digest
            )
        })
    }
}

#[derive(Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct LayersDoc {
    layer_dims: Vec<usize>,
    weights: Vec<String>,
    biases: Vec<String>,
}

#[derive(Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct AdamDoc {
    step: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    m_weights: Vec<String>,
    m_biases: Vec<String>,
    v_weights: Vec<String>,
    v_biases: Vec<String>,
}

#[derive(Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct NetDoc {
    k: usize,
    trunk: LayersDoc,
    heads: Vec<LayersDoc>,
    trunk_adam: AdamDoc,
    head_adam: Vec<AdamDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworksDoc {
    protagonist: NetDoc,
    protagonist_target: NetDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adversary: Option<NetDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adversary_target: Option<NetDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    format_version: u32,
    variant: String,
    config_digest: String,
    step: u64,
    lambda_p: f64,
    lambda_a: f64,
    networks: NetworksDoc,
}

fn encode(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode(s: &str) -> std::result::Result<Vec<f64>, String> {
    let bytes = B64.decode(s).map_err(|e| format!("bad base64 array: {e}"))?;
    if bytes.len() % 8 != 0 {
        return Err(format!("array byte length {} is not a multiple of 8", bytes.len()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn decode_all(list: &[String]) -> std::result::Result<Vec<Vec<f64>>, String> {
    list.iter().map(|s| decode(s)).collect()
}

fn layers_doc(net: &DenseNet) -> LayersDoc {
    LayersDoc {
        layer_dims: net.layer_dims().to_vec(),
        weights: net.weights().iter().map(|w| encode(w)).collect(),
        biases: net.biases().iter().map(|b| encode(b)).collect(),
    }
}

fn adam_doc(a: &AdamState) -> AdamDoc {
    let enc = |l: &[Vec<f64>]| l.iter().map(|x| encode(x)).collect();
    AdamDoc {
        step: a.step,
        beta1: a.beta1,
        beta2: a.beta2,
        epsilon: a.epsilon,
        m_weights: enc(&a.m.weights),
        m_biases: enc(&a.m.biases),
        v_weights: enc(&a.v.weights),
        v_biases: enc(&a.v.biases),
    }
}

fn to_doc(net: &EnsembleQNetwork) -> NetDoc {
    NetDoc {
        k: net.k(),
        trunk: layers_doc(net.trunk()),
        heads: net.heads().iter().map(layers_doc).collect(),
        trunk_adam: adam_doc(net.trunk_opt()),
        head_adam: net.head_opts().iter().map(adam_doc).collect(),
    }
}

fn from_layers(d: &LayersDoc) -> std::result::Result<DenseNet, String> {
    DenseNet::from_params(d.layer_dims.clone(), decode_all(&d.weights)?, decode_all(&d.biases)?)
        .map_err(|e| e.to_string())
}

fn from_adam(d: &AdamDoc) -> std::result::Result<AdamState, String> {
    Ok(AdamState {
        step: d.step,
        m: GradientSet {
            weights: decode_all(&d.m_weights)?,
            biases: decode_all(&d.m_biases)?,
        },
        v: GradientSet {
            weights: decode_all(&d.v_weights)?,
            biases: decode_all(&d.v_biases)?,
        },
        beta1: d.beta1,
        beta2: d.beta2,
        epsilon: d.epsilon,
    })
}

fn from_doc(d: &NetDoc) -> std::result::Result<EnsembleQNetwork, String> {
    if d.heads.len() != d.k || d.head_adam.len() != d.k {
        return Err(format!(
            "k = {} but {} heads and {} head optimizers are stored",
            d.k,
            d.heads.len(),
            d.head_adam.len()
        ));
    }
    let trunk = from_layers(&d.trunk)?;
    let heads = d.heads.iter().map(from_layers).collect::<std::result::Result<Vec<_>, _>>()?;
    let trunk_opt = from_adam(&d.trunk_adam)?;
    let head_opts = d.head_adam.iter().map(from_adam).collect::<std::result::Result<Vec<_>, _>>()?;
    EnsembleQNetwork::from_parts_with_state(trunk, heads, trunk_opt, head_opts).map_err(|e| e.to_string())
}

pub fn to_json(ckpt: &Checkpoint) -> String {
    let (adversary, adversary_target) = match &ckpt.adversary {
        Some((a, t)) => (Some(to_doc(a)), Some(to_doc(t))),
        None => (None, None),
    };
    let doc = CheckpointDoc {
        format_version: FORMAT_VERSION,
        variant: ckpt.variant.to_string(),
        config_digest: ckpt.config_digest.clone(),
        step: ckpt.step,
        lambda_p: ckpt.risk.lambda_p,
        lambda_a: ckpt.risk.lambda_a,
        networks: NetworksDoc {
            protagonist: to_doc(&ckpt.protagonist),
            protagonist_target: to_doc(&ckpt.protagonist_target),
            adversary,
            adversary_target,
        },
    };
    serde_json::to_string_pretty(&doc).expect("checkpoint documents always serialize")
}

pub fn from_json(text: &str, path: &Path) -> Result<Checkpoint> {
    let fail = |detail: String| Error::Checkpoint {
        path: path.to_path_buf(),
        detail,
    };
    // Check the version before the full schema so old files get a clear message.
    let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| fail(format!("parse error: {e}")))?;
    match raw.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(fail(format!(
                "unsupported format_version {v} (this build reads version {FORMAT_VERSION})"
            )))
        }
        None => return Err(fail("missing format_version".into())),
    }
    let doc: CheckpointDoc = serde_json::from_value(raw).map_err(|e| fail(format!("schema error: {e}")))?;
    let variant: Variant = doc.variant.parse().map_err(|e: Error| fail(e.to_string()))?;
    let net = |name: &str, d: &NetDoc| from_doc(d).map_err(|e| fail(format!("network {name}: {e}")));
    let adversary = match (&doc.networks.adversary, &doc.networks.adversary_target) {
        (Some(a), Some(t)) => Some((net("adversary", a)?, net("adversary_target", t)?)),
        (None, None) => None,
        _ => return Err(fail("adversary and adversary_target must be stored together".into())),
    };
    Ok(Checkpoint {
        variant,
        config_digest: doc.config_digest,
        step: doc.step,
        risk: RiskConfig::new(doc.lambda_p, doc.lambda_a),
        protagonist: net("protagonist", &doc.networks.protagonist)?,
        protagonist_target: net("protagonist_target", &doc.networks.protagonist_target)?,
        adversary,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_json(&text, path)
}
