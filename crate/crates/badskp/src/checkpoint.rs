//! Versioned, integrity-checked checkpoints.
//!
//! A checkpoint is a single JSON document holding named f64 tensors with
//! explicit shapes, free-form scalar attributes, a format version, and a
//! SHA-256 checksum over the canonical payload. Maps are ordered, so the
//! same state always serializes to the same bytes; any corruption of the
//! stored values is caught at load time.

use crate::error::{Error, Result};
use crate::gnn::{Activation, GnnParams, GraphPromptConfig, GraphPromptModule};
use crate::lm::{LmParams, TextEncoder, Tokenizer, ToyCausalLM, TransformerConfig};
use crate::linalg::Mat;
use crate::pipeline::VictimPipeline;
use crate::scalar::{cast, to_f64, Scalar};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorBlob {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: String,
    pub attrs: BTreeMap<String, Value>,
    pub tensors: BTreeMap<String, TensorBlob>,
    pub checksum: String,
}

#[derive(Serialize)]
struct Payload<'a> {
    version: u32,
    kind: &'a str,
    attrs: &'a BTreeMap<String, Value>,
    tensors: &'a BTreeMap<String, TensorBlob>,
}

fn payload_checksum(
    version: u32,
    kind: &str,
    attrs: &BTreeMap<String, Value>,
    tensors: &BTreeMap<String, TensorBlob>,
) -> Result<String> {
    let bytes = serde_json::to_vec(&Payload {
        version,
        kind,
        attrs,
        tensors,
    })?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

impl Checkpoint {
    pub fn new(
        kind: impl Into<String>,
        attrs: BTreeMap<String, Value>,
        tensors: BTreeMap<String, TensorBlob>,
    ) -> Result<Self> {
        let kind = kind.into();
        let checksum = payload_checksum(CHECKPOINT_VERSION, &kind, &attrs, &tensors)?;
        Ok(Checkpoint {
            version: CHECKPOINT_VERSION,
            kind,
            attrs,
            tensors,
            checksum,
        })
    }

    /// Recomputes the payload checksum and compares it to the stored one.
    pub fn verify(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let want = payload_checksum(self.version, &self.kind, &self.attrs, &self.tensors)?;
        if want != self.checksum {
            return Err(Error::Checkpoint(format!(
                "checksum mismatch: stored {} but payload hashes to {want}",
                self.checksum
            )));
        }
        Ok(())
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a `{kind}` checkpoint, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = serde_json::to_vec(self)?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let cp: Checkpoint = serde_json::from_slice(&bytes)?;
        cp.verify()?;
        Ok(cp)
    }

    fn attr(&self, key: &str) -> Result<&Value> {
        self.attrs
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing attribute `{key}`")))
    }

    fn attr_usize(&self, key: &str) -> Result<usize> {
        self.attr(key)?
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| Error::Checkpoint(format!("attribute `{key}` is not an integer")))
    }

    fn attr_bool(&self, key: &str) -> Result<bool> {
        self.attr(key)?
            .as_bool()
            .ok_or_else(|| Error::Checkpoint(format!("attribute `{key}` is not a boolean")))
    }

    fn attr_str(&self, key: &str) -> Result<&str> {
        self.attr(key)?
            .as_str()
            .ok_or_else(|| Error::Checkpoint(format!("attribute `{key}` is not a string")))
    }
}

fn export_named<T: Scalar>(
    named: Vec<(String, Vec<usize>, &[T])>,
    prefix: &str,
    into: &mut BTreeMap<String, TensorBlob>,
) {
    for (name, shape, data) in named {
        into.insert(
            format!("{prefix}{name}"),
            TensorBlob {
                shape,
                data: data.iter().map(|&v| to_f64(v)).collect(),
            },
        );
    }
}

/// Fills mutable parameter slots from stored tensors, checking that names,
/// shapes, and sizes all agree with a freshly constructed template.
fn fill_named<T: Scalar>(
    tensors: &BTreeMap<String, TensorBlob>,
    prefix: &str,
    expected: &[(String, Vec<usize>)],
    slots: Vec<&mut [T]>,
) -> Result<()> {
    if expected.len() != slots.len() {
        return Err(Error::Checkpoint("parameter template is inconsistent".into()));
    }
    for ((name, shape), slot) in expected.iter().zip(slots) {
        let key = format!("{prefix}{name}");
        let blob = tensors
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
        if &blob.shape != shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{key}` has shape {:?}, expected {shape:?}",
                blob.shape
            )));
        }
        if blob.data.len() != slot.len() {
            return Err(Error::Checkpoint(format!(
                "tensor `{key}` holds {} values, expected {}",
                blob.data.len(),
                slot.len()
            )));
        }
        for (dst, &src) in slot.iter_mut().zip(blob.data.iter()) {
            *dst = cast::<T>(src);
        }
    }
    Ok(())
}

fn lm_attrs(cfg: &TransformerConfig, into: &mut BTreeMap<String, Value>, prefix: &str) {
    into.insert(format!("{prefix}vocab_size"), json!(cfg.vocab_size));
    into.insert(format!("{prefix}d_model"), json!(cfg.d_model));
    into.insert(format!("{prefix}n_layers"), json!(cfg.n_layers));
    into.insert(format!("{prefix}n_heads"), json!(cfg.n_heads));
    into.insert(format!("{prefix}d_ff"), json!(cfg.d_ff));
    into.insert(format!("{prefix}max_seq"), json!(cfg.max_seq));
    into.insert(format!("{prefix}tie_output"), json!(cfg.tie_output));
}

fn lm_cfg_from(cp: &Checkpoint, prefix: &str) -> Result<TransformerConfig> {
    let cfg = TransformerConfig {
        vocab_size: cp.attr_usize(&format!("{prefix}vocab_size"))?,
        d_model: cp.attr_usize(&format!("{prefix}d_model"))?,
        n_layers: cp.attr_usize(&format!("{prefix}n_layers"))?,
        n_heads: cp.attr_usize(&format!("{prefix}n_heads"))?,
        d_ff: cp.attr_usize(&format!("{prefix}d_ff"))?,
        max_seq: cp.attr_usize(&format!("{prefix}max_seq"))?,
        tie_output: cp.attr_bool(&format!("{prefix}tie_output"))?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn lm_params_from<T: Scalar>(
    cp: &Checkpoint,
    cfg: &TransformerConfig,
    prefix: &str,
) -> Result<LmParams<T>> {
    let mut params = LmParams::<T>::zeros(cfg);
    let expected: Vec<(String, Vec<usize>)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    fill_named(&cp.tensors, prefix, &expected, params.flat_mut())?;
    Ok(params)
}

pub fn lm_to_checkpoint<T: Scalar>(lm: &ToyCausalLM<T>) -> Result<Checkpoint> {
    let mut attrs = BTreeMap::new();
    lm_attrs(&lm.cfg, &mut attrs, "");
    let mut tensors = BTreeMap::new();
    export_named(lm.params.named_tensors(), "", &mut tensors);
    Checkpoint::new("causal_lm", attrs, tensors)
}

pub fn lm_from_checkpoint<T: Scalar>(cp: &Checkpoint) -> Result<ToyCausalLM<T>> {
    cp.expect_kind("causal_lm")?;
    let cfg = lm_cfg_from(cp, "")?;
    let params = lm_params_from(cp, &cfg, "")?;
    Ok(ToyCausalLM { cfg, params })
}

fn activation_label(a: Activation) -> &'static str {
    match a {
        Activation::Tanh => "tanh",
        Activation::Identity => "identity",
    }
}

fn activation_from(label: &str) -> Result<Activation> {
    match label {
        "tanh" => Ok(Activation::Tanh),
        "identity" => Ok(Activation::Identity),
        other => Err(Error::Checkpoint(format!("unknown activation `{other}`"))),
    }
}

fn module_attrs(cfg: &GraphPromptConfig, into: &mut BTreeMap<String, Value>, prefix: &str) {
    into.insert(format!("{prefix}d_in"), json!(cfg.d_in));
    into.insert(format!("{prefix}d_llm"), json!(cfg.d_llm));
    into.insert(
        format!("{prefix}activation"),
        json!(activation_label(cfg.activation)),
    );
}

fn module_from<T: Scalar>(cp: &Checkpoint, prefix: &str) -> Result<GraphPromptModule<T>> {
    let cfg = GraphPromptConfig {
        d_in: cp.attr_usize(&format!("{prefix}d_in"))?,
        d_llm: cp.attr_usize(&format!("{prefix}d_llm"))?,
        activation: activation_from(cp.attr_str(&format!("{prefix}activation"))?)?,
    };
    let mut params = GnnParams::<T>::zeros(&cfg);
    let expected: Vec<(String, Vec<usize>)> = params
        .named_tensors()
        .into_iter()
        .map(|(n, s, _)| (n, s))
        .collect();
    fill_named(&cp.tensors, prefix, &expected, params.flat_mut())?;
    Ok(GraphPromptModule::new(cfg, params))
}

pub fn module_to_checkpoint<T: Scalar>(module: &GraphPromptModule<T>) -> Result<Checkpoint> {
    let mut attrs = BTreeMap::new();
    module_attrs(&module.cfg, &mut attrs, "");
    let mut tensors = BTreeMap::new();
    export_named(module.params.named_tensors(), "", &mut tensors);
    Checkpoint::new("graph_prompt", attrs, tensors)
}

pub fn module_from_checkpoint<T: Scalar>(cp: &Checkpoint) -> Result<GraphPromptModule<T>> {
    cp.expect_kind("graph_prompt")?;
    module_from(cp, "")
}

fn encoder_blob<T: Scalar>(encoder: &TextEncoder<T>) -> TensorBlob {
    TensorBlob {
        shape: vec![encoder.vocab_size(), encoder.dim()],
        data: encoder.table().data().iter().map(|&v| to_f64(v)).collect(),
    }
}

fn encoder_from_blob<T: Scalar>(blob: &TensorBlob) -> Result<TextEncoder<T>> {
    if blob.shape.len() != 2 || blob.shape[0] * blob.shape[1] != blob.data.len() {
        return Err(Error::Checkpoint("encoder table shape is inconsistent".into()));
    }
    let data: Vec<T> = blob.data.iter().map(|&v| cast::<T>(v)).collect();
    Ok(TextEncoder::from_table(Mat::from_flat(
        blob.shape[0],
        blob.shape[1],
        data,
    )))
}

/// Saves the whole victim stack — tokenizer, text encoder, prompt module,
/// and language model — as one checkpoint.
pub fn pipeline_to_checkpoint<T: Scalar>(p: &VictimPipeline<T>) -> Result<Checkpoint> {
    let mut attrs = BTreeMap::new();
    attrs.insert("retrieval_hops".into(), json!(p.retrieval_hops));
    attrs.insert("retrieval_budget".into(), json!(p.retrieval_budget));
    attrs.insert("max_answer_tokens".into(), json!(p.max_answer_tokens));
    attrs.insert("tokenizer.words".into(), json!(p.tokenizer.words()));
    lm_attrs(&p.lm.cfg, &mut attrs, "lm.");
    module_attrs(&p.module.cfg, &mut attrs, "module.");
    let mut tensors = BTreeMap::new();
    export_named(p.lm.params.named_tensors(), "lm.", &mut tensors);
    export_named(p.module.params.named_tensors(), "module.", &mut tensors);
    tensors.insert("encoder.table".into(), encoder_blob(&p.encoder));
    Checkpoint::new("pipeline", attrs, tensors)
}

pub fn pipeline_from_checkpoint<T: Scalar>(cp: &Checkpoint) -> Result<VictimPipeline<T>> {
    cp.expect_kind("pipeline")?;
    let words: Vec<String> = serde_json::from_value(cp.attr("tokenizer.words")?.clone())?;
    let tokenizer = Tokenizer::new(words);
    let lm_cfg = lm_cfg_from(cp, "lm.")?;
    let lm = ToyCausalLM {
        params: lm_params_from(cp, &lm_cfg, "lm.")?,
        cfg: lm_cfg,
    };
    let module = module_from(cp, "module.")?;
    let encoder = encoder_from_blob(
        cp.tensors
            .get("encoder.table")
            .ok_or_else(|| Error::Checkpoint("missing tensor `encoder.table`".into()))?,
    )?;
    let pipeline = VictimPipeline {
        lm,
        tokenizer,
        encoder,
        module,
        retrieval_hops: cp.attr_usize("retrieval_hops")?,
        retrieval_budget: cp.attr_usize("retrieval_budget")?,
        max_answer_tokens: cp.attr_usize("max_answer_tokens")?,
    };
    pipeline.validate()?;
    Ok(pipeline)
}

pub fn save_pipeline<T: Scalar>(p: &VictimPipeline<T>, path: impl AsRef<Path>) -> Result<()> {
    pipeline_to_checkpoint(p)?.save(path)
}

pub fn load_pipeline<T: Scalar>(path: impl AsRef<Path>) -> Result<VictimPipeline<T>> {
    pipeline_from_checkpoint(&Checkpoint::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{EdgeRecord, KnowledgeGraph, NodeRecord};

    fn pipeline(seed: u64) -> VictimPipeline<f64> {
        let vocab: Vec<String> = ["node:", "e0", "e1", "city", "river", "linked", "what", "is", "?"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let tokenizer = Tokenizer::new(vocab);
        let cfg = TransformerConfig {
            vocab_size: tokenizer.vocab_size(),
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 12,
            max_seq: 48,
            tie_output: false,
        };
        let vocab_size = tokenizer.vocab_size();
        VictimPipeline {
            lm: ToyCausalLM::new_random(cfg, seed).unwrap(),
            encoder: TextEncoder::random(vocab_size, 4, seed + 1),
            module: GraphPromptModule::random(
                GraphPromptConfig {
                    d_in: 4,
                    d_llm: 8,
                    activation: Activation::Tanh,
                },
                seed + 2,
            ),
            tokenizer,
            retrieval_hops: 1,
            retrieval_budget: 8,
            max_answer_tokens: 3,
        }
    }

    fn graph() -> KnowledgeGraph {
        KnowledgeGraph::from_records(
            [
                NodeRecord::clean("e0", "e0 city"),
                NodeRecord::clean("e1", "e1 river"),
            ],
            [EdgeRecord::new("e0", "linked", "e1")],
        )
        .unwrap()
    }

    #[test]
    fn language_model_round_trips_exactly() {
        let lm = ToyCausalLM::<f64>::new_random(
            TransformerConfig {
                vocab_size: 9,
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                d_ff: 12,
                max_seq: 16,
                tie_output: true,
            },
            7,
        )
        .unwrap();
        let cp = lm_to_checkpoint(&lm).unwrap();
        cp.verify().unwrap();
        let restored: ToyCausalLM<f64> = lm_from_checkpoint(&cp).unwrap();
        assert_eq!(lm.param_checksum(), restored.param_checksum());
        assert_eq!(lm.cfg.tie_output, restored.cfg.tie_output);
    }

    #[test]
    fn pipeline_round_trips_through_a_file_and_answers_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("victim.ckpt.json");
        let p = pipeline(11);
        save_pipeline(&p, &path).unwrap();
        let q: VictimPipeline<f64> = load_pipeline(&path).unwrap();
        assert_eq!(p.lm.param_checksum(), q.lm.param_checksum());
        assert_eq!(p.tokenizer.words(), q.tokenizer.words());
        assert_eq!(p.encoder.table().data(), q.encoder.table().data());
        let g = graph();
        let a = p
            .answer_query(&g, &crate::kg::QueryInstance {
                id: "q".into(),
                query: "what is e0 ?".into(),
                target_entity: "e0".into(),
                gold_answer: "e0 city".into(),
                is_trigger: false,
            }, crate::gnn::PromptCondition::CleanGraph, None, None)
            .unwrap();
        let b = q
            .answer_query(&g, &crate::kg::QueryInstance {
                id: "q".into(),
                query: "what is e0 ?".into(),
                target_entity: "e0".into(),
                gold_answer: "e0 city".into(),
                is_trigger: false,
            }, crate::gnn::PromptCondition::CleanGraph, None, None)
            .unwrap();
        assert_eq!(a.answer.text, b.answer.text);
    }

    #[test]
    fn saving_twice_produces_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.json");
        let p2 = dir.path().join("b.json");
        let p = pipeline(13);
        save_pipeline(&p, &p1).unwrap();
        save_pipeline(&p, &p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn tampered_values_fail_the_integrity_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("victim.json");
        save_pipeline(&pipeline(17), &path).unwrap();
        let mut doc: serde_json::Value =
            serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        let v = doc["tensors"]["encoder.table"]["data"][0].as_f64().unwrap();
        doc["tensors"]["encoder.table"]["data"][0] = json!(v + 1.0);
        std::fs::write(&path, serde_json::to_vec(&doc).unwrap()).unwrap();
        let err = load_pipeline::<f64>(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn unsupported_versions_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("victim.json");
        save_pipeline(&pipeline(19), &path).unwrap();
        let mut doc: serde_json::Value =
            serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        doc["version"] = json!(999);
        std::fs::write(&path, serde_json::to_vec(&doc).unwrap()).unwrap();
        let err = load_pipeline::<f64>(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn missing_and_misshapen_tensors_are_reported() {
        let p = pipeline(23);
        let mut cp = pipeline_to_checkpoint(&p).unwrap();
        cp.tensors.remove("lm.tok_emb").unwrap();
        // Re-seal so only the missing tensor (not the checksum) trips.
        let resealed = Checkpoint::new(cp.kind.clone(), cp.attrs.clone(), cp.tensors.clone()).unwrap();
        let err = pipeline_from_checkpoint::<f64>(&resealed).unwrap_err();
        assert!(err.to_string().contains("lm.tok_emb"), "{err}");

        let mut cp2 = pipeline_to_checkpoint(&p).unwrap();
        let blob = cp2.tensors.get_mut("module.w1").unwrap();
        blob.shape = vec![1, 1];
        blob.data = vec![0.0];
        let resealed =
            Checkpoint::new(cp2.kind.clone(), cp2.attrs.clone(), cp2.tensors.clone()).unwrap();
        let err = pipeline_from_checkpoint::<f64>(&resealed).unwrap_err();
        assert!(err.to_string().contains("module.w1"), "{err}");
    }

    #[test]
    fn mismatched_kind_is_rejected() {
        let p = pipeline(29);
        let cp = module_to_checkpoint(&p.module).unwrap();
        assert!(lm_from_checkpoint::<f64>(&cp).is_err());
        let cp = lm_to_checkpoint(&p.lm).unwrap();
        assert!(module_from_checkpoint::<f64>(&cp).is_err());
    }
}

