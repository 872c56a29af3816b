//! Layered TOML configuration with strict schemas: unknown keys are
//! rejected and every range violation is reported before any compute runs.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// A configuration problem. Reported with exit code 2 by the binary.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn default_world() -> WorldSection {
    WorldSection::default()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSection {
    /// Seed that fully determines the world and the victim training run.
    pub seed: u64,
    pub entities: usize,
    pub relations: usize,
    /// Distinct answer-value words shared across facts.
    pub values: usize,
    /// Distinct type words used in entity self-descriptions.
    pub entity_types: usize,
    pub queries_per_entity: usize,
    /// Index of the entity whose neighborhood the attacker poisons.
    pub trigger_entity: usize,
    /// Attacker-held triggered queries (sampled per run seed).
    pub aux_pool: usize,
    /// Held-out clean queries per non-trigger entity.
    pub clean_test_per_entity: usize,
    /// Clean queries per non-trigger entity reserved for calibration.
    pub clean_val_per_entity: usize,
    /// Question-answer episodes sampled per non-trigger entity for the
    /// base language-model corpus.
    pub corpus_queries_per_entity: usize,
    /// Extra long-context episodes that pad graphs with junk nodes so
    /// late positions are trained.
    pub long_episodes: usize,
}

impl Default for WorldSection {
    fn default() -> Self {
        WorldSection {
            seed: 11,
            entities: 24,
            relations: 3,
            values: 10,
            entity_types: 8,
            queries_per_entity: 80,
            trigger_entity: 0,
            aux_pool: 16,
            clean_test_per_entity: 10,
            clean_val_per_entity: 6,
            corpus_queries_per_entity: 24,
            long_episodes: 200,
        }
    }
}

fn default_models() -> ModelsSection {
    ModelsSection::default()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelsSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    /// Node-feature dimension produced by the text encoder.
    pub encoder_dim: usize,
    /// Tie the readout matrix to the token embedding table.
    pub tie_output: bool,
}

impl Default for ModelsSection {
    fn default() -> Self {
        ModelsSection {
            d_model: 48,
            n_layers: 2,
            n_heads: 4,
            d_ff: 96,
            max_seq: 256,
            encoder_dim: 16,
            tie_output: true,
        }
    }
}

fn default_pipeline() -> PipelineSection {
    PipelineSection::default()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub retrieval_hops: usize,
    pub retrieval_budget: usize,
    pub max_answer_tokens: usize,
    pub lm_epochs: usize,
    pub lm_learning_rate: f64,
    pub lm_batch_size: usize,
    pub module_epochs: usize,
    pub module_learning_rate: f64,
    pub module_batch_size: usize,
    /// Clean tuning examples per non-trigger entity.
    pub module_examples_per_entity: usize,
    /// Command-injected tuning examples (gold targets) per entity.
    pub module_injected_per_entity: usize,
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection {
            retrieval_hops: 1,
            retrieval_budget: 16,
            max_answer_tokens: 8,
            lm_epochs: 40,
            lm_learning_rate: 3e-3,
            lm_batch_size: 16,
            module_epochs: 30,
            module_learning_rate: 0.1,
            module_batch_size: 16,
            module_examples_per_entity: 4,
            module_injected_per_entity: 2,
        }
    }
}

fn default_attack() -> AttackSection {
    AttackSection::default()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    /// One of `none`, `acpi`, `gcg`, `badskp`.
    pub kind: String,
    /// One of `dos`, `ira`.
    pub goal: String,
    /// One of `frozen`, `trojaned`.
    pub setting: String,
    /// Instruction text planted by the attack; empty selects the goal's
    /// default phrase.
    pub command: String,
    pub max_injected_nodes: usize,
    pub max_suffix_len: usize,
    pub node_opt_iters: usize,
    pub node_opt_lr: f64,
    pub search_top_k: usize,
    pub target_exemplars: usize,
    /// Auxiliary pairs drawn from the attacker pool per run seed.
    pub aux_sample: usize,
    pub gcg_iterations: usize,
    pub gcg_swap_batch: usize,
    pub gcg_top_candidates: usize,
    pub trojan_alpha: f64,
    pub trojan_beta: f64,
    pub trojan_gamma: f64,
    pub trojan_epochs: usize,
    pub trojan_learning_rate: f64,
    pub hvp_epsilon: f64,
    /// Clean fine-tuning epochs applied by the downstream user in the
    /// persistence experiment.
    pub persistence_finetune_epochs: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            kind: "badskp".into(),
            goal: "dos".into(),
            setting: "frozen".into(),
            command: String::new(),
            max_injected_nodes: 8,
            max_suffix_len: 6,
            node_opt_iters: 96,
            node_opt_lr: 2.0,
            search_top_k: 8,
            target_exemplars: 8,
            aux_sample: 8,
            gcg_iterations: 12,
            gcg_swap_batch: 16,
            gcg_top_candidates: 8,
            trojan_alpha: 0.4,
            trojan_beta: 0.5,
            trojan_gamma: 0.1,
            trojan_epochs: 12,
            trojan_learning_rate: 0.05,
            hvp_epsilon: 1e-3,
            persistence_finetune_epochs: 8,
        }
    }
}

fn default_defense() -> DefenseSection {
    DefenseSection::default()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseSection {
    /// One of `none`, `ppl_filter`, `anchor_monitor`, `combined`.
    pub mode: String,
    /// Upper quantile of clean attribute perplexities used as the filter
    /// threshold.
    pub ppl_quantile: f64,
    /// Lower quantile of clean anchor scores used as the monitor
    /// threshold.
    pub anchor_quantile: f64,
}

impl Default for DefenseSection {
    fn default() -> Self {
        DefenseSection {
            mode: "none".into(),
            ppl_quantile: 0.95,
            anchor_quantile: 0.05,
        }
    }
}

fn default_eval() -> EvalSection {
    EvalSection::default()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub max_clean_queries: usize,
    pub max_triggered_queries: usize,
    /// Hidden-state positions averaged when computing anchoring margins.
    pub anchor_top_k: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            max_clean_queries: 80,
            max_triggered_queries: 64,
            anchor_top_k: 5,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    #[serde(default = "default_world")]
    pub world: WorldSection,
    #[serde(default = "default_models")]
    pub models: ModelsSection,
    #[serde(default = "default_pipeline")]
    pub pipeline: PipelineSection,
    #[serde(default = "default_attack")]
    pub attack: AttackSection,
    #[serde(default = "default_defense")]
    pub defense: DefenseSection,
    #[serde(default = "default_eval")]
    pub eval: EvalSection,
}

impl Config {
    pub fn from_path(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        Config::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Config, ConfigError> {
        let cfg: Config = toml::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hash over the fully resolved configuration (defaults applied), so
    /// equivalent files agree regardless of formatting.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let w = &self.world;
        if w.entities < 2 {
            return Err(ConfigError("world.entities must be at least 2".into()));
        }
        if w.relations == 0 || w.relations > 10 {
            return Err(ConfigError("world.relations must be in 1..=10".into()));
        }
        if w.values == 0 || w.values > 20 {
            return Err(ConfigError("world.values must be in 1..=20".into()));
        }
        if w.entity_types == 0 || w.entity_types > 10 {
            return Err(ConfigError("world.entity_types must be in 1..=10".into()));
        }
        if w.trigger_entity >= w.entities {
            return Err(ConfigError(format!(
                "world.trigger_entity {} out of range for {} entities",
                w.trigger_entity, w.entities
            )));
        }
        let combos = w.relations * crate::world::template_count();
        if w.queries_per_entity == 0 || w.queries_per_entity > combos {
            return Err(ConfigError(format!(
                "world.queries_per_entity must be in 1..={combos} (relations \u{d7} templates)"
            )));
        }
        if w.aux_pool == 0
            || w.corpus_queries_per_entity + w.aux_pool >= w.queries_per_entity
        {
            return Err(ConfigError(
                "world.aux_pool must be positive and, with the trigger's corpus slice, \
                 leave triggered test queries"
                    .into(),
            ));
        }
        if w.clean_test_per_entity + w.clean_val_per_entity >= w.queries_per_entity {
            return Err(ConfigError(
                "clean test+val slices must leave corpus queries per entity".into(),
            ));
        }
        let corpus_slice =
            w.queries_per_entity - w.clean_test_per_entity - w.clean_val_per_entity;
        if w.corpus_queries_per_entity == 0 || w.corpus_queries_per_entity > corpus_slice {
            return Err(ConfigError(format!(
                "world.corpus_queries_per_entity must be in 1..={corpus_slice}"
            )));
        }

        let m = &self.models;
        if m.d_model == 0 || m.n_heads == 0 || m.d_model % m.n_heads != 0 {
            return Err(ConfigError(
                "models.d_model must be a positive multiple of models.n_heads".into(),
            ));
        }
        if m.n_layers == 0 || m.d_ff == 0 || m.encoder_dim == 0 {
            return Err(ConfigError(
                "models.n_layers, models.d_ff, models.encoder_dim must be positive".into(),
            ));
        }

        let p = &self.pipeline;
        if p.retrieval_budget < 1 + w.relations + self.attack.max_injected_nodes {
            return Err(ConfigError(format!(
                "pipeline.retrieval_budget {} cannot hold an entity, its {} facts, and {} injected nodes",
                p.retrieval_budget, w.relations, self.attack.max_injected_nodes
            )));
        }
        if p.max_answer_tokens == 0 {
            return Err(ConfigError("pipeline.max_answer_tokens must be positive".into()));
        }
        if p.lm_epochs == 0 || p.lm_batch_size == 0 || p.module_batch_size == 0 {
            return Err(ConfigError(
                "pipeline epoch and batch sizes must be positive".into(),
            ));
        }
        if !(p.lm_learning_rate > 0.0) || !(p.module_learning_rate > 0.0) {
            return Err(ConfigError("pipeline learning rates must be positive".into()));
        }

        let a = &self.attack;
        if !["none", "acpi", "gcg", "badskp"].contains(&a.kind.as_str()) {
            return Err(ConfigError(format!(
                "attack.kind `{}` is not one of none|acpi|gcg|badskp",
                a.kind
            )));
        }
        if !["dos", "ira"].contains(&a.goal.as_str()) {
            return Err(ConfigError(format!(
                "attack.goal `{}` is not one of dos|ira",
                a.goal
            )));
        }
        if !["frozen", "trojaned"].contains(&a.setting.as_str()) {
            return Err(ConfigError(format!(
                "attack.setting `{}` is not one of frozen|trojaned",
                a.setting
            )));
        }
        if a.setting == "trojaned" && a.kind != "badskp" {
            return Err(ConfigError(
                "attack.setting = trojaned requires attack.kind = badskp".into(),
            ));
        }
        if a.aux_sample == 0 || a.aux_sample > w.aux_pool {
            return Err(ConfigError(format!(
                "attack.aux_sample must be in 1..={}",
                w.aux_pool
            )));
        }
        if a.kind == "badskp" && (a.node_opt_iters == 0 || !(a.node_opt_lr > 0.0)) {
            return Err(ConfigError(
                "attack.node_opt_iters and attack.node_opt_lr must be positive".into(),
            ));
        }
        if a.kind == "gcg" && (a.gcg_iterations == 0 || a.max_suffix_len == 0) {
            return Err(ConfigError(
                "gcg needs positive attack.gcg_iterations and attack.max_suffix_len".into(),
            ));
        }
        if a.search_top_k == 0 {
            return Err(ConfigError("attack.search_top_k must be positive".into()));
        }
        for (name, v) in [
            ("trojan_alpha", a.trojan_alpha),
            ("trojan_beta", a.trojan_beta),
            ("trojan_gamma", a.trojan_gamma),
        ] {
            if v < 0.0 {
                return Err(ConfigError(format!("attack.{name} must be non-negative")));
            }
        }
        if !(a.hvp_epsilon > 0.0) {
            return Err(ConfigError("attack.hvp_epsilon must be positive".into()));
        }

        let d = &self.defense;
        if !["none", "ppl_filter", "anchor_monitor", "combined"].contains(&d.mode.as_str()) {
            return Err(ConfigError(format!(
                "defense.mode `{}` is not one of none|ppl_filter|anchor_monitor|combined",
                d.mode
            )));
        }
        for (name, q) in [
            ("ppl_quantile", d.ppl_quantile),
            ("anchor_quantile", d.anchor_quantile),
        ] {
            if !(0.0..=1.0).contains(&q) {
                return Err(ConfigError(format!("defense.{name} must be in [0, 1]")));
            }
        }

        let e = &self.eval;
        if e.max_clean_queries == 0 || e.max_triggered_queries == 0 || e.anchor_top_k == 0 {
            return Err(ConfigError("eval limits must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_hash_is_stable() {
        let cfg = Config::from_toml("").unwrap();
        assert_eq!(cfg.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn shipped_default_file_matches_built_in_defaults() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.toml");
        let from_file = Config::from_path(Path::new(path)).unwrap();
        let built_in = Config::from_toml("").unwrap();
        assert_eq!(from_file.hash(), built_in.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = Config::from_toml("[world]\nplanets = 9\n").unwrap_err();
        assert!(err.0.contains("planets"), "{err}");
        let err = Config::from_toml("[cosmos]\n").unwrap_err();
        assert!(err.0.contains("cosmos"), "{err}");
    }

    #[test]
    fn range_violations_are_reported() {
        let err = Config::from_toml("[world]\nentities = 1\n").unwrap_err();
        assert!(err.0.contains("entities"), "{err}");
        let err = Config::from_toml("[attack]\nkind = \"hypnosis\"\n").unwrap_err();
        assert!(err.0.contains("hypnosis"), "{err}");
        let err = Config::from_toml("[defense]\nanchor_quantile = 1.5\n").unwrap_err();
        assert!(err.0.contains("anchor_quantile"), "{err}");
    }

    #[test]
    fn equivalent_files_share_a_hash_and_different_values_do_not() {
        let a = Config::from_toml("").unwrap();
        let b = Config::from_toml("[world]\nseed = 11\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = Config::from_toml("[world]\nseed = 12\n").unwrap();
        assert_ne!(a.hash(), c.hash());
    }
}
