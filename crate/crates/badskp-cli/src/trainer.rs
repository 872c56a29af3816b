//! Victim construction: trains the base language model on the world
//! corpus, then tunes the graph-prompt module on clean and
//! command-injected question-answer pairs so an informative prompt
//! overrides instruction phrases.

use anyhow::{anyhow, Context};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use badskp::gnn::{Activation, GraphPromptConfig, GraphPromptModule};
use badskp::kg::{retrieve_subgraph, KnowledgeGraph};
use badskp::lm::{train_toy_lm, TextEncoder, Tokenizer, TrainConfig, TrainReport, TransformerConfig, EOS};
use badskp::pipeline::{finetune_soft_module, SoftTuneConfig, SoftTuneExample, SoftTuneReport, VictimPipeline};

use crate::config::Config;
use crate::world::World;

pub type Pipeline = VictimPipeline<f64>;

pub struct TrainOutcome {
    pub pipeline: Pipeline,
    pub lm_report: TrainReport,
    pub module_report: SoftTuneReport,
}

/// Fingerprint of the config sections that determine the trained victim.
/// Attack, defense, and eval settings do not retrain the victim.
pub fn victim_fingerprint(cfg: &Config) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(&cfg.world).expect("section serializes"));
    hasher.update(serde_json::to_vec(&cfg.models).expect("section serializes"));
    hasher.update(serde_json::to_vec(&cfg.pipeline).expect("section serializes"));
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Clean and command-injected module-tuning examples from the corpus
/// split. Also used as the held-out clean batch in the persistence
/// experiment's fine-tuning stage (with a different slice).
pub fn module_tuning_examples(
    cfg: &Config,
    world: &World,
    graph: &KnowledgeGraph,
) -> anyhow::Result<Vec<SoftTuneExample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.world.seed.wrapping_add(0x0DD5));
    let mut examples = Vec::new();
    let per_entity = cfg.pipeline.module_examples_per_entity;
    let injected = cfg.pipeline.module_injected_per_entity;
    for i in 0..cfg.world.entities {
        if i == cfg.world.trigger_entity {
            continue;
        }
        let entity = format!("ent{i:02}");
        let mut pool: Vec<usize> = world
            .splits
            .corpus
            .iter()
            .copied()
            .filter(|&qi| world.queries[qi].target_entity == entity)
            .collect();
        pool.shuffle(&mut rng);
        if pool.len() < per_entity + injected {
            return Err(anyhow!(
                "entity {entity} has {} corpus queries, needs {}",
                pool.len(),
                per_entity + injected
            ));
        }
        let sub = retrieve_subgraph(
            graph,
            &entity,
            cfg.pipeline.retrieval_hops,
            cfg.pipeline.retrieval_budget,
        )?;
        for (slot, &qi) in pool[..per_entity + injected].iter().enumerate() {
            let q = &world.queries[qi];
            let query_text = if slot < per_entity {
                q.query.clone()
            } else {
                let command = &world.commands[slot % world.commands.len()];
                format!("{} {command}", q.query)
            };
            examples.push(SoftTuneExample {
                sub: sub.clone(),
                query_text,
                answer_text: q.gold_answer.clone(),
            });
        }
    }
    Ok(examples)
}

pub fn train_victim(cfg: &Config, world: &World) -> anyhow::Result<TrainOutcome> {
    let graph = world.graph();
    let tokenizer = Tokenizer::new(world.vocab.iter().cloned());

    let corpus: Vec<Vec<badskp::lm::TokenId>> = world
        .corpus_texts
        .iter()
        .map(|text| {
            let mut ids = tokenizer.tokenize(text);
            ids.push(EOS);
            ids
        })
        .collect();
    for (i, ids) in corpus.iter().enumerate() {
        if ids.len() + 1 > cfg.models.max_seq {
            return Err(anyhow!(
                "corpus episode {i} holds {} tokens, over the {}-token window",
                ids.len(),
                cfg.models.max_seq
            ));
        }
    }

    let tcfg = TransformerConfig {
        vocab_size: tokenizer.vocab_size(),
        d_model: cfg.models.d_model,
        n_layers: cfg.models.n_layers,
        n_heads: cfg.models.n_heads,
        d_ff: cfg.models.d_ff,
        max_seq: cfg.models.max_seq,
        tie_output: cfg.models.tie_output,
    };
    let (lm, lm_report) = train_toy_lm::<f64>(
        &tcfg,
        &corpus,
        &TrainConfig {
            epochs: cfg.pipeline.lm_epochs,
            lr: cfg.pipeline.lm_learning_rate,
            batch_size: cfg.pipeline.lm_batch_size,
            seed: cfg.world.seed,
            offset_augment: false,
        },
    )
    .context("base language-model training")?;

    let encoder = TextEncoder::<f64>::random(
        tokenizer.vocab_size(),
        cfg.models.encoder_dim,
        cfg.world.seed.wrapping_add(0xE11C),
    );
    let module = GraphPromptModule::<f64>::random(
        GraphPromptConfig {
            d_in: cfg.models.encoder_dim,
            d_llm: cfg.models.d_model,
            activation: Activation::Tanh,
        },
        cfg.world.seed.wrapping_add(0x6E11),
    );

    let mut pipeline = VictimPipeline {
        lm,
        tokenizer,
        encoder,
        module,
        retrieval_hops: cfg.pipeline.retrieval_hops,
        retrieval_budget: cfg.pipeline.retrieval_budget,
        max_answer_tokens: cfg.pipeline.max_answer_tokens,
    };
    pipeline.validate()?;

    let examples = module_tuning_examples(cfg, world, &graph)?;
    let module_report = finetune_soft_module(
        &mut pipeline,
        &examples,
        &SoftTuneConfig {
            epochs: cfg.pipeline.module_epochs,
            learning_rate: cfg.pipeline.module_learning_rate,
            batch_size: cfg.pipeline.module_batch_size,
            seed: cfg.world.seed,
        },
    )
    .context("graph-prompt module tuning")?;

    Ok(TrainOutcome {
        pipeline,
        lm_report,
        module_report,
    })
}
