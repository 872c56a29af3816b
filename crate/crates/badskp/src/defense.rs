//! Defenses for the retrieval pipeline: an attribute perplexity filter
//! that prunes suspicious non-center nodes before fusion, and a
//! hidden-state anchoring monitor that refuses answers whose final state
//! has drifted away from the question tokens.

use crate::anchoring::per_token_similarity;
use crate::error::{Error, Result};
use crate::gnn::PromptCondition;
use crate::kg::{apply_poison_plan, KnowledgeGraph, NodeId, PoisonPlan, QueryInstance,
    RetrievedSubgraph};
use crate::lm::{Tokenizer, ToyCausalLM};
use crate::pipeline::{FusedInput, Goal, Role, VictimPipeline, REFUSAL_TEXT};
use crate::scalar::{to_f64, Scalar};
use crate::stats::quantile;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Which defenses are active during an evaluation. `None` fields disable
/// the corresponding defense.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct DefenseConfig {
    /// Non-center nodes whose attribute perplexity exceeds this are
    /// dropped from the retrieved subgraph before fusion.
    pub perplexity_threshold: Option<f64>,
    /// Queries whose anchor score falls below this are refused.
    pub anchor_threshold: Option<f64>,
}

impl DefenseConfig {
    pub fn none() -> Self {
        DefenseConfig::default()
    }

    pub fn label(&self) -> &'static str {
        match (self.perplexity_threshold, self.anchor_threshold) {
            (None, None) => "none",
            (Some(_), None) => "ppl_filter",
            (None, Some(_)) => "anchor_monitor",
            (Some(_), Some(_)) => "combined",
        }
    }
}

/// Perplexity of one attribute under the filtering language model.
/// Attributes shorter than two tokens cannot be scored and return `None`.
pub fn attribute_perplexity<T: Scalar>(
    lm: &ToyCausalLM<T>,
    tokenizer: &Tokenizer,
    attribute: &str,
) -> Option<f64> {
    lm.perplexity_text(tokenizer, attribute).ok().map(to_f64)
}

/// Threshold calibration: the given upper quantile of clean attribute
/// perplexities. Unscorable attributes are skipped.
pub fn calibrate_perplexity_threshold<T: Scalar>(
    lm: &ToyCausalLM<T>,
    tokenizer: &Tokenizer,
    clean_attributes: &[String],
    upper_quantile: f64,
) -> Result<f64> {
    let ppls: Vec<f64> = clean_attributes
        .iter()
        .filter_map(|a| attribute_perplexity(lm, tokenizer, a))
        .collect();
    if ppls.is_empty() {
        return Err(Error::EmptyInput("perplexity calibration set"));
    }
    quantile(&ppls, upper_quantile)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FilterReport {
    pub threshold: f64,
    pub dropped: Vec<NodeId>,
    pub perplexities: BTreeMap<NodeId, f64>,
}

/// Drops every non-center node whose attribute perplexity exceeds the
/// threshold, closing edges over the removed nodes. The retrieval center
/// is always kept, as are nodes too short to score.
pub fn perplexity_filter<T: Scalar>(
    lm: &ToyCausalLM<T>,
    tokenizer: &Tokenizer,
    sub: &RetrievedSubgraph,
    threshold: f64,
) -> Result<(RetrievedSubgraph, FilterReport)> {
    let mut dropped = Vec::new();
    let mut perplexities = BTreeMap::new();
    for node in sub.nodes() {
        if let Some(ppl) = attribute_perplexity(lm, tokenizer, &node.attribute) {
            perplexities.insert(node.id.clone(), ppl);
            if node.id != sub.center && ppl > threshold {
                dropped.push(node.id.clone());
            }
        }
    }
    let filtered = sub.without_nodes(&dropped.iter().cloned().collect());
    Ok((
        filtered,
        FilterReport {
            threshold,
            dropped,
            perplexities,
        },
    ))
}

/// Anchor score of a fused input: the best cosine between the final
/// hidden state and any hidden state at a question-token position. Clean
/// answers stay anchored to the question; hijacked ones drift away.
pub fn anchor_score<T: Scalar>(bundle_fused: (&crate::lm::HiddenStateBundle<T>, &FusedInput<T>)) -> Result<f64> {
    let (bundle, fused) = bundle_fused;
    if bundle.len() != fused.len() {
        return Err(Error::ShapeMismatch {
            context: "anchor score",
            expected: fused.len().to_string(),
            got: bundle.len().to_string(),
        });
    }
    let sims = per_token_similarity(bundle)?;
    let query_positions = fused.positions_with_role(Role::Query);
    if query_positions.is_empty() {
        return Err(Error::DegenerateTest("anchor score needs question tokens"));
    }
    Ok(query_positions
        .into_iter()
        .map(|p| sims[p])
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Anchor scores for a batch of clean-text queries under one prompt
/// condition, in query order.
pub fn anchor_scores_for_queries<T: Scalar>(
    pipeline: &VictimPipeline<T>,
    graph: &KnowledgeGraph,
    queries: &[QueryInstance],
    condition: PromptCondition,
    plan: Option<&PoisonPlan>,
) -> Result<Vec<f64>> {
    queries
        .par_iter()
        .map(|q| {
            let sub = pipeline.retrieve(graph, &q.target_entity)?;
            let sub = match plan {
                Some(p) if sub.contains(&p.trigger) => apply_poison_plan(&sub, p)?,
                _ => sub,
            };
            let fused = pipeline.fuse_query(&sub, condition, &q.query, None)?;
            let bundle = pipeline.hidden_states(&fused)?;
            anchor_score((&bundle, &fused))
        })
        .collect()
}

/// Threshold calibration: a lower quantile of clean validation anchor
/// scores, so roughly that fraction of clean traffic is falsely refused.
pub fn calibrate_anchor_threshold(clean_scores: &[f64], lower_quantile: f64) -> Result<f64> {
    if clean_scores.is_empty() {
        return Err(Error::EmptyInput("anchor calibration set"));
    }
    quantile(clean_scores, lower_quantile)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DefendedOutcome {
    pub answer_text: String,
    /// True when the anchoring monitor refused the query.
    pub flagged: bool,
    /// Higher means more suspicious (negated anchor score); absent when
    /// the monitor is off.
    pub suspicion: Option<f64>,
    pub dropped_nodes: Vec<NodeId>,
}

/// Answers one query with the configured defenses in the loop: retrieval,
/// optional poisoning, optional perplexity filtering, fusion, optional
/// anchor monitoring (a flagged query is refused), then generation.
pub fn answer_with_defense<T: Scalar>(
    pipeline: &VictimPipeline<T>,
    graph: &KnowledgeGraph,
    query: &QueryInstance,
    condition: PromptCondition,
    plan: Option<&PoisonPlan>,
    defense: &DefenseConfig,
) -> Result<DefendedOutcome> {
    let sub = pipeline.retrieve(graph, &query.target_entity)?;
    let sub = match plan {
        Some(p) if sub.contains(&p.trigger) => apply_poison_plan(&sub, p)?,
        _ => sub,
    };
    let (sub, dropped_nodes) = match defense.perplexity_threshold {
        Some(thr) => {
            let (filtered, report) =
                perplexity_filter(&pipeline.lm, &pipeline.tokenizer, &sub, thr)?;
            (filtered, report.dropped)
        }
        None => (sub, Vec::new()),
    };
    let fused = pipeline.fuse_query(&sub, condition, &query.query, None)?;
    let mut suspicion = None;
    if let Some(thr) = defense.anchor_threshold {
        let bundle = pipeline.hidden_states(&fused)?;
        let score = anchor_score((&bundle, &fused))?;
        suspicion = Some(-score);
        if score < thr {
            return Ok(DefendedOutcome {
                answer_text: REFUSAL_TEXT.to_string(),
                flagged: true,
                suspicion,
                dropped_nodes,
            });
        }
    }
    let answer = pipeline.generate(&fused)?;
    Ok(DefendedOutcome {
        answer_text: answer.text,
        flagged: false,
        suspicion,
        dropped_nodes,
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DefendedMetrics {
    pub accuracy: f64,
    pub attack_success_rate: f64,
    pub flagged_rate: f64,
    pub count: usize,
}

/// Accuracy and attack success under defenses. A monitor refusal counts
/// against both metrics: the victim does not answer (no accuracy credit)
/// and the detection defeats the attacker's goal (no attack credit).
pub fn evaluate_with_defense<T: Scalar>(
    pipeline: &VictimPipeline<T>,
    graph: &KnowledgeGraph,
    queries: &[QueryInstance],
    condition: PromptCondition,
    goal: Goal,
    plan: Option<&PoisonPlan>,
    defense: &DefenseConfig,
) -> Result<DefendedMetrics> {
    if queries.is_empty() {
        return Err(Error::EmptyInput("defended evaluation set"));
    }
    let outcomes: Result<Vec<(bool, bool, bool)>> = queries
        .par_iter()
        .map(|q| {
            let out = answer_with_defense(pipeline, graph, q, condition, plan, defense)?;
            if out.flagged {
                return Ok((false, false, true));
            }
            let correct = crate::pipeline::answer_is_correct(&out.answer_text, &q.gold_answer);
            let success = goal.attack_succeeded(&out.answer_text, &q.gold_answer);
            Ok((correct, success, false))
        })
        .collect();
    let outcomes = outcomes?;
    let n = outcomes.len() as f64;
    Ok(DefendedMetrics {
        accuracy: outcomes.iter().filter(|(c, _, _)| *c).count() as f64 / n,
        attack_success_rate: outcomes.iter().filter(|(_, s, _)| *s).count() as f64 / n,
        flagged_rate: outcomes.iter().filter(|(_, _, f)| *f).count() as f64 / n,
        count: outcomes.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::{Activation, GraphPromptConfig, GraphPromptModule};
    use crate::kg::{EdgeRecord, NodeRecord};
    use crate::linalg::Mat;
    use crate::lm::{HiddenStateBundle, TextEncoder, TransformerConfig};
    use crate::pipeline::fuse;

    fn fixture(seed: u64) -> (KnowledgeGraph, VictimPipeline<f64>) {
        let nodes = [
            ("e0", "e0 city"),
            ("e1", "e1 river"),
            ("e2", "e2 tool"),
        ]
        .map(|(id, attr)| NodeRecord::clean(id, attr));
        let edges = [
            EdgeRecord::new("e0", "feeds", "e1"),
            EdgeRecord::new("e1", "feeds", "e2"),
        ];
        let graph = KnowledgeGraph::from_records(nodes, edges).unwrap();
        let vocab: Vec<String> = [
            "node:", "e0", "e1", "e2", "city", "river", "tool", "feeds", "what", "is", "?",
            "sorry", ",", "i", "cannot", "answer", "it", ".", "related_to", "junk", "words",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let tokenizer = Tokenizer::new(vocab);
        let cfg = TransformerConfig {
            vocab_size: tokenizer.vocab_size(),
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq: 96,
            tie_output: false,
        };
        let lm = ToyCausalLM::new_random(cfg, seed).unwrap();
        let encoder = TextEncoder::random(tokenizer.vocab_size(), 4, seed + 1);
        let module = GraphPromptModule::random(
            GraphPromptConfig {
                d_in: 4,
                d_llm: 8,
                activation: Activation::Tanh,
            },
            seed + 2,
        );
        let pipeline = VictimPipeline {
            lm,
            tokenizer,
            encoder,
            module,
            retrieval_hops: 1,
            retrieval_budget: 12,
            max_answer_tokens: 4,
        };
        (graph, pipeline)
    }

    fn queries() -> Vec<QueryInstance> {
        vec![
            QueryInstance {
                id: "q0".into(),
                query: "what is e1 ?".into(),
                target_entity: "e1".into(),
                gold_answer: "e1 river".into(),
                is_trigger: true,
            },
            QueryInstance {
                id: "q1".into(),
                query: "what is e0 ?".into(),
                target_entity: "e0".into(),
                gold_answer: "e0 city".into(),
                is_trigger: false,
            },
        ]
    }

    #[test]
    fn filter_drops_only_high_perplexity_non_center_nodes() {
        let (graph, pipeline) = fixture(5);
        let sub = pipeline.retrieve(&graph, "e1").unwrap();
        // Thresholds straddling the measured perplexities pick out the
        // intended victims without touching the center.
        let ppls: Vec<(NodeId, f64)> = sub
            .nodes()
            .map(|n| {
                (
                    n.id.clone(),
                    attribute_perplexity(&pipeline.lm, &pipeline.tokenizer, &n.attribute).unwrap(),
                )
            })
            .collect();
        let max_non_center = ppls
            .iter()
            .filter(|(id, _)| id != "e1")
            .map(|(_, p)| *p)
            .fold(f64::NEG_INFINITY, f64::max);
        // Threshold above everything: nothing dropped.
        let (kept, report) =
            perplexity_filter(&pipeline.lm, &pipeline.tokenizer, &sub, max_non_center + 1.0)
                .unwrap();
        assert_eq!(kept.node_count(), sub.node_count());
        assert!(report.dropped.is_empty());
        // Threshold below every non-center node: all of them dropped,
        // center kept, edges closed over the removals.
        let min_non_center = ppls
            .iter()
            .filter(|(id, _)| id != "e1")
            .map(|(_, p)| *p)
            .fold(f64::INFINITY, f64::min);
        let (kept, report) =
            perplexity_filter(&pipeline.lm, &pipeline.tokenizer, &sub, min_non_center - 1e-9)
                .unwrap();
        assert!(kept.contains("e1"));
        assert_eq!(kept.node_count(), 1);
        assert_eq!(report.dropped.len(), sub.node_count() - 1);
        assert_eq!(kept.edges().count(), 0);
    }

    #[test]
    fn center_survives_even_when_most_suspicious() {
        let (graph, pipeline) = fixture(7);
        let sub = pipeline.retrieve(&graph, "e1").unwrap();
        let (kept, _) =
            perplexity_filter(&pipeline.lm, &pipeline.tokenizer, &sub, f64::NEG_INFINITY).unwrap();
        assert!(kept.contains("e1"));
        assert_eq!(kept.node_count(), 1);
    }

    #[test]
    fn calibration_matches_the_quantile_of_clean_perplexities() {
        let (_, pipeline) = fixture(9);
        let attrs: Vec<String> = vec![
            "e0 city".into(),
            "e1 river".into(),
            "e2 tool".into(),
            "junk words".into(),
        ];
        let thr =
            calibrate_perplexity_threshold(&pipeline.lm, &pipeline.tokenizer, &attrs, 0.99)
                .unwrap();
        let ppls: Vec<f64> = attrs
            .iter()
            .map(|a| attribute_perplexity(&pipeline.lm, &pipeline.tokenizer, a).unwrap())
            .collect();
        assert_eq!(thr, quantile(&ppls, 0.99).unwrap());
        let max = ppls.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(thr <= max);
    }

    #[test]
    fn anchor_score_is_the_best_question_position_similarity() {
        // Hand-built states: final state aligned with the second question
        // token, orthogonal to the first.
        let states = Mat::from_rows(&[
            vec![0.0, 1.0], // graph
            vec![1.0, 0.0], // query, cos = 0.6 with final
            vec![0.0, 1.0], // query, cos = 0.8 with final
            vec![0.6, 0.8], // final
        ]);
        let bundle = HiddenStateBundle { states };
        let fused = FusedInput {
            rows: Mat::zeros(4, 2),
            roles: vec![Role::Graph, Role::Query, Role::Query, Role::Query],
            token_ids: vec![0, 0, 0, 0],
            prompt: None,
            attr_token_spans: BTreeMap::new(),
        };
        let score = anchor_score((&bundle, &fused)).unwrap();
        assert!((score - 1.0).abs() < 1e-12, "max includes the final row itself");
        // Restrict the question role to the first two rows only.
        let fused = FusedInput {
            roles: vec![Role::Graph, Role::Query, Role::Query, Role::Graph],
            ..fused
        };
        let score = anchor_score((&bundle, &fused)).unwrap();
        assert!((score - 0.8).abs() < 1e-12, "got {score}");
    }

    #[test]
    fn anchor_score_requires_question_tokens() {
        let bundle = HiddenStateBundle {
            states: Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]),
        };
        let fused = FusedInput {
            rows: Mat::zeros(2, 2),
            roles: vec![Role::Graph, Role::Graph],
            token_ids: vec![0, 0],
            prompt: None,
            attr_token_spans: BTreeMap::new(),
        };
        assert!(anchor_score((&bundle, &fused)).is_err());
    }

    #[test]
    fn batch_scores_follow_query_order_and_calibration_uses_quantiles() {
        let (graph, pipeline) = fixture(11);
        let qs = queries();
        let scores = anchor_scores_for_queries(
            &pipeline,
            &graph,
            &qs,
            PromptCondition::CleanGraph,
            None,
        )
        .unwrap();
        assert_eq!(scores.len(), 2);
        // Recompute the first one by hand.
        let sub = pipeline.retrieve(&graph, "e1").unwrap();
        let fused = pipeline
            .fuse_query(&sub, PromptCondition::CleanGraph, "what is e1 ?", None)
            .unwrap();
        let bundle = pipeline.hidden_states(&fused).unwrap();
        assert_eq!(scores[0], anchor_score((&bundle, &fused)).unwrap());
        let thr = calibrate_anchor_threshold(&scores, 0.0).unwrap();
        assert_eq!(thr, scores.iter().cloned().fold(f64::INFINITY, f64::min));
        assert!(calibrate_anchor_threshold(&[], 0.05).is_err());
    }

    #[test]
    fn monitor_refusals_count_against_both_metrics() {
        let (graph, pipeline) = fixture(13);
        let qs = queries();
        // A threshold above every achievable score flags everything.
        let all = DefenseConfig {
            perplexity_threshold: None,
            anchor_threshold: Some(1.1),
        };
        let m = evaluate_with_defense(
            &pipeline,
            &graph,
            &qs,
            PromptCondition::CleanGraph,
            Goal::DenialOfService,
            None,
            &all,
        )
        .unwrap();
        assert_eq!(m.flagged_rate, 1.0);
        assert_eq!(m.accuracy, 0.0);
        assert_eq!(m.attack_success_rate, 0.0);
        // A threshold below every score flags nothing and reproduces the
        // undefended metrics.
        let none = DefenseConfig {
            perplexity_threshold: None,
            anchor_threshold: Some(-1.1),
        };
        let defended = evaluate_with_defense(
            &pipeline,
            &graph,
            &qs,
            PromptCondition::CleanGraph,
            Goal::DenialOfService,
            None,
            &none,
        )
        .unwrap();
        assert_eq!(defended.flagged_rate, 0.0);
        let undefended = crate::pipeline::evaluate(
            &pipeline,
            &graph,
            &qs,
            PromptCondition::CleanGraph,
            None,
            None,
            Goal::DenialOfService,
        )
        .unwrap();
        assert_eq!(defended.accuracy, undefended.accuracy);
        assert_eq!(defended.attack_success_rate, undefended.attack_success_rate);
    }

    #[test]
    fn flagged_outcome_reports_suspicion_and_refusal_text() {
        let (graph, pipeline) = fixture(15);
        let q = &queries()[0];
        let out = answer_with_defense(
            &pipeline,
            &graph,
            q,
            PromptCondition::CleanGraph,
            None,
            &DefenseConfig {
                perplexity_threshold: None,
                anchor_threshold: Some(1.1),
            },
        )
        .unwrap();
        assert!(out.flagged);
        assert_eq!(out.answer_text, REFUSAL_TEXT);
        let s = out.suspicion.unwrap();
        assert!((-s).abs() <= 1.0 + 1e-9, "anchor score {} outside the cosine range", -s);
        let labels = [
            DefenseConfig::none().label(),
            DefenseConfig {
                perplexity_threshold: Some(1.0),
                anchor_threshold: None,
            }
            .label(),
            DefenseConfig {
                perplexity_threshold: None,
                anchor_threshold: Some(0.0),
            }
            .label(),
        ];
        assert_eq!(labels, ["none", "ppl_filter", "anchor_monitor"]);
    }

    #[test]
    fn defended_pipeline_still_reads_filtered_graphs() {
        // After filtering, fusion and generation run on the pruned
        // subgraph without errors and the fused text omits dropped nodes.
        let (graph, pipeline) = fixture(21);
        let sub = pipeline.retrieve(&graph, "e1").unwrap();
        let (filtered, report) =
            perplexity_filter(&pipeline.lm, &pipeline.tokenizer, &sub, f64::NEG_INFINITY).unwrap();
        assert!(!report.dropped.is_empty());
        let fused = fuse(
            &pipeline.lm,
            &pipeline.tokenizer,
            None,
            &filtered,
            "what is e1 ?",
            None,
        )
        .unwrap();
        let full = fuse(
            &pipeline.lm,
            &pipeline.tokenizer,
            None,
            &sub,
            "what is e1 ?",
            None,
        )
        .unwrap();
        assert!(fused.len() < full.len());
        let answer = pipeline.generate(&fused).unwrap();
        assert!(answer.token_ids.len() <= pipeline.max_answer_tokens);
    }
}
