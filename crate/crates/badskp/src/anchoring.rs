//! Anchoring analysis: measures whether the model's final hidden state
//! stays aligned with query tokens or drifts toward injected command
//! tokens, and runs the two-way factorial (text {clean, command-injected}
//! by prompt condition) that quantifies how an informative soft prompt
//! re-anchors the model.

use crate::error::{Error, Result};
use crate::gnn::PromptCondition;
use crate::kg::{KnowledgeGraph, PoisonPlan, QueryInstance};
use crate::linalg::cosine;
use crate::lm::HiddenStateBundle;
use crate::pipeline::{answer_is_correct, FusedInput, Goal, Role, VictimPipeline};
use crate::scalar::{to_f64, Scalar};
use crate::stats::{paired_t_test, PairedTTest};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Cosine similarity between the final position's hidden state and every
/// position's hidden state, in position order.
pub fn per_token_similarity<T: Scalar>(bundle: &HiddenStateBundle<T>) -> Result<Vec<f64>> {
    if bundle.is_empty() {
        return Err(Error::EmptyInput("hidden states"));
    }
    let last = bundle.h_last();
    (0..bundle.len())
        .map(|i| {
            cosine(last, bundle.states.row(i))
                .map(to_f64)
                .ok_or(Error::ZeroVector("hidden state in similarity"))
        })
        .collect()
}

/// Mean of the `top_k` largest values (all of them when fewer than k).
fn top_k_mean(mut vals: Vec<f64>, top_k: usize) -> f64 {
    vals.sort_by(|a, b| b.partial_cmp(a).expect("non-finite similarity"));
    let take = top_k.min(vals.len()).max(1);
    vals[..take].iter().sum::<f64>() / take as f64
}

/// Anchoring margin: top-k mean similarity over query-role positions minus
/// the same over command-role positions. Positive means the final state is
/// anchored on the question rather than the injected command. Errors when
/// either role is absent from the input.
pub fn anchoring_margin<T: Scalar>(
    bundle: &HiddenStateBundle<T>,
    fused: &FusedInput<T>,
    top_k: usize,
) -> Result<f64> {
    if top_k == 0 {
        return Err(Error::InvalidConfig("anchoring top_k must be positive".into()));
    }
    if bundle.len() != fused.len() {
        return Err(Error::ShapeMismatch {
            context: "anchoring states vs fused input",
            expected: fused.len().to_string(),
            got: bundle.len().to_string(),
        });
    }
    let sims = per_token_similarity(bundle)?;
    let query_pos = fused.positions_with_role(Role::Query);
    let command_pos = fused.positions_with_role(Role::Command);
    if query_pos.is_empty() {
        return Err(Error::DegenerateTest("no query-role positions for anchoring"));
    }
    if command_pos.is_empty() {
        return Err(Error::DegenerateTest("no command-role positions for anchoring"));
    }
    let s_q = top_k_mean(query_pos.iter().map(|&i| sims[i]).collect(), top_k);
    let s_c = top_k_mean(command_pos.iter().map(|&i| sims[i]).collect(), top_k);
    Ok(s_q - s_c)
}

/// One cell of the factorial: a text arm crossed with a prompt condition,
/// with per-query margins kept in query order so cells can be paired.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FactorialCell {
    pub text_injected: bool,
    pub condition_label: String,
    pub refusal_rate: f64,
    pub accuracy: f64,
    /// Anchoring margins per query (empty for clean-text arms, which have
    /// no command positions to compare against).
    pub margins: Vec<f64>,
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct FactorialConfig {
    pub command: String,
    pub top_k: usize,
    pub conditions: Vec<PromptCondition>,
}

/// Runs every (text arm × prompt condition) cell over the query set.
/// The poisoned-graph condition applies `plan` to each retrieved subgraph;
/// all other conditions serve the clean graph.
pub fn factorial_experiment<T: Scalar>(
    pipeline: &VictimPipeline<T>,
    graph: &KnowledgeGraph,
    queries: &[QueryInstance],
    cfg: &FactorialConfig,
    plan_for_poisoned: Option<&PoisonPlan>,
) -> Result<Vec<FactorialCell>> {
    if queries.is_empty() {
        return Err(Error::EmptyInput("factorial query set"));
    }
    if cfg.command.trim().is_empty() {
        return Err(Error::EmptyInput("factorial command text"));
    }
    let mut cells = Vec::new();
    for &text_injected in &[false, true] {
        for condition in &cfg.conditions {
            let plan = match condition {
                PromptCondition::PoisonedGraph => {
                    Some(plan_for_poisoned.ok_or_else(|| {
                        Error::InvalidConfig(
                            "poisoned-graph condition requires a poison plan".into(),
                        )
                    })?)
                }
                _ => None,
            };
            let inject = text_injected.then_some(cfg.command.as_str());
            let rows: Result<Vec<(bool, bool, Option<f64>)>> = queries
                .par_iter()
                .map(|q| {
                    let out = pipeline.answer_query(graph, q, *condition, inject, plan)?;
                    let refused =
                        Goal::DenialOfService.attack_succeeded(&out.answer.text, &q.gold_answer);
                    let correct = answer_is_correct(&out.answer.text, &q.gold_answer);
                    let margin = if text_injected {
                        let bundle = pipeline.hidden_states(&out.fused)?;
                        Some(anchoring_margin(&bundle, &out.fused, cfg.top_k)?)
                    } else {
                        None
                    };
                    Ok((refused, correct, margin))
                })
                .collect();
            let rows = rows?;
            let n = rows.len() as f64;
            cells.push(FactorialCell {
                text_injected,
                condition_label: condition.label().to_string(),
                refusal_rate: rows.iter().filter(|(r, _, _)| *r).count() as f64 / n,
                accuracy: rows.iter().filter(|(_, c, _)| *c).count() as f64 / n,
                margins: rows.iter().filter_map(|(_, _, m)| *m).collect(),
                count: rows.len(),
            });
        }
    }
    Ok(cells)
}

/// Paired comparison of two cells' anchoring margins (same queries, same
/// order). Returns the test for mean(margins_a − margins_b).
pub fn compare_margins(a: &FactorialCell, b: &FactorialCell) -> Result<PairedTTest> {
    if a.margins.len() != b.margins.len() || a.margins.is_empty() {
        return Err(Error::ShapeMismatch {
            context: "paired margin comparison",
            expected: a.margins.len().to_string(),
            got: b.margins.len().to_string(),
        });
    }
    paired_t_test(&a.margins, &b.margins)
}
