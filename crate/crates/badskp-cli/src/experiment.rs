//! Experiment orchestration: victim caching, attack-plan construction,
//! evaluation rows, the factorial prompt analysis, sweeps, and the
//! persistence experiment. Every stage is deterministic in
//! (config bytes, seed).

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use badskp::attack::{
    baseline_acpi, baseline_gcg, build_target, default_command, run_badskp_frozen,
    trojan_finetune, AttackConfig, GcgConfig, NodeStageReport, TrojanConfig, TrojanReport,
};
use badskp::checkpoint::{load_pipeline, save_pipeline};
use badskp::defense::{
    anchor_scores_for_queries, calibrate_anchor_threshold, calibrate_perplexity_threshold,
    evaluate_with_defense, DefenseConfig,
};
use badskp::anchoring::{compare_margins, factorial_experiment, FactorialCell, FactorialConfig};
use badskp::kg::{compose_poisoned_attribute, KnowledgeGraph, PoisonPlan, QueryInstance};
use badskp::gnn::PromptCondition;
use badskp::pipeline::{evaluate, finetune_soft_module, Goal, SoftTuneConfig, VictimPipeline};
use badskp::stats::roc_auc;

use crate::config::{Config, ConfigError};
use crate::results::{append_results, ExperimentResult};
use crate::trainer::{module_tuning_examples, train_victim, victim_fingerprint};
use crate::world::{generate_world, World};

pub type Pipeline = VictimPipeline<f64>;

/// Everything a verb needs: resolved config, world, and a trained victim.
pub struct Lab {
    pub cfg: Config,
    pub cfg_hash: String,
    /// Run seed: the `--seed` override, or the world seed.
    pub seed: u64,
    pub out: PathBuf,
    pub world: World,
    pub graph: KnowledgeGraph,
    pub pipeline: Pipeline,
}

#[derive(Serialize, Deserialize)]
struct VictimMeta {
    fingerprint: String,
    world_checksum: String,
    lm_final_loss: f64,
    module_final_loss: f64,
}

impl Lab {
    pub fn prepare(cfg: Config, seed: Option<u64>, out: &Path) -> anyhow::Result<Lab> {
        std::fs::create_dir_all(out)
            .with_context(|| format!("creating output directory {}", out.display()))?;
        let cfg_hash = cfg.hash();
        let seed = seed.unwrap_or(cfg.world.seed);
        let world = generate_world(&cfg).map_err(|e| anyhow!(e.to_string()))?;
        let graph = world.graph();
        let pipeline = ensure_victim(&cfg, &world, out)?;
        Ok(Lab {
            cfg,
            cfg_hash,
            seed,
            out: out.to_path_buf(),
            world,
            graph,
            pipeline,
        })
    }

    pub fn run_id(&self, label: &str) -> String {
        format!("{}-s{}-{label}", &self.cfg_hash[..12], self.seed)
    }

    pub fn results_path(&self) -> PathBuf {
        self.out.join("results.jsonl")
    }

    fn row(&self, label: &str, metric: &str, value: f64) -> ExperimentResult {
        let attack = self.cfg.attack.kind.clone();
        ExperimentResult {
            run_id: self.run_id(label),
            setting: if attack == "none" {
                "frozen".into()
            } else {
                self.cfg.attack.setting.clone()
            },
            attack,
            goal: self.cfg.attack.goal.clone(),
            defense: self.cfg.defense.mode.clone(),
            metric: metric.into(),
            value,
            seed: self.seed,
            config_hash: self.cfg_hash.clone(),
        }
    }

    pub fn goal(&self) -> Goal {
        Goal::parse(&self.cfg.attack.goal).expect("goal validated at config load")
    }

    pub fn command(&self) -> String {
        if self.cfg.attack.command.is_empty() {
            default_command(self.goal()).to_string()
        } else {
            self.cfg.attack.command.clone()
        }
    }

    /// The attacker's auxiliary pairs: a per-seed sample from the held
    /// trigger-query pool.
    pub fn aux_queries(&self) -> Vec<QueryInstance> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(0xA0B1));
        let mut picked: Vec<usize> = self
            .world
            .splits
            .aux_pool
            .choose_multiple(&mut rng, self.cfg.attack.aux_sample)
            .copied()
            .collect();
        picked.sort_unstable();
        self.world.query_set(&picked)
    }

    pub fn attack_config(&self) -> AttackConfig {
        let a = &self.cfg.attack;
        AttackConfig {
            goal: self.goal(),
            command: self.command(),
            target_exemplars: a.target_exemplars,
            node_opt_iters: a.node_opt_iters,
            node_opt_lr: a.node_opt_lr,
            max_suffix_len: a.max_suffix_len,
            search_top_k: a.search_top_k,
            max_injected_nodes: a.max_injected_nodes,
            seed: self.seed,
        }
    }

    pub fn trojan_config(&self) -> TrojanConfig {
        let a = &self.cfg.attack;
        TrojanConfig {
            alpha: a.trojan_alpha,
            beta: a.trojan_beta,
            gamma: a.trojan_gamma,
            epochs: a.trojan_epochs,
            learning_rate: a.trojan_learning_rate,
            hvp_epsilon: a.hvp_epsilon,
        }
    }

    pub fn clean_test_queries(&self) -> Vec<QueryInstance> {
        let take = self.cfg.eval.max_clean_queries.min(self.world.splits.clean_test.len());
        self.world.query_set(&self.world.splits.clean_test[..take])
    }

    pub fn triggered_test_queries(&self) -> Vec<QueryInstance> {
        let take = self
            .cfg
            .eval
            .max_triggered_queries
            .min(self.world.splits.triggered_test.len());
        self.world.query_set(&self.world.splits.triggered_test[..take])
    }

    pub fn clean_val_queries(&self) -> Vec<QueryInstance> {
        self.world.query_set(&self.world.splits.clean_val)
    }
}

fn ensure_victim(cfg: &Config, world: &World, out: &Path) -> anyhow::Result<Pipeline> {
    let fingerprint = victim_fingerprint(cfg);
    let ckpt_path = out.join("victim.ckpt.json");
    let meta_path = out.join("victim.meta.json");
    if ckpt_path.exists() {
        let meta: VictimMeta = serde_json::from_str(
            &std::fs::read_to_string(&meta_path)
                .with_context(|| format!("victim checkpoint without {}", meta_path.display()))?,
        )?;
        if meta.fingerprint != fingerprint || meta.world_checksum != world.checksum() {
            bail!(
                "{} was trained under a different world/model config; use a fresh --out",
                ckpt_path.display()
            );
        }
        return load_pipeline(&ckpt_path).map_err(|e| anyhow!("loading victim: {e}"));
    }
    eprintln!("training victim (no checkpoint in {})", out.display());
    let outcome = train_victim(cfg, world)?;
    save_pipeline(&outcome.pipeline, &ckpt_path).map_err(|e| anyhow!("saving victim: {e}"))?;
    let meta = VictimMeta {
        fingerprint,
        world_checksum: world.checksum(),
        lm_final_loss: outcome.lm_report.final_loss,
        module_final_loss: outcome.module_report.final_loss,
    };
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)?;
    eprintln!(
        "victim trained: lm loss {:.4} -> {:.4}, module loss {:.4} -> {:.4}",
        outcome.lm_report.initial_loss,
        outcome.lm_report.final_loss,
        outcome.module_report.initial_loss,
        outcome.module_report.final_loss
    );
    Ok(outcome.pipeline)
}

// ---------------------------------------------------------------------------
// Attack construction
// ---------------------------------------------------------------------------

/// Serializable per-node attack diagnostics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageSummary {
    pub node: String,
    pub init_objective: f64,
    pub best_objective: f64,
    pub search_objective: f64,
    pub search_evaluations: usize,
    pub search_backtracks: usize,
    pub suffix: Vec<String>,
}

impl From<&NodeStageReport> for StageSummary {
    fn from(r: &NodeStageReport) -> Self {
        StageSummary {
            node: r.node.clone(),
            init_objective: r.opt.init_objective,
            best_objective: r.opt.best_objective,
            search_objective: r.search.objective,
            search_evaluations: r.search.evaluations,
            search_backtracks: r.search.backtracks,
            suffix: r.suffix.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
pub struct AttackDiagnostics {
    pub stages: Vec<StageSummary>,
    pub gcg_losses: Vec<f64>,
    pub trojan_total: Vec<f64>,
    pub trojan_backdoor: Vec<f64>,
    pub trojan_clean: Vec<f64>,
    pub trojan_alignment: Vec<f64>,
}

pub struct BuiltAttack {
    /// None when attack.kind = none.
    pub plan: Option<PoisonPlan>,
    /// The serving pipeline: the trained victim, or its trojaned copy.
    pub pipeline: Pipeline,
    pub diagnostics: AttackDiagnostics,
}

/// Builds the configured attack against the lab's victim. `max_injected`
/// and `max_suffix` override the config when set (used by the sweeps).
pub fn build_attack(
    lab: &Lab,
    max_injected: Option<usize>,
    max_suffix: Option<usize>,
) -> anyhow::Result<BuiltAttack> {
    let mut cfg = lab.attack_config();
    if let Some(k) = max_injected {
        cfg.max_injected_nodes = k;
    }
    if let Some(m) = max_suffix {
        cfg.max_suffix_len = m;
    }
    let aux = lab.aux_queries();
    let mut diagnostics = AttackDiagnostics::default();

    let kind = lab.cfg.attack.kind.as_str();
    let trojaned = lab.cfg.attack.setting == "trojaned";
    if trojaned && kind != "badskp" {
        bail!("the trojaned setting requires attack.kind = badskp");
    }

    let plan = match kind {
        "none" => None,
        "acpi" => Some(baseline_acpi(&lab.world.trigger, &cfg.command)?),
        "gcg" => {
            let target = build_target(&lab.pipeline, &lab.graph, &aux, &cfg)?;
            let (plan, losses) = baseline_gcg(
                &lab.pipeline,
                &lab.graph,
                &lab.world.trigger,
                &aux,
                &cfg.command,
                &target,
                &GcgConfig {
                    suffix_len: cfg.max_suffix_len,
                    iterations: lab.cfg.attack.gcg_iterations,
                    top_candidates: lab.cfg.attack.gcg_top_candidates,
                    swap_batch: lab.cfg.attack.gcg_swap_batch,
                    seed: lab.seed,
                },
            )?;
            diagnostics.gcg_losses = losses;
            Some(plan)
        }
        "badskp" => {
            let (plan, stages) =
                run_badskp_frozen(&lab.pipeline, &lab.graph, &lab.world.trigger, &aux, &cfg)?;
            diagnostics.stages = stages.iter().map(StageSummary::from).collect();
            Some(plan)
        }
        other => bail!("attack kind `{other}` cannot be built"),
    };

    let mut pipeline = lab.pipeline.clone();
    if trojaned {
        let plan = plan.as_ref().expect("badskp builds a plan");
        let target = build_target(&lab.pipeline, &lab.graph, &aux, &cfg)?;
        let clean_examples = module_tuning_examples(&lab.cfg, &lab.world, &lab.graph)?;
        let trace: TrojanReport = trojan_finetune(
            &mut pipeline,
            &lab.graph,
            plan,
            &aux,
            &target,
            &clean_examples,
            &lab.trojan_config(),
        )?;
        diagnostics.trojan_total = trace.total;
        diagnostics.trojan_backdoor = trace.backdoor;
        diagnostics.trojan_clean = trace.clean;
        diagnostics.trojan_alignment = trace.alignment;
    }

    Ok(BuiltAttack {
        plan,
        pipeline,
        diagnostics,
    })
}

fn plan_path(lab: &Lab) -> PathBuf {
    lab.out.join(format!(
        "plan_{}_{}_s{}.json",
        lab.cfg.attack.kind, lab.cfg.attack.goal, lab.seed
    ))
}

/// Saves the attack artifacts; reuses them on a later invocation with the
/// same attack configuration.
pub fn ensure_attack(lab: &Lab) -> anyhow::Result<BuiltAttack> {
    if lab.cfg.attack.kind == "none" {
        return Ok(BuiltAttack {
            plan: None,
            pipeline: lab.pipeline.clone(),
            diagnostics: AttackDiagnostics::default(),
        });
    }
    let plan_file = plan_path(lab);
    let meta_file = plan_file.with_extension("meta.json");
    let diag_file = lab.out.join(format!(
        "attack_report_{}_{}_s{}.json",
        lab.cfg.attack.kind, lab.cfg.attack.goal, lab.seed
    ));
    let trojan_file = lab.out.join(format!(
        "victim_trojaned_{}_s{}.ckpt.json",
        lab.cfg.attack.goal, lab.seed
    ));
    let attack_hash = {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&lab.cfg.attack)?);
        h.finalize().iter().map(|b| format!("{b:02x}")).collect::<String>()
    };
    let trojaned = lab.cfg.attack.setting == "trojaned";
    if plan_file.exists() && meta_file.exists() {
        let recorded: String = serde_json::from_str(&std::fs::read_to_string(&meta_file)?)?;
        if recorded == attack_hash && (!trojaned || trojan_file.exists()) {
            let plan = PoisonPlan::load(&plan_file).map_err(|e| anyhow!("loading plan: {e}"))?;
            let pipeline = if trojaned {
                load_pipeline(&trojan_file).map_err(|e| anyhow!("loading trojaned victim: {e}"))?
            } else {
                lab.pipeline.clone()
            };
            let diagnostics = if diag_file.exists() {
                serde_json::from_str(&std::fs::read_to_string(&diag_file)?)?
            } else {
                AttackDiagnostics::default()
            };
            return Ok(BuiltAttack {
                plan: Some(plan),
                pipeline,
                diagnostics,
            });
        }
        bail!(
            "{} was built under a different attack config; use a fresh --out",
            plan_file.display()
        );
    }
    let built = build_attack(lab, None, None)?;
    if let Some(plan) = &built.plan {
        plan.save(&plan_file).map_err(|e| anyhow!("saving plan: {e}"))?;
        std::fs::write(&meta_file, serde_json::to_string(&attack_hash)?)?;
        std::fs::write(&diag_file, serde_json::to_string_pretty(&built.diagnostics)?)?;
        if trojaned {
            save_pipeline(&built.pipeline, &trojan_file)
                .map_err(|e| anyhow!("saving trojaned victim: {e}"))?;
        }
    }
    Ok(built)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Defense thresholds calibrated on clean data, per the configured mode.
pub fn calibrated_defense(lab: &Lab, pipeline: &Pipeline) -> anyhow::Result<DefenseConfig> {
    let mode = lab.cfg.defense.mode.as_str();
    let mut defense = DefenseConfig::none();
    if mode == "ppl_filter" || mode == "combined" {
        let attrs: Vec<String> = lab.world.nodes.iter().map(|n| n.attribute.clone()).collect();
        let thr = calibrate_perplexity_threshold(
            &pipeline.lm,
            &pipeline.tokenizer,
            &attrs,
            lab.cfg.defense.ppl_quantile,
        )?;
        defense.perplexity_threshold = Some(thr);
    }
    if mode == "anchor_monitor" || mode == "combined" {
        let scores = anchor_scores_for_queries(
            pipeline,
            &lab.graph,
            &lab.clean_val_queries(),
            PromptCondition::CleanGraph,
            None,
        )?;
        let thr = calibrate_anchor_threshold(&scores, lab.cfg.defense.anchor_quantile)?;
        defense.anchor_threshold = Some(thr);
    }
    Ok(defense)
}

/// Accuracy on the clean split and attack success on the triggered split,
/// optionally under the configured defense. Returns result rows labeled
/// `label`.
/// Mean perplexity of the composed poisoned attributes (base, command, and
/// optimized suffix) under the serving language model. High values make the
/// plan easy prey for the perplexity filter.
pub fn mean_poisoned_attribute_perplexity(
    pipeline: &Pipeline,
    graph: &KnowledgeGraph,
    plan: &PoisonPlan,
) -> anyhow::Result<f64> {
    let trigger_base = graph
        .node(&plan.trigger)
        .ok_or_else(|| anyhow!("trigger `{}` not in graph", plan.trigger))?
        .attribute
        .clone();
    let mut texts = Vec::new();
    if !plan.command.is_empty() || !plan.trigger_suffix.is_empty() {
        let (attr, _) = compose_poisoned_attribute(
            &trigger_base,
            &plan.command,
            &plan.trigger_suffix,
            plan.max_suffix_len,
        )
        .map_err(|e| anyhow!("composing trigger attribute: {e}"))?;
        texts.push(attr);
    }
    for node in &plan.injected {
        let (attr, _) = compose_poisoned_attribute(
            &node.base_attribute,
            &plan.command,
            &node.suffix,
            plan.max_suffix_len,
        )
        .map_err(|e| anyhow!("composing injected attribute: {e}"))?;
        texts.push(attr);
    }
    if texts.is_empty() {
        bail!("plan poisons no attributes");
    }
    let mut total = 0.0;
    for t in &texts {
        total += pipeline
            .lm
            .perplexity_text(&pipeline.tokenizer, t)
            .map_err(|e| anyhow!("scoring `{t}`: {e}"))?;
    }
    Ok(total / texts.len() as f64)
}

pub fn evaluation_rows(
    lab: &Lab,
    pipeline: &Pipeline,
    plan: Option<&PoisonPlan>,
    label: &str,
) -> anyhow::Result<Vec<ExperimentResult>> {
    let goal = lab.goal();
    let clean = lab.clean_test_queries();
    let triggered = lab.triggered_test_queries();
    let serving = if plan.is_some() {
        PromptCondition::PoisonedGraph
    } else {
        PromptCondition::CleanGraph
    };
    let mut rows = Vec::new();
    if lab.cfg.defense.mode == "none" {
        let m = evaluate(
            pipeline,
            &lab.graph,
            &clean,
            PromptCondition::CleanGraph,
            None,
            plan,
            goal,
        )?;
        rows.push(lab.row(label, "acc", m.accuracy));
        if plan.is_some() {
            let t = evaluate(pipeline, &lab.graph, &triggered, serving, None, plan, goal)?;
            rows.push(lab.row(label, "asr", t.attack_success_rate));
        }
    } else {
        let defense = calibrated_defense(lab, pipeline)?;
        let m = evaluate_with_defense(
            pipeline,
            &lab.graph,
            &clean,
            PromptCondition::CleanGraph,
            goal,
            plan,
            &defense,
        )?;
        rows.push(lab.row(label, "acc", m.accuracy));
        rows.push(lab.row(label, "flagged_clean", m.flagged_rate));
        if plan.is_some() {
            let t = evaluate_with_defense(
                pipeline,
                &lab.graph,
                &triggered,
                serving,
                goal,
                plan,
                &defense,
            )?;
            rows.push(lab.row(label, "asr", t.attack_success_rate));
            rows.push(lab.row(label, "flagged_triggered", t.flagged_rate));
        }
    }
    if let Some(plan) = plan {
        let ppl = mean_poisoned_attribute_perplexity(pipeline, &lab.graph, plan)?;
        rows.push(lab.row(label, "suffix_ppl", ppl));
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Verbs
// ---------------------------------------------------------------------------

pub fn cmd_world(cfg: Config, out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    let world = generate_world(&cfg).map_err(|e| anyhow!(e.to_string()))?;
    let path = out.join("world.json");
    world.save(&path)?;
    println!(
        "world: {} entities, {} queries, {} corpus episodes, checksum {}",
        cfg.world.entities,
        world.queries.len(),
        world.corpus_texts.len(),
        world.checksum()
    );
    println!("saved {}", path.display());
    Ok(())
}

pub fn cmd_train(cfg: Config, seed: Option<u64>, out: &Path) -> anyhow::Result<()> {
    let lab = Lab::prepare(cfg, seed, out)?;
    // Quick construction check on the calibration split.
    let m = evaluate(
        &lab.pipeline,
        &lab.graph,
        &lab.clean_val_queries(),
        PromptCondition::CleanGraph,
        None,
        None,
        lab.goal(),
    )?;
    println!(
        "victim ready in {}: clean accuracy {:.3} on {} calibration queries",
        out.display(),
        m.accuracy,
        m.count
    );
    Ok(())
}

pub fn cmd_attack(cfg: Config, seed: Option<u64>, out: &Path) -> anyhow::Result<()> {
    if cfg.attack.kind == "none" {
        return Err(
            ConfigError("attack.kind = none builds no plan; set acpi, gcg, or badskp".into())
                .into(),
        );
    }
    let lab = Lab::prepare(cfg, seed, out)?;
    let built = ensure_attack(&lab)?;
    let plan = built.plan.as_ref().expect("non-none attack builds a plan");
    println!(
        "plan {}: trigger `{}`, {} injected nodes, suffix length {}",
        plan.plan_id,
        plan.trigger,
        plan.injected.len(),
        plan.trigger_suffix.len()
    );
    for stage in &built.diagnostics.stages {
        println!(
            "  node {}: objective {:.4} -> {:.4}, suffix match {:.4} [{}]",
            stage.node,
            stage.init_objective,
            stage.best_objective,
            stage.search_objective,
            stage.suffix.join(" ")
        );
    }
    println!("saved {}", plan_path(&lab).display());
    Ok(())
}

pub fn cmd_eval(cfg: Config, seed: Option<u64>, out: &Path) -> anyhow::Result<()> {
    let lab = Lab::prepare(cfg, seed, out)?;
    let built = ensure_attack(&lab)?;
    let rows = evaluation_rows(&lab, &built.pipeline, built.plan.as_ref(), "eval")?;
    append_results(&lab.results_path(), &rows)?;
    for row in &rows {
        println!("{} {} = {:.4}", row.run_id, row.metric, row.value);
    }
    Ok(())
}

/// Serializable factorial-analysis artifact consumed by `report`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnchoringArtifact {
    pub command: String,
    pub cells: Vec<AnchoringCell>,
    /// Per-position cosine similarity strips for one triggered query:
    /// (condition label, role labels, similarities).
    pub strips: Vec<(String, Vec<String>, Vec<f64>)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnchoringCell {
    pub text_injected: bool,
    pub condition: String,
    pub refusal_rate: f64,
    pub accuracy: f64,
    pub margins: Vec<f64>,
    pub count: usize,
}

impl From<&FactorialCell> for AnchoringCell {
    fn from(c: &FactorialCell) -> Self {
        AnchoringCell {
            text_injected: c.text_injected,
            condition: c.condition_label.clone(),
            refusal_rate: c.refusal_rate,
            accuracy: c.accuracy,
            margins: c.margins.clone(),
            count: c.count,
        }
    }
}

pub fn cmd_analyze_anchoring(cfg: Config, seed: Option<u64>, out: &Path) -> anyhow::Result<()> {
    let lab = Lab::prepare(cfg, seed, out)?;
    let queries = lab.triggered_test_queries();
    let command = lab.command();
    let fcfg = FactorialConfig {
        command: command.clone(),
        top_k: lab.cfg.eval.anchor_top_k,
        conditions: vec![
            PromptCondition::None,
            PromptCondition::Zero,
            PromptCondition::Random { seed: lab.seed },
            PromptCondition::CleanGraph,
        ],
    };
    let cells = factorial_experiment(&lab.pipeline, &lab.graph, &queries, &fcfg, None)?;

    let mut rows = Vec::new();
    for cell in &cells {
        let text = if cell.text_injected { "injected" } else { "clean" };
        let base = format!("{text}_{}", cell.condition_label);
        rows.push(lab.row("anchor", &format!("{base}_refusal_rate"), cell.refusal_rate));
        rows.push(lab.row("anchor", &format!("{base}_accuracy"), cell.accuracy));
        if !cell.margins.is_empty() {
            let mean = badskp::stats::mean(&cell.margins)?;
            rows.push(lab.row("anchor", &format!("{base}_margin_mean"), mean));
        }
    }
    let pick = |cond: &str| -> anyhow::Result<&FactorialCell> {
        cells
            .iter()
            .find(|c| c.text_injected && c.condition_label == cond)
            .ok_or_else(|| anyhow!("missing factorial cell {cond}"))
    };
    let test = compare_margins(pick("clean_graph")?, pick("zero")?)?;
    rows.push(lab.row("anchor", "margin_t_stat", test.t_statistic));
    rows.push(lab.row("anchor", "margin_p_value", test.p_value));
    rows.push(lab.row("anchor", "margin_mean_difference", test.mean_difference));
    append_results(&lab.results_path(), &rows)?;

    // Per-position similarity strips for the first triggered query.
    let mut strips = Vec::new();
    if let Some(q) = queries.first() {
        let sub = lab.pipeline.retrieve(&lab.graph, &q.target_entity)?;
        let (text, offset) =
            badskp::pipeline::inject_command_into_query(&q.query, &command);
        for cond in [PromptCondition::Zero, PromptCondition::CleanGraph] {
            let fused = lab.pipeline.fuse_query(&sub, cond, &text, offset)?;
            let bundle = lab.pipeline.hidden_states(&fused)?;
            let sims = badskp::anchoring::per_token_similarity(&bundle)?;
            let roles: Vec<String> = fused.roles.iter().map(|r| format!("{r:?}")).collect();
            strips.push((cond.label().to_string(), roles, sims));
        }
    }
    let artifact = AnchoringArtifact {
        command,
        cells: cells.iter().map(AnchoringCell::from).collect(),
        strips,
    };
    let path = lab.out.join("anchoring.json");
    std::fs::write(&path, serde_json::to_string_pretty(&artifact)?)?;

    for row in &rows {
        println!("{} = {:.4}", row.metric, row.value);
    }
    println!("saved {}", path.display());
    Ok(())
}

/// One structured decision per defended query, written alongside results.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DefenseDecision {
    pub query_id: String,
    /// `clean` or `poisoned` serving arm.
    pub arm: String,
    pub defense: String,
    pub flagged: bool,
    pub suspicion: Option<f64>,
    pub dropped_nodes: Vec<String>,
    pub answer: String,
}

pub fn cmd_defend(cfg: Config, seed: Option<u64>, out: &Path) -> anyhow::Result<()> {
    if cfg.defense.mode == "none" {
        return Err(ConfigError(
            "defense.mode = none defends nothing; set ppl_filter, anchor_monitor, or combined"
                .into(),
        )
        .into());
    }
    let lab = Lab::prepare(cfg, seed, out)?;
    let built = ensure_attack(&lab)?;
    let pipeline = &built.pipeline;
    let defense = calibrated_defense(&lab, pipeline)?;
    let rows = evaluation_rows(&lab, pipeline, built.plan.as_ref(), "defend")?;

    // Detector quality: suspicion should separate poisoned from clean
    // serving of the same triggered queries.
    let triggered = lab.triggered_test_queries();
    let clean_scores = anchor_scores_for_queries(
        pipeline,
        &lab.graph,
        &triggered,
        PromptCondition::CleanGraph,
        None,
    )?;
    let mut rows = rows;
    let mut decisions = Vec::new();
    if let Some(plan) = built.plan.as_ref() {
        let poisoned_scores = anchor_scores_for_queries(
            pipeline,
            &lab.graph,
            &triggered,
            PromptCondition::PoisonedGraph,
            Some(plan),
        )?;
        let suspicious: Vec<f64> = poisoned_scores.iter().map(|s| -s).collect();
        let benign: Vec<f64> = clean_scores.iter().map(|s| -s).collect();
        let auc = roc_auc(&suspicious, &benign)?;
        rows.push(lab.row("defend", "anchor_auc", auc));

        for (arm, plan_opt) in [("clean", None), ("poisoned", Some(plan))] {
            for q in &triggered {
                let cond = if plan_opt.is_some() {
                    PromptCondition::PoisonedGraph
                } else {
                    PromptCondition::CleanGraph
                };
                let outcome = badskp::defense::answer_with_defense(
                    pipeline, &lab.graph, q, cond, plan_opt, &defense,
                )?;
                decisions.push(DefenseDecision {
                    query_id: q.id.clone(),
                    arm: arm.into(),
                    defense: lab.cfg.defense.mode.clone(),
                    flagged: outcome.flagged,
                    suspicion: outcome.suspicion,
                    dropped_nodes: outcome.dropped_nodes,
                    answer: outcome.answer_text,
                });
            }
        }
    }
    append_results(&lab.results_path(), &rows)?;
    let decisions_path = lab.out.join("defend_decisions.jsonl");
    let mut text = String::new();
    for d in &decisions {
        text.push_str(&serde_json::to_string(d)?);
        text.push('\n');
    }
    std::fs::write(&decisions_path, text)?;
    for row in &rows {
        println!("{} {} = {:.4}", row.run_id, row.metric, row.value);
    }
    println!("decisions: {}", decisions_path.display());
    Ok(())
}

/// Rebuilds the plan truncated to its first `k` injected nodes. The
/// sequential construction optimizes each node against the previously
/// committed ones only, so the truncation equals the plan a from-scratch
/// run with budget `k` would produce.
pub fn truncate_plan(plan: &PoisonPlan, k: usize) -> anyhow::Result<PoisonPlan> {
    let keep = k.min(plan.injected.len());
    PoisonPlan::new(
        plan.trigger.clone(),
        plan.command.clone(),
        plan.trigger_suffix.clone(),
        plan.injected[..keep].to_vec(),
        k,
        plan.max_suffix_len,
    )
    .map_err(|e| anyhow!("truncating plan: {e}"))
}

pub fn cmd_sweep_k(
    cfg: Config,
    seed: Option<u64>,
    out: &Path,
    values: &[usize],
) -> anyhow::Result<()> {
    validate_sweep_values(values)?;
    if cfg.attack.kind != "badskp" {
        return Err(ConfigError(
            "sweep-k varies injected nodes; it requires attack.kind = badskp".into(),
        )
        .into());
    }
    let lab = Lab::prepare(cfg, seed, out)?;
    let top = *values.last().expect("validated non-empty");
    let built = build_attack(&lab, Some(top), None)?;
    let plan = built.plan.as_ref().expect("badskp builds a plan");
    let mut rows = Vec::new();
    let mut curve = Vec::new();
    for &k in values {
        let truncated = truncate_plan(plan, k)?;
        let label = format!("sweepk-k{k}");
        let arm_rows = evaluation_rows(&lab, &built.pipeline, Some(&truncated), &label)?;
        for row in &arm_rows {
            if row.metric == "asr" {
                curve.push((k as f64, row.value));
            }
        }
        rows.extend(arm_rows);
    }
    append_results(&lab.results_path(), &rows)?;
    let plot = crate::report::line_plot(
        "attack success rate vs injected nodes",
        "injected nodes",
        "asr",
        &[("asr", curve.as_slice())],
    );
    let plot_dir = lab.out.join("plots");
    std::fs::create_dir_all(&plot_dir)?;
    let path = plot_dir.join("sweep_k.svg");
    std::fs::write(&path, plot)?;
    for row in &rows {
        println!("{} {} = {:.4}", row.run_id, row.metric, row.value);
    }
    println!("plot: {}", path.display());
    Ok(())
}

pub fn cmd_sweep_m(
    cfg: Config,
    seed: Option<u64>,
    out: &Path,
    values: &[usize],
) -> anyhow::Result<()> {
    validate_sweep_values(values)?;
    if cfg.attack.kind != "badskp" {
        return Err(ConfigError(
            "sweep-m varies suffix length; it requires attack.kind = badskp".into(),
        )
        .into());
    }
    let lab = Lab::prepare(cfg, seed, out)?;
    let mut rows = Vec::new();
    let mut curve = Vec::new();
    for &m in values {
        let built = build_attack(&lab, None, Some(m))?;
        let plan = built.plan.as_ref().expect("badskp builds a plan");
        let label = format!("sweepm-m{m}");
        let arm_rows = evaluation_rows(&lab, &built.pipeline, Some(plan), &label)?;
        for row in &arm_rows {
            if row.metric == "asr" {
                curve.push((m as f64, row.value));
            }
        }
        rows.extend(arm_rows);
    }
    append_results(&lab.results_path(), &rows)?;
    let plot = crate::report::line_plot(
        "attack success rate vs suffix length",
        "suffix length",
        "asr",
        &[("asr", curve.as_slice())],
    );
    let plot_dir = lab.out.join("plots");
    std::fs::create_dir_all(&plot_dir)?;
    let path = plot_dir.join("sweep_m.svg");
    std::fs::write(&path, plot)?;
    for row in &rows {
        println!("{} {} = {:.4}", row.run_id, row.metric, row.value);
    }
    println!("plot: {}", path.display());
    Ok(())
}

fn validate_sweep_values(values: &[usize]) -> anyhow::Result<()> {
    if values.is_empty() {
        return Err(ConfigError("sweep needs at least one value".into()).into());
    }
    if values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ConfigError("sweep values must be strictly increasing".into()).into());
    }
    Ok(())
}

/// The persistence experiment's four arms: {configured γ, γ = 0} ×
/// {before, after} clean fine-tuning of the released module on held-out
/// clean data.
pub fn cmd_persistence(cfg: Config, seed: Option<u64>, out: &Path) -> anyhow::Result<()> {
    if cfg.attack.setting != "trojaned" || cfg.attack.kind != "badskp" {
        return Err(ConfigError(
            "the persistence experiment requires attack.kind = badskp and attack.setting = trojaned"
                .into(),
        )
        .into());
    }
    let lab = Lab::prepare(cfg, seed, out)?;
    let acfg = lab.attack_config();
    let aux = lab.aux_queries();
    let (plan, _stages) =
        run_badskp_frozen(&lab.pipeline, &lab.graph, &lab.world.trigger, &aux, &acfg)?;
    let target = build_target(&lab.pipeline, &lab.graph, &aux, &acfg)?;
    let clean_examples = module_tuning_examples(&lab.cfg, &lab.world, &lab.graph)?;

    // Held-out clean data for the downstream user's fine-tuning.
    let finetune_examples: Vec<badskp::pipeline::SoftTuneExample> = lab
        .clean_val_queries()
        .iter()
        .map(|q| {
            let sub = lab.pipeline.retrieve(&lab.graph, &q.target_entity)?;
            Ok(badskp::pipeline::SoftTuneExample {
                sub,
                query_text: q.query.clone(),
                answer_text: q.gold_answer.clone(),
            })
        })
        .collect::<badskp::Result<_>>()?;

    let mut rows = Vec::new();
    for gamma in [lab.cfg.attack.trojan_gamma, 0.0] {
        let mut tcfg = lab.trojan_config();
        tcfg.gamma = gamma;
        let mut tampered = lab.pipeline.clone();
        trojan_finetune(
            &mut tampered,
            &lab.graph,
            &plan,
            &aux,
            &target,
            &clean_examples,
            &tcfg,
        )?;
        let before = format!("persist-g{gamma}-before");
        rows.extend(evaluation_rows(&lab, &tampered, Some(&plan), &before)?);

        let mut tuned = tampered.clone();
        finetune_soft_module(
            &mut tuned,
            &finetune_examples,
            &SoftTuneConfig {
                epochs: lab.cfg.attack.persistence_finetune_epochs,
                learning_rate: lab.cfg.pipeline.module_learning_rate,
                batch_size: lab.cfg.pipeline.module_batch_size,
                seed: lab.seed,
            },
        )?;
        let after = format!("persist-g{gamma}-after");
        rows.extend(evaluation_rows(&lab, &tuned, Some(&plan), &after)?);
    }
    append_results(&lab.results_path(), &rows)?;
    for row in &rows {
        println!("{} {} = {:.4}", row.run_id, row.metric, row.value);
    }
    Ok(())
}

pub fn cmd_report(out: &Path) -> anyhow::Result<()> {
    crate::report::render_report(out)
}
