//! Knowledge-graph substrate: attributed directed graphs, hop-bounded
//! retrieval, canonical linearization, and the node-poisoning surface
//! (attribute composition, node injection, poison-plan application).
//!
//! Graphs are value types: every mutation returns a new value, so a
//! retrieved subgraph can be poisoned without touching its parent graph.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

pub type NodeId = String;

/// Relation used for edges that attach injected nodes to their trigger.
pub const RESERVED_POISON_RELATION: &str = "related_to";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: NodeId,
    /// Whitespace-separated token text describing the node.
    pub attribute: String,
    /// True when the node carries attacker-controlled content.
    pub poisoned: bool,
    /// Byte offset into `attribute` where adversarial content begins
    /// (command plus optimized suffix); `None` for fully benign text.
    pub injected_from: Option<usize>,
}

impl NodeRecord {
    pub fn clean(id: impl Into<NodeId>, attribute: impl Into<String>) -> Self {
        NodeRecord {
            id: id.into(),
            attribute: attribute.into(),
            poisoned: false,
            injected_from: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub src: NodeId,
    #[serde(rename = "rel")]
    pub relation: String,
    pub dst: NodeId,
}

impl EdgeRecord {
    pub fn new(
        src: impl Into<NodeId>,
        relation: impl Into<String>,
        dst: impl Into<NodeId>,
    ) -> Self {
        EdgeRecord {
            src: src.into(),
            relation: relation.into(),
            dst: dst.into(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct KnowledgeGraph {
    nodes: BTreeMap<NodeId, NodeRecord>,
    edges: BTreeSet<EdgeRecord>,
    /// Undirected adjacency (kept in sync with `edges`).
    neighbors: BTreeMap<NodeId, BTreeSet<NodeId>>,
}

#[derive(Serialize, Deserialize)]
struct KgFileNode {
    id: String,
    attribute: String,
}

#[derive(Serialize, Deserialize)]
struct KgFile {
    nodes: Vec<KgFileNode>,
    edges: Vec<EdgeRecord>,
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a graph, rejecting duplicate ids, empty attributes, and
    /// dangling edges.
    pub fn from_records(
        nodes: impl IntoIterator<Item = NodeRecord>,
        edges: impl IntoIterator<Item = EdgeRecord>,
    ) -> Result<Self> {
        let mut g = KnowledgeGraph::new();
        for n in nodes {
            g.insert_node(n)?;
        }
        for e in edges {
            g.insert_edge(e)?;
        }
        Ok(g)
    }

    pub fn insert_node(&mut self, node: NodeRecord) -> Result<()> {
        if node.attribute.trim().is_empty() {
            return Err(Error::InvalidGraph(format!(
                "node `{}` has an empty attribute",
                node.id
            )));
        }
        if self.nodes.contains_key(&node.id) {
            return Err(Error::DuplicateNode(node.id));
        }
        self.neighbors.entry(node.id.clone()).or_default();
        self.nodes.insert(node.id.clone(), node);
        Ok(())
    }

    pub fn insert_edge(&mut self, edge: EdgeRecord) -> Result<()> {
        for end in [&edge.src, &edge.dst] {
            if !self.nodes.contains_key(end) {
                return Err(Error::DanglingEdge {
                    src: edge.src.clone(),
                    relation: edge.relation.clone(),
                    dst: edge.dst.clone(),
                    missing: end.clone(),
                });
            }
        }
        self.neighbors
            .get_mut(&edge.src)
            .unwrap()
            .insert(edge.dst.clone());
        self.neighbors
            .get_mut(&edge.dst)
            .unwrap()
            .insert(edge.src.clone());
        self.edges.insert(edge);
        Ok(())
    }

    pub fn node(&self, id: &str) -> Option<&NodeRecord> {
        self.nodes.get(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeRecord> {
        self.nodes.values()
    }

    pub fn edges(&self) -> impl Iterator<Item = &EdgeRecord> {
        self.edges.iter()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn undirected_neighbors(&self, id: &str) -> Option<&BTreeSet<NodeId>> {
        self.neighbors.get(id)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: KgFile = serde_json::from_str(text)?;
        KnowledgeGraph::from_records(
            file.nodes
                .into_iter()
                .map(|n| NodeRecord::clean(n.id, n.attribute)),
            file.edges,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let file = KgFile {
            nodes: self
                .nodes
                .values()
                .map(|n| KgFileNode {
                    id: n.id.clone(),
                    attribute: n.attribute.clone(),
                })
                .collect(),
            edges: self.edges.iter().cloned().collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }
}

/// A natural-language question grounded in the graph.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryInstance {
    pub id: String,
    pub query: String,
    pub target_entity: NodeId,
    pub gold_answer: String,
    pub is_trigger: bool,
}

/// Hop-bounded neighborhood of a query's target entity. Owns copies of its
/// records so poisoning never mutates the parent graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RetrievedSubgraph {
    pub center: NodeId,
    nodes: BTreeMap<NodeId, NodeRecord>,
    edges: BTreeSet<EdgeRecord>,
    /// Content hashes of poison plans already applied (idempotence guard).
    applied_plans: BTreeSet<String>,
}

impl RetrievedSubgraph {
    pub fn node(&self, id: &str) -> Option<&NodeRecord> {
        self.nodes.get(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeRecord> {
        self.nodes.values()
    }

    pub fn edges(&self) -> impl Iterator<Item = &EdgeRecord> {
        self.edges.iter()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &NodeId> {
        self.nodes.keys()
    }

    pub fn applied_plans(&self) -> &BTreeSet<String> {
        &self.applied_plans
    }

    /// Removes the given nodes (center excluded by the caller's contract)
    /// and every edge touching them, returning the reduced subgraph.
    pub fn without_nodes(&self, drop: &BTreeSet<NodeId>) -> RetrievedSubgraph {
        let nodes: BTreeMap<NodeId, NodeRecord> = self
            .nodes
            .iter()
            .filter(|(id, _)| !drop.contains(*id))
            .map(|(id, n)| (id.clone(), n.clone()))
            .collect();
        let edges = self
            .edges
            .iter()
            .filter(|e| nodes.contains_key(&e.src) && nodes.contains_key(&e.dst))
            .cloned()
            .collect();
        RetrievedSubgraph {
            center: self.center.clone(),
            nodes,
            edges,
            applied_plans: self.applied_plans.clone(),
        }
    }

    fn set_attribute(&mut self, id: &str, attribute: String, injected_from: Option<usize>) {
        let node = self.nodes.get_mut(id).expect("node present");
        node.attribute = attribute;
        node.poisoned = true;
        node.injected_from = injected_from;
    }
}

/// Undirected breadth-first retrieval around the query's target entity.
///
/// All nodes within `hops` of the center are ranked by (distance, node id)
/// and truncated at `node_budget`; the edge set is the induced one (every
/// graph edge with both endpoints kept).
pub fn retrieve_subgraph(
    graph: &KnowledgeGraph,
    center: &str,
    hops: usize,
    node_budget: usize,
) -> Result<RetrievedSubgraph> {
    if node_budget == 0 {
        return Err(Error::InvalidConfig("node_budget must be positive".into()));
    }
    if graph.node(center).is_none() {
        return Err(Error::UnknownEntity(center.to_string()));
    }

    let mut dist: BTreeMap<&str, usize> = BTreeMap::new();
    dist.insert(center, 0);
    let mut queue: VecDeque<&str> = VecDeque::new();
    queue.push_back(center);
    while let Some(u) = queue.pop_front() {
        let du = dist[u];
        if du == hops {
            continue;
        }
        if let Some(nbrs) = graph.undirected_neighbors(u) {
            for v in nbrs {
                if !dist.contains_key(v.as_str()) {
                    dist.insert(v, du + 1);
                    queue.push_back(v);
                }
            }
        }
    }

    let mut ranked: Vec<(&usize, &&str)> = dist.iter().map(|(id, d)| (d, id)).collect();
    ranked.sort(); // (distance, node id)
    let kept: BTreeSet<NodeId> = ranked
        .into_iter()
        .take(node_budget)
        .map(|(_, id)| id.to_string())
        .collect();

    let nodes: BTreeMap<NodeId, NodeRecord> = kept
        .iter()
        .map(|id| (id.clone(), graph.node(id).unwrap().clone()))
        .collect();
    let edges: BTreeSet<EdgeRecord> = graph
        .edges()
        .filter(|e| kept.contains(&e.src) && kept.contains(&e.dst))
        .cloned()
        .collect();

    Ok(RetrievedSubgraph {
        center: center.to_string(),
        nodes,
        edges,
        applied_plans: BTreeSet::new(),
    })
}

/// Canonical text rendering of a subgraph: one `node: <attribute>` line per
/// node in node-id order, then one `<src> <relation> <dst>` line per edge in
/// lexical (src, relation, dst) order.
pub fn linearize(sub: &RetrievedSubgraph) -> String {
    let mut lines: Vec<String> = sub
        .nodes
        .values()
        .map(|n| format!("node: {}", n.attribute))
        .collect();
    lines.extend(
        sub.edges
            .iter()
            .map(|e| format!("{} {} {}", e.src, e.relation, e.dst)),
    );
    lines.join("\n")
}

/// Joins base text, an adversarial command, and an optimized suffix with
/// single spaces, returning the composed attribute and the byte offset where
/// adversarial content begins (`None` when command and suffix are empty).
pub fn compose_poisoned_attribute(
    base: &str,
    command: &str,
    suffix_words: &[String],
    max_suffix_len: usize,
) -> Result<(String, Option<usize>)> {
    if base.trim().is_empty() {
        return Err(Error::EmptyInput("attribute base text"));
    }
    if suffix_words.len() > max_suffix_len {
        return Err(Error::BudgetExceeded {
            context: "suffix length",
            limit: max_suffix_len,
            got: suffix_words.len(),
        });
    }
    let mut tail: Vec<&str> = Vec::new();
    if !command.is_empty() {
        tail.push(command);
    }
    for w in suffix_words {
        tail.push(w.as_str());
    }
    if tail.is_empty() {
        return Ok((base.to_string(), None));
    }
    let composed = format!("{} {}", base, tail.join(" "));
    Ok((composed, Some(base.len() + 1)))
}

/// Blueprint for one injected node inside a poison plan.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectedNodeBlueprint {
    pub id: NodeId,
    /// Benign-looking base text (by construction, the trigger's original
    /// attribute); the command and suffix are appended on application.
    pub base_attribute: String,
    pub suffix: Vec<String>,
}

/// Serialized description of a graph poisoning: which trigger it targets,
/// the command text, the optimized suffixes, and the injected-node
/// blueprints, all bounded by the node/suffix budgets it was built under.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoisonPlan {
    pub trigger: NodeId,
    pub command: String,
    pub trigger_suffix: Vec<String>,
    pub injected: Vec<InjectedNodeBlueprint>,
    pub max_injected_nodes: usize,
    pub max_suffix_len: usize,
    /// Content hash over all fields above; doubles as the idempotence key.
    pub plan_id: String,
}

impl PoisonPlan {
    pub fn new(
        trigger: NodeId,
        command: String,
        trigger_suffix: Vec<String>,
        injected: Vec<InjectedNodeBlueprint>,
        max_injected_nodes: usize,
        max_suffix_len: usize,
    ) -> Result<Self> {
        let mut plan = PoisonPlan {
            trigger,
            command,
            trigger_suffix,
            injected,
            max_injected_nodes,
            max_suffix_len,
            plan_id: String::new(),
        };
        plan.validate_budgets()?;
        plan.plan_id = plan.compute_id();
        Ok(plan)
    }

    /// A plan that changes nothing (no command, no suffixes, no nodes).
    pub fn empty(trigger: NodeId) -> Self {
        PoisonPlan::new(trigger, String::new(), Vec::new(), Vec::new(), 0, 0)
            .expect("empty plan is always within budget")
    }

    pub fn validate_budgets(&self) -> Result<()> {
        if self.injected.len() > self.max_injected_nodes {
            return Err(Error::BudgetExceeded {
                context: "injected node count",
                limit: self.max_injected_nodes,
                got: self.injected.len(),
            });
        }
        if self.trigger_suffix.len() > self.max_suffix_len {
            return Err(Error::BudgetExceeded {
                context: "trigger suffix length",
                limit: self.max_suffix_len,
                got: self.trigger_suffix.len(),
            });
        }
        for b in &self.injected {
            if b.suffix.len() > self.max_suffix_len {
                return Err(Error::BudgetExceeded {
                    context: "injected node suffix length",
                    limit: self.max_suffix_len,
                    got: b.suffix.len(),
                });
            }
        }
        Ok(())
    }

    fn compute_id(&self) -> String {
        let body = serde_json::json!({
            "trigger": self.trigger,
            "command": self.command,
            "trigger_suffix": self.trigger_suffix,
            "injected": self.injected,
            "max_injected_nodes": self.max_injected_nodes,
            "max_suffix_len": self.max_suffix_len,
        });
        let mut hasher = Sha256::new();
        hasher.update(body.to_string().as_bytes());
        format!("{:x}", hasher.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Loads a plan and verifies its content hash and budgets.
    pub fn load(path: &Path) -> Result<Self> {
        let plan: PoisonPlan = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        plan.validate_budgets()?;
        if plan.plan_id != plan.compute_id() {
            return Err(Error::InvalidPlan(
                "plan content hash does not match its fields".into(),
            ));
        }
        Ok(plan)
    }
}

/// Adds one poisoned node tied to `trigger` by the reserved relation.
///
/// The node id is `poison_<trigger>_<k>` for the smallest unused `k`; the
/// attribute defaults to the trigger's current attribute when none is given.
pub fn inject_poisoned_node(
    sub: &RetrievedSubgraph,
    trigger: &str,
    attribute: Option<&str>,
) -> Result<(RetrievedSubgraph, NodeId)> {
    let trigger_node = sub
        .node(trigger)
        .ok_or_else(|| Error::UnknownEntity(trigger.to_string()))?;
    let attribute = attribute.unwrap_or(&trigger_node.attribute).to_string();
    if attribute.trim().is_empty() {
        return Err(Error::EmptyInput("injected node attribute"));
    }

    let mut k = 0usize;
    let id = loop {
        let candidate = format!("poison_{}_{}", trigger, k);
        if !sub.contains(&candidate) {
            break candidate;
        }
        k += 1;
    };

    let mut out = sub.clone();
    out.nodes.insert(
        id.clone(),
        NodeRecord {
            id: id.clone(),
            attribute,
            poisoned: true,
            injected_from: None,
        },
    );
    out.edges.insert(EdgeRecord::new(
        id.clone(),
        RESERVED_POISON_RELATION,
        trigger,
    ));
    Ok((out, id))
}

/// Applies a poison plan to a retrieved subgraph: rewrites the trigger's
/// attribute with the command and trigger suffix, then adds every injected
/// node blueprint with its edge to the trigger. Re-applying the same plan
/// (by content hash) is a no-op.
pub fn apply_poison_plan(sub: &RetrievedSubgraph, plan: &PoisonPlan) -> Result<RetrievedSubgraph> {
    if sub.applied_plans.contains(&plan.plan_id) {
        return Ok(sub.clone());
    }
    if !sub.contains(&plan.trigger) {
        return Err(Error::UnknownEntity(plan.trigger.clone()));
    }
    plan.validate_budgets()?;

    let mut out = sub.clone();

    if !plan.command.is_empty() || !plan.trigger_suffix.is_empty() {
        let base = out.node(&plan.trigger).unwrap().attribute.clone();
        let (attr, offset) = compose_poisoned_attribute(
            &base,
            &plan.command,
            &plan.trigger_suffix,
            plan.max_suffix_len,
        )?;
        out.set_attribute(&plan.trigger, attr, offset);
    }

    for blueprint in &plan.injected {
        if out.contains(&blueprint.id) {
            return Err(Error::InvalidPlan(format!(
                "injected node id `{}` already present in subgraph",
                blueprint.id
            )));
        }
        let (attr, offset) = compose_poisoned_attribute(
            &blueprint.base_attribute,
            &plan.command,
            &blueprint.suffix,
            plan.max_suffix_len,
        )?;
        out.nodes.insert(
            blueprint.id.clone(),
            NodeRecord {
                id: blueprint.id.clone(),
                attribute: attr,
                poisoned: true,
                injected_from: offset,
            },
        );
        out.edges.insert(EdgeRecord::new(
            blueprint.id.clone(),
            RESERVED_POISON_RELATION,
            plan.trigger.clone(),
        ));
    }

    out.applied_plans.insert(plan.plan_id.clone());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line_graph(n: usize) -> KnowledgeGraph {
        // n0 - n1 - n2 - ... as a directed path with one relation.
        let nodes = (0..n).map(|i| NodeRecord::clean(format!("n{i}"), format!("attr{i} kind")));
        let edges = (0..n.saturating_sub(1))
            .map(|i| EdgeRecord::new(format!("n{i}"), "next", format!("n{}", i + 1)));
        KnowledgeGraph::from_records(nodes, edges).unwrap()
    }

    #[test]
    fn loader_rejects_dangling_edges() {
        let text = r#"{
            "nodes": [{"id": "a", "attribute": "a thing"}],
            "edges": [{"src": "a", "rel": "r", "dst": "missing"}]
        }"#;
        let err = KnowledgeGraph::from_json(text).unwrap_err();
        assert!(matches!(err, Error::DanglingEdge { .. }));
    }

    #[test]
    fn loader_rejects_duplicate_node_ids() {
        let text = r#"{
            "nodes": [
                {"id": "a", "attribute": "first"},
                {"id": "a", "attribute": "second"}
            ],
            "edges": []
        }"#;
        let err = KnowledgeGraph::from_json(text).unwrap_err();
        assert!(matches!(err, Error::DuplicateNode(_)));
    }

    #[test]
    fn loader_rejects_empty_attributes() {
        let text = r#"{
            "nodes": [{"id": "a", "attribute": "  "}],
            "edges": []
        }"#;
        assert!(KnowledgeGraph::from_json(text).is_err());
    }

    #[test]
    fn graph_json_round_trips() {
        let g = line_graph(4);
        let text = g.to_json().unwrap();
        let g2 = KnowledgeGraph::from_json(&text).unwrap();
        assert_eq!(g.node_count(), g2.node_count());
        assert_eq!(g.edge_count(), g2.edge_count());
        assert_eq!(
            g.node("n2").unwrap().attribute,
            g2.node("n2").unwrap().attribute
        );
    }

    #[test]
    fn zero_hop_retrieval_is_exactly_the_center() {
        let g = line_graph(5);
        let sub = retrieve_subgraph(&g, "n2", 0, 10).unwrap();
        assert_eq!(sub.node_count(), 1);
        assert!(sub.contains("n2"));
        assert_eq!(sub.edges().count(), 0);
    }

    #[test]
    fn retrieval_is_undirected_and_hop_bounded() {
        let g = line_graph(6);
        // n3 reaches n2 (incoming edge) and n4 (outgoing) at hop 1.
        let sub = retrieve_subgraph(&g, "n3", 1, 10).unwrap();
        let ids: Vec<&str> = sub.node_ids().map(|s| s.as_str()).collect();
        assert_eq!(ids, vec!["n2", "n3", "n4"]);
        // Induced edges: n2->n3 and n3->n4.
        assert_eq!(sub.edges().count(), 2);
    }

    #[test]
    fn retrieval_truncates_by_distance_then_id() {
        // Star: center c with spokes a,b,d (all at distance 1).
        let nodes = ["c", "a", "b", "d"]
            .iter()
            .map(|id| NodeRecord::clean(*id, format!("{id} node")));
        let edges = ["a", "b", "d"]
            .iter()
            .map(|id| EdgeRecord::new("c", "spoke", *id));
        let g = KnowledgeGraph::from_records(nodes, edges).unwrap();
        let sub = retrieve_subgraph(&g, "c", 1, 3).unwrap();
        let ids: Vec<&str> = sub.node_ids().map(|s| s.as_str()).collect();
        // Center first (distance 0), then lexically smallest spokes.
        assert_eq!(ids, vec!["a", "b", "c"]);
        assert!(sub.contains("c"));
    }

    #[test]
    fn retrieval_rejects_unknown_center() {
        let g = line_graph(3);
        assert!(matches!(
            retrieve_subgraph(&g, "ghost", 1, 5),
            Err(Error::UnknownEntity(_))
        ));
    }

    #[test]
    fn linearize_lists_nodes_then_edges_in_canonical_order() {
        let g = line_graph(3);
        let sub = retrieve_subgraph(&g, "n1", 1, 10).unwrap();
        let text = linearize(&sub);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines,
            vec![
                "node: attr0 kind",
                "node: attr1 kind",
                "node: attr2 kind",
                "n0 next n1",
                "n1 next n2",
            ]
        );
    }

    #[test]
    fn compose_with_empty_suffix_appends_only_command() {
        let (attr, off) = compose_poisoned_attribute("X", "C", &[], 5).unwrap();
        assert_eq!(attr, "X C");
        assert_eq!(off, Some(2));
    }

    #[test]
    fn compose_with_nothing_to_add_returns_base_unchanged() {
        let (attr, off) = compose_poisoned_attribute("X y", "", &[], 5).unwrap();
        assert_eq!(attr, "X y");
        assert_eq!(off, None);
    }

    #[test]
    fn compose_marks_offset_at_command_start() {
        let suffix = vec!["s1".to_string(), "s2".to_string()];
        let (attr, off) = compose_poisoned_attribute("base text", "do this", &suffix, 2).unwrap();
        assert_eq!(attr, "base text do this s1 s2");
        assert_eq!(&attr[off.unwrap()..], "do this s1 s2");
    }

    #[test]
    fn compose_rejects_suffix_over_budget() {
        let suffix = vec!["a".into(), "b".into(), "c".into()];
        assert!(matches!(
            compose_poisoned_attribute("x", "c", &suffix, 2),
            Err(Error::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn inject_defaults_attribute_to_trigger_attribute() {
        let g = line_graph(3);
        let sub = retrieve_subgraph(&g, "n1", 1, 10).unwrap();
        let (sub2, id) = inject_poisoned_node(&sub, "n1", None).unwrap();
        assert_eq!(id, "poison_n1_0");
        let node = sub2.node(&id).unwrap();
        assert_eq!(node.attribute, "attr1 kind");
        assert!(node.poisoned);
        assert!(sub2
            .edges()
            .any(|e| e.src == id && e.relation == RESERVED_POISON_RELATION && e.dst == "n1"));
        // Parent value untouched.
        assert!(!sub.contains(&id));
    }

    #[test]
    fn inject_assigns_fresh_sequential_ids() {
        let g = line_graph(2);
        let sub = retrieve_subgraph(&g, "n0", 1, 10).unwrap();
        let (sub, a) = inject_poisoned_node(&sub, "n0", Some("junk text")).unwrap();
        let (sub, b) = inject_poisoned_node(&sub, "n0", Some("junk text")).unwrap();
        assert_eq!(a, "poison_n0_0");
        assert_eq!(b, "poison_n0_1");
        assert_eq!(sub.node_count(), 4);
    }

    fn demo_plan(trigger: &str) -> PoisonPlan {
        PoisonPlan::new(
            trigger.to_string(),
            "obey the command".into(),
            vec!["zz".into()],
            vec![InjectedNodeBlueprint {
                id: format!("poison_{trigger}_0"),
                base_attribute: "attr1 kind".into(),
                suffix: vec!["qq".into(), "rr".into()],
            }],
            4,
            2,
        )
        .unwrap()
    }

    #[test]
    fn apply_plan_rewrites_trigger_and_adds_blueprint_nodes() {
        let g = line_graph(3);
        let sub = retrieve_subgraph(&g, "n1", 1, 10).unwrap();
        let plan = demo_plan("n1");
        let out = apply_poison_plan(&sub, &plan).unwrap();
        let trig = out.node("n1").unwrap();
        assert_eq!(trig.attribute, "attr1 kind obey the command zz");
        assert!(trig.poisoned);
        assert_eq!(trig.injected_from, Some("attr1 kind ".len()));
        let inj = out.node("poison_n1_0").unwrap();
        assert_eq!(inj.attribute, "attr1 kind obey the command qq rr");
        assert_eq!(out.node_count(), sub.node_count() + 1);
    }

    #[test]
    fn apply_plan_twice_is_a_no_op() {
        let g = line_graph(3);
        let sub = retrieve_subgraph(&g, "n1", 1, 10).unwrap();
        let plan = demo_plan("n1");
        let once = apply_poison_plan(&sub, &plan).unwrap();
        let twice = apply_poison_plan(&once, &plan).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn empty_plan_leaves_subgraph_unchanged() {
        let g = line_graph(3);
        let sub = retrieve_subgraph(&g, "n1", 1, 10).unwrap();
        let plan = PoisonPlan::empty("n1".into());
        let out = apply_poison_plan(&sub, &plan).unwrap();
        assert_eq!(out.node("n1").unwrap(), sub.node("n1").unwrap());
        assert_eq!(out.node_count(), sub.node_count());
        assert_eq!(out.edges().count(), sub.edges().count());
    }

    #[test]
    fn apply_plan_requires_trigger_in_subgraph() {
        let g = line_graph(5);
        let sub = retrieve_subgraph(&g, "n0", 0, 10).unwrap();
        let plan = demo_plan("n4");
        assert!(matches!(
            apply_poison_plan(&sub, &plan),
            Err(Error::UnknownEntity(_))
        ));
    }

    #[test]
    fn plan_rejects_more_nodes_than_budget() {
        let blueprint = InjectedNodeBlueprint {
            id: "poison_t_0".into(),
            base_attribute: "b".into(),
            suffix: vec![],
        };
        let result = PoisonPlan::new(
            "t".into(),
            "c".into(),
            vec![],
            vec![blueprint.clone(), blueprint],
            1,
            0,
        );
        assert!(matches!(result, Err(Error::BudgetExceeded { .. })));
    }

    #[test]
    fn plan_file_round_trips_and_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plan.json");
        let plan = demo_plan("n1");
        plan.save(&path).unwrap();
        let loaded = PoisonPlan::load(&path).unwrap();
        assert_eq!(plan, loaded);

        // Flip one suffix word; hash check must fire.
        let mut tampered: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        tampered["trigger_suffix"][0] = serde_json::json!("hacked");
        std::fs::write(&path, tampered.to_string()).unwrap();
        assert!(matches!(
            PoisonPlan::load(&path),
            Err(Error::InvalidPlan(_))
        ));
    }

    // ── Brute-force retrieval oracle ──

    /// All-pairs undirected distances by repeated relaxation, then the same
    /// (distance, id) ranking and truncation the real operation promises.
    fn brute_force_retrieve(
        graph: &KnowledgeGraph,
        center: &str,
        hops: usize,
        budget: usize,
    ) -> (Vec<NodeId>, Vec<EdgeRecord>) {
        let ids: Vec<NodeId> = graph.nodes().map(|n| n.id.clone()).collect();
        let n = ids.len();
        let idx: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let inf = usize::MAX / 2;
        let mut dist = vec![inf; n];
        dist[idx[center]] = 0;
        for _ in 0..n {
            let mut changed = false;
            for e in graph.edges() {
                let (a, b) = (idx[e.src.as_str()], idx[e.dst.as_str()]);
                if dist[a] + 1 < dist[b] {
                    dist[b] = dist[a] + 1;
                    changed = true;
                }
                if dist[b] + 1 < dist[a] {
                    dist[a] = dist[b] + 1;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        let mut ranked: Vec<(usize, NodeId)> = ids
            .iter()
            .enumerate()
            .filter(|(i, _)| dist[*i] <= hops)
            .map(|(i, id)| (dist[i], id.clone()))
            .collect();
        ranked.sort();
        let kept: BTreeSet<NodeId> = ranked.into_iter().take(budget).map(|(_, id)| id).collect();
        let edges: Vec<EdgeRecord> = graph
            .edges()
            .filter(|e| kept.contains(&e.src) && kept.contains(&e.dst))
            .cloned()
            .collect();
        (kept.into_iter().collect(), edges)
    }

    proptest! {
        #[test]
        fn retrieval_matches_brute_force_oracle(
            n in 1usize..10,
            edge_seeds in proptest::collection::vec((0usize..10, 0usize..10), 0..20),
            center in 0usize..10,
            hops in 0usize..4,
            budget in 1usize..12,
        ) {
            let center = center % n;
            let nodes = (0..n).map(|i| NodeRecord::clean(format!("v{i}"), format!("text {i}")));
            let edges = edge_seeds.iter().map(|(a, b)| {
                EdgeRecord::new(format!("v{}", a % n), "r", format!("v{}", b % n))
            });
            let g = KnowledgeGraph::from_records(nodes, edges).unwrap();
            let sub = retrieve_subgraph(&g, &format!("v{center}"), hops, budget).unwrap();
            let (want_nodes, want_edges) = brute_force_retrieve(&g, &format!("v{center}"), hops, budget);
            let got_nodes: Vec<NodeId> = sub.node_ids().cloned().collect();
            prop_assert_eq!(got_nodes, want_nodes);
            let got_edges: Vec<EdgeRecord> = sub.edges().cloned().collect();
            prop_assert_eq!(got_edges, want_edges);
        }

        #[test]
        fn linearize_ignores_insertion_order(perm in Just(vec![0usize, 1, 2, 3, 4]).prop_shuffle()) {
            // Build the same graph with nodes inserted in two different orders.
            let mk = |order: &[usize]| {
                let mut g = KnowledgeGraph::new();
                for &i in order {
                    g.insert_node(NodeRecord::clean(format!("n{i}"), format!("word {i}"))).unwrap();
                }
                for i in 0..4 {
                    g.insert_edge(EdgeRecord::new(format!("n{i}"), "r", format!("n{}", i + 1))).unwrap();
                }
                retrieve_subgraph(&g, "n0", 5, 10).unwrap()
            };
            let a = mk(&[0, 1, 2, 3, 4]);
            let b = mk(&perm);
            prop_assert_eq!(linearize(&a), linearize(&b));
        }
    }
}
