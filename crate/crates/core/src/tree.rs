//! Crowd-grown hypothesis tree.
//!
//! Every hypothesis is a node; a synthetic root stands for the outcome itself.
//! Nodes are append-only and their ids are dense insertion sequence numbers,
//! so a node's parent always has a smaller id.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Identifier of a hypothesis node (its insertion sequence number).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);

    fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub const SYSTEM_AUTHOR: &str = "system";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HypothesisNode {
    pub id: NodeId,
    pub parent_id: Option<NodeId>,
    pub text: String,
    pub author: String,
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TreeError {
    #[error("unknown hypothesis node {0}")]
    UnknownNode(NodeId),
    #[error("hypothesis text is empty")]
    EmptyText,
    #[error("malformed tree: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HypothesisTree {
    nodes: Vec<HypothesisNode>,
    children: Vec<Vec<NodeId>>,
}

impl HypothesisTree {
    /// A tree holding only the synthetic root.
    pub fn new(root_text: impl Into<String>) -> Self {
        let root_text = root_text.into();
        let text = match root_text.trim() {
            "" => "causes of outcome".to_string(),
            t => t.to_string(),
        };
        Self {
            nodes: vec![HypothesisNode {
                id: NodeId::ROOT,
                parent_id: None,
                text,
                author: SYSTEM_AUTHOR.to_string(),
                created_at: 0,
            }],
            children: vec![Vec::new()],
        }
    }

    pub fn root(&self) -> NodeId {
        NodeId::ROOT
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// True when only the root exists.
    pub fn is_empty(&self) -> bool {
        self.nodes.len() == 1
    }

    pub fn contains(&self, id: NodeId) -> bool {
        id.index() < self.nodes.len()
    }

    pub fn get(&self, id: NodeId) -> Result<&HypothesisNode, TreeError> {
        self.nodes.get(id.index()).ok_or(TreeError::UnknownNode(id))
    }

    pub fn nodes(&self) -> &[HypothesisNode] {
        &self.nodes
    }

    pub fn children(&self, id: NodeId) -> Result<&[NodeId], TreeError> {
        self.children
            .get(id.index())
            .map(Vec::as_slice)
            .ok_or(TreeError::UnknownNode(id))
    }

    /// Checks that `add_hypothesis` would succeed, without mutating.
    pub fn validate_new(&self, parent_id: NodeId, text: &str) -> Result<(), TreeError> {
        if !self.contains(parent_id) {
            return Err(TreeError::UnknownNode(parent_id));
        }
        if text.trim().is_empty() {
            return Err(TreeError::EmptyText);
        }
        Ok(())
    }

    /// Appends a new leaf under `parent_id`. The stored text is trimmed.
    pub fn add_hypothesis(
        &mut self,
        parent_id: NodeId,
        text: &str,
        author: &str,
    ) -> Result<NodeId, TreeError> {
        self.validate_new(parent_id, text)?;
        let id = NodeId(self.nodes.len() as u64);
        self.nodes.push(HypothesisNode {
            id,
            parent_id: Some(parent_id),
            text: text.trim().to_string(),
            author: author.to_string(),
            created_at: id.0,
        });
        self.children.push(Vec::new());
        self.children[parent_id.index()].push(id);
        Ok(id)
    }

    /// Node ids from `id` up to and including the root.
    pub fn path_to_root(&self, id: NodeId) -> Result<Vec<NodeId>, TreeError> {
        let mut node = self.get(id)?;
        let mut path = vec![id];
        while let Some(parent) = node.parent_id {
            path.push(parent);
            node = &self.nodes[parent.index()];
        }
        Ok(path)
    }

    /// Proper ancestors of `id`, nearest first, excluding the root.
    pub fn hypothesis_ancestors(&self, id: NodeId) -> Result<impl Iterator<Item = NodeId> + '_, TreeError> {
        let start = self.get(id)?.parent_id;
        Ok(std::iter::successors(start, move |p| self.nodes[p.index()].parent_id)
            .filter(|p| *p != NodeId::ROOT))
    }

    pub fn depth(&self, id: NodeId) -> Result<usize, TreeError> {
        Ok(self.path_to_root(id)?.len() - 1)
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.children.get(id.index()).is_some_and(Vec::is_empty)
    }

    /// Childless nodes. A root-only tree reports the root itself.
    pub fn leaves(&self) -> BTreeSet<NodeId> {
        self.children
            .iter()
            .enumerate()
            .filter(|(_, c)| c.is_empty())
            .map(|(i, _)| NodeId(i as u64))
            .collect()
    }

    /// Leaves that are actual hypotheses (never the root).
    pub fn hypothesis_leaves(&self) -> Vec<NodeId> {
        self.children
            .iter()
            .enumerate()
            .skip(1)
            .filter(|(_, c)| c.is_empty())
            .map(|(i, _)| NodeId(i as u64))
            .collect()
    }

    /// Rebuilds a tree from its node list, checking every structural invariant.
    pub fn from_nodes(nodes: Vec<HypothesisNode>) -> Result<Self, TreeError> {
        let mut iter = nodes.into_iter();
        let root = iter
            .next()
            .ok_or_else(|| TreeError::Malformed("no root node".into()))?;
        if root.id != NodeId::ROOT || root.parent_id.is_some() {
            return Err(TreeError::Malformed("first node must be the root with id 0".into()));
        }
        if root.text.trim().is_empty() {
            return Err(TreeError::Malformed("root text is empty".into()));
        }
        let mut tree = HypothesisTree {
            nodes: vec![root],
            children: vec![Vec::new()],
        };
        for node in iter {
            let expected = NodeId(tree.nodes.len() as u64);
            if node.id != expected || node.created_at != expected.0 {
                return Err(TreeError::Malformed(format!(
                    "node {} out of sequence (expected {expected})",
                    node.id
                )));
            }
            let parent = node
                .parent_id
                .ok_or_else(|| TreeError::Malformed(format!("second root at node {}", node.id)))?;
            if node.text.trim() != node.text || node.text.is_empty() {
                return Err(TreeError::Malformed(format!("bad text on node {}", node.id)));
            }
            if parent >= node.id {
                return Err(TreeError::Malformed(format!(
                    "node {} references later parent {parent}",
                    node.id
                )));
            }
            tree.children[parent.index()].push(node.id);
            tree.children.push(Vec::new());
            tree.nodes.push(node);
        }
        Ok(tree)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("tree serialization is infallible")
    }

    pub fn from_json(json: &str) -> Result<Self, TreeError> {
        serde_json::from_str(json).map_err(|e| TreeError::Malformed(e.to_string()))
    }
}

impl Serialize for HypothesisTree {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.nodes.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for HypothesisTree {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let nodes = Vec::<HypothesisNode>::deserialize(deserializer)?;
        HypothesisTree::from_nodes(nodes).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tree(seed: u64, n: usize) -> HypothesisTree {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tree = HypothesisTree::new("good sleep");
        for i in 0..n {
            let parent = NodeId(rng.random_range(0..tree.len() as u64));
            tree.add_hypothesis(parent, &format!("h{i}"), "w").unwrap();
        }
        tree
    }

    #[test]
    fn add_and_depth() {
        let mut tree = HypothesisTree::new("causes of good sleep");
        let bath = tree.add_hypothesis(tree.root(), "Take a bath before bed", "w1").unwrap();
        assert_eq!(tree.depth(bath).unwrap(), 1);
        let refined = tree
            .add_hypothesis(bath, "  Take a bath 10 minutes before going to bed ", "w2")
            .unwrap();
        assert_eq!(tree.depth(refined).unwrap(), 2);
        assert_eq!(tree.get(refined).unwrap().text, "Take a bath 10 minutes before going to bed");
        assert_eq!(
            tree.add_hypothesis(NodeId(99), "x", "w"),
            Err(TreeError::UnknownNode(NodeId(99)))
        );
        assert_eq!(tree.add_hypothesis(bath, "   ", "w"), Err(TreeError::EmptyText));
        assert_eq!(tree.len(), 3);
    }

    #[test]
    fn paths() {
        let mut tree = HypothesisTree::new("o");
        assert_eq!(tree.path_to_root(tree.root()).unwrap(), vec![NodeId::ROOT]);
        let a = tree.add_hypothesis(NodeId::ROOT, "a", "w").unwrap();
        let b = tree.add_hypothesis(a, "b", "w").unwrap();
        assert_eq!(tree.path_to_root(b).unwrap(), vec![b, a, NodeId::ROOT]);
        assert_eq!(tree.hypothesis_ancestors(b).unwrap().collect::<Vec<_>>(), vec![a]);
        assert!(tree.path_to_root(NodeId(7)).is_err());
    }

    #[test]
    fn leaves_small() {
        let mut tree = HypothesisTree::new("o");
        assert_eq!(tree.leaves(), BTreeSet::from([NodeId::ROOT]));
        assert!(tree.hypothesis_leaves().is_empty());
        let a = tree.add_hypothesis(NodeId::ROOT, "a", "w").unwrap();
        let b = tree.add_hypothesis(NodeId::ROOT, "b", "w").unwrap();
        assert_eq!(tree.leaves(), BTreeSet::from([a, b]));
    }

    #[test]
    fn hundred_insertions_terminate_at_root() {
        for seed in 0..20 {
            let tree = random_tree(seed, 100);
            for node in tree.nodes() {
                let path = tree.path_to_root(node.id).unwrap();
                assert_eq!(path[0], node.id);
                assert_eq!(*path.last().unwrap(), NodeId::ROOT);
                for w in path.windows(2) {
                    assert_eq!(tree.get(w[0]).unwrap().parent_id, Some(w[1]));
                }
            }
        }
    }

    #[test]
    fn leaves_equal_ids_minus_parents() {
        for seed in 0..20 {
            let tree = random_tree(seed, 60);
            let all: BTreeSet<NodeId> = tree.nodes().iter().map(|n| n.id).collect();
            let parents: BTreeSet<NodeId> = tree.nodes().iter().filter_map(|n| n.parent_id).collect();
            let expected: BTreeSet<NodeId> = all.difference(&parents).copied().collect();
            assert_eq!(tree.leaves(), expected);
        }
    }

    #[test]
    fn json_is_byte_stable() {
        let tree = random_tree(3, 25);
        let json = tree.to_json();
        let back = HypothesisTree::from_json(&json).unwrap();
        assert_eq!(back, tree);
        assert_eq!(back.to_json(), json);
        assert!(json.starts_with(r#"[{"id":0,"parent_id":null,"#));
    }

    #[test]
    fn rejects_malformed_json() {
        let bad = r#"[{"id":0,"parent_id":null,"text":"o","author":"system","created_at":0},
                      {"id":1,"parent_id":5,"text":"x","author":"w","created_at":1}]"#;
        assert!(matches!(HypothesisTree::from_json(bad), Err(TreeError::Malformed(_))));
        assert!(HypothesisTree::from_json("[]").is_err());
    }

    proptest! {
        #[test]
        fn replay_from_insertion_log(parents in proptest::collection::vec(0u64..1000, 0..80)) {
            let mut tree = HypothesisTree::new("o");
            let mut log = Vec::new();
            for (i, p) in parents.iter().enumerate() {
                let parent = NodeId(p % tree.len() as u64);
                let before = tree.len();
                tree.add_hypothesis(parent, &format!("h{i}"), "w").unwrap();
                prop_assert_eq!(tree.len(), before + 1);
                log.push(parent);
            }
            let mut again = HypothesisTree::new("o");
            for (i, p) in log.iter().enumerate() {
                again.add_hypothesis(*p, &format!("h{i}"), "w").unwrap();
            }
            prop_assert_eq!(&again, &tree);
            for node in tree.nodes().iter().skip(1) {
                let parent = node.parent_id.unwrap();
                prop_assert_eq!(tree.depth(node.id).unwrap(), 1 + tree.depth(parent).unwrap());
            }
        }
    }
}
