//! Reverse-mode differentiation over recorded op graphs.
//!
//! Node ids increase with creation order, so a parent's id is always smaller
//! than its child's; visiting reachable nodes in descending id order is a
//! reverse topological order. The walk is sequential and accumulates in that
//! fixed order, which keeps gradients bitwise reproducible.

use std::collections::{HashMap, HashSet};

use super::tensor::{Real, Tensor, TensorError};

impl<T: Real> Tensor<T> {
    /// Push adjoints from this scalar back to every reachable leaf with
    /// `requires_grad`, accumulating into their `grad` buffers.
    pub fn backward(&self) -> Result<(), TensorError> {
        self.backward_for(None)
    }

    /// Like `backward`, but deposits gradients only into the given target
    /// leaves. Branches of the graph that cannot reach any target are not
    /// walked at all, so the untouched side of a two-network graph neither
    /// pays backward compute nor gains populated grads.
    pub fn backward_for(&self, targets: Option<&[Tensor<T>]>) -> Result<(), TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss { shape: self.shape() });
        }

        // Reachable subgraph, found without recursion.
        let mut nodes: HashMap<u64, Tensor<T>> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(node) = stack.pop() {
            if nodes.contains_key(&node.id()) {
                continue;
            }
            if let Some(op) = node.op() {
                for p in &op.parents {
                    if !nodes.contains_key(&p.id()) {
                        stack.push(p.clone());
                    }
                }
            }
            nodes.insert(node.id(), node);
        }

        let target_ids: Option<HashSet<u64>> =
            targets.map(|list| list.iter().map(Tensor::id).collect());
        let is_target = |t: &Tensor<T>| match &target_ids {
            Some(ids) => t.is_leaf() && ids.contains(&t.id()),
            None => t.is_leaf() && t.requires_grad(),
        };

        // A node is active if some target leaf is reachable below it. Parents
        // precede children in id order, so one ascending pass settles it.
        let mut order: Vec<u64> = nodes.keys().copied().collect();
        order.sort_unstable();
        let mut active: HashSet<u64> = HashSet::new();
        for id in &order {
            let node = &nodes[id];
            let on = is_target(node)
                || node
                    .op()
                    .is_some_and(|op| op.parents.iter().any(|p| active.contains(&p.id())));
            if on {
                active.insert(*id);
            }
        }
        if !active.contains(&self.id()) {
            // Loss does not depend on any target; all grads stay untouched.
            return Ok(());
        }

        let mut adjoints: HashMap<u64, Vec<T>> = HashMap::new();
        adjoints.insert(self.id(), vec![T::one()]);
        for id in order.iter().rev() {
            if !active.contains(id) {
                continue;
            }
            let Some(adj) = adjoints.remove(id) else {
                continue; // not on a live path from the loss
            };
            let node = &nodes[id];
            if is_target(node) {
                node.accumulate_grad(&adj);
            }
            let Some(op) = node.op() else {
                continue;
            };
            let wanted: Vec<bool> = op
                .parents
                .iter()
                .map(|p| active.contains(&p.id()))
                .collect();
            let contributions = (op.backward)(&adj, &wanted);
            debug_assert_eq!(contributions.len(), op.parents.len());
            for (parent, contrib) in op.parents.iter().zip(contributions) {
                let Some(c) = contrib else { continue };
                debug_assert_eq!(c.len(), parent.numel());
                match adjoints.get_mut(&parent.id()) {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&c) {
                            *a = *a + *v;
                        }
                    }
                    None => {
                        adjoints.insert(parent.id(), c);
                    }
                }
            }
        }
        Ok(())
    }
}
