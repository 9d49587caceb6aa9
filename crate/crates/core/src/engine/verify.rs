use crate::dist::{normalize_residual, sample, Rng, TokenDistribution, TokenId};
use crate::error::{Error, Result};
use crate::tree::DraftTree;

/// Deliberate verification bugs, for fixtures that must fail the
/// losslessness check.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Accept every candidate regardless of the acceptance ratio.
    AlwaysAccept,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeVerdict {
    pub node: usize,
    pub accepted: bool,
}

/// Result of verifying one draft tree.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    /// Accepted node indices, root side first.
    pub path: Vec<usize>,
    /// Tokens of `path`.
    pub accepted: Vec<TokenId>,
    pub bonus: TokenId,
    /// Every candidate that was tested, in test order.
    pub verdicts: Vec<NodeVerdict>,
    pub draft_ns: u64,
    pub verify_ns: u64,
}

impl RoundOutcome {
    /// Tokens this round adds to the output: the accepted path plus the bonus.
    pub fn committed(&self) -> usize {
        self.accepted.len() + 1
    }

    pub fn tokens(&self) -> Vec<TokenId> {
        let mut t = self.accepted.clone();
        t.push(self.bonus);
        t
    }
}

/// Walks the tree from the root with speculative sampling.
///
/// `target_dists[0]` is the target distribution after the context and
/// `target_dists[i + 1]` the one after the path to node `i`. At each node the
/// children are tested in rank order: candidate `x` with proposal `Q` is kept
/// with probability `min(1, p(x) / Q(x))`; on rejection `p` becomes the
/// normalized residual `(p - Q)_+` and the next sibling is tried. The walk
/// descends on acceptance and stops when a node's children are exhausted; the
/// bonus token is then drawn from the current `p`.
pub fn verify_tree(tree: &DraftTree, target_dists: &[TokenDistribution], rng: &mut Rng) -> Result<RoundOutcome> {
    verify_tree_with(tree, target_dists, rng, Fault::None)
}

#[doc(hidden)]
pub fn verify_tree_with(
    tree: &DraftTree,
    target_dists: &[TokenDistribution],
    rng: &mut Rng,
    fault: Fault,
) -> Result<RoundOutcome> {
    if target_dists.len() != tree.len() + 1 {
        return Err(Error::DimensionMismatch(format!(
            "{} target distributions for a tree of {} nodes",
            target_dists.len(),
            tree.len()
        )));
    }
    let vocab = target_dists[0].len();
    if let Some(q) = tree.dists().iter().find(|q| q.len() != vocab) {
        return Err(Error::DimensionMismatch(format!(
            "draft distribution over {} tokens, target over {vocab}",
            q.len()
        )));
    }

    let mut path = Vec::new();
    let mut accepted = Vec::new();
    let mut verdicts = Vec::new();
    let mut at: Option<usize> = None;
    let mut p = target_dists[0].clone();
    'walk: loop {
        let mut excluded: Vec<TokenId> = Vec::new();
        for &child in tree.children(at) {
            let x = tree.nodes()[child].token;
            let q = tree.proposal(child, &excluded)?;
            let keep = match fault {
                Fault::AlwaysAccept => true,
                Fault::None => {
                    let ratio = if q[x] > 0.0 { p[x] / q[x] } else { f64::from(p[x] > 0.0) };
                    rng.uniform() < ratio.min(1.0)
                }
            };
            if !keep {
                match normalize_residual(&p, &q) {
                    Ok(residual) => {
                        verdicts.push(NodeVerdict { node: child, accepted: false });
                        p = residual;
                        excluded.push(x);
                        continue;
                    }
                    // No residual mass means p == Q, so the ratio was 1 and the
                    // rejection is a rounding artefact.
                    Err(Error::DegenerateResidual) => {}
                    Err(e) => return Err(e),
                }
            }
            verdicts.push(NodeVerdict { node: child, accepted: true });
            path.push(child);
            accepted.push(x);
            at = Some(child);
            p = target_dists[child + 1].clone();
            continue 'walk;
        }
        break;
    }
    let bonus = sample(&p, rng);
    Ok(RoundOutcome {
        path,
        accepted,
        bonus,
        verdicts,
        draft_ns: 0,
        verify_ns: 0,
    })
}
