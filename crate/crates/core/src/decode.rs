//! Draft-and-verify decoding.
//!
//! A committed sequence `x_0..x_m` is paired with target features
//! `h_0..h_{m-1}`; the last token `x_m` is the tree root. The draft reads
//! input rows `(h_i, x_{i+1})` for the context and `(parent regress feature,
//! node token)` for tree nodes. The target verifies the whole tree in one
//! forward under a tree attention mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{sample_index, Token};
use crate::draft::DraftModel;
use crate::error::{Error, Result};
use crate::layers::AttentionPlan;
use crate::numerics::kernels::{argmax, log_softmax, top_k_indices};
use crate::numerics::Tensor;
use crate::target::{softmax_with_temperature, TargetModel};
use crate::training::TrainSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TreeConfig {
    pub budget: usize,
    pub max_depth: usize,
    pub branch_k: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            budget: 60,
            max_depth: 6,
            branch_k: 3,
        }
    }
}

impl TreeConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("budget", self.budget), ("max_depth", self.max_depth), ("branch_k", self.branch_k)] {
            if v == 0 {
                return Err(Error::Config {
                    key: format!("decode.tree.{key}"),
                    reason: "must be at least 1".into(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DraftMode {
    Chain,
    #[default]
    Tree,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub mode: DraftMode,
    pub tree: TreeConfig,
    /// `<= 0` decodes greedily.
    pub temperature: f64,
    pub max_new_tokens: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            mode: DraftMode::Tree,
            tree: TreeConfig::default(),
            temperature: 0.0,
            max_new_tokens: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub token: Token,
    /// `None` for children of the root.
    pub parent: Option<usize>,
    /// 1 for children of the root.
    pub depth: usize,
    pub log_prob: f64,
    pub cum_log_prob: f64,
    /// Regress feature paired with `token` as draft input.
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DraftTree {
    /// Ordered by depth; children of a node appear in descending draft probability.
    pub nodes: Vec<TreeNode>,
    pub draft_passes: usize,
}

impl DraftTree {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn children(&self, parent: Option<usize>) -> impl Iterator<Item = usize> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(move |(_, n)| n.parent == parent)
            .map(|(i, _)| i)
    }

    /// Node indices from the root's child down to `node`.
    pub fn path(&self, node: usize) -> Vec<usize> {
        let mut out = vec![node];
        let mut cur = self.nodes[node].parent;
        while let Some(p) = cur {
            out.push(p);
            cur = self.nodes[p].parent;
        }
        out.reverse();
        out
    }

    pub fn is_ancestor_or_self(&self, a: usize, mut b: usize) -> bool {
        loop {
            if a == b {
                return true;
            }
            match self.nodes[b].parent {
                Some(p) => b = p,
                None => return false,
            }
        }
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }
}

/// Committed tokens `x_0..x_m` and target features `h_0..h_{m-1}`.
#[derive(Clone, Copy, Debug)]
pub struct DraftContext<'a> {
    pub tokens: &'a [Token],
    pub features: &'a Tensor,
}

impl DraftContext<'_> {
    fn inputs(&self) -> Result<usize> {
        let m = self.tokens.len().saturating_sub(1);
        if m == 0 {
            return Err(Error::InvalidInput("draft context needs at least two tokens".into()));
        }
        if self.features.rows() < m {
            return Err(Error::ShapeMismatch {
                expected: vec![m, self.features.cols()],
                actual: self.features.shape().to_vec(),
            });
        }
        Ok(m)
    }
}

/// Tree attention over `n_ctx` causal context rows followed by `tree` nodes.
/// Context row `i` sits at position `i`; a depth-`k` node at `n_ctx - 1 + k`.
pub fn tree_plan(n_ctx: usize, tree: &DraftTree) -> AttentionPlan {
    let n = n_ctx + tree.len();
    let mut mask = vec![false; n * n];
    for i in 0..n_ctx {
        mask[i * n..i * n + i + 1].fill(true);
    }
    for (a, node) in tree.nodes.iter().enumerate() {
        let row = (n_ctx + a) * n;
        mask[row..row + n_ctx].fill(true);
        for b in tree.path(a) {
            mask[row + n_ctx + b] = true;
        }
        debug_assert!(node.depth >= 1);
    }
    let pos: Vec<usize> = (0..n_ctx)
        .chain(tree.nodes.iter().map(|nd| n_ctx - 1 + nd.depth))
        .collect();
    AttentionPlan::from_mask(mask, pos.clone(), pos).expect("square tree mask")
}

/// Fused draft inputs for the context rows, computed once per drafting cycle.
struct DraftPrefix {
    m: usize,
    fused: Tensor,
}

impl DraftPrefix {
    fn new(draft: &DraftModel, ctx: &DraftContext) -> Result<Self> {
        let m = ctx.inputs()?;
        let d = draft.config().d_model;
        let features = Tensor::matrix(m, d, ctx.features.data()[..m * d].to_vec())?;
        Ok(DraftPrefix {
            m,
            fused: draft.fuse_inputs(&ctx.tokens[1..=m], &features)?,
        })
    }

    /// Draft (logits, regress) rows for the root (row 0) and each tree node
    /// (row `1 + i`), as the full forward over context plus tree would give.
    fn rows(&self, draft: &DraftModel, tree: &DraftTree) -> Result<(Tensor, Tensor)> {
        let m = self.m;
        let d = draft.config().d_model;
        let mut fused = self.fused.data().to_vec();
        if !tree.is_empty() {
            let tokens: Vec<Token> = tree.nodes.iter().map(|n| n.token).collect();
            let feats: Vec<f64> = tree.nodes.iter().flat_map(|n| n.feature.iter().copied()).collect();
            let nodes = draft.fuse_inputs(&tokens, &Tensor::matrix(tree.len(), d, feats)?)?;
            fused.extend_from_slice(nodes.data());
        }
        let n = m + tree.len();
        let full = tree_plan(m, tree);
        let plan = AttentionPlan::from_mask(
            full.allowed()[(m - 1) * n..].to_vec(),
            full.query_positions[m - 1..].to_vec(),
            full.key_positions,
        )?;
        let out = draft.forward_fused_rows(&Tensor::matrix(n, d, fused)?, m - 1, &plan)?;
        Ok((draft.draft_logits(&out.predict)?, out.regress))
    }
}

/// Grows a tree level by level. `expand` receives the current tree and the
/// frontier (`None` is the root) and returns, per frontier entry, the
/// log-probabilities of its children and the feature they inherit.
pub fn grow_tree<F>(config: &TreeConfig, mut expand: F) -> Result<DraftTree>
where
    F: FnMut(&DraftTree, &[Option<usize>]) -> Result<Vec<(Vec<f64>, Vec<f64>)>>,
{
    config.validate()?;
    let mut tree = DraftTree::default();
    let mut frontier: Vec<Option<usize>> = vec![None];
    for depth in 1..=config.max_depth {
        let proposals = expand(&tree, &frontier)?;
        tree.draft_passes += 1;
        if proposals.len() != frontier.len() {
            return Err(Error::Contract("expansion must answer every frontier node".into()));
        }
        let first_new = tree.len();
        for (&parent, (logp, feature)) in frontier.iter().zip(proposals) {
            let base = parent.map_or(0.0, |p| tree.nodes[p].cum_log_prob);
            for tok in top_k_indices(&logp, config.branch_k) {
                tree.nodes.push(TreeNode {
                    token: tok,
                    parent,
                    depth,
                    log_prob: logp[tok],
                    cum_log_prob: base + logp[tok],
                    feature: feature.clone(),
                });
            }
        }
        let keep = prune(&tree, config.budget);
        let mut remap = vec![None; tree.len()];
        let mut nodes = Vec::with_capacity(keep.iter().filter(|&&k| k).count());
        for (i, node) in tree.nodes.iter().enumerate() {
            if keep[i] {
                remap[i] = Some(nodes.len());
                let mut n = node.clone();
                n.parent = n.parent.map(|p| remap[p].expect("ancestors survive pruning"));
                nodes.push(n);
            }
        }
        frontier = (first_new..tree.len()).filter_map(|i| remap[i]).map(Some).collect();
        tree.nodes = nodes;
        if frontier.is_empty() {
            break;
        }
    }
    Ok(tree)
}

/// Marks the `budget` best nodes by cumulative log-prob (shallower, then earlier, on ties).
fn prune(tree: &DraftTree, budget: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..tree.len()).collect();
    order.sort_by(|&a, &b| {
        let (na, nb) = (&tree.nodes[a], &tree.nodes[b]);
        nb.cum_log_prob
            .total_cmp(&na.cum_log_prob)
            .then(na.depth.cmp(&nb.depth))
            .then(a.cmp(&b))
    });
    let mut keep = vec![false; tree.len()];
    for &i in order.iter().take(budget) {
        keep[i] = true;
    }
    keep
}

/// Dynamic draft tree grown by the draft model.
pub fn draft_tree(draft: &DraftModel, ctx: &DraftContext, config: &TreeConfig) -> Result<DraftTree> {
    let prefix = DraftPrefix::new(draft, ctx)?;
    grow_tree(config, |tree, frontier| {
        let (logits, regress) = prefix.rows(draft, tree)?;
        Ok(frontier
            .iter()
            .map(|f| {
                let row = f.map_or(0, |i| i + 1);
                (log_softmax(logits.row(row)), regress.row(row).to_vec())
            })
            .collect())
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainStep {
    pub token: Token,
    /// Regress feature paired with `token` as draft input.
    pub feature: Vec<f64>,
    /// Draft distribution the token was chosen from.
    pub probs: Vec<f64>,
}

/// Self-conditioned chain of `depth` draft tokens. Greedy when `temperature <= 0`,
/// otherwise each token is sampled from the tempered draft distribution.
pub fn draft_chain<R: Rng + ?Sized>(
    draft: &DraftModel,
    ctx: &DraftContext,
    depth: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<ChainStep>> {
    if depth == 0 {
        return Err(Error::InvalidInput("chain depth must be at least 1".into()));
    }
    let prefix = DraftPrefix::new(draft, ctx)?;
    let mut tree = DraftTree::default();
    let mut steps = Vec::with_capacity(depth);
    for k in 0..depth {
        let (logits, regress) = prefix.rows(draft, &tree)?;
        tree.draft_passes += 1;
        let row = k;
        let feature = regress.row(row).to_vec();
        let (token, probs) = if temperature > 0.0 {
            let probs = softmax_with_temperature(logits.row(row), temperature);
            (sample_index(&probs, rng), probs)
        } else {
            let probs = softmax_with_temperature(logits.row(row), 1.0);
            (argmax(logits.row(row)), probs)
        };
        tree.nodes.push(TreeNode {
            token,
            parent: k.checked_sub(1),
            depth: k + 1,
            log_prob: probs[token].ln(),
            cum_log_prob: 0.0,
            feature: feature.clone(),
        });
        steps.push(ChainStep { token, feature, probs });
    }
    Ok(steps)
}

/// A chain as a single-path tree.
pub fn chain_tree(steps: &[ChainStep]) -> DraftTree {
    let mut cum = 0.0;
    DraftTree {
        nodes: steps
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let lp = s.probs[s.token].ln();
                cum += lp;
                TreeNode {
                    token: s.token,
                    parent: k.checked_sub(1),
                    depth: k + 1,
                    log_prob: lp,
                    cum_log_prob: cum,
                    feature: s.feature.clone(),
                }
            })
            .collect(),
        draft_passes: steps.len(),
    }
}

/// One target forward over `committed` followed by the tree nodes.
/// Row `committed.len() - 1` scores the root's children; row `committed.len() + i` scores node `i`'s.
pub fn target_tree_forward(
    target: &TargetModel,
    committed: &[Token],
    tree: &DraftTree,
) -> Result<crate::target::TargetOutput> {
    if committed.is_empty() {
        return Err(Error::InvalidInput("empty context".into()));
    }
    let mut tokens = committed.to_vec();
    tokens.extend(tree.nodes.iter().map(|n| n.token));
    target.forward_with_plan(&tokens, &tree_plan(committed.len(), tree))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleMetrics {
    pub accepted: usize,
    /// `accepted + 1`.
    pub tau: usize,
    pub draft_passes: usize,
    pub target_passes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    /// Accepted node indices, root side first.
    pub accepted: Vec<usize>,
    pub tokens: Vec<Token>,
    pub bonus: Token,
    pub metrics: CycleMetrics,
}

fn finish(tree: &DraftTree, accepted: Vec<usize>, bonus: Token) -> Verification {
    Verification {
        tokens: accepted.iter().map(|&i| tree.nodes[i].token).collect(),
        metrics: CycleMetrics {
            accepted: accepted.len(),
            tau: accepted.len() + 1,
            draft_passes: tree.draft_passes,
            target_passes: 1,
        },
        accepted,
        bonus,
    }
}

/// Greedy acceptance. `logits` holds the root row first, then one row per node.
pub fn verify_greedy(tree: &DraftTree, logits: &Tensor) -> Result<Verification> {
    check_rows(tree, logits)?;
    let mut accepted = Vec::new();
    let mut cur: Option<usize> = None;
    loop {
        let row = cur.map_or(0, |i| i + 1);
        let want = argmax(logits.row(row));
        match tree.children(cur).find(|&c| tree.nodes[c].token == want) {
            Some(c) => {
                accepted.push(c);
                cur = Some(c);
            }
            None => return Ok(finish(tree, accepted, want)),
        }
    }
}

fn check_rows(tree: &DraftTree, logits: &Tensor) -> Result<()> {
    if logits.rows() != tree.len() + 1 {
        return Err(Error::ShapeMismatch {
            expected: vec![tree.len() + 1, logits.cols()],
            actual: logits.shape().to_vec(),
        });
    }
    Ok(())
}

/// Probability of keeping a draft token proposed with probability `q_x`
/// when the target assigns it `p_x`.
pub fn accept_probability(p_x: f64, q_x: f64) -> f64 {
    if q_x <= 0.0 {
        0.0
    } else {
        (p_x / q_x).min(1.0)
    }
}

/// Normalized `max(0, p - q)`; falls back to `p` when the residual has no mass.
pub fn residual_distribution(p: &[f64], q: &[f64]) -> Vec<f64> {
    let mut r: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a - b).max(0.0)).collect();
    let s: f64 = r.iter().sum();
    if s > 0.0 && s.is_finite() {
        r.iter_mut().for_each(|v| *v /= s);
        r
    } else {
        p.to_vec()
    }
}

/// Residual after rejecting a point-mass proposal of `token`.
pub fn remove_token(p: &[f64], token: Token) -> Vec<f64> {
    let mut q = vec![0.0; p.len()];
    q[token] = 1.0;
    residual_distribution(p, &q)
}

/// Sampling acceptance over a deterministic tree. Each child is a point-mass
/// proposal, so it is accepted with the current target probability of its
/// token; on rejection that token is removed and the target renormalized.
pub fn verify_sampling_tree<R: Rng + ?Sized>(
    tree: &DraftTree,
    logits: &Tensor,
    temperature: f64,
    rng: &mut R,
) -> Result<Verification> {
    if temperature <= 0.0 {
        return verify_greedy(tree, logits);
    }
    check_rows(tree, logits)?;
    let mut accepted = Vec::new();
    let mut cur: Option<usize> = None;
    'walk: loop {
        let row = cur.map_or(0, |i| i + 1);
        let mut p = softmax_with_temperature(logits.row(row), temperature);
        for c in tree.children(cur).collect::<Vec<_>>() {
            let tok = tree.nodes[c].token;
            if rng.random::<f64>() < accept_probability(p[tok], 1.0) {
                accepted.push(c);
                cur = Some(c);
                continue 'walk;
            }
            p = remove_token(&p, tok);
        }
        return Ok(finish(tree, accepted, sample_index(&p, rng)));
    }
}

/// Standard chain speculative sampling: accept with `min(1, p/q)`, else draw
/// from the normalized residual `max(0, p - q)`.
pub fn verify_sampling_chain<R: Rng + ?Sized>(
    steps: &[ChainStep],
    logits: &Tensor,
    temperature: f64,
    rng: &mut R,
) -> Result<Verification> {
    let tree = chain_tree(steps);
    if temperature <= 0.0 {
        return verify_greedy(&tree, logits);
    }
    check_rows(&tree, logits)?;
    let mut accepted = Vec::new();
    for (k, step) in steps.iter().enumerate() {
        let p = softmax_with_temperature(logits.row(k), temperature);
        if rng.random::<f64>() < accept_probability(p[step.token], step.probs[step.token]) {
            accepted.push(k);
            continue;
        }
        let residual = residual_distribution(&p, &step.probs);
        return Ok(finish(&tree, accepted, sample_index(&residual, rng)));
    }
    let p = softmax_with_temperature(logits.row(steps.len()), temperature);
    Ok(finish(&tree, accepted, sample_index(&p, rng)))
}

/// One line of the decode trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleTrace {
    pub cycle: usize,
    pub tree_tokens: Vec<Token>,
    /// `-1` marks children of the root.
    pub tree_parents: Vec<i64>,
    pub accepted_nodes: Vec<usize>,
    pub accepted: Vec<Token>,
    pub bonus: Token,
    pub tau: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub tokens: Vec<Token>,
    pub cycles: Vec<CycleMetrics>,
}

impl Generation {
    pub fn mean_tau(&self) -> f64 {
        if self.cycles.is_empty() {
            return 0.0;
        }
        self.cycles.iter().map(|c| c.tau as f64).sum::<f64>() / self.cycles.len() as f64
    }
}

/// Speculative generation of `config.max_new_tokens` tokens after `prompt`.
pub fn generate<R, F>(
    target: &TargetModel,
    draft: &DraftModel,
    prompt: &[Token],
    config: &DecodeConfig,
    rng: &mut R,
    mut trace: F,
) -> Result<Generation>
where
    R: Rng + ?Sized,
    F: FnMut(&CycleTrace),
{
    config.tree.validate()?;
    let greedy = config.temperature <= 0.0;
    let mut out = Generation::default();
    if config.max_new_tokens == 0 {
        return Ok(out);
    }
    let pre = target.forward(prompt)?;
    let last = pre.logits.row(prompt.len() - 1);
    let first = if greedy {
        argmax(last)
    } else {
        sample_index(&softmax_with_temperature(last, config.temperature), rng)
    };
    let mut committed = prompt.to_vec();
    committed.push(first);
    out.tokens.push(first);
    let mut features = pre.features;

    while out.tokens.len() < config.max_new_tokens {
        let ctx = DraftContext {
            tokens: &committed,
            features: &features,
        };
        let (tree, steps) = match config.mode {
            DraftMode::Tree => (draft_tree(draft, &ctx, &config.tree)?, None),
            DraftMode::Chain => {
                let steps = draft_chain(draft, &ctx, config.tree.max_depth, config.temperature, rng)?;
                (chain_tree(&steps), Some(steps))
            }
        };
        let verify = target_tree_forward(target, &committed, &tree)?;
        let root = committed.len() - 1;
        let rows: Vec<f64> = verify.logits.data()[root * verify.logits.cols()..].to_vec();
        let logits = Tensor::matrix(tree.len() + 1, verify.logits.cols(), rows)?;
        let v = match (&steps, greedy) {
            (_, true) => verify_greedy(&tree, &logits)?,
            (Some(steps), false) => verify_sampling_chain(steps, &logits, config.temperature, rng)?,
            (None, false) => verify_sampling_tree(&tree, &logits, config.temperature, rng)?,
        };
        trace(&CycleTrace {
            cycle: out.cycles.len(),
            tree_tokens: tree.nodes.iter().map(|n| n.token).collect(),
            tree_parents: tree.nodes.iter().map(|n| n.parent.map_or(-1, |p| p as i64)).collect(),
            accepted_nodes: v.accepted.clone(),
            accepted: v.tokens.clone(),
            bonus: v.bonus,
            tau: v.metrics.tau,
        });
        let d = verify.features.cols();
        let mut f = verify.features.data()[..committed.len() * d].to_vec();
        for &node in &v.accepted {
            f.extend_from_slice(verify.features.row(committed.len() + node));
        }
        committed.extend(&v.tokens);
        committed.push(v.bonus);
        features = Tensor::matrix(committed.len() - 1, d, f)?;
        out.tokens.extend(&v.tokens);
        out.tokens.push(v.bonus);
        out.cycles.push(v.metrics);
    }
    out.tokens.truncate(config.max_new_tokens);
    Ok(out)
}

/// Mismatch rate between greedy self-conditioned draft tokens and the corpus,
/// per forward index `1..=forwards`. Chains start at every `stride`-th prefix.
pub fn misalignment_probe(
    draft: &DraftModel,
    data: &[TrainSequence],
    forwards: usize,
    stride: usize,
) -> Result<Vec<f64>> {
    if forwards == 0 || stride == 0 {
        return Err(Error::InvalidInput("forwards and stride must be at least 1".into()));
    }
    let mut miss = vec![0usize; forwards];
    let mut count = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for seq in data {
        let len = seq.tokens.len();
        let mut a = 1;
        while a + forwards < len {
            let ctx = DraftContext {
                tokens: &seq.tokens[..=a],
                features: &seq.features,
            };
            let chain = draft_chain(draft, &ctx, forwards, 0.0, &mut rng)?;
            for (i, step) in chain.iter().enumerate() {
                miss[i] += usize::from(step.token != seq.tokens[a + 1 + i]);
            }
            count += 1;
            a += stride;
        }
    }
    if count == 0 {
        return Err(Error::InvalidInput(format!(
            "no sequence is longer than {} tokens",
            forwards + 1
        )));
    }
    Ok(miss.iter().map(|&m| m as f64 / count as f64).collect())
}

/// Top-1 accuracy of the teacher-forced draft at positions `1, 1+stride, ..`
/// (the first token of each probe chain).
pub fn teacher_forced_accuracy(draft: &DraftModel, data: &[TrainSequence], forwards: usize, stride: usize) -> Result<f64> {
    let mut hits = 0usize;
    let mut count = 0usize;
    for seq in data {
        let len = seq.tokens.len();
        let m = len - 1;
        let d = seq.features.cols();
        let feats = Tensor::matrix(m, d, seq.features.data()[..m * d].to_vec())?;
        let out = draft.forward(&seq.tokens[1..], &feats)?;
        let logits = draft.draft_logits(&out.predict)?;
        let mut a = 1;
        while a + forwards < len {
            hits += usize::from(argmax(logits.row(a - 1)) == seq.tokens[a + 1]);
            count += 1;
            a += stride;
        }
    }
    if count == 0 {
        return Err(Error::InvalidInput("no probe positions".into()));
    }
    Ok(hits as f64 / count as f64)
}
