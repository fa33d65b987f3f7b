//! Training objectives.
//!
//! Each loss exists in two forms. The graph form (`*_graph`) records onto an
//! autodiff [`Graph`] from a `T × V` logits node and is what training uses.
//! The value form takes a row-stochastic probability matrix, such as
//! [`StepDistributions::probs`](crate::model::StepDistributions), and
//! evaluates the same graph without backpropagation.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Matrix, NodeId, ParamStore};
use crate::corpus::TokenId;
use crate::error::{Error, Result};

/// How the negative token is chosen at each step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateRule {
    /// Most probable knowledge token other than the target.
    #[default]
    ArgmaxKnowledge,
    /// Knowledge token drawn in proportion to its probability.
    SampleByProb,
    /// Knowledge token drawn uniformly.
    RandomKnowledge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenLossConfig {
    pub alpha: f64,
    pub candidate_rule: CandidateRule,
    /// Penalized probabilities are clamped to at most `1 - epsilon`.
    pub epsilon: f64,
}

impl Default for TokenLossConfig {
    fn default() -> Self {
        TokenLossConfig {
            alpha: 4.0,
            candidate_rule: CandidateRule::ArgmaxKnowledge,
            epsilon: 1e-7,
        }
    }
}

impl TokenLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::Config(format!(
                "alpha must be finite and non-negative, got {}",
                self.alpha
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1e-3) {
            return Err(Error::Config(format!(
                "epsilon must lie in (0, 1e-3), got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeqLossConfig {
    pub lambda: f64,
    /// Weight on each hard negative in the denominator.
    pub mu: f64,
}

impl Default for SeqLossConfig {
    fn default() -> Self {
        SeqLossConfig {
            lambda: 1.0,
            mu: 2.0,
        }
    }
}

impl SeqLossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("mu", self.mu)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// The negative chosen at one decoding step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub id: TokenId,
    /// Detached probability of the candidate.
    pub p_c: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NegativeCandidateSet {
    /// One entry per target step; `None` where no candidate exists.
    pub steps: Vec<Option<Candidate>>,
}

impl NegativeCandidateSet {
    pub fn n_skipped(&self) -> usize {
        self.steps.iter().filter(|c| c.is_none()).count()
    }
}

/// Nodes recorded by [`token_contrastive_graph`] and [`ul_graph`].
#[derive(Debug, Clone)]
pub struct TokenLossNodes {
    pub loss: NodeId,
    pub mle: NodeId,
    /// The weighted penalty, `alpha` included.
    pub penalty: NodeId,
    pub candidates: NegativeCandidateSet,
}

/// `cos((1 - p) π) + 1`.
pub fn beta_weight(p_c: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p_c) {
        return Err(Error::Parameter(format!(
            "probability {p_c} outside [0, 1]"
        )));
    }
    Ok(((1.0 - p_c) * PI).cos() + 1.0)
}

pub fn select_negative_token<R: Rng + ?Sized>(
    prob_row: &[f64],
    knowledge_ids: &BTreeSet<TokenId>,
    target_id: TokenId,
    rule: CandidateRule,
    rng: &mut R,
) -> Option<Candidate> {
    let pool: Vec<TokenId> = knowledge_ids
        .iter()
        .copied()
        .filter(|&id| id != target_id && (id as usize) < prob_row.len())
        .collect();
    if pool.is_empty() {
        return None;
    }
    let id = match rule {
        CandidateRule::ArgmaxKnowledge => {
            // Ascending iteration with a strict comparison keeps the smallest id on ties.
            let mut best = pool[0];
            for &id in &pool[1..] {
                if prob_row[id as usize] > prob_row[best as usize] {
                    best = id;
                }
            }
            best
        }
        CandidateRule::SampleByProb => {
            let total: f64 = pool.iter().map(|&id| prob_row[id as usize]).sum();
            if total > 0.0 {
                let mut u = rng.random::<f64>() * total;
                let mut pick = *pool.last().expect("non-empty");
                for &id in &pool {
                    u -= prob_row[id as usize];
                    if u < 0.0 {
                        pick = id;
                        break;
                    }
                }
                pick
            } else {
                pool[rng.random_range(0..pool.len())]
            }
        }
        CandidateRule::RandomKnowledge => pool[rng.random_range(0..pool.len())],
    };
    let p_c = prob_row[id as usize].clamp(0.0, 1.0);
    Some(Candidate {
        id,
        p_c,
        beta: beta_weight(p_c).expect("clamped"),
    })
}

fn check_target(g: &Graph, logits: NodeId, target: &[TokenId]) -> Result<()> {
    let (rows, cols) = g.value(logits).dim();
    if rows != target.len() {
        return Err(Error::Shape(format!(
            "{rows} distribution rows for a target of {}",
            target.len()
        )));
    }
    if let Some(&bad) = target.iter().find(|&&t| t as usize >= cols) {
        return Err(Error::Vocabulary(format!(
            "target id {bad} outside vocabulary of {cols}"
        )));
    }
    Ok(())
}

/// Sum over steps of `-log p(y_t)`.
pub fn mle_graph(g: &mut Graph, logits: NodeId, target: &[TokenId]) -> Result<NodeId> {
    check_target(g, logits, target)?;
    let lp = g.log_softmax(logits);
    let idx: Vec<_> = target
        .iter()
        .enumerate()
        .map(|(t, &y)| (t, y as usize))
        .collect();
    let picked = g.pick(lp, &idx);
    let s = g.sum(picked);
    let loss = g.scale(s, -1.0);
    if !g.scalar(loss).is_finite() {
        return Err(Error::Numeric("target token has zero probability".into()));
    }
    Ok(loss)
}

/// `sum_i w_i * -log(1 - min(p[r_i, c_i], 1 - eps))` as a 1×1 node.
fn penalty_graph(
    g: &mut Graph,
    probs: NodeId,
    idx: &[(usize, usize)],
    weights: &[f64],
    eps: f64,
) -> NodeId {
    if idx.is_empty() {
        return g.input(Matrix::zeros((1, 1)));
    }
    let p = g.pick(probs, idx);
    let p = g.clamp_max(p, 1.0 - eps);
    let one_minus = g.affine(p, -1.0, 1.0);
    let log = g.ln(one_minus);
    let w = g.input(Matrix::from_shape_vec((weights.len(), 1), weights.to_vec()).expect("column"));
    let weighted = g.mul(log, w);
    let s = g.sum(weighted);
    g.scale(s, -1.0)
}

/// MLE plus the weighted unlikelihood penalty on one knowledge token per step.
pub fn token_contrastive_graph<R: Rng + ?Sized>(
    g: &mut Graph,
    logits: NodeId,
    target: &[TokenId],
    knowledge_ids: &BTreeSet<TokenId>,
    cfg: &TokenLossConfig,
    rng: &mut R,
) -> Result<TokenLossNodes> {
    cfg.validate()?;
    let mle = mle_graph(g, logits, target)?;
    let probs = g.softmax(logits);
    let values = g.value(probs);
    let steps: Vec<Option<Candidate>> = target
        .iter()
        .enumerate()
        .map(|(t, &y)| {
            let row = values.row(t);
            select_negative_token(
                row.as_slice().expect("contiguous"),
                knowledge_ids,
                y,
                cfg.candidate_rule,
                rng,
            )
        })
        .collect();
    let (idx, weights): (Vec<_>, Vec<_>) = steps
        .iter()
        .enumerate()
        .filter_map(|(t, c)| c.map(|c| ((t, c.id as usize), cfg.alpha * c.beta)))
        .unzip();
    let penalty = penalty_graph(g, probs, &idx, &weights, cfg.epsilon);
    let loss = g.add(mle, penalty);
    Ok(TokenLossNodes {
        loss,
        mle,
        penalty,
        candidates: NegativeCandidateSet { steps },
    })
}

/// Unlikelihood-training baseline: MLE plus `alpha` times the penalty on
/// every source or earlier target token except the current target.
pub fn ul_graph(
    g: &mut Graph,
    logits: NodeId,
    target: &[TokenId],
    source: &[TokenId],
    alpha: f64,
    epsilon: f64,
) -> Result<TokenLossNodes> {
    let mle = mle_graph(g, logits, target)?;
    let cols = g.value(logits).ncols();
    let probs = g.softmax(logits);
    let mut seen: BTreeSet<TokenId> = source
        .iter()
        .copied()
        .filter(|&t| (t as usize) < cols)
        .collect();
    let mut idx = Vec::new();
    for (t, &y) in target.iter().enumerate() {
        idx.extend(seen.iter().filter(|&&c| c != y).map(|&c| (t, c as usize)));
        seen.insert(y);
    }
    let weights = vec![alpha; idx.len()];
    let penalty = penalty_graph(g, probs, &idx, &weights, epsilon);
    Ok(TokenLossNodes {
        loss: g.add(mle, penalty),
        mle,
        penalty,
        candidates: NegativeCandidateSet::default(),
    })
}

/// InfoNCE over cosine similarities, with the positive in the denominator
/// and each hard negative weighted by `mu`.
pub fn infonce_graph(
    g: &mut Graph,
    z_x: NodeId,
    z_pos: NodeId,
    batch_negatives: &[NodeId],
    hard_negatives: &[NodeId],
    cfg: &SeqLossConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    let all = [z_x, z_pos]
        .into_iter()
        .chain(batch_negatives.iter().copied())
        .chain(hard_negatives.iter().copied());
    let n = g.value(z_x).len();
    for z in all {
        let v = g.value(z);
        if v.len() != n {
            return Err(Error::Shape(format!(
                "representation of length {} against {n}",
                v.len()
            )));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Numeric(
                "representation has zero or non-finite norm".into(),
            ));
        }
    }
    let mut scores = vec![g.cosine(z_x, z_pos)];
    for &b in batch_negatives {
        scores.push(g.cosine(z_x, b));
    }
    if cfg.mu > 0.0 {
        let shift = cfg.mu.ln();
        for &h in hard_negatives {
            let s = g.cosine(z_x, h);
            scores.push(g.affine(s, 1.0, shift));
        }
    }
    let row = g.concat_cols(&scores);
    let lp = g.log_softmax(row);
    let first = g.pick(lp, &[(0, 0)]);
    Ok(g.scale(first, -1.0))
}

fn with_probs<T>(probs: &Matrix, f: impl FnOnce(&mut Graph, NodeId) -> Result<T>) -> Result<T> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let logits = g.input(probs.mapv(f64::ln));
    f(&mut g, logits)
}

pub fn mle_loss(probs: &Matrix, target: &[TokenId]) -> Result<f64> {
    with_probs(probs, |g, l| mle_graph(g, l, target).map(|n| g.scalar(n)))
}

pub fn ul_loss_baseline(
    probs: &Matrix,
    target: &[TokenId],
    source: &[TokenId],
    alpha: f64,
    epsilon: f64,
) -> Result<f64> {
    with_probs(probs, |g, l| {
        ul_graph(g, l, target, source, alpha, epsilon).map(|n| g.scalar(n.loss))
    })
}

pub fn token_contrastive_loss<R: Rng + ?Sized>(
    probs: &Matrix,
    target: &[TokenId],
    knowledge_ids: &BTreeSet<TokenId>,
    cfg: &TokenLossConfig,
    rng: &mut R,
) -> Result<(f64, NegativeCandidateSet)> {
    with_probs(probs, |g, l| {
        token_contrastive_graph(g, l, target, knowledge_ids, cfg, rng)
            .map(|n| (g.scalar(n.loss), n.candidates))
    })
}

pub fn infonce_seq_loss(
    z_x: &[f64],
    z_pos: &[f64],
    batch_negatives: &[Vec<f64>],
    hard_negatives: &[Vec<f64>],
    cfg: &SeqLossConfig,
) -> Result<f64> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let mut row =
        |v: &[f64]| g.input(Matrix::from_shape_vec((1, v.len()), v.to_vec()).expect("row"));
    let (x, p) = (row(z_x), row(z_pos));
    let b: Vec<_> = batch_negatives.iter().map(|v| row(v)).collect();
    let h: Vec<_> = hard_negatives.iter().map(|v| row(v)).collect();
    let loss = infonce_graph(&mut g, x, p, &b, &h, cfg)?;
    Ok(g.scalar(loss))
}

pub fn final_loss(token_loss: f64, seq_loss: f64, lambda: f64) -> f64 {
    token_loss + lambda * seq_loss
}

fn check_grad_args(p_i: f64, p_c: f64) -> Result<()> {
    if p_c == 1.0 {
        return Err(Error::Numeric("gradient is singular at p_c = 1".into()));
    }
    let open = |p: f64| p > 0.0 && p < 1.0;
    if !open(p_i) || !open(p_c) || p_i + p_c > 1.0 + 1e-12 {
        return Err(Error::Parameter(format!(
            "need p_i, p_c in (0, 1) with p_i + p_c <= 1, got {p_i}, {p_c}"
        )));
    }
    Ok(())
}

/// Magnitude of the gradient of the token loss with respect to the
/// ground-truth logit, `1 - p_i (1 - alpha beta(p_c) p_c / (1 - p_c))`.
/// The descent gradient is the negative of this value.
pub fn analytic_gradient_gt_logit(p_i: f64, p_c: f64, alpha: f64) -> Result<f64> {
    check_grad_args(p_i, p_c)?;
    Ok(1.0 - p_i * (1.0 - alpha * beta_weight(p_c)? * p_c / (1.0 - p_c)))
}

/// The same quantity without the `beta` reweighting.
pub fn analytic_gradient_gt_logit_unweighted(p_i: f64, p_c: f64, alpha: f64) -> Result<f64> {
    check_grad_args(p_i, p_c)?;
    Ok(1.0 - p_i * (1.0 - alpha * p_c / (1.0 - p_c)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    fn probs(rows: &[&[f64]]) -> Matrix {
        Matrix::from_shape_fn((rows.len(), rows[0].len()), |(r, c)| rows[r][c])
    }

    fn set(ids: &[TokenId]) -> BTreeSet<TokenId> {
        ids.iter().copied().collect()
    }

    fn random_probs(rng: &mut ChaCha8Rng, t: usize, v: usize) -> Matrix {
        let mut m = Matrix::from_shape_fn((t, v), |_| rng.random_range(0.05..1.0));
        for mut row in m.rows_mut() {
            let s = row.sum();
            row /= s;
        }
        m
    }

    #[test]
    fn mle_closed_forms() {
        let one_hot = probs(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0]]);
        assert_abs_diff_eq!(mle_loss(&one_hot, &[1, 0]).unwrap(), 0.0, epsilon = 1e-12);
        let uniform = Matrix::from_elem((4, 5), 0.2);
        assert_abs_diff_eq!(
            mle_loss(&uniform, &[0, 1, 2, 3]).unwrap(),
            4.0 * 5f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn mle_matches_direct_sum() {
        let mut r = rng();
        for _ in 0..50 {
            let p = random_probs(&mut r, 4, 6);
            let target: Vec<TokenId> = (0..4).map(|_| r.random_range(0..6)).collect();
            let oracle: f64 = target
                .iter()
                .enumerate()
                .map(|(t, &y)| -p[[t, y as usize]].ln())
                .sum();
            assert_abs_diff_eq!(mle_loss(&p, &target).unwrap(), oracle, epsilon = 1e-10);
        }
    }

    #[test]
    fn mle_errors() {
        let p = probs(&[&[1.0, 0.0]]);
        assert!(matches!(mle_loss(&p, &[1]), Err(Error::Numeric(_))));
        assert!(matches!(mle_loss(&p, &[0, 1]), Err(Error::Shape(_))));
        assert!(matches!(mle_loss(&p, &[5]), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn ul_baseline() {
        let mut r = rng();
        let p = random_probs(&mut r, 3, 5);
        let target = [1, 2, 1];
        assert_eq!(
            ul_loss_baseline(&p, &target, &[3, 4], 0.0, 1e-7).unwrap(),
            mle_loss(&p, &target).unwrap()
        );

        let zero_cands = probs(&[&[0.0, 1.0, 0.0]]);
        assert_abs_diff_eq!(
            ul_loss_baseline(&zero_cands, &[1], &[0, 2], 3.0, 1e-7).unwrap(),
            0.0,
            epsilon = 1e-12
        );

        // Step 0 penalizes source {0, 3}; step 1 penalizes {0, 3} and the earlier target 2.
        let p = probs(&[&[0.1, 0.2, 0.3, 0.4], &[0.25, 0.4, 0.15, 0.2]]);
        let by_hand = -(0.3f64.ln()) - (0.4f64.ln())
            + 2.0 * (-(0.9f64.ln()) - 0.6f64.ln() - 0.75f64.ln() - 0.85f64.ln() - 0.8f64.ln());
        assert_abs_diff_eq!(
            ul_loss_baseline(&p, &[2, 1], &[0, 3, 3], 2.0, 1e-7).unwrap(),
            by_hand,
            epsilon = 1e-10
        );
    }

    #[test]
    fn beta_values() {
        assert_abs_diff_eq!(beta_weight(1.0).unwrap(), 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(beta_weight(0.0).unwrap(), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(beta_weight(0.5).unwrap(), 1.0, epsilon = 1e-15);
        assert!(matches!(beta_weight(1.5), Err(Error::Parameter(_))));
        assert!(beta_weight(-0.1).is_err());
    }

    #[test]
    fn candidate_selection() {
        let mut r = rng();
        let row = [0.1, 0.0, 0.0, 0.2, 0.0, 0.0, 0.0, 0.5, 0.2];
        let rule = CandidateRule::ArgmaxKnowledge;
        assert_eq!(
            select_negative_token(&row, &set(&[7]), 7, rule, &mut r),
            None
        );
        assert_eq!(
            select_negative_token(&row, &set(&[3, 7]), 0, rule, &mut r)
                .unwrap()
                .id,
            7
        );
        assert_eq!(
            select_negative_token(&row, &set(&[3, 7]), 7, rule, &mut r)
                .unwrap()
                .id,
            3
        );
        let tie = [0.0, 0.0, 0.0, 0.3, 0.0, 0.0, 0.0, 0.3, 0.4];
        let c = select_negative_token(&tie, &set(&[7, 3]), 8, rule, &mut r).unwrap();
        assert_eq!(c.id, 3);
        assert_abs_diff_eq!(c.p_c, 0.3);
        assert_abs_diff_eq!(c.beta, beta_weight(0.3).unwrap());
    }

    #[test]
    fn sampled_candidates_stay_in_knowledge() {
        let mut r = rng();
        let row = [0.1, 0.2, 0.3, 0.0, 0.4];
        let k = set(&[1, 2, 3]);
        let mut seen = BTreeSet::new();
        for rule in [CandidateRule::SampleByProb, CandidateRule::RandomKnowledge] {
            for _ in 0..200 {
                let c = select_negative_token(&row, &k, 2, rule, &mut r).unwrap();
                assert!(c.id == 1 || c.id == 3);
                if rule == CandidateRule::SampleByProb {
                    assert_eq!(c.id, 1, "zero-probability id never sampled");
                }
                seen.insert(c.id);
            }
        }
        assert_eq!(seen, set(&[1, 3]));
    }

    #[test]
    fn token_loss_worked_example() {
        let p = probs(&[&[0.5, 0.25, 0.25]]);
        let (loss, cands) = token_contrastive_loss(
            &p,
            &[0],
            &set(&[1]),
            &TokenLossConfig::default(),
            &mut rng(),
        )
        .unwrap();
        let beta = (0.75 * PI).cos() + 1.0;
        assert_abs_diff_eq!(beta, 0.29289, epsilon = 1e-5);
        assert_abs_diff_eq!(
            loss,
            0.5f64.ln().abs() + 4.0 * beta * -(0.75f64.ln()),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(loss, 1.0302, epsilon = 1e-4);
        assert_eq!(cands.steps[0].unwrap().id, 1);
    }

    #[test]
    fn token_loss_reduces_to_mle() {
        let mut r = rng();
        let p = random_probs(&mut r, 5, 7);
        let target = [1, 2, 3, 4, 5];
        let cfg = TokenLossConfig {
            alpha: 0.0,
            ..TokenLossConfig::default()
        };
        let (loss, _) =
            token_contrastive_loss(&p, &target, &set(&[2, 3, 6]), &cfg, &mut r).unwrap();
        assert_abs_diff_eq!(loss, mle_loss(&p, &target).unwrap(), epsilon = 1e-12);

        // A vanishing candidate probability suppresses both beta and the log term.
        let p = probs(&[&[0.999_999, 1e-6, 0.0]]);
        let (loss, cands) =
            token_contrastive_loss(&p, &[0], &set(&[1]), &TokenLossConfig::default(), &mut r)
                .unwrap();
        assert!(cands.steps[0].unwrap().beta < 1e-10);
        assert_abs_diff_eq!(loss, mle_loss(&p, &[0]).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn token_loss_skips_missing_candidates() {
        let p = probs(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let (loss, cands) = token_contrastive_loss(
            &p,
            &[0, 1],
            &set(&[1]),
            &TokenLossConfig::default(),
            &mut rng(),
        )
        .unwrap();
        assert_eq!(cands.n_skipped(), 1);
        assert_abs_diff_eq!(
            loss,
            2.0 * 2f64.ln() + 4.0 * 1.0 * 2f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn saturated_candidate_is_clamped() {
        let p = probs(&[&[0.0, 1.0]]);
        let logits = p.mapv(f64::ln);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let l = g.input(logits);
        let probs = g.softmax(l);
        let pen = penalty_graph(&mut g, probs, &[(0, 1)], &[1.0], 1e-7);
        assert_abs_diff_eq!(g.scalar(pen), -(1e-7f64.ln()), epsilon = 1e-6);
    }

    #[test]
    fn gradient_worked_examples() {
        assert_abs_diff_eq!(
            analytic_gradient_gt_logit(0.3, 0.2, 0.0).unwrap(),
            0.7,
            epsilon = 1e-12
        );
        let v = analytic_gradient_gt_logit(0.5, 0.25, 4.0).unwrap();
        assert_abs_diff_eq!(v, 0.6953, epsilon = 1e-4);
        assert!(matches!(
            analytic_gradient_gt_logit(0.0, 1.0, 4.0),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            analytic_gradient_gt_logit(0.8, 0.3, 4.0),
            Err(Error::Parameter(_))
        ));
    }

    /// Autodiff gradient of the token loss at the ground-truth logit.
    fn autodiff_gt_grad(logits: &[f64], target: usize, knowledge: TokenId) -> (f64, f64, f64) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let l = g.input(Matrix::from_shape_vec((1, logits.len()), logits.to_vec()).unwrap());
        let nodes = token_contrastive_graph(
            &mut g,
            l,
            &[target as TokenId],
            &set(&[knowledge]),
            &TokenLossConfig::default(),
            &mut rng(),
        )
        .unwrap();
        let b = g.backward(&[(nodes.loss, Matrix::ones((1, 1)))]);
        let grad = b.node(l).unwrap()[[0, target]];
        let mut p = logits.to_vec();
        let max = p.iter().cloned().fold(f64::MIN, f64::max);
        p.iter_mut().for_each(|x| *x = (*x - max).exp());
        let s: f64 = p.iter().sum();
        (grad, p[target] / s, p[knowledge as usize] / s)
    }

    #[test]
    fn finite_difference_of_worked_gradient() {
        let logits = [0.5f64.ln(), 0.25f64.ln(), 0.25f64.ln()];
        let beta = beta_weight(0.25).unwrap();
        let f = |z0: f64| {
            let z = [z0, logits[1], logits[2]];
            let s: f64 = z.iter().map(|v| v.exp()).sum();
            let (pi, pc) = (z[0].exp() / s, z[1].exp() / s);
            -pi.ln() + 4.0 * beta * -(1.0 - pc).ln()
        };
        let h = 1e-6;
        let numeric = (f(logits[0] + h) - f(logits[0] - h)) / (2.0 * h);
        assert_abs_diff_eq!(
            -numeric,
            analytic_gradient_gt_logit(0.5, 0.25, 4.0).unwrap(),
            epsilon = 1e-6
        );
        let (auto, _, _) = autodiff_gt_grad(&logits, 0, 1);
        assert_abs_diff_eq!(auto, numeric, epsilon = 1e-6);
    }

    #[test]
    fn unweighted_variant_can_exceed_one() {
        // Above 1 exactly when p_c > 1 / (1 + alpha).
        assert!(analytic_gradient_gt_logit_unweighted(0.5, 0.3, 4.0).unwrap() > 1.0);
        assert!(analytic_gradient_gt_logit_unweighted(0.5, 0.1, 4.0).unwrap() < 1.0);
        assert!(analytic_gradient_gt_logit(0.5, 0.3, 4.0).unwrap() < 1.0);
    }

    #[test]
    fn infonce_closed_forms() {
        let cfg = SeqLossConfig::default();
        let x = [1.0, 0.0];
        let y = [0.6, 0.8];
        assert_abs_diff_eq!(
            infonce_seq_loss(&x, &y, &[], &[], &cfg).unwrap(),
            0.0,
            epsilon = 1e-12
        );
        let same = vec![0.6, -0.8];
        let log2 = infonce_seq_loss(&x, &y, std::slice::from_ref(&same), &[], &cfg).unwrap();
        assert_abs_diff_eq!(log2, 2f64.ln(), epsilon = 1e-12);
        let log3 = infonce_seq_loss(&x, &y, &[], std::slice::from_ref(&same), &cfg).unwrap();
        assert_abs_diff_eq!(log3, 3f64.ln(), epsilon = 1e-12);
        let mu0 = SeqLossConfig {
            mu: 0.0,
            ..cfg.clone()
        };
        assert_abs_diff_eq!(
            infonce_seq_loss(&x, &y, &[], &[same], &mu0).unwrap(),
            0.0,
            epsilon = 1e-12
        );
        assert!(matches!(
            infonce_seq_loss(&x, &[0.0, 0.0], &[], &[], &cfg),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            infonce_seq_loss(&x, &[1.0], &[], &[], &cfg),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn final_loss_is_linear() {
        assert_eq!(final_loss(1.5, 7.0, 0.0), 1.5);
        assert_eq!(final_loss(1.0, 1.0, 1.0), 2.0);
        assert_abs_diff_eq!(
            final_loss(0.3, 0.7, 1.2) - final_loss(0.3, 0.7, 0.6),
            0.6 * 0.7,
            epsilon = 1e-12
        );
    }

    #[test]
    fn configs_validate() {
        assert!(TokenLossConfig {
            epsilon: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TokenLossConfig {
            epsilon: 1e-3,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TokenLossConfig {
            alpha: f64::NAN,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SeqLossConfig {
            mu: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SeqLossConfig::default().validate().is_ok());
    }

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    proptest! {
        #[test]
        fn beta_is_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(beta_weight(lo).unwrap() <= beta_weight(hi).unwrap() + 1e-15);
            prop_assert!((0.0..=2.0).contains(&beta_weight(a).unwrap()));
        }

        #[test]
        fn autodiff_matches_analytic_gradient(
            logits in prop::collection::vec(-3.0f64..3.0, 3..=8),
            t in 0usize..8,
            k in 0usize..8,
        ) {
            let v = logits.len();
            let (t, k) = (t % v, k % v);
            prop_assume!(t != k);
            let (auto, p_i, p_c) = autodiff_gt_grad(&logits, t, k as TokenId);
            let analytic = analytic_gradient_gt_logit(p_i, p_c, 4.0).unwrap();
            prop_assert!((auto + analytic).abs() < 1e-4, "auto {} analytic {}", auto, analytic);
        }

        #[test]
        fn losses_non_negative(seed in 0u64..1000, alpha in 0.0f64..10.0) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let p = random_probs(&mut r, 3, 6);
            let target: Vec<TokenId> = (0..3).map(|_| r.random_range(0..6)).collect();
            let cfg = TokenLossConfig { alpha, ..Default::default() };
            prop_assert!(mle_loss(&p, &target).unwrap() >= 0.0);
            prop_assert!(ul_loss_baseline(&p, &target, &[0, 5], alpha, 1e-7).unwrap() >= 0.0);
            prop_assert!(token_contrastive_loss(&p, &target, &set(&[1, 4]), &cfg, &mut r).unwrap().0 >= 0.0);
            let z: Vec<Vec<f64>> = (0..4).map(|_| (0..5).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
            prop_assert!(infonce_seq_loss(&z[0], &z[1], &z[2..3], &z[3..], &SeqLossConfig::default()).unwrap() >= 0.0);
        }

        #[test]
        fn infonce_increases_with_negative_similarity(
            a in 0.0f64..3.0, b in 0.0f64..3.0, mu in 0.1f64..5.0, hard in any::<bool>(),
        ) {
            prop_assume!((a - b).abs() > 1e-3);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let x = [1.0, 0.0];
            let y = unit(&[1.0, 1.0]);
            // Angle from x shrinks as the parameter grows, so cosine rises.
            let neg = |theta: f64| vec![(3.0 - theta).cos(), (3.0 - theta).sin()];
            let cfg = SeqLossConfig { lambda: 1.0, mu };
            let loss = |theta: f64| {
                let n = vec![neg(theta)];
                if hard {
                    infonce_seq_loss(&x, &y, &[], &n, &cfg).unwrap()
                } else {
                    infonce_seq_loss(&x, &y, &n, &[], &cfg).unwrap()
                }
            };
            prop_assert!(loss(hi) > loss(lo));
        }

        #[test]
        fn infonce_increases_with_mu(mu in 0.0f64..5.0, d in 0.01f64..2.0) {
            let x = [1.0, 0.2, -0.3];
            let y = [0.5, 0.5, 0.1];
            let h = vec![vec![-0.2, 1.0, 0.4]];
            let at = |mu: f64| infonce_seq_loss(&x, &y, &[], &h, &SeqLossConfig { lambda: 1.0, mu }).unwrap();
            prop_assert!(at(mu + d) > at(mu));
        }
    }
}
