//! Two-phase training: an MLE degenerator, then the MACL model.
//!
//! Losses are summed over target tokens and averaged over the batch. A
//! MACL step runs in three passes: one autodiff graph per example for the
//! token loss and the pooled source, target and hard-negative
//! representations; a small batch graph for the InfoNCE term over those
//! representations; then each example graph is back-propagated with the
//! representation gradients injected as extra seeds.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Graph, Matrix, NodeId, ParamStore};
use crate::corpus::{Corpus, DialogueExample, GenerationRecord, TokenId, Vocabulary, EOS};
use crate::decoding::{decode, DecodeConfig};
use crate::error::{Error, Result};
use crate::losses::{
    final_loss, infonce_graph, mle_graph, token_contrastive_graph, ul_graph, CandidateRule,
    NegativeCandidateSet, SeqLossConfig, TokenLossConfig, TokenLossNodes,
};
use crate::metrics::{build_report, MetricsReport};
use crate::model::{build_source, decoder_input, decoder_target, Checkpoint, ModelConfig, Seq2Seq};
use crate::sampling::{mine_hard_negatives, GroupBeamConfig, NegativeCache};

/// Description of the loss reduction, recorded with every run.
pub const LOSS_REDUCTION: &str = "sum over target tokens, mean over batch";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Maximum likelihood only.
    #[default]
    Mle,
    /// Unlikelihood training on source and prefix tokens.
    Nt,
    /// Token-level knowledge penalty plus sequence-level InfoNCE.
    Macl,
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mle" => Ok(Objective::Mle),
            "nt" => Ok(Objective::Nt),
            "macl" => Ok(Objective::Macl),
            other => Err(Error::Config(format!(
                "unknown objective {other:?} (expected mle, nt or macl)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Full-scale hyperparameters; the defaults.
    #[default]
    Standard,
    /// Faster settings for CPU runs on the synthetic corpus.
    Desk,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Profile::Standard),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::Config(format!(
                "unknown profile {other:?} (expected standard or desk)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub alpha: f64,
    pub lambda: f64,
    pub mu: f64,
    /// Beam size for negative mining.
    pub b: usize,
    /// Negatives retained per example.
    pub m: usize,
    pub num_groups: usize,
    pub diversity_penalty: f64,
    pub candidate_rule: CandidateRule,
    pub epsilon: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Start the MACL model from fresh parameters instead of the degenerator.
    pub from_scratch: bool,
    /// Run everything on one thread.
    pub deterministic: bool,
    /// Decode the validation split after every epoch for PoD and KUD.
    pub eval_each_epoch: bool,
    pub eval_decode: DecodeConfig,
    /// `vocab_size` is taken from the vocabulary and `seed` from this config.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Mle,
            learning_rate: 1e-5,
            batch_size: 16,
            max_epochs: 15,
            patience: 3,
            seed: 0,
            alpha: 4.0,
            lambda: 1.0,
            mu: 2.0,
            b: 32,
            m: 16,
            num_groups: 8,
            diversity_penalty: 0.5,
            candidate_rule: CandidateRule::ArgmaxKnowledge,
            epsilon: 1e-7,
            grad_clip: 1.0,
            from_scratch: false,
            deterministic: false,
            eval_each_epoch: false,
            eval_decode: DecodeConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn profile(profile: Profile) -> Self {
        match profile {
            Profile::Standard => TrainConfig::default(),
            Profile::Desk => TrainConfig {
                learning_rate: 1e-3,
                b: 8,
                m: 4,
                ..TrainConfig::default()
            },
        }
    }

    pub fn token_loss(&self) -> TokenLossConfig {
        TokenLossConfig {
            alpha: self.alpha,
            candidate_rule: self.candidate_rule,
            epsilon: self.epsilon,
        }
    }

    pub fn seq_loss(&self) -> SeqLossConfig {
        SeqLossConfig {
            lambda: self.lambda,
            mu: self.mu,
        }
    }

    pub fn mining(&self) -> GroupBeamConfig {
        GroupBeamConfig {
            beam_size: self.b,
            num_groups: self.num_groups,
            diversity_penalty: self.diversity_penalty,
            max_target_len: self.model.max_target_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("b", self.b),
            ("m", self.m),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.m > self.b {
            return Err(Error::Config(format!(
                "m ({}) must not exceed b ({})",
                self.m, self.b
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.grad_clip.is_nan() || self.grad_clip < 0.0 {
            return Err(Error::Config("grad_clip must be non-negative".into()));
        }
        self.token_loss().validate()?;
        self.seq_loss().validate()?;
        self.mining().validate()?;
        self.eval_decode.validate()
    }

    fn uses_sequence_loss(&self) -> bool {
        self.objective == Objective::Macl && self.lambda > 0.0
    }

    fn model_config(&self, vocab: &Vocabulary) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab.len(),
            seed: self.seed,
            ..self.model.clone()
        }
    }
}

/// Batch means of the loss components for one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub step: usize,
    pub mle: f64,
    /// Weighted token-level penalty; zero under plain MLE.
    pub token_penalty: f64,
    pub seq: f64,
    #[serde(rename = "final")]
    pub final_loss: f64,
    pub n_candidates_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub pod: Option<f64>,
    pub kud: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub objective: Objective,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    /// Filled in by whoever writes the checkpoint.
    pub best_checkpoint: Option<String>,
    /// Generation PoD on the validation split at the best epoch.
    pub valid_pod: Option<f64>,
    pub valid_kud: Option<f64>,
    pub steps: usize,
    pub degenerator_hash: Option<String>,
    pub loss_reduction: String,
    pub config: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub checkpoint: Checkpoint,
    pub record: RunRecord,
    pub trace: Vec<TraceLine>,
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Matrix> = params
            .ids()
            .map(|id| Matrix::zeros(params.get(id).dim()))
            .collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let (b1, b2) = (self.beta1, self.beta2);
            match grads.get(id) {
                Some(g) => {
                    ndarray::Zip::from(&mut *m)
                        .and(&mut *v)
                        .and(g)
                        .for_each(|m, v, &g| {
                            *m = b1 * *m + (1.0 - b1) * g;
                            *v = b2 * *v + (1.0 - b2) * g * g;
                        });
                }
                None => {
                    m.mapv_inplace(|x| b1 * x);
                    v.mapv_inplace(|x| b2 * x);
                }
            }
            let (lr, eps) = (self.lr, self.eps);
            ndarray::Zip::from(params.get_mut(id))
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
                });
        }
    }
}

/// An example converted to model inputs.
#[derive(Debug, Clone)]
struct Prepared {
    index: usize,
    source: Vec<TokenId>,
    /// Response ids followed by EOS, clipped to the model's target length.
    target: Vec<TokenId>,
    knowledge: BTreeSet<TokenId>,
}

fn clip_target(mut body: Vec<TokenId>, max_len: usize) -> Vec<TokenId> {
    body.truncate(max_len.saturating_sub(1));
    decoder_target(&body)
}

fn prepare(
    examples: &[DialogueExample],
    vocab: &Vocabulary,
    cfg: &ModelConfig,
) -> Result<Vec<Prepared>> {
    examples
        .iter()
        .enumerate()
        .map(|(index, ex)| {
            let source = build_source(ex, vocab, cfg.max_source_len)?;
            Ok(Prepared {
                index,
                knowledge: source.knowledge_ids().into_iter().collect(),
                source: source.ids,
                target: clip_target(vocab.encode(&ex.response), cfg.max_target_len),
            })
        })
        .collect()
}

struct ExampleForward<'p> {
    graph: Graph<'p>,
    token: TokenLossNodes,
    z_x: NodeId,
    z_y: NodeId,
    z_h: Vec<NodeId>,
}

fn example_seed(seed: u64, step: usize, index: usize) -> u64 {
    let mut x = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [step as u64, index as u64] {
        x = (x ^ v).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x ^= x >> 31;
    }
    x
}

fn forward_example<'p>(
    model: &'p Seq2Seq,
    ex: &Prepared,
    negatives: &[Vec<TokenId>],
    cfg: &TrainConfig,
    with_seq: bool,
    rng_seed: u64,
) -> Result<ExampleForward<'p>> {
    let mut g = Graph::new(model.params());
    let tf = model.forward_teacher_forced(&mut g, &ex.source, &ex.target)?;
    let token = match cfg.objective {
        Objective::Mle => {
            let mle = mle_graph(&mut g, tf.logits, &ex.target)?;
            let zero = g.input(Matrix::zeros((1, 1)));
            TokenLossNodes {
                loss: mle,
                mle,
                penalty: zero,
                candidates: NegativeCandidateSet::default(),
            }
        }
        Objective::Nt => ul_graph(
            &mut g,
            tf.logits,
            &ex.target,
            &ex.source,
            cfg.alpha,
            cfg.epsilon,
        )?,
        Objective::Macl => {
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            token_contrastive_graph(
                &mut g,
                tf.logits,
                &ex.target,
                &ex.knowledge,
                &cfg.token_loss(),
                &mut rng,
            )?
        }
    };
    let mut z_h = Vec::new();
    if with_seq {
        let max = model.config().max_target_len;
        for neg in negatives {
            let target = clip_target(neg.clone(), max);
            if target == ex.target {
                continue;
            }
            let states = model.decode_states(&mut g, tf.encoder_states, &decoder_input(&target))?;
            z_h.push(model.pool(&mut g, states));
        }
    }
    Ok(ExampleForward {
        graph: g,
        token,
        z_x: tf.source_pooled,
        z_y: tf.target_pooled,
        z_h,
    })
}

fn maybe_par<T: Send, R: Send>(
    items: Vec<T>,
    parallel: bool,
    f: impl Fn(T) -> R + Sync + Send,
) -> Vec<R> {
    if parallel {
        items.into_par_iter().map(f).collect()
    } else {
        items.into_iter().map(f).collect()
    }
}

/// Loss and gradient for one batch.
fn batch_step(
    model: &Seq2Seq,
    batch: &[&Prepared],
    negatives: &[&[Vec<TokenId>]],
    cfg: &TrainConfig,
    step: usize,
) -> Result<(Grads, TraceLine)> {
    let parallel = !cfg.deterministic;
    let with_seq = cfg.uses_sequence_loss();
    let n = batch.len() as f64;
    let jobs: Vec<(usize, &Prepared)> = batch.iter().copied().enumerate().collect();
    let forwards: Vec<ExampleForward> = maybe_par(jobs, parallel, |(i, ex)| {
        forward_example(
            model,
            ex,
            negatives[i],
            cfg,
            with_seq,
            example_seed(cfg.seed, step, i),
        )
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let mut seq_values = vec![0.0; forwards.len()];
    let mut z_grads: Vec<Vec<(NodeId, Matrix)>> = vec![Vec::new(); forwards.len()];
    if with_seq {
        let store = ParamStore::new();
        let mut bg = Graph::new(&store);
        let inputs: Vec<(NodeId, NodeId, Vec<NodeId>)> = forwards
            .iter()
            .map(|f| {
                let x = bg.input(f.graph.value(f.z_x).clone());
                let y = bg.input(f.graph.value(f.z_y).clone());
                let h = f
                    .z_h
                    .iter()
                    .map(|&z| bg.input(f.graph.value(z).clone()))
                    .collect();
                (x, y, h)
            })
            .collect();
        let mut seeds = Vec::new();
        for (i, (x, y, h)) in inputs.iter().enumerate() {
            let others: Vec<NodeId> = inputs
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, (_, y, _))| *y)
                .collect();
            let loss = infonce_graph(&mut bg, *x, *y, &others, h, &cfg.seq_loss())?;
            seq_values[i] = bg.scalar(loss);
            seeds.push((loss, Matrix::from_elem((1, 1), cfg.lambda / n)));
        }
        let back = bg.backward(&seeds);
        for (i, (f, (x, y, h))) in forwards.iter().zip(&inputs).enumerate() {
            let pairs = [(f.z_x, *x), (f.z_y, *y)]
                .into_iter()
                .chain(f.z_h.iter().copied().zip(h.iter().copied()));
            for (local, batch_node) in pairs {
                if let Some(grad) = back.node(batch_node) {
                    z_grads[i].push((local, grad.clone()));
                }
            }
        }
    }

    let mle: f64 = forwards
        .iter()
        .map(|f| f.graph.scalar(f.token.mle))
        .sum::<f64>()
        / n;
    let token_penalty: f64 = forwards
        .iter()
        .map(|f| f.graph.scalar(f.token.penalty))
        .sum::<f64>()
        / n;
    let seq: f64 = seq_values.iter().sum::<f64>() / n;
    let skipped = forwards
        .iter()
        .map(|f| f.token.candidates.n_skipped())
        .sum();
    let trace = TraceLine {
        step,
        mle,
        token_penalty,
        seq,
        final_loss: final_loss(mle + token_penalty, seq, cfg.lambda),
        n_candidates_skipped: skipped,
    };

    let jobs: Vec<_> = forwards.into_iter().zip(z_grads).collect();
    let grads: Vec<Grads> = maybe_par(jobs, parallel, |(f, extra)| {
        let mut seeds = vec![(f.token.loss, Matrix::from_elem((1, 1), 1.0 / n))];
        seeds.extend(extra);
        f.graph.backward(&seeds).into_params()
    });
    let mut total = Grads::zeros_like(model.params());
    for g in &grads {
        total.add_assign(g);
    }
    Ok((total, trace))
}

/// Mean token-level objective over a split, without gradients.
fn validation_loss(model: &Seq2Seq, data: &[Prepared], cfg: &TrainConfig) -> Result<f64> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    let jobs: Vec<&Prepared> = data.iter().collect();
    let losses: Vec<Result<f64>> = maybe_par(jobs, !cfg.deterministic, |ex| {
        let f = forward_example(
            model,
            ex,
            &[],
            cfg,
            false,
            example_seed(cfg.seed, usize::MAX, ex.index),
        )?;
        Ok(f.graph.scalar(f.token.loss))
    });
    let mut sum = 0.0;
    for l in losses {
        sum += l?;
    }
    Ok(sum / data.len() as f64)
}

/// Where hard negatives come from during MACL training.
struct Negatives<'a> {
    degenerator: &'a Seq2Seq,
    vocab: &'a Vocabulary,
    mining: GroupBeamConfig,
    m: usize,
    /// Mined (or cached) negatives by example id. The degenerator is frozen,
    /// so mining an example again would give the same result.
    memo: HashMap<String, Vec<Vec<TokenId>>>,
}

impl Negatives<'_> {
    fn ensure(&mut self, examples: &[&DialogueExample], parallel: bool) -> Result<()> {
        let missing: Vec<&DialogueExample> = examples
            .iter()
            .copied()
            .filter(|ex| !self.memo.contains_key(&ex.id))
            .collect();
        let (deg, vocab, mining, m) = (self.degenerator, self.vocab, &self.mining, self.m);
        let pools = maybe_par(missing, parallel, |ex| {
            mine_hard_negatives(deg, vocab, ex, mining, m)
        });
        for pool in pools {
            let pool = pool?;
            self.memo.insert(
                pool.example_id,
                pool.retained.into_iter().map(|c| c.tokens).collect(),
            );
        }
        Ok(())
    }
}

fn run_training(
    mut model: Seq2Seq,
    train: &Corpus,
    valid: &Corpus,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    mut negatives: Option<Negatives<'_>>,
) -> Result<(Seq2Seq, RunRecord, Vec<TraceLine>)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Parameter("training split is empty".into()));
    }
    let train_data = prepare(train.examples(), vocab, model.config())?;
    let valid_data = prepare(valid.examples(), vocab, model.config())?;
    let mut adam = Adam::new(model.params(), cfg.learning_rate);
    let mut trace = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut since_best = 0;
    let mut step = 0;
    let empty: Vec<Vec<TokenId>> = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(example_seed(
            cfg.seed,
            epoch,
            usize::MAX,
        )));
        let mut epoch_loss = 0.0;
        let mut n_batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &train_data[i]).collect();
            let negs: Vec<&[Vec<TokenId>]> = match negatives.as_mut() {
                Some(source) if cfg.uses_sequence_loss() => {
                    let exs: Vec<&DialogueExample> =
                        chunk.iter().map(|&i| &train.examples()[i]).collect();
                    source.ensure(&exs, !cfg.deterministic)?;
                    exs.iter()
                        .map(|ex| source.memo[&ex.id].as_slice())
                        .collect()
                }
                _ => vec![empty.as_slice(); batch.len()],
            };
            let (mut grads, line) = batch_step(&model, &batch, &negs, cfg, step)?;
            if !line.final_loss.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    message: format!(
                        "mle {} penalty {} seq {} grad norm {}",
                        line.mle,
                        line.token_penalty,
                        line.seq,
                        grads.global_norm()
                    ),
                });
            }
            if cfg.grad_clip > 0.0 {
                let norm = grads.global_norm();
                if norm > cfg.grad_clip {
                    grads.scale(cfg.grad_clip / norm);
                }
            }
            adam.step(model.params_mut(), &grads);
            epoch_loss += line.final_loss;
            n_batches += 1;
            trace.push(line);
        }
        let train_loss = epoch_loss / n_batches as f64;
        let mut valid_loss = validation_loss(&model, &valid_data, cfg)?;
        if valid_loss.is_nan() {
            valid_loss = train_loss;
        }
        if !valid_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step,
                message: format!("validation loss {valid_loss}"),
            });
        }
        let (pod, kud) = if cfg.eval_each_epoch && !valid.is_empty() {
            let (_, report) =
                evaluate_run(&model, vocab, valid, &cfg.eval_decode, !cfg.deterministic)?;
            (Some(report.generated.pod), report.kud)
        } else {
            (None, None)
        };
        log::info!("epoch {epoch}: train {train_loss:.4} valid {valid_loss:.4}");
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            valid_loss,
            pod,
            kud,
        });
        if best.as_ref().is_none_or(|(b, _, _)| valid_loss < *b) {
            best = Some((valid_loss, epoch, model.params().clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    let (best_valid_loss, best_epoch, params) = best.expect("at least one epoch");
    *model.params_mut() = params;
    let (valid_pod, valid_kud) = match epochs.iter().find(|e| e.epoch == best_epoch) {
        Some(EpochRecord {
            pod: Some(p), kud, ..
        }) => (Some(*p), *kud),
        _ if !valid.is_empty() => {
            let (_, report) =
                evaluate_run(&model, vocab, valid, &cfg.eval_decode, !cfg.deterministic)?;
            (Some(report.generated.pod), report.kud)
        }
        _ => (None, None),
    };
    let record = RunRecord {
        objective: cfg.objective,
        epochs,
        best_epoch,
        best_valid_loss,
        best_checkpoint: None,
        valid_pod,
        valid_kud,
        steps: step,
        degenerator_hash: None,
        loss_reduction: LOSS_REDUCTION.into(),
        config: cfg.clone(),
    };
    Ok((model, record, trace))
}

/// Trains an MLE model from scratch and marks the best checkpoint frozen.
/// The objective in `cfg` is ignored.
pub fn train_degenerator(
    train: &Corpus,
    valid: &Corpus,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        objective: Objective::Mle,
        ..cfg.clone()
    };
    let model = Seq2Seq::new(cfg.model_config(vocab))?;
    let (model, record, trace) = run_training(model, train, valid, vocab, &cfg, None)?;
    let mut checkpoint = Checkpoint::new(model, vocab.clone())?;
    checkpoint.frozen = true;
    Ok(TrainOutcome {
        checkpoint,
        record,
        trace,
    })
}

/// Trains with the configured objective. MLE and NT runs start from fresh
/// parameters. MACL runs start from the degenerator unless `from_scratch`
/// is set, and mine negatives from it, using `cache` where it has entries.
pub fn train_model(
    train: &Corpus,
    valid: &Corpus,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    degenerator: Option<&Checkpoint>,
    cache: Option<&NegativeCache>,
) -> Result<TrainOutcome> {
    let (model, negatives, deg_hash) = match cfg.objective {
        Objective::Mle | Objective::Nt => (Seq2Seq::new(cfg.model_config(vocab))?, None, None),
        Objective::Macl => {
            let deg = degenerator
                .ok_or_else(|| Error::Parameter("MACL training needs a degenerator".into()))?;
            if !deg.frozen {
                return Err(Error::Parameter(
                    "degenerator checkpoint is not frozen".into(),
                ));
            }
            deg.expect_vocab(vocab)?;
            let hash = deg.hash();
            let mut memo = HashMap::new();
            if let Some(cache) = cache {
                if cache.degenerator_hash != hash {
                    return Err(Error::StaleCache(format!(
                        "cache was mined by degenerator {}, current is {hash}",
                        cache.degenerator_hash
                    )));
                }
                for (id, negs) in &cache.pools {
                    memo.insert(id.clone(), negs.iter().map(|c| c.tokens.clone()).collect());
                }
            }
            let model = if cfg.from_scratch {
                Seq2Seq::new(cfg.model_config(vocab))?
            } else {
                deg.model.clone()
            };
            let negatives = Negatives {
                degenerator: &deg.model,
                vocab,
                mining: GroupBeamConfig {
                    max_target_len: deg.model.config().max_target_len,
                    ..cfg.mining()
                },
                m: cfg.m,
                memo,
            };
            (model, Some(negatives), Some(hash))
        }
    };
    let (model, mut record, trace) = run_training(model, train, valid, vocab, cfg, negatives)?;
    record.degenerator_hash = deg_hash;
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(model, vocab.clone())?,
        record,
        trace,
    })
}

/// MACL phase of the two-phase procedure.
pub fn train_macl(
    train: &Corpus,
    valid: &Corpus,
    vocab: &Vocabulary,
    degenerator: &Checkpoint,
    cfg: &TrainConfig,
    cache: Option<&NegativeCache>,
) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        objective: Objective::Macl,
        ..cfg.clone()
    };
    train_model(train, valid, vocab, &cfg, Some(degenerator), cache)
}

/// Decodes every example of `corpus`.
pub fn generate(
    model: &Seq2Seq,
    vocab: &Vocabulary,
    corpus: &Corpus,
    cfg: &DecodeConfig,
    parallel: bool,
) -> Result<Vec<GenerationRecord>> {
    let max_source = model.config().max_source_len;
    let jobs: Vec<&DialogueExample> = corpus.examples().iter().collect();
    maybe_par(jobs, parallel, |ex| {
        let source = build_source(ex, vocab, max_source)?;
        let encoding = model.encode_source(&source)?;
        decode(model, &encoding, cfg, vocab, &ex.id)
    })
    .into_iter()
    .collect()
}

/// Decodes `corpus` and scores the generations against its references.
pub fn evaluate_run(
    model: &Seq2Seq,
    vocab: &Vocabulary,
    corpus: &Corpus,
    cfg: &DecodeConfig,
    parallel: bool,
) -> Result<(Vec<GenerationRecord>, MetricsReport)> {
    let generations = generate(model, vocab, corpus, cfg, parallel)?;
    let report = build_report(corpus, &generations)?;
    Ok((generations, report))
}

/// The four decoding settings of the decoding-strategy comparison.
pub fn standard_sweep(seed: u64) -> Vec<DecodeConfig> {
    vec![
        DecodeConfig::beam(3),
        DecodeConfig::beam(5),
        DecodeConfig::greedy(),
        DecodeConfig::nucleus(0.9, seed),
    ]
}

/// Token ids of a reference response with EOS, as used for training.
pub fn training_target(
    example: &DialogueExample,
    vocab: &Vocabulary,
    max_target_len: usize,
) -> Vec<TokenId> {
    let t = clip_target(vocab.encode(&example.response), max_target_len);
    debug_assert_eq!(t.last(), Some(&EOS));
    t
}
