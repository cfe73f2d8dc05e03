//! The pretraining loop (episodes -> losses -> Adam) and the strictly
//! tuning-free downstream evaluator, plus ablation arms and parameter
//! sweeps.

use std::path::Path;

use crate::context::{augment, build_context, build_protection_plan, ContextGraph, ProtectionPlan};
use crate::embed::{pretrain_cached, EmbedConfig};
use crate::episode::{
    collect_centroids, collect_centroids_random, kmeans, sample_downstream_episode,
    sample_pretrain_episode, Episode, KmeansConfig, TaskKind,
};
use crate::error::{Error, Result};
use crate::exec;
use crate::graph::{mix_seed, Graph};
use crate::objectives::{attr_loss, ce_loss, orth_loss, total_loss, LossBreakdown};
use crate::prompt::{
    build_prompt_graph, encode_context, init_prompt_params, input_embedding, predict,
    refine_and_score, PROMPT_ETYPES,
};
use crate::tensor::{
    adam_step, AdamHyper, AdamState, BoundParams, Checkpoint, Tape, Tensor, Topology, Var,
};

// Seed-stream tags, one per concern.
const TAG_EMBED: u64 = 1;
const TAG_CENTROIDS: u64 = 2;
const TAG_SHUFFLE: u64 = 3;
const TAG_EPISODE: u64 = 4;
const TAG_CONTEXT: u64 = 5;
const TAG_PLAN: u64 = 6;
const TAG_AUGMENT: u64 = 7;
const TAG_DROPOUT: u64 = 8;
const TAG_FALLBACK_KMEANS: u64 = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// O1: clustered centroid collection (off = uniform random centroids).
    pub o1_centroid_clustering: bool,
    /// O2: balanced augmentation (off = independent augmentation with
    /// no protection beyond targets).
    pub o2_balanced_augmentation: bool,
    /// O3: orthogonal + attribute objectives (off = CE only).
    pub o3_orth_and_attr: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            o1_centroid_clustering: true,
            o2_balanced_augmentation: true,
            o3_orth_and_attr: true,
        }
    }
}

impl AblationFlags {
    pub fn all_off() -> Self {
        AblationFlags {
            o1_centroid_clustering: false,
            o2_balanced_augmentation: false,
            o3_orth_and_attr: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Ways per pretraining episode.
    pub m: usize,
    /// Support examples per class.
    pub s: usize,
    /// Queries per class.
    pub n: usize,
    /// Centroids available per batch; the m ways are drawn from this pool.
    pub pool_per_batch: usize,
    /// Batches per epoch (b).
    pub batches_per_epoch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    /// Orthogonal-loss weight.
    pub lambda: f64,
    /// Protection fraction of the remaining centroid-subgraph nodes.
    pub p: f64,
    pub drop_rate: f64,
    pub mask_rate: f64,
    /// Context/neighborhood hop range.
    pub h: usize,
    pub fanout_cap: Option<usize>,
    /// Fraction of centroids taken from k-means clusters.
    pub alpha: f64,
    /// Total centroid set size; defaults to pool_per_batch * batches_per_epoch.
    pub centroid_total: Option<usize>,
    /// Embedding dimension of the prompt model.
    pub d: usize,
    /// Input feature width; derived from the graph when absent.
    pub d_in: Option<usize>,
    /// Multiplier on cosine logits before the CE loss (1 = raw cosine).
    pub logit_scale: f64,
    pub seed_sampling: u64,
    pub seed_augmentation: u64,
    pub seed_init: u64,
    pub task_kind: TaskKind,
    pub ablation: AblationFlags,
    pub embedder: EmbedConfig,
    pub kmeans: KmeansConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            m: 3,
            s: 3,
            n: 4,
            pool_per_batch: 10,
            batches_per_epoch: 5,
            epochs: 12,
            lr: 1e-3,
            weight_decay: 1e-3,
            dropout: 0.0,
            lambda: 0.3,
            p: 0.3,
            drop_rate: 0.1,
            mask_rate: 0.15,
            h: 2,
            fanout_cap: Some(20),
            alpha: 0.5,
            centroid_total: None,
            d: 256,
            d_in: None,
            logit_scale: 1.0,
            seed_sampling: 1,
            seed_augmentation: 2,
            seed_init: 3,
            task_kind: TaskKind::Node,
            ablation: AblationFlags::default(),
            embedder: EmbedConfig::default(),
            kmeans: KmeansConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        for (name, v) in [
            ("p", self.p),
            ("alpha", self.alpha),
            ("drop_rate", self.drop_rate),
            ("mask_rate", self.mask_rate),
            ("dropout", self.dropout),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {v}")));
            }
        }
        for (name, v) in [
            ("m", self.m),
            ("s", self.s),
            ("n", self.n),
            ("pool_per_batch", self.pool_per_batch),
            ("batches_per_epoch", self.batches_per_epoch),
            ("h", self.h),
            ("d", self.d),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.pool_per_batch < self.m {
            return Err(Error::Config(format!(
                "pool_per_batch {} smaller than m {}",
                self.pool_per_batch, self.m
            )));
        }
        Ok(())
    }

    pub fn centroid_total(&self) -> usize {
        self.centroid_total
            .unwrap_or(self.pool_per_batch * self.batches_per_epoch)
    }
}

#[derive(Clone, Copy, Debug, serde::Serialize)]
pub struct StepLoss {
    pub step: usize,
    pub ce: f64,
    pub orth: f64,
    pub attr: f64,
    pub total: f64,
    /// Pseudo-task accuracy of this step's queries (diagnostic; not
    /// part of the CSV log).
    pub train_acc: f64,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLoss>,
    pub warnings: Vec<String>,
}

/// Serialized checkpoint metadata: the topology plus the full training
/// configuration.
fn checkpoint_config_json(topology: &Topology, cfg: &TrainConfig) -> String {
    serde_json::json!({ "topology": topology, "train": cfg }).to_string()
}

pub fn train_config_of(ckpt: &Checkpoint) -> Result<TrainConfig> {
    let v: serde_json::Value = serde_json::from_str(&ckpt.config_json)
        .map_err(|e| Error::Checkpoint(format!("bad checkpoint config: {e}")))?;
    serde_json::from_value(v["train"].clone())
        .map_err(|e| Error::Checkpoint(format!("bad train section: {e}")))
}

/// Self-supervised pretraining on the source graph. Labels on the
/// source, if any, are ignored. Deterministic in the three seed streams.
pub fn train(source: &Graph, cfg: &TrainConfig, cache_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(d_in) = cfg.d_in {
        if d_in != source.feature_dim() {
            return Err(Error::Config(format!(
                "config d_in {d_in} does not match graph feature width {}",
                source.feature_dim()
            )));
        }
    }
    let topology = Topology {
        d_in: source.feature_dim(),
        d: cfg.d,
        prompt_etypes: PROMPT_ETYPES,
        heads: 1,
    };
    let total = cfg.centroid_total();
    if total < cfg.pool_per_batch * cfg.batches_per_epoch {
        return Err(Error::Config(format!(
            "centroid_total {total} cannot cover {} batches of pool {}",
            cfg.batches_per_epoch, cfg.pool_per_batch
        )));
    }

    let mut warnings = Vec::new();

    let centroids = if cfg.ablation.o1_centroid_clustering {
        let mut ecfg = cfg.embedder.clone();
        ecfg.d = cfg.d;
        let table = pretrain_cached(
            source,
            &ecfg,
            mix_seed(cfg.seed_sampling, &[TAG_EMBED]),
            cache_dir,
        )?;
        collect_centroids(
            &table.values,
            total,
            cfg.alpha,
            &cfg.kmeans,
            mix_seed(cfg.seed_sampling, &[TAG_CENTROIDS]),
        )?
    } else {
        collect_centroids_random(
            source.node_count(),
            total,
            mix_seed(cfg.seed_sampling, &[TAG_CENTROIDS]),
        )?
    };
    let centroids = centroids.shuffled(mix_seed(cfg.seed_sampling, &[TAG_SHUFFLE]));

    let mut params = init_prompt_params(&topology, cfg.seed_init);
    let mut state = AdamState::new(AdamHyper {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamHyper::default()
    });
    let mut log = Vec::with_capacity(cfg.epochs * cfg.batches_per_epoch);

    for epoch in 0..cfg.epochs {
        for batch in 0..cfg.batches_per_epoch {
            let step = epoch * cfg.batches_per_epoch + batch;
            let res = train_step(source, cfg, &centroids, epoch, batch, &mut params, &mut state);
            match res {
                Ok((breakdown, train_acc, degenerate)) => {
                    if degenerate {
                        warnings.push(format!(
                            "step {step}: centroid pool exhausted, sampled with replacement"
                        ));
                    }
                    log.push(StepLoss {
                        step,
                        ce: breakdown.ce,
                        orth: breakdown.orth,
                        attr: breakdown.attr,
                        total: breakdown.total,
                        train_acc,
                    });
                }
                Err(e) => {
                    return Err(Error::TrainStep {
                        step,
                        msg: e.to_string(),
                    })
                }
            }
        }
    }

    let checkpoint = Checkpoint::new(checkpoint_config_json(&topology, cfg), params);
    Ok(TrainOutcome {
        checkpoint,
        log,
        warnings,
    })
}

fn train_step(
    source: &Graph,
    cfg: &TrainConfig,
    centroids: &crate::episode::CentroidSet,
    epoch: usize,
    batch: usize,
    params: &mut crate::tensor::ParamSet<f32>,
    state: &mut AdamState<f32>,
) -> Result<(LossBreakdown, f64, bool)> {
    let step = epoch * cfg.batches_per_epoch + batch;
    let episode_seed = mix_seed(cfg.seed_sampling, &[TAG_EPISODE, epoch as u64, batch as u64]);
    let pe = sample_pretrain_episode(
        source,
        centroids,
        batch,
        cfg.pool_per_batch,
        cfg.m,
        cfg.s,
        cfg.n,
        cfg.h,
        cfg.fanout_cap,
        cfg.task_kind,
        episode_seed,
    )?;
    let episode = &pe.episode;

    // One protection plan per class slot, shared by all of its inputs.
    let plans: Vec<ProtectionPlan> = if cfg.ablation.o2_balanced_augmentation {
        pe.origins
            .iter()
            .enumerate()
            .map(|(slot, origin)| {
                build_protection_plan(
                    &origin.subgraph,
                    &origin.example_nodes,
                    &origin.query_nodes,
                    cfg.p,
                    mix_seed(cfg.seed_augmentation, &[TAG_PLAN, step as u64, slot as u64]),
                )
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let inputs: Vec<(usize, crate::episode::EpisodeInput)> = episode
        .support_slots()
        .into_iter()
        .zip(episode.support.iter().copied())
        .chain(episode.query_slots().into_iter().zip(episode.queries.iter().copied()))
        .collect();
    assert_eq!(
        inputs.len(),
        cfg.m * (cfg.s + cfg.n),
        "episode accounting: every step consumes m*(s+n) inputs"
    );

    let mut contexts = Vec::with_capacity(inputs.len());
    for (i, (slot, x)) in inputs.iter().enumerate() {
        let ctx = build_context(
            source,
            *x,
            cfg.h,
            cfg.fanout_cap,
            mix_seed(cfg.seed_sampling, &[TAG_CONTEXT, step as u64, i as u64]),
        )?;
        let plan;
        let plan_ref = if cfg.ablation.o2_balanced_augmentation {
            &plans[*slot]
        } else {
            plan = ProtectionPlan::targets_only(&ctx.targets);
            &plan
        };
        contexts.push(augment(
            &ctx,
            plan_ref,
            cfg.drop_rate,
            cfg.mask_rate,
            mix_seed(cfg.seed_augmentation, &[TAG_AUGMENT, step as u64, i as u64]),
        )?);
    }

    let tape = Tape::new();
    let bound = BoundParams::bind(&tape, params);
    let dropout_base = mix_seed(cfg.seed_init, &[TAG_DROPOUT, step as u64]);
    let (ex, qu, attr_items) = episode_embeddings(
        &tape,
        &bound,
        episode,
        &contexts,
        Some((cfg.dropout, dropout_base)),
    )?;
    let pg = build_prompt_graph(ex, qu, &episode.classes, cfg.s, cfg.n)?;
    let score = refine_and_score(&pg, &bound)?;
    let scaled_logits = score.logits.scale(cfg.logit_scale as f32)?;
    let ce = ce_loss(scaled_logits, &episode.query_slots())?;

    let (total, breakdown) = if cfg.ablation.o3_orth_and_attr {
        let orth = orth_loss(score.refined_labels)?;
        let attr = attr_loss(&tape, &attr_items)?;
        total_loss(ce, orth, attr, cfg.lambda)?
    } else {
        let zero = tape.constant(Tensor::scalar(0.0f32));
        total_loss(ce, zero, zero, 0.0)?
    };

    let preds = predict(&score.logits.value());
    let truth = episode.query_slots();
    let train_acc =
        preds.iter().zip(&truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64;

    tape.backward(total)?;
    adam_step(params, &bound.grads(&tape), state)?;
    Ok((breakdown, train_acc, episode.degenerate))
}

/// Embed every episode input through its context. Contexts are ordered
/// support-first, slot-major, matching `Episode` layout. Returns the
/// example matrix, query matrix, and attribute-reconstruction pairs.
#[allow(clippy::type_complexity)]
fn episode_embeddings<'t>(
    tape: &'t Tape<f32>,
    bound: &BoundParams<'t, f32>,
    episode: &Episode,
    contexts: &[ContextGraph],
    dropout: Option<(f64, u64)>,
) -> Result<(Var<'t, f32>, Var<'t, f32>, Vec<(Var<'t, f32>, Tensor<f32>)>)> {
    let n_support = episode.support.len();
    let mut embs = Vec::with_capacity(contexts.len());
    let mut attr_items = Vec::new();
    for (i, ctx) in contexts.iter().enumerate() {
        let drop = dropout.map(|(rate, base)| (rate, mix_seed(base, &[i as u64])));
        let out = encode_context(tape, ctx, bound, drop)?;
        if let (Some(pred), Some(orig)) = (out.attr_pred, ctx.masked_original_matrix()) {
            attr_items.push((pred, orig));
        }
        embs.push(input_embedding(ctx, &out, bound)?);
    }
    let ex = Var::concat_rows(tape, &embs[..n_support])?;
    let qu = Var::concat_rows(tape, &embs[n_support..])?;
    Ok((ex, qu, attr_items))
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct EvalOptions {
    pub m: usize,
    pub k_shots: usize,
    pub n: usize,
    pub episodes: usize,
    pub seed: u64,
    /// Defaults to the checkpoint's training task kind.
    pub task_kind: Option<TaskKind>,
    /// Label-free clustering fallback for k_shots = 0 (not part of the
    /// trained protocol; off by default).
    pub zero_shot_fallback: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            m: 3,
            k_shots: 3,
            n: 4,
            episodes: 200,
            seed: 0,
            task_kind: None,
            zero_shot_fallback: false,
        }
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct EvalReport {
    pub per_episode: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub episodes: usize,
    pub config: serde_json::Value,
    pub checkpoint_hash_before: String,
    pub checkpoint_hash_after: String,
}

impl EvalReport {
    pub fn tuning_free_ok(&self) -> bool {
        self.checkpoint_hash_before == self.checkpoint_hash_after
    }
}

/// Tuning-free evaluation: the checkpoint is applied to the target
/// graph with zero parameter updates (no gradient tape exists on this
/// path). Episodes run independently and may execute in parallel.
pub fn evaluate(ckpt: &Checkpoint, target: &Graph, opts: &EvalOptions) -> Result<EvalReport> {
    let train_cfg = train_config_of(ckpt)?;
    let task_kind = opts.task_kind.unwrap_or(train_cfg.task_kind);
    let topo = ckpt.params.topology().clone();
    if topo.d_in != target.feature_dim() {
        return Err(Error::Config(format!(
            "checkpoint expects d_in {} but the target graph has {}; feature-projection adapters are out of scope",
            topo.d_in,
            target.feature_dim()
        )));
    }
    if opts.k_shots == 0 && !opts.zero_shot_fallback {
        return Err(Error::Sampling(
            "at least one support example per class required (enable the zero-shot fallback to cluster instead)"
                .to_string(),
        ));
    }
    let hash_before = ckpt.sha256_hex();

    let results: Vec<Result<f64>> = exec::map_indexed(opts.episodes, |i| {
        run_episode(
            ckpt,
            target,
            &train_cfg,
            task_kind,
            opts,
            mix_seed(opts.seed, &[i as u64]),
        )
    });
    let mut per_episode = Vec::with_capacity(opts.episodes);
    for r in results {
        per_episode.push(r?);
    }

    let mean = per_episode.iter().sum::<f64>() / per_episode.len().max(1) as f64;
    let var = per_episode
        .iter()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / per_episode.len().max(1) as f64;
    let hash_after = ckpt.sha256_hex();
    Ok(EvalReport {
        per_episode,
        mean,
        std: var.sqrt(),
        episodes: opts.episodes,
        config: serde_json::json!({
            "m": opts.m, "k_shots": opts.k_shots, "n": opts.n,
            "episodes": opts.episodes, "seed": opts.seed,
            "task_kind": task_kind, "zero_shot_fallback": opts.zero_shot_fallback,
        }),
        checkpoint_hash_before: hash_before,
        checkpoint_hash_after: hash_after,
    })
}

/// Accuracy of one downstream episode under the frozen checkpoint.
pub fn run_episode(
    ckpt: &Checkpoint,
    target: &Graph,
    train_cfg: &TrainConfig,
    task_kind: TaskKind,
    opts: &EvalOptions,
    seed: u64,
) -> Result<f64> {
    let k_eff = opts.k_shots.max(1);
    let episode = sample_downstream_episode(target, opts.m, k_eff, opts.n, task_kind, seed)?;

    let mut contexts = Vec::with_capacity(episode.support.len() + episode.queries.len());
    for (i, x) in episode.support.iter().chain(&episode.queries).enumerate() {
        contexts.push(build_context(
            target,
            *x,
            train_cfg.h,
            train_cfg.fanout_cap,
            mix_seed(seed, &[TAG_CONTEXT, i as u64]),
        )?);
    }

    let tape = Tape::inference();
    let bound = BoundParams::bind(&tape, &ckpt.params);
    let (ex, qu, _) = episode_embeddings(&tape, &bound, &episode, &contexts, None)?;

    if opts.k_shots == 0 {
        return zero_shot_clustering_accuracy(&episode, qu.value(), seed);
    }

    let pg = build_prompt_graph(ex, qu, &episode.classes, episode.shots, episode.queries_per_class)?;
    let score = refine_and_score(&pg, &bound)?;
    let preds = predict(&score.logits.value());
    let truth = episode.query_slots();
    let correct = preds.iter().zip(&truth).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / truth.len() as f64)
}

/// Label-free fallback: k-means over query embeddings with the best
/// cluster-to-class assignment. A clustering accuracy, not the trained
/// protocol.
fn zero_shot_clustering_accuracy(episode: &Episode, query_embs: Tensor<f32>, seed: u64) -> Result<f64> {
    let m = episode.ways();
    let truth = episode.query_slots();
    let km = kmeans(
        &query_embs,
        m,
        &KmeansConfig::default(),
        mix_seed(seed, &[TAG_FALLBACK_KMEANS]),
    )?;
    let mut agree = vec![vec![0usize; m]; m];
    for (q, &t) in truth.iter().enumerate() {
        agree[km.assignments[q]][t] += 1;
    }
    let mut perm: Vec<usize> = (0..m).collect();
    let mut best = 0usize;
    permute_for_best(&mut perm, 0, &agree, &mut best);
    Ok(best as f64 / truth.len() as f64)
}

fn permute_for_best(perm: &mut Vec<usize>, at: usize, agree: &[Vec<usize>], best: &mut usize) {
    let m = perm.len();
    if at == m {
        let score: usize = (0..m).map(|c| agree[c][perm[c]]).sum();
        *best = (*best).max(score);
        return;
    }
    for i in at..m {
        perm.swap(at, i);
        permute_for_best(perm, at + 1, agree, best);
        perm.swap(at, i);
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct SweepRow {
    pub lambda: Option<f64>,
    pub p: Option<f64>,
    pub k_shots: Option<usize>,
    pub ways: Option<usize>,
    pub mean: f64,
    pub std: f64,
}

/// Train + evaluate once per (lambda, p) grid cell. Cells run
/// independently (and in parallel when enabled).
pub fn sweep_lambda_p(
    source: &Graph,
    target: &Graph,
    base: &TrainConfig,
    lambdas: &[f64],
    ps: &[f64],
    opts: &EvalOptions,
    cache_dir: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    if lambdas.is_empty() || ps.is_empty() {
        return Err(Error::InvalidArgument("empty sweep grid".to_string()));
    }
    let cells: Vec<(f64, f64)> = lambdas
        .iter()
        .flat_map(|&l| ps.iter().map(move |&p| (l, p)))
        .collect();
    let results: Vec<Result<SweepRow>> = exec::map_indexed(cells.len(), |i| {
        let (lambda, p) = cells[i];
        let mut cfg = base.clone();
        cfg.lambda = lambda;
        cfg.p = p;
        let outcome = train(source, &cfg, cache_dir)?;
        let report = evaluate(&outcome.checkpoint, target, opts)?;
        Ok(SweepRow {
            lambda: Some(lambda),
            p: Some(p),
            k_shots: None,
            ways: None,
            mean: report.mean,
            std: report.std,
        })
    });
    results.into_iter().collect()
}

pub enum EvalGrid {
    Shots(Vec<usize>),
    Ways(Vec<usize>),
}

/// Evaluate a fixed checkpoint across a shots or ways grid; no
/// retraining happens.
pub fn sweep_eval(
    ckpt: &Checkpoint,
    target: &Graph,
    grid: &EvalGrid,
    base: &EvalOptions,
) -> Result<Vec<SweepRow>> {
    let values: &[usize] = match grid {
        EvalGrid::Shots(v) => v,
        EvalGrid::Ways(v) => v,
    };
    if values.is_empty() {
        return Err(Error::InvalidArgument("empty sweep grid".to_string()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let mut opts = *base;
        let (k_col, m_col) = match grid {
            EvalGrid::Shots(_) => {
                opts.k_shots = v;
                if v == 0 {
                    opts.zero_shot_fallback = true;
                }
                (Some(v), None)
            }
            EvalGrid::Ways(_) => {
                opts.m = v;
                (None, Some(v))
            }
        };
        let report = evaluate(ckpt, target, &opts)?;
        rows.push(SweepRow {
            lambda: None,
            p: None,
            k_shots: k_col,
            ways: m_col,
            mean: report.mean,
            std: report.std,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct AblationRow {
    pub arm: String,
    pub mean: f64,
    pub std: f64,
}

/// The five ablation arms of the optimization components, trained and
/// evaluated with shared seeds.
pub fn ablate(
    source: &Graph,
    target: &Graph,
    base: &TrainConfig,
    opts: &EvalOptions,
    cache_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let arms: Vec<(&str, AblationFlags)> = vec![
        ("baseline", AblationFlags::all_off()),
        (
            "O1",
            AblationFlags {
                o1_centroid_clustering: true,
                ..AblationFlags::all_off()
            },
        ),
        (
            "O1+O2",
            AblationFlags {
                o1_centroid_clustering: true,
                o2_balanced_augmentation: true,
                o3_orth_and_attr: false,
            },
        ),
        (
            "O1+O3",
            AblationFlags {
                o1_centroid_clustering: true,
                o2_balanced_augmentation: false,
                o3_orth_and_attr: true,
            },
        ),
        ("O1+O2+O3", AblationFlags::default()),
    ];
    let results: Vec<Result<AblationRow>> = exec::map_indexed(arms.len(), |i| {
        let (name, flags) = &arms[i];
        let mut cfg = base.clone();
        cfg.ablation = *flags;
        let outcome = train(source, &cfg, cache_dir)?;
        let report = evaluate(&outcome.checkpoint, target, opts)?;
        Ok(AblationRow {
            arm: name.to_string(),
            mean: report.mean,
            std: report.std,
        })
    });
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::gen_planted_partition;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            m: 2,
            s: 2,
            n: 2,
            pool_per_batch: 6,
            batches_per_epoch: 2,
            epochs: 2,
            d: 16,
            h: 2,
            fanout_cap: Some(10),
            embedder: EmbedConfig {
                d: 16,
                epochs: 1,
                batch_size: 512,
                negatives: 1,
                ..EmbedConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn tiny_graph() -> Graph {
        gen_planted_partition(3, 30, 0.12, 0.01, 8, 1.0, 55).unwrap()
    }

    #[test]
    fn train_writes_one_log_row_per_step() {
        let g = tiny_graph();
        let cfg = TrainConfig {
            epochs: 3,
            ..tiny_cfg()
        };
        let outcome = train(&g, &cfg, None).unwrap();
        assert_eq!(outcome.log.len(), 3 * 2);
        assert!(outcome.log.iter().enumerate().all(|(i, l)| l.step == i));
        assert!(outcome.log.iter().all(|l| l.total.is_finite()));
    }

    #[test]
    fn zero_epoch_training_checkpoints_the_initialization() {
        let g = tiny_graph();
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_cfg()
        };
        let o1 = train(&g, &cfg, None).unwrap();
        assert!(o1.log.is_empty());
        let o2 = train(&g, &cfg, None).unwrap();
        assert_eq!(o1.checkpoint.sha256_hex(), o2.checkpoint.sha256_hex());
    }

    #[test]
    fn training_is_bit_deterministic() {
        let g = tiny_graph();
        let cfg = tiny_cfg();
        let o1 = train(&g, &cfg, None).unwrap();
        let o2 = train(&g, &cfg, None).unwrap();
        assert_eq!(o1.checkpoint.to_bytes(), o2.checkpoint.to_bytes());
        let changed = TrainConfig {
            seed_init: 99,
            ..cfg
        };
        let o3 = train(&g, &changed, None).unwrap();
        assert_ne!(o1.checkpoint.to_bytes(), o3.checkpoint.to_bytes());
    }

    #[test]
    fn evaluate_is_tuning_free_and_deterministic() {
        let g = tiny_graph();
        let cfg = tiny_cfg();
        let outcome = train(&g, &cfg, None).unwrap();
        let opts = EvalOptions {
            m: 2,
            k_shots: 2,
            n: 2,
            episodes: 20,
            ..EvalOptions::default()
        };
        let r1 = evaluate(&outcome.checkpoint, &g, &opts).unwrap();
        assert!(r1.tuning_free_ok());
        assert_eq!(r1.per_episode.len(), 20);
        let expect_mean = r1.per_episode.iter().sum::<f64>() / 20.0;
        assert!((r1.mean - expect_mean).abs() < 1e-12);
        assert!(r1.per_episode.iter().all(|a| (0.0..=1.0).contains(a)));
        let r2 = evaluate(&outcome.checkpoint, &g, &opts).unwrap();
        assert_eq!(r1.per_episode, r2.per_episode);
    }

    #[test]
    fn evaluate_rejects_feature_width_mismatch() {
        let g = tiny_graph();
        let cfg = tiny_cfg();
        let outcome = train(&g, &cfg, None).unwrap();
        let other = gen_planted_partition(3, 20, 0.2, 0.02, 4, 1.0, 9).unwrap();
        let err = evaluate(&outcome.checkpoint, &other, &EvalOptions::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("d_in 8") && msg.contains("has 4"), "{msg}");
    }

    #[test]
    fn evaluate_zero_shots_errors_without_fallback() {
        let g = tiny_graph();
        let outcome = train(&g, &tiny_cfg(), None).unwrap();
        let opts = EvalOptions {
            m: 2,
            k_shots: 0,
            n: 2,
            episodes: 3,
            ..EvalOptions::default()
        };
        let err = evaluate(&outcome.checkpoint, &g, &opts).unwrap_err();
        assert!(err.to_string().contains("at least one support example"), "{err}");
        let with_fallback = EvalOptions {
            zero_shot_fallback: true,
            ..opts
        };
        let report = evaluate(&outcome.checkpoint, &g, &with_fallback).unwrap();
        assert!(report.per_episode.iter().all(|a| (0.0..=1.0).contains(a)));
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = tiny_cfg();
        cfg.lambda = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.p = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.pool_per_batch = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.n = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_rejects_unknown_json_keys() {
        let json = r#"{"m": 3, "mystery_knob": 1}"#;
        let parsed: std::result::Result<TrainConfig, _> = serde_json::from_str(json);
        assert!(parsed.is_err());
    }

    #[test]
    fn checkpoint_roundtrips_through_disk() {
        let g = tiny_graph();
        let outcome = train(&g, &tiny_cfg(), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ctpk");
        outcome.checkpoint.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.sha256_hex(), outcome.checkpoint.sha256_hex());
        let cfg = train_config_of(&loaded).unwrap();
        assert_eq!(cfg, tiny_cfg());
        // The reloaded checkpoint evaluates identically.
        let opts = EvalOptions {
            m: 2,
            k_shots: 2,
            n: 2,
            episodes: 5,
            ..EvalOptions::default()
        };
        let a = evaluate(&outcome.checkpoint, &g, &opts).unwrap();
        let b = evaluate(&loaded, &g, &opts).unwrap();
        assert_eq!(a.per_episode, b.per_episode);
    }

    #[test]
    fn sweep_grid_shapes() {
        let g = tiny_graph();
        let cfg = TrainConfig {
            epochs: 1,
            ..tiny_cfg()
        };
        let opts = EvalOptions {
            m: 2,
            k_shots: 2,
            n: 2,
            episodes: 5,
            ..EvalOptions::default()
        };
        let rows = sweep_lambda_p(&g, &g, &cfg, &[0.1, 0.5], &[0.1, 0.3], &opts, None).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.lambda.is_some() && r.p.is_some()));

        let outcome = train(&g, &cfg, None).unwrap();
        let rows = sweep_eval(&outcome.checkpoint, &g, &EvalGrid::Shots(vec![2, 3]), &opts).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].k_shots, Some(2));
        let rows = sweep_eval(&outcome.checkpoint, &g, &EvalGrid::Ways(vec![2, 3]), &opts).unwrap();
        assert_eq!(rows[1].ways, Some(3));
    }

    #[test]
    fn ablate_produces_five_arms() {
        let g = tiny_graph();
        let cfg = TrainConfig {
            epochs: 1,
            ..tiny_cfg()
        };
        let opts = EvalOptions {
            m: 2,
            k_shots: 2,
            n: 2,
            episodes: 4,
            ..EvalOptions::default()
        };
        let rows = ablate(&g, &g, &cfg, &opts, None).unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.arm.as_str()).collect();
        assert_eq!(names, vec!["baseline", "O1", "O1+O2", "O1+O3", "O1+O2+O3"]);
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.mean)));
    }
}
