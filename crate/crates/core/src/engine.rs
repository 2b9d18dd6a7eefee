//! One seeded acquisition run: pool initialisation, optional pretraining on
//! `D_initial`, then selection events until the budget is spent.

use std::str::FromStr;
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::agent::{gather_features, Agent, AgentParams, RewardKind};
use crate::baselines::{coreset_greedy_from, rank_bald, rank_entropy, rank_random};
use crate::error::{config, Result};
use crate::pool::{histogram_entropy, Budget, HistogramState, PatchRecord, Pool};
use crate::pool_io::PoolHeader;
use crate::synth::IouModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Random,
    Entropy,
    Bald,
    Coreset,
    Misical,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::Random,
        PolicyKind::Entropy,
        PolicyKind::Bald,
        PolicyKind::Coreset,
        PolicyKind::Misical,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Random => "random",
            PolicyKind::Entropy => "entropy",
            PolicyKind::Bald => "bald",
            PolicyKind::Coreset => "coreset",
            PolicyKind::Misical => "misical",
        }
    }
}

impl FromStr for PolicyKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                config(format!(
                    "unknown policy '{s}' (random, entropy, bald, coreset, misical)"
                ))
            })
    }
}

impl std::fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub policy: PolicyKind,
    pub target_class: usize,
    pub budget: Budget,
    pub agent: AgentParams,
    /// Simulated IoU model; required for ΔIoU rewards.
    pub iou: Option<IouModel>,
    pub record_wall_time: bool,
}

/// One exploration selection event.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRow {
    pub event: usize,
    pub epsilon: Option<f64>,
    pub cumulative_reward: f64,
    pub labelled_count: usize,
    pub histogram_entropy: f64,
    pub dqn_loss: Option<f64>,
    pub simulated_mean_iou: Option<f64>,
    pub wall_ms: Option<f64>,
    /// Acquired patches containing the target class, cumulative.
    pub target_patches: usize,
}

/// One selection event of a pretraining epoch over `D_initial`.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainRow {
    pub epoch: usize,
    pub event: usize,
    pub epsilon: f64,
    pub acquired: usize,
    pub target_patches: usize,
    pub cumulative_reward: f64,
    pub dqn_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    pub events: Vec<EventRow>,
    pub pretrain: Vec<PretrainRow>,
    /// Target-containing patches in `D_initial`.
    pub initial_targets: usize,
    pub initial_size: usize,
    /// Per-class labelled pixel counts at the end of the run.
    pub final_histogram: Vec<u64>,
}

impl RunResult {
    /// Per epoch, the first event at which every target patch of `D_initial`
    /// had been acquired.
    pub fn saturation_events(&self) -> Vec<Option<usize>> {
        let epochs = self
            .pretrain
            .iter()
            .map(|r| r.epoch)
            .max()
            .map_or(0, |e| e + 1);
        (0..epochs)
            .map(|e| {
                self.pretrain
                    .iter()
                    .filter(|r| r.epoch == e)
                    .find(|r| r.target_patches >= self.initial_targets)
                    .map(|r| r.event)
            })
            .collect()
    }

    /// Number of selection events in each pretraining epoch.
    pub fn epoch_lengths(&self) -> Vec<usize> {
        let epochs = self
            .pretrain
            .iter()
            .map(|r| r.epoch)
            .max()
            .map_or(0, |e| e + 1);
        (0..epochs)
            .map(|e| self.pretrain.iter().filter(|r| r.epoch == e).count())
            .collect()
    }

    pub fn final_row(&self) -> Option<&EventRow> {
        self.events.last()
    }
}

/// Independent generator per purpose, derived from the run seed.
fn stream(seed: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng
}

fn rewards(
    cfg: &EngineConfig,
    records: &[PatchRecord],
    picked: &[usize],
    before: &HistogramState,
    after: &HistogramState,
) -> Result<Vec<f64>> {
    match cfg.agent.reward {
        RewardKind::Categorical => picked
            .iter()
            .map(|&i| crate::pool::reward_categorical(&records[i], cfg.target_class))
            .collect(),
        RewardKind::DeltaIou => {
            let model = cfg.iou.as_ref().ok_or_else(|| {
                config("delta_iou reward needs the simulated IoU model (iou.simulate)")
            })?;
            let r = model.delta_iou_reward(before, after, cfg.target_class)?;
            Ok(vec![r; picked.len()])
        }
    }
}

/// Squared distance from each record to its nearest labelled record,
/// brought up to date lazily as the labelled list grows.
struct CoresetCache {
    dim: usize,
    nearest: Vec<f64>,
    seen: Vec<usize>,
    labelled: Vec<usize>,
}

impl CoresetCache {
    fn new(pool: &Pool) -> Self {
        Self {
            dim: 3 + pool.n_classes(),
            nearest: vec![f64::INFINITY; pool.len()],
            seen: vec![0; pool.len()],
            labelled: pool.initial().to_vec(),
        }
    }

    fn nearest(&mut self, records: &[PatchRecord], idx: usize) -> f64 {
        let mut x = vec![0.0; self.dim];
        records[idx].write_features(&mut x);
        let mut y = vec![0.0; self.dim];
        for &l in &self.labelled[self.seen[idx]..] {
            records[l].write_features(&mut y);
            let d: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
            self.nearest[idx] = self.nearest[idx].min(d);
        }
        self.seen[idx] = self.labelled.len();
        self.nearest[idx]
    }
}

enum Selector {
    Baseline(PolicyKind, Option<CoresetCache>),
    Agent(Box<Agent>),
}

impl Selector {
    fn choose(
        &mut self,
        records: &[PatchRecord],
        candidates: &[usize],
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<usize>, Option<f64>)> {
        let refs = || candidates.iter().map(|&i| &records[i]).collect::<Vec<_>>();
        let positions = match self {
            Selector::Agent(agent) => {
                agent.begin_event(candidates);
                let (picked, eps) = agent.choose(records, candidates, k, rng)?;
                return Ok((picked, Some(eps)));
            }
            Selector::Baseline(PolicyKind::Random, _) => rank_random(candidates.len(), k, rng),
            Selector::Baseline(PolicyKind::Bald, _) => rank_bald(&refs(), k),
            Selector::Baseline(PolicyKind::Entropy, _) => rank_entropy(&refs(), k)?,
            Selector::Baseline(PolicyKind::Coreset, cache) => {
                let cache = cache.as_mut().expect("coreset cache");
                let nearest = candidates
                    .iter()
                    .map(|&i| cache.nearest(records, i))
                    .collect();
                let feats = gather_features(records, candidates);
                let ids: Vec<u64> = candidates.iter().map(|&i| records[i].id).collect();
                let pos = coreset_greedy_from(nearest, &feats, cache.dim, &ids, k)?;
                cache.labelled.extend(pos.iter().map(|&p| candidates[p]));
                pos
            }
            Selector::Baseline(PolicyKind::Misical, _) => {
                unreachable!("agent policies use the agent selector")
            }
        };
        Ok((positions.into_iter().map(|p| candidates[p]).collect(), None))
    }

    fn learn(
        &mut self,
        records: &[PatchRecord],
        picked: &[usize],
        rewards: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<Option<f64>> {
        match self {
            Selector::Agent(agent) => {
                agent.observe(picked, rewards)?;
                agent.train(records, rng)
            }
            Selector::Baseline(..) => Ok(None),
        }
    }

    fn end_episode(&mut self) {
        if let Selector::Agent(agent) = self {
            agent.end_episode();
        }
    }
}

fn events_for(count: usize, k: usize) -> u64 {
    count.div_ceil(k.max(1)) as u64
}

/// Pretraining: each epoch restarts acquisition over a scratch copy of
/// `D_initial` while the agent keeps its weights and replay buffer.
fn pretrain(
    cfg: &EngineConfig,
    pool: &Pool,
    agent: &mut Selector,
    rng: &mut ChaCha8Rng,
    train_rng: &mut ChaCha8Rng,
) -> Result<Vec<PretrainRow>> {
    let records = pool.records();
    let mut rows = Vec::new();
    let p = &cfg.agent;
    for epoch in 0..p.pretrain_epochs {
        let mut selectable: Vec<usize> = pool.initial().to_vec();
        let mut hist = HistogramState::zeros(pool.n_classes());
        let mut cumulative = 0.0;
        let mut targets = 0;
        let mut acquired = 0;
        let mut event = 0;
        while !selectable.is_empty() {
            event += 1;
            let take = p.candidates.min(selectable.len());
            let candidates: Vec<usize> = index::sample(rng, selectable.len(), take)
                .into_iter()
                .map(|j| selectable[j])
                .collect();
            let k = p.select.min(candidates.len());
            let (picked, eps) = agent.choose(records, &candidates, k, rng)?;
            selectable.retain(|i| !picked.contains(i));
            let before = hist.clone();
            for &i in &picked {
                hist.add(&records[i].gt_pixel_counts);
            }
            let r = rewards(cfg, records, &picked, &before, &hist)?;
            cumulative += r.iter().sum::<f64>();
            targets += picked
                .iter()
                .filter(|&&i| records[i].contains(cfg.target_class))
                .count();
            acquired += picked.len();
            let loss = agent.learn(records, &picked, &r, train_rng)?;
            rows.push(PretrainRow {
                epoch,
                event,
                epsilon: eps.unwrap_or(0.0),
                acquired,
                target_patches: targets,
                cumulative_reward: cumulative,
                dqn_loss: loss,
            });
        }
        agent.end_episode();
    }
    Ok(rows)
}

/// Runs one seed of the configured policy over a pool.
pub fn run_seed(
    header: &PoolHeader,
    records: Vec<PatchRecord>,
    cfg: &EngineConfig,
    seed: u64,
) -> Result<RunResult> {
    let c = header.n_classes as usize;
    if cfg.target_class >= c {
        return Err(config(format!(
            "target class {} out of range for a pool with {c} classes",
            cfg.target_class
        )));
    }
    cfg.agent.validate()?;
    if let Some(m) = &cfg.iou {
        if m.classes() != c {
            return Err(config("IoU model class count does not match the pool"));
        }
    }
    if cfg.agent.reward == RewardKind::DeltaIou && cfg.iou.is_none() {
        return Err(config(
            "delta_iou reward needs the simulated IoU model (iou.simulate)",
        ));
    }
    if cfg.policy == PolicyKind::Entropy && !header.has_entropy() {
        return Err(config(
            "entropy policy needs a pool with the entropy column (header flag bit 0)",
        ));
    }
    let mut init_rng = stream(seed, 0);
    let mut select_rng = stream(seed, 1);
    let mut train_rng = stream(seed, 2);
    let mut pool = Pool::init(header, records, cfg.budget, &mut init_rng)?;
    let p = &cfg.agent;
    let initial_size = pool.initial().len();
    let initial_targets = pool
        .initial()
        .iter()
        .filter(|&&i| pool.record(i).contains(cfg.target_class))
        .count();

    let mut selector = match cfg.policy {
        PolicyKind::Misical => {
            let planned = p.pretrain_epochs as u64 * events_for(initial_size, p.select)
                + events_for(pool.remaining_budget(), p.select);
            let agent_seed = stream(seed, 3).random::<u64>();
            Selector::Agent(Box::new(Agent::new(p.clone(), c, planned, agent_seed)?))
        }
        PolicyKind::Coreset => Selector::Baseline(cfg.policy, Some(CoresetCache::new(&pool))),
        other => Selector::Baseline(other, None),
    };

    let pretrain_rows = if cfg.policy == PolicyKind::Misical && initial_size > 0 {
        pretrain(cfg, &pool, &mut selector, &mut select_rng, &mut train_rng)?
    } else {
        Vec::new()
    };

    let mut events = Vec::new();
    let mut cumulative = 0.0;
    let mut targets = 0;
    let mut event = 0;
    while !pool.is_exhausted() {
        let candidates = pool.sample_candidates(p.candidates, &mut select_rng)?;
        if candidates.is_empty() {
            break;
        }
        let started = Instant::now();
        event += 1;
        let k = p.select.min(pool.remaining_budget()).min(candidates.len());
        let (picked, eps) = selector.choose(pool.records(), &candidates, k, &mut select_rng)?;
        let before = pool.histogram().clone();
        for &i in &picked {
            pool.label(i)?;
        }
        let r = rewards(cfg, pool.records(), &picked, &before, pool.histogram())?;
        cumulative += r.iter().sum::<f64>();
        targets += picked
            .iter()
            .filter(|&&i| pool.record(i).contains(cfg.target_class))
            .count();
        let loss = selector.learn(pool.records(), &picked, &r, &mut train_rng)?;
        let hist = pool.histogram();
        events.push(EventRow {
            event,
            epsilon: eps,
            cumulative_reward: cumulative,
            labelled_count: pool.labelled_count(),
            histogram_entropy: if hist.total() > 0 {
                histogram_entropy(hist)?
            } else {
                0.0
            },
            dqn_loss: loss,
            simulated_mean_iou: cfg
                .iou
                .as_ref()
                .map(|m| m.simulated_mean_iou(hist))
                .transpose()?,
            wall_ms: cfg
                .record_wall_time
                .then(|| started.elapsed().as_secs_f64() * 1e3),
            target_patches: targets,
        });
    }
    selector.end_episode();
    Ok(RunResult {
        seed,
        events,
        pretrain: pretrain_rows,
        initial_targets,
        initial_size,
        final_histogram: pool.histogram().counts().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_records, SynthConfig, DEFAULT_TARGET};

    fn synth(n: usize) -> (PoolHeader, Vec<PatchRecord>) {
        let cfg = SynthConfig {
            n_patches: n,
            ..SynthConfig::default()
        };
        (cfg.header(), generate_records(&cfg).unwrap())
    }

    fn engine(policy: PolicyKind) -> EngineConfig {
        EngineConfig {
            policy,
            target_class: DEFAULT_TARGET,
            budget: Budget::new(0.025, 0.05),
            agent: AgentParams {
                candidates: 200,
                select: 20,
                batch_size: 32,
                pretrain_epochs: 2,
                ..AgentParams::default()
            },
            iou: Some(IouModel::random(16, 0)),
            record_wall_time: false,
        }
    }

    #[test]
    fn every_policy_spends_the_budget_exactly() {
        let (h, recs) = synth(4_000);
        for policy in PolicyKind::ALL {
            let out = run_seed(&h, recs.clone(), &engine(policy), 1).unwrap();
            let last = out.final_row().unwrap();
            assert_eq!(last.labelled_count, 200, "{policy}");
            assert_eq!(out.events.len(), 5);
            assert!(out
                .events
                .windows(2)
                .all(|w| w[0].labelled_count < w[1].labelled_count));
            assert_eq!(last.dqn_loss.is_some(), policy == PolicyKind::Misical);
            // categorical reward equals the count of target patches acquired
            assert_eq!(last.cumulative_reward, last.target_patches as f64);
        }
    }

    #[test]
    fn pretraining_epochs_cover_the_initial_set() {
        let (h, recs) = synth(4_000);
        let out = run_seed(&h, recs, &engine(PolicyKind::Misical), 2).unwrap();
        assert_eq!(out.epoch_lengths(), vec![5, 5]);
        for e in 0..2 {
            let last = out
                .pretrain
                .iter()
                .filter(|r| r.epoch == e)
                .next_back()
                .unwrap();
            assert_eq!(last.acquired, out.initial_size);
            assert_eq!(last.target_patches, out.initial_targets);
        }
    }

    #[test]
    fn absent_target_yields_nothing() {
        let (h, mut recs) = synth(2_000);
        for r in &mut recs {
            r.gt_pixel_counts[0] += r.gt_pixel_counts[DEFAULT_TARGET];
            r.gt_pixel_counts[DEFAULT_TARGET] = 0;
        }
        let out = run_seed(&h, recs, &engine(PolicyKind::Misical), 0).unwrap();
        assert_eq!(out.final_row().unwrap().cumulative_reward, 0.0);
        assert_eq!(out.final_row().unwrap().labelled_count, 100);
    }

    #[test]
    fn degenerate_budget_runs_no_events() {
        let (h, recs) = synth(1_000);
        let mut cfg = engine(PolicyKind::Random);
        cfg.budget = Budget::new(0.05, 0.05);
        let out = run_seed(&h, recs, &cfg, 0).unwrap();
        assert!(out.events.is_empty());
    }

    #[test]
    fn runs_are_deterministic() {
        let (h, recs) = synth(3_000);
        let mut cfg = engine(PolicyKind::Misical);
        cfg.agent.gamma = 0.9;
        let a = run_seed(&h, recs.clone(), &cfg, 5).unwrap();
        let b = run_seed(&h, recs, &cfg, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn entropy_policy_requires_the_column() {
        let cfg = SynthConfig {
            n_patches: 500,
            with_entropy: false,
            ..SynthConfig::default()
        };
        let recs = generate_records(&cfg).unwrap();
        let err = run_seed(&cfg.header(), recs, &engine(PolicyKind::Entropy), 0).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn policy_names_parse() {
        for p in PolicyKind::ALL {
            assert_eq!(p.name().parse::<PolicyKind>().unwrap(), p);
        }
        assert!("greedy".parse::<PolicyKind>().is_err());
    }
}
