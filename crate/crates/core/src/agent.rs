//! The Double-DQN acquisition agent.
//!
//! Each selection event scores a candidate subset with the local network,
//! fills `k` slots (each one random with probability ε, otherwise the best
//! remaining Q-value), stores n-step experiences in prioritized replay and
//! trains one batch followed by a soft target update.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{config, validation, Result};
use crate::pool::PatchRecord;
use crate::qnet::{double_q_value, td_target, train_batch, QNetwork, RmsProp};
use crate::replay::{anneal_zeta, Experience, NStepAccumulator, PrioritizedReplay, ZetaSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Constant,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EpsilonSchedule {
    Constant(f64),
    Linear { start: f64, end: f64, steps: u64 },
}

pub fn epsilon_at(schedule: &EpsilonSchedule, step: u64) -> f64 {
    match *schedule {
        EpsilonSchedule::Constant(v) => v,
        EpsilonSchedule::Linear { start, end, steps } => {
            let frac = if steps == 0 {
                1.0
            } else {
                (step as f64 / steps as f64).min(1.0)
            };
            start + (end - start) * frac
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// 1 per acquired patch containing the target class.
    Categorical,
    /// Change of the simulated target-class IoU, shared by the whole batch.
    DeltaIou,
}

/// Learning and selection hyperparameters.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentParams {
    /// Candidate subset size `m`.
    pub candidates: usize,
    /// Patches acquired per selection event `k`.
    pub select: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub n_step: usize,
    pub gamma: f64,
    /// Soft target update rate β.
    pub soft_update: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Priority exponent η.
    pub eta: f64,
    /// Initial importance-sampling exponent ζ.
    pub zeta_start: f64,
    pub p_min: f64,
    pub epsilon_schedule: ScheduleKind,
    /// Constant value, or the start of a linear schedule.
    pub epsilon: f64,
    pub epsilon_end: f64,
    /// Length of a linear schedule in acquired patches.
    pub epsilon_steps: u64,
    pub pretrain_epochs: usize,
    pub reward: RewardKind,
}

impl Default for AgentParams {
    fn default() -> Self {
        Self {
            candidates: 2000,
            select: 100,
            batch_size: 256,
            buffer_capacity: 100_000,
            n_step: 3,
            gamma: 0.0,
            soft_update: 0.002,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            grad_clip: 0.01,
            eta: 0.6,
            zeta_start: 0.4,
            p_min: crate::replay::P_MIN,
            epsilon_schedule: ScheduleKind::Constant,
            epsilon: 0.05,
            epsilon_end: 0.05,
            epsilon_steps: 0,
            pretrain_epochs: 4,
            reward: RewardKind::Categorical,
        }
    }
}

impl AgentParams {
    pub fn epsilon_schedule(&self) -> EpsilonSchedule {
        match self.epsilon_schedule {
            ScheduleKind::Constant => EpsilonSchedule::Constant(self.epsilon),
            ScheduleKind::Linear => EpsilonSchedule::Linear {
                start: self.epsilon,
                end: self.epsilon_end,
                steps: self.epsilon_steps,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let checks: [(bool, &str); 13] = [
            (self.candidates >= 1, "agent.candidates must be at least 1"),
            (self.select >= 1, "agent.select must be at least 1"),
            (
                self.select <= self.candidates,
                "agent.select must not exceed agent.candidates",
            ),
            (self.batch_size >= 1, "agent.batch_size must be at least 1"),
            (
                self.buffer_capacity >= 1,
                "agent.buffer_capacity must be at least 1",
            ),
            (self.n_step >= 1, "agent.n_step must be at least 1"),
            (unit(self.gamma), "agent.gamma must be in [0, 1]"),
            (
                unit(self.soft_update),
                "agent.soft_update must be in [0, 1]",
            ),
            (
                self.learning_rate > 0.0 && self.weight_decay >= 0.0,
                "agent.learning_rate must be > 0 and agent.weight_decay >= 0",
            ),
            (self.grad_clip > 0.0, "agent.grad_clip must be > 0"),
            (
                self.eta >= 0.0 && self.eta.is_finite(),
                "agent.eta must be >= 0",
            ),
            (
                unit(self.zeta_start) && self.p_min > 0.0,
                "agent.zeta_start must be in [0, 1] and agent.p_min > 0",
            ),
            (
                unit(self.epsilon) && unit(self.epsilon_end),
                "agent.epsilon and agent.epsilon_end must be in [0, 1]",
            ),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(config(*msg)),
            None => Ok(()),
        }
    }
}

/// Positions of the `k` chosen candidates: each slot is a uniformly random
/// remaining candidate with probability `epsilon`, otherwise the remaining
/// candidate with the highest score (ties to the lower id).
pub fn select_topk(
    scores: &[f64],
    ids: &[u64],
    k: usize,
    epsilon: f64,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(ids[a].cmp(&ids[b])));
    let mut taken = vec![false; n];
    let mut greedy = 0;
    let mut out = Vec::with_capacity(k.min(n));
    for _ in 0..k.min(n) {
        let pick = if rng.random_bool(epsilon) {
            loop {
                let i = rng.random_range(0..n);
                if !taken[i] {
                    break i;
                }
            }
        } else {
            while taken[order[greedy]] {
                greedy += 1;
            }
            order[greedy]
        };
        taken[pick] = true;
        out.push(pick);
    }
    out
}

/// Feature rows of the given records, concatenated.
pub fn gather_features(records: &[PatchRecord], indices: &[usize]) -> Vec<f64> {
    let dim = records.first().map_or(0, |r| 3 + r.n_classes());
    let mut out = vec![0.0; indices.len() * dim];
    for (row, &i) in out.chunks_exact_mut(dim.max(1)).zip(indices) {
        records[i].write_features(row);
    }
    out
}

#[derive(Debug, Clone)]
struct CandidateSet {
    indices: Vec<usize>,
    refs: usize,
}

pub struct Agent {
    params: AgentParams,
    epsilon: EpsilonSchedule,
    local: QNetwork,
    target: QNetwork,
    opt: RmsProp,
    buffer: PrioritizedReplay<Experience>,
    acc: NStepAccumulator<usize>,
    /// Completed n-step experiences waiting for the next event's candidates.
    pending: Vec<(usize, f64)>,
    candidate_sets: HashMap<u64, CandidateSet>,
    next_handle: u64,
    action_steps: u64,
    train_steps: u64,
    insertions: u64,
    zeta: ZetaSchedule,
}

impl Agent {
    /// `planned_events` sets the ζ annealing horizon.
    pub fn new(
        params: AgentParams,
        n_classes: usize,
        planned_events: u64,
        seed: u64,
    ) -> Result<Self> {
        params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let local = QNetwork::standard(3 + n_classes, &mut rng)?;
        let target = local.clone();
        let opt = RmsProp::new(
            local.n_params(),
            params.learning_rate,
            params.weight_decay,
            params.grad_clip,
        );
        Ok(Self {
            epsilon: params.epsilon_schedule(),
            buffer: PrioritizedReplay::new(params.buffer_capacity, params.eta, params.p_min)?,
            acc: NStepAccumulator::new(params.n_step, params.gamma)?,
            zeta: ZetaSchedule {
                start: params.zeta_start,
                steps: planned_events,
            },
            params,
            local,
            target,
            opt,
            pending: Vec::new(),
            candidate_sets: HashMap::new(),
            next_handle: 0,
            action_steps: 0,
            train_steps: 0,
            insertions: 0,
        })
    }

    pub fn params(&self) -> &AgentParams {
        &self.params
    }

    pub fn local(&self) -> &QNetwork {
        &self.local
    }

    pub fn target(&self) -> &QNetwork {
        &self.target
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer.len()
    }

    pub fn action_steps(&self) -> u64 {
        self.action_steps
    }

    pub fn train_steps(&self) -> u64 {
        self.train_steps
    }

    /// Candidate sets still referenced by stored experiences.
    pub fn live_candidate_sets(&self) -> usize {
        self.candidate_sets.len()
    }

    /// ε for the next acquired patch.
    pub fn epsilon(&self) -> f64 {
        epsilon_at(&self.epsilon, self.action_steps)
    }

    pub fn scores(&self, records: &[PatchRecord], candidates: &[usize]) -> Result<Vec<f64>> {
        self.local
            .forward_batch(&gather_features(records, candidates))
    }

    /// Chooses `k` of `candidates`; returns record indices and the ε used.
    pub fn choose(
        &mut self,
        records: &[PatchRecord],
        candidates: &[usize],
        k: usize,
        rng: &mut impl Rng,
    ) -> Result<(Vec<usize>, f64)> {
        if candidates.is_empty() {
            return Err(validation("no candidates to choose from"));
        }
        let eps = self.epsilon();
        let scores = self.scores(records, candidates)?;
        let ids: Vec<u64> = candidates.iter().map(|&i| records[i].id).collect();
        let picked = select_topk(&scores, &ids, k, eps, rng)
            .into_iter()
            .map(|p| candidates[p])
            .collect::<Vec<_>>();
        self.action_steps += picked.len() as u64;
        Ok((picked, eps))
    }

    fn store(&mut self, action: usize, reward_n: f64, next: Option<u64>) {
        let exp = Experience {
            action,
            reward_n,
            next,
            insertion_index: self.insertions,
        };
        self.insertions += 1;
        if let Some(old) = self.buffer.push(exp).1 {
            self.release(old.next);
        }
    }

    fn release(&mut self, handle: Option<u64>) {
        if let Some(h) = handle {
            let set = self.candidate_sets.get_mut(&h).expect("live candidate set");
            set.refs -= 1;
            if set.refs == 0 {
                self.candidate_sets.remove(&h);
            }
        }
    }

    /// Registers the event's candidate subset as the bootstrap set of the
    /// experiences completed during the previous event.
    pub fn begin_event(&mut self, candidates: &[usize]) {
        if self.params.gamma == 0.0 || self.pending.is_empty() {
            return;
        }
        let handle = self.next_handle;
        self.next_handle += 1;
        let pending = std::mem::take(&mut self.pending);
        self.candidate_sets.insert(
            handle,
            CandidateSet {
                indices: candidates.to_vec(),
                refs: pending.len(),
            },
        );
        for (action, reward_n) in pending {
            self.store(action, reward_n, Some(handle));
        }
    }

    /// Feeds acquired actions and their rewards, in selection order.
    pub fn observe(&mut self, actions: &[usize], rewards: &[f64]) -> Result<()> {
        if actions.len() != rewards.len() {
            return Err(validation("action and reward counts differ"));
        }
        for (&a, &r) in actions.iter().zip(rewards) {
            if let Some(out) = self.acc.push(r, a) {
                if self.params.gamma == 0.0 {
                    self.store(out.payload, out.reward_n, None);
                } else {
                    self.pending.push((out.payload, out.reward_n));
                }
            }
        }
        Ok(())
    }

    /// Flushes partial n-step windows; these experiences bootstrap 0.
    pub fn end_episode(&mut self) {
        let flushed = self.acc.flush();
        let pending = std::mem::take(&mut self.pending);
        for (a, r) in pending {
            self.store(a, r, None);
        }
        for out in flushed {
            self.store(out.payload, out.reward_n, None);
        }
    }

    /// One prioritized batch, a soft target update and priority refresh.
    /// Returns the batch loss, or `None` while the buffer is empty.
    pub fn train(&mut self, records: &[PatchRecord], rng: &mut impl Rng) -> Result<Option<f64>> {
        if self.buffer.is_empty() {
            return Ok(None);
        }
        let zeta = anneal_zeta(self.train_steps, &self.zeta);
        let sample = self.buffer.sample(self.params.batch_size, zeta, rng)?;
        let actions: Vec<usize> = sample
            .leaves
            .iter()
            .map(|&l| self.buffer.get(l).action)
            .collect();
        let xs = gather_features(records, &actions);
        let mut cache: HashMap<u64, f64> = HashMap::new();
        let mut targets = Vec::with_capacity(actions.len());
        for &leaf in &sample.leaves {
            let exp = self.buffer.get(leaf);
            let t = match exp.next {
                None => exp.reward_n,
                Some(h) => td_target(exp.reward_n, self.params.gamma, || {
                    if let Some(&v) = cache.get(&h) {
                        return Ok(v);
                    }
                    let set = &self.candidate_sets[&h];
                    let feats = gather_features(records, &set.indices);
                    let v = double_q_value(&self.local, &self.target, &feats)?;
                    cache.insert(h, v);
                    Ok(v)
                })?,
            };
            targets.push(t);
        }
        let stats = train_batch(
            &mut self.local,
            &mut self.opt,
            &xs,
            &targets,
            &sample.weights,
        )?;
        self.target
            .soft_update_from(&self.local, self.params.soft_update)?;
        self.buffer
            .update_priorities(&sample.leaves, &stats.td_errors)?;
        self.train_steps += 1;
        Ok(Some(stats.loss))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{BaldSummary, ClassPresence};

    fn schedule() -> EpsilonSchedule {
        EpsilonSchedule::Linear {
            start: 1.0,
            end: 0.1,
            steps: 500,
        }
    }

    #[test]
    fn epsilon_examples() {
        assert_eq!(epsilon_at(&EpsilonSchedule::Constant(0.05), 12345), 0.05);
        assert!((epsilon_at(&schedule(), 500) - 0.1).abs() < 1e-12);
        assert!((epsilon_at(&schedule(), 250) - 0.55).abs() < 1e-12);
        assert!((epsilon_at(&schedule(), 10_000) - 0.1).abs() < 1e-12);
        assert_eq!(epsilon_at(&schedule(), 0), 1.0);
    }

    #[test]
    fn greedy_limit_takes_the_best() {
        let scores = [0.1, 0.9, 0.5, 0.7, 0.3];
        let ids = [0, 1, 2, 3, 4];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_topk(&scores, &ids, 3, 0.0, &mut rng), vec![1, 3, 2]);
        let ties = [1.0; 4];
        assert_eq!(
            select_topk(&ties, &[7, 3, 5, 1], 2, 0.0, &mut rng),
            vec![3, 1]
        );
    }

    #[test]
    fn picks_are_distinct_for_any_epsilon() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scores: Vec<f64> = (0..50).map(|i| (i * 7 % 13) as f64).collect();
        let ids: Vec<u64> = (0..50).collect();
        for eps in [0.0, 0.3, 1.0] {
            let mut got = select_topk(&scores, &ids, 50, eps, &mut rng);
            got.sort();
            assert_eq!(got, (0..50).collect::<Vec<_>>());
        }
    }

    #[test]
    fn params_validation() {
        assert!(AgentParams::default().validate().is_ok());
        let bad = AgentParams {
            select: 3000,
            ..AgentParams::default()
        };
        assert!(bad.validate().is_err());
        let bad = AgentParams {
            gamma: 1.5,
            ..AgentParams::default()
        };
        assert!(bad.validate().is_err());
    }

    fn toy(n: usize) -> Vec<PatchRecord> {
        (0..n as u64)
            .map(|id| {
                let hit = id % 5 == 0;
                PatchRecord {
                    id,
                    bald: BaldSummary::ZERO,
                    entropy_mean: None,
                    presence: ClassPresence::new(vec![!hit, hit]),
                    gt_pixel_counts: vec![u32::from(!hit), u32::from(hit)],
                }
            })
            .collect()
    }

    fn small_params(gamma: f64) -> AgentParams {
        AgentParams {
            candidates: 20,
            select: 4,
            batch_size: 16,
            buffer_capacity: 12,
            gamma,
            ..AgentParams::default()
        }
    }

    #[test]
    fn bootstrap_sets_are_released_on_eviction() {
        let records = toy(200);
        let mut agent = Agent::new(small_params(0.9), 2, 50, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for event in 0..30 {
            let cands: Vec<usize> = (event * 5..event * 5 + 20).collect();
            agent.begin_event(&cands);
            let (picked, _) = agent.choose(&records, &cands, 4, &mut rng).unwrap();
            let rewards: Vec<f64> = picked
                .iter()
                .map(|&i| records[i].gt_pixel_counts[1] as f64)
                .collect();
            agent.observe(&picked, &rewards).unwrap();
            agent.train(&records, &mut rng).unwrap();
            // a 12-slot buffer cannot reference more than 12 sets
            assert!(agent.live_candidate_sets() <= 12);
        }
        agent.end_episode();
        assert_eq!(agent.buffer_len(), 12);
        assert!(agent.train(&records, &mut rng).unwrap().is_some());
    }

    #[test]
    fn gamma_zero_stores_without_bootstrap() {
        let records = toy(50);
        let mut agent = Agent::new(small_params(0.0), 2, 10, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cands: Vec<usize> = (0..20).collect();
        agent.begin_event(&cands);
        let (picked, _) = agent.choose(&records, &cands, 4, &mut rng).unwrap();
        agent.observe(&picked, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        // a 3-step window holds the last two actions back
        assert_eq!(agent.buffer_len(), 2);
        assert_eq!(agent.live_candidate_sets(), 0);
        assert_eq!(agent.action_steps(), 4);
        agent.end_episode();
        assert_eq!(agent.buffer_len(), 4);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let records = toy(300);
        let run = || {
            let mut agent = Agent::new(small_params(0.5), 2, 20, 9).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            for event in 0..20 {
                let cands: Vec<usize> = (event * 10..event * 10 + 20).collect();
                agent.begin_event(&cands);
                let (picked, _) = agent.choose(&records, &cands, 4, &mut rng).unwrap();
                let r: Vec<f64> = picked
                    .iter()
                    .map(|&i| records[i].gt_pixel_counts[1] as f64)
                    .collect();
                agent.observe(&picked, &r).unwrap();
                agent.train(&records, &mut rng).unwrap();
            }
            agent.local().params().to_vec()
        };
        assert_eq!(run(), run());
    }
}
