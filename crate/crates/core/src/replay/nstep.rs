//! Multistep reward accumulation.

use std::collections::VecDeque;

use crate::error::{config, Result};

/// An entry whose `n`-step discounted reward is complete.
#[derive(Debug, Clone, PartialEq)]
pub struct NStepOutput<T> {
    pub payload: T,
    pub reward_n: f64,
}

/// Sliding window producing `Σ_{i<n} γ^i R_{t+i}` anchored at the oldest entry.
#[derive(Debug, Clone)]
pub struct NStepAccumulator<T> {
    n: usize,
    gamma: f64,
    window: VecDeque<(f64, T)>,
}

impl<T> NStepAccumulator<T> {
    pub fn new(n: usize, gamma: f64) -> Result<Self> {
        if n == 0 {
            return Err(config("n-step count must be at least 1"));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(config(format!("discount {gamma} outside [0, 1]")));
        }
        Ok(Self {
            n,
            gamma,
            window: VecDeque::with_capacity(n),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn pending(&self) -> usize {
        self.window.len()
    }

    fn discounted(&self) -> f64 {
        let mut total = 0.0;
        let mut discount = 1.0;
        for (r, _) in &self.window {
            total += discount * r;
            discount *= self.gamma;
        }
        total
    }

    /// Adds the next reward; emits the oldest entry once `n` rewards are held.
    pub fn push(&mut self, reward: f64, payload: T) -> Option<NStepOutput<T>> {
        self.window.push_back((reward, payload));
        if self.window.len() < self.n {
            return None;
        }
        let reward_n = self.discounted();
        let (_, payload) = self.window.pop_front().expect("window is full");
        Some(NStepOutput { payload, reward_n })
    }

    /// Drains the partial window at an episode end, each entry receiving the
    /// shortened sum of the rewards that follow it.
    pub fn flush(&mut self) -> Vec<NStepOutput<T>> {
        let mut out = Vec::with_capacity(self.window.len());
        while !self.window.is_empty() {
            let reward_n = self.discounted();
            let (_, payload) = self.window.pop_front().expect("non-empty");
            out.push(NStepOutput { payload, reward_n });
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(n: usize, gamma: f64, rewards: &[f64]) -> Vec<f64> {
        let mut acc = NStepAccumulator::new(n, gamma).unwrap();
        let mut out: Vec<f64> = rewards
            .iter()
            .enumerate()
            .filter_map(|(i, &r)| acc.push(r, i).map(|o| o.reward_n))
            .collect();
        out.extend(acc.flush().into_iter().map(|o| o.reward_n));
        out
    }

    #[test]
    fn gamma_zero_keeps_the_anchor_reward() {
        let r = [1.0, 0.0, 1.0, 1.0, 0.0];
        assert_eq!(run(3, 0.0, &r), r.to_vec());
    }

    #[test]
    fn single_step_is_identity() {
        let r = [0.3, 2.0, -1.0];
        assert_eq!(run(1, 0.9, &r), r.to_vec());
    }

    #[test]
    fn three_step_half_discount() {
        let mut acc = NStepAccumulator::new(3, 0.5).unwrap();
        assert!(acc.push(1.0, 'a').is_none());
        assert!(acc.push(0.0, 'b').is_none());
        let out = acc.push(1.0, 'c').unwrap();
        assert_eq!(out.payload, 'a');
        assert_eq!(out.reward_n, 1.25);
        let rest = acc.flush();
        assert_eq!(rest.len(), 2);
        assert_eq!(rest[0].reward_n, 0.5);
        assert_eq!(rest[1].reward_n, 1.0);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NStepAccumulator::<()>::new(0, 0.5).is_err());
        assert!(NStepAccumulator::<()>::new(3, 1.5).is_err());
    }
}
