//! Array-backed binary tree over a power-of-two number of leaves.
//!
//! Each leaf holds a raw priority `p` and its sampling mass `p^η`. Internal
//! nodes store the sum of masses and the max of raw priorities of their
//! subtree, so proportional sampling and the "max priority" lookup used for
//! new insertions are both `O(log n)`.

#[derive(Debug, Clone)]
pub struct SumTree {
    leaves: usize,
    sums: Vec<f64>,
    maxes: Vec<f64>,
}

impl SumTree {
    /// A tree with room for at least `capacity` leaves, all zero.
    pub fn new(capacity: usize) -> Self {
        let leaves = capacity.max(1).next_power_of_two();
        Self {
            leaves,
            sums: vec![0.0; 2 * leaves],
            maxes: vec![0.0; 2 * leaves],
        }
    }

    /// Number of leaves (a power of two).
    pub fn leaves(&self) -> usize {
        self.leaves
    }

    /// Sum of all leaf masses.
    pub fn total(&self) -> f64 {
        self.sums[1]
    }

    /// Largest raw priority currently stored.
    pub fn max_priority(&self) -> f64 {
        self.maxes[1]
    }

    pub fn mass(&self, leaf: usize) -> f64 {
        self.sums[self.leaves + leaf]
    }

    pub fn priority(&self, leaf: usize) -> f64 {
        self.maxes[self.leaves + leaf]
    }

    /// Sets a leaf and recomputes its ancestors from their children.
    pub fn set(&mut self, leaf: usize, priority: f64, mass: f64) {
        assert!(leaf < self.leaves, "leaf {leaf} out of range");
        let mut node = self.leaves + leaf;
        self.sums[node] = mass;
        self.maxes[node] = priority;
        while node > 1 {
            node /= 2;
            let (l, r) = (2 * node, 2 * node + 1);
            self.sums[node] = self.sums[l] + self.sums[r];
            self.maxes[node] = self.maxes[l].max(self.maxes[r]);
        }
    }

    /// Leaf whose cumulative mass interval contains `mass` (`0 <= mass < total`).
    /// Never descends into a zero-mass subtree when a sibling has mass.
    pub fn find(&self, mut mass: f64) -> usize {
        let mut node = 1;
        while node < self.leaves {
            let l = 2 * node;
            let left = self.sums[l];
            if mass < left || self.sums[l + 1] <= 0.0 {
                node = l;
            } else {
                mass -= left;
                node = l + 1;
            }
        }
        node - self.leaves
    }

    /// Checks every internal node against its children (relative tolerance).
    pub fn verify(&self, rel_tol: f64) -> bool {
        (1..self.leaves).all(|node| {
            let s = self.sums[2 * node] + self.sums[2 * node + 1];
            let m = self.maxes[2 * node].max(self.maxes[2 * node + 1]);
            (self.sums[node] - s).abs() <= rel_tol * s.abs().max(f64::MIN_POSITIVE)
                && self.maxes[node] == m
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounds_capacity_up() {
        assert_eq!(SumTree::new(5).leaves(), 8);
        assert_eq!(SumTree::new(8).leaves(), 8);
        assert_eq!(SumTree::new(0).leaves(), 1);
        assert_eq!(SumTree::new(100_000).leaves(), 131_072);
    }

    #[test]
    fn find_walks_cumulative_mass() {
        let mut t = SumTree::new(4);
        t.set(0, 1.0, 1.0);
        t.set(1, 3.0, 3.0);
        t.set(2, 2.0, 2.0);
        assert_eq!(t.total(), 6.0);
        assert_eq!(t.max_priority(), 3.0);
        assert_eq!(t.find(0.0), 0);
        assert_eq!(t.find(0.999), 0);
        assert_eq!(t.find(1.0), 1);
        assert_eq!(t.find(3.999), 1);
        assert_eq!(t.find(4.0), 2);
        // rounding past the end never lands on the empty leaf
        assert_eq!(t.find(6.0 + 1e-9), 2);
        assert!(t.verify(1e-12));
    }

    #[test]
    fn max_tracks_decreases() {
        let mut t = SumTree::new(4);
        t.set(0, 5.0, 5.0);
        t.set(1, 2.0, 2.0);
        t.set(0, 1.0, 1.0);
        assert_eq!(t.max_priority(), 2.0);
    }
}
