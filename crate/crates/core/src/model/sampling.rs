use rand::Rng;

/// Uniform negatives over items outside a user's training set.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    n_items: usize,
    /// Sorted, deduplicated.
    seen: Vec<Vec<usize>>,
    max_rejections: usize,
}

impl NegativeSampler {
    pub const DEFAULT_MAX_REJECTIONS: usize = 64;

    pub fn new(n_items: usize, seen: Vec<Vec<usize>>) -> Self {
        Self {
            n_items,
            seen,
            max_rejections: Self::DEFAULT_MAX_REJECTIONS,
        }
    }

    pub fn with_max_rejections(mut self, cap: usize) -> Self {
        self.max_rejections = cap;
        self
    }

    pub fn is_seen(&self, user: usize, item: usize) -> bool {
        self.seen[user].binary_search(&item).is_ok()
    }

    /// Draws one unseen item, or `None` if the user has seen every item.
    /// After `max_rejections` misses the complement is enumerated.
    pub fn sample<R: Rng + ?Sized>(&self, user: usize, rng: &mut R) -> Option<usize> {
        let seen = &self.seen[user];
        if seen.len() >= self.n_items {
            return None;
        }
        for _ in 0..self.max_rejections {
            let cand = rng.random_range(0..self.n_items);
            if !self.is_seen(user, cand) {
                return Some(cand);
            }
        }
        let free = self.n_items - seen.len();
        let mut k = rng.random_range(0..free);
        for item in 0..self.n_items {
            if !self.is_seen(user, item) {
                if k == 0 {
                    return Some(item);
                }
                k -= 1;
            }
        }
        unreachable!("complement has {free} items")
    }
}
