use rand::Rng;

/// Fixed-capacity FIFO ring buffer with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    items: Vec<T>,
    capacity: usize,
    // Slot the next push overwrites once full.
    next: usize,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            items: Vec::with_capacity(capacity.min(1 << 16)),
            capacity,
            next: 0,
        }
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.next] = item;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Slot access; slot order equals insertion order until the first wrap.
    pub fn get(&self, slot: usize) -> Option<&T> {
        self.items.get(slot)
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    /// `n` slots drawn uniformly with replacement.
    pub fn sample_slots<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        assert!(!self.items.is_empty(), "cannot sample from an empty buffer");
        (0..n).map(|_| rng.random_range(0..self.items.len())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evicts_oldest_first() {
        let mut b = ReplayBuffer::new(3);
        for i in 0..5 {
            b.push(i);
        }
        assert_eq!(b.len(), 3);
        let mut kept: Vec<_> = b.iter().copied().collect();
        kept.sort();
        assert_eq!(kept, vec![2, 3, 4]);
    }

    #[test]
    fn samples_stay_in_range() {
        let mut b = ReplayBuffer::new(10);
        b.push(1);
        b.push(2);
        let mut rng = crate::rng::stream(0, 0);
        assert!(b.sample_slots(100, &mut rng).iter().all(|s| *s < 2));
    }
}
