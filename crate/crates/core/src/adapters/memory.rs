use crate::error::{Error, Result};
use crate::numcore::{Matrix, Rng};

/// A stored test sample with the class the model assigned it.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry {
    pub x: Vec<f64>,
    pub class: usize,
    pub entropy: f64,
    /// Insertions since this entry was stored.
    pub age: u64,
}

fn majority(slots: &[Vec<MemoryEntry>]) -> Vec<usize> {
    let max = slots.iter().map(Vec::len).max().unwrap_or(0);
    (0..slots.len()).filter(|&c| slots[c].len() == max).collect()
}

fn to_matrix(entries: &[&MemoryEntry]) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = entries.iter().map(|e| e.x.clone()).collect();
    Matrix::from_rows(&rows)
}

/// Reservoir that keeps predicted classes balanced: while full, a sample of
/// an under-represented class evicts a random member of a majority class;
/// otherwise it enters by reservoir sampling within its own class.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBalancedReservoir {
    capacity: usize,
    slots: Vec<Vec<MemoryEntry>>,
    seen: Vec<usize>,
}

impl PredictionBalancedReservoir {
    pub fn new(capacity: usize, classes: usize) -> Self {
        PredictionBalancedReservoir {
            capacity,
            slots: vec![Vec::new(); classes],
            seen: vec![0; classes],
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn occupancy(&self) -> Vec<usize> {
        self.slots.iter().map(Vec::len).collect()
    }

    pub fn entries(&self) -> Vec<&MemoryEntry> {
        self.slots.iter().flatten().collect()
    }

    pub fn features(&self) -> Result<Matrix> {
        to_matrix(&self.entries())
    }

    pub fn add(&mut self, entry: MemoryEntry, rng: &mut Rng) -> Result<()> {
        let c = entry.class;
        if c >= self.slots.len() {
            return Err(Error::invalid(format!("class {c} out of range")));
        }
        self.seen[c] += 1;
        if self.capacity == 0 {
            return Ok(());
        }
        if self.len() < self.capacity {
            self.slots[c].push(entry);
            return Ok(());
        }
        let major = majority(&self.slots);
        if !major.contains(&c) {
            let k = major[rng.below(major.len())];
            let victim = rng.below(self.slots[k].len());
            self.slots[k].remove(victim);
            self.slots[c].push(entry);
        } else {
            let held = self.slots[c].len();
            if rng.uniform() <= held as f64 / self.seen[c] as f64 {
                let victim = rng.below(held);
                self.slots[c][victim] = entry;
            }
        }
        Ok(())
    }
}

/// Category-balanced memory scored by age and uncertainty: a new sample
/// replaces the highest-scoring entry of its own class (or of a majority
/// class when its class is under quota and the bank is full) if that entry
/// scores higher than the newcomer.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryBalancedMemory {
    capacity: usize,
    per_class: f64,
    slots: Vec<Vec<MemoryEntry>>,
}

impl CategoryBalancedMemory {
    pub fn new(capacity: usize, classes: usize) -> Self {
        CategoryBalancedMemory {
            capacity,
            per_class: capacity as f64 / classes.max(1) as f64,
            slots: vec![Vec::new(); classes],
        }
    }

    pub fn len(&self) -> usize {
        self.slots.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn occupancy(&self) -> Vec<usize> {
        self.slots.iter().map(Vec::len).collect()
    }

    pub fn entries(&self) -> Vec<&MemoryEntry> {
        self.slots.iter().flatten().collect()
    }

    pub fn features(&self) -> Result<Matrix> {
        to_matrix(&self.entries())
    }

    /// Lower is better: old and uncertain entries are evicted first.
    pub fn score(&self, age: u64, entropy: f64) -> f64 {
        let classes = self.slots.len().max(2) as f64;
        1.0 / (1.0 + (-(age as f64) / self.capacity.max(1) as f64).exp()) + entropy / classes.ln()
    }

    fn evict_from(&mut self, classes: &[usize], score: f64) -> bool {
        let mut best: Option<(usize, usize, f64)> = None;
        for &c in classes {
            for (i, e) in self.slots[c].iter().enumerate() {
                let s = self.score(e.age, e.entropy);
                if best.is_none_or(|(_, _, b)| s > b) {
                    best = Some((c, i, s));
                }
            }
        }
        match best {
            Some((c, i, s)) if s > score => {
                self.slots[c].remove(i);
                true
            }
            _ => false,
        }
    }

    pub fn add(&mut self, mut entry: MemoryEntry) -> Result<()> {
        let c = entry.class;
        if c >= self.slots.len() {
            return Err(Error::invalid(format!("class {c} out of range")));
        }
        if self.capacity > 0 {
            entry.age = 0;
            let score = self.score(0, entry.entropy);
            let admit = if (self.slots[c].len() as f64) < self.per_class {
                if self.len() < self.capacity {
                    true
                } else {
                    let major = majority(&self.slots);
                    self.evict_from(&major, score)
                }
            } else {
                self.evict_from(&[c], score)
            };
            if admit {
                self.slots[c].push(entry);
            }
        }
        for e in self.slots.iter_mut().flatten() {
            e.age += 1;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(class: usize, entropy: f64) -> MemoryEntry {
        MemoryEntry {
            x: vec![class as f64],
            class,
            entropy,
            age: 0,
        }
    }

    #[test]
    fn reservoir_respects_capacity_and_balance() {
        let mut rng = Rng::new(0);
        let mut m = PredictionBalancedReservoir::new(21, 7);
        for i in 0..1000 {
            m.add(entry(rng.below(7), 0.1 * (i % 3) as f64), &mut rng).unwrap();
            assert!(m.len() <= 21);
        }
        let occ = m.occupancy();
        let (lo, hi) = (occ.iter().min().unwrap(), occ.iter().max().unwrap());
        assert!(hi - lo <= 1, "{occ:?}");
    }

    #[test]
    fn zero_capacity_stores_nothing() {
        let mut rng = Rng::new(1);
        let mut m = PredictionBalancedReservoir::new(0, 3);
        let mut c = CategoryBalancedMemory::new(0, 3);
        for i in 0..20 {
            m.add(entry(i % 3, 0.5), &mut rng).unwrap();
            c.add(entry(i % 3, 0.5)).unwrap();
        }
        assert!(m.is_empty() && c.is_empty());
    }

    #[test]
    fn category_memory_stays_within_capacity() {
        let mut rng = Rng::new(2);
        let mut m = CategoryBalancedMemory::new(14, 7);
        for _ in 0..500 {
            m.add(entry(rng.below(7), rng.uniform())).unwrap();
            assert!(m.len() <= 14);
        }
        assert_eq!(m.len(), 14);
        assert!(m.occupancy().iter().all(|&o| o <= 3), "{:?}", m.occupancy());
    }

    #[test]
    fn category_memory_prefers_confident_fresh_samples() {
        let mut m = CategoryBalancedMemory::new(2, 1);
        m.add(entry(0, 0.9)).unwrap();
        m.add(entry(0, 0.9)).unwrap();
        m.add(entry(0, 0.0)).unwrap();
        let e: Vec<f64> = m.entries().iter().map(|e| e.entropy).collect();
        assert!(e.contains(&0.0));
        // an uncertain newcomer cannot displace confident, fresh entries
        let mut m = CategoryBalancedMemory::new(2, 1);
        m.add(entry(0, 0.0)).unwrap();
        m.add(entry(0, 0.0)).unwrap();
        m.add(entry(0, 5.0)).unwrap();
        assert!(m.entries().iter().all(|e| e.entropy == 0.0));
    }

    #[test]
    fn ages_advance_per_insertion() {
        let mut m = CategoryBalancedMemory::new(4, 2);
        m.add(entry(0, 0.1)).unwrap();
        m.add(entry(1, 0.1)).unwrap();
        m.add(entry(1, 0.1)).unwrap();
        let ages: Vec<u64> = m.entries().iter().map(|e| e.age).collect();
        assert_eq!(ages, vec![3, 2, 1]);
    }
}
