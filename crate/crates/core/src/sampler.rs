//! Test-time memories keyed on predicted labels.
//!
//! [`MemoryBank::pbrs_insert`] implements prediction-balanced reservoir
//! sampling: while the memory has room every sample is stored; once full, a
//! sample whose predicted class is not among the majority classes displaces a
//! random majority-class entry, otherwise it goes through a per-class reservoir
//! coin with acceptance probability `m[c] / n[c]`. [`MemoryBank::rs_insert`] is
//! the classic time-uniform reservoir used for ablations.

use std::io::Write;

use rand::Rng;

use crate::error::{input_err, state_err, Result};
use crate::numerics::Tensor;
use crate::rng::ChaCha8Rng;

/// A stored sample with its predicted label and the stream offer it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry<T> {
    pub sample: T,
    pub label: usize,
    pub offer: u64,
}

/// What an insert did to the memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InsertOutcome {
    Appended,
    /// Replaced the entry in `slot`, which held a sample of class `evicted`.
    Replaced { slot: usize, evicted: usize },
    Discarded,
}

impl InsertOutcome {
    pub fn stored(self) -> bool {
        !matches!(self, InsertOutcome::Discarded)
    }
}

#[derive(Clone, Debug)]
pub struct MemoryBank<T> {
    capacity: usize,
    classes: usize,
    entries: Vec<Entry<T>>,
    seen: Vec<u64>,
    offers: u64,
    rng: ChaCha8Rng,
}

impl<T: Clone> MemoryBank<T> {
    pub fn new(capacity: usize, classes: usize, rng: ChaCha8Rng) -> Self {
        assert!(capacity > 0, "memory capacity must be positive");
        assert!(classes > 0, "class count must be positive");
        Self {
            capacity,
            classes,
            entries: Vec::with_capacity(capacity),
            seen: vec![0; classes],
            offers: 0,
            rng,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn entries(&self) -> &[Entry<T>] {
        &self.entries
    }

    /// Offers of each predicted class so far, `n[c]`.
    pub fn seen(&self) -> &[u64] {
        &self.seen
    }

    pub fn offers(&self) -> u64 {
        self.offers
    }

    /// Stored entries per predicted class, `m[c]`.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut m = vec![0; self.classes];
        for e in &self.entries {
            m[e.label] += 1;
        }
        m
    }

    /// Classes attaining the maximum stored count (ties kept).
    pub fn majority_classes(&self) -> Result<Vec<usize>> {
        if self.entries.is_empty() {
            return state_err("majority classes of an empty memory");
        }
        let m = self.class_counts();
        let max = *m.iter().max().expect("at least one class");
        Ok((0..self.classes).filter(|&c| m[c] == max).collect())
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.classes {
            return input_err(format!("predicted label {label} out of range for {} classes", self.classes));
        }
        Ok(())
    }

    fn replace_random_where(&mut self, pred: impl Fn(usize) -> bool, entry: Entry<T>) -> InsertOutcome {
        let candidates: Vec<usize> =
            (0..self.entries.len()).filter(|&i| pred(self.entries[i].label)).collect();
        let slot = candidates[self.rng.random_range(0..candidates.len())];
        let evicted = self.entries[slot].label;
        self.entries[slot] = entry;
        InsertOutcome::Replaced { slot, evicted }
    }

    /// Prediction-balanced reservoir sampling insert.
    pub fn pbrs_insert(&mut self, sample: T, label: usize) -> Result<InsertOutcome> {
        self.check_label(label)?;
        self.offers += 1;
        self.seen[label] += 1;
        let entry = Entry { sample, label, offer: self.offers };
        if !self.is_full() {
            self.entries.push(entry);
            return Ok(InsertOutcome::Appended);
        }
        let majority = self.majority_classes()?;
        if !majority.contains(&label) {
            return Ok(self.replace_random_where(|c| majority.contains(&c), entry));
        }
        let stored = self.class_counts()[label] as f64;
        let p: f64 = self.rng.random();
        if p < stored / self.seen[label] as f64 {
            Ok(self.replace_random_where(|c| c == label, entry))
        } else {
            Ok(InsertOutcome::Discarded)
        }
    }

    /// Classic reservoir sampling insert; keeps each offer with probability `N / t`.
    pub fn rs_insert(&mut self, sample: T, label: usize) -> Result<InsertOutcome> {
        self.check_label(label)?;
        self.offers += 1;
        self.seen[label] += 1;
        let entry = Entry { sample, label, offer: self.offers };
        if !self.is_full() {
            self.entries.push(entry);
            return Ok(InsertOutcome::Appended);
        }
        let j = self.rng.random_range(0..self.offers);
        if (j as usize) < self.capacity {
            let slot = j as usize;
            let evicted = self.entries[slot].label;
            self.entries[slot] = entry;
            Ok(InsertOutcome::Replaced { slot, evicted })
        } else {
            Ok(InsertOutcome::Discarded)
        }
    }

    /// Write `offer,label,slot` rows in slot order.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["offer", "label", "slot"]).map_err(csv_err)?;
        for (slot, e) in self.entries.iter().enumerate() {
            w.write_record([e.offer.to_string(), e.label.to_string(), slot.to_string()])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> crate::TtaError {
    crate::TtaError::Io(std::io::Error::other(e))
}

impl MemoryBank<Tensor> {
    /// Stored samples stacked in slot order, with their predicted labels.
    pub fn batch(&self) -> Result<(Tensor, Vec<usize>)> {
        if self.entries.is_empty() {
            return state_err("cannot form a batch from an empty memory");
        }
        let x = Tensor::stack(self.entries.iter().map(|e| &e.sample))?;
        Ok((x, self.entries.iter().map(|e| e.label).collect()))
    }
}
