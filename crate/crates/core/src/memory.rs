//! Class-indexed FIFO store of historical confident class embeddings.
//!
//! One bounded queue per class. Insertion is gated on the predicted
//! probability of the entry's assigned class reaching that class's confidence
//! threshold; eviction is oldest-first. Balanced sampling draws uniformly
//! without replacement per class so minority classes reach the class-level
//! comparison at the same rate as majority classes.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

use crate::contrast::LabeledEmbeddingBatch;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Entry {
    embedding: Vec<f64>,
    /// Predicted probability of the assigned class at insertion time; kept so
    /// bank contents stay auditable against the gate.
    score: f64,
}

/// FIFO memory bank with per-class confidence-gated insertion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryBank {
    num_classes: usize,
    capacity: usize,
    dim: usize,
    thresholds: Vec<f64>,
    queues: Vec<VecDeque<Entry>>,
    inserted_total: u64,
}

impl MemoryBank {
    /// `capacity` is the per-class queue bound Q; `dim` the embedding size;
    /// `thresholds` one confidence gate per class in `(0, 1)`.
    pub fn new(num_classes: usize, capacity: usize, dim: usize, thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.len() != num_classes {
            return Err(Error::DimensionMismatch {
                expected: num_classes,
                got: thresholds.len(),
            });
        }
        if capacity == 0 {
            return Err(Error::Config("memory bank capacity must be >= 1".into()));
        }
        if let Some(t) = thresholds.iter().find(|t| !(0.0 < **t && **t < 1.0)) {
            return Err(Error::Config(format!(
                "confidence thresholds must lie in (0, 1), got {t}"
            )));
        }
        Ok(Self {
            num_classes,
            capacity,
            dim,
            thresholds,
            queues: vec![VecDeque::new(); num_classes],
            inserted_total: 0,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn queue_len(&self, class_id: usize) -> usize {
        self.queues.get(class_id).map_or(0, VecDeque::len)
    }

    pub fn len(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.queues.iter().all(VecDeque::is_empty)
    }

    /// Total number of accepted insertions over the bank's lifetime (the
    /// warm-up audit counter).
    pub fn inserted_total(&self) -> u64 {
        self.inserted_total
    }

    /// Insert `embedding` into `class_id`'s queue iff `score` reaches that
    /// class's threshold. Returns whether the entry was accepted.
    pub fn insert_confident(&mut self, embedding: &[f64], class_id: usize, score: f64) -> Result<bool> {
        if class_id >= self.num_classes {
            return Err(Error::ClassOutOfRange {
                class_id,
                num_classes: self.num_classes,
            });
        }
        if embedding.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: embedding.len(),
            });
        }
        if score < self.thresholds[class_id] {
            return Ok(false);
        }
        let queue = &mut self.queues[class_id];
        if queue.len() == self.capacity {
            queue.pop_front();
        }
        queue.push_back(Entry {
            embedding: embedding.to_vec(),
            score,
        });
        self.inserted_total += 1;
        Ok(true)
    }

    /// Apply [`Self::insert_confident`] over a batch in order; labels are the
    /// RoIs' assigned classes and each score is the predicted probability of
    /// that class. Returns the number accepted.
    pub fn update_from_batch(&mut self, batch: &LabeledEmbeddingBatch, scores: &[f64]) -> Result<usize> {
        if batch.len() != scores.len() {
            return Err(Error::DimensionMismatch {
                expected: batch.len(),
                got: scores.len(),
            });
        }
        let mut inserted = 0;
        for i in 0..batch.len() {
            let row = batch.row(i);
            if self.insert_confident(row.as_slice().expect("row is contiguous"), batch.labels()[i], scores[i])? {
                inserted += 1;
            }
        }
        Ok(inserted)
    }

    /// For every class with a nonempty queue, draw `min(per_class, len)`
    /// entries uniformly without replacement; concatenate in class order.
    pub fn sample_balanced<R: Rng>(&self, per_class: usize, rng: &mut R) -> LabeledEmbeddingBatch {
        let mut rows: Vec<f64> = Vec::new();
        let mut labels = Vec::new();
        for (class_id, queue) in self.queues.iter().enumerate() {
            if queue.is_empty() {
                continue;
            }
            let take = per_class.min(queue.len());
            let picks = rand::seq::index::sample(rng, queue.len(), take);
            for idx in picks.iter() {
                rows.extend_from_slice(&queue[idx].embedding);
                labels.push(class_id);
            }
        }
        let n = labels.len();
        let embeddings = Array2::from_shape_vec((n, self.dim), rows).expect("uniform dim");
        LabeledEmbeddingBatch::new(embeddings, labels).expect("bank entries are finite")
    }

    /// Every stored entry with its label, queue order preserved per class.
    pub fn snapshot(&self) -> LabeledEmbeddingBatch {
        let mut rows: Vec<f64> = Vec::new();
        let mut labels = Vec::new();
        for (class_id, queue) in self.queues.iter().enumerate() {
            for entry in queue {
                rows.extend_from_slice(&entry.embedding);
                labels.push(class_id);
            }
        }
        let n = labels.len();
        let embeddings = Array2::from_shape_vec((n, self.dim), rows).expect("uniform dim");
        LabeledEmbeddingBatch::new(embeddings, labels).expect("bank entries are finite")
    }

    /// Stored insertion scores per class, oldest first (audit view).
    pub fn scores(&self, class_id: usize) -> Vec<f64> {
        self.queues
            .get(class_id)
            .map(|q| q.iter().map(|e| e.score).collect())
            .unwrap_or_default()
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_stream, stream};
    use proptest::prelude::*;
    use rand::Rng;

    fn bank(q: usize) -> MemoryBank {
        MemoryBank::new(2, q, 3, vec![0.7, 0.7]).unwrap()
    }

    fn emb(tag: f64) -> Vec<f64> {
        vec![tag, tag + 0.5, tag - 0.5]
    }

    #[test]
    fn gate_passes_and_fails() {
        let mut b = bank(4);
        assert!(b.insert_confident(&emb(1.0), 0, 0.9).unwrap());
        assert_eq!(b.queue_len(0), 1);
        assert!(!b.insert_confident(&emb(2.0), 0, 0.5).unwrap());
        assert_eq!(b.queue_len(0), 1);
        assert_eq!(b.inserted_total(), 1);
    }

    #[test]
    fn fifo_eviction_keeps_most_recent() {
        let mut b = bank(2);
        for i in 0..3 {
            b.insert_confident(&emb(i as f64), 0, 0.9).unwrap();
        }
        let snap = b.snapshot();
        assert_eq!(snap.len(), 2);
        assert_eq!(snap.row(0)[0], 1.0);
        assert_eq!(snap.row(1)[0], 2.0);
    }

    #[test]
    fn insert_errors() {
        let mut b = bank(2);
        assert!(matches!(
            b.insert_confident(&emb(0.0), 7, 0.9),
            Err(Error::ClassOutOfRange { .. })
        ));
        assert!(matches!(
            b.insert_confident(&[1.0, 2.0], 0, 0.9),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn batch_update_counts_gate_passes() {
        let mut b = bank(8);
        let batch = LabeledEmbeddingBatch::from_rows(&[
            (emb(0.0), 0),
            (emb(1.0), 1),
            (emb(2.0), 0),
        ])
        .unwrap();
        let n = b.update_from_batch(&batch, &[0.9, 0.2, 0.8]).unwrap();
        assert_eq!(n, 2);
        let empty = LabeledEmbeddingBatch::empty(3);
        assert_eq!(b.update_from_batch(&empty, &[]).unwrap(), 0);
        assert_eq!(b.len(), 2);
    }

    #[test]
    fn hundred_inserts_into_q80_keeps_last_80_in_order() {
        let mut b = MemoryBank::new(1, 80, 3, vec![0.7]).unwrap();
        for i in 0..100 {
            b.insert_confident(&emb(i as f64), 0, 0.9).unwrap();
        }
        let snap = b.snapshot();
        assert_eq!(snap.len(), 80);
        for (pos, row) in (0..80).zip(snap.embeddings().rows()) {
            assert_eq!(row[0], (pos + 20) as f64);
        }
    }

    #[test]
    fn balanced_sampling_respects_min_rule() {
        let mut b = MemoryBank::new(2, 200, 3, vec![0.5, 0.5]).unwrap();
        for i in 0..5 {
            b.insert_confident(&emb(i as f64), 0, 0.9).unwrap();
        }
        for i in 0..100 {
            b.insert_confident(&emb(i as f64), 1, 0.9).unwrap();
        }
        let mut rng = rng_stream(1, stream::BANK_SAMPLE);
        let s = b.sample_balanced(10, &mut rng);
        assert_eq!(s.labels().iter().filter(|&&l| l == 0).count(), 5);
        assert_eq!(s.labels().iter().filter(|&&l| l == 1).count(), 10);
        let empty = MemoryBank::new(2, 4, 3, vec![0.5, 0.5]).unwrap();
        assert!(empty.sample_balanced(4, &mut rng).is_empty());
    }

    #[test]
    fn balanced_sampling_is_uniform() {
        let mut b = MemoryBank::new(1, 10, 3, vec![0.5]).unwrap();
        for i in 0..10 {
            b.insert_confident(&emb(i as f64), 0, 0.9).unwrap();
        }
        let mut rng = rng_stream(2, stream::BANK_SAMPLE);
        let mut counts = [0usize; 10];
        let draws = 10_000;
        for _ in 0..draws {
            let s = b.sample_balanced(1, &mut rng);
            counts[s.row(0)[0] as usize] += 1;
        }
        for c in counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.1).abs() < 0.02, "frequency {freq} not uniform");
        }
    }

    #[test]
    fn minority_compensation_after_imbalanced_stream() {
        let mut b = MemoryBank::new(2, 40, 3, vec![0.5, 0.5]).unwrap();
        let mut rng = rng_stream(3, stream::BANK_SAMPLE);
        // 100:1 class stream.
        for i in 0..2020 {
            let class = if i % 101 == 100 { 1 } else { 0 };
            b.insert_confident(&emb(i as f64), class, 0.9).unwrap();
        }
        assert!(b.queue_len(1) >= 8);
        let s = b.sample_balanced(8, &mut rng);
        assert_eq!(s.labels().iter().filter(|&&l| l == 0).count(), 8);
        assert_eq!(s.labels().iter().filter(|&&l| l == 1).count(), 8);
    }

    #[test]
    fn snapshot_is_stable_across_sampling() {
        let mut b = bank(4);
        b.insert_confident(&emb(1.0), 0, 0.8).unwrap();
        b.insert_confident(&emb(2.0), 1, 0.9).unwrap();
        let before = b.snapshot();
        assert_eq!(before.labels(), &[0, 1]);
        let mut rng = rng_stream(4, stream::BANK_SAMPLE);
        for _ in 0..10 {
            let _ = b.sample_balanced(2, &mut rng);
        }
        assert_eq!(b.snapshot(), before);
    }

    /// Replay oracle: feed the same `(class, score)` stream into a plain list
    /// model and compare surviving entries per class.
    fn replay_oracle(
        num_classes: usize,
        q: usize,
        thresholds: &[f64],
        stream: &[(usize, f64, f64)], // (class, score, tag)
    ) -> Vec<Vec<f64>> {
        let mut kept: Vec<Vec<(f64, f64)>> = vec![Vec::new(); num_classes];
        for &(c, s, tag) in stream {
            if s >= thresholds[c] {
                kept[c].push((s, tag));
            }
        }
        kept.into_iter()
            .map(|v| {
                let start = v.len().saturating_sub(q);
                v[start..].iter().map(|&(_, tag)| tag).collect()
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn arbitrary_insert_sequences_match_replay_oracle(
            seed in 0u64..10_000,
            q in 1usize..12,
            n in 0usize..120,
        ) {
            let mut rng = rng_stream(seed, stream::BANK_SAMPLE);
            let thresholds = vec![0.7, 0.4, 0.9];
            let mut b = MemoryBank::new(3, q, 3, thresholds.clone()).unwrap();
            let mut log = Vec::new();
            for i in 0..n {
                let class = rng.random_range(0..3);
                let score: f64 = rng.random_range(0.0..1.0);
                let tag = i as f64;
                b.insert_confident(&emb(tag), class, score).unwrap();
                log.push((class, score, tag));
            }
            let expect = replay_oracle(3, q, &thresholds, &log);
            for class in 0..3 {
                prop_assert!(b.queue_len(class) <= q);
                let got: Vec<f64> = b
                    .snapshot()
                    .embeddings()
                    .rows()
                    .into_iter()
                    .zip(b.snapshot().labels().iter())
                    .filter(|(_, &l)| l == class)
                    .map(|(row, _)| row[0])
                    .collect();
                prop_assert_eq!(&got, &expect[class]);
                // No under-threshold score survives.
                for s in b.scores(class) {
                    prop_assert!(s >= thresholds[class]);
                }
            }
        }

        #[test]
        fn sampling_never_exceeds_per_class_or_invents_entries(
            seed in 0u64..10_000,
            per_class in 1usize..6,
        ) {
            let mut rng = rng_stream(seed, stream::BANK_SAMPLE);
            let mut b = MemoryBank::new(3, 6, 3, vec![0.2, 0.2, 0.2]).unwrap();
            let n = rng.random_range(0..30);
            let mut tags = Vec::new();
            for i in 0..n {
                let class = rng.random_range(0..3);
                if b.insert_confident(&emb(i as f64), class, 0.9).unwrap() {
                    tags.push(i as f64);
                }
            }
            let s = b.sample_balanced(per_class, &mut rng);
            for class in 0..3 {
                let count = s.labels().iter().filter(|&&l| l == class).count();
                prop_assert!(count <= per_class);
            }
            let snap = b.snapshot();
            for i in 0..s.len() {
                let row = s.row(i);
                let found = (0..snap.len()).any(|j| {
                    snap.labels()[j] == s.labels()[i] && snap.row(j) == row
                });
                prop_assert!(found, "sampled entry absent from bank");
            }
        }
    }
}
