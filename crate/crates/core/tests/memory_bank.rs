use cgh_core::distill::MemoryBank;
use cgh_core::rng::{stream, Stream};
use ndarray::Array2;
use proptest::prelude::*;

/// Plain ring buffer used as the reference.
struct Ring {
    slots: Vec<Option<u64>>,
    head: usize,
}

impl Ring {
    fn push(&mut self, id: u64) {
        self.slots[self.head] = Some(id);
        self.head = (self.head + 1) % self.slots.len();
    }
}

/// Row whose direction encodes `id` so the bank slot can be decoded back.
fn tagged(id: u64, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[0] = 1.0;
    v[1] = id as f64;
    v
}

fn decode(row: ndarray::ArrayView1<f64>) -> Option<u64> {
    (row[0].abs() > 1e-12).then(|| (row[1] / row[0]).round() as u64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn matches_reference_ring(capacity in 1usize..12, batches in prop::collection::vec(1usize..12, 1..20), seed in any::<u64>()) {
        let dim = 4;
        let mut bank = MemoryBank::init(capacity, dim, &mut stream(seed, Stream::BankInit, &[])).unwrap();
        let mut ring = Ring { slots: vec![None; capacity], head: 0 };
        let mut next = 1u64;
        for b in batches {
            let b = b.min(capacity);
            let rows: Vec<f64> = (0..b).flat_map(|i| tagged(next + i as u64, dim)).collect();
            bank.enqueue(Array2::from_shape_vec((b, dim), rows).unwrap().view()).unwrap();
            for i in 0..b {
                ring.push(next + i as u64);
            }
            next += b as u64;
            prop_assert_eq!(bank.cursor(), ring.head);
            prop_assert_eq!(bank.entries().nrows(), capacity);
            for (slot, want) in ring.slots.iter().enumerate() {
                let row = bank.entry(slot);
                prop_assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-12);
                if let Some(id) = want {
                    prop_assert_eq!(decode(row), Some(*id));
                }
            }
        }
    }

    #[test]
    fn labels_follow_entries(capacity in 2usize..10, steps in prop::collection::vec((1usize..6, any::<bool>()), 1..15)) {
        let mut bank = MemoryBank::init(capacity, 3, &mut stream(1, Stream::BankInit, &[])).unwrap();
        bank.track_labels();
        let mut ring: Vec<i64> = vec![-1; capacity];
        let mut head = 0;
        let mut label = 0i64;
        for (b, labeled) in steps {
            let b = b.min(capacity);
            let x = Array2::from_elem((b, 3), 1.0);
            let ls: Vec<i64> = (0..b as i64).map(|i| label + i).collect();
            if labeled {
                bank.enqueue_labeled(x.view(), &ls).unwrap();
            } else {
                bank.enqueue(x.view()).unwrap();
            }
            for l in &ls {
                ring[head] = if labeled { *l } else { -1 };
                head = (head + 1) % capacity;
            }
            label += b as i64;
            prop_assert_eq!(bank.labels().unwrap(), ring.as_slice());
        }
    }
}

#[test]
fn oversized_batch_and_zero_rows_are_rejected() {
    let mut bank = MemoryBank::init(4, 3, &mut stream(0, Stream::BankInit, &[])).unwrap();
    let before = bank.entries().to_owned();
    assert!(bank.enqueue(Array2::from_elem((5, 3), 1.0).view()).is_err());
    assert!(bank.enqueue(Array2::zeros((2, 3)).view()).is_err());
    assert!(bank.enqueue(Array2::from_elem((2, 4), 1.0).view()).is_err());
    assert_eq!(bank.entries(), before.view());
    assert_eq!(bank.cursor(), 0);
}

#[test]
fn random_init_is_nearly_orthogonal() {
    let (m, dim) = (256, 512);
    let bank = MemoryBank::init(m, dim, &mut stream(7, Stream::BankInit, &[])).unwrap();
    let e = bank.entries();
    let gram = e.dot(&e.t());
    let mut sum = 0.0;
    for i in 0..m {
        assert!((gram[[i, i]] - 1.0).abs() < 1e-6);
        for j in i + 1..m {
            sum += gram[[i, j]].abs();
        }
    }
    let mean = sum / (m * (m - 1) / 2) as f64;
    // E|cos| for independent directions is sqrt(2 / (pi * dim)).
    let expected = (2.0 / (std::f64::consts::PI * dim as f64)).sqrt();
    assert!((mean - expected).abs() < 0.1 * expected, "mean |cos| {mean} vs {expected}");
}
