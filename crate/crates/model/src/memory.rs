//! Memory of previously seen inferences and the operations that read it.
//!
//! The bank stores token rows padded to `L^r`; embedding through `f_emb`
//! happens when the bank is read so that `f_emb` stays trainable.

use std::collections::VecDeque;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, Axis};

use crate::vocab::PAD;

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    rows: VecDeque<Vec<u32>>,
    capacity: Option<usize>,
    row_len: usize,
    truncated: usize,
}

impl MemoryBank {
    /// Fixed capacity with FIFO eviction, as used in training.
    pub fn bounded(capacity: usize, row_len: usize) -> Self {
        MemoryBank {
            rows: VecDeque::new(),
            capacity: Some(capacity),
            row_len,
            truncated: 0,
        }
    }

    /// Grows without limit, as used in decoding.
    pub fn unbounded(row_len: usize) -> Self {
        MemoryBank {
            rows: VecDeque::new(),
            capacity: None,
            row_len,
            truncated: 0,
        }
    }

    pub fn occupancy(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row_len(&self) -> usize {
        self.row_len
    }

    /// Number of update rows cut down to `L^r`.
    pub fn truncated(&self) -> usize {
        self.truncated
    }

    /// Appends `updates`, each padded or cut to `L^r`, evicting the oldest
    /// rows beyond capacity.
    pub fn update(&mut self, updates: &[Vec<u32>]) {
        for u in updates {
            let mut row = u.clone();
            if row.len() > self.row_len {
                row.truncate(self.row_len);
                self.truncated += 1;
            }
            row.resize(self.row_len, PAD);
            self.rows.push_back(row);
            if let Some(cap) = self.capacity {
                while self.rows.len() > cap {
                    self.rows.pop_front();
                }
            }
        }
    }

    pub fn rows(&self) -> Vec<Vec<u32>> {
        self.rows.iter().cloned().collect()
    }

    /// `R × L^r × H` tensor of row embeddings under `f_emb` (`V × H`).
    pub fn embed(&self, f_emb: &Array2<f64>) -> Array3<f64> {
        let h = f_emb.ncols();
        let mut out = Array3::zeros((self.rows.len(), self.row_len, h));
        for (r, row) in self.rows.iter().enumerate() {
            for (l, &id) in row.iter().enumerate() {
                out.slice_mut(ndarray::s![r, l, ..]).assign(&f_emb.row(id as usize));
            }
        }
        out
    }
}

/// Per-row mean over the token axis, PAD positions included: `R × L × H → R × H`.
pub fn memory_summarize(bank: &Array3<f64>) -> Array2<f64> {
    bank.mean_axis(Axis(1)).expect("memory rows have at least one token")
}

/// Cosine similarity; 0 when either side has zero norm.
pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(&b) / (na * nb)
    }
}

/// Indices of the `k` rows most cosine-similar to `context`, best first;
/// ties go to the lower index. `k` larger than the row count selects all.
pub fn select_rows(context: ArrayView1<f64>, memory: ArrayView2<f64>, k: usize) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = memory
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| (cosine(context, row), i))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Mean of the `k` rows selected by [`select_rows`], with their indices.
pub fn memory_retrieve(context: ArrayView1<f64>, memory: ArrayView2<f64>, k: usize) -> (Array1<f64>, Vec<usize>) {
    assert!(memory.nrows() > 0, "retrieval needs at least one memory row");
    let selected = select_rows(context, memory, k);
    let mut sum = Array1::zeros(memory.ncols());
    for &i in &selected {
        sum += &memory.row(i);
    }
    (sum / selected.len() as f64, selected)
}

/// `C + (m · W + b)` with the projected row added to every row of `C`.
pub fn reweigh_context(c: &Array2<f64>, m: ArrayView1<f64>, w: &Array2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let projected = m.dot(w) + b;
    c + &projected.insert_axis(Axis(0))
}
