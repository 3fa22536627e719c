//! Fixed-capacity exemplar memory with herding selection.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Greedy mean-matching selection: step `k` picks the unused row whose
/// inclusion brings the mean of the `k` chosen rows closest (L2) to the mean
/// of all rows. Ties go to the lowest index. `quota` is clamped to the row
/// count.
pub fn herding_select(features: ArrayView2<f32>, quota: usize) -> Vec<usize> {
    let (n, d) = features.dim();
    let m = quota.min(n);
    if m == 0 {
        return Vec::new();
    }
    let rows: Vec<Vec<f64>> = features.rows().into_iter().map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect();
    let mut mu = vec![0.0f64; d];
    for r in &rows {
        for (a, b) in mu.iter_mut().zip(r) {
            *a += b;
        }
    }
    mu.iter_mut().for_each(|v| *v /= n as f64);

    let mut running = vec![0.0f64; d];
    let mut used = vec![false; n];
    let mut chosen = Vec::with_capacity(m);
    for k in 1..=m {
        let mut best: Option<(usize, f64)> = None;
        for (i, r) in rows.iter().enumerate() {
            if used[i] {
                continue;
            }
            let dist: f64 = (0..d)
                .map(|j| {
                    let diff = mu[j] - (running[j] + r[j]) / k as f64;
                    diff * diff
                })
                .sum();
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((i, dist));
            }
        }
        let (i, _) = best.expect("at least one unused row");
        used[i] = true;
        for (a, b) in running.iter_mut().zip(&rows[i]) {
            *a += b;
        }
        chosen.push(i);
    }
    chosen
}

/// Rows scaled to unit L2 norm; zero rows are left as they are.
pub fn l2_normalize_rows(m: &Array2<f32>) -> Array2<f32> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        if norm > 0.0 {
            row /= norm;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExemplarEntry {
    /// Index into the training set.
    pub index: usize,
    pub label: usize,
    /// 1-based task the sample came from.
    pub task_id: usize,
}

/// Per-class exemplar lists kept in greedy selection order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExemplarBuffer {
    capacity: usize,
    classes: BTreeMap<usize, Vec<ExemplarEntry>>,
}

impl ExemplarBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, classes: BTreeMap::new() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// `floor(capacity / known_classes)`.
    pub fn quota(&self, known_classes: usize) -> usize {
        if known_classes == 0 {
            0
        } else {
            self.capacity / known_classes
        }
    }

    pub fn len(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class(&self, label: usize) -> &[ExemplarEntry] {
        self.classes.get(&label).map_or(&[], Vec::as_slice)
    }

    pub fn entries(&self) -> impl Iterator<Item = &ExemplarEntry> {
        self.classes.values().flatten()
    }

    /// Truncates stored classes to the quota for `known_classes`, then adds
    /// each new class by herding over its candidates.
    ///
    /// `new_classes` holds `(label, task_id, candidate indices, candidate features)`.
    pub fn update(&mut self, known_classes: usize, new_classes: Vec<(usize, usize, Vec<usize>, Array2<f32>)>) {
        let quota = self.quota(known_classes);
        for list in self.classes.values_mut() {
            list.truncate(quota);
        }
        for (label, task_id, candidates, feats) in new_classes {
            let picked = herding_select(feats.view(), quota);
            let list = picked
                .into_iter()
                .map(|p| ExemplarEntry { index: candidates[p], label, task_id })
                .collect();
            self.classes.insert(label, list);
        }
    }

    /// Plain-text manifest, one `index,label,task_id` line per entry.
    pub fn manifest(&self) -> String {
        let mut s = format!("# capacity={}\nindex,label,task_id\n", self.capacity);
        for e in self.entries() {
            s.push_str(&format!("{},{},{}\n", e.index, e.label, e.task_id));
        }
        s
    }

    /// Parses [`ExemplarBuffer::manifest`] output.
    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let capacity = lines
            .next()
            .and_then(|l| l.strip_prefix("# capacity="))
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::Format("buffer manifest lacks a capacity line".into()))?;
        if lines.next() != Some("index,label,task_id") {
            return Err(Error::Format("buffer manifest lacks its header row".into()));
        }
        let mut buffer = Self::new(capacity);
        for (n, line) in lines.enumerate() {
            let fields: Vec<usize> = line
                .split(',')
                .map(|v| v.trim().parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("buffer manifest row {}: {e}", n + 1)))?;
            let [index, label, task_id] = fields[..] else {
                return Err(Error::Format(format!("buffer manifest row {} needs 3 fields", n + 1)));
            };
            buffer.classes.entry(label).or_default().push(ExemplarEntry { index, label, task_id });
        }
        Ok(buffer)
    }
}
