use std::ops::Range;

use rand::seq::SliceRandom;

use super::data::ImageSet;
use crate::error::{Error, Result};
use crate::rng;

/// One incremental task. Classes are addressed by their position in the
/// shuffled class order, so task `t` owns the contiguous `labels` range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    /// 1-based.
    pub task_id: usize,
    /// Original dataset class ids, in order.
    pub classes: Vec<usize>,
    pub labels: Range<usize>,
    /// Indices into the training set.
    pub train: Vec<usize>,
    /// Indices into the test set.
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskStream {
    pub base_m: usize,
    pub inc_n: usize,
    /// `class_order[label] = original class id`.
    pub class_order: Vec<usize>,
    pub tasks: Vec<Task>,
}

impl TaskStream {
    /// Remaps an original class id to its incremental label.
    pub fn label_of(&self, class: usize) -> Option<usize> {
        self.class_order.iter().position(|&c| c == class)
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

pub fn validate_split(class_count: usize, base_m: usize, inc_n: usize) -> Result<usize> {
    if base_m == 0 || inc_n == 0 {
        return Err(Error::Config("base_m and inc_n must be at least 1".into()));
    }
    if base_m > class_count {
        return Err(Error::Config(format!("base_m {base_m} exceeds class count {class_count}")));
    }
    let rest = class_count - base_m;
    if rest % inc_n != 0 {
        return Err(Error::Config(format!(
            "inc_n {inc_n} does not divide the {rest} classes remaining after base_m {base_m}"
        )));
    }
    Ok(1 + rest / inc_n)
}

/// Permutes `0..class_count` with `order_seed` and cuts it into a base task of
/// `base_m` classes followed by tasks of `inc_n` classes.
pub fn split_classes(class_count: usize, base_m: usize, inc_n: usize, order_seed: u64) -> Result<(Vec<usize>, Vec<Range<usize>>)> {
    let n_tasks = validate_split(class_count, base_m, inc_n)?;
    let mut order: Vec<usize> = (0..class_count).collect();
    order.shuffle(&mut rng::stream(order_seed, "class-order", &[]));
    let ranges = (0..n_tasks)
        .map(|t| if t == 0 { 0..base_m } else { base_m + (t - 1) * inc_n..base_m + t * inc_n })
        .collect();
    Ok((order, ranges))
}

/// Builds the task stream and relabels both sets to incremental labels.
///
/// Returns the stream together with relabelled copies of `train` and `test`.
pub fn split_stream(
    class_count: usize,
    base_m: usize,
    inc_n: usize,
    train: &ImageSet,
    test: &ImageSet,
    order_seed: u64,
) -> Result<(TaskStream, ImageSet, ImageSet)> {
    let (order, ranges) = split_classes(class_count, base_m, inc_n, order_seed)?;
    let mut label_of = vec![usize::MAX; class_count];
    for (label, &class) in order.iter().enumerate() {
        label_of[class] = label;
    }
    let relabel = |set: &ImageSet| -> Result<ImageSet> {
        let labels = set
            .labels
            .iter()
            .map(|&l| {
                label_of.get(l).copied().ok_or_else(|| {
                    Error::Input(format!("label {l} outside class count {class_count}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ImageSet { labels, ..set.clone() })
    };
    let train = relabel(train)?;
    let test = relabel(test)?;
    let tasks = ranges
        .into_iter()
        .enumerate()
        .map(|(t, labels)| {
            let pick = |set: &ImageSet| {
                set.labels
                    .iter()
                    .enumerate()
                    .filter(|(_, l)| labels.contains(l))
                    .map(|(i, _)| i)
                    .collect::<Vec<_>>()
            };
            Task {
                task_id: t + 1,
                classes: order[labels.clone()].to_vec(),
                train: pick(&train),
                test: pick(&test),
                labels,
            }
        })
        .collect();
    Ok((TaskStream { base_m, inc_n, class_order: order, tasks }, train, test))
}
