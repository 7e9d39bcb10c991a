use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::{Target, Task, TaskKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskMetrics {
    /// Percentages.
    Classification { top1: f64, top5: f64 },
    /// Per-axis mean absolute error in label units, and their plain mean.
    Regression { axes: Vec<String>, mae: Vec<f64>, avg_mae: f64 },
}

impl TaskMetrics {
    /// Larger is better: top-1, or negated average MAE.
    pub fn score(&self) -> f64 {
        match self {
            TaskMetrics::Classification { top1, .. } => *top1,
            TaskMetrics::Regression { avg_mae, .. } => -avg_mae,
        }
    }

    /// The value reported in tables: top-1 or average MAE.
    pub fn headline(&self) -> f64 {
        match self {
            TaskMetrics::Classification { top1, .. } => *top1,
            TaskMetrics::Regression { avg_mae, .. } => *avg_mae,
        }
    }

    pub fn top1(&self) -> Option<f64> {
        match self {
            TaskMetrics::Classification { top1, .. } => Some(*top1),
            TaskMetrics::Regression { .. } => None,
        }
    }

    pub fn avg_mae(&self) -> Option<f64> {
        match self {
            TaskMetrics::Regression { avg_mae, .. } => Some(*avg_mae),
            TaskMetrics::Classification { .. } => None,
        }
    }
}

/// Output width of a task head: class count or 3 regression axes.
pub fn output_width(task: Task) -> usize {
    match task.kind() {
        TaskKind::Classification { classes } => classes,
        TaskKind::Regression { axes } => axes.len(),
    }
}

/// Position of class `label` when scores are sorted descending, ties broken
/// by class index.
pub fn label_rank(scores: &[f64], label: usize) -> usize {
    let s = scores[label];
    scores
        .iter()
        .enumerate()
        .filter(|&(c, &v)| v > s || (v == s && c < label))
        .count()
}

/// Metrics for row-major `predictions` (class scores or axis values, one row
/// per label).
pub fn compute_metrics(predictions: &[f64], labels: &[Target], task: Task) -> Result<TaskMetrics> {
    match task.kind() {
        TaskKind::Classification { classes } => classification_metrics(predictions, labels, classes),
        TaskKind::Regression { axes } => regression_metrics(predictions, labels, &axes),
    }
}

fn check_len(predictions: &[f64], labels: &[Target], width: usize) -> Result<()> {
    if labels.is_empty() || predictions.len() != labels.len() * width {
        return Err(Error::ShapeMismatch(format!(
            "{} prediction values for {} labels of width {width}",
            predictions.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Exact top-1 and top-5 counts over `classes` scores per row.
pub fn classification_metrics(scores: &[f64], labels: &[Target], classes: usize) -> Result<TaskMetrics> {
    check_len(scores, labels, classes)?;
    let (mut hit1, mut hit5) = (0usize, 0usize);
    for (row, label) in scores.chunks_exact(classes).zip(labels) {
        let Target::Class(y) = *label else {
            return Err(Error::TaskMismatch("expected class labels".into()));
        };
        if y >= classes {
            return Err(Error::TaskMismatch(format!("class {y} out of {classes}")));
        }
        let rank = label_rank(row, y);
        hit1 += usize::from(rank < 1);
        hit5 += usize::from(rank < 5);
    }
    let n = labels.len() as f64;
    Ok(TaskMetrics::Classification {
        top1: 100.0 * hit1 as f64 / n,
        top5: 100.0 * hit5 as f64 / n,
    })
}

/// Per-axis mean absolute error and its unweighted mean.
pub fn regression_metrics(predictions: &[f64], labels: &[Target], axes: &[&str]) -> Result<TaskMetrics> {
    check_len(predictions, labels, axes.len())?;
    let mut mae = vec![0.0; axes.len()];
    for (row, label) in predictions.chunks_exact(axes.len()).zip(labels) {
        let Target::Values(y) = *label else {
            return Err(Error::TaskMismatch("expected regression labels".into()));
        };
        for (k, m) in mae.iter_mut().enumerate() {
            *m += (row[k] - y[k]).abs();
        }
    }
    let n = labels.len() as f64;
    for m in &mut mae {
        *m /= n;
    }
    Ok(TaskMetrics::Regression {
        axes: axes.iter().map(|a| a.to_string()).collect(),
        avg_mae: mae.iter().sum::<f64>() / mae.len() as f64,
        mae,
    })
}

/// Recomputes `metrics` by sorting and plain summation; true when every
/// value agrees.
pub fn audit_metrics(predictions: &[f64], labels: &[Target], task: Task, metrics: &TaskMetrics) -> bool {
    let width = output_width(task);
    let n = labels.len() as f64;
    match metrics {
        TaskMetrics::Classification { top1, top5 } => {
            let mut hits = [0usize; 2];
            for (row, label) in predictions.chunks_exact(width).zip(labels) {
                let Target::Class(y) = *label else { return false };
                let mut order: Vec<usize> = (0..width).collect();
                order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
                let pos = order.iter().position(|&c| c == y).unwrap_or(usize::MAX);
                hits[0] += usize::from(pos == 0);
                hits[1] += usize::from(pos < 5);
            }
            *top1 == 100.0 * hits[0] as f64 / n && *top5 == 100.0 * hits[1] as f64 / n
        }
        TaskMetrics::Regression { mae, avg_mae, .. } => {
            let per_axis: Vec<f64> = (0..width)
                .map(|k| {
                    let errs = predictions.chunks_exact(width).zip(labels).map(|(row, label)| match label {
                        Target::Values(y) => (row[k] - y[k]).abs(),
                        Target::Class(_) => f64::NAN,
                    });
                    errs.sum::<f64>() / n
                })
                .collect();
            let avg = per_axis.iter().sum::<f64>() / width as f64;
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * (1.0 + a.abs());
            per_axis.len() == mae.len() && per_axis.iter().zip(mae).all(|(a, b)| close(*a, *b)) && close(avg, *avg_mae)
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn one_hot(classes: usize, y: usize) -> Vec<f64> {
        (0..classes).map(|c| if c == y { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn perfect_predictions() {
        let labels: Vec<Target> = (0..12).map(|i| Target::Class(i % 6)).collect();
        let preds: Vec<f64> = (0..12).flat_map(|i| one_hot(6, i % 6)).collect();
        let m = compute_metrics(&preds, &labels, Task::Shape).unwrap();
        assert_eq!(m, TaskMetrics::Classification { top1: 100.0, top5: 100.0 });

        let labels = vec![Target::Values([1.0, -2.0, 30.0]); 4];
        let preds: Vec<f64> = (0..4).flat_map(|_| [1.0, -2.0, 30.0]).collect();
        let m = compute_metrics(&preds, &labels, Task::EdgePose).unwrap();
        assert_eq!(m.avg_mae(), Some(0.0));
    }

    #[test]
    fn half_correct_is_fifty_percent() {
        let labels = [0, 1, 2, 3].map(Target::Class);
        let mut preds = Vec::new();
        for p in [0, 1, 5, 4] {
            preds.extend(one_hot(6, p));
        }
        let m = compute_metrics(&preds, &labels, Task::Shape).unwrap();
        assert_eq!(m.top1(), Some(50.0));
    }

    #[test]
    fn hand_computed_regression() {
        let labels = [
            Target::Values([0.0, 1.0, 10.0]),
            Target::Values([2.0, 1.5, -5.0]),
            Target::Values([-1.0, 0.0, 0.0]),
        ];
        let preds = [0.5, 1.0, 12.0, 2.0, 1.0, -5.0, 1.0, 0.25, 3.0];
        let m = compute_metrics(&preds, &labels, Task::EdgePose).unwrap();
        let TaskMetrics::Regression { mae, avg_mae, .. } = m else { panic!() };
        let x = (0.5 + 0.0 + 2.0) / 3.0;
        let z = (0.0 + 0.5 + 0.25) / 3.0;
        let t = (2.0 + 0.0 + 3.0) / 3.0;
        assert!((mae[0] - x).abs() < 1e-15 && (mae[1] - z).abs() < 1e-15 && (mae[2] - t).abs() < 1e-15);
        assert!((avg_mae - (x + z + t) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ties_rank_lower_index_first() {
        assert_eq!(label_rank(&[1.0, 1.0, 0.0], 0), 0);
        assert_eq!(label_rank(&[1.0, 1.0, 0.0], 1), 1);
    }

    #[test]
    fn top5_is_perfect_with_five_classes() {
        let labels: Vec<Target> = (0..10).map(|i| Target::Class(i % 5)).collect();
        let scores: Vec<f64> = (0..50).map(|k| ((k * 37) % 11) as f64).collect();
        let TaskMetrics::Classification { top5, .. } = classification_metrics(&scores, &labels, 5).unwrap() else {
            panic!()
        };
        assert_eq!(top5, 100.0);
    }

    #[test]
    fn mismatches_are_errors() {
        let labels = [Target::Class(0)];
        assert!(matches!(
            compute_metrics(&[0.0; 5], &labels, Task::Shape),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            compute_metrics(&[0.0; 3], &labels, Task::EdgePose),
            Err(Error::TaskMismatch(_))
        ));
    }

    proptest! {
        #[test]
        fn classification_matches_brute_force(
            scores in prop::collection::vec(-3i32..3, 6 * 9),
            ys in prop::collection::vec(0usize..6, 9),
        ) {
            let preds: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
            let labels: Vec<Target> = ys.iter().map(|&y| Target::Class(y)).collect();
            let m = compute_metrics(&preds, &labels, Task::Shape).unwrap();
            prop_assert!(audit_metrics(&preds, &labels, Task::Shape, &m));
            let TaskMetrics::Classification { top1, top5 } = m else { unreachable!() };
            prop_assert!((0.0..=100.0).contains(&top1) && top1 <= top5 && top5 <= 100.0);
        }

        #[test]
        fn top5_complete_up_to_five_classes(
            classes in 1usize..=5,
            scores in prop::collection::vec(-5.0f64..5.0, 5 * 8),
            ys in prop::collection::vec(0usize..5, 8),
        ) {
            let labels: Vec<Target> = ys.iter().map(|&y| Target::Class(y % classes)).collect();
            let m = classification_metrics(&scores[..classes * 8], &labels, classes).unwrap();
            let TaskMetrics::Classification { top5, .. } = m else { unreachable!() };
            prop_assert_eq!(top5, 100.0);
        }

        #[test]
        fn regression_matches_brute_force(vals in prop::collection::vec(-50.0f64..50.0, 6 * 7)) {
            let (p, y) = vals.split_at(21);
            let labels: Vec<Target> = y.chunks(3).map(|c| Target::Values([c[0], c[1], c[2]])).collect();
            let m = compute_metrics(p, &labels, Task::Force).unwrap();
            prop_assert!(audit_metrics(p, &labels, Task::Force, &m));
            prop_assert!(m.avg_mae().unwrap() >= 0.0);
        }
    }
}
