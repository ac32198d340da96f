//! Classification metrics, head/tail splits and weight-scatter export.

use std::fmt::Write as _;

use serde::Serialize;

use crate::bilevel::{eval_weights, MetaNet, WeightGenerator};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::losses::per_sample_ce;
use crate::nn::{Architecture, Model};
use crate::scalar::Real;
use crate::tensor::{argmax_rows, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Zero for classes absent from the evaluation set.
    pub per_class: Vec<f64>,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<u64>>,
    /// Classes whose training count is at least the median training count.
    pub head_classes: Vec<usize>,
    pub head_accuracy: f64,
    pub tail_accuracy: f64,
    pub head_total: u64,
    pub tail_total: u64,
}

/// `true` for head classes: training count ≥ median count.
pub fn head_mask(train_counts: &[usize]) -> Vec<bool> {
    let mut sorted = train_counts.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    if n == 0 {
        return Vec::new();
    }
    let median = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    };
    train_counts.iter().map(|&c| c as f64 >= median).collect()
}

pub fn from_predictions(pred: &[usize], labels: &[usize], classes: usize, train_counts: &[usize]) -> Result<Metrics> {
    if pred.len() != labels.len() {
        return Err(Error::shape("metrics", &[labels.len()], &[pred.len()]));
    }
    if train_counts.len() != classes {
        return Err(Error::shape("metrics class counts", &[classes], &[train_counts.len()]));
    }
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (&p, &y) in pred.iter().zip(labels) {
        if p >= classes || y >= classes {
            return Err(Error::Input(format!("class index out of range for {classes} classes")));
        }
        confusion[y][p] += 1;
    }
    let row_total = |c: usize| confusion[c].iter().sum::<u64>();
    let per_class = (0..classes)
        .map(|c| {
            let t = row_total(c);
            if t == 0 {
                0.0
            } else {
                confusion[c][c] as f64 / t as f64
            }
        })
        .collect();
    let mask = head_mask(train_counts);
    let (mut hc, mut ht, mut tc, mut tt) = (0u64, 0u64, 0u64, 0u64);
    for c in 0..classes {
        if mask[c] {
            hc += confusion[c][c];
            ht += row_total(c);
        } else {
            tc += confusion[c][c];
            tt += row_total(c);
        }
    }
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(Metrics {
        accuracy: ratio(hc + tc, ht + tt),
        per_class,
        head_classes: (0..classes).filter(|&c| mask[c]).collect(),
        confusion,
        head_accuracy: ratio(hc, ht),
        tail_accuracy: ratio(tc, tt),
        head_total: ht,
        tail_total: tt,
    })
}

pub fn evaluate<T: Real>(model: &Model<T>, test: &LabeledDataset, train_counts: &[usize]) -> Result<Metrics> {
    let logits = model.predict(&test.all_features::<T>())?;
    let pred = argmax_rows(&logits)?;
    from_predictions(&pred, test.labels(), test.classes(), train_counts)
}

/// Mean per-class accuracy over the `n` classes with the fewest training
/// samples (ties broken toward higher class index).
pub fn tail_mean(per_class: &[f64], train_counts: &[usize], n: usize) -> f64 {
    let mut idx: Vec<usize> = (0..train_counts.len()).collect();
    idx.sort_by(|&a, &b| train_counts[a].cmp(&train_counts[b]).then(b.cmp(&a)));
    let take = n.min(idx.len()).max(1);
    idx[..take].iter().map(|&c| per_class[c]).sum::<f64>() / take as f64
}

pub fn metrics_csv(m: &Metrics) -> String {
    let mut s = String::from("metric,value\n");
    let _ = writeln!(s, "accuracy,{}", m.accuracy);
    let _ = writeln!(s, "head_accuracy,{}", m.head_accuracy);
    let _ = writeln!(s, "tail_accuracy,{}", m.tail_accuracy);
    let _ = writeln!(s, "head_total,{}", m.head_total);
    let _ = writeln!(s, "tail_total,{}", m.tail_total);
    let heads: Vec<String> = m.head_classes.iter().map(|c| c.to_string()).collect();
    let _ = writeln!(s, "head_classes,{}", heads.join(" "));
    for (c, a) in m.per_class.iter().enumerate() {
        let _ = writeln!(s, "acc_{c},{a}");
    }
    s
}

pub fn confusion_csv(m: &Metrics) -> String {
    let c = m.confusion.len();
    let mut s = String::from("true");
    for j in 0..c {
        let _ = write!(s, ",pred_{j}");
    }
    s.push('\n');
    for (i, row) in m.confusion.iter().enumerate() {
        let _ = write!(s, "{i}");
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeightScatterRecord {
    pub ce_teacher: f64,
    pub ce_student: f64,
    pub w_hard: f64,
    pub w_soft: f64,
    pub class: usize,
}

/// One record per training sample: the loss pair under the given teacher
/// and student, and the weights the meta network assigns to it.
pub fn export_weight_scatter<T: Real>(
    meta: &Model<T>,
    teacher: &Model<T>,
    student: &Model<T>,
    train: &LabeledDataset,
) -> Result<Vec<WeightScatterRecord>> {
    let Architecture::MetaNet(spec) = &meta.arch else {
        return Err(Error::Contract("weight export needs a meta network checkpoint".into()));
    };
    let generator = MetaNet::new(spec.clone());
    let x = train.all_features::<T>();
    let ct = per_sample_ce(&teacher.predict(&x)?, train.labels())?;
    let cs = per_sample_ce(&student.predict(&x)?, train.labels())?;
    let inputs = Tensor::new(
        vec![train.len(), 2],
        ct.iter().zip(&cs).flat_map(|(&t, &s)| [t, s]).collect(),
    )?;
    debug_assert_eq!(WeightGenerator::<T>::param_shapes(&generator).len(), meta.state.params.len());
    let (wh, ws) = eval_weights(&generator, &meta.state.tensors(), &inputs)?;
    Ok((0..train.len())
        .map(|i| WeightScatterRecord {
            ce_teacher: ct[i].f64(),
            ce_student: cs[i].f64(),
            w_hard: wh.data()[i].f64(),
            w_soft: ws.data()[i].f64(),
            class: train.labels()[i],
        })
        .collect())
}

pub fn scatter_csv(records: &[WeightScatterRecord]) -> String {
    let mut s = String::from("ce_teacher,ce_student,w_hard,w_soft,class\n");
    for r in records {
        let _ = writeln!(s, "{},{},{},{},{}", r.ce_teacher, r.ce_student, r.w_hard, r.w_soft, r.class);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictor() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let m = from_predictions(&labels, &labels, 3, &[10, 5, 1]).unwrap();
        assert_eq!(m.accuracy, 1.0);
        for (i, row) in m.confusion.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, if i == j { 10 } else { 0 });
            }
        }
    }

    #[test]
    fn constant_predictor_balanced_ten_classes() {
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let m = from_predictions(&vec![0; 100], &labels, 10, &[5; 10]).unwrap();
        assert_eq!(m.accuracy, 0.1);
        assert_eq!(m.per_class[0], 1.0);
    }

    #[test]
    fn head_is_at_least_median() {
        assert_eq!(head_mask(&[100, 50, 20, 10]), vec![true, true, false, false]);
        assert_eq!(head_mask(&[9, 5, 1]), vec![true, true, false]);
    }

    #[test]
    fn tail_mean_uses_smallest_classes() {
        let acc = [1.0, 0.9, 0.5, 0.1];
        assert!((tail_mean(&acc, &[100, 50, 20, 10], 2) - 0.3).abs() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn confusion_invariants(
                pairs in prop::collection::vec((0usize..5, 0usize..5), 1..200),
                counts in prop::collection::vec(1usize..100, 5),
            ) {
                let (pred, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
                let m = from_predictions(&pred, &labels, 5, &counts).unwrap();
                for c in 0..5 {
                    let n = labels.iter().filter(|&&y| y == c).count() as u64;
                    prop_assert_eq!(m.confusion[c].iter().sum::<u64>(), n);
                }
                let trace: u64 = (0..5).map(|c| m.confusion[c][c]).sum();
                prop_assert_eq!(m.accuracy, trace as f64 / labels.len() as f64);
                let total = (m.head_total + m.tail_total) as f64;
                let recomposed = (m.head_accuracy * m.head_total as f64 + m.tail_accuracy * m.tail_total as f64) / total;
                prop_assert!((recomposed - m.accuracy).abs() <= 1e-12);
            }
        }
    }
}
