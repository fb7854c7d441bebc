use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{GaitCycle, GaitDataset};
use crate::error::{Error, Result};
use crate::layers::Model;
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub top1: f64,
    pub top5: f64,
    /// `None` for classes absent from the evaluated set.
    pub per_class: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

/// True when `label` is among the `k` largest logits, ties going to the
/// lower class index.
pub fn top_k_hit(logits: &[f64], label: usize, k: usize) -> bool {
    let l = logits[label];
    let rank = logits
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > l || (v == l && j < label))
        .count();
    rank < k
}

fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = j;
        }
    }
    best
}

/// Builds a report from `[samples, classes]` logits.
pub fn report_from_logits(logits: &Tensor, labels: &[usize]) -> Result<EvalReport> {
    let (n, k) = match *logits.shape() {
        [n, k] if n == labels.len() => (n, k),
        _ => {
            return Err(Error::contract(format!(
                "logits {:?} do not match {} labels",
                logits.shape(),
                labels.len()
            )))
        }
    };
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::contract(format!("label {bad} out of range for {k} classes")));
    }
    let mut confusion = vec![vec![0u64; k]; k];
    let (mut h1, mut h5) = (0usize, 0usize);
    for (row, &y) in logits.data().chunks_exact(k.max(1)).zip(labels) {
        confusion[y][argmax(row)] += 1;
        h1 += usize::from(top_k_hit(row, y, 1));
        h5 += usize::from(top_k_hit(row, y, 5));
    }
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: u64 = row.iter().sum();
            (total > 0).then(|| row[c] as f64 / total as f64)
        })
        .collect();
    let frac = |h: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    Ok(EvalReport {
        samples: n,
        top1: frac(h1),
        top5: frac(h5),
        per_class,
        confusion,
    })
}

/// Eval-mode logits for a whole dataset, `[len, classes]`.
pub fn dataset_logits(model: &Model, dataset: &GaitDataset) -> Result<Tensor> {
    let k = model.num_classes();
    let mut data = Vec::with_capacity(dataset.len() * k);
    for chunk in dataset.cycles.chunks(EVAL_BATCH) {
        let refs: Vec<&GaitCycle> = chunk.iter().collect();
        data.extend(model.logits(&model.encode(&refs)?)?.into_data());
    }
    Tensor::new(vec![dataset.len(), k], data)
}

pub fn evaluate(model: &Model, dataset: &GaitDataset) -> Result<EvalReport> {
    if dataset.num_classes != model.num_classes() {
        return Err(Error::config(format!(
            "shape mismatch: model produces {} class logits, dataset has {} classes",
            model.num_classes(),
            dataset.num_classes
        )));
    }
    report_from_logits(&dataset_logits(model, dataset)?, &dataset.labels())
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples  {}", self.samples)?;
        writeln!(f, "top-1    {:.2}%", 100.0 * self.top1)?;
        writeln!(f, "top-5    {:.2}%", 100.0 * self.top5)?;
        for (c, acc) in self.per_class.iter().enumerate() {
            match acc {
                Some(a) => writeln!(f, "class {c:<3} {:.2}%", 100.0 * a)?,
                None => writeln!(f, "class {c:<3} -")?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_logits_are_perfect() {
        let labels = [0usize, 2, 1, 2];
        let mut data = vec![0.0; 12];
        for (i, &l) in labels.iter().enumerate() {
            data[i * 3 + l] = 1.0;
        }
        let r = report_from_logits(&Tensor::new(vec![4, 3], data).unwrap(), &labels).unwrap();
        assert_eq!((r.top1, r.top5), (1.0, 1.0));
        assert_eq!(r.confusion[2][2], 2);
        assert_eq!(r.per_class, vec![Some(1.0); 3]);
    }

    #[test]
    fn uniform_logits_tie_break_by_index() {
        let labels: Vec<usize> = (0..10).collect();
        let r = report_from_logits(&Tensor::zeros(&[10, 10]), &labels).unwrap();
        assert_eq!(r.top5, 0.5);
        assert_eq!(r.top1, 0.1);
        for l in 0..10 {
            assert_eq!(top_k_hit(&[0.0; 10], l, 5), l < 5);
        }
    }

    #[test]
    fn top5_contains_top1() {
        let data: Vec<f64> = (0..60).map(|i| ((i * 37) % 11) as f64).collect();
        let labels: Vec<usize> = (0..6).map(|i| (i * 3) % 10).collect();
        let r = report_from_logits(&Tensor::new(vec![6, 10], data).unwrap(), &labels).unwrap();
        assert!(0.0 <= r.top1 && r.top1 <= r.top5 && r.top5 <= 1.0);
    }

    #[test]
    fn absent_class_and_bad_shapes() {
        let r = report_from_logits(&Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(), &[0]).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), None]);
        assert!(report_from_logits(&Tensor::zeros(&[2, 2]), &[0]).is_err());
        assert!(report_from_logits(&Tensor::zeros(&[1, 2]), &[5]).is_err());
    }
}
