//! Utility metrics over hard predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancedAccuracy {
    pub value: f64,
    /// Classes absent from the labels, left out of the mean.
    pub zero_support_classes: Vec<usize>,
}

fn check(predictions: &[usize], labels: &[usize], class_count: usize) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::invalid("metrics need at least one label"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::dimension(labels.len(), predictions.len()));
    }
    if let Some(&c) = labels.iter().chain(predictions).find(|&&c| c >= class_count) {
        return Err(Error::invalid(format!("class {c} out of range for {class_count} classes")));
    }
    Ok(())
}

/// Unweighted mean of per-class recall over the classes present in `labels`.
pub fn balanced_accuracy(predictions: &[usize], labels: &[usize], class_count: usize) -> Result<BalancedAccuracy> {
    check(predictions, labels, class_count)?;
    let mut support = vec![0usize; class_count];
    let mut hits = vec![0usize; class_count];
    for (&p, &y) in predictions.iter().zip(labels) {
        support[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    let mut sum = 0.0;
    let mut present = 0usize;
    let mut zero_support_classes = Vec::new();
    for c in 0..class_count {
        if support[c] == 0 {
            zero_support_classes.push(c);
        } else {
            sum += hits[c] as f64 / support[c] as f64;
            present += 1;
        }
    }
    Ok(BalancedAccuracy {
        value: sum / present as f64,
        zero_support_classes,
    })
}

/// Plain top-1 accuracy.
pub fn mean_accuracy(predictions: &[usize], labels: &[usize], class_count: usize) -> Result<f64> {
    check(predictions, labels, class_count)?;
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    #[test]
    fn perfect() {
        let y = [0, 1, 2, 3, 1];
        assert_eq!(balanced_accuracy(&y, &y, 4).unwrap().value, 1.0);
        assert_eq!(mean_accuracy(&y, &y, 4).unwrap(), 1.0);
    }

    #[test]
    fn recalls_one_and_half() {
        let y = [0, 0, 1, 1];
        let p = [0, 0, 1, 0];
        assert_eq!(balanced_accuracy(&p, &y, 2).unwrap().value, 0.75);
    }

    #[test]
    fn weighs_classes_equally() {
        // 9 of class 0 all right, 1 of class 1 wrong
        let y = [0, 0, 0, 0, 0, 0, 0, 0, 0, 1];
        let p = [0; 10];
        assert_eq!(mean_accuracy(&p, &y, 2).unwrap(), 0.9);
        assert_eq!(balanced_accuracy(&p, &y, 2).unwrap().value, 0.5);
    }

    #[test]
    fn zero_support_is_flagged() {
        let r = balanced_accuracy(&[0, 2, 2], &[0, 2, 0], 4).unwrap();
        assert_eq!(r.zero_support_classes, vec![1, 3]);
        assert_eq!(r.value, 0.75);
    }

    #[test]
    fn random_guessing_is_chance() {
        let mut rng = rng_from_seed(5);
        let y: Vec<usize> = (0..4000).map(|i| i % 4).collect();
        let p: Vec<usize> = (0..4000).map(|_| rng.random_range(0..4)).collect();
        let ba = balanced_accuracy(&p, &y, 4).unwrap().value;
        assert!((ba - 0.25).abs() < 0.03, "{ba}");
        let ma = mean_accuracy(&p, &y, 4).unwrap();
        assert!((ma - ba).abs() < 0.02);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(balanced_accuracy(&[], &[], 2).is_err());
        assert!(balanced_accuracy(&[0], &[0, 1], 2).is_err());
        assert!(mean_accuracy(&[3], &[0], 2).is_err());
    }
}
