//! Logistic-regression probe for measuring how much domain information a
//! frozen feature space carries.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LogisticProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    weights: Vec<f64>,
    bias: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl LogisticProbe {
    /// Full-batch gradient descent on standardized features, starting from zero.
    pub fn fit(features: &[Vec<f64>], labels: &[bool], iterations: usize, learning_rate: f64) -> Result<Self> {
        let n = features.len();
        if n == 0 || n != labels.len() {
            return Err(Error::Data(format!("probe needs matching features and labels, got {n} and {}", labels.len())));
        }
        let dim = features[0].len();
        if features.iter().any(|f| f.len() != dim) {
            return Err(Error::Data("probe features have unequal lengths".into()));
        }
        let nf = n as f64;
        let mut mean = vec![0.0; dim];
        for f in features {
            for (m, x) in mean.iter_mut().zip(f) {
                *m += x / nf;
            }
        }
        let mut scale = vec![0.0; dim];
        for f in features {
            for ((s, x), m) in scale.iter_mut().zip(f).zip(&mean) {
                *s += (x - m).powi(2) / nf;
            }
        }
        // Constant features are left unscaled.
        for s in &mut scale {
            *s = if *s > 1e-24 { 1.0 / s.sqrt() } else { 1.0 };
        }
        let mut probe = LogisticProbe {
            mean,
            scale,
            weights: vec![0.0; dim],
            bias: 0.0,
        };
        let xs: Vec<Vec<f64>> = features.iter().map(|f| probe.standardize(f)).collect();
        for _ in 0..iterations {
            let mut gw = vec![0.0; dim];
            let mut gb = 0.0;
            for (x, &y) in xs.iter().zip(labels) {
                let r = sigmoid(probe.logit(x)) - if y { 1.0 } else { 0.0 };
                for (g, xi) in gw.iter_mut().zip(x) {
                    *g += r * xi / nf;
                }
                gb += r / nf;
            }
            for (w, g) in probe.weights.iter_mut().zip(&gw) {
                *w -= learning_rate * g;
            }
            probe.bias -= learning_rate * gb;
        }
        Ok(probe)
    }

    fn standardize(&self, f: &[f64]) -> Vec<f64> {
        f.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((x, m), s)| (x - m) * s)
            .collect()
    }

    fn logit(&self, x: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()
    }

    pub fn predict(&self, features: &[f64]) -> bool {
        self.logit(&self.standardize(features)) > 0.0
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[bool]) -> f64 {
        let hits = features
            .iter()
            .zip(labels)
            .filter(|(f, &y)| self.predict(f) == y)
            .count();
        hits as f64 / features.len().max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_a_linear_split() {
        let xs: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64, 3.0]).collect();
        let ys: Vec<bool> = (0..40).map(|i| i >= 20).collect();
        let p = LogisticProbe::fit(&xs, &ys, 500, 1.0).unwrap();
        assert_eq!(p.accuracy(&xs, &ys), 1.0);
    }

    #[test]
    fn uninformative_features_stay_near_chance() {
        let xs: Vec<Vec<f64>> = (0..100).map(|i| vec![(i % 2) as f64]).collect();
        let ys: Vec<bool> = (0..100).map(|i| (i / 2) % 2 == 0).collect();
        let p = LogisticProbe::fit(&xs, &ys, 200, 1.0).unwrap();
        assert!((p.accuracy(&xs, &ys) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_mismatched_input() {
        assert!(LogisticProbe::fit(&[vec![1.0]], &[true, false], 1, 1.0).is_err());
        assert!(LogisticProbe::fit(&[vec![1.0], vec![1.0, 2.0]], &[true, false], 1, 1.0).is_err());
    }
}
