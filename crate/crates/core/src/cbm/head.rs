use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tinynet::{argmax, softmax};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub lr: f64,
    pub max_steps: usize,
    /// Stop once the gradient norm drops below this.
    pub tolerance: f64,
    pub n_classes: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            lr: 1.0,
            max_steps: 5000,
            tolerance: 1e-5,
            n_classes: 5,
        }
    }
}

/// Multinomial logistic regression from concept probabilities to grades.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeHead {
    /// `n_classes` rows of input weights.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl GradeHead {
    pub fn n_inputs(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
            .collect()
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    pub fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.n_inputs() {
            return Err(Error::Shape(format!("grade head expects {} concepts, got {}", self.n_inputs(), x.len())));
        }
        Ok(())
    }
}

/// Full-batch gradient descent on the mean cross-entropy from zero weights.
pub fn train_grade_head(inputs: &[Vec<f64>], grades: &[usize], config: &HeadConfig) -> Result<GradeHead> {
    if inputs.len() != grades.len() || inputs.is_empty() {
        return Err(Error::Shape(format!("{} inputs and {} grades", inputs.len(), grades.len())));
    }
    let d = inputs[0].len();
    if inputs.iter().any(|x| x.len() != d) {
        return Err(Error::Shape("concept rows differ in length".into()));
    }
    let k = config.n_classes;
    if let Some(&g) = grades.iter().find(|&&g| g >= k) {
        return Err(Error::Invalid(format!("grade {g} out of range for {k} classes")));
    }
    let mut seen = vec![false; k];
    grades.iter().for_each(|&g| seen[g] = true);
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::Invalid("grade head needs at least 2 distinct grades".into()));
    }

    let mut head = GradeHead {
        weights: vec![vec![0.0; d]; k],
        bias: vec![0.0; k],
    };
    let n = inputs.len() as f64;
    for step in 0..config.max_steps {
        let mut gw = vec![vec![0.0; d]; k];
        let mut gb = vec![0.0; k];
        for (x, &y) in inputs.iter().zip(grades) {
            let mut p = head.probabilities(x);
            p[y] -= 1.0;
            for c in 0..k {
                gb[c] += p[c] / n;
                for j in 0..d {
                    gw[c][j] += p[c] * x[j] / n;
                }
            }
        }
        let norm = (gb.iter().map(|g| g * g).sum::<f64>() + gw.iter().flatten().map(|g| g * g).sum::<f64>()).sqrt();
        if norm < config.tolerance {
            log::debug!("grade head converged after {step} steps");
            break;
        }
        for c in 0..k {
            head.bias[c] -= config.lr * gb[c];
            for j in 0..d {
                head.weights[c][j] -= config.lr * gw[c][j];
            }
        }
    }
    Ok(head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{grade_of, ConceptVector};

    fn all_patterns() -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut x = Vec::new();
        let mut y = Vec::new();
        for bits in 0u8..64 {
            let v = ConceptVector(std::array::from_fn(|i| bits >> i & 1 == 1));
            x.push(v.0.iter().map(|&b| f64::from(u8::from(b))).collect());
            y.push(grade_of(&v) as usize);
        }
        (x, y)
    }

    #[test]
    fn oracle_concepts_are_graded_perfectly() {
        let (x, y) = all_patterns();
        let head = train_grade_head(&x, &y, &HeadConfig::default()).unwrap();
        for (xi, &yi) in x.iter().zip(&y) {
            assert_eq!(head.predict(xi), yi, "{xi:?}");
            let p = head.probabilities(xi);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn row_order_does_not_matter() {
        let (x, y) = all_patterns();
        let cfg = HeadConfig {
            max_steps: 800,
            ..HeadConfig::default()
        };
        let a = train_grade_head(&x, &y, &cfg).unwrap();
        let (xr, yr): (Vec<_>, Vec<_>) = x.into_iter().zip(y).rev().unzip();
        let b = train_grade_head(&xr, &yr, &cfg).unwrap();
        for (wa, wb) in a.weights.iter().flatten().zip(b.weights.iter().flatten()) {
            assert!((wa - wb).abs() < 1e-6);
        }
    }

    #[test]
    fn single_grade_is_rejected() {
        assert!(train_grade_head(&[vec![0.0], vec![1.0]], &[2, 2], &HeadConfig::default()).is_err());
        assert!(train_grade_head(&[vec![0.0]], &[7], &HeadConfig::default()).is_err());
    }
}
