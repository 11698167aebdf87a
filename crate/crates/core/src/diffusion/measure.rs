//! Finitely supported probability measures.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DVector;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{invalid, LabError, Result};

/// Weighted point cloud `Σ wᵢ δ_{yᵢ}` in ambient space.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMeasure {
    support: Vec<DVector<f64>>,
    weights: Vec<f64>,
}

/// Per-atom tolerance on the weight sum; summation error grows with the count.
const WEIGHT_TOL: f64 = 1e-12;

impl FiniteMeasure {
    pub fn new(support: Vec<DVector<f64>>, weights: Vec<f64>) -> Result<Self> {
        if support.is_empty() {
            return Err(LabError::Empty("finite measure support".into()));
        }
        if support.len() != weights.len() {
            return invalid(format!(
                "{} support points but {} weights",
                support.len(),
                weights.len()
            ));
        }
        let dim = support[0].len();
        for (i, p) in support.iter().enumerate() {
            if p.len() != dim {
                return Err(LabError::DimensionMismatch { expected: dim, got: p.len() });
            }
            if p.iter().any(|v| !v.is_finite()) {
                return invalid(format!("support point {i} has non-finite coordinates"));
            }
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return invalid("weights must be finite and nonnegative");
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOL * (weights.len() as f64).max(1.0) {
            return invalid(format!("weights sum to {total}, expected 1"));
        }
        Ok(Self { support, weights })
    }

    /// Uniform weights over the given points.
    pub fn uniform(support: Vec<DVector<f64>>) -> Result<Self> {
        let n = support.len();
        if n == 0 {
            return Err(LabError::Empty("finite measure support".into()));
        }
        Self::new(support, vec![1.0 / n as f64; n])
    }

    /// Rescale arbitrary nonnegative weights to sum to one.
    pub fn normalized(support: Vec<DVector<f64>>, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return invalid("weights must have positive finite sum");
        }
        Self::new(support, weights.into_iter().map(|w| w / total).collect())
    }

    pub fn dirac(point: DVector<f64>) -> Self {
        Self { support: vec![point], weights: vec![1.0] }
    }

    pub fn dim(&self) -> usize {
        self.support[0].len()
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn support(&self) -> &[DVector<f64>] {
        &self.support
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim());
        for (p, w) in self.support.iter().zip(&self.weights) {
            m.axpy(*w, p, 1.0);
        }
        m
    }

    /// Draw one support index according to the weights.
    pub fn sample_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        if self.support.len() == 1 {
            return 0;
        }
        // WeightedIndex construction is O(n); callers in hot loops use `sampler()`.
        WeightedIndex::new(&self.weights).expect("validated weights").sample(rng)
    }

    /// Reusable index sampler.
    pub fn sampler(&self) -> MeasureSampler {
        MeasureSampler {
            index: if self.support.len() > 1 {
                Some(WeightedIndex::new(&self.weights).expect("validated weights"))
            } else {
                None
            },
        }
    }

    /// Write as CSV: header `weight,x0,...,x{D-1}`, one row per support point.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["weight".to_string()];
        header.extend((0..self.dim()).map(|i| format!("x{i}")));
        w.write_record(&header)?;
        for (p, wt) in self.support.iter().zip(&self.weights) {
            let mut row = vec![format!("{wt:e}")];
            row.extend(p.iter().map(|v| format!("{v:e}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut support = Vec::new();
        let mut weights = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let vals: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
            let vals = vals.map_err(|e| LabError::Parse(e.to_string()))?;
            if vals.len() < 2 {
                return Err(LabError::Parse("row needs a weight and at least one coordinate".into()));
            }
            weights.push(vals[0]);
            support.push(DVector::from_column_slice(&vals[1..]));
        }
        Self::new(support, weights)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

pub struct MeasureSampler {
    index: Option<WeightedIndex<f64>>,
}

impl MeasureSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match &self.index {
            Some(ix) => ix.sample(rng),
            None => 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_weights() {
        let p = vec![DVector::from_vec(vec![0.0]), DVector::from_vec(vec![1.0])];
        assert!(FiniteMeasure::new(p.clone(), vec![0.5, 0.6]).is_err());
        assert!(FiniteMeasure::new(p.clone(), vec![-0.5, 1.5]).is_err());
        assert!(FiniteMeasure::new(vec![DVector::from_vec(vec![f64::NAN])], vec![1.0]).is_err());
        assert!(FiniteMeasure::new(p, vec![0.25, 0.75]).is_ok());
    }

    #[test]
    fn csv_round_trip() {
        let m = FiniteMeasure::new(
            vec![DVector::from_vec(vec![0.1, -2.0]), DVector::from_vec(vec![3.5, 1e-9])],
            vec![0.3, 0.7],
        )
        .unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("weight,x0,x1\n"));
        let back = FiniteMeasure::read_csv(&buf[..]).unwrap();
        assert_eq!(m, back);
    }
}
