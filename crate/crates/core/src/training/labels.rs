use crate::error::{Error, Result};

/// Image-level labels, one entry of exactly -1 or +1 per class.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelVector(Vec<i8>);

impl LabelVector {
    pub fn new(values: Vec<i8>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::usage("label vector needs at least one class"));
        }
        if let Some(v) = values.iter().find(|&&v| v != 1 && v != -1) {
            return Err(Error::usage(format!("label value {v} is not -1 or +1")));
        }
        Ok(LabelVector(values))
    }

    /// Labels with `+1` exactly at the listed classes.
    pub fn from_positives(num_classes: usize, positives: impl IntoIterator<Item = usize>) -> Self {
        let mut v = vec![-1i8; num_classes];
        for c in positives {
            v[c] = 1;
        }
        LabelVector(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[i8] {
        &self.0
    }

    pub fn is_positive(&self, class: usize) -> bool {
        self.0[class] == 1
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &v)| v == 1).map(|(i, _)| i)
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| f64::from(v)).collect()
    }
}
