use std::ops::Deref;

use crate::scalar::Scalar;

/// Output of the last fully connected layer: the appearance descriptor scored by the
/// Gaussian model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureVector<T>(Vec<T>);

impl<T: Scalar> FeatureVector<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![T::zero(); len])
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        crate::scalar::all_finite(&self.0)
    }

    /// Elementwise mean of a non-empty batch.
    pub fn mean_of<'a>(batch: impl IntoIterator<Item = &'a FeatureVector<T>>) -> Option<Self> {
        let mut iter = batch.into_iter();
        let mut acc = iter.next()?.0.clone();
        let mut n = 1usize;
        for f in iter {
            for (a, &v) in acc.iter_mut().zip(&f.0) {
                *a = *a + v;
            }
            n += 1;
        }
        let inv = T::one() / T::lit(n as f64);
        acc.iter_mut().for_each(|a| *a = *a * inv);
        Some(Self(acc))
    }

    /// Cosine similarity; 0 when either vector has zero norm.
    pub fn cosine(&self, other: &Self) -> T {
        let dot: T = self.0.iter().zip(&other.0).map(|(&a, &b)| a * b).sum();
        let na: T = self.0.iter().map(|&a| a * a).sum::<T>().sqrt();
        let nb: T = other.0.iter().map(|&b| b * b).sum::<T>().sqrt();
        if na == T::zero() || nb == T::zero() {
            T::zero()
        } else {
            dot / (na * nb)
        }
    }
}

impl<T> Deref for FeatureVector<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.0
    }
}

impl<T: Scalar> From<Vec<T>> for FeatureVector<T> {
    fn from(v: Vec<T>) -> Self {
        Self(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_cases() {
        let a = FeatureVector::new(vec![1.0, 0.0]);
        let b = FeatureVector::new(vec![0.0, 2.0]);
        assert_eq!(a.cosine(&a), 1.0);
        assert_eq!(a.cosine(&b), 0.0);
        assert_eq!(a.cosine(&FeatureVector::zeros(2)), 0.0);
    }

    #[test]
    fn mean() {
        let v = [FeatureVector::new(vec![1.0f32, 2.0]), FeatureVector::new(vec![3.0, 6.0])];
        assert_eq!(FeatureVector::mean_of(&v).unwrap().into_inner(), vec![2.0, 4.0]);
        assert!(FeatureVector::<f64>::mean_of(&[]).is_none());
    }
}
