//! Keyword centroids learned by per-class squared-error SGD, and the
//! distance features and nearest-centroid rule built on them.

use kws_tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{KwsError, Result};

pub const V0_NAME: &str = "centroid.v0";
pub const V1_NAME: &str = "centroid.v1";

/// How centroid learning interacts with the model's gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CentroidCoupling {
    /// Latents are detached; the centroid loss never reaches the encoder.
    #[default]
    Detached,
    /// The per-class squared error is also added to the model loss.
    Joint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeywordCentroids<F> {
    pub v0: Vec<F>,
    pub v1: Vec<F>,
    pub lr: F,
}

impl<F: Real> KeywordCentroids<F> {
    pub fn zeros(dim: usize, lr: F) -> Self {
        Self {
            v0: vec![F::zero(); dim],
            v1: vec![F::zero(); dim],
            lr,
        }
    }

    /// Class means of `latents`; a class absent from the batch gets zeros.
    pub fn from_class_means(latents: &[Vec<F>], labels: &[u8], lr: F) -> Result<Self> {
        let dim = check_batch(latents, labels, None)?;
        let mut c = Self::zeros(dim, lr);
        for (class, v) in [(0u8, &mut c.v0), (1u8, &mut c.v1)] {
            let members: Vec<&Vec<F>> = latents.iter().zip(labels).filter(|(_, &y)| y == class).map(|(f, _)| f).collect();
            if members.is_empty() {
                continue;
            }
            let n = F::lit(members.len() as f64);
            for (d, slot) in v.iter_mut().enumerate() {
                *slot = members.iter().map(|f| f[d]).sum::<F>() / n;
            }
        }
        Ok(c)
    }

    pub fn dim(&self) -> usize {
        self.v0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.v0.iter().chain(&self.v1).all(|v| v.is_finite())
    }

    pub fn tensors(&self) -> (Tensor<F>, Tensor<F>) {
        (Tensor::vector(self.v0.clone()), Tensor::vector(self.v1.clone()))
    }

    pub fn named(&self) -> Vec<(String, Tensor<F>)> {
        let (a, b) = self.tensors();
        vec![(V0_NAME.to_string(), a), (V1_NAME.to_string(), b)]
    }

    pub fn from_tensors(v0: &Tensor<F>, v1: &Tensor<F>, lr: F) -> Result<Self> {
        if v0.rank() != 1 || v0.shape() != v1.shape() {
            return Err(KwsError::contract(format!(
                "centroids must be equal-length vectors, got {:?} and {:?}",
                v0.shape(),
                v1.shape()
            )));
        }
        Ok(Self {
            v0: v0.data().to_vec(),
            v1: v1.data().to_vec(),
            lr,
        })
    }

    pub fn centroid(&self, class: u8) -> &[F] {
        if class == 0 {
            &self.v0
        } else {
            &self.v1
        }
    }
}

fn check_batch<F>(latents: &[Vec<F>], labels: &[u8], dim: Option<usize>) -> Result<usize> {
    if latents.len() != labels.len() {
        return Err(KwsError::contract(format!(
            "{} latents but {} labels",
            latents.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
        return Err(KwsError::contract(format!("label {bad} is not 0 or 1")));
    }
    let dim = dim.or_else(|| latents.first().map(Vec::len)).unwrap_or(0);
    if let Some(f) = latents.iter().find(|f| f.len() != dim) {
        return Err(KwsError::contract(format!(
            "latent has dimension {}, centroids have {dim}",
            f.len()
        )));
    }
    Ok(dim)
}

/// Gradient of `Σ_{i ∈ class} ‖f_i − V‖²` with respect to `V`.
pub fn class_mse_gradient<F: Real>(latents: &[Vec<F>], labels: &[u8], v: &[F], class: u8) -> Vec<F> {
    let two = F::lit(2.0);
    let mut g = vec![F::zero(); v.len()];
    for (f, _) in latents.iter().zip(labels).filter(|(_, &y)| y == class) {
        for ((gd, &vd), &fd) in g.iter_mut().zip(v).zip(f) {
            *gd = *gd + two * (vd - fd);
        }
    }
    g
}

/// One SGD step on each class's squared error against its centroid, using
/// `lr` in place of the stored rate when given.
pub fn centroid_sgd_step<F: Real>(
    latents: &[Vec<F>],
    labels: &[u8],
    c: &KeywordCentroids<F>,
    lr: Option<F>,
) -> Result<KeywordCentroids<F>> {
    check_batch(latents, labels, Some(c.dim()))?;
    let eta = lr.unwrap_or(c.lr);
    let mut next = c.clone();
    for (class, v) in [(0u8, &mut next.v0), (1u8, &mut next.v1)] {
        if !labels.contains(&class) {
            continue;
        }
        let g = class_mse_gradient(latents, labels, v, class);
        for (vd, gd) in v.iter_mut().zip(g) {
            *vd = *vd - eta * gd;
        }
    }
    Ok(next)
}

fn distance<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<F>().sqrt()
}

/// `[‖latent − V0‖, ‖latent − V1‖]`.
pub fn l2_features<F: Real>(latent: &[F], c: &KeywordCentroids<F>) -> Result<[F; 2]> {
    if latent.len() != c.dim() {
        return Err(KwsError::contract(format!(
            "latent has dimension {}, centroids have {}",
            latent.len(),
            c.dim()
        )));
    }
    Ok([distance(latent, &c.v0), distance(latent, &c.v1)])
}

/// Class of the nearer centroid; equidistant latents are class 0.
pub fn nearest_centroid_classify<F: Real>(latent: &[F], c: &KeywordCentroids<F>) -> Result<u8> {
    let [d0, d1] = l2_features(latent, c)?;
    Ok(u8::from(d1 < d0))
}

/// Signed margin `‖x − V0‖ − ‖x − V1‖`; positive when nearer the keyword.
pub fn distance_margin<F: Real>(latent: &[F], c: &KeywordCentroids<F>) -> Result<F> {
    let [d0, d1] = l2_features(latent, c)?;
    Ok(d0 - d1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cents() -> KeywordCentroids<f64> {
        KeywordCentroids {
            v0: vec![3.0, 4.0],
            v1: vec![0.0, 1.0],
            lr: 0.1,
        }
    }

    #[test]
    fn hand_distances() {
        assert_eq!(l2_features(&[0.0, 0.0], &cents()).unwrap(), [5.0, 1.0]);
        assert_eq!(nearest_centroid_classify(&[0.0, 0.0], &cents()).unwrap(), 1);
    }

    #[test]
    fn single_positive_step() {
        let c = cents();
        let f = vec![1.0, -1.0];
        let n = centroid_sgd_step(&[f.clone()], &[1], &c, None).unwrap();
        for d in 0..2 {
            assert!((n.v1[d] - (c.v1[d] - 2.0 * c.lr * (c.v1[d] - f[d]))).abs() < 1e-15);
        }
        assert_eq!(n.v0, c.v0);
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        assert!(centroid_sgd_step(&[vec![1.0]], &[0], &cents(), None).is_err());
        assert!(l2_features(&[1.0, 2.0, 3.0], &cents()).is_err());
    }

    #[test]
    fn first_batch_means() {
        let c = KeywordCentroids::from_class_means(&[vec![1.0, 1.0], vec![3.0, 5.0], vec![7.0, 7.0]], &[1, 1, 0], 0.01).unwrap();
        assert_eq!(c.v1, vec![2.0, 3.0]);
        assert_eq!(c.v0, vec![7.0, 7.0]);
    }
}
