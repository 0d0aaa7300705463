//! Reference baseline: flatten each window to one vector, reduce with PCA,
//! cluster with k-means. Its assignments feed the same label-matching and
//! evaluation path as the learned model.

use crate::error::{Error, Result};
use crate::kmeans::{assign, kmeans, KmeansConfig, KmeansFit};
use crate::nn::tensor::Tensor;
use crate::pca::PcaFit;
use crate::util::derive_seed;

const TAG_BASELINE: u64 = 0xBA5E;

/// Default embedding dimensionality for the baseline.
pub const BASELINE_DIMS: usize = 25;

#[derive(Clone, Debug)]
pub struct BaselineFit {
    pub pca: PcaFit,
    pub kmeans: KmeansFit,
    pub train_assignments: Vec<usize>,
    pub test_assignments: Vec<usize>,
}

fn flatten_windows(windows: &[&Tensor]) -> Result<Tensor> {
    let first = windows
        .first()
        .ok_or_else(|| Error::Validation("baseline: empty window set".into()))?;
    let cols = first.rows() * first.cols();
    let mut out = Tensor::zeros(&[windows.len(), cols]);
    for (i, w) in windows.iter().enumerate() {
        if w.rows() * w.cols() != cols {
            return Err(Error::ShapeMismatch(format!(
                "baseline: window {i} has {} values, expected {cols}",
                w.rows() * w.cols()
            )));
        }
        out.row_mut(i).copy_from_slice(w.data());
    }
    Ok(out)
}

/// Fit PCA (to `dims` components) and k-means (k clusters) on the flattened
/// training windows; assign both train and test windows to the nearest
/// centroid in the reduced space. Deterministic given the seed.
pub fn baseline_pca_kmeans(
    train: &[&Tensor],
    test: &[&Tensor],
    dims: usize,
    k: usize,
    kmeans_cfg: &KmeansConfig,
    seed: u64,
) -> Result<BaselineFit> {
    let train_flat = flatten_windows(train)?;
    let pca = crate::pca::fit(&train_flat, dims)?;
    let train_proj = pca.transform(&train_flat);
    let km = kmeans(
        &train_proj,
        k,
        kmeans_cfg,
        derive_seed(seed, &[TAG_BASELINE]),
    )?;
    let train_assignments = km.assignments.clone();
    let test_assignments = if test.is_empty() {
        Vec::new()
    } else {
        let test_flat = flatten_windows(test)?;
        if test_flat.cols() != train_flat.cols() {
            return Err(Error::ShapeMismatch(format!(
                "baseline: test windows flatten to {} values, train to {}",
                test_flat.cols(),
                train_flat.cols()
            )));
        }
        assign(&km.centroids, &pca.transform(&test_flat))
    };
    Ok(BaselineFit {
        pca,
        kmeans: km,
        train_assignments,
        test_assignments,
    })
}
