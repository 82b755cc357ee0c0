use swm_autograd::Float;

use crate::error::{Error, Result};

/// Nearest codebook row by squared Euclidean distance, ties to the lowest index.
///
/// `codebook` is row-major `V x dim`. Returns the index and the distance.
pub fn quantize<F: Float>(vector: &[F], codebook: &[F]) -> Result<(usize, F)> {
    let dim = vector.len();
    if dim == 0 || codebook.is_empty() || codebook.len() % dim != 0 {
        return Err(Error::invalid(format!("codebook of {} values does not hold rows of width {dim}", codebook.len())));
    }
    if vector.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value presented to the quantizer".into()));
    }
    let mut best = (0, F::infinity());
    for (i, row) in codebook.chunks_exact(dim).enumerate() {
        let mut d = F::zero();
        for (&a, &b) in vector.iter().zip(row) {
            let e = a - b;
            d += e * e;
        }
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(best)
}

/// Quantizes every row of a `rows x dim` matrix.
pub fn quantize_rows<F: Float>(cells: &[F], dim: usize, codebook: &[F]) -> Result<Vec<usize>> {
    cells.chunks_exact(dim).map(|c| quantize(c, codebook).map(|r| r.0)).collect()
}
