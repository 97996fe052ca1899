use crate::error::{Result, ZptError};
use crate::tensor::Mat;

fn row_norms(m: &Mat, what: &str) -> Result<Vec<f64>> {
    m.rows()
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let n = r.dot(&r).sqrt();
            if n > 0.0 && n.is_finite() {
                Ok(n)
            } else {
                Err(ZptError::NumericalDomain(format!("{what} row {i} has norm {n}")))
            }
        })
        .collect()
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize(m: &Mat) -> Result<Mat> {
    let norms = row_norms(m, "matrix")?;
    let mut out = m.clone();
    for (mut row, n) in out.rows_mut().into_iter().zip(norms) {
        row.mapv_inplace(|v| v / n);
    }
    Ok(out)
}

/// `out[i][j] = cos(a_i, b_j)`.
pub fn cosine_similarity_matrix(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.ncols() != b.ncols() {
        return Err(ZptError::Contract(format!(
            "cosine similarity of {}-dim and {}-dim rows",
            a.ncols(),
            b.ncols()
        )));
    }
    let an = l2_normalize(a)?;
    let bn = l2_normalize(b)?;
    Ok(an.dot(&bn.t()).mapv(|v| v.clamp(-1.0, 1.0)))
}

/// Cosine similarity of two vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(ZptError::NumericalDomain("cosine of a zero vector".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_and_analytic_values() {
        let i = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(cosine_similarity_matrix(&i, &i).unwrap(), i);
        let c = cosine_similarity_matrix(&array![[1.0, 1.0]], &array![[1.0, 0.0]]).unwrap();
        assert!((c[[0, 0]] - 0.707_106_78).abs() < 1e-8);
    }

    #[test]
    fn normalize_examples() {
        let n = l2_normalize(&array![[3.0, 4.0]]).unwrap();
        assert!((n[[0, 0]] - 0.6).abs() < 1e-15 && (n[[0, 1]] - 0.8).abs() < 1e-15);
        let again = l2_normalize(&n).unwrap();
        assert!((&again - &n).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn zero_rows_are_rejected() {
        let z = array![[0.0, 0.0]];
        assert!(matches!(l2_normalize(&z), Err(ZptError::NumericalDomain(_))));
        assert!(cosine_similarity_matrix(&z, &array![[1.0, 0.0]]).is_err());
        assert!(cosine(&[0.0], &[1.0]).is_err());
    }
}
