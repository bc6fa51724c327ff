//! Evaluation-side ambiguity removal, NMSE and cascaded channels.

use crate::error::{Error, Result};
use crate::tensor::{frobenius_sqr, khatri_rao_cols, CMatrix, C64};

/// An estimate rescaled towards ground truth.
#[derive(Clone, Debug)]
pub struct Alignment {
    pub matrix: CMatrix,
    /// One complex scalar per column (or per row group).
    pub scalars: Vec<C64>,
    /// Columns (or groups) whose estimate was identically zero.
    pub zero: Vec<usize>,
}

fn same_shape(a: &CMatrix, b: &CMatrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "estimate {:?} and truth {:?} differ in shape",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// LS-optimal scalar `λ = (x̂ᴴx)/(x̂ᴴx̂)` over paired entries; `None` when `x̂ = 0`.
fn ls_scalar<'a>(pairs: impl Iterator<Item = (&'a C64, &'a C64)>) -> Option<C64> {
    let (mut num, mut den) = (C64::new(0.0, 0.0), 0.0);
    for (e, t) in pairs {
        num += e.conj() * t;
        den += e.norm_sqr();
    }
    (den > 0.0).then(|| num / den)
}

/// Multiply each estimated column by the complex scalar minimizing
/// `‖h_n − λ_n ĥ_n‖²`.
pub fn align_scaling(estimate: &CMatrix, truth: &CMatrix) -> Result<Alignment> {
    same_shape(estimate, truth)?;
    let mut matrix = estimate.clone();
    let mut scalars = Vec::with_capacity(estimate.ncols());
    let mut zero = Vec::new();
    for n in 0..estimate.ncols() {
        let lambda = ls_scalar(estimate.column(n).iter().zip(truth.column(n).iter())).unwrap_or_else(|| {
            zero.push(n);
            C64::new(0.0, 0.0)
        });
        let mut col = matrix.column_mut(n);
        col *= lambda;
        scalars.push(lambda);
    }
    Ok(Alignment { matrix, scalars, zero })
}

/// One LS scalar per group of rows; `groups[i]` names the group of row `i`.
pub fn align_row_groups(estimate: &CMatrix, truth: &CMatrix, groups: &[usize]) -> Result<Alignment> {
    same_shape(estimate, truth)?;
    if groups.len() != estimate.nrows() {
        return Err(Error::Shape("one group label per row is required".into()));
    }
    let n_groups = groups.iter().max().map_or(0, |g| g + 1);
    let mut num = vec![C64::new(0.0, 0.0); n_groups];
    let mut den = vec![0.0; n_groups];
    for (i, &grp) in groups.iter().enumerate() {
        for (e, t) in estimate.row(i).iter().zip(truth.row(i).iter()) {
            num[grp] += e.conj() * t;
            den[grp] += e.norm_sqr();
        }
    }
    let mut zero = Vec::new();
    let scalars: Vec<C64> = (0..n_groups)
        .map(|grp| {
            if den[grp] > 0.0 {
                num[grp] / den[grp]
            } else {
                zero.push(grp);
                C64::new(0.0, 0.0)
            }
        })
        .collect();
    let mut matrix = estimate.clone();
    for (i, &grp) in groups.iter().enumerate() {
        let mut row = matrix.row_mut(i);
        row *= scalars[grp];
    }
    Ok(Alignment { matrix, scalars, zero })
}

/// Undo a known column scaling: column `n` is divided by `scalars[n]`
/// (columns with a zero scalar are left as they are).
pub fn unscale_columns(estimate: &CMatrix, scalars: &[C64]) -> Result<CMatrix> {
    if scalars.len() != estimate.ncols() {
        return Err(Error::Shape("one scalar per column is required".into()));
    }
    let mut out = estimate.clone();
    for (mut col, &s) in out.column_iter_mut().zip(scalars) {
        if s.norm_sqr() > 0.0 {
            col /= s;
        }
    }
    Ok(out)
}

/// Align a pair `(H, G)` whose columns share reciprocal scalings, as in a
/// cascade `H ⋄ G`: `H` gets per-column LS scalars and `G` the inverse of
/// the same scalars, then (if `row_scalars`) one LS scalar per row.
pub fn align_tied_pair(
    h_est: &CMatrix,
    h_truth: &CMatrix,
    g_est: &CMatrix,
    g_truth: &CMatrix,
    row_scalars: bool,
) -> Result<(CMatrix, CMatrix)> {
    let h = align_scaling(h_est, h_truth)?;
    let g = unscale_columns(g_est, &h.scalars)?;
    let g = if row_scalars {
        let rows: Vec<usize> = (0..g.nrows()).collect();
        align_row_groups(&g, g_truth, &rows)?.matrix
    } else {
        same_shape(&g, g_truth)?;
        g
    };
    Ok((h.matrix, g))
}

const BILINEAR_MAX_SWEEPS: usize = 500;
const BILINEAR_REL_TOL: f64 = 1e-15;

/// Fit `diag(a)·Ĝ·diag(b)` to the truth by alternating exact LS sweeps over
/// the column scalars `b` and row scalars `a`. Each sweep cannot increase the
/// error; iteration stops once the relative improvement stalls.
pub fn align_rows_and_columns(estimate: &CMatrix, truth: &CMatrix) -> Result<Alignment> {
    same_shape(estimate, truth)?;
    let rows: Vec<usize> = (0..estimate.nrows()).collect();
    let mut current = estimate.clone();
    let mut prev = f64::INFINITY;
    let mut col_scalars = vec![C64::new(1.0, 0.0); estimate.ncols()];
    let mut zero = Vec::new();
    for _ in 0..BILINEAR_MAX_SWEEPS {
        let cols = align_scaling(&current, truth)?;
        for (acc, s) in col_scalars.iter_mut().zip(&cols.scalars) {
            *acc *= s;
        }
        zero = cols.zero;
        let by_row = align_row_groups(&cols.matrix, truth, &rows)?;
        current = by_row.matrix;
        let err = frobenius_sqr(&(truth - &current));
        if err == 0.0 || prev - err <= BILINEAR_REL_TOL * prev.min(frobenius_sqr(truth)) {
            break;
        }
        prev = err;
    }
    Ok(Alignment {
        matrix: current,
        scalars: col_scalars,
        zero,
    })
}

/// `‖Ω − Ω̂‖²_F / ‖Ω‖²_F`.
pub fn nmse(truth: &CMatrix, estimate: &CMatrix) -> Result<f64> {
    same_shape(estimate, truth)?;
    let den = frobenius_sqr(truth);
    if den == 0.0 {
        return Err(Error::Degenerate("NMSE against a zero-norm reference".into()));
    }
    Ok(frobenius_sqr(&(truth - estimate)) / den)
}

/// `Θ = H ⋄ G`, so that `vec(G·diag(s)·Hᵀ) = Θ·s`.
pub fn cascade(h: &CMatrix, g: &CMatrix) -> Result<CMatrix> {
    khatri_rao_cols(h, g)
}

/// Downlink cascade `H_d ⋄ G_d` (ML×N).
pub fn cascade_dl(h_d: &CMatrix, g_d: &CMatrix) -> Result<CMatrix> {
    cascade(h_d, g_d)
}

/// Uplink cascade `G_u ⋄ H_u` (LM×N), from `vec(H_u·diag(s)·G_uᵀ)`.
pub fn cascade_ul(h_u: &CMatrix, g_u: &CMatrix) -> Result<CMatrix> {
    cascade(g_u, h_u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{cn, rng_from_seed};
    use crate::tensor::vec;
    use crate::testutil::{random_matrix, rel_err};
    use nalgebra::DVector;

    fn diag(v: &[C64]) -> CMatrix {
        CMatrix::from_diagonal(&DVector::from_vec(v.to_vec()))
    }

    #[test]
    fn align_pure_scaling() {
        let truth = random_matrix(4, 3, &mut rng_from_seed(1));
        let est = &truth * C64::new(0.0, 3.0);
        assert!(rel_err(&align_scaling(&est, &truth).unwrap().matrix, &truth) < 1e-12);
        let same = align_scaling(&truth, &truth).unwrap();
        assert!(same.scalars.iter().all(|s| (s - C64::new(1.0, 0.0)).norm() < 1e-14));
    }

    #[test]
    fn align_flags_zero_columns() {
        let truth = random_matrix(3, 2, &mut rng_from_seed(2));
        let mut est = truth.clone();
        est.column_mut(0).fill(C64::new(0.0, 0.0));
        let a = align_scaling(&est, &truth).unwrap();
        assert_eq!(a.zero, vec![0]);
        assert_eq!(a.scalars[0], C64::new(0.0, 0.0));
    }

    #[test]
    fn alignment_leaves_perturbation_energy() {
        let mut rng = rng_from_seed(3);
        let (rows, cols) = (200, 4);
        let truth = random_matrix(rows, cols, &mut rng);
        let lambdas: Vec<C64> = (0..cols).map(|_| cn(&mut rng)).collect();
        let pert = random_matrix(rows, cols, &mut rng) * C64::new(0.05, 0.0);
        let est = (&truth + &pert) * diag(&lambdas);
        let expected = frobenius_sqr(&pert) / frobenius_sqr(&truth);
        let got = nmse(&truth, &align_scaling(&est, &truth).unwrap().matrix).unwrap();
        assert!((got - expected).abs() < 0.1 * expected, "{got} vs {expected}");
    }

    #[test]
    fn bilinear_alignment_removes_row_and_column_scalings() {
        let mut rng = rng_from_seed(4);
        let truth = random_matrix(3, 5, &mut rng);
        let a: Vec<C64> = (0..3).map(|_| cn(&mut rng)).collect();
        let b: Vec<C64> = (0..5).map(|_| cn(&mut rng)).collect();
        let est = diag(&a) * &truth * diag(&b);
        let aligned = align_rows_and_columns(&est, &truth).unwrap();
        assert!(nmse(&truth, &aligned.matrix).unwrap() < 1e-20);
    }

    #[test]
    fn row_groups_share_one_scalar() {
        let mut rng = rng_from_seed(5);
        let truth = random_matrix(6, 3, &mut rng);
        let groups = [0, 1, 0, 1, 0, 1];
        let mut est = truth.clone();
        for (i, &g) in groups.iter().enumerate() {
            let mut row = est.row_mut(i);
            row *= if g == 0 {
                C64::new(2.0, 1.0)
            } else {
                C64::new(-0.5, 0.0)
            };
        }
        let a = align_row_groups(&est, &truth, &groups).unwrap();
        assert_eq!(a.scalars.len(), 2);
        assert!(rel_err(&a.matrix, &truth) < 1e-12);
    }

    #[test]
    fn tied_pair_alignment_undoes_the_cascade_ambiguity() {
        let mut rng = rng_from_seed(8);
        let h = random_matrix(4, 3, &mut rng);
        let g = random_matrix(2, 3, &mut rng);
        let lam: Vec<C64> = (0..3).map(|_| cn(&mut rng)).collect();
        let inv: Vec<C64> = lam.iter().map(|z| C64::new(1.0, 0.0) / z).collect();
        let mu: Vec<C64> = (0..2).map(|_| cn(&mut rng)).collect();
        let (ha, ga) = align_tied_pair(&(&h * diag(&lam)), &h, &(&g * diag(&inv)), &g, false).unwrap();
        assert!(rel_err(&ha, &h) < 1e-12 && rel_err(&ga, &g) < 1e-12);
        let g_rows = diag(&mu) * &g * diag(&inv);
        let (_, ga) = align_tied_pair(&(&h * diag(&lam)), &h, &g_rows, &g, true).unwrap();
        assert!(rel_err(&ga, &g) < 1e-12);
        // Without the row fit a row scaling stays visible.
        let (_, ga) = align_tied_pair(&(&h * diag(&lam)), &h, &g_rows, &g, false).unwrap();
        assert!(rel_err(&ga, &g) > 1e-3);
    }

    #[test]
    fn nmse_examples() {
        let mut rng = rng_from_seed(6);
        let truth = random_matrix(4, 4, &mut rng);
        assert_eq!(nmse(&truth, &truth).unwrap(), 0.0);
        assert_eq!(nmse(&truth, &CMatrix::zeros(4, 4)).unwrap(), 1.0);
        let e = random_matrix(4, 4, &mut rng);
        let e = &e * C64::new((0.01 * frobenius_sqr(&truth) / frobenius_sqr(&e)).sqrt(), 0.0);
        assert!((nmse(&truth, &(&truth + e)).unwrap() - 0.01).abs() < 1e-12);
        assert!(nmse(&CMatrix::zeros(2, 2), &truth.view((0, 0), (2, 2)).into_owned()).is_err());
        assert!(nmse(&truth, &CMatrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn cascade_examples() {
        let mut rng = rng_from_seed(7);
        let h = random_matrix(3, 1, &mut rng);
        let g = random_matrix(2, 1, &mut rng);
        assert_eq!(cascade(&h, &g).unwrap(), crate::tensor::kronecker(&h, &g));

        let h = random_matrix(3, 4, &mut rng);
        let g = random_matrix(2, 4, &mut rng);
        let s: Vec<C64> = (0..4).map(|_| cn(&mut rng)).collect();
        let lhs = vec(&(&g * diag(&s) * h.transpose()));
        let rhs = cascade(&h, &g).unwrap() * DVector::from_vec(s.clone());
        assert!((lhs - rhs).norm() < 1e-12);

        let lam: Vec<C64> = (0..4).map(|_| cn(&mut rng)).collect();
        let inv: Vec<C64> = lam.iter().map(|z| C64::new(1.0, 0.0) / z).collect();
        let scaled = cascade(&(&h * diag(&lam)), &(&g * diag(&inv))).unwrap();
        assert!(rel_err(&scaled, &cascade(&h, &g).unwrap()) < 1e-14);
        assert!(cascade(&h, &random_matrix(2, 3, &mut rng)).is_err());
    }
}
