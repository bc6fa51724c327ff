//! FDD benchmarks: per-direction pilot training, LS or LS-KRF at the
//! receiving end, then feedback of the estimate to the other end.
//!
//! Downlink: the BS sends `X`, the UT filters with `Xᴴ` and stacks
//! `vec(G_d·diag(s_d[k])·H_dᵀ) = (H_d ⋄ G_d)·s_d[k]` over the blocks. The
//! uplink mirrors it with a UT pilot and `(G_u ⋄ H_u)·s_u[k]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::random::complex_gaussian;
use crate::sim::{calibrate_noise, dl_block, pilot_matched_filter};
use crate::system::{ChannelSet, ProtocolMatrices, Snr};
use crate::tensor::{frobenius_sqr, pseudo_inverse, CMatrix, C64};

use super::{khatri_rao_factorize, KhatriRaoFactors};

/// Downlink training observed at the UT: column `k` is `vec(Ȳ[k]·Xᴴ)` (LM×K).
pub fn simulate_fdd_dl<R: Rng + ?Sized>(
    ch: &ChannelSet,
    proto: &ProtocolMatrices,
    snr: Snr,
    rng: &mut R,
) -> Result<CMatrix> {
    let var = calibrate_noise(ch, proto, snr)?.dl;
    let (l, m, t) = (ch.g_d.nrows(), ch.h_d.nrows(), proto.x.ncols());
    let k_len = proto.s_d.nrows();
    let mut out = CMatrix::zeros(l * m, k_len);
    for k in 0..k_len {
        let s: Vec<C64> = proto.s_d.row(k).iter().cloned().collect();
        let v = complex_gaussian(l, t, var, rng);
        let filtered = pilot_matched_filter(&dl_block(ch, &proto.x, &s, Some(&v))?, &proto.x)?;
        out.column_mut(k).copy_from_slice(filtered.as_slice());
    }
    Ok(out)
}

/// Uplink training observed at the BS with UT pilot `x_ut` (L×T): column `k`
/// is `vec(Y_u[k]·x_utᴴ)` (ML×K). Noise is calibrated on the noiseless
/// uplink blocks.
pub fn simulate_fdd_ul<R: Rng + ?Sized>(
    ch: &ChannelSet,
    x_ut: &CMatrix,
    s_u: &CMatrix,
    snr: Snr,
    rng: &mut R,
) -> Result<CMatrix> {
    let (m, l) = (ch.h_u.nrows(), ch.g_u.nrows());
    if x_ut.nrows() != l {
        return Err(Error::Shape("UT pilot rows must equal UT antennas".into()));
    }
    let k_len = s_u.nrows();
    let t = x_ut.ncols();
    let clean: Vec<CMatrix> = (0..k_len)
        .map(|k| {
            let mut h = ch.h_u.clone();
            for (mut col, &sc) in h.column_iter_mut().zip(s_u.row(k).iter()) {
                col *= sc;
            }
            h * ch.g_u.transpose() * x_ut
        })
        .collect();
    let power = clean.iter().map(frobenius_sqr).sum::<f64>() / (k_len * m * t) as f64;
    let var = snr.noise_variance(power);
    let mut out = CMatrix::zeros(m * l, k_len);
    for (k, y) in clean.iter().enumerate() {
        let v = complex_gaussian(m, t, var, rng);
        let filtered = pilot_matched_filter(&(y + v), x_ut)?;
        out.column_mut(k).copy_from_slice(filtered.as_slice());
    }
    Ok(out)
}

/// Matrix LS estimate of the cascade: `Θ̂ = Y·(Sᵀ)†` for the K×N schedule.
pub fn fdd_ls(observations: &CMatrix, schedule: &CMatrix) -> Result<CMatrix> {
    let (k, n) = schedule.shape();
    if k < n {
        return Err(Error::Shape(format!(
            "LS cascade estimate needs K ≥ N (K = {k}, N = {n})"
        )));
    }
    if observations.ncols() != k {
        return Err(Error::Shape(format!(
            "{} observation columns for {k} blocks",
            observations.ncols()
        )));
    }
    Ok(observations * pseudo_inverse(&schedule.transpose()))
}

/// Downlink LS, `Θ̂_d ≈ H_d ⋄ G_d`.
pub fn fdd_ls_dl(observations: &CMatrix, s_d: &CMatrix) -> Result<CMatrix> {
    fdd_ls(observations, s_d)
}

/// Uplink LS, `Θ̂_u ≈ G_u ⋄ H_u`.
pub fn fdd_ls_ul(observations: &CMatrix, s_u: &CMatrix) -> Result<CMatrix> {
    fdd_ls(observations, s_u)
}

/// LS-KRF: split every column of `Θ̂ ≈ A ⋄ B` (A has `rows_a` rows) by a
/// rank-one approximation. `khatri_rao_cols(a, b)` is the denoised cascade.
pub fn fdd_lskrf(theta: &CMatrix, rows_a: usize, rows_b: usize) -> Result<KhatriRaoFactors> {
    khatri_rao_factorize(theta, rows_a, rows_b)
}

/// How an estimate reaches the other end of the link.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackMode {
    /// Ideal, error-free feedback.
    NoiseFree,
    /// AWGN at the same SNR as the pilot reception.
    Awgn,
}

impl FeedbackMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FeedbackMode::NoiseFree => "noise_free",
            FeedbackMode::Awgn => "awgn",
        }
    }
}

impl std::str::FromStr for FeedbackMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "noise_free" => Ok(FeedbackMode::NoiseFree),
            "awgn" => Ok(FeedbackMode::Awgn),
            other => Err(format!("unknown feedback mode {other:?}")),
        }
    }
}

/// Pass an estimate through the feedback link. AWGN noise has variance
/// `mean|Θ̂|² / 10^(snr/10)`.
pub fn feedback_channel<R: Rng + ?Sized>(theta: &CMatrix, mode: FeedbackMode, snr: Snr, rng: &mut R) -> CMatrix {
    match mode {
        FeedbackMode::NoiseFree => theta.clone(),
        FeedbackMode::Awgn => {
            let power = if theta.is_empty() {
                0.0
            } else {
                frobenius_sqr(theta) / theta.len() as f64
            };
            let var = snr.noise_variance(power);
            theta + complex_gaussian(theta.nrows(), theta.ncols(), var, rng)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{cascade_dl, cascade_ul, nmse};
    use crate::random::rng_from_seed;
    use crate::system::{gen_ut_pilot, SystemConfig};
    use crate::tensor::khatri_rao_cols;
    use crate::testutil::{random_matrix, rel_err};

    fn setup(cfg: &SystemConfig, seed: u64) -> (ChannelSet, ProtocolMatrices) {
        (
            ChannelSet::generate(cfg, &mut rng_from_seed(seed)),
            ProtocolMatrices::generate(cfg).unwrap(),
        )
    }

    #[test]
    fn noiseless_ls_is_exact() {
        let cfg = SystemConfig::desk_scale();
        let (ch, proto) = setup(&cfg, 1);
        let y = simulate_fdd_dl(&ch, &proto, Snr::NOISELESS, &mut rng_from_seed(2)).unwrap();
        let theta = fdd_ls_dl(&y, &proto.s_d).unwrap();
        assert!(rel_err(&theta, &cascade_dl(&ch.h_d, &ch.g_d).unwrap()) < 1e-12);

        let x_ut = gen_ut_pilot(&cfg).unwrap();
        let y = simulate_fdd_ul(&ch, &x_ut, &proto.s_u, Snr::NOISELESS, &mut rng_from_seed(3)).unwrap();
        let theta = fdd_ls_ul(&y, &proto.s_u).unwrap();
        assert!(rel_err(&theta, &cascade_ul(&ch.h_u, &ch.g_u).unwrap()) < 1e-12);
    }

    #[test]
    fn noisy_ls_is_worse_than_noiseless() {
        let cfg = SystemConfig::desk_scale();
        let (ch, proto) = setup(&cfg, 4);
        let truth = cascade_dl(&ch.h_d, &ch.g_d).unwrap();
        let y = simulate_fdd_dl(&ch, &proto, Snr(20.0), &mut rng_from_seed(5)).unwrap();
        let noisy = nmse(&truth, &fdd_ls_dl(&y, &proto.s_d).unwrap()).unwrap();
        assert!(noisy > 1e-20);
    }

    #[test]
    fn ls_matches_normal_equations_on_toy() {
        let cfg = SystemConfig::with_dims(2, 2, 2, 2, 4, 2);
        let (ch, proto) = setup(&cfg, 6);
        let y = simulate_fdd_dl(&ch, &proto, Snr(10.0), &mut rng_from_seed(7)).unwrap();
        let theta = fdd_ls_dl(&y, &proto.s_d).unwrap();
        // Θ = Y·conj(S)·(Sᵀ·conj(S))⁻¹ from the normal equations of min ‖Y − Θ·Sᵀ‖.
        let st = proto.s_d.transpose();
        let gram = &st * st.adjoint();
        let oracle = &y * st.adjoint() * gram.try_inverse().unwrap();
        assert!(rel_err(&theta, &oracle) < 1e-10);
        assert!(fdd_ls(&y.columns(0, 1).into_owned(), &proto.s_d.rows(0, 1).into_owned()).is_err());
    }

    #[test]
    fn lskrf_exact_input_and_trivial_case() {
        let mut rng = rng_from_seed(8);
        let h = random_matrix(3, 4, &mut rng);
        let g = random_matrix(2, 4, &mut rng);
        let theta = khatri_rao_cols(&h, &g).unwrap();
        let f = fdd_lskrf(&theta, 3, 2).unwrap();
        assert!(rel_err(&khatri_rao_cols(&f.a, &f.b).unwrap(), &theta) < 1e-10);
        let aligned = crate::estimators::align_scaling(&f.a, &h).unwrap().matrix;
        assert!(rel_err(&aligned, &h) < 1e-10);

        let one = CMatrix::from_element(1, 1, C64::new(1.0, 0.0));
        let f = fdd_lskrf(&one, 1, 1).unwrap();
        assert!((f.a[(0, 0)] * f.b[(0, 0)] - C64::new(1.0, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn lskrf_denoises_the_cascade() {
        let mut rng = rng_from_seed(9);
        let mut wins = 0;
        for _ in 0..100 {
            let h = random_matrix(4, 4, &mut rng);
            let g = random_matrix(2, 4, &mut rng);
            let theta = khatri_rao_cols(&h, &g).unwrap();
            let noisy = &theta + random_matrix(8, 4, &mut rng) * C64::new(0.3, 0.0);
            let f = fdd_lskrf(&noisy, 4, 2).unwrap();
            let denoised = khatri_rao_cols(&f.a, &f.b).unwrap();
            if nmse(&theta, &denoised).unwrap() <= nmse(&theta, &noisy).unwrap() {
                wins += 1;
            }
        }
        assert!(wins >= 95, "rank-one projection helped in only {wins}/100 trials");
    }

    #[test]
    fn feedback_modes() {
        let mut rng = rng_from_seed(10);
        let theta = random_matrix(100, 100, &mut rng);
        assert_eq!(
            feedback_channel(&theta, FeedbackMode::NoiseFree, Snr(0.0), &mut rng),
            theta
        );
        assert_eq!(
            feedback_channel(&theta, FeedbackMode::Awgn, Snr::NOISELESS, &mut rng),
            theta
        );
        let noisy = feedback_channel(&theta, FeedbackMode::Awgn, Snr(10.0), &mut rng);
        let measured = 10.0 * (frobenius_sqr(&theta) / frobenius_sqr(&(noisy - &theta))).log10();
        assert!((measured - 10.0).abs() < 0.3, "{measured}");
        assert_eq!("awgn".parse::<FeedbackMode>().unwrap(), FeedbackMode::Awgn);
        assert!("loud".parse::<FeedbackMode>().is_err());
    }
}
