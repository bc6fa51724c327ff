//! Forward model of the three-phase closed-loop protocol.
//!
//! Phase 1: the BS sends the pilot `X` in each of `K` blocks while the RIS
//! applies `s_d[k]`. Phase 2: the UT repeats every received block `P` times,
//! scaling antenna `l` by `C(p, l)`. Phase 3: the coded blocks return through
//! the RIS under `s_u[k]`. Noise is added at the UT and at the BS.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::random::complex_gaussian;
use crate::system::{ChannelSet, ProtocolMatrices, Snr};
use crate::tensor::{frobenius_sqr, pseudo_inverse, CMatrix, ComplexTensor, C64};

/// Largest tolerated entry of `X·Xᴴ − I` in [`pilot_matched_filter`].
pub const PILOT_ORTHONORMALITY_TOL: f64 = 1e-10;

/// Noise variances actually injected at the UT (downlink) and BS (uplink).
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct NoisePowers {
    pub dl: f64,
    pub ul: f64,
}

/// Matched-filtered closed-loop observation `Q`, shaped `(M, M, K, L)`.
#[derive(Clone, Debug)]
pub struct ClosedLoopObservation {
    pub q: ComplexTensor,
    pub snr: Snr,
    pub noise_powers: NoisePowers,
    pub noiseless_q: Option<ComplexTensor>,
}

/// `A·diag(s)`.
fn scale_columns(a: &CMatrix, s: &[C64]) -> CMatrix {
    let mut out = a.clone();
    for (mut col, &sc) in out.column_iter_mut().zip(s) {
        col *= sc;
    }
    out
}

fn check_len(what: &str, got: usize, expected: usize) -> Result<()> {
    if got != expected {
        return Err(Error::Shape(format!("{what}: expected length {expected}, got {got}")));
    }
    Ok(())
}

/// Downlink block received at the UT: `G_d·diag(s_d[k])·H_dᵀ·X + V_d[k]`.
pub fn dl_block(ch: &ChannelSet, x: &CMatrix, s_d_k: &[C64], noise: Option<&CMatrix>) -> Result<CMatrix> {
    check_len("downlink RIS response", s_d_k.len(), ch.h_d.ncols())?;
    if x.nrows() != ch.h_d.nrows() {
        return Err(Error::Shape(format!(
            "pilot has {} rows for {} BS antennas",
            x.nrows(),
            ch.h_d.nrows()
        )));
    }
    let mut y = scale_columns(&ch.g_d, s_d_k) * (ch.h_d.transpose() * x);
    if let Some(v) = noise {
        if v.shape() != y.shape() {
            return Err(Error::Shape("downlink noise block shape".into()));
        }
        y += v;
    }
    Ok(y)
}

/// UT coding for retransmission `p` (zero-based): row `l` scaled by `C(p, l)`.
pub fn ut_encode(y_k: &CMatrix, c: &CMatrix, p: usize) -> Result<CMatrix> {
    if p >= c.nrows() {
        return Err(Error::Shape(format!(
            "retransmission index {p} out of range for {} code rows",
            c.nrows()
        )));
    }
    check_len("code row", c.ncols(), y_k.nrows())?;
    let mut out = y_k.clone();
    for (l, mut row) in out.row_iter_mut().enumerate() {
        row *= c[(p, l)];
    }
    Ok(out)
}

/// Uplink block received at the BS: `H_u·diag(s_u[k])·G_uᵀ·Ȳ[k,p] + V_u[k,p]`.
pub fn ul_block(ch: &ChannelSet, s_u_k: &[C64], y_kp: &CMatrix, noise: Option<&CMatrix>) -> Result<CMatrix> {
    check_len("uplink RIS response", s_u_k.len(), ch.h_u.ncols())?;
    if y_kp.nrows() != ch.g_u.nrows() {
        return Err(Error::Shape("coded block rows must match UT antennas".into()));
    }
    let mut q = scale_columns(&ch.h_u, s_u_k) * (ch.g_u.transpose() * y_kp);
    if let Some(v) = noise {
        if v.shape() != q.shape() {
            return Err(Error::Shape("uplink noise block shape".into()));
        }
        q += v;
    }
    Ok(q)
}

/// Largest entry of `|X·Xᴴ − I|`.
pub fn pilot_orthonormality_error(x: &CMatrix) -> f64 {
    let gram = x * x.adjoint();
    let id = CMatrix::identity(x.nrows(), x.nrows());
    (gram - id).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// `Q[k,p] = Q̄[k,p]·Xᴴ`; rejects pilots that are not row-orthonormal.
pub fn pilot_matched_filter(q_bar: &CMatrix, x: &CMatrix) -> Result<CMatrix> {
    let dev = pilot_orthonormality_error(x);
    if dev > PILOT_ORTHONORMALITY_TOL {
        return Err(Error::NonOrthonormalPilot(dev));
    }
    if q_bar.ncols() != x.ncols() {
        return Err(Error::Shape("received block and pilot lengths differ".into()));
    }
    Ok(q_bar * x.adjoint())
}

/// Stack the filtered blocks `filtered[k][p]` (each M×M) into the M²K×P matrix,
/// strip the code with `(Cᵀ)†` and reshape to the order-4 tensor `(M, M, K, L)`.
pub fn assemble_observation(filtered: &[Vec<CMatrix>], c: &CMatrix) -> Result<ComplexTensor> {
    let (p_len, l) = c.shape();
    if p_len < l {
        return Err(Error::Config(vec![crate::system::Violation::CodeShorterThanUtArray]));
    }
    let k_len = filtered.len();
    let m = filtered
        .first()
        .and_then(|row| row.first())
        .map(|b| b.nrows())
        .ok_or_else(|| Error::Shape("no filtered blocks".into()))?;
    let m2 = m * m;
    let mut stacked = CMatrix::zeros(m2 * k_len, p_len);
    for (k, row) in filtered.iter().enumerate() {
        if row.len() != p_len {
            return Err(Error::Shape(format!(
                "block {k} has {} retransmissions, code has {p_len}",
                row.len()
            )));
        }
        for (p, block) in row.iter().enumerate() {
            if block.shape() != (m, m) {
                return Err(Error::Shape(format!("block ({k},{p}) is not {m}x{m}")));
            }
            stacked.view_mut((k * m2, p), (m2, 1)).copy_from_slice(block.as_slice());
        }
    }
    let decoded = stacked * pseudo_inverse(&c.transpose());
    ComplexTensor::from_vec(&[m, m, k_len, l], decoded.as_slice().to_vec())
}

fn noiseless_dl_blocks(ch: &ChannelSet, proto: &ProtocolMatrices) -> Result<Vec<CMatrix>> {
    (0..proto.s_d.nrows())
        .map(|k| {
            let s: Vec<C64> = proto.s_d.row(k).iter().cloned().collect();
            dl_block(ch, &proto.x, &s, None)
        })
        .collect()
}

/// Noise variances giving the requested SNR at both receivers, measured
/// against the noiseless downlink blocks at the UT and the noiseless uplink
/// blocks at the BS.
pub fn calibrate_noise(ch: &ChannelSet, proto: &ProtocolMatrices, snr: Snr) -> Result<NoisePowers> {
    let dl_blocks = noiseless_dl_blocks(ch, proto)?;
    let (mut dl_energy, mut dl_count) = (0.0, 0usize);
    let (mut ul_energy, mut ul_count) = (0.0, 0usize);
    for (k, y) in dl_blocks.iter().enumerate() {
        dl_energy += frobenius_sqr(y);
        dl_count += y.len();
        let s_u: Vec<C64> = proto.s_u.row(k).iter().cloned().collect();
        for p in 0..proto.c.nrows() {
            let q = ul_block(ch, &s_u, &ut_encode(y, &proto.c, p)?, None)?;
            ul_energy += frobenius_sqr(&q);
            ul_count += q.len();
        }
    }
    Ok(NoisePowers {
        dl: snr.noise_variance(dl_energy / dl_count as f64),
        ul: snr.noise_variance(ul_energy / ul_count as f64),
    })
}

/// Run the whole protocol once and return the matched-filtered observation.
///
/// Noise is drawn block by block (`V_d[k]`, then `V_u[k,1..P]`) even when its
/// variance is zero, so the random stream does not depend on the SNR.
pub fn simulate_closed_loop<R: Rng + ?Sized>(
    ch: &ChannelSet,
    proto: &ProtocolMatrices,
    snr: Snr,
    rng: &mut R,
    keep_noiseless: bool,
) -> Result<ClosedLoopObservation> {
    let noise_powers = calibrate_noise(ch, proto, snr)?;
    let (m, l, t) = (ch.h_d.nrows(), ch.g_d.nrows(), proto.x.ncols());
    let k_len = proto.s_d.nrows();
    let p_len = proto.c.nrows();

    let mut noisy = Vec::with_capacity(k_len);
    let mut clean = Vec::with_capacity(if keep_noiseless { k_len } else { 0 });
    for k in 0..k_len {
        let s_d: Vec<C64> = proto.s_d.row(k).iter().cloned().collect();
        let s_u: Vec<C64> = proto.s_u.row(k).iter().cloned().collect();
        let v_d = complex_gaussian(l, t, noise_powers.dl, rng);
        let y_clean = dl_block(ch, &proto.x, &s_d, None)?;
        let y = &y_clean + &v_d;
        let mut noisy_row = Vec::with_capacity(p_len);
        let mut clean_row = Vec::new();
        for p in 0..p_len {
            let v_u = complex_gaussian(m, t, noise_powers.ul, rng);
            let q_bar = ul_block(ch, &s_u, &ut_encode(&y, &proto.c, p)?, Some(&v_u))?;
            noisy_row.push(pilot_matched_filter(&q_bar, &proto.x)?);
            if keep_noiseless {
                let q_clean = ul_block(ch, &s_u, &ut_encode(&y_clean, &proto.c, p)?, None)?;
                clean_row.push(pilot_matched_filter(&q_clean, &proto.x)?);
            }
        }
        noisy.push(noisy_row);
        if keep_noiseless {
            clean.push(clean_row);
        }
    }
    let q = assemble_observation(&noisy, &proto.c)?;
    let noiseless_q = if keep_noiseless {
        Some(assemble_observation(&clean, &proto.c)?)
    } else {
        None
    };
    Ok(ClosedLoopObservation {
        q,
        snr,
        noise_powers,
        noiseless_q,
    })
}

/// Write a tensor as: order (u64), extents (u64 each), then interleaved
/// re/im f64 values, all little-endian.
pub fn write_tensor<W: Write>(mut w: W, tensor: &ComplexTensor) -> Result<()> {
    w.write_all(&(tensor.order() as u64).to_le_bytes())?;
    for &d in tensor.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for z in tensor.data() {
        w.write_all(&z.re.to_le_bytes())?;
        w.write_all(&z.im.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<ComplexTensor> {
    let mut word = [0u8; 8];
    r.read_exact(&mut word)?;
    let order = u64::from_le_bytes(word) as usize;
    if order > 16 {
        return Err(Error::Shape(format!("implausible tensor order {order}")));
    }
    let mut shape = Vec::with_capacity(order);
    for _ in 0..order {
        r.read_exact(&mut word)?;
        shape.push(u64::from_le_bytes(word) as usize);
    }
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        r.read_exact(&mut word)?;
        let re = f64::from_le_bytes(word);
        r.read_exact(&mut word)?;
        data.push(C64::new(re, f64::from_le_bytes(word)));
    }
    ComplexTensor::from_vec(&shape, data)
}
