//! System dimensions, random channels and the known protocol matrices.

use std::fmt;
use std::hash::Hasher;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::random::complex_gaussian;
use crate::tensor::{khatri_rao_rows, pseudo_inverse_with_rank, CMatrix, ComplexTensor, C64};

/// Largest RIS size for which [`dense_core`] will materialize the core.
pub const DENSE_CORE_MAX_N: usize = 4;

/// SNR in dB; `+∞` stands for a noiseless run and is spelled `"inf"` in JSON.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Snr(pub f64);

impl Snr {
    pub const NOISELESS: Snr = Snr(f64::INFINITY);

    pub fn db(self) -> f64 {
        self.0
    }

    /// Linear power ratio; infinite for the noiseless point.
    pub fn linear(self) -> f64 {
        10f64.powf(self.0 / 10.0)
    }

    /// Noise variance producing this SNR for a given mean signal power.
    pub fn noise_variance(self, signal_power: f64) -> f64 {
        if self.0.is_infinite() && self.0 > 0.0 {
            0.0
        } else {
            signal_power / self.linear()
        }
    }

    pub fn is_noiseless(self) -> bool {
        self.0 == f64::INFINITY
    }
}

impl fmt::Display for Snr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_noiseless() {
            f.write_str("inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl std::str::FromStr for Snr {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("inf") || s.eq_ignore_ascii_case("+inf") {
            return Ok(Snr::NOISELESS);
        }
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(Snr)
            .ok_or_else(|| format!("invalid SNR value {s:?}"))
    }
}

impl Serialize for Snr {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        if self.is_noiseless() {
            serializer.serialize_str("inf")
        } else {
            serializer.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Snr {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Num(v) => Ok(Snr(v)),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

fn default_snr_grid() -> Vec<Snr> {
    (0..=6).map(|i| Snr(5.0 * i as f64)).collect()
}

fn default_tals_tol() -> f64 {
    1e-6
}

fn default_tals_max_iters() -> usize {
    1000
}

fn default_mc_runs() -> usize {
    1000
}

/// Dimensions of the closed-loop link plus the Monte Carlo and solver knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    /// BS antennas (M).
    #[serde(rename = "M")]
    pub bs_antennas: usize,
    /// UT antennas (L).
    #[serde(rename = "L")]
    pub ut_antennas: usize,
    /// RIS elements (N).
    #[serde(rename = "N")]
    pub ris_elements: usize,
    /// Pilot length in time slots per block (T).
    #[serde(rename = "T")]
    pub pilot_len: usize,
    /// Number of blocks / RIS configurations (K).
    #[serde(rename = "K")]
    pub blocks: usize,
    /// Number of coded retransmissions per block (P).
    #[serde(rename = "P")]
    pub code_len: usize,
    #[serde(default = "default_snr_grid")]
    pub snr_db_grid: Vec<Snr>,
    #[serde(default = "default_mc_runs")]
    pub mc_runs: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_tals_tol")]
    pub tals_tol: f64,
    #[serde(default = "default_tals_max_iters")]
    pub tals_max_iters: usize,
}

impl SystemConfig {
    /// Configuration with the given `{M, L, N, T, K, P}` and default knobs.
    pub fn with_dims(m: usize, l: usize, n: usize, t: usize, k: usize, p: usize) -> Self {
        Self {
            bs_antennas: m,
            ut_antennas: l,
            ris_elements: n,
            pilot_len: t,
            blocks: k,
            code_len: p,
            snr_db_grid: default_snr_grid(),
            mc_runs: default_mc_runs(),
            master_seed: 0,
            tals_tol: default_tals_tol(),
            tals_max_iters: default_tals_max_iters(),
        }
    }

    /// `{8, 4, 16, 16, 64, 8}`.
    pub fn paper_scale() -> Self {
        Self::with_dims(8, 4, 16, 16, 64, 8)
    }

    /// `{4, 2, 4, 4, 16, 2}`, small enough for quick Monte Carlo campaigns.
    pub fn desk_scale() -> Self {
        Self::with_dims(4, 2, 4, 4, 16, 2)
    }

    pub fn validate(self) -> Result<Self> {
        let violations = self.violations();
        if violations.is_empty() {
            Ok(self)
        } else {
            Err(Error::Config(violations))
        }
    }

    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for (name, value) in [
            ("M", self.bs_antennas),
            ("L", self.ut_antennas),
            ("N", self.ris_elements),
            ("T", self.pilot_len),
            ("K", self.blocks),
            ("P", self.code_len),
        ] {
            if value == 0 {
                out.push(Violation::NonPositive(name));
            }
        }
        if self.mc_runs == 0 {
            out.push(Violation::NoRuns);
        }
        if self.tals_tol.is_nan() || self.tals_tol < 0.0 || self.tals_max_iters == 0 {
            out.push(Violation::Solver);
        }
        let (m, l, n, t, k, p) = (
            self.bs_antennas,
            self.ut_antennas,
            self.ris_elements,
            self.pilot_len,
            self.blocks,
            self.code_len,
        );
        if t < m {
            out.push(Violation::PilotShorterThanBsArray);
        }
        if p < l {
            out.push(Violation::CodeShorterThanUtArray);
        }
        if l * k * m < n {
            out.push(Violation::RisFactorRank);
        }
        if k * m * m < n * n {
            out.push(Violation::CouplingFactorRank);
        }
        out
    }
}

/// A single failed configuration constraint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    NonPositive(&'static str),
    NoRuns,
    Solver,
    /// T ≥ M
    PilotShorterThanBsArray,
    /// P ≥ L
    CodeShorterThanUtArray,
    /// L·K·M ≥ N
    RisFactorRank,
    /// K·M² ≥ N²
    CouplingFactorRank,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonPositive(name) => write!(f, "{name} > 0 violated"),
            Violation::NoRuns => f.write_str("mc_runs ≥ 1 violated"),
            Violation::Solver => f.write_str("tals_tol ≥ 0 and tals_max_iters ≥ 1 violated"),
            Violation::PilotShorterThanBsArray => f.write_str("T ≥ M violated"),
            Violation::CodeShorterThanUtArray => f.write_str("P ≥ L violated"),
            Violation::RisFactorRank => f.write_str("L·K·M ≥ N violated"),
            Violation::CouplingFactorRank => f.write_str("K·M² ≥ N² violated"),
        }
    }
}

/// The four non-reciprocal channel matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSet {
    /// BS→RIS downlink, M×N.
    pub h_d: CMatrix,
    /// RIS→BS uplink, M×N.
    pub h_u: CMatrix,
    /// RIS→UT downlink, L×N.
    pub g_d: CMatrix,
    /// UT→RIS uplink, L×N.
    pub g_u: CMatrix,
}

impl ChannelSet {
    /// Independent Rayleigh draws with CN(0,1) entries, in the order
    /// `H_d, H_u, G_d, G_u`.
    pub fn generate<R: Rng + ?Sized>(cfg: &SystemConfig, rng: &mut R) -> Self {
        let (m, l, n) = (cfg.bs_antennas, cfg.ut_antennas, cfg.ris_elements);
        let h_d = complex_gaussian(m, n, 1.0, rng);
        let h_u = complex_gaussian(m, n, 1.0, rng);
        let g_d = complex_gaussian(l, n, 1.0, rng);
        let g_u = complex_gaussian(l, n, 1.0, rng);
        Self { h_d, h_u, g_d, g_u }
    }

    /// `G = G_dᵀ ⋄ G_uᵀ`, N²×L.
    pub fn coupling(&self) -> CMatrix {
        crate::tensor::khatri_rao_cols(&self.g_d.transpose(), &self.g_u.transpose())
            .expect("G_d and G_u share the UT dimension")
    }

    /// FNV-1a over the raw bits of every entry; used to log paired realizations.
    pub fn checksum(&self) -> u64 {
        let mut hasher = Fnv1a::default();
        for m in [&self.h_d, &self.h_u, &self.g_d, &self.g_u] {
            for z in m.iter() {
                hasher.write_u64(z.re.to_bits());
                hasher.write_u64(z.im.to_bits());
            }
        }
        hasher.finish()
    }
}

struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }
}

impl Hasher for Fnv1a {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
}

/// `F[a, b] = exp(−2πi·a·b / size)` for the requested leading block.
fn dft_block(size: usize, rows: usize, cols: usize) -> CMatrix {
    CMatrix::from_fn(rows, cols, |a, b| {
        let phase = -2.0 * std::f64::consts::PI * ((a * b) % size) as f64 / size as f64;
        C64::from_polar(1.0, phase)
    })
}

/// Sylvester Hadamard matrix of the smallest power-of-two order ≥ `min_order`.
fn sylvester_hadamard(min_order: usize) -> Vec<Vec<f64>> {
    let order = min_order.max(1).next_power_of_two();
    let mut h = vec![vec![1.0]];
    while h.len() < order {
        let n = h.len();
        let mut next = vec![vec![0.0; 2 * n]; 2 * n];
        for i in 0..n {
            for j in 0..n {
                next[i][j] = h[i][j];
                next[i][j + n] = h[i][j];
                next[i + n][j] = h[i][j];
                next[i + n][j + n] = -h[i][j];
            }
        }
        h = next;
    }
    h
}

/// BS pilot: first M rows of the T-point DFT scaled by 1/√T, so `X·Xᴴ = I_M`.
pub fn gen_pilot(cfg: &SystemConfig) -> Result<CMatrix> {
    let (m, t) = (cfg.bs_antennas, cfg.pilot_len);
    if t < m {
        return Err(Error::Config(vec![Violation::PilotShorterThanBsArray]));
    }
    Ok(dft_block(t, m, t) / C64::new((t as f64).sqrt(), 0.0))
}

/// UT pilot for the FDD uplink benchmark: first L rows of the T-point DFT,
/// scaled by 1/√T.
pub fn gen_ut_pilot(cfg: &SystemConfig) -> Result<CMatrix> {
    let (l, t) = (cfg.ut_antennas, cfg.pilot_len);
    if t < l {
        return Err(Error::Shape(format!(
            "the FDD uplink pilot needs T ≥ L (T = {t}, L = {l})"
        )));
    }
    Ok(dft_block(t, l, t) / C64::new((t as f64).sqrt(), 0.0))
}

/// Code matrix: first L columns of the P-point DFT (unscaled).
pub fn gen_coding(cfg: &SystemConfig) -> Result<CMatrix> {
    let (l, p) = (cfg.ut_antennas, cfg.code_len);
    if p < l {
        return Err(Error::Config(vec![Violation::CodeShorterThanUtArray]));
    }
    Ok(dft_block(p, p, l))
}

/// RIS schedules: DFT downlink, truncated Sylvester-Hadamard uplink, and the
/// combined schedule `S(k,:) = S_d(k,:) ⊗ S_u(k,:)`.
pub fn gen_ris_schedules(cfg: &SystemConfig) -> Result<(CMatrix, CMatrix, CMatrix)> {
    let (n, k) = (cfg.ris_elements, cfg.blocks);
    if k < n {
        return Err(Error::Shape(format!("RIS schedules need K ≥ N (K = {k}, N = {n})")));
    }
    let s_d = dft_block(k, k, n);
    let hadamard = sylvester_hadamard(k.max(n));
    let s_u = CMatrix::from_fn(k, n, |row, col| C64::new(hadamard[row][col], 0.0));
    let s = khatri_rao_rows(&s_d, &s_u)?;
    Ok((s_d, s_u, s))
}

/// Every training matrix known to both ends of the link.
#[derive(Clone, Debug)]
pub struct ProtocolMatrices {
    /// M×T BS pilot.
    pub x: CMatrix,
    /// P×L UT code.
    pub c: CMatrix,
    /// K×N downlink RIS schedule.
    pub s_d: CMatrix,
    /// K×N uplink RIS schedule.
    pub s_u: CMatrix,
    /// K×N² combined schedule.
    pub s: CMatrix,
}

impl ProtocolMatrices {
    pub fn generate(cfg: &SystemConfig) -> Result<Self> {
        let x = gen_pilot(cfg)?;
        let c = gen_coding(cfg)?;
        let (s_d, s_u, s) = gen_ris_schedules(cfg)?;
        Ok(Self { x, c, s_d, s_u, s })
    }

    /// Effective rank of the combined schedule `S`.
    pub fn schedule_rank(&self) -> usize {
        pseudo_inverse_with_rank(&self.s).rank
    }
}

/// Index map of the selection core: the only nonzero entries of
/// `R ∈ C^{N×N×N²×N²}` sit at `(n_u, n_d, r, r)` with `r = n_u + n_d·N`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CoreStructure {
    pub n: usize,
}

impl CoreStructure {
    pub fn new(n: usize) -> Self {
        Self { n }
    }

    /// Combined component index for an (uplink element, downlink element) pair.
    pub fn component(&self, n_u: usize, n_d: usize) -> usize {
        n_u + n_d * self.n
    }

    /// Inverse of [`CoreStructure::component`].
    pub fn pair(&self, r: usize) -> (usize, usize) {
        (r % self.n, r / self.n)
    }

    pub fn components(&self) -> usize {
        self.n * self.n
    }
}

/// Dense `R` for oracle tests, refused above [`DENSE_CORE_MAX_N`].
pub fn dense_core(n: usize) -> Result<ComplexTensor> {
    if n == 0 || n > DENSE_CORE_MAX_N {
        return Err(Error::Shape(format!(
            "dense core materialization is limited to 1 ≤ N ≤ {DENSE_CORE_MAX_N}, got {n}"
        )));
    }
    let core = CoreStructure::new(n);
    let n2 = n * n;
    let mut r = ComplexTensor::zeros(&[n, n, n2, n2]);
    for n_d in 0..n {
        for n_u in 0..n {
            let j = core.component(n_u, n_d);
            r.set(&[n_u, n_d, j, j], C64::new(1.0, 0.0));
        }
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::rng_from_seed;
    use crate::tensor::{khatri_rao_cols, pseudo_inverse};
    use crate::testutil::rel_err;

    #[test]
    fn validate_accepts_paper_scale() {
        assert!(SystemConfig::paper_scale().validate().is_ok());
        assert!(SystemConfig::desk_scale().validate().is_ok());
    }

    #[test]
    fn validate_names_each_violation() {
        let short_pilot = SystemConfig::with_dims(8, 4, 16, 4, 64, 8);
        assert_eq!(short_pilot.violations(), vec![Violation::PilotShorterThanBsArray]);
        assert_eq!(Violation::PilotShorterThanBsArray.to_string(), "T ≥ M violated");

        let tiny = SystemConfig::with_dims(2, 2, 4, 2, 2, 2);
        assert_eq!(tiny.violations(), vec![Violation::CouplingFactorRank]);
        assert_eq!(Violation::CouplingFactorRank.to_string(), "K·M² ≥ N² violated");

        let mut zero = SystemConfig::with_dims(0, 4, 16, 16, 64, 8);
        zero.mc_runs = 0;
        let v = zero.violations();
        assert!(v.contains(&Violation::NonPositive("M")));
        assert!(v.contains(&Violation::NoRuns));
        match zero.validate() {
            Err(Error::Config(list)) => assert_eq!(list, v),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn config_json_uses_symbol_names() {
        let json = r#"{"M":8,"L":4,"N":16,"T":16,"K":64,"P":8,"snr_db_grid":[0,10,"inf"]}"#;
        let cfg: SystemConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.ris_elements, 16);
        assert_eq!(cfg.snr_db_grid, vec![Snr(0.0), Snr(10.0), Snr::NOISELESS]);
        assert_eq!(cfg.tals_max_iters, 1000);
        assert_eq!(cfg.tals_tol, 1e-6);
        let back: SystemConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn channel_statistics() {
        let cfg = SystemConfig::with_dims(1, 1, 25_000, 1, 1, 1);
        let ch = ChannelSet::generate(&cfg, &mut rng_from_seed(3));
        let all: Vec<C64> = [&ch.h_d, &ch.h_u, &ch.g_d, &ch.g_u]
            .iter()
            .flat_map(|m| m.iter().cloned())
            .collect();
        assert_eq!(all.len(), 100_000);
        let mean = all.iter().sum::<C64>() / all.len() as f64;
        let var = all.iter().map(|z| (z - mean).norm_sqr()).sum::<f64>() / all.len() as f64;
        assert!(mean.norm() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "variance {var}");
    }

    #[test]
    fn channels_are_seed_deterministic_and_non_reciprocal() {
        let cfg = SystemConfig::paper_scale();
        let a = ChannelSet::generate(&cfg, &mut rng_from_seed(11));
        let b = ChannelSet::generate(&cfg, &mut rng_from_seed(11));
        assert_eq!(a, b);
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.h_d, a.h_u);
        assert_ne!(a.g_d, a.g_u);
        let c = ChannelSet::generate(&cfg, &mut rng_from_seed(12));
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn pilot_design() {
        let x = gen_pilot(&SystemConfig::with_dims(2, 1, 1, 2, 1, 1)).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let expected = CMatrix::from_row_slice(
            2,
            2,
            &[C64::new(r, 0.0), C64::new(r, 0.0), C64::new(r, 0.0), C64::new(-r, 0.0)],
        );
        assert!(rel_err(&x, &expected) < 1e-15);

        let cfg = SystemConfig::paper_scale();
        let x = gen_pilot(&cfg).unwrap();
        assert!(rel_err(&(&x * x.adjoint()), &CMatrix::identity(8, 8)) < 1e-12);
        assert!(x.iter().all(|z| (z.norm() - 0.25).abs() < 1e-15));
        assert!(gen_pilot(&SystemConfig::with_dims(8, 4, 16, 4, 64, 8)).is_err());
    }

    #[test]
    fn coding_design() {
        let square = gen_coding(&SystemConfig::with_dims(1, 4, 1, 1, 1, 4)).unwrap();
        assert!(
            rel_err(
                &(square.adjoint() * &square),
                &(CMatrix::identity(4, 4) * C64::new(4.0, 0.0))
            ) < 1e-12
        );

        let c = gen_coding(&SystemConfig::paper_scale()).unwrap();
        assert_eq!(c.shape(), (8, 4));
        let gram = c.adjoint() * &c;
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!(gram[(i, j)].norm() < 1e-12);
                }
            }
        }
        let ct = c.transpose();
        assert!(rel_err(&(&ct * pseudo_inverse(&ct)), &CMatrix::identity(4, 4)) < 1e-10);
        assert!(gen_coding(&SystemConfig::with_dims(1, 4, 1, 1, 1, 3)).is_err());
    }

    #[test]
    fn ris_schedule_design() {
        let (s_d, s_u, s) = gen_ris_schedules(&SystemConfig::paper_scale()).unwrap();
        assert_eq!(s.shape(), (64, 256));
        assert!(s_u
            .iter()
            .all(|z| *z == C64::new(1.0, 0.0) || *z == C64::new(-1.0, 0.0)));
        assert!(s_d.iter().all(|z| (z.norm() - 1.0).abs() < 1e-14));
        assert_ne!(s_d, s_u);
        let first = khatri_rao_rows(&s_d.rows(0, 1).into_owned(), &s_u.rows(0, 1).into_owned()).unwrap();
        assert_eq!(s.rows(0, 1).into_owned(), first);
        assert!(gen_ris_schedules(&SystemConfig::with_dims(1, 1, 8, 1, 4, 1)).is_err());

        // Non-power-of-two K truncates the next Sylvester matrix.
        let (_, s_u, _) = gen_ris_schedules(&SystemConfig::with_dims(1, 1, 3, 1, 5, 1)).unwrap();
        assert_eq!(s_u.shape(), (5, 3));
        assert!(s_u.iter().all(|z| z.norm() == 1.0));
    }

    #[test]
    fn desk_schedule_has_full_column_rank() {
        let proto = ProtocolMatrices::generate(&SystemConfig::desk_scale()).unwrap();
        assert_eq!(proto.s.shape(), (16, 16));
        // Reported rather than assumed: the design is allowed to be rank deficient.
        assert!(proto.schedule_rank() <= 16);
    }

    #[test]
    fn dense_core_examples() {
        let one = dense_core(1).unwrap();
        assert_eq!(one.shape(), &[1, 1, 1, 1]);
        assert_eq!(one.data(), &[C64::new(1.0, 0.0)]);

        let two = dense_core(2).unwrap();
        assert_eq!(two.data().len(), 64);
        let ones: Vec<_> = (0..64).filter(|&i| two.data()[i] != C64::new(0.0, 0.0)).collect();
        assert_eq!(ones.len(), 4);
        for n2 in 0..2 {
            for n1 in 0..2 {
                let r = n1 + 2 * n2;
                assert_eq!(two.get(&[n1, n2, r, r]), C64::new(1.0, 0.0));
            }
        }
        let eye = CMatrix::identity(4, 4);
        let kr = khatri_rao_cols(&eye, &eye).unwrap();
        assert_eq!(two.unfold_12_34().unwrap(), kr.transpose());
        assert!(dense_core(5).is_err());
    }

    #[test]
    fn dense_core_agrees_with_index_map() {
        for n in 1..=3 {
            let core = CoreStructure::new(n);
            let dense = dense_core(n).unwrap();
            let n2 = n * n;
            for n1 in 0..n {
                for n2i in 0..n {
                    for j in 0..n2 {
                        for jp in 0..n2 {
                            let hit = j == jp && j == core.component(n1, n2i);
                            let expected = if hit { 1.0 } else { 0.0 };
                            assert_eq!(dense.get(&[n1, n2i, j, jp]), C64::new(expected, 0.0));
                        }
                    }
                }
            }
            for r in 0..n2 {
                let (u, d) = core.pair(r);
                assert_eq!(core.component(u, d), r);
            }
        }
    }
}
