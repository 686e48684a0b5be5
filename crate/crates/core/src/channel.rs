//! Deterministic spherical-wave LoS channels for the direct, RIS-to-UE and
//! BS-to-RIS links, plus blockage attenuation and the mode-switched
//! effective channel.

use std::f64::consts::PI;
use std::io::{Read, Write};

use num_complex::Complex64;

use crate::error::{dim, invalid, Error, Result};
use crate::geometry::{ArrayGeometry, Position3};
use crate::metrics::RisPhases;

pub type ComplexVector = Vec<Complex64>;

/// Dense row-major complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![Complex64::new(0.0, 0.0); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(dim(format!("{} entries for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from its columns (each of length `rows`).
    pub fn from_columns(columns: &[ComplexVector]) -> Result<Self> {
        let cols = columns.len();
        let rows = columns.first().map_or(0, Vec::len);
        let mut m = Self::zeros(rows, cols);
        for (j, c) in columns.iter().enumerate() {
            if c.len() != rows {
                return Err(dim(format!("column {j} has length {}, expected {rows}", c.len())));
            }
            for (i, &v) in c.iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn column(&self, j: usize) -> ComplexVector {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for ComplexMatrix {
    type Output = Complex64;
    fn index(&self, (i, j): (usize, usize)) -> &Complex64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for ComplexMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Free-space power gain `(lambda / (4 pi d))^2`.
pub fn path_loss(d: f64, lambda: f64) -> Result<f64> {
    if !(d > 0.0) {
        return Err(invalid(format!("distance must be positive, got {d}")));
    }
    if !(lambda > 0.0) {
        return Err(invalid(format!("wavelength must be positive, got {lambda}")));
    }
    let a = lambda / (4.0 * PI * d);
    Ok(a * a)
}

/// Free-space path loss in dB (positive number).
pub fn path_loss_db(d: f64, lambda: f64) -> Result<f64> {
    Ok(-10.0 * path_loss(d, lambda)?.log10())
}

fn los_coefficient(d: f64, lambda: f64) -> Result<Complex64> {
    let amp = path_loss(d, lambda)?.sqrt();
    Ok(Complex64::from_polar(amp, -2.0 * PI * d / lambda))
}

/// Per-element LoS channel from every element of `tx` to the point `rx`.
pub fn los_channel(tx: &ArrayGeometry, rx: Position3, lambda: f64) -> Result<ComplexVector> {
    tx.elements
        .iter()
        .enumerate()
        .map(|(n, &p)| {
            let d = rx.distance(p);
            if !(d > 0.0) {
                return Err(invalid(format!("receiver coincides with element {n}")));
            }
            los_coefficient(d, lambda)
        })
        .collect()
}

/// Element-pair LoS matrix with entry `(m, n)` from tx element `n` to rx
/// element `m`.
pub fn mimo_channel(tx: &ArrayGeometry, rx: &ArrayGeometry, lambda: f64) -> Result<ComplexMatrix> {
    let mut g = ComplexMatrix::zeros(rx.len(), tx.len());
    for (m, &pr) in rx.elements.iter().enumerate() {
        for (n, &pt) in tx.elements.iter().enumerate() {
            let d = pr.distance(pt);
            if !(d > 0.0) {
                return Err(invalid(format!("rx element {m} overlaps tx element {n}")));
            }
            g[(m, n)] = los_coefficient(d, lambda)?;
        }
    }
    Ok(g)
}

pub fn blockage_amplitude(attenuation_db: f64) -> f64 {
    10f64.powf(-attenuation_db / 20.0)
}

pub fn apply_blockage(h: &[Complex64], blocked: bool, attenuation_db: f64) -> ComplexVector {
    if !blocked {
        return h.to_vec();
    }
    let a = blockage_amplitude(attenuation_db);
    h.iter().map(|&v| v * a).collect()
}

/// Effective channel seen by the precoder. `mode_bit == 1` selects the direct
/// link; `0` selects the RIS cascade `G^H Theta^H h_rd`.
pub fn effective_channel(
    h_bd: &[Complex64],
    h_rd: &[Complex64],
    g: &ComplexMatrix,
    phases: &RisPhases,
    mode_bit: u8,
) -> Result<ComplexVector> {
    let (m, n) = (g.rows(), g.cols());
    if h_bd.len() != n || h_rd.len() != m || phases.len() != m {
        return Err(dim(format!(
            "h_bd {} / h_rd {} / phases {} against G {m}x{n}",
            h_bd.len(),
            h_rd.len(),
            phases.len()
        )));
    }
    match mode_bit {
        1 => Ok(h_bd.to_vec()),
        0 => {
            let mut out = vec![Complex64::new(0.0, 0.0); n];
            for (mi, (&hr, &phi)) in h_rd.iter().zip(phases.angles()).enumerate() {
                let coeff = hr * Complex64::from_polar(1.0, -phi);
                let row = &g.as_slice()[mi * n..(mi + 1) * n];
                for (o, gv) in out.iter_mut().zip(row) {
                    *o += coeff * gv.conj();
                }
            }
            Ok(out)
        }
        other => Err(invalid(format!("mode bit must be 0 or 1, got {other}"))),
    }
}

/// All link channels of one snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    pub h_bd: Vec<ComplexVector>,
    pub h_rd: Vec<ComplexVector>,
    pub g_br: ComplexMatrix,
    pub lambda: f64,
}

const CHANNEL_MAGIC: &[u8; 4] = b"NFCH";
const CHANNEL_VERSION: u32 = 1;

impl ChannelSet {
    pub fn generate(
        bs: &ArrayGeometry,
        ris: &ArrayGeometry,
        ues: &[Position3],
        lambda: f64,
    ) -> Result<Self> {
        let h_bd = ues.iter().map(|&u| los_channel(bs, u, lambda)).collect::<Result<Vec<_>>>()?;
        let h_rd = ues.iter().map(|&u| los_channel(ris, u, lambda)).collect::<Result<Vec<_>>>()?;
        let g_br = mimo_channel(bs, ris, lambda)?;
        Ok(Self { h_bd, h_rd, g_br, lambda })
    }

    pub fn num_ues(&self) -> usize {
        self.h_bd.len()
    }

    pub fn bs_antennas(&self) -> usize {
        self.g_br.cols()
    }

    pub fn ris_elements(&self) -> usize {
        self.g_br.rows()
    }

    /// Little-endian layout: magic `NFCH`, u32 version, u32 K, u32 N, u32 M,
    /// f64 lambda, then interleaved (re, im) f64 pairs for `h_bd` (K x N),
    /// `h_rd` (K x M) and `G` (M x N, row-major).
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let (k, n, m) = (self.num_ues(), self.bs_antennas(), self.ris_elements());
        w.write_all(CHANNEL_MAGIC)?;
        for v in [CHANNEL_VERSION, k as u32, n as u32, m as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.lambda.to_le_bytes())?;
        let entries = self
            .h_bd
            .iter()
            .flatten()
            .chain(self.h_rd.iter().flatten())
            .chain(self.g_br.as_slice());
        for c in entries {
            w.write_all(&c.re.to_le_bytes())?;
            w.write_all(&c.im.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHANNEL_MAGIC {
            return Err(Error::Format("bad channel-set magic".into()));
        }
        let mut u = [0u8; 4];
        let mut next_u32 = |r: &mut R| -> Result<usize> {
            r.read_exact(&mut u)?;
            Ok(u32::from_le_bytes(u) as usize)
        };
        let version = next_u32(&mut r)?;
        if version != CHANNEL_VERSION as usize {
            return Err(Error::Format(format!("unsupported channel-set version {version}")));
        }
        let k = next_u32(&mut r)?;
        let n = next_u32(&mut r)?;
        let m = next_u32(&mut r)?;
        let lambda = read_f64(&mut r)?;
        let mut read_vec = |len: usize| -> Result<ComplexVector> {
            (0..len)
                .map(|_| Ok(Complex64::new(read_f64(&mut r)?, read_f64(&mut r)?)))
                .collect()
        };
        let h_bd = (0..k).map(|_| read_vec(n)).collect::<Result<Vec<_>>>()?;
        let h_rd = (0..k).map(|_| read_vec(m)).collect::<Result<Vec<_>>>()?;
        let g_br = ComplexMatrix::from_vec(m, n, read_vec(m * n)?)?;
        Ok(Self { h_bd, h_rd, g_br, lambda })
    }
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_upa;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LAMBDA: f64 = 0.0857;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn path_loss_cases() {
        let unit = LAMBDA / (4.0 * PI);
        assert!((path_loss(unit, LAMBDA).unwrap() - 1.0).abs() < 1e-12);
        let a = path_loss(3.0, LAMBDA).unwrap();
        let b = path_loss(6.0, LAMBDA).unwrap();
        assert!((a / b - 4.0).abs() < 1e-12);
        let v = path_loss(10.0, LAMBDA).unwrap();
        assert!((v - 4.65e-7).abs() < 0.01e-7, "{v}");
        assert!(path_loss(0.0, LAMBDA).is_err());
        assert!(path_loss(-1.0, LAMBDA).is_err());
    }

    #[test]
    fn unit_gain_single_element() {
        let g = build_upa(1, 1, 0.1, Position3::ORIGIN).unwrap();
        let d = LAMBDA / (4.0 * PI);
        let h = los_channel(&g, Position3::new(d, 0.0, 0.0), LAMBDA).unwrap();
        assert!((h[0].norm() - 1.0).abs() < 1e-12);
        let expected = (-2.0 * PI * d / LAMBDA).rem_euclid(2.0 * PI);
        assert!((h[0].arg().rem_euclid(2.0 * PI) - expected).abs() < 1e-12);
    }

    #[test]
    fn magnitudes_follow_exact_distances() {
        let g = build_upa(3, 4, LAMBDA / 2.0, Position3::ORIGIN).unwrap();
        let ue = Position3::new(7.0, -2.0, 1.5);
        let h = los_channel(&g, ue, LAMBDA).unwrap();
        for (p, v) in g.elements.iter().zip(&h) {
            let d = ((ue.x - p.x).powi(2) + (ue.y - p.y).powi(2) + (ue.z - p.z).powi(2)).sqrt();
            let amp = LAMBDA / (4.0 * PI * d);
            assert!((v.norm() - amp).abs() <= 1e-12 * amp);
        }
    }

    #[test]
    fn boresight_mirror_symmetry() {
        let g = build_upa(2, 4, LAMBDA / 2.0, Position3::ORIGIN).unwrap();
        let h = los_channel(&g, Position3::new(9.0, 0.0, 0.0), LAMBDA).unwrap();
        // y -> -y maps column iy to cols-1-iy within each row
        for iz in 0..2 {
            for iy in 0..4 {
                let a = h[iz * 4 + iy];
                let b = h[iz * 4 + (3 - iy)];
                assert!((a - b).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn coincident_receiver_rejected() {
        let g = build_upa(1, 1, 0.1, Position3::ORIGIN).unwrap();
        assert!(los_channel(&g, Position3::ORIGIN, LAMBDA).is_err());
        assert!(mimo_channel(&g, &g, LAMBDA).is_err());
    }

    #[test]
    fn mimo_reduces_and_transposes() {
        let a = build_upa(1, 1, 0.1, Position3::ORIGIN).unwrap();
        let b = build_upa(1, 1, 0.1, Position3::new(3.0, 1.0, 2.0)).unwrap();
        let g = mimo_channel(&a, &b, LAMBDA).unwrap();
        let h = los_channel(&a, b.elements[0], LAMBDA).unwrap();
        assert_eq!(g[(0, 0)], h[0]);

        let tx = build_upa(2, 3, LAMBDA / 2.0, Position3::ORIGIN).unwrap();
        let rx = build_upa(2, 2, LAMBDA / 5.0, Position3::new(15.0, 0.0, 15.0)).unwrap();
        let g1 = mimo_channel(&tx, &rx, LAMBDA).unwrap();
        let g2 = mimo_channel(&rx, &tx, LAMBDA).unwrap();
        assert_eq!(g1, g2.transpose());
        for m in 0..rx.len() {
            for n in 0..tx.len() {
                let d = rx.elements[m].distance(tx.elements[n]);
                let want = Complex64::from_polar(LAMBDA / (4.0 * PI * d), -2.0 * PI * d / LAMBDA);
                assert!((g1[(m, n)] - want).norm() <= 1e-12 * want.norm());
            }
        }
    }

    #[test]
    fn blockage_scaling() {
        let h = vec![c(1.0, 2.0), c(-0.5, 0.25)];
        assert_eq!(apply_blockage(&h, false, 30.0), h);
        assert_eq!(apply_blockage(&h, true, 0.0), h);
        let b = apply_blockage(&h, true, 30.0);
        let p0: f64 = h.iter().map(|v| v.norm_sqr()).sum();
        let p1: f64 = b.iter().map(|v| v.norm_sqr()).sum();
        assert!((p0 / p1 - 1000.0).abs() < 1e-9);
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> ComplexVector {
        (0..n).map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
    }

    #[test]
    fn effective_channel_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h_bd = random_vec(&mut rng, 2);
        let h_rd = random_vec(&mut rng, 2);
        let g = ComplexMatrix::from_vec(2, 2, random_vec(&mut rng, 4)).unwrap();
        let phases = RisPhases::new(vec![0.3, 4.0]);
        assert_eq!(effective_channel(&h_bd, &h_rd, &g, &phases, 1).unwrap(), h_bd);

        // dense brute force of (h_rd^H Theta G)^H
        let out = effective_channel(&h_bd, &h_rd, &g, &phases, 0).unwrap();
        for n in 0..2 {
            let mut row = c(0.0, 0.0);
            for m in 0..2 {
                row += h_rd[m].conj() * Complex64::from_polar(1.0, phases.angles()[m]) * g[(m, n)];
            }
            assert!((out[n] - row.conj()).norm() < 1e-14);
        }
        assert!(effective_channel(&h_bd, &h_rd, &g, &RisPhases::zeros(3), 0).is_err());
        assert!(effective_channel(&h_bd[..1], &h_rd, &g, &phases, 0).is_err());
    }

    #[test]
    fn single_element_cascade() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h_rd = random_vec(&mut rng, 1);
        let g = ComplexMatrix::from_vec(1, 3, random_vec(&mut rng, 3)).unwrap();
        let out = effective_channel(&[c(0.0, 0.0); 3], &h_rd, &g, &RisPhases::zeros(1), 0).unwrap();
        for n in 0..3 {
            let want = (h_rd[0].conj() * g[(0, n)]).conj();
            assert!((out[n] - want).norm() < 1e-15);
        }
    }

    #[test]
    fn regeneration_is_bit_identical_and_round_trips() {
        let bs = build_upa(2, 2, LAMBDA / 2.0, Position3::ORIGIN).unwrap();
        let ris = build_upa(2, 3, LAMBDA / 5.0, Position3::new(15.0, 0.0, 15.0)).unwrap();
        let ues = [Position3::new(20.0, 3.0, 0.5), Position3::new(30.0, -7.0, 0.2)];
        let a = ChannelSet::generate(&bs, &ris, &ues, LAMBDA).unwrap();
        let b = ChannelSet::generate(&bs, &ris, &ues, LAMBDA).unwrap();
        assert_eq!(a, b);
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 16 + 8 + 16 * (2 * 4 + 2 * 6 + 6 * 4));
        let back = ChannelSet::read_from(buf.as_slice()).unwrap();
        assert_eq!(a, back);
        buf[0] = b'X';
        assert!(ChannelSet::read_from(buf.as_slice()).is_err());
    }
}
