//! SINR and spectral efficiency, constraint handling and the closed-form
//! single-user oracles used as ground truth.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{ComplexMatrix, ComplexVector};
use crate::error::{dim, invalid, Result};

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(w: f64) -> f64 {
    10.0 * w.log10() + 30.0
}

/// `N x K` precoder; column `k` serves UE `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamMatrix(pub ComplexMatrix);

impl BeamMatrix {
    pub fn zeros(n: usize, k: usize) -> Self {
        Self(ComplexMatrix::zeros(n, k))
    }

    pub fn from_columns(columns: &[ComplexVector]) -> Result<Self> {
        ComplexMatrix::from_columns(columns).map(Self)
    }

    pub fn antennas(&self) -> usize {
        self.0.rows()
    }

    pub fn users(&self) -> usize {
        self.0.cols()
    }

    pub fn column(&self, k: usize) -> ComplexVector {
        self.0.column(k)
    }

    pub fn power(&self) -> f64 {
        self.0.frobenius_sq()
    }
}

/// RIS phase angles; each reflection coefficient is `exp(j phi)` so unit
/// modulus holds by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RisPhases(Vec<f64>);

impl RisPhases {
    /// Wraps every angle into `[0, 2 pi)`.
    pub fn new(angles: Vec<f64>) -> Self {
        Self(angles.into_iter().map(wrap_angle).collect())
    }

    pub fn zeros(m: usize) -> Self {
        Self(vec![0.0; m])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn angles(&self) -> &[f64] {
        &self.0
    }

    pub fn coefficients(&self) -> impl Iterator<Item = Complex64> + '_ {
        self.0.iter().map(|&p| Complex64::from_polar(1.0, p))
    }
}

fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    // rem_euclid can round up to exactly 2 pi for tiny negative inputs
    if w >= 2.0 * PI {
        0.0
    } else {
        w
    }
}

/// Inner product `a^H b`.
pub fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub fn norm_sq(a: &[Complex64]) -> f64 {
    a.iter().map(|v| v.norm_sqr()).sum()
}

pub fn sinr(h_eff: &[ComplexVector], w: &BeamMatrix, noise_power: f64) -> Result<Vec<f64>> {
    if !(noise_power > 0.0) {
        return Err(invalid(format!("noise power must be positive, got {noise_power}")));
    }
    let k = h_eff.len();
    if k == 0 || w.users() != k {
        return Err(dim(format!("{k} channels against a precoder with {} columns", w.users())));
    }
    let cols: Vec<ComplexVector> = (0..k).map(|i| w.column(i)).collect();
    h_eff
        .iter()
        .enumerate()
        .map(|(ki, h)| {
            if h.len() != w.antennas() {
                return Err(dim(format!("channel {ki} has length {}, expected {}", h.len(), w.antennas())));
            }
            let mut signal = 0.0;
            let mut interference = 0.0;
            for (i, col) in cols.iter().enumerate() {
                let g = inner(h, col).norm_sqr();
                if i == ki {
                    signal = g;
                } else {
                    interference += g;
                }
            }
            Ok(signal / (interference + noise_power))
        })
        .collect()
}

pub fn spectral_efficiency(sinr_linear: f64) -> Result<f64> {
    if sinr_linear < 0.0 || sinr_linear.is_nan() {
        return Err(invalid(format!("SINR must be non-negative, got {sinr_linear}")));
    }
    Ok((1.0 + sinr_linear).log2())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkReport {
    pub sinr: Vec<f64>,
    pub se: Vec<f64>,
    pub sum_se: f64,
    pub slack: Vec<f64>,
}

impl LinkReport {
    pub fn from_sinr(sinr: Vec<f64>, se_min: f64) -> Result<Self> {
        let se = sinr.iter().map(|&s| spectral_efficiency(s)).collect::<Result<Vec<_>>>()?;
        let sum_se = se.iter().sum();
        let slack = se.iter().map(|s| s - se_min).collect();
        Ok(Self { sinr, se, sum_se, slack })
    }

    pub fn evaluate(h_eff: &[ComplexVector], w: &BeamMatrix, noise_power: f64, se_min: f64) -> Result<Self> {
        Self::from_sinr(sinr(h_eff, w, noise_power)?, se_min)
    }

    /// CSV rows `step,ue,sinr_db,se,slack`.
    pub fn csv_rows(&self, step: usize) -> Vec<String> {
        (0..self.se.len())
            .map(|k| {
                format!(
                    "{step},{k},{},{},{}",
                    10.0 * self.sinr[k].log10(),
                    self.se[k],
                    self.slack[k]
                )
            })
            .collect()
    }

    pub const CSV_HEADER: &'static str = "step,ue,sinr_db,se_bps_per_hz,slack_bps_per_hz";
}

pub fn sum_se(report: &LinkReport) -> f64 {
    report.se.iter().sum()
}

pub fn qos_slack(report: &LinkReport, se_min: f64) -> Vec<f64> {
    report.se.iter().map(|s| s - se_min).collect()
}

/// Scales `w` onto the power ball `||W||_F^2 <= p_max`.
pub fn project_power(w: &BeamMatrix, p_max: f64) -> BeamMatrix {
    let p = w.power();
    if p <= p_max {
        return w.clone();
    }
    let s = (p_max / p).sqrt();
    let mut out = w.clone();
    out.0.as_mut_slice().iter_mut().for_each(|v| *v *= s);
    // rounding can leave the scaled power a few ulps above the budget
    while out.power() > p_max {
        out.0.as_mut_slice().iter_mut().for_each(|v| *v *= 1.0 - 1e-15);
    }
    out
}

/// Matched filter `w = sqrt(p) h / ||h||`, the single-user optimum.
pub fn matched_filter_oracle(h: &[Complex64], p: f64, noise_power: f64) -> Result<(BeamMatrix, f64)> {
    let nh = norm_sq(h);
    if !(nh > 0.0) {
        return Err(invalid("matched filter needs a non-zero channel"));
    }
    if !(noise_power > 0.0) {
        return Err(invalid("noise power must be positive"));
    }
    let s = (p / nh).sqrt();
    let col: ComplexVector = h.iter().map(|v| v * s).collect();
    let se = (1.0 + p * nh / noise_power).log2();
    Ok((BeamMatrix::from_columns(&[col])?, se))
}

/// Phases maximising `|h_rd^H Theta c|` over unit-modulus `Theta`; returns
/// the phases and the achieved power gain `(sum |h_m||c_m|)^2`.
pub fn ris_alignment_oracle(h_rd: &[Complex64], c: &[Complex64]) -> Result<(RisPhases, f64)> {
    if h_rd.len() != c.len() {
        return Err(dim(format!("h_rd {} vs c {}", h_rd.len(), c.len())));
    }
    let mut angles = Vec::with_capacity(c.len());
    let mut amp = 0.0;
    for (h, cv) in h_rd.iter().zip(c) {
        let t = h.conj() * cv;
        angles.push(if t.norm() > 0.0 { -t.arg() } else { 0.0 });
        amp += h.norm() * cv.norm();
    }
    Ok((RisPhases::new(angles), amp * amp))
}

/// `|h_rd^H Theta c|^2` for given phases.
pub fn cascade_gain(h_rd: &[Complex64], phases: &RisPhases, c: &[Complex64]) -> f64 {
    h_rd.iter()
        .zip(phases.coefficients())
        .zip(c)
        .map(|((h, t), cv)| h.conj() * t * cv)
        .sum::<Complex64>()
        .norm_sqr()
}
