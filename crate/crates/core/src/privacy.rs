//! Privacy and overhead measures of an augmentation amount, and the
//! brute-force search spaces an adversary faces.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::data::{augmented_len, Modality};
use crate::error::{Error, Result};

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha >= 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::arg(format!("alpha must be finite and >= 0, got {alpha}")))
    }
}

/// ε = 1/(1+α).
pub fn privacy_loss(alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(1.0 / (1.0 + alpha))
}

/// ρ = 1 − ε.
pub fn perf_loss(alpha: f64) -> Result<f64> {
    Ok(1.0 - privacy_loss(alpha)?)
}

/// C(n, k) when it fits in a u128.
pub fn binomial_exact(n: u64, k: u64) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n-i) is divisible by (i+1) after the multiplication
        acc = acc.checked_mul((n - i) as u128)? / (i + 1) as u128;
    }
    Some(acc)
}

/// ln C(n, k) via log-gamma.
pub fn ln_binomial(n: u64, k: u64) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    if k == 0 || k == n {
        return 0.0;
    }
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// log10 C(n, k); exact integer arithmetic below 2^63.
pub fn log10_binomial(n: u64, k: u64) -> f64 {
    match binomial_exact(n, k) {
        Some(c) if c < 1 << 63 => (c as f64).log10(),
        _ => ln_binomial(n, k) / std::f64::consts::LN_10,
    }
}

/// Data shape the search space is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "modality", rename_all = "lowercase")]
pub enum DataShape {
    Image { height: usize, width: usize, channels: usize },
    Text { length: usize },
}

impl DataShape {
    pub fn modality(&self) -> Modality {
        match self {
            DataShape::Image { .. } => Modality::Image,
            DataShape::Text { .. } => Modality::Text,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            DataShape::Image { height, width, .. } => vec![height, width],
            DataShape::Text { length } => vec![length],
        }
    }

    pub fn augmented_dims(&self, alpha: f64) -> Vec<usize> {
        self.dims().into_iter().map(|d| augmented_len(d, alpha)).collect()
    }

    fn check(&self) -> Result<()> {
        let ok = match *self {
            DataShape::Image { height, width, channels } => height >= 1 && width >= 1 && channels >= 1,
            DataShape::Text { length } => length >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::arg(format!("dimensions must be >= 1: {self}")))
        }
    }
}

impl fmt::Display for DataShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataShape::Image { height, width, channels } => write!(f, "{height}x{width}x{channels}"),
            DataShape::Text { length } => write!(f, "{length}"),
        }
    }
}

/// `HxWxC` (or `HxW`, one channel) for images, a bare `L` for text.
impl FromStr for DataShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts = s
            .split(['x', 'X'])
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::arg(format!("bad shape `{s}`: expected HxWxC or L")))?;
        let shape = match parts[..] {
            [length] => DataShape::Text { length },
            [height, width] => DataShape::Image { height, width, channels: 1 },
            [height, width, channels] => DataShape::Image { height, width, channels },
            _ => return Err(Error::arg(format!("bad shape `{s}`: expected HxWxC or L"))),
        };
        shape.check()?;
        Ok(shape)
    }
}

/// log10 of the (per-pixel, structural) search spaces.
///
/// Per-pixel counts every way of choosing the inserted cells of one
/// channel, times the channel count. Structural counts the row/column
/// insertions actually performed. For text both are C(L', L'−L).
pub fn search_space_log10(shape: DataShape, alpha: f64) -> Result<(f64, f64)> {
    check_alpha(alpha)?;
    shape.check()?;
    Ok(match shape {
        DataShape::Image { height, width, channels } => {
            let (ha, wa) = (augmented_len(height, alpha), augmented_len(width, alpha));
            let cells = (ha * wa) as u64;
            let inserted = cells - (height * width) as u64;
            let pp = if inserted == 0 {
                0.0
            } else {
                (channels as f64).log10() + log10_binomial(cells, inserted)
            };
            let st = log10_binomial(ha as u64, height as u64) + log10_binomial(wa as u64, width as u64);
            (pp, st)
        }
        DataShape::Text { length } => {
            let la = augmented_len(length, alpha) as u64;
            let v = log10_binomial(la, la - length as u64);
            (v, v)
        }
    })
}

/// Exact text arrangement count C(L', L'−L), if it fits in a u128.
pub fn text_arrangements(length: usize, alpha: f64) -> Result<Option<u128>> {
    check_alpha(alpha)?;
    let la = augmented_len(length, alpha) as u64;
    Ok(binomial_exact(la, la - length as u64))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrivacyReport {
    pub alpha: f64,
    pub epsilon: f64,
    pub rho: f64,
    pub log10_space_pp: f64,
    pub log10_space_struct: f64,
    pub modality: Modality,
    pub original_dims: Vec<usize>,
    pub augmented_dims: Vec<usize>,
    pub channels: usize,
    /// Original parameter count P.
    pub params: Option<usize>,
    /// Added decoy parameters A_m.
    pub added_params: Option<usize>,
    pub subnets: Option<usize>,
}

/// Model-side figures for a report: (P, A_m, s).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelFigures {
    pub params: usize,
    pub added_params: usize,
    pub subnets: usize,
}

pub fn report(shape: DataShape, alpha: f64, model: Option<ModelFigures>) -> Result<PrivacyReport> {
    let (pp, st) = search_space_log10(shape, alpha)?;
    Ok(PrivacyReport {
        alpha,
        epsilon: privacy_loss(alpha)?,
        rho: perf_loss(alpha)?,
        log10_space_pp: pp,
        log10_space_struct: st,
        modality: shape.modality(),
        original_dims: shape.dims(),
        augmented_dims: shape.augmented_dims(alpha),
        channels: match shape {
            DataShape::Image { channels, .. } => channels,
            DataShape::Text { .. } => 1,
        },
        params: model.map(|m| m.params),
        added_params: model.map(|m| m.added_params),
        subnets: model.map(|m| m.subnets),
    })
}

impl PrivacyReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Human-readable summary.
    pub fn to_text(&self) -> String {
        let dims = |d: &[usize]| d.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("x");
        let mut s = String::new();
        writeln!(s, "alpha              {}", self.alpha).unwrap();
        writeln!(s, "epsilon            {:.4}", self.epsilon).unwrap();
        writeln!(s, "rho                {:.4}", self.rho).unwrap();
        writeln!(s, "modality           {:?}", self.modality).unwrap();
        writeln!(
            s,
            "dims               {} -> {} ({} channel(s))",
            dims(&self.original_dims),
            dims(&self.augmented_dims),
            self.channels
        )
        .unwrap();
        writeln!(s, "search space (pp)  10^{:.4}", self.log10_space_pp).unwrap();
        writeln!(s, "search space (r/c) 10^{:.4}", self.log10_space_struct).unwrap();
        if let (Some(p), Some(a), Some(n)) = (self.params, self.added_params, self.subnets) {
            writeln!(s, "params P           {p}").unwrap();
            writeln!(s, "added A_m          {a}").unwrap();
            writeln!(s, "decoy sub-networks {n}").unwrap();
        }
        s
    }
}

/// CSV of ε, ρ and both search spaces over `alphas`.
pub fn curve_csv(shape: DataShape, alphas: &[f64]) -> Result<String> {
    let mut s = String::from("alpha,epsilon,rho,log10_space_pp,log10_space_struct\n");
    for &a in alphas {
        let r = report(shape, a, None)?;
        writeln!(s, "{},{},{},{},{}", a, r.epsilon, r.rho, r.log10_space_pp, r.log10_space_struct).unwrap();
    }
    Ok(s)
}

/// `n + 1` evenly spaced points on [lo, hi].
pub fn alpha_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}
