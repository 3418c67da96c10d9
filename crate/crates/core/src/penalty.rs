//! LASSO, MCP and SCAD penalties, optionally blended with a ridge term,
//! together with their scalar and groupwise proximal maps.
//!
//! With mixing weight `π` the penalty on a magnitude `t ≥ 0` is
//! `π·ρ(t; λ, γ) + (1 − π)·(λ/2)·t²`. Every supported `ρ` is piecewise
//! quadratic, so the proximal objective is piecewise quadratic too and its
//! global minimizer is found exactly by comparing the stationary point of
//! each piece with the piece boundaries. This stays correct when the step
//! exceeds the concavity parameter, where the usual closed forms no longer
//! apply.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKind {
    Lasso,
    Mcp,
    Scad,
}

impl PenaltyKind {
    pub fn default_gamma(self) -> f64 {
        match self {
            PenaltyKind::Lasso | PenaltyKind::Mcp => 3.0,
            PenaltyKind::Scad => 3.7,
        }
    }
}

impl std::str::FromStr for PenaltyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lasso" => Ok(PenaltyKind::Lasso),
            "mcp" => Ok(PenaltyKind::Mcp),
            "scad" => Ok(PenaltyKind::Scad),
            other => Err(Error::InvalidParameter(format!("unknown penalty '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub kind: PenaltyKind,
    pub gamma: f64,
    pub pi: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self { kind: PenaltyKind::Mcp, gamma: 3.0, pi: 1.0 }
    }
}

/// Non-constant part `a2·u² + a1·u` of one quadratic piece of `ρ` on
/// `[lo, hi]`.
#[derive(Debug, Clone, Copy)]
struct Piece {
    lo: f64,
    hi: f64,
    a2: f64,
    a1: f64,
}

impl PenaltyConfig {
    pub fn new(kind: PenaltyKind, gamma: f64, pi: f64) -> Result<Self> {
        let cfg = Self { kind, gamma, pi };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_kind(kind: PenaltyKind) -> Self {
        Self { kind, gamma: kind.default_gamma(), pi: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let min_gamma = match self.kind {
            PenaltyKind::Lasso => f64::NEG_INFINITY,
            PenaltyKind::Mcp => 1.0,
            PenaltyKind::Scad => 2.0,
        };
        if self.kind != PenaltyKind::Lasso && !(self.gamma > min_gamma && self.gamma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "gamma {} must exceed {min_gamma} for {:?}",
                self.gamma, self.kind
            )));
        }
        if !(self.pi > 0.0 && self.pi <= 1.0) {
            return Err(Error::InvalidParameter(format!("pi {} must lie in (0, 1]", self.pi)));
        }
        Ok(())
    }

    fn pieces(&self, lambda: f64) -> Vec<Piece> {
        let g = self.gamma;
        let inf = f64::INFINITY;
        match self.kind {
            PenaltyKind::Lasso => vec![Piece { lo: 0.0, hi: inf, a2: 0.0, a1: lambda }],
            PenaltyKind::Mcp => vec![
                Piece { lo: 0.0, hi: g * lambda, a2: -0.5 / g, a1: lambda },
                Piece { lo: g * lambda, hi: inf, a2: 0.0, a1: 0.0 },
            ],
            PenaltyKind::Scad => vec![
                Piece { lo: 0.0, hi: lambda, a2: 0.0, a1: lambda },
                Piece {
                    lo: lambda,
                    hi: g * lambda,
                    a2: -0.5 / (g - 1.0),
                    a1: g * lambda / (g - 1.0),
                },
                Piece {
                    lo: g * lambda,
                    hi: inf,
                    a2: 0.0,
                    a1: 0.0,
                },
            ],
        }
    }

    /// Folded-concave part `ρ(t; λ, γ)` without ridge mixing.
    fn rho(&self, t: f64, lambda: f64) -> f64 {
        let g = self.gamma;
        match self.kind {
            PenaltyKind::Lasso => lambda * t,
            PenaltyKind::Mcp => {
                if t <= g * lambda {
                    lambda * t - t * t / (2.0 * g)
                } else {
                    0.5 * g * lambda * lambda
                }
            }
            PenaltyKind::Scad => {
                if t <= lambda {
                    lambda * t
                } else if t <= g * lambda {
                    (2.0 * g * lambda * t - t * t - lambda * lambda) / (2.0 * (g - 1.0))
                } else {
                    0.5 * lambda * lambda * (g + 1.0)
                }
            }
        }
    }

    /// Penalty value at magnitude `t ≥ 0`.
    pub fn value(&self, t: f64, lambda: f64) -> f64 {
        let t = t.abs();
        self.pi * self.rho(t, lambda) + (1.0 - self.pi) * 0.5 * lambda * t * t
    }

    /// Minimizer over `u ≥ 0` of `(u − a)²/(2c) + value(u)` for `a ≥ 0`.
    fn prox_magnitude(&self, a: f64, step: f64, lambda: f64) -> f64 {
        if lambda == 0.0 {
            return a;
        }
        let objective = |u: f64| (u - a) * (u - a) / (2.0 * step) + self.value(u, lambda);
        let ridge = (1.0 - self.pi) * 0.5 * lambda;
        let mut best_u = 0.0;
        let mut best_f = objective(0.0);
        let consider = |u: f64, best_u: &mut f64, best_f: &mut f64| {
            let f = objective(u);
            if f < *best_f || (f == *best_f && u < *best_u) {
                *best_u = u;
                *best_f = f;
            }
        };
        for p in self.pieces(lambda) {
            if p.hi <= p.lo && p.hi.is_finite() {
                continue;
            }
            let quad = 0.5 / step + self.pi * p.a2 + ridge;
            let lin = -a / step + self.pi * p.a1;
            if quad > 0.0 {
                let stationary = (-lin / (2.0 * quad)).clamp(p.lo, p.hi);
                consider(stationary, &mut best_u, &mut best_f);
            }
            consider(p.lo, &mut best_u, &mut best_f);
            if p.hi.is_finite() {
                consider(p.hi, &mut best_u, &mut best_f);
            }
        }
        best_u
    }

    /// `argmin_x (x − z)²/(2c) + value(|x|)`.
    pub fn prox_scalar(&self, z: f64, step: f64, lambda: f64) -> f64 {
        let u = self.prox_magnitude(z.abs(), step, lambda);
        if u == 0.0 { 0.0 } else { u.copysign(z) }
    }

    /// Groupwise proximal map of `value(‖x‖₂)`; writes into `out`.
    pub fn prox_group_into(&self, z: &[f64], step: f64, lambda: f64, out: &mut [f64]) {
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let shrunk = if norm > 0.0 { self.prox_magnitude(norm, step, lambda) } else { 0.0 };
        if shrunk == 0.0 {
            out.iter_mut().for_each(|o| *o = 0.0);
        } else {
            let scale = shrunk / norm;
            for (o, v) in out.iter_mut().zip(z) {
                *o = v * scale;
            }
        }
    }

    pub fn prox_group(&self, z: &[f64], step: f64, lambda: f64) -> Vec<f64> {
        let mut out = vec![0.0; z.len()];
        self.prox_group_into(z, step, lambda, &mut out);
        out
    }
}

fn check_args(cfg: &PenaltyConfig, step: Option<f64>, lambda: f64) -> Result<()> {
    cfg.validate()?;
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!("lambda {lambda} must be finite and >= 0")));
    }
    if let Some(c) = step {
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::InvalidParameter(format!("step {c} must be positive")));
        }
    }
    Ok(())
}

pub fn penalty_value(cfg: &PenaltyConfig, t: f64, lambda: f64) -> Result<f64> {
    check_args(cfg, None, lambda)?;
    if !(t >= 0.0) {
        return Err(Error::InvalidParameter(format!("magnitude {t} must be >= 0")));
    }
    Ok(cfg.value(t, lambda))
}

pub fn prox_scalar(cfg: &PenaltyConfig, z: f64, step: f64, lambda: f64) -> Result<f64> {
    check_args(cfg, Some(step), lambda)?;
    if !z.is_finite() {
        return Err(Error::InvalidParameter("non-finite input".into()));
    }
    Ok(cfg.prox_scalar(z, step, lambda))
}

pub fn prox_group(cfg: &PenaltyConfig, z: &[f64], step: f64, lambda: f64) -> Result<Vec<f64>> {
    check_args(cfg, Some(step), lambda)?;
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite input".into()));
    }
    Ok(cfg.prox_group(z, step, lambda))
}
