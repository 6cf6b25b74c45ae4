//! Closed-form diffusion math: the beta/alpha-bar schedule, forward noising,
//! the velocity parameterization and its inverse, and the deterministic
//! reverse (DDIM) step.
//!
//! Timesteps are 1-based: `t` runs over `1..=T`, and `alpha_bar(0) == 1` so
//! the final reverse step down to `t = 0` is well defined. All functions here
//! are pure; images are `(C, H, W)` float arrays.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Image tensor in model space: channels x height x width, values around [-1, 1].
pub type Image = Array3<f32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// beta interpolated linearly from `beta_start` to `beta_end`.
    Linear,
    /// sqrt(beta) interpolated linearly, then squared.
    ScaledLinear,
}

/// Noise schedule: `betas[t-1]` is the variance added at step `t`, and
/// `alpha_bars[t-1]` the cumulative signal fraction `prod_{i<=t}(1 - beta_i)`.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// Build a schedule of `t_max` steps with betas interpolated between
    /// `beta_start` and `beta_end` according to `kind`.
    pub fn new(t_max: usize, beta_start: f64, beta_end: f64, kind: ScheduleKind) -> Result<Self> {
        if t_max < 1 {
            return Err(Error::config("timesteps", "must be >= 1"));
        }
        if !(beta_start > 0.0) || !(beta_start < 1.0) {
            return Err(Error::config("beta_start", "must lie in (0, 1)"));
        }
        if !(beta_end > 0.0) || !(beta_end < 1.0) {
            return Err(Error::config("beta_end", "must lie in (0, 1)"));
        }
        if beta_start > beta_end {
            return Err(Error::config("beta_start", "must be <= beta_end"));
        }
        let interp = |i: usize| {
            if t_max == 1 {
                beta_start
            } else {
                let frac = i as f64 / (t_max - 1) as f64;
                match kind {
                    ScheduleKind::Linear => beta_start + (beta_end - beta_start) * frac,
                    ScheduleKind::ScaledLinear => {
                        let s = beta_start.sqrt() + (beta_end.sqrt() - beta_start.sqrt()) * frac;
                        s * s
                    }
                }
            }
        };
        let betas: Vec<f64> = (0..t_max).map(interp).collect();
        Ok(Self::from_betas(betas, kind))
    }

    /// Build directly from a beta sequence; alpha-bars are the running product.
    pub fn from_betas(betas: Vec<f64>, kind: ScheduleKind) -> Self {
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for &b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        Self {
            kind,
            betas,
            alpha_bars,
        }
    }

    /// Bypass constructor for analysis harnesses that need exact alpha-bar
    /// values (limits like 0 or 1 that no valid beta sequence reaches).
    pub fn from_parts(betas: Vec<f64>, alpha_bars: Vec<f64>, kind: ScheduleKind) -> Result<Self> {
        if betas.len() != alpha_bars.len() {
            return Err(Error::dimension(format!(
                "betas ({}) and alpha_bars ({}) lengths differ",
                betas.len(),
                alpha_bars.len()
            )));
        }
        if alpha_bars.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::config("alpha_bars", "entries must lie in [0, 1]"));
        }
        Ok(Self {
            kind,
            betas,
            alpha_bars,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of timesteps T.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// beta_t for 1-based `t`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.betas[t - 1])
    }

    /// Cumulative alpha-bar_t for 1-based `t`, with alpha_bar(0) = 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_t(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))` — the two coefficients
    /// every forward/backward identity is built from.
    pub fn coeffs(&self, t: usize) -> Result<(f64, f64)> {
        let ab = self.alpha_bar(t)?;
        Ok((ab.sqrt(), (1.0 - ab).sqrt()))
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.len() {
            return Err(Error::Ordering(format!(
                "timestep {t} outside [1, {}]",
                self.len()
            )));
        }
        Ok(())
    }
}

fn check_same_shape(a: &Image, b: &Image, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::dimension(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Forward noising: `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn q_sample(x0: &Image, t: usize, eps: &Image, sched: &DiffusionSchedule) -> Result<Image> {
    check_same_shape(x0, eps, "q_sample x0/eps")?;
    let (sa, sb) = sched.coeffs(t)?;
    let (sa, sb) = (sa as f32, sb as f32);
    Ok(x0 * sa + eps * sb)
}

/// Velocity target: `v_t = sqrt(ab_t) eps - sqrt(1 - ab_t) x0`.
pub fn v_target(x0: &Image, eps: &Image, t: usize, sched: &DiffusionSchedule) -> Result<Image> {
    check_same_shape(x0, eps, "v_target x0/eps")?;
    let (sa, sb) = sched.coeffs(t)?;
    let (sa, sb) = (sa as f32, sb as f32);
    Ok(eps * sa - x0 * sb)
}

/// Invert the velocity parameterization:
/// `x0_hat = sqrt(ab_t) x_t - sqrt(1 - ab_t) v` and
/// `eps_hat = sqrt(1 - ab_t) x_t + sqrt(ab_t) v`.
pub fn from_v(x_t: &Image, v: &Image, t: usize, sched: &DiffusionSchedule) -> Result<(Image, Image)> {
    check_same_shape(x_t, v, "from_v x_t/v")?;
    let (sa, sb) = sched.coeffs(t)?;
    let (sa, sb) = (sa as f32, sb as f32);
    let x0_hat = x_t * sa - v * sb;
    let eps_hat = x_t * sb + v * sa;
    Ok((x0_hat, eps_hat))
}

/// One deterministic reverse step from `t` down to `t_prev` (eta = 0):
/// reconstruct `(x0_hat, eps_hat)` from the predicted velocity and re-noise
/// to the `t_prev` marginal. `t_prev = 0` lands on the clean estimate.
pub fn ddim_step(
    x_t: &Image,
    v_hat: &Image,
    t: usize,
    t_prev: usize,
    sched: &DiffusionSchedule,
) -> Result<Image> {
    if t_prev >= t {
        return Err(Error::Ordering(format!(
            "reverse step requires t_prev < t, got t_prev={t_prev}, t={t}"
        )));
    }
    let (x0_hat, eps_hat) = from_v(x_t, v_hat, t, sched)?;
    let (sa, sb) = sched.coeffs(t_prev)?;
    let (sa, sb) = (sa as f32, sb as f32);
    Ok(&x0_hat * sa + &eps_hat * sb)
}
