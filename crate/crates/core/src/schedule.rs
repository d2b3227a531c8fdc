//! Discrete DDPM noise schedule and its continuous-time interpolants.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    /// β linear in t.
    Linear,
    /// √β linear in t.
    ScaledLinear,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::ScaledLinear => "scaled-linear",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(ScheduleKind::Linear),
            "scaled-linear" => Some(ScheduleKind::ScaledLinear),
            _ => None,
        }
    }
}

/// β_t, α_t = 1 − β_t and ᾱ_t = ∏_{s≤t} α_s for t = 1..=T.
///
/// Tables are stored 0-based (`betas[t - 1]` is β_t); use the accessors for
/// 1-based step indices.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    beta_start: f64,
    beta_end: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 0.00085;
pub const DEFAULT_BETA_END: f64 = 0.0120;

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("valid defaults")
    }
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let frac = |t: usize| if steps == 1 { 0.0 } else { t as f64 / (steps - 1) as f64 };
        let betas: Vec<f64> = (0..steps)
            .map(|t| match kind {
                ScheduleKind::Linear => beta_start + (beta_end - beta_start) * frac(t),
                ScheduleKind::ScaledLinear => {
                    let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
                    let r = a + (b - a) * frac(t);
                    r * r
                }
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(NoiseSchedule { kind, beta_start, beta_end, betas, alphas, alpha_bars })
    }

    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::new(ScheduleKind::Linear, steps, beta_start, beta_end)
    }

    pub fn scaled_linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::new(ScheduleKind::ScaledLinear, steps, beta_start, beta_end)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta_start(&self) -> f64 {
        self.beta_start
    }

    pub fn beta_end(&self) -> f64 {
        self.beta_end
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_step(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange { t, max: self.steps() });
        }
        Ok(t - 1)
    }

    /// β_t for 1-based t.
    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.check_step(t)?])
    }

    /// ᾱ_t for 1-based t.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.check_step(t)?])
    }

    /// (ᾱ(x), β(x)) on x ∈ [0, 1]: piecewise-linear through the knots
    /// x = t/T carrying (ᾱ_t, T·β_t), with ᾱ(0) = 1 and β(0) = T·β_1.
    pub fn continuous(&self, x: f64) -> Result<(f64, f64)> {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::TimeOutOfRange(x));
        }
        let steps = self.steps();
        let scale = steps as f64;
        let knot_ab = |i: usize| if i == 0 { 1.0 } else { self.alpha_bars[i - 1] };
        let knot_beta = |i: usize| scale * self.betas[i.max(1) - 1];

        let u = x * scale;
        let nearest = u.round();
        if (u - nearest).abs() < 1e-9 {
            let i = nearest as usize;
            return Ok((knot_ab(i), knot_beta(i)));
        }
        let i = (u.floor() as usize).min(steps - 1);
        let frac = u - i as f64;
        let lerp = |a: f64, b: f64| a + frac * (b - a);
        Ok((lerp(knot_ab(i), knot_ab(i + 1)), lerp(knot_beta(i), knot_beta(i + 1))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_endpoints() {
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.beta(1).unwrap(), 0.00085);
        assert_eq!(s.beta(1000).unwrap(), 0.0120);
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.1, 0.2).unwrap();
        assert_eq!(s.alpha_bar(1).unwrap(), 1.0 - 0.1);
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(NoiseSchedule::linear(10, 0.0, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn step_bounds() {
        let s = NoiseSchedule::default();
        assert!(matches!(s.alpha_bar(0), Err(Error::StepOutOfRange { .. })));
        assert!(matches!(s.alpha_bar(1001), Err(Error::StepOutOfRange { .. })));
    }

    #[test]
    fn continuous_boundaries() {
        let s = NoiseSchedule::default();
        assert_eq!(s.continuous(0.0).unwrap().0, 1.0);
        assert!(s.continuous(-0.01).is_err());
        assert!(s.continuous(1.01).is_err());
    }

    #[test]
    fn scaled_linear_is_quadratic_in_sqrt() {
        let s = NoiseSchedule::scaled_linear(3, 0.01, 0.09).unwrap();
        let mid = (0.1f64 + 0.3) / 2.0;
        assert!((s.beta(2).unwrap() - mid * mid).abs() < 1e-15);
    }
}
