use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleKind {
    Trapezoid,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LrSchedule {
    /// Linear warm-up over `warmup` steps, constant until `plateau_end`,
    /// then linear decay to zero over `cooldown` steps.
    Trapezoid {
        warmup: usize,
        plateau_end: usize,
        cooldown: usize,
        peak: f64,
    },
    Cosine {
        peak: f64,
        min: f64,
        steps: usize,
    },
}

impl LrSchedule {
    pub fn len(&self) -> usize {
        match *self {
            Self::Trapezoid {
                plateau_end,
                cooldown,
                ..
            } => plateau_end + cooldown,
            Self::Cosine { steps, .. } => steps,
        }
    }

    pub fn rate(&self, t: usize) -> Result<f64> {
        match *self {
            Self::Trapezoid {
                warmup,
                plateau_end,
                cooldown,
                peak,
            } => trapezoid_lr(t, warmup, plateau_end, cooldown, peak),
            Self::Cosine { peak, min, steps } => {
                if t >= steps {
                    return Err(Error::ScheduleExhausted { step: t, len: steps });
                }
                let c = (std::f64::consts::PI * t as f64 / steps as f64).cos();
                Ok(min + 0.5 * (peak - min) * (1.0 + c))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Trapezoid {
                warmup,
                plateau_end,
                cooldown,
                peak,
            } => {
                if warmup > plateau_end || cooldown == 0 || !(peak >= 0.0) {
                    return Err(Error::Config(format!(
                        "trapezoid needs warmup <= plateau end, cooldown > 0 and a non-negative peak \
                         (got {warmup}, {plateau_end}, {cooldown}, {peak})"
                    )));
                }
            }
            Self::Cosine { peak, min, steps } => {
                if steps == 0 || !(min >= 0.0) || !(peak >= min) {
                    return Err(Error::Config(format!(
                        "cosine needs steps > 0 and 0 <= min <= peak (got {steps}, {min}, {peak})"
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn trapezoid_lr(t: usize, w: usize, p: usize, d: usize, peak: f64) -> Result<f64> {
    if t >= p + d {
        return Err(Error::ScheduleExhausted { step: t, len: p + d });
    }
    Ok(if t < w {
        t as f64 / w as f64 * peak
    } else if t < p {
        peak
    } else {
        peak * (1.0 - (t - p) as f64 / d as f64)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trapezoid_shape() {
        assert_eq!(trapezoid_lr(0, 10, 80, 20, 1e-3).unwrap(), 0.0);
        assert_eq!(trapezoid_lr(10, 10, 80, 20, 1e-3).unwrap(), 1e-3);
        assert_eq!(trapezoid_lr(90, 10, 80, 20, 1e-3).unwrap(), 5e-4);
        assert!(matches!(
            trapezoid_lr(100, 10, 80, 20, 1e-3),
            Err(Error::ScheduleExhausted { step: 100, len: 100 })
        ));
    }

    #[test]
    fn cosine_endpoints() {
        let s = LrSchedule::Cosine {
            peak: 1.0,
            min: 0.1,
            steps: 100,
        };
        assert_eq!(s.rate(0).unwrap(), 1.0);
        assert!((s.rate(50).unwrap() - 0.55).abs() < 1e-12);
        assert!(s.rate(100).is_err());
    }
}
