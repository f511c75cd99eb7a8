use crate::error::{Error, Result};

/// Per-epoch cosine schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub lr_max: f64,
    /// Total epochs.
    pub m: usize,
    /// Current epoch, 0-based.
    pub i: usize,
}

impl ScheduleConfig {
    pub fn lr(&self) -> Result<f64> {
        cosine_lr(self.lr_max, self.m, self.i)
    }
}

/// `lr_max · (1 + cos(π·i/m)) / 2`.
pub fn cosine_lr(lr_max: f64, m: usize, i: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::config("schedule needs at least one epoch"));
    }
    if i > m {
        return Err(Error::config(format!("epoch {i} beyond schedule length {m}")));
    }
    if !(lr_max > 0.0 && lr_max.is_finite()) {
        return Err(Error::config(format!("lr_max must be positive, got {lr_max}")));
    }
    let t = i as f64 / m as f64;
    Ok(lr_max * (1.0 + (t * std::f64::consts::PI).cos()) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        assert_eq!(cosine_lr(1e-4, 40, 0).unwrap(), 1e-4);
        assert_eq!(cosine_lr(1e-4, 40, 40).unwrap(), 0.0);
        assert!(cosine_lr(1e-4, 0, 0).is_err());
        assert!(cosine_lr(1e-4, 4, 5).is_err());
    }
}
