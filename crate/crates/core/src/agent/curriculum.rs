use log::warn;
use serde::{Deserialize, Serialize};

use super::AgentError;

/// Loop-weight schedule endpoints plus the smoothed loop-loss observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub w0: f64,
    pub w_final: f64,
    pub alpha: f64,
    pub ema: f64,
    pub progress: f64,
    initialized: bool,
}

impl Default for CurriculumState {
    fn default() -> Self {
        CurriculumState { w0: 0.1, w_final: 1.0, alpha: 0.9, ema: 0.0, progress: 0.0, initialized: false }
    }
}

impl CurriculumState {
    pub fn new(w0: f64, w_final: f64, alpha: f64) -> Result<Self, AgentError> {
        if !(0.0 <= w0 && w0 <= w_final && w_final.is_finite()) {
            return Err(AgentError::InvalidConfig(format!("need 0 <= w0 <= wF, got w0={w0}, wF={w_final}")));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(AgentError::InvalidConfig(format!("EMA alpha must lie in (0, 1), got {alpha}")));
        }
        Ok(CurriculumState { w0, w_final, alpha, ..Default::default() })
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Linear interpolation between `w0` and `wF`; `a` is clamped to `[0, 1]`.
    pub fn weight(&self, a: f64) -> f64 {
        curriculum_weight(self, a)
    }

    /// The first call seeds the average with `|loss|`.
    pub fn update_ema(&mut self, loop_loss_value: f64) {
        let x = loop_loss_value.abs();
        if self.initialized {
            self.ema = self.alpha * self.ema + (1.0 - self.alpha) * x;
        } else {
            self.ema = x;
            self.initialized = true;
        }
    }

    pub fn set_progress(&mut self, p: f64) {
        self.progress = p.clamp(0.0, 1.0);
    }

    pub fn build_state(&self) -> Result<[f64; 2], AgentError> {
        if !self.initialized {
            return Err(AgentError::UninitializedEma);
        }
        Ok([self.progress, self.ema])
    }

    pub fn reward(&self) -> Result<f64, AgentError> {
        if !self.initialized {
            return Err(AgentError::UninitializedEma);
        }
        Ok(-self.ema)
    }
}

pub fn curriculum_weight(cs: &CurriculumState, a: f64) -> f64 {
    let a = if (0.0..=1.0).contains(&a) {
        a
    } else {
        warn!("action {a} outside [0, 1]; clamping");
        if a.is_nan() { 0.0 } else { a.clamp(0.0, 1.0) }
    };
    cs.w0 + (cs.w_final - cs.w0) * a
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_schedule() {
        let cs = CurriculumState::default();
        assert_eq!(cs.weight(0.0), 0.1);
        assert_eq!(cs.weight(1.0), 1.0);
        assert!((cs.weight(0.5778) - 0.62).abs() < 1e-4);
        assert_eq!(cs.weight(1.7), 1.0);
        assert_eq!(cs.weight(-0.2), 0.1);
        assert!(CurriculumState::new(0.5, 0.1, 0.9).is_err());
        assert!(CurriculumState::new(0.1, 1.0, 1.0).is_err());
    }

    #[test]
    fn ema_recurrence() {
        let mut cs = CurriculumState::default();
        assert_eq!(cs.build_state(), Err(AgentError::UninitializedEma));
        cs.update_ema(-1.0);
        assert_eq!(cs.ema, 1.0);
        cs.update_ema(0.5);
        assert!((cs.ema - 0.95).abs() < 1e-15);

        let mut fixed = CurriculumState::default();
        fixed.update_ema(0.3);
        fixed.update_ema(0.3);
        assert_eq!(fixed.ema, 0.3);

        let mut conv = CurriculumState::default();
        conv.update_ema(10.0);
        for _ in 0..200 {
            conv.update_ema(2.0);
        }
        assert!((conv.ema - 2.0).abs() < 1e-6);
    }

    #[test]
    fn state_and_reward() {
        let mut cs = CurriculumState::default();
        cs.update_ema(0.95);
        cs.set_progress(0.5);
        assert_eq!(cs.build_state().unwrap(), [0.5, 0.95]);
        assert_eq!(cs.reward().unwrap(), -0.95);
        let mut z = CurriculumState::default();
        z.update_ema(0.0);
        assert_eq!(z.build_state().unwrap(), [0.0, 0.0]);
        assert_eq!(z.reward().unwrap(), 0.0);
    }
}
