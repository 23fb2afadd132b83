//! Warmup / linear-decay learning-rate schedule.

/// Linear ramp from 0 to `peak_lr` over `warmup_steps`, then linear decay to
/// 0 at `warmup_steps + decay_steps`, 0 afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub decay_steps: u64,
}

/// Learning rate at step `t`. Piecewise linear, continuous for
/// `decay_steps >= 1`, and non-negative everywhere. With `decay_steps = 0`
/// the rate drops straight to 0 after the warmup peak.
pub fn lr_at_step(schedule: &ScheduleConfig, t: u64) -> f64 {
    let ScheduleConfig {
        peak_lr,
        warmup_steps,
        decay_steps,
    } = *schedule;
    if t <= warmup_steps {
        if warmup_steps == 0 {
            return peak_lr;
        }
        peak_lr * t as f64 / warmup_steps as f64
    } else if t < warmup_steps + decay_steps {
        peak_lr * (1.0 - (t - warmup_steps) as f64 / decay_steps as f64)
    } else {
        0.0
    }
}
