/// Learning-rate multiplier schedules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Constant,
    /// Linear ramp from 0 to 1 over the first `warmup_fraction` of
    /// `total_steps`, then linear decay to 0 at `total_steps`.
    WarmupLinear { total_steps: u64, warmup_fraction: f64 },
    /// Cosine from 1 to 0 over `t0` steps, restarting with the period
    /// multiplied by `t_mult` after each cycle.
    CosineWarmRestarts { t0: u64, t_mult: u64 },
}

impl Schedule {
    pub fn factor(&self, step: u64) -> f64 {
        schedule_factor(step, self)
    }
}

pub fn warmup_steps(total_steps: u64, warmup_fraction: f64) -> u64 {
    libm::round(total_steps as f64 * warmup_fraction) as u64
}

pub fn schedule_factor(step: u64, kind: &Schedule) -> f64 {
    match *kind {
        Schedule::Constant => 1.0,
        Schedule::WarmupLinear {
            total_steps,
            warmup_fraction,
        } => {
            let warmup = warmup_steps(total_steps, warmup_fraction);
            if step < warmup {
                step as f64 / warmup as f64
            } else if step >= total_steps {
                0.0
            } else {
                (total_steps - step) as f64 / (total_steps - warmup) as f64
            }
        }
        Schedule::CosineWarmRestarts { t0, t_mult } => {
            let t0 = t0.max(1);
            let (mut start, mut period) = (0u64, t0);
            while step >= start + period {
                start += period;
                period = period.saturating_mul(t_mult.max(1));
            }
            let progress = (step - start) as f64 / period as f64;
            0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))
        }
    }
}
