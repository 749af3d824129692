//! Learning-rate and KL-penalty schedules: linear warmup over the first
//! epoch then cosine decay to zero for the learning rate; linear warmup of
//! the KL weight over the first ten epochs, constant afterwards.

/// Learning rate at optimizer step `step` (0-based).
pub fn lr_schedule(step: usize, steps_per_epoch: usize, total_epochs: usize, base_lr: f64) -> f64 {
    let spe = steps_per_epoch.max(1);
    if step < spe {
        return base_lr * step as f64 / spe as f64;
    }
    let total = spe * total_epochs.max(2);
    let after = (step - spe) as f64;
    let span = (total - spe) as f64;
    let t = (after / span).clamp(0.0, 1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// KL weight after `epochs_completed` (fractional) of warmup toward beta.
pub fn kl_schedule(epochs_completed: f64, beta: f64) -> f64 {
    beta * (epochs_completed / 10.0).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_warmup_endpoints() {
        let spe = 40;
        assert_eq!(lr_schedule(0, spe, 25, 3e-4), 0.0);
        assert!((lr_schedule(spe, spe, 25, 3e-4) - 3e-4).abs() < 1e-18);
        // decays to zero by the final step
        let last = lr_schedule(spe * 25, spe, 25, 3e-4);
        assert!(last < 1e-9, "{last}");
        // monotone decay after warmup
        let a = lr_schedule(spe * 5, spe, 25, 3e-4);
        let b = lr_schedule(spe * 15, spe, 25, 3e-4);
        assert!(a > b);
    }

    #[test]
    fn kl_warmup_over_ten_epochs() {
        let beta = 0.01;
        assert_eq!(kl_schedule(0.0, beta), 0.0);
        assert!((kl_schedule(5.0, beta) - 0.005).abs() < 1e-15);
        assert_eq!(kl_schedule(10.0, beta), beta);
        assert_eq!(kl_schedule(17.5, beta), beta);
    }
}
