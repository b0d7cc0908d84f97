use std::f64::consts::PI;

/// Linear warmup from 0 to `base_lr`, then half-period cosine decay.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1) as f64;
    let progress = (step - warmup_steps) as f64 / span;
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}
