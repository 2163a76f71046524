use std::f64::consts::PI;

/// Adam, or AdamW when `weight_decay` is non-zero (decay is decoupled and
/// applied before the moment update).
///
/// Moment buffers live in numbered slots. A caller passes only the slots it
/// wants updated; untouched slots keep their state.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn adamw(weight_decay: f64) -> Self {
        Self {
            weight_decay,
            ..Self::new()
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Advances the shared step counter. Call once per optimizer step,
    /// before the per-slot updates.
    pub fn tick(&mut self) {
        self.step += 1;
    }

    /// Updates `values` in place from `grad` with learning rate `lr`.
    pub fn update(&mut self, slot: usize, values: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(values.len(), grad.len(), "slot {slot}: gradient length");
        assert!(self.step > 0, "tick() before update()");
        if self.m.len() <= slot {
            self.m.resize(slot + 1, Vec::new());
            self.v.resize(slot + 1, Vec::new());
        }
        if self.m[slot].is_empty() {
            self.m[slot] = vec![0.0; values.len()];
            self.v[slot] = vec![0.0; values.len()];
        }
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let decay = 1.0 - lr * self.weight_decay;
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        for i in 0..values.len() {
            let gi = grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            if self.weight_decay != 0.0 {
                values[i] *= decay;
            }
            values[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Cosine annealing from `lr0` at epoch 0 to 0 at epoch `total`.
pub fn cosine_lr(lr0: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * 0.5 * (1.0 + (PI * epoch as f64 / total as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_values() {
        let mut opt = Adam::new();
        let mut x = vec![1.5, -2.0];
        opt.tick();
        opt.update(0, &mut x, &[0.0, 0.0], 0.1);
        assert_eq!(x, vec![1.5, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut opt = Adam::new();
        let mut x = vec![1.0];
        opt.tick();
        opt.update(0, &mut x, &[1.0], 0.1);
        assert!((x[0] - 0.9).abs() < 1e-7, "{}", x[0]);
    }

    #[test]
    fn adamw_decays_without_gradient() {
        let mut opt = Adam::adamw(0.1);
        let mut x = vec![2.0, -4.0];
        opt.tick();
        opt.update(0, &mut x, &[0.0, 0.0], 0.1);
        assert!((x[0] - 1.98).abs() < 1e-15);
        assert!((x[1] + 3.96).abs() < 1e-15);
    }

    #[test]
    fn untouched_slots_keep_state() {
        let mut opt = Adam::new();
        let mut a = vec![0.0];
        let mut b = vec![0.0];
        opt.tick();
        opt.update(0, &mut a, &[1.0], 0.01);
        opt.update(1, &mut b, &[1.0], 0.01);
        let frozen = b.clone();
        for _ in 0..5 {
            opt.tick();
            opt.update(0, &mut a, &[1.0], 0.01);
        }
        assert_eq!(b, frozen);
        assert!(a[0] < -0.05);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.2, 0, 10), 0.2);
        assert!((cosine_lr(0.2, 5, 10) - 0.1).abs() < 1e-15);
        assert!(cosine_lr(0.2, 10, 10).abs() < 1e-15);
    }
}
