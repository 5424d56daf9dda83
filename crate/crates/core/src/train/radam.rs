use crate::model::ModelParams;

/// Rectified Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct RAdam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl RAdam {
    pub fn new(params: &ModelParams<f64>) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Length of the approximated simple moving average at step `t`.
    pub fn rho(&self, t: u64) -> f64 {
        let rho_inf = 2.0 / (1.0 - self.beta2) - 1.0;
        let b2t = self.beta2.powf(t as f64);
        rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t)
    }

    /// Variance rectification factor, `None` while the adaptive step is
    /// undefined.
    pub fn rectifier(&self, t: u64) -> Option<f64> {
        let rho_inf = 2.0 / (1.0 - self.beta2) - 1.0;
        let rho = self.rho(t);
        (rho > 4.0).then(|| {
            ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt()
        })
    }

    pub fn update(&mut self, params: &mut ModelParams<f64>, grads: &ModelParams<f64>, lr: f64) {
        self.step += 1;
        let t = self.step;
        let bc1 = 1.0 - self.beta1.powf(t as f64);
        let bc2 = 1.0 - self.beta2.powf(t as f64);
        let rect = self.rectifier(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let delta = match rect {
                    Some(r) => r * m_hat / ((v[i] / bc2).sqrt() + eps),
                    None => m_hat,
                };
                p.data[i] -= lr * delta;
            }
        }
        params.apply_masks();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetworkConfig;
    use rand::SeedableRng;

    fn toy() -> ModelParams<f64> {
        ModelParams::init(NetworkConfig::toy_16k(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = toy();
        let before = p.clone();
        let g = p.zeros_like();
        let mut opt = RAdam::new(&p);
        for _ in 0..10 {
            opt.update(&mut p, &g, 1e-3);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn rectification_starts_after_step_four() {
        let opt = RAdam::new(&toy());
        // rho_t for beta2 = 0.999: 1.0, 1.999, 2.998, 3.997, 4.996, ...
        assert!(opt.rectifier(4).is_none());
        assert!(opt.rectifier(5).is_some());
        assert!((opt.rho(1) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn scalar_hand_computation() {
        // One parameter, gradient 0.5 each step, lr 0.1.
        // Step 1: m = 0.05, m_hat = 0.5, rho_1 = 1 <= 4 so theta -= 0.1 * 0.5.
        let mut p = toy();
        for t in p.tensors_mut() {
            t.data.fill(0.0);
        }
        let mut g = p.zeros_like();
        g.cond_fc.b[0] = 0.5;
        let mut opt = RAdam::new(&p);
        opt.update(&mut p, &g, 0.1);
        assert!((p.cond_fc.b[0] + 0.05).abs() < 1e-15);
        for _ in 0..4 {
            opt.update(&mut p, &g, 0.1);
        }
        // Steps 2-4 are momentum steps of m_hat = 0.5; step 5 is rectified.
        // r_5 = sqrt((rho5-4)(rho5-2) rho_inf / ((rho_inf-4)(rho_inf-2) rho5)) and
        // the adaptive ratio m_hat / sqrt(v_hat) = 1 for a constant gradient.
        let rho_inf = 2.0 / 0.001 - 1.0;
        let b2t: f64 = 0.999f64.powi(5);
        let rho5 = rho_inf - 2.0 * 5.0 * b2t / (1.0 - b2t);
        let r5 = ((rho5 - 4.0) * (rho5 - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho5)).sqrt();
        let want = -0.05 * 4.0 - 0.1 * r5 * 0.5 / (0.5 + 1e-8);
        assert!((p.cond_fc.b[0] - want).abs() < 1e-12, "{} vs {want}", p.cond_fc.b[0]);
        assert_eq!(p.cond_fc.b[1], 0.0);
    }

    #[test]
    fn masked_weights_stay_zero() {
        let mut p = toy();
        let mask = p.sparse_gru.mask.as_mut().unwrap();
        for (i, k) in mask.keep.iter_mut().enumerate() {
            *k = i % 4 == 0;
        }
        p.apply_masks();
        let mut g = p.zeros_like();
        g.sparse_gru.w_rec.data.fill(1.0);
        let mut opt = RAdam::new(&p);
        opt.update(&mut p, &g, 0.1);
        let m = p.sparse_gru.mask.clone().unwrap();
        for r in 0..m.rows {
            for c in 0..m.cols {
                if !m.covers(r, c) {
                    assert_eq!(p.sparse_gru.w_rec.at(r, c), 0.0);
                }
            }
        }
    }
}
