use crate::real::Real;

pub const PREEMPHASIS_ALPHA: f64 = 0.85;

/// `y[t] = x[t] - alpha * x[t-1]` with `x[-1] = 0`.
pub fn preemphasis<F: Real>(x: &[F], alpha: F) -> Vec<F> {
    let mut prev = F::zero();
    x.iter()
        .map(|&v| {
            let y = v - alpha * prev;
            prev = v;
            y
        })
        .collect()
}

/// Exact IIR inverse of [`preemphasis`].
pub fn deemphasis<F: Real>(y: &[F], alpha: F) -> Vec<F> {
    let mut out = y.to_vec();
    deemphasis_in_place(&mut out, alpha);
    out
}

pub fn deemphasis_in_place<F: Real>(y: &mut [F], alpha: F) {
    let mut state = Deemphasis::new(alpha);
    for v in y.iter_mut() {
        *v = state.step(*v);
    }
}

/// Streaming de-emphasis filter.
#[derive(Debug, Clone)]
pub struct Deemphasis<F> {
    alpha: F,
    prev: F,
}

impl<F: Real> Deemphasis<F> {
    pub fn new(alpha: F) -> Self {
        Self {
            alpha,
            prev: F::zero(),
        }
    }

    #[inline]
    pub fn step(&mut self, v: F) -> F {
        let y = v + self.alpha * self.prev;
        self.prev = y;
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn impulse() {
        assert_eq!(preemphasis(&[1.0, 0.0, 0.0], 0.85), vec![1.0, -0.85, 0.0]);
    }

    #[test]
    fn dc() {
        let y = preemphasis(&[1.0f64; 5], 0.85);
        assert_eq!(y[0], 1.0);
        for v in &y[1..] {
            assert!((v - 0.15).abs() < 1e-15);
        }
    }

    proptest::proptest! {
        #[test]
        fn deemphasis_inverts(x in proptest::collection::vec(-1.0f64..1.0, 0..300)) {
            let back = deemphasis(&preemphasis(&x, 0.85), 0.85);
            for (a, b) in back.iter().zip(&x) {
                proptest::prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
