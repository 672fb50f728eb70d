//! Weight initialization.

use crate::rng::Rng;

/// Kaiming-uniform fan-in initialization: uniform in
/// `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]` (ReLU gain).
pub fn kaiming_uniform(rng: &mut Rng, count: usize, fan_in: usize) -> Vec<f32> {
    let bound = (6.0 / fan_in as f32).sqrt();
    (0..count).map(|_| rng.uniform(-bound, bound)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_within_bound() {
        let mut rng = Rng::new(1);
        let bound = (6.0f32 / 9.0).sqrt();
        for v in kaiming_uniform(&mut rng, 1000, 9) {
            assert!(v.abs() <= bound);
        }
    }

    #[test]
    fn seeded_init_reproduces() {
        let a = kaiming_uniform(&mut Rng::stream(9, "init"), 64, 27);
        let b = kaiming_uniform(&mut Rng::stream(9, "init"), 64, 27);
        assert_eq!(a, b);
    }
}
