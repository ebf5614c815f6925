//! Soft fusion of the texture and topology heads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::ProbabilityMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    /// Confidence in the texture prediction.
    pub omega: f64,
    /// Foreground sums at or below this use the pure-background rule.
    pub renorm_epsilon: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            omega: 0.5,
            renorm_epsilon: 1e-8,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::Config(format!("omega {} outside [0, 1]", self.omega)));
        }
        if !(self.renorm_epsilon >= 0.0) {
            return Err(Error::Config("renorm_epsilon must be non-negative".into()));
        }
        Ok(())
    }
}

/// Fuses one pixel in place: `probs` holds the texture distribution on
/// entry and the fused distribution on return.
pub fn fuse_pixel(probs: &mut [f64], p_top: f64, cfg: &FusionConfig) {
    let w = cfg.omega;
    let fg_sum: f64 = probs[1..].iter().sum();
    probs[0] = (1.0 - w) * (1.0 - p_top) + w * probs[0];
    if fg_sum <= cfg.renorm_epsilon {
        // texture sees pure background: topology mass is shared evenly
        let share = (1.0 - w) * p_top / (probs.len() - 1) as f64;
        probs[0] += w * fg_sum;
        for p in &mut probs[1..] {
            *p = share;
        }
        return;
    }
    let scale = ((1.0 - w) * p_top + w * fg_sum) / fg_sum;
    for p in &mut probs[1..] {
        *p *= scale;
    }
}

/// Mixes `p_tex` (`c + 1` channels) with the single-channel foreground map
/// `p_top`: background gets `(1 - w)(1 - p_top) + w p_tex[0]` and the
/// foreground classes are rescaled in proportion to share the rest.
pub fn fuse(p_tex: &ProbabilityMap, p_top: &ProbabilityMap, cfg: &FusionConfig) -> Result<ProbabilityMap> {
    cfg.validate()?;
    if p_top.channels() != 1 || p_top.height() != p_tex.height() || p_top.width() != p_tex.width() {
        return Err(Error::shape(
            format!("1x{}x{}", p_tex.height(), p_tex.width()),
            format!("{}x{}x{}", p_top.channels(), p_top.height(), p_top.width()),
        ));
    }
    let c = p_tex.channels();
    if c < 2 {
        return Err(Error::shape("at least 2 texture channels", c));
    }
    let hw = p_tex.plane();
    let src = p_tex.data();
    let mut out = vec![0.0; src.len()];
    let mut pixel = vec![0.0; c];
    for i in 0..hw {
        for k in 0..c {
            pixel[k] = src[k * hw + i];
        }
        fuse_pixel(&mut pixel, p_top.data()[i], cfg);
        for k in 0..c {
            out[k * hw + i] = pixel[k].clamp(0.0, 1.0);
        }
    }
    ProbabilityMap::new(p_tex.height(), p_tex.width(), c, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(omega: f64) -> FusionConfig {
        FusionConfig { omega, ..Default::default() }
    }

    fn random_pixel(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..c).map(|_| rng.random::<f64>()).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    }

    #[test]
    fn worked_example() {
        let mut p = vec![0.5, 0.3, 0.2];
        fuse_pixel(&mut p, 0.8, &cfg(0.5));
        for (got, want) in p.iter().zip([0.35, 0.39, 0.26]) {
            assert!((got - want).abs() < 1e-9, "{p:?}");
        }
    }

    #[test]
    fn omega_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let tex = random_pixel(&mut rng, 4);
            let top: f64 = rng.random();
            let mut one = tex.clone();
            fuse_pixel(&mut one, top, &cfg(1.0));
            assert_eq!(one, tex);
            let mut zero = tex.clone();
            fuse_pixel(&mut zero, top, &cfg(0.0));
            let s: f64 = tex[1..].iter().sum();
            assert_eq!(zero[0], 1.0 - top);
            for k in 1..4 {
                assert_eq!(zero[k], top / s * tex[k]);
            }
        }
    }

    #[test]
    fn normalization_on_random_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100_000 {
            let c = rng.random_range(2..6);
            let mut p = random_pixel(&mut rng, c);
            let omega: f64 = rng.random();
            fuse_pixel(&mut p, rng.random(), &cfg(omega));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn pure_background_guard() {
        let mut p = vec![1.0, 0.0, 0.0];
        fuse_pixel(&mut p, 0.6, &cfg(0.5));
        assert!((p[0] - 0.7).abs() < 1e-15);
        assert!((p[1] - 0.15).abs() < 1e-15 && (p[2] - 0.15).abs() < 1e-15);
    }

    #[test]
    fn map_level_fuse_and_shape_checks() {
        let tex = ProbabilityMap::new(1, 2, 3, vec![0.5, 1.0, 0.3, 0.0, 0.2, 0.0]).unwrap();
        let top = ProbabilityMap::new(1, 2, 1, vec![0.8, 0.6]).unwrap();
        let f = fuse(&tex, &top, &FusionConfig::default()).unwrap();
        assert!((f.get(1, 0, 0) - 0.39).abs() < 1e-9);
        assert!((f.get(0, 0, 1) - 0.7).abs() < 1e-12);
        let bad = ProbabilityMap::new(1, 1, 1, vec![0.5]).unwrap();
        assert!(fuse(&tex, &bad, &FusionConfig::default()).is_err());
        assert!(fuse(&tex, &top, &cfg(1.5)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn foreground_ratios_preserved(seed in any::<u64>(), omega in 0.0f64..=1.0, top in 0.0f64..=1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tex = random_pixel(&mut rng, 4);
            let mut p = tex.clone();
            fuse_pixel(&mut p, top, &cfg(omega));
            for i in 1..4 {
                for j in 1..4 {
                    prop_assert!((p[i] * tex[j] - p[j] * tex[i]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn monotone_in_topology(seed in any::<u64>(), omega in 0.0f64..0.99, t0 in 0.0f64..1.0, dt in 0.001f64..0.5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tex = random_pixel(&mut rng, 3);
            let t1 = (t0 + dt).min(1.0);
            prop_assume!(t1 > t0);
            let mut a = tex.clone();
            let mut b = tex.clone();
            fuse_pixel(&mut a, t0, &cfg(omega));
            fuse_pixel(&mut b, t1, &cfg(omega));
            prop_assert!(b[0] < a[0]);
            for k in 1..3 {
                prop_assert!(b[k] > a[k]);
            }
        }
    }
}
