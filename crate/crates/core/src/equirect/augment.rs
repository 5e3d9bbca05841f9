use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::yaw_rotate_sample;
use crate::error::{Error, Result};
use crate::panosim::PanoSample;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JitterRanges {
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub saturation: (f64, f64),
    /// Hue shift as a fraction of the full colour circle.
    pub hue: (f64, f64),
}

impl Default for JitterRanges {
    fn default() -> Self {
        JitterRanges {
            brightness: (0.8, 1.2),
            contrast: (0.8, 1.2),
            saturation: (0.8, 1.2),
            hue: (-0.05, 0.05),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    /// Random integer-column yaw for every sample.
    pub rotation: bool,
    pub channel_shuffle_prob: f64,
    pub jitter_prob: f64,
    pub jitter: JitterRanges,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            rotation: true,
            channel_shuffle_prob: 0.5,
            jitter_prob: 0.5,
            jitter: JitterRanges::default(),
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    pub fn disabled() -> Self {
        AugmentationConfig {
            rotation: false,
            channel_shuffle_prob: 0.0,
            jitter_prob: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let j = &self.jitter;
        for (name, (lo, hi), centre) in [
            ("brightness", j.brightness, 1.0),
            ("contrast", j.contrast, 1.0),
            ("saturation", j.saturation, 1.0),
            ("hue", j.hue, 0.0),
        ] {
            if !(lo <= centre && centre <= hi) {
                return Err(Error::invalid(format!(
                    "{name} range [{lo}, {hi}] must contain {centre}"
                )));
            }
        }
        for p in [self.channel_shuffle_prob, self.jitter_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl JitterParams {
    pub const IDENTITY: JitterParams = JitterParams {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 0.0,
    };
}

fn draw(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo < hi {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

pub fn sample_jitter(ranges: &JitterRanges, rng: &mut impl Rng) -> JitterParams {
    JitterParams {
        brightness: draw(rng, ranges.brightness),
        contrast: draw(rng, ranges.contrast),
        saturation: draw(rng, ranges.saturation),
        hue: draw(rng, ranges.hue),
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h / 6.0, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

/// Brightness, contrast, saturation and hue adjustments on a planar
/// `[3][H][W]` colour buffer, clamped to `[0, 1]` after each stage.
pub fn apply_jitter(color: &[f64], p: &JitterParams) -> Vec<f64> {
    let hw = color.len() / 3;
    let mut c: Vec<f64> = color.iter().map(|v| (v * p.brightness).clamp(0.0, 1.0)).collect();
    let luma = |c: &[f64], i: usize| LUMA[0] * c[i] + LUMA[1] * c[hw + i] + LUMA[2] * c[2 * hw + i];
    if p.contrast != 1.0 {
        let mean = (0..hw).map(|i| luma(&c, i)).sum::<f64>() / hw as f64;
        for v in c.iter_mut() {
            *v = (mean + p.contrast * (*v - mean)).clamp(0.0, 1.0);
        }
    }
    if p.saturation != 1.0 {
        for i in 0..hw {
            let l = luma(&c, i);
            for ch in 0..3 {
                let v = &mut c[ch * hw + i];
                *v = (l + p.saturation * (*v - l)).clamp(0.0, 1.0);
            }
        }
    }
    if p.hue != 0.0 {
        for i in 0..hw {
            let (h, s, v) = rgb_to_hsv(c[i], c[hw + i], c[2 * hw + i]);
            let (r, g, b) = hsv_to_rgb(h + p.hue, s, v);
            c[i] = r.clamp(0.0, 1.0);
            c[hw + i] = g.clamp(0.0, 1.0);
            c[2 * hw + i] = b.clamp(0.0, 1.0);
        }
    }
    c
}

/// Jitter with factors drawn from `ranges` by a generator seeded with `seed`.
pub fn color_jitter(color: &[f64], ranges: &JitterRanges, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    apply_jitter(color, &sample_jitter(ranges, &mut rng))
}

/// Output channel `c` takes input channel `perm[c]`.
pub fn channel_shuffle(color: &[f64], perm: [usize; 3]) -> Result<Vec<f64>> {
    let mut seen = [false; 3];
    for &p in &perm {
        if p > 2 || std::mem::replace(&mut seen[p], true) {
            return Err(Error::invalid(format!("{perm:?} is not a permutation of 0..3")));
        }
    }
    let hw = color.len() / 3;
    Ok(perm
        .iter()
        .flat_map(|&p| color[p * hw..(p + 1) * hw].iter().copied())
        .collect())
}

pub fn invert_permutation(perm: [usize; 3]) -> [usize; 3] {
    let mut inv = [0; 3];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Seeded per-sample augmentation. The random stream depends only on the
/// configuration seed, the epoch and the sample key, never on visiting order.
#[derive(Debug, Clone)]
pub struct Augmenter {
    pub config: AugmentationConfig,
}

impl Augmenter {
    pub fn new(config: AugmentationConfig) -> Result<Self> {
        config.validate()?;
        Ok(Augmenter { config })
    }

    pub fn augment(&self, sample: &PanoSample, epoch: u64, key: u64) -> PanoSample {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ key);
        let mut out = if self.config.rotation {
            let k = rng.gen_range(0..sample.width);
            yaw_rotate_sample(sample, k)
        } else {
            sample.clone()
        };
        if rng.gen_bool(self.config.channel_shuffle_prob) {
            let mut perm = [0, 1, 2];
            perm.shuffle(&mut rng);
            out.color = channel_shuffle(&out.color, perm).expect("shuffled identity is a permutation");
        }
        if rng.gen_bool(self.config.jitter_prob) {
            let p = sample_jitter(&self.config.jitter, &mut rng);
            out.color = apply_jitter(&out.color, &p);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_color(seed: u64, hw: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..3 * hw).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    #[test]
    fn identity_jitter() {
        let c = random_color(1, 64);
        let forced = JitterParams {
            contrast: 1.0 + 1e-15,
            saturation: 1.0 - 1e-15,
            hue: 1e-15,
            ..JitterParams::IDENTITY
        };
        for p in [JitterParams::IDENTITY, forced] {
            let out = apply_jitter(&c, &p);
            assert!(out.iter().zip(&c).all(|(a, b)| (a - b).abs() < 1e-6));
        }
    }

    #[test]
    fn zero_brightness_is_black() {
        let c = random_color(2, 32);
        let out = apply_jitter(
            &c,
            &JitterParams {
                brightness: 0.0,
                ..JitterParams::IDENTITY
            },
        );
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn seeded_jitter_is_reproducible_and_bounded() {
        let c = random_color(3, 128);
        let r = JitterRanges::default();
        let a = color_jitter(&c, &r, 9);
        assert_eq!(a, color_jitter(&c, &r, 9));
        assert_ne!(a, color_jitter(&c, &r, 10));
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn hsv_roundtrip() {
        let c = random_color(4, 200);
        for i in 0..200 {
            let (h, s, v) = rgb_to_hsv(c[i], c[200 + i], c[400 + i]);
            let (r, g, b) = hsv_to_rgb(h, s, v);
            assert!((r - c[i]).abs() < 1e-12 && (g - c[200 + i]).abs() < 1e-12 && (b - c[400 + i]).abs() < 1e-12);
        }
    }

    #[test]
    fn shuffle_properties() {
        let c = random_color(5, 16);
        assert_eq!(channel_shuffle(&c, [0, 1, 2]).unwrap(), c);
        for perm in [[1, 2, 0], [2, 0, 1], [1, 0, 2], [2, 1, 0]] {
            let s = channel_shuffle(&c, perm).unwrap();
            assert_eq!(channel_shuffle(&s, invert_permutation(perm)).unwrap(), c);
        }
        let grey: Vec<f64> = c[..16].iter().cycle().take(48).copied().collect();
        assert_eq!(channel_shuffle(&grey, [2, 0, 1]).unwrap(), grey);
        assert!(channel_shuffle(&c, [0, 0, 1]).is_err());
        assert!(channel_shuffle(&c, [0, 1, 3]).is_err());
    }

    #[test]
    fn ranges_must_contain_identity() {
        let mut cfg = AugmentationConfig::default();
        cfg.validate().unwrap();
        cfg.jitter.hue = (0.01, 0.05);
        assert!(cfg.validate().is_err());
    }
}
