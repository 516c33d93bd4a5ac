use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

pub type Rgb = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TorsoPattern {
    Plain,
    HStripes,
    VStripes,
    Checker,
}

impl TorsoPattern {
    pub const ALL: [TorsoPattern; 4] = [Self::Plain, Self::HStripes, Self::VStripes, Self::Checker];
}

/// Appearance of one synthetic pedestrian. Identities in the same colour
/// family differ only in the one-pixel torso texture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub id: usize,
    pub torso_color: Rgb,
    pub accent_color: Rgb,
    pub leg_color: Rgb,
    pub head_tone: Rgb,
    /// Head, torso and leg heights as fractions of the frame height.
    pub body_proportions: [f64; 3],
    /// Torso width as a fraction of the frame width.
    pub build: f64,
    pub pattern: TorsoPattern,
    pub texture_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub brightness: f64,
    pub translation: [i32; 2],
    pub noise_sigma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterConfig {
    pub brightness: f64,
    pub translation_px: i32,
    pub noise_sigma: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self {
            brightness: 0.15,
            translation_px: 2,
            noise_sigma: 0.02,
        }
    }
}

impl JitterConfig {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Jitter {
        let t = self.translation_px;
        Jitter {
            brightness: if self.brightness > 0.0 {
                rng.gen_range(-self.brightness..=self.brightness)
            } else {
                0.0
            },
            translation: [rng.gen_range(-t..=t), rng.gen_range(-t..=t)],
            noise_sigma: self.noise_sigma,
        }
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    inv_2s2: f64,
    amp: Rgb,
}

/// Renders `spec` seen by a camera whose backdrop is `backdrop`. Background
/// blobs and sensor noise are drawn from `rng`.
pub fn render(
    spec: &IdentitySpec,
    backdrop: Rgb,
    jitter: &Jitter,
    (h, w): (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Tensor {
    let (hf, wf) = (h as f64, w as f64);
    let blobs: Vec<Blob> = (0..3)
        .map(|_| {
            let s: f64 = rng.gen_range(0.1..0.3) * wf;
            Blob {
                cy: rng.gen_range(0.0..hf),
                cx: rng.gen_range(0.0..wf),
                inv_2s2: 1.0 / (2.0 * s * s),
                amp: [0; 3].map(|_| rng.gen_range(-0.25..0.25)),
            }
        })
        .collect();

    let [ph, pt, pl] = spec.body_proportions;
    let [dx, dy] = jitter.translation;
    let top = (0.04 * hf).round() + dy as f64;
    let head_end = top + (ph * hf).round();
    let torso_end = head_end + (pt * hf).round();
    let legs_end = torso_end + (pl * hf).round();
    let cx = wf / 2.0 + dx as f64;
    let head_ry = (head_end - top) / 2.0;
    let head_rx = 0.16 * wf;
    let head_cy = top + head_ry;
    let torso_half = spec.build * wf / 2.0;
    let torso_left = (cx - torso_half).round();
    let leg_w = 0.2 * wf;
    let gap = 0.06 * wf;
    let phase = (spec.texture_seed & 1) as i64;

    let noise = Normal::new(0.0, jitter.noise_sigma.max(0.0)).expect("finite sigma");
    let mut data = vec![0.0; 3 * h * w];
    for r in 0..h {
        let y = r as f64 + 0.5;
        for c in 0..w {
            let x = c as f64 + 0.5;
            let color: Rgb = if y >= top
                && y < head_end
                && ((y - head_cy) / head_ry).powi(2) + ((x - cx) / head_rx).powi(2) <= 1.0
            {
                spec.head_tone
            } else if y >= head_end && y < torso_end && (x - cx).abs() < torso_half {
                let tr = r as i64 - head_end as i64;
                let tc = c as i64 - torso_left as i64;
                let accent = match spec.pattern {
                    TorsoPattern::Plain => false,
                    TorsoPattern::HStripes => (tr + phase) % 2 == 0,
                    TorsoPattern::VStripes => (tc + phase) % 2 == 0,
                    TorsoPattern::Checker => (tr + tc + phase) % 2 == 0,
                };
                if accent {
                    spec.accent_color
                } else {
                    spec.torso_color
                }
            } else if y >= torso_end && y < legs_end && {
                let off = (x - cx).abs();
                off >= gap / 2.0 && off < gap / 2.0 + leg_w
            } {
                spec.leg_color
            } else {
                let mut bg = backdrop;
                for b in &blobs {
                    let g = (-((y - b.cy).powi(2) + (x - b.cx).powi(2)) * b.inv_2s2).exp();
                    for ch in 0..3 {
                        bg[ch] += b.amp[ch] * g;
                    }
                }
                bg
            };
            for ch in 0..3 {
                let v = color[ch] + jitter.brightness + noise.sample(rng);
                data[ch * h * w + r * w + c] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_parts_unchecked(vec![3, h, w], data)
}
