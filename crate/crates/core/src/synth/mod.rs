//! Procedural pedestrian-like identities rendered under several cameras.
//!
//! Identities are grouped into colour families of four. Members of a family
//! share torso, accent and leg colours and differ in torso texture (plain,
//! horizontal stripes, vertical stripes, checker), so telling them apart
//! needs fine detail. Every render gets a fresh background, so identity is
//! the only stable signal across views.

mod manifest;
mod ppm;
mod render;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use manifest::{image_rel_path, read_dataset, write_dataset, ManifestEntry, MANIFEST_FILE};
pub use ppm::{decode_ppm, encode_ppm, read_image, write_image};
pub use render::{render, IdentitySpec, Jitter, JitterConfig, Rgb, TorsoPattern};

use crate::error::{Error, Result};
use crate::seeds::rng_for;
use crate::tensor::Tensor;

const TORSO_PALETTE: [Rgb; 6] = [
    [0.80, 0.15, 0.15],
    [0.15, 0.35, 0.80],
    [0.15, 0.65, 0.25],
    [0.85, 0.75, 0.15],
    [0.55, 0.20, 0.65],
    [0.90, 0.50, 0.10],
];
const ACCENT_PALETTE: [Rgb; 3] = [[0.95, 0.95, 0.92], [0.08, 0.08, 0.10], [0.55, 0.55, 0.55]];
const LEG_PALETTE: [Rgb; 4] = [
    [0.12, 0.14, 0.30],
    [0.25, 0.25, 0.25],
    [0.45, 0.35, 0.22],
    [0.20, 0.30, 0.20],
];
const SKIN_TONES: [Rgb; 4] = [
    [0.96, 0.80, 0.69],
    [0.87, 0.67, 0.52],
    [0.66, 0.46, 0.33],
    [0.43, 0.29, 0.20],
];
const CAMERA_BACKDROPS: [Rgb; 4] = [
    [0.55, 0.58, 0.52],
    [0.48, 0.50, 0.60],
    [0.62, 0.55, 0.45],
    [0.42, 0.50, 0.45],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Query, Split::Gallery];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewRender {
    pub identity_id: usize,
    pub camera_id: usize,
    pub view: usize,
    pub image: Tensor,
    pub jitter: Jitter,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub identities: Vec<IdentitySpec>,
    pub train: Vec<ViewRender>,
    pub query: Vec<ViewRender>,
    pub gallery: Vec<ViewRender>,
    /// True when no training identity appears in query or gallery.
    pub disjoint_train: bool,
}

impl DatasetSplits {
    pub fn split(&self, s: Split) -> &[ViewRender] {
        match s {
            Split::Train => &self.train,
            Split::Query => &self.query,
            Split::Gallery => &self.gallery,
        }
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.train
            .iter()
            .chain(&self.query)
            .chain(&self.gallery)
            .next()
            .map(|v| v.image.shape())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_ids: usize,
    pub views_per_id: usize,
    pub height: usize,
    pub width: usize,
    /// Views per identity routed to training (capped so query and gallery
    /// keep at least one view each).
    pub train_views: usize,
    pub query_views: usize,
    pub n_cameras: usize,
    /// Train on the first half of the identities, evaluate on the rest.
    pub disjoint_train: bool,
    pub jitter: JitterConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_ids: 32,
            views_per_id: 8,
            height: 32,
            width: 16,
            train_views: 4,
            query_views: 1,
            n_cameras: 4,
            disjoint_train: false,
            jitter: JitterConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn new(n_ids: usize, views_per_id: usize, (height, width): (usize, usize)) -> Self {
        Self {
            n_ids,
            views_per_id,
            height,
            width,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_ids < 2 {
            return Err(Error::Config(format!("n_ids must be >= 2, got {}", self.n_ids)));
        }
        if self.views_per_id < 2 {
            return Err(Error::Config(format!(
                "views_per_id must be >= 2, got {}",
                self.views_per_id
            )));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "image must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if self.query_views == 0 || self.query_views >= self.views_per_id {
            return Err(Error::Config(format!(
                "query_views must be in 1..{}, got {}",
                self.views_per_id, self.query_views
            )));
        }
        if self.n_cameras == 0 {
            return Err(Error::Config("n_cameras must be positive".into()));
        }
        let j = &self.jitter;
        if !(j.brightness >= 0.0 && j.noise_sigma >= 0.0 && j.translation_px >= 0) {
            return Err(Error::Config("jitter magnitudes must be non-negative".into()));
        }
        Ok(())
    }

    /// Number of training views per identity in the shared-identity layout.
    fn n_train_views(&self) -> usize {
        self.train_views.min(self.views_per_id - self.query_views - 1)
    }
}

fn jitter_color(c: Rgb, amount: f64, rng: &mut impl Rng) -> Rgb {
    c.map(|v| (v + rng.gen_range(-amount..=amount)).clamp(0.0, 1.0))
}

pub fn gen_identities(n_ids: usize, seed: u64) -> Vec<IdentitySpec> {
    let mut rng = rng_for(seed, ["synth", "identities"]);
    let mut families: Vec<(usize, usize, usize)> = (0..TORSO_PALETTE.len())
        .flat_map(|t| (0..ACCENT_PALETTE.len()).flat_map(move |a| (0..LEG_PALETTE.len()).map(move |l| (t, a, l))))
        .collect();
    families.shuffle(&mut rng);
    (0..n_ids)
        .map(|id| {
            let (t, a, l) = families[(id / 4) % families.len()];
            IdentitySpec {
                id,
                torso_color: jitter_color(TORSO_PALETTE[t], 0.03, &mut rng),
                accent_color: jitter_color(ACCENT_PALETTE[a], 0.03, &mut rng),
                leg_color: jitter_color(LEG_PALETTE[l], 0.03, &mut rng),
                head_tone: SKIN_TONES[rng.gen_range(0..SKIN_TONES.len())],
                body_proportions: [
                    rng.gen_range(0.15..0.19),
                    rng.gen_range(0.32..0.38),
                    rng.gen_range(0.34..0.40),
                ],
                build: rng.gen_range(0.50..0.62),
                pattern: TorsoPattern::ALL[id % 4],
                texture_seed: rng.gen(),
            }
        })
        .collect()
}

fn camera_backdrop(camera: usize, seed: u64) -> Rgb {
    match CAMERA_BACKDROPS.get(camera) {
        Some(c) => *c,
        None => {
            let mut rng = rng_for(seed, ["synth", "camera", &camera.to_string()]);
            [0; 3].map(|_| rng.gen_range(0.35..0.65))
        }
    }
}

/// Renders one view of every identity and routes views to splits. View `v`
/// of identity `i` is seen by camera `v % n_cameras`.
pub fn gen_dataset_with(cfg: &DatasetConfig, seed: u64) -> Result<DatasetSplits> {
    cfg.validate()?;
    let identities = gen_identities(cfg.n_ids, seed);
    let n_train_ids = if cfg.disjoint_train { cfg.n_ids / 2 } else { 0 };
    let mut out = DatasetSplits {
        identities: identities.clone(),
        train: Vec::new(),
        query: Vec::new(),
        gallery: Vec::new(),
        disjoint_train: cfg.disjoint_train,
    };
    for spec in &identities {
        for view in 0..cfg.views_per_id {
            let camera = view % cfg.n_cameras;
            let mut rng = rng_for(seed, ["synth", "render", &spec.id.to_string(), &view.to_string()]);
            let jitter = cfg.jitter.sample(&mut rng);
            let image = render(
                spec,
                camera_backdrop(camera, seed),
                &jitter,
                (cfg.height, cfg.width),
                &mut rng,
            );
            let vr = ViewRender {
                identity_id: spec.id,
                camera_id: camera,
                view,
                image,
                jitter,
            };
            if cfg.disjoint_train {
                if spec.id < n_train_ids {
                    out.train.push(vr);
                } else if view < cfg.query_views {
                    out.query.push(vr);
                } else {
                    out.gallery.push(vr);
                }
            } else {
                let nt = cfg.n_train_views();
                if view < nt {
                    out.train.push(vr);
                } else if view < nt + cfg.query_views {
                    out.query.push(vr);
                } else {
                    out.gallery.push(vr);
                }
            }
        }
    }
    Ok(out)
}

pub fn gen_dataset(n_ids: usize, views_per_id: usize, image_hw: (usize, usize), seed: u64) -> Result<DatasetSplits> {
    gen_dataset_with(&DatasetConfig::new(n_ids, views_per_id, image_hw), seed)
}

/// Per-channel 8-bin histogram, normalised to sum to one per channel.
pub fn rgb_histogram(image: &Tensor) -> Vec<f64> {
    const BINS: usize = 8;
    let n = image.len() / 3;
    let mut hist = vec![0.0; 3 * BINS];
    for (i, &v) in image.data().iter().enumerate() {
        let ch = i / n;
        let b = ((v * BINS as f64) as usize).min(BINS - 1);
        hist[ch * BINS + b] += 1.0 / n as f64;
    }
    hist
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_under_seed() {
        let a = gen_dataset(32, 8, (32, 16), 7).unwrap();
        let b = gen_dataset(32, 8, (32, 16), 7).unwrap();
        assert_eq!(a, b);
        let c = gen_dataset(32, 8, (32, 16), 8).unwrap();
        assert_ne!(a.train[0].image, c.train[0].image);
    }

    #[test]
    fn pixels_in_unit_range() {
        let d = gen_dataset(8, 4, (32, 16), 1).unwrap();
        for s in Split::ALL {
            for v in d.split(s) {
                assert!(v.image.min() >= 0.0 && v.image.max() <= 1.0);
                assert_eq!(v.image.shape(), &[3, 32, 16]);
            }
        }
    }

    #[test]
    fn default_layout_and_coverage() {
        let d = gen_dataset(32, 8, (32, 16), 7).unwrap();
        assert_eq!((d.train.len(), d.query.len(), d.gallery.len()), (128, 32, 96));
        for id in 0..32 {
            assert!(d.query.iter().any(|v| v.identity_id == id));
            assert!(d.gallery.iter().any(|v| v.identity_id == id));
        }
        for q in &d.query {
            assert!(!d
                .gallery
                .iter()
                .any(|g| g.identity_id == q.identity_id && g.view == q.view));
        }
        for (i, spec) in d.identities.iter().enumerate() {
            assert_eq!(spec.id, i);
            let colors = [spec.torso_color, spec.accent_color, spec.leg_color, spec.head_tone];
            assert!(colors.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
            assert!(spec.body_proportions.iter().all(|p| *p > 0.0));
            assert!(spec.body_proportions.iter().sum::<f64>() <= 1.2);
        }
    }

    #[test]
    fn two_views_still_cover_query_and_gallery() {
        let d = gen_dataset(3, 2, (16, 8), 0).unwrap();
        assert_eq!((d.train.len(), d.query.len(), d.gallery.len()), (0, 3, 3));
    }

    #[test]
    fn disjoint_train_identities() {
        let cfg = DatasetConfig {
            disjoint_train: true,
            ..DatasetConfig::new(8, 4, (16, 8))
        };
        let d = gen_dataset_with(&cfg, 3).unwrap();
        assert!(d.disjoint_train);
        assert!(d.train.iter().all(|v| v.identity_id < 4));
        assert!(d.query.iter().chain(&d.gallery).all(|v| v.identity_id >= 4));
        assert_eq!(d.query.len(), 4);
    }

    #[test]
    fn parameter_bounds() {
        assert!(gen_dataset(1, 8, (32, 16), 0).is_err());
        assert!(gen_dataset(4, 1, (32, 16), 0).is_err());
        assert!(gen_dataset(4, 4, (4, 4), 0).is_err());
    }

    #[test]
    fn intra_identity_histograms_are_closer() {
        // oracle: L1 distance between 8-bin RGB histograms, averaged over all pairs
        let d = gen_dataset(32, 8, (32, 16), 7).unwrap();
        let all: Vec<&ViewRender> = d.train.iter().chain(&d.query).chain(&d.gallery).collect();
        let hists: Vec<Vec<f64>> = all.iter().map(|v| rgb_histogram(&v.image)).collect();
        let (mut intra, mut ni, mut inter, mut ne) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                let dist: f64 = hists[i].iter().zip(&hists[j]).map(|(a, b)| (a - b).abs()).sum();
                if all[i].identity_id == all[j].identity_id {
                    intra += dist;
                    ni += 1;
                } else {
                    inter += dist;
                    ne += 1;
                }
            }
        }
        let (intra, inter) = (intra / ni as f64, inter / ne as f64);
        assert!(intra < inter, "intra {intra} vs inter {inter}");
    }

    #[test]
    fn textures_survive_rendering() {
        let cfg = DatasetConfig {
            jitter: JitterConfig {
                brightness: 0.0,
                translation_px: 0,
                noise_sigma: 0.0,
            },
            ..DatasetConfig::new(4, 2, (32, 16))
        };
        let d = gen_dataset_with(&cfg, 5).unwrap();
        let w = 16;
        // sum of neighbour differences over a window inside every torso
        let roughness = |v: &ViewRender| {
            let x = v.image.data();
            let mut s = 0.0;
            for r in 8..15 {
                for c in 6..9 {
                    s += (x[r * w + c] - x[r * w + c + 1]).abs() + (x[r * w + c] - x[(r + 1) * w + c]).abs();
                }
            }
            s
        };
        assert_eq!(roughness(&d.query[0]), 0.0);
        for k in 1..4 {
            assert!(roughness(&d.query[k]) > 1.0, "pattern {k}");
        }
    }
}
