//! Seeded synthetic datasets with planted objects.
//!
//! Every image gets a `grid x grid x d` feature map whose descriptors are
//! isotropic Gaussian noise around a per-class mean, except inside a planted
//! rectangle of cells, where they are shifted by `shift * noise` along a
//! per-class unit direction. Grid cell `(r, c)` covers network-input pixels
//! `[c*s, (c+1)*s) x [r*s, (r+1)*s)` with `s = net_input_size / grid`; the
//! planted cells therefore define the ground-truth box.
//!
//! Pooled features encode the box through a fixed random linear map of the
//! box's normalized coordinates in logit space, plus a class embedding and
//! noise, so that a sigmoid regression head can recover it.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bbox::BoxXYWH;
use crate::error::{Error, Result};
use crate::pseudoboxes::{class_file, InMemoryFeatures, PseudoAnnotation};
use crate::tensor_io::{
    write_classifier_weights, write_json_lines, write_pooled_features, write_tensor_file, ClassifierWeights,
    FeatureMap, ImageRecord, PooledFeature, Split,
};

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureConfig {
    pub seed: u64,
    pub classes: usize,
    pub images_per_class: usize,
    /// Fraction of each class held out as the test split.
    pub test_fraction: f64,
    pub d: usize,
    pub grid: usize,
    pub net_input_size: u32,
    /// Planted-region shift, in units of `noise`.
    pub shift: f64,
    pub noise: f64,
    /// Planted box side as a fraction of the grid side.
    pub box_frac: (f64, f64),
    pub image_side: (u32, u32),
    pub pooled_d: usize,
    pub pooled_noise: f64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            seed: 0,
            classes: 5,
            images_per_class: 200,
            test_fraction: 0.2,
            d: 64,
            grid: 28,
            net_input_size: 448,
            shift: 10.0,
            noise: 1.0,
            box_frac: (0.45, 0.65),
            image_side: (300, 500),
            pooled_d: 64,
            pooled_noise: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub config: FixtureConfig,
    pub manifest: Vec<ImageRecord>,
    pub features: InMemoryFeatures,
    pub pooled: Vec<PooledFeature>,
    /// Planted box of every image in original pixels (also the manifest's gt_box).
    pub planted: HashMap<String, BoxXYWH>,
    /// Unit shift direction per class.
    pub directions: Vec<Vec<f64>>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-4, 1.0 - 1e-4);
    (p / (1.0 - p)).ln()
}

pub fn make_fixture(cfg: &FixtureConfig) -> Result<Fixture> {
    if cfg.classes == 0 || cfg.images_per_class == 0 || cfg.d == 0 || cfg.grid < 2 || cfg.pooled_d == 0 {
        return Err(Error::InvalidArgument(
            "fixture sizes must be positive (grid >= 2)".into(),
        ));
    }
    let (lo, hi) = cfg.box_frac;
    if !(0.0 < lo && lo <= hi && hi <= 1.0) {
        return Err(Error::InvalidArgument("box_frac must satisfy 0 < lo <= hi <= 1".into()));
    }
    if !(cfg.net_input_size as usize).is_multiple_of(cfg.grid) {
        return Err(Error::InvalidArgument(
            "net_input_size must be a multiple of grid".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (d, g) = (cfg.d, cfg.grid);
    let stride = cfg.net_input_size as f64 / g as f64;

    let directions: Vec<Vec<f64>> = (0..cfg.classes).map(|_| unit_vector(&mut rng, d)).collect();
    let class_means: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| (0..d).map(|_| normal(&mut rng)).collect())
        .collect();
    let class_embed: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| (0..cfg.pooled_d).map(|_| normal(&mut rng)).collect())
        .collect();
    let box_map: Vec<[f64; 4]> = (0..cfg.pooled_d)
        .map(|_| [normal(&mut rng), normal(&mut rng), normal(&mut rng), normal(&mut rng)])
        .collect();

    let n_test = ((cfg.images_per_class as f64) * cfg.test_fraction).round() as usize;
    let mut manifest = Vec::new();
    let mut features = InMemoryFeatures::default();
    let mut pooled = Vec::new();
    let mut planted = HashMap::new();

    for class in 0..cfg.classes {
        for i in 0..cfg.images_per_class {
            let split = if i >= cfg.images_per_class - n_test {
                Split::Test
            } else {
                Split::Train
            };
            let image_id = format!("c{class:03}_{i:05}");
            let orig_w = rng.random_range(cfg.image_side.0..=cfg.image_side.1);
            let orig_h = rng.random_range(cfg.image_side.0..=cfg.image_side.1);

            let side = |rng: &mut ChaCha8Rng| {
                let f = rng.random_range(lo..=hi);
                ((f * g as f64).round() as usize).clamp(1, g)
            };
            let (bh, bw) = (side(&mut rng), side(&mut rng));
            let r0 = rng.random_range(0..=g - bh);
            let c0 = rng.random_range(0..=g - bw);

            let mut values = Vec::with_capacity(g * g * d);
            for r in 0..g {
                for c in 0..g {
                    let inside = (r0..r0 + bh).contains(&r) && (c0..c0 + bw).contains(&c);
                    for k in 0..d {
                        let mut x = class_means[class][k] + cfg.noise * normal(&mut rng);
                        if inside {
                            x += cfg.shift * cfg.noise * directions[class][k];
                        }
                        values.push(x as f32);
                    }
                }
            }
            let fm = FeatureMap::new(image_id.clone(), g, g, d, values)?;
            features.maps.entry((split, class as u32)).or_default().push(fm);

            let net_box = BoxXYWH::new(
                c0 as f64 * stride,
                r0 as f64 * stride,
                bw as f64 * stride,
                bh as f64 * stride,
            );
            let net = cfg.net_input_size as f64;
            let gt = net_box.scaled(orig_w as f64 / net, orig_h as f64 / net);
            planted.insert(image_id.clone(), gt);

            let nb = [net_box.x / net, net_box.y / net, net_box.w / net, net_box.h / net].map(logit);
            let v: Vec<f64> = (0..cfg.pooled_d)
                .map(|j| {
                    let enc: f64 = box_map[j].iter().zip(&nb).map(|(m, z)| m * z).sum();
                    class_embed[class][j] + enc + cfg.pooled_noise * normal(&mut rng)
                })
                .collect();
            pooled.push(PooledFeature {
                image_id: image_id.clone(),
                v,
            });

            manifest.push(ImageRecord {
                image_id,
                class_label: class as u32,
                orig_width: orig_w,
                orig_height: orig_h,
                net_input_size: cfg.net_input_size,
                gt_box: Some(gt),
                split,
            });
        }
    }

    Ok(Fixture {
        config: cfg.clone(),
        manifest,
        features,
        pooled,
        planted,
        directions,
    })
}

impl Fixture {
    /// Class shift directions as classifier weights, one row per class.
    pub fn classifier_weights(&self) -> ClassifierWeights {
        let values = self.directions.iter().flatten().map(|&x| x as f32).collect();
        ClassifierWeights::new(self.config.classes, self.config.d, values).expect("fixture shapes are consistent")
    }

    /// Writes the on-disk layout the CLI reads:
    /// `manifest.jsonl`, `features/<split>/class_<k>.psol`, `pooled.psol`,
    /// `classifier_weights.psol`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::io(p, e));
        mkdir(dir)?;
        write_json_lines(&self.manifest, dir.join("manifest.jsonl"))?;
        let feat_root = dir.join("features");
        for split in [Split::Train, Split::Test] {
            mkdir(&feat_root.join(split.as_str()))?;
        }
        let mut keys: Vec<_> = self.features.maps.keys().copied().collect();
        keys.sort();
        for key in keys {
            write_tensor_file(&self.features.maps[&key], class_file(&feat_root, key.0, key.1))?;
        }
        write_pooled_features(&self.pooled, dir.join("pooled.psol"))?;
        write_classifier_weights(&self.classifier_weights(), dir.join("classifier_weights.psol"))
    }
}

/// A box with both corners drawn uniformly inside a `width x height` image.
pub fn uniform_random_box<R: Rng>(rng: &mut R, width: f64, height: f64) -> BoxXYWH {
    let span = |rng: &mut R, limit: f64| {
        let (a, b) = (rng.random_range(0.0..limit), rng.random_range(0.0..limit));
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let len = (hi - lo).max(1.0).min(limit);
        (lo.min(limit - len), len)
    };
    let (x, w) = span(rng, width);
    let (y, h) = span(rng, height);
    BoxXYWH::new(x, y, w, h)
}

/// Replaces a seeded random `fraction` of the annotations with uniform random
/// boxes. The chosen set depends only on the seed and the count.
pub fn corrupt_annotations(
    anns: &[PseudoAnnotation],
    manifest: &[ImageRecord],
    fraction: f64,
    seed: u64,
) -> Result<Vec<PseudoAnnotation>> {
    use rand::seq::index::sample;
    let dims: HashMap<&str, (f64, f64)> = manifest
        .iter()
        .map(|r| (r.image_id.as_str(), (r.orig_width as f64, r.orig_height as f64)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = ((anns.len() as f64) * fraction).round() as usize;
    let mut chosen = sample(&mut rng, anns.len(), k.min(anns.len())).into_vec();
    chosen.sort_unstable();
    let mut out = anns.to_vec();
    for i in chosen {
        let (w, h) = *dims
            .get(out[i].image_id.as_str())
            .ok_or_else(|| Error::UnknownId(out[i].image_id.clone()))?;
        out[i].bbox = uniform_random_box(&mut rng, w, h);
    }
    Ok(out)
}
