//! Per-class pseudo box generation over a manifest.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbox::BoxXYWH;
use crate::ddt::{
    cam_heatmap, extract_box, fit_principal_direction, map_box_to_image, project_heatmap, upsample_bilinear, HeatMap,
};
use crate::error::{Error, Result};
use crate::tensor_io::{
    read_json_lines, read_tensor_file, write_json_lines, ClassifierWeights, FeatureMap, ImageRecord, Split,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ddt,
    Cam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoxSource {
    #[serde(rename = "ddt")]
    Ddt,
    #[serde(rename = "cam")]
    Cam,
    #[serde(rename = "fullimage-fallback")]
    FullImageFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoAnnotation {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BoxXYWH,
    pub source: BoxSource,
}

/// Supplies the feature maps of one class in one split.
pub trait FeatureSource: Sync {
    fn class_maps(&self, split: Split, class: u32) -> Result<Vec<FeatureMap>>;
}

/// Feature maps laid out as `<root>/<split>/class_<label>.psol`.
#[derive(Debug, Clone)]
pub struct FeatureDir {
    pub root: PathBuf,
}

impl FeatureDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FeatureDir { root: root.into() }
    }

    pub fn class_file(&self, split: Split, class: u32) -> PathBuf {
        class_file(&self.root, split, class)
    }
}

pub fn class_file(root: &Path, split: Split, class: u32) -> PathBuf {
    root.join(split.as_str()).join(format!("class_{class}.psol"))
}

impl FeatureSource for FeatureDir {
    fn class_maps(&self, split: Split, class: u32) -> Result<Vec<FeatureMap>> {
        read_tensor_file(self.class_file(split, class))
    }
}

#[derive(Debug, Clone, Default)]
pub struct InMemoryFeatures {
    pub maps: HashMap<(Split, u32), Vec<FeatureMap>>,
}

impl FeatureSource for InMemoryFeatures {
    fn class_maps(&self, split: Split, class: u32) -> Result<Vec<FeatureMap>> {
        Ok(self.maps.get(&(split, class)).cloned().unwrap_or_default())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GenerateOptions<'a> {
    pub method: Method,
    pub classifier_weights: Option<&'a ClassifierWeights>,
    /// Split to produce boxes for. Directions are always fit on train.
    pub split: Split,
}

impl Default for GenerateOptions<'_> {
    fn default() -> Self {
        GenerateOptions {
            method: Method::Ddt,
            classifier_weights: None,
            split: Split::Train,
        }
    }
}

/// Turns a heat map on the feature grid into a box in original pixels, or
/// `None` when nothing is positive.
pub fn heatmap_to_box(hm: &HeatMap, rec: &ImageRecord) -> Result<Option<BoxXYWH>> {
    let side = rec.net_input_size as usize;
    let up = upsample_bilinear(hm, side, side)?;
    Ok(extract_box(&up).map(|b| map_box_to_image(&b, rec.net_input_size, rec.orig_width, rec.orig_height)))
}

fn select_maps(maps: Vec<FeatureMap>, records: &[&ImageRecord]) -> Result<HashMap<String, FeatureMap>> {
    let mut by_id: HashMap<String, FeatureMap> = maps.into_iter().map(|m| (m.image_id.clone(), m)).collect();
    let mut out = HashMap::with_capacity(records.len());
    for rec in records {
        let fm = by_id.remove(&rec.image_id).ok_or_else(|| Error::Missing {
            what: "feature map",
            image_id: rec.image_id.clone(),
        })?;
        out.insert(rec.image_id.clone(), fm);
    }
    if let Some(extra) = by_id.into_keys().min() {
        return Err(Error::UnknownId(extra));
    }
    Ok(out)
}

type ScoreFn<'a> = dyn Fn(&FeatureMap) -> Result<HeatMap> + 'a;

fn generate_class(
    class: u32,
    train: &[&ImageRecord],
    target: &[&ImageRecord],
    features: &dyn FeatureSource,
    opts: &GenerateOptions<'_>,
) -> Result<Vec<PseudoAnnotation>> {
    let target_maps = select_maps(features.class_maps(opts.split, class)?, target)?;

    let score: Box<ScoreFn<'_>> = match opts.method {
        Method::Ddt => {
            let fit_maps: Vec<FeatureMap> = if opts.split == Split::Train {
                target.iter().map(|r| target_maps[&r.image_id].clone()).collect()
            } else {
                let m = select_maps(features.class_maps(Split::Train, class)?, train)?;
                train.iter().map(|r| m[&r.image_id].clone()).collect()
            };
            if fit_maps.is_empty() {
                return Err(Error::Validation(format!("class {class} has no training feature maps")));
            }
            let pd = fit_principal_direction(&fit_maps)?;
            Box::new(move |fm| project_heatmap(fm, &pd))
        }
        Method::Cam => {
            let cw = opts
                .classifier_weights
                .ok_or_else(|| Error::InvalidArgument("method cam requires classifier weights".into()))?;
            Box::new(move |fm| cam_heatmap(fm, cw, class as usize))
        }
    };
    let found = match opts.method {
        Method::Ddt => BoxSource::Ddt,
        Method::Cam => BoxSource::Cam,
    };

    let mut out = Vec::with_capacity(target.len());
    for rec in target {
        let hm = score(&target_maps[&rec.image_id])?;
        let ann = match heatmap_to_box(&hm, rec)? {
            Some(bbox) => PseudoAnnotation {
                image_id: rec.image_id.clone(),
                bbox,
                source: found,
            },
            None => PseudoAnnotation {
                image_id: rec.image_id.clone(),
                bbox: rec.full_box(),
                source: BoxSource::FullImageFallback,
            },
        };
        out.push(ann);
    }
    Ok(out)
}

/// One annotation per image of `opts.split`, ordered by (class, image_id).
///
/// Classes run in parallel on the current rayon pool; the output does not
/// depend on the pool size.
pub fn generate_pseudo_boxes(
    manifest: &[ImageRecord],
    features: &dyn FeatureSource,
    opts: &GenerateOptions<'_>,
) -> Result<Vec<PseudoAnnotation>> {
    if opts.method == Method::Cam && opts.classifier_weights.is_none() {
        return Err(Error::InvalidArgument("method cam requires classifier weights".into()));
    }
    let mut by_class: BTreeMap<u32, (Vec<&ImageRecord>, Vec<&ImageRecord>)> = BTreeMap::new();
    for rec in manifest {
        let entry = by_class.entry(rec.class_label).or_default();
        if rec.split == Split::Train {
            entry.0.push(rec);
        }
        if rec.split == opts.split {
            entry.1.push(rec);
        }
    }
    let jobs: Vec<_> = by_class
        .into_iter()
        .filter(|(_, (_, target))| !target.is_empty())
        .map(|(class, (mut train, mut target))| {
            train.sort_by(|a, b| a.image_id.cmp(&b.image_id));
            target.sort_by(|a, b| a.image_id.cmp(&b.image_id));
            (class, train, target)
        })
        .collect();

    let per_class: Vec<Result<Vec<PseudoAnnotation>>> = jobs
        .par_iter()
        .map(|(class, train, target)| generate_class(*class, train, target, features, opts))
        .collect();
    let mut out = Vec::new();
    for r in per_class {
        out.extend(r?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GenerationSummary {
    pub total: usize,
    pub ddt: usize,
    pub cam: usize,
    pub fallback: usize,
    pub fallback_rate: f64,
}

pub fn summarize(anns: &[PseudoAnnotation]) -> GenerationSummary {
    let count = |s: BoxSource| anns.iter().filter(|a| a.source == s).count();
    let fallback = count(BoxSource::FullImageFallback);
    GenerationSummary {
        total: anns.len(),
        ddt: count(BoxSource::Ddt),
        cam: count(BoxSource::Cam),
        fallback,
        fallback_rate: if anns.is_empty() {
            0.0
        } else {
            fallback as f64 / anns.len() as f64
        },
    }
}

pub fn write_pseudo_annotations(anns: &[PseudoAnnotation], path: impl AsRef<Path>) -> Result<()> {
    write_json_lines(anns, path)
}

pub fn read_pseudo_annotations(path: impl AsRef<Path>) -> Result<Vec<PseudoAnnotation>> {
    read_json_lines(path)
}

/// Checks ids and bounds of annotations against a manifest.
pub fn validate_annotations(anns: &[PseudoAnnotation], manifest: &[ImageRecord]) -> Result<()> {
    let index: HashMap<&str, &ImageRecord> = manifest.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let mut seen = std::collections::HashSet::new();
    for a in anns {
        let rec = index
            .get(a.image_id.as_str())
            .ok_or_else(|| Error::UnknownId(a.image_id.clone()))?;
        if !seen.insert(a.image_id.as_str()) {
            return Err(Error::DuplicateId(a.image_id.clone()));
        }
        if !a.bbox.fits_within(rec.orig_width as f64, rec.orig_height as f64) {
            return Err(Error::Validation(format!(
                "annotation for {:?}: box {:?} exceeds the {}x{} image",
                a.image_id, a.bbox, rec.orig_width, rec.orig_height
            )));
        }
    }
    Ok(())
}

pub fn load_pseudo_annotations(path: impl AsRef<Path>, manifest: &[ImageRecord]) -> Result<Vec<PseudoAnnotation>> {
    let anns = read_pseudo_annotations(path)?;
    validate_annotations(&anns, manifest)?;
    Ok(anns)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, class: u32, split: Split) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            class_label: class,
            orig_width: 100,
            orig_height: 50,
            net_input_size: 16,
            gt_box: None,
            split,
        }
    }

    #[test]
    fn negative_heatmap_falls_back_to_full_image() {
        let manifest = vec![record("a", 0, Split::Train)];
        let mut feats = InMemoryFeatures::default();
        feats.maps.insert(
            (Split::Train, 0),
            vec![FeatureMap::new("a", 2, 2, 2, vec![1.0; 8]).unwrap()],
        );
        let cw = ClassifierWeights::new(1, 2, vec![-1.0, -1.0]).unwrap();
        let opts = GenerateOptions {
            method: Method::Cam,
            classifier_weights: Some(&cw),
            split: Split::Train,
        };
        let anns = generate_pseudo_boxes(&manifest, &feats, &opts).unwrap();
        assert_eq!(anns.len(), 1);
        assert_eq!(anns[0].source, BoxSource::FullImageFallback);
        assert_eq!(anns[0].bbox, BoxXYWH::new(0.0, 0.0, 100.0, 50.0));
        assert_eq!(summarize(&anns).fallback_rate, 1.0);
    }

    #[test]
    fn cam_without_weights_is_an_error() {
        let opts = GenerateOptions {
            method: Method::Cam,
            ..Default::default()
        };
        let err = generate_pseudo_boxes(&[record("a", 0, Split::Train)], &InMemoryFeatures::default(), &opts);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn missing_feature_map() {
        let manifest = vec![record("a", 0, Split::Train), record("b", 0, Split::Train)];
        let mut feats = InMemoryFeatures::default();
        feats
            .maps
            .insert((Split::Train, 0), vec![FeatureMap::zeros("a", 2, 2, 2)]);
        let err = generate_pseudo_boxes(&manifest, &feats, &GenerateOptions::default()).unwrap_err();
        assert!(
            matches!(err, Error::Missing { ref image_id, .. } if image_id == "b"),
            "{err}"
        );
    }

    #[test]
    fn annotations_cross_reference() {
        let manifest = vec![record("a", 0, Split::Train)];
        let ok = PseudoAnnotation {
            image_id: "a".into(),
            bbox: BoxXYWH::new(0.0, 0.0, 100.0, 50.0),
            source: BoxSource::Ddt,
        };
        validate_annotations(std::slice::from_ref(&ok), &manifest).unwrap();
        let unknown = PseudoAnnotation {
            image_id: "zzz".into(),
            ..ok.clone()
        };
        assert!(matches!(
            validate_annotations(&[unknown], &manifest),
            Err(Error::UnknownId(_))
        ));
        let big = PseudoAnnotation {
            bbox: BoxXYWH::new(10.0, 0.0, 100.0, 50.0),
            ..ok
        };
        assert!(matches!(
            validate_annotations(&[big], &manifest),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn annotation_json_shape() {
        let a = PseudoAnnotation {
            image_id: "x".into(),
            bbox: BoxXYWH::new(1.0, 2.0, 3.0, 4.0),
            source: BoxSource::FullImageFallback,
        };
        let s = serde_json::to_string(&a).unwrap();
        assert_eq!(
            s,
            r#"{"image_id":"x","box":{"x":1.0,"y":2.0,"w":3.0,"h":4.0},"source":"fullimage-fallback"}"#
        );
    }
}
