//! Inference pipeline: score map, keypoints, descriptors, matches and the
//! estimated homography for an image pair.

use rand::Rng;

use crate::error::Result;
use crate::features::{describe_all, nms_with, Descriptor, Keypoint, NmsConfig};
use crate::geometry::Homography;
use crate::imaging::GrayImage;
use crate::matching::{cross_check_match, verify, Match};
use crate::net::UnetParams;
use crate::registration::{
    auc_nndr, classify_registration, coverage_fraction, default_t_grid, m_score, ransac_homography, repeatability,
    PairMetrics, RansacConfig, RegistrationResult, COVERAGE_RADIUS,
};

#[derive(Debug, Clone)]
pub struct Detector {
    pub net: UnetParams,
    pub nms: NmsConfig,
}

#[derive(Debug, Clone, Default)]
pub struct Detection {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor>,
}

#[derive(Debug, Clone)]
pub struct PairRegistration {
    pub a: Detection,
    pub b: Detection,
    pub matches: Vec<Match>,
    /// Estimated transform from `a` to `b` and the inlier match indices.
    pub estimate: Option<(Homography, Vec<usize>)>,
}

impl Detector {
    pub fn new(net: UnetParams, nms: NmsConfig) -> Self {
        Detector { net, nms }
    }

    pub fn detect(&self, img: &GrayImage) -> Result<Detection> {
        let map = self.net.predict(img)?;
        let keypoints = nms_with(&map, &self.nms);
        let descriptors = describe_all(img, &keypoints);
        Ok(Detection { keypoints, descriptors })
    }

    /// Detects in both images, cross-check matches and runs RANSAC.
    pub fn register<R: Rng + ?Sized>(
        &self,
        a: &GrayImage,
        b: &GrayImage,
        ransac: &RansacConfig,
        rng: &mut R,
    ) -> Result<PairRegistration> {
        let da = self.detect(a)?;
        let db = self.detect(b)?;
        Ok(register_detections(da, db, ransac, rng))
    }
}

pub fn register_detections<R: Rng + ?Sized>(
    a: Detection,
    b: Detection,
    ransac: &RansacConfig,
    rng: &mut R,
) -> PairRegistration {
    let matches = cross_check_match(&a.descriptors, &b.descriptors);
    let estimate = ransac_homography(&matches, &a.keypoints, &b.keypoints, ransac, rng);
    PairRegistration {
        a,
        b,
        matches,
        estimate,
    }
}

/// Full metric record for one pair with known ground truth `h_gt` (a → b).
pub fn evaluate_pair<R: Rng + ?Sized>(
    pair_id: &str,
    detector: &Detector,
    a: &GrayImage,
    b: &GrayImage,
    h_gt: &Homography,
    eps: f64,
    ransac: &RansacConfig,
    rng: &mut R,
) -> Result<(PairMetrics, RegistrationResult)> {
    let reg = detector.register(a, b, ransac, rng)?;
    let (w, h) = (a.width(), a.height());
    let (ka, kb) = (&reg.a.keypoints, &reg.b.keypoints);
    let verdicts = verify(&reg.matches, ka, kb, h_gt, eps);
    let tp_points: Vec<_> = verdicts.iter().filter(|v| v.is_tp()).map(|v| ka[v.m.idx_a].point()).collect();
    let n_tp = tp_points.len();
    let mut result = classify_registration(reg.estimate.as_ref().map(|e| &e.0), h_gt, w, h);
    if let Some((_, inl)) = &reg.estimate {
        result.inliers = inl.clone();
    }
    let metrics = PairMetrics {
        pair_id: pair_id.to_owned(),
        class: result.class,
        mee: result.mee,
        mae: result.mae,
        repeatability: repeatability(ka, kb, h_gt, w, h, eps)?,
        m_score: m_score(n_tp, ka, kb, h_gt, w, h)?,
        coverage: coverage_fraction(&tp_points, w, h, COVERAGE_RADIUS),
        auc: auc_nndr(&reg.a.descriptors, &reg.b.descriptors, ka, kb, h_gt, eps, &default_t_grid())?,
        n_kp: ka.len() + kb.len(),
        n_matches: reg.matches.len(),
        n_tp,
    };
    Ok((metrics, result))
}
