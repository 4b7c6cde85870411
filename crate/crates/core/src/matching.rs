//! Brute-force descriptor matching and ground-truth verification.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Descriptor, Keypoint};
use crate::geometry::Homography;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub idx_a: usize,
    pub idx_b: usize,
    pub dist: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    TruePositive,
    FalsePositive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub m: Match,
    pub label: Label,
}

impl Verdict {
    pub fn is_tp(&self) -> bool {
        self.label == Label::TruePositive
    }
}

/// Nearest and second-nearest usable neighbors of `q` in `set`.
/// Ties resolve to the lower index.
fn two_nearest(q: &Descriptor, set: &[Descriptor]) -> (Option<(usize, f64)>, f64) {
    let mut best: Option<(usize, f64)> = None;
    let mut second = f64::INFINITY;
    for (j, d) in set.iter().enumerate() {
        if d.is_zero() {
            continue;
        }
        let dist = q.distance(d);
        match best {
            Some((_, bd)) if dist >= bd => {
                if dist < second {
                    second = dist;
                }
            }
            Some((_, bd)) => {
                second = bd;
                best = Some((j, dist));
            }
            None => best = Some((j, dist)),
        }
    }
    (best, second)
}

fn nearest(q: &Descriptor, set: &[Descriptor]) -> Option<(usize, f64)> {
    two_nearest(q, set).0
}

/// Mutual nearest neighbors under L2 distance. Zero descriptors never match.
pub fn cross_check_match(desc_a: &[Descriptor], desc_b: &[Descriptor]) -> Vec<Match> {
    let forward: Vec<Option<(usize, f64)>> = desc_a
        .par_iter()
        .map(|d| if d.is_zero() { None } else { nearest(d, desc_b) })
        .collect();
    let backward: Vec<Option<usize>> = desc_b
        .par_iter()
        .map(|d| if d.is_zero() { None } else { nearest(d, desc_a).map(|(i, _)| i) })
        .collect();
    forward
        .iter()
        .enumerate()
        .filter_map(|(i, f)| {
            let (j, dist) = (*f)?;
            (backward[j] == Some(i)).then_some(Match {
                idx_a: i,
                idx_b: j,
                dist,
            })
        })
        .collect()
}

/// Nearest-neighbor distance-ratio matching from A into B. When B holds a
/// single usable descriptor the second distance is taken as infinite.
pub fn nndr_match(desc_a: &[Descriptor], desc_b: &[Descriptor], t: f64) -> Result<Vec<Match>> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::invalid(format!("ratio threshold {t} outside (0, 1]")));
    }
    Ok(desc_a
        .par_iter()
        .enumerate()
        .filter_map(|(i, d)| {
            if d.is_zero() {
                return None;
            }
            let (best, second) = two_nearest(d, desc_b);
            let (j, d1) = best?;
            let ratio = if second.is_infinite() {
                0.0
            } else if second == 0.0 {
                1.0
            } else {
                d1 / second
            };
            (ratio < t).then_some(Match {
                idx_a: i,
                idx_b: j,
                dist: d1,
            })
        })
        .collect())
}

/// Labels each match true positive when the ground-truth mapping of its
/// keypoint in A lands within `eps` pixels of its keypoint in B.
pub fn verify(matches: &[Match], kps_a: &[Keypoint], kps_b: &[Keypoint], h_gt: &Homography, eps: f64) -> Vec<Verdict> {
    matches
        .iter()
        .map(|m| {
            let ok = h_gt
                .apply(kps_a[m.idx_a].point())
                .map(|p| p.distance(&kps_b[m.idx_b].point()) <= eps)
                .unwrap_or(false);
            Verdict {
                m: *m,
                label: if ok {
                    Label::TruePositive
                } else {
                    Label::FalsePositive
                },
            }
        })
        .collect()
}

/// Debug dump: `idx_a idx_b dist label` per line.
pub fn format_verdicts(verdicts: &[Verdict]) -> String {
    let mut s = String::new();
    for v in verdicts {
        let label = match v.label {
            Label::TruePositive => "tp",
            Label::FalsePositive => "fp",
        };
        let _ = writeln!(s, "{} {} {:.17e} {label}", v.m.idx_a, v.m.idx_b, v.m.dist);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point;
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_desc<R: Rng>(rng: &mut R) -> Descriptor {
        let mut d = [0.0; 128];
        for v in &mut d {
            *v = rng.random::<f64>();
        }
        let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        d.iter_mut().for_each(|v| *v /= n);
        Descriptor(d)
    }

    fn unit(i: usize, scale: f64) -> Descriptor {
        let mut d = [0.0; 128];
        d[i] = scale;
        Descriptor(d)
    }

    fn mutual_nn_oracle(a: &[Descriptor], b: &[Descriptor]) -> Vec<(usize, usize)> {
        let argmin = |q: &Descriptor, set: &[Descriptor]| -> Option<usize> {
            let mut best: Option<(usize, f64)> = None;
            for (j, d) in set.iter().enumerate() {
                if d.is_zero() {
                    continue;
                }
                let dist = q.distance(d);
                if best.is_none_or(|(_, bd)| dist < bd) {
                    best = Some((j, dist));
                }
            }
            best.map(|b| b.0)
        };
        let mut out = Vec::new();
        for (i, da) in a.iter().enumerate() {
            if da.is_zero() {
                continue;
            }
            for (j, db) in b.iter().enumerate() {
                if db.is_zero() {
                    continue;
                }
                if argmin(da, b) == Some(j) && argmin(db, a) == Some(i) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    #[test]
    fn identical_sets_match_identically() {
        let mut rng = stream(1, "m");
        let a: Vec<Descriptor> = (0..10).map(|_| random_desc(&mut rng)).collect();
        let m = cross_check_match(&a, &a);
        assert_eq!(m.len(), 10);
        for (i, mm) in m.iter().enumerate() {
            assert_eq!((mm.idx_a, mm.idx_b, mm.dist), (i, i, 0.0));
        }
    }

    #[test]
    fn single_query_two_candidates() {
        let a = vec![unit(0, 1.0)];
        let b = vec![Descriptor([1.0 / 128f64.sqrt(); 128]), unit(1, 1.0)];
        let m = cross_check_match(&a, &b);
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].idx_a, m[0].idx_b), (0, 0));
    }

    #[test]
    fn cross_check_matches_oracle() {
        let mut rng = stream(2, "m");
        for _ in 0..20 {
            let mut a: Vec<Descriptor> = (0..20).map(|_| random_desc(&mut rng)).collect();
            let b: Vec<Descriptor> = (0..20).map(|_| random_desc(&mut rng)).collect();
            a[3] = Descriptor::zero();
            let got: Vec<(usize, usize)> = cross_check_match(&a, &b).iter().map(|m| (m.idx_a, m.idx_b)).collect();
            assert_eq!(got, mutual_nn_oracle(&a, &b));
        }
    }

    #[test]
    fn zero_descriptors_never_match() {
        let a = vec![Descriptor::zero(), unit(2, 1.0)];
        let b = vec![Descriptor::zero(), unit(2, 1.0)];
        let m = cross_check_match(&a, &b);
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].idx_a, m[0].idx_b), (1, 1));
    }

    #[test]
    fn nndr_examples() {
        let q = unit(0, 1.0);
        let far = unit(5, 1.0);
        let m = nndr_match(&[q.clone()], &[far.clone(), q.clone()], 0.8).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].idx_b, 1);

        let eq1 = unit(1, 1.0);
        let eq2 = unit(2, 1.0);
        for t in [0.1, 0.5, 0.99, 1.0] {
            assert!(nndr_match(&[q.clone()], &[eq1.clone(), eq2.clone()], t).unwrap().is_empty());
        }
        // a lone candidate always passes
        assert_eq!(nndr_match(&[q.clone()], &[far], 0.05).unwrap().len(), 1);
        assert!(nndr_match(&[q.clone()], &[], 0.5).unwrap().is_empty());
        assert!(nndr_match(&[q.clone()], &[eq1.clone()], 0.0).is_err());
        assert!(nndr_match(&[q], &[eq1], 1.5).is_err());
    }

    fn nndr_oracle(a: &[Descriptor], b: &[Descriptor], t: f64) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, q) in a.iter().enumerate() {
            if q.is_zero() {
                continue;
            }
            let mut ds: Vec<(f64, usize)> = b.iter().enumerate().filter(|(_, d)| !d.is_zero()).map(|(j, d)| (q.distance(d), j)).collect();
            ds.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            match ds.len() {
                0 => {}
                1 => out.push((i, ds[0].1)),
                _ => {
                    if ds[1].0 > 0.0 && ds[0].0 / ds[1].0 < t {
                        out.push((i, ds[0].1));
                    }
                }
            }
        }
        out
    }

    #[test]
    fn nndr_matches_oracle() {
        let mut rng = stream(3, "m");
        for _ in 0..20 {
            let a: Vec<Descriptor> = (0..15).map(|_| random_desc(&mut rng)).collect();
            let b: Vec<Descriptor> = (0..15).map(|_| random_desc(&mut rng)).collect();
            for t in [0.8, 0.95, 1.0] {
                let got: Vec<(usize, usize)> = nndr_match(&a, &b, t).unwrap().iter().map(|m| (m.idx_a, m.idx_b)).collect();
                assert_eq!(got, nndr_oracle(&a, &b, t));
            }
        }
    }

    proptest! {
        #[test]
        fn matching_invariants(seed in any::<u64>(), na in 0usize..15, nb in 0usize..15, t1 in 0.05f64..1.0, t2 in 0.05f64..1.0) {
            let mut rng = stream(seed, "mp");
            let a: Vec<Descriptor> = (0..na).map(|_| random_desc(&mut rng)).collect();
            let b: Vec<Descriptor> = (0..nb).map(|_| random_desc(&mut rng)).collect();
            let ab = cross_check_match(&a, &b);
            let mut ba: Vec<(usize, usize)> = cross_check_match(&b, &a).iter().map(|m| (m.idx_b, m.idx_a)).collect();
            ba.sort();
            let mut abp: Vec<(usize, usize)> = ab.iter().map(|m| (m.idx_a, m.idx_b)).collect();
            abp.sort();
            prop_assert_eq!(&abp, &ba);
            let mut seen_a = std::collections::HashSet::new();
            let mut seen_b = std::collections::HashSet::new();
            for m in &ab {
                prop_assert!(seen_a.insert(m.idx_a) && seen_b.insert(m.idx_b));
            }
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let low = nndr_match(&a, &b, lo).unwrap();
            let high = nndr_match(&a, &b, hi).unwrap();
            for m in &low {
                prop_assert!(high.contains(m));
            }
        }
    }

    fn kp(x: usize, y: usize) -> Keypoint {
        Keypoint { x, y, score: 1.0 }
    }

    #[test]
    fn verify_examples() {
        let m = [Match { idx_a: 0, idx_b: 0, dist: 0.0 }];
        let id = Homography::identity();
        assert!(verify(&m, &[kp(10, 10)], &[kp(10, 10)], &id, 3.0)[0].is_tp());
        // 3.5 px away: use a fractional target via translation
        let h = Homography::translation(0.0, 3.5);
        assert!(!verify(&m, &[kp(10, 10)], &[kp(10, 10)], &h, 3.0)[0].is_tp());
        let h = Homography::translation(2.0, 1.0);
        assert!(verify(&m, &[kp(5, 5)], &[kp(7, 8)], &h, 3.0)[0].is_tp());
        assert_eq!(h.apply(Point::new(5.0, 5.0)).unwrap().distance(&Point::new(7.0, 8.0)), 2.0);
    }

    #[test]
    fn verdict_dump_format() {
        let v = [Verdict {
            m: Match { idx_a: 1, idx_b: 2, dist: 0.5 },
            label: Label::FalsePositive,
        }];
        assert_eq!(format_verdicts(&v), "1 2 5.00000000000000000e-1 fp\n");
    }
}
