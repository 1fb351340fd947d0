//! Symmetric landmark template.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AlignError, LandmarkSet};

/// Left/right landmark pairs and the landmarks on the facial centerline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymmetricPairSpec {
    pub pairs: Vec<(usize, usize)>,
    #[serde(default)]
    pub singles: Vec<usize>,
}

impl SymmetricPairSpec {
    pub fn from_json(text: &str) -> Result<Self, AlignError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AlignError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Every index in `0..count` must appear exactly once.
    pub fn validate(&self, count: usize) -> Result<(), AlignError> {
        let mut seen = vec![false; count];
        let all = self
            .pairs
            .iter()
            .flat_map(|&(l, r)| [l, r])
            .chain(self.singles.iter().copied());
        for i in all {
            match seen.get_mut(i) {
                None => {
                    return Err(AlignError::InvalidPairSpec(format!(
                        "index {i} out of range for {count} landmarks"
                    )))
                }
                Some(true) => return Err(AlignError::InvalidPairSpec(format!("index {i} listed twice"))),
                Some(s) => *s = true,
            }
        }
        match seen.iter().position(|s| !s) {
            Some(i) => Err(AlignError::InvalidPairSpec(format!("index {i} not covered"))),
            None => Ok(()),
        }
    }

    /// Index permutation that swaps every pair; singles map to themselves.
    pub fn mirror_permutation(&self, count: usize) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..count).collect();
        for &(l, r) in &self.pairs {
            perm[l] = r;
            perm[r] = l;
        }
        perm
    }

    /// Landmarks of a mirrored image: x reflected in an image `width` wide
    /// and pair members swapped so each index keeps its anatomical meaning.
    pub fn mirror(&self, pts: &LandmarkSet, width: f64) -> LandmarkSet {
        let flipped = pts.flipped(width);
        let perm = self.mirror_permutation(pts.len());
        LandmarkSet {
            points: perm.iter().map(|&j| flipped.points[j]).collect(),
        }
    }
}

/// Averages each pair's vertical coordinate and distance from the centerline
/// (the mean x of all landmarks), keeping the pair's left-right order;
/// singles move onto the centerline. The result is mirror symmetric.
pub fn symmetrize(sample: &LandmarkSet, pairs: &SymmetricPairSpec) -> Result<LandmarkSet, AlignError> {
    pairs.validate(sample.len())?;
    let pts = sample.points();
    let c = pts.iter().map(|p| p[0]).sum::<f64>() / pts.len() as f64;
    let mut out = pts.to_vec();
    for &(l, r) in &pairs.pairs {
        let (dl, dr) = (pts[l][0] - c, pts[r][0] - c);
        let d = (dl.abs() + dr.abs()) / 2.0;
        let y = (pts[l][1] + pts[r][1]) / 2.0;
        // the left-most member goes left, so a pair never collapses onto one side
        let side = if pts[l][0] <= pts[r][0] { -1.0 } else { 1.0 };
        out[l] = [c + side * d, y];
        out[r] = [c - side * d, y];
    }
    for &s in &pairs.singles {
        out[s][0] = c;
    }
    LandmarkSet::new(out)
}

/// Maps the bounding box of `pts` onto `[0.2 w, 0.8 w] x [0.2 h, 0.9 h]`,
/// scaling each axis independently.
pub fn fit_margins(pts: &LandmarkSet, out_size: (usize, usize)) -> Result<LandmarkSet, AlignError> {
    let (h, w) = (out_size.0 as f64, out_size.1 as f64);
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in pts.points() {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    if hi[0] <= lo[0] || hi[1] <= lo[1] {
        return Err(AlignError::DegenerateConfiguration(
            "landmark bounding box has zero width or height".into(),
        ));
    }
    let target = [(0.2 * w, 0.8 * w), (0.2 * h, 0.9 * h)];
    let map = |v: f64, k: usize| {
        let (t0, t1) = target[k];
        t0 + (v - lo[k]) / (hi[k] - lo[k]) * (t1 - t0)
    };
    LandmarkSet::new(pts.points().iter().map(|p| [map(p[0], 0), map(p[1], 1)]).collect())
}

/// Symmetrized template fitted to the margins of an `out_size` (h, w) image.
pub fn build_template(
    sample: &LandmarkSet,
    pairs: &SymmetricPairSpec,
    out_size: (usize, usize),
) -> Result<LandmarkSet, AlignError> {
    fit_margins(&symmetrize(sample, pairs)?, out_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn face() -> (LandmarkSet, SymmetricPairSpec) {
        let pts = LandmarkSet::new(vec![
            [10.0, 5.0],
            [30.0, 7.0],
            [21.0, 12.0],
            [14.0, 20.0],
            [25.0, 19.0],
            [19.5, 26.0],
        ])
        .unwrap();
        let spec = SymmetricPairSpec {
            pairs: vec![(0, 1), (3, 4)],
            singles: vec![2, 5],
        };
        (pts, spec)
    }

    #[test]
    fn pair_averaging() {
        let pts = LandmarkSet::new(vec![[10.0, 5.0], [30.0, 7.0]]).unwrap();
        let spec = SymmetricPairSpec {
            pairs: vec![(0, 1)],
            singles: vec![],
        };
        let s = symmetrize(&pts, &spec).unwrap();
        assert_eq!(s.points(), &[[10.0, 6.0], [30.0, 6.0]]);
    }

    #[test]
    fn template_box_is_exact() {
        let (pts, spec) = face();
        let t = build_template(&pts, &spec, (224, 224)).unwrap();
        let xs: Vec<f64> = t.points().iter().map(|p| p[0]).collect();
        let ys: Vec<f64> = t.points().iter().map(|p| p[1]).collect();
        let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!((min(&xs) - 44.8).abs() < 1e-9 && (max(&xs) - 179.2).abs() < 1e-9);
        assert!((min(&ys) - 44.8).abs() < 1e-9 && (max(&ys) - 201.6).abs() < 1e-9);
    }

    #[test]
    fn template_is_mirror_symmetric() {
        let (pts, spec) = face();
        let t = build_template(&pts, &spec, (224, 224)).unwrap();
        let m = spec.mirror(&t, 224.0);
        for (a, b) in m.points().iter().zip(t.points()) {
            assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn symmetric_input_only_rescales() {
        let pts = LandmarkSet::new(vec![[0.0, 0.0], [4.0, 0.0], [2.0, 3.0]]).unwrap();
        let spec = SymmetricPairSpec {
            pairs: vec![(0, 1)],
            singles: vec![2],
        };
        assert_eq!(symmetrize(&pts, &spec).unwrap(), pts);
    }

    proptest! {
        #[test]
        fn any_sample_gives_a_symmetric_template(xs in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), 6)) {
            let (_, spec) = face();
            let pts = LandmarkSet::new(xs.iter().map(|&(x, y)| [x, y]).collect()).unwrap();
            prop_assume!(fit_margins(&pts, (64, 64)).is_ok());
            let Ok(t) = build_template(&pts, &spec, (64, 64)) else { return Ok(()) };
            let m = spec.mirror(&t, 64.0);
            for (a, b) in m.points().iter().zip(t.points()) {
                prop_assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pair_spec_must_cover_exactly_once() {
        let (pts, mut spec) = face();
        spec.singles.pop();
        assert!(matches!(
            build_template(&pts, &spec, (224, 224)),
            Err(AlignError::InvalidPairSpec(_))
        ));
        spec.singles.push(2);
        assert!(spec.validate(6).is_err());
        spec.singles = vec![2, 9];
        assert!(spec.validate(6).is_err());
    }

    #[test]
    fn pair_spec_json() {
        let spec = SymmetricPairSpec::from_json(r#"{"pairs": [[0, 1], [3, 4]], "singles": [2, 5]}"#).unwrap();
        assert_eq!(spec, face().1);
    }
}
