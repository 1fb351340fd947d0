//! Landmark alignment with similarity transforms.
//!
//! Coordinates follow the image convention: x grows rightward, y downward,
//! origin at the top-left corner. Pixel `(row i, col j)` has its centre at
//! `(j + 0.5, i + 0.5)`.

pub mod image;
pub mod template;

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, Matrix3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use self::image::{warp_image, ImageBuffer};
pub use template::{build_template, fit_margins, symmetrize, SymmetricPairSpec};

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("need at least 2 landmarks, got {0}")]
    TooFewPoints(usize),
    #[error("landmark counts differ: {src} vs {dst}")]
    LengthMismatch { src: usize, dst: usize },
    #[error("landmark {0} has a non-finite coordinate")]
    NonFinite(usize),
    #[error("degenerate landmark configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("invalid landmark file: {0}")]
    InvalidLandmarks(String),
    #[error("invalid pair spec: {0}")]
    InvalidPairSpec(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Codec(#[from] ::image::ImageError),
}

impl AlignError {
    /// True when the failure came from the filesystem rather than the data.
    pub fn is_io(&self) -> bool {
        match self {
            Self::Io(_) | Self::Codec(::image::ImageError::IoError(_)) => true,
            Self::Csv(e) => e.is_io_error(),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    points: Vec<[f64; 2]>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self, AlignError> {
        if points.len() < 2 {
            return Err(AlignError::TooFewPoints(points.len()));
        }
        if let Some(i) = points.iter().position(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(AlignError::NonFinite(i));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Reads `x,y` rows; a leading `x,y` header row is skipped.
    pub fn read_csv(input: impl Read) -> Result<Self, AlignError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(input);
        let mut points = Vec::new();
        for (i, record) in reader.deserialize::<(String, String)>().enumerate() {
            let (x, y) = record?;
            if i == 0 && x == "x" && y == "y" {
                continue;
            }
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| AlignError::InvalidLandmarks(format!("row {}: bad number {s:?}", i + 1)))
            };
            points.push([parse(&x)?, parse(&y)?]);
        }
        Self::new(points)
    }

    pub fn load_csv(path: impl AsRef<std::path::Path>) -> Result<Self, AlignError> {
        Self::read_csv(std::fs::File::open(path)?)
    }

    pub fn write_csv(&self, out: impl Write) -> Result<(), AlignError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "y"])?;
        for p in &self.points {
            w.write_record([p[0].to_string(), p[1].to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Mirror image about the vertical axis of an image `width` pixels wide.
    pub fn flipped(&self, width: f64) -> Self {
        Self {
            points: self.points.iter().map(|p| [width - p[0], p[1]]).collect(),
        }
    }
}

/// `[[a, -b, tx], [b, a, ty], [0, 0, 1]]` with `a = s cos θ`, `b = s sin θ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

impl SimilarityTransform {
    pub const IDENTITY: Self = Self {
        a: 1.0,
        b: 0.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn from_params(scale: f64, theta: f64, tx: f64, ty: f64) -> Self {
        Self {
            a: scale * theta.cos(),
            b: scale * theta.sin(),
            tx,
            ty,
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            tx,
            ty,
            ..Self::IDENTITY
        }
    }

    pub fn scale(&self) -> f64 {
        self.a.hypot(self.b)
    }

    pub fn rotation(&self) -> f64 {
        self.b.atan2(self.a)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.a, -self.b, self.tx, self.b, self.a, self.ty, 0.0, 0.0, 1.0)
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        [
            self.a * p[0] - self.b * p[1] + self.tx,
            self.b * p[0] + self.a * p[1] + self.ty,
        ]
    }

    /// Inverse map. Panics on a zero-scale transform.
    pub fn inverse(&self) -> Self {
        let s2 = self.a * self.a + self.b * self.b;
        assert!(s2 > 0.0, "zero-scale similarity has no inverse");
        let (a, b) = (self.a / s2, -self.b / s2);
        Self {
            a,
            b,
            tx: -(a * self.tx - b * self.ty),
            ty: -(b * self.tx + a * self.ty),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let [tx, ty] = self.apply([other.tx, other.ty]);
        Self {
            a: self.a * other.a - self.b * other.b,
            b: self.b * other.a + self.a * other.b,
            tx,
            ty,
        }
    }
}

pub fn apply_transform(t: &SimilarityTransform, pts: &LandmarkSet) -> LandmarkSet {
    LandmarkSet {
        points: pts.points.iter().map(|p| t.apply(*p)).collect(),
    }
}

/// The stacked `2N x 4` system in the unknowns `(a, b, tx, ty)`: each
/// correspondence contributes `[x, -y, 1, 0]` and `[y, x, 0, 1]`.
pub fn similarity_system(src: &LandmarkSet, dst: &LandmarkSet) -> (DMatrix<f64>, DVector<f64>) {
    let n = src.len();
    let mut m = DMatrix::zeros(2 * n, 4);
    let mut rhs = DVector::zeros(2 * n);
    for (i, (u, v)) in src.points.iter().zip(&dst.points).enumerate() {
        let (x, y) = (u[0], u[1]);
        m.row_mut(2 * i).copy_from_slice(&[x, -y, 1.0, 0.0]);
        m.row_mut(2 * i + 1).copy_from_slice(&[y, x, 0.0, 1.0]);
        rhs[2 * i] = v[0];
        rhs[2 * i + 1] = v[1];
    }
    (m, rhs)
}

/// Least-squares similarity mapping `src` onto `dst`, solved by SVD.
pub fn estimate_similarity(src: &LandmarkSet, dst: &LandmarkSet) -> Result<SimilarityTransform, AlignError> {
    if src.len() != dst.len() {
        return Err(AlignError::LengthMismatch {
            src: src.len(),
            dst: dst.len(),
        });
    }
    let (m, rhs) = similarity_system(src, dst);
    let svd = m.svd(true, true);
    let largest = svd.singular_values.max();
    let tol = largest * 1e-12 * (2 * src.len()) as f64;
    if svd.rank(tol) < 4 {
        return Err(AlignError::DegenerateConfiguration("source landmarks coincide".into()));
    }
    let p = svd.solve(&rhs, tol).expect("U and V were computed");
    Ok(SimilarityTransform {
        a: p[0],
        b: p[1],
        tx: p[2],
        ty: p[3],
    })
}

/// Warps a face onto the template: estimates the landmark-to-template
/// similarity and resamples through its inverse. Returns the aligned image
/// and the landmark-to-template transform.
pub fn align_face(
    img: &ImageBuffer,
    landmarks: &LandmarkSet,
    template: &LandmarkSet,
    out_size: (usize, usize),
) -> Result<(ImageBuffer, SimilarityTransform), AlignError> {
    let t = estimate_similarity(landmarks, template)?;
    if t.scale() == 0.0 {
        return Err(AlignError::DegenerateConfiguration(
            "template landmarks coincide".into(),
        ));
    }
    Ok((warp_image(img, &t.inverse(), out_size), t))
}
