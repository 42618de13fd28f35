//! Camera-accuracy metrics after similarity alignment, and masked PSNR.

use nalgebra::SVD;
use serde::{Serialize, Serializer};

pub use crate::geometry::SimilarityTransform;
use crate::error::{Error, Result};
use crate::geometry::{rotation_distance, CameraSequence, Mat3, Vec3};
use crate::image::{Mask, RgbImage};

/// Relative singular-value floor below which a point set counts as collinear.
const RANK_TOLERANCE: f64 = 1e-10;

/// Least-squares similarity (or rigid, when `with_scale` is false) transform
/// mapping `src` onto `dst`, minimizing `Σ ‖dst_i − (s R src_i + t)‖²`.
/// The rotation always has determinant +1.
pub fn umeyama(src: &[Vec3], dst: &[Vec3], with_scale: bool) -> Result<SimilarityTransform> {
    if src.len() != dst.len() {
        return Err(Error::Shape(format!(
            "umeyama needs equal-length sets, got {} and {}",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(Error::Rank(format!(
            "umeyama needs at least 3 correspondences, got {}",
            src.len()
        )));
    }
    let n = src.len() as f64;
    let mu_src = src.iter().sum::<Vec3>() / n;
    let mu_dst = dst.iter().sum::<Vec3>() / n;

    let mut cov = Mat3::zeros();
    let mut scatter = Mat3::zeros();
    let mut var_src = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let sc = s - mu_src;
        let dc = d - mu_dst;
        cov += dc * sc.transpose();
        scatter += sc * sc.transpose();
        var_src += sc.norm_squared();
    }
    cov /= n;
    var_src /= n;

    let spread = scatter.symmetric_eigenvalues();
    let (lo, hi) = (spread.min(), spread.max());
    let mid = spread.sum() - lo - hi;
    if !(hi > 0.0) || mid <= RANK_TOLERANCE * hi {
        return Err(Error::Rank(
            "source points are coincident or collinear".into(),
        ));
    }

    let svd = SVD::new(cov, true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let sv = svd.singular_values;
    let mut sign = Vec3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        sign[sv.imin()] = -1.0;
    }
    let rotation = u * Mat3::from_diagonal(&sign) * v_t;
    let scale = if with_scale {
        sv.component_mul(&sign).sum() / var_src
    } else {
        1.0
    };
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Rank(
            "target points are degenerate; no positive scale fits".into(),
        ));
    }
    let translation = mu_dst - scale * (rotation * mu_src);
    Ok(SimilarityTransform {
        scale,
        rotation,
        translation,
    })
}

/// Sum of squared residuals of `s` mapping `src` onto `dst`.
pub fn alignment_residual(s: &SimilarityTransform, src: &[Vec3], dst: &[Vec3]) -> f64 {
    src.iter()
        .zip(dst)
        .map(|(a, b)| (b - s.apply(a)).norm_squared())
        .sum()
}

/// Aligns a predicted trajectory to ground truth by fitting the camera
/// centers of `anchor_pred` frames to `anchor_gt` (in order), then applying
/// the transform to every predicted camera.
pub fn align_trajectories(
    pred: &CameraSequence,
    anchor_pred: &[usize],
    anchor_gt: &CameraSequence,
    with_scale: bool,
) -> Result<(CameraSequence, SimilarityTransform)> {
    if anchor_pred.len() != anchor_gt.len() {
        return Err(Error::Shape(format!(
            "{} anchor indices for {} ground-truth anchors",
            anchor_pred.len(),
            anchor_gt.len()
        )));
    }
    let src = anchor_pred
        .iter()
        .map(|&i| {
            pred.get(i)
                .map(|c| c.pose.center)
                .ok_or_else(|| Error::Shape(format!("anchor index {i} outside trajectory")))
        })
        .collect::<Result<Vec<_>>>()?;
    let transform = umeyama(&src, &anchor_gt.centers(), with_scale)?;
    let cameras = pred
        .iter()
        .map(|c| crate::geometry::Camera::new(c.intrinsics, transform.apply_pose(&c.pose)))
        .collect();
    Ok((CameraSequence { cameras }, transform))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameError {
    pub frame: usize,
    pub rot_err: f64,
    pub rot_err_deg: f64,
    pub trans_err: f64,
    pub fov_err_deg: f64,
}

/// Mean rotation error (radians and degrees), mean squared camera-center
/// distance, and mean absolute vertical-FOV difference (degrees).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CameraErrorReport {
    pub frames: usize,
    pub rot_err: f64,
    pub rot_err_deg: f64,
    pub trans_err: f64,
    pub intr_err: f64,
    pub per_frame: Vec<FrameError>,
    pub notes: Vec<String>,
}

pub const TRANS_ERR_NOTE: &str =
    "trans_err = mean over frames of ||t_tgt - t_gen||_2^2 on camera centers";

pub fn camera_errors(gen: &CameraSequence, tgt: &CameraSequence) -> Result<CameraErrorReport> {
    if gen.len() != tgt.len() {
        return Err(Error::Shape(format!(
            "generated trajectory has {} frames, target has {}",
            gen.len(),
            tgt.len()
        )));
    }
    if gen.is_empty() {
        return Err(Error::EmptyInput("camera_errors needs at least one frame".into()));
    }
    let per_frame: Vec<FrameError> = gen
        .iter()
        .zip(tgt.iter())
        .enumerate()
        .map(|(frame, (g, t))| {
            let rot = rotation_distance(&t.pose.rotation, &g.pose.rotation);
            FrameError {
                frame,
                rot_err: rot,
                rot_err_deg: rot.to_degrees(),
                trans_err: (t.pose.center - g.pose.center).norm_squared(),
                fov_err_deg: (t.intrinsics.fov_v_deg() - g.intrinsics.fov_v_deg()).abs(),
            }
        })
        .collect();
    let n = per_frame.len() as f64;
    let mean = |f: fn(&FrameError) -> f64| per_frame.iter().map(f).sum::<f64>() / n;
    let rot_err = mean(|e| e.rot_err);
    Ok(CameraErrorReport {
        frames: per_frame.len(),
        rot_err,
        rot_err_deg: rot_err.to_degrees(),
        trans_err: mean(|e| e.trans_err),
        intr_err: mean(|e| e.fov_err_deg),
        per_frame,
        notes: vec![TRANS_ERR_NOTE.to_string()],
    })
}

impl CameraErrorReport {
    /// Fixed-column table: `frame, rot_err_deg, trans_err, fov_err_deg`, then means.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:>6} {:>14} {:>14} {:>14}\n",
            "frame", "rot_err_deg", "trans_err", "fov_err_deg"
        );
        for e in &self.per_frame {
            out += &format!(
                "{:>6} {:>14.6} {:>14.6e} {:>14.6}\n",
                e.frame, e.rot_err_deg, e.trans_err, e.fov_err_deg
            );
        }
        out += &format!(
            "{:>6} {:>14.6} {:>14.6e} {:>14.6}\n",
            "mean", self.rot_err_deg, self.trans_err, self.intr_err
        );
        out
    }
}

/// PSNR in dB with `+inf` serialized as the string `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psnr(pub f64);

impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_infinite() {
            s.serialize_str(if self.0 > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(self.0)
        }
    }
}

/// PSNR (peak 1.0) over the masked pixels of a whole sequence.
pub fn masked_psnr(gen: &[RgbImage], gt: &[RgbImage], mask: &[Mask]) -> Result<Psnr> {
    if gen.len() != gt.len() || gen.len() != mask.len() {
        return Err(Error::Shape(format!(
            "sequence lengths differ: gen {}, gt {}, mask {}",
            gen.len(),
            gt.len(),
            mask.len()
        )));
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (i, ((g, t), m)) in gen.iter().zip(gt).zip(mask).enumerate() {
        t.check_dims(g.width, g.height, &format!("ground truth frame {i}"))?;
        m.check_dims(g.width, g.height, &format!("mask frame {i}"))?;
        for ((a, b), &on) in g.data.iter().zip(&t.data).zip(&m.data) {
            if on {
                for c in 0..3 {
                    let d = a[c] as f64 - b[c] as f64;
                    sum += d * d;
                }
                count += 3;
            }
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("mask selects no pixels".into()));
    }
    let mse = sum / count as f64;
    Ok(Psnr(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }))
}
