//! Seeded image augmentation and resolution preprocessing.
//!
//! Geometric transforms (shear, rotation/translation/scale, perspective) are
//! composed into one homography and applied with a single bilinear warp.
//! Photometric transforms follow. Parameters for a sample are drawn from a
//! generator keyed by `(policy.seed, sample_index)`, so any sample can be
//! augmented independently of the others.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::image::ImageTensor;
use crate::rng::{derive_indexed, rng_from};
use crate::{Error, Result};

/// Row-major 3x3 homography acting on `(x, y, 1)` pixel-center coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub [[f64; 3]; 3]);

impl Homography {
    pub const IDENTITY: Homography = Homography([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])
    }

    /// Shear angles in radians along x and y.
    pub fn shear(ax: f64, ay: f64) -> Self {
        Homography([[1.0, libm::tan(ax), 0.0], [libm::tan(ay), 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    /// Rotation (radians) and isotropic scale about the origin.
    pub fn rotation_scale(angle: f64, scale: f64) -> Self {
        let (s, c) = (libm::sin(angle) * scale, libm::cos(angle) * scale);
        Homography([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    }

    /// Homography taking the four `src` points onto `dst`. `None` when the
    /// point configuration is degenerate.
    pub fn from_correspondences(src: [(f64, f64); 4], dst: [(f64, f64); 4]) -> Option<Self> {
        let mut a = [[0.0f64; 9]; 8];
        for (i, (&(x, y), &(u, v))) in src.iter().zip(dst.iter()).enumerate() {
            a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
            a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
        }
        let h = solve_augmented::<8>(a)?;
        Some(Homography([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]]))
    }

    /// `self * rhs`: applies `rhs` first.
    pub fn then_after(&self, rhs: &Homography) -> Homography {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[i][k] * rhs.0[k][j]).sum();
            }
        }
        Homography(out)
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Option<Homography> {
        let det = self.determinant();
        if !det.is_finite() || det.abs() < 1e-12 {
            return None;
        }
        let m = &self.0;
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        let adj = [
            [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
            [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
            [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
        ];
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = adj[i][j] / det;
            }
        }
        Some(Homography(out))
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        ((m[0][0] * x + m[0][1] * y + m[0][2]) / w, (m[1][0] * x + m[1][1] * y + m[1][2]) / w)
    }
}

/// Gaussian elimination with partial pivoting on an `N x (N+1)` system.
fn solve_augmented<const N: usize>(a: [[f64; 9]; N]) -> Option<[f64; N]> {
    let mut a = a;
    for col in 0..N {
        let pivot = (col..N).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        for row in 0..N {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..=N {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    let mut x = [0.0; N];
    for i in 0..N {
        x[i] = a[i][N] / a[i][i];
    }
    Some(x)
}

/// Inclusive range a parameter is drawn from uniformly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamRange {
    pub lo: f64,
    pub hi: f64,
}

impl ParamRange {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformSpec {
    pub enabled: bool,
    /// Chance the transform is applied to a given sample.
    pub prob: f64,
    pub range: ParamRange,
}

impl TransformSpec {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { enabled: true, prob: 0.5, range: ParamRange::new(lo, hi) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPolicy {
    /// Shear angle, degrees (drawn independently for x and y).
    pub shear: TransformSpec,
    /// Rotation, degrees.
    pub rotate: TransformSpec,
    /// Translation as a fraction of width/height.
    pub translate: TransformSpec,
    pub scale: TransformSpec,
    /// Corner jitter as a fraction of width/height.
    pub perspective: TransformSpec,
    pub contrast: TransformSpec,
    pub brightness: TransformSpec,
    pub saturation: TransformSpec,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            shear: TransformSpec::new(-5.0, 5.0),
            rotate: TransformSpec::new(-2.0, 2.0),
            translate: TransformSpec::new(-0.02, 0.02),
            scale: TransformSpec::new(0.95, 1.05),
            perspective: TransformSpec::new(0.0, 0.02),
            contrast: TransformSpec::new(0.8, 1.2),
            brightness: TransformSpec::new(0.8, 1.2),
            saturation: TransformSpec::new(0.8, 1.2),
            seed: 0,
        }
    }
}

impl AugmentPolicy {
    /// Every transform switched off.
    pub fn disabled() -> Self {
        let mut p = Self::default();
        for s in p.specs_mut() {
            s.enabled = false;
        }
        p
    }

    pub fn specs(&self) -> [(&'static str, &TransformSpec); 8] {
        [
            ("shear", &self.shear),
            ("rotate", &self.rotate),
            ("translate", &self.translate),
            ("scale", &self.scale),
            ("perspective", &self.perspective),
            ("contrast", &self.contrast),
            ("brightness", &self.brightness),
            ("saturation", &self.saturation),
        ]
    }

    pub fn specs_mut(&mut self) -> [&mut TransformSpec; 8] {
        [
            &mut self.shear,
            &mut self.rotate,
            &mut self.translate,
            &mut self.scale,
            &mut self.perspective,
            &mut self.contrast,
            &mut self.brightness,
            &mut self.saturation,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in self.specs() {
            if !(s.range.lo <= s.range.hi) {
                return Err(Error::Config(alloc::format!("{name}: range lo > hi")));
            }
            if !(0.0..=1.0).contains(&s.prob) {
                return Err(Error::Config(alloc::format!("{name}: probability outside [0,1]")));
            }
        }
        if self.perspective.enabled && (self.perspective.range.lo < 0.0 || self.perspective.range.hi >= 0.5) {
            return Err(Error::Config("perspective jitter must lie in [0, 0.5)".into()));
        }
        Ok(())
    }

    fn any_geometric(&self) -> bool {
        self.shear.enabled || self.rotate.enabled || self.translate.enabled || self.scale.enabled || self.perspective.enabled
    }
}

/// Parameters drawn for one sample; `None` means not applied.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DrawnParams {
    pub shear_deg: Option<(f64, f64)>,
    pub rotate_deg: Option<f64>,
    pub translate: Option<(f64, f64)>,
    pub scale: Option<f64>,
    /// Corner offsets as fractions of width/height: TL, TR, BR, BL.
    pub perspective: Option<[(f64, f64); 4]>,
    pub contrast: Option<f64>,
    pub brightness: Option<f64>,
    pub saturation: Option<f64>,
}

impl DrawnParams {
    /// Draws every parameter in a fixed order whether or not the transform is
    /// enabled, so toggling one transform never shifts another's values.
    pub fn draw(policy: &AugmentPolicy, sample_index: u64) -> Self {
        let mut rng = rng_from(derive_indexed(policy.seed, "augment", sample_index));
        let mut pick = |spec: &TransformSpec, n: usize| -> Option<[f64; 8]> {
            let gate: f64 = rng.random();
            let mut vals = [0.0; 8];
            for v in vals.iter_mut().take(n) {
                let u: f64 = rng.random();
                *v = spec.range.lo + (spec.range.hi - spec.range.lo) * u;
            }
            (spec.enabled && gate < spec.prob).then_some(vals)
        };
        let shear = pick(&policy.shear, 2);
        let rotate = pick(&policy.rotate, 1);
        let translate = pick(&policy.translate, 2);
        let scale = pick(&policy.scale, 1);
        let perspective = pick(&policy.perspective, 8);
        let contrast = pick(&policy.contrast, 1);
        let brightness = pick(&policy.brightness, 1);
        let saturation = pick(&policy.saturation, 1);
        let signs: u64 = rng.random();
        let sign = |bit: usize| if signs >> bit & 1 == 1 { -1.0 } else { 1.0 };
        DrawnParams {
            shear_deg: shear.map(|v| (v[0], v[1])),
            rotate_deg: rotate.map(|v| v[0]),
            translate: translate.map(|v| (v[0], v[1])),
            scale: scale.map(|v| v[0]),
            perspective: perspective.map(|v| {
                let mut c = [(0.0, 0.0); 4];
                for (i, corner) in c.iter_mut().enumerate() {
                    *corner = (sign(2 * i) * v[2 * i], sign(2 * i + 1) * v[2 * i + 1]);
                }
                c
            }),
            contrast: contrast.map(|v| v[0]),
            brightness: brightness.map(|v| v[0]),
            saturation: saturation.map(|v| v[0]),
        }
    }

    /// The individual geometric transforms, in application order, about the
    /// image center.
    pub fn geometric_steps(&self, width: usize, height: usize) -> Option<Vec<Homography>> {
        let (w, h) = (width as f64, height as f64);
        let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
        let mut steps = Vec::new();
        let to_center = Homography::translation(-cx, -cy);
        let from_center = Homography::translation(cx, cy);
        if let Some((ax, ay)) = self.shear_deg {
            steps.push(from_center.then_after(&Homography::shear(ax.to_radians(), ay.to_radians())).then_after(&to_center));
        }
        if self.rotate_deg.is_some() || self.scale.is_some() {
            let r = Homography::rotation_scale(self.rotate_deg.unwrap_or(0.0).to_radians(), self.scale.unwrap_or(1.0));
            steps.push(from_center.then_after(&r).then_after(&to_center));
        }
        if let Some((tx, ty)) = self.translate {
            steps.push(Homography::translation(tx * w, ty * h));
        }
        if let Some(offsets) = self.perspective {
            let src = [(0.0, 0.0), (w - 1.0, 0.0), (w - 1.0, h - 1.0), (0.0, h - 1.0)];
            let mut dst = src;
            for (d, (ox, oy)) in dst.iter_mut().zip(offsets) {
                d.0 += ox * w;
                d.1 += oy * h;
            }
            steps.push(Homography::from_correspondences(src, dst)?);
        }
        Some(steps)
    }
}

/// Composes steps so that `steps[0]` is applied first.
pub fn compose(steps: &[Homography]) -> Homography {
    steps.iter().fold(Homography::IDENTITY, |acc, s| s.then_after(&acc))
}

/// Bilinear sample at pixel-center coordinates; out-of-image taps read `fill`.
fn sample_bilinear(img: &ImageTensor, c: usize, x: f64, y: f64, fill: f32) -> f32 {
    let x0 = libm::floor(x);
    let y0 = libm::floor(y);
    let fx = (x - x0) as f32;
    let fy = (y - y0) as f32;
    let (w, h) = (img.width() as i64, img.height() as i64);
    let tap = |xi: i64, yi: i64| {
        if xi < 0 || yi < 0 || xi >= w || yi >= h {
            fill
        } else {
            img.get(c, yi as usize, xi as usize)
        }
    };
    let (xi, yi) = (x0 as i64, y0 as i64);
    let top = tap(xi, yi) * (1.0 - fx) + tap(xi + 1, yi) * fx;
    let bottom = tap(xi, yi + 1) * (1.0 - fx) + tap(xi + 1, yi + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Warps `img` by the forward map `h` (source to destination), white border.
pub fn warp(img: &ImageTensor, h: &Homography) -> Option<ImageTensor> {
    let inv = h.inverse()?;
    let mut out = ImageTensor::filled(img.channels(), img.height(), img.width(), 1.0);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let (sx, sy) = inv.apply(x as f64, y as f64);
            if !sx.is_finite() || !sy.is_finite() {
                continue;
            }
            for c in 0..img.channels() {
                out.set(c, y, x, sample_bilinear(img, c, sx, sy, 1.0));
            }
        }
    }
    Some(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentOutcome {
    pub image: ImageTensor,
    pub params: DrawnParams,
    /// The homography was degenerate and geometry was skipped.
    pub geometric_skipped: bool,
    /// Values clamped back into `[0, 1]` by photometric transforms.
    pub clamped: usize,
}

pub fn apply(policy: &AugmentPolicy, img: &ImageTensor, sample_index: u64) -> AugmentOutcome {
    let params = DrawnParams::draw(policy, sample_index);
    let mut image = img.clone();
    let mut geometric_skipped = false;
    if policy.any_geometric() {
        match params.geometric_steps(img.width(), img.height()) {
            Some(steps) if !steps.is_empty() => match warp(img, &compose(&steps)) {
                Some(w) => image = w,
                None => geometric_skipped = true,
            },
            Some(_) => {}
            None => geometric_skipped = true,
        }
    }
    let clamped = photometric(&mut image, &params);
    AugmentOutcome { image, params, geometric_skipped, clamped }
}

/// Brightness, then contrast, then saturation. Returns the clamp count.
pub fn photometric(img: &mut ImageTensor, p: &DrawnParams) -> usize {
    if p.brightness.is_none() && p.contrast.is_none() && p.saturation.is_none() {
        return 0;
    }
    if let Some(b) = p.brightness {
        for v in img.data_mut() {
            *v *= b as f32;
        }
    }
    if let Some(c) = p.contrast {
        let gray = luma(img);
        let mean = gray.iter().map(|&g| f64::from(g)).sum::<f64>() / gray.len() as f64;
        let mean = mean as f32;
        for v in img.data_mut() {
            *v = mean + (*v - mean) * c as f32;
        }
    }
    if let Some(s) = p.saturation {
        // Single-channel images carry no saturation.
        if img.channels() == 3 {
            let gray = luma(img);
            let n = gray.len();
            let data = img.data_mut();
            for ch in 0..3 {
                for (i, &g) in gray.iter().enumerate() {
                    let v = &mut data[ch * n + i];
                    *v = g + (*v - g) * s as f32;
                }
            }
        }
    }
    let mut clamped = 0;
    for v in img.data_mut() {
        if *v < 0.0 || *v > 1.0 {
            *v = v.clamp(0.0, 1.0);
            clamped += 1;
        }
    }
    clamped
}

fn luma(img: &ImageTensor) -> Vec<f32> {
    if img.channels() == 1 {
        return img.plane(0).to_vec();
    }
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    r.iter().zip(g).zip(b).map(|((&r, &g), &b)| 0.299 * r + 0.587 * g + 0.114 * b).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeMode {
    /// Stretch to the target, ignoring aspect ratio.
    Distort,
    /// Fit inside the target keeping aspect ratio, centered on white.
    PadWhite,
}

/// Bilinear resize with half-pixel-center alignment; same-size is an exact copy.
pub fn resize_bilinear(img: &ImageTensor, width: usize, height: usize) -> ImageTensor {
    if width == img.width() && height == img.height() {
        return img.clone();
    }
    let sx = img.width() as f64 / width as f64;
    let sy = img.height() as f64 / height as f64;
    let mut out = ImageTensor::filled(img.channels(), height, width, 0.0);
    let max_x = (img.width() - 1) as f64;
    let max_y = (img.height() - 1) as f64;
    for y in 0..height {
        let src_y = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
        for x in 0..width {
            let src_x = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
            for c in 0..img.channels() {
                out.set(c, y, x, sample_bilinear(img, c, src_x, src_y, 0.0));
            }
        }
    }
    out
}

/// Where the scaled content lands inside a padded canvas.
pub fn pad_layout(width: usize, height: usize, target_w: usize, target_h: usize) -> (usize, usize, usize, usize) {
    let scale = (target_w as f64 / width as f64).min(target_h as f64 / height as f64);
    let cw = (libm::round(width as f64 * scale) as usize).clamp(1, target_w);
    let ch = (libm::round(height as f64 * scale) as usize).clamp(1, target_h);
    ((target_w - cw) / 2, (target_h - ch) / 2, cw, ch)
}

/// Resizes to the target and normalizes each channel as `(x - mean) / std`.
/// `mean` and `std` hold one value for all channels or one per channel.
pub fn preprocess(
    img: &ImageTensor,
    target_w: usize,
    target_h: usize,
    mode: ResizeMode,
    mean: &[f32],
    std: &[f32],
) -> Result<ImageTensor> {
    if target_w == 0 || target_h == 0 {
        return Err(Error::Config("target dimensions must be positive".into()));
    }
    let pick = |v: &[f32], c: usize| -> Result<f32> {
        match v.len() {
            1 => Ok(v[0]),
            n if n == img.channels() => Ok(v[c]),
            _ => Err(Error::Config("mean/std length must be 1 or the channel count".into())),
        }
    };
    let mut out = match mode {
        ResizeMode::Distort => resize_bilinear(img, target_w, target_h),
        ResizeMode::PadWhite => {
            let (ox, oy, cw, ch) = pad_layout(img.width(), img.height(), target_w, target_h);
            let content = resize_bilinear(img, cw, ch);
            let mut canvas = ImageTensor::filled(img.channels(), target_h, target_w, 1.0);
            for c in 0..img.channels() {
                for y in 0..ch {
                    for x in 0..cw {
                        canvas.set(c, oy + y, ox + x, content.get(c, y, x));
                    }
                }
            }
            canvas
        }
    };
    let channels = out.channels();
    let plane = target_w * target_h;
    let mut stats = vec![(0.0f32, 1.0f32); channels];
    for (c, s) in stats.iter_mut().enumerate() {
        let sd = pick(std, c)?;
        if !(sd > 0.0) {
            return Err(Error::Config("std must be positive".into()));
        }
        *s = (pick(mean, c)?, sd);
    }
    if stats.iter().any(|&(m, s)| m != 0.0 || s != 1.0) {
        for (c, &(m, s)) in stats.iter().enumerate() {
            for v in &mut out.data_mut()[c * plane..(c + 1) * plane] {
                *v = (*v - m) / s;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(c: usize, h: usize, w: usize) -> ImageTensor {
        let data = (0..c * h * w).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        ImageTensor::new(c, h, w, data).unwrap()
    }

    #[test]
    fn disabled_policy_is_identity() {
        let img = gradient_image(3, 12, 9);
        let out = apply(&AugmentPolicy::disabled(), &img, 5);
        assert_eq!(out.image, img);
        assert_eq!(out.clamped, 0);
    }

    #[test]
    fn unit_photometric_factors_are_identity() {
        let mut img = gradient_image(3, 8, 8);
        let before = img.clone();
        let p = DrawnParams { contrast: Some(1.0), brightness: Some(1.0), saturation: Some(1.0), ..Default::default() };
        photometric(&mut img, &p);
        for (a, b) in img.data().iter().zip(before.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn same_seed_and_index_is_reproducible() {
        let mut policy = AugmentPolicy::default();
        for s in policy.specs_mut() {
            s.prob = 1.0;
        }
        policy.seed = 11;
        let img = gradient_image(1, 20, 30);
        let a = apply(&policy, &img, 3);
        let b = apply(&policy, &img, 3);
        assert_eq!(a, b);
        assert_ne!(a.image, apply(&policy, &img, 4).image);
    }

    #[test]
    fn saturation_is_noop_on_gray() {
        let mut img = gradient_image(1, 5, 5);
        let before = img.clone();
        photometric(&mut img, &DrawnParams { saturation: Some(0.3), ..Default::default() });
        assert_eq!(img, before);
    }

    #[test]
    fn brightness_clamps_and_counts() {
        let mut img = ImageTensor::filled(1, 2, 2, 0.9);
        let n = photometric(&mut img, &DrawnParams { brightness: Some(2.0), ..Default::default() });
        assert_eq!(n, 4);
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn composed_homography_matches_sequential_application() {
        let p = DrawnParams {
            shear_deg: Some((3.0, -2.0)),
            rotate_deg: Some(1.5),
            translate: Some((0.01, -0.02)),
            scale: Some(1.03),
            perspective: Some([(0.01, 0.02), (-0.015, 0.01), (0.0, -0.02), (0.02, 0.0)]),
            ..Default::default()
        };
        let steps = p.geometric_steps(40, 30).unwrap();
        let h = compose(&steps);
        for y in 0..30 {
            for x in 0..40 {
                let (mut px, mut py) = (x as f64, y as f64);
                for s in &steps {
                    (px, py) = s.apply(px, py);
                }
                let (qx, qy) = h.apply(x as f64, y as f64);
                assert!((px - qx).abs() < 1e-9 && (py - qy).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn perspective_maps_corners() {
        let src = [(0.0, 0.0), (9.0, 0.0), (9.0, 9.0), (0.0, 9.0)];
        let dst = [(0.5, 0.2), (8.0, -0.3), (9.4, 9.1), (-0.2, 8.7)];
        let h = Homography::from_correspondences(src, dst).unwrap();
        for (s, d) in src.iter().zip(dst.iter()) {
            let (x, y) = h.apply(s.0, s.1);
            assert!((x - d.0).abs() < 1e-9 && (y - d.1).abs() < 1e-9);
        }
        let collapsed = [(0.0, 0.0); 4];
        assert!(Homography::from_correspondences(src, collapsed).is_none());
    }

    #[test]
    fn singular_homography_is_not_invertible() {
        let h = Homography([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 1.0]]);
        assert!(h.inverse().is_none());
        let img = gradient_image(1, 4, 4);
        assert!(warp(&img, &h).is_none());
    }

    #[test]
    fn identity_resize_is_exact() {
        let img = gradient_image(1, 40, 40);
        let out = preprocess(&img, 40, 40, ResizeMode::Distort, &[0.0], &[1.0]).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn pad_white_centers_content() {
        // 200 wide, 400 tall into 400x400.
        let img = ImageTensor::filled(1, 400, 200, 0.0);
        let out = preprocess(&img, 400, 400, ResizeMode::PadWhite, &[0.0], &[1.0]).unwrap();
        for x in 0..400 {
            let expect = if (100..300).contains(&x) { 0.0 } else { 1.0 };
            assert_eq!(out.get(0, 200, x), expect, "column {x}");
        }
    }

    #[test]
    fn constant_stays_constant() {
        let img = ImageTensor::filled(1, 17, 23, 0.25);
        let out = resize_bilinear(&img, 40, 11);
        assert!(out.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn normalization_applies_mean_std() {
        let img = ImageTensor::filled(1, 4, 4, 1.0);
        let out = preprocess(&img, 4, 4, ResizeMode::Distort, &[0.5], &[0.5]).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
    }
}
