//! Classical spatial-domain enhancement: Laplacian sharpening and a sigmoid
//! contrast stretch, plus their combination.
//!
//! ```text
//! g = f - c * lap(f)                          lap = 4-neighbour stencil, replicate border
//! m(v) = gamma * (1 / (1 + exp(-alpha * (v - beta))) - 0.5)
//! q = f * m(f)
//! combined = clamp(g + q, 0, 1)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Plane, RgbImage};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhanceParams {
    /// Laplacian centre coefficient.
    pub c: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for EnhanceParams {
    fn default() -> Self {
        EnhanceParams {
            c: 1.0,
            alpha: 4.0,
            beta: 0.5,
            gamma: 2.0,
        }
    }
}

impl EnhanceParams {
    /// `gamma == 0` is accepted: it disables the contrast term.
    pub fn validate(&self) -> Result<()> {
        let ok = self.c >= 0.0
            && self.alpha > 0.0
            && self.gamma >= 0.0
            && (0.0..=1.0).contains(&self.beta)
            && [self.c, self.alpha, self.beta, self.gamma]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "enhance parameters out of range: {self:?} (need c >= 0, alpha > 0, gamma >= 0, 0 <= beta <= 1)"
            )))
        }
    }
}

fn check_plane(f: &Plane) -> Result<()> {
    if f.width == 0 || f.height == 0 {
        return Err(Error::dim("height", "cannot enhance an empty image"));
    }
    Ok(())
}

/// 4-neighbour Laplacian with replicated borders.
pub fn laplacian(f: &Plane) -> Result<Plane> {
    check_plane(f)?;
    let (w, h) = (f.width, f.height);
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let up = y.saturating_sub(1);
        let down = (y + 1).min(h - 1);
        for x in 0..w {
            let left = x.saturating_sub(1);
            let right = (x + 1).min(w - 1);
            out[y * w + x] =
                f.at(x, up) + f.at(x, down) + f.at(left, y) + f.at(right, y) - 4.0 * f.at(x, y);
        }
    }
    Plane::new(w, h, out)
}

/// `f - c * lap(f)`, unclamped.
pub fn sharpen(f: &Plane, c: f64) -> Result<Plane> {
    let lap = laplacian(f)?;
    Plane::new(
        f.width,
        f.height,
        f.data
            .iter()
            .zip(&lap.data)
            .map(|(&v, &l)| v - c * l)
            .collect(),
    )
}

pub fn contrast_value(v: f64, p: &EnhanceParams) -> f64 {
    p.gamma * (1.0 / (1.0 + (-p.alpha * (v - p.beta)).exp()) - 0.5)
}

pub fn contrast_map(f: &Plane, p: &EnhanceParams) -> Plane {
    f.map(|v| contrast_value(v, p))
}

pub fn contrast_enhance(f: &Plane, p: &EnhanceParams) -> Plane {
    f.map(|v| v * contrast_value(v, p))
}

/// `clamp(sharpen(f) + contrast_enhance(f), 0, 1)`.
pub fn enhance_combine(f: &Plane, p: &EnhanceParams) -> Result<Plane> {
    p.validate()?;
    let g = sharpen(f, p.c)?;
    let q = contrast_enhance(f, p);
    Plane::new(
        f.width,
        f.height,
        g.data
            .iter()
            .zip(&q.data)
            .map(|(&a, &b)| (a + b).clamp(0.0, 1.0))
            .collect(),
    )
}

/// The four panels produced for an RGB image, each processed per channel.
#[derive(Clone, Debug)]
pub struct EnhancePanels {
    pub sharpened: RgbImage,
    /// Contrast map rescaled for display as `m / gamma + 0.5` (identity-grey when `gamma == 0`).
    pub contrast_map: RgbImage,
    pub contrast_enhanced: RgbImage,
    pub combined: RgbImage,
}

pub fn enhance_rgb(img: &RgbImage, p: &EnhanceParams) -> Result<EnhancePanels> {
    p.validate()?;
    let display = |m: f64| {
        if p.gamma > 0.0 {
            m / p.gamma + 0.5
        } else {
            0.5
        }
    };
    Ok(EnhancePanels {
        sharpened: img.map_planes(|f| sharpen(f, p.c).expect("non-empty plane"))?,
        contrast_map: img.map_planes(|f| contrast_map(f, p).map(display))?,
        contrast_enhanced: img.map_planes(|f| contrast_enhance(f, p))?,
        combined: img.map_planes(|f| enhance_combine(f, p).expect("validated params"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn impulse_response() {
        let mut f = Plane::filled(5, 5, 0.0);
        f.data[12] = 1.0;
        let g = sharpen(&f, 1.0).unwrap();
        assert_eq!(g.at(2, 2), 5.0);
        for (x, y) in [(1, 2), (3, 2), (2, 1), (2, 3)] {
            assert_eq!(g.at(x, y), -1.0);
        }
        assert_eq!(g.at(0, 0), 0.0);
        assert_eq!(g.at(1, 1), 0.0);
    }

    #[test]
    fn constant_is_fixed_point() {
        let f = Plane::filled(4, 3, 0.37);
        assert_eq!(sharpen(&f, 2.5).unwrap(), f);
    }

    #[test]
    fn contrast_scalar_oracle() {
        let p = EnhanceParams {
            c: 0.0,
            alpha: 4.0,
            beta: 0.5,
            gamma: 2.0,
        };
        assert_eq!(contrast_value(0.5, &p), 0.0);
        let want = 2.0 * (1.0 / (1.0 + (-1.0f64).exp()) - 0.5);
        assert!((contrast_value(0.75, &p) - want).abs() < 1e-15);
        assert!((want - 0.4621).abs() < 1e-4);
        assert!((contrast_value(1e6, &p) - 1.0).abs() < 1e-12);
        assert!((contrast_value(-1e6, &p) + 1.0).abs() < 1e-12);

        let f = Plane::new(2, 1, vec![0.25, 0.75]).unwrap();
        let q = contrast_enhance(&f, &p);
        assert!((q.data[0] + 0.1155).abs() < 1e-4);
        assert!((q.data[1] - 0.3466).abs() < 1e-4);
    }

    #[test]
    fn empty_image_rejected() {
        let f = Plane::new(0, 0, vec![]).unwrap();
        assert!(matches!(sharpen(&f, 1.0), Err(Error::Dimension { .. })));
    }

    #[test]
    fn params_validated() {
        let bad = EnhanceParams {
            alpha: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = EnhanceParams {
            beta: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
