use rand::Rng;
use serde::{Deserialize, Serialize};

use super::describe::Attribute;
use super::PersonSpec;
use crate::diffcore::{Real, Tensor};
use crate::error::{Error, Result};

const BACKGROUND: [f32; 3] = [0.5, 0.5, 0.5];
const SKIN: [f32; 3] = [0.85, 0.7, 0.55];
const HAIR: [f32; 3] = [0.35, 0.22, 0.1];

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 || height == 0 || width == 0 {
            return Err(Error::Dataset(format!(
                "image buffer of {} bytes does not match {height}x{width}x3",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [0, 1, 2].map(|c| self.data[i + c] as f32 / 255.0)
    }

    /// `[H, W, 3]` tensor with values in `[0, 1]`.
    pub fn to_tensor<S: Real>(&self) -> Tensor<S> {
        Tensor::new(
            vec![self.height, self.width, 3],
            self.data.iter().map(|&b| S::lit(b as f64 / 255.0)).collect(),
        )
    }

    pub fn flipped(&self) -> Image {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                let i = (y * self.width + x) * 3;
                data.extend_from_slice(&self.data[i..i + 3]);
            }
        }
        Image {
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Mean color over a region.
    pub fn region_mean(&self, region: &Region) -> [f32; 3] {
        let mut sum = [0f32; 3];
        for y in region.rows.0..region.rows.1 {
            for x in region.cols.0..region.cols.1 {
                let p = self.pixel(y, x);
                for c in 0..3 {
                    sum[c] += p[c];
                }
            }
        }
        let n = region.area().max(1) as f32;
        sum.map(|s| s / n)
    }
}

/// Half-open pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

impl Region {
    pub fn area(&self) -> usize {
        (self.rows.1 - self.rows.0) * (self.cols.1 - self.cols.0)
    }

    fn contains(&self, y: i64, x: i64) -> bool {
        y >= self.rows.0 as i64 && y < self.rows.1 as i64 && x >= self.cols.0 as i64 && x < self.cols.1 as i64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    /// Maximum additive uniform noise per channel.
    pub noise: f64,
    /// Maximum vertical shift in pixels, both directions.
    pub max_shift: usize,
    pub flip_prob: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 32,
            noise: 0.05,
            max_shift: 2,
            flip_prob: 0.5,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 8 {
            return Err(Error::Config(format!(
                "canvas {}x{} is too small (minimum 16x8)",
                self.height, self.width
            )));
        }
        if !(0.0..=0.5).contains(&self.noise) {
            return Err(Error::Config("noise must be in [0, 0.5]".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("flip_prob must be in [0, 1]".into()));
        }
        if self.max_shift * 8 > self.height {
            return Err(Error::Config("max_shift is too large for the canvas".into()));
        }
        Ok(())
    }
}

/// Per-image jitter actually applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RenderInfo {
    /// Downward shift in pixels (negative moves up).
    pub shift: i32,
    pub flip: bool,
}

impl RenderInfo {
    /// Where a region of the unjittered layout lands in the rendered image,
    /// clipped to the canvas.
    pub fn map(&self, region: &Region, height: usize, width: usize) -> Option<Region> {
        let r0 = (region.rows.0 as i64 + self.shift as i64).clamp(0, height as i64) as usize;
        let r1 = (region.rows.1 as i64 + self.shift as i64).clamp(0, height as i64) as usize;
        let cols = if self.flip {
            (width - region.cols.1, width - region.cols.0)
        } else {
            region.cols
        };
        (r1 > r0).then_some(Region { rows: (r0, r1), cols })
    }
}

/// Body-part rectangles on an unjittered canvas. Coordinates are given for
/// 64×32 and scaled to the configured size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Layout {
    pub height: usize,
    pub width: usize,
}

impl Layout {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    fn rect(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> Region {
        Region {
            rows: (r0 * self.height / 64, r1 * self.height / 64),
            cols: (c0 * self.width / 32, c1 * self.width / 32),
        }
    }

    /// Full-width horizontal bands: head `[0,12)`, torso `[12,36)`, legs
    /// `[36,60)`, feet `[60,64)`.
    pub fn head_rows(&self) -> (usize, usize) {
        (0, 12 * self.height / 64)
    }

    pub fn torso_rows(&self) -> (usize, usize) {
        (12 * self.height / 64, 36 * self.height / 64)
    }

    pub fn leg_rows(&self) -> (usize, usize) {
        (36 * self.height / 64, 60 * self.height / 64)
    }

    pub fn feet_rows(&self) -> (usize, usize) {
        (60 * self.height / 64, self.height)
    }

    fn hat(&self) -> Region {
        self.rect(0, 5, 10, 22)
    }

    fn hair(&self) -> Region {
        self.rect(1, 5, 11, 21)
    }

    fn face(&self) -> Region {
        self.rect(5, 12, 12, 20)
    }

    fn torso(&self) -> Region {
        self.rect(12, 36, 7, 25)
    }

    fn legs(&self) -> [Region; 2] {
        [self.rect(36, 60, 9, 15), self.rect(36, 60, 17, 23)]
    }

    fn shoes(&self) -> [Region; 2] {
        [self.rect(60, 64, 8, 15), self.rect(60, 64, 17, 24)]
    }

    fn bag(&self) -> Region {
        self.rect(18, 32, 25, 30)
    }

    /// Painted rectangles of an attribute in unjittered coordinates.
    pub fn attribute_regions(&self, attr: Attribute) -> Vec<Region> {
        match attr {
            Attribute::Hat => vec![self.hat()],
            Attribute::Shirt => vec![self.torso()],
            Attribute::Pants => self.legs().to_vec(),
            Attribute::Shoes => self.shoes().to_vec(),
            Attribute::Bag => vec![self.bag()],
        }
    }

    fn color_at(&self, spec: &PersonSpec, y: i64, x: i64) -> [f32; 3] {
        if y < 0 || y >= self.height as i64 {
            return BACKGROUND;
        }
        if self.bag().contains(y, x) {
            if let Some(bag) = spec.bag {
                return bag.rgb();
            }
        }
        if self.shoes().iter().any(|r| r.contains(y, x)) {
            return spec.shoes.rgb();
        }
        if self.legs().iter().any(|r| r.contains(y, x)) {
            return spec.pants.rgb();
        }
        if self.torso().contains(y, x) {
            return spec.shirt.rgb();
        }
        if self.face().contains(y, x) {
            return SKIN;
        }
        match spec.hat {
            Some(hat) if self.hat().contains(y, x) => hat.rgb(),
            None if self.hair().contains(y, x) => HAIR,
            _ => BACKGROUND,
        }
    }
}

/// Renders with explicit jitter. Noise is drawn from `rng` only when the
/// configured amplitude is positive.
pub fn render_with(spec: &PersonSpec, config: &RenderConfig, info: RenderInfo, rng: &mut impl Rng) -> Image {
    let (h, w) = (config.height, config.width);
    let layout = Layout::new(h, w);
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let src_x = if info.flip { w - 1 - x } else { x };
            let color = layout.color_at(spec, y as i64 - info.shift as i64, src_x as i64);
            for c in color {
                let noisy = if config.noise > 0.0 {
                    c as f64 + rng.gen_range(-config.noise..=config.noise)
                } else {
                    c as f64
                };
                data.push((noisy.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Image { height: h, width: w, data }
}

/// Samples a vertical shift and a horizontal flip, then renders.
pub fn render_image(spec: &PersonSpec, config: &RenderConfig, rng: &mut impl Rng) -> (Image, RenderInfo) {
    let m = config.max_shift as i32;
    let info = RenderInfo {
        shift: rng.gen_range(-m..=m),
        flip: config.flip_prob > 0.0 && rng.gen_bool(config.flip_prob),
    };
    (render_with(spec, config, info, rng), info)
}

#[cfg(test)]
mod tests {
    use super::super::{Color, Gender};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> PersonSpec {
        PersonSpec {
            identity: 0,
            gender: Gender::Woman,
            shirt: Color::Blue,
            pants: Color::Black,
            shoes: Color::White,
            hat: Some(Color::Red),
            bag: Some(Color::Green),
        }
    }

    #[test]
    fn blue_shirt_region_is_blue_dominant() {
        let cfg = RenderConfig::default();
        let (img, info) = render_image(&spec(), &cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let layout = Layout::new(64, 32);
        let torso = info.map(&layout.attribute_regions(Attribute::Shirt)[0], 64, 32).unwrap();
        let m = img.region_mean(&torso);
        assert!(m[2] > m[0] && m[2] > m[1], "{m:?}");
    }

    #[test]
    fn noiseless_unjittered_renders_are_identical() {
        let cfg = RenderConfig {
            noise: 0.0,
            max_shift: 0,
            flip_prob: 0.0,
            ..Default::default()
        };
        let a = render_image(&spec(), &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let b = render_image(&spec(), &cfg, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(a, b);
    }

    #[test]
    fn flip_reverses_columns() {
        let cfg = RenderConfig {
            noise: 0.0,
            ..Default::default()
        };
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let plain = render_with(&spec(), &cfg, RenderInfo { shift: 1, flip: false }, &mut r);
        let flipped = render_with(&spec(), &cfg, RenderInfo { shift: 1, flip: true }, &mut r);
        assert_eq!(flipped, plain.flipped());
        assert_ne!(flipped, plain);
    }

    #[test]
    fn shift_moves_rows() {
        let cfg = RenderConfig {
            noise: 0.0,
            ..Default::default()
        };
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let base = render_with(&spec(), &cfg, RenderInfo::default(), &mut r);
        let down = render_with(&spec(), &cfg, RenderInfo { shift: 2, flip: false }, &mut r);
        let row = 32 * 3;
        assert_eq!(&down.data[2 * row..], &base.data[..62 * row]);
    }

    #[test]
    fn noise_is_bounded() {
        let cfg = RenderConfig::default();
        let clean_cfg = RenderConfig { noise: 0.0, ..cfg };
        let info = RenderInfo { shift: -1, flip: true };
        let noisy = render_with(&spec(), &cfg, info, &mut ChaCha8Rng::seed_from_u64(5));
        let clean = render_with(&spec(), &clean_cfg, info, &mut ChaCha8Rng::seed_from_u64(5));
        let max_diff = noisy
            .data
            .iter()
            .zip(&clean.data)
            .map(|(a, b)| (*a as i32 - *b as i32).abs())
            .max()
            .unwrap();
        assert!(max_diff as f64 <= 0.05 * 255.0 + 1.0);
        assert!(max_diff > 0);
    }

    #[test]
    fn config_validation() {
        assert!(RenderConfig::default().validate().is_ok());
        assert!(RenderConfig { height: 8, ..Default::default() }.validate().is_err());
        assert!(RenderConfig { noise: 0.9, ..Default::default() }.validate().is_err());
    }
}
