use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DataError;

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundKind {
    Flat,
    Noise,
    Stripes,
    Texture,
}

impl BackgroundKind {
    pub const ALL: [BackgroundKind; 4] = [Self::Flat, Self::Noise, Self::Stripes, Self::Texture];

    pub fn name(self) -> &'static str {
        match self {
            Self::Flat => "flat",
            Self::Noise => "noise",
            Self::Stripes => "stripes",
            Self::Texture => "texture",
        }
    }
}

impl std::str::FromStr for BackgroundKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown difficulty `{s}` (flat, noise, stripes, texture)"))
    }
}

impl std::fmt::Display for BackgroundKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Background {
    Flat {
        color: [u8; 3],
    },
    /// Independent per-pixel jitter around a base color.
    Noise {
        base: [u8; 3],
        amplitude: f64,
        seed: u64,
    },
    /// Two-color bands; `period` is the width of one light+dark pair in
    /// normalized units.
    Stripes {
        colors: [[u8; 3]; 2],
        period: f64,
        angle: f64,
    },
    /// Multi-octave value noise blended between two colors.
    Texture {
        colors: [[u8; 3]; 2],
        cells: usize,
        octaves: usize,
        seed: u64,
    },
}

impl Background {
    pub fn kind(&self) -> BackgroundKind {
        match self {
            Self::Flat { .. } => BackgroundKind::Flat,
            Self::Noise { .. } => BackgroundKind::Noise,
            Self::Stripes { .. } => BackgroundKind::Stripes,
            Self::Texture { .. } => BackgroundKind::Texture,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: [u8; 3],
    /// Circle radius, half side of a square, circumradius of a triangle;
    /// a fraction of the image width.
    pub size: f64,
    /// `(x, y)` in normalized image coordinates.
    pub center: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    pub background: Background,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_spacing: f64,
    pub min_size: f64,
    pub max_size: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            min_objects: 3,
            max_objects: 6,
            min_spacing: 0.15,
            min_size: 0.06,
            max_size: 0.11,
        }
    }
}

impl SceneConfig {
    fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Config(m.to_string()));
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects");
        }
        if !(self.min_spacing >= 0.0 && self.min_spacing.is_finite()) {
            return bad("min_spacing must be a non-negative number");
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size && self.max_size.is_finite()) {
            return bad("object sizes must satisfy 0 < min_size <= max_size");
        }
        Ok(())
    }
}

const OBJECT_PALETTE: [[u8; 3]; 8] = [
    [220, 40, 40],
    [40, 170, 60],
    [40, 80, 220],
    [230, 200, 30],
    [200, 60, 200],
    [30, 190, 200],
    [240, 130, 20],
    [120, 60, 30],
];

fn random_color(rng: &mut ChaCha8Rng, lo: u8, hi: u8) -> [u8; 3] {
    [
        rng.random_range(lo..=hi),
        rng.random_range(lo..=hi),
        rng.random_range(lo..=hi),
    ]
}

fn random_background(rng: &mut ChaCha8Rng, kind: BackgroundKind) -> Background {
    match kind {
        BackgroundKind::Flat => Background::Flat {
            color: random_color(rng, 200, 255),
        },
        BackgroundKind::Noise => Background::Noise {
            base: random_color(rng, 90, 170),
            amplitude: rng.random_range(0.15..0.3),
            seed: rng.random(),
        },
        BackgroundKind::Stripes => Background::Stripes {
            colors: [random_color(rng, 170, 255), random_color(rng, 0, 90)],
            period: rng.random_range(0.1..0.25),
            angle: rng.random_range(0.0..std::f64::consts::PI),
        },
        BackgroundKind::Texture => Background::Texture {
            colors: [random_color(rng, 150, 255), random_color(rng, 0, 110)],
            cells: rng.random_range(3..=8),
            octaves: 3,
            seed: rng.random(),
        },
    }
}

pub fn generate_scene(seed: u64, difficulty: BackgroundKind) -> Result<SceneSpec, DataError> {
    generate_scene_with(seed, difficulty, &SceneConfig::default())
}

/// Samples object count, shapes, colors and sizes uniformly, and places
/// centers in `[0.1, 0.9]²` by rejection so that every pair is at least
/// `min_spacing` apart. Each object gets up to 1000 tries.
pub fn generate_scene_with(
    seed: u64,
    difficulty: BackgroundKind,
    config: &SceneConfig,
) -> Result<SceneSpec, DataError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(config.min_objects..=config.max_objects);
    let mut objects: Vec<ObjectSpec> = Vec::with_capacity(count);
    for placed in 0..count {
        let mut center = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let c = [rng.random_range(0.1..=0.9), rng.random_range(0.1..=0.9)];
            let clear = objects.iter().all(|o| {
                let (dx, dy) = (o.center[0] - c[0], o.center[1] - c[1]);
                (dx * dx + dy * dy).sqrt() >= config.min_spacing
            });
            if clear {
                center = Some(c);
                break;
            }
        }
        let center = center.ok_or(DataError::Spacing {
            placed,
            attempts: MAX_PLACEMENT_ATTEMPTS,
        })?;
        let shape = [Shape::Circle, Shape::Square, Shape::Triangle][rng.random_range(0..3)];
        let color = OBJECT_PALETTE[rng.random_range(0..OBJECT_PALETTE.len())];
        let size = if config.min_size == config.max_size {
            config.min_size
        } else {
            rng.random_range(config.min_size..config.max_size)
        };
        objects.push(ObjectSpec {
            shape,
            color,
            size,
            center,
        });
    }
    let background = random_background(&mut rng, difficulty);
    Ok(SceneSpec {
        objects,
        background,
        seed,
    })
}
