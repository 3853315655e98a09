//! Closed enumerations describing subjects and scenes.

use serde::{Deserialize, Serialize};

use crate::numerics::Rng;

macro_rules! word_enum {
    ($(#[$m:meta])* $name:ident { $($var:ident => $word:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "kebab-case")]
        pub enum $name { $($var),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$var),+];

            pub fn word(self) -> &'static str {
                match self { $($name::$var => $word),+ }
            }

            pub fn from_word(w: &str) -> Option<Self> {
                match w { $($word => Some($name::$var),)+ _ => None }
            }

            pub fn index(self) -> usize {
                Self::ALL.iter().position(|&v| v == self).expect("listed")
            }
        }
    };
}

word_enum!(Shape {
    Circle => "circle",
    Square => "square",
    Triangle => "triangle",
    Star => "star",
    Cross => "cross",
    Ring => "ring",
});

word_enum!(Color {
    Red => "red",
    Green => "green",
    Blue => "blue",
    Yellow => "yellow",
    Cyan => "cyan",
    Purple => "purple",
    Black => "black",
    Gray => "gray",
});

word_enum!(Texture {
    Solid => "solid",
    Stripes => "striped",
    Dots => "dotted",
    Checker => "checkered",
});

word_enum!(Size {
    Small => "small",
    Medium => "medium",
    Large => "large",
});

word_enum!(Position {
    Center => "center",
    TopLeft => "top-left",
    TopRight => "top-right",
    BottomLeft => "bottom-left",
    BottomRight => "bottom-right",
});

word_enum!(Rotation {
    R0 => "0",
    R90 => "90",
    R180 => "180",
    R270 => "270",
});

impl Color {
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Cyan => [0.0, 1.0, 1.0],
            Color::Purple => [1.0, 0.0, 1.0],
            Color::Black => [0.0, 0.0, 0.0],
            Color::Gray => [0.5, 0.5, 0.5],
        }
    }
}

impl Size {
    /// Sprite edge length in pixels on a 64-pixel canvas.
    pub fn pixels(self) -> usize {
        match self {
            Size::Small => 16,
            Size::Medium => 24,
            Size::Large => 32,
        }
    }
}

impl Position {
    /// Sprite centre `(x, y)` on a 64-pixel canvas.
    pub fn anchor(self) -> (usize, usize) {
        match self {
            Position::Center => (32, 32),
            Position::TopLeft => (16, 16),
            Position::TopRight => (48, 16),
            Position::BottomLeft => (16, 48),
            Position::BottomRight => (48, 48),
        }
    }
}

impl Rotation {
    /// Number of clockwise quarter turns.
    pub fn quarter_turns(self) -> usize {
        self.index()
    }
}

/// `(shape, base, texture, accent)`; two subjects with equal keys are the same identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IdentityKey {
    pub shape: Shape,
    pub base: Color,
    pub texture: Texture,
    pub accent: Color,
}

impl IdentityKey {
    /// Every identity: solid subjects carry `accent == base`, textured ones a distinct accent.
    pub fn all() -> Vec<IdentityKey> {
        let mut out = Vec::new();
        for &shape in Shape::ALL {
            for &base in Color::ALL {
                for &texture in Texture::ALL {
                    for &accent in Color::ALL {
                        let solid = texture == Texture::Solid;
                        if solid == (accent == base) {
                            out.push(IdentityKey {
                                shape,
                                base,
                                texture,
                                accent,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn label(&self) -> String {
        format!(
            "{}-{}-{}-{}",
            self.shape.word(),
            self.base.word(),
            self.texture.word(),
            self.accent.word()
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub shape: Shape,
    pub base: Color,
    pub texture: Texture,
    pub accent: Color,
    pub size: Size,
    /// Chooses the texture variant (stripe direction, dot and checker phase).
    pub seed: u64,
}

impl SubjectSpec {
    pub fn from_identity(key: IdentityKey, size: Size, seed: u64) -> Self {
        Self {
            shape: key.shape,
            base: key.base,
            texture: key.texture,
            accent: key.accent,
            size,
            seed,
        }
    }

    pub fn identity(&self) -> IdentityKey {
        IdentityKey {
            shape: self.shape,
            base: self.base,
            texture: self.texture,
            accent: self.accent,
        }
    }

    pub fn colors(&self) -> [Color; 2] {
        [self.base, self.accent]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Distractor {
    pub identity: IdentityKey,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneSpec {
    pub background: Color,
    pub position: Position,
    pub rotation: Rotation,
    pub distractors: Vec<Distractor>,
}

impl SceneSpec {
    /// Draws a scene compatible with `subject`: background differs from the
    /// subject colours, distractors differ in identity and avoid the background colour.
    pub fn random(subject: &SubjectSpec, rng: &mut Rng, max_distractors: usize) -> Self {
        let used = subject.colors();
        let bgs: Vec<Color> = Color::ALL
            .iter()
            .copied()
            .filter(|c| !used.contains(c))
            .collect();
        let background = *rng.choose(&bgs);
        let position = *rng.choose(Position::ALL);
        let rotation = *rng.choose(Rotation::ALL);
        let n = rng.below(max_distractors + 1);
        let all = IdentityKey::all();
        let mut distractors = Vec::with_capacity(n);
        while distractors.len() < n {
            let key = *rng.choose(&all);
            if key == subject.identity() || key.base == background || key.accent == background {
                continue;
            }
            distractors.push(Distractor {
                identity: key,
                seed: rng.next_seed(),
            });
        }
        Self {
            background,
            position,
            rotation,
            distractors,
        }
    }
}

impl Rng {
    pub fn next_seed(&mut self) -> u64 {
        use rand::RngCore;
        self.next_u64()
    }
}
