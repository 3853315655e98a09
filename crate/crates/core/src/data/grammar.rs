//! Prompt grammar:
//! `a {size} {base} {texture} {shape} [with {accent} accents] on a {background} background ; {position} ; rotated {angle}`.
//! The second and third clauses are optional so truncated prompts still parse.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::spec::{Color, Position, Rotation, SceneSpec, Shape, Size, SubjectSpec, Texture};
use crate::conditioning::Vocabulary;

pub const CLAUSE_DELIMITER: &str = ";";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("prompt parse error at token {position} ({token:?}): {message}")]
pub struct ParseError {
    /// 1-based token index; one past the end for a prompt that stops early.
    pub position: usize,
    pub token: String,
    pub message: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectAttrs {
    pub size: Size,
    pub base: Color,
    pub texture: Texture,
    pub shape: Shape,
    pub accent: Option<Color>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneAttrs {
    pub background: Color,
    pub position: Option<Position>,
    pub rotation: Option<Rotation>,
}

pub fn prompt_of(subject: &SubjectSpec, scene: &SceneSpec) -> String {
    let mut s = format!(
        "a {} {} {} {}",
        subject.size.word(),
        subject.base.word(),
        subject.texture.word(),
        subject.shape.word()
    );
    if subject.texture != Texture::Solid {
        s.push_str(&format!(" with {} accents", subject.accent.word()));
    }
    s.push_str(&format!(
        " on a {} background ; {} ; rotated {}",
        scene.background.word(),
        scene.position.word(),
        scene.rotation.word()
    ));
    s
}

/// Attributes a prompt for `(subject, scene)` must parse back to.
pub fn attrs_of(subject: &SubjectSpec, scene: &SceneSpec) -> (SubjectAttrs, SceneAttrs) {
    (
        SubjectAttrs {
            size: subject.size,
            base: subject.base,
            texture: subject.texture,
            shape: subject.shape,
            accent: (subject.texture != Texture::Solid).then_some(subject.accent),
        },
        SceneAttrs {
            background: scene.background,
            position: Some(scene.position),
            rotation: Some(scene.rotation),
        },
    )
}

struct Cursor<'a> {
    toks: Vec<&'a str>,
    i: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, message: impl Into<String>) -> ParseError {
        ParseError {
            position: self.i + 1,
            token: self
                .toks
                .get(self.i)
                .map(|t| t.to_string())
                .unwrap_or_default(),
            message: message.into(),
        }
    }

    fn next(&mut self, what: &str) -> Result<&'a str, ParseError> {
        let t = self
            .toks
            .get(self.i)
            .copied()
            .ok_or_else(|| self.err(format!("expected {what}, prompt ended")))?;
        self.i += 1;
        Ok(t)
    }

    fn expect(&mut self, word: &str) -> Result<(), ParseError> {
        let t = self.next(&format!("'{word}'"))?;
        if t != word {
            self.i -= 1;
            return Err(self.err(format!("expected '{word}'")));
        }
        Ok(())
    }

    fn word<T>(&mut self, what: &str, f: impl Fn(&str) -> Option<T>) -> Result<T, ParseError> {
        let t = self.next(what)?;
        f(t).ok_or_else(|| {
            self.i -= 1;
            self.err(format!("expected {what}"))
        })
    }

    fn peek(&self) -> Option<&'a str> {
        self.toks.get(self.i).copied()
    }
}

/// Parses a grammatical prompt; out-of-vocabulary words are reported first.
pub fn parse_prompt(prompt: &str) -> Result<(SubjectAttrs, SceneAttrs), ParseError> {
    let toks: Vec<&str> = prompt.split_whitespace().collect();
    let vocab = Vocabulary::builtin();
    if let Some((i, t)) = toks.iter().enumerate().find(|(_, t)| vocab.id(t).is_none()) {
        return Err(ParseError {
            position: i + 1,
            token: t.to_string(),
            message: "word outside the vocabulary".into(),
        });
    }
    let mut c = Cursor { toks, i: 0 };
    c.expect("a")?;
    let size = c.word("a size", Size::from_word)?;
    let base = c.word("a colour", Color::from_word)?;
    let texture = c.word("a texture", Texture::from_word)?;
    let shape = c.word("a shape", Shape::from_word)?;
    let mut accent = None;
    if c.peek() == Some("with") {
        if texture == Texture::Solid {
            return Err(c.err("solid subjects take no accents"));
        }
        c.expect("with")?;
        accent = Some(c.word("an accent colour", Color::from_word)?);
        c.expect("accents")?;
    } else if texture != Texture::Solid {
        return Err(c.err("textured subjects need 'with {colour} accents'"));
    }
    c.expect("on")?;
    c.expect("a")?;
    let background = c.word("a background colour", Color::from_word)?;
    c.expect("background")?;
    let mut scene = SceneAttrs {
        background,
        position: None,
        rotation: None,
    };
    if c.peek().is_some() {
        c.expect(CLAUSE_DELIMITER)?;
        scene.position = Some(c.word("a position", Position::from_word)?);
        if c.peek().is_some() {
            c.expect(CLAUSE_DELIMITER)?;
            c.expect("rotated")?;
            scene.rotation = Some(c.word("an angle", Rotation::from_word)?);
        }
    }
    if c.peek().is_some() {
        return Err(c.err("unexpected trailing words"));
    }
    Ok((
        SubjectAttrs {
            size,
            base,
            texture,
            shape,
            accent,
        },
        scene,
    ))
}
