//! Object catalogue and the 25-token vocabulary.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ModelError;

pub const NUM_CLASSES: usize = 16;
pub const VOCAB_SIZE: usize = 25;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "person", "car", "chair", "table", "dog", "cat", "bottle", "cup", "bicycle", "bird", "horse",
    "boat", "bus", "clock", "book", "umbrella",
];

/// One of the sixteen object classes, identified by its catalogue index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObjectClass(u8);

impl ObjectClass {
    pub fn new(index: usize) -> Result<Self, ModelError> {
        if index < NUM_CLASSES {
            Ok(Self(index as u8))
        } else {
            Err(ModelError::UnknownObject(index.to_string()))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        CLASS_NAMES[self.index()]
    }

    pub fn all() -> impl Iterator<Item = ObjectClass> {
        (0..NUM_CLASSES as u8).map(ObjectClass)
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectClass {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CLASS_NAMES
            .iter()
            .position(|n| *n == s)
            .map(|i| ObjectClass(i as u8))
            .ok_or_else(|| ModelError::UnknownObject(s.to_string()))
    }
}

impl Serialize for ObjectClass {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for ObjectClass {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Object(ObjectClass),
    Yes,
    No,
    A,
    Photo,
    Of,
    And,
    Bos,
    Eos,
    Pad,
}

impl Token {
    pub fn id(self) -> usize {
        match self {
            Token::Object(o) => o.index(),
            Token::Yes => 16,
            Token::No => 17,
            Token::A => 18,
            Token::Photo => 19,
            Token::Of => 20,
            Token::And => 21,
            Token::Bos => 22,
            Token::Eos => 23,
            Token::Pad => 24,
        }
    }

    pub fn from_id(id: usize) -> Result<Self, ModelError> {
        Ok(match id {
            0..=15 => Token::Object(ObjectClass(id as u8)),
            16 => Token::Yes,
            17 => Token::No,
            18 => Token::A,
            19 => Token::Photo,
            20 => Token::Of,
            21 => Token::And,
            22 => Token::Bos,
            23 => Token::Eos,
            24 => Token::Pad,
            _ => return Err(ModelError::UnknownToken(id)),
        })
    }

    pub fn is_control(self) -> bool {
        matches!(self, Token::Bos | Token::Eos | Token::Pad)
    }

    pub fn word(self) -> &'static str {
        match self {
            Token::Object(o) => o.name(),
            Token::Yes => "yes",
            Token::No => "no",
            Token::A => "a",
            Token::Photo => "photo",
            Token::Of => "of",
            Token::And => "and",
            Token::Bos => "<bos>",
            Token::Eos => "<eos>",
            Token::Pad => "<pad>",
        }
    }
}

/// Space-joined words, control tokens dropped.
pub fn detokenize(seq: &[Token]) -> String {
    seq.iter()
        .filter(|t| !t.is_control())
        .map(|t| t.word())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Inverse of `detokenize` for the closed vocabulary.
pub fn tokenize(text: &str) -> Result<Vec<Token>, ModelError> {
    text.split_whitespace()
        .map(|w| {
            (0..VOCAB_SIZE)
                .map(|i| Token::from_id(i).expect("id in range"))
                .find(|t| t.word() == w)
                .ok_or_else(|| ModelError::UnknownWord(w.to_string()))
        })
        .collect()
}

/// Object classes mentioned in a token sequence, in first-mention order.
pub fn mentioned_objects(seq: &[Token]) -> Vec<ObjectClass> {
    let mut out = Vec::new();
    for t in seq {
        if let Token::Object(o) = t {
            if !out.contains(o) {
                out.push(*o);
            }
        }
    }
    out
}
