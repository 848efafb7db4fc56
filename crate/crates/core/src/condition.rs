//! Conditioning: a layout token plus a set of discrete content/motion labels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::LayoutSpec;

/// Largest grid side a layout token can encode.
pub const MAX_LAYOUT_SIDE: usize = 16;
pub const LAYOUT_VOCAB: usize = MAX_LAYOUT_SIDE * MAX_LAYOUT_SIDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Label {
    /// Content slot of the unconditional (guidance) condition.
    Null,
    /// Coarse annotation: "something moves".
    Motion,
    Static,
    TranslateLeft,
    TranslateRight,
    TranslateUp,
    TranslateDown,
    RotateCw,
    RotateCcw,
    Bounce,
    ShapeCircle,
    ShapeSquare,
    ShapeTriangle,
}

impl Label {
    pub const ALL: [Label; 13] = [
        Label::Null,
        Label::Motion,
        Label::Static,
        Label::TranslateLeft,
        Label::TranslateRight,
        Label::TranslateUp,
        Label::TranslateDown,
        Label::RotateCw,
        Label::RotateCcw,
        Label::Bounce,
        Label::ShapeCircle,
        Label::ShapeSquare,
        Label::ShapeTriangle,
    ];

    pub const COUNT: usize = Self::ALL.len();

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Label> {
        Self::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Null => "NULL",
            Label::Motion => "MOTION",
            Label::Static => "STATIC",
            Label::TranslateLeft => "TRANSLATE_LEFT",
            Label::TranslateRight => "TRANSLATE_RIGHT",
            Label::TranslateUp => "TRANSLATE_UP",
            Label::TranslateDown => "TRANSLATE_DOWN",
            Label::RotateCw => "ROTATE_CW",
            Label::RotateCcw => "ROTATE_CCW",
            Label::Bounce => "BOUNCE",
            Label::ShapeCircle => "SHAPE_CIRCLE",
            Label::ShapeSquare => "SHAPE_SQUARE",
            Label::ShapeTriangle => "SHAPE_TRIANGLE",
        }
    }

    pub fn is_shape(self) -> bool {
        matches!(
            self,
            Label::ShapeCircle | Label::ShapeSquare | Label::ShapeTriangle
        )
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Label::ALL
            .iter()
            .copied()
            .find(|l| l.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidSpec(format!("unknown label '{s}'")))
    }
}

pub fn layout_token(layout: &LayoutSpec) -> Result<u32> {
    if layout.rows > MAX_LAYOUT_SIDE || layout.cols > MAX_LAYOUT_SIDE {
        return Err(Error::InvalidLayout(format!(
            "{}x{} exceeds the {MAX_LAYOUT_SIDE}x{MAX_LAYOUT_SIDE} layout vocabulary",
            layout.rows, layout.cols
        )));
    }
    Ok(((layout.rows - 1) * MAX_LAYOUT_SIDE + (layout.cols - 1)) as u32)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub layout_token: u32,
    pub content_labels: Vec<Label>,
    pub null_flag: bool,
}

impl Condition {
    pub fn new(layout: &LayoutSpec, content_labels: Vec<Label>) -> Result<Self> {
        Ok(Condition {
            layout_token: layout_token(layout)?,
            content_labels,
            null_flag: false,
        })
    }

    /// The unconditional counterpart: same layout, content dropped.
    pub fn null(layout: &LayoutSpec) -> Result<Self> {
        Ok(Condition {
            layout_token: layout_token(layout)?,
            content_labels: Vec::new(),
            null_flag: true,
        })
    }

    pub fn to_null(&self) -> Condition {
        Condition {
            layout_token: self.layout_token,
            content_labels: Vec::new(),
            null_flag: true,
        }
    }

    /// Re-targets the layout half of the condition, keeping the content.
    pub fn with_layout(&self, layout: &LayoutSpec) -> Result<Condition> {
        Ok(Condition {
            layout_token: layout_token(layout)?,
            ..self.clone()
        })
    }

    pub fn matches_layout(&self, layout: &LayoutSpec) -> bool {
        layout_token(layout).is_ok_and(|t| t == self.layout_token)
    }

    /// Label ids fed to the model. The null condition (or an empty label set)
    /// becomes the single `Null` label.
    pub fn label_ids(&self) -> Vec<usize> {
        if self.null_flag || self.content_labels.is_empty() {
            vec![Label::Null.id()]
        } else {
            self.content_labels.iter().map(|l| l.id()).collect()
        }
    }
}

/// Parses a label sidecar: label names separated by whitespace, commas or
/// newlines; `#` starts a comment.
pub fn parse_labels(text: &str) -> Result<Vec<Label>> {
    text.lines()
        .map(|line| line.split('#').next().unwrap_or(""))
        .flat_map(|line| line.split([',', ' ', '\t']))
        .filter(|tok| !tok.trim().is_empty())
        .map(str::parse)
        .collect()
}

pub fn format_labels(labels: &[Label]) -> String {
    let mut out: String = labels
        .iter()
        .map(|l| l.name())
        .collect::<Vec<_>>()
        .join("\n");
    out.push('\n');
    out
}
