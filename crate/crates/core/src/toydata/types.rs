use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Admissible sample dimensions.
pub const DIMS: [usize; 4] = [8, 16, 32, 64];
/// Bound on every sample entry.
pub const VALUE_BOUND: f64 = 4.0;

/// One quarter of a sample vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Identity,
    Structure,
    Style,
    Content,
}

impl Block {
    pub const ALL: [Block; 4] = [Block::Identity, Block::Structure, Block::Style, Block::Content];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn range(self, dim: usize) -> Range<usize> {
        let w = dim / 4;
        let start = self.index() * w;
        start..start + w
    }

    /// Preservation tag guarding this block, if any.
    pub fn preserve_tag(self) -> Option<Tag> {
        match self {
            Block::Identity => Some(Tag::IdentityPreserve),
            Block::Structure => Some(Tag::StructurePreserve),
            Block::Style => Some(Tag::StylePreserve),
            Block::Content => None,
        }
    }
}

/// Block-structured stand-in for an image: identity, structure, style and
/// content quarters, in that order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySample {
    values: Vec<f64>,
}

impl ToySample {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if !DIMS.contains(&values.len()) {
            return Err(Error::shape(format!(
                "sample dimension {} is not one of {DIMS:?}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || v.abs() > VALUE_BOUND) {
            return Err(Error::contract(format!("sample entry {v} outside [-4, 4]")));
        }
        Ok(Self { values })
    }

    /// Builds a sample without the range check; callers guarantee the bound.
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        debug_assert!(DIMS.contains(&values.len()));
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn block(&self, b: Block) -> &[f64] {
        &self.values[b.range(self.dim())]
    }

    pub(crate) fn block_mut(&mut self, b: Block) -> &mut [f64] {
        let r = b.range(self.dim());
        &mut self.values[r]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    ShiftContent,
    RotateStructure,
    SwapStyle,
    ChangeIdentity,
    GlobalRestyle,
    IdentityNoop,
}

impl OpKind {
    pub const ALL: [OpKind; 6] = [
        OpKind::ShiftContent,
        OpKind::RotateStructure,
        OpKind::SwapStyle,
        OpKind::ChangeIdentity,
        OpKind::GlobalRestyle,
        OpKind::IdentityNoop,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Blocks the operator writes to.
    pub fn blocks(self) -> &'static [Block] {
        match self {
            OpKind::ShiftContent => &[Block::Content],
            OpKind::RotateStructure => &[Block::Structure],
            OpKind::SwapStyle => &[Block::Style],
            OpKind::ChangeIdentity => &[Block::Identity],
            OpKind::GlobalRestyle => &[Block::Structure, Block::Style, Block::Content],
            OpKind::IdentityNoop => &[],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::ShiftContent => "shift_content",
            OpKind::RotateStructure => "rotate_structure",
            OpKind::SwapStyle => "swap_style",
            OpKind::ChangeIdentity => "change_identity",
            OpKind::GlobalRestyle => "global_restyle",
            OpKind::IdentityNoop => "identity_noop",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Length of [`Instruction::encode`]: op one-hot followed by the parameters.
pub const INSTRUCTION_LEN: usize = 10;

/// Structured editing instruction; `params` are zero-padded.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub op_kind: OpKind,
    pub params: [f64; 4],
}

impl Instruction {
    pub fn new(op_kind: OpKind, params: &[f64]) -> Self {
        let mut p = [0.0; 4];
        p[..params.len()].copy_from_slice(params);
        Self { op_kind, params: p }
    }

    pub fn noop() -> Self {
        Self::new(OpKind::IdentityNoop, &[])
    }

    pub fn encode(&self) -> [f64; INSTRUCTION_LEN] {
        let mut out = [0.0; INSTRUCTION_LEN];
        out[self.op_kind.index()] = 1.0;
        out[6..].copy_from_slice(&self.params);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskLabel {
    DefaultEdit,
    Specialist,
    TraditionalOp,
    VideoPair,
}

impl TaskLabel {
    pub const ALL: [TaskLabel; 4] =
        [TaskLabel::DefaultEdit, TaskLabel::Specialist, TaskLabel::TraditionalOp, TaskLabel::VideoPair];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    LocalEdit,
    IdentityPreserve,
    StructurePreserve,
    StylePreserve,
}

impl Tag {
    pub const ALL: [Tag; 4] = [Tag::LocalEdit, Tag::IdentityPreserve, Tag::StructurePreserve, Tag::StylePreserve];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Block guarded by a preservation tag.
    pub fn block(self) -> Option<Block> {
        match self {
            Tag::IdentityPreserve => Some(Block::Identity),
            Tag::StructurePreserve => Some(Block::Structure),
            Tag::StylePreserve => Some(Block::Style),
            Tag::LocalEdit => None,
        }
    }
}

/// Set of [`Tag`]s; serialized as a sorted list of names.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct TagSet(u8);

impl TagSet {
    pub fn empty() -> Self {
        Self(0)
    }

    pub fn of(tags: &[Tag]) -> Self {
        let mut s = Self::empty();
        for &t in tags {
            s.insert(t);
        }
        s
    }

    pub fn insert(&mut self, t: Tag) {
        self.0 |= 1 << t.index();
    }

    pub fn remove(&mut self, t: Tag) {
        self.0 &= !(1 << t.index());
    }

    pub fn contains(&self, t: Tag) -> bool {
        self.0 & (1 << t.index()) != 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(&self) -> impl Iterator<Item = Tag> + '_ {
        Tag::ALL.into_iter().filter(|t| self.contains(*t))
    }

    /// Multi-hot vector in [`Tag::ALL`] order.
    pub fn multi_hot(&self) -> [f64; 4] {
        let mut out = [0.0; 4];
        for t in self.iter() {
            out[t.index()] = 1.0;
        }
        out
    }

    pub fn is_subset(&self, other: &TagSet) -> bool {
        self.0 & !other.0 == 0
    }
}

impl fmt::Debug for TagSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

impl Serialize for TagSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.iter())
    }
}

impl<'de> Deserialize<'de> for TagSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let tags = Vec::<Tag>::deserialize(d)?;
        Ok(TagSet::of(&tags))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Synthesized,
    Specialist,
    TraditionalOp,
    VideoFrames,
}

impl SourceKind {
    pub const ALL: [SourceKind; 4] =
        [SourceKind::Synthesized, SourceKind::Specialist, SourceKind::TraditionalOp, SourceKind::VideoFrames];

    /// Task label attached to records from this source.
    pub fn task_label(self) -> TaskLabel {
        match self {
            SourceKind::Synthesized => TaskLabel::DefaultEdit,
            SourceKind::Specialist => TaskLabel::Specialist,
            SourceKind::TraditionalOp => TaskLabel::TraditionalOp,
            SourceKind::VideoFrames => TaskLabel::VideoPair,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SourceKind::Synthesized => "synthesized",
            SourceKind::Specialist => "specialist",
            SourceKind::TraditionalOp => "traditional_op",
            SourceKind::VideoFrames => "video_frames",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaInfo {
    pub task_label: TaskLabel,
    pub tags: TagSet,
    pub source_kind: SourceKind,
}

/// Atomic training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditPair {
    pub id: u64,
    pub source: ToySample,
    pub target: ToySample,
    pub instruction: Instruction,
    pub meta: MetaInfo,
    /// Generator-assigned quality in `[0, 1]`.
    pub quality: f64,
    /// Importance weight for loss reweighting (1 unless resampled).
    pub weight: f64,
}

impl EditPair {
    pub fn dim(&self) -> usize {
        self.source.dim()
    }
}
