//! Structured decision-model response format and textual grounding formats.
//!
//! The decision model talks to backend specialists through a hybrid channel:
//! a discrete text part, parsed here, and an optional continuous signal
//! embedding that rides alongside the text (see [`crate::signal`]). The text
//! part is a free-form user reply plus up to one task block:
//!
//! ```text
//! Sure! Following I will outline the clock in the video.
//! <Module> Video Segmentation </Module>
//! <Instruction> segmentation: clock </Instruction>
//! <Region> (0.1100, 0.2600, 0.2300, 0.3500) </Region>
//! ```
//!
//! Grounding payloads are normalized boxes `(Xl, Yt, Xr, Yb)` with all
//! coordinates in `[0, 1]`, optionally extended with an inclusive frame span
//! `| Fs, Fe` for video. Parsing is pure; serialization is canonical
//! (4-decimal coordinates, exact tag capitalization) so that
//! `parse(serialize(e), Strict) == e` for every valid envelope.

use std::fmt;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::SignalEmbedding;

/// Decimal places used when serializing normalized coordinates.
pub const COORD_DECIMALS: usize = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("unbalanced tags: {0}")]
    UnbalancedTags(String),
    #[error("duplicate <{0}> block")]
    DuplicateBlock(String),
    #[error("unknown module name: {0:?}")]
    UnknownModule(String),
    #[error("<{0}> block present without a <Module> block")]
    MissingModule(String),
    #[error("<Module> block present without an <Instruction> block")]
    MissingInstruction,
    #[error("malformed region: {0}")]
    MalformedRegion(String),
    #[error("coordinate {0} outside [0, 1]")]
    CoordinateOutOfRange(f64),
    #[error("non-canonical box ({0}, {1}, {2}, {3}): requires xl <= xr and yt <= yb")]
    NonCanonicalBox(f64, f64, f64, f64),
    #[error("invalid span ({fs}, {fe}): requires fs <= fe")]
    InvalidSpan { fs: u32, fe: u32 },
    #[error("missing frame span: video regions require a `| Fs, Fe` suffix")]
    MissingSpan,
    #[error("frame span not allowed on image regions")]
    SpanOnImage,
    #[error("malformed phrase line: {0:?}")]
    MalformedPhraseLine(String),
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

/// How tolerant parsing is of non-canonical model output.
///
/// `Lenient` canonicalizes out-of-order box corners by sorting the x and y
/// pairs; `Strict` rejects them. Tag capitalization and whitespace are
/// forgiven in both modes. The convention is lenient for parsing model
/// output and strict for anything destined for training corpora.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseMode {
    Strict,
    Lenient,
}

// ---------------------------------------------------------------------------
// Grounding payload types
// ---------------------------------------------------------------------------

/// Axis-aligned box with normalized corner coordinates in `[0, 1]`.
///
/// Canonical form has `xl <= xr` and `yt <= yb` (top-left then bottom-right).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub xl: f64,
    pub yt: f64,
    pub xr: f64,
    pub yb: f64,
}

impl BoundingBox {
    /// Canonical constructor; rejects out-of-range and out-of-order corners.
    pub fn new(xl: f64, yt: f64, xr: f64, yb: f64) -> Result<Self> {
        for v in [xl, yt, xr, yb] {
            if !(0.0..=1.0).contains(&v) {
                return Err(ProtocolError::CoordinateOutOfRange(v));
            }
        }
        if xl > xr || yt > yb {
            return Err(ProtocolError::NonCanonicalBox(xl, yt, xr, yb));
        }
        Ok(Self { xl, yt, xr, yb })
    }

    /// Lenient constructor: sorts each coordinate pair into canonical order.
    pub fn canonicalized(xl: f64, yt: f64, xr: f64, yb: f64) -> Result<Self> {
        let (xl, xr) = if xl <= xr { (xl, xr) } else { (xr, xl) };
        let (yt, yb) = if yt <= yb { (yt, yb) } else { (yb, yt) };
        Self::new(xl, yt, xr, yb)
    }

    fn from_coords(coords: [f64; 4], mode: ParseMode) -> Result<Self> {
        let [xl, yt, xr, yb] = coords;
        match mode {
            ParseMode::Strict => Self::new(xl, yt, xr, yb),
            ParseMode::Lenient => Self::canonicalized(xl, yt, xr, yb),
        }
    }

    pub fn width(&self) -> f64 {
        self.xr - self.xl
    }

    pub fn height(&self) -> f64 {
        self.yb - self.yt
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Snap all coordinates to the serialization precision.
    ///
    /// A quantized box survives serialize/parse bit-exactly, which is what
    /// generated corpora rely on.
    pub fn quantized(&self) -> Self {
        let q = |v: f64| (v * 1e4).round() / 1e4;
        Self {
            xl: q(self.xl),
            yt: q(self.yt),
            xr: q(self.xr),
            yb: q(self.yb),
        }
    }

    /// Canonical text form: `(0.1000, 0.2000, 0.3000, 0.4000)`.
    pub fn serialize(&self) -> String {
        format!(
            "({:.p$}, {:.p$}, {:.p$}, {:.p$})",
            self.xl,
            self.yt,
            self.xr,
            self.yb,
            p = COORD_DECIMALS
        )
    }
}

impl fmt::Display for BoundingBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.serialize())
    }
}

/// Inclusive frame span `Fs..=Fe` over non-negative frame indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalSpan {
    pub fs: u32,
    pub fe: u32,
}

impl TemporalSpan {
    pub fn new(fs: u32, fe: u32) -> Result<Self> {
        if fs > fe {
            return Err(ProtocolError::InvalidSpan { fs, fe });
        }
        Ok(Self { fs, fe })
    }

    /// Number of frames covered, counting both endpoints.
    pub fn len(&self) -> u64 {
        u64::from(self.fe) - u64::from(self.fs) + 1
    }

    pub fn is_empty(&self) -> bool {
        false // a valid span always covers at least one frame
    }
}

/// A box tracked over an inclusive frame span: `(Xl, Yt, Xr, Yb | Fs, Fe)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackedRegion {
    pub bbox: BoundingBox,
    pub span: TemporalSpan,
}

impl TrackedRegion {
    pub fn new(bbox: BoundingBox, span: TemporalSpan) -> Self {
        Self { bbox, span }
    }

    pub fn serialize(&self) -> String {
        format!(
            "({:.p$}, {:.p$}, {:.p$}, {:.p$} | {}, {})",
            self.bbox.xl,
            self.bbox.yt,
            self.bbox.xr,
            self.bbox.yb,
            self.span.fs,
            self.span.fe,
            p = COORD_DECIMALS
        )
    }
}

impl fmt::Display for TrackedRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.serialize())
    }
}

/// Region payload of a grounded phrase: spatial only, or spatiotemporal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PhraseRegion {
    Image { bbox: BoundingBox },
    Video { region: TrackedRegion },
}

impl PhraseRegion {
    pub fn serialize(&self) -> String {
        match self {
            PhraseRegion::Image { bbox } => bbox.serialize(),
            PhraseRegion::Video { region } => region.serialize(),
        }
    }
}

/// One `label: (..)` line of a grounded caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedPhrase {
    pub label: String,
    pub region: PhraseRegion,
}

impl GroundedPhrase {
    pub fn serialize(&self) -> String {
        format!("{}: {}", self.label, self.region.serialize())
    }

    /// Labels must be trim-stable, non-empty and free of the delimiter
    /// characters so the phrase line re-parses unambiguously.
    pub fn validate(&self) -> Result<()> {
        let ok = !self.label.is_empty()
            && self.label.trim() == self.label
            && !self.label.contains(['(', ')', ':', '\n']);
        if ok {
            Ok(())
        } else {
            Err(ProtocolError::MalformedPhraseLine(self.label.clone()))
        }
    }
}

/// Caption text plus the phrases grounded in it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundedCaption {
    pub caption: String,
    pub phrases: Vec<GroundedPhrase>,
}

/// Whether a grounding payload refers to a single image or a video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundingKind {
    Image,
    Video,
}

// ---------------------------------------------------------------------------
// Invocation envelope
// ---------------------------------------------------------------------------

/// The six invocable specialist names a `<Module>` block may carry.
///
/// A pure text turn has no `<Module>` block at all, and the two video
/// generation variants (text-to-video, image-to-video) share one invocation
/// name; the dispatcher picks the variant from the workspace contents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModuleName {
    #[serde(rename = "Image Generation")]
    ImageGeneration,
    #[serde(rename = "Image Segmentation")]
    ImageSegmentation,
    #[serde(rename = "Image Editing")]
    ImageEditing,
    #[serde(rename = "Video Generation")]
    VideoGeneration,
    #[serde(rename = "Video Segmentation")]
    VideoSegmentation,
    #[serde(rename = "Video Editing")]
    VideoEditing,
}

impl ModuleName {
    pub const ALL: [ModuleName; 6] = [
        ModuleName::ImageGeneration,
        ModuleName::ImageSegmentation,
        ModuleName::ImageEditing,
        ModuleName::VideoGeneration,
        ModuleName::VideoSegmentation,
        ModuleName::VideoEditing,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModuleName::ImageGeneration => "Image Generation",
            ModuleName::ImageSegmentation => "Image Segmentation",
            ModuleName::ImageEditing => "Image Editing",
            ModuleName::VideoGeneration => "Video Generation",
            ModuleName::VideoSegmentation => "Video Segmentation",
            ModuleName::VideoEditing => "Video Editing",
        }
    }

    /// Case-insensitive, whitespace-normalizing lookup.
    pub fn parse(name: &str) -> Result<Self> {
        let norm = name.split_whitespace().collect::<Vec<_>>().join(" ");
        for m in Self::ALL {
            if m.as_str().eq_ignore_ascii_case(&norm) {
                return Ok(m);
            }
        }
        Err(ProtocolError::UnknownModule(name.trim().to_string()))
    }
}

impl fmt::Display for ModuleName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The task half of an envelope: which specialist, what to do, and where.
///
/// For video modules the optional region is attached to the keyframe (the
/// first frame of the relevant span) by convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInvocation {
    pub module: ModuleName,
    pub instruction: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub region: Option<BoundingBox>,
}

/// One structured decision-model output.
///
/// `task == None` means a pure text-generation reply. The signal embedding is
/// the continuous half of the hybrid message and is carried out of band: it
/// never appears in the serialized text and parsing always yields
/// `embedding: None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvocationEnvelope {
    pub user_response: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub task: Option<TaskInvocation>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub embedding: Option<SignalEmbedding>,
}

impl InvocationEnvelope {
    pub fn text_reply(user_response: impl Into<String>) -> Self {
        Self {
            user_response: user_response.into(),
            task: None,
            embedding: None,
        }
    }

    pub fn with_task(
        user_response: impl Into<String>,
        module: ModuleName,
        instruction: impl Into<String>,
        region: Option<BoundingBox>,
    ) -> Self {
        Self {
            user_response: user_response.into(),
            task: Some(TaskInvocation {
                module,
                instruction: instruction.into(),
                region,
            }),
            embedding: None,
        }
    }

    pub fn with_embedding(mut self, embedding: SignalEmbedding) -> Self {
        self.embedding = Some(embedding);
        self
    }

    /// Check the canonical-form preconditions of [`serialize_envelope`]:
    /// trim-stable text free of tag tokens, a non-empty instruction when a
    /// task is present, and a canonical region.
    pub fn validate(&self) -> Result<()> {
        if self.user_response.trim() != self.user_response || contains_tag(&self.user_response) {
            return Err(ProtocolError::UnbalancedTags(
                "user response must be trim-stable and tag-free".into(),
            ));
        }
        if let Some(task) = &self.task {
            if task.instruction.trim() != task.instruction
                || task.instruction.is_empty()
                || contains_tag(&task.instruction)
            {
                return Err(ProtocolError::MissingInstruction);
            }
            if let Some(region) = &task.region {
                BoundingBox::new(region.xl, region.yt, region.xr, region.yb)?;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Envelope parsing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TagKind {
    Module,
    Instruction,
    Region,
}

impl TagKind {
    fn label(&self) -> &'static str {
        match self {
            TagKind::Module => "Module",
            TagKind::Instruction => "Instruction",
            TagKind::Region => "Region",
        }
    }
}

static TAG_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)<\s*(/?)\s*(module|instruction|region)\s*>").unwrap());

fn contains_tag(text: &str) -> bool {
    TAG_RE.is_match(text)
}

fn tag_kind(name: &str) -> TagKind {
    match name.to_ascii_lowercase().as_str() {
        "module" => TagKind::Module,
        "instruction" => TagKind::Instruction,
        _ => TagKind::Region,
    }
}

/// Parse one structured decision-model response.
///
/// Text outside the tag blocks becomes the user response (whitespace-trimmed
/// at both ends). Each of `<Module>`, `<Instruction>`, `<Region>` may appear
/// at most once; an instruction is required when a module is named.
pub fn parse_envelope(raw: &str, mode: ParseMode) -> Result<InvocationEnvelope> {
    let mut outside = String::new();
    let mut blocks: Vec<(TagKind, String)> = Vec::new();

    let mut cursor = 0usize;
    let mut open: Option<(TagKind, usize)> = None; // (kind, body start)
    for caps in TAG_RE.captures_iter(raw) {
        let whole = caps.get(0).unwrap();
        let closing = !caps[1].is_empty();
        let kind = tag_kind(&caps[2]);
        match (&open, closing) {
            (None, false) => {
                outside.push_str(&raw[cursor..whole.start()]);
                open = Some((kind, whole.end()));
            }
            (None, true) => {
                return Err(ProtocolError::UnbalancedTags(format!(
                    "</{}> without opening tag",
                    kind.label()
                )));
            }
            (Some((open_kind, body_start)), true) if *open_kind == kind => {
                blocks.push((kind, raw[*body_start..whole.start()].to_string()));
                open = None;
            }
            (Some((open_kind, _)), _) => {
                return Err(ProtocolError::UnbalancedTags(format!(
                    "<{}> block interrupted by {}{}",
                    open_kind.label(),
                    if closing { "</" } else { "<" },
                    format_args!("{}>", kind.label())
                )));
            }
        }
        cursor = whole.end();
    }
    if let Some((kind, _)) = open {
        return Err(ProtocolError::UnbalancedTags(format!(
            "<{}> without closing tag",
            kind.label()
        )));
    }
    outside.push_str(&raw[cursor..]);

    let mut module_body: Option<String> = None;
    let mut instruction_body: Option<String> = None;
    let mut region_body: Option<String> = None;
    for (kind, body) in blocks {
        let slot = match kind {
            TagKind::Module => &mut module_body,
            TagKind::Instruction => &mut instruction_body,
            TagKind::Region => &mut region_body,
        };
        if slot.is_some() {
            return Err(ProtocolError::DuplicateBlock(kind.label().to_string()));
        }
        *slot = Some(body);
    }

    let task = match module_body {
        None => {
            if instruction_body.is_some() {
                return Err(ProtocolError::MissingModule("Instruction".into()));
            }
            if region_body.is_some() {
                return Err(ProtocolError::MissingModule("Region".into()));
            }
            None
        }
        Some(module_text) => {
            let module = ModuleName::parse(&module_text)?;
            let instruction = instruction_body
                .ok_or(ProtocolError::MissingInstruction)?
                .trim()
                .to_string();
            if instruction.is_empty() {
                return Err(ProtocolError::MissingInstruction);
            }
            let region = match region_body {
                None => None,
                Some(text) => Some(parse_bbox_text(text.trim(), mode)?),
            };
            Some(TaskInvocation {
                module,
                instruction,
                region,
            })
        }
    };

    Ok(InvocationEnvelope {
        user_response: outside.trim().to_string(),
        task,
        embedding: None,
    })
}

/// Canonical text form of an envelope (discrete half only).
///
/// Validity per [`InvocationEnvelope::validate`] is a precondition; the
/// output always re-parses, in strict mode, to an embedding-free copy of the
/// input.
pub fn serialize_envelope(envelope: &InvocationEnvelope) -> String {
    let mut out = String::new();
    out.push_str(&envelope.user_response);
    if let Some(task) = &envelope.task {
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(&format!("<Module> {} </Module>\n", task.module));
        out.push_str(&format!(
            "<Instruction> {} </Instruction>",
            task.instruction
        ));
        if let Some(region) = &task.region {
            out.push_str(&format!("\n<Region> {} </Region>", region.serialize()));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Region payload parsing
// ---------------------------------------------------------------------------

fn split_parenthesized(text: &str) -> Result<&str> {
    let inner = text
        .trim()
        .strip_prefix('(')
        .and_then(|rest| rest.strip_suffix(')'))
        .ok_or_else(|| {
            ProtocolError::MalformedRegion(format!("expected parenthesized tuple, got {text:?}"))
        })?;
    if inner.contains(['(', ')']) {
        return Err(ProtocolError::MalformedRegion(format!(
            "nested parentheses in {text:?}"
        )));
    }
    Ok(inner)
}

fn parse_coords(part: &str) -> Result<[f64; 4]> {
    let fields: Vec<&str> = part.split(',').map(str::trim).collect();
    if fields.len() != 4 {
        return Err(ProtocolError::MalformedRegion(format!(
            "expected 4 coordinates, got {}",
            fields.len()
        )));
    }
    let mut coords = [0.0f64; 4];
    for (slot, field) in coords.iter_mut().zip(&fields) {
        let value: f64 = field.parse().map_err(|_| {
            ProtocolError::MalformedRegion(format!("not a real number: {field:?}"))
        })?;
        if !value.is_finite() {
            return Err(ProtocolError::MalformedRegion(format!(
                "non-finite coordinate: {field:?}"
            )));
        }
        *slot = value;
    }
    Ok(coords)
}

fn parse_span_part(part: &str) -> Result<TemporalSpan> {
    let fields: Vec<&str> = part.split(',').map(str::trim).collect();
    if fields.len() != 2 {
        return Err(ProtocolError::MalformedRegion(format!(
            "expected 2 frame indices, got {}",
            fields.len()
        )));
    }
    let parse_frame = |field: &str| -> Result<u32> {
        field.parse().map_err(|_| {
            ProtocolError::MalformedRegion(format!("not a frame index: {field:?}"))
        })
    };
    TemporalSpan::new(parse_frame(fields[0])?, parse_frame(fields[1])?)
}

/// Parse a spatial box `(Xl, Yt, Xr, Yb)`; a frame-span suffix is rejected.
pub fn parse_bbox_text(text: &str, mode: ParseMode) -> Result<BoundingBox> {
    let inner = split_parenthesized(text)?;
    if inner.contains('|') {
        return Err(ProtocolError::SpanOnImage);
    }
    BoundingBox::from_coords(parse_coords(inner)?, mode)
}

/// Parse a tracking answer `(Xl, Yt, Xr, Yb | Fs, Fe)`; the span is mandatory.
pub fn parse_tracking_answer(text: &str, mode: ParseMode) -> Result<TrackedRegion> {
    let inner = split_parenthesized(text)?;
    let (coord_part, span_part) = match inner.split_once('|') {
        Some(parts) => parts,
        None => return Err(ProtocolError::MissingSpan),
    };
    if span_part.contains('|') {
        return Err(ProtocolError::MalformedRegion(
            "more than one span separator".into(),
        ));
    }
    let bbox = BoundingBox::from_coords(parse_coords(coord_part)?, mode)?;
    let span = parse_span_part(span_part)?;
    Ok(TrackedRegion { bbox, span })
}

fn parse_phrase_region(text: &str, kind: GroundingKind, mode: ParseMode) -> Result<PhraseRegion> {
    match kind {
        GroundingKind::Image => Ok(PhraseRegion::Image {
            bbox: parse_bbox_text(text, mode)?,
        }),
        GroundingKind::Video => match parse_tracking_answer(text, mode) {
            Ok(region) => Ok(PhraseRegion::Video { region }),
            Err(ProtocolError::MissingSpan) => Err(ProtocolError::MissingSpan),
            Err(e) => Err(e),
        },
    }
}

// ---------------------------------------------------------------------------
// Grounded captions
// ---------------------------------------------------------------------------

/// Parse the `caption` + `label: (..)` layout of grounded captioning answers.
///
/// A line is a phrase line iff it contains the `": ("` delimiter; the last
/// such delimiter splits label from region, which lets labels contain spaces
/// ("pink dress"). All remaining lines are caption text. Video phrases must
/// carry a frame span, image phrases must not.
pub fn parse_grounded_caption(
    raw: &str,
    kind: GroundingKind,
    mode: ParseMode,
) -> Result<GroundedCaption> {
    let mut caption_lines: Vec<&str> = Vec::new();
    let mut phrases: Vec<GroundedPhrase> = Vec::new();
    for line in raw.lines() {
        match line.rfind(": (") {
            None => caption_lines.push(line),
            Some(idx) => {
                let label = line[..idx].trim();
                if label.is_empty() {
                    return Err(ProtocolError::MalformedPhraseLine(line.to_string()));
                }
                let region_text = line[idx + 2..].trim().trim_end_matches(',').trim_end();
                let region = match parse_phrase_region(region_text, kind, mode) {
                    Ok(region) => region,
                    Err(e @ (ProtocolError::MissingSpan | ProtocolError::SpanOnImage)) => {
                        return Err(e)
                    }
                    Err(ProtocolError::NonCanonicalBox(a, b, c, d)) => {
                        return Err(ProtocolError::NonCanonicalBox(a, b, c, d))
                    }
                    Err(ProtocolError::InvalidSpan { fs, fe }) => {
                        return Err(ProtocolError::InvalidSpan { fs, fe })
                    }
                    Err(ProtocolError::CoordinateOutOfRange(v)) => {
                        return Err(ProtocolError::CoordinateOutOfRange(v))
                    }
                    Err(_) => return Err(ProtocolError::MalformedPhraseLine(line.to_string())),
                };
                phrases.push(GroundedPhrase {
                    label: label.to_string(),
                    region,
                });
            }
        }
    }
    Ok(GroundedCaption {
        caption: caption_lines.join("\n").trim().to_string(),
        phrases,
    })
}

/// Canonical text form: caption line(s), then one phrase line each.
///
/// Validity (clean labels, caption free of the phrase delimiter, regions
/// matching `kind`) is a precondition, checked by the generator before use.
pub fn serialize_grounded_caption(grounded: &GroundedCaption) -> String {
    let mut out = grounded.caption.clone();
    for phrase in &grounded.phrases {
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(&phrase.serialize());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    // The worked decision-model output the formats are modelled on.
    const CLOCK_RESPONSE: &str = "Sure! You provide a video where there is a female cop talking \
        on the walkie-talkie, responding to emergency calls, and crime prevention. Also in the \
        scene, the clock is green in color. Following I will outline the clock in the video.\n\
        <Module> Video Segmentation </Module>\n\
        <Instruction> segmentation: clock </Instruction>\n\
        <Region> (0.23, 0.35, 0.11, 0.26) </Region>";

    #[test]
    fn clock_example_lenient_canonicalizes_region() {
        let env = parse_envelope(CLOCK_RESPONSE, ParseMode::Lenient).unwrap();
        let task = env.task.as_ref().unwrap();
        assert_eq!(task.module, ModuleName::VideoSegmentation);
        assert_eq!(task.instruction, "segmentation: clock");
        let region = task.region.unwrap();
        assert_eq!((region.xl, region.yt, region.xr, region.yb), (0.11, 0.26, 0.23, 0.35));
        assert!(env.user_response.starts_with("Sure!"));
    }

    #[test]
    fn clock_example_strict_rejects_region() {
        let err = parse_envelope(CLOCK_RESPONSE, ParseMode::Strict).unwrap_err();
        assert!(matches!(err, ProtocolError::NonCanonicalBox(..)));
    }

    #[test]
    fn pure_text_reply_has_no_task() {
        let env = parse_envelope("Sure, here is the answer.", ParseMode::Strict).unwrap();
        assert_eq!(env.user_response, "Sure, here is the answer.");
        assert!(env.task.is_none());
        assert_eq!(serialize_envelope(&env), "Sure, here is the answer.");
    }

    #[test]
    fn serialization_omits_absent_region() {
        let env = InvocationEnvelope::with_task(
            "",
            ModuleName::ImageGeneration,
            "generation: a red cube",
            None,
        );
        let text = serialize_envelope(&env);
        assert!(text.contains("<Module> Image Generation </Module>"));
        assert!(!text.contains("<Region>"));
        assert_eq!(parse_envelope(&text, ParseMode::Strict).unwrap(), env);
    }

    #[test]
    fn tag_matching_is_case_and_whitespace_insensitive() {
        let raw = "ok < MODULE >Image Generation</ module ><instruction> generation: x </INSTRUCTION>";
        let env = parse_envelope(raw, ParseMode::Strict).unwrap();
        assert_eq!(env.task.unwrap().module, ModuleName::ImageGeneration);
        assert_eq!(env.user_response, "ok");
    }

    #[test]
    fn unbalanced_and_duplicate_tags_error() {
        assert!(matches!(
            parse_envelope("<Module> Image Generation", ParseMode::Lenient),
            Err(ProtocolError::UnbalancedTags(_))
        ));
        assert!(matches!(
            parse_envelope("</Module>", ParseMode::Lenient),
            Err(ProtocolError::UnbalancedTags(_))
        ));
        assert!(matches!(
            parse_envelope(
                "<Module> Image Generation <Instruction> x </Instruction> </Module>",
                ParseMode::Lenient
            ),
            Err(ProtocolError::UnbalancedTags(_))
        ));
        let raw = "<Module> Image Generation </Module><Instruction> a </Instruction>\
                   <Module> Video Editing </Module>";
        assert_eq!(
            parse_envelope(raw, ParseMode::Lenient),
            Err(ProtocolError::DuplicateBlock("Module".into()))
        );
    }

    #[test]
    fn unknown_module_and_orphan_blocks_error() {
        assert!(matches!(
            parse_envelope(
                "<Module> Audio Generation </Module><Instruction> x </Instruction>",
                ParseMode::Lenient
            ),
            Err(ProtocolError::UnknownModule(_))
        ));
        assert!(matches!(
            parse_envelope("<Instruction> x </Instruction>", ParseMode::Lenient),
            Err(ProtocolError::MissingModule(_))
        ));
        assert!(matches!(
            parse_envelope(
                "<Module> Image Generation </Module>",
                ParseMode::Lenient
            ),
            Err(ProtocolError::MissingInstruction)
        ));
    }

    #[test]
    fn malformed_regions_error() {
        let mk = |region: &str| {
            format!(
                "<Module> Image Editing </Module><Instruction> editing: x </Instruction>\
                 <Region> {region} </Region>"
            )
        };
        assert!(matches!(
            parse_envelope(&mk("(0.1, 0.2, 0.3)"), ParseMode::Lenient),
            Err(ProtocolError::MalformedRegion(_))
        ));
        assert!(matches!(
            parse_envelope(&mk("0.1, 0.2, 0.3, 0.4"), ParseMode::Lenient),
            Err(ProtocolError::MalformedRegion(_))
        ));
        assert!(matches!(
            parse_envelope(&mk("(0.1, 0.2, 0.3, nope)"), ParseMode::Lenient),
            Err(ProtocolError::MalformedRegion(_))
        ));
        assert!(matches!(
            parse_envelope(&mk("(0.1, 0.2, 0.3, 1.4)"), ParseMode::Lenient),
            Err(ProtocolError::CoordinateOutOfRange(_))
        ));
    }

    #[test]
    fn tracking_answer_cases() {
        let region = parse_tracking_answer("(0.1, 0.2, 0.3, 0.4 | 5, 9)", ParseMode::Strict).unwrap();
        assert_eq!((region.bbox.xl, region.bbox.yt, region.bbox.xr, region.bbox.yb), (0.1, 0.2, 0.3, 0.4));
        assert_eq!((region.span.fs, region.span.fe), (5, 9));

        assert_eq!(
            parse_tracking_answer("(0.1, 0.2, 0.3, 0.4)", ParseMode::Strict),
            Err(ProtocolError::MissingSpan)
        );
        assert_eq!(
            parse_tracking_answer("(0.1, 0.2, 0.3, 0.4 | 9, 5)", ParseMode::Strict),
            Err(ProtocolError::InvalidSpan { fs: 9, fe: 5 })
        );
    }

    #[test]
    fn grounded_caption_video_and_image() {
        let video = "A dog is running after a ball on the grass.\ndog: (0.1, 0.1, 0.4, 0.6 | 0, 30)";
        let parsed = parse_grounded_caption(video, GroundingKind::Video, ParseMode::Strict).unwrap();
        assert_eq!(parsed.caption, "A dog is running after a ball on the grass.");
        assert_eq!(parsed.phrases.len(), 1);
        assert_eq!(parsed.phrases[0].label, "dog");
        match parsed.phrases[0].region {
            PhraseRegion::Video { region } => {
                assert_eq!((region.span.fs, region.span.fe), (0, 30));
            }
            _ => panic!("expected video region"),
        }

        let image = "girl: (0.2, 0.1, 0.5, 0.9)";
        let parsed = parse_grounded_caption(image, GroundingKind::Image, ParseMode::Strict).unwrap();
        assert_eq!(parsed.caption, "");
        assert_eq!(parsed.phrases[0].label, "girl");

        let plain = "Just a caption with no grounded phrases.";
        let parsed = parse_grounded_caption(plain, GroundingKind::Image, ParseMode::Strict).unwrap();
        assert_eq!(parsed.caption, plain);
        assert!(parsed.phrases.is_empty());
    }

    #[test]
    fn grounded_caption_kind_mismatches() {
        let video_line = "dog: (0.1, 0.1, 0.4, 0.6 | 0, 30)";
        assert_eq!(
            parse_grounded_caption(video_line, GroundingKind::Image, ParseMode::Strict),
            Err(ProtocolError::SpanOnImage)
        );
        let image_line = "dog: (0.1, 0.1, 0.4, 0.6)";
        assert_eq!(
            parse_grounded_caption(image_line, GroundingKind::Video, ParseMode::Strict),
            Err(ProtocolError::MissingSpan)
        );
        assert!(matches!(
            parse_grounded_caption(": (0.1, 0.1, 0.4, 0.6)", GroundingKind::Image, ParseMode::Strict),
            Err(ProtocolError::MalformedPhraseLine(_))
        ));
    }

    #[test]
    fn labels_may_contain_spaces_and_colons() {
        let raw = "A girl wearing a pink dress.\npink dress: (0.2, 0.3, 0.5, 0.9)";
        let parsed = parse_grounded_caption(raw, GroundingKind::Image, ParseMode::Strict).unwrap();
        assert_eq!(parsed.phrases[0].label, "pink dress");

        // The *last* ": (" delimits, so earlier colons stay in the label.
        let tricky = "scale 1:2 model: (0.1, 0.2, 0.3, 0.4)";
        let parsed = parse_grounded_caption(tricky, GroundingKind::Image, ParseMode::Strict).unwrap();
        assert_eq!(parsed.phrases[0].label, "scale 1:2 model");
    }

    /// Seeded random canonical envelope, quantized so serialization is exact.
    pub(crate) fn random_envelope(rng: &mut StdRng) -> InvocationEnvelope {
        let responses = [
            "",
            "Sure, here you go.",
            "Done. Let me know if you need adjustments.",
            "Of course! Working on it now.",
        ];
        let user_response = responses[rng.random_range(0..responses.len())].to_string();
        if rng.random_bool(0.2) {
            return InvocationEnvelope::text_reply(user_response);
        }
        let module = ModuleName::ALL[rng.random_range(0..ModuleName::ALL.len())];
        let payloads = ["clock", "red cube", "pink dress", "man in black shirt"];
        let instruction = format!(
            "{}: {}",
            ["segmentation", "generation", "editing", "tracking"][rng.random_range(0..4)],
            payloads[rng.random_range(0..payloads.len())]
        );
        let region = if rng.random_bool(0.5) {
            let q = |r: &mut StdRng| r.random_range(0..=10_000) as f64 / 1e4;
            let (a, c) = (q(rng), q(rng));
            let (b, d) = (q(rng), q(rng));
            Some(BoundingBox::canonicalized(a, b, c, d).unwrap())
        } else {
            None
        };
        InvocationEnvelope::with_task(user_response, module, instruction, region)
    }

    #[test]
    fn envelope_round_trip_property() {
        let mut rng = StdRng::seed_from_u64(0x5eed_0001);
        for _ in 0..2_000 {
            let env = random_envelope(&mut rng);
            env.validate().unwrap();
            let text = serialize_envelope(&env);
            let strict = parse_envelope(&text, ParseMode::Strict).unwrap();
            assert_eq!(strict, env);
            // Canonicalization is idempotent: lenient equals strict here.
            let lenient = parse_envelope(&text, ParseMode::Lenient).unwrap();
            assert_eq!(lenient, strict);
            assert_eq!(serialize_envelope(&strict), text);
        }
    }

    #[test]
    fn quantized_coordinates_reparse_within_tolerance() {
        let mut rng = StdRng::seed_from_u64(0x5eed_0002);
        for _ in 0..1_000 {
            let raw: f64 = rng.random_range(0.0..=1.0);
            let b = BoundingBox::canonicalized(raw, raw, raw, raw).unwrap().quantized();
            let reparsed = parse_bbox_text(&b.serialize(), ParseMode::Strict).unwrap();
            assert!((reparsed.xl - b.xl).abs() < 1e-9);
        }
    }
}
