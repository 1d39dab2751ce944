//! UI knowledge base and icon knowledge base.
//!
//! Both bases are stored as line-delimited JSON. A UI knowledge record pairs a
//! wireframe layout with the semantic knowledge mined for it (per-component
//! texts, a high-level description and four theme attributes). An icon record
//! pairs an SVG fragment with a short semantic phrase.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KbError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record {index}: field `{field}`: {message}")]
    Malformed {
        index: usize,
        field: String,
        message: String,
    },
    #[error("invalid bbox at record {index}: component {component}: {message}")]
    InvalidBBox {
        index: usize,
        component: usize,
        message: String,
    },
    #[error("duplicate id `{id}` at record {index}")]
    DuplicateId { index: usize, id: String },
    #[error("invalid svg for icon `{id}`: {message}")]
    InvalidSvg { id: String, message: String },
    #[error("invalid vqa template set: {0}")]
    InvalidTemplates(String),
}

/// The closed set of component labels a layout may use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ComponentType {
    Text,
    TextButton,
    Icon,
    Image,
    BackgroundImage,
    Toolbar,
    ListItem,
    Input,
    Card,
    WebView,
    Checkbox,
    RadioButton,
    Slider,
}

impl ComponentType {
    pub const ALL: [ComponentType; 13] = [
        ComponentType::Text,
        ComponentType::TextButton,
        ComponentType::Icon,
        ComponentType::Image,
        ComponentType::BackgroundImage,
        ComponentType::Toolbar,
        ComponentType::ListItem,
        ComponentType::Input,
        ComponentType::Card,
        ComponentType::WebView,
        ComponentType::Checkbox,
        ComponentType::RadioButton,
        ComponentType::Slider,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ComponentType::Text => "Text",
            ComponentType::TextButton => "TextButton",
            ComponentType::Icon => "Icon",
            ComponentType::Image => "Image",
            ComponentType::BackgroundImage => "BackgroundImage",
            ComponentType::Toolbar => "Toolbar",
            ComponentType::ListItem => "ListItem",
            ComponentType::Input => "Input",
            ComponentType::Card => "Card",
            ComponentType::WebView => "WebView",
            ComponentType::Checkbox => "Checkbox",
            ComponentType::RadioButton => "RadioButton",
            ComponentType::Slider => "Slider",
        }
    }
}

impl fmt::Display for ComponentType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown component type `{0}`")]
pub struct UnknownComponentType(pub String);

impl FromStr for ComponentType {
    type Err = UnknownComponentType;

    /// Case-insensitive. Separators are ignored so that Rico-style labels such
    /// as "Text Button" or "background_image" are accepted too.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| !matches!(c, ' ' | '_' | '-'))
            .flat_map(char::to_lowercase)
            .collect();
        ComponentType::ALL
            .into_iter()
            .find(|t| t.as_str().to_ascii_lowercase() == key)
            .ok_or_else(|| UnknownComponentType(s.to_string()))
    }
}

impl Serialize for ComponentType {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for ComponentType {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Axis-aligned box in canvas pixels. Serialized as `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl From<[u32; 4]> for BBox {
    fn from([x, y, w, h]: [u32; 4]) -> Self {
        BBox { x, y, w, h }
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        BBox { x, y, w, h }
    }

    /// Maps the box from canvas coordinates onto a `width`x`height` image:
    /// corners are scaled linearly, rounded half-up and clamped to the image.
    /// Returns `None` when the scaled box is thinner than one pixel.
    pub fn scale_to(&self, canvas: Canvas, width: u32, height: u32) -> Option<BBox> {
        let scale = |v: u32, from: u32, to: u32| -> u32 {
            let num = 2 * u64::from(v) * u64::from(to) + u64::from(from);
            ((num / (2 * u64::from(from))) as u32).min(to)
        };
        let x0 = scale(self.x, canvas.width, width);
        let y0 = scale(self.y, canvas.height, height);
        let x1 = scale(self.x.saturating_add(self.w), canvas.width, width);
        let y1 = scale(self.y.saturating_add(self.h), canvas.height, height);
        (x1 > x0 && y1 > y0).then(|| BBox::new(x0, y0, x1 - x0, y1 - y0))
    }

    pub fn validate(&self, canvas: Canvas) -> Result<(), String> {
        if self.w == 0 || self.h == 0 {
            return Err(format!("non-positive size {}x{}", self.w, self.h));
        }
        if u64::from(self.x) + u64::from(self.w) > u64::from(canvas.width)
            || u64::from(self.y) + u64::from(self.h) > u64::from(canvas.height)
        {
            return Err(format!(
                "{self} exceeds canvas {}x{}",
                canvas.width, canvas.height
            ));
        }
        Ok(())
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{},{},{}]", self.x, self.y, self.w, self.h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Canvas {
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayoutComponent {
    #[serde(rename = "type")]
    pub kind: ComponentType,
    pub bbox: BBox,
}

/// A wireframe: typed boxes on a canvas. Component order is generation order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Layout {
    pub canvas: Canvas,
    pub components: Vec<LayoutComponent>,
}

/// A layout constraint violation, pointing at the offending component when
/// there is one.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{path}: {message}")]
pub struct LayoutError {
    pub path: String,
    pub component: Option<usize>,
    pub message: String,
}

impl Layout {
    pub fn validate(&self) -> Result<(), LayoutError> {
        if self.canvas.width == 0 || self.canvas.height == 0 {
            return Err(LayoutError {
                path: "layout.canvas".into(),
                component: None,
                message: "canvas must be at least 1x1".into(),
            });
        }
        for (i, c) in self.components.iter().enumerate() {
            c.bbox.validate(self.canvas).map_err(|message| LayoutError {
                path: format!("layout.components[{i}].bbox"),
                component: Some(i),
                message,
            })?;
        }
        Ok(())
    }

    /// One `<Type> [x,y,w,h]` line per component.
    pub fn to_lines(&self) -> String {
        self.components
            .iter()
            .map(|c| format!("{} {}", c.kind, c.bbox))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// The four theme attributes, in their fixed canonical order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct ThemeAttrs {
    pub theme_color: String,
    pub primary_color: String,
    pub theme_description: String,
    pub app_category: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeRecord {
    pub id: String,
    pub layout: Layout,
    /// Aligned with `layout.components`; `None` where the component has no
    /// text content or icon description.
    pub component_texts: Vec<Option<String>>,
    pub ui_description: String,
    pub theme_attrs: ThemeAttrs,
}

#[derive(Serialize, Deserialize)]
struct WireComponent {
    #[serde(rename = "type")]
    kind: ComponentType,
    bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireRecord {
    id: String,
    canvas: Canvas,
    components: Vec<WireComponent>,
    ui_description: String,
    theme_attrs: ThemeAttrs,
}

impl Serialize for KnowledgeRecord {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        WireRecord {
            id: self.id.clone(),
            canvas: self.layout.canvas,
            components: self
                .layout
                .components
                .iter()
                .zip(&self.component_texts)
                .map(|(c, t)| WireComponent {
                    kind: c.kind,
                    bbox: c.bbox,
                    text: t.clone(),
                })
                .collect(),
            ui_description: self.ui_description.clone(),
            theme_attrs: self.theme_attrs.clone(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for KnowledgeRecord {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let wire = WireRecord::deserialize(deserializer)?;
        Ok(KnowledgeRecord::from_wire(wire))
    }
}

impl KnowledgeRecord {
    fn from_wire(wire: WireRecord) -> Self {
        let (components, component_texts) = wire
            .components
            .into_iter()
            .map(|c| {
                (
                    LayoutComponent {
                        kind: c.kind,
                        bbox: c.bbox,
                    },
                    c.text.filter(|t| !t.is_empty()),
                )
            })
            .unzip();
        KnowledgeRecord {
            id: wire.id,
            layout: Layout {
                canvas: wire.canvas,
                components,
            },
            component_texts,
            ui_description: wire.ui_description,
            theme_attrs: wire.theme_attrs,
        }
    }

    /// Canonical text used both as the embedding input and as the reference
    /// block injected into the theme prompt.
    ///
    /// Sections, in order: layout lines, component texts (one line per
    /// component, omitted entirely when no component has text), the UI
    /// description, then the theme attributes. Free text is escaped so each
    /// value occupies exactly one line.
    pub fn to_text(&self) -> String {
        let mut lines: Vec<String> = self
            .layout
            .components
            .iter()
            .map(|c| format!("{} {}", c.kind, c.bbox))
            .collect();
        if self.component_texts.iter().any(Option::is_some) {
            lines.extend(
                self.component_texts
                    .iter()
                    .map(|t| t.as_deref().map(escape_line).unwrap_or_default()),
            );
        }
        lines.push(escape_line(&self.ui_description));
        let attrs = &self.theme_attrs;
        lines.push(format!("theme_color: {}", escape_line(&attrs.theme_color)));
        lines.push(format!("primary_color: {}", escape_line(&attrs.primary_color)));
        lines.push(format!(
            "theme_description: {}",
            escape_line(&attrs.theme_description)
        ));
        lines.push(format!("app_category: {}", escape_line(&attrs.app_category)));
        lines.join("\n")
    }
}

pub fn knowledge_record_to_text(record: &KnowledgeRecord) -> String {
    record.to_text()
}

fn escape_line(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IconRecord {
    pub id: String,
    pub phrase: String,
    #[serde(rename = "svg")]
    pub svg_source: String,
}

impl IconRecord {
    pub fn validate(&self) -> Result<(), KbError> {
        if self.phrase.trim().is_empty() {
            return Err(KbError::InvalidSvg {
                id: self.id.clone(),
                message: "empty phrase".into(),
            });
        }
        validate_svg_fragment(&self.svg_source).map_err(|message| KbError::InvalidSvg {
            id: self.id.clone(),
            message,
        })
    }
}

/// Checks that `source` is well-formed XML with a single root element.
pub fn validate_svg_fragment(source: &str) -> Result<(), String> {
    let doc = roxmltree::Document::parse(source).map_err(|e| e.to_string())?;
    if doc.root_element().tag_name().name() != "svg" {
        return Err(format!(
            "root element is <{}>, expected <svg>",
            doc.root_element().tag_name().name()
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThemeAttribute {
    ThemeColor,
    PrimaryColor,
    ThemeDescription,
    AppCategory,
}

/// A visual-question-answering prompt that documents how a theme attribute
/// was mined from a screenshot. Templates are configuration only.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaTemplate {
    pub attribute: ThemeAttribute,
    pub question: String,
}

const DEFAULT_VQA_TEMPLATES: &str = include_str!("../data/vqa_templates.json");

pub fn default_vqa_templates() -> Vec<VqaTemplate> {
    let set: Vec<VqaTemplate> =
        serde_json::from_str(DEFAULT_VQA_TEMPLATES).expect("bundled templates are valid json");
    validate_vqa_templates(&set).expect("bundled templates are complete");
    set
}

pub fn validate_vqa_templates(set: &[VqaTemplate]) -> Result<(), KbError> {
    let mut seen = BTreeMap::new();
    for t in set {
        if seen.insert(t.attribute, ()).is_some() {
            return Err(KbError::InvalidTemplates(format!(
                "attribute {:?} appears more than once",
                t.attribute
            )));
        }
    }
    if seen.len() != 4 {
        return Err(KbError::InvalidTemplates(format!(
            "expected 4 attributes, found {}",
            seen.len()
        )));
    }
    Ok(())
}

/// Files to ingest for `path`: the file itself, or every `.jsonl` file of a
/// directory in name order.
fn record_files(path: &Path) -> Result<Vec<PathBuf>, KbError> {
    let io_err = |source| KbError::Io {
        path: path.to_path_buf(),
        source,
    };
    let meta = fs::metadata(path).map_err(io_err)?;
    if !meta.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(path).map_err(io_err)? {
        let p = entry.map_err(io_err)?.path();
        if p.extension().is_some_and(|e| e == "jsonl") {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn record_lines(path: &Path) -> Result<Vec<String>, KbError> {
    let mut lines = Vec::new();
    for file in record_files(path)? {
        let text = fs::read_to_string(&file).map_err(|source| KbError::Io {
            path: file.clone(),
            source,
        })?;
        lines.extend(
            text.lines()
                .filter(|l| !l.trim().is_empty())
                .map(str::to_owned),
        );
    }
    Ok(lines)
}

/// Parses one knowledge record line. `index` is only used for error messages.
pub fn parse_knowledge_record(line: &str, index: usize) -> Result<KnowledgeRecord, KbError> {
    let wire: WireRecord = serde_json::from_str(line).map_err(|e| KbError::Malformed {
        index,
        field: field_from_serde_error(&e),
        message: e.to_string(),
    })?;
    let record = KnowledgeRecord::from_wire(wire);
    validate_record(&record, index)?;
    Ok(record)
}

fn field_from_serde_error(e: &serde_json::Error) -> String {
    // serde_json reports "missing field `x`" / "unknown field `x`"; fall back
    // to the whole record otherwise.
    let msg = e.to_string();
    msg.split('`')
        .nth(1)
        .map(str::to_owned)
        .unwrap_or_else(|| "<record>".into())
}

fn validate_record(record: &KnowledgeRecord, index: usize) -> Result<(), KbError> {
    if record.id.trim().is_empty() {
        return Err(KbError::Malformed {
            index,
            field: "id".into(),
            message: "empty id".into(),
        });
    }
    let canvas = record.layout.canvas;
    if canvas.width == 0 || canvas.height == 0 {
        return Err(KbError::Malformed {
            index,
            field: "canvas".into(),
            message: "canvas must be at least 1x1".into(),
        });
    }
    for (component, c) in record.layout.components.iter().enumerate() {
        c.bbox
            .validate(canvas)
            .map_err(|message| KbError::InvalidBBox {
                index,
                component,
                message,
            })?;
    }
    Ok(())
}

pub fn load_knowledge_base(path: impl AsRef<Path>) -> Result<Vec<KnowledgeRecord>, KbError> {
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (index, line) in record_lines(path.as_ref())?.iter().enumerate() {
        let record = parse_knowledge_record(line, index)?;
        if !seen.insert(record.id.clone()) {
            return Err(KbError::DuplicateId {
                index,
                id: record.id,
            });
        }
        records.push(record);
    }
    Ok(records)
}

pub fn parse_icon_record(line: &str, index: usize) -> Result<IconRecord, KbError> {
    let icon: IconRecord = serde_json::from_str(line).map_err(|e| KbError::Malformed {
        index,
        field: field_from_serde_error(&e),
        message: e.to_string(),
    })?;
    icon.validate()?;
    Ok(icon)
}

pub fn load_icon_base(path: impl AsRef<Path>) -> Result<Vec<IconRecord>, KbError> {
    parse_icon_lines(record_lines(path.as_ref())?.iter().map(String::as_str))
}

pub(crate) fn parse_icon_lines<'a>(
    lines: impl Iterator<Item = &'a str>,
) -> Result<Vec<IconRecord>, KbError> {
    let mut seen = HashSet::new();
    let mut icons = Vec::new();
    for (index, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
        let icon = parse_icon_record(line, index)?;
        if !seen.insert(icon.id.clone()) {
            return Err(KbError::DuplicateId { index, id: icon.id });
        }
        icons.push(icon);
    }
    Ok(icons)
}

pub fn parse_knowledge_lines<'a>(
    lines: impl Iterator<Item = &'a str>,
) -> Result<Vec<KnowledgeRecord>, KbError> {
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (index, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
        let record = parse_knowledge_record(line, index)?;
        if !seen.insert(record.id.clone()) {
            return Err(KbError::DuplicateId {
                index,
                id: record.id,
            });
        }
        records.push(record);
    }
    Ok(records)
}

/// Serializes records back into the line format.
pub fn write_knowledge_lines(records: &[KnowledgeRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

/// The small sample knowledge base shipped with the crate.
pub fn sample_knowledge_base() -> Vec<KnowledgeRecord> {
    parse_knowledge_lines(include_str!("../data/sample_kb.jsonl").lines())
        .expect("bundled knowledge base is valid")
}

/// The sample icon base shipped with the crate.
pub fn sample_icon_base() -> Vec<IconRecord> {
    parse_icon_lines(include_str!("../data/sample_icons.jsonl").lines())
        .expect("bundled icon base is valid")
}

/// Summary numbers for `kb stats`.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct KbStats {
    pub records: usize,
    pub components: usize,
    pub components_with_text: usize,
    pub by_type: BTreeMap<String, usize>,
    pub by_category: BTreeMap<String, usize>,
}

pub fn stats(records: &[KnowledgeRecord]) -> KbStats {
    let mut s = KbStats {
        records: records.len(),
        ..KbStats::default()
    };
    for r in records {
        s.components += r.layout.components.len();
        s.components_with_text += r.component_texts.iter().flatten().count();
        for c in &r.layout.components {
            *s.by_type.entry(c.kind.to_string()).or_default() += 1;
        }
        *s.by_category
            .entry(r.theme_attrs.app_category.clone())
            .or_default() += 1;
    }
    s
}
