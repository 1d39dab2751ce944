//! The theme design module: central coordinator of a generation run.
//!
//! A run has four phases:
//!
//! 1. retrieve the `k` knowledge records closest to the design input;
//! 2. generate a theme description from the prompt
//!    `In_p ⊕ In_l ⊕ refer_0 ⊕ … ⊕ refer_{k-1} ⊕ P_theme`;
//! 3. generate a layout-conditioned theme image;
//! 4. walk the layout in order, dispatching each component to its sub-module
//!    with the prompt `p_sub(bbox) ⊕ Cache_t`, and folding each result back
//!    into the cache pool.
//!
//! Sub-modules never talk to each other; all shared state is the cache pool,
//! which only this module reads and writes.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembler::ranked_colors;
use crate::backends::{
    BackendError, Backends, ImageGenRequest, ImageSize, TextGenRequest, DEFAULT_IMAGE_SIZE,
    DEFAULT_MAX_TOKENS, DEFAULT_STRENGTH, THEME_FORMAT_MARKER,
};
use crate::image::{parse_hex, to_hex, RasterImage};
use crate::kb::{BBox, ComponentType, KnowledgeRecord, Layout, LayoutComponent, LayoutError};
use crate::retrieval::{
    retrieve_knowledge, Index, RetrievalConfig, RetrievalError, RetrievalResult, DEFAULT_K,
};
use crate::submodules::{
    color_fill_content, icon_content, image_content, text_content, ComponentContent,
    ImageParams, SubModuleError,
};
use crate::retrieval::IconIndex;

/// Re-asks after an unparseable theme description.
pub const THEME_REASKS: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DesignInput {
    pub prompt: String,
    pub layout: Layout,
}

impl DesignInput {
    pub fn validate(&self) -> Result<(), LayoutError> {
        if self.prompt.trim().is_empty() {
            return Err(LayoutError {
                path: "prompt".into(),
                component: None,
                message: "prompt must not be empty".into(),
            });
        }
        if self.layout.components.is_empty() {
            return Err(LayoutError {
                path: "layout.components".into(),
                component: None,
                message: "layout needs at least one component".into(),
            });
        }
        self.layout.validate()
    }
}

/// Which sub-module produces a component's content.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModuleId {
    Text,
    Image,
    Icon,
    ColorFill,
}

impl fmt::Display for ModuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModuleId::Text => "text",
            ModuleId::Image => "image",
            ModuleId::Icon => "icon",
            ModuleId::ColorFill => "color_fill",
        })
    }
}

pub fn dispatch(component_type: ComponentType) -> ModuleId {
    match component_type {
        ComponentType::Text | ComponentType::TextButton => ModuleId::Text,
        ComponentType::Image | ComponentType::BackgroundImage => ModuleId::Image,
        ComponentType::Icon => ModuleId::Icon,
        ComponentType::Toolbar
        | ComponentType::ListItem
        | ComponentType::Input
        | ComponentType::Card
        | ComponentType::WebView
        | ComponentType::Checkbox
        | ComponentType::RadioButton
        | ComponentType::Slider => ModuleId::ColorFill,
    }
}

/// Backend call categories tracked per trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    ThemeDescription,
    ThemeImage,
    Text,
    Image,
    Icon,
}

pub type CallCounts = BTreeMap<CallKind, u64>;

fn bump(counts: &mut CallCounts, kind: CallKind) {
    *counts.entry(kind).or_default() += 1;
}

/// Pipeline stages that can be switched off for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoRetrieval,
    NoThemeDescription,
    NoThemeImage,
    NoTextModule,
    NoImageModule,
    NoIconModule,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::NoRetrieval,
        Ablation::NoThemeDescription,
        Ablation::NoThemeImage,
        Ablation::NoTextModule,
        Ablation::NoImageModule,
        Ablation::NoIconModule,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::NoRetrieval => "no_retrieval",
            Ablation::NoThemeDescription => "no_theme_description",
            Ablation::NoThemeImage => "no_theme_image",
            Ablation::NoTextModule => "no_text_module",
            Ablation::NoImageModule => "no_image_module",
            Ablation::NoIconModule => "no_icon_module",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown ablation flag `{0}`")]
pub struct UnknownAblation(pub String);

impl FromStr for Ablation {
    type Err = UnknownAblation;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s.trim())
            .ok_or_else(|| UnknownAblation(s.to_string()))
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Prompt templates. `[bbox]` is replaced by `[x,y,w,h]`; `[components]` in
/// the theme template expands to one slot line per layout component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Templates {
    pub p_theme: String,
    pub p_text: String,
    pub p_icon: String,
    pub p_image: String,
    pub p_color_fill: String,
}

pub const DEFAULT_P_TEXT: &str = "Based on the theme description and relevant details, provide a text content recommendation for the designated position at [bbox].";
pub const DEFAULT_P_ICON: &str = "In reference to relevant information and taking into account its positioning at [bbox], and based on the theme description, propose an indicative phrase like \"msg\" for the \"Icon\".";
pub const DEFAULT_P_IMAGE: &str =
    "Based on the theme description, generate the image content for the designated position at [bbox].";
pub const DEFAULT_P_COLOR_FILL: &str =
    "Fill the component at [bbox] with the dominant color of its region of the theme image.";

impl Default for Templates {
    fn default() -> Self {
        Templates {
            p_theme: default_theme_template(),
            p_text: DEFAULT_P_TEXT.into(),
            p_icon: DEFAULT_P_ICON.into(),
            p_image: DEFAULT_P_IMAGE.into(),
            p_color_fill: DEFAULT_P_COLOR_FILL.into(),
        }
    }
}

pub fn default_theme_template() -> String {
    format!(
        "You are a UI designer. Using the design request, the wireframe layout and the reference UIs above, \
write a theme description for the new UI: a theme (background) color, a primary color, the app category, \
an overall description of the visual theme, and a content plan for every wireframe component. \
Each plan line names the kind of content (text, image, icon or other) and briefly describes what the component shows.\n\
{THEME_FORMAT_MARKER}\n\
THEME_COLOR: #rrggbb\n\
PRIMARY_COLOR: #rrggbb\n\
APP_CATEGORY: <category>\n\
THEME: <one paragraph describing the visual theme>\n\
[components]"
    )
}

const FORMAT_REMINDER: &str = "Your previous answer could not be parsed. Reply again using only the labeled lines requested above: THEME_COLOR, PRIMARY_COLOR, APP_CATEGORY, THEME and one COMPONENT[i] line per component.";

impl Templates {
    pub fn for_module(&self, module: ModuleId) -> (&'static str, &str) {
        match module {
            ModuleId::Text => ("p_text", &self.p_text),
            ModuleId::Image => ("p_image", &self.p_image),
            ModuleId::Icon => ("p_icon", &self.p_icon),
            ModuleId::ColorFill => ("p_color_fill", &self.p_color_fill),
        }
    }

    pub fn render_sub(&self, module: ModuleId, bbox: BBox) -> String {
        self.for_module(module).1.replace("[bbox]", &bbox.to_string())
    }

    pub fn render_theme(&self, layout: &Layout) -> String {
        let slots = layout
            .components
            .iter()
            .enumerate()
            .map(|(i, c)| format!("COMPONENT[{i}] ({} {}): <kind> | <content hint>", c.kind, c.bbox))
            .collect::<Vec<_>>()
            .join("\n");
        if self.p_theme.contains("[components]") {
            self.p_theme.replace("[components]", &slots)
        } else if slots.is_empty() {
            self.p_theme.clone()
        } else {
            format!("{}\n{slots}", self.p_theme)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub k: usize,
    pub image_size: u32,
    pub seed: u64,
    pub max_tokens: u32,
    pub strength: f64,
    pub templates: Templates,
    #[serde(default)]
    pub ablations: Vec<Ablation>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            k: DEFAULT_K,
            image_size: DEFAULT_IMAGE_SIZE,
            seed: 0,
            max_tokens: DEFAULT_MAX_TOKENS,
            strength: DEFAULT_STRENGTH,
            templates: Templates::default(),
            ablations: Vec::new(),
        }
    }
}

impl PipelineConfig {
    pub fn ablated(&self, a: Ablation) -> bool {
        self.ablations.contains(&a)
    }

    /// The module that actually runs for a component type under the current
    /// ablation flags; disabled modules fall back to a color fill.
    pub fn effective_module(&self, component_type: ComponentType) -> ModuleId {
        let module = dispatch(component_type);
        let disabled = match module {
            ModuleId::Text => self.ablated(Ablation::NoTextModule),
            ModuleId::Image => self.ablated(Ablation::NoImageModule),
            ModuleId::Icon => self.ablated(Ablation::NoIconModule),
            ModuleId::ColorFill => false,
        };
        if disabled {
            ModuleId::ColorFill
        } else {
            module
        }
    }
}

/// The amalgamated theme prompt `P` and the parts it was built from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThemePrompt {
    pub text: String,
    pub parts: ThemePromptParts,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThemePromptParts {
    pub in_p: String,
    pub in_l_serialized: String,
    pub refer: Vec<String>,
    pub p_theme: String,
}

impl ThemePrompt {
    pub fn from_parts(parts: ThemePromptParts) -> Self {
        let mut pieces: Vec<&str> = vec![&parts.in_p, &parts.in_l_serialized];
        pieces.extend(parts.refer.iter().map(String::as_str));
        pieces.push(&parts.p_theme);
        ThemePrompt {
            text: pieces.join("\n"),
            parts,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    Text,
    Image,
    Icon,
    Other,
}

impl PlanKind {
    fn as_str(self) -> &'static str {
        match self {
            PlanKind::Text => "text",
            PlanKind::Image => "image",
            PlanKind::Icon => "icon",
            PlanKind::Other => "other",
        }
    }

    fn for_module(m: ModuleId) -> Self {
        match m {
            ModuleId::Text => PlanKind::Text,
            ModuleId::Image => PlanKind::Image,
            ModuleId::Icon => PlanKind::Icon,
            ModuleId::ColorFill => PlanKind::Other,
        }
    }
}

impl FromStr for PlanKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "text" => Ok(PlanKind::Text),
            "image" => Ok(PlanKind::Image),
            "icon" => Ok(PlanKind::Icon),
            "other" => Ok(PlanKind::Other),
            other => Err(format!("unknown component kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PlanItem {
    pub kind: PlanKind,
    pub content_hint: String,
}

/// Structured theme description (`Res_theme`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ThemeDescription {
    pub theme_color: String,
    pub primary_color: String,
    pub app_category: String,
    pub theme_text: String,
    pub component_plan: Vec<PlanItem>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ThemeError {
    #[error("{field}: `{value}` is not a #rrggbb color")]
    BadColor { field: &'static str, value: String },
    #[error("component plan has {actual} entries, layout has {expected} components")]
    PlanMismatch { expected: usize, actual: usize },
    #[error("{0}")]
    Parse(String),
}

fn is_canonical_hex(s: &str) -> bool {
    s.len() == 7
        && s.starts_with('#')
        && s[1..].bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl ThemeDescription {
    pub fn validate(&self, components: usize) -> Result<(), ThemeError> {
        for (field, value) in [
            ("theme_color", &self.theme_color),
            ("primary_color", &self.primary_color),
        ] {
            if !is_canonical_hex(value) {
                return Err(ThemeError::BadColor {
                    field,
                    value: value.clone(),
                });
            }
        }
        if self.component_plan.len() != components {
            return Err(ThemeError::PlanMismatch {
                expected: components,
                actual: self.component_plan.len(),
            });
        }
        Ok(())
    }

    /// Labeled-field rendering; [`parse_theme_description`] reads it back.
    /// This text seeds the cache pool.
    pub fn to_text(&self) -> String {
        let mut lines = vec![
            format!("THEME_COLOR: {}", self.theme_color),
            format!("PRIMARY_COLOR: {}", self.primary_color),
            format!("APP_CATEGORY: {}", one_line(&self.app_category)),
            format!("THEME: {}", one_line(&self.theme_text)),
        ];
        lines.extend(self.component_plan.iter().enumerate().map(|(i, p)| {
            format!(
                "COMPONENT[{i}]: {} | {}",
                p.kind.as_str(),
                one_line(&p.content_hint)
            )
        }));
        lines.join("\n")
    }

    /// Description used when theme-description generation is switched off:
    /// colors come from the theme image when there is one, the plan from the
    /// dispatch table, and the narrative is the designer's own prompt.
    pub fn fallback(input: &DesignInput, theme_image: Option<&RasterImage>) -> Self {
        let (theme_color, primary_color) = match theme_image.map(|img| ranked_colors(img, 2)) {
            Some(ranked) if ranked.len() >= 2 => (to_hex(ranked[0]), to_hex(ranked[1])),
            Some(ranked) if ranked.len() == 1 => {
                let c = ranked[0];
                let luma = 299 * c[0] as u32 + 587 * c[1] as u32 + 114 * c[2] as u32;
                let contrast = if luma > 127_500 { [0; 3] } else { [255; 3] };
                (to_hex(c), to_hex(contrast))
            }
            _ => ("#ffffff".to_string(), "#000000".to_string()),
        };
        ThemeDescription {
            theme_color,
            primary_color,
            app_category: "general".into(),
            theme_text: one_line(&input.prompt),
            component_plan: input
                .layout
                .components
                .iter()
                .map(|c| PlanItem {
                    kind: PlanKind::for_module(dispatch(c.kind)),
                    content_hint: String::new(),
                })
                .collect(),
        }
    }
}

/// Line-oriented parser for the labeled-field answer. Keys are matched
/// case-insensitively; unrelated lines are ignored; lines that follow `THEME:`
/// without a key continue the theme narrative.
pub fn parse_theme_description(
    text: &str,
    components: usize,
) -> Result<ThemeDescription, ThemeError> {
    let mut theme_color = None;
    let mut primary_color = None;
    let mut category = None;
    let mut theme_text: Option<String> = None;
    let mut plan: Vec<Option<PlanItem>> = vec![None; components];
    let mut in_theme = false;

    let parse_color = |field: &'static str, v: &str| {
        parse_hex(v.trim())
            .map(to_hex)
            .ok_or_else(|| ThemeError::BadColor {
                field,
                value: v.trim().to_string(),
            })
    };

    for raw in text.lines() {
        let line = raw.trim().trim_start_matches(['-', '*', ' ']).trim_end_matches('*');
        if line.is_empty() {
            in_theme = false;
            continue;
        }
        let Some((key, value)) = line.split_once(':') else {
            if in_theme {
                let t = theme_text.get_or_insert_with(String::new);
                t.push(' ');
                t.push_str(line);
            }
            continue;
        };
        let key = key.trim().trim_matches('*').to_ascii_uppercase();
        let value = value.trim().trim_matches('*').trim();
        in_theme = false;
        match key.as_str() {
            "THEME_COLOR" => theme_color = Some(parse_color("theme_color", value)?),
            "PRIMARY_COLOR" => primary_color = Some(parse_color("primary_color", value)?),
            "APP_CATEGORY" => category = Some(value.to_string()),
            "THEME" => {
                theme_text = Some(value.to_string());
                in_theme = true;
            }
            k if k.starts_with("COMPONENT[") && k.ends_with(']') => {
                let index: usize = k["COMPONENT[".len()..k.len() - 1]
                    .trim()
                    .parse()
                    .map_err(|_| ThemeError::Parse(format!("bad component index in `{line}`")))?;
                if index >= components {
                    return Err(ThemeError::Parse(format!(
                        "COMPONENT[{index}] but the layout has {components} components"
                    )));
                }
                let (kind, hint) = value.split_once('|').unwrap_or((value, ""));
                let kind = kind.parse::<PlanKind>().map_err(ThemeError::Parse)?;
                plan[index] = Some(PlanItem {
                    kind,
                    content_hint: hint.trim().to_string(),
                });
            }
            _ => {}
        }
    }

    let missing = |what: &str| ThemeError::Parse(format!("missing {what}"));
    let missing_slots: Vec<String> = plan
        .iter()
        .enumerate()
        .filter(|(_, p)| p.is_none())
        .map(|(i, _)| i.to_string())
        .collect();
    if !missing_slots.is_empty() {
        return Err(ThemeError::Parse(format!(
            "missing COMPONENT lines for index {}",
            missing_slots.join(", ")
        )));
    }
    Ok(ThemeDescription {
        theme_color: theme_color.ok_or_else(|| missing("THEME_COLOR"))?,
        primary_color: primary_color.ok_or_else(|| missing("PRIMARY_COLOR"))?,
        app_category: category.ok_or_else(|| missing("APP_CATEGORY"))?,
        theme_text: theme_text
            .map(|t| one_line(&t))
            .ok_or_else(|| missing("THEME"))?,
        component_plan: plan.into_iter().map(Option::unwrap).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThemePackage {
    pub description: ThemeDescription,
    pub theme_image: RasterImage,
    pub prompt_used: ThemePrompt,
    /// Backend answer the description was parsed from; `None` when the
    /// description was not generated (ablation or edited theme).
    pub raw_description: Option<String>,
}

/// Append-only accumulation of results, seeded with the theme description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachePool {
    entries: Vec<String>,
}

impl CachePool {
    pub fn seeded(seed: impl Into<String>) -> Self {
        CachePool {
            entries: vec![seed.into()],
        }
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `Cache_{t+1}`: the previous cache with `Res_t` folded in.
    pub fn with(&self, result: String) -> CachePool {
        let mut entries = self.entries.clone();
        entries.push(result);
        CachePool { entries }
    }

    pub fn text(&self) -> String {
        self.entries.join("\n")
    }
}

/// One sub-module invocation as issued by the coordinator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubModuleCall {
    pub component_index: usize,
    pub component_type: ComponentType,
    pub module: ModuleId,
    pub bbox: BBox,
    pub template_id: String,
    /// `p_{t+1} = p_sub(bbox) ⊕ Cache_t`
    pub prompt: String,
    /// Number of cache entries folded into `prompt`.
    pub cache_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hint_override: Option<String>,
}

/// Everything a run produced, in layout order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub seed: u64,
    pub retrieval: RetrievalResult,
    pub theme: ThemePackage,
    pub calls: Vec<SubModuleCall>,
    pub results: Vec<ComponentContent>,
    pub backend_call_counts: CallCounts,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl GenerationTrace {
    /// The cache pool as it stood before component `step` ran, rebuilt from
    /// the recorded results.
    pub fn cache_before(&self, layout: &Layout, step: usize) -> CachePool {
        let mut cache = CachePool::seeded(self.theme.description.to_text());
        for (result, component) in self.results.iter().zip(&layout.components).take(step) {
            cache = cache.with(result.cache_entry(component));
        }
        cache
    }

    /// Same generated content, ignoring bookkeeping (call counters).
    pub fn same_content(&self, other: &GenerationTrace) -> bool {
        self.theme == other.theme
            && self.calls == other.calls
            && self.results == other.results
            && self.retrieval == other.retrieval
    }

    pub fn count(&self, kind: CallKind) -> u64 {
        self.backend_call_counts.get(&kind).copied().unwrap_or(0)
    }
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid input: {0}")]
    InvalidInput(#[from] LayoutError),
    #[error("retrieval: {0}")]
    Retrieval(#[from] RetrievalError),
    #[error("retrieved record `{0}` is not in the knowledge base")]
    MissingRecord(String),
    #[error("theme description unparseable after {attempts} attempts: {message}")]
    ThemeParse {
        attempts: usize,
        message: String,
        raw: String,
    },
    #[error("{stage}: {source}")]
    Backend {
        stage: &'static str,
        #[source]
        source: BackendError,
    },
    #[error("component {index}: {source}")]
    Step {
        index: usize,
        #[source]
        source: SubModuleError,
        partial: Box<Option<GenerationTrace>>,
    },
    #[error("component index {index} out of range for {len} components")]
    InvalidIndex { index: usize, len: usize },
    #[error("invalid theme: {0}")]
    InvalidTheme(#[from] ThemeError),
}

impl OrchestratorError {
    /// Pipeline stage the error came from.
    pub fn stage(&self) -> String {
        match self {
            OrchestratorError::InvalidInput(_) => "input".into(),
            OrchestratorError::Retrieval(_) | OrchestratorError::MissingRecord(_) => {
                "retrieval".into()
            }
            OrchestratorError::ThemeParse { .. } => "theme_description".into(),
            OrchestratorError::Backend { stage, .. } => (*stage).into(),
            OrchestratorError::Step { index, .. } => format!("component[{index}]"),
            OrchestratorError::InvalidIndex { .. } => "regeneration".into(),
            OrchestratorError::InvalidTheme(_) => "theme".into(),
        }
    }
}

/// Knowledge records plus the index built over their canonical text.
#[derive(Debug, Clone)]
pub struct Knowledge {
    records: BTreeMap<String, KnowledgeRecord>,
    index: Index,
}

impl Knowledge {
    pub fn new(records: Vec<KnowledgeRecord>, index: Index) -> Self {
        Knowledge {
            records: records.into_iter().map(|r| (r.id.clone(), r)).collect(),
            index,
        }
    }

    pub fn build(
        records: Vec<KnowledgeRecord>,
        embedder: &dyn crate::backends::Embedder,
    ) -> Result<Self, RetrievalError> {
        let index = crate::retrieval::build_knowledge_index(&records, embedder)?;
        Ok(Knowledge::new(records, index))
    }

    pub fn get(&self, id: &str) -> Option<&KnowledgeRecord> {
        self.records.get(id)
    }

    pub fn index(&self) -> &Index {
        &self.index
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// `P = In_p ⊕ In_l ⊕ refer_0 ⊕ … ⊕ P_theme`, with each `refer_i` the
/// canonical text of the i-th hit.
pub fn assemble_theme_prompt(
    input: &DesignInput,
    hits: &RetrievalResult,
    knowledge: &Knowledge,
    templates: &Templates,
) -> Result<ThemePrompt, OrchestratorError> {
    if hits.hits.is_empty() {
        return Err(OrchestratorError::Retrieval(RetrievalError::EmptyIndex));
    }
    let refer = hits
        .hits
        .iter()
        .map(|h| {
            knowledge
                .get(&h.record_id)
                .map(KnowledgeRecord::to_text)
                .ok_or_else(|| OrchestratorError::MissingRecord(h.record_id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(theme_prompt(input, refer, templates))
}

fn theme_prompt(input: &DesignInput, refer: Vec<String>, templates: &Templates) -> ThemePrompt {
    ThemePrompt::from_parts(ThemePromptParts {
        in_p: input.prompt.clone(),
        in_l_serialized: input.layout.to_lines(),
        refer,
        p_theme: templates.render_theme(&input.layout),
    })
}

/// A configured pipeline over shared, immutable knowledge.
pub struct Pipeline<'a> {
    pub backends: &'a Backends,
    pub knowledge: &'a Knowledge,
    pub icons: &'a IconIndex,
    pub config: &'a PipelineConfig,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        backends: &'a Backends,
        knowledge: &'a Knowledge,
        icons: &'a IconIndex,
        config: &'a PipelineConfig,
    ) -> Self {
        Pipeline {
            backends,
            knowledge,
            icons,
            config,
        }
    }

    fn image_size(&self) -> ImageSize {
        ImageSize::square(self.config.image_size)
    }

    /// Phases 1–3: retrieval, theme description, theme image.
    pub fn generate_theme(
        &self,
        input: &DesignInput,
        counts: &mut CallCounts,
        warnings: &mut Vec<String>,
    ) -> Result<(RetrievalResult, ThemePackage), OrchestratorError> {
        input.validate()?;
        let cfg = self.config;

        let hits = if cfg.ablated(Ablation::NoRetrieval) {
            RetrievalResult::default()
        } else if self.knowledge.is_empty() {
            warnings.push("knowledge base is empty; theme prompt has no references".into());
            RetrievalResult::default()
        } else {
            let hits = retrieve_knowledge(
                self.knowledge.index(),
                input,
                self.backends.embed.as_ref(),
                RetrievalConfig { k: cfg.k },
            )?;
            if hits.hits.len() < cfg.k {
                warnings.push(format!(
                    "retrieval returned {} of {} requested references",
                    hits.hits.len(),
                    cfg.k
                ));
            }
            hits
        };
        let prompt = if hits.hits.is_empty() {
            theme_prompt(input, Vec::new(), &cfg.templates)
        } else {
            assemble_theme_prompt(input, &hits, self.knowledge, &cfg.templates)?
        };

        let components = input.layout.components.len();
        let (description, raw) = if cfg.ablated(Ablation::NoThemeDescription) {
            (None, None)
        } else {
            let (d, raw) = self.describe_theme(&prompt.text, components, counts)?;
            (Some(d), Some(raw))
        };

        let theme_image = if cfg.ablated(Ablation::NoThemeImage) {
            None
        } else {
            let image_prompt = description
                .as_ref()
                .map(ThemeDescription::to_text)
                .unwrap_or_else(|| input.prompt.clone());
            Some(self.theme_image(&image_prompt, &input.layout, counts)?)
        };

        let description = description
            .unwrap_or_else(|| ThemeDescription::fallback(input, theme_image.as_ref()));
        let theme_image = theme_image.unwrap_or_else(|| self.solid_theme_image(&description));
        Ok((
            hits,
            ThemePackage {
                description,
                theme_image,
                prompt_used: prompt,
                raw_description: raw,
            },
        ))
    }

    fn describe_theme(
        &self,
        prompt: &str,
        components: usize,
        counts: &mut CallCounts,
    ) -> Result<(ThemeDescription, String), OrchestratorError> {
        let mut request = prompt.to_string();
        let mut last_error = String::new();
        let mut raw = String::new();
        for _ in 0..=THEME_REASKS {
            bump(counts, CallKind::ThemeDescription);
            raw = self
                .backends
                .text
                .generate_text(&TextGenRequest::new(request.clone(), self.config.max_tokens))
                .map_err(|source| OrchestratorError::Backend {
                    stage: "theme_description",
                    source,
                })?;
            match parse_theme_description(&raw, components) {
                Ok(d) => return Ok((d, raw)),
                Err(e) => {
                    log::warn!("theme description rejected: {e}");
                    last_error = e.to_string();
                    request = format!("{prompt}\n{FORMAT_REMINDER}\nProblem: {last_error}");
                }
            }
        }
        Err(OrchestratorError::ThemeParse {
            attempts: THEME_REASKS + 1,
            message: last_error,
            raw,
        })
    }

    fn theme_image(
        &self,
        prompt: &str,
        layout: &Layout,
        counts: &mut CallCounts,
    ) -> Result<RasterImage, OrchestratorError> {
        bump(counts, CallKind::ThemeImage);
        let req = ImageGenRequest {
            prompt: prompt.to_string(),
            layout_condition: Some(layout.clone()),
            init_image: None,
            strength: self.config.strength,
            seed: self.config.seed,
            size: self.image_size(),
        };
        let img = self
            .backends
            .image
            .generate_image(&req)
            .map_err(|source| OrchestratorError::Backend {
                stage: "theme_image",
                source,
            })?;
        if (img.width(), img.height()) != (req.size.width, req.size.height) {
            return Err(OrchestratorError::Backend {
                stage: "theme_image",
                source: BackendError::Protocol(format!(
                    "theme image is {}x{}, requested {}x{}",
                    img.width(),
                    img.height(),
                    req.size.width,
                    req.size.height
                )),
            });
        }
        Ok(img)
    }

    fn solid_theme_image(&self, description: &ThemeDescription) -> RasterImage {
        let size = self.image_size();
        let color = parse_hex(&description.theme_color).unwrap_or([255; 3]);
        RasterImage::filled(size.width, size.height, color)
    }

    /// Builds the sub-module call for component `index` against `cache`.
    pub fn build_call(
        &self,
        cache: &CachePool,
        index: usize,
        component: &LayoutComponent,
        hint_override: Option<&str>,
    ) -> SubModuleCall {
        let module = self.config.effective_module(component.kind);
        let (template_id, _) = self.config.templates.for_module(module);
        let p_sub = self.config.templates.render_sub(module, component.bbox);
        let prompt = match hint_override {
            Some(hint) => format!("{p_sub}\nContent hint: {hint}\n{}", cache.text()),
            None => format!("{p_sub}\n{}", cache.text()),
        };
        SubModuleCall {
            component_index: index,
            component_type: component.kind,
            module,
            bbox: component.bbox,
            template_id: template_id.to_string(),
            prompt,
            cache_len: cache.len(),
            hint_override: hint_override.map(str::to_owned),
        }
    }

    /// Runs one component: build `p_{t+1}`, invoke the dispatched sub-module
    /// and fold its result into the cache.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        cache: &CachePool,
        index: usize,
        component: &LayoutComponent,
        canvas: crate::kb::Canvas,
        theme: &ThemePackage,
        hint_override: Option<&str>,
        counts: &mut CallCounts,
        warnings: &mut Vec<String>,
    ) -> Result<(SubModuleCall, ComponentContent, CachePool), SubModuleError> {
        let call = self.build_call(cache, index, component, hint_override);
        let content = match call.module {
            ModuleId::Text => {
                bump(counts, CallKind::Text);
                text_content(&call, self.backends, self.config.max_tokens)?
            }
            ModuleId::Icon => {
                bump(counts, CallKind::Icon);
                icon_content(&call, self.icons, self.backends, self.config.max_tokens)?
            }
            ModuleId::Image => {
                let planned = theme
                    .description
                    .component_plan
                    .get(index)
                    .map(|p| p.content_hint.as_str())
                    .unwrap_or_default();
                let mut description = hint_override.unwrap_or(planned).trim().to_string();
                if description.is_empty() {
                    warnings.push(format!(
                        "component {index}: empty image hint, using the theme narrative"
                    ));
                    description = theme.description.theme_text.clone();
                }
                if description.trim().is_empty() {
                    description = component.kind.to_string();
                }
                bump(counts, CallKind::Image);
                image_content(
                    &call,
                    &theme.theme_image,
                    canvas,
                    component.bbox,
                    &description,
                    self.backends,
                    ImageParams {
                        strength: self.config.strength,
                        seed: self.config.seed.wrapping_add(index as u64),
                    },
                )?
            }
            ModuleId::ColorFill => {
                color_fill_content(index, component.bbox, &theme.theme_image, canvas)?
            }
        };
        let next = cache.with(content.cache_entry(component));
        Ok((call, content, next))
    }

    /// Sequential left fold of [`Pipeline::step`] over the layout, starting
    /// from a cache seeded with the theme description.
    fn run_components(
        &self,
        input: &DesignInput,
        mut trace: GenerationTrace,
        observer: &mut dyn FnMut(usize, &CachePool),
    ) -> Result<GenerationTrace, OrchestratorError> {
        let mut cache = CachePool::seeded(trace.theme.description.to_text());
        for (index, component) in input.layout.components.iter().enumerate() {
            observer(index, &cache);
            match self.step(
                &cache,
                index,
                component,
                input.layout.canvas,
                &trace.theme,
                None,
                &mut trace.backend_call_counts,
                &mut trace.warnings,
            ) {
                Ok((call, content, next)) => {
                    trace.calls.push(call);
                    trace.results.push(content);
                    cache = next;
                }
                Err(source) => {
                    return Err(OrchestratorError::Step {
                        index,
                        source,
                        partial: Box::new(Some(trace)),
                    })
                }
            }
        }
        observer(input.layout.components.len(), &cache);
        Ok(trace)
    }

    pub fn generate_prototype(&self, input: &DesignInput) -> Result<GenerationTrace, OrchestratorError> {
        self.generate_prototype_observed(input, &mut |_, _| {})
    }

    /// Like [`Pipeline::generate_prototype`], reporting the cache pool before
    /// each step (and once more after the last one).
    pub fn generate_prototype_observed(
        &self,
        input: &DesignInput,
        observer: &mut dyn FnMut(usize, &CachePool),
    ) -> Result<GenerationTrace, OrchestratorError> {
        let mut counts = CallCounts::new();
        let mut warnings = Vec::new();
        let (retrieval, theme) = self.generate_theme(input, &mut counts, &mut warnings)?;
        let trace = GenerationTrace {
            seed: self.config.seed,
            retrieval,
            theme,
            calls: Vec::new(),
            results: Vec::new(),
            backend_call_counts: counts,
            warnings,
        };
        self.run_components(input, trace, observer)
    }

    /// Re-runs only component `index`, against the cache as it stood at that
    /// step. Every other result is left untouched.
    pub fn regenerate_component(
        &self,
        trace: &GenerationTrace,
        input: &DesignInput,
        index: usize,
        edited_hint: Option<&str>,
    ) -> Result<GenerationTrace, OrchestratorError> {
        let len = input.layout.components.len();
        if index >= len || trace.results.len() != len {
            return Err(OrchestratorError::InvalidIndex { index, len });
        }
        let planned = trace
            .theme
            .description
            .component_plan
            .get(index)
            .map(|p| p.content_hint.as_str());
        // an unchanged hint is not an override
        let hint = edited_hint.filter(|h| Some(*h) != planned);
        let cache = trace.cache_before(&input.layout, index);
        let mut next = trace.clone();
        let (call, content, _) = self
            .step(
                &cache,
                index,
                &input.layout.components[index],
                input.layout.canvas,
                &trace.theme,
                hint,
                &mut next.backend_call_counts,
                &mut next.warnings,
            )
            .map_err(|source| OrchestratorError::Step {
                index,
                source,
                partial: Box::new(None),
            })?;
        next.calls[index] = call;
        next.results[index] = content;
        Ok(next)
    }

    /// Regenerates the theme image and every component from an edited theme
    /// description. The description itself is not regenerated.
    pub fn regenerate_all(
        &self,
        trace: &GenerationTrace,
        input: &DesignInput,
        edited_theme: &ThemeDescription,
    ) -> Result<GenerationTrace, OrchestratorError> {
        input.validate()?;
        edited_theme.validate(input.layout.components.len())?;
        let mut counts = trace.backend_call_counts.clone();
        let theme_image = if self.config.ablated(Ablation::NoThemeImage) {
            self.solid_theme_image(edited_theme)
        } else {
            self.theme_image(&edited_theme.to_text(), &input.layout, &mut counts)?
        };
        let unchanged = *edited_theme == trace.theme.description;
        let next = GenerationTrace {
            seed: self.config.seed,
            retrieval: trace.retrieval.clone(),
            theme: ThemePackage {
                description: edited_theme.clone(),
                theme_image,
                prompt_used: trace.theme.prompt_used.clone(),
                raw_description: if unchanged {
                    trace.theme.raw_description.clone()
                } else {
                    None
                },
            },
            calls: Vec::new(),
            results: Vec::new(),
            backend_call_counts: counts,
            warnings: trace.warnings.clone(),
        };
        self.run_components(input, next, &mut |_, _| {})
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::MockEmbedder;
    use crate::kb::{sample_icon_base, sample_knowledge_base, Canvas};
    use crate::retrieval::Hit;
    use crate::submodules::Payload;

    fn layout(types: &[ComponentType]) -> Layout {
        Layout {
            canvas: Canvas {
                width: 360,
                height: 640,
            },
            components: types
                .iter()
                .enumerate()
                .map(|(i, t)| LayoutComponent {
                    kind: *t,
                    bbox: BBox::new(10, 10 + 60 * i as u32, 200, 50),
                })
                .collect(),
        }
    }

    fn input(types: &[ComponentType]) -> DesignInput {
        DesignInput {
            prompt: "A music streaming app home page".into(),
            layout: layout(types),
        }
    }

    struct World {
        backends: Backends,
        knowledge: Knowledge,
        icons: IconIndex,
    }

    fn world() -> World {
        let backends = Backends::mock();
        let knowledge = Knowledge::build(sample_knowledge_base(), &MockEmbedder::default()).unwrap();
        let icons = IconIndex::build(sample_icon_base(), &MockEmbedder::default()).unwrap();
        World {
            backends,
            knowledge,
            icons,
        }
    }

    use ComponentType::*;

    #[test]
    fn dispatch_table() {
        assert_eq!(dispatch(TextButton), ModuleId::Text);
        assert_eq!(dispatch(Text), ModuleId::Text);
        assert_eq!(dispatch(BackgroundImage), ModuleId::Image);
        assert_eq!(dispatch(Image), ModuleId::Image);
        assert_eq!(dispatch(Icon), ModuleId::Icon);
        assert_eq!(dispatch(Toolbar), ModuleId::ColorFill);
        let fills = ComponentType::ALL
            .iter()
            .filter(|t| dispatch(**t) == ModuleId::ColorFill)
            .count();
        assert_eq!(fills, 8);
    }

    #[test]
    fn theme_prompt_part_order() {
        let w = world();
        let inp = DesignInput {
            prompt: "p".into(),
            layout: layout(&[Text]),
        };
        let ids = ["music_player", "login_social"];
        let hits = RetrievalResult {
            hits: ids
                .iter()
                .map(|id| Hit {
                    record_id: id.to_string(),
                    score: 0.5,
                })
                .collect(),
        };
        let templates = Templates::default();
        let p = assemble_theme_prompt(&inp, &hits, &w.knowledge, &templates).unwrap();
        let refer0 = w.knowledge.get(ids[0]).unwrap().to_text();
        let refer1 = w.knowledge.get(ids[1]).unwrap().to_text();
        let parts = [
            "p",
            "Text [10,10,200,50]",
            refer0.as_str(),
            refer1.as_str(),
            p.parts.p_theme.as_str(),
        ];
        assert_eq!(p.text, parts.join("\n"));
        let mut last = None;
        for part in parts {
            let pos = p.text.find(part).unwrap();
            if let Some(prev) = last {
                assert!(pos > prev);
            }
            last = Some(pos);
        }

        let one = RetrievalResult {
            hits: hits.hits[..1].to_vec(),
        };
        let p1 = assemble_theme_prompt(&inp, &one, &w.knowledge, &templates).unwrap();
        assert_eq!(p1.parts.refer.len(), 1);
        assert!(!p1.text.contains(&refer1));

        let missing = RetrievalResult {
            hits: vec![Hit {
                record_id: "nope".into(),
                score: 1.0,
            }],
        };
        assert!(matches!(
            assemble_theme_prompt(&inp, &missing, &w.knowledge, &templates),
            Err(OrchestratorError::MissingRecord(_))
        ));
    }

    #[test]
    fn theme_description_round_trips_through_text() {
        let d = ThemeDescription {
            theme_color: "#112233".into(),
            primary_color: "#abcdef".into(),
            app_category: "music".into(),
            theme_text: "dark and moody".into(),
            component_plan: vec![
                PlanItem {
                    kind: PlanKind::Text,
                    content_hint: "song title".into(),
                },
                PlanItem {
                    kind: PlanKind::Image,
                    content_hint: "album | cover".into(),
                },
            ],
        };
        assert_eq!(parse_theme_description(&d.to_text(), 2).unwrap(), d);
    }

    #[test]
    fn theme_parser_tolerates_noise_and_rejects_gaps() {
        let text = "Sure! Here it is.\n**THEME_COLOR:** #FFAA00\nprimary_color: #000000\n- APP_CATEGORY: news\nTHEME: bold\ncontinued here\n\nCOMPONENT[1]: icon | bell\nCOMPONENT[0]: text | headline\n";
        let d = parse_theme_description(text, 2).unwrap();
        assert_eq!(d.theme_color, "#ffaa00");
        assert_eq!(d.theme_text, "bold continued here");
        assert_eq!(d.component_plan[1].kind, PlanKind::Icon);

        assert!(parse_theme_description(text, 3).is_err());
        assert!(parse_theme_description("THEME_COLOR: red", 0).is_err());
        let extra = format!("{text}COMPONENT[5]: text | x");
        assert!(parse_theme_description(&extra, 2).is_err());
    }

    #[test]
    fn generate_theme_with_mocks() {
        let w = world();
        let config = PipelineConfig::default();
        let p = Pipeline::new(&w.backends, &w.knowledge, &w.icons, &config);
        let inp = input(&[Text, Image, Icon, Toolbar, Text]);
        let mut counts = CallCounts::new();
        let mut warnings = Vec::new();
        let (hits, theme) = p.generate_theme(&inp, &mut counts, &mut warnings).unwrap();
        assert_eq!(hits.hits.len(), 2);
        assert_eq!(theme.description.component_plan.len(), 5);
        assert_eq!((theme.theme_image.width(), theme.theme_image.height()), (512, 512));
        assert_eq!(counts.get(&CallKind::ThemeDescription), Some(&1));
        assert_eq!(counts.get(&CallKind::ThemeImage), Some(&1));
        assert_eq!(counts.len(), 2);
        // the mock follows the top reference's colors
        let top = w.knowledge.get(&hits.hits[0].record_id).unwrap();
        assert_eq!(theme.description.theme_color, top.theme_attrs.theme_color);

        let (_, again) = p
            .generate_theme(&inp, &mut CallCounts::new(), &mut Vec::new())
            .unwrap();
        assert_eq!(theme, again);
    }

    struct Garbage;
    impl crate::backends::TextGenerator for Garbage {
        fn generate_text(&self, _: &TextGenRequest) -> Result<String, BackendError> {
            Ok("I cannot help with that.".into())
        }
    }

    #[test]
    fn unparseable_theme_is_reasked_twice_then_fails() {
        let mut w = world();
        w.backends.text = std::sync::Arc::new(Garbage);
        let config = PipelineConfig::default();
        let p = Pipeline::new(&w.backends, &w.knowledge, &w.icons, &config);
        let mut counts = CallCounts::new();
        let err = p
            .generate_theme(&input(&[Text]), &mut counts, &mut Vec::new())
            .unwrap_err();
        match err {
            OrchestratorError::ThemeParse { attempts, raw, .. } => {
                assert_eq!(attempts, 3);
                assert_eq!(raw, "I cannot help with that.");
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(counts.get(&CallKind::ThemeDescription), Some(&3));
    }

    #[test]
    fn prototype_call_accounting() {
        let w = world();
        let config = PipelineConfig::default();
        let p = Pipeline::new(&w.backends, &w.knowledge, &w.icons, &config);
        let inp = input(&[Text, Text, Image, Icon, Toolbar]);
        let trace = p.generate_prototype(&inp).unwrap();
        assert_eq!(trace.count(CallKind::ThemeDescription), 1);
        assert_eq!(trace.count(CallKind::ThemeImage), 1);
        assert_eq!(trace.count(CallKind::Text), 2);
        assert_eq!(trace.count(CallKind::Image), 1);
        assert_eq!(trace.count(CallKind::Icon), 1);
        let kinds: Vec<_> = trace.results.iter().map(ComponentContent::kind).collect();
        assert_eq!(
            kinds,
            [
                ModuleId::Text,
                ModuleId::Text,
                ModuleId::Image,
                ModuleId::Icon,
                ModuleId::ColorFill
            ]
        );
        assert_eq!(trace, p.generate_prototype(&inp).unwrap());
    }

    #[test]
    fn cache_grows_by_one_result_per_step() {
        let w = world();
        let config = PipelineConfig::default();
        let p = Pipeline::new(&w.backends, &w.knowledge, &w.icons, &config);
        let inp = input(&[Text, Icon, Text]);
        let mut seen = Vec::new();
        let trace = p
            .generate_prototype_observed(&inp, &mut |t, cache| seen.push((t, cache.clone())))
            .unwrap();
        assert_eq!(seen.len(), 4);
        for (t, cache) in &seen {
            assert_eq!(cache.len(), t + 1);
            assert_eq!(*cache, trace.cache_before(&inp.layout, *t));
        }
        let first = &trace.calls[0];
        assert!(first.prompt.contains(&trace.theme.description.to_text()));
        assert!(first.prompt.starts_with(&config.templates.render_sub(ModuleId::Text, inp.layout.components[0].bbox)));
        let third = &trace.calls[2].prompt;
        assert!(third.contains(&trace.results[0].cache_entry(&inp.layout.components[0])));
        assert!(third.contains(&trace.results[1].cache_entry(&inp.layout.components[1])));
    }

    #[test]
    fn color_fill_makes_no_backend_calls() {
        let w = world();
        let config = PipelineConfig::default();
        let p = Pipeline::new(&w.backends, &w.knowledge, &w.icons, &config);
        let trace = p.generate_prototype(&input(&[Toolbar, Card])).unwrap();
        assert_eq!(trace.count(CallKind::Text), 0);
        assert_eq!(trace.count(CallKind::Image), 0);
        assert_eq!(trace.count(CallKind::Icon), 0);
    }

    #[test]
    fn scoped_regeneration() {
        let w = world();
        let config = PipelineConfig::default();
        let p = Pipeline::new(&w.backends, &w.knowledge, &w.icons, &config);
        let inp = input(&[Text, Image, Icon]);
        let trace = p.generate_prototype(&inp).unwrap();

        let same = p.regenerate_component(&trace, &inp, 1, None).unwrap();
        assert_eq!(same.results, trace.results);
        assert_eq!(same.count(CallKind::Image), trace.count(CallKind::Image) + 1);
        assert_eq!(same.count(CallKind::Text), trace.count(CallKind::Text));

        let edited = p
            .regenerate_component(&trace, &inp, 1, Some("a red sports car"))
            .unwrap();
        assert_ne!(edited.results[1], trace.results[1]);
        assert_eq!(edited.results[0], trace.results[0]);
        assert_eq!(edited.results[2], trace.results[2]);
        match &edited.results[1].payload {
            Payload::Image { prompt_used, .. } => assert_eq!(prompt_used, "a red sports car"),
            other => panic!("unexpected {other:?}"),
        }

        let text = p
            .regenerate_component(&trace, &inp, 0, Some("a bold greeting"))
            .unwrap();
        assert_ne!(text.results[0], trace.results[0]);
        assert_eq!(text.count(CallKind::Text), trace.count(CallKind::Text) + 1);

        assert!(matches!(
            p.regenerate_component(&trace, &inp, 9, None),
            Err(OrchestratorError::InvalidIndex { index: 9, len: 3 })
        ));
    }

    #[test]
    fn full_regeneration_from_edited_theme() {
        let w = world();
        let config = PipelineConfig::default();
        let p = Pipeline::new(&w.backends, &w.knowledge, &w.icons, &config);
        let inp = input(&[Text, Image, Icon, Toolbar]);
        let trace = p.generate_prototype(&inp).unwrap();

        let same = p.regenerate_all(&trace, &inp, &trace.theme.description).unwrap();
        assert!(same.same_content(&trace));

        let mut edited = trace.theme.description.clone();
        edited.theme_color = "#123456".into();
        let next = p.regenerate_all(&trace, &inp, &edited).unwrap();
        assert_eq!(next.theme.description, edited);
        assert_eq!(
            next.count(CallKind::ThemeDescription),
            trace.count(CallKind::ThemeDescription)
        );
        for kind in [CallKind::ThemeImage, CallKind::Text, CallKind::Image, CallKind::Icon] {
            assert_eq!(next.count(kind), 2 * trace.count(kind), "{kind:?}");
        }
        assert_ne!(next.results[0], trace.results[0]);

        let mut short = edited.clone();
        short.component_plan.pop();
        assert!(matches!(
            p.regenerate_all(&trace, &inp, &short),
            Err(OrchestratorError::InvalidTheme(ThemeError::PlanMismatch { .. }))
        ));
        let mut bad = edited;
        bad.primary_color = "blue".into();
        assert!(p.regenerate_all(&trace, &inp, &bad).is_err());
    }

    #[test]
    fn ablations_reroute_modules() {
        let w = world();
        let inp = input(&[Text, Image, Icon, Toolbar]);
        for (flag, kind) in [
            (Ablation::NoTextModule, ModuleId::Text),
            (Ablation::NoImageModule, ModuleId::Image),
            (Ablation::NoIconModule, ModuleId::Icon),
        ] {
            let config = PipelineConfig {
                ablations: vec![flag],
                ..PipelineConfig::default()
            };
            let p = Pipeline::new(&w.backends, &w.knowledge, &w.icons, &config);
            let trace = p.generate_prototype(&inp).unwrap();
            assert!(trace.results.iter().all(|r| r.kind() != kind), "{flag}");
        }

        let config = PipelineConfig {
            ablations: vec![Ablation::NoRetrieval, Ablation::NoThemeDescription],
            ..PipelineConfig::default()
        };
        let p = Pipeline::new(&w.backends, &w.knowledge, &w.icons, &config);
        let trace = p.generate_prototype(&inp).unwrap();
        assert!(trace.retrieval.hits.is_empty());
        assert!(trace.theme.prompt_used.parts.refer.is_empty());
        assert_eq!(trace.count(CallKind::ThemeDescription), 0);
        assert!(trace.theme.description.validate(4).is_ok());

        let config = PipelineConfig {
            ablations: vec![Ablation::NoThemeImage],
            ..PipelineConfig::default()
        };
        let p = Pipeline::new(&w.backends, &w.knowledge, &w.icons, &config);
        let trace = p.generate_prototype(&inp).unwrap();
        assert_eq!(trace.count(CallKind::ThemeImage), 0);
        assert_eq!(
            trace.results[3].payload,
            Payload::ColorFill {
                fill: trace.theme.description.theme_color.clone()
            }
        );
    }

    #[test]
    fn ablation_flags_parse() {
        for a in Ablation::ALL {
            assert_eq!(a.as_str().parse::<Ablation>().unwrap(), a);
        }
        assert!("no_everything".parse::<Ablation>().is_err());
    }

    #[test]
    fn invalid_inputs() {
        let w = world();
        let config = PipelineConfig::default();
        let p = Pipeline::new(&w.backends, &w.knowledge, &w.icons, &config);
        let mut inp = input(&[Text]);
        inp.prompt = " ".into();
        assert!(matches!(
            p.generate_prototype(&inp),
            Err(OrchestratorError::InvalidInput(_))
        ));
        assert!(p.generate_prototype(&input(&[])).is_err());
        let mut inp = input(&[Text]);
        inp.layout.components[0].bbox = BBox::new(300, 0, 100, 10);
        let err = p.generate_prototype(&inp).unwrap_err();
        match err {
            OrchestratorError::InvalidInput(e) => assert_eq!(e.component, Some(0)),
            other => panic!("unexpected {other:?}"),
        }
    }
}
