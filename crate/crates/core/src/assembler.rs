//! Final prototype assembly: SVG composition, project export and the
//! dominant-color histogram used by color-fill components.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{to_hex, ImageError, RasterImage, Rgb};
use crate::kb::{BBox, LayoutComponent};
use crate::orchestrator::{DesignInput, ThemeDescription, ThemeError};
use crate::submodules::{ComponentContent, Payload};

pub const EXPORT_VERSION: &str = "protoflow-project/1";
pub const FILL_CORNER_RADIUS: u32 = 4;
pub const MIN_FONT_SIZE: f64 = 8.0;
pub const MAX_FONT_SIZE: f64 = 72.0;
pub const FONT_SIZE_RATIO: f64 = 0.6;

#[derive(Debug, Error)]
pub enum AssemblyError {
    #[error("{contents} contents for {components} layout components")]
    Misaligned { components: usize, contents: usize },
    #[error("content {position} is tagged with component index {found}")]
    WrongIndex { position: usize, found: usize },
    #[error("theme: {0}")]
    Theme(#[from] ThemeError),
    #[error("image for component {index}: {source}")]
    Image {
        index: usize,
        #[source]
        source: ImageError,
    },
    #[error("icon `{id}` is not a usable svg: {message}")]
    Icon { id: String, message: String },
    #[error("unsupported export version `{0}`")]
    Version(String),
    #[error("malformed project document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("svg does not parse: {0}")]
    Svg(String),
}

const BUCKETS: usize = 16 * 16 * 16;

fn bucket(c: Rgb) -> usize {
    ((c[0] as usize >> 4) << 8) | ((c[1] as usize >> 4) << 4) | (c[2] as usize >> 4)
}

/// Bucket means ordered by population (descending), ties by bucket index.
pub fn ranked_colors(region: &RasterImage, n: usize) -> Vec<Rgb> {
    let mut count = vec![0u64; BUCKETS];
    let mut sum = vec![[0u64; 3]; BUCKETS];
    for &p in region.pixels() {
        let b = bucket(p);
        count[b] += 1;
        for ch in 0..3 {
            sum[b][ch] += p[ch] as u64;
        }
    }
    let mut order: Vec<usize> = (0..BUCKETS).filter(|&b| count[b] > 0).collect();
    order.sort_by(|&a, &b| count[b].cmp(&count[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(n)
        .map(|b| {
            let c = count[b];
            // rounded mean
            let mean = |ch: usize| ((2 * sum[b][ch] + c) / (2 * c)) as u8;
            [mean(0), mean(1), mean(2)]
        })
        .collect()
}

/// Mean color of the most populated 16-level-per-channel bucket.
pub fn dominant_color(region: &RasterImage) -> String {
    ranked_colors(region, 1)
        .first()
        .map(|c| to_hex(*c))
        .unwrap_or_else(|| "#000000".to_string())
}

pub fn font_size(bbox: BBox) -> f64 {
    (bbox.h as f64 * FONT_SIZE_RATIO).clamp(MIN_FONT_SIZE, MAX_FONT_SIZE)
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c if (c as u32) < 0x20 && !matches!(c, '\t' | '\n' | '\r') => {}
            c => out.push(c),
        }
    }
    out
}

fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v:.2}")
    }
}

struct IconParts {
    view_box: String,
    inner: String,
}

fn icon_parts(id: &str, svg: &str) -> Result<IconParts, AssemblyError> {
    let err = |message: String| AssemblyError::Icon {
        id: id.to_string(),
        message,
    };
    let doc = roxmltree::Document::parse(svg).map_err(|e| err(e.to_string()))?;
    let root = doc.root_element();
    if root.tag_name().name() != "svg" {
        return Err(err(format!("root element is <{}>", root.tag_name().name())));
    }
    let view_box = match root.attribute("viewBox") {
        Some(v) => v.to_string(),
        None => {
            let dim = |name| {
                root.attribute(name)
                    .and_then(|v: &str| v.trim_end_matches("px").parse::<f64>().ok())
                    .unwrap_or(24.0)
            };
            format!("0 0 {} {}", fmt_num(dim("width")), fmt_num(dim("height")))
        }
    };
    let inner = match (root.first_child(), root.last_child()) {
        (Some(first), Some(last)) => svg[first.range().start..last.range().end].to_string(),
        _ => String::new(),
    };
    Ok(IconParts { view_box, inner })
}

fn check_alignment(
    input: &DesignInput,
    contents: &[ComponentContent],
) -> Result<(), AssemblyError> {
    if contents.len() != input.layout.components.len() {
        return Err(AssemblyError::Misaligned {
            components: input.layout.components.len(),
            contents: contents.len(),
        });
    }
    for (position, c) in contents.iter().enumerate() {
        if c.component_index != position {
            return Err(AssemblyError::WrongIndex {
                position,
                found: c.component_index,
            });
        }
    }
    Ok(())
}

fn component_group(
    out: &mut String,
    index: usize,
    component: &LayoutComponent,
    content: &ComponentContent,
    theme: &ThemeDescription,
) -> Result<(), AssemblyError> {
    let b = component.bbox;
    let kind = content.kind();
    let common = format!(r#"data-kind="{kind}" data-index="{index}""#);
    let _ = writeln!(
        out,
        r#"  <g id="cmp-{index}" {common} data-type="{}" data-x="{}" data-y="{}" data-width="{}" data-height="{}">"#,
        component.kind, b.x, b.y, b.w, b.h
    );
    match &content.payload {
        Payload::Text { text } => {
            let _ = writeln!(
                out,
                r#"    <text {common} x="{}" y="{}" font-size="{}" font-family="sans-serif" dominant-baseline="central" fill="{}">{}</text>"#,
                b.x,
                fmt_num(b.y as f64 + b.h as f64 / 2.0),
                fmt_num(font_size(b)),
                theme.primary_color,
                escape(text)
            );
        }
        Payload::Image { image, .. } => {
            let data = image
                .to_png_base64()
                .map_err(|source| AssemblyError::Image { index, source })?;
            let _ = writeln!(
                out,
                r#"    <image {common} x="{}" y="{}" width="{}" height="{}" preserveAspectRatio="none" xlink:href="data:image/png;base64,{data}"/>"#,
                b.x, b.y, b.w, b.h
            );
        }
        Payload::Icon { icon_id, svg, .. } => {
            let parts = icon_parts(icon_id, svg)?;
            let _ = writeln!(
                out,
                r#"    <svg {common} data-icon="{}" x="{}" y="{}" width="{}" height="{}" viewBox="{}" preserveAspectRatio="xMidYMid meet" fill="{}">{}</svg>"#,
                escape(icon_id),
                b.x,
                b.y,
                b.w,
                b.h,
                escape(&parts.view_box),
                theme.primary_color,
                parts.inner
            );
        }
        Payload::ColorFill { fill } => {
            let _ = writeln!(
                out,
                r#"    <rect {common} x="{}" y="{}" width="{}" height="{}" rx="{FILL_CORNER_RADIUS}" ry="{FILL_CORNER_RADIUS}" fill="{}"/>"#,
                b.x,
                b.y,
                b.w,
                b.h,
                escape(fill)
            );
        }
    }
    out.push_str("  </g>\n");
    Ok(())
}

/// Composes the prototype SVG: a theme-colored background, then one group per
/// component in layout order.
pub fn assemble_svg(
    input: &DesignInput,
    theme: &ThemeDescription,
    contents: &[ComponentContent],
) -> Result<String, AssemblyError> {
    check_alignment(input, contents)?;
    theme.validate(input.layout.components.len())?;
    let (w, h) = (input.layout.canvas.width, input.layout.canvas.height);
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" xmlns:xlink="http://www.w3.org/1999/xlink" version="1.1" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(
        out,
        r#"  <rect id="background" x="0" y="0" width="{w}" height="{h}" fill="{}"/>"#,
        theme.theme_color
    );
    for (index, (component, content)) in input.layout.components.iter().zip(contents).enumerate() {
        component_group(&mut out, index, component, content, theme)?;
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Geometry recorded on a component group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SvgGroup {
    pub id: String,
    pub kind: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SvgSummary {
    pub view_box: String,
    pub groups: Vec<SvgGroup>,
}

/// Parses an assembled SVG and reads back its root viewBox and component
/// groups in document order.
pub fn inspect_svg(svg: &str) -> Result<SvgSummary, AssemblyError> {
    let doc = roxmltree::Document::parse(svg).map_err(|e| AssemblyError::Svg(e.to_string()))?;
    let root = doc.root_element();
    let view_box = root
        .attribute("viewBox")
        .ok_or_else(|| AssemblyError::Svg("root has no viewBox".into()))?
        .to_string();
    let mut groups = Vec::new();
    for g in root.children().filter(|n| n.has_tag_name("g")) {
        let id = g.attribute("id").unwrap_or_default().to_string();
        let num = |name: &str| -> Result<u32, AssemblyError> {
            g.attribute(name)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| AssemblyError::Svg(format!("group `{id}` lacks {name}")))
        };
        let bbox = BBox::new(
            num("data-x")?,
            num("data-y")?,
            num("data-width")?,
            num("data-height")?,
        );
        groups.push(SvgGroup {
            kind: g.attribute("data-kind").unwrap_or_default().to_string(),
            id,
            bbox,
        });
    }
    Ok(SvgSummary { view_box, groups })
}

/// An assembled, editable prototype.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub input: DesignInput,
    pub theme: ThemeDescription,
    pub contents: Vec<ComponentContent>,
    pub svg: String,
    pub export_version: String,
}

impl Prototype {
    pub fn assemble(
        input: DesignInput,
        theme: ThemeDescription,
        contents: Vec<ComponentContent>,
    ) -> Result<Prototype, AssemblyError> {
        let svg = assemble_svg(&input, &theme, &contents)?;
        Ok(Prototype {
            input,
            theme,
            contents,
            svg,
            export_version: EXPORT_VERSION.to_string(),
        })
    }

    pub fn from_trace(
        input: &DesignInput,
        trace: &crate::orchestrator::GenerationTrace,
    ) -> Result<Prototype, AssemblyError> {
        Prototype::assemble(
            input.clone(),
            trace.theme.description.clone(),
            trace.results.clone(),
        )
    }
}

/// Project export document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectDocument {
    pub version: String,
    pub input: DesignInput,
    pub theme: ThemeDescription,
    pub contents: Vec<ComponentContent>,
    pub svg: String,
}

pub fn export_project(prototype: &Prototype) -> ProjectDocument {
    ProjectDocument {
        version: prototype.export_version.clone(),
        input: prototype.input.clone(),
        theme: prototype.theme.clone(),
        contents: prototype.contents.clone(),
        svg: prototype.svg.clone(),
    }
}

pub fn export_project_json(prototype: &Prototype) -> Result<String, AssemblyError> {
    Ok(serde_json::to_string_pretty(&export_project(prototype))?)
}

pub fn import_project(doc: ProjectDocument) -> Result<Prototype, AssemblyError> {
    if doc.version != EXPORT_VERSION {
        return Err(AssemblyError::Version(doc.version));
    }
    check_alignment(&doc.input, &doc.contents)?;
    doc.theme.validate(doc.input.layout.components.len())?;
    inspect_svg(&doc.svg)?;
    Ok(Prototype {
        input: doc.input,
        theme: doc.theme,
        contents: doc.contents,
        svg: doc.svg,
        export_version: doc.version,
    })
}

pub fn import_project_json(json: &str) -> Result<Prototype, AssemblyError> {
    import_project(serde_json::from_str(json)?)
}
