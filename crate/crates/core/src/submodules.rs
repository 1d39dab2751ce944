//! Content generators invoked once per layout component.
//!
//! Sub-modules never see the cache pool or each other's output directly: the
//! orchestrator hands each one a [`SubModuleCall`] whose prompt already folds
//! in the accumulated cache.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembler::dominant_color;
use crate::backends::{BackendError, Backends, ImageGenRequest, ImageSize, TextGenRequest};
use crate::image::{ImageError, RasterImage};
use crate::kb::{BBox, Canvas, LayoutComponent};
use crate::orchestrator::{ModuleId, SubModuleCall};
use crate::retrieval::{retrieve_icon, IconIndex, RetrievalError};

#[derive(Debug, Error)]
pub enum SubModuleError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("icon retrieval: {0}")]
    Retrieval(#[from] RetrievalError),
    #[error("crop: {0}")]
    Crop(#[from] ImageError),
    #[error("component box {bbox} scales to less than one pixel on the {width}x{height} theme image")]
    DegenerateCrop { bbox: BBox, width: u32, height: u32 },
    #[error("icon phrase is empty after sanitizing `{0}`")]
    EmptyPhrase(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Text {
        text: String,
    },
    Image {
        image: RasterImage,
        prompt_used: String,
    },
    Icon {
        icon_id: String,
        svg: String,
        phrase: String,
    },
    ColorFill {
        fill: String,
    },
}

/// One sub-module result (`Res_t`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentContent {
    pub component_index: usize,
    #[serde(flatten)]
    pub payload: Payload,
}

impl ComponentContent {
    pub fn kind(&self) -> ModuleId {
        match self.payload {
            Payload::Text { .. } => ModuleId::Text,
            Payload::Image { .. } => ModuleId::Image,
            Payload::Icon { .. } => ModuleId::Icon,
            Payload::ColorFill { .. } => ModuleId::ColorFill,
        }
    }

    /// The string this result contributes to the cache pool.
    pub fn cache_entry(&self, component: &LayoutComponent) -> String {
        let summary = match &self.payload {
            Payload::Text { text } => format!("text: {text}"),
            Payload::Image { prompt_used, .. } => format!("image: {prompt_used}"),
            Payload::Icon { phrase, icon_id, .. } => format!("icon: {phrase} ({icon_id})"),
            Payload::ColorFill { fill } => format!("fill: {fill}"),
        };
        format!(
            "COMPONENT[{}] {} {}: {}",
            self.component_index, component.kind, component.bbox, summary
        )
    }
}

/// Text module: a one-line text recommendation for the component.
pub fn text_content(
    call: &SubModuleCall,
    backends: &Backends,
    max_tokens: u32,
) -> Result<ComponentContent, SubModuleError> {
    let raw = backends
        .text
        .generate_text(&TextGenRequest::new(call.prompt.clone(), max_tokens))?;
    let text = first_line(&raw).ok_or(BackendError::EmptyCompletion)?;
    Ok(ComponentContent {
        component_index: call.component_index,
        payload: Payload::Text { text },
    })
}

fn first_line(s: &str) -> Option<String> {
    s.lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .map(str::to_owned)
}

/// Maps a canvas box onto the theme image.
pub fn theme_region(
    bbox: BBox,
    canvas: Canvas,
    theme_image: &RasterImage,
) -> Result<BBox, SubModuleError> {
    bbox.scale_to(canvas, theme_image.width(), theme_image.height())
        .ok_or(SubModuleError::DegenerateCrop {
            bbox,
            width: theme_image.width(),
            height: theme_image.height(),
        })
}

pub fn crop_theme_region(
    bbox: BBox,
    canvas: Canvas,
    theme_image: &RasterImage,
) -> Result<RasterImage, SubModuleError> {
    let r = theme_region(bbox, canvas, theme_image)?;
    Ok(theme_image.crop(r.x, r.y, r.w, r.h)?)
}

/// Parameters the image module takes from the pipeline configuration.
#[derive(Debug, Clone, Copy)]
pub struct ImageParams {
    pub strength: f64,
    pub seed: u64,
}

/// Image module: img2img from the component's crop of the theme image,
/// prompted with the component's content description. No layout condition.
pub fn image_content(
    call: &SubModuleCall,
    theme_image: &RasterImage,
    canvas: Canvas,
    bbox: BBox,
    description: &str,
    backends: &Backends,
    params: ImageParams,
) -> Result<ComponentContent, SubModuleError> {
    let init = crop_theme_region(bbox, canvas, theme_image)?;
    let req = ImageGenRequest {
        prompt: description.to_string(),
        layout_condition: None,
        size: ImageSize {
            width: init.width(),
            height: init.height(),
        },
        init_image: Some(init),
        strength: params.strength,
        seed: params.seed,
    };
    let image = backends.image.generate_image(&req)?;
    if (image.width(), image.height()) != (req.size.width, req.size.height) {
        return Err(BackendError::Protocol(format!(
            "image backend returned {}x{}, requested {}x{}",
            image.width(),
            image.height(),
            req.size.width,
            req.size.height
        ))
        .into());
    }
    Ok(ComponentContent {
        component_index: call.component_index,
        payload: Payload::Image {
            image,
            prompt_used: req.prompt,
        },
    })
}

/// Lowercase, drop punctuation, keep at most six words. Word-joining
/// punctuation (`-`, `_`, `/`) becomes a space.
pub fn sanitize_phrase(raw: &str) -> String {
    let cleaned: String = raw
        .chars()
        .filter_map(|c| match c {
            '-' | '_' | '/' => Some(' '),
            c if c.is_alphanumeric() || c.is_whitespace() => Some(c),
            _ => None,
        })
        .flat_map(char::to_lowercase)
        .collect();
    cleaned
        .split_whitespace()
        .take(6)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Icon module: ask for an indicative phrase, then retrieve the closest icon.
pub fn icon_content(
    call: &SubModuleCall,
    icons: &IconIndex,
    backends: &Backends,
    max_tokens: u32,
) -> Result<ComponentContent, SubModuleError> {
    if icons.index().is_empty() {
        return Err(RetrievalError::EmptyIndex.into());
    }
    let raw = backends
        .text
        .generate_text(&TextGenRequest::new(call.prompt.clone(), max_tokens))?;
    let line = first_line(&raw).ok_or(BackendError::EmptyCompletion)?;
    let phrase = sanitize_phrase(&line);
    if phrase.is_empty() {
        return Err(SubModuleError::EmptyPhrase(line));
    }
    let (icon, _) = retrieve_icon(icons, &phrase, backends.embed.as_ref())?;
    Ok(ComponentContent {
        component_index: call.component_index,
        payload: Payload::Icon {
            icon_id: icon.id.clone(),
            svg: icon.svg_source.clone(),
            phrase,
        },
    })
}

/// Fallback for components without a dedicated module: the dominant color of
/// the component's region of the theme image.
pub fn color_fill_content(
    component_index: usize,
    bbox: BBox,
    theme_image: &RasterImage,
    canvas: Canvas,
) -> Result<ComponentContent, SubModuleError> {
    let region = crop_theme_region(bbox, canvas, theme_image)?;
    Ok(ComponentContent {
        component_index,
        payload: Payload::ColorFill {
            fill: dominant_color(&region),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{digest16, mock_background, mock_component_color, Embedder, MockEmbedder};
    use crate::image::to_hex;
    use crate::kb::{ComponentType, IconRecord, Layout};

    fn call(index: usize, prompt: &str) -> SubModuleCall {
        SubModuleCall {
            component_index: index,
            component_type: ComponentType::Text,
            module: ModuleId::Text,
            bbox: BBox::new(10, 20, 100, 40),
            template_id: "p_text".into(),
            prompt: prompt.into(),
            cache_len: 1,
            hint_override: None,
        }
    }

    #[test]
    fn text_module_uses_the_call_prompt() {
        let c = text_content(&call(0, "some prompt"), &Backends::mock(), 64).unwrap();
        assert_eq!(
            c.payload,
            Payload::Text {
                text: format!("MOCK:{}", digest16("some prompt"))
            }
        );
    }

    struct Multiline;
    impl crate::backends::TextGenerator for Multiline {
        fn generate_text(&self, _: &TextGenRequest) -> Result<String, BackendError> {
            Ok("\n  Sign in  \nsecond line".into())
        }
    }

    struct Blank;
    impl crate::backends::TextGenerator for Blank {
        fn generate_text(&self, _: &TextGenRequest) -> Result<String, BackendError> {
            Ok("  \n ".into())
        }
    }

    #[test]
    fn text_module_keeps_first_line_and_rejects_blank() {
        let mut b = Backends::mock();
        b.text = std::sync::Arc::new(Multiline);
        let c = text_content(&call(0, "p"), &b, 64).unwrap();
        assert_eq!(c.payload, Payload::Text { text: "Sign in".into() });
        b.text = std::sync::Arc::new(Blank);
        assert!(matches!(
            text_content(&call(0, "p"), &b, 64),
            Err(SubModuleError::Backend(BackendError::EmptyCompletion))
        ));
    }

    fn theme_image() -> (RasterImage, Canvas, Layout) {
        let canvas = Canvas {
            width: 256,
            height: 256,
        };
        let layout = Layout {
            canvas,
            components: vec![LayoutComponent {
                kind: ComponentType::Image,
                bbox: BBox::new(64, 64, 64, 32),
            }],
        };
        let img = Backends::mock()
            .image
            .generate_image(&ImageGenRequest {
                prompt: "theme".into(),
                layout_condition: Some(layout.clone()),
                init_image: None,
                strength: 0.6,
                seed: 1,
                size: ImageSize::default(),
            })
            .unwrap();
        (img, canvas, layout)
    }

    #[test]
    fn image_module_crops_the_theme_image() {
        let (img, canvas, _) = theme_image();
        // painted box scales to [128,128,128,64]
        let init = crop_theme_region(BBox::new(64, 64, 64, 32), canvas, &img).unwrap();
        assert_eq!((init.width(), init.height()), (128, 64));
        let painted = mock_component_color("theme", 1, 0);
        assert!(init.pixels().iter().all(|p| *p == painted));

        let c = image_content(
            &call(0, "p"),
            &img,
            canvas,
            BBox::new(64, 64, 64, 32),
            "a mountain photo",
            &Backends::mock(),
            ImageParams {
                strength: 0.6,
                seed: 1,
            },
        )
        .unwrap();
        match c.payload {
            Payload::Image { image, prompt_used } => {
                assert_eq!((image.width(), image.height()), (128, 64));
                assert_eq!(prompt_used, "a mountain photo");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn full_canvas_crop_is_the_whole_image() {
        let (img, canvas, _) = theme_image();
        let crop = crop_theme_region(BBox::new(0, 0, 256, 256), canvas, &img).unwrap();
        assert_eq!(crop, img);
    }

    #[test]
    fn degenerate_crop_is_an_error() {
        let img = RasterImage::filled(4, 4, [0; 3]);
        let canvas = Canvas {
            width: 1000,
            height: 1000,
        };
        assert!(matches!(
            crop_theme_region(BBox::new(10, 10, 5, 5), canvas, &img),
            Err(SubModuleError::DegenerateCrop { .. })
        ));
    }

    #[test]
    fn color_fill_examples() {
        let canvas = Canvas {
            width: 10,
            height: 10,
        };
        let solid = RasterImage::filled(10, 10, [0x33, 0x66, 0x99]);
        let c = color_fill_content(3, BBox::new(0, 0, 5, 5), &solid, canvas).unwrap();
        assert_eq!(c.component_index, 3);
        assert_eq!(c.payload, Payload::ColorFill { fill: "#336699".into() });

        // 7 red columns, 3 blue columns
        let split = RasterImage::from_fn(10, 10, |x, _| if x < 7 { [255, 0, 0] } else { [0, 0, 255] });
        let c = color_fill_content(0, BBox::new(0, 0, 10, 10), &split, canvas).unwrap();
        assert_eq!(c.payload, Payload::ColorFill { fill: "#ff0000".into() });

        let c = color_fill_content(0, BBox::new(8, 0, 1, 1), &split, canvas).unwrap();
        assert_eq!(c.payload, Payload::ColorFill { fill: to_hex([0, 0, 255]) });
        let _ = mock_background;
    }

    #[test]
    fn phrase_sanitizing() {
        assert_eq!(sanitize_phrase("Add Shopping-Cart!"), "add shopping cart");
        assert_eq!(sanitize_phrase("MOCK:ab12cd"), "mockab12cd");
        assert_eq!(sanitize_phrase("one two three four five six seven"), "one two three four five six");
        assert_eq!(sanitize_phrase("!!!"), "");
    }

    fn icon_index() -> IconIndex {
        let icons = ["alarm", "bookmark", "home", "search"]
            .iter()
            .map(|p| IconRecord {
                id: p.to_string(),
                phrase: p.to_string(),
                svg_source: format!("<svg><title>{p}</title></svg>"),
            })
            .collect();
        IconIndex::build(icons, &MockEmbedder::default()).unwrap()
    }

    struct Says(&'static str);
    impl crate::backends::TextGenerator for Says {
        fn generate_text(&self, _: &TextGenRequest) -> Result<String, BackendError> {
            Ok(self.0.into())
        }
    }

    #[test]
    fn icon_module_retrieves_verbatim_svg() {
        let mut b = Backends::mock();
        b.text = std::sync::Arc::new(Says("Alarm."));
        let idx = icon_index();
        let c = icon_content(&call(0, "p"), &idx, &b, 16).unwrap();
        assert_eq!(
            c.payload,
            Payload::Icon {
                icon_id: "alarm".into(),
                svg: "<svg><title>alarm</title></svg>".into(),
                phrase: "alarm".into(),
            }
        );
    }

    #[test]
    fn icon_module_with_mock_phrase_matches_brute_force() {
        let b = Backends::mock();
        let idx = icon_index();
        let c = icon_content(&call(0, "prompt x"), &idx, &b, 16).unwrap();
        let Payload::Icon { icon_id, phrase, .. } = c.payload else {
            panic!()
        };
        assert_eq!(phrase, format!("mock{}", digest16("prompt x")));
        let e = MockEmbedder::default();
        let q = e.embed_text(&phrase).unwrap();
        let best = idx
            .icons()
            .iter()
            .max_by(|a, b| {
                let s = |i: &IconRecord| {
                    let v = e.embed_text(&i.phrase).unwrap();
                    v.as_slice().iter().zip(q.as_slice()).map(|(x, y)| x * y).sum::<f64>()
                };
                s(a).total_cmp(&s(b))
            })
            .unwrap();
        assert_eq!(icon_id, best.id);
    }

    #[test]
    fn icon_module_requires_icons() {
        let empty = IconIndex::build(vec![], &MockEmbedder::default()).unwrap();
        assert!(icon_content(&call(0, "p"), &empty, &Backends::mock(), 16).is_err());
    }
}
