#![allow(dead_code)]

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use protoflow::backends::{
    BackendError, Backends, Embedder, ImageGenRequest, ImageGenerator, MockEmbedder, MockImage,
    MockText, TextGenRequest, TextGenerator, THEME_FORMAT_MARKER,
};
use protoflow::kb::{sample_icon_base, sample_knowledge_base, LayoutComponent};
use protoflow::orchestrator::Knowledge;
use protoflow::retrieval::{EmbeddingVector, IconIndex};
use protoflow::{BBox, Canvas, ComponentType, DesignInput, Layout, RasterImage};
use rand::Rng;

/// Backend calls observed at the trait boundary.
#[derive(Debug, Default)]
pub struct Counters {
    pub theme_text: AtomicU64,
    pub other_text: AtomicU64,
    pub theme_image: AtomicU64,
    pub other_image: AtomicU64,
    pub embed: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Snapshot {
    pub theme_text: u64,
    pub other_text: u64,
    pub theme_image: u64,
    pub other_image: u64,
}

impl Counters {
    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            theme_text: self.theme_text.load(Ordering::SeqCst),
            other_text: self.other_text.load(Ordering::SeqCst),
            theme_image: self.theme_image.load(Ordering::SeqCst),
            other_image: self.other_image.load(Ordering::SeqCst),
        }
    }
}

struct CountingText(Arc<Counters>);
struct CountingImage(Arc<Counters>);
struct CountingEmbed(Arc<Counters>, MockEmbedder);

impl TextGenerator for CountingText {
    fn generate_text(&self, req: &TextGenRequest) -> Result<String, BackendError> {
        if req.prompt.contains(THEME_FORMAT_MARKER) {
            self.0.theme_text.fetch_add(1, Ordering::SeqCst);
        } else {
            self.0.other_text.fetch_add(1, Ordering::SeqCst);
        }
        MockText.generate_text(req)
    }
}

impl ImageGenerator for CountingImage {
    fn generate_image(&self, req: &ImageGenRequest) -> Result<RasterImage, BackendError> {
        if req.layout_condition.is_some() {
            self.0.theme_image.fetch_add(1, Ordering::SeqCst);
        } else {
            self.0.other_image.fetch_add(1, Ordering::SeqCst);
        }
        MockImage.generate_image(req)
    }
}

impl Embedder for CountingEmbed {
    fn dimension(&self) -> usize {
        self.1.dimension()
    }
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, BackendError> {
        self.0.embed.fetch_add(1, Ordering::SeqCst);
        self.1.embed_text(text)
    }
}

pub fn counting_backends() -> (Backends, Arc<Counters>) {
    let c = Arc::new(Counters::default());
    (
        Backends {
            text: Arc::new(CountingText(c.clone())),
            embed: Arc::new(CountingEmbed(c.clone(), MockEmbedder::default())),
            image: Arc::new(CountingImage(c.clone())),
        },
        c,
    )
}

pub fn knowledge() -> Knowledge {
    Knowledge::build(sample_knowledge_base(), &MockEmbedder::default()).unwrap()
}

pub fn icons() -> IconIndex {
    IconIndex::build(sample_icon_base(), &MockEmbedder::default()).unwrap()
}

pub const CANVAS: Canvas = Canvas {
    width: 360,
    height: 640,
};

pub const PROMPTS: [&str; 6] = [
    "A music streaming app home page with playlists",
    "Login screen for a banking app",
    "Recipe detail page with ingredients and a hero photo",
    "Weather forecast dashboard",
    "Chat conversation list for a messaging app",
    "Online shop product page with reviews",
];

pub fn random_component<R: Rng>(rng: &mut R, kind: ComponentType) -> LayoutComponent {
    let w = rng.random_range(8..=CANVAS.width);
    let h = rng.random_range(8..=CANVAS.height / 3);
    let x = rng.random_range(0..=CANVAS.width - w);
    let y = rng.random_range(0..=CANVAS.height - h);
    LayoutComponent {
        kind,
        bbox: BBox::new(x, y, w, h),
    }
}

pub fn random_input<R: Rng>(rng: &mut R, components: usize) -> DesignInput {
    let kinds = ComponentType::ALL;
    DesignInput {
        prompt: format!(
            "{} #{}",
            PROMPTS[rng.random_range(0..PROMPTS.len())],
            rng.random_range(0..1000u32)
        ),
        layout: Layout {
            canvas: CANVAS,
            components: (0..components)
                .map(|_| {
                    let kind = kinds[rng.random_range(0..kinds.len())];
                    random_component(rng, kind)
                })
                .collect(),
        },
    }
}

/// A layout with every module represented at least once.
pub fn mixed_input<R: Rng>(rng: &mut R, extra: usize) -> DesignInput {
    let mut input = random_input(rng, extra);
    for kind in [
        ComponentType::Text,
        ComponentType::Image,
        ComponentType::Icon,
        ComponentType::Toolbar,
    ] {
        let c = random_component(rng, kind);
        input.layout.components.push(c);
    }
    input
}
