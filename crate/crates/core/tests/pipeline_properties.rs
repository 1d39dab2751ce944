mod common;

use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use protoflow::backends::{
    BackendError, Backends, ImageGenRequest, ImageGenerator, MockEmbedder, MockImage, MockText,
    TextGenRequest, TextGenerator, Embedder,
};
use protoflow::evalkit::{fid, GaussianStats};
use protoflow::orchestrator::{dispatch, ModuleId, Pipeline, PipelineConfig};
use protoflow::submodules::Payload;
use protoflow::{ComponentType, RasterImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// layout given, init image given, requested size, returned size
type ImageCall = (bool, bool, (u32, u32), (u32, u32));

#[derive(Default)]
struct Log {
    text: Vec<TextGenRequest>,
    image: Vec<ImageCall>,
}

struct RecText(Arc<Mutex<Log>>);
struct RecImage(Arc<Mutex<Log>>);

impl TextGenerator for RecText {
    fn generate_text(&self, req: &TextGenRequest) -> Result<String, BackendError> {
        self.0.lock().unwrap().text.push(req.clone());
        MockText.generate_text(req)
    }
}

impl ImageGenerator for RecImage {
    fn generate_image(&self, req: &ImageGenRequest) -> Result<RasterImage, BackendError> {
        let img = MockImage.generate_image(req)?;
        self.0.lock().unwrap().image.push((
            req.layout_condition.is_some(),
            req.init_image.is_some(),
            (req.size.width, req.size.height),
            (img.width(), img.height()),
        ));
        Ok(img)
    }
}

fn recording() -> (Backends, Arc<Mutex<Log>>) {
    let log = Arc::new(Mutex::new(Log::default()));
    (
        Backends {
            text: Arc::new(RecText(log.clone())),
            embed: Arc::new(MockEmbedder::default()),
            image: Arc::new(RecImage(log.clone())),
        },
        log,
    )
}

#[test]
fn dispatch_is_total() {
    for t in ComponentType::ALL {
        let m = dispatch(t);
        let expected = match t {
            ComponentType::Text | ComponentType::TextButton => ModuleId::Text,
            ComponentType::Image | ComponentType::BackgroundImage => ModuleId::Image,
            ComponentType::Icon => ModuleId::Icon,
            _ => ModuleId::ColorFill,
        };
        assert_eq!(m, expected, "{t}");
    }
    assert_eq!(ComponentType::ALL.len(), 13);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn backend_contracts_hold_across_runs(seed in any::<u64>(), n in 1usize..9, image_size in 64u32..300) {
        let (backends, log) = recording();
        let knowledge = common::knowledge();
        let icons = common::icons();
        let config = PipelineConfig { seed, image_size, ..PipelineConfig::default() };
        let pipeline = Pipeline::new(&backends, &knowledge, &icons, &config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = common::random_input(&mut rng, n);
        let trace = pipeline.generate_prototype(&input).unwrap();
        let _ = pipeline.regenerate_component(&trace, &input, n - 1, Some("changed")).unwrap();
        let _ = pipeline.regenerate_all(&trace, &input, &trace.theme.description).unwrap();

        let log = log.lock().unwrap();
        for req in &log.text {
            prop_assert_eq!(req.temperature, 0.0);
        }
        for (layout, init, asked, got) in &log.image {
            prop_assert_eq!(asked, got);
            prop_assert!(layout != init, "layout condition and init image must be exclusive");
        }
        prop_assert_eq!((trace.theme.theme_image.width(), trace.theme.theme_image.height()), (image_size, image_size));

        // each sub-module prompt is exactly p_sub(bbox) + "\n" + Cache_t, and
        // the text backend saw exactly that prompt
        let sent: Vec<&str> = log.text.iter().map(|r| r.prompt.as_str()).collect();
        for (t, call) in trace.calls.iter().enumerate() {
            let component = &input.layout.components[t];
            let cache = trace.cache_before(&input.layout, t);
            let expected = format!(
                "{}\n{}",
                config.templates.render_sub(call.module, component.bbox),
                cache.text()
            );
            prop_assert_eq!(&call.prompt, &expected);
            prop_assert_eq!(call.cache_len, t + 1);
            if matches!(call.module, ModuleId::Text | ModuleId::Icon) {
                prop_assert!(sent.contains(&call.prompt.as_str()));
            }
        }

        for r in &trace.results {
            if let Payload::Icon { icon_id, svg, .. } = &r.payload {
                prop_assert_eq!(&icons.get(icon_id).unwrap().svg_source, svg);
            }
        }
    }

    #[test]
    fn mocks_are_pure(prompt in "[a-zA-Z0-9][a-zA-Z0-9 ]{0,39}", blank in " {0,4}", seed in any::<u64>()) {
        prop_assert!(MockText.generate_text(&TextGenRequest::new(blank, 32)).is_err());
        let a = MockText.generate_text(&TextGenRequest::new(prompt.clone(), 32)).unwrap();
        let b = MockText.generate_text(&TextGenRequest::new(prompt.clone(), 32)).unwrap();
        prop_assert_eq!(a, b);
        let e = MockEmbedder::default();
        prop_assert_eq!(e.embed_text(&prompt).unwrap(), e.embed_text(&prompt).unwrap());
        let req = ImageGenRequest {
            prompt,
            layout_condition: None,
            init_image: None,
            strength: 0.5,
            seed,
            size: protoflow::backends::ImageSize { width: 16, height: 8 },
        };
        prop_assert_eq!(MockImage.generate_image(&req).unwrap(), MockImage.generate_image(&req).unwrap());
    }

    #[test]
    fn fid_is_symmetric_and_zero_on_self(d in 1usize..9, seed in any::<u64>()) {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stats = || {
            let m = DMatrix::<f64>::from_fn(d, d, |_, _| { let z: f64 = StandardNormal.sample(&mut rng); z });
            let cov = &m * m.transpose() + DMatrix::identity(d, d) * 0.05;
            let mean = DVector::from_fn(d, |_, _| { let z: f64 = StandardNormal.sample(&mut rng); z });
            GaussianStats { mean, cov }
        };
        let (a, b) = (stats(), stats());
        prop_assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() <= 1e-6);
        prop_assert!(fid(&a, &a).unwrap().abs() <= 1e-8);
        prop_assert!(fid(&a, &b).unwrap() >= 0.0);
    }
}
