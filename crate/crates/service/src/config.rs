use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use protoflow::orchestrator::PipelineConfig;
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_data_dir")]
    pub data_dir: PathBuf,
    /// Knowledge base file or directory; the bundled sample when unset.
    pub kb: Option<PathBuf>,
    /// Icon base file or directory; the bundled sample when unset.
    pub icons: Option<PathBuf>,
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub backends: BackendSection,
}

fn default_data_dir() -> PathBuf {
    PathBuf::from("data")
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    pub k: Option<usize>,
    pub image_size: Option<u32>,
    pub seed: Option<u64>,
    pub max_tokens: Option<u32>,
    pub strength: Option<f64>,
    pub p_theme: Option<PathBuf>,
    pub p_text: Option<PathBuf>,
    pub p_icon: Option<PathBuf>,
    pub p_image: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    pub text_url: Option<String>,
    pub embed_url: Option<String>,
    pub embed_dim: Option<usize>,
    pub image_url: Option<String>,
}

impl ServiceConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut config: ServiceConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        // relative paths in the file are relative to the file
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut config.data_dir);
        for p in [&mut config.kb, &mut config.icons]
            .into_iter()
            .chain([
                &mut config.pipeline.p_theme,
                &mut config.pipeline.p_text,
                &mut config.pipeline.p_icon,
                &mut config.pipeline.p_image,
            ])
            .flatten()
        {
            rebase(p);
        }
        Ok(config)
    }

    pub fn pipeline_config(&self) -> anyhow::Result<PipelineConfig> {
        let p = &self.pipeline;
        let mut c = PipelineConfig::default();
        if let Some(k) = p.k {
            anyhow::ensure!(k > 0, "pipeline.k must be positive");
            c.k = k;
        }
        if let Some(size) = p.image_size {
            anyhow::ensure!(size > 0, "pipeline.image_size must be positive");
            c.image_size = size;
        }
        if let Some(strength) = p.strength {
            anyhow::ensure!(
                strength > 0.0 && strength <= 1.0,
                "pipeline.strength must be in (0, 1]"
            );
            c.strength = strength;
        }
        c.seed = p.seed.unwrap_or(c.seed);
        c.max_tokens = p.max_tokens.unwrap_or(c.max_tokens);
        let read = |path: &Path| {
            fs::read_to_string(path).with_context(|| format!("reading template {}", path.display()))
        };
        if let Some(path) = &p.p_theme {
            c.templates.p_theme = read(path)?;
        }
        if let Some(path) = &p.p_text {
            c.templates.p_text = read(path)?.trim().to_string();
        }
        if let Some(path) = &p.p_icon {
            c.templates.p_icon = read(path)?.trim().to_string();
        }
        if let Some(path) = &p.p_image {
            c.templates.p_image = read(path)?.trim().to_string();
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rebases() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("text.txt"), "Say something at [bbox].\n").unwrap();
        let path = dir.path().join("protoflow.toml");
        fs::write(
            &path,
            r#"
data_dir = "store"
[pipeline]
k = 1
seed = 9
p_text = "text.txt"
[backends]
text_url = "http://localhost:1"
"#,
        )
        .unwrap();
        let config = ServiceConfig::load(&path).unwrap();
        assert_eq!(config.data_dir, dir.path().join("store"));
        let p = config.pipeline_config().unwrap();
        assert_eq!((p.k, p.seed, p.image_size), (1, 9, 512));
        assert_eq!(p.templates.p_text, "Say something at [bbox].");
        assert_eq!(config.backends.text_url.as_deref(), Some("http://localhost:1"));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "colour = 1\n").unwrap();
        assert!(ServiceConfig::load(&path).is_err());
        fs::write(&path, "[pipeline]\nk = 0\n").unwrap();
        assert!(ServiceConfig::load(&path).unwrap().pipeline_config().is_err());
    }
}
