use std::sync::Arc;

use anyhow::Context;
use protoflow::backends::{Backends, RemoteEmbedder, RemoteImage, RemoteText};
use protoflow::kb::{load_icon_base, load_knowledge_base, sample_icon_base, sample_knowledge_base};
use protoflow::orchestrator::{Knowledge, Pipeline, PipelineConfig};
use protoflow::retrieval::IconIndex;

use crate::config::ServiceConfig;

/// Everything needed to run the pipeline, shared read-only across requests.
pub struct Engine {
    pub backends: Backends,
    pub knowledge: Knowledge,
    pub icons: IconIndex,
    pub config: PipelineConfig,
}

impl Engine {
    pub fn new(
        backends: Backends,
        knowledge: Knowledge,
        icons: IconIndex,
        config: PipelineConfig,
    ) -> Self {
        Engine {
            backends,
            knowledge,
            icons,
            config,
        }
    }

    /// Mock backends over the bundled sample knowledge and icon bases.
    pub fn mock(config: PipelineConfig) -> anyhow::Result<Self> {
        Self::with_backends(Backends::mock(), None, None, config)
    }

    pub fn from_config(c: &ServiceConfig) -> anyhow::Result<Self> {
        let mut backends = Backends::from_env();
        let b = &c.backends;
        if let Some(url) = &b.text_url {
            backends.text = Arc::new(RemoteText::new(url));
        }
        if let Some(url) = &b.embed_url {
            backends.embed = Arc::new(RemoteEmbedder::new(url, b.embed_dim.unwrap_or(1536)));
        }
        if let Some(url) = &b.image_url {
            backends.image = Arc::new(RemoteImage::new(url));
        }
        Self::with_backends(
            backends,
            c.kb.as_deref(),
            c.icons.as_deref(),
            c.pipeline_config()?,
        )
    }

    pub fn with_backends(
        backends: Backends,
        kb: Option<&std::path::Path>,
        icons: Option<&std::path::Path>,
        config: PipelineConfig,
    ) -> anyhow::Result<Self> {
        let records = match kb {
            Some(p) => load_knowledge_base(p)
                .with_context(|| format!("loading knowledge base {}", p.display()))?,
            None => sample_knowledge_base(),
        };
        let icon_records = match icons {
            Some(p) => {
                load_icon_base(p).with_context(|| format!("loading icon base {}", p.display()))?
            }
            None => sample_icon_base(),
        };
        let knowledge = Knowledge::build(records, backends.embed.as_ref())
            .context("indexing the knowledge base")?;
        let icons =
            IconIndex::build(icon_records, backends.embed.as_ref()).context("indexing icons")?;
        log::info!(
            "engine ready: {} knowledge records, {} icons",
            knowledge.len(),
            icons.icons().len()
        );
        Ok(Engine::new(backends, knowledge, icons, config))
    }

    pub fn pipeline(&self) -> Pipeline<'_> {
        Pipeline::new(&self.backends, &self.knowledge, &self.icons, &self.config)
    }
}
