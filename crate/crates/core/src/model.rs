//! Episode forward pass: encoder, prototypes, metric head and the optional
//! uncertainty head, ending in class probabilities and the NLL loss.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::backbones::{init_params, BackboneKind, Encoder, EncoderConfig, PreparedGraph};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::metric::{cosine_similarities, metric_probabilities, nll_loss, prototypes};
use crate::ugn::{sample_noise, UgnConfig, UgnHead};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub encoder: EncoderConfig,
    /// `None` selects the plain metric head.
    pub ugn: Option<UgnConfig>,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub ugn: Option<UgnHead>,
}

/// Tape handles produced by one episode.
#[derive(Clone, Copy, Debug)]
pub struct EpisodeOutput {
    /// `(way·queries) × way` class probabilities.
    pub probs: Var,
    pub loss: Var,
    /// `(way·queries) × way` standard deviations, UGN only.
    pub sigma: Option<Var>,
}

impl Model {
    /// Registers encoder parameters, then head parameters, drawing from `rng`
    /// in that order.
    pub fn init(config: &ModelConfig, feature_dim: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        if !(config.temperature > 0.0 && config.temperature.is_finite()) {
            return Err(Error::config("temperature must be positive"));
        }
        let encoder = init_params(config.backbone, feature_dim, &config.encoder, store, rng)?;
        let ugn = match &config.ugn {
            Some(u) => Some(UgnHead::init(u, config.encoder.out_dim, store, rng)?),
            None => None,
        };
        Ok(Model {
            config: config.clone(),
            encoder,
            ugn,
        })
    }

    /// Standard normal draws for an episode, or `None` for the baseline.
    pub fn noise(&self, episode: &Episode, samples: usize, rng: &mut impl Rng) -> Option<Array3<f64>> {
        self.ugn
            .as_ref()
            .map(|_| sample_noise(episode.query.len(), samples, episode.way, rng))
    }

    /// Encodes the full graph and classifies the episode's queries.
    pub fn forward<'g>(
        &self,
        tape: &mut Tape<'g>,
        graph: &'g PreparedGraph,
        store: &ParamStore,
        episode: &Episode,
        noise: Option<Array3<f64>>,
    ) -> Result<EpisodeOutput> {
        let emb = self.encoder.encode(tape, graph, store)?;
        let support = tape.gather_rows(emb, &episode.support)?;
        let queries = tape.gather_rows(emb, &episode.query)?;
        self.head(tape, store, support, queries, episode, noise)
    }

    /// Everything after the encoder, on given support and query embeddings.
    pub fn head(
        &self,
        tape: &mut Tape<'_>,
        store: &ParamStore,
        support: Var,
        queries: Var,
        episode: &Episode,
        noise: Option<Array3<f64>>,
    ) -> Result<EpisodeOutput> {
        let protos = prototypes(tape, support, episode.way, episode.shot)?;
        let mu = cosine_similarities(tape, queries, protos, self.config.temperature, &episode.query)?;
        let (probs, sigma) = match (&self.ugn, noise) {
            (None, _) => (metric_probabilities(tape, mu)?, None),
            (Some(head), Some(noise)) => {
                let (sigma, eff) = head.forward(tape, store, queries, protos, mu, noise)?;
                (eff, Some(sigma))
            }
            (Some(_), None) => return Err(Error::config("the uncertainty head needs noise samples")),
        };
        let loss = nll_loss(tape, probs, &episode.query_labels())?;
        Ok(EpisodeOutput { probs, loss, sigma })
    }
}
