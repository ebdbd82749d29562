//! Encoder + decoder assembled from a [`ModelConfig`].

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::decoder::{Decoder, DecoderOutput};
use crate::encoder::{Encoder, FeaturePyramid};
use crate::error::Result;
use crate::nn::{Bound, ParamDecl, Params};
use crate::tensor::{Float, Tensor};

pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

pub struct ModelOutput {
    pub pyramid: FeaturePyramid,
    pub decoder: DecoderOutput,
}

impl Model {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Model {
            config: config.clone(),
            encoder: Encoder::new(&config.encoder),
            decoder: Decoder::new(config),
        })
    }

    pub fn declarations(&self) -> Vec<ParamDecl> {
        let mut d = Vec::new();
        self.encoder.declare(&mut d);
        self.decoder.declare(&mut d);
        d
    }

    /// Fresh parameters drawn from `config.seed`.
    pub fn init_params<T: Float>(&self) -> Params<T> {
        Params::init(&self.declarations(), self.config.seed)
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &Bound, image: Var) -> Result<ModelOutput> {
        let pyramid = self.encoder.forward(g, p, image)?;
        let decoder = self.decoder.forward(g, p, &pyramid)?;
        Ok(ModelOutput { pyramid, decoder })
    }

    /// Forward pass without gradient tracking; returns the `H × W × 2` mask.
    pub fn predict<T: Float>(&self, params: &Params<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let p = Bound::new(&mut g, params, false);
        let x = g.constant(image.clone());
        let out = self.forward(&mut g, &p, x)?;
        Ok(g.value(out.decoder.mask).clone())
    }

    /// Values of the six distilled maps for one image.
    pub fn bundle<T: Float>(&self, params: &Params<T>, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::inference();
        let p = Bound::new(&mut g, params, false);
        let x = g.constant(image.clone());
        let out = self.forward(&mut g, &p, x)?;
        Ok(out
            .decoder
            .bundle
            .members
            .iter()
            .map(|&v| g.value(v).clone())
            .collect())
    }
}
