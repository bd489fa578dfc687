use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{encode_points, LocationEncoder, LocationEncoderConfig};
use super::sinr::SinrModel;
use super::ModelError;
use crate::diffcore::{
    dot, sigmoid_f64, AttentionConfig, DiffError, EncoderLayer, Linear, ParamId, ParamStore, ResidualBlock, Scalar, Tape,
    Tensor, Var,
};
use crate::geo::GeoPoint;

/// Evaluation-time cap on context locations.
pub const MAX_CONTEXT_LOCATIONS: usize = 50;

/// Few-shot conditioning input for one species.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContextSet {
    pub locations: Vec<GeoPoint>,
    pub text_embedding: Option<Vec<f32>>,
    pub image_embedding: Option<Vec<f32>>,
}

impl ContextSet {
    pub fn from_locations(locations: Vec<GeoPoint>) -> Self {
        Self { locations, ..Self::default() }
    }

    /// No locations and no metadata: the model falls back to its learned tokens.
    pub fn is_degenerate(&self) -> bool {
        self.locations.is_empty() && self.text_embedding.is_none() && self.image_embedding.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenKind {
    Location = 0,
    Text = 1,
    Image = 2,
    Cls = 3,
    Reg = 4,
}

pub const TOKEN_TYPES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FsSinrConfig {
    pub location: LocationEncoderConfig,
    pub attention: AttentionConfig,
    pub encoder_layers: usize,
    pub text_dim: usize,
    pub image_dim: usize,
    pub adapter_hidden: usize,
    pub adapter_blocks: usize,
}

impl Default for FsSinrConfig {
    fn default() -> Self {
        Self {
            location: LocationEncoderConfig::default(),
            attention: AttentionConfig::default(),
            encoder_layers: 4,
            text_dim: 4096,
            image_dim: 1024,
            adapter_hidden: 512,
            adapter_blocks: 2,
        }
    }
}

impl FsSinrConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.attention.validate()?;
        if self.location.hidden_dim != self.attention.model_dim {
            return Err(ModelError::ConfigMismatch(format!(
                "location encoder width {} differs from token width {}",
                self.location.hidden_dim, self.attention.model_dim
            )));
        }
        Ok(())
    }
}

/// Maps a frozen backbone embedding to a token: affine in→h with ReLU,
/// residual blocks at width h, affine h→d.
#[derive(Debug, Clone)]
pub struct TokenAdapter {
    pub kind: TokenKind,
    pub input_dim: usize,
    pub input: Linear,
    pub blocks: Vec<ResidualBlock>,
    pub output: Linear,
}

impl TokenAdapter {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: TokenKind,
        input_dim: usize,
        hidden: usize,
        blocks: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            kind,
            input_dim,
            input: Linear::new(store, &format!("{name}.input"), input_dim, hidden, rng),
            blocks: (0..blocks).map(|i| ResidualBlock::new(store, &format!("{name}.block{i}"), hidden, rng)).collect(),
            output: Linear::new(store, &format!("{name}.output"), hidden, out_dim, rng),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = self.input.params().to_vec();
        ids.extend(self.blocks.iter().flat_map(ResidualBlock::params));
        ids.extend(self.output.params());
        ids
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, dropout: f64) -> Result<Var, DiffError> {
        let h = self.input.forward(tape, store, x)?;
        let mut h = tape.relu(h)?;
        for block in &self.blocks {
            h = block.forward(tape, store, h, dropout)?;
        }
        self.output.forward(tape, store, h)
    }
}

/// Token-type table, learned CLS/REG tokens, encoder stack and species decoder.
#[derive(Debug, Clone)]
pub struct FsSinrHead {
    pub token_types: ParamId,
    pub cls: ParamId,
    pub reg: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub decoder: [Linear; 3],
}

impl FsSinrHead {
    pub fn transformer_params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.token_types, self.cls, self.reg];
        ids.extend(self.layers.iter().flat_map(EncoderLayer::params));
        ids
    }

    pub fn decoder_params(&self) -> Vec<ParamId> {
        self.decoder.iter().flat_map(Linear::params).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    LocationEncoder,
    TextAdapter,
    ImageAdapter,
    Transformer,
    SpeciesDecoder,
    Total,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::LocationEncoder,
        Component::TextAdapter,
        Component::ImageAdapter,
        Component::Transformer,
        Component::SpeciesDecoder,
        Component::Total,
    ];
}

/// The few-shot range model.
#[derive(Debug, Clone)]
pub struct FsSinr<T: Scalar> {
    pub config: FsSinrConfig,
    pub store: ParamStore<T>,
    pub encoder: LocationEncoder,
    pub text: TokenAdapter,
    pub image: TokenAdapter,
    pub head: FsSinrHead,
}

impl<T: Scalar> FsSinr<T> {
    pub fn new(config: FsSinrConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.attention.model_dim;
        let encoder = LocationEncoder::new(&mut store, &config.location, &mut rng);
        let text = TokenAdapter::new(&mut store, "text_adapter", TokenKind::Text, config.text_dim, config.adapter_hidden, config.adapter_blocks, d, &mut rng);
        let image = TokenAdapter::new(&mut store, "image_adapter", TokenKind::Image, config.image_dim, config.adapter_hidden, config.adapter_blocks, d, &mut rng);
        let token_types = store.add_uniform("transformer.token_types", &[TOKEN_TYPES, d], d, &mut rng);
        let cls = store.add_uniform("transformer.cls", &[1, d], d, &mut rng);
        let reg = store.add_uniform("transformer.reg", &[1, d], d, &mut rng);
        let layers = (0..config.encoder_layers)
            .map(|i| EncoderLayer::new(&mut store, &format!("transformer.layer{i}"), &config.attention, &mut rng))
            .collect();
        let decoder = [0, 1, 2].map(|i| Linear::new(&mut store, &format!("species_decoder.{i}"), d, d, &mut rng));
        let head = FsSinrHead { token_types, cls, reg, layers, decoder };
        Ok(Self { config, store, encoder, text, image, head })
    }

    pub fn dim(&self) -> usize {
        self.config.attention.model_dim
    }

    pub fn component_params(&self, component: Component) -> Vec<ParamId> {
        match component {
            Component::LocationEncoder => self.encoder.params(),
            Component::TextAdapter => self.text.params(),
            Component::ImageAdapter => self.image.params(),
            Component::Transformer => self.head.transformer_params(),
            Component::SpeciesDecoder => self.head.decoder_params(),
            Component::Total => self.store.ids().collect(),
        }
    }

    pub fn count_parameters(&self, component: Component) -> usize {
        self.store.count(self.component_params(component))
    }

    /// Copies location-encoder weights from a pretrained classifier model.
    pub fn load_pretrained_encoder(&mut self, pretrained: &SinrModel<T>) -> Result<(), ModelError> {
        if pretrained.config.location != self.config.location {
            return Err(ModelError::ConfigMismatch("pretrained location encoder has a different shape".into()));
        }
        for (src, dst) in pretrained.encoder.params().into_iter().zip(self.encoder.params()) {
            *self.store.value_mut(dst) = pretrained.store.value(src).clone();
        }
        Ok(())
    }

    fn check_dims(&self, ctx: &ContextSet) -> Result<(), ModelError> {
        if let Some(t) = &ctx.text_embedding {
            if t.len() != self.config.text_dim {
                return Err(ModelError::EmbeddingDimMismatch { kind: TokenKind::Text, expected: self.config.text_dim, actual: t.len() });
            }
        }
        if let Some(a) = &ctx.image_embedding {
            if a.len() != self.config.image_dim {
                return Err(ModelError::EmbeddingDimMismatch { kind: TokenKind::Image, expected: self.config.image_dim, actual: a.len() });
            }
        }
        Ok(())
    }

    /// Species embeddings for a batch of context sets (`B × d`).
    ///
    /// Each set becomes the token sequence `[CLS, REG, locations…, text?,
    /// image?]`, each token summed with its type embedding. Sets attend only
    /// within themselves; the decoded CLS output is the embedding.
    pub fn embed_contexts(&self, tape: &mut Tape<T>, contexts: &[ContextSet], dropout: f64) -> Result<Var, ModelError> {
        for ctx in contexts {
            self.check_dims(ctx)?;
        }
        let store = &self.store;
        let mut sources = vec![tape.param(store, self.head.cls), tape.param(store, self.head.reg)];
        let mut offset = 2;

        let points: Vec<GeoPoint> = contexts.iter().flat_map(|c| c.locations.iter().copied()).collect();
        let loc_base = offset;
        if !points.is_empty() {
            let x = tape.constant(encode_points(&points));
            sources.push(self.encoder.forward(tape, store, x, dropout)?);
            offset += points.len();
        }
        let text_base = offset;
        let texts: Vec<&Vec<f32>> = contexts.iter().filter_map(|c| c.text_embedding.as_ref()).collect();
        if !texts.is_empty() {
            let data = texts.iter().flat_map(|v| v.iter().map(|&x| T::of(x as f64))).collect();
            let x = tape.constant(Tensor::matrix(texts.len(), self.config.text_dim, data)?);
            sources.push(self.text.forward(tape, store, x, dropout)?);
            offset += texts.len();
        }
        let image_base = offset;
        let images: Vec<&Vec<f32>> = contexts.iter().filter_map(|c| c.image_embedding.as_ref()).collect();
        if !images.is_empty() {
            let data = images.iter().flat_map(|v| v.iter().map(|&x| T::of(x as f64))).collect();
            let x = tape.constant(Tensor::matrix(images.len(), self.config.image_dim, data)?);
            sources.push(self.image.forward(tape, store, x, dropout)?);
        }

        let mut rows = Vec::new();
        let mut types = Vec::new();
        let mut segments: Vec<Range<usize>> = Vec::with_capacity(contexts.len());
        let (mut next_loc, mut next_text, mut next_image) = (loc_base, text_base, image_base);
        for ctx in contexts {
            let start = rows.len();
            rows.extend([0, 1]);
            types.extend([TokenKind::Cls as usize, TokenKind::Reg as usize]);
            for _ in &ctx.locations {
                rows.push(next_loc);
                types.push(TokenKind::Location as usize);
                next_loc += 1;
            }
            if ctx.text_embedding.is_some() {
                rows.push(next_text);
                types.push(TokenKind::Text as usize);
                next_text += 1;
            }
            if ctx.image_embedding.is_some() {
                rows.push(next_image);
                types.push(TokenKind::Image as usize);
                next_image += 1;
            }
            segments.push(start..rows.len());
        }

        let all = tape.concat_rows(&sources)?;
        let tokens = tape.gather_rows(all, &rows)?;
        let table = tape.param(store, self.head.token_types);
        let type_rows = tape.gather_rows(table, &types)?;
        let mut h = tape.add(tokens, type_rows)?;
        for layer in &self.head.layers {
            h = layer.forward(tape, store, h, &segments, dropout)?;
        }
        let cls_rows: Vec<usize> = segments.iter().map(|s| s.start).collect();
        let mut h = tape.gather_rows(h, &cls_rows)?;
        for (i, lin) in self.head.decoder.iter().enumerate() {
            h = lin.forward(tape, store, h)?;
            if i < 2 {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Inference-mode species embedding for one context set.
    pub fn species_embedding(&self, ctx: &ContextSet) -> Result<Vec<T>, ModelError> {
        let mut tape = Tape::new();
        let w = self.embed_contexts(&mut tape, std::slice::from_ref(ctx), 0.0)?;
        Ok(tape.value(w).data().to_vec())
    }

    /// Location-encoder features for `points` (`n × d`).
    pub fn location_features(&self, points: &[GeoPoint]) -> Result<Tensor<T>, ModelError> {
        Ok(self.encoder.embed(&self.store, points)?)
    }

    /// `σ(f(x)·w)`
    pub fn predict_presence(&self, w: &[T], x: GeoPoint) -> Result<f64, ModelError> {
        let f = self.location_features(&[x])?;
        Ok(presence_probability(w, f.row(0)))
    }
}

/// `σ(feature · w)` evaluated in 64-bit.
pub fn presence_probability<T: Scalar>(w: &[T], feature: &[T]) -> f64 {
    sigmoid_f64(dot(w, feature).f64())
}
