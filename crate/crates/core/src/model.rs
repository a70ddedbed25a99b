//! The text head, generator and discriminator sharing one parameter store.

use pathvid_nn::{Builder, NormMode, ParamStore, Session, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::latent::LatentNoise;
use crate::text::{EmbeddingProvider, TextHead};

pub const TEXT_PREFIX: &str = "text.";
pub const GEN_PREFIX: &str = "gen.";
pub const DISC_PREFIX: &str = "disc.";

/// Scores of a batch as plain vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub d3d: Vec<f32>,
    pub d2d: Vec<f32>,
    pub dr: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub text: TextHead,
    pub gen: Generator,
    pub disc: Discriminator,
    pub provider: EmbeddingProvider,
}

impl Model {
    /// Initializes every parameter from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let provider = EmbeddingProvider::from_config(&config.embedding, config.d_raw)?;
        Self::with_provider(config, seed, provider)
    }

    pub fn with_provider(config: &ModelConfig, seed: u64, provider: EmbeddingProvider) -> Result<Self> {
        if provider.dim() != config.d_raw {
            return Err(Error::Config(format!(
                "embedding provider width {} differs from model.d_raw {}",
                provider.dim(),
                config.d_raw
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let text = TextHead::new(&mut Builder::new(&mut store, &mut rng, "text"), config.d_raw, config.text_hidden)?;
        let gen = Generator::new(&mut Builder::new(&mut store, &mut rng, "gen").spectral(true), &config.generator)?;
        let disc = Discriminator::new(&mut Builder::new(&mut store, &mut rng, "disc").spectral(true), &config.discriminator)?;
        Ok(Self {
            config: config.clone(),
            store,
            text,
            gen,
            disc,
            provider,
        })
    }

    pub fn embed<S: AsRef<str>>(&self, sentences: &[S]) -> Result<Tensor> {
        self.provider.embed_batch(sentences)
    }

    /// `e(S)` for raw embeddings `[B, d_raw]`.
    pub fn encode(&self, s: &mut Session, raw: &Tensor) -> Result<Var> {
        let r = s.constant(raw.clone());
        self.text.forward(s, r)
    }

    /// Sentence codes without gradients.
    pub fn sentence_codes(&self, raw: &Tensor, mode: NormMode) -> Result<Tensor> {
        let mut s = Session::eval(&self.store).with_mode(mode);
        let e = self.encode(&mut s, raw)?;
        Ok(s.value(e).clone())
    }

    /// Videos `[B, 3, T, H, W]` from sentence codes `[B, 256]`.
    pub fn generate_from_codes(&self, codes: &Tensor, noise: &LatentNoise, mode: NormMode) -> Result<Tensor> {
        let mut s = Session::eval(&self.store).with_mode(mode);
        let e = s.constant(codes.clone());
        let pass = self.gen.forward(&mut s, e, noise)?;
        Ok(s.value(pass.video).clone())
    }

    /// Videos `[B, 3, T, H, W]` from raw embeddings.
    pub fn generate(&self, raw: &Tensor, noise: &LatentNoise, mode: NormMode) -> Result<Tensor> {
        let codes = self.sentence_codes(raw, mode)?;
        self.generate_from_codes(&codes, noise, mode)
    }

    /// Discriminator scores of `videos` paired with raw embeddings.
    pub fn score(&self, videos: &Tensor, raw: &Tensor) -> Result<Scores> {
        let mut s = Session::eval(&self.store);
        let e = self.encode(&mut s, raw)?;
        let v = s.constant(videos.clone());
        let pass = self.disc.forward(&mut s, v, e)?;
        let out = |s: &Session, v: Var| s.value(v).data().to_vec();
        Ok(Scores {
            d3d: out(&s, pass.scores.d3d),
            d2d: out(&s, pass.scores.d2d),
            dr: out(&s, pass.scores.dr),
        })
    }

    pub fn noise<R: rand::Rng + ?Sized>(&self, batch: usize, frames: usize, rng: &mut R) -> LatentNoise {
        let g = &self.config.generator;
        LatentNoise::sample(batch, frames, g.noise_dim, g.per_frame_noise, rng)
    }
}
