//! Frozen perception encoders, the two X-to-language adaptors, and the
//! alignment loss that regresses adaptor prompts onto reference prompts.

pub mod plain;
pub mod qformer;
pub mod vision;

use candle_core::{DType, Tensor};

pub use plain::PlainAdaptor;
pub use qformer::{AdaptorConfig, AdaptorKind, QFormerLite, TextBatch};
pub use vision::{pretrain_vision, SequenceEncoder, VisionConfig, VisionEncoder};

use crate::checkpoint::ModelCheckpoint;
use crate::error::{Error, Result};
use crate::nn::{Mode, ParamSet};
use crate::rng::{Rng, SeedStreams};

enum Net {
    QFormer(QFormerLite),
    Plain(PlainAdaptor),
}

/// A trainable adaptor together with its parameters.
pub struct Adaptor {
    params: ParamSet,
    net: Net,
}

impl Adaptor {
    pub fn new(cfg: &AdaptorConfig, dtype: DType, rng: &mut Rng) -> Result<Self> {
        let mut params = ParamSet::new(dtype);
        let net = match cfg.kind {
            AdaptorKind::QformerLite => Net::QFormer(QFormerLite::new(&mut params, cfg, rng)?),
            AdaptorKind::Plain => Net::Plain(PlainAdaptor::new(&mut params, cfg, rng)?),
        };
        Ok(Self { params, net })
    }

    pub fn from_checkpoint(ck: &ModelCheckpoint, dtype: DType) -> Result<Self> {
        ck.expect_kind(&[AdaptorKind::QformerLite.name(), AdaptorKind::Plain.name()])?;
        let cfg: AdaptorConfig = ck.config()?;
        if cfg.kind.name() != ck.kind() {
            return Err(Error::Incompatible(format!(
                "checkpoint kind {} but config says {}",
                ck.kind(),
                cfg.kind.name()
            )));
        }
        let a = Self::new(&cfg, dtype, &mut SeedStreams::new(0).stream("placeholder"))?;
        a.params.import(&ck.blobs)?;
        Ok(a)
    }

    pub fn checkpoint(&self, tokenizer_hash: &str) -> Result<ModelCheckpoint> {
        ModelCheckpoint::capture(
            self.kind().name(),
            self.config(),
            &self.params,
            tokenizer_hash,
        )
    }

    pub fn kind(&self) -> AdaptorKind {
        self.config().kind
    }

    pub fn config(&self) -> &AdaptorConfig {
        match &self.net {
            Net::QFormer(q) => q.config(),
            Net::Plain(p) => p.config(),
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn digest(&self) -> Result<String> {
        self.params.digest()
    }

    /// Soft prompts `[b, K, d_lm]` in the language model's embedding space.
    pub fn prompts(&self, features: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        match &self.net {
            Net::QFormer(q) => q.prompts(features, mode),
            Net::Plain(p) => p.prompts(features, mode),
        }
    }

    /// The Q-Former with its text branch, or an error for the plain adaptor.
    pub fn qformer(&self) -> Result<&QFormerLite> {
        match &self.net {
            Net::QFormer(q) => Ok(q),
            Net::Plain(_) => Err(Error::Config("the plain adaptor has no text branch".into())),
        }
    }
}

/// Mean squared error over all `K * d_lm` entries (and the batch). The
/// reference enters as a constant.
pub fn alignment_loss(prompts: &Tensor, reference: &Tensor) -> Result<Tensor> {
    if prompts.dims() != reference.dims() {
        return Err(Error::Shape(format!(
            "prompts {:?} vs reference {:?}",
            prompts.dims(),
            reference.dims()
        )));
    }
    let reference = reference.detach().to_dtype(prompts.dtype())?;
    Ok(prompts.sub(&reference)?.sqr()?.mean_all()?)
}
