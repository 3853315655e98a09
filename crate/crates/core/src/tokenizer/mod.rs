//! Images to multi-scale bit tokens and back.

mod autoencoder;
mod quant;

pub use autoencoder::{train_autoencoder, AeShape, AeTrainConfig, AeTrainReport, Autoencoder};
pub use quant::{
    bsq_quantize, BitTokenMap, Encoded, LatentGrid, MultiScaleTokens, ResidualQuantizer,
    ScaleSchedule,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::NumericsError;
use crate::parallel;
use crate::raster::{Image, RasterError};

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("shape: {0}")]
    Shape(String),
    #[error("schedule: {0}")]
    Schedule(String),
    #[error("data: {0}")]
    Data(String),
    #[error("token format: {0}")]
    Format(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub image_size: usize,
    pub downsample: usize,
    pub latent_channels: usize,
    pub hidden: usize,
    /// Explicit `[h, w]` scales; empty means the doubling schedule up to the latent size.
    pub schedule: Vec<[usize; 2]>,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub holdout: f64,
    pub target_mse: f64,
    pub seed: u64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            downsample: 4,
            latent_channels: 16,
            hidden: 16,
            schedule: Vec::new(),
            steps: 2000,
            batch: 8,
            lr: 3e-3,
            holdout: 0.1,
            target_mse: 0.01,
            seed: 0,
        }
    }
}

impl TokenizerConfig {
    pub fn ae_shape(&self) -> AeShape {
        AeShape {
            image_size: self.image_size,
            downsample: self.downsample,
            hidden: self.hidden,
            latent_channels: self.latent_channels,
        }
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / self.downsample.max(1)
    }

    pub fn scale_schedule(&self) -> Result<ScaleSchedule, TokenizerError> {
        let l = self.latent_size();
        let s = if self.schedule.is_empty() {
            ScaleSchedule::doubling(l, l)
        } else {
            ScaleSchedule::new(self.schedule.iter().map(|p| (p[0], p[1])).collect())?
        };
        s.check_latent(l, l)?;
        Ok(s)
    }

    pub fn ae_train(&self) -> AeTrainConfig {
        AeTrainConfig {
            steps: self.steps,
            batch: self.batch,
            lr: self.lr,
            holdout: self.holdout,
            seed: self.seed,
        }
    }
}

/// Trained autoencoder plus calibrated residual quantizer.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub ae: Autoencoder,
    pub quantizer: ResidualQuantizer,
}

impl Tokenizer {
    pub fn schedule(&self) -> &ScaleSchedule {
        &self.quantizer.schedule
    }

    pub fn d_bits(&self) -> usize {
        self.quantizer.d_bits
    }

    pub fn encode_latent(&self, img: &Image) -> Result<LatentGrid, TokenizerError> {
        self.ae.encode(img)
    }

    pub fn tokenize(&self, img: &Image) -> Result<(LatentGrid, Encoded), TokenizerError> {
        let f = self.ae.encode(img)?;
        let enc = self.quantizer.encode(&f)?;
        Ok((f, enc))
    }

    pub fn detokenize(&self, tokens: &MultiScaleTokens) -> Result<Image, TokenizerError> {
        let f = self.quantizer.decode(tokens)?;
        self.ae.decode_image(&f)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TokenizerReport {
    pub autoencoder: AeTrainReport,
    pub gains: Vec<f32>,
    /// Held-out image MSE after quantization through all scales.
    pub heldout_quantized_mse: f64,
    pub target_met: bool,
}

/// Trains the autoencoder, then calibrates per-scale gains on the training latents.
pub fn train_tokenizer(
    images: &[Image],
    cfg: &TokenizerConfig,
) -> Result<(Tokenizer, TokenizerReport), TokenizerError> {
    let schedule = cfg.scale_schedule()?;
    let (ae, ae_report) = train_autoencoder(images, cfg.ae_shape(), &cfg.ae_train())?;
    let n_train = ae_report.train_images;
    let latents: Vec<LatentGrid> = parallel::map(&images[..n_train], |_, img| ae.encode(img))
        .into_iter()
        .collect::<Result<_, _>>()?;
    let mut quantizer = ResidualQuantizer::with_unit_gains(schedule, cfg.latent_channels);
    quantizer.calibrate(&latents)?;
    let tok = Tokenizer { ae, quantizer };
    let held = if n_train < images.len() {
        &images[n_train..]
    } else {
        images
    };
    let errs = parallel::map(held, |_, img| -> Result<f64, TokenizerError> {
        let (_, enc) = tok.tokenize(img)?;
        Ok(tok.ae.decode_image(enc.reconstruction())?.mse(img))
    });
    let mut q = 0.0;
    for e in errs {
        q += e?;
    }
    let report = TokenizerReport {
        target_met: ae_report.heldout_mse < cfg.target_mse,
        autoencoder: ae_report,
        gains: tok.quantizer.gains.clone(),
        heldout_quantized_mse: q / held.len().max(1) as f64,
    };
    Ok((tok, report))
}
