//! Small strided convolutional autoencoder mapping images to latent grids.

use serde::{Deserialize, Serialize};

use super::{LatentGrid, TokenizerError};
use crate::numerics::{ConvGeometry, NumericsError, Real, Rng, Tensor, Var};
use crate::optim::{Adam, AdamConfig};
use crate::parallel;
use crate::params::{Ctx, ParamGroup, ParamId, ParamStore, Trainable};
use crate::raster::Image;

/// Shape hyper-parameters of the autoencoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AeShape {
    pub image_size: usize,
    pub downsample: usize,
    pub hidden: usize,
    pub latent_channels: usize,
}

impl AeShape {
    pub fn latent_size(&self) -> usize {
        self.image_size / self.downsample
    }

    pub fn validate(&self) -> Result<(), TokenizerError> {
        let d = self.downsample;
        if d == 0 || !d.is_power_of_two() || self.image_size % d != 0 {
            return Err(TokenizerError::Shape(format!(
                "downsample {d} must be a power of two dividing image size {}",
                self.image_size
            )));
        }
        if self.hidden == 0 || self.latent_channels == 0 {
            return Err(TokenizerError::Shape("zero channel count".into()));
        }
        Ok(())
    }

    fn levels(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    kernel: usize,
    stride: usize,
    pad: usize,
    cin: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore<f32>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = kernel * kernel * cin;
        let w = store.add_normal(
            &format!("{name}.w"),
            ParamGroup::Backbone,
            &[fan_in, cout],
            (2.0 / fan_in as f64).sqrt(),
            rng,
        );
        let b = store.add_zeros(&format!("{name}.b"), ParamGroup::Backbone, &[cout]);
        Self {
            w,
            b,
            kernel,
            stride,
            pad,
            cin,
        }
    }

    /// Returns the output and its spatial size.
    fn apply<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: Var,
        h: usize,
        w: usize,
    ) -> Result<(Var, usize, usize), NumericsError> {
        let geom = ConvGeometry {
            h,
            w,
            channels: self.cin,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
        };
        let cols = if self.kernel == 1 && self.stride == 1 {
            x
        } else {
            ctx.g.im2col(x, geom)?
        };
        let y = ctx.linear(cols, self.w, Some(self.b))?;
        Ok((y, geom.out_h(), geom.out_w()))
    }
}

#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub shape: AeShape,
    pub store: ParamStore<f32>,
    enc_in: Conv,
    enc_down: Vec<Conv>,
    enc_out: Conv,
    dec_in: Conv,
    dec_up: Vec<Conv>,
    dec_out: Conv,
}

impl Autoencoder {
    pub fn new(shape: AeShape, seed: u64) -> Result<Self, TokenizerError> {
        shape.validate()?;
        let mut rng = Rng::named(seed, "autoencoder-init");
        let mut store = ParamStore::new();
        let (h, c) = (shape.hidden, shape.latent_channels);
        let enc_in = Conv::new(&mut store, "ae.enc_in", 3, h, 3, 1, 1, &mut rng);
        let enc_down = (0..shape.levels())
            .map(|i| {
                Conv::new(
                    &mut store,
                    &format!("ae.enc_down{i}"),
                    h,
                    h,
                    4,
                    2,
                    1,
                    &mut rng,
                )
            })
            .collect();
        let enc_out = Conv::new(&mut store, "ae.enc_out", h, c, 1, 1, 0, &mut rng);
        let dec_in = Conv::new(&mut store, "ae.dec_in", c, h, 1, 1, 0, &mut rng);
        let dec_up = (0..shape.levels())
            .map(|i| {
                Conv::new(
                    &mut store,
                    &format!("ae.dec_up{i}"),
                    h,
                    h,
                    3,
                    1,
                    1,
                    &mut rng,
                )
            })
            .collect();
        let dec_out = Conv::new(&mut store, "ae.dec_out", h, 3, 3, 1, 1, &mut rng);
        let out_b = store.get(dec_out.b).map(|_| 0.5);
        store.set(dec_out.b, out_b).expect("same shape");
        Ok(Self {
            shape,
            store,
            enc_in,
            enc_down,
            enc_out,
            dec_in,
            dec_up,
            dec_out,
        })
    }

    /// Encoder graph: `[s * s, 3]` image to `[l * l, latent_channels]`.
    pub fn encode_graph<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        x: Var,
    ) -> Result<Var, NumericsError> {
        let s = self.shape.image_size;
        let (mut y, mut h, mut w) = self.enc_in.apply(ctx, x, s, s)?;
        y = ctx.g.gelu(y)?;
        for conv in &self.enc_down {
            let (z, h2, w2) = conv.apply(ctx, y, h, w)?;
            y = ctx.g.gelu(z)?;
            (h, w) = (h2, w2);
        }
        Ok(self.enc_out.apply(ctx, y, h, w)?.0)
    }

    /// Decoder graph: latent to unclamped `[s * s, 3]` pixels.
    pub fn decode_graph<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        z: Var,
    ) -> Result<Var, NumericsError> {
        let mut h = self.shape.latent_size();
        let (mut y, _, _) = self.dec_in.apply(ctx, z, h, h)?;
        y = ctx.g.gelu(y)?;
        for conv in &self.dec_up {
            y = ctx.g.resize(y, h, h, 2 * h, 2 * h)?;
            h *= 2;
            let (z, _, _) = conv.apply(ctx, y, h, h)?;
            y = ctx.g.gelu(z)?;
        }
        Ok(self.dec_out.apply(ctx, y, h, h)?.0)
    }

    fn check_image(&self, img: &Image) -> Result<(), TokenizerError> {
        let s = self.shape.image_size;
        if img.h != s || img.w != s {
            return Err(TokenizerError::Shape(format!(
                "image is {}x{}, expected {s}x{s}",
                img.h, img.w
            )));
        }
        Ok(())
    }

    pub fn encode(&self, img: &Image) -> Result<LatentGrid, TokenizerError> {
        self.check_image(img)?;
        let mut ctx = Ctx::inference(&self.store);
        let x = ctx.g.constant(img.to_tensor());
        let z = self.encode_graph(&mut ctx, x)?;
        let l = self.shape.latent_size();
        LatentGrid::new(l, l, self.shape.latent_channels, ctx.g.value(z).to_vec())
    }

    /// Unclamped decoder output.
    pub fn decode_raw(&self, f: &LatentGrid) -> Result<Image, TokenizerError> {
        let l = self.shape.latent_size();
        if (f.h, f.w, f.c) != (l, l, self.shape.latent_channels) {
            return Err(TokenizerError::Shape(format!(
                "latent {}x{}x{} does not fit the decoder",
                f.h, f.w, f.c
            )));
        }
        let mut ctx = Ctx::inference(&self.store);
        let z = ctx
            .g
            .constant(Tensor::new(vec![l * l, f.c], f.data.clone())?);
        let y = self.decode_graph(&mut ctx, z)?;
        let s = self.shape.image_size;
        Ok(Image::new(s, s, ctx.g.value(y).to_vec())?)
    }

    /// Decoded image clamped to `[0, 1]`.
    pub fn decode_image(&self, f: &LatentGrid) -> Result<Image, TokenizerError> {
        Ok(self.decode_raw(f)?.clamped())
    }

    /// Reconstruction loss and gradients of one image.
    fn sample_grads(&self, img: &Image) -> Result<(f64, Vec<Option<Tensor<f32>>>), TokenizerError> {
        let mut ctx = Ctx::new(&self.store, Trainable::All);
        let target = img.to_tensor();
        let x = ctx.g.constant(target.clone());
        let z = self.encode_graph(&mut ctx, x)?;
        let y = self.decode_graph(&mut ctx, z)?;
        let loss = ctx.g.mse(y, &target)?;
        let grads = ctx.param_grads(loss)?;
        Ok((ctx.g.value(loss).item() as f64, grads))
    }

    pub fn mse(&self, images: &[Image]) -> Result<f64, TokenizerError> {
        if images.is_empty() {
            return Ok(0.0);
        }
        let errs = parallel::map(images, |_, img| -> Result<f64, TokenizerError> {
            let z = self.encode(img)?;
            Ok(self.decode_image(&z)?.mse(img))
        });
        let mut total = 0.0;
        for e in errs {
            total += e?;
        }
        Ok(total / images.len() as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Fraction of images held out for the reported reconstruction error.
    pub holdout: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AeTrainReport {
    pub steps: usize,
    pub train_images: usize,
    pub heldout_images: usize,
    pub heldout_mse: f64,
    pub losses: Vec<f64>,
}

/// Trains the autoencoder with Adam on pixel MSE.
pub fn train_autoencoder(
    images: &[Image],
    shape: AeShape,
    cfg: &AeTrainConfig,
) -> Result<(Autoencoder, AeTrainReport), TokenizerError> {
    if images.is_empty() {
        return Err(TokenizerError::Data("empty dataset".into()));
    }
    let mut ae = Autoencoder::new(shape, cfg.seed)?;
    for img in images {
        ae.check_image(img)?;
    }
    let n_hold = if images.len() > 1 {
        ((images.len() as f64 * cfg.holdout).round() as usize).min(images.len() - 1)
    } else {
        0
    };
    let (train, held) = images.split_at(images.len() - n_hold);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = Rng::named(cfg.seed, "autoencoder-order");
    let mut cursor = order.len();
    let mut opt = Adam::new(
        AdamConfig {
            clip: 1.0,
            ..AdamConfig::default()
        },
        ae.store.len(),
    );
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch.max(1) {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let results = parallel::map(&batch, |_, &i| ae.sample_grads(&train[i]));
        let mut sum: Vec<Option<Vec<f32>>> = vec![None; ae.store.len()];
        let mut loss = 0.0;
        for r in results {
            let (l, grads) = r?;
            loss += l;
            for (acc, g) in sum.iter_mut().zip(grads) {
                if let Some(g) = g {
                    let a = acc.get_or_insert_with(|| vec![0.0; g.numel()]);
                    for (x, y) in a.iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
        }
        let inv = 1.0 / batch.len() as f32;
        let grads = sum
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|v| {
                    Tensor::new(
                        ae.store.get(ParamId(i)).shape().to_vec(),
                        v.iter().map(|x| x * inv).collect(),
                    )
                    .expect("finite")
                })
            })
            .collect();
        // Cosine decay to 10% of the base rate.
        let frac = step as f64 / cfg.steps.max(1) as f64;
        let lr = cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()));
        opt.step(&mut ae.store, grads, |_| Some(lr))?;
        losses.push(loss / batch.len() as f64);
        if step % 100 == 0 {
            log::debug!("autoencoder step {step} loss {:.5}", losses[step]);
        }
    }
    let eval_set = if held.is_empty() { train } else { held };
    let heldout_mse = ae.mse(eval_set)?;
    let report = AeTrainReport {
        steps: cfg.steps,
        train_images: train.len(),
        heldout_images: held.len(),
        heldout_mse,
        losses,
    };
    Ok((ae, report))
}
