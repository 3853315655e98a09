//! Next-scale generation with two-condition guidance, and its latency bench.

use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conditioning::{encode_text, extract_reference, ConditionInputs, ConditioningError};
use crate::model::{scale_inputs, EchoGen, KvCache, ModelError};
use crate::numerics::{sigmoid, NumericsError, Real, Rng, Tensor};
use crate::parallel;
use crate::raster::Image;
use crate::tokenizer::{BitTokenMap, LatentGrid, MultiScaleTokens, Tokenizer, TokenizerError};

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("image guidance {0} needs a reference image")]
    MissingReference(f64),
    #[error("model head is all zeros; train it first")]
    Untrained,
    #[error("invalid request: {0}")]
    Request(String),
    #[error("model and tokenizer disagree: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Conditioning(#[from] ConditioningError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceScales {
    pub text: f64,
    pub image: f64,
}

impl Default for GuidanceScales {
    fn default() -> Self {
        Self {
            text: 3.0,
            image: 2.0,
        }
    }
}

impl GuidanceScales {
    pub fn new(text: f64, image: f64) -> Result<Self, SamplingError> {
        let s = Self { text, image };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), SamplingError> {
        for v in [self.text, self.image] {
            if !v.is_finite() || v < 0.0 {
                return Err(SamplingError::Request(format!(
                    "guidance scale {v} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }

    /// Both scales at 1: the guided logits are the full-condition logits.
    pub fn is_identity(&self) -> bool {
        self.text == 1.0 && self.image == 1.0
    }
}

/// `l_u + γ_t (l_t - l_u) + γ_I (l_f - l_t)`, evaluated as
/// `γ_I l_f + (γ_t - γ_I) l_t + (1 - γ_t) l_u` so that the identity settings
/// return the selected operand exactly.
pub fn cfg_combine<T: Real>(
    l_uncond: &Tensor<T>,
    l_text: &Tensor<T>,
    l_full: &Tensor<T>,
    scales: GuidanceScales,
) -> Result<Tensor<T>, NumericsError> {
    for other in [l_text, l_full] {
        if other.shape() != l_uncond.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "cfg_combine",
                lhs: l_uncond.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
    }
    let a = T::lit(scales.image);
    let b = T::lit(scales.text - scales.image);
    let c = T::lit(1.0 - scales.text);
    let (u, t, f) = (l_uncond.data(), l_text.data(), l_full.data());
    Ok(Tensor::from_fn(l_uncond.shape(), |i| {
        a * f[i] + b * t[i] + c * u[i]
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    Argmax,
    Temperature(f64),
}

impl Decoding {
    pub fn validate(&self) -> Result<(), SamplingError> {
        match *self {
            Decoding::Temperature(t) if !(t > 0.0 && t.is_finite()) => Err(SamplingError::Request(
                format!("temperature {t} must be positive"),
            )),
            _ => Ok(()),
        }
    }
}

/// Independent per-bit draws from `[h * w, d_bits]` logits.
pub fn sample_bits<T: Real>(
    logits: &Tensor<T>,
    h: usize,
    w: usize,
    decoding: Decoding,
    rng: &mut Rng,
) -> Result<BitTokenMap, NumericsError> {
    let (rows, d) = logits.dims2()?;
    if rows != h * w {
        return Err(NumericsError::ShapeMismatch {
            op: "sample_bits",
            lhs: vec![rows, d],
            rhs: vec![h * w, d],
        });
    }
    let bits = logits
        .data()
        .iter()
        .map(|&l| {
            let l = l.to_f64().unwrap_or(0.0);
            let up = match decoding {
                Decoding::Argmax => l >= 0.0,
                Decoding::Temperature(tau) => rng.uniform() < sigmoid(l / tau),
            };
            if up {
                1
            } else {
                -1
            }
        })
        .collect();
    Ok(BitTokenMap {
        h,
        w,
        d_bits: d,
        bits,
    })
}

#[derive(Clone, Debug)]
pub struct SampleRequest {
    pub prompt: String,
    pub reference: Option<Image>,
    pub scales: GuidanceScales,
    pub decoding: Decoding,
    pub seed: u64,
    pub num_images: usize,
}

impl SampleRequest {
    pub fn new(prompt: impl Into<String>, reference: Option<Image>, seed: u64) -> Self {
        Self {
            prompt: prompt.into(),
            reference,
            scales: GuidanceScales::default(),
            decoding: Decoding::Argmax,
            seed,
            num_images: 1,
        }
    }

    pub fn validate(&self) -> Result<(), SamplingError> {
        self.scales.validate()?;
        self.decoding.validate()?;
        if self.scales.image > 0.0 && self.reference.is_none() {
            return Err(SamplingError::MissingReference(self.scales.image));
        }
        if self.num_images == 0 {
            return Err(SamplingError::Request("num_images must be positive".into()));
        }
        Ok(())
    }
}

/// Condition sets of the guidance branches: `[uncond, text, full]`, or only
/// `[full]` when both scales are 1.
pub fn branch_inputs<T: Real>(
    model: &EchoGen<T>,
    tokenizer: &Tokenizer,
    request: &SampleRequest,
) -> Result<Vec<ConditionInputs>, SamplingError> {
    let shape = model.spec.condition_shape();
    let text = ConditionInputs {
        text: Some(encode_text(&request.prompt, &shape)?),
        ..ConditionInputs::default()
    };
    let full = match &request.reference {
        Some(img) => text
            .clone()
            .with_reference(&extract_reference(img, tokenizer, &shape)?),
        None => text.clone(),
    };
    if request.scales.is_identity() {
        Ok(vec![full])
    } else {
        Ok(vec![ConditionInputs::null(), text, full])
    }
}

fn check_pair<T: Real>(model: &EchoGen<T>, tokenizer: &Tokenizer) -> Result<(), SamplingError> {
    if model.spec.schedule != *tokenizer.schedule() || model.spec.d_bits != tokenizer.d_bits() {
        return Err(SamplingError::Mismatch(format!(
            "model {:?} x {} bits, tokenizer {:?} x {} bits",
            model.spec.schedule.scales(),
            model.spec.d_bits,
            tokenizer.schedule().scales(),
            tokenizer.d_bits()
        )));
    }
    Ok(())
}

fn check_trained<T: Real>(model: &EchoGen<T>) -> Result<(), SamplingError> {
    if model
        .store
        .get(model.params.head.w)
        .data()
        .iter()
        .all(|v| *v == T::zero())
    {
        return Err(SamplingError::Untrained);
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct GeneratedImage {
    pub image: Image,
    pub tokens: MultiScaleTokens,
    pub seed: u64,
    pub index: usize,
    /// Wall clock of each scale step (all branches, combine and sampling), in milliseconds.
    pub scale_ms: Vec<f64>,
    pub forward_passes: usize,
}

/// Per-image record written next to a generated PNG.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub prompt: String,
    pub seed: u64,
    pub index: usize,
    pub guidance: GuidanceScales,
    pub decoding: Decoding,
    pub scales: Vec<(usize, usize)>,
    pub has_reference: bool,
    pub forward_passes: usize,
}

impl SampleRecord {
    pub fn of(
        request: &SampleRequest,
        model_scales: &[(usize, usize)],
        g: &GeneratedImage,
    ) -> Self {
        Self {
            prompt: request.prompt.clone(),
            seed: g.seed,
            index: g.index,
            guidance: request.scales,
            decoding: request.decoding,
            scales: model_scales.to_vec(),
            has_reference: request.reference.is_some(),
            forward_passes: g.forward_passes,
        }
    }
}

/// Token-level generation for fixed branch inputs; returns the tokens, per-scale
/// milliseconds and the number of forward passes.
pub fn generate_tokens<T: Real>(
    model: &EchoGen<T>,
    tokenizer: &Tokenizer,
    branches: &[ConditionInputs],
    scales: GuidanceScales,
    decoding: Decoding,
    rng: &mut Rng,
) -> Result<(MultiScaleTokens, Vec<f64>, usize), SamplingError> {
    let q = &tokenizer.quantizer;
    let sched = &model.spec.schedule;
    let (hl, wl) = sched.last();
    let caches: Vec<Mutex<KvCache<T>>> = branches
        .iter()
        .map(|b| Mutex::new(model.new_cache(b)))
        .collect();
    let mut acc = vec![0.0f32; hl * wl * model.spec.d_bits];
    let mut maps = Vec::with_capacity(sched.len());
    let mut timings = Vec::with_capacity(sched.len());
    let mut passes = 0;
    for k in 0..sched.len() {
        let t0 = Instant::now();
        let prev = (k > 0).then(|| LatentGrid {
            h: hl,
            w: wl,
            c: model.spec.d_bits,
            data: acc.clone(),
        });
        let logits = parallel::map(branches, |b, inputs| {
            let mut cache = caches[b].lock().expect("branch cache");
            model.forward_scale(&mut cache, inputs, k, prev.as_ref())
        });
        passes += logits.len();
        let logits = logits.into_iter().collect::<Result<Vec<_>, _>>()?;
        let guided = match logits.as_slice() {
            [full] => full.clone(),
            [u, t, f] => cfg_combine(u, t, f, scales)?,
            _ => {
                return Err(SamplingError::Request(format!(
                    "{} guidance branches",
                    logits.len()
                )))
            }
        };
        let (h, w) = sched.get(k);
        let map = sample_bits(&guided, h, w, decoding, rng)?;
        q.accumulate(&mut acc, k, &map);
        maps.push(map);
        timings.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    Ok((MultiScaleTokens { maps }, timings, passes))
}

/// Generates `request.num_images` images; image `i` draws from its own child stream of the seed.
pub fn generate<T: Real>(
    request: &SampleRequest,
    model: &EchoGen<T>,
    tokenizer: &Tokenizer,
) -> Result<Vec<GeneratedImage>, SamplingError> {
    request.validate()?;
    let branches = branch_inputs(model, tokenizer, request)?;
    generate_with_branches(request, &branches, model, tokenizer)
}

/// [`generate`] with caller-built guidance branches (see [`branch_inputs`]).
pub fn generate_with_branches<T: Real>(
    request: &SampleRequest,
    branches: &[ConditionInputs],
    model: &EchoGen<T>,
    tokenizer: &Tokenizer,
) -> Result<Vec<GeneratedImage>, SamplingError> {
    request.validate()?;
    check_pair(model, tokenizer)?;
    check_trained(model)?;
    let root = Rng::named(request.seed, "sample");
    let mut out = Vec::with_capacity(request.num_images);
    for index in 0..request.num_images {
        let mut rng = root.child("image", index as u64);
        let (tokens, scale_ms, forward_passes) = generate_tokens(
            model,
            tokenizer,
            branches,
            request.scales,
            request.decoding,
            &mut rng,
        )?;
        let image = tokenizer.detokenize(&tokens)?;
        out.push(GeneratedImage {
            image,
            tokens,
            seed: request.seed,
            index,
            scale_ms,
            forward_passes,
        });
    }
    Ok(out)
}

/// Largest absolute difference between incremental and full-sequence logits for
/// `tokens` under `inputs`. `corrupt` may alter the cache after each pass.
pub fn cache_divergence<T: Real>(
    model: &EchoGen<T>,
    tokenizer: &Tokenizer,
    inputs: &ConditionInputs,
    tokens: &MultiScaleTokens,
    mut corrupt: impl FnMut(usize, &mut KvCache<T>),
) -> Result<f64, SamplingError> {
    let q = &tokenizer.quantizer;
    let prevs = scale_inputs(q, tokens)?;
    let full = model.forward(inputs, &prevs)?;
    let sched = &model.spec.schedule;
    let mut cache = model.new_cache(inputs);
    let mut worst = 0.0f64;
    for k in 0..sched.len() {
        let prev = if k == 0 { None } else { Some(&prevs[k - 1]) };
        let inc = model.forward_scale(&mut cache, inputs, k, prev)?;
        let off = sched.offset(k);
        let reference = full.slice_rows(off, off + sched.tokens(k));
        let d = inc
            .max_abs_diff(&reference)
            .to_f64()
            .unwrap_or(f64::INFINITY);
        worst = worst.max(if d.is_nan() { f64::INFINITY } else { d });
        corrupt(k, &mut cache);
    }
    Ok(worst)
}

/// Samples the request's first image through the cache, then compares every
/// branch's cached logits with a full recomputation on the sampled tokens.
pub fn cache_equivalence_check<T: Real>(
    request: &SampleRequest,
    model: &EchoGen<T>,
    tokenizer: &Tokenizer,
) -> Result<f64, SamplingError> {
    request.validate()?;
    check_pair(model, tokenizer)?;
    let branches = branch_inputs(model, tokenizer, request)?;
    let mut rng = Rng::named(request.seed, "sample").child("image", 0);
    let (tokens, _, _) = generate_tokens(
        model,
        tokenizer,
        &branches,
        request.scales,
        request.decoding,
        &mut rng,
    )?;
    let mut worst = 0.0f64;
    for b in &branches {
        worst = worst.max(cache_divergence(model, tokenizer, b, &tokens, |_, _| {})?);
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MachineInfo {
    pub os: String,
    pub arch: String,
    pub cpu: String,
    pub logical_cpus: usize,
    pub worker_threads: usize,
    pub parallel: bool,
}

impl MachineInfo {
    pub fn detect() -> Self {
        let cpu = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split(':').nth(1))
                    .map(|s| s.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        #[cfg(feature = "parallel")]
        let worker_threads = if parallel::is_parallel() {
            rayon::current_num_threads()
        } else {
            1
        };
        #[cfg(not(feature = "parallel"))]
        let worker_threads = 1;
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cpu,
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            worker_threads,
            parallel: parallel::is_parallel(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub images: usize,
    /// Mean next-scale wall clock per image with every guidance branch.
    pub ms_per_image: f64,
    /// Mean next-scale wall clock per image for the full-condition branch alone.
    pub ms_per_image_per_branch: f64,
    pub forward_passes_per_image: usize,
    pub tokens_per_image: usize,
    pub baseline_passes_per_image: usize,
    /// Mean wall clock of the raster baseline (full-condition branch only).
    pub baseline_ms_per_image: f64,
    /// Baseline over guided next-scale wall clock.
    pub speedup: f64,
    /// Baseline over next-scale wall clock, one branch each.
    pub speedup_per_branch: f64,
    pub machine: MachineInfo,
}

/// Runs `h * w` single-token passes through the model for one branch; returns milliseconds.
pub fn raster_baseline<T: Real>(
    model: &EchoGen<T>,
    inputs: &ConditionInputs,
) -> Result<(f64, usize), SamplingError> {
    let t0 = Instant::now();
    let mut cache = model.new_raster_cache(inputs)?;
    let n = cache.layout.schedule().len();
    let mut prev: Option<Vec<f32>> = None;
    for t in 0..n {
        let logits = model.forward_token(&mut cache, inputs, t, prev.as_deref())?;
        let bits: Vec<f32> = logits
            .data()
            .iter()
            .map(|l| if *l >= T::zero() { 1.0 } else { -1.0 })
            .collect();
        prev = Some(bits);
    }
    Ok((t0.elapsed().as_secs_f64() * 1e3, n))
}

/// Times guided next-scale generation against the raster baseline on the same model.
pub fn bench<T: Real>(
    requests: &[SampleRequest],
    model: &EchoGen<T>,
    tokenizer: &Tokenizer,
) -> Result<BenchReport, SamplingError> {
    if requests.is_empty() {
        return Err(SamplingError::Request(
            "bench needs at least one request".into(),
        ));
    }
    check_pair(model, tokenizer)?;
    let tokens_per_image = model.spec.schedule.total_tokens();
    let warm = &requests[0];
    let warm_branches = branch_inputs(model, tokenizer, warm)?;
    let mut rng = Rng::named(warm.seed, "bench-warmup");
    generate_tokens(
        model,
        tokenizer,
        &warm_branches,
        warm.scales,
        warm.decoding,
        &mut rng,
    )?;
    raster_baseline(model, warm_branches.last().expect("full branch"))?;

    let (mut total, mut single, mut base) = (0.0, 0.0, 0.0);
    let (mut passes, mut base_passes) = (None, None);
    for r in requests {
        r.validate()?;
        let branches = branch_inputs(model, tokenizer, r)?;
        let full = branches.last().expect("full branch");
        let mut rng = Rng::named(r.seed, "sample").child("image", 0);
        let (_, ms, p) =
            generate_tokens(model, tokenizer, &branches, r.scales, r.decoding, &mut rng)?;
        total += ms.iter().sum::<f64>();
        if *passes.get_or_insert(p) != p {
            return Err(SamplingError::Request(
                "requests mix guided and unguided settings".into(),
            ));
        }
        let mut rng = Rng::named(r.seed, "sample").child("image", 0);
        let (_, ms1, _) = generate_tokens(
            model,
            tokenizer,
            std::slice::from_ref(full),
            GuidanceScales::new(1.0, 1.0)?,
            r.decoding,
            &mut rng,
        )?;
        single += ms1.iter().sum::<f64>();
        let (ms_b, n) = raster_baseline(model, full)?;
        base += ms_b;
        base_passes = Some(n);
    }
    let n = requests.len() as f64;
    Ok(BenchReport {
        images: requests.len(),
        ms_per_image: total / n,
        ms_per_image_per_branch: single / n,
        forward_passes_per_image: passes.unwrap_or(0),
        tokens_per_image,
        baseline_passes_per_image: base_passes.unwrap_or(0),
        baseline_ms_per_image: base / n,
        speedup: base / total,
        speedup_per_branch: base / single,
        machine: MachineInfo::detect(),
    })
}
