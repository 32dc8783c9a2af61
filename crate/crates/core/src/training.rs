//! Training: deterministic batch sampling, a two-phase update per step
//! (critic first, then the stylization network), line-delimited JSON
//! metrics, and a versioned single-file checkpoint container.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contrastive::{
    icl_loss, InstanceEncoder, ProjectionHeads, StylizationGrid, DEFAULT_TAU,
};
use crate::error::{Error, Result};
use crate::generator::{Generator, ModelConfig, StyleSource};
use crate::imaging::{derive_seed, list_images, load_image, seeded_rng};
use crate::losses::{
    content_loss, discriminator_loss, generator_adversarial_loss, identity_loss, style_loss,
    total_loss, Discriminator, LossBundle, LossTerms, LossWeights,
};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::scin::DEFAULT_EPSILON;

/// Which network supplies the style feature entering fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StyleEncoder {
    /// The perception encoder (default).
    #[default]
    Pe,
    /// The frozen perceptual pyramid's relu4_1 feature.
    FixedVgg,
    /// The perceptual pyramid, trained along with everything else.
    LearnableVgg,
}

fn default_grid() -> usize {
    4
}
fn default_image_size() -> usize {
    64
}
fn default_steps() -> usize {
    300
}
fn default_lr() -> f64 {
    1e-4
}
fn default_tau() -> f64 {
    DEFAULT_TAU
}
fn default_seed() -> u64 {
    0
}
fn default_checkpoint_every() -> usize {
    100
}
fn default_width() -> usize {
    16
}
fn default_heads() -> usize {
    4
}

/// Full training-run configuration; loads from TOML with desk-scale
/// defaults (4×4 grid, 64×64 images, width 16). Width 64 at 256×256 images
/// reproduces the full-scale layout but is not exercised by the test suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Directory of content images.
    pub content_dir: PathBuf,
    /// Directory of style images.
    pub style_dir: PathBuf,
    /// Output directory for checkpoints and metrics.
    pub out_dir: PathBuf,
    /// Batch side length n: each step samples n contents × n styles.
    #[serde(default = "default_grid")]
    pub grid: usize,
    /// Square training resolution; must be divisible by 8.
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    /// Total optimization steps.
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Generator-side learning rate.
    #[serde(default = "default_lr")]
    pub lr_generator: f64,
    /// Critic learning rate.
    #[serde(default = "default_lr")]
    pub lr_discriminator: f64,
    /// Objective weights.
    #[serde(default)]
    pub weights: LossWeights,
    /// Contrastive temperature.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Disable the adversarial pair (critic parameters stay fixed).
    #[serde(default)]
    pub no_adv: bool,
    /// Disable the contrastive term.
    #[serde(default)]
    pub no_icl: bool,
    /// Replace decoder realignment with per-level moment matching.
    #[serde(default)]
    pub no_scin: bool,
    /// Style feature source.
    #[serde(default)]
    pub style_encoder: StyleEncoder,
    /// Global seed; fixes initialization and batch sampling.
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Checkpoint cadence in steps (the final step always checkpoints).
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    /// Base channel width.
    #[serde(default = "default_width")]
    pub width: usize,
    /// Attention heads.
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Optional checkpoint to resume from.
    #[serde(default)]
    pub resume_from: Option<PathBuf>,
}

impl TrainConfig {
    /// Parses a TOML config file.
    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let config: TrainConfig = toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    /// Checks every invariant a run depends on.
    pub fn validate(&self) -> Result<()> {
        if self.grid < 1 {
            return Err(Error::config("grid must be ≥ 1".to_string()));
        }
        if !self.no_icl && self.grid < 2 {
            return Err(Error::config(
                "grid must be ≥ 2 while the contrastive term is enabled (no positives exist otherwise)"
                    .to_string(),
            ));
        }
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return Err(Error::config(format!(
                "image_size must be a positive multiple of 8, got {}",
                self.image_size
            )));
        }
        if !self.no_adv && self.image_size < 24 {
            return Err(Error::config(format!(
                "image_size must be ≥ 24 while the adversarial term is enabled, got {}",
                self.image_size
            )));
        }
        if self.steps == 0 {
            return Err(Error::config("steps must be ≥ 1".to_string()));
        }
        for (name, lr) in [
            ("lr_generator", self.lr_generator),
            ("lr_discriminator", self.lr_discriminator),
        ] {
            if !(lr > 0.0) {
                return Err(Error::config(format!("{name} must be > 0, got {lr}")));
            }
        }
        if !(self.tau > 0.0) {
            return Err(Error::config(format!("tau must be > 0, got {}", self.tau)));
        }
        self.weights.validate()?;
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every must be ≥ 1".to_string()));
        }
        if self.width == 0 {
            return Err(Error::config("width must be ≥ 1".to_string()));
        }
        if self.heads == 0 || (8 * self.width) % self.heads != 0 {
            return Err(Error::config(format!(
                "heads must divide the token dimension {}, got {}",
                8 * self.width,
                self.heads
            )));
        }
        Ok(())
    }

    /// The architecture configuration implied by the ablation switches.
    pub fn model_config(&self) -> ModelConfig {
        let (style_source, learnable_extractor) = match self.style_encoder {
            StyleEncoder::Pe => (StyleSource::Pe, false),
            StyleEncoder::FixedVgg => (StyleSource::Vgg, false),
            StyleEncoder::LearnableVgg => (StyleSource::Vgg, true),
        };
        ModelConfig {
            width: self.width,
            heads: self.heads,
            epsilon: DEFAULT_EPSILON,
            residual_from_input: false,
            style_source,
            learnable_extractor,
            use_scin: !self.no_scin,
        }
    }
}

/// Every network a training run owns.
pub struct Networks {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub embedder: InstanceEncoder,
    pub heads: ProjectionHeads,
}

/// Builds all networks inside `store` under fixed scope names, so the
/// architecture hash is a stable function of the configuration.
pub fn build_networks(store: &mut ParamStore, config: &TrainConfig) -> Result<Networks> {
    let generator = Generator::new(store, config.model_config())?;
    let mut root = store.root();
    let discriminator = Discriminator::new(&mut root.sub("critic"), config.width)?;
    let mut icl = root.sub("icl");
    let embedder = InstanceEncoder::new(&mut icl.frozen("embedder"))?;
    let heads = ProjectionHeads::new(&mut icl)?;
    Ok(Networks {
        generator,
        discriminator,
        embedder,
        heads,
    })
}

/// One training state: parameters, networks, both optimizers, step counter.
pub struct Trainer {
    config: TrainConfig,
    store: ParamStore,
    nets: Networks,
    opt_g: Adam,
    opt_d: Adam,
    step: usize,
}

impl Trainer {
    /// Initializes everything from the seed in `config`.
    pub fn new(config: TrainConfig, device: &Device) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(config.seed, device);
        let nets = build_networks(&mut store, &config)?;
        let params_g: Vec<_> = store
            .trainable_vars()
            .into_iter()
            .filter(|(name, _)| !name.starts_with("critic."))
            .collect();
        let params_d = store.trainable_vars_under("critic");
        let opt_g = Adam::new(params_g, config.lr_generator);
        let opt_d = Adam::new(params_d, config.lr_discriminator);
        Ok(Trainer {
            config,
            store,
            nets,
            opt_g,
            opt_d,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn networks(&self) -> &Networks {
        &self.nets
    }

    /// Completed steps.
    pub fn step(&self) -> usize {
        self.step
    }

    fn zero(&self) -> Result<Tensor> {
        Ok(Tensor::zeros((), DType::F64, self.store.device())?)
    }

    fn check_finite(&self, t: &Tensor, component: &str) -> Result<f64> {
        let v: f64 = t.reshape(())?.to_vec0()?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "{component} loss at step {}",
                self.step + 1
            )));
        }
        Ok(v)
    }

    /// One optimization step on a batch of `grid` content images and `grid`
    /// style images, each `(n, 3, s, s)`. The critic updates first on its
    /// own loss; the stylization side then updates on the weighted total,
    /// scoring the already-updated critic.
    pub fn train_step(&mut self, contents: &Tensor, styles: &Tensor) -> Result<LossBundle> {
        let n = self.config.grid;
        for (name, batch) in [("content", contents), ("style", styles)] {
            let d = batch.dims();
            if d.len() != 4 || d[0] != n || d[1] != 3 {
                return Err(Error::dim(format!(
                    "{name} batch must be ({n},3,H,W), got {d:?}"
                )));
            }
        }
        let device = self.store.device().clone();
        let w = self.config.weights;

        // Row-major grid: entry i·n + j pairs style i with content j.
        let style_idx: Vec<u32> = (0..n * n).map(|k| (k / n) as u32).collect();
        let content_idx: Vec<u32> = (0..n * n).map(|k| (k % n) as u32).collect();
        let style_sel = styles.index_select(&Tensor::from_vec(style_idx, n * n, &device)?, 0)?;
        let content_sel =
            contents.index_select(&Tensor::from_vec(content_idx, n * n, &device)?, 0)?;
        let grid_batch = self.nets.generator.stylize(&content_sel, &style_sel)?;

        let vgg = &self.nets.generator.vgg;
        let content = content_loss(&grid_batch, &content_sel, vgg)?;
        let style = style_loss(&grid_batch, &style_sel, vgg)?;
        let identity = identity_loss(
            &self.nets.generator,
            contents,
            styles,
            vgg,
            w.identity_pixel,
            w.identity_feature,
        )?;

        // Critic phase: update on real styles vs detached fakes, then score
        // the fakes again (frozen weights) for the stylization side.
        let (adversarial_g, adversarial_d) = if self.config.no_adv {
            (self.zero()?, self.zero()?)
        } else {
            let d = &self.nets.discriminator;
            let d_loss = discriminator_loss(&d.score(styles)?, &d.score(&grid_batch.detach())?)?;
            self.check_finite(&d_loss, "adversarial_d")?;
            let grads = d_loss.backward()?;
            self.opt_d.step(&grads)?;
            let g_loss = generator_adversarial_loss(&d.score_frozen(&grid_batch)?)?;
            (g_loss, d_loss)
        };

        let contrastive = if self.config.no_icl {
            self.zero()?
        } else {
            let entries: Vec<Tensor> = (0..n * n)
                .map(|k| grid_batch.narrow(0, k, 1))
                .collect::<std::result::Result<_, _>>()?;
            let grid = StylizationGrid::from_entries(entries, n)?;
            icl_loss(
                &grid,
                &self.nets.embedder,
                &self.nets.heads,
                self.config.tau,
                false,
            )?
        };

        let terms = LossTerms {
            style,
            content,
            identity,
            adversarial_g,
            contrastive,
        };
        let (total, bundle) = total_loss(&terms, &adversarial_d, &w).map_err(|e| match e {
            Error::NonFinite(what) => {
                Error::NonFinite(format!("{what} at step {}", self.step + 1))
            }
            other => other,
        })?;
        let grads = total.backward()?;
        self.opt_g.step(&grads)?;
        self.step += 1;
        Ok(bundle)
    }

    /// Writes the full state — every parameter, both optimizers, the step
    /// counter, and the config — to one file, atomically.
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tensors = self.store.export();
        let device = self.store.device().clone();
        for (prefix, opt) in [("optim_g", &self.opt_g), ("optim_d", &self.opt_d)] {
            for (key, t) in opt.export_state() {
                tensors.insert(format!("{prefix}.{key}"), t);
            }
            tensors.insert(
                format!("{prefix}.step_count"),
                Tensor::from_vec(vec![opt.step_count() as f64], 1, &device)?,
            );
        }
        let bytes = encode_checkpoint(
            &tensors,
            self.step,
            &self.store.arch_hash(),
            &self.config,
        )?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    /// Restores parameters, optimizer moments, and the step counter from a
    /// loaded checkpoint. The checkpoint must describe this exact
    /// architecture.
    pub fn restore(&mut self, checkpoint: &Checkpoint) -> Result<()> {
        let expected = self.store.arch_hash();
        if checkpoint.header.arch_hash != expected {
            return Err(Error::Mismatch(format!(
                "checkpoint architecture {} does not match the configured architecture {}",
                checkpoint.header.arch_hash, expected
            )));
        }
        let mut params = BTreeMap::new();
        let mut opt_states: BTreeMap<&str, BTreeMap<String, Tensor>> = BTreeMap::new();
        let mut opt_steps: BTreeMap<&str, usize> = BTreeMap::new();
        for (name, tensor) in &checkpoint.tensors {
            let mut routed = false;
            for prefix in ["optim_g", "optim_d"] {
                if let Some(rest) = name.strip_prefix(&format!("{prefix}.")) {
                    if rest == "step_count" {
                        let v: Vec<f64> = tensor.to_vec1()?;
                        opt_steps.insert(prefix, v[0] as usize);
                    } else {
                        opt_states
                            .entry(prefix)
                            .or_default()
                            .insert(rest.to_string(), tensor.clone());
                    }
                    routed = true;
                    break;
                }
            }
            if !routed {
                params.insert(name.clone(), tensor.clone());
            }
        }
        self.store.import(&params)?;
        let empty = BTreeMap::new();
        self.opt_g.import_state(
            opt_steps.get("optim_g").copied().unwrap_or(0),
            opt_states.get("optim_g").unwrap_or(&empty),
        )?;
        self.opt_d.import_state(
            opt_steps.get("optim_d").copied().unwrap_or(0),
            opt_states.get("optim_d").unwrap_or(&empty),
        )?;
        self.step = checkpoint.header.step;
        Ok(())
    }
}

/// Leading bytes of every checkpoint file.
pub const CHECKPOINT_MAGIC: [u8; 8] = *b"SFCKPT01";
/// Container layout revision.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Metadata stored ahead of the tensor payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// Completed training steps at save time.
    pub step: usize,
    /// Architecture fingerprint the payload belongs to.
    pub arch_hash: String,
    /// The configuration the run was started with.
    pub config: TrainConfig,
    /// Exact payload byte length.
    pub payload_len: u64,
    /// SHA-256 of the payload, hex.
    pub payload_sha256: String,
}

/// A parsed checkpoint: header plus every stored tensor.
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, Tensor>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn encode_checkpoint(
    tensors: &BTreeMap<String, Tensor>,
    step: usize,
    arch_hash: &str,
    config: &TrainConfig,
) -> Result<Vec<u8>> {
    // Stage raw little-endian f64 buffers, then hand safetensors views.
    let mut staged: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let shape = t.dims().to_vec();
        let flat: Vec<f64> = t.flatten_all()?.to_vec1()?;
        let mut bytes = Vec::with_capacity(flat.len() * 8);
        for v in flat {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        staged.push((name.clone(), shape, bytes));
    }
    let views: Vec<(&str, safetensors::tensor::TensorView)> = staged
        .iter()
        .map(|(name, shape, bytes)| {
            safetensors::tensor::TensorView::new(
                safetensors::tensor::Dtype::F64,
                shape.clone(),
                bytes,
            )
            .map(|v| (name.as_str(), v))
        })
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Integrity(format!("payload encoding failed: {e}")))?;
    let payload = safetensors::serialize(views, &None)
        .map_err(|e| Error::Integrity(format!("payload encoding failed: {e}")))?;

    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        step,
        arch_hash: arch_hash.to_string(),
        config: config.clone(),
        payload_len: payload.len() as u64,
        payload_sha256: sha256_hex(&payload),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::config(format!("header encoding: {e}")))?;

    let mut out = Vec::with_capacity(12 + header_json.len() + payload.len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Reads and fully verifies a checkpoint file: magic, header, version,
/// payload length, payload checksum, tensor encoding.
pub fn load_checkpoint(path: impl AsRef<Path>, device: &Device) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 12 || bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Integrity(format!(
            "{} is not a checkpoint (bad magic or truncated preamble)",
            path.display()
        )));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(Error::Integrity(format!(
            "{} is truncated inside its header",
            path.display()
        )));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| Error::Integrity(format!("{}: unreadable header: {e}", path.display())))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::Integrity(format!(
            "{}: unsupported container version {}",
            path.display(),
            header.format_version
        )));
    }
    let payload = &bytes[12 + header_len..];
    if payload.len() as u64 != header.payload_len {
        return Err(Error::Integrity(format!(
            "{}: payload is {} bytes, header promises {}",
            path.display(),
            payload.len(),
            header.payload_len
        )));
    }
    if sha256_hex(payload) != header.payload_sha256 {
        return Err(Error::Integrity(format!(
            "{}: payload checksum mismatch",
            path.display()
        )));
    }
    let parsed = safetensors::SafeTensors::deserialize(payload)
        .map_err(|e| Error::Integrity(format!("{}: unreadable payload: {e}", path.display())))?;
    let mut tensors = BTreeMap::new();
    for (name, view) in parsed.tensors() {
        if view.dtype() != safetensors::tensor::Dtype::F64 {
            return Err(Error::Integrity(format!(
                "{}: tensor {name} has dtype {:?}, expected F64",
                path.display(),
                view.dtype()
            )));
        }
        let data = view.data();
        let mut vals = Vec::with_capacity(data.len() / 8);
        for chunk in data.chunks_exact(8) {
            vals.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        tensors.insert(
            name.to_string(),
            Tensor::from_vec(vals, view.shape().to_vec(), device)?,
        );
    }
    Ok(Checkpoint { header, tensors })
}

/// Rebuilds the generator described by a checkpoint and loads its weights.
/// Returns the run config alongside, so callers know sizes and seeds.
pub fn load_generator(
    path: impl AsRef<Path>,
    device: &Device,
) -> Result<(TrainConfig, ParamStore, Generator)> {
    let checkpoint = load_checkpoint(path, device)?;
    let config = checkpoint.header.config.clone();
    let mut store = ParamStore::new(config.seed, device);
    let nets = build_networks(&mut store, &config)?;
    if checkpoint.header.arch_hash != store.arch_hash() {
        return Err(Error::Mismatch(format!(
            "checkpoint architecture {} does not match its own config's architecture {}",
            checkpoint.header.arch_hash,
            store.arch_hash()
        )));
    }
    let params: BTreeMap<String, Tensor> = checkpoint
        .tensors
        .into_iter()
        .filter(|(name, _)| !name.starts_with("optim_g.") && !name.starts_with("optim_d."))
        .collect();
    store.import(&params)?;
    Ok((config, store, nets.generator))
}

/// One metrics line: the step number plus every loss component.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    #[serde(flatten)]
    pub losses: LossBundle,
}

/// What a completed run produced.
#[derive(Debug)]
pub struct RunSummary {
    pub steps_completed: usize,
    pub final_losses: Option<LossBundle>,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
}

fn load_dataset(dir: &Path, size: usize, device: &Device) -> Result<Vec<Tensor>> {
    if !dir.is_dir() {
        return Err(Error::config(format!(
            "dataset directory {} does not exist",
            dir.display()
        )));
    }
    let paths = list_images(dir)?;
    if paths.is_empty() {
        return Err(Error::config(format!(
            "dataset directory {} holds no images",
            dir.display()
        )));
    }
    paths
        .iter()
        .map(|p| load_image(p, (size, size), device))
        .collect()
}

/// Runs the full loop: loads both datasets, optionally resumes, then steps
/// to `config.steps`, appending one metrics record per step and
/// checkpointing on the configured cadence plus at the end.
pub fn run_training(config: &TrainConfig, device: &Device) -> Result<RunSummary> {
    config.validate()?;
    let contents = load_dataset(&config.content_dir, config.image_size, device)?;
    let styles = load_dataset(&config.style_dir, config.image_size, device)?;

    let mut trainer = Trainer::new(config.clone(), device)?;
    let resumed = match &config.resume_from {
        Some(path) => {
            let checkpoint = load_checkpoint(path, device)?;
            trainer.restore(&checkpoint)?;
            true
        }
        None => false,
    };

    fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(config.out_dir.display().to_string(), e))?;
    let metrics_path = config.out_dir.join("metrics.jsonl");
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(resumed)
        .truncate(!resumed)
        .write(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(metrics_path.display().to_string(), e))?;
    let checkpoint_path = config.out_dir.join("checkpoint.ckpt");

    let mut last = None;
    while trainer.step() < config.steps {
        let step_index = trainer.step() as u64;
        let batch_seed = derive_seed(config.seed, "batch", step_index);
        let mut rng = seeded_rng(batch_seed);
        let pick = |rng: &mut rand_chacha::ChaCha20Rng, pool: &[Tensor]| -> Result<Tensor> {
            let refs: Vec<Tensor> = (0..config.grid)
                .map(|_| pool[rand::Rng::gen_range(rng, 0..pool.len())].clone())
                .collect();
            let refs: Vec<&Tensor> = refs.iter().collect();
            Ok(Tensor::cat(&refs, 0)?)
        };
        let content_batch = pick(&mut rng, &contents)?;
        let style_batch = pick(&mut rng, &styles)?;

        let bundle = trainer.train_step(&content_batch, &style_batch)?;
        let record = MetricsRecord {
            step: trainer.step(),
            losses: bundle.clone(),
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::config(format!("metrics encoding: {e}")))?;
        writeln!(metrics, "{line}").map_err(|e| Error::io(metrics_path.display().to_string(), e))?;

        if trainer.step() % config.checkpoint_every == 0 || trainer.step() == config.steps {
            trainer.save_checkpoint(&checkpoint_path)?;
        }
        last = Some(bundle);
    }
    Ok(RunSummary {
        steps_completed: trainer.step(),
        final_losses: last,
        checkpoint_path,
        metrics_path,
    })
}
