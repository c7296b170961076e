//! Crossmodal VAE with per-modality perceptron encoders and decoders, the
//! credibility (α) network, and the training objectives for each fusion
//! mechanism.
//!
//! Encoded modalities are the primary input followed by the auxiliaries, in
//! configuration order. The target is decoded but never encoded.

mod noise;
mod params;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

pub use noise::{FrozenNoise, NoiseSource, RecordingNoise, RngNoise};
pub use params::ModelParams;

use crate::distributions::{
    gpoe_fuse_nodes, kl_std_normal_nodes, poe_fuse_nodes, sample_reparam_nodes, DiagonalGaussian,
    FusionWeights, GaussianNodes, DEFAULT_VARIANCE_FLOOR,
};
use crate::error::{contract, Error, Result};
use crate::numerics::{Graph, NodeId, NumArray};

/// Likelihood family of a decoded modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModalityKind {
    /// Real-valued (keypoints, points): identity output, squared error.
    Continuous,
    /// Values in [0, 1] (grids, masks): sigmoid output, binary cross-entropy.
    Binary,
}

impl ModalityKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModalityKind::Continuous => "continuous",
            ModalityKind::Binary => "binary",
        }
    }
}

impl FromStr for ModalityKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continuous" => Ok(Self::Continuous),
            "binary" => Ok(Self::Binary),
            _ => Err(contract!("unknown modality kind {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySpec {
    pub name: String,
    pub dim: usize,
    pub kind: ModalityKind,
}

impl ModalitySpec {
    pub fn new(name: impl Into<String>, dim: usize, kind: ModalityKind) -> Self {
        Self {
            name: name.into(),
            dim,
            kind,
        }
    }
}

/// What the α-network reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaInput {
    /// Penultimate activations of each fused encoder.
    Features,
    /// The raw modality values.
    Raw,
}

impl AlphaInput {
    pub fn as_str(self) -> &'static str {
        match self {
            AlphaInput::Features => "features",
            AlphaInput::Raw => "raw",
        }
    }
}

impl FromStr for AlphaInput {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "features" => Ok(Self::Features),
            "raw" => Ok(Self::Raw),
            _ => Err(contract!("unknown alpha input {s:?}")),
        }
    }
}

/// How unimodal posteriors are combined during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mechanism {
    Poe,
    Gpoe,
    Moe,
}

impl Mechanism {
    pub const ALL: [Mechanism; 3] = [Mechanism::Poe, Mechanism::Gpoe, Mechanism::Moe];

    pub fn as_str(self) -> &'static str {
        match self {
            Mechanism::Poe => "poe",
            Mechanism::Gpoe => "gpoe",
            Mechanism::Moe => "moe",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mechanism {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "poe" => Ok(Self::Poe),
            "gpoe" => Ok(Self::Gpoe),
            "moe" => Ok(Self::Moe),
            _ => Err(contract!(
                "unknown mechanism {s:?} (expected poe, gpoe or moe)"
            )),
        }
    }
}

/// Modalities, latent size and layer widths of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityConfig {
    pub input: ModalitySpec,
    pub target: ModalitySpec,
    pub aux: Vec<ModalitySpec>,
    pub latent_dim: usize,
    /// Hidden widths shared by every encoder and decoder.
    pub hidden: Vec<usize>,
    pub alpha_hidden: Vec<usize>,
    pub alpha_input: AlphaInput,
    /// Floor applied to fused variances; `None` disables it.
    pub variance_floor: Option<f64>,
}

impl ModalityConfig {
    pub fn new(input: ModalitySpec, target: ModalitySpec, aux: Vec<ModalitySpec>) -> Self {
        Self {
            input,
            target,
            aux,
            latent_dim: 8,
            hidden: vec![64],
            alpha_hidden: vec![32],
            alpha_input: AlphaInput::Features,
            variance_floor: Some(DEFAULT_VARIANCE_FLOOR),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(contract!("latent dimension must be >= 1"));
        }
        if self.hidden.contains(&0) || self.alpha_hidden.contains(&0) {
            return Err(contract!("hidden widths must be >= 1"));
        }
        let mut names: Vec<&str> = Vec::new();
        for m in self.all() {
            if m.dim == 0 {
                return Err(contract!("modality {} has dimension 0", m.name));
            }
            let valid = !m.name.is_empty()
                && m.name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
            if !valid {
                return Err(contract!(
                    "modality name {:?} must be [A-Za-z0-9_-]+",
                    m.name
                ));
            }
            if names.contains(&m.name.as_str()) {
                return Err(contract!("duplicate modality name {}", m.name));
            }
            names.push(&m.name);
        }
        if let Some(f) = self.variance_floor {
            if !(f > 0.0) {
                return Err(contract!("variance floor must be positive"));
            }
        }
        Ok(())
    }

    /// Every modality: auxiliaries, then input, then target (N + 2 in total).
    pub fn all(&self) -> impl Iterator<Item = &ModalitySpec> {
        self.aux.iter().chain([&self.input, &self.target])
    }

    /// Modalities with an encoder: the input followed by the auxiliaries.
    pub fn encoded(&self) -> impl Iterator<Item = &ModalitySpec> {
        core::iter::once(&self.input).chain(&self.aux)
    }

    /// Modalities with a decoder: the target followed by the auxiliaries.
    pub fn decoded(&self) -> impl Iterator<Item = &ModalitySpec> {
        core::iter::once(&self.target).chain(&self.aux)
    }

    /// Number of unimodal posteriors that get fused.
    pub fn fused_count(&self) -> usize {
        1 + self.aux.len()
    }

    fn encoder(&self, name: &str) -> Result<&ModalitySpec> {
        self.encoded()
            .find(|m| m.name == name)
            .ok_or_else(|| contract!("no encoder for modality {name:?}"))
    }

    fn decoder(&self, name: &str) -> Result<&ModalitySpec> {
        self.decoded()
            .find(|m| m.name == name)
            .ok_or_else(|| contract!("no decoder for modality {name:?}"))
    }

    fn feature_dim(&self, m: &ModalitySpec) -> usize {
        match self.alpha_input {
            AlphaInput::Raw => m.dim,
            AlphaInput::Features => *self.hidden.last().unwrap_or(&m.dim),
        }
    }
}

/// Aligned rows of every modality for one minibatch. Each entry is a
/// `[batch, dim]` matrix; `None` marks a modality that was not observed.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityBatch {
    pub input: Option<NumArray>,
    pub target: Option<NumArray>,
    pub aux: Vec<Option<NumArray>>,
    /// Per-row flag: the row was corrupted by noise injection.
    pub corrupted: Vec<bool>,
}

impl ModalityBatch {
    pub fn complete(input: NumArray, target: NumArray, aux: Vec<NumArray>) -> Result<Self> {
        let rows = input.dims2()?.0;
        Ok(Self {
            input: Some(input),
            target: Some(target),
            aux: aux.into_iter().map(Some).collect(),
            corrupted: vec![false; rows],
        })
    }

    pub fn rows(&self) -> usize {
        self.input
            .as_ref()
            .or(self.target.as_ref())
            .map(|a| a.shape()[0])
            .unwrap_or(0)
    }
}

/// Decomposition of the minimized objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub target_recon: f64,
    pub aux_recon: f64,
    pub kl: f64,
    pub total: f64,
    pub beta: f64,
}

impl LossBreakdown {
    /// `|total - (target_recon + aux_recon + beta * kl)|`
    pub fn additivity_gap(&self) -> f64 {
        (self.total - (self.target_recon + self.aux_recon + self.beta * self.kl)).abs()
    }

    fn check_finite(&self) -> Result<()> {
        for (name, v) in [
            ("target_recon", self.target_recon),
            ("aux_recon", self.aux_recon),
            ("kl", self.kl),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("loss term {name} is {v}")));
            }
        }
        Ok(())
    }
}

/// Scalar nodes of a loss built inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub target_recon: NodeId,
    pub aux_recon: NodeId,
    pub kl: NodeId,
    pub total: NodeId,
    pub beta: f64,
}

impl LossNodes {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            target_recon: g.scalar(self.target_recon),
            aux_recon: g.scalar(self.aux_recon),
            kl: g.scalar(self.kl),
            total: g.scalar(self.total),
            beta: self.beta,
        }
    }
}

/// Parameters entered into a graph as leaves, in registry order.
pub struct BoundParams<'p> {
    params: &'p ModelParams,
    ids: Vec<NodeId>,
}

impl BoundParams<'_> {
    pub fn node(&self, name: &str) -> Result<NodeId> {
        Ok(self.ids[self.params.position(name)?])
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }
}

/// Output of one encoder pass.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub posterior: GaussianNodes,
    /// Penultimate activations (the raw input when there are no hidden layers).
    pub features: NodeId,
}

/// Output of one decoder pass.
#[derive(Debug, Clone, Copy)]
pub struct Decoded {
    /// Pre-activation of the output layer.
    pub logits: NodeId,
    /// Reconstruction in data space.
    pub output: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModalityConfig,
}

impl Model {
    pub fn new(config: ModalityConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &ModalityConfig {
        &self.config
    }

    /// Fan-in uniform weights, zero biases, zero log-variance heads.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ModelParams> {
        let c = &self.config;
        let l = c.latent_dim;
        let mut p = ModelParams::new();
        for m in c.encoded() {
            let width = mlp_params(&mut p, rng, &format!("enc.{}", m.name), m.dim, &c.hidden)?;
            dense(&mut p, rng, &format!("enc.{}.mu", m.name), width, l, false)?;
            dense(
                &mut p,
                rng,
                &format!("enc.{}.logvar", m.name),
                width,
                l,
                true,
            )?;
        }
        for m in c.decoded() {
            let width = mlp_params(&mut p, rng, &format!("dec.{}", m.name), l, &c.hidden)?;
            dense(
                &mut p,
                rng,
                &format!("dec.{}.out", m.name),
                width,
                m.dim,
                false,
            )?;
        }
        let alpha_in: usize = c.encoded().map(|m| c.feature_dim(m)).sum();
        let width = mlp_params(&mut p, rng, "alpha", alpha_in, &c.alpha_hidden)?;
        dense(&mut p, rng, "alpha.out", width, c.fused_count() * l, false)?;
        Ok(p)
    }

    /// Enters every parameter into `g` as a leaf.
    pub fn bind<'p>(&self, g: &mut Graph, params: &'p ModelParams) -> BoundParams<'p> {
        let ids = params.arrays().iter().map(|a| g.leaf(a.clone())).collect();
        BoundParams { params, ids }
    }

    fn linear(&self, g: &mut Graph, b: &BoundParams, prefix: &str, x: NodeId) -> Result<NodeId> {
        let w = b.node(&format!("{prefix}.w"))?;
        let bias = b.node(&format!("{prefix}.b"))?;
        let xw = g.matmul(x, w)?;
        g.add_row(xw, bias)
    }

    fn hidden_stack(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        prefix: &str,
        widths: usize,
        mut h: NodeId,
    ) -> Result<NodeId> {
        for i in 0..widths {
            let pre = self.linear(g, b, &format!("{prefix}.h{i}"), h)?;
            h = g.softplus(pre);
        }
        Ok(h)
    }

    pub fn encode_nodes(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        which: &str,
        input: NodeId,
    ) -> Result<Encoded> {
        let spec = self.config.encoder(which)?;
        check_width(g, input, spec)?;
        let prefix = format!("enc.{which}");
        let features = self.hidden_stack(g, b, &prefix, self.config.hidden.len(), input)?;
        let mean = self.linear(g, b, &format!("{prefix}.mu"), features)?;
        let log_var = self.linear(g, b, &format!("{prefix}.logvar"), features)?;
        let posterior = GaussianNodes::from_log_var(g, mean, log_var)?;
        Ok(Encoded {
            posterior,
            features,
        })
    }

    pub fn decode_nodes(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        which: &str,
        z: NodeId,
    ) -> Result<Decoded> {
        let spec = self.config.decoder(which)?;
        let l = self.config.latent_dim;
        if g.shape(z).len() != 2 || g.shape(z)[1] != l {
            return Err(contract!(
                "latent has shape {:?}, expected [batch, {l}]",
                g.shape(z)
            ));
        }
        let prefix = format!("dec.{which}");
        let h = self.hidden_stack(g, b, &prefix, self.config.hidden.len(), z)?;
        let logits = self.linear(g, b, &format!("{prefix}.out"), h)?;
        let output = match spec.kind {
            ModalityKind::Continuous => logits,
            ModalityKind::Binary => g.sigmoid(logits),
        };
        Ok(Decoded { logits, output })
    }

    /// Per-modality weight tensors, each `[batch, latent]`, from the inputs
    /// the α-network reads (one per encoded modality, in encoder order).
    pub fn alpha_nodes(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        inputs: &[NodeId],
    ) -> Result<Vec<NodeId>> {
        let m = self.config.fused_count();
        let l = self.config.latent_dim;
        if inputs.len() != m {
            return Err(contract!(
                "α-network needs {m} inputs, got {}",
                inputs.len()
            ));
        }
        let joined = g.concat(inputs, 1)?;
        let h = self.hidden_stack(g, b, "alpha", self.config.alpha_hidden.len(), joined)?;
        let logits = self.linear(g, b, "alpha.out", h)?;
        let rows = g.shape(logits)[0];
        let cube = g.reshape(logits, &[rows, m, l])?;
        let weights = g.softmax(cube, 1)?;
        (0..m)
            .map(|i| {
                let s = g.slice(weights, 1, i, 1)?;
                g.reshape(s, &[rows, l])
            })
            .collect()
    }

    /// Mean over batch rows and modality dimensions of squared error
    /// (continuous) or cross-entropy from logits (binary).
    fn reconstruction(
        &self,
        g: &mut Graph,
        spec: &ModalitySpec,
        decoded: Decoded,
        truth: NodeId,
    ) -> Result<NodeId> {
        let count = g.value(truth).len() as f64;
        let per_elem = match spec.kind {
            ModalityKind::Continuous => {
                let d = g.sub(decoded.output, truth)?;
                g.square(d)
            }
            ModalityKind::Binary => {
                // -[t ln σ(l) + (1 - t) ln(1 - σ(l))] = softplus(l) - t·l
                let sp = g.softplus(decoded.logits);
                let tl = g.mul(truth, decoded.logits)?;
                g.sub(sp, tl)?
            }
        };
        let total = g.sum(per_elem);
        Ok(g.scale(total, 1.0 / count))
    }

    fn recon_from(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        spec: &ModalitySpec,
        truth: NodeId,
        latents: &[NodeId],
    ) -> Result<NodeId> {
        let mut acc: Option<NodeId> = None;
        for &z in latents {
            let d = self.decode_nodes(g, b, &spec.name, z)?;
            let r = self.reconstruction(g, spec, d, truth)?;
            acc = Some(match acc {
                Some(a) => g.add(a, r)?,
                None => r,
            });
        }
        acc.ok_or_else(|| contract!("no latents to reconstruct from"))
    }

    fn batch_leaves(&self, g: &mut Graph, batch: &ModalityBatch) -> Result<BatchNodes> {
        let c = &self.config;
        let rows = batch.rows();
        if rows == 0 {
            return Err(contract!("empty batch"));
        }
        let leaf = |g: &mut Graph, a: &Option<NumArray>, spec: &ModalitySpec| {
            let a = a
                .as_ref()
                .ok_or_else(|| contract!("modality {} missing from batch", spec.name))?;
            if a.shape() != [rows, spec.dim] {
                return Err(contract!(
                    "modality {} has shape {:?}, expected [{rows}, {}]",
                    spec.name,
                    a.shape(),
                    spec.dim
                ));
            }
            Ok(g.leaf(a.clone()))
        };
        let input = leaf(g, &batch.input, &c.input)?;
        let target = leaf(g, &batch.target, &c.target)?;
        if batch.aux.len() != c.aux.len() {
            return Err(contract!(
                "batch has {} auxiliary slots, config has {}",
                batch.aux.len(),
                c.aux.len()
            ));
        }
        let aux = batch
            .aux
            .iter()
            .zip(&c.aux)
            .map(|(a, s)| leaf(g, a, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(BatchNodes {
            rows,
            input,
            target,
            aux,
        })
    }

    fn encode_all(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        nodes: &BatchNodes,
    ) -> Result<Vec<Encoded>> {
        let mut out = Vec::with_capacity(self.config.fused_count());
        out.push(self.encode_nodes(g, b, &self.config.input.name, nodes.input)?);
        for (spec, &a) in self.config.aux.iter().zip(&nodes.aux) {
            out.push(self.encode_nodes(g, b, &spec.name, a)?);
        }
        Ok(out)
    }

    fn alpha_inputs(&self, encoded: &[Encoded], nodes: &BatchNodes) -> Vec<NodeId> {
        match self.config.alpha_input {
            AlphaInput::Features => encoded.iter().map(|e| e.features).collect(),
            AlphaInput::Raw => core::iter::once(nodes.input)
                .chain(nodes.aux.iter().copied())
                .collect(),
        }
    }

    fn draw(&self, g: &mut Graph, rows: usize, noise: &mut dyn NoiseSource) -> Result<NodeId> {
        let eps = noise.standard_normal(&[rows, self.config.latent_dim])?;
        Ok(g.leaf(eps))
    }

    /// Builds the product-family objective (target, auxiliary and KL terms
    /// with a fused joint latent) inside `g`.
    ///
    /// Noise is drawn in the order: joint, input, then each auxiliary.
    pub fn loss_nodes(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        batch: &ModalityBatch,
        beta: f64,
        mechanism: Mechanism,
        noise: &mut dyn NoiseSource,
    ) -> Result<LossNodes> {
        check_beta(beta)?;
        let nodes = self.batch_leaves(g, batch)?;
        let encoded = self.encode_all(g, b, &nodes)?;
        let experts: Vec<GaussianNodes> = encoded.iter().map(|e| e.posterior).collect();
        let floor = self.config.variance_floor;
        let joint = match mechanism {
            Mechanism::Poe => poe_fuse_nodes(g, &experts, floor)?,
            Mechanism::Gpoe => {
                let inputs = self.alpha_inputs(&encoded, &nodes);
                let alphas = self.alpha_nodes(g, b, &inputs)?;
                gpoe_fuse_nodes(g, &experts, &alphas, floor)?
            }
            Mechanism::Moe => {
                return Err(contract!(
                    "the fused objective takes poe or gpoe; use moe_elbo"
                ))
            }
        };

        let mut latents = Vec::with_capacity(1 + experts.len());
        for post in core::iter::once(&joint).chain(&experts) {
            let eps = self.draw(g, nodes.rows, noise)?;
            latents.push(sample_reparam_nodes(g, post, eps)?);
        }

        let target_recon = self.recon_from(g, b, &self.config.target, nodes.target, &latents)?;
        let aux_recon = self.sum_aux_recon(g, b, &nodes, &latents)?;
        let mut kl = kl_std_normal_nodes(g, &experts[0])?;
        for e in &experts[1..] {
            let k = kl_std_normal_nodes(g, e)?;
            kl = g.add(kl, k)?;
        }
        let kl = g.scale(kl, 1.0 / nodes.rows as f64);
        self.finish(g, target_recon, aux_recon, kl, beta)
    }

    fn sum_aux_recon(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        nodes: &BatchNodes,
        latents: &[NodeId],
    ) -> Result<NodeId> {
        let mut acc: Option<NodeId> = None;
        for (spec, &truth) in self.config.aux.iter().zip(&nodes.aux) {
            let r = self.recon_from(g, b, spec, truth, latents)?;
            acc = Some(match acc {
                Some(a) => g.add(a, r)?,
                None => r,
            });
        }
        Ok(match acc {
            Some(a) => a,
            None => g.leaf(NumArray::scalar(0.0)),
        })
    }

    fn finish(
        &self,
        g: &mut Graph,
        target_recon: NodeId,
        aux_recon: NodeId,
        kl: NodeId,
        beta: f64,
    ) -> Result<LossNodes> {
        let recon = g.add(target_recon, aux_recon)?;
        let weighted = g.scale(kl, beta);
        let total = g.add(recon, weighted)?;
        let nodes = LossNodes {
            target_recon,
            aux_recon,
            kl,
            total,
            beta,
        };
        nodes.breakdown(g).check_finite()?;
        Ok(nodes)
    }

    /// Builds the mixture objective: the average over encoded modalities of
    /// (reconstruction of every decoded modality from that modality's latent
    /// + β·KL of its posterior).
    ///
    /// Noise is drawn once per encoded modality, in encoder order.
    pub fn moe_nodes(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        batch: &ModalityBatch,
        beta: f64,
        noise: &mut dyn NoiseSource,
    ) -> Result<LossNodes> {
        check_beta(beta)?;
        let nodes = self.batch_leaves(g, batch)?;
        let encoded = self.encode_all(g, b, &nodes)?;
        let scale = 1.0 / encoded.len() as f64;
        let mut terms: Option<(NodeId, NodeId, NodeId)> = None;
        for e in &encoded {
            let eps = self.draw(g, nodes.rows, noise)?;
            let z = sample_reparam_nodes(g, &e.posterior, eps)?;
            let t = self.recon_from(g, b, &self.config.target, nodes.target, &[z])?;
            let a = self.sum_aux_recon(g, b, &nodes, &[z])?;
            let k = kl_std_normal_nodes(g, &e.posterior)?;
            terms = Some(match terms {
                None => (t, a, k),
                Some((t0, a0, k0)) => (g.add(t0, t)?, g.add(a0, a)?, g.add(k0, k)?),
            });
        }
        let (t, a, k) = terms.ok_or_else(|| contract!("no encoded modalities"))?;
        let target_recon = g.scale(t, scale);
        let aux_recon = g.scale(a, scale);
        let kl = g.scale(k, scale / nodes.rows as f64);
        self.finish(g, target_recon, aux_recon, kl, beta)
    }

    /// Builds the objective for any mechanism.
    pub fn objective_nodes(
        &self,
        g: &mut Graph,
        b: &BoundParams,
        batch: &ModalityBatch,
        beta: f64,
        mechanism: Mechanism,
        noise: &mut dyn NoiseSource,
    ) -> Result<LossNodes> {
        match mechanism {
            Mechanism::Moe => self.moe_nodes(g, b, batch, beta, noise),
            m => self.loss_nodes(g, b, batch, beta, m, noise),
        }
    }

    /// Evaluates the fused objective (PoE or gPoE).
    pub fn loss_total(
        &self,
        params: &ModelParams,
        batch: &ModalityBatch,
        beta: f64,
        mechanism: Mechanism,
        noise: &mut dyn NoiseSource,
    ) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, params);
        Ok(self
            .loss_nodes(&mut g, &b, batch, beta, mechanism, noise)?
            .breakdown(&g))
    }

    /// Evaluates the mixture-of-experts objective.
    pub fn moe_elbo(
        &self,
        params: &ModelParams,
        batch: &ModalityBatch,
        beta: f64,
        noise: &mut dyn NoiseSource,
    ) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, params);
        Ok(self
            .moe_nodes(&mut g, &b, batch, beta, noise)?
            .breakdown(&g))
    }

    /// Objective value and its gradient with respect to every parameter, in
    /// registry order.
    pub fn objective_with_grad(
        &self,
        params: &ModelParams,
        batch: &ModalityBatch,
        beta: f64,
        mechanism: Mechanism,
        noise: &mut dyn NoiseSource,
    ) -> Result<(LossBreakdown, Vec<NumArray>)> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, params);
        let loss = self.objective_nodes(&mut g, &b, batch, beta, mechanism, noise)?;
        let mut grads = g.backward(loss.total)?;
        let out = b
            .ids()
            .iter()
            .map(|&id| {
                grads
                    .take(id)
                    .expect("parameter leaves always receive gradients")
            })
            .collect();
        Ok((loss.breakdown(&g), out))
    }

    /// Row-wise posteriors of one encoded modality.
    pub fn encode(
        &self,
        params: &ModelParams,
        which: &str,
        values: &NumArray,
    ) -> Result<Vec<DiagonalGaussian>> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, params);
        let x = g.leaf(values.clone());
        let e = self.encode_nodes(&mut g, &b, which, x)?;
        (0..values.shape()[0])
            .map(|r| e.posterior.to_gaussian(&g, r))
            .collect()
    }

    /// Decodes `[batch, latent]` codes into modality `which`.
    pub fn decode(&self, params: &ModelParams, which: &str, z: &NumArray) -> Result<NumArray> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, params);
        let zn = g.leaf(z.clone());
        let d = self.decode_nodes(&mut g, &b, which, zn)?;
        Ok(g.value(d.output).clone())
    }

    /// Per-row fusion weights. Every encoded modality must be present.
    pub fn alpha_weights(
        &self,
        params: &ModelParams,
        batch: &ModalityBatch,
    ) -> Result<Vec<FusionWeights>> {
        let c = &self.config;
        let mut g = Graph::new();
        let b = self.bind(&mut g, params);
        let mut encoded_inputs = Vec::with_capacity(c.fused_count());
        let present =
            core::iter::once((&batch.input, &c.input)).chain(batch.aux.iter().zip(&c.aux));
        if batch.aux.len() != c.aux.len() {
            return Err(contract!(
                "batch has {} auxiliary slots, config has {}",
                batch.aux.len(),
                c.aux.len()
            ));
        }
        for (values, spec) in present {
            let values = values
                .as_ref()
                .ok_or_else(|| contract!("α needs modality {}, which is missing", spec.name))?;
            let leaf = g.leaf(values.clone());
            let input = match c.alpha_input {
                AlphaInput::Raw => {
                    check_width(&g, leaf, spec)?;
                    leaf
                }
                AlphaInput::Features => self.encode_nodes(&mut g, &b, &spec.name, leaf)?.features,
            };
            encoded_inputs.push(input);
        }
        let alphas = self.alpha_nodes(&mut g, &b, &encoded_inputs)?;
        (0..batch.rows())
            .map(|r| {
                let rows: Vec<&[f64]> = alphas.iter().map(|&a| g.value(a).row_slice(r)).collect();
                FusionWeights::new(&rows)
            })
            .collect()
    }

    /// Test-time prediction from the primary modality alone: decode the
    /// posterior mean of `q(z | input)` into the target.
    pub fn infer_unimodal(&self, params: &ModelParams, input: &NumArray) -> Result<NumArray> {
        params.check_finite()?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, params);
        let x = g.leaf(input.clone());
        let e = self.encode_nodes(&mut g, &b, &self.config.input.name, x)?;
        let d = self.decode_nodes(&mut g, &b, &self.config.target.name, e.posterior.mean)?;
        let out = g.value(d.output);
        if !out.all_finite() {
            return Err(Error::Numeric("unimodal prediction is not finite".into()));
        }
        Ok(out.clone())
    }
}

struct BatchNodes {
    rows: usize,
    input: NodeId,
    target: NodeId,
    aux: Vec<NodeId>,
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(contract!("beta must be finite and >= 0, got {beta}"));
    }
    Ok(())
}

fn check_width(g: &Graph, x: NodeId, spec: &ModalitySpec) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 2 || s[1] != spec.dim {
        return Err(contract!(
            "modality {} has shape {s:?}, expected [batch, {}]",
            spec.name,
            spec.dim
        ));
    }
    Ok(())
}

fn dense<R: Rng + ?Sized>(
    p: &mut ModelParams,
    rng: &mut R,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    zero: bool,
) -> Result<()> {
    let bound = 1.0 / libm::sqrt(fan_in as f64);
    let w: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| {
            if zero {
                0.0
            } else {
                rng.random_range(-bound..bound)
            }
        })
        .collect();
    p.insert(
        format!("{prefix}.w"),
        NumArray::new(vec![fan_in, fan_out], w)?,
    )?;
    p.insert(format!("{prefix}.b"), NumArray::zeros(&[fan_out])?)
}

fn mlp_params<R: Rng + ?Sized>(
    p: &mut ModelParams,
    rng: &mut R,
    prefix: &str,
    input: usize,
    hidden: &[usize],
) -> Result<usize> {
    let mut width = input;
    for (i, &h) in hidden.iter().enumerate() {
        dense(p, rng, &format!("{prefix}.h{i}"), width, h, false)?;
        width = h;
    }
    Ok(width)
}
