//! The two-part navigation agent: a small convolutional perception network
//! that compresses each RGB frame into a low-dimensional latent, and a
//! recurrent inference network (LSTM cell plus actor/critic heads) that turns
//! the latent stream into action logits and a value estimate.
//!
//! The split is the load-bearing design choice of the whole project: the
//! perception half is the only part that is adapted to a changed embodiment,
//! while the inference half stays frozen. Parameter names are prefixed
//! `perception.` / `inference.` so callers can select either half by name.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{
    load_checkpoint, save_checkpoint, CheckpointError, ParamSet, Scalar, Tape, TensorData,
    TensorError, Var,
};
use crate::worldsim::{Action, Image};

/// Architecture hyperparameters. Everything the checkpoint loader needs to
/// rebuild the exact parameter shapes lives here, and the manifest JSON next
/// to each checkpoint is a serialized copy of this struct.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyArch {
    /// Width of the perception output. Two is enough for this task family
    /// and keeps the latent plottable; the ablation sweeps larger values.
    pub latent_dim: usize,
    pub conv_channels: [usize; 3],
    pub conv_kernels: [usize; 3],
    pub conv_stride: usize,
    /// LSTM hidden width shared by the actor and critic heads.
    pub hidden: usize,
    pub image_width: usize,
    pub image_height: usize,
    /// When set, the inference net consumes the frame latent concatenated
    /// with a target-embedding latent (doubling the LSTM input width).
    #[serde(default)]
    pub target_embedding: bool,
}

impl Default for PolicyArch {
    fn default() -> Self {
        PolicyArch {
            latent_dim: 2,
            conv_channels: [8, 16, 16],
            conv_kernels: [5, 3, 3],
            conv_stride: 2,
            hidden: 128,
            image_width: 64,
            image_height: 48,
            target_embedding: false,
        }
    }
}

impl PolicyArch {
    fn conv_out(input: usize, kernel: usize, stride: usize) -> Option<usize> {
        if input < kernel || stride == 0 {
            return None;
        }
        Some((input - kernel) / stride + 1)
    }

    /// (height, width) after the full conv stack.
    pub fn conv_output_dims(&self) -> Result<(usize, usize), PolicyError> {
        let (mut h, mut w) = (self.image_height, self.image_width);
        for i in 0..3 {
            h = Self::conv_out(h, self.conv_kernels[i], self.conv_stride)
                .ok_or_else(|| self.bad_dims())?;
            w = Self::conv_out(w, self.conv_kernels[i], self.conv_stride)
                .ok_or_else(|| self.bad_dims())?;
        }
        Ok((h, w))
    }

    /// Flattened feature length feeding the projection layer.
    pub fn flat_len(&self) -> Result<usize, PolicyError> {
        let (h, w) = self.conv_output_dims()?;
        Ok(self.conv_channels[2] * h * w)
    }

    /// Width of the LSTM input: the frame latent, plus the target embedding
    /// when that variant is enabled.
    pub fn infer_input_dim(&self) -> usize {
        self.latent_dim * if self.target_embedding { 2 } else { 1 }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.latent_dim == 0 || self.hidden == 0 {
            return Err(PolicyError::BadArch("latent_dim and hidden must be positive".into()));
        }
        self.flat_len().map(|_| ())
    }

    fn bad_dims(&self) -> PolicyError {
        PolicyError::BadArch(format!(
            "image {}x{} collapses under conv kernels {:?} stride {}",
            self.image_width, self.image_height, self.conv_kernels, self.conv_stride
        ))
    }
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid architecture: {0}")]
    BadArch(String),
    #[error("expected {expected_w}x{expected_h} image, got {got_w}x{got_h}")]
    BadImage { expected_w: usize, expected_h: usize, got_w: usize, got_h: usize },
    #[error("expected latent of length {expected}, got {got}")]
    BadLatent { expected: usize, got: usize },
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest parse error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Recurrent state for one episode: zeroed at episode start, carried across
/// steps, never shared between episodes.
#[derive(Debug, Clone)]
pub struct AgentState {
    pub h: TensorData<f32>,
    pub c: TensorData<f32>,
}

impl AgentState {
    pub fn zeroed(arch: &PolicyArch) -> Self {
        AgentState {
            h: TensorData::zeros(&[1, arch.hidden]),
            c: TensorData::zeros(&[1, arch.hidden]),
        }
    }
}

/// How `act` turns logits into an action.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    /// Sample from softmax(logits) — used during training rollouts.
    Stochastic,
    /// Argmax with ties broken toward the lowest action index — used at
    /// evaluation time so runs are reproducible.
    Greedy,
}

/// Result of one `act` call.
#[derive(Debug, Clone)]
pub struct ActOutcome {
    pub action: Action,
    pub log_prob: f32,
    pub value: f32,
    pub latent: Vec<f32>,
    pub state: AgentState,
}

/// Tape handles for every parameter tensor, in canonical order.
#[derive(Debug, Clone, Copy)]
pub struct PolicyVars {
    pub conv_w: [Var; 3],
    pub conv_b: [Var; 3],
    pub proj_w: Var,
    pub proj_b: Var,
    pub lstm_w_ih: Var,
    pub lstm_w_hh: Var,
    pub lstm_b: Var,
    pub actor_w: Var,
    pub actor_b: Var,
    pub critic_w: Var,
    pub critic_b: Var,
}

/// Output of one inference-network step on the tape.
#[derive(Debug, Clone, Copy)]
pub struct InferStep {
    pub logits: Var,
    pub value: Var,
    pub h: Var,
    pub c: Var,
}

/// Canonical parameter names in flatten order.
pub const PARAM_NAMES: [&str; 15] = [
    "perception.conv1.w",
    "perception.conv1.b",
    "perception.conv2.w",
    "perception.conv2.b",
    "perception.conv3.w",
    "perception.conv3.b",
    "perception.proj.w",
    "perception.proj.b",
    "inference.lstm.w_ih",
    "inference.lstm.w_hh",
    "inference.lstm.b",
    "inference.actor.w",
    "inference.actor.b",
    "inference.critic.w",
    "inference.critic.b",
];

pub fn is_perception_param(name: &str) -> bool {
    name.starts_with("perception.")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PolicyManifest {
    version: u32,
    arch: PolicyArch,
}

const MANIFEST_VERSION: u32 = 1;

/// The full agent: architecture plus one `ParamSet` holding both halves.
#[derive(Debug, Clone)]
pub struct Policy {
    arch: PolicyArch,
    params: ParamSet<f32>,
}

impl Policy {
    /// Fresh policy with seeded uniform fan-in init (biases zero, LSTM
    /// forget-gate bias one — the usual trick so early memories survive).
    pub fn new(arch: PolicyArch, seed: u64) -> Result<Self, PolicyError> {
        let mut policy = Self::zeroed(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x504f_4c49_4359_u64);
        let shapes: Vec<(String, Vec<usize>)> = policy
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect();
        for (name, shape) in shapes {
            let tensor = if name.ends_with(".b") || name.ends_with("lstm.b") {
                Self::init_bias(&name, &shape, policy.arch.hidden)
            } else {
                Self::init_weight(&mut rng, &shape)
            };
            policy.params.set(&name, tensor)?;
        }
        Ok(policy)
    }

    /// All-zero parameters with the canonical shapes; also the shape template
    /// the checkpoint loader validates against.
    pub fn zeroed(arch: PolicyArch) -> Result<Self, PolicyError> {
        arch.validate()?;
        let flat = arch.flat_len()?;
        let [c1, c2, c3] = arch.conv_channels;
        let [k1, k2, k3] = arch.conv_kernels;
        let (l, h) = (arch.latent_dim, arch.hidden);
        let shapes: [(&str, Vec<usize>); 15] = [
            (PARAM_NAMES[0], vec![c1, 3, k1, k1]),
            (PARAM_NAMES[1], vec![c1]),
            (PARAM_NAMES[2], vec![c2, c1, k2, k2]),
            (PARAM_NAMES[3], vec![c2]),
            (PARAM_NAMES[4], vec![c3, c2, k3, k3]),
            (PARAM_NAMES[5], vec![c3]),
            (PARAM_NAMES[6], vec![l, flat]),
            (PARAM_NAMES[7], vec![l]),
            (PARAM_NAMES[8], vec![4 * h, arch.infer_input_dim()]),
            (PARAM_NAMES[9], vec![4 * h, h]),
            (PARAM_NAMES[10], vec![4 * h]),
            (PARAM_NAMES[11], vec![Action::COUNT, h]),
            (PARAM_NAMES[12], vec![Action::COUNT]),
            (PARAM_NAMES[13], vec![1, h]),
            (PARAM_NAMES[14], vec![1]),
        ];
        let mut params = ParamSet::new();
        for (name, shape) in shapes {
            params.insert(name, TensorData::zeros(&shape))?;
        }
        Ok(Policy { arch, params })
    }

    fn init_weight(rng: &mut ChaCha8Rng, shape: &[usize]) -> TensorData<f32> {
        // fan_in = product of all dims after the output-channel axis.
        let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
        let bound = (1.0 / fan_in as f64).sqrt();
        let data: Vec<f32> =
            (0..shape.iter().product::<usize>()).map(|_| (rng.gen::<f64>() * 2.0 * bound - bound) as f32).collect();
        TensorData::new(shape.to_vec(), data)
    }

    fn init_bias(name: &str, shape: &[usize], hidden: usize) -> TensorData<f32> {
        let mut data = vec![0.0f32; shape.iter().product()];
        if name == "inference.lstm.b" {
            // Gate order i, f, g, o: forget-gate block gets +1.
            for x in &mut data[hidden..2 * hidden] {
                *x = 1.0;
            }
        }
        TensorData::new(shape.to_vec(), data)
    }

    pub fn arch(&self) -> &PolicyArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<f32> {
        &mut self.params
    }

    /// The perception half (conv stack + projection) as its own set, in
    /// canonical order. This is the piece adaptation methods retrain.
    pub fn perception_params(&self) -> ParamSet<f32> {
        let mut out = ParamSet::new();
        for (name, tensor) in self.params.iter() {
            if is_perception_param(name) {
                out.insert(name, tensor.clone()).expect("canonical names are unique");
            }
        }
        out
    }

    /// The frozen inference half (LSTM + heads), for byte-identity checks.
    pub fn inference_params(&self) -> ParamSet<f32> {
        let mut out = ParamSet::new();
        for (name, tensor) in self.params.iter() {
            if !is_perception_param(name) {
                out.insert(name, tensor.clone()).expect("canonical names are unique");
            }
        }
        out
    }

    /// Full parameter set with the perception half replaced by `perception`
    /// (which must hold exactly the canonical perception tensors).
    pub fn merged_params(&self, perception: &ParamSet<f32>) -> Result<ParamSet<f32>, PolicyError> {
        let expected = PARAM_NAMES.iter().filter(|n| is_perception_param(n)).count();
        if perception.len() != expected {
            return Err(PolicyError::Manifest(format!(
                "perception set has {} tensors, expected {expected}",
                perception.len()
            )));
        }
        let mut out = ParamSet::new();
        for (name, tensor) in self.params.iter() {
            let chosen = if is_perception_param(name) {
                perception.get(name).ok_or_else(|| {
                    PolicyError::Manifest(format!("perception set is missing {name}"))
                })?
            } else {
                tensor
            };
            if chosen.shape() != tensor.shape() {
                return Err(PolicyError::Manifest(format!(
                    "perception tensor {name} has shape {:?}, expected {:?}",
                    chosen.shape(),
                    tensor.shape()
                )));
            }
            out.insert(name, chosen.clone()).expect("canonical names are unique");
        }
        Ok(out)
    }

    /// A copy of this policy with the perception half swapped out.
    pub fn with_perception(&self, perception: &ParamSet<f32>) -> Result<Policy, PolicyError> {
        Ok(Policy { arch: self.arch.clone(), params: self.merged_params(perception)? })
    }

    /// Replaces the parameter set (shapes must match the architecture).
    pub fn set_params(&mut self, params: ParamSet<f32>) -> Result<(), PolicyError> {
        let expected = Self::zeroed(self.arch.clone())?;
        for (name, tensor) in params.iter() {
            let want = expected
                .params
                .get(name)
                .ok_or_else(|| PolicyError::Manifest(format!("unexpected parameter {name}")))?;
            if want.shape() != tensor.shape() {
                return Err(PolicyError::Manifest(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    tensor.shape(),
                    want.shape()
                )));
            }
        }
        if params.len() != expected.params.len() {
            return Err(PolicyError::Manifest("parameter count mismatch".into()));
        }
        self.params = params;
        Ok(())
    }

    /// Registers every parameter on the tape. `trainable` decides
    /// per-parameter whether gradients flow (frozen halves become constants).
    pub fn bind_filtered<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        trainable: impl Fn(&str) -> bool,
    ) -> PolicyVars {
        self.bind_set_filtered(&self.params, tape, trainable)
    }

    /// Same as [`Policy::bind_filtered`] but over an externally supplied
    /// parameter set (the adapted copies used by the meta inner loop).
    pub fn bind_set_filtered<S: Scalar>(
        &self,
        params: &ParamSet<f32>,
        tape: &mut Tape<S>,
        trainable: impl Fn(&str) -> bool,
    ) -> PolicyVars {
        let mut vars = Vec::with_capacity(PARAM_NAMES.len());
        for (name, tensor) in params.iter() {
            let value = tensor.cast::<S>();
            let var = if trainable(name) { tape.param(value) } else { tape.constant(value) };
            vars.push(var);
        }
        PolicyVars {
            conv_w: [vars[0], vars[2], vars[4]],
            conv_b: [vars[1], vars[3], vars[5]],
            proj_w: vars[6],
            proj_b: vars[7],
            lstm_w_ih: vars[8],
            lstm_w_hh: vars[9],
            lstm_b: vars[10],
            actor_w: vars[11],
            actor_b: vars[12],
            critic_w: vars[13],
            critic_b: vars[14],
        }
    }

    pub fn bind<S: Scalar>(&self, tape: &mut Tape<S>, trainable: bool) -> PolicyVars {
        self.bind_filtered(tape, |_| trainable)
    }

    /// Perception forward: [N, 3, H, W] pixels in [0,1] -> [N, latent_dim].
    pub fn perceive_vars<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        vars: &PolicyVars,
        images: Var,
    ) -> Result<Var, TensorError> {
        let mut x = images;
        for i in 0..3 {
            x = tape.conv2d(x, vars.conv_w[i], vars.conv_b[i], self.arch.conv_stride)?;
            x = tape.relu(x);
        }
        let n = tape.shape(x)[0];
        let flat: usize = tape.shape(x)[1..].iter().product();
        let x = tape.reshape(x, vec![n, flat])?;
        tape.linear(x, vars.proj_w, vars.proj_b)
    }

    /// One inference-network step: latent [N, latent_dim] and state [N, H]
    /// -> logits [N, 4], value [N, 1], advanced state.
    pub fn infer_vars<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        vars: &PolicyVars,
        latent: Var,
        h: Var,
        c: Var,
    ) -> Result<InferStep, TensorError> {
        let hidden = self.arch.hidden;
        let packed = tape.lstm_cell(latent, h, c, vars.lstm_w_ih, vars.lstm_w_hh, vars.lstm_b)?;
        let h_next = tape.narrow(packed, 1, 0, hidden)?;
        let c_next = tape.narrow(packed, 1, hidden, hidden)?;
        let logits = tape.linear(h_next, vars.actor_w, vars.actor_b)?;
        let value = tape.linear(h_next, vars.critic_w, vars.critic_b)?;
        Ok(InferStep { logits, value, h: h_next, c: c_next })
    }

    fn check_image(&self, image: &Image) -> Result<(), PolicyError> {
        if image.width != self.arch.image_width || image.height != self.arch.image_height {
            return Err(PolicyError::BadImage {
                expected_w: self.arch.image_width,
                expected_h: self.arch.image_height,
                got_w: image.width,
                got_h: image.height,
            });
        }
        Ok(())
    }

    /// Single-frame perception convenience.
    pub fn perceive(&self, image: &Image) -> Result<Vec<f32>, PolicyError> {
        self.check_image(image)?;
        let mut tape = Tape::<f32>::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(images_to_tensor::<f32>(&[image]));
        let latent = self.perceive_vars(&mut tape, &vars, x)?;
        Ok(tape.value(latent).as_slice().to_vec())
    }

    /// Single-step inference convenience. `latent` is the full LSTM input
    /// (frame latent, plus target embedding in that variant).
    pub fn infer(
        &self,
        latent: &[f32],
        state: &AgentState,
    ) -> Result<(Vec<f32>, f32, AgentState), PolicyError> {
        if latent.len() != self.arch.infer_input_dim() {
            return Err(PolicyError::BadLatent {
                expected: self.arch.infer_input_dim(),
                got: latent.len(),
            });
        }
        let mut tape = Tape::<f32>::new();
        let vars = self.bind(&mut tape, false);
        let l = tape.constant(TensorData::new(vec![1, latent.len()], latent.to_vec()));
        let h = tape.constant(state.h.clone());
        let c = tape.constant(state.c.clone());
        let step = self.infer_vars(&mut tape, &vars, l, h, c)?;
        let logits = tape.value(step.logits).as_slice().to_vec();
        let value = tape.value(step.value).as_slice()[0];
        let next = AgentState { h: tape.value(step.h).clone(), c: tape.value(step.c).clone() };
        Ok((logits, value, next))
    }

    /// Full agent step on one frame. `embedding` must be the target-card
    /// latent when the architecture expects one, `None` otherwise.
    pub fn act(
        &self,
        image: &Image,
        embedding: Option<&[f32]>,
        state: &AgentState,
        rng: &mut impl Rng,
        mode: ActionMode,
    ) -> Result<ActOutcome, PolicyError> {
        let latent = self.perceive(image)?;
        let input = match (self.arch.target_embedding, embedding) {
            (false, None) => latent.clone(),
            (true, Some(e)) => {
                let mut v = latent.clone();
                v.extend_from_slice(e);
                v
            }
            (true, None) => {
                return Err(PolicyError::BadLatent { expected: self.arch.infer_input_dim(), got: latent.len() })
            }
            (false, Some(_)) => {
                return Err(PolicyError::BadLatent { expected: self.arch.infer_input_dim(), got: 2 * latent.len() })
            }
        };
        let (logits, value, next) = self.infer(&input, state)?;
        let (action, log_prob) = match mode {
            ActionMode::Greedy => {
                let a = greedy_from_logits(&logits);
                (a, log_probs_from_logits(&logits)[a.index()])
            }
            ActionMode::Stochastic => sample_from_logits(&logits, rng),
        };
        Ok(ActOutcome { action, log_prob, value, latent, state: next })
    }

    /// Writes `<stem>.ckpt` (tensors) and `<stem>.json` (manifest).
    pub fn save(&self, stem: &Path) -> Result<(), PolicyError> {
        let manifest = PolicyManifest { version: MANIFEST_VERSION, arch: self.arch.clone() };
        fs::write(manifest_path(stem), serde_json::to_string_pretty(&manifest)?)?;
        save_checkpoint(&checkpoint_path(stem), &self.params)?;
        Ok(())
    }

    /// Loads a policy saved by [`Policy::save`], validating tensor names and
    /// shapes against the manifest's architecture.
    pub fn load(stem: &Path) -> Result<Self, PolicyError> {
        let manifest: PolicyManifest = serde_json::from_str(&fs::read_to_string(manifest_path(stem))?)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(PolicyError::Manifest(format!(
                "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                manifest.version
            )));
        }
        let template = Self::zeroed(manifest.arch.clone())?;
        let params = load_checkpoint(&checkpoint_path(stem), &template.params)?;
        Ok(Policy { arch: manifest.arch, params })
    }
}

fn checkpoint_path(stem: &Path) -> PathBuf {
    stem.with_extension("ckpt")
}

fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

/// Packs images into an [N, 3, H, W] tensor with pixels scaled to [0,1].
pub fn images_to_tensor<S: Scalar>(images: &[&Image]) -> TensorData<S> {
    assert!(!images.is_empty(), "images_to_tensor needs at least one image");
    let (w, h) = (images[0].width, images[0].height);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        assert!(img.width == w && img.height == h, "mixed image sizes in one batch");
        data.extend(img.to_chw_f32().into_iter().map(|x| S::from_f64(x as f64)));
    }
    TensorData::new(vec![images.len(), 3, h, w], data)
}

/// Argmax over logits; ties break toward the lowest action index.
pub fn greedy_from_logits(logits: &[f32]) -> Action {
    debug_assert_eq!(logits.len(), Action::COUNT);
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    Action::from_index(best).expect("logit index in range")
}

/// Numerically stable log-softmax.
pub fn log_probs_from_logits(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f64 = logits.iter().map(|&v| ((v - max) as f64).exp()).sum();
    let lse = max as f64 + sum.ln();
    logits.iter().map(|&v| (v as f64 - lse) as f32).collect()
}

/// softmax(logits) as probabilities summing to one.
pub fn softmax_probs(logits: &[f32]) -> Vec<f32> {
    log_probs_from_logits(logits).iter().map(|&lp| (lp as f64).exp() as f32).collect()
}

/// Samples an action from softmax(logits); returns it with its log-probability.
pub fn sample_from_logits(logits: &[f32], rng: &mut impl Rng) -> (Action, f32) {
    let log_probs = log_probs_from_logits(logits);
    let u: f64 = rng.gen();
    let mut acc = 0.0f64;
    let mut chosen = logits.len() - 1;
    for (i, &lp) in log_probs.iter().enumerate() {
        acc += (lp as f64).exp();
        if u < acc {
            chosen = i;
            break;
        }
    }
    (Action::from_index(chosen).expect("sample index in range"), log_probs[chosen])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldsim::Rgb;

    fn test_image(seed: u64) -> Image {
        let arch = PolicyArch::default();
        let mut img = Image::filled(arch.image_width, arch.image_height, [40, 90, 140]);
        // Deterministic speckle so conv inputs are not constant.
        let mut state = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1);
        for y in 0..img.height {
            for x in 0..img.width {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                let v = (state >> 32) as u8;
                img.put(x, y, [v, v.wrapping_add(40), v.wrapping_add(90)]);
            }
        }
        img
    }

    #[test]
    fn default_arch_dims() {
        let arch = PolicyArch::default();
        assert_eq!(arch.conv_output_dims().unwrap(), (4, 6));
        assert_eq!(arch.flat_len().unwrap(), 384);
    }

    #[test]
    fn zero_weights_give_zero_latent_and_uniform_policy() {
        let policy = Policy::zeroed(PolicyArch::default()).unwrap();
        let latent = policy.perceive(&test_image(1)).unwrap();
        assert_eq!(latent.len(), 2);
        assert!(latent.iter().all(|&v| v == 0.0));

        let state = AgentState::zeroed(policy.arch());
        let (logits, value, _) = policy.infer(&latent, &state).unwrap();
        assert!(logits.iter().all(|&v| v == logits[0]));
        assert_eq!(value, 0.0);
        for p in softmax_probs(&logits) {
            assert!((p - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn perceive_is_deterministic() {
        let policy = Policy::new(PolicyArch::default(), 7).unwrap();
        let img = test_image(2);
        let a = policy.perceive(&img).unwrap();
        let b = policy.perceive(&img).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn greedy_argmax_and_tie_break() {
        assert_eq!(greedy_from_logits(&[0.1, 3.0, 0.2, 0.3]), Action::TurnLeft);
        assert_eq!(greedy_from_logits(&[1.0, 1.0, 0.0, 0.0]), Action::MoveForward);
    }

    #[test]
    fn stochastic_uniform_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut counts = [0usize; Action::COUNT];
        let n = 10_000;
        for _ in 0..n {
            let (a, lp) = sample_from_logits(&[0.0; 4], &mut rng);
            assert!((lp - 0.25f32.ln()).abs() < 1e-6);
            counts[a.index()] += 1;
        }
        for c in counts {
            let freq = c as f64 / n as f64;
            assert!((freq - 0.25).abs() < 0.02, "frequency {freq} strayed from uniform");
        }
    }

    #[test]
    fn logit_shift_leaves_behavior_unchanged() {
        let logits = [0.3f32, -1.2, 0.9, 0.0];
        let shifted: Vec<f32> = logits.iter().map(|v| v + 5.0).collect();
        assert_eq!(greedy_from_logits(&logits), greedy_from_logits(&shifted));
        let p = softmax_probs(&logits);
        let q = softmax_probs(&shifted);
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn stepwise_equals_batched_sequence() {
        let arch = PolicyArch { hidden: 16, ..PolicyArch::default() };
        let policy = Policy::new(arch, 11).unwrap();
        let (n, t, l) = (3usize, 5usize, policy.arch().latent_dim);
        let seq: Vec<Vec<f32>> = (0..n * t)
            .map(|i| (0..l).map(|j| ((i * l + j) as f32 * 0.37).sin()).collect())
            .collect();

        // Path A: each sequence alone, one step at a time.
        let mut solo: Vec<(Vec<f32>, f32)> = Vec::new();
        for env in 0..n {
            let mut state = AgentState::zeroed(policy.arch());
            for step in 0..t {
                let (logits, value, next) = policy.infer(&seq[step * n + env], &state).unwrap();
                solo.push((logits, value));
                state = next;
            }
        }

        // Path B: all sequences batched per step (the rollout path).
        let mut tape = Tape::<f32>::new();
        let vars = policy.bind(&mut tape, false);
        let hidden = policy.arch().hidden;
        let mut h = tape.constant(TensorData::zeros(&[n, hidden]));
        let mut c = tape.constant(TensorData::zeros(&[n, hidden]));
        let mut batched: Vec<(Vec<f32>, f32)> = vec![(Vec::new(), 0.0); n * t];
        for step in 0..t {
            let rows: Vec<f32> = (0..n).flat_map(|e| seq[step * n + e].clone()).collect();
            let x = tape.constant(TensorData::new(vec![n, l], rows));
            let out = policy.infer_vars(&mut tape, &vars, x, h, c).unwrap();
            let logits = tape.value(out.logits).as_slice().to_vec();
            let values = tape.value(out.value).as_slice().to_vec();
            for env in 0..n {
                batched[env * t + step] =
                    (logits[env * Action::COUNT..(env + 1) * Action::COUNT].to_vec(), values[env]);
            }
            h = out.h;
            c = out.c;
        }

        for (a, b) in solo.iter().zip(&batched) {
            for (x, y) in a.0.iter().zip(&b.0) {
                assert!((x - y).abs() < 1e-5, "logits diverged: {x} vs {y}");
            }
            assert!((a.1 - b.1).abs() < 1e-5, "values diverged: {} vs {}", a.1, b.1);
        }
    }

    #[test]
    fn checkpoint_round_trip_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("agent");
        let policy = Policy::new(PolicyArch::default(), 3).unwrap();
        policy.save(&stem).unwrap();
        let loaded = Policy::load(&stem).unwrap();
        assert!(policy.params().bit_eq(loaded.params()));

        let img = test_image(5);
        let a = policy.perceive(&img).unwrap();
        let b = loaded.perceive(&img).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let state = AgentState::zeroed(policy.arch());
        let (la, va, _) = policy.infer(&a, &state).unwrap();
        let (lb, vb, _) = loaded.infer(&b, &state).unwrap();
        assert_eq!(va.to_bits(), vb.to_bits());
        assert_eq!(
            la.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            lb.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn manifest_arch_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("agent");
        Policy::new(PolicyArch::default(), 3).unwrap().save(&stem).unwrap();

        // Claim a different latent width in the manifest: tensor shapes no
        // longer match and the load must fail.
        let lied = PolicyManifest {
            version: MANIFEST_VERSION,
            arch: PolicyArch { latent_dim: 4, ..PolicyArch::default() },
        };
        fs::write(manifest_path(&stem), serde_json::to_string(&lied).unwrap()).unwrap();
        assert!(matches!(Policy::load(&stem), Err(PolicyError::Checkpoint(_))));

        let future = PolicyManifest { version: 999, arch: PolicyArch::default() };
        fs::write(manifest_path(&stem), serde_json::to_string(&future).unwrap()).unwrap();
        assert!(matches!(Policy::load(&stem), Err(PolicyError::Manifest(_))));
    }

    #[test]
    fn target_embedding_doubles_inference_input() {
        let arch = PolicyArch { target_embedding: true, ..PolicyArch::default() };
        assert_eq!(arch.infer_input_dim(), 4);
        let policy = Policy::zeroed(arch).unwrap();
        let w_ih = policy.params().get("inference.lstm.w_ih").unwrap();
        assert_eq!(w_ih.shape(), &[4 * 128, 4]);
        let state = AgentState::zeroed(policy.arch());
        // A bare frame latent is no longer a valid inference input.
        assert!(policy.infer(&[0.0; 2], &state).is_err());
        assert!(policy.infer(&[0.0; 4], &state).is_ok());
    }

    #[test]
    fn wrong_image_size_rejected() {
        let policy = Policy::zeroed(PolicyArch::default()).unwrap();
        let img = Image::filled(10, 10, [0, 0, 0] as Rgb);
        assert!(matches!(policy.perceive(&img), Err(PolicyError::BadImage { .. })));
        let state = AgentState::zeroed(policy.arch());
        assert!(matches!(
            policy.infer(&[0.0; 5], &state),
            Err(PolicyError::BadLatent { expected: 2, got: 5 })
        ));
    }

    #[test]
    fn seeded_init_is_reproducible_and_seed_sensitive() {
        let a = Policy::new(PolicyArch::default(), 1).unwrap();
        let b = Policy::new(PolicyArch::default(), 1).unwrap();
        let c = Policy::new(PolicyArch::default(), 2).unwrap();
        assert!(a.params().bit_eq(b.params()));
        assert!(!a.params().bit_eq(c.params()));
        // Forget-gate bias block is one, everything else in the bias is zero.
        let lb = a.params().get("inference.lstm.b").unwrap();
        let h = a.arch().hidden;
        assert!(lb.as_slice()[..h].iter().all(|&v| v == 0.0));
        assert!(lb.as_slice()[h..2 * h].iter().all(|&v| v == 1.0));
        assert!(lb.as_slice()[2 * h..].iter().all(|&v| v == 0.0));
    }
}
