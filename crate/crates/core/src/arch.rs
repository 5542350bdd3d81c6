//! SqueezeNet1.1 and its three reduced fire-module variants.
//!
//! Every architecture shares the same stem (3×3/2 conv with 64 filters,
//! ReLU, 3×3/2 max pool) and classification tail (1×1 conv to the class
//! count, ReLU, global average pool, softmax). They differ only in the fire
//! modules between stem and tail and in where the extra max pools sit.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{backward, GradientSet, Tape, Var};
use crate::class::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{ConvKernel, Padding, Scalar, Tensor4};

pub const INPUT_SIZE: usize = 130;
pub const INPUT_CHANNELS: usize = 3;
const POOL_WINDOW: usize = 3;
const POOL_STRIDE: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArchId {
    #[serde(rename = "variant1")]
    Variant1,
    #[serde(rename = "variant2")]
    Variant2,
    #[serde(rename = "variant3")]
    Variant3,
    #[serde(rename = "squeezenet11")]
    SqueezeNet11,
}

impl ArchId {
    pub const ALL: [ArchId; 4] = [
        ArchId::Variant1,
        ArchId::Variant2,
        ArchId::Variant3,
        ArchId::SqueezeNet11,
    ];

    /// Stable identifier used on the command line and in weights files.
    pub fn as_str(self) -> &'static str {
        match self {
            ArchId::Variant1 => "variant1",
            ArchId::Variant2 => "variant2",
            ArchId::Variant3 => "variant3",
            ArchId::SqueezeNet11 => "squeezenet11",
        }
    }
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchId::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                Error::usage(format!(
                    "unknown architecture {s:?} (expected variant1|variant2|variant3|squeezenet11)"
                ))
            })
    }
}

/// One fire module: a 1×1 squeeze conv feeding parallel 1×1 and 3×3 expand convs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FireSpec {
    pub squeeze: usize,
    pub expand1x1: usize,
    pub expand3x3: usize,
}

impl FireSpec {
    pub const fn new(squeeze: usize, expand1x1: usize, expand3x3: usize) -> Self {
        Self {
            squeeze,
            expand1x1,
            expand3x3,
        }
    }

    pub fn output_channels(&self) -> usize {
        self.expand1x1 + self.expand3x3
    }

    pub fn param_count(&self, in_c: usize) -> usize {
        let s = self.squeeze;
        (in_c * s + s) + (s * self.expand1x1 + self.expand1x1) + (9 * s * self.expand3x3 + self.expand3x3)
    }
}

/// Declarative layer graph of one architecture.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub id: ArchId,
    pub conv1_filters: usize,
    pub conv1_kernel: usize,
    pub conv1_stride: usize,
    pub fires: Vec<FireSpec>,
    /// Zero-based fire indices followed by a 3×3/2 max pool. The stem pool
    /// after conv1 is always present and not listed here.
    pub pool_after_fires: Vec<usize>,
    pub num_classes: usize,
    /// Side length of the square RGB input.
    pub input_size: usize,
}

// Squeeze widths are not given for the variants; 16 for 64/64 modules and
// 32 for 128/128 modules are the only values that reproduce the published
// parameter totals, and they equal the SqueezeNet1.1 fire2-fire5 settings.
const FIRE_64: FireSpec = FireSpec::new(16, 64, 64);
const FIRE_128: FireSpec = FireSpec::new(32, 128, 128);
const FIRE_192: FireSpec = FireSpec::new(48, 192, 192);
const FIRE_256: FireSpec = FireSpec::new(64, 256, 256);

impl ArchSpec {
    pub fn for_arch(id: ArchId) -> Self {
        let (fires, pool_after_fires) = match id {
            ArchId::Variant1 => (vec![FIRE_64], vec![0]),
            ArchId::Variant2 => (vec![FIRE_64, FIRE_64], vec![1]),
            ArchId::Variant3 => (vec![FIRE_64, FIRE_64, FIRE_128, FIRE_128], vec![3]),
            ArchId::SqueezeNet11 => (
                vec![
                    FIRE_64, FIRE_64, FIRE_128, FIRE_128, FIRE_192, FIRE_192, FIRE_256, FIRE_256,
                ],
                // after fire3 and fire5
                vec![1, 3],
            ),
        };
        Self {
            id,
            conv1_filters: 64,
            conv1_kernel: 3,
            conv1_stride: 2,
            fires,
            pool_after_fires,
            num_classes: NUM_CLASSES,
            input_size: INPUT_SIZE,
        }
    }

    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }

    /// Channels entering each fire module, then entering conv10.
    pub fn channel_chain(&self) -> Vec<usize> {
        let mut chain = vec![self.conv1_filters];
        for f in &self.fires {
            chain.push(f.output_channels());
        }
        chain
    }

    pub fn conv10_in_channels(&self) -> usize {
        *self.channel_chain().last().expect("chain is never empty")
    }

    /// Kernel names in canonical graph order.
    pub fn kernel_names(&self) -> Vec<String> {
        let mut names = vec!["conv1".to_string()];
        for i in 0..self.fires.len() {
            let f = fire_name(i);
            names.push(format!("{f}.squeeze1x1"));
            names.push(format!("{f}.expand1x1"));
            names.push(format!("{f}.expand3x3"));
        }
        names.push("conv10".to_string());
        names
    }

    /// Empty kernels in canonical order; shapes only.
    fn kernel_shapes(&self) -> Vec<(String, ConvKernel<f32>)> {
        let mut out = vec![(
            "conv1".to_string(),
            ConvKernel::zeros(
                self.conv1_kernel,
                self.conv1_kernel,
                INPUT_CHANNELS,
                self.conv1_filters,
                self.conv1_stride,
                Padding::Valid,
            ),
        )];
        let chain = self.channel_chain();
        for (i, f) in self.fires.iter().enumerate() {
            let name = fire_name(i);
            out.push((
                format!("{name}.squeeze1x1"),
                ConvKernel::zeros(1, 1, chain[i], f.squeeze, 1, Padding::Valid),
            ));
            out.push((
                format!("{name}.expand1x1"),
                ConvKernel::zeros(1, 1, f.squeeze, f.expand1x1, 1, Padding::Valid),
            ));
            out.push((
                format!("{name}.expand3x3"),
                ConvKernel::zeros(3, 3, f.squeeze, f.expand3x3, 1, Padding::Same),
            ));
        }
        out.push((
            "conv10".to_string(),
            ConvKernel::zeros(1, 1, self.conv10_in_channels(), self.num_classes, 1, Padding::Valid),
        ));
        out
    }

    /// Shapes `(name, dims)` of every stored tensor, weights before biases.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.kernel_shapes()
            .into_iter()
            .flat_map(|(name, k)| {
                [
                    (format!("{name}.weight"), k.weights.dims().to_vec()),
                    (format!("{name}.bias"), vec![k.out_channels()]),
                ]
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.fires.is_empty() {
            return Err(Error::usage("architecture needs at least one fire module"));
        }
        if self.num_classes == 0 || self.conv1_filters == 0 || self.conv1_stride == 0 {
            return Err(Error::usage("class count, conv1 filters and stride must be positive"));
        }
        if self
            .fires
            .iter()
            .any(|f| f.squeeze == 0 || f.expand1x1 == 0 || f.expand3x3 == 0)
        {
            return Err(Error::usage("fire module widths must be positive"));
        }
        if let Some(&bad) = self.pool_after_fires.iter().find(|&&i| i >= self.fires.len()) {
            return Err(Error::usage(format!("pool after missing fire module {bad}")));
        }
        Ok(())
    }
}

fn fire_name(i: usize) -> String {
    // fire modules are numbered from 2, after conv1
    format!("fire{}", i + 2)
}

/// Exact trainable-parameter total: conv1, every fire module and conv10.
pub fn count_trainable_params(spec: &ArchSpec) -> usize {
    let conv1 = spec.conv1_kernel * spec.conv1_kernel * INPUT_CHANNELS * spec.conv1_filters + spec.conv1_filters;
    let chain = spec.channel_chain();
    let fires: usize = spec
        .fires
        .iter()
        .zip(&chain)
        .map(|(f, &in_c)| f.param_count(in_c))
        .sum();
    let conv10 = spec.conv10_in_channels() * spec.num_classes + spec.num_classes;
    conv1 + fires + conv10
}

/// Storage at 4 bytes per parameter, e.g. `52.57 KB` or `2.76 MB`.
pub fn format_storage(params: usize) -> String {
    let bytes = params as f64 * 4.0;
    if bytes >= 1024.0 * 1024.0 {
        format!("{:.2} MB", bytes / (1024.0 * 1024.0))
    } else {
        format!("{:.2} KB", bytes / 1024.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub name: String,
    /// `(height, width, channels)` for a single sample.
    pub output_shape: [usize; 3],
    pub params: usize,
    pub cumulative: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub arch: ArchId,
    pub rows: Vec<SummaryRow>,
    pub total_params: usize,
    pub storage: String,
}

/// Per-layer output shapes and parameter ledger at the configured input size.
pub fn summary(spec: &ArchSpec) -> Result<Summary> {
    spec.validate()?;
    let mut rows: Vec<SummaryRow> = Vec::new();
    let mut push = |name: String, shape: [usize; 3], params: usize| {
        let cumulative = rows.last().map_or(0, |r| r.cumulative) + params;
        rows.push(SummaryRow {
            name,
            output_shape: shape,
            params,
            cumulative,
        });
    };
    let s = spec.input_size;
    push("input".into(), [s, s, INPUT_CHANNELS], 0);

    let k = spec.conv1_kernel;
    let (h, w) = ops::conv_output_size(s, s, k, k, spec.conv1_stride, Padding::Valid)?;
    let mut shape = [h, w, spec.conv1_filters];
    push("conv1".into(), shape, k * k * INPUT_CHANNELS * spec.conv1_filters + spec.conv1_filters);
    let (h, w) = ops::pool_output_size(shape[0], shape[1], POOL_WINDOW, POOL_STRIDE)?;
    shape = [h, w, shape[2]];
    push("maxpool1".into(), shape, 0);

    let mut pool_no = 2;
    for (i, f) in spec.fires.iter().enumerate() {
        let name = fire_name(i);
        let in_c = shape[2];
        let [h, w, _] = shape;
        push(format!("{name}/squeeze1x1"), [h, w, f.squeeze], in_c * f.squeeze + f.squeeze);
        push(format!("{name}/expand1x1"), [h, w, f.expand1x1], f.squeeze * f.expand1x1 + f.expand1x1);
        push(
            format!("{name}/expand3x3"),
            [h, w, f.expand3x3],
            9 * f.squeeze * f.expand3x3 + f.expand3x3,
        );
        shape = [h, w, f.output_channels()];
        push(format!("{name}/concat"), shape, 0);
        if spec.pool_after_fires.contains(&i) {
            let (h, w) = ops::pool_output_size(shape[0], shape[1], POOL_WINDOW, POOL_STRIDE)?;
            shape = [h, w, shape[2]];
            push(format!("maxpool{pool_no}"), shape, 0);
            pool_no += 1;
        }
    }
    let in_c = shape[2];
    shape = [shape[0], shape[1], spec.num_classes];
    push("conv10".into(), shape, in_c * spec.num_classes + spec.num_classes);
    shape = [1, 1, spec.num_classes];
    push("global_avg_pool".into(), shape, 0);
    push("softmax".into(), shape, 0);

    let total = rows.last().map_or(0, |r| r.cumulative);
    Ok(Summary {
        arch: spec.id,
        rows,
        total_params: total,
        storage: format_storage(total),
    })
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<22} {:>16} {:>10} {:>12}", "layer", "output", "params", "cumulative")?;
        for r in &self.rows {
            let [h, w, c] = r.output_shape;
            writeln!(
                f,
                "{:<22} {:>16} {:>10} {:>12}",
                r.name,
                format!("{h}x{w}x{c}"),
                r.params,
                r.cumulative
            )?;
        }
        write!(f, "{}: {} trainable parameters ({})", self.arch, self.total_params, self.storage)
    }
}

/// Optional dropout before conv10 (off unless requested).
pub struct Dropout<'a, R: Rng> {
    pub rate: f64,
    pub rng: &'a mut R,
}

/// Instantiated parameters for an [`ArchSpec`].
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T = f32> {
    spec: ArchSpec,
    kernels: Vec<(String, ConvKernel<T>)>,
}

/// Output of a forward pass.
pub struct Forward<T> {
    pub probs: Tensor4<T>,
    /// Recorded tape and the logits node on it, when requested.
    pub tape: Option<(Tape<T>, Var)>,
}

/// Loss, probabilities and parameter gradients for one batch.
pub struct StepOutput<T> {
    pub loss: T,
    pub probs: Tensor4<T>,
    pub grads: GradientSet<T>,
}

/// Builds a He-uniform initialized network for a named architecture.
pub fn build(arch_id: &str, seed: u64) -> Result<Network<f32>> {
    Network::init(ArchSpec::for_arch(arch_id.parse()?), seed)
}

impl<T: Scalar> Network<T> {
    /// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn init(spec: ArchSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernels = spec
            .kernel_shapes()
            .into_iter()
            .map(|(name, k)| {
                let [kh, kw, ic, _] = k.weights.dims();
                let bound = (6.0 / (kh * kw * ic) as f64).sqrt();
                let mut k = k.cast::<T>();
                for v in k.weights.data_mut() {
                    *v = T::of(rng.random_range(-bound..bound));
                }
                (name, k)
            })
            .collect();
        Ok(Self { spec, kernels })
    }

    pub fn zeros(spec: ArchSpec) -> Result<Self> {
        spec.validate()?;
        let kernels = spec
            .kernel_shapes()
            .into_iter()
            .map(|(n, k)| (n, k.cast()))
            .collect();
        Ok(Self { spec, kernels })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn kernels(&self) -> &[(String, ConvKernel<T>)] {
        &self.kernels
    }

    pub fn kernel(&self, name: &str) -> Option<&ConvKernel<T>> {
        self.kernels.iter().find(|(n, _)| n == name).map(|(_, k)| k)
    }

    pub fn param_count(&self) -> usize {
        self.kernels.iter().map(|(_, k)| k.param_count()).sum()
    }

    /// Every parameter tensor as `(name, values)` in canonical order.
    pub fn tensors(&self) -> Vec<(String, &[T])> {
        self.kernels
            .iter()
            .flat_map(|(name, k)| {
                [
                    (format!("{name}.weight"), k.weights.data()),
                    (format!("{name}.bias"), k.bias.as_slice()),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        self.kernels
            .iter_mut()
            .flat_map(|(name, k)| {
                [
                    (format!("{name}.weight"), k.weights.data_mut()),
                    (format!("{name}.bias"), k.bias.as_mut_slice()),
                ]
            })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            kernels: self.kernels.iter().map(|(n, k)| (n.clone(), k.cast())).collect(),
        }
    }

    fn check_input(&self, batch: &Tensor4<T>) -> Result<()> {
        let s = self.spec.input_size;
        let [n, h, w, c] = batch.dims();
        if n == 0 || [h, w, c] != [s, s, INPUT_CHANNELS] {
            return Err(Error::shape(format!(
                "expected a batch of {s}x{s}x{INPUT_CHANNELS} images, got {:?}",
                batch.dims()
            )));
        }
        Ok(())
    }

    /// Records the whole network on `tape` and returns the logits node
    /// (`n×1×1×classes`, before softmax).
    pub fn forward_on_tape<R: Rng>(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        dropout: Option<Dropout<'_, R>>,
    ) -> Result<Var> {
        let mut registered = Vec::with_capacity(self.kernels.len());
        for (name, k) in &self.kernels {
            let w = tape.param(format!("{name}.weight"), k.weights.clone())?;
            let b = tape.param(
                format!("{name}.bias"),
                Tensor4::new([1, 1, 1, k.bias.len()], k.bias.clone())?,
            )?;
            registered.push((w, b, k.stride, k.padding));
        }
        let mut params = registered.into_iter();
        let mut conv_relu = |tape: &mut Tape<T>, x: Var| -> Result<Var> {
            let (w, b, stride, padding) = params.next().expect("kernel list matches architecture");
            let y = tape.conv2d(x, w, b, stride, padding)?;
            Ok(tape.relu(y))
        };

        let x = conv_relu(tape, input)?;
        let mut x = tape.maxpool2d(x, POOL_WINDOW, POOL_STRIDE)?;
        for i in 0..self.spec.fires.len() {
            let s = conv_relu(tape, x)?;
            let e1 = conv_relu(tape, s)?;
            let e3 = conv_relu(tape, s)?;
            x = tape.channel_concat(e1, e3)?;
            if self.spec.pool_after_fires.contains(&i) {
                x = tape.maxpool2d(x, POOL_WINDOW, POOL_STRIDE)?;
            }
        }
        if let Some(d) = dropout {
            x = tape.dropout(x, d.rate, d.rng)?;
        }
        let x = conv_relu(tape, x)?;
        tape.global_avg_pool(x)
    }

    /// Class probabilities `n×1×1×classes`.
    pub fn forward(&self, batch: &Tensor4<T>, record_tape: bool) -> Result<Forward<T>> {
        self.check_input(batch)?;
        let mut tape = Tape::new();
        let input = tape.leaf(batch.clone(), false);
        let logits = self.forward_on_tape::<ChaCha8Rng>(&mut tape, input, None)?;
        let probs = ops::softmax(tape.value(logits));
        Ok(Forward {
            probs,
            tape: record_tape.then_some((tape, logits)),
        })
    }

    pub fn predict(&self, batch: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.forward(batch, false).map(|f| f.probs)
    }

    /// Mean cross-entropy loss and its gradients for one labeled batch.
    pub fn loss_and_grads<R: Rng>(
        &self,
        batch: &Tensor4<T>,
        labels: &[usize],
        dropout: Option<Dropout<'_, R>>,
    ) -> Result<StepOutput<T>> {
        self.check_input(batch)?;
        let mut tape = Tape::new();
        let input = tape.leaf(batch.clone(), false);
        let logits = self.forward_on_tape(&mut tape, input, dropout)?;
        let loss_var = tape.softmax_cross_entropy(logits, labels)?;
        let loss = tape.value(loss_var).data()[0];
        let probs = tape
            .probabilities(loss_var)
            .expect("cross-entropy node keeps probabilities")
            .clone();
        let grads = backward(&tape, T::one())?;
        Ok(StepOutput { loss, probs, grads })
    }

    /// Mean cross-entropy without gradients.
    pub fn loss(&self, batch: &Tensor4<T>, labels: &[usize]) -> Result<T> {
        let probs = self.predict(batch)?;
        if labels.len() != probs.batch() {
            return Err(Error::usage("label count does not match batch"));
        }
        if labels.iter().any(|&l| l >= self.spec.num_classes) {
            return Err(Error::usage("label out of range"));
        }
        Ok(crate::autograd::mean_nll(&probs, labels))
    }

    /// Replaces one stored tensor; `values` must match its length.
    pub fn set_tensor(&mut self, name: &str, values: &[T]) -> Result<()> {
        let mut tensors = self.tensors_mut();
        let (_, slot) = tensors
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Integrity(format!("no tensor named {name}")))?;
        if slot.len() != values.len() {
            return Err(Error::Integrity(format!(
                "tensor {name} expects {} values, got {}",
                slot.len(),
                values.len()
            )));
        }
        slot.copy_from_slice(values);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arch_ids_roundtrip() {
        for a in ArchId::ALL {
            assert_eq!(a.as_str().parse::<ArchId>().unwrap(), a);
        }
        assert!(matches!("resnet".parse::<ArchId>(), Err(Error::Usage(_))));
        assert!(build("vgg", 0).is_err());
    }

    #[test]
    fn fire_counts() {
        let v1 = build("variant1", 0).unwrap();
        assert_eq!(v1.spec().fires, vec![FireSpec::new(16, 64, 64)]);
        let sq = ArchSpec::for_arch(ArchId::SqueezeNet11);
        assert_eq!(sq.fires.len(), 8);
        let v3 = ArchSpec::for_arch(ArchId::Variant3);
        let outs: Vec<_> = v3.fires.iter().map(|f| f.output_channels()).collect();
        assert_eq!(outs, vec![128, 128, 256, 256]);
        assert_eq!(ArchSpec::for_arch(ArchId::Variant2).fires.len(), 2);
    }

    #[test]
    fn network_matches_closed_form_count() {
        for a in ArchId::ALL {
            let spec = ArchSpec::for_arch(a);
            let net = Network::<f32>::zeros(spec.clone()).unwrap();
            assert_eq!(net.param_count(), count_trainable_params(&spec));
        }
    }

    #[test]
    fn storage_formatting() {
        assert_eq!(format_storage(13_458), "52.57 KB");
        assert_eq!(format_storage(723_522), "2.76 MB");
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = build("variant1", 5).unwrap();
        let b = build("variant1", 5).unwrap();
        let c = build("variant1", 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let k = a.kernel("fire2.expand3x3").unwrap();
        let bound = (6.0f32 / (9.0 * 16.0)).sqrt();
        assert!(k.weights.data().iter().all(|v| v.abs() <= bound));
        assert!(k.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_rejects_wrong_dims() {
        let net = build("variant1", 0).unwrap();
        let bad = Tensor4::<f32>::zeros([1, 64, 64, 3]);
        assert!(matches!(net.forward(&bad, false), Err(Error::Shape(_))));
    }

    #[test]
    fn validate_rejects_bad_pool_index() {
        let mut spec = ArchSpec::for_arch(ArchId::Variant1);
        spec.pool_after_fires = vec![3];
        assert!(Network::<f32>::zeros(spec).is_err());
    }
}
