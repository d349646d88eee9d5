//! Dense feed-forward networks partitioned into an ordered module stack.
//!
//! Each layer owns two parameter groups, `<module>.<j>.weight` (row-major,
//! `fan_out × fan_in`) and `<module>.<j>.bias`. The activation is applied
//! after every layer except the last one, which is linear.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::params::{ModelParameters, ParameterGroup};
use crate::rng::{Domain, SplitMix64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleSpec {
    pub name: String,
    /// Output width of each layer in the module.
    pub widths: Vec<usize>,
    #[serde(default)]
    pub from_scratch: bool,
}

impl ModuleSpec {
    pub fn new(name: &str, widths: &[usize], from_scratch: bool) -> Self {
        Self {
            name: name.to_string(),
            widths: widths.to_vec(),
            from_scratch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
    pub init_seed: u64,
    pub modules: Vec<ModuleSpec>,
}

impl Default for ModelSpec {
    /// Six modules: vision_early, vision_late, bridge, lang_early,
    /// lang_late and a from-scratch head.
    fn default() -> Self {
        Self {
            input_dim: 8,
            output_dim: 4,
            activation: Activation::Tanh,
            init_seed: 0,
            modules: vec![
                ModuleSpec::new("vision_early", &[32, 32], false),
                ModuleSpec::new("vision_late", &[32, 32], false),
                ModuleSpec::new("bridge", &[16], false),
                ModuleSpec::new("lang_early", &[32, 32], false),
                ModuleSpec::new("lang_late", &[32, 32], false),
                ModuleSpec::new("head", &[4], true),
            ],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub module_index: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.input_dim > 0 && self.output_dim > 0, Config, "input_dim and output_dim must be positive");
        ensure!(self.modules.len() >= 2, Config, "model needs at least 2 modules, got {}", self.modules.len());
        let last = self.modules.len() - 1;
        for (i, m) in self.modules.iter().enumerate() {
            ensure!(!m.name.is_empty(), Config, "module {} has an empty name", i + 1);
            ensure!(!m.widths.is_empty(), Config, "module `{}` has no layers", m.name);
            ensure!(m.widths.iter().all(|&w| w > 0), Config, "module `{}` has a zero width", m.name);
            ensure!(!m.from_scratch || i == last, Config, "only the last module may be from_scratch, but `{}` is", m.name);
            ensure!(
                !self.modules[..i].iter().any(|o| o.name == m.name),
                Config,
                "duplicate module name `{}`",
                m.name
            );
        }
        let out = *self.modules[last].widths.last().unwrap();
        ensure!(
            out == self.output_dim,
            Config,
            "last layer width {out} does not match output_dim {}",
            self.output_dim
        );
        Ok(())
    }

    pub fn layers(&self) -> Vec<LayerShape> {
        let mut fan_in = self.input_dim;
        let mut layers = Vec::new();
        for (k, m) in self.modules.iter().enumerate() {
            for &w in &m.widths {
                layers.push(LayerShape {
                    module_index: k + 1,
                    fan_in,
                    fan_out: w,
                });
                fan_in = w;
            }
        }
        layers
    }

    pub fn module_names(&self) -> Vec<String> {
        self.modules.iter().map(|m| m.name.clone()).collect()
    }
}

/// Per-layer activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[l]` is the input of layer `l`; the last entry is the output.
    activations: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
    version: u64,
}

/// One gradient slot per parameter group; `None` for frozen groups.
pub type Gradients = Vec<Option<Vec<f64>>>;

/// A validated spec plus the layer bookkeeping needed to run it.
#[derive(Debug, Clone)]
pub struct Network {
    spec: ModelSpec,
    layers: Vec<LayerShape>,
}

impl Network {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec.layers();
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    /// Glorot-uniform weights, zero biases, drawn from `spec.init_seed`.
    pub fn build(&self) -> ModelParameters {
        let mut groups = Vec::with_capacity(2 * self.layers.len());
        let mut layer_in_module = 0;
        for (l, shape) in self.layers.iter().enumerate() {
            if l > 0 && self.layers[l - 1].module_index != shape.module_index {
                layer_in_module = 0;
            }
            let module = &self.spec.modules[shape.module_index - 1];
            let limit = (6.0 / (shape.fan_in + shape.fan_out) as f64).sqrt();
            let mut rng = SplitMix64::derive(self.spec.init_seed, Domain::ModelInit, l as u64);
            let weights = (0..shape.fan_in * shape.fan_out)
                .map(|_| rng.uniform(-limit, limit))
                .collect();
            let prefix = format!("{}.{}", module.name, layer_in_module);
            groups.push(ParameterGroup::new(
                format!("{prefix}.weight"),
                weights,
                shape.module_index,
                module.from_scratch,
            ));
            groups.push(ParameterGroup::new(
                format!("{prefix}.bias"),
                vec![0.0; shape.fan_out],
                shape.module_index,
                module.from_scratch,
            ));
            layer_in_module += 1;
        }
        ModelParameters::new(self.spec.module_names(), groups).expect("validated spec yields a valid model")
    }

    fn check_params(&self, params: &ModelParameters) -> Result<()> {
        ensure!(
            params.groups().len() == 2 * self.layers.len()
                && self.layers.iter().enumerate().all(|(l, s)| {
                    params.group(2 * l).len() == s.fan_in * s.fan_out && params.group(2 * l + 1).len() == s.fan_out
                }),
            Contract,
            "parameters do not match the network layout"
        );
        Ok(())
    }

    fn weight<'a>(&self, params: &'a ModelParameters, l: usize) -> ArrayView2<'a, f64> {
        let s = self.layers[l];
        ArrayView2::from_shape((s.fan_out, s.fan_in), params.group(2 * l).values()).expect("checked layout")
    }

    /// Outputs only, without keeping intermediate activations.
    pub fn predict(&self, params: &ModelParameters, inputs: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_params(params)?;
        self.check_inputs(inputs)?;
        let mut a = inputs.to_owned();
        let last = self.layers.len() - 1;
        for l in 0..self.layers.len() {
            let mut z = a.dot(&self.weight(params, l).t());
            z += &ArrayView2::from_shape((1, self.layers[l].fan_out), params.group(2 * l + 1).values()).unwrap();
            if l != last {
                let act = self.spec.activation;
                z.mapv_inplace(|x| act.apply(x));
            }
            a = z;
        }
        Ok(a)
    }

    fn check_inputs(&self, inputs: &Array2<f64>) -> Result<()> {
        ensure!(
            inputs.ncols() == self.spec.input_dim,
            Contract,
            "input width {} != input_dim {}",
            inputs.ncols(),
            self.spec.input_dim
        );
        Ok(())
    }

    pub fn forward(&self, params: &ModelParameters, inputs: &Array2<f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_params(params)?;
        self.check_inputs(inputs)?;
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        activations.push(inputs.to_owned());
        for l in 0..self.layers.len() {
            let mut z = activations[l].dot(&self.weight(params, l).t());
            z += &ArrayView2::from_shape((1, self.layers[l].fan_out), params.group(2 * l + 1).values()).unwrap();
            let a = if l == last {
                z.clone()
            } else {
                let act = self.spec.activation;
                z.mapv(|x| act.apply(x))
            };
            pre_activations.push(z);
            activations.push(a);
        }
        let outputs = activations.last().unwrap().clone();
        Ok((
            outputs,
            ForwardCache {
                activations,
                pre_activations,
                version: params.version(),
            },
        ))
    }

    /// Reverse-mode gradients of a scalar loss given `∂loss/∂outputs`.
    pub fn backward(&self, params: &ModelParameters, cache: &ForwardCache, loss_grad: &Array2<f64>) -> Result<Gradients> {
        self.check_params(params)?;
        ensure!(
            cache.version == params.version(),
            Contract,
            "stale forward cache (version {} vs parameters {})",
            cache.version,
            params.version()
        );
        let out = cache.activations.last().unwrap();
        ensure!(
            loss_grad.dim() == out.dim(),
            Contract,
            "loss gradient shape {:?} != output shape {:?}",
            loss_grad.dim(),
            out.dim()
        );

        let mut grads: Gradients = vec![None; params.groups().len()];
        // Earliest layer that still needs a gradient; propagation stops there.
        let Some(first_needed) = (0..self.layers.len())
            .find(|&l| !params.group(2 * l).is_frozen() || !params.group(2 * l + 1).is_frozen())
        else {
            return Ok(grads);
        };

        let mut delta = loss_grad.to_owned();
        for l in (first_needed..self.layers.len()).rev() {
            let (wi, bi) = (2 * l, 2 * l + 1);
            if !params.group(wi).is_frozen() {
                let dw = delta.t().dot(&cache.activations[l]);
                grads[wi] = Some(dw.into_raw_vec_and_offset().0);
            }
            if !params.group(bi).is_frozen() {
                let db: Array1<f64> = delta.sum_axis(Axis(0));
                grads[bi] = Some(db.to_vec());
            }
            if l == first_needed {
                break;
            }
            let mut prev = delta.dot(&self.weight(params, l));
            let act = self.spec.activation;
            ndarray::Zip::from(&mut prev)
                .and(&cache.pre_activations[l - 1])
                .and(&cache.activations[l])
                .for_each(|d, &z, &a| *d *= act.derivative(z, a));
            delta = prev;
        }
        Ok(grads)
    }
}

pub fn build_model(spec: &ModelSpec) -> Result<ModelParameters> {
    Ok(Network::new(spec.clone())?.build())
}

/// Mean squared error over all `N × d` entries and its gradient `2/(N·d)·(outputs − targets)`.
pub fn loss_mse(outputs: &Array2<f64>, targets: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    ensure!(
        outputs.dim() == targets.dim(),
        Contract,
        "outputs {:?} and targets {:?} differ in shape",
        outputs.dim(),
        targets.dim()
    );
    let count = outputs.len() as f64;
    let diff = outputs - targets;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / count;
    let grad = diff * (2.0 / count);
    Ok((loss, grad))
}

/// MSE without the gradient.
pub fn mse(outputs: &Array2<f64>, targets: &Array2<f64>) -> Result<f64> {
    if outputs.dim() != targets.dim() {
        return Err(Error::Contract(format!(
            "outputs {:?} and targets {:?} differ in shape",
            outputs.dim(),
            targets.dim()
        )));
    }
    Ok(outputs
        .iter()
        .zip(targets)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / outputs.len() as f64)
}
