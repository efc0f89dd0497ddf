//! Feed-forward stacks with manual forward/backward passes.
//!
//! Three instances of [`NetworkStack`] make up the adaptation architecture:
//! the feature extractor, the label predictor, and (for the adversarial
//! criterion) the domain discriminator. The gradient-reversal contract of the
//! adversarial criterion lives in [`grad_reverse`]: identity on the forward
//! pass, sign-flipped and scaled on the backward pass.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{Dist, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    // Subgradient at exactly 0 is defined as 0.
    fn derivative(&self, z: f64) -> f64 {
        match self {
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

    pub fn tag(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::InvalidParameter(format!(
                "unknown activation '{other}'"
            ))),
        }
    }
}

/// Dense layer `y = act(x W^T + b)` with `weight: out x in`.
#[derive(Debug, Clone)]
pub struct AffineLayer {
    pub(crate) weight: Matrix,
    pub(crate) bias: Vec<f64>,
    activation: Activation,
}

impl AffineLayer {
    /// Variance-preserving init: `N(0, 1/sqrt(fan_in))` weights, zero bias.
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut SeededRng) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::InvalidParameter("layer dims must be >= 1".into()));
        }
        let std = 1.0 / (in_dim as f64).sqrt();
        let weight = rng.draw(out_dim, in_dim, Dist::Normal { mean: 0.0, std })?;
        Ok(AffineLayer {
            weight,
            bias: vec![0.0; out_dim],
            activation,
        })
    }

    pub fn from_parts(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if weight.rows() != bias.len() {
            return Err(Error::DimensionMismatch {
                op: "affine_layer",
                left: weight.shape(),
                right: format!("{} biases", bias.len()),
            });
        }
        Ok(AffineLayer {
            weight,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// Preactivation `x W^T + b` for a batch `x: m x in`.
    fn preactivate(&self, x: &Matrix) -> Result<Matrix> {
        let mut z = x.matmul_nt(&self.weight)?;
        for r in 0..z.rows() {
            for (v, &b) in z.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(z)
    }
}

/// Per-layer parameter gradients, shape-congruent with the owning stack.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrads>,
}

impl ParamGrads {
    pub fn zeros_like(net: &NetworkStack) -> Self {
        ParamGrads {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: Matrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weight.data().iter().all(|&x| x == 0.0) && l.bias.iter().all(|&x| x == 0.0)
        })
    }
}

struct LayerCache {
    input: Matrix,
    preact: Matrix,
}

/// An ordered stack of affine layers with cached activations from the last
/// forward pass. Single-threaded during a forward/backward pair.
pub struct NetworkStack {
    layers: Vec<AffineLayer>,
    cache: Option<Vec<LayerCache>>,
}

impl Clone for NetworkStack {
    fn clone(&self) -> Self {
        // The activation cache is transient state and is not cloned.
        NetworkStack {
            layers: self.layers.clone(),
            cache: None,
        }
    }
}

impl std::fmt::Debug for NetworkStack {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "NetworkStack({})", self.shape_tag())
    }
}

impl NetworkStack {
    /// Builds a stack from `dims = [in, h1, ..., out]` and one activation per
    /// layer.
    pub fn new(dims: &[usize], activations: &[Activation], rng: &mut SeededRng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidParameter(
                "a network needs at least one layer".into(),
            ));
        }
        if activations.len() != dims.len() - 1 {
            return Err(Error::InvalidParameter(format!(
                "{} dims imply {} layers but {} activations given",
                dims.len(),
                dims.len() - 1,
                activations.len()
            )));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, act) in activations.iter().enumerate() {
            layers.push(AffineLayer::new(dims[i], dims[i + 1], *act, rng)?);
        }
        Ok(NetworkStack { layers, cache: None })
    }

    pub fn from_layers(layers: Vec<AffineLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter(
                "a network needs at least one layer".into(),
            ));
        }
        for w in layers.windows(2) {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::DimensionMismatch {
                    op: "layer_chain",
                    left: format!("out {}", w[0].out_dim()),
                    right: format!("in {}", w[1].in_dim()),
                });
            }
        }
        Ok(NetworkStack { layers, cache: None })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("nonempty").out_dim()
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[AffineLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [AffineLayer] {
        &mut self.layers
    }

    fn shape_tag(&self) -> String {
        let mut s = format!("{}", self.in_dim());
        for l in &self.layers {
            s.push_str(&format!("-{}", l.out_dim()));
        }
        s
    }

    /// Batch forward pass; caches intermediates for [`Self::backward`].
    pub fn forward(&mut self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::DimensionMismatch {
                op: "forward",
                left: x.shape(),
                right: format!("input width {}", self.in_dim()),
            });
        }
        let mut cache = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let z = layer.preactivate(&h)?;
            let out = z.map(|v| layer.activation.apply(v));
            cache.push(LayerCache { input: h, preact: z });
            h = out;
        }
        self.cache = Some(cache);
        Ok(h)
    }

    /// Forward pass without touching the backward cache (evaluation path).
    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::DimensionMismatch {
                op: "infer",
                left: x.shape(),
                right: format!("input width {}", self.in_dim()),
            });
        }
        let mut h = x.clone();
        for layer in &self.layers {
            let z = layer.preactivate(&h)?;
            h = z.map(|v| layer.activation.apply(v));
        }
        Ok(h)
    }

    /// Smallest |preactivation| over all relu units for this batch. The
    /// finite-difference suite uses this to keep probes away from the relu
    /// kink, where two-sided differences are ill-defined.
    pub(crate) fn min_abs_relu_preact(&self, x: &Matrix) -> Result<f64> {
        let mut h = x.clone();
        let mut min = f64::INFINITY;
        for layer in &self.layers {
            let z = layer.preactivate(&h)?;
            if layer.activation == Activation::Relu {
                for &v in z.data() {
                    min = min.min(v.abs());
                }
            }
            h = z.map(|v| layer.activation.apply(v));
        }
        Ok(min)
    }

    /// Reverse-mode gradients of `sum(output .* upstream)` w.r.t. the input
    /// batch and every parameter. Requires a prior [`Self::forward`].
    pub fn backward(&mut self, upstream: &Matrix) -> Result<(Matrix, ParamGrads)> {
        let cache = self.cache.as_ref().ok_or(Error::BackwardBeforeForward)?;
        let last = cache.last().expect("cache is never empty");
        if upstream.rows() != last.preact.rows() || upstream.cols() != last.preact.cols() {
            return Err(Error::DimensionMismatch {
                op: "backward",
                left: upstream.shape(),
                right: last.preact.shape(),
            });
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = upstream.clone();
        for (layer, lc) in self.layers.iter().zip(cache).rev() {
            // Push through the activation.
            let mut delta = g;
            for (d, &z) in delta.data_mut().iter_mut().zip(lc.preact.data()) {
                *d *= layer.activation.derivative(z);
            }
            // delta: m x out, input: m x in -> weight grad out x in.
            let weight = delta.matmul_tn(&lc.input)?;
            let mut bias = vec![0.0; layer.out_dim()];
            for r in 0..delta.rows() {
                for (b, &d) in bias.iter_mut().zip(delta.row(r)) {
                    *b += d;
                }
            }
            grads.push(LayerGrads { weight, bias });
            g = delta.matmul(&layer.weight)?;
        }
        grads.reverse();
        Ok((g, ParamGrads { layers: grads }))
    }

    /// Writes a shape-tagged text snapshot of all parameters.
    pub fn write_snapshot(&self, w: &mut impl Write, name: &str) -> Result<()> {
        let io_err = |e: std::io::Error| Error::io("<snapshot>", e);
        writeln!(w, "net {} layers {}", name, self.layers.len()).map_err(io_err)?;
        for (i, layer) in self.layers.iter().enumerate() {
            writeln!(
                w,
                "layer {} in {} out {} act {}",
                i,
                layer.in_dim(),
                layer.out_dim(),
                layer.activation.tag()
            )
            .map_err(io_err)?;
            for r in 0..layer.weight.rows() {
                let line: Vec<String> = layer.weight.row(r).iter().map(f64::to_string).collect();
                writeln!(w, "{}", line.join(" ")).map_err(io_err)?;
            }
            let line: Vec<String> = layer.bias.iter().map(f64::to_string).collect();
            writeln!(w, "{}", line.join(" ")).map_err(io_err)?;
        }
        Ok(())
    }

    /// Reads a snapshot section written by [`Self::write_snapshot`]; returns
    /// the network and its name.
    pub fn read_snapshot(lines: &mut std::io::Lines<impl BufRead>) -> Result<(String, Self)> {
        let bad = |msg: &str| Error::Snapshot(msg.to_string());
        let header = lines
            .next()
            .ok_or_else(|| bad("missing net header"))?
            .map_err(|e| Error::io("<snapshot>", e))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "net" || parts[2] != "layers" {
            return Err(bad(&format!("bad net header '{header}'")));
        }
        let name = parts[1].to_string();
        let n_layers: usize = parts[3]
            .parse()
            .map_err(|_| bad("bad layer count"))?;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let header = lines
                .next()
                .ok_or_else(|| bad("missing layer header"))?
                .map_err(|e| Error::io("<snapshot>", e))?;
            let p: Vec<&str> = header.split_whitespace().collect();
            if p.len() != 8 || p[0] != "layer" || p[2] != "in" || p[4] != "out" || p[6] != "act" {
                return Err(bad(&format!("bad layer header '{header}'")));
            }
            let in_dim: usize = p[3].parse().map_err(|_| bad("bad in dim"))?;
            let out_dim: usize = p[5].parse().map_err(|_| bad("bad out dim"))?;
            let act = Activation::from_tag(p[7])?;
            let mut read_row = |expect: usize| -> Result<Vec<f64>> {
                let line = lines
                    .next()
                    .ok_or_else(|| bad("missing parameter row"))?
                    .map_err(|e| Error::io("<snapshot>", e))?;
                let vals: std::result::Result<Vec<f64>, _> =
                    line.split_whitespace().map(str::parse).collect();
                let vals = vals.map_err(|_| bad("non-numeric parameter"))?;
                if vals.len() != expect {
                    return Err(bad("parameter row has wrong width"));
                }
                Ok(vals)
            };
            let mut wdata = Vec::with_capacity(out_dim * in_dim);
            for _ in 0..out_dim {
                wdata.extend(read_row(in_dim)?);
            }
            let bias = read_row(out_dim)?;
            layers.push(AffineLayer::from_parts(
                Matrix::from_vec(out_dim, in_dim, wdata)?,
                bias,
                act,
            )?);
        }
        Ok((name, NetworkStack::from_layers(layers)?))
    }
}

/// Backward stage of the gradient-reversal contract: the forward stage is the
/// identity on features, so only the gradient transform exists as code.
pub fn grad_reverse(upstream: &Matrix, lambda2: f64) -> Result<Matrix> {
    if lambda2 < 0.0 || !lambda2.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "gradient reversal coefficient must be finite and >= 0, got {lambda2}"
        )));
    }
    Ok(upstream.scale(-lambda2))
}
