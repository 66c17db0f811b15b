use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::reference::output_size;

/// Where the activation gradient of a CONV layer is pruned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneStructure {
    /// CONV followed by ReLU: prune the gradient leaving the layer (dI).
    ConvRelu,
    /// CONV followed by BN then ReLU: prune the gradient entering the layer (dO).
    ConvBnRelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        k: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
        /// Inferred from the following layer when absent.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        structure: Option<PruneStructure>,
    },
    Relu,
    #[serde(rename = "maxpool")]
    MaxPool {
        window: usize,
        #[serde(default)]
        stride: Option<usize>,
    },
    #[serde(rename = "batchnorm")]
    BatchNorm,
    Flatten,
    Fc {
        inputs: usize,
        outputs: usize,
    },
}

fn one() -> usize {
    1
}

impl LayerSpec {
    pub fn conv(
        in_channels: usize,
        out_channels: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            k,
            stride,
            pad,
            structure: None,
        }
    }

    pub fn maxpool(window: usize) -> Self {
        LayerSpec::MaxPool {
            window,
            stride: None,
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::BatchNorm => "batchnorm",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Fc { .. } => "fc",
        }
    }
}

/// Geometry of a CONV layer after shape inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c: usize,
    pub f: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        c: usize,
        f: usize,
        k: usize,
        stride: usize,
        pad: usize,
        in_h: usize,
        in_w: usize,
    ) -> Result<Self> {
        Ok(Self {
            c,
            f,
            k,
            stride,
            pad,
            in_h,
            in_w,
            out_h: output_size(in_h, k, stride, pad)?,
            out_w: output_size(in_w, k, stride, pad)?,
        })
    }

    /// Dense MAC count of one forward pass, `F C K^2 H_out W_out`.
    pub fn forward_macs(&self) -> u64 {
        (self.f * self.c * self.k * self.k * self.out_h * self.out_w) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    /// `[channels, height, width]`.
    pub input: [usize; 3],
    pub classes: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl NetworkSpec {
    /// Checks that shapes compose and returns the output shape of every
    /// layer as `(c, h, w)`; flat vectors are `(n, 1, 1)`.
    pub fn shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return config("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return config("batch size must be at least 1");
        }
        if self.classes < 2 {
            return config("need at least two classes");
        }
        let [c0, h0, w0] = self.input;
        if c0 == 0 || h0 == 0 || w0 == 0 {
            return config("input shape must be nonempty");
        }
        let mut cur = (c0, h0, w0);
        let mut flat = false;
        let mut out = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            let err = |msg: String| Error::Config(format!("layer {idx} ({}): {msg}", layer.name()));
            cur = match layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    k,
                    stride,
                    pad,
                    ..
                } => {
                    if flat {
                        return Err(err("convolution after flatten".into()));
                    }
                    if *in_channels != cur.0 {
                        return Err(err(format!(
                            "expects {} channels, gets {}",
                            in_channels, cur.0
                        )));
                    }
                    if *out_channels == 0 {
                        return Err(err("needs at least one filter".into()));
                    }
                    let g =
                        ConvGeometry::new(cur.0, *out_channels, *k, *stride, *pad, cur.1, cur.2)
                            .map_err(|e| err(e.to_string()))?;
                    (g.f, g.out_h, g.out_w)
                }
                LayerSpec::Relu => cur,
                LayerSpec::BatchNorm => {
                    if flat {
                        return Err(err("batch normalization after flatten".into()));
                    }
                    cur
                }
                LayerSpec::MaxPool { window, stride } => {
                    if flat {
                        return Err(err("pooling after flatten".into()));
                    }
                    let s = stride.unwrap_or(*window);
                    if *window == 0 || s == 0 || *window > cur.1 || *window > cur.2 {
                        return Err(err(format!(
                            "window {window} / stride {s} invalid for {}x{}",
                            cur.1, cur.2
                        )));
                    }
                    (cur.0, (cur.1 - window) / s + 1, (cur.2 - window) / s + 1)
                }
                LayerSpec::Flatten => {
                    flat = true;
                    (cur.0 * cur.1 * cur.2, 1, 1)
                }
                LayerSpec::Fc { inputs, outputs } => {
                    if !flat {
                        return Err(err("fully connected layer needs a flatten before it".into()));
                    }
                    if *inputs != cur.0 {
                        return Err(err(format!("expects {} inputs, gets {}", inputs, cur.0)));
                    }
                    (*outputs, 1, 1)
                }
            };
            out.push(cur);
        }
        match self.layers.last() {
            Some(LayerSpec::Fc { outputs, .. }) if *outputs == self.classes => {}
            _ => {
                return config(format!(
                    "network must end in an FC layer with {} outputs",
                    self.classes
                ))
            }
        }
        for idx in self.conv_layers() {
            self.structure(idx)?;
        }
        Ok(out)
    }

    /// Input shape of layer `idx`.
    pub fn input_shape(&self, idx: usize) -> Result<(usize, usize, usize)> {
        if idx == 0 {
            let [c, h, w] = self.input;
            return Ok((c, h, w));
        }
        Ok(self.shapes()?[idx - 1])
    }

    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_conv())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn geometry(&self, idx: usize) -> Result<ConvGeometry> {
        match &self.layers.get(idx) {
            Some(LayerSpec::Conv {
                in_channels,
                out_channels,
                k,
                stride,
                pad,
                ..
            }) => {
                let (_, h, w) = self.input_shape(idx)?;
                ConvGeometry::new(*in_channels, *out_channels, *k, *stride, *pad, h, w)
            }
            _ => config(format!("layer {idx} is not a convolution")),
        }
    }

    /// Pruning structure of CONV layer `idx`: explicit when given, otherwise
    /// CONV-BN-RELU when a BN layer follows and CONV-RELU otherwise.
    pub fn structure(&self, idx: usize) -> Result<PruneStructure> {
        let Some(LayerSpec::Conv { structure, .. }) = self.layers.get(idx) else {
            return config(format!("layer {idx} is not a convolution"));
        };
        let next_is_bn = matches!(self.layers.get(idx + 1), Some(LayerSpec::BatchNorm));
        match structure {
            Some(PruneStructure::ConvBnRelu) if !next_is_bn => config(format!(
                "layer {idx} declared conv-bn-relu but is not followed by batchnorm"
            )),
            Some(s) => Ok(*s),
            None if next_is_bn => Ok(PruneStructure::ConvBnRelu),
            None => Ok(PruneStructure::ConvRelu),
        }
    }

    /// True when every zero in the input of layer `idx` is guaranteed to have
    /// a zero gradient downstream: the input comes from a ReLU, possibly
    /// through max-pooling.
    pub fn input_masked(&self, idx: usize) -> bool {
        let mut i = idx;
        while i > 0 {
            i -= 1;
            match self.layers[i] {
                LayerSpec::MaxPool { .. } => continue,
                LayerSpec::Relu => return true,
                _ => return false,
            }
        }
        false
    }

    /// Whether the activation gradient of layer `idx` is consumed upstream.
    pub fn needs_input_grad(&self, idx: usize) -> bool {
        idx > 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> NetworkSpec {
        NetworkSpec {
            layers: vec![
                LayerSpec::conv(1, 4, 3, 1, 1),
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::maxpool(2),
                LayerSpec::conv(4, 6, 3, 1, 1),
                LayerSpec::Relu,
                LayerSpec::maxpool(2),
                LayerSpec::Flatten,
                LayerSpec::Fc {
                    inputs: 24,
                    outputs: 3,
                },
            ],
            input: [1, 8, 8],
            classes: 3,
            learning_rate: 0.05,
            batch_size: 10,
        }
    }

    #[test]
    fn shapes_compose() {
        let s = toy().shapes().unwrap();
        assert_eq!(s[0], (4, 8, 8));
        assert_eq!(s[3], (4, 4, 4));
        assert_eq!(s[6], (6, 2, 2));
        assert_eq!(s[7], (24, 1, 1));
        assert_eq!(s[8], (3, 1, 1));
    }

    #[test]
    fn structures_inferred() {
        let n = toy();
        assert_eq!(n.structure(0).unwrap(), PruneStructure::ConvBnRelu);
        assert_eq!(n.structure(4).unwrap(), PruneStructure::ConvRelu);
        assert!(!n.input_masked(0));
        assert!(n.input_masked(4));
    }

    #[test]
    fn bad_networks_rejected() {
        let mut n = toy();
        n.layers[4] = LayerSpec::conv(3, 6, 3, 1, 1);
        assert!(n.shapes().is_err());
        let mut n = toy();
        n.layers.pop();
        assert!(n.shapes().is_err());
        let mut n = toy();
        n.learning_rate = 0.0;
        assert!(n.shapes().is_err());
        let mut n = toy();
        if let LayerSpec::Conv { structure, .. } = &mut n.layers[4] {
            *structure = Some(PruneStructure::ConvBnRelu);
        }
        assert!(n.shapes().is_err());
    }

    #[test]
    fn geometry_macs() {
        let g = toy().geometry(4).unwrap();
        assert_eq!((g.in_h, g.out_h), (4, 4));
        assert_eq!(g.forward_macs(), 6 * 4 * 9 * 16);
    }
}
