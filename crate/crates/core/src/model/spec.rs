use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    /// `y = x·W + b` with `W: [input, output]`.
    Linear {
        input: usize,
        output: usize,
    },
    /// Stride-1 "same" convolution with an odd square kernel; `W: [output, input, k, k]`.
    Conv2d {
        input: usize,
        output: usize,
        kernel: usize,
    },
    /// Non-overlapping `size`×`size` average pooling.
    AvgPool {
        size: usize,
    },
    ReLU,
    /// Batch norm over consecutive groups of `ghost_size` samples (per channel for 4-d input).
    GhostBatchNorm {
        features: usize,
        ghost_size: usize,
    },
    Dropout {
        p: f64,
    },
    Flatten,
}

impl LayerSpec {
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Linear { input, output } => input * output + output,
            LayerSpec::Conv2d {
                input,
                output,
                kernel,
            } => output * input * kernel * kernel + output,
            LayerSpec::GhostBatchNorm { features, .. } => 2 * features,
            _ => 0,
        }
    }

    pub fn is_batch_norm(&self) -> bool {
        matches!(self, LayerSpec::GhostBatchNorm { .. })
    }

    fn out_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |why: &str| {
            Err(Error::Contract(format!(
                "layer {self:?} cannot take input {input:?}: {why}"
            )))
        };
        match *self {
            LayerSpec::Linear {
                input: fan_in,
                output,
            } => {
                if input != [fan_in] {
                    return bad("expected a flat vector of matching width");
                }
                Ok(vec![output])
            }
            LayerSpec::Conv2d {
                input: c,
                output,
                kernel,
            } => {
                if kernel % 2 == 0 {
                    return bad("kernel must be odd for same padding");
                }
                match *input {
                    [ic, h, w] if ic == c => Ok(vec![output, h, w]),
                    _ => bad("expected [C, H, W] with matching channels"),
                }
            }
            LayerSpec::AvgPool { size } => match *input {
                [c, h, w] if size > 0 && h % size == 0 && w % size == 0 => {
                    Ok(vec![c, h / size, w / size])
                }
                _ => bad("pool size must divide the spatial extents"),
            },
            LayerSpec::ReLU => Ok(input.to_vec()),
            LayerSpec::Dropout { p } => {
                if !(0.0..1.0).contains(&p) {
                    return bad("dropout probability must be in [0, 1)");
                }
                Ok(input.to_vec())
            }
            LayerSpec::GhostBatchNorm {
                features,
                ghost_size,
            } => {
                if ghost_size == 0 {
                    return bad("ghost size must be positive");
                }
                if input.first() != Some(&features) || !(input.len() == 1 || input.len() == 3) {
                    return bad("feature axis does not match");
                }
                Ok(input.to_vec())
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Per-sample input shape, e.g. `[C, H, W]`.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
    /// Short textual form this spec was built from (`mlp:256`, `cnn:8,16`, ...), if any.
    pub arch: String,
}

impl ModelSpec {
    pub fn new(input_shape: Vec<usize>, classes: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        let spec = Self {
            input_shape,
            classes,
            layers,
            arch: "custom".into(),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Shapes flowing between layers: `shapes()[0]` is the input, `shapes()[i + 1]` the output of layer `i`.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for layer in &self.layers {
            let next = layer.out_shape(shapes.last().expect("non-empty"))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.classes >= 1, "model needs at least one class");
        let shapes = self.shapes()?;
        ensure!(
            shapes.last().map(Vec::as_slice) == Some(&[self.classes][..]),
            "model output {:?} does not match {} classes",
            shapes.last(),
            self.classes
        );
        Ok(())
    }

    /// Number of trainable values `d`.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn has_dropout(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, LayerSpec::Dropout { p } if *p > 0.0))
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(LayerSpec::is_batch_norm)
    }

    /// Every ghost-batch-norm layer set to use groups of `ghost_size`.
    pub fn with_ghost_size(&self, ghost_size: usize) -> Self {
        let mut s = self.clone();
        for l in &mut s.layers {
            if let LayerSpec::GhostBatchNorm { ghost_size: g, .. } = l {
                *g = ghost_size;
            }
        }
        s
    }

    /// Ghost group size shared by the batch-norm layers (None without batch norm).
    pub fn ghost_size(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            LayerSpec::GhostBatchNorm { ghost_size, .. } => Some(*ghost_size),
            _ => None,
        })
    }

    /// Builds one of the stock desk-scale architectures:
    ///
    /// * `linear`: flatten then a single linear layer.
    /// * `mlp:H1,H2,...`: flatten, then linear/ReLU blocks (dropout after each ReLU when `dropout > 0`).
    /// * `cnn:C1,C2,...`: per block: 3×3 conv, ghost batch norm, ReLU, 2×2 average pool;
    ///   then flatten, optional dropout, and a linear classifier.
    pub fn from_arch(
        arch: &str,
        input: [usize; 3],
        classes: usize,
        ghost_size: usize,
        dropout: f64,
    ) -> Result<Self> {
        let arch = arch.trim();
        let (kind, widths) = arch.split_once(':').unwrap_or((arch, ""));
        let widths: Vec<usize> = if widths.is_empty() {
            Vec::new()
        } else {
            widths
                .split(',')
                .map(|w| w.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("bad layer widths in `{arch}`")))?
        };
        if widths.contains(&0) {
            return Err(Error::Config(format!("zero width in `{arch}`")));
        }
        let [c, h, w] = input;
        let mut layers = Vec::new();
        match kind {
            "linear" => {
                layers.push(LayerSpec::Flatten);
                layers.push(LayerSpec::Linear {
                    input: c * h * w,
                    output: classes,
                });
            }
            "mlp" => {
                if widths.is_empty() {
                    return Err(Error::Config("mlp needs at least one hidden width".into()));
                }
                layers.push(LayerSpec::Flatten);
                let mut fan_in = c * h * w;
                for &width in &widths {
                    layers.push(LayerSpec::Linear {
                        input: fan_in,
                        output: width,
                    });
                    layers.push(LayerSpec::ReLU);
                    if dropout > 0.0 {
                        layers.push(LayerSpec::Dropout { p: dropout });
                    }
                    fan_in = width;
                }
                layers.push(LayerSpec::Linear {
                    input: fan_in,
                    output: classes,
                });
            }
            "cnn" => {
                if widths.is_empty() {
                    return Err(Error::Config("cnn needs at least one channel width".into()));
                }
                let (mut ch, mut hh, mut ww) = (c, h, w);
                for &width in &widths {
                    if hh % 2 != 0 || ww % 2 != 0 {
                        return Err(Error::Config(format!(
                            "cnn `{arch}` halves the image {} times; {h}×{w} is not divisible",
                            widths.len()
                        )));
                    }
                    layers.push(LayerSpec::Conv2d {
                        input: ch,
                        output: width,
                        kernel: 3,
                    });
                    layers.push(LayerSpec::GhostBatchNorm {
                        features: width,
                        ghost_size,
                    });
                    layers.push(LayerSpec::ReLU);
                    layers.push(LayerSpec::AvgPool { size: 2 });
                    ch = width;
                    hh /= 2;
                    ww /= 2;
                }
                layers.push(LayerSpec::Flatten);
                if dropout > 0.0 {
                    layers.push(LayerSpec::Dropout { p: dropout });
                }
                layers.push(LayerSpec::Linear {
                    input: ch * hh * ww,
                    output: classes,
                });
            }
            other => return Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
        let mut spec =
            Self::new(vec![c, h, w], classes, layers).map_err(|e| Error::Config(e.to_string()))?;
        spec.arch = arch.to_string();
        Ok(spec)
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} in={:?} classes={} layers=[",
            self.arch, self.input_shape, self.classes
        )?;
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            match l {
                LayerSpec::Linear { input, output } => write!(f, "linear({input}->{output})")?,
                LayerSpec::Conv2d {
                    input,
                    output,
                    kernel,
                } => write!(f, "conv{kernel}x{kernel}({input}->{output})")?,
                LayerSpec::AvgPool { size } => write!(f, "avgpool({size})")?,
                LayerSpec::ReLU => f.write_str("relu")?,
                LayerSpec::GhostBatchNorm {
                    features,
                    ghost_size,
                } => write!(f, "gbn({features}, G={ghost_size})")?,
                LayerSpec::Dropout { p } => write!(f, "dropout({p})")?,
                LayerSpec::Flatten => f.write_str("flatten")?,
            }
        }
        f.write_str("]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stock_architectures_compose() {
        let mlp = ModelSpec::from_arch("mlp:256", [1, 28, 28], 10, 32, 0.0).unwrap();
        assert_eq!(mlp.param_count(), 784 * 256 + 256 + 256 * 10 + 10);
        let cnn = ModelSpec::from_arch("cnn:8,16", [1, 16, 16], 10, 32, 0.0).unwrap();
        assert_eq!(cnn.shapes().unwrap().last().unwrap(), &vec![10]);
        assert!(cnn.has_batch_norm());
        assert_eq!(cnn.ghost_size(), Some(32));
        let drop = ModelSpec::from_arch("mlp:16", [1, 4, 4], 3, 8, 0.5).unwrap();
        assert!(drop.has_dropout());
    }

    #[test]
    fn mismatched_layers_rejected() {
        let r = ModelSpec::new(
            vec![4],
            2,
            vec![LayerSpec::Linear {
                input: 5,
                output: 2,
            }],
        );
        assert!(r.is_err());
        assert!(ModelSpec::from_arch("cnn:4", [1, 5, 5], 2, 4, 0.0).is_err());
        assert!(ModelSpec::from_arch("resnet:50", [1, 8, 8], 2, 4, 0.0).is_err());
    }
}
