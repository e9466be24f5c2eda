use std::collections::BTreeMap;

use super::layers::{Activation, CellKind, LayerKind, LayerSpec};
use crate::{Error, Result};

/// Hidden width of every baseline recurrent layer.
pub const BASELINE_UNITS: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub cell: CellKind,
    pub layers: usize,
    pub units: usize,
    pub channels: usize,
    pub window: usize,
    pub dropout: f64,
    pub output: Activation,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            cell: CellKind::Lstm,
            layers: 4,
            units: BASELINE_UNITS,
            channels: 1,
            window: 24,
            dropout: 0.2,
            output: Activation::Linear,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrnnConfig {
    pub rows: usize,
    pub cols: usize,
    pub window: usize,
    pub blocks: usize,
    pub filters: usize,
    pub penultimate: usize,
    pub kernel: usize,
}

impl Default for CrnnConfig {
    fn default() -> Self {
        Self {
            rows: 40,
            cols: 40,
            window: 12,
            blocks: 4,
            filters: 16,
            penultimate: 20,
            kernel: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ComparatorKind {
    /// Per-pixel multilayer perceptron over the pixel's history.
    Nn,
    /// Per-pixel four-layer LSTM stack.
    Lstm,
    /// 2-D CNN with the input frames stacked as channels.
    Cnn,
    /// Single ConvLSTM followed by a 2-D convolution.
    ConvLstm,
}

impl ComparatorKind {
    pub const ALL: [ComparatorKind; 4] = [
        ComparatorKind::Nn,
        ComparatorKind::Lstm,
        ComparatorKind::Cnn,
        ComparatorKind::ConvLstm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ComparatorKind::Nn => "nn",
            ComparatorKind::Lstm => "lstm",
            ComparatorKind::Cnn => "cnn",
            ComparatorKind::ConvLstm => "convlstm",
        }
    }

    /// True for models that see each pixel's history in isolation.
    pub fn is_one_dimensional(self) -> bool {
        matches!(self, ComparatorKind::Nn | ComparatorKind::Lstm)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparatorConfig {
    pub kind: ComparatorKind,
    pub rows: usize,
    pub cols: usize,
    pub window: usize,
    /// Hidden units (nn) or filters (cnn, convlstm); the lstm comparator
    /// always uses the baseline width.
    pub width: usize,
    pub kernel: usize,
}

impl ComparatorConfig {
    pub fn new(kind: ComparatorKind, rows: usize, cols: usize, window: usize) -> Self {
        Self {
            kind,
            rows,
            cols,
            window,
            width: 16,
            kernel: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Architecture {
    Baseline(BaselineConfig),
    Crnn(CrnnConfig),
    Comparator(ComparatorConfig),
}

impl Architecture {
    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Baseline(_) => "baseline",
            Architecture::Crnn(_) => "crnn",
            Architecture::Comparator(c) => c.kind.name(),
        }
    }

    pub fn window(&self) -> usize {
        match self {
            Architecture::Baseline(c) => c.window,
            Architecture::Crnn(c) => c.window,
            Architecture::Comparator(c) => c.window,
        }
    }

    /// `(rows, cols)` for frame models.
    pub fn grid(&self) -> Option<(usize, usize)> {
        match self {
            Architecture::Baseline(_) => None,
            Architecture::Crnn(c) => Some((c.rows, c.cols)),
            Architecture::Comparator(c) => Some((c.rows, c.cols)),
        }
    }

    /// Values per input time step.
    pub fn step_width(&self) -> usize {
        match self {
            Architecture::Baseline(c) => c.channels,
            _ => {
                let (r, c) = self.grid().unwrap();
                r * c
            }
        }
    }

    /// Values per prediction.
    pub fn output_width(&self) -> usize {
        match self {
            Architecture::Baseline(_) => 1,
            _ => self.step_width(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window() == 0 {
            return Err(Error::invalid("window must be at least 1"));
        }
        match self {
            Architecture::Baseline(c) => {
                if !(1..=5).contains(&c.layers) {
                    return Err(Error::invalid(format!(
                        "baseline layer count {} outside 1..=5",
                        c.layers
                    )));
                }
                if !(1..=4).contains(&c.channels) {
                    return Err(Error::invalid(format!(
                        "baseline channel count {} outside 1..=4",
                        c.channels
                    )));
                }
                if c.units == 0 {
                    return Err(Error::invalid("baseline needs at least one unit"));
                }
            }
            Architecture::Crnn(c) => {
                if c.rows == 0 || c.cols == 0 || c.blocks == 0 {
                    return Err(Error::invalid("crnn grid and block count must be positive"));
                }
                if c.kernel % 2 == 0 {
                    return Err(Error::invalid("crnn kernel size must be odd"));
                }
            }
            Architecture::Comparator(c) => {
                if c.rows == 0 || c.cols == 0 || c.width == 0 {
                    return Err(Error::invalid("comparator grid and width must be positive"));
                }
                if c.kernel % 2 == 0 {
                    return Err(Error::invalid("comparator kernel size must be odd"));
                }
            }
        }
        for l in self.layers() {
            l.validate()?;
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        match self {
            Architecture::Baseline(c) => recurrent_stack(c.cell, c.layers, c.units, c.channels, c.dropout, c.output),
            Architecture::Crnn(c) => crnn_layers(c),
            Architecture::Comparator(c) => comparator_layers(c),
        }
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = vec![("arch".to_string(), self.name().to_string())];
        let mut push = |k: &str, v: String| kv.push((k.to_string(), v));
        match self {
            Architecture::Baseline(c) => {
                push("cell", c.cell.name().into());
                push("layers", c.layers.to_string());
                push("units", c.units.to_string());
                push("channels", c.channels.to_string());
                push("window", c.window.to_string());
                push("dropout", format!("{:?}", c.dropout));
                push("output", c.output.name().into());
            }
            Architecture::Crnn(c) => {
                push("rows", c.rows.to_string());
                push("cols", c.cols.to_string());
                push("window", c.window.to_string());
                push("blocks", c.blocks.to_string());
                push("filters", c.filters.to_string());
                push("penultimate", c.penultimate.to_string());
                push("kernel", c.kernel.to_string());
            }
            Architecture::Comparator(c) => {
                push("rows", c.rows.to_string());
                push("cols", c.cols.to_string());
                push("window", c.window.to_string());
                push("width", c.width.to_string());
                push("kernel", c.kernel.to_string());
            }
        }
        kv
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            kv.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Format(format!("model metadata lacks `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("model metadata `{k}` is not an integer")))
        };
        let arch = match get("arch")? {
            "baseline" => Architecture::Baseline(BaselineConfig {
                cell: CellKind::parse(get("cell")?)?,
                layers: num("layers")?,
                units: num("units")?,
                channels: num("channels")?,
                window: num("window")?,
                dropout: get("dropout")?
                    .parse()
                    .map_err(|_| Error::Format("model metadata `dropout` is not a number".into()))?,
                output: Activation::parse(get("output")?)?,
            }),
            "crnn" => Architecture::Crnn(CrnnConfig {
                rows: num("rows")?,
                cols: num("cols")?,
                window: num("window")?,
                blocks: num("blocks")?,
                filters: num("filters")?,
                penultimate: num("penultimate")?,
                kernel: num("kernel")?,
            }),
            other => {
                let kind = ComparatorKind::ALL
                    .into_iter()
                    .find(|k| k.name() == other)
                    .ok_or_else(|| Error::Format(format!("unknown architecture `{other}`")))?;
                Architecture::Comparator(ComparatorConfig {
                    kind,
                    rows: num("rows")?,
                    cols: num("cols")?,
                    window: num("window")?,
                    width: num("width")?,
                    kernel: num("kernel")?,
                })
            }
        };
        arch.validate()?;
        Ok(arch)
    }
}

pub(crate) fn recurrent_stack(
    cell: CellKind,
    layers: usize,
    units: usize,
    channels: usize,
    dropout: f64,
    output: Activation,
) -> Vec<LayerSpec> {
    let mut out = Vec::new();
    for l in 0..layers {
        let inputs = if l == 0 { channels } else { units };
        out.push(LayerSpec::new(
            format!("rec{l}"),
            LayerKind::Recurrent(cell),
            inputs,
            units,
        ));
        if l + 1 < layers {
            out.push(LayerSpec::new(format!("dropout{l}"), LayerKind::Dropout, units, units).dropout(dropout));
        }
    }
    out.push(LayerSpec::new("head", LayerKind::Dense, units, 1).activation(output));
    out
}

fn crnn_layers(c: &CrnnConfig) -> Vec<LayerSpec> {
    let mut out = Vec::new();
    let mut ch = 1;
    for b in 0..c.blocks {
        out.push(
            LayerSpec::new(format!("block{b}/conv"), LayerKind::Conv2d, ch, c.filters)
                .kernel(c.kernel)
                .activation(Activation::Tanh),
        );
        let f = if b + 1 == c.blocks { c.penultimate } else { c.filters };
        out.push(LayerSpec::new(format!("block{b}/convlstm"), LayerKind::ConvLstm2d, c.filters, f).kernel(c.kernel));
        ch = f;
    }
    out.push(LayerSpec::new("bn", LayerKind::BatchNorm, ch, ch));
    out.push(LayerSpec::new("geo", LayerKind::Concat, ch, ch + 1));
    out.push(
        LayerSpec::new("conv3d", LayerKind::Conv3d, ch + 1, 1)
            .kernel(c.kernel)
            .activation(Activation::Sigmoid),
    );
    out
}

fn comparator_layers(c: &ComparatorConfig) -> Vec<LayerSpec> {
    let w = c.width;
    match c.kind {
        ComparatorKind::Nn => vec![
            LayerSpec::new("dense0", LayerKind::Dense, c.window, w).activation(Activation::Tanh),
            LayerSpec::new("dense1", LayerKind::Dense, w, w).activation(Activation::Tanh),
            LayerSpec::new("head", LayerKind::Dense, w, 1).activation(Activation::Sigmoid),
        ],
        ComparatorKind::Lstm => recurrent_stack(CellKind::Lstm, 4, BASELINE_UNITS, 1, 0.0, Activation::Sigmoid),
        ComparatorKind::Cnn => vec![
            LayerSpec::new("conv0", LayerKind::Conv2d, c.window, w)
                .kernel(c.kernel)
                .activation(Activation::Tanh),
            LayerSpec::new("conv1", LayerKind::Conv2d, w, w)
                .kernel(c.kernel)
                .activation(Activation::Tanh),
            LayerSpec::new("head", LayerKind::Conv2d, w, 1)
                .kernel(c.kernel)
                .activation(Activation::Sigmoid),
        ],
        ComparatorKind::ConvLstm => vec![
            LayerSpec::new("convlstm", LayerKind::ConvLstm2d, 1, w).kernel(c.kernel),
            LayerSpec::new("head", LayerKind::Conv2d, w, 1)
                .kernel(c.kernel)
                .activation(Activation::Sigmoid),
        ],
    }
}
