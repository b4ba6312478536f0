//! Recognition backbones producing lateral taps at strides 4, 8, 16 and 32.
//!
//! Residual taps are read from the elementwise sum of the last block in each
//! group, before its ReLU. The activated value continues down the trunk.

use crate::error::Result;
use crate::graph::{ConvBn, ConvLayer, Exec, ModelSpec, Path};
use crate::graph::Backbone;

/// Base channel counts at the four taps, before width scaling.
pub const RESNET18_TAPS: [usize; 4] = [64, 128, 256, 512];
pub const MOBILENETV2_TAPS: [usize; 4] = [24, 32, 96, 320];

/// Encoder outputs at strides 4, 8, 16, 32.
#[derive(Clone, Debug)]
pub struct EncoderTaps<V> {
    /// Lateral taps, finest first.
    pub taps: [V; 4],
    /// Values forwarded to the next group (post-activation for residual groups).
    pub trunk: [V; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct BasicBlock {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub shortcut: Option<ConvBn>,
}

impl BasicBlock {
    fn new(prefix: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let mut conv1 = ConvBn::new(prefix, cin, cout, 3, stride);
        conv1.conv.name = format!("{prefix}.conv1");
        conv1.bn.as_mut().unwrap().name = format!("{prefix}.bn1");
        let mut conv2 = ConvBn::new(prefix, cout, cout, 3, 1);
        conv2.conv.name = format!("{prefix}.conv2");
        conv2.bn.as_mut().unwrap().name = format!("{prefix}.bn2");
        let shortcut = (stride != 1 || cin != cout).then(|| ConvBn::new(&format!("{prefix}.shortcut"), cin, cout, 1, stride));
        BasicBlock { conv1, conv2, shortcut }
    }

    /// Returns the pre-activation sum.
    fn forward_sum<E: Exec>(&self, e: &E, x: &E::V) -> Result<E::V> {
        let y = self.conv1.forward_relu(e, x)?;
        let y = self.conv2.forward(e, &y)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(e, x)?,
            None => x.clone(),
        };
        e.add(&y, &skip)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvertedResidual {
    pub expand: Option<ConvBn>,
    pub dw: ConvBn,
    pub project: ConvBn,
    pub residual: bool,
}

impl InvertedResidual {
    fn new(prefix: &str, cin: usize, cout: usize, stride: usize, expansion: usize) -> Self {
        let hidden = cin * expansion;
        InvertedResidual {
            expand: (expansion != 1).then(|| ConvBn::new(&format!("{prefix}.expand"), cin, hidden, 1, 1)),
            dw: ConvBn::depthwise(&format!("{prefix}.dw"), hidden, 3, stride),
            project: ConvBn::new(&format!("{prefix}.project"), hidden, cout, 1, 1),
            residual: stride == 1 && cin == cout,
        }
    }

    /// Linear (non-activated) block output.
    fn forward<E: Exec>(&self, e: &E, x: &E::V) -> Result<E::V> {
        let mut y = x.clone();
        if let Some(ex) = &self.expand {
            y = e.relu6(&ex.forward(e, &y)?);
        }
        y = e.relu6(&self.dw.forward(e, &y)?);
        y = self.project.forward(e, &y)?;
        if self.residual {
            y = e.add(&y, x)?;
        }
        Ok(y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Encoder {
    ResNet18 {
        stem: ConvBn,
        groups: Vec<Vec<BasicBlock>>,
    },
    MobileNetV2 {
        stem: ConvBn,
        groups: Vec<Vec<InvertedResidual>>,
    },
}

/// `(expansion, base channels, repeats, first stride)` rows, grouped by tap.
const MOBILENETV2_SETTINGS: [&[(usize, usize, usize, usize)]; 4] = [
    &[(1, 16, 1, 1), (6, 24, 2, 2)],
    &[(6, 32, 3, 2)],
    &[(6, 64, 4, 2), (6, 96, 3, 1)],
    &[(6, 160, 3, 2), (6, 320, 1, 1)],
];

impl Encoder {
    pub fn new(spec: &ModelSpec) -> Self {
        match spec.backbone {
            Backbone::Resnet18 => {
                let c0 = spec.channels(64);
                let mut stem = ConvBn::new("backbone.stem", 3, c0, 7, 2);
                stem.conv.geom.padding = (3, 3);
                let mut cin = c0;
                let groups = RESNET18_TAPS
                    .iter()
                    .enumerate()
                    .map(|(g, &base)| {
                        let cout = spec.channels(base);
                        let stride = if g == 0 { 1 } else { 2 };
                        let blocks = (0..2)
                            .map(|b| {
                                let prefix = format!("backbone.group{}.block{b}", g + 1);
                                let block = BasicBlock::new(&prefix, cin, cout, if b == 0 { stride } else { 1 });
                                cin = cout;
                                block
                            })
                            .collect();
                        blocks
                    })
                    .collect();
                Encoder::ResNet18 { stem, groups }
            }
            Backbone::Mobilenetv2 => {
                let c0 = spec.channels(32);
                let stem = ConvBn::new("backbone.stem", 3, c0, 3, 2);
                let mut cin = c0;
                let groups = MOBILENETV2_SETTINGS
                    .iter()
                    .enumerate()
                    .map(|(g, rows)| {
                        let mut blocks = Vec::new();
                        for &(t, c, n, s) in rows.iter() {
                            let cout = spec.channels(c);
                            for i in 0..n {
                                let prefix = format!("backbone.group{}.block{}", g + 1, blocks.len());
                                blocks.push(InvertedResidual::new(&prefix, cin, cout, if i == 0 { s } else { 1 }, t));
                                cin = cout;
                            }
                        }
                        blocks
                    })
                    .collect();
                Encoder::MobileNetV2 { stem, groups }
            }
        }
    }

    /// Channel counts of the four taps.
    pub fn tap_channels(&self) -> [usize; 4] {
        let last = |c: &ConvBn| c.conv.cout;
        match self {
            Encoder::ResNet18 { groups, .. } => {
                std::array::from_fn(|g| last(&groups[g].last().unwrap().conv2))
            }
            Encoder::MobileNetV2 { groups, .. } => {
                std::array::from_fn(|g| last(&groups[g].last().unwrap().project))
            }
        }
    }

    /// Runs the backbone; `level` prefixes stage names (empty for single scale).
    pub fn forward<E: Exec>(&self, e: &E, x: &E::V, level: &str) -> Result<EncoderTaps<E::V>> {
        let stage = |name: &str| format!("{level}{name}");
        let mut taps = Vec::with_capacity(4);
        let mut trunk = Vec::with_capacity(4);
        match self {
            Encoder::ResNet18 { stem, groups } => {
                e.enter(&stage("stem"), Path::Down);
                let mut h = stem.forward_relu(e, x)?;
                h = e.max_pool(&h, 3, 2, 1)?;
                for (g, blocks) in groups.iter().enumerate() {
                    e.enter(&stage(&format!("group{}", g + 1)), Path::Down);
                    let mut sum = None;
                    for block in blocks {
                        let s = block.forward_sum(e, &h)?;
                        h = e.relu(&s);
                        sum = Some(s);
                    }
                    let tap = sum.expect("groups are non-empty");
                    e.observe(&stage(&format!("group{}.tap", g + 1)), &tap);
                    e.observe(&stage(&format!("group{}.trunk", g + 1)), &h);
                    taps.push(tap);
                    trunk.push(h.clone());
                }
            }
            Encoder::MobileNetV2 { stem, groups } => {
                e.enter(&stage("stem"), Path::Down);
                let mut h = e.relu6(&stem.forward(e, x)?);
                for (g, blocks) in groups.iter().enumerate() {
                    e.enter(&stage(&format!("group{}", g + 1)), Path::Down);
                    for block in blocks {
                        h = block.forward(e, &h)?;
                    }
                    e.observe(&stage(&format!("group{}.tap", g + 1)), &h);
                    taps.push(h.clone());
                    trunk.push(h.clone());
                }
            }
        }
        Ok(EncoderTaps {
            taps: taps.try_into().ok().expect("four groups"),
            trunk: trunk.try_into().ok().expect("four groups"),
        })
    }

    pub fn visit(&self, f: &mut dyn FnMut(&ConvBn)) {
        match self {
            Encoder::ResNet18 { stem, groups } => {
                f(stem);
                for b in groups.iter().flatten() {
                    f(&b.conv1);
                    f(&b.conv2);
                    if let Some(s) = &b.shortcut {
                        f(s);
                    }
                }
            }
            Encoder::MobileNetV2 { stem, groups } => {
                f(stem);
                for b in groups.iter().flatten() {
                    if let Some(x) = &b.expand {
                        f(x);
                    }
                    f(&b.dw);
                    f(&b.project);
                }
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut ConvBn)) {
        match self {
            Encoder::ResNet18 { stem, groups } => {
                f(stem);
                for b in groups.iter_mut().flatten() {
                    f(&mut b.conv1);
                    f(&mut b.conv2);
                    if let Some(s) = &mut b.shortcut {
                        f(s);
                    }
                }
            }
            Encoder::MobileNetV2 { stem, groups } => {
                f(stem);
                for b in groups.iter_mut().flatten() {
                    if let Some(x) = &mut b.expand {
                        f(x);
                    }
                    f(&mut b.dw);
                    f(&mut b.project);
                }
            }
        }
    }

    /// Every depthwise convolution in the backbone.
    pub fn depthwise_layers(&self) -> Vec<&ConvLayer> {
        match self {
            Encoder::MobileNetV2 { groups, .. } => groups.iter().flatten().map(|b| &b.dw.conv).collect(),
            Encoder::ResNet18 { .. } => Vec::new(),
        }
    }
}
