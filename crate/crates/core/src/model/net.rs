//! ResNet backbones and MLP heads built from [`super::layers`].

use super::layers::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward, relu_infer, BatchNorm, Conv2d, FeatureMap,
    MaxPool, Param, Params,
};
use crate::rng::ChaCha8Rng;

#[derive(Debug, Clone)]
pub(crate) struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    down: Option<(Conv2d, BatchNorm)>,
    mask1: Vec<bool>,
    mask_out: Vec<bool>,
}

impl BasicBlock {
    fn new(name: &str, in_c: usize, out_c: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let conv1 = Conv2d::new(&format!("{name}.conv1"), in_c, out_c, 3, stride, 1, rng);
        let bn1 = BatchNorm::new(&format!("{name}.bn1"), out_c);
        let conv2 = Conv2d::new(&format!("{name}.conv2"), out_c, out_c, 3, 1, 1, rng);
        let bn2 = BatchNorm::new(&format!("{name}.bn2"), out_c);
        let down = (stride != 1 || in_c != out_c).then(|| {
            (
                Conv2d::new(&format!("{name}.downsample.0"), in_c, out_c, 1, stride, 0, rng),
                BatchNorm::new(&format!("{name}.downsample.1"), out_c),
            )
        });
        BasicBlock { conv1, bn1, conv2, bn2, down, mask1: Vec::new(), mask_out: Vec::new() }
    }

    fn infer(&self, x: &FeatureMap) -> FeatureMap {
        let mut h = self.bn1.infer(self.conv1.infer(x));
        relu_infer(&mut h);
        let mut h = self.bn2.infer(self.conv2.infer(&h));
        match &self.down {
            Some((c, b)) => h.add_assign(&b.infer(c.infer(x))),
            None => h.add_assign(x),
        }
        relu_infer(&mut h);
        h
    }

    fn forward(&mut self, x: &FeatureMap) -> FeatureMap {
        let h = self.conv1.forward(x);
        let mut h = self.bn1.forward(h);
        self.mask1 = relu(&mut h);
        let h = self.conv2.forward(&h);
        let mut h = self.bn2.forward(h);
        match &mut self.down {
            Some((c, b)) => {
                let s = c.forward(x);
                h.add_assign(&b.forward(s));
            }
            None => h.add_assign(x),
        }
        self.mask_out = relu(&mut h);
        h
    }

    fn backward(&mut self, mut dy: FeatureMap, need_input_grad: bool) -> Option<FeatureMap> {
        relu_backward(&mut dy, &self.mask_out);
        let d_short = match &mut self.down {
            Some((c, b)) => c.backward(&b.backward(dy.clone()), need_input_grad),
            None => Some(dy.clone()),
        };
        let d = self.bn2.backward(dy);
        let mut d = self.conv2.backward(&d, true).expect("input grad requested");
        relu_backward(&mut d, &self.mask1);
        let d = self.bn1.backward(d);
        let dx = self.conv1.backward(&d, need_input_grad);
        match (dx, d_short) {
            (Some(mut dx), Some(ds)) => {
                dx.add_assign(&ds);
                Some(dx)
            }
            _ => None,
        }
    }
}

impl Params for BasicBlock {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.conv1.visit(f);
        self.bn1.visit(f);
        self.conv2.visit(f);
        self.bn2.visit(f);
        if let Some((c, b)) = &self.down {
            c.visit(f);
            b.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_mut(f);
        self.bn1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.bn2.visit_mut(f);
        if let Some((c, b)) = &mut self.down {
            c.visit_mut(f);
            b.visit_mut(f);
        }
    }
}

/// Stem geometry and stage layout of a residual backbone.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub widths: [usize; 4],
    pub depth: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Backbone {
    stem: Conv2d,
    stem_bn: BatchNorm,
    stem_mask: Vec<bool>,
    pool: MaxPool,
    blocks: Vec<BasicBlock>,
    pooled_hw: (usize, usize),
}

impl Backbone {
    pub fn new(layout: Layout, in_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let k = layout.stem_kernel;
        let stem = Conv2d::new("backbone.conv1", in_channels, layout.stem_channels, k, 2, k / 2, rng);
        let stem_bn = BatchNorm::new("backbone.bn1", layout.stem_channels);
        let mut blocks = Vec::new();
        let mut in_c = layout.stem_channels;
        for (stage, &width) in layout.widths.iter().enumerate() {
            for i in 0..layout.depth {
                let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                let name = format!("backbone.layer{}.{}", stage + 1, i);
                blocks.push(BasicBlock::new(&name, in_c, width, stride, rng));
                in_c = width;
            }
        }
        Backbone { stem, stem_bn, stem_mask: Vec::new(), pool: MaxPool::default(), blocks, pooled_hw: (0, 0) }
    }

    pub fn infer(&self, x: &FeatureMap) -> FeatureMap {
        let mut h = self.stem_bn.infer(self.stem.infer(x));
        relu_infer(&mut h);
        let mut h = self.pool.infer(&h);
        for b in &self.blocks {
            h = b.infer(&h);
        }
        global_avg_pool(&h)
    }

    pub fn forward(&mut self, x: &FeatureMap) -> FeatureMap {
        let h = self.stem.forward(x);
        let mut h = self.stem_bn.forward(h);
        self.stem_mask = relu(&mut h);
        let mut h = self.pool.forward(&h);
        for b in &mut self.blocks {
            h = b.forward(&h);
        }
        self.pooled_hw = (h.h, h.w);
        global_avg_pool(&h)
    }

    /// Backpropagates to every backbone parameter. The input gradient is
    /// never needed, so the stem skips it.
    pub fn backward(&mut self, dy: &FeatureMap) {
        let (h, w) = self.pooled_hw;
        let mut d = global_avg_pool_backward(dy, h, w);
        for b in self.blocks.iter_mut().rev() {
            d = b.backward(d, true).expect("input grad requested");
        }
        let mut d = self.pool.backward(&d);
        relu_backward(&mut d, &self.stem_mask);
        let d = self.stem_bn.backward(d);
        self.stem.backward(&d, false);
    }
}

impl Params for Backbone {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.stem.visit(f);
        self.stem_bn.visit(f);
        for b in &self.blocks {
            b.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stem.visit_mut(f);
        self.stem_bn.visit_mut(f);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
    }
}

/// Linear -> BatchNorm -> ReLU -> Linear.
#[derive(Debug, Clone)]
pub(crate) struct Mlp {
    fc1: Conv2d,
    bn: BatchNorm,
    fc2: Conv2d,
    mask: Vec<bool>,
}

impl Mlp {
    pub fn new(name: &str, in_f: usize, hidden: usize, out_f: usize, rng: &mut ChaCha8Rng) -> Self {
        Mlp {
            fc1: Conv2d::dense(&format!("{name}.fc1"), in_f, hidden, rng),
            bn: BatchNorm::new(&format!("{name}.bn1"), hidden),
            fc2: Conv2d::dense(&format!("{name}.fc2"), hidden, out_f, rng),
            mask: Vec::new(),
        }
    }

    pub fn in_features(&self) -> usize {
        self.fc1.in_c
    }

    pub fn infer(&self, x: &FeatureMap) -> FeatureMap {
        let mut h = self.bn.infer(self.fc1.infer(x));
        relu_infer(&mut h);
        self.fc2.infer(&h)
    }

    pub fn forward(&mut self, x: &FeatureMap) -> FeatureMap {
        let h = self.fc1.forward(x);
        let mut h = self.bn.forward(h);
        self.mask = relu(&mut h);
        self.fc2.forward(&h)
    }

    pub fn backward(&mut self, dy: &FeatureMap) -> FeatureMap {
        let mut d = self.fc2.backward(dy, true).expect("input grad requested");
        relu_backward(&mut d, &self.mask);
        let d = self.bn.backward(d);
        self.fc1.backward(&d, true).expect("input grad requested")
    }
}

impl Params for Mlp {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.fc1.visit(f);
        self.bn.visit(f);
        self.fc2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.fc1.visit_mut(f);
        self.bn.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}
