//! Building blocks: residual bottlenecks, boundary-refine blocks, and the
//! large-kernel skip connectors.

use crate::nn::{
    relu_backward, relu_forward, BatchNorm2d, BnCache, Conv2d, ConvCache, Feat, ParamVisitor,
    Scalar,
};
use crate::rng::Rng;

/// 1x1 -> 3x3 -> 1x1 residual bottleneck. The projection variant carries a
/// strided 1x1 shortcut and is used at the head of each stage.
#[derive(Debug, Clone)]
pub struct Bottleneck<F> {
    conv_a: Conv2d<F>,
    bn_a: BatchNorm2d<F>,
    conv_b: Conv2d<F>,
    bn_b: BatchNorm2d<F>,
    conv_c: Conv2d<F>,
    bn_c: BatchNorm2d<F>,
    shortcut: Option<(Conv2d<F>, BatchNorm2d<F>)>,
}

pub struct BottleneckCache<F> {
    ca: ConvCache<F>,
    ba: BnCache<F>,
    ra: Feat<F>,
    cb: ConvCache<F>,
    bb: BnCache<F>,
    rb: Feat<F>,
    cc: ConvCache<F>,
    bc: BnCache<F>,
    sc: Option<(ConvCache<F>, BnCache<F>)>,
    y: Feat<F>,
}

impl<F: Scalar> Bottleneck<F> {
    pub fn new(c_in: usize, c_out: usize, stride: usize, project: bool, rng: &mut Rng) -> Self {
        let mid = c_out / 4;
        Bottleneck {
            conv_a: Conv2d::square(c_in, mid, 1, 1, 0, rng),
            bn_a: BatchNorm2d::new(mid),
            conv_b: Conv2d::square(mid, mid, 3, stride, 1, rng),
            bn_b: BatchNorm2d::new(mid),
            conv_c: Conv2d::square(mid, c_out, 1, 1, 0, rng),
            bn_c: BatchNorm2d::new(c_out),
            shortcut: project.then(|| {
                (
                    Conv2d::square(c_in, c_out, 1, stride, 0, rng),
                    BatchNorm2d::new(c_out),
                )
            }),
        }
    }

    pub fn forward_train(
        &mut self,
        x: &Feat<F>,
        update_running: bool,
    ) -> (Feat<F>, BottleneckCache<F>) {
        let (a, ca) = self.conv_a.forward(x).expect("bottleneck conv_a");
        let (a, ba) = self.bn_a.forward_train(&a, update_running);
        let ra = relu_forward(&a);
        let (b, cb) = self.conv_b.forward(&ra).expect("bottleneck conv_b");
        let (b, bb) = self.bn_b.forward_train(&b, update_running);
        let rb = relu_forward(&b);
        let (c, cc) = self.conv_c.forward(&rb).expect("bottleneck conv_c");
        let (mut c, bc) = self.bn_c.forward_train(&c, update_running);

        let sc = match &mut self.shortcut {
            Some((conv, bn)) => {
                let (s, cs) = conv.forward(x).expect("bottleneck shortcut");
                let (s, bs) = bn.forward_train(&s, update_running);
                c.add_assign(&s);
                Some((cs, bs))
            }
            None => {
                c.add_assign(x);
                None
            }
        };
        let y = relu_forward(&c);
        (
            y.clone(),
            BottleneckCache {
                ca,
                ba,
                ra,
                cb,
                bb,
                rb,
                cc,
                bc,
                sc,
                y,
            },
        )
    }

    pub fn forward_eval(&self, x: &Feat<F>) -> Feat<F> {
        let (a, _) = self.conv_a.forward(x).expect("bottleneck conv_a");
        let a = relu_forward(&self.bn_a.forward_eval(&a));
        let (b, _) = self.conv_b.forward(&a).expect("bottleneck conv_b");
        let b = relu_forward(&self.bn_b.forward_eval(&b));
        let (c, _) = self.conv_c.forward(&b).expect("bottleneck conv_c");
        let mut c = self.bn_c.forward_eval(&c);
        match &self.shortcut {
            Some((conv, bn)) => {
                let (s, _) = conv.forward(x).expect("bottleneck shortcut");
                c.add_assign(&bn.forward_eval(&s));
            }
            None => c.add_assign(x),
        }
        relu_forward(&c)
    }

    pub fn backward(&mut self, cache: &BottleneckCache<F>, dy: &Feat<F>) -> Feat<F> {
        let dsum = relu_backward(&cache.y, dy);
        // main path
        let d = self.bn_c.backward(&cache.bc, &dsum);
        let d = self.conv_c.backward(&cache.cc, &d);
        let d = relu_backward(&cache.rb, &d);
        let d = self.bn_b.backward(&cache.bb, &d);
        let d = self.conv_b.backward(&cache.cb, &d);
        let d = relu_backward(&cache.ra, &d);
        let d = self.bn_a.backward(&cache.ba, &d);
        let mut dx = self.conv_a.backward(&cache.ca, &d);
        // shortcut path
        match (&mut self.shortcut, &cache.sc) {
            (Some((conv, bn)), Some((cs, bs))) => {
                let ds = bn.backward(bs, &dsum);
                dx.add_assign(&conv.backward(cs, &ds));
            }
            (None, None) => dx.add_assign(&dsum),
            _ => unreachable!("shortcut cache mismatch"),
        }
        dx
    }

    pub fn visit_params(&mut self, prefix: &str, f: ParamVisitor<F>) {
        self.conv_a.visit_params(&format!("{prefix}.conv_a"), f);
        self.bn_a.visit_params(&format!("{prefix}.bn_a"), f);
        self.conv_b.visit_params(&format!("{prefix}.conv_b"), f);
        self.bn_b.visit_params(&format!("{prefix}.bn_b"), f);
        self.conv_c.visit_params(&format!("{prefix}.conv_c"), f);
        self.bn_c.visit_params(&format!("{prefix}.bn_c"), f);
        if let Some((conv, bn)) = &mut self.shortcut {
            conv.visit_params(&format!("{prefix}.shortcut_conv"), f);
            bn.visit_params(&format!("{prefix}.shortcut_bn"), f);
        }
    }
}

/// Size-preserving residual refinement: x + conv3x3(relu(conv3x3(x))).
#[derive(Debug, Clone)]
pub struct RefineBlock<F> {
    conv_a: Conv2d<F>,
    conv_b: Conv2d<F>,
}

pub struct RefineCache<F> {
    ca: ConvCache<F>,
    ra: Feat<F>,
    cb: ConvCache<F>,
}

impl<F: Scalar> RefineBlock<F> {
    pub fn new(channels: usize, rng: &mut Rng) -> Self {
        // The residual branch starts at zero so a stack of refine blocks is
        // the identity at initialization; otherwise each block doubles the
        // activation variance and the decoder saturates before training.
        let conv_a = Conv2d::square(channels, channels, 3, 1, 1, rng);
        let mut conv_b = Conv2d::square(channels, channels, 3, 1, 1, rng);
        for w in conv_b.weight.data.iter_mut() {
            *w = F::zero();
        }
        RefineBlock { conv_a, conv_b }
    }

    pub fn forward_train(&self, x: &Feat<F>) -> (Feat<F>, RefineCache<F>) {
        let (t, ca) = self.conv_a.forward(x).expect("refine conv_a");
        let ra = relu_forward(&t);
        let (u, cb) = self.conv_b.forward(&ra).expect("refine conv_b");
        let mut y = x.clone();
        y.add_assign(&u);
        (y, RefineCache { ca, ra, cb })
    }

    pub fn forward_eval(&self, x: &Feat<F>) -> Feat<F> {
        let (t, _) = self.conv_a.forward(x).expect("refine conv_a");
        let (u, _) = self.conv_b.forward(&relu_forward(&t)).expect("refine conv_b");
        let mut y = x.clone();
        y.add_assign(&u);
        y
    }

    pub fn backward(&mut self, cache: &RefineCache<F>, dy: &Feat<F>) -> Feat<F> {
        let dr = self.conv_b.backward(&cache.cb, dy);
        let dt = relu_backward(&cache.ra, &dr);
        let mut dx = self.conv_a.backward(&cache.ca, &dt);
        dx.add_assign(dy);
        dx
    }

    pub fn visit_params(&mut self, prefix: &str, f: ParamVisitor<F>) {
        self.conv_a.visit_params(&format!("{prefix}.conv_a"), f);
        self.conv_b.visit_params(&format!("{prefix}.conv_b"), f);
    }
}

/// Kernel layout of the skip connectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelMode {
    /// Single full 7x7 kernel.
    Real7,
    /// 7x1 followed by 1x7, the factored large-kernel construction.
    Pseudo7,
    /// Plain 3x3, the small-kernel baseline.
    Small3,
}

impl KernelMode {
    pub fn as_str(self) -> &'static str {
        match self {
            KernelMode::Real7 => "real7",
            KernelMode::Pseudo7 => "pseudo7",
            KernelMode::Small3 => "small3",
        }
    }
}

/// Large-convolutional-kernel skip connector mapping an encoder tap to
/// `num_classes` channels.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)] // five instances per network
pub enum SkipConnector<F> {
    Single(Conv2d<F>),
    Pair(Conv2d<F>, Conv2d<F>),
}

#[allow(clippy::large_enum_variant)] // caches are transient, one per forward
pub enum SkipCache<F> {
    Single(ConvCache<F>),
    Pair(ConvCache<F>, ConvCache<F>),
}

impl<F: Scalar> SkipConnector<F> {
    pub fn new(mode: KernelMode, c_in: usize, num_classes: usize, rng: &mut Rng) -> Self {
        match mode {
            KernelMode::Real7 => {
                SkipConnector::Single(Conv2d::square(c_in, num_classes, 7, 1, 3, rng))
            }
            KernelMode::Small3 => {
                SkipConnector::Single(Conv2d::square(c_in, num_classes, 3, 1, 1, rng))
            }
            KernelMode::Pseudo7 => SkipConnector::Pair(
                Conv2d::new(c_in, num_classes, 7, 1, 1, 3, 0, rng),
                Conv2d::new(num_classes, num_classes, 1, 7, 1, 0, 3, rng),
            ),
        }
    }

    /// Closed-form trainable parameter count per mode.
    pub fn parameter_count_formula(mode: KernelMode, c_in: usize, num_classes: usize) -> usize {
        let nc = num_classes;
        match mode {
            KernelMode::Real7 => 49 * c_in * nc + nc,
            KernelMode::Small3 => 9 * c_in * nc + nc,
            KernelMode::Pseudo7 => (7 * c_in * nc + nc) + (7 * nc * nc + nc),
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            SkipConnector::Single(c) => c.parameter_count(),
            SkipConnector::Pair(a, b) => a.parameter_count() + b.parameter_count(),
        }
    }

    pub fn forward_train(&self, x: &Feat<F>) -> (Feat<F>, SkipCache<F>) {
        match self {
            SkipConnector::Single(conv) => {
                let (y, c) = conv.forward(x).expect("skip conv");
                (y, SkipCache::Single(c))
            }
            SkipConnector::Pair(a, b) => {
                let (t, ca) = a.forward(x).expect("skip conv 7x1");
                let (y, cb) = b.forward(&t).expect("skip conv 1x7");
                (y, SkipCache::Pair(ca, cb))
            }
        }
    }

    pub fn forward_eval(&self, x: &Feat<F>) -> Feat<F> {
        match self {
            SkipConnector::Single(conv) => conv.forward(x).expect("skip conv").0,
            SkipConnector::Pair(a, b) => {
                let (t, _) = a.forward(x).expect("skip conv 7x1");
                b.forward(&t).expect("skip conv 1x7").0
            }
        }
    }

    pub fn backward(&mut self, cache: &SkipCache<F>, dy: &Feat<F>) -> Feat<F> {
        match (self, cache) {
            (SkipConnector::Single(conv), SkipCache::Single(c)) => conv.backward(c, dy),
            (SkipConnector::Pair(a, b), SkipCache::Pair(ca, cb)) => {
                let dt = b.backward(cb, dy);
                a.backward(ca, &dt)
            }
            _ => unreachable!("skip cache mismatch"),
        }
    }

    pub fn visit_params(&mut self, prefix: &str, f: ParamVisitor<F>) {
        match self {
            SkipConnector::Single(conv) => conv.visit_params(&format!("{prefix}.conv"), f),
            SkipConnector::Pair(a, b) => {
                a.visit_params(&format!("{prefix}.conv_a"), f);
                b.visit_params(&format!("{prefix}.conv_b"), f);
            }
        }
    }
}
