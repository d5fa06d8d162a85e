//! Network building blocks: self-residual Ω, sub-band fusion Φ, the NHL
//! block, the two-stream block, global attention, and the thumbnail
//! upsampler.
//!
//! Every block is a struct owning its parameter tensors; `collect_params`
//! walks them into a flat named registry shared with the optimizer and
//! checkpoints. The activation is leaky (slope 0.2) everywhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Parameter, Result, Scalar, Shape, Tensor, TensorError};
use crate::wavelet::{self, level_channels, SubbandGroup};

/// Negative-side slope of the shared leaky activation.
pub const ACT_SLOPE: f64 = 0.2;

/// Residual-closing convolutions start at a tenth of the Kaiming scale so
/// deep stacks of Ω blocks stay near-identity at initialization.
const RESIDUAL_GAIN: f64 = 0.1;

pub fn act<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.leaky_relu(S::from_f64(ACT_SLOPE))
}

/// Deterministic weight initializer (Kaiming fan-in scaling), shared across
/// the whole model so a seed fixes every parameter.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// `[oc, ic, k, k]` weight with std `gain * sqrt(2 / fan_in)`.
    pub fn conv_weight<S: Scalar>(
        &mut self,
        oc: usize,
        ic: usize,
        k: usize,
        gain: f64,
    ) -> Tensor<S> {
        let std = gain * (2.0 / (ic * k * k) as f64).sqrt();
        let data: Vec<S> = (0..oc * ic * k * k)
            .map(|_| S::from_f64(self.normal() * std))
            .collect();
        Tensor::variable(Shape::nchw(oc, ic, k, k), data).expect("sized by construction")
    }
}

/// A square-kernel convolution layer with bias.
pub struct Conv<S: Scalar> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
    pub stride: usize,
    pub padding: usize,
}

impl<S: Scalar> Conv<S> {
    /// Kaiming-initialized `k x k` conv, zero bias, `same` padding.
    pub fn kaiming(init: &mut Init, ic: usize, oc: usize, k: usize, gain: f64) -> Self {
        Conv {
            weight: init.conv_weight(oc, ic, k, gain),
            bias: zero_var(Shape::nchw(1, oc, 1, 1)),
            stride: 1,
            padding: k / 2,
        }
    }

    /// Identity-like conv: center tap of `scale` from input channel
    /// `o % ic` into output channel `o`, zero elsewhere.
    pub fn center_tap(ic: usize, oc: usize, k: usize, scale: f64) -> Self {
        let mut w = vec![S::zero(); oc * ic * k * k];
        for o in 0..oc {
            let i = if oc >= ic { o * ic / oc } else { o % ic };
            w[(o * ic + i) * k * k + (k / 2) * k + k / 2] = S::from_f64(scale);
        }
        Conv {
            weight: Tensor::variable(Shape::nchw(oc, ic, k, k), w).expect("sized by construction"),
            bias: zero_var(Shape::nchw(1, oc, 1, 1)),
            stride: 1,
            padding: k / 2,
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        x.conv2d(&self.weight, Some(&self.bias), self.stride, self.padding)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<Parameter<S>>) {
        out.push(Parameter::new(format!("{prefix}.w"), self.weight.clone()));
        out.push(Parameter::new(format!("{prefix}.b"), self.bias.clone()));
    }
}

fn zero_var<S: Scalar>(shape: Shape) -> Tensor<S> {
    Tensor::variable(shape, vec![S::zero(); shape.numel()]).expect("sized by construction")
}

/// Construction-time settings shared by the blocks at one wavelet level.
#[derive(Clone, Copy)]
pub struct BlockConfig {
    /// Hidden width of each internal `R(·)`; equals the group's channel count.
    pub width_per_group: usize,
    pub activation_slope: f64,
    pub uses_global: bool,
}

impl BlockConfig {
    pub fn for_level(level: usize, uses_global: bool) -> Self {
        BlockConfig {
            width_per_group: level_channels(level),
            activation_slope: ACT_SLOPE,
            uses_global,
        }
    }
}

/// Self-residual block Ω(x) = R(x) + x with R = conv3x3 → act → conv3x3.
pub struct SRes<S: Scalar> {
    pub c1: Conv<S>,
    pub c2: Conv<S>,
}

impl<S: Scalar> SRes<S> {
    pub fn new(init: &mut Init, channels: usize) -> Self {
        SRes {
            c1: Conv::kaiming(init, channels, channels, 3, 1.0),
            c2: Conv::kaiming(init, channels, channels, 3, RESIDUAL_GAIN),
        }
    }

    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.c2.forward(&act(&self.c1.forward(x)?))?.add(x)
    }

    /// Force `R ≡ 0` so the block becomes the identity (used by tests and
    /// the identity-reduction property).
    pub fn zero_residual(&self) {
        self.c2.weight.update_data(|d| d.fill(S::zero()));
        self.c2.bias.update_data(|d| d.fill(S::zero()));
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<Parameter<S>>) {
        self.c1.collect_params(&format!("{prefix}.c1"), out);
        self.c2.collect_params(&format!("{prefix}.c2"), out);
    }
}

/// Pairwise sub-band fusion Φ(a, b) = reduce(Ω₃(Cat(Ω₁(a), Ω₂(b)))).
///
/// The trailing 1x1 reduction maps the concatenated width back to `b`'s
/// channel count; it starts as the selector of the `b` half, so Φ(a, b) = b
/// when the residual branches are zeroed.
pub struct Phi<S: Scalar> {
    pub omega_a: SRes<S>,
    pub omega_b: SRes<S>,
    pub omega_cat: SRes<S>,
    pub reduce: Conv<S>,
    ca: usize,
    cb: usize,
}

impl<S: Scalar> Phi<S> {
    pub fn new(init: &mut Init, ca: usize, cb: usize) -> Self {
        let mut reduce_w = vec![S::zero(); cb * (ca + cb)];
        for o in 0..cb {
            reduce_w[o * (ca + cb) + ca + o] = S::one();
        }
        Phi {
            omega_a: SRes::new(init, ca),
            omega_b: SRes::new(init, cb),
            omega_cat: SRes::new(init, ca + cb),
            reduce: Conv {
                weight: Tensor::variable(Shape::nchw(cb, ca + cb, 1, 1), reduce_w)
                    .expect("sized by construction"),
                bias: zero_var(Shape::nchw(1, cb, 1, 1)),
                stride: 1,
                padding: 0,
            },
            ca,
            cb,
        }
    }

    pub fn forward(&self, a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.h() != sb.h() || sa.w() != sb.w() {
            return Err(TensorError::ShapeMismatch {
                op: "phi",
                lhs: sa,
                rhs: sb,
            });
        }
        if sa.c() != self.ca || sb.c() != self.cb {
            return Err(TensorError::ShapeMismatch {
                op: "phi",
                lhs: sa,
                rhs: sb,
            });
        }
        let cat = Tensor::concat(&[&self.omega_a.forward(a)?, &self.omega_b.forward(b)?])?;
        self.reduce.forward(&self.omega_cat.forward(&cat)?)
    }

    pub fn zero_residual(&self) {
        self.omega_a.zero_residual();
        self.omega_b.zero_residual();
        self.omega_cat.zero_residual();
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<Parameter<S>>) {
        self.omega_a.collect_params(&format!("{prefix}.oa"), out);
        self.omega_b.collect_params(&format!("{prefix}.ob"), out);
        self.omega_cat.collect_params(&format!("{prefix}.oc"), out);
        self.reduce.collect_params(&format!("{prefix}.reduce"), out);
    }
}

/// NHL sub-band block: N' = Ω(N), S' = Φ(N, S), T' = Φ(S', T).
pub struct Nhl<S: Scalar> {
    pub omega_n: SRes<S>,
    pub phi_s: Phi<S>,
    pub phi_t: Phi<S>,
    level: usize,
}

impl<S: Scalar> Nhl<S> {
    pub fn new(init: &mut Init, level: usize) -> Self {
        let cn = level_channels(level) - 6;
        Nhl {
            omega_n: SRes::new(init, cn),
            phi_s: Phi::new(init, cn, 3),
            phi_t: Phi::new(init, 3, 3),
            level,
        }
    }

    pub fn forward(&self, g: &SubbandGroup<S>) -> Result<SubbandGroup<S>> {
        let n2 = self.omega_n.forward(&g.n)?;
        let s2 = self.phi_s.forward(&g.n, &g.s)?;
        let t2 = self.phi_t.forward(&s2, &g.t)?;
        Ok(SubbandGroup {
            t: t2,
            s: s2,
            n: n2,
            level: g.level,
        })
    }

    pub fn zero_residual(&self) {
        self.omega_n.zero_residual();
        self.phi_s.zero_residual();
        self.phi_t.zero_residual();
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<Parameter<S>>) {
        self.omega_n.collect_params(&format!("{prefix}.on"), out);
        self.phi_s.collect_params(&format!("{prefix}.ps"), out);
        self.phi_t.collect_params(&format!("{prefix}.pt"), out);
    }
}

/// Two-stream block: branch 1 regroups and runs NHLs; branch 2 maintains the
/// additive global feature, fused back through a 1x1 conv.
pub struct Tsb<S: Scalar> {
    pub mixer: Conv<S>,
    pub nhls: Vec<Nhl<S>>,
    pub global_c1: Option<Conv<S>>,
    pub global_c2: Option<Conv<S>>,
    pub fuse: Option<Conv<S>>,
    level: usize,
}

impl<S: Scalar> Tsb<S> {
    pub fn new(init: &mut Init, level: usize, nhl_count: usize, cfg: BlockConfig) -> Self {
        let c = cfg.width_per_group;
        let mut mixer_w = vec![S::zero(); c * c];
        for o in 0..c {
            mixer_w[o * c + o] = S::one();
        }
        let mixer = Conv {
            weight: Tensor::variable(Shape::nchw(c, c, 1, 1), mixer_w)
                .expect("sized by construction"),
            bias: zero_var(Shape::nchw(1, c, 1, 1)),
            stride: 1,
            padding: 0,
        };
        let (global_c1, global_c2, fuse) = if cfg.uses_global {
            (
                Some(Conv::kaiming(init, c, c, 3, 1.0)),
                Some(Conv::kaiming(init, c, c, 3, RESIDUAL_GAIN)),
                Some(Conv::kaiming(init, c, c, 1, RESIDUAL_GAIN)),
            )
        } else {
            (None, None, None)
        };
        Tsb {
            mixer,
            nhls: (0..nhl_count).map(|_| Nhl::new(init, level)).collect(),
            global_c1,
            global_c2,
            fuse,
            level,
        }
    }

    /// Returns the refined group and, when the global stream is enabled, the
    /// accumulated global feature.
    pub fn forward(
        &self,
        ht: &Tensor<S>,
        g_in: Option<&Tensor<S>>,
    ) -> Result<(SubbandGroup<S>, Option<Tensor<S>>)> {
        let mut group = wavelet::regroup(ht, &self.mixer.weight, &self.mixer.bias, self.level)?;
        for nhl in &self.nhls {
            group = nhl.forward(&group)?;
        }
        let (Some(c1), Some(c2), Some(fuse)) = (&self.global_c1, &self.global_c2, &self.fuse)
        else {
            return Ok((group, None));
        };
        let mut g_out = c2.forward(&act(&c1.forward(ht)?))?;
        if let Some(g) = g_in {
            g_out = g_out.add(g)?;
        }
        let fused = group.concat()?.add(&fuse.forward(&g_out)?)?;
        Ok((SubbandGroup::from_tensor(&fused, self.level)?, Some(g_out)))
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<Parameter<S>>) {
        self.mixer.collect_params(&format!("{prefix}.mixer"), out);
        for (i, nhl) in self.nhls.iter().enumerate() {
            nhl.collect_params(&format!("{prefix}.nhl{i}"), out);
        }
        if let (Some(c1), Some(c2), Some(fuse)) = (&self.global_c1, &self.global_c2, &self.fuse) {
            c1.collect_params(&format!("{prefix}.g1"), out);
            c2.collect_params(&format!("{prefix}.g2"), out);
            fuse.collect_params(&format!("{prefix}.fuse"), out);
        }
    }
}

/// Global attention: H_a = scale ⊙ sigmoid(GA(g)) ⊙ h + h with GA two 1x1
/// convolutions. The per-channel scale starts at zero so the block is the
/// identity at initialization.
pub struct GlobalAttention<S: Scalar> {
    pub c1: Conv<S>,
    pub c2: Conv<S>,
    pub scale: Tensor<S>,
}

impl<S: Scalar> GlobalAttention<S> {
    pub fn new(init: &mut Init, g_channels: usize, h_channels: usize) -> Self {
        GlobalAttention {
            c1: Conv::kaiming(init, g_channels, g_channels, 1, 1.0),
            c2: Conv::kaiming(init, g_channels, h_channels, 1, 1.0),
            scale: zero_var(Shape::nchw(1, h_channels, 1, 1)),
        }
    }

    pub fn forward(&self, g: &Tensor<S>, h: &Tensor<S>) -> Result<Tensor<S>> {
        let (sg, sh) = (g.shape(), h.shape());
        if sg.h() != sh.h() || sg.w() != sh.w() {
            return Err(TensorError::ShapeMismatch {
                op: "global_attention",
                lhs: sg,
                rhs: sh,
            });
        }
        let gate = self.c2.forward(&act(&self.c1.forward(g)?))?.sigmoid();
        gate.mul_channelwise(&self.scale)?.mul(h)?.add(h)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<Parameter<S>>) {
        self.c1.collect_params(&format!("{prefix}.c1"), out);
        self.c2.collect_params(&format!("{prefix}.c2"), out);
        out.push(Parameter::new(
            format!("{prefix}.scale"),
            self.scale.clone(),
        ));
    }
}

/// Clean-space projection: learned upsampler from the thumbnail back to full
/// resolution via sub-pixel convolution.
///
/// Initialization is identity-like: the stack starts as a nearest-neighbor
/// upsample of `2^-K ·` leaky(t), so a constant thumbnail yields a constant
/// image.
pub struct Csp<S: Scalar> {
    pub c1: Conv<S>,
    pub c2: Conv<S>,
    k_levels: usize,
}

impl<S: Scalar> Csp<S> {
    pub fn new(k_levels: usize) -> Self {
        let r = 1 << k_levels;
        let wide = 3 * r * r;
        Csp {
            c1: Conv::center_tap(3, wide, 3, 1.0),
            c2: Conv::center_tap(wide, wide, 3, 1.0 / r as f64),
            k_levels,
        }
    }

    pub fn forward(&self, t: &Tensor<S>) -> Result<Tensor<S>> {
        if t.shape().c() != 3 {
            return Err(TensorError::BadArgument {
                op: "csp",
                msg: format!("thumbnail must have 3 channels, got {}", t.shape().c()),
            });
        }
        self.c2
            .forward(&act(&self.c1.forward(t)?))?
            .pixel_shuffle(1 << self.k_levels)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<Parameter<S>>) {
        self.c1.collect_params(&format!("{prefix}.c1"), out);
        self.c2.collect_params(&format!("{prefix}.c2"), out);
    }
}
