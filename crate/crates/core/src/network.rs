//! Model assembly: the thumbnail encoder (K levels of M two-stream blocks),
//! the subspace-projection refiner, and the full forward pass.

use crate::blocks::{act, BlockConfig, Conv, Csp, GlobalAttention, Init, Nhl, SRes, Tsb};
use crate::tensor::{matmul, solve_spd, Parameter, Result, Scalar, Tensor, TensorError};
use crate::wavelet::{haar_forward, haar_inverse, level_channels, SubbandGroup};

/// Ablation switches. All default to off (the full model).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablations {
    /// Replace the orthogonal projection with a learned attention fallback.
    pub no_projection: bool,
    /// Drop the refiner entirely; the clean output is the thumbnail upsample.
    pub no_spr: bool,
    /// Replace the learned thumbnail upsampler with bilinear interpolation.
    pub no_csp: bool,
    /// Drop the global feature stream and global attention.
    pub no_global: bool,
    /// Drop the thumbnail supervision terms from the loss.
    pub no_thumbnail_loss: bool,
    /// Attach the refiner residual to the noisy input instead of the
    /// thumbnail upsample.
    pub end_to_end_residual: bool,
}

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Encoder levels (wavelet decompositions).
    pub k: usize,
    /// Two-stream blocks per encoder level.
    pub m: usize,
    /// Subspace dimensionality of the projector.
    pub q: usize,
    /// NHL blocks per refiner level.
    pub nhl_per_spb: usize,
    pub ablations: Ablations,
    /// Seed for weight initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 2,
            m: 4,
            q: 8,
            nhl_per_spb: 2,
            ablations: Ablations::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(TensorError::BadArgument {
                op: "config",
                msg: "k must be >= 1".into(),
            });
        }
        if self.m < 1 {
            return Err(TensorError::BadArgument {
                op: "config",
                msg: "m must be >= 1".into(),
            });
        }
        if self.q < 1 || self.q > 64 {
            return Err(TensorError::BadArgument {
                op: "config",
                msg: format!("q must be in 1..=64, got {}", self.q),
            });
        }
        if self.nhl_per_spb < 1 {
            return Err(TensorError::BadArgument {
                op: "config",
                msg: "nhl_per_spb must be >= 1".into(),
            });
        }
        Ok(())
    }

    /// Side length of the coarsest scale divides the input.
    pub fn scale(&self) -> usize {
        1 << self.k
    }
}

/// Everything the encoder hands to the refiner.
pub struct EncoderOutputs<S: Scalar> {
    /// Final thumbnail: 3 channels at 1/2^K scale.
    pub t_k: Tensor<S>,
    /// Per-level high-frequency feature Cat(N, S); index j-1 holds level j.
    pub h: Vec<Tensor<S>>,
    /// Attention-enhanced deepest high-frequency feature.
    pub h_a: Tensor<S>,
    /// Final global feature, absent under the no-global ablation.
    pub g: Option<Tensor<S>>,
}

/// Per-sample basis estimate: columns of `v` span the signal subspace.
pub struct BasisSet<S: Scalar> {
    /// `[n, 1, H'*W', Q]` — one column matrix per batch entry.
    pub v: Tensor<S>,
    pub level: usize,
    rows_h: usize,
    rows_w: usize,
}

impl<S: Scalar> BasisSet<S> {
    /// Wrap an explicit column matrix `[n, 1, rows_h*rows_w, q]` as a basis.
    pub fn from_columns(v: Tensor<S>, level: usize, rows_h: usize, rows_w: usize) -> Result<Self> {
        let s = v.shape();
        if s.c() != 1 || s.h() != rows_h * rows_w {
            return Err(TensorError::BadArgument {
                op: "basis_from_columns",
                msg: format!("expected [n,1,{}x{},q], got {s}", rows_h, rows_w),
            });
        }
        Ok(BasisSet {
            v,
            level,
            rows_h,
            rows_w,
        })
    }

    pub fn q(&self) -> usize {
        self.v.shape().w()
    }
}

/// One refiner level: basis estimator (or its attention fallback) plus the
/// NHL chain run after the skip is merged.
struct SprLevel<S: Scalar> {
    estimator: Option<(Conv<S>, Conv<S>)>,
    fallback: Option<(SRes<S>, Conv<S>)>,
    nhls: Vec<Nhl<S>>,
    level: usize,
}

impl<S: Scalar> SprLevel<S> {
    fn new(init: &mut Init, level: usize, config: &ModelConfig) -> Self {
        let ch = level_channels(level) - 3;
        let (estimator, fallback) = if config.ablations.no_projection {
            (
                None,
                Some((SRes::new(init, ch), Conv::kaiming(init, ch, ch, 1, 1.0))),
            )
        } else {
            (
                Some((
                    Conv::kaiming(init, 2 * ch, ch, 3, 1.0),
                    Conv::kaiming(init, ch, config.q, 3, 1.0),
                )),
                None,
            )
        };
        let nhls: Vec<Nhl<S>> = (0..config.nhl_per_spb)
            .map(|_| Nhl::new(init, level))
            .collect();
        // The chain's final T-reduction starts at zero so the refiner output
        // has no low-frequency content at initialization: the residual added
        // to the thumbnail upsample begins as pure high-frequency detail.
        if let Some(last) = nhls.last() {
            last.phi_t.reduce.weight.update_data(|d| d.fill(S::zero()));
        }
        SprLevel {
            estimator,
            fallback,
            nhls,
            level,
        }
    }

    fn collect_params(&self, prefix: &str, out: &mut Vec<Parameter<S>>) {
        if let Some((e1, e2)) = &self.estimator {
            e1.collect_params(&format!("{prefix}.est1"), out);
            e2.collect_params(&format!("{prefix}.est2"), out);
        }
        if let Some((res, gate)) = &self.fallback {
            res.collect_params(&format!("{prefix}.att"), out);
            gate.collect_params(&format!("{prefix}.gate"), out);
        }
        for (i, nhl) in self.nhls.iter().enumerate() {
            nhl.collect_params(&format!("{prefix}.nhl{i}"), out);
        }
    }
}

/// The assembled denoiser. Owns every parameter tensor; the flat registry
/// drives the optimizer and checkpoints.
pub struct ThunderModel<S: Scalar> {
    config: ModelConfig,
    encoder: Vec<Vec<Tsb<S>>>,
    attention: Option<GlobalAttention<S>>,
    csp: Option<Csp<S>>,
    refiner: Vec<SprLevel<S>>,
    params: Vec<Parameter<S>>,
}

/// Skip and projected features captured at one refiner level.
pub struct ProjectionTrace<S: Scalar> {
    pub level: usize,
    /// Encoder skip feature entering the projection.
    pub h_skip: Tensor<S>,
    /// The feature after restriction to the estimated subspace (or to the
    /// attention fallback when projection is ablated).
    pub h_tilde: Tensor<S>,
}

/// Outputs of the full forward pass.
pub struct ThunderOutputs<S: Scalar> {
    /// Thumbnail upsample.
    pub i_t: Tensor<S>,
    /// Clean estimate.
    pub i_c: Tensor<S>,
    /// Thumbnail at 1/2^K scale.
    pub t_k: Tensor<S>,
}

impl<S: Scalar> ThunderModel<S> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let ab = config.ablations;
        let mut init = Init::new(config.seed);
        let encoder = (1..=config.k)
            .map(|j| {
                (0..config.m)
                    .map(|_| Tsb::new(&mut init, j, 1, BlockConfig::for_level(j, !ab.no_global)))
                    .collect()
            })
            .collect();
        let attention = (!ab.no_global).then(|| {
            let cg = level_channels(config.k);
            GlobalAttention::new(&mut init, cg, cg - 3)
        });
        let csp = (!ab.no_csp).then(|| Csp::new(config.k));
        let refiner = if ab.no_spr {
            vec![]
        } else {
            (1..=config.k)
                .map(|j| SprLevel::new(&mut init, j, &config))
                .collect()
        };
        let mut model = ThunderModel {
            config,
            encoder,
            attention,
            csp,
            refiner,
            params: vec![],
        };
        let mut params = vec![];
        for (j, eb) in model.encoder.iter().enumerate() {
            for (i, tsb) in eb.iter().enumerate() {
                tsb.collect_params(&format!("tse.eb{}.tsb{i}", j + 1), &mut params);
            }
        }
        if let Some(ga) = &model.attention {
            ga.collect_params("ga", &mut params);
        }
        if let Some(csp) = &model.csp {
            csp.collect_params("csp", &mut params);
        }
        for level in &model.refiner {
            level.collect_params(&format!("spr.l{}", level.level), &mut params);
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter<S>] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<S>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Encoder pass: per level, one Haar step then the TSB chain; the global
    /// feature is carried across levels through the same Haar step.
    pub fn tse_forward(&self, noisy: &Tensor<S>) -> Result<EncoderOutputs<S>> {
        let shape = noisy.shape();
        let scale = self.config.scale();
        if shape.c() != 3 || !shape.h().is_multiple_of(scale) || !shape.w().is_multiple_of(scale) {
            return Err(TensorError::BadArgument {
                op: "tse_forward",
                msg: format!("input {shape} must be 3-channel with extents divisible by {scale}"),
            });
        }
        let mut cur = noisy.clone();
        let mut g: Option<Tensor<S>> = None;
        let mut h = Vec::with_capacity(self.config.k);
        let mut last: Option<SubbandGroup<S>> = None;
        for eb in &self.encoder {
            let mut feat = haar_forward(&cur)?;
            g = g.as_ref().map(haar_forward).transpose()?;
            let mut group = None;
            for tsb in eb {
                let (grp, g_out) = tsb.forward(&feat, g.as_ref())?;
                feat = grp.concat()?;
                g = g_out;
                group = Some(grp);
            }
            let group = group.expect("m >= 1");
            h.push(Tensor::concat(&[&group.n, &group.s])?);
            cur = feat;
            last = Some(group);
        }
        let group = last.expect("k >= 1");
        let h_k = h.last().expect("k >= 1");
        let h_a = match (&self.attention, &g) {
            (Some(ga), Some(g)) => ga.forward(g, h_k)?,
            _ => h_k.clone(),
        };
        Ok(EncoderOutputs {
            t_k: group.t,
            h,
            h_a,
            g,
        })
    }

    /// Estimate the per-sample signal basis at one refiner level from the
    /// encoder skip and the decoder-side wavelet feature.
    pub fn estimate_basis(
        &self,
        level: usize,
        h_skip: &Tensor<S>,
        h_dec: &Tensor<S>,
    ) -> Result<BasisSet<S>> {
        let (ss, sd) = (h_skip.shape(), h_dec.shape());
        if ss.h() != sd.h() || ss.w() != sd.w() {
            return Err(TensorError::ShapeMismatch {
                op: "estimate_basis",
                lhs: ss,
                rhs: sd,
            });
        }
        let Some((e1, e2)) = self
            .refiner
            .get(level - 1)
            .and_then(|l| l.estimator.as_ref())
        else {
            return Err(TensorError::BadArgument {
                op: "estimate_basis",
                msg: format!("no estimator at level {level} under the current config"),
            });
        };
        let cat = Tensor::concat(&[h_skip, h_dec])?;
        let channels = e2.forward(&act(&e1.forward(&cat)?))?;
        Ok(BasisSet {
            v: channels.channels_to_cols(),
            level,
            rows_h: ss.h(),
            rows_w: ss.w(),
        })
    }

    /// Refiner pass over the thumbnail upsample; returns the 3-channel
    /// signal residual at full resolution.
    pub fn spr_forward(&self, i_t: &Tensor<S>, enc: &EncoderOutputs<S>) -> Result<Tensor<S>> {
        Ok(self.spr_trace(i_t, enc)?.0)
    }

    /// Same as [`ThunderModel::spr_forward`] but also returns the skip and
    /// projected features at every refiner level, deepest first.
    pub fn spr_trace(
        &self,
        i_t: &Tensor<S>,
        enc: &EncoderOutputs<S>,
    ) -> Result<(Tensor<S>, Vec<ProjectionTrace<S>>)> {
        let k = self.config.k;
        if self.refiner.len() != k {
            return Err(TensorError::BadArgument {
                op: "spr_forward",
                msg: "refiner is disabled under the current config".into(),
            });
        }
        let mut pyramid = Vec::with_capacity(k);
        let mut cur = i_t.clone();
        for _ in 0..k {
            cur = haar_forward(&cur)?;
            pyramid.push(cur.clone());
        }
        let mut low = pyramid[k - 1].slice_channels(0, 3)?;
        let mut traces = Vec::with_capacity(k);
        for j in (1..=k).rev() {
            let level = &self.refiner[j - 1];
            let c_full = level_channels(j);
            let h_dec = pyramid[j - 1].slice_channels(3, c_full)?;
            let h_skip = if j == k { &enc.h_a } else { &enc.h[j - 1] };
            let h_tilde = match &level.fallback {
                Some((res, gate)) => {
                    let a_h = gate.forward(&res.forward(&h_dec)?)?.sigmoid();
                    a_h.mul(h_skip)?.add(&h_dec)?
                }
                None => {
                    let basis = self.estimate_basis(j, h_skip, &h_dec)?;
                    project(h_skip, &basis)?
                }
            };
            traces.push(ProjectionTrace {
                level: j,
                h_skip: h_skip.clone(),
                h_tilde: h_tilde.clone(),
            });
            let c_n = c_full - 6;
            let mut group = SubbandGroup {
                t: low,
                s: h_tilde.slice_channels(c_n, c_n + 3)?,
                n: h_tilde.slice_channels(0, c_n)?,
                level: j,
            };
            for nhl in &level.nhls {
                group = nhl.forward(&group)?;
            }
            let up = haar_inverse(&group.concat()?)?;
            if j == 1 {
                return Ok((up, traces));
            }
            low = up.slice_channels(0, 3)?;
        }
        unreachable!("k >= 1 returns from the loop");
    }

    /// Full pass: thumbnail path plus refined residual.
    pub fn forward(&self, noisy: &Tensor<S>) -> Result<ThunderOutputs<S>> {
        Ok(self.forward_traced(noisy)?.0)
    }

    /// Full pass that also returns the refiner's per-level projection traces
    /// (empty when the refiner is disabled).
    pub fn forward_traced(
        &self,
        noisy: &Tensor<S>,
    ) -> Result<(ThunderOutputs<S>, Vec<ProjectionTrace<S>>)> {
        let enc = self.tse_forward(noisy)?;
        let i_t = match &self.csp {
            Some(csp) => csp.forward(&enc.t_k)?,
            None => enc.t_k.bilinear_up(self.config.scale())?,
        };
        let (i_c, traces) = if self.config.ablations.no_spr {
            (i_t.clone(), vec![])
        } else {
            let (residual, traces) = self.spr_trace(&i_t, &enc)?;
            let base = if self.config.ablations.end_to_end_residual {
                noisy
            } else {
                &i_t
            };
            (base.add(&residual)?, traces)
        };
        Ok((
            ThunderOutputs {
                i_t,
                i_c,
                t_k: enc.t_k,
            },
            traces,
        ))
    }
}

/// Orthogonal projection of every channel of `h` onto the column span of the
/// basis: `P = V (VᵀV + εI)⁻¹ Vᵀ` applied per sample, differentiable in both
/// arguments.
pub fn project<S: Scalar>(h: &Tensor<S>, basis: &BasisSet<S>) -> Result<Tensor<S>> {
    let shape = h.shape();
    let rows = shape.h() * shape.w();
    let vsh = basis.v.shape();
    if vsh.h() != rows || vsh.n() != shape.n() {
        return Err(TensorError::ShapeMismatch {
            op: "project",
            lhs: shape,
            rhs: vsh,
        });
    }
    if (shape.h(), shape.w()) != (basis.rows_h, basis.rows_w) {
        return Err(TensorError::ShapeMismatch {
            op: "project",
            lhs: shape,
            rhs: vsh,
        });
    }
    let hm = h.channels_to_cols();
    let gram = matmul(&basis.v, &basis.v, true, false)?;
    let coeff = solve_spd(&gram, &matmul(&basis.v, &hm, true, false)?)?;
    matmul(&basis.v, &coeff, false, false)?.cols_to_channels(shape.h(), shape.w())
}
