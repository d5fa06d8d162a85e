//! Cost accounting (parameters and FLOPs per layer) and feature-rank
//! analysis.
//!
//! The cost walk mirrors the model's construction layer by layer, so its
//! parameter total is the analytic sum the real model must match exactly.
//! FLOPs follow the 2-per-MAC convention, counting convolutions, wavelet
//! steps, and the projection solve; bias adds and elementwise work are
//! excluded.

use std::fmt;

use nalgebra::DMatrix;

use crate::network::{ModelConfig, ProjectionTrace, ThunderModel};
use crate::tensor::{Result, Scalar, Tensor, TensorError};
use crate::wavelet::level_channels;

/// Totals for the full-scale configuration, printed by `inspect` as a
/// diagnostic comparison next to the computed totals.
pub const REFERENCE_PARAMS: u64 = 2_680_000;
pub const REFERENCE_FLOPS: u64 = 18_810_000_000;

/// One layer (or counted operation) in the cost report.
#[derive(Clone, Debug)]
pub struct CostRow {
    pub name: String,
    pub params: u64,
    pub flops: u64,
}

/// Per-layer costs plus totals; totals are exactly the sums of the rows.
#[derive(Clone, Debug)]
pub struct CostReport {
    pub input: (usize, usize),
    pub rows: Vec<CostRow>,
    pub params_total: u64,
    pub flops_total: u64,
}

/// Parameters of a `k x k` convolution with bias.
pub fn conv_param_count(ic: usize, oc: usize, k: usize) -> u64 {
    (oc * (ic * k * k) + oc) as u64
}

/// FLOPs of a `k x k` convolution at the given output extents, two per MAC.
pub fn conv_flop_count(ic: usize, oc: usize, k: usize, oh: usize, ow: usize) -> u64 {
    2 * (k * k * ic * oc * oh * ow) as u64
}

/// FLOPs of one Haar analysis or synthesis step producing `coeffs` values.
fn haar_flop_count(coeffs: usize) -> u64 {
    8 * coeffs as u64
}

struct Walk {
    rows: Vec<CostRow>,
}

impl Walk {
    fn conv(&mut self, name: String, ic: usize, oc: usize, k: usize, oh: usize, ow: usize) {
        self.rows.push(CostRow {
            name,
            params: conv_param_count(ic, oc, k),
            flops: conv_flop_count(ic, oc, k, oh, ow),
        });
    }

    fn sres(&mut self, prefix: &str, c: usize, h: usize, w: usize) {
        self.conv(format!("{prefix}.c1"), c, c, 3, h, w);
        self.conv(format!("{prefix}.c2"), c, c, 3, h, w);
    }

    fn phi(&mut self, prefix: &str, ca: usize, cb: usize, h: usize, w: usize) {
        self.sres(&format!("{prefix}.oa"), ca, h, w);
        self.sres(&format!("{prefix}.ob"), cb, h, w);
        self.sres(&format!("{prefix}.oc"), ca + cb, h, w);
        self.conv(format!("{prefix}.reduce"), ca + cb, cb, 1, h, w);
    }

    fn nhl(&mut self, prefix: &str, level: usize, h: usize, w: usize) {
        let cn = level_channels(level) - 6;
        self.sres(&format!("{prefix}.on"), cn, h, w);
        self.phi(&format!("{prefix}.ps"), cn, 3, h, w);
        self.phi(&format!("{prefix}.pt"), 3, 3, h, w);
    }
}

impl CostReport {
    /// Walk the architecture implied by `config` at the given input extents.
    pub fn new(config: &ModelConfig, input: (usize, usize)) -> Result<Self> {
        config.validate()?;
        let (h, w) = input;
        let scale = config.scale();
        if h % scale != 0 || w % scale != 0 {
            return Err(TensorError::BadArgument {
                op: "cost_report",
                msg: format!("input {h}x{w} not divisible by {scale}"),
            });
        }
        let ab = config.ablations;
        let dims = |j: usize| (3 * (1usize << (2 * j)), h >> j, w >> j);
        let mut walk = Walk { rows: vec![] };

        for j in 1..=config.k {
            let (cj, hj, wj) = dims(j);
            walk.rows.push(CostRow {
                name: format!("tse.haar{j}"),
                params: 0,
                flops: haar_flop_count(cj * hj * wj),
            });
            if !ab.no_global && j >= 2 {
                walk.rows.push(CostRow {
                    name: format!("tse.haar{j}.g"),
                    params: 0,
                    flops: haar_flop_count(cj * hj * wj),
                });
            }
            for i in 0..config.m {
                let p = format!("tse.eb{j}.tsb{i}");
                walk.conv(format!("{p}.mixer"), cj, cj, 1, hj, wj);
                walk.nhl(&format!("{p}.nhl0"), j, hj, wj);
                if !ab.no_global {
                    walk.conv(format!("{p}.g1"), cj, cj, 3, hj, wj);
                    walk.conv(format!("{p}.g2"), cj, cj, 3, hj, wj);
                    walk.conv(format!("{p}.fuse"), cj, cj, 1, hj, wj);
                }
            }
        }
        let (ck, hk, wk) = dims(config.k);
        if !ab.no_global {
            walk.conv("ga.c1".to_string(), ck, ck, 1, hk, wk);
            walk.conv("ga.c2".to_string(), ck, ck - 3, 1, hk, wk);
            walk.rows.push(CostRow {
                name: "ga.scale".to_string(),
                params: (ck - 3) as u64,
                flops: 0,
            });
        }
        if !ab.no_csp {
            let wide = 3 * scale * scale;
            walk.conv("csp.c1".to_string(), 3, wide, 3, hk, wk);
            walk.conv("csp.c2".to_string(), wide, wide, 3, hk, wk);
        }
        if !ab.no_spr {
            for j in 1..=config.k {
                let (cj, hj, wj) = dims(j);
                walk.rows.push(CostRow {
                    name: format!("spr.haar{j}"),
                    params: 0,
                    flops: haar_flop_count(cj * hj * wj),
                });
            }
            for j in (1..=config.k).rev() {
                let (cj, hj, wj) = dims(j);
                let ch = cj - 3;
                let p = format!("spr.l{j}");
                if ab.no_projection {
                    walk.sres(&format!("{p}.att"), ch, hj, wj);
                    walk.conv(format!("{p}.gate"), ch, ch, 1, hj, wj);
                } else {
                    let q = config.q;
                    walk.conv(format!("{p}.est1"), 2 * ch, ch, 3, hj, wj);
                    walk.conv(format!("{p}.est2"), ch, q, 3, hj, wj);
                    let hw = hj * wj;
                    let solve = 2 * q * q * hw       // gram VᵀV
                        + 2 * q * hw * ch            // rhs Vᵀh
                        + q * q * q / 3              // factorization
                        + 2 * (2 * q * q * ch)       // two triangular solves
                        + 2 * hw * q * ch; // reconstruction V·coeff
                    walk.rows.push(CostRow {
                        name: format!("{p}.project"),
                        params: 0,
                        flops: solve as u64,
                    });
                }
                for i in 0..config.nhl_per_spb {
                    walk.nhl(&format!("{p}.nhl{i}"), j, hj, wj);
                }
                walk.rows.push(CostRow {
                    name: format!("spr.inv{j}"),
                    params: 0,
                    flops: haar_flop_count(cj * hj * wj),
                });
            }
        }

        let params_total = walk.rows.iter().map(|r| r.params).sum();
        let flops_total = walk.rows.iter().map(|r| r.flops).sum();
        Ok(CostReport {
            input,
            rows: walk.rows,
            params_total,
            flops_total,
        })
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "layer\tparams\tflops@{}x{}", self.input.0, self.input.1)?;
        for r in &self.rows {
            writeln!(f, "{}\t{}\t{}", r.name, r.params, r.flops)?;
        }
        write!(f, "total\t{}\t{}", self.params_total, self.flops_total)
    }
}

/// Analytic parameter count for a configuration.
pub fn count_params(config: &ModelConfig) -> Result<u64> {
    let scale = config.scale();
    Ok(CostReport::new(config, (scale, scale))?.params_total)
}

/// Analytic FLOP count at the given input extents.
pub fn count_flops(config: &ModelConfig, input: (usize, usize)) -> Result<u64> {
    Ok(CostReport::new(config, input)?.flops_total)
}

/// Number of principal components needed to capture `energy` of the feature's
/// total variance, treating channels as observations over pixels.
pub fn pca_rank<S: Scalar>(feature: &Tensor<S>, energy: f64) -> Result<usize> {
    if !(energy > 0.0 && energy <= 1.0) {
        return Err(TensorError::BadArgument {
            op: "pca_rank",
            msg: format!("energy must be in (0, 1], got {energy}"),
        });
    }
    let s = feature.shape();
    if s.n() != 1 {
        return Err(TensorError::BadArgument {
            op: "pca_rank",
            msg: format!("expected a single sample, got {}", s.n()),
        });
    }
    let (c, hw) = (s.c(), s.h() * s.w());
    let data = feature.data();
    let mat = DMatrix::from_fn(c, hw, |r, col| data[r * hw + col].as_f64());
    let mut sq: Vec<f64> = mat.singular_values().iter().map(|v| v * v).collect();
    sq.sort_by(|a, b| b.partial_cmp(a).expect("singular values are finite"));
    let total: f64 = sq.iter().sum();
    if total <= 0.0 {
        return Ok(0);
    }
    let mut acc = 0.0;
    for (i, v) in sq.iter().enumerate() {
        acc += v;
        if acc >= energy * total {
            return Ok(i + 1);
        }
    }
    Ok(sq.len())
}

/// Pre/post-projection ranks at one refiner level.
#[derive(Clone, Copy, Debug)]
pub struct SubspaceRow {
    pub level: usize,
    pub channels: usize,
    pub rank_pre: usize,
    pub rank_post: usize,
}

/// Rank of the skip feature before and after subspace restriction at every
/// refiner level, at the given energy fraction.
pub fn subspace_rows<S: Scalar>(
    traces: &[ProjectionTrace<S>],
    energy: f64,
) -> Result<Vec<SubspaceRow>> {
    traces
        .iter()
        .map(|t| {
            Ok(SubspaceRow {
                level: t.level,
                channels: t.h_skip.shape().c(),
                rank_pre: pca_rank(&t.h_skip, energy)?,
                rank_post: pca_rank(&t.h_tilde, energy)?,
            })
        })
        .collect()
}

/// Convenience wrapper: run one image through the model and report ranks.
pub fn analyze_subspace<S: Scalar>(
    model: &ThunderModel<S>,
    noisy: &Tensor<S>,
    energy: f64,
) -> Result<Vec<SubspaceRow>> {
    let (_, traces) = model.forward_traced(noisy)?;
    subspace_rows(&traces, energy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Ablations;
    use crate::tensor::Shape;

    #[test]
    fn one_conv_parameter_oracle() {
        assert_eq!(conv_param_count(3, 8, 3), 224);
    }

    #[test]
    fn pointwise_conv_flop_oracle() {
        assert_eq!(conv_flop_count(3, 3, 1, 4, 4), 288);
    }

    #[test]
    fn totals_are_row_sums() {
        let report = CostReport::new(&ModelConfig::default(), (256, 256)).unwrap();
        assert_eq!(
            report.params_total,
            report.rows.iter().map(|r| r.params).sum::<u64>()
        );
        assert_eq!(
            report.flops_total,
            report.rows.iter().map(|r| r.flops).sum::<u64>()
        );
        assert!(report.flops_total > 0);
    }

    #[test]
    fn analytic_params_match_the_real_model() {
        let variants = [
            ModelConfig::default(),
            ModelConfig {
                k: 1,
                ..ModelConfig::default()
            },
            ModelConfig {
                m: 2,
                nhl_per_spb: 1,
                q: 4,
                ..ModelConfig::default()
            },
            ModelConfig {
                ablations: Ablations {
                    no_global: true,
                    ..Ablations::default()
                },
                ..ModelConfig::default()
            },
            ModelConfig {
                ablations: Ablations {
                    no_projection: true,
                    ..Ablations::default()
                },
                ..ModelConfig::default()
            },
            ModelConfig {
                ablations: Ablations {
                    no_csp: true,
                    ..Ablations::default()
                },
                ..ModelConfig::default()
            },
            ModelConfig {
                ablations: Ablations {
                    no_spr: true,
                    ..Ablations::default()
                },
                ..ModelConfig::default()
            },
        ];
        for cfg in variants {
            let model = ThunderModel::<f32>::new(cfg).unwrap();
            let real: u64 = model.params().iter().map(|p| p.tensor.numel() as u64).sum();
            assert_eq!(count_params(&cfg).unwrap(), real, "config {cfg:?}");
        }
    }

    #[test]
    fn flops_shrink_without_the_refiner() {
        let base = ModelConfig::default();
        let ablated = ModelConfig {
            ablations: Ablations {
                no_spr: true,
                ..Ablations::default()
            },
            ..base
        };
        let full = count_flops(&base, (64, 64)).unwrap();
        let less = count_flops(&ablated, (64, 64)).unwrap();
        assert!(less < full);
    }

    fn feature(c: usize, hw: usize, f: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
        let mut data = Vec::with_capacity(c * hw);
        for ch in 0..c {
            for px in 0..hw {
                data.push(f(ch, px));
            }
        }
        Tensor::constant(Shape::nchw(1, c, 1, hw), data).unwrap()
    }

    #[test]
    fn rank_one_feature_has_rank_one() {
        let base: Vec<f64> = (0..36).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let t = feature(5, 36, |c, p| (c as f64 + 1.0) * base[p]);
        assert_eq!(pca_rank(&t, 0.99).unwrap(), 1);
    }

    #[test]
    fn rank_is_monotone_in_energy() {
        let t = feature(6, 40, |c, p| (((c * 41 + p * 17) % 23) as f64 - 11.0) / 7.0);
        let r1 = pca_rank(&t, 0.5).unwrap();
        let r2 = pca_rank(&t, 0.9).unwrap();
        let r3 = pca_rank(&t, 0.9999).unwrap();
        assert!(r1 <= r2 && r2 <= r3);
        assert_eq!(pca_rank(&t, 1.0).unwrap(), 6);
    }

    #[test]
    fn degenerate_rank_inputs() {
        let zero = Tensor::<f64>::zeros(Shape::nchw(1, 3, 4, 4));
        assert_eq!(pca_rank(&zero, 0.99).unwrap(), 0);
        assert!(pca_rank(&zero, 0.0).is_err());
        assert!(pca_rank(&zero, 1.5).is_err());
        let batched = Tensor::<f64>::zeros(Shape::nchw(2, 3, 4, 4));
        assert!(pca_rank(&batched, 0.99).is_err());
    }

    #[test]
    fn projected_features_stay_within_the_subspace_rank() {
        let cfg = ModelConfig {
            k: 1,
            m: 1,
            q: 3,
            nhl_per_spb: 1,
            seed: 5,
            ..ModelConfig::default()
        };
        let model = ThunderModel::<f64>::new(cfg).unwrap();
        let noisy = crate::data::synth_clean(2, 16, crate::data::CleanKind::Mixed);
        let rows = analyze_subspace(&model, &noisy, 0.99).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(
            rows[0].rank_post <= cfg.q,
            "rank {} over q {}",
            rows[0].rank_post,
            cfg.q
        );
    }
}
