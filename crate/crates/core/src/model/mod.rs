//! Assembles units, groups, and the unrolled cascade.
//!
//! Each group runs two refinement units in feature space and one
//! data-consistency step in k-space. The complex image travels as a
//! 2-channel feature map; 1x1 maps lift it to `C` channels at each group's
//! feature-domain entry and reduce it back at the exit, with an image-level
//! residual so that an all-zero network collapses to pure data-consistency
//! iteration.

pub mod train;

use crate::autodiff::engine::{Engine, EvalEngine};
use crate::autodiff::optim::ParamSet;
use crate::error::{Error, Result};
use crate::kspace::{Acquisition, DcMode};
use crate::lsgp::{lsgp_forward, LsgpParams};
use crate::moe::{expert_forward, moe_forward, Expert, MoeParams, RouteStats};
use crate::numerics::{ComplexImage, Scalar, Tensor};
use crate::sflap::sflap_split_on;
use crate::ssm::{ssm_mixer_block, SsmParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

fn default_true() -> bool {
    true
}

/// Expert-group sizes of one MoE layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub n_shared: usize,
    pub n_routed: usize,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            n_shared: 1,
            n_routed: 4,
        }
    }
}

/// Architecture of the unrolled cascade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeConfig {
    /// Unrolled iterations (groups).
    #[serde(default = "CascadeConfig::default_groups")]
    pub groups: usize,
    #[serde(default = "CascadeConfig::default_units")]
    pub units_per_group: usize,
    /// Feature channels C.
    #[serde(default = "CascadeConfig::default_channels")]
    pub channels: usize,
    /// Token patch size of the stream token mixers (1 or 2).
    #[serde(default = "CascadeConfig::default_patch")]
    pub patch: usize,
    /// SSM state dimension.
    #[serde(default = "CascadeConfig::default_state_dim")]
    pub state_dim: usize,
    /// SE gate reduction ratio.
    #[serde(default = "CascadeConfig::default_reduction")]
    pub lsgp_reduction: usize,
    #[serde(default)]
    pub moe: MoeConfig,
    /// Initial per-group data-consistency step size (learnable).
    #[serde(default = "CascadeConfig::default_lambda_init")]
    pub lambda_init: f64,
    /// Load-balance weight in the objective.
    #[serde(default = "CascadeConfig::default_lambda_bal")]
    pub lambda_bal: f64,
    #[serde(default)]
    pub share_weights: bool,
    #[serde(default = "CascadeConfig::default_dc_mode")]
    pub dc_mode: DcMode,
    /// Ablation switches.
    #[serde(default = "default_true")]
    pub use_sflap: bool,
    #[serde(default = "default_true")]
    pub use_lsgp: bool,
    #[serde(default = "default_true")]
    pub use_moe: bool,
}

impl CascadeConfig {
    fn default_groups() -> usize {
        8
    }
    fn default_units() -> usize {
        2
    }
    fn default_channels() -> usize {
        8
    }
    fn default_patch() -> usize {
        2
    }
    fn default_state_dim() -> usize {
        8
    }
    fn default_reduction() -> usize {
        4
    }
    fn default_lambda_init() -> f64 {
        1.0
    }
    fn default_lambda_bal() -> f64 {
        0.01
    }
    fn default_dc_mode() -> DcMode {
        DcMode::Soft
    }

    /// Desk-scale default: one group, eight channels, patch 2.
    pub fn desk_scale() -> Self {
        Self {
            groups: 1,
            units_per_group: 2,
            channels: 8,
            patch: 2,
            state_dim: 8,
            lsgp_reduction: 4,
            moe: MoeConfig::default(),
            lambda_init: 1.0,
            lambda_bal: 0.01,
            share_weights: false,
            dc_mode: DcMode::Soft,
            use_sflap: true,
            use_lsgp: true,
            use_moe: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.units_per_group == 0 {
            return Err(Error::InvalidArgument(
                "groups and units must be >= 1".into(),
            ));
        }
        if self.channels == 0 || !self.channels.is_multiple_of(self.lsgp_reduction) {
            return Err(Error::InvalidArgument(format!(
                "channels {} must be a positive multiple of the SE reduction {}",
                self.channels, self.lsgp_reduction
            )));
        }
        if self.patch == 0 {
            return Err(Error::InvalidArgument("patch must be >= 1".into()));
        }
        if self.use_moe && self.moe.n_routed == 0 {
            return Err(Error::InvalidArgument("moe.n_routed must be >= 1".into()));
        }
        Ok(())
    }

    /// Spatial extents the cascade accepts: the low stream (H/2) must still
    /// tile into patches.
    pub fn validate_extent(&self, h: usize, w: usize) -> Result<()> {
        let (he, we) = (h + h % 2, w + w % 2);
        let m = 2 * self.patch;
        if he % m != 0 || we % m != 0 {
            return Err(Error::InvalidArgument(format!(
                "extents {h}x{w} must tile into 2*patch = {m} after evening"
            )));
        }
        Ok(())
    }
}

/// Per-unit trainable state.
#[derive(Clone, Debug)]
pub struct UnitParams<T> {
    pub lsgp: Option<LsgpParams<T>>,
    pub ssm_high: SsmParams<T>,
    pub ssm_low: SsmParams<T>,
    pub crm_w: Tensor<T>, // [C, C]
    pub crm_b: Tensor<T>, // [C]
    pub moe: Option<MoeParams<T>>,
    /// Dense replacement when the MoE is ablated away.
    pub dense: Option<Expert<T>>,
    pub dfsa_w: Tensor<T>, // [3C, 3]
    pub dfsa_b: Tensor<T>, // [3]
}

impl<T: Scalar> UnitParams<T> {
    pub fn init<R: Rng>(cfg: &CascadeConfig, rng: &mut R) -> Result<Self> {
        let c = cfg.channels;
        let tok = c * cfg.patch * cfg.patch;
        let wide = 3 * c;
        Ok(Self {
            lsgp: if cfg.use_lsgp {
                Some(LsgpParams::init(c, cfg.lsgp_reduction, rng)?)
            } else {
                None
            },
            ssm_high: SsmParams::init(tok, cfg.state_dim, rng),
            ssm_low: SsmParams::init(tok, cfg.state_dim, rng),
            crm_w: Tensor::randn(&[c, c], 1.0 / (c as f64).sqrt(), rng),
            crm_b: Tensor::zeros(&[c]),
            moe: if cfg.use_moe {
                Some(MoeParams::init(
                    wide,
                    wide,
                    cfg.moe.n_shared,
                    cfg.moe.n_routed,
                    rng,
                )?)
            } else {
                None
            },
            dense: if cfg.use_moe {
                None
            } else {
                Some(Expert::init(wide, wide, rng))
            },
            dfsa_w: Tensor::randn(&[wide, 3], 0.01, rng),
            dfsa_b: Tensor::zeros(&[3]),
        })
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        if let Some(l) = &self.lsgp {
            l.visit(&format!("{prefix}.lsgp"), f);
        }
        self.ssm_high.visit(&format!("{prefix}.ssm_high"), f);
        self.ssm_low.visit(&format!("{prefix}.ssm_low"), f);
        f(&format!("{prefix}.crm.w"), &self.crm_w);
        f(&format!("{prefix}.crm.b"), &self.crm_b);
        if let Some(m) = &self.moe {
            m.visit(&format!("{prefix}.moe"), f);
        }
        if let Some(d) = &self.dense {
            d.visit(&format!("{prefix}.dense"), f);
        }
        f(&format!("{prefix}.dfsa.w"), &self.dfsa_w);
        f(&format!("{prefix}.dfsa.b"), &self.dfsa_b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        if let Some(l) = &mut self.lsgp {
            l.visit_mut(&format!("{prefix}.lsgp"), f);
        }
        self.ssm_high.visit_mut(&format!("{prefix}.ssm_high"), f);
        self.ssm_low.visit_mut(&format!("{prefix}.ssm_low"), f);
        f(&format!("{prefix}.crm.w"), &mut self.crm_w);
        f(&format!("{prefix}.crm.b"), &mut self.crm_b);
        if let Some(m) = &mut self.moe {
            m.visit_mut(&format!("{prefix}.moe"), f);
        }
        if let Some(d) = &mut self.dense {
            d.visit_mut(&format!("{prefix}.dense"), f);
        }
        f(&format!("{prefix}.dfsa.w"), &mut self.dfsa_w);
        f(&format!("{prefix}.dfsa.b"), &mut self.dfsa_b);
    }

    /// Zeroes every weight; the unit then computes the identity.
    pub fn zero_all(&mut self) {
        self.visit_mut("z", &mut |_name, t| {
            *t = Tensor::zeros(t.dims());
        });
    }
}

/// One unrolled group: its units plus the learnable DC step size.
#[derive(Clone, Debug)]
pub struct GroupParams<T> {
    pub units: Vec<UnitParams<T>>,
    pub lambda: Tensor<T>, // [1]
}

/// Full trainable state of the cascade.
#[derive(Clone, Debug)]
pub struct CascadeParams<T> {
    pub config: CascadeConfig,
    pub lift_w: Tensor<T>,   // [2, C]
    pub reduce_w: Tensor<T>, // [C, 2]
    pub groups: Vec<GroupParams<T>>,
}

impl<T: Scalar> CascadeParams<T> {
    pub fn init(config: &CascadeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;
        let n_groups = if config.share_weights {
            1
        } else {
            config.groups
        };
        let groups = (0..n_groups)
            .map(|_| {
                Ok(GroupParams {
                    units: (0..config.units_per_group)
                        .map(|_| UnitParams::init(config, &mut rng))
                        .collect::<Result<_>>()?,
                    lambda: Tensor::scalar_tensor(T::of_f64(config.lambda_init)),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            lift_w: Tensor::randn(&[2, c], 0.5, &mut rng),
            reduce_w: Tensor::randn(&[c, 2], 0.01, &mut rng),
            groups,
        })
    }

    /// Group parameters used at unrolled iteration `t`.
    fn group_at(&self, t: usize) -> &GroupParams<T> {
        if self.config.share_weights {
            &self.groups[0]
        } else {
            &self.groups[t]
        }
    }

    fn group_prefix(&self, t: usize) -> String {
        if self.config.share_weights {
            "g0".to_string()
        } else {
            format!("g{t}")
        }
    }

    pub fn zero_network(&mut self) {
        self.lift_w = Tensor::zeros(&[2, self.config.channels]);
        self.reduce_w = Tensor::zeros(&[self.config.channels, 2]);
        for g in &mut self.groups {
            for u in &mut g.units {
                u.zero_all();
            }
        }
    }
}

impl<T: Scalar> ParamSet<T> for CascadeParams<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("lift_w", &self.lift_w);
        f("reduce_w", &self.reduce_w);
        for (gi, g) in self.groups.iter().enumerate() {
            f(&format!("g{gi}.lambda"), &g.lambda);
            for (ui, u) in g.units.iter().enumerate() {
                u.visit(&format!("g{gi}.u{ui}"), f);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("lift_w", &mut self.lift_w);
        f("reduce_w", &mut self.reduce_w);
        for (gi, g) in self.groups.iter_mut().enumerate() {
            f(&format!("g{gi}.lambda"), &mut g.lambda);
            for (ui, u) in g.units.iter_mut().enumerate() {
                u.visit_mut(&format!("g{gi}.u{ui}"), f);
            }
        }
    }
}

/// Side-channel collected during a forward pass: per-layer routing
/// diagnostics, on-graph load-balance scalars, and optional feature dumps.
pub struct ForwardTrace<T, H> {
    pub stats: Vec<RouteStats>,
    pub lbal: Vec<H>,
    pub dumps: Vec<(String, Tensor<T>)>,
    pub dump_enabled: bool,
}

impl<T, H> ForwardTrace<T, H> {
    pub fn new(dump_enabled: bool) -> Self {
        Self {
            stats: Vec::new(),
            lbal: Vec::new(),
            dumps: Vec::new(),
            dump_enabled,
        }
    }
}

impl<T: Scalar, H> ForwardTrace<T, H> {
    fn dump<E: Engine<T, H = H>>(&mut self, e: &E, name: &str, h: &H) {
        if self.dump_enabled {
            self.dumps.push((name.to_string(), e.value(h).clone()));
        }
    }
}

/// Cross-resolution refinement: bilinear x2 then a per-pixel 1x1 channel map.
pub fn crm<T: Scalar, E: Engine<T>>(
    e: &mut E,
    low: &E::H,
    w: &Tensor<T>,
    b: &Tensor<T>,
    prefix: &str,
) -> Result<E::H> {
    let (_, lh, lw, _) = e.value(low).bhwc()?;
    let wh = e.param(&format!("{prefix}.w"), w);
    let bh = e.param(&format!("{prefix}.b"), b);
    let up = e.bilinear(low, lh * 2, lw * 2)?;
    let mapped = e.matmul(&up, &wh)?;
    e.bias_add(&mapped, &bh)
}

/// Adaptive per-pixel fusion: softmax weights from a 1x1 projection of the
/// concatenated streams, then a weighted sum.
pub fn dfsa<T: Scalar, E: Engine<T>>(
    e: &mut E,
    streams: &[E::H],
    w: &Tensor<T>,
    b: &Tensor<T>,
    prefix: &str,
) -> Result<E::H> {
    if streams.is_empty() {
        return Err(Error::InvalidArgument(
            "dfsa needs at least one stream".into(),
        ));
    }
    let dims = e.value(&streams[0]).dims().to_vec();
    for s in streams {
        if e.value(s).dims() != dims {
            return Err(Error::ShapeMismatch("dfsa streams must share dims".into()));
        }
    }
    let wh = e.param(&format!("{prefix}.w"), w);
    let bh = e.param(&format!("{prefix}.b"), b);
    let cat = e.concat_last(streams)?;
    let logits = e.matmul(&cat, &wh)?;
    let logits = e.bias_add(&logits, &bh)?;
    let wts = e.softmax_last(&logits)?; // [B,H,W,k]
    let mut acc: Option<E::H> = None;
    for (i, s) in streams.iter().enumerate() {
        let wi = e.slice_last(&wts, i, i + 1)?;
        let term = e.mul_pixel(s, &wi)?;
        acc = Some(match acc {
            Some(a) => e.add(&a, &term)?,
            None => term,
        });
    }
    Ok(acc.unwrap())
}

/// Box split used when SF-Lap is ablated: low = 2x2 average (bilinear
/// half-size), high = residual of its bilinear expansion.
fn box_split<T: Scalar, E: Engine<T>>(e: &mut E, x: &E::H) -> Result<(E::H, E::H)> {
    let (_, h, w, _) = e.value(x).bhwc()?;
    let low = e.bilinear(x, h / 2, w / 2)?;
    let up = e.bilinear(&low, h, w)?;
    let high = e.sub(x, &up)?;
    Ok((low, high))
}

/// One refinement unit (see Fig. 2 wiring): global gate, frequency split,
/// per-stream token mixing, CRM alignment, MoE over the concatenated
/// streams, DFSA fusion, residual add.
pub fn unit_forward<T: Scalar, E: Engine<T>>(
    e: &mut E,
    x: &E::H,
    p: &UnitParams<T>,
    cfg: &CascadeConfig,
    prefix: &str,
    trace: &mut ForwardTrace<T, E::H>,
) -> Result<E::H> {
    let (_, h0, w0, c) = e.value(x).bhwc()?;
    if c != cfg.channels {
        return Err(Error::ShapeMismatch(format!(
            "unit expects {} channels, got {c}",
            cfg.channels
        )));
    }
    // odd extents: reflect-pad to even, crop back at exit
    let (ph, pw) = (h0 % 2, w0 % 2);
    let padded = if ph + pw > 0 {
        e.reflect_pad(x, ph, pw)?
    } else {
        x.clone()
    };
    let (_, h, w, _) = e.value(&padded).bhwc()?;

    trace.dump(e, &format!("{prefix}.lsgp.before"), &padded);
    let g = match &p.lsgp {
        Some(lp) => lsgp_forward(e, &padded, lp, &format!("{prefix}.lsgp"))?,
        None => padded.clone(),
    };
    trace.dump(e, &format!("{prefix}.lsgp.after"), &g);

    let (low, high) = if cfg.use_sflap {
        let (low, high, low_up) = sflap_split_on(e, &g)?;
        trace.dump(e, &format!("{prefix}.sflap.low"), &low_up);
        trace.dump(e, &format!("{prefix}.sflap.high"), &high);
        (low, high)
    } else {
        box_split(e, &g)?
    };

    let high2 = ssm_mixer_block(
        e,
        &high,
        &p.ssm_high,
        cfg.patch,
        &format!("{prefix}.ssm_high"),
    )?;
    let low2 = ssm_mixer_block(e, &low, &p.ssm_low, cfg.patch, &format!("{prefix}.ssm_low"))?;
    trace.dump(e, &format!("{prefix}.ssm.high_after"), &high2);

    let low_full = crm(e, &low2, &p.crm_w, &p.crm_b, &format!("{prefix}.crm"))?;

    let cat = e.concat_last(&[g.clone(), high2, low_full])?;
    trace.dump(e, &format!("{prefix}.moe.before"), &cat);
    let fused_in = match (&p.moe, &p.dense) {
        (Some(moe), _) => {
            let (y, lbal, stats) = moe_forward(e, &cat, moe, &format!("{prefix}.moe"))?;
            trace.stats.push(stats);
            trace.lbal.push(lbal);
            y
        }
        (None, Some(dense)) => expert_forward(e, &cat, dense, &format!("{prefix}.dense"))?,
        (None, None) => {
            return Err(Error::InvalidArgument(
                "unit has neither moe nor dense".into(),
            ))
        }
    };
    trace.dump(e, &format!("{prefix}.moe.after"), &fused_in);

    let s_g = e.slice_last(&fused_in, 0, c)?;
    let s_h = e.slice_last(&fused_in, c, 2 * c)?;
    let s_l = e.slice_last(&fused_in, 2 * c, 3 * c)?;
    let fused = dfsa(
        e,
        &[s_g, s_h, s_l],
        &p.dfsa_w,
        &p.dfsa_b,
        &format!("{prefix}.dfsa"),
    )?;

    let out = e.add(&padded, &fused)?;
    let out = if ph + pw > 0 {
        e.crop_hw(&out, ph, pw, h - 2 * ph, w - 2 * pw)?
    } else {
        out
    };
    debug_assert_eq!(e.value(&out).dims(), e.value(x).dims());
    Ok(out)
}

/// Output of a cascade run.
pub struct CascadeOutput<T, H> {
    /// `[1,H,W,2]` complex-pair image handle.
    pub image: H,
    pub trace: ForwardTrace<T, H>,
}

/// Unrolled reconstruction from the zero-filled initialization:
/// `groups x [unit, unit, dc]`.
pub fn cascade_forward<T: Scalar, E: Engine<T>>(
    e: &mut E,
    acq: &Acquisition<T>,
    params: &CascadeParams<T>,
    dump_features: bool,
) -> Result<CascadeOutput<T, E::H>> {
    let cfg = &params.config;
    cfg.validate()?;
    cfg.validate_extent(acq.mask.height, acq.mask.width)?;

    let x0 = crate::kspace::zero_filled(acq)?;
    let mut trace = ForwardTrace::new(dump_features);
    let mut x = e.constant(x0.to_feature());
    let mask01 = acq.mask.to_tensor::<T>();

    for t in 0..cfg.groups {
        let gp = params.group_at(t);
        let gpfx = params.group_prefix(t);

        let lift = e.param("lift_w", &params.lift_w);
        let reduce = e.param("reduce_w", &params.reduce_w);
        let mut f = e.matmul(&x, &lift)?;
        for (ui, up) in gp.units.iter().enumerate() {
            f = unit_forward(e, &f, up, cfg, &format!("{gpfx}.u{ui}"), &mut trace)?;
        }
        let r = e.matmul(&f, &reduce)?;
        x = e.add(&x, &r)?;

        // data consistency in k-space
        match cfg.dc_mode {
            DcMode::Soft => {
                let mut corr: Option<E::H> = None;
                for (s, y) in acq.coils.maps().iter().zip(&acq.y) {
                    let xc = e.cpair_mul(&x, s, false)?;
                    let k = e.cpair_dft2(&xc, false)?;
                    let km = e.cpair_mask(&k, &mask01)?;
                    let res = e.sub_const(&km, &y.to_feature())?;
                    let img = e.cpair_dft2(&res, true)?;
                    let back = e.cpair_mul(&img, s, true)?;
                    corr = Some(match corr {
                        Some(a) => e.add(&a, &back)?,
                        None => back,
                    });
                }
                let lam = e.param(&format!("{gpfx}.lambda"), &gp.lambda);
                let step = e.scale_by(&corr.expect("at least one coil"), &lam)?;
                x = e.sub(&x, &step)?;
            }
            DcMode::Hard => {
                let inv_mask = mask01.map(|v| T::one() - v);
                let zf = crate::kspace::zero_filled(acq)?.to_feature();
                let mut acc: Option<E::H> = None;
                for s in acq.coils.maps() {
                    let xc = e.cpair_mul(&x, s, false)?;
                    let k = e.cpair_dft2(&xc, false)?;
                    let kk = e.cpair_mask(&k, &inv_mask)?;
                    let img = e.cpair_dft2(&kk, true)?;
                    let back = e.cpair_mul(&img, s, true)?;
                    acc = Some(match acc {
                        Some(a) => e.add(&a, &back)?,
                        None => back,
                    });
                }
                let zfc = e.constant(zf);
                x = e.add(&acc.expect("at least one coil"), &zfc)?;
            }
        }
    }
    Ok(CascadeOutput { image: x, trace })
}

/// Trace of a no-grad forward pass.
pub type EvalTrace<T> = ForwardTrace<T, crate::autodiff::engine::EvalH<T>>;

/// No-grad cascade evaluation returning the reconstructed complex image.
pub fn reconstruct<T: Scalar>(
    acq: &Acquisition<T>,
    params: &CascadeParams<T>,
    dump_features: bool,
) -> Result<(ComplexImage<T>, EvalTrace<T>)> {
    let mut ev = EvalEngine::new();
    let out = cascade_forward(&mut ev, acq, params, dump_features)?;
    let img = ComplexImage::from_feature(ev.value(&out.image))?;
    Ok((img, out.trace))
}

/// Training objective on the graph: per-sample L1 magnitude error plus the
/// weighted mean load-balance term of every MoE layer.
pub fn total_loss<T: Scalar, E: Engine<T>>(
    e: &mut E,
    recon: &E::H,
    gt: &ComplexImage<T>,
    lbal: &[E::H],
    lambda_bal: f64,
) -> Result<E::H> {
    let diff = e.sub_const(recon, &gt.to_feature())?;
    let mag = e.cpair_abs(&diff)?;
    let l_rec = e.sum_all(&mag)?;
    if lbal.is_empty() || lambda_bal == 0.0 {
        return Ok(l_rec);
    }
    let mut acc = lbal[0].clone();
    for l in &lbal[1..] {
        acc = e.add(&acc, l)?;
    }
    let mean = e.scale(&acc, 1.0 / lbal.len() as f64)?;
    let weighted = e.scale(&mean, lambda_bal)?;
    e.add(&l_rec, &weighted)
}

/// Scalar reference of the objective for diagnostics and tests.
pub fn total_loss_value<T: Scalar>(
    recon: &ComplexImage<T>,
    gt: &ComplexImage<T>,
    lbal_mean: f64,
    lambda_bal: f64,
) -> Result<f64> {
    let diff = recon.sub(gt)?;
    let l_rec: f64 = diff.magnitude().data().iter().map(|v| v.as_f64()).sum();
    Ok(l_rec + lambda_bal * lbal_mean)
}
