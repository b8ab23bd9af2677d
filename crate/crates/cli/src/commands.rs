//! Command implementations behind the CLI surface.

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use kmoe_core::autodiff::AdamState;
use kmoe_core::error::{Error, Result};
use kmoe_core::kspace::{
    forward_model, make_mask, simulate_coils, Acquisition, CoilSet, MaskKind, SamplingMask,
};
use kmoe_core::metrics::{append_report_csv, report, MetricReport};
use kmoe_core::model::train::{evaluate_heldout, holdout_seeds, Trainer};
use kmoe_core::model::{reconstruct, CascadeParams};
use kmoe_core::numerics::{ComplexImage, Tensor};
use kmoe_core::phantom_io::{
    read_complex, read_tensor, shepp_logan, spectra_diagnostic, to_gray, write_complex, write_pgm,
    write_tensor,
};
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// Resolved invocation: config plus command-line overrides.
pub struct Invocation {
    pub config: RunConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub dump_features: bool,
}

impl Invocation {
    pub fn new(
        config: RunConfig,
        seed: Option<u64>,
        out: Option<PathBuf>,
        checkpoint: Option<PathBuf>,
        dump_features: bool,
    ) -> Self {
        let seed = seed.unwrap_or(config.train.seed);
        let out_dir = out.unwrap_or_else(|| config.io.out_dir.clone());
        Self {
            config,
            seed,
            out_dir,
            checkpoint,
            dump_features,
        }
    }

    fn build_mask(&self) -> Result<SamplingMask> {
        let m = &self.config.mask;
        make_mask(
            m.kind,
            m.height,
            m.width,
            m.af,
            m.effective_center_fraction(),
            m.spokes,
            self.seed,
        )
    }

    fn build_coils(&self) -> Result<CoilSet<f32>> {
        simulate_coils(
            self.config.mask.height,
            self.config.mask.width,
            self.config.coils.count,
            self.seed ^ 0xC0115EED,
        )
    }
}

fn fmt_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.3}")
    }
}

/// Simulates one acquisition: phantom, mask, coil maps, and noisy k-space,
/// all written as toolkit tensor files; prints zero-filled metrics.
pub fn cmd_simulate(inv: &Invocation) -> Result<()> {
    std::fs::create_dir_all(&inv.out_dir)?;
    let m = &inv.config.mask;
    let phantom = shepp_logan::<f32>(m.height, m.width, inv.seed)?;
    let mask = inv.build_mask()?;
    let coils = inv.build_coils()?;
    let acq = forward_model(
        &phantom.image,
        &mask,
        &coils,
        inv.config.train.noise_sigma,
        inv.seed ^ 0x0A0B0C0D,
    )?;

    write_complex(&inv.out_dir.join("phantom.kmoe"), &phantom.image)?;
    write_tensor(&inv.out_dir.join("mask.kmoe"), &mask.to_tensor::<f32>())?;
    for (c, map) in coils.maps().iter().enumerate() {
        write_complex(&inv.out_dir.join(format!("coil_{c:02}.kmoe")), map)?;
    }
    for (c, y) in acq.y.iter().enumerate() {
        write_complex(&inv.out_dir.join(format!("kspace_{c:02}.kmoe")), y)?;
    }

    let gt_mag = phantom.image.magnitude();
    let range = gt_mag.max_abs() as f64;
    let zf = kmoe_core::kspace::zero_filled(&acq)?;
    let rep = report(&zf.magnitude(), &gt_mag, range)?;
    append_report_csv(
        &inv.out_dir.join("metrics.csv"),
        "simulate-zero-filled",
        mask.af,
        mask.kind.name(),
        &rep,
    )?;
    println!(
        "simulated {}x{} {} af={} ({} samples, {} coils)",
        m.height,
        m.width,
        mask.kind.name(),
        mask.af,
        mask.count(),
        coils.count()
    );
    println!(
        "zero-filled: psnr {} dB, ssim {:.4}, nmse {:.4e}",
        fmt_psnr(rep.psnr_db),
        rep.ssim,
        rep.nmse
    );
    Ok(())
}

/// Reads the acquisition files written by [`cmd_simulate`].
pub fn load_acquisition(inv: &Invocation) -> Result<(ComplexImage<f32>, Acquisition<f32>)> {
    let dir = &inv.out_dir;
    let phantom: ComplexImage<f32> = read_complex(&dir.join("phantom.kmoe"))?;
    let mask_t: Tensor<f32> = read_tensor(&dir.join("mask.kmoe"))?;
    let m = &inv.config.mask;
    if mask_t.dims() != [m.height, m.width] {
        return Err(Error::ShapeMismatch(format!(
            "mask file {:?} vs config {}x{}",
            mask_t.dims(),
            m.height,
            m.width
        )));
    }
    let mask = SamplingMask {
        height: m.height,
        width: m.width,
        kind: m.kind,
        keep: mask_t.data().iter().map(|&v| v > 0.5).collect(),
        af: m.af,
        center_fraction: m.effective_center_fraction(),
        spokes: if m.kind == MaskKind::Radial {
            m.spokes
        } else {
            0
        },
    };
    let mut maps = Vec::new();
    for c in 0..inv.config.coils.count {
        maps.push(read_complex(&dir.join(format!("coil_{c:02}.kmoe")))?);
    }
    let coils = CoilSet::from_maps_unchecked(maps);
    let mut y = Vec::new();
    for c in 0..inv.config.coils.count {
        y.push(read_complex(&dir.join(format!("kspace_{c:02}.kmoe")))?);
    }
    let acq = Acquisition {
        mask,
        coils,
        y,
        noise_sigma: inv.config.train.noise_sigma,
    };
    Ok((phantom, acq))
}

/// Runs the cascade from a checkpoint over the simulated acquisition.
pub fn cmd_reconstruct(inv: &Invocation) -> Result<()> {
    warn_if_long_running(inv);
    let ckpt_dir = inv
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("reconstruct requires --checkpoint".into()))?;
    let model_cfg = inv.config.effective_model();
    let loaded = load_checkpoint(ckpt_dir, Some(&model_cfg))?;
    let (gt, acq) = load_acquisition(inv)?;

    let (recon, trace) = reconstruct(&acq, &loaded.params, inv.dump_features)?;
    write_complex(&inv.out_dir.join("recon.kmoe"), &recon)?;
    let mag = recon.magnitude();
    write_pgm(
        &inv.out_dir.join("recon.pgm"),
        recon.w(),
        recon.h(),
        &to_gray(&mag),
    )?;

    if inv.dump_features {
        let fdir = inv.out_dir.join("features");
        std::fs::create_dir_all(&fdir)?;
        for (i, (name, t)) in trace.dumps.iter().enumerate() {
            let safe = name.replace('.', "-");
            write_tensor(&fdir.join(format!("{i:03}_{safe}.kmoe")), t)?;
        }
        println!("dumped {} feature maps", trace.dumps.len());
    }

    let gt_mag = gt.magnitude();
    let range = gt_mag.max_abs() as f64;
    let rep = report(&mag, &gt_mag, range)?;
    append_report_csv(
        &inv.out_dir.join("metrics.csv"),
        "reconstruct",
        acq.mask.af,
        acq.mask.kind.name(),
        &rep,
    )?;
    println!(
        "reconstruction: psnr {} dB, ssim {:.4}, nmse {:.4e}",
        fmt_psnr(rep.psnr_db),
        rep.ssim,
        rep.nmse
    );
    Ok(())
}

fn append_route_stats(path: &Path, step: u64, stats: &[kmoe_core::moe::RouteStats]) -> Result<()> {
    let new = !path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let mut wtr = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file);
    if new {
        wtr.write_record(["step", "layer", "expert", "p", "count"])
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    for (layer, s) in stats.iter().enumerate() {
        for (e, (&p, &count)) in s.p.iter().zip(&s.counts).enumerate() {
            wtr.write_record([
                step.to_string(),
                layer.to_string(),
                e.to_string(),
                format!("{p:.6}"),
                count.to_string(),
            ])
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        }
    }
    wtr.flush()?;
    Ok(())
}

fn warn_if_long_running(inv: &Invocation) {
    let m = &inv.config.mask;
    if m.height * m.width >= 256 * 256 || inv.config.model.groups >= 8 {
        eprintln!(
            "note: {}x{} with {} groups is a long-running configuration on CPU",
            m.height, m.width, inv.config.model.groups
        );
    }
}

/// Trains on jittered phantoms; checkpoints periodically and keeps the last
/// good checkpoint if the loss diverges.
pub fn cmd_train(inv: &Invocation) -> Result<()> {
    std::fs::create_dir_all(&inv.out_dir)?;
    warn_if_long_running(inv);
    let model_cfg = inv.config.effective_model();
    let opts = inv.config.train_options(Some(inv.seed));
    let mask = inv.build_mask()?;
    let coils = inv.build_coils()?;

    let (params, adam, start_step) = match &inv.checkpoint {
        Some(dir) => {
            let loaded = load_checkpoint(dir, Some(&model_cfg))?;
            (loaded.params, loaded.adam, loaded.step)
        }
        None => (
            CascadeParams::<f32>::init(&model_cfg, inv.seed)?,
            AdamState::new(),
            0,
        ),
    };
    let mut trainer = Trainer::new(params, opts.clone(), mask, coils);
    trainer.adam = adam;
    trainer.step = start_step;

    let ckpt_dir = inv.out_dir.join("checkpoint");
    save_checkpoint(&ckpt_dir, &trainer.params, &trainer.adam, trainer.step)?;

    let log_path = inv.out_dir.join("train_log.csv");
    let stats_path = inv.out_dir.join("route_stats.csv");
    let mut log = {
        let new = !log_path.exists();
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)?;
        if new {
            writeln!(f, "step,lr,loss,l_bal")?;
        }
        f
    };

    while trainer.step < opts.steps {
        let rep = match trainer.train_step() {
            Ok(r) => r,
            Err(e @ Error::Numerical(_)) => {
                eprintln!(
                    "aborting: {e}; last good checkpoint retained at {}",
                    ckpt_dir.display()
                );
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        writeln!(
            log,
            "{},{:.6e},{:.6},{:.6}",
            rep.step, rep.lr, rep.loss, rep.l_bal
        )?;
        append_route_stats(&stats_path, rep.step, &rep.stats)?;
        if (rep.step + 1) % inv.config.train.checkpoint_every == 0 {
            save_checkpoint(&ckpt_dir, &trainer.params, &trainer.adam, trainer.step)?;
        }
        if rep.step % 50 == 0 {
            println!(
                "step {:>5}  lr {:.3e}  loss {:.4}  l_bal {:.4}",
                rep.step, rep.lr, rep.loss, rep.l_bal
            );
        }
    }
    save_checkpoint(&ckpt_dir, &trainer.params, &trainer.adam, trainer.step)?;

    let seeds = holdout_seeds(inv.config.train.holdout);
    let (rec_psnr, zf_psnr) = evaluate_heldout(
        &trainer.params,
        &trainer.mask,
        &trainer.coils,
        opts.noise_sigma,
        &seeds,
    )?;
    println!(
        "held-out ({} phantoms): recon {} dB vs zero-filled {} dB (gain {:+.3} dB)",
        seeds.len(),
        fmt_psnr(rec_psnr),
        fmt_psnr(zf_psnr),
        rec_psnr - zf_psnr
    );
    Ok(())
}

/// One ablation row: flags plus held-out metrics.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: String,
    pub sflap: bool,
    pub lsgp: bool,
    pub moe: bool,
    pub balanced: bool,
    pub patch: usize,
    pub groups: usize,
    pub recon: MetricReport,
}

/// Full held-out metric evaluation used by the ablation table.
fn eval_variant(
    params: &CascadeParams<f32>,
    mask: &SamplingMask,
    coils: &CoilSet<f32>,
    holdout: usize,
) -> Result<MetricReport> {
    let seeds = holdout_seeds(holdout);
    let mut acc = MetricReport {
        psnr_db: 0.0,
        ssim: 0.0,
        nmse: 0.0,
    };
    for &seed in &seeds {
        let phantom = shepp_logan::<f32>(mask.height, mask.width, seed)?;
        let acq = forward_model(&phantom.image, mask, coils, 0.0, seed ^ 0x5EED)?;
        let (recon, _) = reconstruct(&acq, params, false)?;
        let gt_mag = phantom.image.magnitude();
        let range = gt_mag.max_abs() as f64;
        let r = report(&recon.magnitude(), &gt_mag, range)?;
        acc.psnr_db += r.psnr_db;
        acc.ssim += r.ssim;
        acc.nmse += r.nmse;
    }
    let n = seeds.len() as f64;
    Ok(MetricReport {
        psnr_db: acc.psnr_db / n,
        ssim: acc.ssim / n,
        nmse: acc.nmse / n,
    })
}

/// Trains and evaluates the component grid (DC baseline, backbone, +SF-Lap,
/// +LSGP, +MoE, +balanced loss) and a small patch/depth grid; one CSV row
/// per variant.
pub fn cmd_ablate(inv: &Invocation) -> Result<Vec<AblationRow>> {
    std::fs::create_dir_all(&inv.out_dir)?;
    let base = inv.config.effective_model();
    let bal = if base.lambda_bal > 0.0 {
        base.lambda_bal
    } else {
        0.01
    };

    let mut variants: Vec<(String, kmoe_core::model::CascadeConfig)> = Vec::new();
    let mk = |sflap: bool, lsgp: bool, moe: bool, balanced: bool| {
        let mut c = base.clone();
        c.use_sflap = sflap;
        c.use_lsgp = lsgp;
        c.use_moe = moe;
        c.lambda_bal = if balanced { bal } else { 0.0 };
        c
    };
    variants.push(("dc-baseline".into(), mk(false, false, false, false)));
    variants.push(("hfm".into(), mk(false, false, false, false)));
    variants.push(("hfm+sflap".into(), mk(true, false, false, false)));
    variants.push(("hfm+sflap+lsgp".into(), mk(true, true, false, false)));
    variants.push(("hfm+sflap+lsgp+moe".into(), mk(true, true, true, false)));
    variants.push(("hfm+sflap+lsgp+moe-b".into(), mk(true, true, true, true)));
    for patch in [1usize, 2] {
        for mult in [1usize, 2] {
            let mut c = base.clone();
            c.patch = patch;
            c.groups = base.groups * mult;
            variants.push((format!("grid-p{patch}-d{}", c.groups), c));
        }
    }

    let mask = inv.build_mask()?;
    let coils = inv.build_coils()?;
    let mut rows = Vec::new();
    let csv_path = inv.out_dir.join("ablation.csv");
    let new = !csv_path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&csv_path)?;
    let mut wtr = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(file);
    if new {
        wtr.write_record([
            "variant", "sflap", "lsgp", "moe", "balanced", "patch", "groups", "psnr_db", "ssim",
            "nmse",
        ])
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }

    for (name, cfg) in variants {
        cfg.validate_extent(mask.height, mask.width)?;
        let mut params = CascadeParams::<f32>::init(&cfg, inv.seed)?;
        if name == "dc-baseline" {
            params.zero_network();
        } else {
            let opts = inv.config.train_options(Some(inv.seed));
            let mut trainer = Trainer::new(params, opts.clone(), mask.clone(), coils.clone());
            while trainer.step < opts.steps {
                trainer.train_step()?;
            }
            params = trainer.params;
        }
        let rep = eval_variant(&params, &mask, &coils, inv.config.train.holdout)?;
        println!(
            "{name:<24} psnr {} ssim {:.4} nmse {:.4e}",
            fmt_psnr(rep.psnr_db),
            rep.ssim,
            rep.nmse
        );
        let row = AblationRow {
            variant: name.clone(),
            sflap: cfg.use_sflap,
            lsgp: cfg.use_lsgp,
            moe: cfg.use_moe,
            balanced: cfg.use_moe && cfg.lambda_bal > 0.0,
            patch: cfg.patch,
            groups: cfg.groups,
            recon: rep,
        };
        wtr.write_record([
            row.variant.clone(),
            row.sflap.to_string(),
            row.lsgp.to_string(),
            row.moe.to_string(),
            row.balanced.to_string(),
            row.patch.to_string(),
            row.groups.to_string(),
            format!("{:.6}", row.recon.psnr_db),
            format!("{:.6}", row.recon.ssim),
            format!("{:.6e}", row.recon.nmse),
        ])
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        rows.push(row);
    }
    wtr.flush()?;
    Ok(rows)
}

/// Converts a directory of dumped feature tensors into spectra PGM grids.
pub fn cmd_spectra(inv: &Invocation) -> Result<usize> {
    let fdir = inv.out_dir.join("features");
    if !fdir.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!(
                "feature dump {} not found (run reconstruct --dump-features)",
                fdir.display()
            ),
        )));
    }
    let mut names: Vec<PathBuf> = std::fs::read_dir(&fdir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("kmoe"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            "feature dump directory holds no tensors",
        )));
    }
    let mut count = 0;
    for path in &names {
        let t: Tensor<f32> = read_tensor(path)?;
        let out = path.with_extension("pgm");
        spectra_diagnostic(&t, &out)?;
        count += 1;
    }
    println!("wrote {count} spectra grids to {}", fdir.display());
    Ok(count)
}
