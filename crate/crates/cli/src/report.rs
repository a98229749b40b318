//! Comma-delimited reports, preview grids and the model card.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use ltcf_core::model::ModuleStats;
use ltcf_core::{LtcfNet, Tensor};
use serde::Serialize;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageScore {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ImageScore>,
}

impl EvalReport {
    /// Rows sorted by name.
    pub fn new(mut rows: Vec<ImageScore>) -> Self {
        rows.sort_by(|a, b| a.name.cmp(&b.name));
        Self { rows }
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.psnr))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.ssim))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w =
            csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.serialize(ImageScore {
            name: "mean".into(),
            psnr: self.mean_psnr(),
            ssim: self.mean_ssim(),
        })?;
        w.flush()
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    pub fn table(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(4)
            .max(4);
        let mut s = format!("{:<width$}  {:>9}  {:>8}\n", "name", "psnr_db", "ssim");
        for r in &self.rows {
            let _ = writeln!(s, "{:<width$}  {:>9.4}  {:>8.5}", r.name, r.psnr, r.ssim);
        }
        let _ = writeln!(
            s,
            "{:<width$}  {:>9.4}  {:>8.5}",
            "mean",
            self.mean_psnr(),
            self.mean_ssim()
        );
        s
    }
}

fn mean(it: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = it.len();
    if n == 0 {
        return f64::NAN;
    }
    it.sum::<f64>() / n as f64
}

pub fn write_module_csv(rows: &[ModuleStats], path: &Path) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn module_table(rows: &[ModuleStats], h: usize, w: usize) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(6).max(6);
    let mut s = format!(
        "{:<width$}  {:>10}  {:>16}\n",
        "module",
        "params",
        format!("flops@{h}x{w}")
    );
    for r in rows {
        let _ = writeln!(s, "{:<width$}  {:>10}  {:>16}", r.name, r.params, r.flops);
    }
    let params: usize = rows.iter().map(|r| r.params).sum();
    let flops: u64 = rows.iter().map(|r| r.flops).sum();
    let _ = writeln!(s, "{:<width$}  {:>10}  {:>16}", "total", params, flops);
    let _ = writeln!(
        s,
        "\nparams {:.3}M  flops {:.3}G",
        params as f64 / 1e6,
        flops as f64 / 1e9
    );
    s
}

/// Side-by-side grid of equally tall images separated by a gray gutter.
pub fn preview_grid(images: &[&Tensor]) -> Result<Tensor> {
    const GUTTER: usize = 4;
    let h = images.iter().map(|t| t.shape()[0]).max().unwrap_or(0);
    let total_w: usize = images.iter().map(|t| t.shape()[1]).sum::<usize>()
        + GUTTER * images.len().saturating_sub(1);
    let mut grid = Tensor::full(&[h, total_w, 3], 0.5);
    let mut x0 = 0;
    for img in images {
        let (ih, iw, _) = img.hwc()?;
        for y in 0..ih {
            let src = &img.data()[y * iw * 3..(y + 1) * iw * 3];
            grid.data_mut()[(y * total_w + x0) * 3..][..iw * 3].copy_from_slice(src);
        }
        x0 += iw + GUTTER;
    }
    Ok(grid)
}

pub struct CardInputs<'a> {
    pub net: &'a LtcfNet,
    pub config_toml: &'a str,
    pub epochs_run: usize,
    pub final_loss: Option<f64>,
    pub eval: Option<&'a EvalReport>,
}

pub fn model_card(c: &CardInputs<'_>) -> String {
    let net = c.net;
    let mut s = String::new();
    let _ = writeln!(s, "# LTCF-Net model card\n");
    let _ = writeln!(s, "- variant: `{}`", net.config.variant_name());
    let _ = writeln!(s, "- parameters: {}", net.count_params());
    let _ = writeln!(s, "- FLOPs at 256x256: {}", net.estimate_flops(256, 256));
    let _ = writeln!(
        s,
        "- largest square input without tiling: {}",
        net.config.max_square_side()
    );
    let _ = writeln!(s, "- epochs trained: {}", c.epochs_run);
    if let Some(l) = c.final_loss {
        let _ = writeln!(s, "- final epoch loss: {l:.6}");
    }
    if let Some(e) = c.eval {
        let _ = writeln!(
            s,
            "- held-out mean PSNR {:.3} dB, mean SSIM {:.4} over {} image(s)",
            e.mean_psnr(),
            e.mean_ssim(),
            e.rows.len()
        );
    }
    let _ = writeln!(
        s,
        "\nTrained on the data named in the configuration below. Inference on\n\
         images larger than one tile uses overlapping tiles and is an\n\
         approximation of a whole-image pass.\n"
    );
    let _ = writeln!(
        s,
        "## Resolved configuration\n\n```toml\n{}```",
        c.config_toml
    );
    s
}
