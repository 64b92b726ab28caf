//! Layer-count sweep: how much autoregressive decoder depth buys, with and
//! without a latent path.  Each (k, variant, seed) cell trains a model and
//! evaluates it on held-out data; a reduction then averages the PixelVAE
//! cells per k into a reconstruction/KL cost table.

use std::collections::BTreeMap;

use pixelvae_core::data::Dataset;
use pixelvae_core::error::{Error, Result};
use pixelvae_core::model::{build_model, ModelConfig, Variant};
use pixelvae_core::optim::AdamState;

use crate::train::{evaluate, train, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub pixel_layers: usize,
    pub variant: Variant,
    pub seed: u64,
    pub elbo: f64,
    pub recon: f64,
    pub kl: Vec<f64>,
}

/// Trains every (k, variant, seed) cell: k-major, PixelVAE before
/// pixelcnn-only, seeds innermost.  A cell is a pure function of its
/// descriptor — model and schedule both seed from the cell seed — so the
/// grid could be computed in any order or in parallel without changing a
/// digit.  `template` supplies geometry and latent levels; the
/// pixelcnn-only cells drop the levels.
pub fn run_sweep(
    train_set: &Dataset,
    eval_set: &Dataset,
    template: &ModelConfig,
    base: &TrainConfig,
    layers: &[usize],
    seeds: &[u64],
) -> Result<Vec<SweepCell>> {
    if layers.is_empty() || seeds.is_empty() {
        return Err(Error::Contract("sweep needs at least one layer count and one seed".into()));
    }
    let mut cells = Vec::new();
    for &k in layers {
        for variant in [Variant::Pixelvae, Variant::PixelcnnOnly] {
            for &seed in seeds {
                let mut config = template.clone();
                config.pixel_layers = k;
                config.variant = variant;
                if variant == Variant::PixelcnnOnly {
                    config.levels = Vec::new();
                }
                config.validate()?;
                let model = build_model(config, seed)?;
                let schedule = TrainConfig { seed, ..base.clone() };
                let out = train(model, AdamState::new(), train_set, &schedule, None)?;
                let (elbo, recon, kl) = evaluate(&out.model, eval_set, base.batch_size, seed)?;
                cells.push(SweepCell { pixel_layers: k, variant, seed, elbo, recon, kl });
            }
        }
    }
    Ok(cells)
}

pub const SWEEP_HEADER: &str = "k,variant,seed,elbo,recon,kl_1,kl_2";

pub fn sweep_to_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for cell in cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            cell.pixel_layers,
            cell.variant.name(),
            cell.seed,
            cell.elbo,
            cell.recon,
            cell.kl.first().copied().unwrap_or(0.0),
            cell.kl.get(1).copied().unwrap_or(0.0),
        ));
    }
    out
}

pub fn sweep_from_csv(text: &str) -> Result<Vec<SweepCell>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header.trim() == SWEEP_HEADER => {}
        got => {
            return Err(Error::Format(format!(
                "sweep CSV must start with '{SWEEP_HEADER}', got {got:?}"
            )))
        }
    }
    let mut cells = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 7 {
            return Err(Error::Format(format!("row {}: want 7 fields, got {}", i + 2, fields.len())));
        }
        let num = |at: usize| -> Result<f64> {
            fields[at]
                .parse()
                .map_err(|_| Error::Format(format!("row {}: bad number '{}'", i + 2, fields[at])))
        };
        cells.push(SweepCell {
            pixel_layers: fields[0]
                .parse()
                .map_err(|_| Error::Format(format!("row {}: bad k '{}'", i + 2, fields[0])))?,
            variant: Variant::parse(fields[1])?,
            seed: fields[2]
                .parse()
                .map_err(|_| Error::Format(format!("row {}: bad seed '{}'", i + 2, fields[2])))?,
            elbo: num(3)?,
            recon: num(4)?,
            kl: vec![num(5)?, num(6)?],
        });
    }
    Ok(cells)
}

pub const BREAKDOWN_HEADER: &str = "k,recon,kl,elbo";

/// Per-k means of the PixelVAE cells' cost split.  Every input row must obey
/// recon + KL = ELBO to 1e-6 — a violated identity means the sweep file was
/// not produced by this tool.
pub fn breakdown_csv(cells: &[SweepCell]) -> Result<String> {
    let mut by_k: BTreeMap<usize, Vec<&SweepCell>> = BTreeMap::new();
    for cell in cells.iter().filter(|c| c.variant == Variant::Pixelvae) {
        let gap = cell.recon + cell.kl.iter().sum::<f64>() - cell.elbo;
        if gap.abs() > 1e-6 {
            return Err(Error::Format(format!(
                "k={} seed={}: recon + kl misses elbo by {gap}",
                cell.pixel_layers, cell.seed
            )));
        }
        by_k.entry(cell.pixel_layers).or_default().push(cell);
    }
    if by_k.is_empty() {
        return Err(Error::Format("no pixelvae rows to break down".into()));
    }
    let mut out = String::from(BREAKDOWN_HEADER);
    out.push('\n');
    for (k, group) in by_k {
        let n = group.len() as f64;
        let recon = group.iter().map(|c| c.recon).sum::<f64>() / n;
        let kl = group.iter().map(|c| c.kl.iter().sum::<f64>()).sum::<f64>() / n;
        let elbo = group.iter().map(|c| c.elbo).sum::<f64>() / n;
        out.push_str(&format!("{k},{recon},{kl},{elbo}\n"));
    }
    Ok(out)
}
