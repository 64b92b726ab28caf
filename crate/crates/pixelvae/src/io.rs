//! Files: IDX corpora (gzipped or not), dataset slicing, PGM grids, and
//! checkpoint persistence.  Checkpoint writes are atomic — a temp file in
//! the target directory is renamed into place — so an interrupted run never
//! leaves a half-written checkpoint behind.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use pixelvae_core::checkpoint::Checkpoint;
use pixelvae_core::data::{binarize, parse_idx_images, BinarizeMode, Dataset};
use pixelvae_core::error::{Error, Result};
use pixelvae_core::sampler::encode_pgm;
use pixelvae_core::tensor::Tensor;

fn io_err(what: &str, path: &Path, e: std::io::Error) -> Error {
    Error::Format(format!("{what} {}: {e}", path.display()))
}

/// Raw file bytes, gunzipped transparently when the gzip magic leads.
pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| io_err("reading", path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| io_err("decompressing", path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Write via a temp file in the same directory plus rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err("creating", parent, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("'{}' is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| io_err("writing", &tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err("renaming", path, e))
}

pub enum MnistSplit {
    Train,
    Test,
}

/// Loads one MNIST image file from `dir`, accepting the canonical stem with
/// or without a `.gz` suffix.  Labels are never read; the models are
/// unconditional.
pub fn load_mnist_images(dir: &Path, split: MnistSplit) -> Result<Dataset> {
    let stem = match split {
        MnistSplit::Train => "train-images-idx3-ubyte",
        MnistSplit::Test => "t10k-images-idx3-ubyte",
    };
    let path = [dir.join(stem), dir.join(format!("{stem}.gz"))]
        .into_iter()
        .find(|p| p.is_file())
        .ok_or_else(|| {
            Error::Format(format!("no {stem}[.gz] under {}", dir.display()))
        })?;
    let images = parse_idx_images(&read_bytes(&path)?)?;
    Dataset::new(images, &format!("mnist:{}", path.display()))
}

/// First `count` images of a corpus.  Prefix slicing keeps smaller subsets
/// exact prefixes of larger ones.
pub fn subset(dataset: &Dataset, count: usize) -> Result<Dataset> {
    if count == 0 || count > dataset.len() {
        return Err(Error::Contract(format!(
            "subset of {count} from a corpus of {}",
            dataset.len()
        )));
    }
    let (h, w) = dataset.image_hw();
    let data = dataset.images.data()[..count * h * w].to_vec();
    Ok(Dataset {
        images: Tensor::from_vec(&[count, 1, h, w], data)?,
        source: format!("{}[..{count}]", dataset.source),
        binarization: dataset.binarization,
    })
}

/// Train/eval pair for one of the named corpora.
///
/// MNIST: the first `train_count` train images and first `eval_count` test
/// images, binarized after slicing (so draws do not depend on the subset
/// sizes), with seeds `seed` and `seed + 1`.  Toy: one rectangle corpus of
/// `train_count + eval_count` images split in two; the stream-per-image
/// layout makes the train split independent of the eval size.
pub fn load_train_eval(
    dataset: &str,
    data_dir: &Path,
    seed: u64,
    train_count: usize,
    eval_count: usize,
    mode: BinarizeMode,
) -> Result<(Dataset, Dataset)> {
    match dataset {
        "toy" => {
            let all = pixelvae_core::data::make_toy_dataset(train_count + eval_count, seed)?;
            let train = subset(&all, train_count)?;
            let (h, w) = all.image_hw();
            let tail =
                all.images.data()[train_count * h * w..].to_vec();
            let eval = Dataset {
                images: Tensor::from_vec(&[eval_count, 1, h, w], tail)?,
                source: format!("{}[{train_count}..]", all.source),
                binarization: all.binarization,
            };
            Ok((train, eval))
        }
        "mnist" => {
            let train = load_mnist_images(data_dir, MnistSplit::Train)?;
            let eval = load_mnist_images(data_dir, MnistSplit::Test)?;
            let train = binarize(&subset(&train, train_count)?, mode, seed)?;
            let eval = binarize(&subset(&eval, eval_count)?, mode, seed + 1)?;
            Ok((train, eval))
        }
        other => Err(Error::Config(format!("unknown dataset '{other}', want toy or mnist"))),
    }
}

/// Tile [N,1,H,W] images into a `rows` x `cols` PGM file.
pub fn write_pgm(path: &Path, images: &Tensor, rows: usize, cols: usize) -> Result<()> {
    write_atomic(path, &encode_pgm(images, rows, cols)?)
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    write_atomic(path, &checkpoint.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&read_bytes(path)?)
}
