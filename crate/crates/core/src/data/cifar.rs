use std::fs;
use std::path::Path;

use super::LabeledDataset;
use crate::autograd::Tensor;
use crate::error::{Error, Result};

const PIXELS: usize = 3 * 32 * 32;

/// Record layout of the CIFAR binary distributions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarFormat {
    /// 1 label byte then 3072 pixel bytes (R plane, G plane, B plane, each row-major).
    Cifar10,
    /// Coarse label byte, fine label byte, then the pixels. The fine label is used.
    Cifar100,
}

impl CifarFormat {
    fn label_bytes(self) -> usize {
        match self {
            CifarFormat::Cifar10 => 1,
            CifarFormat::Cifar100 => 2,
        }
    }

    fn classes(self) -> usize {
        match self {
            CifarFormat::Cifar10 => 10,
            CifarFormat::Cifar100 => 100,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + PIXELS
    }
}

fn parse_records(
    bytes: &[u8],
    format: CifarFormat,
    source: &Path,
    images: &mut Vec<f32>,
    labels: &mut Vec<usize>,
) -> Result<()> {
    let rec = format.record_len();
    if bytes.is_empty() {
        return Err(Error::Format(format!("{}: empty file", source.display())));
    }
    if !bytes.len().is_multiple_of(rec) {
        return Err(Error::Format(format!(
            "{}: {} bytes is not a whole number of {rec}-byte records",
            source.display(),
            bytes.len()
        )));
    }
    for (i, record) in bytes.chunks_exact(rec).enumerate() {
        let label = record[format.label_bytes() - 1] as usize;
        if label >= format.classes() {
            return Err(Error::Format(format!(
                "{}: record {i} has label {label}, expected < {}",
                source.display(),
                format.classes()
            )));
        }
        labels.push(label);
        images.extend(record[format.label_bytes()..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(())
}

/// Loads one binary batch file, or every `*.bin` file of a directory in name order.
pub fn load_cifar_binary(path: &Path, format: CifarFormat) -> Result<LabeledDataset> {
    let files = if path.is_dir() {
        let mut files: Vec<_> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "bin"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Format(format!("{}: no .bin files", path.display())));
        }
        files
    } else {
        vec![path.to_path_buf()]
    };
    let (mut images, mut labels) = (Vec::new(), Vec::new());
    for file in &files {
        let bytes = fs::read(file).map_err(|e| Error::io(file, e))?;
        parse_records(&bytes, format, file, &mut images, &mut labels)?;
    }
    let n = labels.len();
    let tensor = Tensor::new(vec![n, 3, 32, 32], images)?;
    LabeledDataset::new(tensor, labels, format.classes())
}
