//! Multi-array archives in the dSprites layout: `imgs` (N, H, W) `u8` and
//! `latents_classes` (N, 1 + F) `i64` whose first column is a constant color.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use ndarray::{arr0, Array0, Array1, Array2, Array3};
use ndarray_npy::{NpzReader, NpzWriter};
use serde::{Deserialize, Serialize};

use super::FactorDataset;
use crate::error::{invalid, Error, Result};

/// dSprites factors after dropping the constant color column.
pub const DSPRITES_FACTORS: [&str; 5] = ["shape", "scale", "orientation", "pos_x", "pos_y"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchiveOptions {
    /// Halve 64px images to 32px by exact 2x2 averaging.
    pub downsample_32: bool,
    /// Served channel count: 1, or 3 by replication.
    pub channels: usize,
}

impl Default for ArchiveOptions {
    fn default() -> Self {
        Self {
            downsample_32: false,
            channels: 1,
        }
    }
}

fn open(path: &Path) -> Result<NpzReader<BufReader<File>>> {
    let file = File::open(path)?;
    let bytes = file.metadata()?.len();
    NpzReader::new(BufReader::new(file)).map_err(|e| {
        Error::Format(format!(
            "{}: cannot read archive directory ({bytes} bytes on disk; truncated or not an npz file): {e}",
            path.display()
        ))
    })
}

fn check_key(names: &[String], key: &str, path: &Path) -> Result<()> {
    if names.iter().any(|n| n == key) {
        Ok(())
    } else {
        Err(Error::Format(format!(
            "{}: missing key '{key}' (found: {})",
            path.display(),
            names.join(", ")
        )))
    }
}

fn read_key<A, D>(
    npz: &mut NpzReader<BufReader<File>>,
    key: &str,
    names: &[String],
    path: &Path,
) -> Result<ndarray::Array<A, D>>
where
    A: ndarray_npy::ReadableElement,
    D: ndarray::Dimension,
{
    check_key(names, key, path)?;
    npz.by_name(key)
        .map_err(|e| Error::Format(format!("{}: key '{key}': {e}", path.display())))
}

fn downsample(pixels: &[u8], n: usize, size: usize) -> Vec<u8> {
    let half = size / 2;
    let mut out = vec![0u8; n * half * half];
    for i in 0..n {
        let src = &pixels[i * size * size..(i + 1) * size * size];
        let dst = &mut out[i * half * half..(i + 1) * half * half];
        for y in 0..half {
            for x in 0..half {
                let a = src[2 * y * size + 2 * x] as u16;
                let b = src[2 * y * size + 2 * x + 1] as u16;
                let c = src[(2 * y + 1) * size + 2 * x] as u16;
                let d = src[(2 * y + 1) * size + 2 * x + 1] as u16;
                dst[y * half + x] = (a + b + c + d) as u8;
            }
        }
    }
    out
}

/// Loads any archive in the dSprites layout.
///
/// Optional keys written by [`export_npz`]: `pixel_max` (0-d `u8`, default 1)
/// and `factor_names` (newline-joined UTF-8 bytes).
pub fn load_npz(path: &Path, options: ArchiveOptions) -> Result<FactorDataset> {
    let mut npz = open(path)?;
    let names = npz
        .names()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let imgs: Array3<u8> = read_key(&mut npz, "imgs", &names, path)?;
    let latents: Array2<i64> = read_key(&mut npz, "latents_classes", &names, path)?;
    let mut pixel_max = if names.iter().any(|n| n == "pixel_max") {
        let a: Array0<u8> = read_key(&mut npz, "pixel_max", &names, path)?;
        a.into_scalar()
    } else {
        1
    };
    let (n, h, w) = imgs.dim();
    if h != w {
        return Err(Error::Format(format!("imgs must be square, got {h}x{w}")));
    }
    if latents.nrows() != n || latents.ncols() < 2 {
        return Err(Error::Format(format!(
            "latents_classes has shape {:?}; expected ({n}, >=2)",
            latents.dim()
        )));
    }
    let f = latents.ncols() - 1;
    let mut classes = Vec::with_capacity(n * f);
    let mut factor_sizes = vec![0usize; f];
    for (row, r) in latents.rows().into_iter().enumerate() {
        for j in 0..f {
            let v = r[j + 1];
            if v < 0 || v > u32::MAX as i64 {
                return Err(Error::Format(format!(
                    "latents_classes[{row}, {}] = {v} is not a class index",
                    j + 1
                )));
            }
            factor_sizes[j] = factor_sizes[j].max(v as usize + 1);
            classes.push(v as u32);
        }
    }
    let factor_names = if names.iter().any(|n| n == "factor_names") {
        let raw: Array1<u8> = read_key(&mut npz, "factor_names", &names, path)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Format("factor_names is not UTF-8".into()))?
            .split('\n')
            .map(String::from)
            .collect()
    } else if f == DSPRITES_FACTORS.len() {
        DSPRITES_FACTORS.iter().map(|s| s.to_string()).collect()
    } else {
        (0..f).map(|j| format!("factor{j}")).collect::<Vec<_>>()
    };
    let mut pixels = imgs.as_standard_layout().into_owned().into_raw_vec_and_offset().0;
    let mut size = h;
    if options.downsample_32 {
        if size != 64 {
            return invalid(format!("32px downsampling needs 64px input, got {size}px"));
        }
        if pixel_max as u16 * 4 > 255 {
            return invalid("pixel_max too large for exact 2x2 summation");
        }
        pixels = downsample(&pixels, n, size);
        size = 32;
        pixel_max *= 4;
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("archive").to_string();
    FactorDataset::new(stem, pixels, pixel_max, (n, 1, size), classes, factor_sizes, factor_names)?
        .with_channels(options.channels)
}

/// Loads the official dSprites archive, checking its five-factor layout.
pub fn load_dsprites(path: &Path, options: ArchiveOptions) -> Result<FactorDataset> {
    let ds = load_npz(path, options)?;
    if ds.num_factors() != 5 {
        return Err(Error::Format(format!(
            "dSprites has 5 factors after the color column, found {}",
            ds.num_factors()
        )));
    }
    Ok(ds)
}

/// Writes a single-channel dataset in the same layout, with a zero color column.
pub fn export_npz(dataset: &FactorDataset, path: &Path) -> Result<()> {
    if dataset.stored_channels() != 1 {
        return invalid("only single-channel datasets can be exported");
    }
    let n = dataset.len();
    let s = dataset.img_size();
    let f = dataset.num_factors();
    let imgs = Array3::from_shape_vec((n, s, s), dataset.raw_pixels().to_vec())
        .map_err(|e| Error::Format(e.to_string()))?;
    let mut latents = Array2::<i64>::zeros((n, f + 1));
    for i in 0..n {
        for (j, &c) in dataset.factor_classes(i).iter().enumerate() {
            latents[[i, j + 1]] = c as i64;
        }
    }
    let names = Array1::from(dataset.factor_names().join("\n").into_bytes());
    let to_fmt = |e: ndarray_npy::WriteNpzError| Error::Format(e.to_string());
    let mut w = NpzWriter::new_compressed(File::create(path)?);
    w.add_array("imgs", &imgs).map_err(to_fmt)?;
    w.add_array("latents_classes", &latents).map_err(to_fmt)?;
    w.add_array("pixel_max", &arr0(dataset.pixel_max())).map_err(to_fmt)?;
    w.add_array("factor_names", &names).map_err(to_fmt)?;
    w.finish().map_err(to_fmt)?;
    Ok(())
}

/// Lowercase hex SHA-256 of a file's contents.
pub fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    std::io::copy(&mut BufReader::new(File::open(path)?), &mut hasher)?;
    Ok(crate::rng::hex(&hasher.finalize()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub images: usize,
    pub img_size: usize,
    pub pixel_max: u8,
    pub factor_names: Vec<String>,
    pub factor_sizes: Vec<usize>,
    pub full_factorial: bool,
}

/// Loads an archive and checks the dataset invariants, including that a
/// full-factorial archive holds every combination exactly once.
pub fn verify_npz(path: &Path) -> Result<VerifyReport> {
    let ds = load_npz(path, ArchiveOptions::default())?;
    let full = ds.is_full_factorial();
    if full {
        let mut seen = vec![false; ds.len()];
        for i in 0..ds.len() {
            let mut key = 0usize;
            for (j, &c) in ds.factor_classes(i).iter().enumerate() {
                key = key * ds.factor_sizes()[j] + c as usize;
            }
            if std::mem::replace(&mut seen[key], true) {
                return Err(Error::Format(format!(
                    "image {i} repeats factor combination {:?}",
                    ds.factor_classes(i)
                )));
            }
        }
    }
    Ok(VerifyReport {
        images: ds.len(),
        img_size: ds.img_size(),
        pixel_max: ds.pixel_max(),
        factor_names: ds.factor_names().to_vec(),
        factor_sizes: ds.factor_sizes().to_vec(),
        full_factorial: full,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_factors, SynthSpec};

    #[test]
    fn export_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synth.npz");
        let ds = synth_factors(&SynthSpec::default()).unwrap();
        export_npz(&ds, &path).unwrap();
        let back = load_npz(&path, ArchiveOptions::default()).unwrap();
        assert_eq!(back.raw_pixels(), ds.raw_pixels());
        assert_eq!(back.all_classes(), ds.all_classes());
        assert_eq!(back.factor_names(), ds.factor_names());
        assert_eq!(back.pixel_max(), 255);
        let report = verify_npz(&path).unwrap();
        assert_eq!(report.images, 1024);
        assert!(report.full_factorial);
    }

    #[test]
    fn dsprites_layout_and_downsampling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mini.npz");
        // Two binary 64px images with a five-factor table and color column.
        let mut imgs = Array3::<u8>::zeros((2, 64, 64));
        imgs[[1, 10, 10]] = 1;
        imgs[[1, 10, 11]] = 1;
        imgs[[1, 11, 10]] = 1;
        let mut lat = Array2::<i64>::zeros((2, 6));
        lat[[1, 1]] = 2;
        lat[[1, 5]] = 31;
        let mut w = NpzWriter::new(File::create(&path).unwrap());
        w.add_array("imgs", &imgs).unwrap();
        w.add_array("latents_classes", &lat).unwrap();
        w.finish().unwrap();

        let ds = load_dsprites(&path, ArchiveOptions::default()).unwrap();
        assert_eq!(ds.factor_names()[0], "shape");
        assert_eq!(ds.factor_sizes(), &[3, 1, 1, 1, 32]);
        assert_eq!(ds.pixel_max(), 1);
        let small = load_dsprites(&path, ArchiveOptions { downsample_32: true, channels: 3 }).unwrap();
        assert_eq!(small.img_size(), 32);
        assert_eq!(small.channels(), 3);
        let img = small.image(1);
        assert_eq!(img[5 * 32 + 5], 0.75);
        assert_eq!(img.len(), 3 * 32 * 32);
    }

    #[test]
    fn missing_keys_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.npz");
        let mut w = NpzWriter::new(File::create(&path).unwrap());
        w.add_array("imgs", &Array3::<u8>::zeros((1, 4, 4))).unwrap();
        w.finish().unwrap();
        let err = load_npz(&path, ArchiveOptions::default()).unwrap_err().to_string();
        assert!(err.contains("latents_classes") && err.contains("imgs"), "{err}");
    }

    #[test]
    fn sha256_of_known_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("abc");
        std::fs::write(&path, b"abc").unwrap();
        assert_eq!(
            file_sha256(&path).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn truncated_archive_reports_size() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synth.npz");
        export_npz(&synth_factors(&SynthSpec::default()).unwrap(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = verify_npz(&path).unwrap_err().to_string();
        assert!(err.contains(&format!("{} bytes", bytes.len() / 2)), "{err}");
    }
}
