//! Dataset ingestion: the CIFAR-10 binary format, directory-per-class image
//! folders, and a deterministic synthetic generator that emits the same
//! binary layout so every pipeline exercises one loader.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ndarray::Array4;
use pasta_core::data::{ImageBatch, Normalization};
use pasta_core::rng::{sample_distinct, shuffle, stage_rng};
use rand::Rng;

use crate::config::{DatasetConfig, DatasetSource, ExperimentConfig};

const CIFAR_SIDE: usize = 32;
const CIFAR_CHANNELS: usize = 3;
const CIFAR_CLASSES: usize = 10;
const RECORD_BYTES: usize = 1 + CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;
const RECORDS_PER_FILE: usize = 10_000;

const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

/// Everything the drivers need from ingestion: normalized splits, the stats
/// that produced them, and the class names when the source defines any.
pub struct LoadedData {
    pub train: ImageBatch<f32>,
    pub test: ImageBatch<f32>,
    pub norm: Normalization,
    pub classes: Vec<String>,
}

fn read_records(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.len() != RECORDS_PER_FILE * RECORD_BYTES {
        bail!(
            "{} holds {} bytes, expected {} ({} records of {} bytes)",
            path.display(),
            bytes.len(),
            RECORDS_PER_FILE * RECORD_BYTES,
            RECORDS_PER_FILE,
            RECORD_BYTES
        );
    }
    Ok(bytes)
}

fn decode_records(
    raw: &[Vec<u8>],
    indices: &[usize],
    norm: &Normalization,
    origin: &Path,
) -> Result<ImageBatch<f32>> {
    let mut images = Array4::<f32>::zeros((indices.len(), CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE));
    let mut labels = Vec::with_capacity(indices.len());
    for (slot, &index) in indices.iter().enumerate() {
        let file = index / RECORDS_PER_FILE;
        let offset = (index % RECORDS_PER_FILE) * RECORD_BYTES;
        let record = &raw[file][offset..offset + RECORD_BYTES];
        let label = record[0];
        if usize::from(label) >= CIFAR_CLASSES {
            bail!(
                "{}: record {} has label {label}, expected 0..{}",
                origin.display(),
                index % RECORDS_PER_FILE,
                CIFAR_CLASSES
            );
        }
        labels.push(label);
        for c in 0..CIFAR_CHANNELS {
            let plane = &record[1 + c * CIFAR_SIDE * CIFAR_SIDE..];
            for y in 0..CIFAR_SIDE {
                for x in 0..CIFAR_SIDE {
                    let value = f64::from(plane[y * CIFAR_SIDE + x]) / 255.0;
                    images[[slot, c, y, x]] = norm.normalize(value, c) as f32;
                }
            }
        }
    }
    ImageBatch::new(images, labels, CIFAR_CLASSES)
        .with_context(|| format!("assembling batch from {}", origin.display()))
}

fn pick_subset(total: usize, subset: Option<usize>, seed: u64, stage: &str) -> Result<Vec<usize>> {
    match subset {
        None => Ok((0..total).collect()),
        Some(k) => {
            if k == 0 || k > total {
                bail!("subset {k} out of range for {total} records");
            }
            let mut rng = stage_rng(seed, stage, 0);
            Ok(sample_distinct(total, k, &mut rng))
        }
    }
}

/// Loads the six standard binary batch files under `root`, normalizes with
/// the supplied per-channel stats, and keeps a deterministic seeded subset
/// of each split (`None` keeps everything).
pub fn load_cifar10(
    root: &Path,
    train_subset: Option<usize>,
    test_subset: Option<usize>,
    seed: u64,
    norm: &Normalization,
) -> Result<(ImageBatch<f32>, ImageBatch<f32>)> {
    if norm.channels() != CIFAR_CHANNELS {
        bail!(
            "normalization covers {} channels, the binary format has {CIFAR_CHANNELS}",
            norm.channels()
        );
    }
    let train_raw: Vec<Vec<u8>> = TRAIN_FILES
        .iter()
        .map(|name| read_records(&root.join(name)))
        .collect::<Result<_>>()?;
    let test_raw = vec![read_records(&root.join(TEST_FILE))?];

    let train_indices = pick_subset(TRAIN_FILES.len() * RECORDS_PER_FILE, train_subset, seed, "train-subset")?;
    let test_indices = pick_subset(RECORDS_PER_FILE, test_subset, seed, "test-subset")?;

    let train = decode_records(&train_raw, &train_indices, norm, root)?;
    let test = decode_records(&test_raw, &test_indices, norm, root)?;
    Ok((train, test))
}

fn bilinear_upsample(grid: &[f64], from: usize, to: usize) -> Vec<f64> {
    let mut out = vec![0.0; to * to];
    let scale = (from - 1) as f64 / (to - 1) as f64;
    for y in 0..to {
        let gy = y as f64 * scale;
        let y0 = gy.floor() as usize;
        let y1 = (y0 + 1).min(from - 1);
        let fy = gy - y0 as f64;
        for x in 0..to {
            let gx = x as f64 * scale;
            let x0 = gx.floor() as usize;
            let x1 = (x0 + 1).min(from - 1);
            let fx = gx - x0 as f64;
            let top = grid[y0 * from + x0] * (1.0 - fx) + grid[y0 * from + x1] * fx;
            let bot = grid[y1 * from + x0] * (1.0 - fx) + grid[y1 * from + x1] * fx;
            out[y * to + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Ten class prototypes: coarse random grids upsampled into smooth fields,
/// one field per channel, values in [-1, 1].
fn class_prototypes(seed: u64) -> Vec<Vec<Vec<f64>>> {
    const COARSE: usize = 4;
    (0..CIFAR_CLASSES)
        .map(|class| {
            let mut rng = stage_rng(seed, "synthetic-class", class as u64);
            (0..CIFAR_CHANNELS)
                .map(|_| {
                    let grid: Vec<f64> =
                        (0..COARSE * COARSE).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    bilinear_upsample(&grid, COARSE, CIFAR_SIDE)
                })
                .collect()
        })
        .collect()
}

fn synthesize_record(
    prototypes: &[Vec<Vec<f64>>],
    seed: u64,
    index: u64,
    out: &mut [u8],
) {
    let mut rng = stage_rng(seed, "synthetic-record", index);
    let label = rng.gen_range(0..CIFAR_CLASSES as u32) as usize;
    let dy = rng.gen_range(-2i64..=2);
    let dx = rng.gen_range(-2i64..=2);
    let contrast = rng.gen_range(0.8..1.2);
    out[0] = label as u8;
    let side = CIFAR_SIDE as i64;
    for c in 0..CIFAR_CHANNELS {
        let field = &prototypes[label][c];
        let plane = &mut out[1 + c * CIFAR_SIDE * CIFAR_SIDE..][..CIFAR_SIDE * CIFAR_SIDE];
        for y in 0..CIFAR_SIDE {
            let sy = ((y as i64 + dy).rem_euclid(side)) as usize;
            for x in 0..CIFAR_SIDE {
                let sx = ((x as i64 + dx).rem_euclid(side)) as usize;
                let noise = rng.gen_range(-12.0..12.0);
                let value = 128.0 + contrast * 64.0 * field[sy * CIFAR_SIDE + sx] + noise;
                plane[y * CIFAR_SIDE + x] = value.clamp(0.0, 255.0) as u8;
            }
        }
    }
}

/// Writes a deterministic ten-class dataset under `root` in the standard
/// binary layout (five training files plus one test file, 10000 records
/// each). Each class is a smooth random field; samples jitter it with small
/// cyclic shifts, contrast changes, and pixel noise. Existing complete
/// roots are left untouched.
pub fn synthesize_cifar10(root: &Path, seed: u64) -> Result<()> {
    let all_present = TRAIN_FILES
        .iter()
        .chain(std::iter::once(&TEST_FILE))
        .all(|name| {
            fs::metadata(root.join(name))
                .map(|m| m.len() as usize == RECORDS_PER_FILE * RECORD_BYTES)
                .unwrap_or(false)
        });
    if all_present {
        return Ok(());
    }
    fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    let prototypes = class_prototypes(seed);
    let mut record = vec![0u8; RECORD_BYTES];
    let mut global = 0u64;
    for name in TRAIN_FILES.iter().chain(std::iter::once(&TEST_FILE)) {
        let path = root.join(name);
        let mut writer = BufWriter::new(
            fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?,
        );
        for _ in 0..RECORDS_PER_FILE {
            synthesize_record(&prototypes, seed, global, &mut record);
            writer.write_all(&record)?;
            global += 1;
        }
        writer.flush()?;
    }
    Ok(())
}

/// Decodes a directory-per-class tree of raster images: class order is the
/// lexicographic directory order, unreadable files are skipped with a
/// warning, a class with no usable image is an error. Returns the whole
/// folder as one batch plus the class names.
pub fn load_image_folder(
    root: &Path,
    image_size: usize,
    norm: &Normalization,
) -> Result<(ImageBatch<f32>, Vec<String>)> {
    if norm.channels() != 3 {
        bail!("image folders decode to 3 channels, normalization covers {}", norm.channels());
    }
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)
        .with_context(|| format!("reading {}", root.display()))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        bail!("{} contains no class directories", root.display());
    }
    if class_dirs.len() > usize::from(u8::MAX) + 1 {
        bail!("{} classes exceed the 256-label limit", class_dirs.len());
    }

    let mut classes = Vec::new();
    let mut decoded: Vec<(Vec<f32>, u8)> = Vec::new();
    for (class_index, dir) in class_dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let mut usable = 0usize;
        for file in files {
            let img = match image::open(&file) {
                Ok(img) => img.to_rgb8(),
                Err(err) => {
                    eprintln!("warning: skipping unreadable {}: {err}", file.display());
                    continue;
                }
            };
            let resized = image::imageops::resize(
                &img,
                image_size as u32,
                image_size as u32,
                image::imageops::FilterType::Triangle,
            );
            let mut pixels = vec![0f32; 3 * image_size * image_size];
            for (x, y, pixel) in resized.enumerate_pixels() {
                for c in 0..3 {
                    let value = f64::from(pixel.0[c]) / 255.0;
                    pixels[c * image_size * image_size + y as usize * image_size + x as usize] =
                        norm.normalize(value, c) as f32;
                }
            }
            decoded.push((pixels, class_index as u8));
            usable += 1;
        }
        if usable == 0 {
            bail!("class directory {} holds no decodable image", dir.display());
        }
        classes.push(name);
    }

    let mut images = Array4::<f32>::zeros((decoded.len(), 3, image_size, image_size));
    let mut labels = Vec::with_capacity(decoded.len());
    for (slot, (pixels, label)) in decoded.iter().enumerate() {
        labels.push(*label);
        for c in 0..3 {
            for y in 0..image_size {
                for x in 0..image_size {
                    images[[slot, c, y, x]] = pixels[c * image_size * image_size + y * image_size + x];
                }
            }
        }
    }
    let batch = ImageBatch::new(images, labels, classes.len())
        .with_context(|| format!("assembling batch from {}", root.display()))?;
    Ok((batch, classes))
}

fn split_folder(
    whole: &ImageBatch<f32>,
    train_subset: Option<usize>,
    test_subset: Option<usize>,
    seed: u64,
) -> Result<(ImageBatch<f32>, ImageBatch<f32>)> {
    let n = whole.len();
    if n < 2 {
        bail!("need at least two images to form train and test splits, got {n}");
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stage_rng(seed, "folder-split", 0);
    shuffle(&mut order, &mut rng);
    let default_test = (n / 5).max(1);
    let test_n = test_subset.unwrap_or(default_test);
    let train_n = train_subset.unwrap_or(n.saturating_sub(test_n));
    if test_n == 0 || train_n == 0 || test_n + train_n > n {
        bail!("splits train={train_n} test={test_n} do not fit {n} images");
    }
    let test = whole.subset(&order[..test_n]);
    let train = whole.subset(&order[test_n..test_n + train_n]);
    Ok((train, test))
}

/// Resolves the experiment's dataset section end to end: synthesizes the
/// generated source on first use, loads and normalizes, and applies the
/// deterministic subset/split rules.
pub fn load_dataset(config: &ExperimentConfig) -> Result<LoadedData> {
    let DatasetConfig {
        source,
        train_subset,
        test_subset,
        mean,
        std,
    } = &config.dataset;
    let norm = Normalization::new(mean.clone(), std.clone())?;
    let cifar_classes: Vec<String> = (0..CIFAR_CLASSES).map(|c| format!("class-{c}")).collect();
    let (train, test, classes) = match source {
        DatasetSource::Cifar10 { root } => {
            let (train, test) = load_cifar10(root, *train_subset, *test_subset, config.seed, &norm)?;
            (train, test, cifar_classes)
        }
        DatasetSource::Synthetic { root } => {
            synthesize_cifar10(root, config.seed)?;
            let (train, test) = load_cifar10(root, *train_subset, *test_subset, config.seed, &norm)?;
            (train, test, cifar_classes)
        }
        DatasetSource::ImageFolder { root, image_size } => {
            let (whole, classes) = load_image_folder(root, *image_size, &norm)?;
            if classes.len() != config.model.num_classes {
                bail!(
                    "{} classes under {}, model expects {}",
                    classes.len(),
                    root.display(),
                    config.model.num_classes
                );
            }
            let (train, test) = split_folder(&whole, *train_subset, *test_subset, config.seed)?;
            (train, test, classes)
        }
    };
    if train.images.shape()[1] != config.model.channels
        || train.images.shape()[2] != config.model.image_size
    {
        bail!(
            "dataset tensors are {:?}, model expects {}x{}x{}",
            &train.images.shape()[1..],
            config.model.channels,
            config.model.image_size,
            config.model.image_size
        );
    }
    Ok(LoadedData {
        train,
        test,
        norm,
        classes,
    })
}
