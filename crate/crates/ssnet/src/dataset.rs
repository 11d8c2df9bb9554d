//! Dataset directories: `img_%05d.ppm`, `sem_%05d.pgm`, `inst_%05d.pgm` and
//! a `meta.txt` of `key=value` lines.

use std::fs;
use std::path::Path;

use ssnet_core::instance::InstanceLabeling;
use ssnet_core::synth::Sample;

use crate::config::parse_key_values;
use crate::error::{format_err, io_err, Error, Result};
use crate::pnm::{read_pgm16, read_pgm8, read_ppm, rgb_to_tensor, tensor_to_rgb, write_pgm16, write_pgm8, write_ppm, Raster};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Meta {
    pub count: usize,
    pub classes: usize,
    pub thing_classes: Vec<u32>,
    pub seed: u64,
}

impl Meta {
    pub fn to_text(&self) -> String {
        let things: Vec<String> = self.thing_classes.iter().map(u32::to_string).collect();
        format!(
            "count={}\nclasses={}\nthing_classes={}\nseed={}\n",
            self.count,
            self.classes,
            things.join(","),
            self.seed
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let mut count = None;
        let mut classes = None;
        let mut thing_classes = None;
        let mut seed = None;
        for (line, key, value) in kv {
            let bad = |_| Error::Config(format!("meta line {line}: bad value for {key}: {value:?}"));
            match key.as_str() {
                "count" => count = Some(value.parse().map_err(bad)?),
                "classes" => classes = Some(value.parse().map_err(bad)?),
                "seed" => seed = Some(value.parse().map_err(bad)?),
                "thing_classes" => {
                    let ids = if value.is_empty() {
                        Vec::new()
                    } else {
                        value
                            .split(',')
                            .map(|s| s.trim().parse::<u32>())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|e| Error::Config(format!("meta line {line}: thing_classes: {e}")))?
                    };
                    thing_classes = Some(ids);
                }
                _ => return Err(Error::Config(format!("meta line {line}: unknown key {key:?}"))),
            }
        }
        let missing = |k: &str| Error::Config(format!("meta: missing {k}"));
        Ok(Self {
            count: count.ok_or_else(|| missing("count"))?,
            classes: classes.ok_or_else(|| missing("classes"))?,
            thing_classes: thing_classes.ok_or_else(|| missing("thing_classes"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
        })
    }
}

pub fn image_path(dir: &Path, i: usize) -> std::path::PathBuf {
    dir.join(format!("img_{i:05}.ppm"))
}

pub fn semantic_path(dir: &Path, i: usize) -> std::path::PathBuf {
    dir.join(format!("sem_{i:05}.pgm"))
}

pub fn instance_path(dir: &Path, i: usize) -> std::path::PathBuf {
    dir.join(format!("inst_{i:05}.pgm"))
}

/// Writes one sample's three files.
pub fn write_sample(dir: &Path, i: usize, s: &Sample) -> Result<()> {
    let (h, w) = (s.height(), s.width());
    write_ppm(&image_path(dir, i), &tensor_to_rgb(&s.image))?;
    let sem = s
        .semantic
        .iter()
        .map(|&c| u8::try_from(c).map_err(|_| format_err(semantic_path(dir, i), format!("class {c} exceeds 255"))))
        .collect::<Result<Vec<u8>>>()?;
    write_pgm8(
        &semantic_path(dir, i),
        &Raster {
            width: w,
            height: h,
            channels: 1,
            samples: sem,
        },
    )?;
    let inst = s
        .instances
        .iter()
        .map(|&c| u16::try_from(c).map_err(|_| format_err(instance_path(dir, i), format!("instance id {c} exceeds 65535"))))
        .collect::<Result<Vec<u16>>>()?;
    write_pgm16(
        &instance_path(dir, i),
        &Raster {
            width: w,
            height: h,
            channels: 1,
            samples: inst,
        },
    )
}

/// Reads one sample. Instance centers are recomputed from the labels.
pub fn read_sample(dir: &Path, i: usize, meta: &Meta) -> Result<Sample> {
    let img = read_ppm(&image_path(dir, i))?;
    let (h, w) = (img.height, img.width);
    let sem_path = semantic_path(dir, i);
    let sem = read_pgm8(&sem_path)?;
    let inst_path = instance_path(dir, i);
    let inst = read_pgm16(&inst_path)?;
    if (sem.height, sem.width) != (h, w) {
        return Err(format_err(&sem_path, format!("{}x{} labels for a {h}x{w} image", sem.height, sem.width)));
    }
    if (inst.height, inst.width) != (h, w) {
        return Err(format_err(&inst_path, format!("{}x{} labels for a {h}x{w} image", inst.height, inst.width)));
    }
    let semantic: Vec<u32> = sem.samples.iter().map(|&c| c as u32).collect();
    if let Some(c) = semantic.iter().find(|&&c| c as usize >= meta.classes) {
        return Err(format_err(&sem_path, format!("class {c} outside 0..{}", meta.classes)));
    }
    let instances: Vec<u32> = inst.samples.iter().map(|&v| v as u32).collect();
    if let Some(p) = (0..h * w).find(|&p| instances[p] > 0 && !meta.thing_classes.contains(&semantic[p])) {
        return Err(format_err(
            &inst_path,
            format!("instance pixel {p} has non-thing class {}", semantic[p]),
        ));
    }
    let labeling = InstanceLabeling::new(1, h, w, instances.clone()).map_err(|e| format_err(&inst_path, e.to_string()))?;
    Ok(Sample {
        image: rgb_to_tensor(&img),
        semantic,
        instances,
        centers: labeling.centroids(0),
    })
}

pub fn write_dataset(dir: &Path, samples: &[Sample], meta: &Meta) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (i, s) in samples.iter().enumerate() {
        write_sample(dir, i, s)?;
    }
    let path = dir.join("meta.txt");
    fs::write(&path, meta.to_text()).map_err(io_err(path))
}

pub fn read_meta(dir: &Path) -> Result<Meta> {
    let path = dir.join("meta.txt");
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    Meta::parse(&text).map_err(|e| format_err(&path, e.to_string()))
}

pub fn read_dataset(dir: &Path) -> Result<(Vec<Sample>, Meta)> {
    let meta = read_meta(dir)?;
    let samples = (0..meta.count).map(|i| read_sample(dir, i, &meta)).collect::<Result<_>>()?;
    Ok((samples, meta))
}
