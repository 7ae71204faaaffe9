//! Synthetic class-incremental fixtures and the flat binary dataset format.
//!
//! Dataset file layout (all integers little endian):
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `DLDS` |
//! | 4 | version, u32 = 1 |
//! | 4 | count, u32 |
//! | 4 | side, u32 |
//! | 4 | channels, u32 |
//! | 4·count·side²·channels | images, f32, channel-major then row-major |
//! | 2·count | labels, u16 |

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Stream, STREAM_DATA};

pub const DATASET_MAGIC: [u8; 4] = *b"DLDS";
pub const DATASET_VERSION: u32 = 1;

/// Images with integer labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn push(&mut self, image: Vec<f64>, label: usize) {
        self.images.push(image);
        self.labels.push(label);
    }
}

/// One task: global labels `first_class .. first_class + classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub first_class: usize,
    pub classes: usize,
    pub train: Dataset,
    pub test: Dataset,
}

impl TaskData {
    /// Label relative to this task's head.
    pub fn local(&self, label: usize) -> usize {
        label - self.first_class
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fixture {
    pub image_side: usize,
    pub channels: usize,
    /// Labels `0..pretext_classes`, disjoint from every task.
    pub pretext: Dataset,
    pub pretext_classes: usize,
    pub tasks: Vec<TaskData>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_side: usize,
    #[serde(default = "one")]
    pub channels: usize,
    /// Radius `s` of the sphere class centres are drawn on.
    pub separation: f64,
    /// RMS norm `σ` of the Gaussian noise vector (per-pixel std `σ/√p` for
    /// `p` pixels), so `s/σ` is the centre-to-noise norm ratio.
    pub noise: f64,
    pub pretext_classes: usize,
    pub pretext_per_class: usize,
    /// Weight `w ∈ [0, 1)` pulling each class centre toward a per-task anchor:
    /// `c = s·normalise(√w·anchor + √(1−w)·u)` with `anchor`, `u` uniform unit
    /// vectors. Zero gives independent centres; larger values make each task
    /// a coherent domain.
    #[serde(default)]
    pub task_anchor_weight: f64,
}

fn one() -> usize {
    1
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tasks", self.tasks),
            ("classes_per_task", self.classes_per_task),
            ("train_per_class", self.train_per_class),
            ("test_per_class", self.test_per_class),
            ("image_side", self.image_side),
            ("channels", self.channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::Config("separation must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.task_anchor_weight) {
            return Err(Error::Config("task_anchor_weight must lie in [0, 1)".into()));
        }
        if self.pretext_classes > 0 && self.pretext_per_class == 0 {
            return Err(Error::Config("pretext classes need samples".into()));
        }
        let total = self.pretext_classes + self.tasks * self.classes_per_task;
        if total > u16::MAX as usize {
            return Err(Error::Config(format!("{total} classes exceed the label range")));
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.image_side * self.image_side * self.channels
    }
}

/// Class centres on the sphere of radius `s`, optionally pulled toward a
/// per-task anchor; samples are centre plus i.i.d. `N(0, σ²/p)` pixel noise.
/// Draw order: pretext centres; per task its anchor and class directions;
/// pretext samples; per task its samples followed by shuffles of its train
/// and test splits.
pub fn generate_tasks(spec: &SyntheticTaskSpec, seed: u64) -> Result<Fixture> {
    spec.validate()?;
    let mut rng = Stream::new(seed, STREAM_DATA);
    let p = spec.pixels();
    let unit = |rng: &mut Stream| {
        let v: Vec<f64> = (0..p).map(|_| rng.normal()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
    };
    let on_sphere = |v: Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| spec.separation * x / n).collect::<Vec<f64>>()
    };
    let pixel_std = spec.noise / (p as f64).sqrt();
    let sample = |c: &[f64], rng: &mut Stream| -> Vec<f64> {
        c.iter().map(|&x| x + pixel_std * rng.normal()).collect()
    };

    let pretext_centers: Vec<Vec<f64>> =
        (0..spec.pretext_classes).map(|_| on_sphere(unit(&mut rng))).collect();
    let w = spec.task_anchor_weight;
    let mut task_centers = Vec::with_capacity(spec.tasks * spec.classes_per_task);
    for _ in 0..spec.tasks {
        let anchor = if w > 0.0 { unit(&mut rng) } else { vec![0.0; p] };
        for _ in 0..spec.classes_per_task {
            let u = unit(&mut rng);
            let mix = anchor.iter().zip(&u).map(|(a, b)| w.sqrt() * a + (1.0 - w).sqrt() * b).collect();
            task_centers.push(on_sphere(mix));
        }
    }

    let mut pretext = Dataset::default();
    for (label, c) in pretext_centers.iter().enumerate() {
        for _ in 0..spec.pretext_per_class {
            pretext.push(sample(c, &mut rng), label);
        }
    }
    let mut tasks = Vec::with_capacity(spec.tasks);
    for t in 0..spec.tasks {
        let first = t * spec.classes_per_task;
        let mut train = Dataset::default();
        let mut test = Dataset::default();
        for k in 0..spec.classes_per_task {
            let c = &task_centers[first + k];
            for _ in 0..spec.train_per_class {
                train.push(sample(c, &mut rng), first + k);
            }
            for _ in 0..spec.test_per_class {
                test.push(sample(c, &mut rng), first + k);
            }
        }
        shuffle_dataset(&mut train, &mut rng);
        shuffle_dataset(&mut test, &mut rng);
        tasks.push(TaskData { first_class: first, classes: spec.classes_per_task, train, test });
    }
    Ok(Fixture {
        image_side: spec.image_side,
        channels: spec.channels,
        pretext,
        pretext_classes: spec.pretext_classes,
        tasks,
    })
}

/// Interleaves classes so any contiguous chunk is a random draw.
fn shuffle_dataset(d: &mut Dataset, rng: &mut Stream) {
    let mut order: Vec<usize> = (0..d.len()).collect();
    rng.shuffle(&mut order);
    d.images = order.iter().map(|&i| std::mem::take(&mut d.images[i])).collect();
    d.labels = order.iter().map(|&i| d.labels[i]).collect();
}

/// Splits a labelled dataset into pretext data (labels below
/// `pretext_classes`) and consecutive tasks of `classes_per_task` labels; each
/// class's samples are shuffled and the last `test_fraction` held out.
pub fn split_dataset(
    data: &LabelledImages,
    pretext_classes: usize,
    classes_per_task: usize,
    tasks: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<Fixture> {
    if classes_per_task == 0 || tasks == 0 || !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config("invalid task split".into()));
    }
    let needed = pretext_classes + classes_per_task * tasks;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); needed];
    for (i, &l) in data.labels.iter().enumerate() {
        if (l as usize) < needed {
            by_class[l as usize].push(i);
        }
    }
    if let Some(c) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::Config(format!("dataset has no samples of class {c}")));
    }
    let mut rng = Stream::new(seed, STREAM_DATA);
    let image = |i: usize| data.image(i).iter().map(|&x| x as f64).collect::<Vec<f64>>();
    let mut pretext = Dataset::default();
    for (c, idx) in by_class.iter().enumerate().take(pretext_classes) {
        for &i in idx {
            pretext.push(image(i), c);
        }
    }
    let mut out = Vec::with_capacity(tasks);
    for t in 0..tasks {
        let first = t * classes_per_task;
        let mut task = TaskData {
            first_class: first,
            classes: classes_per_task,
            train: Dataset::default(),
            test: Dataset::default(),
        };
        for k in 0..classes_per_task {
            let mut idx = by_class[pretext_classes + first + k].clone();
            rng.shuffle(&mut idx);
            let n_test = ((idx.len() as f64) * test_fraction).round() as usize;
            let n_train = idx.len() - n_test;
            if n_train == 0 {
                return Err(Error::Config(format!("class {} has no training samples", first + k)));
            }
            for (j, &i) in idx.iter().enumerate() {
                let target = if j < n_train { &mut task.train } else { &mut task.test };
                target.push(image(i), first + k);
            }
        }
        shuffle_dataset(&mut task.train, &mut rng);
        shuffle_dataset(&mut task.test, &mut rng);
        out.push(task);
    }
    Ok(Fixture {
        image_side: data.side,
        channels: data.channels,
        pretext,
        pretext_classes,
        tasks: out,
    })
}

/// Contents of a dataset file.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelledImages {
    pub side: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
    pub labels: Vec<u16>,
}

impl LabelledImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let p = self.side * self.side * self.channels;
        &self.pixels[i * p..(i + 1) * p]
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let p = self.side * self.side * self.channels;
        if self.pixels.len() != p * self.labels.len() {
            return Err(Error::Dimension("pixel buffer does not match label count".into()));
        }
        w.write_all(&DATASET_MAGIC)?;
        for v in [DATASET_VERSION, self.len() as u32, self.side as u32, self.channels as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for x in &self.pixels {
            w.write_all(&x.to_le_bytes())?;
        }
        for l in &self.labels {
            w.write_all(&l.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let fmt = |detail: &str| Error::Format { what: "dataset", detail: detail.into() };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| fmt("truncated header"))?;
        if magic != DATASET_MAGIC {
            return Err(fmt("bad magic"));
        }
        let mut word = || -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| fmt("truncated header"))?;
            Ok(u32::from_le_bytes(b))
        };
        let version = word()?;
        if version != DATASET_VERSION {
            return Err(fmt(&format!("unsupported version {version}")));
        }
        let (count, side, channels) = (word()? as usize, word()? as usize, word()? as usize);
        let n = count
            .checked_mul(side * side * channels)
            .ok_or_else(|| fmt("size overflow"))?;
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf).map_err(|_| fmt("truncated pixels"))?;
        let pixels: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if pixels.iter().any(|x| !x.is_finite()) {
            return Err(fmt("non-finite pixel"));
        }
        let mut buf = vec![0u8; count * 2];
        r.read_exact(&mut buf).map_err(|_| fmt("truncated labels"))?;
        let labels = buf.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        Ok(Self { side, channels, pixels, labels })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }
}
