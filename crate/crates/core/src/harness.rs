//! Task streams, synthetic and file-backed datasets, the accuracy matrix and
//! the three continual-learning metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{write_atomic, Reader};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{seeded_rng, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    pub classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Cil,
    Dil,
    Til,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
    /// Sorted labels `Y_t`.
    pub classes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub setting: Setting,
    pub tasks: Vec<Task>,
    pub classes: usize,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Standard deviation of per-pixel gaussian noise.
    pub noise: f64,
    /// Largest cyclic shift, in pixels, along each axis.
    pub max_shift: usize,
    /// Side of the coarse random grid each template is upsampled from.
    pub template_grid: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { classes: 50, per_class: 50, image_size: 32, channels: 3, noise: 0.3, max_shift: 2, template_grid: 8, seed: 0 }
    }
}

fn upsample(coarse: &[f64], g: usize, size: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(size * size);
    let s = g as f64 / size as f64;
    for y in 0..size {
        for x in 0..size {
            let fy = ((y as f64 + 0.5) * s - 0.5).clamp(0.0, (g - 1) as f64);
            let fx = ((x as f64 + 0.5) * s - 0.5).clamp(0.0, (g - 1) as f64);
            let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(g - 1), (x0 + 1).min(g - 1));
            let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
            let at = |r: usize, c: usize| coarse[r * g + c];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
            let bot = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Class templates are smooth random images; each sample is its class
/// template cyclically shifted, plus gaussian pixel noise. 80% of each
/// class goes to training.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::Config("synthetic data needs at least two classes".into()));
    }
    if spec.image_size == 0 || spec.channels == 0 || spec.template_grid == 0 || spec.per_class == 0 {
        return Err(Error::Config("synthetic image dimensions must be positive".into()));
    }
    let (n, c) = (spec.image_size, spec.channels);
    let mut trng = seeded_rng(spec.seed, 0xDA7A);
    let templates: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let planes: Vec<Vec<f64>> = (0..c)
                .map(|_| {
                    let coarse: Vec<f64> =
                        (0..spec.template_grid * spec.template_grid).map(|_| trng.sample(StandardNormal)).collect();
                    upsample(&coarse, spec.template_grid, n)
                })
                .collect();
            (0..n * n).flat_map(|p| planes.iter().map(move |pl| pl[p])).collect()
        })
        .collect();
    let mut srng = seeded_rng(spec.seed, 0xDA7B);
    let n_train = (spec.per_class * 4).div_ceil(5);
    let mut ds = Dataset { classes: spec.classes, ..Dataset::default() };
    let shift = spec.max_shift as i64;
    for (label, tpl) in templates.iter().enumerate() {
        for k in 0..spec.per_class {
            let dy = srng.random_range(-shift..=shift).rem_euclid(n as i64) as usize;
            let dx = srng.random_range(-shift..=shift).rem_euclid(n as i64) as usize;
            let mut px = vec![0.0; n * n * c];
            for y in 0..n {
                for x in 0..n {
                    let src = (((y + dy) % n) * n + (x + dx) % n) * c;
                    for ch in 0..c {
                        let z: f64 = srng.sample(StandardNormal);
                        px[(y * n + x) * c + ch] = tpl[src + ch] + spec.noise * z;
                    }
                }
            }
            let ex = Example { input: Tensor::new(vec![n, n, c], px)?, label };
            if k < n_train {
                ds.train.push(ex);
            } else {
                ds.test.push(ex);
            }
        }
    }
    Ok(ds)
}

/// Stratified 80/20 split of labelled examples.
pub fn split_dataset(examples: Vec<Example>, seed: u64) -> Result<Dataset> {
    if examples.is_empty() {
        return Err(Error::Input("no examples".into()));
    }
    let classes = examples.iter().map(|e| e.label).max().unwrap() + 1;
    let mut by_class: Vec<Vec<Example>> = vec![Vec::new(); classes];
    for e in examples {
        by_class[e.label].push(e);
    }
    let mut rng = seeded_rng(seed, 0x5917);
    let mut ds = Dataset { classes, ..Dataset::default() };
    for mut group in by_class {
        group.shuffle(&mut rng);
        let cut = (group.len() * 4).div_ceil(5);
        let test = group.split_off(cut);
        ds.train.extend(group);
        ds.test.extend(test);
    }
    Ok(ds)
}

/// Fixed per-task input transform for the domain-incremental setting.
#[derive(Clone, Debug, PartialEq)]
struct DomainShift {
    offset: Vec<f64>,
    gain: f64,
    noise: f64,
    blur: bool,
}

impl DomainShift {
    fn draw(task: usize, width: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, 0xD1 + task as u64);
        Self {
            offset: (0..width).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect(),
            gain: rng.random_range(0.7..1.3),
            noise: rng.random_range(0.0..0.2),
            blur: task % 2 == 1,
        }
    }

    fn apply(&self, x: &Tensor, rng: &mut impl Rng) -> Tensor {
        let mut v = x.clone();
        let s = x.shape().to_vec();
        if self.blur && s.len() == 3 {
            let (h, w, c) = (s[0], s[1], s[2]);
            let src = x.data();
            let out = v.data_mut();
            for y in 0..h {
                for xx in 0..w {
                    for ch in 0..c {
                        let mut acc = 0.0;
                        let mut cnt = 0.0;
                        for (yy, xq) in [(y, xx), (y.wrapping_sub(1), xx), (y + 1, xx), (y, xx.wrapping_sub(1)), (y, xx + 1)] {
                            if yy < h && xq < w {
                                acc += src[(yy * w + xq) * c + ch];
                                cnt += 1.0;
                            }
                        }
                        out[(y * w + xx) * c + ch] = acc / cnt;
                    }
                }
            }
        }
        let width = self.offset.len();
        for (i, p) in v.data_mut().iter_mut().enumerate() {
            let z: f64 = rng.sample(StandardNormal);
            *p = self.gain * *p + self.offset[i % width] + self.noise * z;
        }
        v
    }
}

/// Splits a dataset into `tasks` tasks.
///
/// Class-incremental and task-incremental streams partition a seeded
/// permutation of the classes, with any remainder going to the final task.
/// Domain-incremental streams give every task all classes and a disjoint
/// share of the samples under its own fixed input transform.
pub fn make_stream(ds: &Dataset, setting: Setting, tasks: usize, seed: u64) -> Result<TaskStream> {
    if tasks == 0 {
        return Err(Error::Config("a stream needs at least one task".into()));
    }
    let mut rng = seeded_rng(seed, 0x57);
    let out = match setting {
        Setting::Cil | Setting::Til => {
            if tasks > ds.classes {
                return Err(Error::Config(format!("{tasks} tasks for {} classes", ds.classes)));
            }
            let mut order: Vec<usize> = (0..ds.classes).collect();
            order.shuffle(&mut rng);
            let per = ds.classes / tasks;
            (0..tasks)
                .map(|t| {
                    let end = if t + 1 == tasks { ds.classes } else { (t + 1) * per };
                    let mut classes = order[t * per..end].to_vec();
                    classes.sort_unstable();
                    let pick = |set: &[Example]| -> Vec<Example> {
                        set.iter().filter(|e| classes.binary_search(&e.label).is_ok()).cloned().collect()
                    };
                    Task { train: pick(&ds.train), test: pick(&ds.test), classes }
                })
                .collect()
        }
        Setting::Dil => {
            let width = match ds.train.first().map(|e| e.input.shape().to_vec()) {
                Some(s) if s.len() == 3 => s[2],
                Some(s) => s.iter().product(),
                None => return Err(Error::Input("empty dataset".into())),
            };
            let classes: Vec<usize> = (0..ds.classes).collect();
            let shifts: Vec<DomainShift> = (0..tasks).map(|t| DomainShift::draw(t, width, seed)).collect();
            let mut split = |set: &[Example]| -> Vec<Vec<Example>> {
                let mut idx: Vec<usize> = (0..set.len()).collect();
                idx.shuffle(&mut rng);
                let mut parts = vec![Vec::new(); tasks];
                for (k, &i) in idx.iter().enumerate() {
                    parts[k % tasks].push(i);
                }
                parts
                    .into_iter()
                    .enumerate()
                    .map(|(t, mut ids)| {
                        ids.sort_unstable();
                        let mut nrng = seeded_rng(seed, 0xD100 + t as u64);
                        ids.iter()
                            .map(|&i| Example { input: shifts[t].apply(&set[i].input, &mut nrng), label: set[i].label })
                            .collect()
                    })
                    .collect()
            };
            let train = split(&ds.train);
            let test = split(&ds.test);
            train
                .into_iter()
                .zip(test)
                .map(|(train, test)| Task { train, test, classes: classes.clone() })
                .collect()
        }
    };
    Ok(TaskStream { setting, tasks: out, classes: ds.classes })
}

pub const EMBEDDING_MAGIC: &[u8; 5] = b"HEMB1";

/// Parses an HEMB1 embedding file: magic, `u32` count, `u32` dim, then
/// `count` rows of `u32` label and `dim` f32 values, all little-endian.
pub fn parse_embeddings(bytes: &[u8]) -> Result<Vec<Example>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(5, "magic")? != EMBEDDING_MAGIC {
        return Err(Error::Parse { offset: 0, message: "missing HEMB1 magic".into() });
    }
    let count = r.u32("count")? as usize;
    let dim = r.u32("dim")? as usize;
    if dim == 0 {
        return Err(Error::Parse { offset: 9, message: "zero embedding dimension".into() });
    }
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let label = r.u32("label")? as usize;
        let raw = r.take(4 * dim, "embedding row")?;
        let v = raw.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))).collect();
        out.push(Example { input: Tensor::vector(v), label });
    }
    if r.pos != bytes.len() {
        return Err(Error::Parse { offset: r.pos, message: "trailing bytes after last row".into() });
    }
    Ok(out)
}

pub fn load_embeddings(path: &Path) -> Result<Vec<Example>> {
    parse_embeddings(&fs::read(path)?)
}

pub fn embeddings_to_bytes(rows: &[Example]) -> Result<Vec<u8>> {
    let dim = rows.first().map_or(0, |e| e.input.len());
    let mut out = EMBEDDING_MAGIC.to_vec();
    out.extend((rows.len() as u32).to_le_bytes());
    out.extend((dim as u32).to_le_bytes());
    for e in rows {
        if e.input.rank() != 1 || e.input.len() != dim {
            return Err(shape_err("embedding rows must be vectors of one dimension"));
        }
        out.extend((e.label as u32).to_le_bytes());
        for &v in e.input.data() {
            out.extend((v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_embeddings(path: &Path, rows: &[Example]) -> Result<()> {
    write_atomic(path, &embeddings_to_bytes(rows)?)
}

/// Something that learns tasks in order and can be scored on any seen task.
pub trait ContinualLearner {
    fn learn_task(&mut self, t: usize, task: &Task) -> Result<()>;
    /// Number of correct predictions on `task.test`, where `t` is the task's
    /// index in the stream.
    fn count_correct(&mut self, t: usize, task: &Task) -> Result<u64>;
}

/// `A[i][t]` for `i <= t`, stored as integer counts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AccuracyMatrix {
    /// `rows[t][i] = (correct, total)`.
    rows: Vec<Vec<(u64, u64)>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends the evaluations after learning the next task.
    pub fn push_step(&mut self, counts: Vec<(u64, u64)>) -> Result<()> {
        if counts.len() != self.rows.len() + 1 {
            return Err(shape_err(format!("step {} needs {} entries", self.rows.len(), self.rows.len() + 1)));
        }
        if counts.iter().any(|&(c, n)| n == 0 || c > n) {
            return Err(Error::Input("accuracy counts need 0 <= correct <= total, total > 0".into()));
        }
        self.rows.push(counts);
        Ok(())
    }

    /// From fractions given as `rows[t][i]`; each is stored as a ratio over 10⁹.
    pub fn from_fractions(rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = Self::new();
        for r in rows {
            if r.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Domain("accuracy outside [0, 1]".into()));
            }
            m.push_step(r.iter().map(|v| ((v * 1e9).round() as u64, 1_000_000_000)).collect())?;
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    /// Accuracy on task `i` after learning task `t`.
    pub fn get(&self, i: usize, t: usize) -> Option<f64> {
        self.rows.get(t).and_then(|r| r.get(i)).map(|&(c, n)| c as f64 / n as f64)
    }

    pub fn counts(&self, i: usize, t: usize) -> Option<(u64, u64)> {
        self.rows.get(t).and_then(|r| r.get(i)).copied()
    }

    /// CSV with one row per evaluated task `i` and one column per learning
    /// step `t`; cells with `t < i` are empty.
    pub fn to_csv(&self) -> String {
        let n = self.tasks();
        let mut s = String::from("task");
        for t in 0..n {
            let _ = write!(s, ",after_{}", t + 1);
        }
        s.push('\n');
        for i in 0..n {
            let _ = write!(s, "{}", i + 1);
            for t in 0..n {
                s.push(',');
                if let Some(v) = self.get(i, t) {
                    let _ = write!(s, "{v:.6}");
                }
            }
            s.push('\n');
        }
        s
    }

    /// Parses [`to_csv`](Self::to_csv) output. Cells keep their printed
    /// precision.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse { offset: 0, message: "empty accuracy matrix".into() })?;
        let n = header.split(',').count().saturating_sub(1);
        let mut cells = vec![vec![None; n]; n];
        let mut offset = header.len() + 1;
        for (i, line) in lines.enumerate() {
            let parts: Vec<&str> = line.split(',').collect();
            if i >= n || parts.len() != n + 1 {
                return Err(Error::Parse { offset, message: format!("row {} does not match the header", i + 1) });
            }
            for (t, cell) in parts[1..].iter().enumerate() {
                if !cell.is_empty() {
                    let v: f64 = cell
                        .parse()
                        .map_err(|_| Error::Parse { offset, message: format!("bad cell {cell:?}") })?;
                    cells[i][t] = Some(v);
                }
            }
            offset += line.len() + 1;
        }
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|t| (0..=t).map(|i| cells[i][t].ok_or_else(|| Error::Input(format!("missing cell for task {} after {}", i + 1, t + 1)))).collect())
            .collect::<Result<_>>()?;
        Self::from_fractions(&rows)
    }
}

/// Trains on each task in order and evaluates all seen tasks after each.
/// `after_task` runs once per task, after evaluation.
pub fn accuracy_matrix<L: ContinualLearner>(
    learner: &mut L,
    stream: &TaskStream,
    mut after_task: impl FnMut(usize, &L) -> Result<()>,
) -> Result<AccuracyMatrix> {
    let mut m = AccuracyMatrix::new();
    for (t, task) in stream.tasks.iter().enumerate() {
        learner.learn_task(t, task)?;
        let mut row = Vec::with_capacity(t + 1);
        for (i, seen) in stream.tasks[..=t].iter().enumerate() {
            let correct = learner.count_correct(i, seen)?;
            row.push((correct, seen.test.len() as u64));
        }
        m.push_step(row)?;
        after_task(t, learner)?;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub faa: f64,
    pub caa: f64,
    /// Absent for a single task.
    pub ffm: Option<f64>,
    pub per_task_aa: Vec<f64>,
}

/// Final average accuracy, cumulative average accuracy and final
/// forgetting measure.
pub fn metrics(a: &AccuracyMatrix) -> Result<Metrics> {
    let n = a.tasks();
    if n == 0 {
        return Err(Error::Input("empty accuracy matrix".into()));
    }
    let per_task_aa: Vec<f64> =
        (0..n).map(|t| (0..=t).map(|i| a.get(i, t).unwrap()).sum::<f64>() / (t + 1) as f64).collect();
    let faa = per_task_aa[n - 1];
    let caa = per_task_aa.iter().sum::<f64>() / n as f64;
    let ffm = (n >= 2).then(|| {
        let last = n - 1;
        (0..last)
            .map(|i| {
                let fin = a.get(i, last).unwrap();
                (i..last).map(|t| a.get(i, t).unwrap() - fin).fold(f64::NEG_INFINITY, f64::max)
            })
            .sum::<f64>()
            / last as f64
    });
    Ok(Metrics { faa, caa, ffm, per_task_aa })
}

pub fn metrics_json(m: &Metrics) -> String {
    let mut s = serde_json::to_string_pretty(m).expect("metrics serialize");
    s.push('\n');
    s
}

/// Writes `accuracy_matrix.csv` and `metrics.json` into `dir`.
pub fn write_results(dir: &Path, a: &AccuracyMatrix, m: &Metrics) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join("accuracy_matrix.csv"), a.to_csv().as_bytes())?;
    write_atomic(&dir.join("metrics.json"), metrics_json(m).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::{masked_cross_entropy, LinearHead};
    use crate::numerics::{adam_step, AdamState};
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    fn small_spec(noise: f64) -> SynthSpec {
        SynthSpec { classes: 6, per_class: 10, image_size: 8, channels: 2, noise, max_shift: 1, template_grid: 4, seed: 3 }
    }

    #[test]
    fn csv_round_trip_keeps_printed_values() {
        let a = AccuracyMatrix::from_fractions(&[vec![1.0], vec![0.8, 0.9], vec![0.5, 0.25, 0.125]]).unwrap();
        let back = AccuracyMatrix::from_csv(&a.to_csv()).unwrap();
        assert_eq!(back.to_csv(), a.to_csv());
        assert_eq!(metrics(&back).unwrap(), metrics(&a).unwrap());
        assert!(AccuracyMatrix::from_csv("").is_err());
        assert!(AccuracyMatrix::from_csv("task,after_1,after_2\n1,1.0,\n").is_err());
        assert!(AccuracyMatrix::from_csv("task,after_1\n1,x\n").is_err());
    }

    #[test]
    fn noiseless_unshifted_classes_are_constant() {
        let spec = SynthSpec { max_shift: 0, ..small_spec(0.0) };
        let ds = synth_dataset(&spec).unwrap();
        assert_eq!(ds.train.len(), 6 * 8);
        assert_eq!(ds.test.len(), 6 * 2);
        for e in ds.train.iter().chain(&ds.test) {
            let first = ds.train.iter().find(|f| f.label == e.label).unwrap();
            assert_eq!(first.input, e.input);
        }
        assert_eq!(synth_dataset(&spec).unwrap(), ds);
        assert_ne!(synth_dataset(&SynthSpec { seed: 4, ..spec.clone() }).unwrap(), ds);
        assert!(synth_dataset(&SynthSpec { classes: 1, ..spec }).is_err());
    }

    #[test]
    fn linear_probe_separates_low_noise_classes() {
        let ds = synth_dataset(&SynthSpec { per_class: 30, ..small_spec(0.1) }).unwrap();
        let flat = |s: &[Example]| -> (Vec<Vec<f64>>, Vec<usize>) {
            (s.iter().map(|e| e.input.data().to_vec()).collect(), s.iter().map(|e| e.label).collect())
        };
        let (x, y) = flat(&ds.train);
        let outputs: Vec<usize> = (0..6).collect();
        let mut head = LinearHead::zeros(6, x[0].len());
        let (mut sw, mut sb) = (AdamState::for_tensor(&head.w), AdamState::for_tensor(&head.b));
        for _ in 0..200 {
            let (_, g, _) = masked_cross_entropy(&head, &x, &y, &outputs).unwrap();
            adam_step(&mut head.w, &g.w, &mut sw, 0.01).unwrap();
            adam_step(&mut head.b, &g.b, &mut sb, 0.01).unwrap();
        }
        let (tx, ty) = flat(&ds.test);
        let correct = tx.iter().zip(&ty).filter(|(h, &l)| head.argmax(h, &outputs) == l).count();
        assert!(correct as f64 / ty.len() as f64 >= 0.9, "{correct}/{}", ty.len());
    }

    #[test]
    fn class_incremental_split() {
        let ds = Dataset {
            train: (0..100).map(|l| Example { input: Tensor::vector(vec![l as f64]), label: l }).collect(),
            test: vec![],
            classes: 100,
        };
        let s = make_stream(&ds, Setting::Cil, 10, 1).unwrap();
        let mut all: Vec<usize> = s.tasks.iter().flat_map(|t| t.classes.clone()).collect();
        assert!(s.tasks.iter().all(|t| t.classes.len() == 10));
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(make_stream(&ds, Setting::Cil, 10, 1).unwrap(), s);
        let uneven = make_stream(&ds, Setting::Til, 7, 1).unwrap();
        assert_eq!(uneven.tasks[6].classes.len(), 100 - 6 * 14);
        assert!(matches!(make_stream(&ds, Setting::Cil, 0, 1), Err(Error::Config(_))));
        assert!(matches!(make_stream(&ds, Setting::Cil, 101, 1), Err(Error::Config(_))));
    }

    #[test]
    fn domain_incremental_split() {
        let ds = synth_dataset(&small_spec(0.1)).unwrap();
        let s = make_stream(&ds, Setting::Dil, 3, 2).unwrap();
        assert!(s.tasks.iter().all(|t| t.classes == (0..6).collect::<Vec<_>>()));
        let total: usize = s.tasks.iter().map(|t| t.train.len()).sum();
        assert_eq!(total, ds.train.len());
        // Different regimes change the input statistics.
        let mean = |t: &Task| t.train.iter().map(|e| e.input.sum()).sum::<f64>() / t.train.len() as f64;
        assert!((mean(&s.tasks[0]) - mean(&s.tasks[1])).abs() > 1e-3);
        assert_eq!(make_stream(&ds, Setting::Dil, 3, 2).unwrap(), s);
    }

    #[test]
    fn embedding_file_round_trip_and_errors() {
        let rows: Vec<Example> = (0..3)
            .map(|i| Example { input: Tensor::vector(vec![i as f64, 0.5, -1.25, 2.0]), label: 7 + i })
            .collect();
        let bytes = embeddings_to_bytes(&rows).unwrap();
        assert_eq!(bytes.len(), 5 + 8 + 3 * (4 + 16));
        let back = parse_embeddings(&bytes).unwrap();
        assert_eq!(back, rows);
        assert_eq!(back.iter().map(|e| e.label).collect::<Vec<_>>(), vec![7, 8, 9]);
        assert!(matches!(parse_embeddings(b""), Err(Error::Parse { offset: 0, .. })));
        match parse_embeddings(&bytes[..bytes.len() - 2]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 5 + 8 + 2 * 20 + 4),
            other => panic!("{other:?}"),
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.hemb");
        write_embeddings(&path, &rows).unwrap();
        assert_eq!(load_embeddings(&path).unwrap(), rows);
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn metrics_fixtures() {
        // (rows[t][i], faa, caa, ffm)
        let fixtures: Vec<(Vec<Vec<f64>>, f64, f64, Option<f64>)> = vec![
            (vec![vec![1.0], vec![0.8, 0.9]], 0.85, 0.925, Some(0.2)),
            (vec![vec![0.6]], 0.6, 0.6, None),
            (vec![vec![0.5], vec![0.5, 0.5], vec![0.5, 0.5, 0.5]], 0.5, 0.5, Some(0.0)),
            (vec![vec![0.9], vec![0.9, 0.7], vec![0.9, 0.7, 0.4]], 2.0 / 3.0, (0.9 + 0.8 + 2.0 / 3.0) / 3.0, Some(0.0)),
            (vec![vec![1.0], vec![0.5, 1.0]], 0.75, 0.875, Some(0.5)),
            (vec![vec![0.2], vec![0.6, 0.4]], 0.5, 0.35, Some(-0.4)),
            (vec![vec![1.0], vec![0.6, 1.0], vec![0.8, 0.5, 1.0]], 2.3 / 3.0, (1.0 + 0.8 + 2.3 / 3.0) / 3.0, Some(0.35)),
            (vec![vec![1.0], vec![1.0, 1.0], vec![0.0, 0.0, 1.0]], 1.0 / 3.0, (1.0 + 1.0 + 1.0 / 3.0) / 3.0, Some(1.0)),
            (vec![vec![0.4], vec![0.9, 0.8], vec![0.7, 0.6, 0.3]], 1.6 / 3.0, (0.4 + 0.85 + 1.6 / 3.0) / 3.0, Some(0.2)),
            (
                vec![vec![0.8], vec![0.7, 0.9], vec![0.6, 0.8, 0.9], vec![0.5, 0.7, 0.8, 1.0]],
                0.75,
                (0.8 + 0.8 + 2.3 / 3.0 + 0.75) / 4.0,
                Some((0.3 + 0.2 + 0.1) / 3.0),
            ),
        ];
        for (rows, faa, caa, ffm) in fixtures {
            let m = metrics(&AccuracyMatrix::from_fractions(&rows).unwrap()).unwrap();
            assert!(close(m.faa, faa), "{rows:?}: faa {}", m.faa);
            assert!(close(m.caa, caa), "{rows:?}: caa {}", m.caa);
            match (m.ffm, ffm) {
                (Some(a), Some(b)) => assert!(close(a, b), "{rows:?}: ffm {a}"),
                (None, None) => {}
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn outputs_and_csv_layout() {
        let a = AccuracyMatrix::from_fractions(&[vec![1.0], vec![0.8, 0.9]]).unwrap();
        assert_eq!(a.to_csv(), "task,after_1,after_2\n1,1.000000,0.800000\n2,,0.900000\n");
        let dir = tempfile::tempdir().unwrap();
        let m = metrics(&a).unwrap();
        write_results(dir.path(), &a, &m).unwrap();
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
        for key in ["faa", "caa", "ffm", "per_task_aa"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        let single = metrics(&AccuracyMatrix::from_fractions(&[vec![1.0]]).unwrap()).unwrap();
        assert!(metrics_json(&single).contains("\"ffm\": null"));
        assert!(AccuracyMatrix::new().push_step(vec![(1, 2), (1, 2)]).is_err());
    }

    struct Perfect;
    impl ContinualLearner for Perfect {
        fn learn_task(&mut self, _: usize, _: &Task) -> Result<()> {
            Ok(())
        }
        fn count_correct(&mut self, _: usize, task: &Task) -> Result<u64> {
            Ok(task.test.len() as u64)
        }
    }

    #[test]
    fn perfect_learner_scores_one_everywhere() {
        let ds = synth_dataset(&small_spec(0.1)).unwrap();
        for tasks in [1, 3] {
            let s = make_stream(&ds, Setting::Cil, tasks, 0).unwrap();
            let mut calls = 0;
            let a = accuracy_matrix(&mut Perfect, &s, |_, _| {
                calls += 1;
                Ok(())
            })
            .unwrap();
            assert_eq!(calls, tasks);
            assert_eq!(a.tasks(), tasks);
            for t in 0..tasks {
                for i in 0..=t {
                    assert_eq!(a.get(i, t), Some(1.0));
                }
            }
        }
    }

    fn lower_triangle(t: usize) -> impl proptest::strategy::Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(0u32..=20, t), t)
            .prop_map(|g| (0..g.len()).map(|t| (0..=t).map(|i| f64::from(g[t][i]) / 20.0).collect()).collect())
    }

    use proptest::strategy::Strategy;

    proptest! {
        #[test]
        fn forgetting_bounds_mean_drop_from_diagonal(rows in (2usize..6).prop_flat_map(lower_triangle)) {
            let a = AccuracyMatrix::from_fractions(&rows).unwrap();
            let m = metrics(&a).unwrap();
            let n = rows.len();
            let mean_drop = (0..n - 1).map(|i| rows[i][i] - rows[n - 1][i]).sum::<f64>() / (n - 1) as f64;
            prop_assert!(m.ffm.unwrap() >= mean_drop - 1e-12);
            if (0..n - 1).all(|i| (i..n - 1).all(|t| rows[t][i] >= rows[n - 1][i])) {
                prop_assert!(m.ffm.unwrap() >= -1e-12);
            }
        }

        #[test]
        fn final_average_ignores_task_order(rows in (1usize..6).prop_flat_map(lower_triangle), shift in 0usize..6) {
            let a = metrics(&AccuracyMatrix::from_fractions(&rows).unwrap()).unwrap();
            let mut permuted = rows.clone();
            let last = permuted.len() - 1;
            permuted[last].rotate_left(shift % (last + 1));
            let b = metrics(&AccuracyMatrix::from_fractions(&permuted).unwrap()).unwrap();
            prop_assert!((a.faa - b.faa).abs() < 1e-12);
            prop_assert_eq!(a.per_task_aa.len(), b.per_task_aa.len());
        }
    }
}
