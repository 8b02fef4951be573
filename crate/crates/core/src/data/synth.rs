use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::templates::{render_template, timestamp_target, TemplateFields};
use super::{split_of, FeatureSource, Task, TrainExample};
use crate::error::invalid;
use crate::features::{class_basis, EventSpec, FrameFeatureSet, SyntheticVideoSpec};
use crate::{Exec, Result, Segment};

pub const CLASS_PHRASES: [&str; 10] = [
    "a person opens a door",
    "someone pours water into a cup",
    "a dog runs across the room",
    "a person sits down on a chair",
    "someone turns on the light",
    "a person washes the dishes",
    "a car drives past the window",
    "someone reads a book",
    "a person throws a ball",
    "someone closes the laptop",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskMix {
    pub tg: f64,
    pub dvc: f64,
    pub vqa: f64,
}

impl Default for TaskMix {
    fn default() -> Self {
        TaskMix {
            tg: 1.0,
            dvc: 1.0,
            vqa: 1.0,
        }
    }
}

impl TaskMix {
    pub fn only(task: Task) -> Self {
        let mut m = TaskMix {
            tg: 0.0,
            dvc: 0.0,
            vqa: 0.0,
        };
        match task {
            Task::Tg => m.tg = 1.0,
            Task::Dvc => m.dvc = 1.0,
            Task::Vqa => m.vqa = 1.0,
        }
        m
    }

    fn pick(&self, rng: &mut impl Rng) -> Result<Task> {
        let total = self.tg + self.dvc + self.vqa;
        if !(total > 0.0) || self.tg < 0.0 || self.dvc < 0.0 || self.vqa < 0.0 {
            return Err(invalid!("task mix weights must be non-negative with a positive sum"));
        }
        let x = rng.random::<f64>() * total;
        Ok(if x < self.tg {
            Task::Tg
        } else if x < self.tg + self.dvc {
            Task::Dvc
        } else {
            Task::Vqa
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_frames: usize,
    pub grid: (usize, usize),
    pub feat_dim: usize,
    pub min_events: usize,
    pub max_events: usize,
    /// Event length range in frames, inclusive.
    pub min_len: usize,
    pub max_len: usize,
    pub noise_sigma: f32,
    pub n_classes: usize,
    /// Video duration range in seconds.
    pub duration: (f64, f64),
    pub mix: TaskMix,
    /// Fixed event count for captioning examples.
    pub dvc_events: Option<usize>,
    /// Grounding targets spell out frame indices instead of `<LOC>`.
    pub timestamp_targets: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_frames: 100,
            grid: (8, 8),
            feat_dim: 64,
            min_events: 1,
            max_events: 3,
            min_len: 8,
            max_len: 24,
            noise_sigma: 0.1,
            n_classes: 10,
            duration: (30.0, 150.0),
            mix: TaskMix::default(),
            dvc_events: None,
            timestamp_targets: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_events < 1 || self.max_events < self.min_events {
            return Err(invalid!("event count range {}..={} is empty", self.min_events, self.max_events));
        }
        if self.min_len < 1 || self.max_len < self.min_len {
            return Err(invalid!("event length range {}..={} is empty", self.min_len, self.max_len));
        }
        if self.n_classes > CLASS_PHRASES.len() || self.n_classes < 4 {
            return Err(invalid!("n_classes must lie in 4..={}", CLASS_PHRASES.len()));
        }
        if self.n_classes + 3 >= self.feat_dim {
            return Err(invalid!("feat_dim {} too small for {} classes", self.feat_dim, self.n_classes));
        }
        let most = self.dvc_events.unwrap_or(self.max_events).max(self.max_events);
        if most * (self.min_len + 1) > self.n_frames {
            return Err(invalid!("{} frames cannot hold {} events", self.n_frames, most));
        }
        Ok(())
    }
}

/// Places `k` disjoint events with at least one background frame between
/// neighbours. Returns inclusive `[start, end]` frame pairs in time order.
fn place_events(rng: &mut impl Rng, cfg: &SynthConfig, k: usize) -> Vec<(usize, usize)> {
    let n = cfg.n_frames;
    let mut lens: Vec<usize> = (0..k).map(|_| rng.random_range(cfg.min_len..=cfg.max_len)).collect();
    while lens.iter().sum::<usize>() + k - 1 > n {
        let i = (0..k).max_by_key(|&i| lens[i]).expect("k >= 1");
        lens[i] -= 1;
    }
    let free = n - lens.iter().sum::<usize>() - (k - 1);
    let mut cuts: Vec<usize> = (0..k).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(k);
    let mut cursor = 0;
    let mut prev_cut = 0;
    for (i, &len) in lens.iter().enumerate() {
        let gap = cuts[i] - prev_cut;
        prev_cut = cuts[i];
        let start = cursor + gap;
        out.push((start, start + len - 1));
        cursor = start + len + 1;
    }
    out
}

fn one_example(cfg: &SynthConfig, dataset_seed: u64, index: usize, seed: u64) -> Result<TrainExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let task = cfg.mix.pick(&mut rng)?;
    let k = match (task, cfg.dvc_events) {
        (Task::Dvc, Some(k)) => k,
        _ => rng.random_range(cfg.min_events..=cfg.max_events),
    };
    let spans = place_events(&mut rng, cfg, k);
    let mut classes: Vec<usize> = (0..cfg.n_classes).collect();
    classes.shuffle(&mut rng);
    let classes = &classes[..k];
    let background_class = cfg.n_classes + rng.random_range(0..3usize);
    let events: Vec<EventSpec> = spans
        .iter()
        .zip(classes)
        .map(|(&(s, e), &c)| EventSpec {
            segment: Segment::new(s as f64, e as f64),
            class_id: c,
        })
        .collect();
    let spec = SyntheticVideoSpec {
        n_frames: cfg.n_frames,
        grid: cfg.grid,
        feat_dim: cfg.feat_dim,
        events: events.clone(),
        background_class,
        noise_sigma: cfg.noise_sigma,
        seed: rng.random(),
    };
    let duration = rng.random_range(cfg.duration.0..=cfg.duration.1);
    let id = format!("s{dataset_seed}-{index:06}");
    let (prompt, target, gt, gt_classes, answer) = match task {
        Task::Tg => {
            let ev = *events.choose(&mut rng).expect("k >= 1");
            let fields = TemplateFields::Grounding {
                query: CLASS_PHRASES[ev.class_id].to_string(),
            };
            let (p, mut t) = render_template(Task::Tg, &fields, &mut rng)?;
            if cfg.timestamp_targets {
                t = timestamp_target(ev.segment.start as usize, ev.segment.end as usize);
            }
            (p, t, vec![ev.segment], vec![ev.class_id], None)
        }
        Task::Dvc => {
            let fields = TemplateFields::Captioning {
                phrases: events.iter().map(|e| CLASS_PHRASES[e.class_id].to_string()).collect(),
            };
            let (p, t) = render_template(Task::Dvc, &fields, &mut rng)?;
            let gt = events.iter().map(|e| e.segment).collect();
            (p, t, gt, events.iter().map(|e| e.class_id).collect(), None)
        }
        Task::Vqa => {
            let ev = *events.choose(&mut rng).expect("k >= 1");
            let mut absent: Vec<usize> = (0..cfg.n_classes).filter(|c| !classes.contains(c)).collect();
            absent.shuffle(&mut rng);
            let mut opts: Vec<usize> = absent.into_iter().take(3).collect();
            opts.push(ev.class_id);
            opts.shuffle(&mut rng);
            let answer = opts.iter().position(|&c| c == ev.class_id).expect("present");
            let options: Vec<String> = opts.iter().map(|&c| CLASS_PHRASES[c].to_string()).collect();
            let fields = TemplateFields::Choice {
                options: options.clone(),
                answer,
            };
            let (p, t) = render_template(Task::Vqa, &fields, &mut rng)?;
            (p, t, vec![ev.segment], vec![ev.class_id], Some(options[answer].clone()))
        }
    };
    let ex = TrainExample {
        split: split_of(&id),
        id,
        task,
        features: FeatureSource::Synthetic { spec },
        prompt,
        target,
        gt_segments: gt,
        answer,
        duration,
        gt_classes,
        clip_labels: Vec::new(),
    };
    ex.validate()?;
    Ok(ex)
}

/// `size` synthetic examples, a pure function of `(cfg, seed)`.
pub fn synth_dataset(size: usize, cfg: &SynthConfig, seed: u64, exec: Exec) -> Result<Vec<TrainExample>> {
    cfg.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<(usize, u64)> = (0..size).map(|i| (i, master.random())).collect();
    exec.try_map(&seeds, |&(i, s)| one_example(cfg, seed, i, s))
}

/// Grounds a class by correlating every patch with the class signature:
/// frames whose best patch projects above one half of the signature
/// magnitude are foreground, and the longest foreground run is returned.
pub fn correlation_oracle(f: &FrameFeatureSet, class_id: usize) -> Option<Segment> {
    let basis = class_basis(f.feat_dim());
    let sig = basis.row(class_id);
    let fg: Vec<bool> = (0..f.n())
        .map(|i| {
            f.patches
                .index_axis(ndarray::Axis(0), i)
                .outer_iter()
                .map(|p| p.dot(&sig))
                .fold(f32::NEG_INFINITY, f32::max)
                > 0.5
        })
        .collect();
    let mut best: Option<(usize, usize)> = None;
    let mut i = 0;
    while i < fg.len() {
        if !fg[i] {
            i += 1;
            continue;
        }
        let s = i;
        while i < fg.len() && fg[i] {
            i += 1;
        }
        if best.is_none_or(|(bs, be)| i - s > be - bs + 1) {
            best = Some((s, i - 1));
        }
    }
    best.map(|(s, e)| Segment::new(s as f64, e as f64))
}
