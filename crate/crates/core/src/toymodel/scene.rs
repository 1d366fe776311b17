//! Scenes, their JSONL form, and rendering to pixels.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ObjectClass, ToyModel, NUM_CLASSES};
use crate::numerics::Tensor;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionType {
    Exist,
    Describe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    #[serde(rename = "type")]
    pub kind: QuestionType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<ObjectClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Answer>,
}

impl Question {
    pub fn describe() -> Self {
        Self {
            kind: QuestionType::Describe,
            object: None,
            label: None,
        }
    }

    pub fn exist(object: ObjectClass, label: Answer) -> Self {
        Self {
            kind: QuestionType::Exist,
            object: Some(object),
            label: Some(label),
        }
    }
}

/// Objects placed on grid cells. A scene with no objects is a noise scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub objects: Vec<ObjectClass>,
    pub layout: BTreeMap<ObjectClass, (usize, usize)>,
    #[serde(default)]
    pub questions: Vec<Question>,
}

impl Scene {
    pub fn is_noise(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn contains(&self, o: ObjectClass) -> bool {
        self.objects.contains(&o)
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<(), ModelError> {
        let fail = |reason: String| ModelError::InvalidScene {
            id: self.id.clone(),
            reason,
        };
        let (gr, gc) = config.grid();
        let mut seen = Vec::new();
        for o in &self.objects {
            if seen.contains(o) {
                return Err(fail(format!("{o} listed twice")));
            }
            seen.push(*o);
            if !self.layout.contains_key(o) {
                return Err(fail(format!("placement missing for {o}")));
            }
        }
        let mut cells = Vec::new();
        for (o, &(r, c)) in &self.layout {
            if !self.objects.contains(o) {
                return Err(fail(format!("{o} placed but not listed")));
            }
            if r >= gr || c >= gc {
                return Err(fail(format!("{o} at ({r}, {c}) is outside the {gr}x{gc} grid")));
            }
            if cells.contains(&(r, c)) {
                return Err(fail(format!("cell ({r}, {c}) holds two objects")));
            }
            cells.push((r, c));
        }
        Ok(())
    }
}

pub fn read_scenes<R: BufRead>(reader: R, config: &ModelConfig) -> Result<Vec<Scene>, ModelError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let scene: Scene = serde_json::from_str(&line).map_err(|e| ModelError::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        scene.validate(config).map_err(|e| ModelError::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(scene);
    }
    Ok(out)
}

pub fn write_scenes<W: Write>(scenes: &[Scene], mut w: W) -> Result<(), ModelError> {
    for s in scenes {
        let line = serde_json::to_string(s).map_err(|e| ModelError::InvalidScene {
            id: s.id.clone(),
            reason: e.to_string(),
        })?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseDist {
    /// Independent uniform pixels on `[0, 1]`.
    #[default]
    Uniform,
    /// Independent `N(0.5, 0.25^2)` pixels, clipped to `[0, 1]`.
    Gaussian,
}

impl std::str::FromStr for NoiseDist {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "gaussian" => Ok(Self::Gaussian),
            _ => Err(format!("unknown noise distribution {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Rendered { scene_id: String },
    Noise { seed: u64 },
    Perturbed(Box<Provenance>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub pixels: Tensor,
    pub provenance: Provenance,
}

impl Image {
    /// The same image moved by `delta` and clipped to `[0, 1]`.
    pub fn perturbed(&self, delta: &Tensor) -> Result<Image, ModelError> {
        let pixels = self.pixels.add(delta)?.clamp(0.0, 1.0);
        Ok(Image {
            pixels,
            provenance: Provenance::Perturbed(Box::new(self.provenance.clone())),
        })
    }
}

pub fn noise_image(config: &ModelConfig, seed: u64, dist: NoiseDist) -> Image {
    let mut rng = seed::rng(seed);
    let n = config.height * config.width * config.channels;
    let data: Vec<f64> = match dist {
        NoiseDist::Uniform => (0..n).map(|_| rng.random::<f64>()).collect(),
        NoiseDist::Gaussian => {
            let normal = Normal::<f64>::new(0.5, 0.25).expect("valid normal");
            (0..n).map(|_| normal.sample(&mut rng).clamp(0.0, 1.0)).collect()
        }
    };
    Image {
        pixels: Tensor::new(vec![config.height, config.width, config.channels], data)
            .expect("noise pixels are finite"),
        provenance: Provenance::Noise { seed },
    }
}

/// Draws the scene's pixels. Background cells carry faint random texture
/// seeded per cell; object cells carry the class pattern plus objectness.
pub fn render(model: &ToyModel, scene: &Scene, seed: u64) -> Result<Image, ModelError> {
    let cfg = model.config();
    scene.validate(cfg)?;
    if scene.is_noise() {
        return Ok(noise_image(cfg, seed, NoiseDist::Uniform));
    }
    let (gr, gc) = cfg.grid();
    let mut px = vec![0.0; cfg.height * cfg.width * cfg.channels];
    let plen = cfg.patch_len();
    let mut cell = vec![0.0; plen];
    for r in 0..gr {
        for c in 0..gc {
            cell.iter_mut().for_each(|v| *v = 0.5);
            let placed = scene.layout.iter().find(|(_, &pos)| pos == (r, c)).map(|(o, _)| *o);
            match placed {
                Some(o) => {
                    for (k, v) in cell.iter_mut().enumerate() {
                        *v += cfg.object_amplitude * model.object_patterns[o.index()][k]
                            + cfg.objectness_amplitude * model.objectness_pattern[k];
                    }
                }
                None => {
                    let mut rng = seed::rng(seed::derive(&[seed, r as u64, c as u64]));
                    let j = cfg.background_jitter;
                    for pat in &model.background_patterns {
                        let xi = if j > 0.0 { rng.random_range(-j..j) } else { 0.0 };
                        for (v, p) in cell.iter_mut().zip(pat) {
                            *v += xi * p;
                        }
                    }
                }
            }
            for py in 0..cfg.patch {
                for pxx in 0..cfg.patch {
                    for ch in 0..cfg.channels {
                        let y = r * cfg.patch + py;
                        let x = c * cfg.patch + pxx;
                        px[(y * cfg.width + x) * cfg.channels + ch] =
                            cell[(py * cfg.patch + pxx) * cfg.channels + ch].clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Ok(Image {
        pixels: Tensor::new(model.image_shape(), px)?,
        provenance: Provenance::Rendered {
            scene_id: scene.id.clone(),
        },
    })
}

/// Co-occurrence groups used when sampling scenes.
const GROUPS: [&[usize]; 3] = [&[0, 1, 8, 12, 15], &[2, 3, 6, 7, 13, 14], &[4, 5, 9, 10, 11]];

/// Prior weight of each class as the first object of a scene.
const CLASS_WEIGHTS: [u32; NUM_CLASSES] = [10, 6, 6, 4, 3, 3, 2, 2, 2, 2, 1, 1, 2, 1, 1, 1];

fn group_of(o: usize) -> &'static [usize] {
    GROUPS.iter().find(|g| g.contains(&o)).copied().unwrap_or(&[])
}

/// Samples `n` scenes with one to `max_objects` objects. Classes follow a
/// skewed prior and tend to co-occur within their group. Each scene carries a
/// describe question and an existence pair (one present, one absent object).
pub fn sample_scenes(
    config: &ModelConfig,
    n: usize,
    max_objects: usize,
    seed: u64,
) -> Result<Vec<Scene>, ModelError> {
    let (gr, gc) = config.grid();
    let max_objects = max_objects.clamp(1, (gr * gc).min(NUM_CLASSES - 1));
    let prior = WeightedIndex::new(CLASS_WEIGHTS).expect("positive weights");
    let mut cells: Vec<(usize, usize)> =
        (0..gr).flat_map(|r| (0..gc).map(move |c| (r, c))).collect();
    let mut scenes = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = seed::rng(seed::derive(&[seed, i as u64]));
        let k = rng.random_range(1..=max_objects);
        let first = prior.sample(&mut rng);
        let mut objs = vec![first];
        while objs.len() < k {
            let cand = if rng.random_bool(0.7) {
                let g = group_of(first);
                g[rng.random_range(0..g.len())]
            } else {
                prior.sample(&mut rng)
            };
            if !objs.contains(&cand) {
                objs.push(cand);
            } else if group_of(first).iter().all(|o| objs.contains(o)) {
                let free: Vec<usize> = (0..NUM_CLASSES).filter(|o| !objs.contains(o)).collect();
                objs.push(free[rng.random_range(0..free.len())]);
            }
        }
        cells.shuffle(&mut rng);
        let objects: Vec<ObjectClass> =
            objs.iter().map(|&o| ObjectClass::new(o).expect("index in range")).collect();
        let layout = objects.iter().copied().zip(cells.iter().copied()).collect();
        let present = objects[rng.random_range(0..objects.len())];
        let absent: Vec<ObjectClass> = ObjectClass::all().filter(|o| !objects.contains(o)).collect();
        let absent = absent[rng.random_range(0..absent.len())];
        scenes.push(Scene {
            id: format!("scene-{i:05}"),
            objects,
            layout,
            questions: vec![
                Question::describe(),
                Question::exist(present, Answer::Yes),
                Question::exist(absent, Answer::No),
            ],
        });
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn car() -> ObjectClass {
        "car".parse().unwrap()
    }

    #[test]
    fn json_shape() {
        let s = Scene {
            id: "s1".into(),
            objects: vec![car()],
            layout: [(car(), (1, 2))].into_iter().collect(),
            questions: vec![Question::exist(car(), Answer::Yes), Question::describe()],
        };
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(
            j,
            r#"{"id":"s1","objects":["car"],"layout":{"car":[1,2]},"questions":[{"type":"exist","object":"car","label":"yes"},{"type":"describe"}]}"#
        );
        let back: Scene = serde_json::from_str(&j).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn missing_placement_rejected() {
        let line = r#"{"id":"s1","objects":["car","dog"],"layout":{"car":[0,0]}}"#;
        let err = read_scenes(line.as_bytes(), &ModelConfig::default()).unwrap_err();
        assert!(err.to_string().contains("placement missing"), "{err}");
    }

    #[test]
    fn render_is_deterministic_and_in_range() {
        let m = ToyModel::clean();
        let s = &sample_scenes(m.config(), 1, 3, 7).unwrap()[0];
        let a = render(&m, s, 11).unwrap();
        let b = render(&m, s, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.pixels.shape(), &[32, 32, 3]);
    }

    #[test]
    fn empty_scene_renders_noise() {
        let m = ToyModel::clean();
        let s = Scene {
            id: "n".into(),
            objects: vec![],
            layout: BTreeMap::new(),
            questions: vec![],
        };
        let img = render(&m, &s, 3).unwrap();
        assert_eq!(img.provenance, Provenance::Noise { seed: 3 });
    }

    #[test]
    fn sampled_scenes_are_valid() {
        let cfg = ModelConfig::default();
        for s in sample_scenes(&cfg, 200, 3, 1).unwrap() {
            s.validate(&cfg).unwrap();
            assert!((1..=3).contains(&s.objects.len()));
        }
    }
}
