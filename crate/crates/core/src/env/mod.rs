//! The static image world: datasets, agent poses, motion and observation.

pub mod idx;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

pub use idx::{DataError, IdxError};

/// Grayscale square image with intensities in `[0, 1]` and its category.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    side: usize,
    pixels: Vec<f32>,
    pub label: usize,
}

impl LabeledImage {
    pub fn new(side: usize, pixels: Vec<f32>, label: usize) -> Result<Self, DataError> {
        if pixels.len() != side * side {
            return Err(DataError::Invalid(format!(
                "image of side {side} needs {} pixels, got {}",
                side * side,
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(DataError::Invalid(format!(
                "pixel intensity {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            side,
            pixels,
            label,
        })
    }

    pub fn constant(side: usize, value: f32, label: usize) -> Self {
        Self::new(side, vec![value; side * side], label).expect("constant image is valid")
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixel(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.side + col]
    }
}

/// An in-memory labeled image collection of uniform side length.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<LabeledImage>,
}

impl Dataset {
    pub fn new(images: Vec<LabeledImage>) -> Result<Self, DataError> {
        if let Some(first) = images.first() {
            if images.iter().any(|im| im.side != first.side) {
                return Err(DataError::Invalid("images have mixed sizes".into()));
            }
        }
        Ok(Self { images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn side(&self) -> Option<usize> {
        self.images.first().map(LabeledImage::side)
    }

    /// First `count` images (all of them if fewer exist).
    pub fn truncated(&self, count: usize) -> Self {
        Self {
            images: self.images.iter().take(count).cloned().collect(),
        }
    }

    pub fn max_label(&self) -> Option<usize> {
        self.images.iter().map(|im| im.label).max()
    }

    /// Decode IDX image and label buffers; bytes are scaled by `1 / 255`.
    pub fn from_idx_bytes(images: &[u8], labels: &[u8]) -> Result<Self, IdxError> {
        let stack = idx::parse_images(images)?;
        let labels = idx::parse_labels(labels)?;
        if stack.count != labels.len() {
            return Err(IdxError::CountMismatch {
                offset: 4,
                images: stack.count,
                labels: labels.len(),
            });
        }
        if stack.rows != stack.cols {
            // non-square stacks are not meaningful for square frames
            return Err(IdxError::Overflow { offset: 8 });
        }
        let images = labels
            .iter()
            .enumerate()
            .map(|(k, &label)| LabeledImage {
                side: stack.rows,
                pixels: stack
                    .image(k)
                    .iter()
                    .map(|&b| f32::from(b) / 255.0)
                    .collect(),
                label: usize::from(label),
            })
            .collect();
        Ok(Self { images })
    }
}

/// Load an IDX image file and its matching label file.
pub fn load_idx_dataset(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let image_bytes = idx::read_file(images_path)?;
    let label_bytes = idx::read_file(labels_path)?;
    // Attribute the failure to whichever file is at fault.
    idx::parse_images(&image_bytes).map_err(|source| DataError::Parse {
        path: images_path.to_path_buf(),
        source,
    })?;
    Dataset::from_idx_bytes(&image_bytes, &label_bytes).map_err(|source| DataError::Parse {
        path: labels_path.to_path_buf(),
        source,
    })
}

/// Image side `n_I`, frame size `f` and motion step `f_m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub image_side: usize,
    pub frame: usize,
    pub step: usize,
}

impl Geometry {
    pub fn new(image_side: usize, frame: usize, step: usize) -> Result<Self, String> {
        if frame == 0 || frame > image_side {
            return Err(format!("frame size {frame} must be in 1..={image_side}"));
        }
        if step == 0 {
            return Err("motion step must be positive".into());
        }
        Ok(Self {
            image_side,
            frame,
            step,
        })
    }

    /// Largest feasible row/column of a pose.
    pub fn max_coord(&self) -> usize {
        self.image_side - self.frame
    }

    pub fn contains(&self, pose: Pose) -> bool {
        pose.row <= self.max_coord() && pose.col <= self.max_coord()
    }
}

/// Top-left pixel of an agent's observation window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pose {
    pub row: usize,
    pub col: usize,
}

impl Pose {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.row, self.col)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn name(self) -> &'static str {
        match self {
            Action::Up => "up",
            Action::Down => "down",
            Action::Left => "left",
            Action::Right => "right",
        }
    }
}

impl FromStr for Action {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Action::ALL
            .into_iter()
            .find(|a| a.name() == s.trim())
            .ok_or_else(|| format!("unknown action {s:?}"))
    }
}

/// Ordered set of available actions; the policy emits one probability per entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionSet {
    actions: Vec<Action>,
}

impl Default for ActionSet {
    fn default() -> Self {
        Self {
            actions: Action::ALL.to_vec(),
        }
    }
}

impl ActionSet {
    pub fn new(actions: Vec<Action>) -> Result<Self, String> {
        if actions.is_empty() {
            return Err("action set must not be empty".into());
        }
        for (k, a) in actions.iter().enumerate() {
            if actions[..k].contains(a) {
                return Err(format!("duplicate action {}", a.name()));
            }
        }
        Ok(Self { actions })
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn get(&self, index: usize) -> Action {
        self.actions[index]
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }
}

impl FromStr for ActionSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let actions = s
            .split(',')
            .map(str::parse)
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(actions)
    }
}

impl fmt::Display for ActionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.actions.iter().map(|a| a.name()).collect();
        write!(f, "{}", names.join(","))
    }
}

/// Move `step` pixels in the action's direction; infeasible moves leave the pose unchanged.
pub fn transition(pose: Pose, action: Action, geometry: &Geometry) -> Pose {
    let step = geometry.step;
    let max = geometry.max_coord();
    let moved = match action {
        Action::Up => pose.row.checked_sub(step).map(|r| Pose::new(r, pose.col)),
        Action::Down => Some(Pose::new(pose.row + step, pose.col)).filter(|p| p.row <= max),
        Action::Left => pose.col.checked_sub(step).map(|c| Pose::new(pose.row, c)),
        Action::Right => Some(Pose::new(pose.row, pose.col + step)).filter(|p| p.col <= max),
    };
    moved.unwrap_or(pose)
}

/// The `frame x frame` crop whose top-left corner is `pose`, row-major.
pub fn observe(image: &LabeledImage, pose: Pose, frame: usize) -> Vec<f32> {
    debug_assert!(pose.row + frame <= image.side && pose.col + frame <= image.side);
    let mut out = Vec::with_capacity(frame * frame);
    for r in pose.row..pose.row + frame {
        let start = r * image.side + pose.col;
        out.extend_from_slice(&image.pixels[start..start + frame]);
    }
    out
}

/// Agents evenly spaced along the diagonal of the feasible pose square;
/// a single agent sits at its center.
pub fn initial_poses(n: usize, geometry: &Geometry) -> Vec<Pose> {
    let max = geometry.max_coord();
    match n {
        0 => Vec::new(),
        1 => vec![Pose::new(max / 2, max / 2)],
        _ => (0..n)
            .map(|k| {
                let c = (k * max + (n - 1) / 2) / (n - 1);
                Pose::new(c, c)
            })
            .collect(),
    }
}

/// How agents are placed at `t = 0`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Placement {
    Diagonal,
    Explicit(Vec<Pose>),
}

impl Placement {
    pub fn poses(&self, n: usize, geometry: &Geometry) -> Result<Vec<Pose>, String> {
        match self {
            Placement::Diagonal => Ok(initial_poses(n, geometry)),
            Placement::Explicit(poses) => {
                if poses.len() != n {
                    return Err(format!(
                        "{} explicit initial poses given for {n} agents",
                        poses.len()
                    ));
                }
                if let Some(p) = poses.iter().find(|p| !geometry.contains(**p)) {
                    return Err(format!(
                        "initial pose ({p}) leaves the image for frame {}",
                        geometry.frame
                    ));
                }
                Ok(poses.clone())
            }
        }
    }
}

impl FromStr for Placement {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "diagonal" {
            return Ok(Placement::Diagonal);
        }
        let poses = s
            .split(';')
            .map(str::trim)
            .filter(|x| !x.is_empty())
            .map(|item| {
                let (r, c) = item
                    .split_once(',')
                    .ok_or_else(|| format!("pose {item:?} must be r,c"))?;
                let parse = |x: &str| {
                    x.trim()
                        .parse::<usize>()
                        .map_err(|_| format!("bad coordinate in {item:?}"))
                };
                Ok(Pose::new(parse(r)?, parse(c)?))
            })
            .collect::<Result<Vec<_>, String>>()?;
        if poses.is_empty() {
            return Err("empty initial pose list".into());
        }
        Ok(Placement::Explicit(poses))
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Placement::Diagonal => write!(f, "diagonal"),
            Placement::Explicit(poses) => {
                let items: Vec<String> = poses.iter().map(Pose::to_string).collect();
                write!(f, "{}", items.join(";"))
            }
        }
    }
}
