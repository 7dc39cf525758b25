//! Deterministic grid-city simulator and synthetic dataset generator.
//!
//! World coordinates are meters: `x` grows east, `y` grows north, `z` is
//! altitude. The environment is also a grid of square cells; cell `(row, col)`
//! covers `x ∈ [col·s, (col+1)·s)` and `y ∈ [row·s, (row+1)·s)` for cell size `s`.

use std::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Rect, TargetMask};

/// Horizontal distance covered by one `MoveForward`.
pub const MOVE_STEP_M: f64 = 5.0;
/// Altitude change of one `Ascend` / `Descend`.
pub const CLIMB_STEP_M: f64 = 2.0;
pub const MAX_EPISODE_STEPS: usize = 200;
pub const SUCCESS_THRESHOLD_M: f64 = 20.0;
pub const DEFAULT_CELL_SIZE_M: f64 = 10.0;
pub const START_ALTITUDE_M: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Heading {
    N,
    E,
    S,
    W,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::N, Heading::E, Heading::S, Heading::W];

    pub fn turn_left(self) -> Self {
        match self {
            Heading::N => Heading::W,
            Heading::W => Heading::S,
            Heading::S => Heading::E,
            Heading::E => Heading::N,
        }
    }

    pub fn turn_right(self) -> Self {
        match self {
            Heading::N => Heading::E,
            Heading::E => Heading::S,
            Heading::S => Heading::W,
            Heading::W => Heading::N,
        }
    }

    /// Unit vector `(dx, dy)` of the heading.
    pub fn unit(self) -> (f64, f64) {
        match self {
            Heading::N => (0.0, 1.0),
            Heading::E => (1.0, 0.0),
            Heading::S => (0.0, -1.0),
            Heading::W => (-1.0, 0.0),
        }
    }

    /// Nonzero code used in the semantic map's pose channel.
    pub fn code(self) -> u8 {
        match self {
            Heading::N => 1,
            Heading::E => 2,
            Heading::S => 3,
            Heading::W => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub heading: Heading,
}

impl Pose {
    pub fn new(x: f64, y: f64, z: f64, heading: Heading) -> Self {
        Self { x, y, z, heading }
    }

    pub fn horizontal_distance(&self, target: [f64; 2]) -> f64 {
        horizontal_distance([self.x, self.y], target)
    }
}

pub fn horizontal_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Discrete UAV actions, listed in the planner's tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    MoveForward,
    TurnLeft,
    TurnRight,
    Ascend,
    Descend,
    Stop,
}

impl Action {
    pub const ALL: [Action; 6] = [
        Action::MoveForward,
        Action::TurnLeft,
        Action::TurnRight,
        Action::Ascend,
        Action::Descend,
        Action::Stop,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Car,
    Truck,
    Bus,
    Building,
    Tree,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 5] = [
        ObjectClass::Car,
        ObjectClass::Truck,
        ObjectClass::Bus,
        ObjectClass::Building,
        ObjectClass::Tree,
    ];

    pub fn word(self) -> &'static str {
        match self {
            ObjectClass::Car => "car",
            ObjectClass::Truck => "truck",
            ObjectClass::Bus => "bus",
            ObjectClass::Building => "building",
            ObjectClass::Tree => "tree",
        }
    }

    pub fn from_word(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.word() == word)
    }

    /// Footprint `(width, height)` in cells.
    pub fn footprint(self) -> (usize, usize) {
        match self {
            ObjectClass::Car | ObjectClass::Tree => (1, 1),
            ObjectClass::Truck => (2, 1),
            ObjectClass::Bus => (3, 1),
            ObjectClass::Building => (2, 2),
        }
    }

    /// Nonzero code used in the semantic map's class channel.
    pub fn code(self) -> u8 {
        Self::ALL.iter().position(|&c| c == self).unwrap() as u8 + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    White,
    Black,
    Blue,
    Green,
    Gray,
    Yellow,
}

impl Color {
    pub const ALL: [Color; 7] = [
        Color::Red,
        Color::White,
        Color::Black,
        Color::Blue,
        Color::Green,
        Color::Gray,
        Color::Yellow,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::White => "white",
            Color::Black => "black",
            Color::Blue => "blue",
            Color::Green => "green",
            Color::Gray => "gray",
            Color::Yellow => "yellow",
        }
    }

    pub fn from_word(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.word() == word)
    }

    pub fn code(self) -> u8 {
        Self::ALL.iter().position(|&c| c == self).unwrap() as u8 + 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: ObjectClass,
    pub color: Color,
    pub bbox: Rect,
    pub is_target: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub name: String,
    pub region: Rect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    /// East-west extent in meters.
    pub width: f64,
    /// North-south extent in meters.
    pub height: f64,
    pub cell_size: f64,
    pub objects: Vec<SceneObject>,
    pub landmarks: Vec<Landmark>,
    /// Generator knob in `[0, 1]` that shaped this scene.
    pub ambiguity: f64,
}

impl Environment {
    pub fn rows(&self) -> usize {
        (self.height / self.cell_size).round() as usize
    }

    pub fn cols(&self) -> usize {
        (self.width / self.cell_size).round() as usize
    }

    pub fn target_object(&self) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.is_target)
    }

    pub fn landmark(&self, name: &str) -> Option<&Landmark> {
        self.landmarks.iter().find(|l| l.name == name)
    }

    /// Cell containing a horizontal position, clamped to the grid.
    pub fn cell_at(&self, x: f64, y: f64) -> (usize, usize) {
        let col = ((x / self.cell_size).floor().max(0.0) as usize).min(self.cols() - 1);
        let row = ((y / self.cell_size).floor().max(0.0) as usize).min(self.rows() - 1);
        (row, col)
    }

    /// Center of a cell in meters, as `[x, y]`.
    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        [
            (col as f64 + 0.5) * self.cell_size,
            (row as f64 + 0.5) * self.cell_size,
        ]
    }

    pub fn in_bounds(&self, x: f64, y: f64) -> bool {
        (0.0..=self.width).contains(&x) && (0.0..=self.height).contains(&y)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0) || !(self.width > 0.0) || !(self.height > 0.0) {
            return Err(Error::Validation("environment extents must be positive".into()));
        }
        let (rows, cols) = (self.rows(), self.cols());
        if ((rows as f64) * self.cell_size - self.height).abs() > 1e-9
            || ((cols as f64) * self.cell_size - self.width).abs() > 1e-9
        {
            return Err(Error::Validation(
                "environment extents must be whole multiples of the cell size".into(),
            ));
        }
        for o in &self.objects {
            if !o.bbox.fits_in(cols, rows) {
                return Err(Error::Validation(format!("object {:?} out of bounds", o.bbox)));
            }
        }
        for (i, l) in self.landmarks.iter().enumerate() {
            if !l.region.fits_in(cols, rows) {
                return Err(Error::Validation(format!("landmark {} out of bounds", l.name)));
            }
            if self.landmarks[..i].iter().any(|o| o.name == l.name) {
                return Err(Error::Validation(format!("duplicate landmark name {}", l.name)));
            }
        }
        let targets = self.objects.iter().filter(|o| o.is_target).count();
        if targets != 1 {
            return Err(Error::Validation(format!(
                "environment has {targets} target objects, expected exactly 1"
            )));
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return Err(Error::Validation("ambiguity outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// The target description parsed from an instruction's target tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Descriptor {
    pub class: ObjectClass,
    pub color: Option<Color>,
}

impl Descriptor {
    /// Attention match strength: 1 for class and color, 0.5 for class only.
    pub fn match_score(&self, object: &SceneObject) -> f64 {
        if object.class != self.class {
            0.0
        } else if self.color == Some(object.color) {
            1.0
        } else {
            0.5
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub text: String,
    /// Half-open token index range `[start, end)` of the target description.
    pub target_token_span: [usize; 2],
    pub referenced_landmark: String,
}

impl Instruction {
    /// Whitespace tokenization.
    pub fn tokens(&self) -> Vec<&str> {
        self.text.split_whitespace().collect()
    }

    /// Token indices of the span describing the landmark name, if present.
    pub fn landmark_token_span(&self) -> Option<[usize; 2]> {
        let tokens = self.tokens();
        let name: Vec<&str> = self.referenced_landmark.split_whitespace().collect();
        if name.is_empty() || name.len() > tokens.len() {
            return None;
        }
        (0..=tokens.len() - name.len())
            .rev()
            .find(|&s| tokens[s..s + name.len()] == name[..])
            .map(|s| [s, s + name.len()])
    }

    pub fn descriptor(&self) -> Result<Descriptor> {
        let tokens = self.tokens();
        let [start, end] = self.target_token_span;
        if start >= end || end > tokens.len() {
            return Err(Error::Validation(format!(
                "target token span [{start}, {end}) invalid for {} tokens",
                tokens.len()
            )));
        }
        let mut class = None;
        let mut color = None;
        for word in &tokens[start..end] {
            if let Some(c) = ObjectClass::from_word(word) {
                class = Some(c);
            } else if let Some(c) = Color::from_word(word) {
                color = Some(c);
            }
        }
        let class = class.ok_or_else(|| {
            Error::Validation(format!("no object class in target span of {:?}", self.text))
        })?;
        Ok(Descriptor { class, color })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavInstance {
    pub id: u64,
    pub initial_pose: Pose,
    pub instruction: Instruction,
    pub environment: Environment,
    /// Ground-truth target `[x, y]` in meters.
    pub target_position: [f64; 2],
    pub landmark_mask: TargetMask,
}

impl NavInstance {
    pub fn validate(&self) -> Result<()> {
        let env = &self.environment;
        env.validate()?;
        let [tx, ty] = self.target_position;
        if !env.in_bounds(tx, ty) {
            return Err(Error::Validation(format!("instance {}: target out of bounds", self.id)));
        }
        let p = &self.initial_pose;
        if !env.in_bounds(p.x, p.y) || p.z < 0.0 {
            return Err(Error::Validation(format!("instance {}: pose out of bounds", self.id)));
        }
        if self.landmark_mask.shape() != (env.rows(), env.cols()) {
            return Err(Error::Validation(format!(
                "instance {}: landmark mask shape {:?} differs from grid {:?}",
                self.id,
                self.landmark_mask.shape(),
                (env.rows(), env.cols())
            )));
        }
        if env.landmark(&self.instruction.referenced_landmark).is_none() {
            return Err(Error::Validation(format!(
                "instance {}: unknown landmark {:?}",
                self.id, self.instruction.referenced_landmark
            )));
        }
        self.instruction.descriptor()?;
        Ok(())
    }

    pub fn referenced_landmark(&self) -> Result<&Landmark> {
        self.environment
            .landmark(&self.instruction.referenced_landmark)
            .ok_or_else(|| {
                Error::Validation(format!(
                    "instance {}: unknown landmark {:?}",
                    self.id, self.instruction.referenced_landmark
                ))
            })
    }

    pub fn target_object(&self) -> Result<&SceneObject> {
        self.environment
            .target_object()
            .ok_or_else(|| Error::Validation(format!("instance {}: no target object", self.id)))
    }

    /// Binary mask of the target object's footprint.
    pub fn target_mask(&self) -> Result<TargetMask> {
        let env = &self.environment;
        TargetMask::from_rect(env.rows(), env.cols(), &self.target_object()?.bbox)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub pose: Pose,
    pub step_count: usize,
    pub done: bool,
    pub trajectory: Vec<Pose>,
}

pub fn reset(instance: &NavInstance) -> SimState {
    SimState {
        pose: instance.initial_pose,
        step_count: 0,
        done: false,
        trajectory: vec![instance.initial_pose],
    }
}

/// Pose after applying `action` once, ignoring map bounds.
pub fn apply_action_unbounded(pose: Pose, action: Action) -> Pose {
    let mut next = pose;
    match action {
        Action::MoveForward => {
            let (dx, dy) = pose.heading.unit();
            next.x += dx * MOVE_STEP_M;
            next.y += dy * MOVE_STEP_M;
        }
        Action::TurnLeft => next.heading = pose.heading.turn_left(),
        Action::TurnRight => next.heading = pose.heading.turn_right(),
        Action::Ascend => next.z = pose.z + CLIMB_STEP_M,
        Action::Descend => next.z = (pose.z - CLIMB_STEP_M).max(0.0),
        Action::Stop => {}
    }
    next
}

/// Pose after applying `action` once, clamped to the environment bounds.
pub fn apply_action(env: &Environment, pose: Pose, action: Action) -> Pose {
    let mut next = apply_action_unbounded(pose, action);
    next.x = next.x.clamp(0.0, env.width);
    next.y = next.y.clamp(0.0, env.height);
    next
}

pub fn step(env: &Environment, mut state: SimState, action: Action) -> Result<SimState> {
    if state.done {
        return Err(Error::Usage("step called on a finished episode".into()));
    }
    let next = apply_action(env, state.pose, action);
    state.pose = next;
    state.step_count += 1;
    state.trajectory.push(next);
    if action == Action::Stop {
        state.done = true;
    }
    Ok(state)
}

/// Whether the final horizontal position lies within `threshold` meters of
/// the target (boundary inclusive).
pub fn is_success(final_pose: &Pose, target: [f64; 2], threshold: f64) -> bool {
    final_pose.horizontal_distance(target) <= threshold
}

/// Structured map of the scene with the UAV pose encoded.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticGrid {
    /// `ObjectClass::code` of the occupying object, 0 when empty.
    pub classes: Grid<u8>,
    /// `Color::code` of the occupying object, 0 when empty.
    pub colors: Grid<u8>,
    /// Union of all landmark regions.
    pub landmarks: Grid<bool>,
    /// `Heading::code` at the UAV's cell, 0 elsewhere.
    pub pose: Grid<u8>,
}

pub fn render_semantic_map(instance: &NavInstance, state: &SimState) -> SemanticGrid {
    let env = &instance.environment;
    let (rows, cols) = (env.rows(), env.cols());
    let mut classes = Grid::filled(rows, cols, 0u8);
    let mut colors = Grid::filled(rows, cols, 0u8);
    let mut landmarks = Grid::filled(rows, cols, false);
    let mut pose = Grid::filled(rows, cols, 0u8);
    for obj in &env.objects {
        for (r, c) in obj.bbox.cells() {
            classes.set(r, c, obj.class.code());
            colors.set(r, c, obj.color.code());
        }
    }
    for lm in &env.landmarks {
        for (r, c) in lm.region.cells() {
            landmarks.set(r, c, true);
        }
    }
    let (r, c) = env.cell_at(state.pose.x, state.pose.y);
    pose.set(r, c, state.pose.heading.code());
    SemanticGrid {
        classes,
        colors,
        landmarks,
        pose,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_instances: usize,
    /// `(rows, cols)` of the cell grid.
    pub map_cells: (usize, usize),
    pub cell_size: f64,
    /// Inclusive range of distractor objects per scene.
    pub distractor_count_range: (usize, usize),
    /// Inclusive range of landmarks per scene.
    pub landmark_count_range: (usize, usize),
    /// Closed interval ambiguity levels are drawn from uniformly.
    pub ambiguity_level_range: (f64, f64),
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_instances: 500,
            map_cells: (32, 32),
            cell_size: DEFAULT_CELL_SIZE_M,
            distractor_count_range: (4, 16),
            landmark_count_range: (3, 5),
            ambiguity_level_range: (0.0, 1.0),
            seed: 0,
        }
    }
}

const LANDMARK_NAMES: [&str; 12] = [
    "Harbor Tower",
    "Central Plaza",
    "Union Station",
    "City Library",
    "Riverside Park",
    "Grand Hotel",
    "Art Museum",
    "Saint Mary Church",
    "Oak Market",
    "North Stadium",
    "Old Mill",
    "Civic Center",
];

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        let (rows, cols) = self.map_cells;
        if rows < 16 || cols < 16 {
            return err("map_cells must be at least 16x16");
        }
        if !(self.cell_size > 0.0) {
            return err("cell_size must be positive");
        }
        let (dlo, dhi) = self.distractor_count_range;
        if dlo > dhi {
            return err("distractor_count_range is empty");
        }
        let (llo, lhi) = self.landmark_count_range;
        if llo > lhi || llo == 0 {
            return err("landmark_count_range must be non-empty and start at 1 or more");
        }
        if lhi > LANDMARK_NAMES.len() {
            return err("landmark_count_range exceeds the landmark name pool");
        }
        let (alo, ahi) = self.ambiguity_level_range;
        if !(0.0..=1.0).contains(&alo) || !(0.0..=1.0).contains(&ahi) || alo > ahi {
            return err("ambiguity_level_range must be a non-empty sub-interval of [0, 1]");
        }
        Ok(())
    }
}

/// Generates `config.n_instances` scenes with ids `0..n`.
///
/// Each instance draws from its own ChaCha stream (`seed`, id), so datasets are
/// reproducible bit for bit and any prefix is stable under a larger `n`.
pub fn generate_dataset(config: &GenConfig) -> Result<Vec<NavInstance>> {
    config.validate()?;
    (0..config.n_instances as u64)
        .map(|id| {
            let mut rng = instance_rng(config.seed, id);
            let (lo, hi) = config.ambiguity_level_range;
            let ambiguity = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            generate_instance(config, id, ambiguity, &mut rng)
        })
        .collect()
}

pub(crate) fn instance_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Builds one scene at a fixed ambiguity level.
///
/// Ambiguity raises the number of distractors, the share of distractors that
/// match the target's class (and color), how many of them crowd the target or
/// the referenced landmark, the gap between target and landmark, and the
/// chance that the instruction omits the target's color.
pub fn generate_instance(
    config: &GenConfig,
    id: u64,
    ambiguity: f64,
    rng: &mut ChaCha8Rng,
) -> Result<NavInstance> {
    let (rows, cols) = config.map_cells;
    let a = ambiguity.clamp(0.0, 1.0);
    let mut blocked = Grid::filled(rows, cols, false);

    // Landmarks, separated by at least two free cells.
    let mut names = LANDMARK_NAMES.to_vec();
    names.shuffle(rng);
    let n_landmarks = rng.random_range(config.landmark_count_range.0..=config.landmark_count_range.1);
    let mut landmarks: Vec<Landmark> = Vec::with_capacity(n_landmarks);
    for name in names.into_iter().take(n_landmarks) {
        for _ in 0..200 {
            let w = rng.random_range(3..=5);
            let h = rng.random_range(3..=5);
            let x1 = rng.random_range(1..cols - w);
            let y1 = rng.random_range(1..rows - h);
            let region = Rect { x1, y1, x2: x1 + w, y2: y1 + h };
            let padded = region.expanded(2, cols, rows);
            if landmarks.iter().all(|l| !l.region.intersects(&padded)) {
                landmarks.push(Landmark { name: name.to_string(), region });
                break;
            }
        }
    }
    if landmarks.is_empty() {
        return Err(Error::Config("could not place any landmark".into()));
    }
    for lm in &landmarks {
        for (r, c) in lm.region.cells() {
            blocked.set(r, c, true);
        }
    }
    let reference = landmarks[0].region;
    let reference_name = landmarks[0].name.clone();

    // Target, offset from the referenced landmark by a gap that grows with ambiguity.
    let target_class = *ObjectClass::ALL.choose(rng).unwrap();
    let target_color = *Color::ALL.choose(rng).unwrap();
    let (tw, th) = target_class.footprint();
    let max_gap = 1 + (a * 9.0).round() as usize;
    let mut target_box = None;
    for _ in 0..100 {
        let gap = rng.random_range(max_gap.saturating_sub(2).max(1)..=max_gap);
        if let Some(b) = place_beside(&reference, gap, tw, th, cols, rows, rng) {
            if free(&blocked, &b) {
                target_box = Some(b);
                break;
            }
        }
    }
    let target_box = match target_box {
        Some(b) => b,
        None => place_anywhere(&blocked, tw, th, rng).ok_or_else(|| {
            Error::Config(format!("instance {id}: could not place the target"))
        })?,
    };
    block(&mut blocked, &target_box);
    let mut objects = vec![SceneObject {
        class: target_class,
        color: target_color,
        bbox: target_box,
        is_target: true,
    }];

    // Distractors.
    let (dlo, dhi) = config.distractor_count_range;
    let n_distractors = dlo + (a * (dhi - dlo) as f64).round() as usize;
    for _ in 0..n_distractors {
        let same_class = rng.random::<f64>() < a;
        let (class, color) = if same_class {
            let color = if rng.random::<f64>() < a {
                target_color
            } else {
                **Color::ALL.iter().filter(|&&c| c != target_color).collect::<Vec<_>>().choose(rng).unwrap()
            };
            (target_class, color)
        } else {
            let others: Vec<_> = ObjectClass::ALL.iter().filter(|&&c| c != target_class).collect();
            (**others.choose(rng).unwrap(), *Color::ALL.choose(rng).unwrap())
        };
        let (w, h) = class.footprint();
        let anchor = rng.random::<f64>();
        let placed = if same_class && anchor < a / 2.0 {
            place_near(&blocked, &target_box, 5, w, h, rng)
        } else if same_class && anchor < a {
            place_near(&blocked, &reference, 3, w, h, rng)
        } else {
            place_anywhere(&blocked, w, h, rng)
        };
        let Some(bbox) = placed.or_else(|| place_anywhere(&blocked, w, h, rng)) else {
            continue;
        };
        block(&mut blocked, &bbox);
        objects.push(SceneObject { class, color, bbox, is_target: false });
    }

    // Instruction.
    let with_color = rng.random::<f64>() >= a * 0.6;
    let gap_cells = rect_gap(&reference, &target_box);
    let relation: &[&str] = if gap_cells <= 2 {
        &["beside"]
    } else if gap_cells <= 5 {
        &["near"]
    } else {
        &["a", "few", "blocks", "from"]
    };
    let mut tokens: Vec<&str> = vec!["fly", "to", "the"];
    let span_start = tokens.len();
    if with_color {
        tokens.push(target_color.word());
    }
    tokens.push(target_class.word());
    let span_end = tokens.len();
    tokens.extend_from_slice(relation);
    tokens.extend(reference_name.split_whitespace());
    let instruction = Instruction {
        text: tokens.join(" "),
        target_token_span: [span_start, span_end],
        referenced_landmark: reference_name,
    };

    let cell = config.cell_size;
    let (cx, cy) = target_box.center();
    let target_position = [cx * cell, cy * cell];
    let heading = *Heading::ALL.choose(rng).unwrap();
    let start_col = rng.random_range(0..cols);
    let start_row = rng.random_range(0..rows);
    let initial_pose = Pose::new(
        (start_col as f64 + 0.5) * cell,
        (start_row as f64 + 0.5) * cell,
        START_ALTITUDE_M,
        heading,
    );
    let landmark_mask = TargetMask::from_rect(rows, cols, &reference)?;
    let environment = Environment {
        width: cols as f64 * cell,
        height: rows as f64 * cell,
        cell_size: cell,
        objects,
        landmarks,
        ambiguity: a,
    };
    let instance = NavInstance {
        id,
        initial_pose,
        instruction,
        environment,
        target_position,
        landmark_mask,
    };
    instance.validate()?;
    Ok(instance)
}

fn free(blocked: &Grid<bool>, rect: &Rect) -> bool {
    rect.fits_in(blocked.cols(), blocked.rows()) && rect.cells().all(|(r, c)| !*blocked.get(r, c))
}

fn block(blocked: &mut Grid<bool>, rect: &Rect) {
    for (r, c) in rect.cells() {
        blocked.set(r, c, true);
    }
}

/// Chebyshev gap in cells between two rectangles; 1 when they touch.
fn rect_gap(a: &Rect, b: &Rect) -> usize {
    let dx = if b.x1 >= a.x2 {
        b.x1 - a.x2 + 1
    } else if a.x1 >= b.x2 {
        a.x1 - b.x2 + 1
    } else {
        0
    };
    let dy = if b.y1 >= a.y2 {
        b.y1 - a.y2 + 1
    } else if a.y1 >= b.y2 {
        a.y1 - b.y2 + 1
    } else {
        0
    };
    dx.max(dy)
}

/// A `w×h` box on a random side of `anchor`, `gap` cells out (1 = touching).
fn place_beside(
    anchor: &Rect,
    gap: usize,
    w: usize,
    h: usize,
    cols: usize,
    rows: usize,
    rng: &mut ChaCha8Rng,
) -> Option<Rect> {
    let off = gap - 1;
    let (x1, y1) = match rng.random_range(0..4) {
        0 => (anchor.x2 + off, slide(anchor.y1, anchor.y2, h, rng)?),
        1 => (anchor.x1.checked_sub(off + w)?, slide(anchor.y1, anchor.y2, h, rng)?),
        2 => (slide(anchor.x1, anchor.x2, w, rng)?, anchor.y2 + off),
        _ => (slide(anchor.x1, anchor.x2, w, rng)?, anchor.y1.checked_sub(off + h)?),
    };
    let r = Rect { x1, y1, x2: x1 + w, y2: y1 + h };
    r.fits_in(cols, rows).then_some(r)
}

/// Start coordinate for a span of `len` that overlaps `[lo, hi)`.
fn slide(lo: usize, hi: usize, len: usize, rng: &mut ChaCha8Rng) -> Option<usize> {
    let min = (lo + 1).saturating_sub(len);
    let max = hi - 1;
    Some(rng.random_range(min..=max))
}

fn place_near(
    blocked: &Grid<bool>,
    anchor: &Rect,
    radius: usize,
    w: usize,
    h: usize,
    rng: &mut ChaCha8Rng,
) -> Option<Rect> {
    let zone = anchor.expanded(radius, blocked.cols(), blocked.rows());
    for _ in 0..50 {
        if zone.width() < w || zone.height() < h {
            return None;
        }
        let x1 = rng.random_range(zone.x1..=zone.x2 - w);
        let y1 = rng.random_range(zone.y1..=zone.y2 - h);
        let r = Rect { x1, y1, x2: x1 + w, y2: y1 + h };
        if free(blocked, &r) {
            return Some(r);
        }
    }
    None
}

fn place_anywhere(blocked: &Grid<bool>, w: usize, h: usize, rng: &mut ChaCha8Rng) -> Option<Rect> {
    let (rows, cols) = blocked.shape();
    for _ in 0..200 {
        let x1 = rng.random_range(0..=cols - w);
        let y1 = rng.random_range(0..=rows - h);
        let r = Rect { x1, y1, x2: x1 + w, y2: y1 + h };
        if free(blocked, &r) {
            return Some(r);
        }
    }
    None
}

impl fmt::Display for Pose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {:?})", self.x, self.y, self.z, self.heading)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(n: usize, seed: u64) -> GenConfig {
        GenConfig {
            n_instances: n,
            seed,
            ..GenConfig::default()
        }
    }

    fn open_env() -> Environment {
        Environment {
            width: 320.0,
            height: 320.0,
            cell_size: 10.0,
            objects: vec![SceneObject {
                class: ObjectClass::Car,
                color: Color::Red,
                bbox: Rect::new(5, 5, 6, 6).unwrap(),
                is_target: true,
            }],
            landmarks: vec![Landmark {
                name: "Old Mill".into(),
                region: Rect::new(1, 1, 4, 4).unwrap(),
            }],
            ambiguity: 0.0,
        }
    }

    #[test]
    fn move_forward_east() {
        let env = open_env();
        let p = apply_action(&env, Pose::new(0.0, 0.0, 10.0, Heading::E), Action::MoveForward);
        assert_eq!(p, Pose::new(5.0, 0.0, 10.0, Heading::E));
    }

    #[test]
    fn turn_right_from_north() {
        let env = open_env();
        let p = apply_action(&env, Pose::new(3.0, 4.0, 1.0, Heading::N), Action::TurnRight);
        assert_eq!(p.heading, Heading::E);
        assert_eq!((p.x, p.y, p.z), (3.0, 4.0, 1.0));
    }

    #[test]
    fn descend_clamps_at_ground() {
        let env = open_env();
        let p = apply_action(&env, Pose::new(0.0, 0.0, 0.0, Heading::S), Action::Descend);
        assert_eq!(p.z, 0.0);
        let p = apply_action(&env, Pose::new(0.0, 0.0, 1.0, Heading::S), Action::Descend);
        assert_eq!(p.z, 0.0);
    }

    #[test]
    fn forward_clamps_at_border() {
        let env = open_env();
        let p = apply_action(&env, Pose::new(0.0, 318.0, 5.0, Heading::N), Action::MoveForward);
        assert_eq!((p.x, p.y), (0.0, 320.0));
        let p = apply_action(&env, Pose::new(2.0, 0.0, 5.0, Heading::W), Action::MoveForward);
        assert_eq!((p.x, p.y), (0.0, 0.0));
    }

    #[test]
    fn heading_algebra() {
        for h in Heading::ALL {
            assert_eq!(h.turn_left().turn_right(), h);
            assert_eq!(h.turn_left().turn_left().turn_left().turn_left(), h);
            assert_eq!(h.turn_right().turn_left(), h);
        }
    }

    #[test]
    fn success_threshold_examples() {
        let p = Pose::new(0.0, 0.0, 10.0, Heading::N);
        assert!(is_success(&p, [3.0, 4.0], 20.0));
        assert!(is_success(&p, [0.0, 20.0], 20.0));
        // sqrt(15² + 15²) ≈ 21.21
        let d = (15.0f64 * 15.0 * 2.0).sqrt();
        assert!((d - 21.2132).abs() < 1e-4);
        assert!(!is_success(&p, [15.0, 15.0], 20.0));
    }

    #[test]
    fn stepping_done_state_is_usage_error() {
        let inst = &generate_dataset(&small_config(1, 3)).unwrap()[0];
        let s = reset(inst);
        let s = step(&inst.environment, s, Action::Stop).unwrap();
        assert!(s.done);
        assert!(matches!(
            step(&inst.environment, s, Action::MoveForward),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn reset_contract() {
        let inst = &generate_dataset(&small_config(1, 11)).unwrap()[0];
        let a = reset(inst);
        assert_eq!(a.pose, inst.initial_pose);
        assert_eq!(a.trajectory.len(), 1);
        assert_eq!(a.step_count, 0);
        assert!(!a.done);
        assert_eq!(a, reset(inst));
    }

    #[test]
    fn trajectory_accounting_and_stop_holds_position() {
        let inst = &generate_dataset(&small_config(1, 5)).unwrap()[0];
        let env = &inst.environment;
        let mut s = reset(inst);
        let actions = [
            Action::MoveForward,
            Action::TurnLeft,
            Action::Ascend,
            Action::MoveForward,
            Action::Descend,
        ];
        for a in actions {
            s = step(env, s, a).unwrap();
        }
        assert_eq!(s.trajectory.len(), actions.len() + 1);
        assert_eq!(s.step_count, s.trajectory.len() - 1);
        let before = s.pose;
        s = step(env, s, Action::Stop).unwrap();
        assert_eq!(s.pose, before);
        assert!(s.done);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small_config(1, 7)).unwrap();
        let b = generate_dataset(&small_config(1, 7)).unwrap();
        assert_eq!(
            serde_json::to_string(&a[0]).unwrap(),
            serde_json::to_string(&b[0]).unwrap()
        );
    }

    #[test]
    fn prefix_stable_under_larger_n() {
        let a = generate_dataset(&small_config(3, 9)).unwrap();
        let b = generate_dataset(&small_config(10, 9)).unwrap();
        assert_eq!(a[..], b[..3]);
    }

    #[test]
    fn zero_ambiguity_has_no_same_class_distractors() {
        let cfg = GenConfig {
            n_instances: 50,
            ambiguity_level_range: (0.0, 0.0),
            seed: 21,
            ..GenConfig::default()
        };
        for inst in generate_dataset(&cfg).unwrap() {
            let target = inst.target_object().unwrap();
            let same = inst
                .environment
                .objects
                .iter()
                .filter(|o| !o.is_target && o.class == target.class)
                .count();
            assert_eq!(same, 0, "instance {}", inst.id);
            assert!(inst.instruction.descriptor().unwrap().color.is_some());
        }
    }

    #[test]
    fn generated_instances_are_valid() {
        for inst in generate_dataset(&small_config(100, 1)).unwrap() {
            inst.validate().unwrap();
            let desc = inst.instruction.descriptor().unwrap();
            let target = inst.target_object().unwrap();
            assert_eq!(desc.class, target.class);
            if let Some(c) = desc.color {
                assert_eq!(c, target.color);
            }
            assert!(inst.instruction.landmark_token_span().is_some());
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = small_config(1, 0);
        cfg.distractor_count_range = (5, 2);
        assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
        let mut cfg = small_config(1, 0);
        cfg.ambiguity_level_range = (0.2, 1.5);
        assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn semantic_map_channels() {
        let mut inst = generate_dataset(&small_config(1, 2)).unwrap().remove(0);
        inst.environment.landmarks.truncate(1);
        let mut s = reset(&inst);
        s.pose = Pose::new(55.0, 125.0, 10.0, Heading::N);
        let map = render_semantic_map(&inst, &s);
        assert_eq!(map.landmarks.as_slice(), inst.landmark_mask.cells());
        let nonzero: Vec<usize> = map
            .pose
            .as_slice()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(nonzero, vec![map.pose.index_of(12, 5)]);

        let encodings: Vec<Vec<u8>> = Heading::ALL
            .iter()
            .map(|&h| {
                s.pose.heading = h;
                render_semantic_map(&inst, &s).pose.into_vec()
            })
            .collect();
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(encodings[i], encodings[j]);
            }
        }
    }

    #[test]
    fn descriptor_parsing() {
        let ins = Instruction {
            text: "fly to the red car beside Old Mill".into(),
            target_token_span: [3, 5],
            referenced_landmark: "Old Mill".into(),
        };
        let d = ins.descriptor().unwrap();
        assert_eq!(d.class, ObjectClass::Car);
        assert_eq!(d.color, Some(Color::Red));
        assert_eq!(ins.landmark_token_span(), Some([6, 8]));
    }
}
