//! Synthetic referring-grounding environment.
//!
//! A scene is a set of non-overlapping labelled boxes on a blank canvas plus one
//! templated referring expression that resolves to exactly one of them. Scenes are
//! pure functions of `(seed, Difficulty)`.

use crate::geometry::BBox;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("seed {seed}: no uniquely resolvable scene after {attempts} attempts")]
    Exhausted { seed: u64, attempts: usize },
    #[error("invalid difficulty: {field} {reason}")]
    InvalidDifficulty { field: &'static str, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    Ship,
    StorageTank,
    Vehicle,
    Airplane,
    Bridge,
    Windmill,
    Chimney,
    Dam,
    Stadium,
    TennisCourt,
    BasketballCourt,
    Harbor,
}

impl Category {
    pub const ALL: [Category; 12] = [
        Category::Ship,
        Category::StorageTank,
        Category::Vehicle,
        Category::Airplane,
        Category::Bridge,
        Category::Windmill,
        Category::Chimney,
        Category::Dam,
        Category::Stadium,
        Category::TennisCourt,
        Category::BasketballCourt,
        Category::Harbor,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Ship => "ship",
            Category::StorageTank => "storage tank",
            Category::Vehicle => "vehicle",
            Category::Airplane => "airplane",
            Category::Bridge => "bridge",
            Category::Windmill => "windmill",
            Category::Chimney => "chimney",
            Category::Dam => "dam",
            Category::Stadium => "stadium",
            Category::TennisCourt => "tennis court",
            Category::BasketballCourt => "basketball court",
            Category::Harbor => "harbor",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpressionKind {
    Unique,
    AbsoluteRegion,
    Relative,
    Ordinal,
}

impl ExpressionKind {
    pub const ALL: [ExpressionKind; 4] = [
        ExpressionKind::Unique,
        ExpressionKind::AbsoluteRegion,
        ExpressionKind::Relative,
        ExpressionKind::Ordinal,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ExpressionKind::Unique => "unique",
            ExpressionKind::AbsoluteRegion => "absolute-region",
            ExpressionKind::Relative => "relative",
            ExpressionKind::Ordinal => "ordinal",
        }
    }
}

/// Cell of the even 3x3 grid; `row` 0 is the top, `col` 0 is the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    pub row: u8,
    pub col: u8,
}

impl Region {
    /// Cell containing a point. Centers on a grid line go to the lower-index cell.
    pub fn of_point(x: f64, y: f64, image_w: f64, image_h: f64) -> Region {
        fn cell(v: f64, extent: f64) -> u8 {
            if v <= extent / 3.0 {
                0
            } else if v <= 2.0 * extent / 3.0 {
                1
            } else {
                2
            }
        }
        Region {
            row: cell(y, image_h),
            col: cell(x, image_w),
        }
    }

    pub fn index(self) -> usize {
        self.row as usize * 3 + self.col as usize
    }

    pub fn phrase(self) -> &'static str {
        const NAMES: [&str; 9] = [
            "upper left",
            "upper center",
            "upper right",
            "middle left",
            "center",
            "middle right",
            "lower left",
            "lower center",
            "lower right",
        ];
        NAMES[self.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::LeftOf,
        Relation::RightOf,
        Relation::Above,
        Relation::Below,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    fn holds(self, (x, y): (f64, f64), (ax, ay): (f64, f64)) -> bool {
        match self {
            Relation::LeftOf => x < ax,
            Relation::RightOf => x > ax,
            Relation::Above => y < ay,
            Relation::Below => y > ay,
        }
    }

    fn phrase(self) -> &'static str {
        match self {
            Relation::LeftOf => "to the left of",
            Relation::RightOf => "to the right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Extreme {
    Leftmost,
    Rightmost,
    Topmost,
    Bottommost,
}

impl Extreme {
    pub const ALL: [Extreme; 4] = [
        Extreme::Leftmost,
        Extreme::Rightmost,
        Extreme::Topmost,
        Extreme::Bottommost,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Sort key; the extreme member minimizes it.
    fn key(self, (x, y): (f64, f64)) -> f64 {
        match self {
            Extreme::Leftmost => x,
            Extreme::Rightmost => -x,
            Extreme::Topmost => y,
            Extreme::Bottommost => -y,
        }
    }

    fn word(self) -> &'static str {
        match self {
            Extreme::Leftmost => "leftmost",
            Extreme::Rightmost => "rightmost",
            Extreme::Topmost => "topmost",
            Extreme::Bottommost => "bottommost",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expression {
    pub kind: ExpressionKind,
    pub category: Category,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Region>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<Relation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_category: Option<Category>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ordinal: Option<Extreme>,
    pub text: String,
}

impl Expression {
    fn build(
        kind: ExpressionKind,
        category: Category,
        region: Option<Region>,
        relation: Option<(Relation, Category)>,
        ordinal: Option<Extreme>,
    ) -> Expression {
        let mut e = Expression {
            kind,
            category,
            region,
            relation: relation.map(|r| r.0),
            anchor_category: relation.map(|r| r.1),
            ordinal,
            text: String::new(),
        };
        e.text = e.render();
        e
    }

    pub fn unique(category: Category) -> Expression {
        Self::build(ExpressionKind::Unique, category, None, None, None)
    }

    pub fn in_region(category: Category, region: Region) -> Expression {
        Self::build(ExpressionKind::AbsoluteRegion, category, Some(region), None, None)
    }

    pub fn relative(category: Category, relation: Relation, anchor: Category) -> Expression {
        Self::build(ExpressionKind::Relative, category, None, Some((relation, anchor)), None)
    }

    pub fn ordinal(category: Category, extreme: Extreme) -> Expression {
        Self::build(ExpressionKind::Ordinal, category, None, None, Some(extreme))
    }

    /// Whether the fields required by `kind` are present.
    pub fn is_well_formed(&self) -> bool {
        match self.kind {
            ExpressionKind::Unique => true,
            ExpressionKind::AbsoluteRegion => self.region.is_some_and(|r| r.row < 3 && r.col < 3),
            ExpressionKind::Relative => self.relation.is_some() && self.anchor_category.is_some(),
            ExpressionKind::Ordinal => self.ordinal.is_some(),
        }
    }

    pub fn render(&self) -> String {
        let cat = self.category.name();
        match self.kind {
            ExpressionKind::Unique => format!("the {cat}"),
            ExpressionKind::AbsoluteRegion => match self.region {
                Some(r) => format!("the {cat} in the {}", r.phrase()),
                None => format!("the {cat}"),
            },
            ExpressionKind::Relative => match (self.relation, self.anchor_category) {
                (Some(rel), Some(anchor)) => {
                    format!("the {cat} {} the {}", rel.phrase(), anchor.name())
                }
                _ => format!("the {cat}"),
            },
            ExpressionKind::Ordinal => match self.ordinal {
                Some(o) => format!("the {} {cat}", o.word()),
                None => format!("the {cat}"),
            },
        }
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub category: Category,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub image_w: f64,
    pub image_h: f64,
    pub objects: Vec<SceneObject>,
    pub target: usize,
    pub expression: Expression,
}

impl Scene {
    pub fn target_box(&self) -> BBox {
        self.objects[self.target].bbox
    }

    /// Checks the structural invariants: boxes valid, inside the image, pairwise
    /// disjoint, and the expression resolving to the target alone.
    pub fn check(&self) -> Result<(), String> {
        if self.target >= self.objects.len() {
            return Err(format!("target {} out of range", self.target));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !o.bbox.is_valid() || !o.bbox.is_within(self.image_w, self.image_h) {
                return Err(format!("object {i} box {} invalid or outside image", o.bbox));
            }
            for (j, p) in self.objects.iter().enumerate().skip(i + 1) {
                if o.bbox.intersection_area(&p.bbox) > 0.0 {
                    return Err(format!("objects {i} and {j} overlap"));
                }
            }
        }
        if !self.expression.is_well_formed() {
            return Err("expression is missing fields for its kind".into());
        }
        let hits = resolve_expression(self, &self.expression);
        if hits != [self.target] {
            return Err(format!("expression resolves to {hits:?}, target is {}", self.target));
        }
        Ok(())
    }
}

/// Indices of objects matching `e`, ascending.
pub fn resolve_expression(scene: &Scene, e: &Expression) -> Vec<usize> {
    let members: Vec<usize> = scene
        .objects
        .iter()
        .enumerate()
        .filter(|(_, o)| o.category == e.category)
        .map(|(i, _)| i)
        .collect();
    let center = |i: usize| scene.objects[i].bbox.center();
    match e.kind {
        ExpressionKind::Unique => members,
        ExpressionKind::AbsoluteRegion => {
            let Some(region) = e.region else {
                return Vec::new();
            };
            members
                .into_iter()
                .filter(|&i| {
                    let (x, y) = center(i);
                    Region::of_point(x, y, scene.image_w, scene.image_h) == region
                })
                .collect()
        }
        ExpressionKind::Relative => {
            let (Some(rel), Some(anchor)) = (e.relation, e.anchor_category) else {
                return Vec::new();
            };
            let anchors: Vec<usize> = scene
                .objects
                .iter()
                .enumerate()
                .filter(|(i, o)| o.category == anchor && !members.contains(i))
                .map(|(i, _)| i)
                .collect();
            if anchors.is_empty() {
                return Vec::new();
            }
            members
                .into_iter()
                .filter(|&i| anchors.iter().all(|&a| rel.holds(center(i), center(a))))
                .collect()
        }
        ExpressionKind::Ordinal => {
            let Some(ext) = e.ordinal else {
                return Vec::new();
            };
            let best = members
                .iter()
                .map(|&i| ext.key(center(i)))
                .fold(f64::INFINITY, f64::min);
            members
                .into_iter()
                .filter(|&i| ext.key(center(i)) == best)
                .collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetPlacement {
    Anywhere,
    /// Target box sits inside a corner patch of the image.
    Corners,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Difficulty {
    pub image_w: u32,
    pub image_h: u32,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: u32,
    pub max_size: u32,
    pub num_categories: usize,
    pub placement: TargetPlacement,
    /// Side of the corner patch, as a fraction of the image side.
    pub corner_fraction: f64,
    pub max_attempts: usize,
}

impl Default for Difficulty {
    fn default() -> Self {
        Difficulty {
            image_w: 256,
            image_h: 256,
            min_objects: 3,
            max_objects: 12,
            min_size: 12,
            max_size: 48,
            num_categories: 12,
            placement: TargetPlacement::Anywhere,
            corner_fraction: 0.3,
            max_attempts: 1000,
        }
    }
}

impl Difficulty {
    pub fn single_object() -> Self {
        Difficulty {
            min_objects: 1,
            max_objects: 1,
            ..Default::default()
        }
    }

    /// Targets in the image corners, away from the central prior of a cold policy.
    pub fn far_init() -> Self {
        Difficulty {
            min_objects: 1,
            max_objects: 3,
            min_size: 24,
            max_size: 48,
            num_categories: 4,
            placement: TargetPlacement::Corners,
            ..Default::default()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "default" => Some(Self::default()),
            "single" => Some(Self::single_object()),
            "far-init" => Some(Self::far_init()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |field: &'static str, reason: &str| {
            Err(SceneError::InvalidDifficulty {
                field,
                reason: reason.to_string(),
            })
        };
        if self.image_w < 16 || self.image_h < 16 {
            return bad("image_w", "image sides must be at least 16 pixels");
        }
        if self.min_objects == 0 {
            return bad("min_objects", "must be at least 1");
        }
        if self.max_objects < self.min_objects {
            return bad("max_objects", "must be >= min_objects");
        }
        if self.min_size < 2 {
            return bad("min_size", "must be at least 2 pixels");
        }
        if self.max_size < self.min_size {
            return bad("max_size", "must be >= min_size");
        }
        if self.max_size >= self.image_w.min(self.image_h) {
            return bad("max_size", "must be smaller than the image");
        }
        if self.num_categories == 0 || self.num_categories > Category::ALL.len() {
            return bad("num_categories", "must be in 1..=12");
        }
        if !(self.corner_fraction > 0.0 && self.corner_fraction <= 0.5) {
            return bad("corner_fraction", "must be in (0, 0.5]");
        }
        if self.placement == TargetPlacement::Corners
            && (self.corner_fraction * self.image_w.min(self.image_h) as f64) < self.max_size as f64
        {
            return bad("corner_fraction", "corner patch is smaller than max_size");
        }
        if self.max_attempts == 0 {
            return bad("max_attempts", "must be at least 1");
        }
        Ok(())
    }
}

fn place_box<R: Rng>(rng: &mut R, d: &Difficulty, within: (u32, u32, u32, u32)) -> BBox {
    let (x0, y0, x1, y1) = within;
    let w = rng.random_range(d.min_size..=d.max_size);
    let h = rng.random_range(d.min_size..=d.max_size);
    let x = rng.random_range(x0..=x1 - w);
    let y = rng.random_range(y0..=y1 - h);
    BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64)
}

/// Candidate expressions for `target`, in the order they are tried. When the
/// target's category is unique the bare category is used; otherwise a
/// qualifier is required.
fn candidate_expressions<R: Rng>(rng: &mut R, scene: &Scene, target: usize) -> Vec<Expression> {
    let cat = scene.objects[target].category;
    let (cx, cy) = scene.objects[target].bbox.center();
    let unique = Expression::unique(cat);
    if resolve_expression(scene, &unique) == [target] {
        return vec![unique];
    }
    let mut out = vec![Expression::in_region(
        cat,
        Region::of_point(cx, cy, scene.image_w, scene.image_h),
    )];
    for ext in Extreme::ALL {
        out.push(Expression::ordinal(cat, ext));
    }
    let mut anchors: Vec<Category> = scene
        .objects
        .iter()
        .map(|o| o.category)
        .filter(|&c| c != cat)
        .collect();
    anchors.sort();
    anchors.dedup();
    for anchor in anchors {
        for rel in Relation::ALL {
            out.push(Expression::relative(cat, rel, anchor));
        }
    }
    out.shuffle(rng);
    out
}

pub fn generate_scene(seed: u64, d: &Difficulty) -> Result<Scene, SceneError> {
    d.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (iw, ih) = (d.image_w, d.image_h);
    for _ in 0..d.max_attempts {
        let n = rng.random_range(d.min_objects..=d.max_objects);
        let mut boxes: Vec<BBox> = Vec::with_capacity(n);
        let first = match d.placement {
            TargetPlacement::Anywhere => place_box(&mut rng, d, (0, 0, iw, ih)),
            TargetPlacement::Corners => {
                let pw = (d.corner_fraction * iw as f64) as u32;
                let ph = (d.corner_fraction * ih as f64) as u32;
                let (x0, y0) = match rng.random_range(0..4u8) {
                    0 => (0, 0),
                    1 => (iw - pw, 0),
                    2 => (0, ih - ph),
                    _ => (iw - pw, ih - ph),
                };
                place_box(&mut rng, d, (x0, y0, x0 + pw, y0 + ph))
            }
        };
        boxes.push(first);
        let mut tries = 0;
        while boxes.len() < n && tries < 200 * n {
            tries += 1;
            let b = place_box(&mut rng, d, (0, 0, iw, ih));
            if boxes.iter().all(|o| o.intersection_area(&b) == 0.0) {
                boxes.push(b);
            }
        }
        if boxes.len() < n {
            continue;
        }
        let categories: Vec<Category> = (0..boxes.len())
            .map(|_| Category::ALL[rng.random_range(0..d.num_categories)])
            .collect();
        // The target is generated first; shuffle so its index carries no information.
        let mut order: Vec<usize> = (0..boxes.len()).collect();
        order.shuffle(&mut rng);
        let objects: Vec<SceneObject> = order
            .iter()
            .map(|&i| SceneObject {
                category: categories[i],
                bbox: boxes[i],
            })
            .collect();
        let target = order.iter().position(|&i| i == 0).unwrap_or(0);
        let mut scene = Scene {
            id: seed,
            image_w: iw as f64,
            image_h: ih as f64,
            objects,
            target,
            expression: Expression::unique(categories[0]),
        };
        let chosen = candidate_expressions(&mut rng, &scene, target)
            .into_iter()
            .find(|e| resolve_expression(&scene, e) == [target]);
        if let Some(e) = chosen {
            scene.expression = e;
            return Ok(scene);
        }
    }
    Err(SceneError::Exhausted {
        seed,
        attempts: d.max_attempts,
    })
}

/// Scenes for child seeds `seed .. seed + n`.
pub fn generate_scenes(seed: u64, n: usize, d: &Difficulty) -> Result<Vec<Scene>, SceneError> {
    (0..n as u64).map(|i| generate_scene(seed + i, d)).collect()
}

pub fn write_scenes<W: Write>(mut out: W, scenes: &[Scene]) -> std::io::Result<()> {
    for s in scenes {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Generate `n` scenes and write them as JSON Lines to `path`.
pub fn generate_dataset(seed: u64, n: usize, d: &Difficulty, path: &Path) -> Result<Vec<Scene>, SceneError> {
    let scenes = generate_scenes(seed, n, d)?;
    let io_err = |source| SceneError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    write_scenes(BufWriter::new(file), &scenes).map_err(io_err)?;
    Ok(scenes)
}

/// Load and check a scene corpus. Blank lines are skipped.
pub fn load_scenes(path: &Path) -> Result<Vec<Scene>, SceneError> {
    let file = File::open(path).map_err(|source| SceneError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut scenes = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| SceneError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| SceneError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let scene: Scene = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        scene.check().map_err(parse_err)?;
        scenes.push(scene);
    }
    Ok(scenes)
}
