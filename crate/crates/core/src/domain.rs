//! Block geometry, the analytic constructability oracle, placement noise,
//! simulated plan execution, and task rewards.
//!
//! All placements are planar: a block is dropped on top of the previous one
//! with a horizontal offset and a quarter-turn yaw. Quarter turns are exact
//! axis swaps/negations, so the oracle works with axis-aligned rectangles
//! and no trigonometry.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default margin used by the stability test. Centers of mass must sit at
/// least this far inside the contact patch; boundary ties resolve to
/// "unstable".
pub const DEFAULT_STABILITY_MARGIN: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("invalid block: {0}")]
    InvalidBlock(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("plan references unknown block id {0}")]
    UnknownBlock(u32),
}

/// Quarter-turn yaw about the vertical axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u16", into = "u16")]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];

    pub fn degrees(self) -> u16 {
        match self {
            Rotation::R0 => 0,
            Rotation::R90 => 90,
            Rotation::R180 => 180,
            Rotation::R270 => 270,
        }
    }

    pub fn index(self) -> usize {
        (self.degrees() / 90) as usize
    }

    /// Group composition: apply `self`, then `other`.
    pub fn compose(self, other: Rotation) -> Rotation {
        Rotation::try_from((self.degrees() + other.degrees()) % 360).unwrap()
    }

    /// Rotate a horizontal vector. Exact: only swaps and negations.
    pub fn rotate_xy(self, x: f64, y: f64) -> (f64, f64) {
        match self {
            Rotation::R0 => (x, y),
            Rotation::R90 => (-y, x),
            Rotation::R180 => (-x, -y),
            Rotation::R270 => (y, -x),
        }
    }

    /// True if this rotation swaps the x/y footprint extents.
    pub fn swaps_axes(self) -> bool {
        matches!(self, Rotation::R90 | Rotation::R270)
    }
}

impl TryFrom<u16> for Rotation {
    type Error = String;
    fn try_from(deg: u16) -> Result<Self, String> {
        match deg {
            0 => Ok(Rotation::R0),
            90 => Ok(Rotation::R90),
            180 => Ok(Rotation::R180),
            270 => Ok(Rotation::R270),
            other => Err(format!("rotation must be one of 0/90/180/270, got {other}")),
        }
    }
}

impl From<Rotation> for u16 {
    fn from(r: Rotation) -> u16 {
        r.degrees()
    }
}

/// A cuboid with non-uniform mass distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub id: u32,
    /// Edge lengths in meters, (x, y, z).
    pub dims: [f64; 3],
    /// Center-of-mass offset from the geometric center, meters.
    pub com_offset: [f64; 3],
    /// Mass in kilograms.
    pub mass: f64,
}

impl Block {
    pub fn new(id: u32, dims: [f64; 3], com_offset: [f64; 3], mass: f64) -> Result<Self, DomainError> {
        if dims.iter().any(|&d| d <= 0.0 || !d.is_finite()) {
            return Err(DomainError::InvalidBlock(format!(
                "dims must be strictly positive, got {dims:?}"
            )));
        }
        for k in 0..3 {
            if !(com_offset[k].abs() < dims[k] / 2.0) {
                return Err(DomainError::InvalidBlock(format!(
                    "com_offset[{k}] = {} must lie strictly inside the cuboid (dims[{k}] = {})",
                    com_offset[k], dims[k]
                )));
            }
        }
        if mass <= 0.0 || !mass.is_finite() {
            return Err(DomainError::InvalidBlock(format!("mass must be positive, got {mass}")));
        }
        Ok(Block { id, dims, com_offset, mass })
    }

    pub fn height(&self) -> f64 {
        self.dims[2]
    }
}

/// Placement offset relative to the previously placed block (or the table
/// origin for the first action).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelPose {
    pub dx: f64,
    pub dy: f64,
    pub rot_z: Rotation,
}

/// One abstract action: place a block with a relative pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub block: Block,
    pub rel_pose: RelPose,
}

/// An ordered stacking plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    actions: Vec<Action>,
}

impl Plan {
    /// Build a plan; rejects empty plans and repeated block ids.
    pub fn new(actions: Vec<Action>) -> Result<Self, DomainError> {
        if actions.is_empty() {
            return Err(DomainError::InvalidPlan("plan must be non-empty".into()));
        }
        for (i, a) in actions.iter().enumerate() {
            if actions[..i].iter().any(|b| b.block.id == a.block.id) {
                return Err(DomainError::InvalidPlan(format!(
                    "block id {} appears more than once",
                    a.block.id
                )));
            }
        }
        Ok(Plan { actions })
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        false // non-empty by construction
    }

    /// The plan consisting of the first `len` actions.
    pub fn prefix(&self, len: usize) -> Plan {
        assert!(len >= 1 && len <= self.actions.len());
        Plan { actions: self.actions[..len].to_vec() }
    }

    /// Extend with one more action. Fails on block-id reuse.
    pub fn extended(&self, action: Action) -> Result<Plan, DomainError> {
        let mut actions = self.actions.clone();
        actions.push(action);
        Plan::new(actions)
    }

    /// A hashable identity: block ids, exact offset bits, yaw.
    pub fn key(&self) -> PlanKey {
        PlanKey(
            self.actions
                .iter()
                .map(|a| {
                    (
                        a.block.id,
                        a.rel_pose.dx.to_bits(),
                        a.rel_pose.dy.to_bits(),
                        a.rel_pose.rot_z.degrees(),
                    )
                })
                .collect(),
        )
    }
}

/// Bit-exact plan identity, used to look up previously executed prefixes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PlanKey(Vec<(u32, u64, u64, u16)>);

/// Absolute pose of one placed block.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub block: Block,
    /// Geometric center in world coordinates.
    pub world_center: [f64; 3],
    pub yaw: Rotation,
}

impl Placement {
    /// Half-extents of the footprint after yaw.
    pub fn half_extents_xy(&self) -> (f64, f64) {
        if self.yaw.swaps_axes() {
            (self.block.dims[1] / 2.0, self.block.dims[0] / 2.0)
        } else {
            (self.block.dims[0] / 2.0, self.block.dims[1] / 2.0)
        }
    }

    /// Horizontal footprint as (xmin, ymin, xmax, ymax).
    pub fn footprint(&self) -> Rect {
        let (hx, hy) = self.half_extents_xy();
        Rect {
            xmin: self.world_center[0] - hx,
            ymin: self.world_center[1] - hy,
            xmax: self.world_center[0] + hx,
            ymax: self.world_center[1] + hy,
        }
    }

    pub fn footprint_area(&self) -> f64 {
        self.block.dims[0] * self.block.dims[1]
    }

    /// World-frame center of mass (horizontal components).
    pub fn com_xy(&self) -> (f64, f64) {
        let (cx, cy) = self.yaw.rotate_xy(self.block.com_offset[0], self.block.com_offset[1]);
        (self.world_center[0] + cx, self.world_center[1] + cy)
    }
}

/// Axis-aligned rectangle in the horizontal plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl Rect {
    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    pub fn depth(&self) -> f64 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.depth().max(0.0)
    }

    pub fn is_empty(&self) -> bool {
        self.width() <= 0.0 || self.depth() <= 0.0
    }

    /// Signed distance of a point to the rectangle boundary; positive inside.
    /// Negative (or worse) when the rectangle itself is degenerate.
    pub fn interior_slack(&self, x: f64, y: f64) -> f64 {
        (x - self.xmin)
            .min(self.xmax - x)
            .min(y - self.ymin)
            .min(self.ymax - y)
    }
}

/// Gaussian placement noise applied to horizontal offsets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Standard deviation of the planar offset noise, meters.
    pub sigma_xy: f64,
    pub enabled: bool,
}

impl NoiseConfig {
    pub fn disabled() -> Self {
        NoiseConfig { sigma_xy: 0.0, enabled: false }
    }

    pub fn with_sigma(sigma_xy: f64) -> Self {
        NoiseConfig { sigma_xy, enabled: true }
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig::disabled()
    }
}

/// Task objective for the evaluation phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskObjective {
    TallestTower,
    LongestOverhang,
    MaxUnsupportedArea,
}

impl TaskObjective {
    pub const ALL: [TaskObjective; 3] = [
        TaskObjective::TallestTower,
        TaskObjective::LongestOverhang,
        TaskObjective::MaxUnsupportedArea,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TaskObjective::TallestTower => "tallest_tower",
            TaskObjective::LongestOverhang => "longest_overhang",
            TaskObjective::MaxUnsupportedArea => "max_unsupported_area",
        }
    }
}

impl std::str::FromStr for TaskObjective {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tallest" | "tallest_tower" => Ok(TaskObjective::TallestTower),
            "overhang" | "longest_overhang" => Ok(TaskObjective::LongestOverhang),
            "unsupported" | "max_unsupported_area" => Ok(TaskObjective::MaxUnsupportedArea),
            other => Err(format!("unknown task '{other}'")),
        }
    }
}

/// A plan together with its per-step feasibility labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPlan {
    pub plan: Plan,
    /// One label per action; monotone (no true after a false).
    pub step_labels: Vec<bool>,
    /// Conjunction of the step labels.
    pub overall: bool,
}

/// Ranges for randomly generated blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockGenConfig {
    /// Uniform range for each dimension, meters.
    pub dim_range: [f64; 2],
    /// Center-of-mass offset as a fraction of each dimension; must stay
    /// within (-0.5, 0.5).
    pub com_fraction_range: [f64; 2],
    /// Uniform mass range, kilograms.
    pub mass_range: [f64; 2],
}

impl Default for BlockGenConfig {
    fn default() -> Self {
        BlockGenConfig {
            dim_range: [0.05, 0.15],
            com_fraction_range: [-0.4, 0.4],
            mass_range: [0.1, 1.0],
        }
    }
}

impl BlockGenConfig {
    pub fn validate(&self) -> Result<(), DomainError> {
        let ok_interval = |r: &[f64; 2]| r[0] < r[1] && r.iter().all(|v| v.is_finite());
        if !ok_interval(&self.dim_range) || self.dim_range[0] <= 0.0 {
            return Err(DomainError::InvalidConfig(format!(
                "dim_range must be a positive non-degenerate interval, got {:?}",
                self.dim_range
            )));
        }
        if !ok_interval(&self.com_fraction_range)
            || self.com_fraction_range[0] <= -0.5
            || self.com_fraction_range[1] >= 0.5
        {
            return Err(DomainError::InvalidConfig(format!(
                "com_fraction_range must be non-degenerate and within (-0.5, 0.5), got {:?}",
                self.com_fraction_range
            )));
        }
        if !ok_interval(&self.mass_range) || self.mass_range[0] <= 0.0 {
            return Err(DomainError::InvalidConfig(format!(
                "mass_range must be a positive non-degenerate interval, got {:?}",
                self.mass_range
            )));
        }
        Ok(())
    }
}

/// Draw one block with uniform dimensions, COM fraction, and mass.
pub fn sample_block<R: Rng>(rng: &mut R, cfg: &BlockGenConfig, id: u32) -> Result<Block, DomainError> {
    cfg.validate()?;
    let dims = [
        rng.gen_range(cfg.dim_range[0]..cfg.dim_range[1]),
        rng.gen_range(cfg.dim_range[0]..cfg.dim_range[1]),
        rng.gen_range(cfg.dim_range[0]..cfg.dim_range[1]),
    ];
    let com_offset = [
        dims[0] * rng.gen_range(cfg.com_fraction_range[0]..cfg.com_fraction_range[1]),
        dims[1] * rng.gen_range(cfg.com_fraction_range[0]..cfg.com_fraction_range[1]),
        dims[2] * rng.gen_range(cfg.com_fraction_range[0]..cfg.com_fraction_range[1]),
    ];
    let mass = rng.gen_range(cfg.mass_range[0]..cfg.mass_range[1]);
    Block::new(id, dims, com_offset, mass)
}

/// Draw a whole block set with consecutive ids starting at `first_id`.
pub fn sample_blocks<R: Rng>(
    rng: &mut R,
    cfg: &BlockGenConfig,
    count: usize,
    first_id: u32,
) -> Result<Vec<Block>, DomainError> {
    (0..count)
        .map(|i| sample_block(rng, cfg, first_id + i as u32))
        .collect()
}

/// Resolve a plan's relative poses into absolute placements. Pure function
/// of the plan: block i sits at block (i-1)'s horizontal center plus its
/// offset, with bottom face exactly on the face below.
pub fn resolve_geometry(plan: &Plan) -> Vec<Placement> {
    let mut placements = Vec::with_capacity(plan.len());
    let mut x = 0.0;
    let mut y = 0.0;
    let mut z_base = 0.0;
    for action in plan.actions() {
        x += action.rel_pose.dx;
        y += action.rel_pose.dy;
        let h = action.block.height();
        placements.push(Placement {
            block: action.block.clone(),
            world_center: [x, y, z_base + h / 2.0],
            yaw: action.rel_pose.rot_z,
        });
        z_base += h;
    }
    placements
}

/// Horizontal intersection of an upper block's footprint with its support.
/// `None` when the footprints do not overlap.
pub fn contact_patch(lower: &Placement, upper: &Placement) -> Option<Rect> {
    let rect = contact_patch_raw(lower, upper);
    if rect.is_empty() {
        None
    } else {
        Some(rect)
    }
}

/// Intersection bounds without the emptiness check; degenerate rectangles
/// carry negative widths, which the margin computation uses as signed slack.
fn contact_patch_raw(lower: &Placement, upper: &Placement) -> Rect {
    let a = lower.footprint();
    let b = upper.footprint();
    Rect {
        xmin: a.xmin.max(b.xmin),
        ymin: a.ymin.max(b.ymin),
        xmax: a.xmax.min(b.xmax),
        ymax: a.ymax.min(b.ymax),
    }
}

/// Horizontal projection of the combined center of mass of blocks
/// `from_index..` (0-based).
pub fn subtower_com(placements: &[Placement], from_index: usize) -> (f64, f64) {
    assert!(from_index < placements.len());
    let mut mx = 0.0;
    let mut my = 0.0;
    let mut m = 0.0;
    for p in &placements[from_index..] {
        let (cx, cy) = p.com_xy();
        mx += p.block.mass * cx;
        my += p.block.mass * cy;
        m += p.block.mass;
    }
    (mx / m, my / m)
}

/// Worst interior slack over every subtower/interface constraint of the
/// resolved tower, in meters. Positive iff the tower is statically stable
/// with that much room; the first block rests on the table and contributes
/// no constraint.
pub fn stability_margin_placements(placements: &[Placement]) -> f64 {
    let mut margin = f64::INFINITY;
    for i in 1..placements.len() {
        let patch = contact_patch_raw(&placements[i - 1], &placements[i]);
        let (cx, cy) = subtower_com(placements, i);
        margin = margin.min(patch.interior_slack(cx, cy));
    }
    margin
}

/// Static stability of the whole tower: every subtower's combined center of
/// mass must lie strictly inside the contact patch below it, by at least
/// `eps`.
pub fn is_stable_with_margin(plan: &Plan, eps: f64) -> bool {
    let placements = resolve_geometry(plan);
    stability_margin_placements(&placements) > eps
}

pub fn is_stable(plan: &Plan) -> bool {
    is_stable_with_margin(plan, DEFAULT_STABILITY_MARGIN)
}

/// Margin of the worst constraint over all prefixes of the plan; positive
/// iff the plan is constructable. This is the analytic distance to the
/// constructability boundary.
pub fn constructability_margin(plan: &Plan) -> f64 {
    let placements = resolve_geometry(plan);
    let mut margin = f64::INFINITY;
    for k in 1..=placements.len() {
        margin = margin.min(stability_margin_placements(&placements[..k]));
    }
    margin
}

/// Per-step constructability labels. Step 1 is feasible by assumption;
/// step i requires the whole prefix to be stable and every earlier step to
/// have succeeded. Labels after a failure are clamped false.
pub fn constructability_labels_with_margin(plan: &Plan, eps: f64) -> Vec<bool> {
    let placements = resolve_geometry(plan);
    let mut labels = Vec::with_capacity(plan.len());
    let mut alive = true;
    for i in 0..plan.len() {
        let label = if i == 0 {
            true
        } else {
            alive && stability_margin_placements(&placements[..=i]) > eps
        };
        alive = label;
        labels.push(label);
    }
    labels
}

pub fn constructability_labels(plan: &Plan) -> Vec<bool> {
    constructability_labels_with_margin(plan, DEFAULT_STABILITY_MARGIN)
}

/// Add independent zero-mean Gaussian noise to each action's horizontal
/// offset. Rotations and block identities are untouched. Drawn as
/// `sigma * z` with `z` standard normal, so matched seed streams scale
/// exactly with sigma.
pub fn perturb<R: Rng>(plan: &Plan, noise: &NoiseConfig, rng: &mut R) -> Plan {
    if !noise.enabled || noise.sigma_xy == 0.0 {
        return plan.clone();
    }
    let normal = Normal::new(0.0, noise.sigma_xy).expect("sigma must be non-negative");
    let actions = plan
        .actions()
        .iter()
        .map(|a| Action {
            block: a.block.clone(),
            rel_pose: RelPose {
                dx: a.rel_pose.dx + normal.sample(rng),
                dy: a.rel_pose.dy + normal.sample(rng),
                rot_z: a.rel_pose.rot_z,
            },
        })
        .collect();
    Plan { actions }
}

/// Simulate sequential construction: perturb once, then label the realized
/// geometry. The returned record keeps the intended plan; with noise
/// enabled the labels are stochastic.
pub fn execute<R: Rng>(plan: &Plan, noise: &NoiseConfig, rng: &mut R) -> LabeledPlan {
    let realized = perturb(plan, noise, rng);
    let step_labels = constructability_labels(&realized);
    let overall = step_labels.iter().all(|&b| b);
    LabeledPlan { plan: plan.clone(), step_labels, overall }
}

/// Task reward of the (intended) tower geometry.
pub fn reward(plan: &Plan, task: TaskObjective) -> f64 {
    let placements = resolve_geometry(plan);
    match task {
        TaskObjective::TallestTower => placements.iter().map(|p| p.block.height()).sum(),
        TaskObjective::LongestOverhang => {
            let bottom = &placements[0];
            let top = placements.last().unwrap();
            let (x0, y0) = (bottom.world_center[0], bottom.world_center[1]);
            let fp = top.footprint();
            (x0 - fp.xmin)
                .abs()
                .max((x0 - fp.xmax).abs())
                .max((y0 - fp.ymin).abs())
                .max((y0 - fp.ymax).abs())
        }
        TaskObjective::MaxUnsupportedArea => placements
            .windows(2)
            .map(|w| {
                let patch_area = contact_patch(&w[0], &w[1]).map_or(0.0, |r| r.area());
                w[1].footprint_area() - patch_area
            })
            .sum(),
    }
}

/// Rotate the whole plan about the vertical axis: every offset is rotated
/// and every yaw composed. Statics are invariant under this map.
pub fn rotate_plan(plan: &Plan, rot: Rotation) -> Plan {
    let actions = plan
        .actions()
        .iter()
        .map(|a| {
            let (dx, dy) = rot.rotate_xy(a.rel_pose.dx, a.rel_pose.dy);
            Action {
                block: a.block.clone(),
                rel_pose: RelPose { dx, dy, rot_z: a.rel_pose.rot_z.compose(rot) },
            }
        })
        .collect();
    Plan { actions }
}

// ---------------------------------------------------------------------------
// Wire formats
// ---------------------------------------------------------------------------

/// One plan step in the on-disk format: block by id plus the relative pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub block_id: u32,
    pub dx: f64,
    pub dy: f64,
    pub rot_z: Rotation,
}

/// Serialize a plan as `{block_id, dx, dy, rot_z}` steps.
pub fn plan_to_records(plan: &Plan) -> Vec<ActionRecord> {
    plan.actions()
        .iter()
        .map(|a| ActionRecord {
            block_id: a.block.id,
            dx: a.rel_pose.dx,
            dy: a.rel_pose.dy,
            rot_z: a.rel_pose.rot_z,
        })
        .collect()
}

/// Rebuild a plan from records, resolving block ids against a block set.
pub fn plan_from_records(records: &[ActionRecord], blocks: &[Block]) -> Result<Plan, DomainError> {
    let actions = records
        .iter()
        .map(|r| {
            let block = blocks
                .iter()
                .find(|b| b.id == r.block_id)
                .cloned()
                .ok_or(DomainError::UnknownBlock(r.block_id))?;
            Ok(Action {
                block,
                rel_pose: RelPose { dx: r.dx, dy: r.dy, rot_z: r.rot_z },
            })
        })
        .collect::<Result<Vec<_>, DomainError>>()?;
    Plan::new(actions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cube(id: u32, side: f64) -> Block {
        Block::new(id, [side, side, side], [0.0; 3], 1.0).unwrap()
    }

    fn plan_of(steps: Vec<(Block, f64, f64, Rotation)>) -> Plan {
        Plan::new(
            steps
                .into_iter()
                .map(|(block, dx, dy, rot_z)| Action { block, rel_pose: RelPose { dx, dy, rot_z } })
                .collect(),
        )
        .unwrap()
    }

    /// Three blocks where the middle one overhangs too far on its own but a
    /// heavy top block pulls the combined center of mass back over the
    /// support: stable as a whole, impossible to build one block at a time.
    fn counterweight_plan() -> Plan {
        let b1 = cube(1, 0.1);
        let b2 = Block::new(2, [0.1, 0.1, 0.1], [0.04, 0.0, 0.0], 1.0).unwrap();
        let b3 = Block::new(3, [0.1, 0.1, 0.1], [0.0; 3], 3.0).unwrap();
        plan_of(vec![
            (b1, 0.0, 0.0, Rotation::R0),
            (b2, 0.06, 0.0, Rotation::R0),
            (b3, -0.04, 0.0, Rotation::R0),
        ])
    }

    #[test]
    fn sample_block_respects_ranges() {
        let cfg = BlockGenConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..200 {
            let b = sample_block(&mut rng, &cfg, i).unwrap();
            for k in 0..3 {
                assert!(b.dims[k] >= 0.05 && b.dims[k] <= 0.15);
                assert!(b.com_offset[k].abs() < b.dims[k] / 2.0);
            }
            assert!(b.mass >= 0.1 && b.mass <= 1.0);
        }
    }

    #[test]
    fn sample_block_zero_com_fraction_gives_uniform_density() {
        let cfg = BlockGenConfig { com_fraction_range: [0.0, 0.0], ..Default::default() };
        // A degenerate interval is rejected outright rather than silently
        // producing zeros.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(sample_block(&mut rng, &cfg, 0).is_err());
        // The zero case proper: a vanishingly small symmetric range.
        let cfg = BlockGenConfig { com_fraction_range: [-1e-12, 1e-12], ..Default::default() };
        let b = sample_block(&mut rng, &cfg, 0).unwrap();
        for k in 0..3 {
            assert!(b.com_offset[k].abs() < 1e-12);
        }
    }

    #[test]
    fn sample_block_deterministic_under_fixed_seed() {
        let cfg = BlockGenConfig::default();
        let a = sample_block(&mut ChaCha8Rng::seed_from_u64(7), &cfg, 0).unwrap();
        let b = sample_block(&mut ChaCha8Rng::seed_from_u64(7), &cfg, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_block_rejects_bad_ranges() {
        let cfg = BlockGenConfig { dim_range: [0.2, 0.1], ..Default::default() };
        assert!(sample_block(&mut ChaCha8Rng::seed_from_u64(0), &cfg, 0).is_err());
        let cfg = BlockGenConfig { com_fraction_range: [-0.6, 0.4], ..Default::default() };
        assert!(sample_block(&mut ChaCha8Rng::seed_from_u64(0), &cfg, 0).is_err());
    }

    #[test]
    fn resolve_geometry_single_block() {
        let plan = plan_of(vec![(cube(1, 0.1), 0.0, 0.0, Rotation::R0)]);
        let p = resolve_geometry(&plan);
        assert_eq!(p[0].world_center, [0.0, 0.0, 0.05]);
    }

    #[test]
    fn resolve_geometry_stacks_and_offsets() {
        let plan = plan_of(vec![
            (cube(1, 0.1), 0.0, 0.0, Rotation::R0),
            (cube(2, 0.1), 0.02, 0.0, Rotation::R0),
        ]);
        let p = resolve_geometry(&plan);
        assert_eq!(p[1].world_center[0], 0.02);
        assert_eq!(p[1].world_center[1], 0.0);
        assert!((p[1].world_center[2] - 0.15).abs() < 1e-12);
    }

    #[test]
    fn resolve_geometry_rotates_com_offset() {
        let b = Block::new(1, [0.1, 0.1, 0.1], [0.03, 0.0, 0.0], 1.0).unwrap();
        let plan = plan_of(vec![(b, 0.0, 0.0, Rotation::R90)]);
        let p = resolve_geometry(&plan);
        let (cx, cy) = p[0].com_xy();
        assert!((cx - 0.0).abs() < 1e-15);
        assert!((cy - 0.03).abs() < 1e-15);
    }

    #[test]
    fn contact_patch_cases() {
        let mk = |dx: f64| {
            let plan = plan_of(vec![
                (cube(1, 0.1), 0.0, 0.0, Rotation::R0),
                (cube(2, 0.1), dx, 0.0, Rotation::R0),
            ]);
            let p = resolve_geometry(&plan);
            contact_patch(&p[0], &p[1])
        };
        let full = mk(0.0).unwrap();
        assert!((full.width() - 0.1).abs() < 1e-12 && (full.depth() - 0.1).abs() < 1e-12);
        assert!(mk(0.1).is_none());
        let partial = mk(0.04).unwrap();
        assert!((partial.width() - 0.06).abs() < 1e-12);
    }

    #[test]
    fn subtower_com_weighted_mean() {
        let plan = plan_of(vec![
            (cube(1, 0.1), 0.0, 0.0, Rotation::R0),
            (cube(2, 0.1), 0.04, 0.0, Rotation::R0),
        ]);
        let p = resolve_geometry(&plan);
        let (x, _) = subtower_com(&p, 0);
        assert!((x - 0.02).abs() < 1e-12);
        let (x1, _) = subtower_com(&p, 1);
        assert!((x1 - 0.04).abs() < 1e-12);

        let heavy = Block::new(2, [0.1; 3], [0.0; 3], 3.0).unwrap();
        let plan = plan_of(vec![
            (cube(1, 0.1), 0.0, 0.0, Rotation::R0),
            (heavy, 0.04, 0.0, Rotation::R0),
        ]);
        let p = resolve_geometry(&plan);
        let (x, _) = subtower_com(&p, 0);
        assert!((x - 0.03).abs() < 1e-12);
    }

    #[test]
    fn single_block_is_stable() {
        let plan = plan_of(vec![(cube(1, 0.1), 0.0, 0.0, Rotation::R0)]);
        assert!(is_stable(&plan));
    }

    #[test]
    fn overhung_block_is_unstable() {
        // Patch spans x in [0.01, 0.05]; upper COM sits at 0.06.
        let plan = plan_of(vec![
            (cube(1, 0.1), 0.0, 0.0, Rotation::R0),
            (cube(2, 0.1), 0.06, 0.0, Rotation::R0),
        ]);
        assert!(!is_stable(&plan));
    }

    #[test]
    fn counterweight_tower_is_stable_but_not_constructable() {
        let plan = counterweight_plan();
        assert!(is_stable(&plan));
        let labels = constructability_labels(&plan);
        assert_eq!(labels, vec![true, false, false]);
    }

    #[test]
    fn labels_are_monotone_and_all_true_when_stable() {
        let plan = plan_of(vec![
            (cube(1, 0.1), 0.0, 0.0, Rotation::R0),
            (cube(2, 0.1), 0.01, 0.0, Rotation::R0),
            (cube(3, 0.1), -0.01, 0.0, Rotation::R0),
        ]);
        assert_eq!(constructability_labels(&plan), vec![true, true, true]);

        let labels = constructability_labels(&counterweight_plan());
        let mut seen_false = false;
        for l in labels {
            if seen_false {
                assert!(!l);
            }
            seen_false |= !l;
        }
    }

    #[test]
    fn perturb_zero_sigma_is_identity() {
        let plan = counterweight_plan();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(perturb(&plan, &NoiseConfig::disabled(), &mut rng), plan);
        assert_eq!(perturb(&plan, &NoiseConfig { sigma_xy: 0.0, enabled: true }, &mut rng), plan);
    }

    #[test]
    fn perturb_deterministic_under_fixed_seed() {
        let plan = counterweight_plan();
        let noise = NoiseConfig::with_sigma(0.005);
        let a = perturb(&plan, &noise, &mut ChaCha8Rng::seed_from_u64(9));
        let b = perturb(&plan, &noise, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn perturb_empirical_std_matches_sigma() {
        let plan = plan_of(vec![(cube(1, 0.1), 0.0, 0.0, Rotation::R0)]);
        let noise = NoiseConfig::with_sigma(0.005);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let dx = perturb(&plan, &noise, &mut rng).actions()[0].rel_pose.dx;
            sum += dx;
            sq += dx * dx;
        }
        let mean = sum / n as f64;
        let std = (sq / n as f64 - mean * mean).sqrt();
        assert!((std - 0.005).abs() / 0.005 < 0.05, "std {std}");
    }

    #[test]
    fn execute_noiseless_matches_oracle() {
        let plan = counterweight_plan();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lp = execute(&plan, &NoiseConfig::disabled(), &mut rng);
        assert_eq!(lp.step_labels, constructability_labels(&plan));
        assert!(!lp.overall);
        assert_eq!(lp.plan, plan);
    }

    #[test]
    fn execute_single_action_always_feasible() {
        let plan = plan_of(vec![(cube(1, 0.1), 0.0, 0.0, Rotation::R0)]);
        let noise = NoiseConfig::with_sigma(0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            assert!(execute(&plan, &noise, &mut rng).overall);
        }
    }

    #[test]
    fn execute_boundary_plan_is_a_coin_flip_under_noise() {
        // Upper COM exactly on the patch edge: feasibility flips on the sign
        // of the x perturbation.
        let plan = plan_of(vec![
            (cube(1, 0.1), 0.0, 0.0, Rotation::R0),
            (cube(2, 0.1), 0.05, 0.0, Rotation::R0),
        ]);
        let noise = NoiseConfig::with_sigma(0.005);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 1000;
        let ok = (0..n).filter(|_| execute(&plan, &noise, &mut rng).overall).count();
        let frac = ok as f64 / n as f64;
        assert!((0.4..=0.6).contains(&frac), "feasible fraction {frac}");
    }

    #[test]
    fn reward_cases() {
        let b1 = Block::new(1, [0.1, 0.1, 0.1], [0.0; 3], 1.0).unwrap();
        let b2 = Block::new(2, [0.1, 0.1, 0.2], [0.0; 3], 1.0).unwrap();
        let b3 = Block::new(3, [0.1, 0.1, 0.15], [0.0; 3], 1.0).unwrap();
        let plan = plan_of(vec![
            (b1, 0.0, 0.0, Rotation::R0),
            (b2, 0.0, 0.0, Rotation::R0),
            (b3, 0.0, 0.0, Rotation::R0),
        ]);
        assert!((reward(&plan, TaskObjective::TallestTower) - 0.45).abs() < 1e-12);

        let single = plan_of(vec![(cube(1, 0.1), 0.0, 0.0, Rotation::R0)]);
        assert!((reward(&single, TaskObjective::LongestOverhang) - 0.05).abs() < 1e-12);

        let aligned = plan_of(vec![
            (cube(1, 0.1), 0.0, 0.0, Rotation::R0),
            (cube(2, 0.1), 0.0, 0.0, Rotation::R0),
        ]);
        assert!(reward(&aligned, TaskObjective::MaxUnsupportedArea).abs() < 1e-12);
    }

    #[test]
    fn constructable_implies_stable_and_margin_signs_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = BlockGenConfig::default();
        for _ in 0..500 {
            let blocks = sample_blocks(&mut rng, &cfg, 4, 0).unwrap();
            let actions = blocks
                .iter()
                .enumerate()
                .map(|(i, b)| Action {
                    block: b.clone(),
                    rel_pose: RelPose {
                        dx: if i == 0 { 0.0 } else { rng.gen_range(-0.08..0.08) },
                        dy: if i == 0 { 0.0 } else { rng.gen_range(-0.08..0.08) },
                        rot_z: Rotation::ALL[rng.gen_range(0..4)],
                    },
                })
                .collect();
            let plan = Plan::new(actions).unwrap();
            let labels = constructability_labels(&plan);
            if labels.iter().all(|&l| l) {
                assert!(is_stable(&plan));
                assert!(constructability_margin(&plan) > DEFAULT_STABILITY_MARGIN);
            } else {
                assert!(constructability_margin(&plan) <= DEFAULT_STABILITY_MARGIN);
            }
        }
    }

    #[test]
    fn statics_invariant_under_global_rotation() {
        let plan = counterweight_plan();
        for rot in Rotation::ALL {
            let rotated = rotate_plan(&plan, rot);
            assert_eq!(is_stable(&rotated), is_stable(&plan));
            assert_eq!(constructability_labels(&rotated), constructability_labels(&plan));
            for task in TaskObjective::ALL {
                assert!((reward(&rotated, task) - reward(&plan, task)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rotation_composition() {
        assert_eq!(Rotation::R90.compose(Rotation::R90), Rotation::R180);
        assert_eq!(Rotation::R270.compose(Rotation::R180), Rotation::R90);
        let plan = counterweight_plan();
        let twice = rotate_plan(&rotate_plan(&plan, Rotation::R90), Rotation::R90);
        let once = rotate_plan(&plan, Rotation::R180);
        assert_eq!(twice, once);
    }

    #[test]
    fn plan_rejects_duplicate_blocks_and_empty() {
        assert!(Plan::new(vec![]).is_err());
        let a = Action { block: cube(1, 0.1), rel_pose: RelPose { dx: 0.0, dy: 0.0, rot_z: Rotation::R0 } };
        assert!(Plan::new(vec![a.clone(), a]).is_err());
    }

    #[test]
    fn wire_roundtrip_is_exact() {
        let plan = counterweight_plan();
        let blocks: Vec<Block> = plan.actions().iter().map(|a| a.block.clone()).collect();
        let json = serde_json::to_string(&plan_to_records(&plan)).unwrap();
        let records: Vec<ActionRecord> = serde_json::from_str(&json).unwrap();
        let back = plan_from_records(&records, &blocks).unwrap();
        assert_eq!(back, plan);

        let bjson = serde_json::to_string(&blocks).unwrap();
        let bback: Vec<Block> = serde_json::from_str(&bjson).unwrap();
        assert_eq!(bback, blocks);
    }

    #[test]
    fn patch_area_bounded_by_footprints() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = BlockGenConfig::default();
        for _ in 0..200 {
            let blocks = sample_blocks(&mut rng, &cfg, 2, 0).unwrap();
            let plan = plan_of(vec![
                (blocks[0].clone(), 0.0, 0.0, Rotation::R0),
                (blocks[1].clone(), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), Rotation::R0),
            ]);
            let p = resolve_geometry(&plan);
            if let Some(patch) = contact_patch(&p[0], &p[1]) {
                assert!(patch.area() <= p[0].footprint_area() + 1e-12);
                assert!(patch.area() <= p[1].footprint_area() + 1e-12);
            }
        }
    }
}
