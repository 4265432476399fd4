//! Random scenario generation: a walking receiver in a shoebox room.
//!
//! Scenarios are generated in room coordinates and then shifted so the first
//! pose sits at the origin. The room stored in the result is shifted too.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Rotation, Vec3};
use crate::signal::{image_sources, ArrayGeometry, Face, OfdmGrid, PathGroundTruth, Room, Scenario};

const MAX_DRAWS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub room_dims: [f64; 3],
    pub reflectors: Vec<Face>,
    pub max_order: u32,
    pub reflection_coeff: f64,
    pub snapshots: usize,
    pub step_length: f64,
    pub steps: u32,
    pub rotation_jitter_deg: f64,
    /// SNR of the physical path, averaged over snapshots. `None` is noiseless.
    pub snr_db: Option<f64>,
    pub grid: OfdmGrid,
    pub array: Option<ArrayGeometry>,
    /// Fixed emitter position in room coordinates.
    pub source: Option<[f64; 3]>,
    /// Fixed first pose in room coordinates.
    pub ue_start: Option<[f64; 3]>,
    /// Fixed walking heading in the x-y plane, radians from +x.
    pub heading: Option<f64>,
    pub wall_margin: f64,
    pub min_source_distance: f64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            room_dims: [8.0, 6.0, 3.0],
            reflectors: Face::ALL.to_vec(),
            max_order: 0,
            reflection_coeff: 0.7,
            snapshots: 7,
            step_length: 0.6,
            steps: 3,
            rotation_jitter_deg: 5.0,
            snr_db: None,
            grid: OfdmGrid::desk(),
            array: None,
            source: None,
            ue_start: None,
            heading: None,
            wall_margin: 0.3,
            min_source_distance: 0.5,
        }
    }
}

impl ScenarioSpec {
    /// Full-scale 500 MHz grid, otherwise the desk defaults.
    pub fn paper() -> Self {
        Self {
            grid: OfdmGrid::paper(),
            ..Self::default()
        }
    }

    pub fn room(&self) -> Result<Room> {
        let [a, b, c] = self.room_dims;
        Ok(Room::from_dims(a, b, c)?.with_reflectors(&self.reflectors))
    }

    pub fn array(&self) -> ArrayGeometry {
        self.array
            .clone()
            .unwrap_or_else(|| ArrayGeometry::xz_triangle(self.grid.wavelength))
    }

    /// Length walked between the first and last snapshot.
    pub fn walk_length(&self) -> f64 {
        self.step_length * self.steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        self.room()?;
        if self.snapshots == 0 {
            return Err(Error::InvalidConfig("snapshots must be >= 1".into()));
        }
        if !(self.step_length >= 0.0) || !(self.rotation_jitter_deg >= 0.0) {
            return Err(Error::InvalidConfig("step length and jitter must be >= 0".into()));
        }
        if !(self.reflection_coeff > 0.0 && self.reflection_coeff <= 1.0) {
            return Err(Error::InvalidConfig("reflection_coeff must lie in (0, 1]".into()));
        }
        if let Some(snr) = self.snr_db {
            if !snr.is_finite() {
                return Err(Error::InvalidConfig("snr_db must be finite".into()));
            }
        }
        let dims = Vec3::from(self.room_dims);
        if (0..2).any(|k| dims[k] - 2.0 * self.wall_margin <= 0.0) {
            return Err(Error::InvalidConfig("wall margin leaves no room to walk".into()));
        }
        Ok(())
    }

    /// Draws one scenario.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Scenario> {
        self.validate()?;
        let room = self.room()?;
        let array = self.array();
        for _ in 0..MAX_DRAWS {
            let Some((start, trajectory)) = self.draw_walk(&room, rng) else {
                continue;
            };
            let Some(source) = self.draw_source(&room, &array, &trajectory, rng) else {
                continue;
            };
            return self.assemble(room, array, start, trajectory, source, rng);
        }
        Err(Error::InvalidScenario(format!(
            "no valid geometry found in {MAX_DRAWS} draws"
        )))
    }

    /// Trajectory in room coordinates, or `None` if it leaves the room.
    fn draw_walk<R: Rng + ?Sized>(&self, room: &Room, rng: &mut R) -> Option<(Vec3, Vec<Pose>)> {
        let heading = self.heading.unwrap_or_else(|| rng.random_range(0.0..2.0 * PI));
        let dir = Vec3::new(heading.cos(), heading.sin(), 0.0);
        let walk = self.walk_length();
        let lo = room.min.add_scalar(self.wall_margin);
        let hi = room.max.add_scalar(-self.wall_margin);
        let start = match self.ue_start {
            Some(s) => Vec3::from(s),
            None => Vec3::new(
                rng.random_range(lo.x..hi.x),
                rng.random_range(lo.y..hi.y),
                rng.random_range(1.0f64.min(hi.z)..1.5f64.min(hi.z).max(1.0f64.min(hi.z) + 1e-9)),
            ),
        };
        let end = start + dir * walk;
        if self.ue_start.is_none() && (0..2).any(|k| end[k] < lo[k] || end[k] > hi[k]) {
            return None;
        }
        let jitter = self.rotation_jitter_deg.to_radians();
        let spacing = if self.snapshots > 1 { walk / (self.snapshots - 1) as f64 } else { 0.0 };
        let poses = (0..self.snapshots)
            .map(|i| {
                let mut angle = || if jitter > 0.0 { rng.random_range(-jitter..=jitter) } else { 0.0 };
                let (yaw, pitch, roll) = (angle(), angle(), angle());
                Pose::new(start + dir * (spacing * i as f64), Rotation::from_axis_angles(yaw, pitch, roll))
            })
            .collect();
        Some((start, poses))
    }

    fn draw_source<R: Rng + ?Sized>(
        &self,
        room: &Room,
        array: &ArrayGeometry,
        poses: &[Pose],
        rng: &mut R,
    ) -> Option<Vec3> {
        let source = match self.source {
            Some(s) => Vec3::from(s),
            None => {
                let lo = room.min.add_scalar(0.2);
                let hi = room.max.add_scalar(-0.2);
                let front = poses.iter().map(|p| p.delta.y).fold(f64::MIN, f64::max);
                if front >= hi.y {
                    return None;
                }
                Vec3::new(
                    rng.random_range(lo.x..hi.x),
                    rng.random_range(front.max(lo.y)..hi.y),
                    rng.random_range(lo.z..hi.z),
                )
            }
        };
        let clear = poses
            .iter()
            .all(|p| (source - p.delta).norm() >= self.min_source_distance && array.sees(&source, p));
        (clear && room.strictly_contains(&source)).then_some(source)
    }

    fn assemble<R: Rng + ?Sized>(
        &self,
        room: Room,
        array: ArrayGeometry,
        start: Vec3,
        poses: Vec<Pose>,
        source: Vec3,
        rng: &mut R,
    ) -> Result<Scenario> {
        let mut emitters = vec![(source, 1.0, true)];
        for image in image_sources(&room, &source, self.max_order, self.reflection_coeff)? {
            emitters.push((image.position, image.attenuation, false));
        }
        let trajectory: Vec<Pose> = poses
            .iter()
            .map(|p| Pose::new(p.delta - start, p.omega))
            .collect();
        let paths: Vec<PathGroundTruth> = emitters
            .into_iter()
            .map(|(position, attenuation, is_physical)| {
                let position = position - start;
                let gains = trajectory
                    .iter()
                    .map(|pose| {
                        let beta: f64 = rng.random_range(0.0..2.0 * PI);
                        if array.sees(&position, pose) {
                            Complex64::from_polar(attenuation / (position - pose.delta).norm(), beta)
                        } else {
                            Complex64::new(0.0, 0.0)
                        }
                    })
                    .collect();
                PathGroundTruth {
                    position,
                    gains,
                    is_physical,
                }
            })
            .filter(|p| p.is_physical || p.gains.iter().any(|g| g.norm() > 0.0))
            .collect();
        let period = self.grid.delay_period();
        let time_offsets = (0..trajectory.len())
            .map(|_| rng.random_range(0.0..period))
            .collect();
        let noise_variance = match self.snr_db {
            Some(snr) => noise_for_snr(&paths[0], snr),
            None => 0.0,
        };
        let scenario = Scenario {
            room: Some(room.translated(&-start)),
            paths,
            trajectory,
            time_offsets,
            noise_variance,
            grid: self.grid.clone(),
            array,
        };
        scenario.validate()?;
        Ok(scenario)
    }
}

/// Per-sample noise variance giving `snr_db` relative to the mean power of
/// `path` across snapshots.
pub fn noise_for_snr(path: &PathGroundTruth, snr_db: f64) -> f64 {
    let power = path.gains.iter().map(|g| g.norm_sqr()).sum::<f64>() / path.gains.len() as f64;
    power / 10f64.powf(snr_db / 10.0)
}
