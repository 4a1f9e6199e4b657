//! Episode protocol: reset/step semantics, action effects, shaped reward and
//! termination.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::observe::{
    audio_rng, class_signature, render_depth, source_azimuth, synthesize_audio, targets_from, AudioScene,
    ClassSignature, GeometricTargets, ObsConfig, Observation,
};
use crate::world::{occlusion_count, DistanceField, Episode, GridMap, Pose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Forward,
    TurnLeft,
    TurnRight,
    Stop,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Forward, Action::TurnLeft, Action::TurnRight, Action::Stop];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Action {
        Action::ALL[i]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub success_reward: f64,
    pub progress_scale: f64,
    pub step_penalty: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            success_reward: 10.0,
            progress_scale: 1.0,
            step_penalty: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub geodesic_now: u32,
    pub targets: GeometricTargets,
    pub success: bool,
    pub occlusion_k: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone)]
struct Active {
    episode: Episode,
    episode_id: u64,
    signature: ClassSignature,
    field: DistanceField,
    pose: Pose,
    steps: u32,
    path_length: u32,
    geodesic_now: u32,
    done: bool,
    success: bool,
}

/// A single navigation environment over a shared, immutable map set.
#[derive(Debug, Clone)]
pub struct NavEnv {
    maps: Arc<[GridMap]>,
    obs_cfg: Arc<ObsConfig>,
    reward: RewardConfig,
    active: Option<Active>,
}

impl NavEnv {
    pub fn new(maps: Arc<[GridMap]>, obs_cfg: Arc<ObsConfig>, reward: RewardConfig) -> Self {
        NavEnv {
            maps,
            obs_cfg,
            reward,
            active: None,
        }
    }

    pub fn maps(&self) -> &[GridMap] {
        &self.maps
    }

    pub fn obs_config(&self) -> &ObsConfig {
        &self.obs_cfg
    }

    /// Places the agent at the episode start. `episode_id` keys the audio
    /// noise stream together with the global audio seed.
    pub fn reset(&mut self, episode: Episode, episode_id: u64) -> Result<(Observation, StepInfo)> {
        let map = self
            .maps
            .get(episode.map_id)
            .ok_or_else(|| Error::Argument(format!("unknown map id {}", episode.map_id)))?;
        let geodesic = episode.validate(map)?;
        let field = DistanceField::new(map, episode.goal)?;
        let signature = class_signature(
            episode.sound_class,
            self.obs_cfg.audio_seed,
            self.obs_cfg.freq_bins,
        );
        self.active = Some(Active {
            pose: episode.start,
            episode,
            episode_id,
            signature,
            field,
            steps: 0,
            path_length: 0,
            geodesic_now: geodesic,
            done: false,
            success: false,
        });
        Ok(self.observe())
    }

    fn observe(&self) -> (Observation, StepInfo) {
        let a = self.active.as_ref().expect("observe called on an active episode");
        let map = &self.maps[a.episode.map_id];
        let k = occlusion_count(map, a.pose.cell(), a.episode.goal);
        let scene = AudioScene {
            azimuth: source_azimuth(a.pose, a.episode.goal),
            geodesic: f64::from(a.geodesic_now),
            occlusion: k,
        };
        let mut rng = audio_rng(self.obs_cfg.audio_seed, a.episode_id, a.steps);
        let audio = synthesize_audio(scene, &a.signature, &mut rng, &self.obs_cfg);
        let visual = render_depth(map, a.pose, &self.obs_cfg);
        let info = StepInfo {
            geodesic_now: a.geodesic_now,
            targets: targets_from(
                a.pose,
                a.episode.goal,
                f64::from(a.geodesic_now),
                self.obs_cfg.d_max,
            ),
            success: a.success,
            occlusion_k: k,
        };
        (Observation { audio, visual }, info)
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        let map = {
            let a = self
                .active
                .as_ref()
                .ok_or_else(|| Error::Protocol("step before reset".into()))?;
            if a.done {
                return Err(Error::Protocol("step after episode end".into()));
            }
            &self.maps[a.episode.map_id]
        };
        let a = self.active.as_mut().expect("checked above");
        let before = a.geodesic_now;
        match action {
            Action::Forward => {
                if let Some(next) = map.step(a.pose.cell(), a.pose.heading) {
                    a.pose.x = next.x;
                    a.pose.y = next.y;
                    a.path_length += 1;
                }
            }
            Action::TurnLeft => a.pose.heading = a.pose.heading.turn_left(),
            Action::TurnRight => a.pose.heading = a.pose.heading.turn_right(),
            Action::Stop => {
                a.done = true;
                a.success = a.pose.cell() == a.episode.goal;
            }
        }
        a.steps += 1;
        if a.steps >= a.episode.max_steps {
            a.done = true;
        }
        a.geodesic_now = a
            .field
            .get(a.pose.cell())
            .expect("pose stays connected to the goal");
        let progress = f64::from(before) - f64::from(a.geodesic_now);
        let mut reward = self.reward.progress_scale * progress - self.reward.step_penalty;
        if a.success {
            reward += self.reward.success_reward;
        }
        let done = a.done;
        let (obs, info) = self.observe();
        Ok(StepResult {
            obs,
            reward,
            done,
            info,
        })
    }

    pub fn pose(&self) -> Option<Pose> {
        self.active.as_ref().map(|a| a.pose)
    }

    pub fn episode(&self) -> Option<&Episode> {
        self.active.as_ref().map(|a| &a.episode)
    }

    pub fn steps(&self) -> u32 {
        self.active.as_ref().map_or(0, |a| a.steps)
    }

    /// Effective Forward moves so far (bumps excluded).
    pub fn path_length(&self) -> u32 {
        self.active.as_ref().map_or(0, |a| a.path_length)
    }

    pub fn is_done(&self) -> bool {
        self.active.as_ref().is_none_or(|a| a.done)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{load_map, Cell, Heading};

    fn env() -> NavEnv {
        let map = load_map("........\n........\n........\n........").unwrap();
        NavEnv::new(
            Arc::from(vec![map]),
            Arc::new(ObsConfig::default()),
            RewardConfig::default(),
        )
    }

    fn episode() -> Episode {
        Episode {
            map_id: 0,
            start: Pose::new(0, 1, Heading::East),
            goal: Cell::new(4, 1),
            sound_class: 3,
            max_steps: 20,
        }
    }

    #[test]
    fn reset_is_deterministic() {
        let mut e = env();
        let (o1, i1) = e.reset(episode(), 9).unwrap();
        let (o2, _) = e.reset(episode(), 9).unwrap();
        assert_eq!(o1, o2);
        assert_eq!(i1.geodesic_now, 4);
        assert!(!i1.success);
    }

    #[test]
    fn reward_examples() {
        let mut e = env();
        e.reset(episode(), 0).unwrap();
        let r = e.step(Action::Forward).unwrap();
        assert!((r.reward - 0.99).abs() < 1e-12);
        let r = e.step(Action::TurnLeft).unwrap();
        assert!((r.reward + 0.01).abs() < 1e-12);
        e.step(Action::TurnRight).unwrap();
        for _ in 0..3 {
            e.step(Action::Forward).unwrap();
        }
        let r = e.step(Action::Stop).unwrap();
        assert!((r.reward - 9.99).abs() < 1e-12);
        assert!(r.done && r.info.success);
        assert!(matches!(e.step(Action::Forward), Err(Error::Protocol(_))));
    }

    #[test]
    fn bump_keeps_pose() {
        let mut e = env();
        let ep = Episode {
            start: Pose::new(0, 0, Heading::North),
            goal: Cell::new(4, 2),
            ..episode()
        };
        e.reset(ep, 0).unwrap();
        let r = e.step(Action::Forward).unwrap();
        assert_eq!(e.pose().unwrap(), Pose::new(0, 0, Heading::North));
        assert_eq!(e.path_length(), 0);
        assert!((r.reward + 0.01).abs() < 1e-12);
    }

    #[test]
    fn timeout_terminates() {
        let mut e = env();
        let ep = Episode {
            max_steps: 3,
            ..episode()
        };
        e.reset(ep, 0).unwrap();
        assert!(!e.step(Action::TurnLeft).unwrap().done);
        assert!(!e.step(Action::TurnLeft).unwrap().done);
        let r = e.step(Action::TurnLeft).unwrap();
        assert!(r.done && !r.info.success);
    }

    #[test]
    fn stop_off_goal_fails() {
        let mut e = env();
        e.reset(episode(), 0).unwrap();
        let r = e.step(Action::Stop).unwrap();
        assert!(r.done && !r.info.success);
        assert!((r.reward + 0.01).abs() < 1e-12);
    }

    #[test]
    fn rejects_invalid_episode() {
        let mut e = env();
        let ep = Episode {
            goal: Cell::new(1, 1),
            ..episode()
        };
        assert!(e.reset(ep, 0).is_err());
    }
}
