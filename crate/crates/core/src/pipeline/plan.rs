//! Turning a configuration into a concrete list of acquisition events.

use super::config::{fixed_time_of_day, ActivityEntry, CombinationPolicy, ScenarioConfig};
use super::PipelineError;
use crate::acquisition::{
    format_event_time, ground_sampling_distance, schedule_acquisitions, AcquisitionParams, TimeOfDay,
};
use crate::seed::derive_seed;
use chrono::{Duration, Timelike};
use serde::{Deserialize, Serialize};
use std::fmt::Write;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventSource {
    Pass { satellite: usize, pass: i64 },
    Tasked { index: usize },
}

impl EventSource {
    /// Identity used for seed derivation. It depends only on the event's own
    /// origin, so adding satellites or tasked shots never changes the seeds
    /// of events that already existed.
    pub fn key(&self) -> u64 {
        match *self {
            EventSource::Tasked { index } => index as u64,
            EventSource::Pass { satellite, pass } => {
                (1 << 63) | ((satellite as u64) << 40) | (pass as u64 & ((1 << 40) - 1))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannedEvent {
    pub index: usize,
    pub source: EventSource,
    pub time_s: f64,
    pub timestamp: String,
    pub off_nadir_deg: f64,
    pub azimuth_deg: f64,
    pub altitude_m: f64,
    pub time_of_day: TimeOfDay,
    pub activity_level: f64,
    pub seeds: EventSeeds,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventSeeds {
    pub activity: u64,
    pub synthesis: u64,
    pub clouds: u64,
}

impl PlannedEvent {
    pub fn params(&self, cfg: &ScenarioConfig) -> AcquisitionParams {
        AcquisitionParams {
            altitude_m: self.altitude_m,
            off_nadir_deg: self.off_nadir_deg,
            azimuth_deg: self.azimuth_deg.rem_euclid(360.0),
            fov_deg: cfg.acquisition.fov_deg,
            image_px: cfg.acquisition.image_px,
        }
    }

    /// `{scene_seed}_{timestamp}_{off_nadir}` with filesystem-safe
    /// characters.
    pub fn stem(&self, scene_seed: u64) -> String {
        format!(
            "{scene_seed}_{}_{:.1}",
            self.timestamp.replace(':', "-"),
            self.off_nadir_deg
        )
    }
}

/// Level in force at `t`: the latest entry at or before `t`, or the first
/// entry for earlier times; 0 with an empty schedule.
pub fn activity_at(schedule: &[ActivityEntry], t: f64) -> f64 {
    match schedule.iter().rev().find(|e| e.time_s <= t) {
        Some(e) => e.level,
        None => schedule.first().map_or(0.0, |e| e.level),
    }
}

fn local_time_of_day(cfg: &ScenarioConfig, t: f64) -> Result<TimeOfDay, PipelineError> {
    if let Some(tag) = fixed_time_of_day(&cfg.acquisition.time_of_day).map_err(PipelineError::Plan)? {
        return Ok(tag);
    }
    let epoch = cfg.epoch().map_err(PipelineError::Plan)?;
    let at = epoch + Duration::milliseconds((t * 1000.0).round() as i64);
    let hour = at.num_seconds_from_midnight() as f64 / 3600.0 + cfg.acquisition.utc_offset_hours;
    Ok(TimeOfDay::from_local_hour(hour))
}

/// Constellation passes plus tasked acquisitions, sorted by time; ties keep
/// passes (by satellite) before tasked shots (by list order).
pub fn plan_events(cfg: &ScenarioConfig) -> Result<Vec<PlannedEvent>, PipelineError> {
    let a = &cfg.acquisition;
    let epoch = cfg.epoch().map_err(PipelineError::Plan)?;
    let mut raw: Vec<(f64, EventSource, f64, f64, f64)> = Vec::new();
    if !a.satellites.is_empty() {
        let c = cfg.constellation();
        let events = schedule_acquisitions(&c, a.coarse_step_s).map_err(|e| PipelineError::Plan(e.to_string()))?;
        for e in events {
            let sat = e.satellite_index.expect("scheduled events name their satellite");
            let pass = c.pass_index(sat, e.time_s);
            raw.push((e.time_s, EventSource::Pass { satellite: sat, pass }, e.off_nadir_deg, e.azimuth_deg, e.altitude_m));
        }
    }
    for (i, t) in a.tasked.iter().enumerate() {
        raw.push((
            t.time_s,
            EventSource::Tasked { index: i },
            t.off_nadir_deg,
            t.azimuth_deg,
            t.altitude_m.unwrap_or(a.altitude_m),
        ));
    }
    let rank = |s: &EventSource| match *s {
        EventSource::Pass { satellite, .. } => (0, satellite),
        EventSource::Tasked { index } => (1, index),
    };
    raw.sort_by(|x, y| x.0.total_cmp(&y.0).then(rank(&x.1).cmp(&rank(&y.1))));

    let seed = cfg.scene.seed;
    raw.into_iter()
        .enumerate()
        .map(|(index, (time_s, source, off_nadir_deg, azimuth_deg, altitude_m))| {
            let key = source.key();
            Ok(PlannedEvent {
                index,
                source,
                time_s,
                timestamp: format_event_time(epoch, time_s),
                off_nadir_deg,
                azimuth_deg,
                altitude_m,
                time_of_day: local_time_of_day(cfg, time_s)?,
                activity_level: activity_at(&cfg.activity, time_s),
                seeds: EventSeeds {
                    activity: derive_seed(seed, key, "activity"),
                    synthesis: derive_seed(seed, key, "synthesis"),
                    clouds: derive_seed(seed, key, "clouds"),
                },
            })
        })
        .collect()
}

pub fn requests_per_event(cfg: &ScenarioConfig) -> usize {
    match cfg.synthesis.policy {
        CombinationPolicy::Single => 1,
        CombinationPolicy::All16 => 16,
    }
}

/// Human-readable plan; performs no I/O.
pub fn describe_scenario(cfg: &ScenarioConfig) -> Result<String, PipelineError> {
    let events = plan_events(cfg)?;
    let epoch = cfg.epoch().map_err(PipelineError::Plan)?;
    let a = &cfg.acquisition;
    let per = requests_per_event(cfg);
    let mut s = String::new();
    let _ = writeln!(s, "scenario {} (config {})", cfg.scene.seed, &cfg.digest()[..12]);
    let _ = writeln!(
        s,
        "scene {}x{} cells of {} m",
        cfg.scene.rows, cfg.scene.cols, cfg.scene.cell_size_m
    );
    let _ = writeln!(
        s,
        "window {} to {}",
        format_event_time(epoch, a.start_s),
        format_event_time(epoch, a.end_s)
    );
    let _ = writeln!(s, "backend {}", cfg.synthesis.backend);
    let _ = writeln!(s, "{} events", events.len());
    for e in &events {
        let origin = match e.source {
            EventSource::Pass { satellite, pass } => format!("satellite {satellite} pass {pass}"),
            EventSource::Tasked { index } => format!("tasked {index}"),
        };
        let gsd = ground_sampling_distance(&e.params(cfg))
            .map(|g| format!("{:.3} x {:.3} m", g.across_m, g.along_m))
            .unwrap_or_else(|e| format!("invalid ({e})"));
        let _ = writeln!(
            s,
            "  #{} {} {}: off-nadir {:.2} deg, azimuth {:.1} deg, {}, activity {:.2}, gsd {}",
            e.index,
            e.timestamp,
            origin,
            e.off_nadir_deg,
            e.azimuth_deg,
            e.time_of_day,
            e.activity_level,
            gsd
        );
    }
    let policy = match cfg.synthesis.policy {
        CombinationPolicy::Single => "single",
        CombinationPolicy::All16 => "all16",
    };
    let calls = events.len() * per;
    let _ = writeln!(s, "policy {policy}: {per} requests per event");
    let _ = writeln!(s, "{calls} synthesis calls");
    let _ = writeln!(
        s,
        "products: {n} renders, {n} control bundles, {calls} synthesized images, {calls} final images",
        n = events.len()
    );
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::parse_config;

    #[test]
    fn step_function() {
        let s = [ActivityEntry { time_s: 10.0, level: 0.2 }, ActivityEntry { time_s: 20.0, level: 0.9 }];
        assert_eq!(activity_at(&s, 0.0), 0.2);
        assert_eq!(activity_at(&s, 10.0), 0.2);
        assert_eq!(activity_at(&s, 19.9), 0.2);
        assert_eq!(activity_at(&s, 20.0), 0.9);
        assert_eq!(activity_at(&s, 1e9), 0.9);
        assert_eq!(activity_at(&[], 5.0), 0.0);
    }

    #[test]
    fn keys_are_stable_under_insertion() {
        let base = "[scene]\nseed = 3\n[[acquisition.tasked]]\ntime_s = 500\noff_nadir_deg = 10\n";
        let more = format!("{base}[[acquisition.tasked]]\ntime_s = 100\noff_nadir_deg = 30\n");
        let a = plan_events(&parse_config(base).unwrap()).unwrap();
        let b = plan_events(&parse_config(&more).unwrap()).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b[1].time_s, 500.0);
        assert_eq!(a[0].seeds, b[1].seeds);
    }

    #[test]
    fn empty_plan() {
        let cfg = parse_config("[scene]\nseed = 1\n").unwrap();
        let d = describe_scenario(&cfg).unwrap();
        assert!(d.contains("\n0 events\n"), "{d}");
        assert!(d.contains("0 synthesis calls"));
    }

    #[test]
    fn auto_time_of_day() {
        let text = "[scene]\nseed = 1\n[acquisition]\nepoch = \"2024-03-01T00:00:00Z\"\nutc_offset_hours = 2\n\
                    [[acquisition.tasked]]\ntime_s = 36000\noff_nadir_deg = 5\n";
        let e = plan_events(&parse_config(text).unwrap()).unwrap();
        assert_eq!(e[0].time_of_day, TimeOfDay::Day);
        assert_eq!(e[0].stem(1), "1_2024-03-01T10-00-00.000Z_5.0");
    }
}
