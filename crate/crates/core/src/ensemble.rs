//! Majority-vote fusion of decoded predictions from several systems.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event::{angular_distance, classes, Event, SeldFrameLabels};
use crate::labels::N_TRACKS;

/// Decoded output of one system.
#[derive(Debug, Clone, PartialEq)]
pub struct EventPredictionSet {
    pub system_id: u32,
    pub labels: SeldFrameLabels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    /// Distinct systems that must agree.
    pub quorum: usize,
    /// Largest pairwise azimuth difference inside an agreeing group, inclusive.
    pub angle_thresh_deg: f64,
    /// Classes accepted on a single detection.
    pub single_vote_classes: BTreeSet<usize>,
    /// Upper bound on emitted events per class and frame.
    pub max_per_class: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            quorum: 2,
            angle_thresh_deg: 20.0,
            single_vote_classes: BTreeSet::from([classes::BELL, classes::KNOCK]),
            max_per_class: N_TRACKS,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Vote {
    system: u32,
    event: Event,
}

#[derive(Debug, Clone)]
struct Cluster {
    members: Vec<Vote>,
}

impl Cluster {
    fn distinct_systems(&self) -> usize {
        self.members.iter().map(|v| v.system).collect::<BTreeSet<_>>().len()
    }

    fn mean_azimuth(&self) -> f64 {
        self.members.iter().map(|v| v.event.azimuth_deg).sum::<f64>() / self.members.len() as f64
    }

    fn mean_distance(&self) -> f64 {
        self.members.iter().map(|v| v.event.distance_m).sum::<f64>() / self.members.len() as f64
    }

    /// Complete-linkage distance, or `None` if the union would hold two votes of one system.
    fn linkage(&self, other: &Self) -> Option<f64> {
        let mut worst = 0.0f64;
        for a in &self.members {
            for b in &other.members {
                if a.system == b.system {
                    return None;
                }
                worst = worst.max(angular_distance(a.event.azimuth_deg, b.event.azimuth_deg));
            }
        }
        Some(worst)
    }
}

/// Greedy agglomerative grouping: repeatedly merge the closest admissible pair until no
/// pair stays within the threshold.
fn cluster_votes(mut votes: Vec<Vote>, thresh: f64) -> Vec<Cluster> {
    votes.sort_by(|a, b| {
        (a.system, a.event.azimuth_deg, a.event.distance_m, a.event.onscreen)
            .partial_cmp(&(b.system, b.event.azimuth_deg, b.event.distance_m, b.event.onscreen))
            .expect("finite azimuths")
    });
    let mut clusters: Vec<Cluster> = votes.into_iter().map(|v| Cluster { members: vec![v] }).collect();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                if let Some(d) = clusters[i].linkage(&clusters[j]) {
                    if d <= thresh && best.is_none_or(|(bd, _, _)| d < bd) {
                        best = Some((d, i, j));
                    }
                }
            }
        }
        let Some((_, i, j)) = best else { break };
        let absorbed = clusters.remove(j);
        clusters[i].members.extend(absorbed.members);
    }
    clusters
}

/// Fuses systems frame by frame and class by class. A group of agreeing detections is
/// emitted at its mean azimuth and distance, on-screen if any member says so.
pub fn combine(systems: &[EventPredictionSet], cfg: &EnsembleConfig) -> Result<SeldFrameLabels> {
    let first = systems.first().ok_or_else(|| Error::invalid("ensemble needs at least one system"))?;
    let n_frames = first.labels.n_frames();
    if let Some(s) = systems.iter().find(|s| s.labels.n_frames() != n_frames) {
        return Err(Error::data(format!(
            "system {} has {} frames, system {} has {n_frames}",
            s.system_id,
            s.labels.n_frames(),
            first.system_id
        )));
    }
    let ids: BTreeSet<u32> = systems.iter().map(|s| s.system_id).collect();
    if ids.len() != systems.len() {
        return Err(Error::invalid("duplicate system ids"));
    }
    if systems.iter().any(|s| s.labels.iter().any(|(_, e)| !e.azimuth_deg.is_finite() || !e.distance_m.is_finite())) {
        return Err(Error::data("non-finite prediction"));
    }

    let mut out = SeldFrameLabels::new(n_frames);
    for t in 0..n_frames {
        let class_ids: BTreeSet<usize> = systems.iter().flat_map(|s| s.labels.frame(t).iter().map(|e| e.class_id)).collect();
        for c in class_ids {
            let votes: Vec<Vote> = systems
                .iter()
                .flat_map(|s| s.labels.frame(t).iter().filter(|e| e.class_id == c).map(|&event| Vote { system: s.system_id, event }))
                .collect();
            let needed = if cfg.single_vote_classes.contains(&c) { 1 } else { cfg.quorum };
            let mut kept: Vec<Cluster> = cluster_votes(votes, cfg.angle_thresh_deg)
                .into_iter()
                .filter(|cl| cl.distinct_systems() >= needed)
                .collect();
            kept.sort_by(|a, b| {
                b.members
                    .len()
                    .cmp(&a.members.len())
                    .then(a.mean_azimuth().total_cmp(&b.mean_azimuth()))
            });
            for (k, cl) in kept.iter().take(cfg.max_per_class).enumerate() {
                let onscreen = cl.members.iter().any(|v| v.event.onscreen);
                out.push(t, Event::new(c, k as u32, cl.mean_azimuth(), cl.mean_distance(), onscreen));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn system(id: u32, events: &[Event]) -> EventPredictionSet {
        let mut labels = SeldFrameLabels::new(1);
        for e in events {
            labels.push(0, *e);
        }
        EventPredictionSet { system_id: id, labels }
    }

    #[test]
    fn quorum_and_mean() {
        let cfg = EnsembleConfig::default();
        let out = combine(
            &[system(0, &[Event::new(0, 0, 10.0, 2.0, false)]), system(1, &[Event::new(0, 0, 20.0, 4.0, true)])],
            &cfg,
        )
        .unwrap();
        assert_eq!(out.frame(0), &[Event::new(0, 0, 15.0, 3.0, true)]);

        let out = combine(
            &[system(0, &[Event::new(0, 0, 10.0, 2.0, false)]), system(1, &[Event::new(0, 0, 40.0, 2.0, false)])],
            &cfg,
        )
        .unwrap();
        assert!(out.is_silent());

        // Exactly at the threshold still agrees.
        let out = combine(
            &[system(0, &[Event::new(3, 0, -10.0, 2.0, false)]), system(1, &[Event::new(3, 0, 10.0, 2.0, false)])],
            &cfg,
        )
        .unwrap();
        assert_eq!(out.event_count(), 1);
    }

    #[test]
    fn single_vote_classes() {
        let cfg = EnsembleConfig::default();
        let out = combine(&[system(4, &[Event::new(classes::BELL, 0, 5.0, 1.0, false)])], &cfg).unwrap();
        assert_eq!(out.frame(0), &[Event::new(classes::BELL, 0, 5.0, 1.0, false)]);
        let out = combine(&[system(4, &[Event::new(classes::MUSIC, 0, 5.0, 1.0, false)])], &cfg).unwrap();
        assert!(out.is_silent());
    }

    #[test]
    fn one_system_cannot_vote_twice() {
        let cfg = EnsembleConfig::default();
        let out = combine(&[system(0, &[Event::new(0, 0, 10.0, 2.0, false), Event::new(0, 1, 12.0, 2.0, false)])], &cfg).unwrap();
        assert!(out.is_silent());
    }

    #[test]
    fn complete_linkage_splits_chains() {
        // 0 -- 15 -- 30: neighbours agree but the ends are 30 apart, so only one pair merges.
        let cfg = EnsembleConfig::default();
        let out = combine(
            &[
                system(0, &[Event::new(0, 0, 0.0, 1.0, false)]),
                system(1, &[Event::new(0, 0, 15.0, 1.0, false)]),
                system(2, &[Event::new(0, 0, 31.0, 1.0, false)]),
            ],
            &cfg,
        )
        .unwrap();
        assert_eq!(out.frame(0), &[Event::new(0, 0, 7.5, 1.0, false)]);
    }

    #[test]
    fn caps_per_class() {
        let cfg = EnsembleConfig::default();
        let azs = [-80.0, -40.0, 0.0, 40.0, 80.0];
        let evs: Vec<Event> = azs.iter().enumerate().map(|(i, &a)| Event::new(11, i as u32, a, 1.0, false)).collect();
        let out = combine(&[system(0, &evs)], &cfg).unwrap();
        let got: Vec<f64> = out.frame(0).iter().map(|e| e.azimuth_deg).collect();
        assert_eq!(got, vec![-80.0, -40.0, 0.0]);
    }

    #[test]
    fn rejects_misaligned() {
        let a = system(0, &[]);
        let b = EventPredictionSet { system_id: 1, labels: SeldFrameLabels::new(4) };
        assert!(matches!(combine(&[a, b], &EnsembleConfig::default()), Err(Error::Data(_))));
        assert!(combine(&[], &EnsembleConfig::default()).is_err());
    }

    fn systems_strategy() -> impl Strategy<Value = Vec<EventPredictionSet>> {
        prop::collection::vec(
            prop::collection::vec((0..13usize, -90.0f64..90.0, 0.5f64..5.0, any::<bool>()), 0..5),
            1..5,
        )
        .prop_map(|sys| {
            sys.into_iter()
                .enumerate()
                .map(|(i, evs)| {
                    let events: Vec<Event> =
                        evs.iter().enumerate().map(|(k, &(c, a, d, on))| Event::new(c, k as u32, a, d, on)).collect();
                    system(i as u32 * 3 + 1, &events)
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn order_invariant_and_capped(systems in systems_strategy(), rot in 0usize..5) {
            let cfg = EnsembleConfig::default();
            let a = combine(&systems, &cfg).unwrap();
            let mut shuffled = systems.clone();
            let r = rot % shuffled.len();
            shuffled.rotate_left(r);
            shuffled.reverse();
            prop_assert_eq!(&a, &combine(&shuffled, &cfg).unwrap());
            for c in 0..13 {
                prop_assert!(a.class_events(0, c).len() <= 3);
            }
        }

        #[test]
        fn single_system_behaviour(systems in systems_strategy()) {
            let cfg = EnsembleConfig::default();
            let s = &systems[0];
            let out = combine(std::slice::from_ref(s), &cfg).unwrap();
            prop_assert!(out.iter().all(|(_, e)| cfg.single_vote_classes.contains(&e.class_id)));
            for c in cfg.single_vote_classes.iter().copied() {
                let mut want: Vec<(u64, u64)> = s.labels.class_events(0, c).iter().map(|e| (e.azimuth_deg.to_bits(), e.distance_m.to_bits())).collect();
                let got: Vec<(u64, u64)> = out.class_events(0, c).iter().map(|e| (e.azimuth_deg.to_bits(), e.distance_m.to_bits())).collect();
                want.sort();
                let mut got_sorted = got.clone();
                got_sorted.sort();
                if want.len() <= 3 {
                    prop_assert_eq!(got_sorted, want);
                }
            }
        }

        #[test]
        fn onscreen_is_or_of_members(a in -90.0f64..90.0, delta in 0.0f64..20.0, on1 in any::<bool>(), on2 in any::<bool>()) {
            let b = (a + delta).min(90.0);
            let out = combine(&[system(0, &[Event::new(0, 0, a, 1.0, on1)]), system(1, &[Event::new(0, 0, b, 1.0, on2)])], &EnsembleConfig::default()).unwrap();
            prop_assert_eq!(out.event_count(), 1);
            prop_assert_eq!(out.frame(0)[0].onscreen, on1 || on2);
        }
    }
}
