//! Majority-vote fusion of three systems.

use stereo_seld::ensemble::{combine, EnsembleConfig, EventPredictionSet};
use stereo_seld::event::{classes, Event, SeldFrameLabels};

fn system(id: u32, events: Vec<Event>) -> EventPredictionSet {
    EventPredictionSet { system_id: id, labels: SeldFrameLabels::from_frames(vec![events]) }
}

fn main() -> stereo_seld::Result<()> {
    let speech = classes::FEMALE_SPEECH;
    let systems = [
        system(0, vec![Event::new(speech, 0, 12.0, 2.0, false), Event::new(classes::BELL, 0, -70.0, 5.0, false)]),
        system(1, vec![Event::new(speech, 0, 20.0, 2.4, true)]),
        system(2, vec![Event::new(speech, 0, -60.0, 1.0, false)]),
    ];
    let fused = combine(&systems, &EnsembleConfig::default())?;
    for e in fused.frame(0) {
        println!(
            "{:<14} azimuth {:6.1} distance {:.2} on-screen {}",
            classes::NAMES[e.class_id],
            e.azimuth_deg,
            e.distance_m,
            e.onscreen
        );
    }
    Ok(())
}
