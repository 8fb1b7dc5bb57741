//! Location-aware detection scores for a small prediction set.

use stereo_seld::event::{classes, Event, SeldFrameLabels};
use stereo_seld::metrics::{evaluate, MetricsConfig};

fn main() -> stereo_seld::Result<()> {
    let c = classes::TELEPHONE;
    let refs = SeldFrameLabels::from_frames(vec![
        vec![Event::new(c, 0, 0.0, 2.0, true)],
        vec![Event::new(c, 0, 0.0, 2.0, true)],
        vec![Event::new(c, 0, 0.0, 2.0, false)],
    ]);
    let preds = SeldFrameLabels::from_frames(vec![
        vec![Event::new(c, 0, 8.0, 2.4, true)],  // hit
        vec![Event::new(c, 0, 25.0, 2.0, true)], // too far off in azimuth
        vec![Event::new(c, 0, 3.0, 5.0, false)], // distance error 150 %
    ]);
    let report = evaluate(&refs, &preds, classes::COUNT, &MetricsConfig::default())?;
    print!("{}", report.table("example"));
    Ok(())
}
