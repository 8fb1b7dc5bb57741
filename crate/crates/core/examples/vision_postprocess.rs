//! Pixel-to-direction mapping and keypoint-based on-screen correction.

use std::collections::BTreeMap;

use stereo_seld::event::{classes, Event, SeldFrameLabels};
use stereo_seld::vision::{keypoint_postprocess, pixel_to_doa, KeypointFrame, Person, PostprocessConfig, ReframeMap};

fn main() -> stereo_seld::Result<()> {
    let width = 640.0;
    for x in [0.0, 159.5, 319.5, 639.0] {
        println!("pixel {x:5.1} -> {:6.2} degrees", pixel_to_doa(x, width, 100.0)?);
    }
    let reframe = ReframeMap::new(1920.0, 960.0)?;
    println!("reframing (960, 480) of a 1920x960 frame -> {:?}", reframe.map(960.0, 480.0)?);

    let preds = SeldFrameLabels::from_frames(vec![vec![
        Event::new(classes::MALE_SPEECH, 0, 18.0, 2.0, false),
        Event::new(classes::MUSIC, 1, 18.0, 2.0, false),
    ]]);
    let nose = Person(BTreeMap::from([("nose".to_string(), [200.0, 120.0, 0.95])]));
    let kps = vec![KeypointFrame { frame: 0, persons: vec![nose] }];
    let post = keypoint_postprocess(&preds, &kps, &PostprocessConfig::new(width))?;
    for e in post.frame(0) {
        println!("{:<12} on-screen: {}", classes::NAMES[e.class_id], e.onscreen);
    }
    Ok(())
}
