//! FOA augmentation: yaw rotation, frontal stereo rendering, segmentation and L/R swap.

use stereo_seld::datagen::{lr_swap, render_rotated, segment_clip, silence_filter, FoaClip, SplitMix64};
use stereo_seld::event::{Event, SeldFrameLabels};

fn main() -> stereo_seld::Result<()> {
    let sr = 24_000;
    let mut rng = SplitMix64::new(3);
    let signal: Vec<f32> = (0..20 * sr as usize).map(|_| (rng.next_f64() - 0.5) as f32).collect();
    let clip = FoaClip::plane_wave(&signal, 40.0, 0.0, sr);

    // Source active during the first 12 seconds only.
    let mut labels = SeldFrameLabels::new(200);
    for t in 0..120 {
        labels.push(t, Event::new(0, 0, 40.0, 2.0, false));
    }
    let segments = silence_filter(segment_clip(&clip, &labels, 5.0, 5.0)?);
    println!("{} of 4 segments carry events", segments.len());

    let seed = SplitMix64::new(2024);
    for seg in &segments {
        let mut r = seed.fork(seg.index as u64);
        for _ in 0..2 {
            let yaw = r.yaw_deg();
            let (stereo, lab) = render_rotated(seg, yaw, true);
            let az = lab.iter().next().map(|(_, e)| e.azimuth_deg);
            let (_, mirrored) = lr_swap(&stereo, &lab);
            let maz = mirrored.iter().next().map(|(_, e)| e.azimuth_deg);
            println!("segment {} yaw {yaw:6.1}: azimuth {az:?}, mirrored {maz:?}", seg.index);
        }
    }
    Ok(())
}
