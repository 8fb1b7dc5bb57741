//! Multi-track targets and the permutation-invariant ADPIT loss.

use stereo_seld::event::{classes, Event, SeldFrameLabels};
use stereo_seld::labels::{adpit_candidates, adpit_grad, adpit_loss, decode, encode, DecodeThresholds};

fn main() -> stereo_seld::Result<()> {
    let mut labels = SeldFrameLabels::new(2);
    labels.push(0, Event::new(classes::FOOTSTEPS, 0, 30.0, 2.0, true));
    labels.push(0, Event::new(classes::FOOTSTEPS, 1, -45.0, 4.0, false));
    labels.push(1, Event::new(classes::MUSIC, 0, 120.0, 3.0, false));

    let target = encode(&labels, classes::COUNT)?;
    println!("frame 0 footsteps tracks: {:?}", target.class_frame(0, classes::FOOTSTEPS));
    // Rear sources fold to the front: 120 degrees decodes as 60.
    println!("decoded: {:?}", decode(&target, DecodeThresholds::default()).frames());

    println!("candidates for two events: {:?}", adpit_candidates(2)?);
    // Any onto track map is a perfect answer: here the first footsteps source is
    // duplicated onto track 2 and the lone music event onto all three tracks.
    let mut pred = target.clone();
    *pred.track_mut(0, classes::FOOTSTEPS, 2) = *target.track(0, classes::FOOTSTEPS, 0);
    for n in 1..3 {
        *pred.track_mut(1, classes::MUSIC, n) = *target.track(1, classes::MUSIC, 0);
    }
    let report = adpit_loss(&pred, &labels)?;
    println!("loss of a duplicated arrangement {:.3e}", report.total);
    println!("encoded target alone scores {:.3e} (unfilled tracks count)", adpit_loss(&target, &labels)?.total);

    pred.data_mut().iter_mut().for_each(|v| *v *= 0.9);
    let report = adpit_loss(&pred, &labels)?;
    let grad = adpit_grad(&pred, &labels)?;
    let norm = grad.data().iter().map(|g| g * g).sum::<f64>().sqrt();
    println!("loss after shrinking {:.3e}, gradient norm {norm:.3e}", report.total);
    Ok(())
}
