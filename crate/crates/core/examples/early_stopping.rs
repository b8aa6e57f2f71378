//! The plateau-driven schedule: two learning-rate drops, then stop.

use colorproxy::transfer::{EarlyStopState, StopEvent};

fn main() {
    let scores = [0.20, 0.31, 0.35, 0.35, 0.34, 0.35, 0.41, 0.42, 0.42, 0.40, 0.41, 0.43, 0.43, 0.42, 0.43, 0.44];
    let mut state = EarlyStopState::new(3, 0.0);
    for (i, &s) in scores.iter().enumerate() {
        let epoch = 0.5 * (i + 1) as f64;
        let event = state.observe(s, epoch);
        println!("epoch {epoch:>4.1}  score {s:.2}  {event:?}");
        if event == StopEvent::Stop {
            break;
        }
    }
    println!("drops at {:?}, stop at {:?}", state.drop_epochs, state.stop_epoch);
}
