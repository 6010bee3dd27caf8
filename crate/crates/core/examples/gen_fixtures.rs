// scratch: compute aligned t_m for the two reference schedules
use diffvox::diffusion::{align_schedule, default_training_schedule};

fn main() {
    let train = default_training_schedule();
    for (name, betas) in [
        ("grid", vec![3.6701e-7, 1.7032e-5, 7.908e-4, 7.6146e-1]),
        ("predictor", vec![3.2176e-4, 2.5743e-3, 2.5376e-2, 7.0414e-1]),
    ] {
        match align_schedule(&betas, &train) {
            Ok(s) => println!("{name}: t_m = {:?}", s.t_m.unwrap()),
            Err(e) => println!("{name}: ERROR {e}"),
        }
    }
}
