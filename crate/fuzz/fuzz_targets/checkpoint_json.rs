#![no_main]

use libfuzzer_sys::fuzz_target;
use neucrowd::nn::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::from_json(data) {
        let _ = ckpt.into_net();
    }
});
