#![no_main]

use libfuzzer_sys::fuzz_target;
use neucrowd::io::Manifest;

fuzz_target!(|data: &[u8]| {
    let _ = Manifest::from_json(data);
});
