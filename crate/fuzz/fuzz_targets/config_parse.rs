#![no_main]

use libfuzzer_sys::fuzz_target;
use neucrowd::config::parse_config_bytes;

fuzz_target!(|data: &[u8]| {
    let _ = parse_config_bytes(data);
});
