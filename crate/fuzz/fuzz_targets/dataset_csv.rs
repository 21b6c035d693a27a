#![no_main]

use libfuzzer_sys::fuzz_target;
use neucrowd::crowd::Split;
use neucrowd::io::parse_dataset_csv;

fuzz_target!(|data: &[u8]| {
    let _ = parse_dataset_csv(data, Split::Train);
});
