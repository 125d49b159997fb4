#![no_main]

use libfuzzer_sys::fuzz_target;
use nanoinv::formats::{parse_xyz, write_xyz};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cloud) = parse_xyz(text) {
        let again = parse_xyz(&write_xyz(&cloud)).expect("written xyz must parse");
        assert_eq!(again.len(), cloud.len());
    }
});
