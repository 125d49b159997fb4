#![no_main]

use libfuzzer_sys::fuzz_target;
use nanoinv::formats::{parse_manifest, write_manifest};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_manifest(text) {
        let again = parse_manifest(&write_manifest(&records)).expect("written manifest must parse");
        assert_eq!(again, records);
    }
});
