#![no_main]

use libfuzzer_sys::fuzz_target;
use nanoinv::formats::parse_matrix;
use nanoinv::graphrep::symmetrize;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = parse_matrix(text) {
        assert_eq!(m.data.len(), m.size * m.size);
        if m.size <= 64 {
            let _ = symmetrize(&m.data, m.size, 5.0, m.size as f64);
        }
    }
});
