#![no_main]

use libfuzzer_sys::fuzz_target;
use nanoinv::formats::{parse_curve, write_curve};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(curve) = parse_curve(text) {
        assert_eq!(curve.r.len(), curve.g.len());
        assert!(curve.r.windows(2).all(|w| w[0] < w[1]));
        let _ = parse_curve(&write_curve(&curve));
    }
});
