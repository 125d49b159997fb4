#![no_main]

use libfuzzer_sys::fuzz_target;
use nanoinv::pipeline::data::dataset_spec;
use nanoinv::pipeline::{ConfigFile, Profile};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = ConfigFile::parse(text) else { return };
    for name in ["desk", "paper", "custom"] {
        if let Ok(p) = Profile::resolve(name, Some(&cfg)) {
            let _ = p.hash();
        }
    }
    let _ = dataset_spec(&cfg);
});
