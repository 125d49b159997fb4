#![no_main]

use libfuzzer_sys::fuzz_target;
use nanoinv::diffusion::NoiseSchedule;
use nanoinv::pipeline::plan::{parse_grid, read_plan, write_plan};
use nanoinv::pipeline::ConfigFile;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(grid) = parse_grid(text, 100) {
        assert!(grid.iter().all(|&(a, b)| a <= b && b <= 100));
    }
    let sched = NoiseSchedule::linear(100, 1e-3, 0.2).unwrap();
    if let Ok(cfg) = ConfigFile::parse(text) {
        if let Ok(plan) = read_plan(&cfg, &sched) {
            let back = ConfigFile::parse(&write_plan(&plan, 0.1)).unwrap();
            assert_eq!(read_plan(&back, &sched).unwrap(), plan);
        }
    }
});
