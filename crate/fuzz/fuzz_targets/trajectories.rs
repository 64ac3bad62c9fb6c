#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(v) = emsim::io::parse_trajectories(text) {
        let once = emsim::io::format_trajectories(&v);
        let again = emsim::io::format_trajectories(&emsim::io::parse_trajectories(&once).expect("re-parse"));
        assert_eq!(once, again);
    }
});
