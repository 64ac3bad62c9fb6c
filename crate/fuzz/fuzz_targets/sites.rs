#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(v) = emsim::io::parse_sites(text) {
        let once = emsim::io::write_sites(&v);
        assert_eq!(once, emsim::io::write_sites(&emsim::io::parse_sites(&once).expect("re-parse")));
    }
});
