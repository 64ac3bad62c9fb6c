#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(v) = emsim::io::parse_trace(text, 5.0) {
        let once = emsim::io::format_trace(&v);
        assert_eq!(once, emsim::io::format_trace(&emsim::io::parse_trace(&once, 5.0).expect("re-parse")));
    }
});
