#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(v) = emsim::io::parse_calls(text) {
    // Whatever parses must be written back in a form that re-parses to the
    // same text: the writer output is a fixed point.
        let once = emsim::io::format_calls(&v);
        let again = emsim::io::format_calls(&emsim::io::parse_calls(&once).expect("written calls re-parse"));
        assert_eq!(once, again);
    }
});
