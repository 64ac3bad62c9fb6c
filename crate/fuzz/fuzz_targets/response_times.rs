#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(v) = emsim::io::parse_response_times(text) {
        let once = emsim::io::format_response_times(&v);
        let again = emsim::io::format_response_times(&emsim::io::parse_response_times(&once).expect("re-parse"));
        assert_eq!(once, again);
    }
});
