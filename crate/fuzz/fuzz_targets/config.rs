#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    // Validation errors are expected; panics are not.
    let _ = emsim::io::parse_config_str(text, &[], Some("out"));
});
