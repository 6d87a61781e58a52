#![no_main]
use libfuzzer_sys::fuzz_target;

use claeo_cli::trace_csv::{read_trace, write_trace};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(trace) = read_trace(text) {
            let written = write_trace(&trace);
            let again = read_trace(&written).expect("written trace does not parse");
            assert_eq!(write_trace(&again), written);
        }
    }
});
