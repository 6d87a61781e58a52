#![no_main]
use libfuzzer_sys::fuzz_target;

use claeo_cli::scenarios::validate;
use claeo_cli::RunSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(spec) = RunSpec::parse(text) else {
        return;
    };
    let _ = validate(&spec);

    // the echo must parse back to the same spec
    let echo = spec.echo();
    let back = RunSpec::parse(&echo).expect("echo does not parse");
    assert_eq!(back.echo(), echo);
});
