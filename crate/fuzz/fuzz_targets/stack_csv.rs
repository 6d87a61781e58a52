#![no_main]
use libfuzzer_sys::fuzz_target;

use claeo_core::history::HistoryStack;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(stack) = HistoryStack::from_csv(text, None) {
        let back = HistoryStack::from_csv(&stack.to_csv(), None).expect("written stack does not parse");
        assert_eq!(back, stack);
        let _ = stack.min_singular_value();
    }
});
