#![no_main]

use libfuzzer_sys::fuzz_target;
use stagewise::gantt::render_gantt;
use stagewise::sim::{parse_trace_csv, summarize_trace, trace_to_csv_string};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_trace_csv(text) {
        let _ = summarize_trace(&records);
        let _ = render_gantt(&records);
        let again = parse_trace_csv(&trace_to_csv_string(&records)).expect("written trace parses");
        assert_eq!(again.len(), records.len());
    }
});
