#![no_main]

use libfuzzer_sys::fuzz_target;
use stagewise::report::{compare_rows, format_csv, format_table, parse_report};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(report) = parse_report(text) {
        let rows = compare_rows(std::slice::from_ref(&report));
        let _ = format_table(&rows);
        let _ = format_csv(&rows);
    }
});
