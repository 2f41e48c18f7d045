#![no_main]

use libfuzzer_sys::fuzz_target;
use stagewise::hp::HpValue;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(v) = HpValue::parse(text) {
        let again = HpValue::parse(v.as_str()).expect("canonical form parses");
        assert_eq!(again, v);
    }
});
