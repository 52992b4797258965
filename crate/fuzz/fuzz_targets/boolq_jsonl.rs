#![no_main]

use heft_core::tasks::{read_boolq_jsonl, write_boolq_jsonl};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(rows) = read_boolq_jsonl(data) {
        let mut out = Vec::new();
        write_boolq_jsonl(&mut out, &rows).unwrap();
        assert_eq!(read_boolq_jsonl(&out[..]).unwrap(), rows);
    }
});
