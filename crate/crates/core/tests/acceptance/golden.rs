//! A checked-in sentence labeled byte-for-byte against its checked-in
//! label table.

use std::path::PathBuf;

use pausekit::corpus::{label_alignment, read_alignment_file};
use pausekit::{DurationCategorizer, LabeledSentence, Vocabulary};

use crate::report;

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

pub fn table(s: &LabeledSentence) -> String {
    let mut out = String::from("token\tp_rp\tc_rp\tp_pip\tc_pip\n");
    for (i, t) in s.tokens.iter().enumerate() {
        out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", t.canonical(), s.p_rp[i], s.c_rp[i], s.p_pip[i], s.c_pip[i]));
    }
    out
}

pub fn labels() -> bool {
    let vocab = Vocabulary::from_file(data("golden.vocab")).expect("golden vocabulary");
    let alignment = read_alignment_file(data("golden.align")).expect("golden alignment");
    let expected = std::fs::read(data("golden.labels.tsv")).expect("golden labels");
    let labeled = label_alignment("golden", &alignment, &vocab, &DurationCategorizer::default()).expect("labels");
    let got = table(&labeled);
    let pass = got.as_bytes() == expected.as_slice();
    if !pass {
        println!("{got}");
    }
    report("Golden labeling", pass, &format!("{} tokens, {} bytes compared", labeled.len(), expected.len()))
}
