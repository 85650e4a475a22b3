use sha2::{Digest, Sha256};

use mimgen::datagen::make_corpus;

const GOLDEN: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/corpus_n16_seed0.txt");

/// One `caption<TAB>sha256(pixels)` line per scene.
fn render_listing() -> String {
    make_corpus(16, 0, 32)
        .unwrap()
        .iter()
        .map(|s| {
            let digest: String = Sha256::digest(&s.image.data).iter().map(|b| format!("{b:02x}")).collect();
            format!("{}\t{digest}\n", s.caption)
        })
        .collect()
}

#[test]
fn corpus_matches_golden_listing() {
    let listing = render_listing();
    if std::env::var_os("MIMGEN_BLESS").is_some() {
        std::fs::write(GOLDEN, &listing).unwrap();
    }
    assert_eq!(listing, std::fs::read_to_string(GOLDEN).unwrap());
}
