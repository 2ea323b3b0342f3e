//! Writes a small multi-register corpus plus evaluation items.
//!
//! Usage: `cargo run --example demo_corpus -- <out_dir> [sentences] [seed]`
//!
//! Produces one `<register>.txt` per register, `pairs.tsv` (minimal pairs built
//! by scrambling held-out sentences) and `sap.tsv` (targeted-surprisal items
//! built by swapping the first word for a nonce form).

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use curriculum_core::synth::{generate, SynthConfig, SynthSentence};

fn main() {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().expect("usage: demo_corpus <out_dir> [sentences] [seed]"));
    let sentences: usize = args.next().map_or(1000, |s| s.parse().expect("sentence count"));
    let seed: u64 = args.next().map_or(7, |s| s.parse().expect("seed"));
    fs::create_dir_all(&out).expect("create output dir");

    let corpus = generate(&SynthConfig {
        sentences,
        seed,
        ..Default::default()
    });
    let mut by_source: std::collections::BTreeMap<&str, String> = Default::default();
    for s in &corpus {
        let buf = by_source.entry(&s.source).or_default();
        buf.push_str(&s.text);
        buf.push('\n');
    }
    for (source, text) in &by_source {
        fs::write(out.join(format!("{source}.txt")), text).expect("write source");
    }

    // Held-out material comes from a different seed.
    let held_out: Vec<SynthSentence> = generate(&SynthConfig {
        sentences: 400,
        seed: seed ^ 0x5eed,
        long_fraction: 0.0,
        ..Default::default()
    });
    let usable: Vec<Vec<&str>> = held_out
        .iter()
        .map(|s| s.text.split_whitespace().collect::<Vec<_>>())
        .filter(|w| (5..=16).contains(&w.len()))
        .collect();

    let mut pairs = String::from("phenomenon\tgood\tbad\n");
    for words in usable.iter().take(20) {
        let mut swapped = words.clone();
        swapped.swap(1, 2);
        if swapped != *words {
            writeln!(pairs, "adjacent_swap\t{}\t{}", words.join(" "), swapped.join(" ")).unwrap();
        }
    }
    for words in usable.iter().skip(20).take(20) {
        let reversed: Vec<&str> = words.iter().rev().copied().collect();
        writeln!(pairs, "reversal\t{}\t{}", words.join(" "), reversed.join(" ")).unwrap();
    }
    fs::write(out.join("pairs.tsv"), pairs).expect("write pairs");

    let mut sap = String::from("construction\tambiguous\tunambiguous\ttarget_char_start\ttarget_char_end\tspillover\n");
    // Byte-level merges run across spaces, so a region boundary inside a
    // sentence can fall in the middle of a token. Anchoring the target at the
    // first word and letting the spillover run to the end avoids that.
    for words in usable.iter().skip(40).take(20) {
        let nonce = "Zvexquor";
        let mut altered = words.clone();
        altered[0] = nonce;
        writeln!(
            sap,
            "nonce_word\t{}\t{}\t0\t{},{}\t{}",
            altered.join(" "),
            words.join(" "),
            nonce.len(),
            words[0].chars().count(),
            words.len() - 1
        )
        .unwrap();
    }
    for words in usable.iter().skip(60).take(10) {
        let text = words.join(" ");
        writeln!(
            sap,
            "identical\t{text}\t{text}\t0\t{}\t{}",
            words[0].chars().count(),
            words.len() - 1
        )
        .unwrap();
    }
    fs::write(out.join("sap.tsv"), sap).expect("write sap items");
    println!("wrote {} sentences to {}", corpus.len(), out.display());
}
