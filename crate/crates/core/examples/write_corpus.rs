//! Writes a seeded English-like text corpus for use with the CLI.
//!
//! Run with: cargo run --example write_corpus -- corpus.txt [bytes] [seed]

use bip_core::textgen::synthetic_text;

fn main() -> std::io::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "corpus.txt".into());
    let bytes = args.next().and_then(|s| s.parse().ok()).unwrap_or(1 << 20);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let text = synthetic_text(seed, bytes);
    std::fs::write(&out, &text)?;
    println!("wrote {} bytes to {out}", text.len());
    Ok(())
}
