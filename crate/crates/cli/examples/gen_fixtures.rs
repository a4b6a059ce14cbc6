//! Regenerates the bundled fixture set: `cargo run --release -p moma-cli --example gen_fixtures [dir]`.

fn main() {
    let root = std::env::args().nth(1).unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures").to_string());
    match moma_cli::fixtures::generate(std::path::Path::new(&root)) {
        Ok(files) => println!("wrote {} files under {root}", files.len()),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
