use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

// Refuses to build when a prompt template drifts from its pinned digest.
fn main() {
    let dir = Path::new("templates");
    let sums = fs::read_to_string(dir.join("SHA256SUMS")).expect("templates/SHA256SUMS missing");
    println!("cargo:rerun-if-changed=templates/SHA256SUMS");
    for line in sums.lines().filter(|l| !l.trim().is_empty()) {
        let (digest, name) = line
            .split_once("  ")
            .unwrap_or_else(|| panic!("malformed SHA256SUMS line: {line}"));
        let path = dir.join(name.trim());
        println!("cargo:rerun-if-changed={}", path.display());
        let bytes = fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let actual = hex::encode(Sha256::digest(&bytes));
        if actual != digest {
            panic!(
                "template {} has sha256 {actual}, pinned {digest}",
                path.display()
            );
        }
    }
}
