use std::path::PathBuf;

fn main() {
    let crate_dir = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").unwrap());
    let out = PathBuf::from(std::env::var("OUT_DIR").unwrap()).join("dnres.h");

    let config = cbindgen::Config::from_file(crate_dir.join("cbindgen.toml"))
        .expect("cbindgen.toml parses");
    cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
        .expect("header generation")
        .write_to_file(&out);

    // Keep the committed header in sync; skip silently on read-only checkouts.
    let committed = crate_dir.join("include").join("dnres.h");
    let fresh = std::fs::read(&out).unwrap();
    if std::fs::read(&committed).ok().as_deref() != Some(&fresh[..]) {
        let _ = std::fs::create_dir_all(committed.parent().unwrap());
        let _ = std::fs::write(&committed, &fresh);
    }

    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
}
