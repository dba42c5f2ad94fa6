use std::env;
use std::path::PathBuf;

fn main() {
    let crate_dir = env::var("CARGO_MANIFEST_DIR").unwrap();
    let out = PathBuf::from(&crate_dir).join("include").join("tristream.h");
    std::fs::create_dir_all(out.parent().unwrap()).unwrap();

    match cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_language(cbindgen::Language::C)
        .with_include_guard("TRISTREAM_H")
        .with_cpp_compat(true)
        .with_documentation(true)
        .generate()
    {
        Ok(b) => {
            b.write_to_file(&out);
        }
        // Header generation must not break `cargo check` in tooling that
        // parses the crate while it is mid-edit.
        Err(e) => println!("cargo:warning=cbindgen failed: {e}"),
    }
    println!("cargo:rerun-if-changed=src/lib.rs");
}
