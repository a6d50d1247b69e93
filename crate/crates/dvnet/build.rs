use std::path::Path;

/// Locate a system OpenBLAS and emit link directives. The pthread build on
/// Debian/Ubuntu lives in a subdirectory that is not on the default linker
/// path, so we also emit an rpath for test and CLI binaries.
fn main() {
    println!("cargo:rerun-if-env-changed=OPENBLAS_LIB_DIR");

    let candidates = [
        std::env::var("OPENBLAS_LIB_DIR").unwrap_or_default(),
        "/usr/lib/x86_64-linux-gnu/openblas-pthread".to_string(),
        "/usr/lib/x86_64-linux-gnu/openblas".to_string(),
        "/usr/lib/x86_64-linux-gnu".to_string(),
        "/usr/lib64".to_string(),
        "/usr/lib".to_string(),
        "/opt/homebrew/opt/openblas/lib".to_string(),
    ];

    for dir in candidates.iter().filter(|d| !d.is_empty()) {
        let so = Path::new(dir).join("libopenblas.so");
        let a = Path::new(dir).join("libopenblas.a");
        let dylib = Path::new(dir).join("libopenblas.dylib");
        if so.exists() || a.exists() || dylib.exists() {
            println!("cargo:rustc-link-search=native={dir}");
            println!("cargo:rustc-link-arg=-Wl,-rpath,{dir}");
            println!("cargo:rustc-link-lib=openblas");
            return;
        }
    }
    // Fall back to whatever the default search path provides.
    println!("cargo:rustc-link-lib=openblas");
}
