fn main() {
    for key in ["TARGET", "PROFILE"] {
        let v = std::env::var(key).unwrap_or_else(|_| "unknown".into());
        println!("cargo:rustc-env=AGC_BUILD_{key}={v}");
    }
    println!("cargo:rerun-if-changed=build.rs");
}
