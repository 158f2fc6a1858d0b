fn main() {
    println!("cargo:rerun-if-changed=csrc/neutralize.c");
    cc::Build::new()
        .file("csrc/neutralize.c")
        .flag_if_supported("-std=c11")
        .warnings(true)
        .compile("debra_neutralize");
}
