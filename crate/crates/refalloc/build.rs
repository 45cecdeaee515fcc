use std::env;
use std::path::PathBuf;
use std::process::Command;

// (library name, source file, extra defines)
const OBJECTS: &[(&str, &str, &[&str])] = &[
    ("unsafe-unlink", "csrc/dlheap.c", &[]),
    ("checked", "csrc/dlheap.c", &["-DREF_CHECKED"]),
    ("page", "csrc/pageheap.c", &[]),
    ("counting", "csrc/countheap.c", &[]),
];

fn main() {
    let out = PathBuf::from(env::var("OUT_DIR").unwrap());
    let compiler = cc::Build::new().get_compiler();

    for (name, src, defines) in OBJECTS {
        let lib = out.join(format!("libhs_{}.so", name.replace('-', "_")));
        let status = Command::new(compiler.path())
            .args(["-std=gnu11", "-O1", "-g", "-fPIC", "-shared", "-fno-builtin"])
            .args(["-Wall", "-Wextra", "-Werror"])
            .args(*defines)
            .arg("-o")
            .arg(&lib)
            .arg(src)
            .status()
            .expect("failed to run the C compiler");
        assert!(status.success(), "building {name} failed");
        println!("cargo:rerun-if-changed={src}");
    }
    println!("cargo:rustc-env=REFALLOC_DIR={}", out.display());
}
