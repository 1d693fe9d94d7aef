use std::process::Command;

// Embed an rpath to the libtorch shipped with the local PyTorch install so
// test and bench binaries run without LD_LIBRARY_PATH tweaks.
fn main() {
    let out = Command::new("python3")
        .args(["-c", "import os, torch; print(os.path.join(os.path.dirname(torch.__file__), 'lib'))"])
        .output();
    if let Ok(out) = out {
        if out.status.success() {
            let dir = String::from_utf8_lossy(&out.stdout).trim().to_string();
            println!("cargo:rustc-link-arg=-Wl,-rpath,{dir}");
        }
    }
}
