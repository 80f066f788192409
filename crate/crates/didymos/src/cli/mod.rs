//! Command-line entry points.

pub fn main() {
    eprintln!("cli not wired yet");
}
