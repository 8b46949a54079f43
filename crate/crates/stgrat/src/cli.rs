//! Command-line entry point (under construction).

pub fn run() -> i32 {
    eprintln!("stgrat: not yet wired");
    2
}
