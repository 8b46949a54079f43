fn main() {
    std::process::exit(stgrat::cli::run());
}
