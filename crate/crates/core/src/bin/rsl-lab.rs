fn main() {
    std::process::exit(rsl_core::cli::run());
}
