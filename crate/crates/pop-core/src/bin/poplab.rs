fn main() {
    std::process::exit(pop_core::cli::run());
}
