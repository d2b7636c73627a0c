fn main() {
    std::process::exit(emim::cli::main_exit());
}
