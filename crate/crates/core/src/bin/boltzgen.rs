fn main() {
    std::process::exit(boltzgen::cli::main_from_env());
}
