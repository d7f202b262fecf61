fn main() {
    std::process::exit(afflab::cli::main_from_env());
}
