fn main() {
    std::process::exit(tbx::cli::main());
}
