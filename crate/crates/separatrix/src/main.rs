fn main() {
    std::process::exit(separatrix::cli::main_entry());
}
