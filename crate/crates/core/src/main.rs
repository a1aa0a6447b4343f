fn main() {
    std::process::exit(hyperctl::cli::main_entry());
}
