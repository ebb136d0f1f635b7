fn main() {
    std::process::exit(coverobs::cli::main_entry());
}
