fn main() {
    std::process::exit(laytoken::cli::main_entry());
}
