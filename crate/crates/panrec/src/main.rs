fn main() {
    std::process::exit(panrec::cli::main());
}
