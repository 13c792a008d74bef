fn main() {
    std::process::exit(meshgen::cli::main());
}
