fn main() {
    std::process::exit(dropnet::cli::main());
}
