fn main() {
    std::process::exit(pulseflow::cli::main());
}
