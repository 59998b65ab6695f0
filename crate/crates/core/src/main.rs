fn main() {
    std::process::exit(pcfgnn::cli::main());
}
