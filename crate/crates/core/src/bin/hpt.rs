fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(hpt::cli::main_with(&args));
}
