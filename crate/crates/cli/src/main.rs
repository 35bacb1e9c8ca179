fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(divkit_cli::run(&args));
}
