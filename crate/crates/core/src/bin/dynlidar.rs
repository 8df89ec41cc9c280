fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(dynlidar::cli::run_cli(&args));
}
