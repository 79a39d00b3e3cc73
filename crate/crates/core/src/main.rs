fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(textinfill::cli::cmd_dispatch(&args));
}
