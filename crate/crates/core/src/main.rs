fn main() { std::process::exit(ulsqueeze::cli::run(std::env::args_os())) }
