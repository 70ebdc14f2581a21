fn main() {
    std::process::exit(mastervein::cli::run_cli(std::env::args_os()));
}
