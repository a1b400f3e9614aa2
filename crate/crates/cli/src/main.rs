fn main() {
    std::process::exit(mmtg_cli::run(std::env::args_os()));
}
