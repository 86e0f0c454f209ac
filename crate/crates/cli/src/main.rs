fn main() {
    std::process::exit(obsattack_cli::cli_dispatch(std::env::args_os()));
}
