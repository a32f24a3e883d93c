fn main() {
    std::process::exit(s2rl_cli::cli_run(std::env::args_os()));
}
