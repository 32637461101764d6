fn main() {
    std::process::exit(fmerge_cli::run(std::env::args_os()));
}
