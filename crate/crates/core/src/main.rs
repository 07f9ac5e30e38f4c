fn main() {
    let code = pkan_core::cli::run(std::env::args_os(), std::io::stdout(), std::io::stderr());
    std::process::exit(code);
}
