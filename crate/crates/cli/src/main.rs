fn main() {
    let stdout = std::io::stdout();
    let code = instruct_engine_cli::run(std::env::args_os(), &mut stdout.lock());
    std::process::exit(code);
}
