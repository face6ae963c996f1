fn main() {
    let code = worksheet_cli::run(std::env::args_os(), &mut std::io::stdin().lock(), &mut std::io::stdout(), &mut std::io::stderr());
    std::process::exit(code);
}
