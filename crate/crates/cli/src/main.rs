use clap::Parser;

fn main() {
    let cli = match mest_cli::Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = mest_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(mest_cli::exit_code(&e));
    }
}
