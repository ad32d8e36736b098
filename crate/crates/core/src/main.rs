use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match nplf::cli::Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { nplf::cli::EXIT_USAGE } else { nplf::cli::EXIT_OK };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = nplf::cli::run(cli) {
        eprintln!("error: {}", e.message);
        std::process::exit(e.code);
    }
}
