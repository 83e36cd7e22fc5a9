use clap::Parser;
use labpipe_cli::{exit, Cli, Command, Io};

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("LP_LOG").unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // Usage errors are rejections; 2 is reserved for the network.
            std::process::exit(if e.use_stderr() { exit::REJECTED } else { exit::OK });
        }
    };
    let mut stdout = std::io::stdout();
    let code = match &cli.command {
        Command::Serve(args) => match labpipe_cli::serve(args, &mut stdout) {
            Ok(()) => exit::OK,
            Err(e) => {
                eprintln!("lp: {e}");
                exit::REJECTED
            }
        },
        Command::Agent { config } => match labpipe_cli::agent(config, &mut stdout) {
            Ok(()) => exit::OK,
            Err(e) => {
                eprintln!("lp: {e}");
                exit::REJECTED
            }
        },
        _ => {
            let mut stderr = std::io::stderr();
            labpipe_cli::run(&cli, &mut Io { out: &mut stdout, err: &mut stderr })
        }
    };
    std::process::exit(code);
}
