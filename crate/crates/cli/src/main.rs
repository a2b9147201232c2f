use clap::Parser;
use vortwave_cli::{apply_thread_cap, run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = apply_thread_cap() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
    match run(&cli.command) {
        Ok(report) => {
            for c in &report.checks {
                println!("PASS {} = {:e} ({} {:e})", c.name, c.measured, c.relation, c.threshold);
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
