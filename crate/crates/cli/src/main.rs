use clap::Parser;

fn main() {
    let cli = cir_cli::Cli::parse();
    match cir_cli::run(&cli) {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            std::process::exit(outcome.exit_code());
        }
        Err(e) => {
            eprintln!("cirsim: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
