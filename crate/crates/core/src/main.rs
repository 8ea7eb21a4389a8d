use clap::Parser;
use tonal_l2s::cli::{execute, Cli};

fn main() {
    // one worker thread unless asked otherwise, so runs are bit-reproducible
    if std::env::var_os("RAYON_NUM_THREADS").is_none() {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    let argv: Vec<String> = std::env::args().collect();
    let cli = Cli::parse_from(&argv);
    if let Err(e) = execute(cli, &argv) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
