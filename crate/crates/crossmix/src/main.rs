use std::process::exit;

fn main() {
    exit(crossmix::cli::run(std::env::args_os()));
}
