use std::io::Write;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let done = morphrec::cli::run(&args);
    print!("{}", done.stdout);
    eprint!("{}", done.stderr);
    let _ = std::io::stdout().flush();
    std::process::exit(done.code);
}
