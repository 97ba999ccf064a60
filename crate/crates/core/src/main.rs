use std::io::{stderr, stdout};

fn main() {
    let code = groundrl::cli::main_with(std::env::args_os(), &mut stdout().lock(), &mut stderr().lock());
    std::process::exit(code);
}
