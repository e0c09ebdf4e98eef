fn main() {
    let mut out = String::new();
    let code = umc_cli::main_with_args(std::env::args_os(), &mut out);
    print!("{out}");
    std::process::exit(code);
}
