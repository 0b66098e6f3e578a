fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(ldmi_cli::cli_dispatch(&argv));
}
