fn main() {
    std::process::exit(fewshot_ec::evalcli::cli::run(std::env::args_os()));
}
