fn main() {
    std::process::exit(pareto_debias::cli::run(std::env::args_os()));
}
