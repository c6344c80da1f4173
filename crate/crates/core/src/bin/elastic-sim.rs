fn main() {
    std::process::exit(elastic_sim::cli::main_with(std::env::args_os()));
}
