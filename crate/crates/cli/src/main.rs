fn main() {
    std::process::exit(sdrformer_cli::run(std::env::args_os()));
}
